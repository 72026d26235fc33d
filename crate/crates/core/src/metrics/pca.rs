use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use super::MetricError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pca2 {
    /// `N x 2` row-major scores on the two leading components.
    pub projection: Vec<f64>,
    /// Two unit components of length `d`, each with its largest-magnitude
    /// coordinate positive.
    pub components: [Vec<f64>; 2],
    /// `(λ₁ + λ₂) / Σ λ`.
    pub explained: f64,
}

/// Leading two principal components of the `n x d` row-major `codes`.
pub fn pca_top2(codes: &[f64], n: usize, d: usize) -> Result<Pca2, MetricError> {
    if d < 2 {
        return Err(MetricError::Input(format!("PCA needs at least 2 dimensions, got {d}")));
    }
    if n < 3 || codes.len() != n * d {
        return Err(MetricError::Input(format!(
            "PCA needs at least 3 rows of width {d}, got {} values",
            codes.len()
        )));
    }
    let mut x = DMatrix::from_row_slice(n, d, codes);
    for c in 0..d {
        let mean = x.column(c).mean();
        x.column_mut(c).add_scalar_mut(-mean);
    }
    let cov = (x.transpose() * &x) / (n as f64 - 1.0);
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let total: f64 = eig.eigenvalues.iter().map(|v| v.max(0.0)).sum();
    let lead = |k: usize| {
        let mut v: Vec<f64> = eig.eigenvectors.column(order[k]).iter().copied().collect();
        let big = v.iter().copied().fold(0.0f64, |m, c| if c.abs() > m.abs() { c } else { m });
        if big < 0.0 {
            v.iter_mut().for_each(|c| *c = -*c);
        }
        v
    };
    let components = [lead(0), lead(1)];
    let explained = if total > 0.0 {
        (eig.eigenvalues[order[0]].max(0.0) + eig.eigenvalues[order[1]].max(0.0)) / total
    } else {
        0.0
    };
    let mut projection = Vec::with_capacity(2 * n);
    for r in 0..n {
        let row = x.row(r);
        for comp in &components {
            projection.push(row.iter().zip(comp).map(|(a, b)| a * b).sum());
        }
    }
    Ok(Pca2 {
        projection,
        components,
        explained,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn gaussian(n: usize, d: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n * d).map(|_| StandardNormal.sample(&mut rng)).collect()
    }

    #[test]
    fn planar_data_is_fully_explained() {
        let basis = gaussian(2, 10, 1);
        let coeffs = gaussian(200, 2, 2);
        let mut codes = vec![0.0; 200 * 10];
        for r in 0..200 {
            for c in 0..10 {
                codes[r * 10 + c] = coeffs[2 * r] * basis[c] + coeffs[2 * r + 1] * basis[10 + c] + 3.0;
            }
        }
        let p = pca_top2(&codes, 200, 10).unwrap();
        assert!((p.explained - 1.0).abs() < 1e-8, "{}", p.explained);
    }

    #[test]
    fn isotropic_gaussian_explains_two_over_d() {
        for d in [5, 10, 20] {
            let p = pca_top2(&gaussian(20_000, d, d as u64), 20_000, d).unwrap();
            let want = 2.0 / d as f64;
            assert!((p.explained - want).abs() < 0.2 * want, "d={d}: {}", p.explained);
        }
    }

    #[test]
    fn rotation_commutes_with_projection_up_to_sign() {
        // Anisotropic data so the leading components are well separated.
        let n = 300;
        let mut codes = gaussian(n, 3, 4);
        for r in 0..n {
            codes[3 * r] *= 5.0;
            codes[3 * r + 1] *= 2.0;
        }
        let (c, s) = (0.6f64, 0.8f64);
        let rotated: Vec<f64> = codes.chunks(3).flat_map(|v| [c * v[0] - s * v[1], s * v[0] + c * v[1], v[2]]).collect();
        let a = pca_top2(&codes, n, 3).unwrap();
        let b = pca_top2(&rotated, n, 3).unwrap();
        for k in 0..2 {
            let same: f64 = (0..n)
                .map(|r| (a.projection[2 * r + k] - b.projection[2 * r + k]).abs())
                .fold(0.0, f64::max);
            let flip: f64 = (0..n)
                .map(|r| (a.projection[2 * r + k] + b.projection[2 * r + k]).abs())
                .fold(0.0, f64::max);
            assert!(same.min(flip) < 1e-8, "component {k}: {same} {flip}");
        }
    }

    #[test]
    fn sign_convention_and_errors() {
        let p = pca_top2(&gaussian(50, 4, 9), 50, 4).unwrap();
        for comp in &p.components {
            let big = comp.iter().copied().fold(0.0f64, |m, c| if c.abs() > m.abs() { c } else { m });
            assert!(big > 0.0);
        }
        assert!(pca_top2(&[0.0; 10], 10, 1).is_err());
        assert!(pca_top2(&[0.0; 4], 2, 2).is_err());
    }
}
