use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::ModelError;
use crate::grad::{Real, Tensor};

/// Partition of the latent vector into `S ⊕ T_1 ⊕ ... ⊕ T_K`, laid out in
/// that order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatentLayout {
    dim_s: usize,
    dims_t: Vec<usize>,
}

impl LatentLayout {
    pub fn new(dim_s: usize, dims_t: Vec<usize>) -> Result<Self, ModelError> {
        if let Some(i) = dims_t.iter().position(|&d| d == 0) {
            return Err(ModelError::Layout(format!("factor subspace {i} has zero width")));
        }
        if dim_s + dims_t.iter().sum::<usize>() == 0 {
            return Err(ModelError::Layout("latent space is empty".into()));
        }
        Ok(Self { dim_s, dims_t })
    }

    /// `k` factor subspaces of `width` each.
    pub fn uniform(dim_s: usize, k: usize, width: usize) -> Result<Self, ModelError> {
        Self::new(dim_s, vec![width; k])
    }

    pub fn dim_s(&self) -> usize {
        self.dim_s
    }

    pub fn dims_t(&self) -> &[usize] {
        &self.dims_t
    }

    pub fn k(&self) -> usize {
        self.dims_t.len()
    }

    pub fn dim_t(&self) -> usize {
        self.dims_t.iter().sum()
    }

    pub fn dim_z(&self) -> usize {
        self.dim_s + self.dim_t()
    }

    /// Columns of S within z.
    pub fn s_range(&self) -> Range<usize> {
        0..self.dim_s
    }

    /// Columns of T_i within z_t.
    pub fn t_local(&self, i: usize) -> Result<Range<usize>, ModelError> {
        if i >= self.k() {
            return Err(ModelError::Layout(format!("factor index {i} out of range for {} subspaces", self.k())));
        }
        let start: usize = self.dims_t[..i].iter().sum();
        Ok(start..start + self.dims_t[i])
    }

    /// Columns of T_i within z.
    pub fn t_range(&self, i: usize) -> Result<Range<usize>, ModelError> {
        let r = self.t_local(i)?;
        Ok(r.start + self.dim_s..r.end + self.dim_s)
    }
}

/// Gaussian posterior parameters of one encoder, each `[B, d]`.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianCode<T> {
    pub mu: Tensor<T>,
    pub log_var: Tensor<T>,
}

impl<T: Real> GaussianCode<T> {
    pub fn width(&self) -> usize {
        self.mu.shape()[1]
    }

    pub fn batch(&self) -> usize {
        self.mu.shape()[0]
    }
}

fn columns<T: Real>(x: &Tensor<T>, range: Range<usize>) -> Tensor<T> {
    let (b, d) = (x.shape()[0], x.shape()[1]);
    let mut data = Vec::with_capacity(b * range.len());
    for r in 0..b {
        data.extend_from_slice(&x.data()[r * d + range.start..r * d + range.end]);
    }
    Tensor::new(vec![b, range.len()], data).expect("column extent")
}

fn expect_width<T: Real>(x: &Tensor<T>, width: usize, what: &str) -> Result<(), ModelError> {
    if x.rank() != 2 || x.shape()[1] != width {
        return Err(ModelError::Shape(format!("{what}: expected [B, {width}], got {:?}", x.shape())));
    }
    Ok(())
}

/// `[z_s ∥ z_t]`, row by row.
pub fn assemble_latent<T: Real>(z_s: &Tensor<T>, z_t: &Tensor<T>, layout: &LatentLayout) -> Result<Tensor<T>, ModelError> {
    expect_width(z_s, layout.dim_s(), "z_s")?;
    expect_width(z_t, layout.dim_t(), "z_t")?;
    let b = z_t.shape()[0];
    if z_s.shape()[0] != b {
        return Err(ModelError::Shape(format!("z_s has {} rows, z_t has {b}", z_s.shape()[0])));
    }
    let mut data = Vec::with_capacity(b * layout.dim_z());
    for r in 0..b {
        data.extend_from_slice(z_s.row(r));
        data.extend_from_slice(z_t.row(r));
    }
    Ok(Tensor::new(vec![b, layout.dim_z()], data)?)
}

/// Columns of z_t belonging to factor subspace `i`.
pub fn slice_factor<T: Real>(z_t: &Tensor<T>, layout: &LatentLayout, i: usize) -> Result<Tensor<T>, ModelError> {
    expect_width(z_t, layout.dim_t(), "z_t")?;
    Ok(columns(z_t, layout.t_local(i)?))
}

/// Splits a full latent `z` back into `(z_s, z_t)`.
pub fn split_latent<T: Real>(z: &Tensor<T>, layout: &LatentLayout) -> Result<(Tensor<T>, Tensor<T>), ModelError> {
    expect_width(z, layout.dim_z(), "z")?;
    Ok((columns(z, layout.s_range()), columns(z, layout.dim_s()..layout.dim_z())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn ranges() {
        let l = LatentLayout::new(5, vec![2, 2]).unwrap();
        assert_eq!(l.dim_z(), 9);
        assert_eq!(l.t_range(1).unwrap(), 7..9);
        assert_eq!(l.t_local(1).unwrap(), 2..4);
        assert!(l.t_range(2).is_err());
        assert!(LatentLayout::new(3, vec![2, 0]).is_err());
        assert!(LatentLayout::new(0, vec![]).is_err());
    }

    #[test]
    fn empty_s_latent_is_z_t() {
        let l = LatentLayout::uniform(0, 2, 2).unwrap();
        let z_s = Tensor::<f64>::zeros(&[3, 0]);
        let z_t = Tensor::from_f64(&[3, 4], &(0..12).map(f64::from).collect::<Vec<_>>()).unwrap();
        assert_eq!(assemble_latent(&z_s, &z_t, &l).unwrap(), z_t);
    }

    proptest! {
        #[test]
        fn slices_partition_the_latent(dim_s in 0usize..6, dims in proptest::collection::vec(1usize..4, 1..5)) {
            let l = LatentLayout::new(dim_s, dims.clone()).unwrap();
            let mut covered = vec![0u8; l.dim_z()];
            for c in l.s_range() {
                covered[c] += 1;
            }
            for i in 0..l.k() {
                for c in l.t_range(i).unwrap() {
                    covered[c] += 1;
                }
            }
            prop_assert!(covered.iter().all(|&c| c == 1));
            prop_assert_eq!(l.dim_z(), dim_s + dims.iter().sum::<usize>());
        }

        #[test]
        fn assemble_and_slice_round_trip(dim_s in 0usize..4, dims in proptest::collection::vec(1usize..4, 1..4), b in 1usize..4) {
            let l = LatentLayout::new(dim_s, dims).unwrap();
            let vals: Vec<f64> = (0..b * l.dim_z()).map(|v| v as f64).collect();
            let z = Tensor::<f64>::from_f64(&[b, l.dim_z()], &vals).unwrap();
            let (z_s, z_t) = split_latent(&z, &l).unwrap();
            prop_assert_eq!(&assemble_latent(&z_s, &z_t, &l).unwrap(), &z);
            for i in 0..l.k() {
                let part = slice_factor(&z_t, &l, i).unwrap();
                let r = l.t_range(i).unwrap();
                for row in 0..b {
                    prop_assert_eq!(part.row(row), &z.row(row)[r.clone()]);
                }
            }
        }
    }
}
