//! Rasterized scatter plots of latent subspaces.

use xfactors::grad::Tensor;

pub const CELL: usize = 96;
const DOT: usize = 2;

/// Fixed color for value `v` of a factor with `card` values: hues spread
/// evenly around the wheel at full saturation, slightly darkened.
pub fn palette(v: usize, card: usize) -> [f64; 3] {
    let h = if card <= 1 { 0.0 } else { v as f64 / card as f64 * 6.0 };
    let x = 1.0 - ((h % 2.0) - 1.0).abs();
    let (r, g, b) = match h as usize {
        0 => (1.0, x, 0.0),
        1 => (x, 1.0, 0.0),
        2 => (0.0, 1.0, x),
        3 => (0.0, x, 1.0),
        4 => (x, 0.0, 1.0),
        _ => (1.0, 0.0, x),
    };
    [r * 0.85, g * 0.85, b * 0.85]
}

/// One `3 x CELL x CELL` cell with `points` drawn in order over white.
pub fn scatter(points: &[(f64, f64)], colors: &[[f64; 3]]) -> Vec<f64> {
    let mut px = vec![1.0; 3 * CELL * CELL];
    if points.is_empty() {
        return px;
    }
    let span = |f: fn(&(f64, f64)) -> f64| {
        let lo = points.iter().map(f).fold(f64::INFINITY, f64::min);
        let hi = points.iter().map(f).fold(f64::NEG_INFINITY, f64::max);
        let pad = ((hi - lo) * 0.05).max(1e-9);
        (lo - pad, hi + pad)
    };
    let (x0, x1) = span(|p| p.0);
    let (y0, y1) = span(|p| p.1);
    let usable = (CELL - DOT) as f64;
    for (p, c) in points.iter().zip(colors) {
        let cx = ((p.0 - x0) / (x1 - x0) * usable).round() as usize;
        // Larger y plots higher.
        let cy = ((y1 - p.1) / (y1 - y0) * usable).round() as usize;
        for dy in 0..DOT {
            for dx in 0..DOT {
                let (x, y) = ((cx + dx).min(CELL - 1), (cy + dy).min(CELL - 1));
                for ch in 0..3 {
                    px[(ch * CELL + y) * CELL + x] = c[ch];
                }
            }
        }
    }
    px
}

/// Stacks cells into a `[n, 3, CELL, CELL]` tensor.
pub fn cells_tensor(cells: Vec<Vec<f64>>) -> Tensor<f64> {
    let n = cells.len();
    Tensor::new(vec![n, 3, CELL, CELL], cells.concat()).expect("cell extent")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn palette_is_distinct_per_value() {
        let colors: Vec<[f64; 3]> = (0..8).map(|v| palette(v, 8)).collect();
        for i in 0..8 {
            for j in i + 1..8 {
                assert_ne!(colors[i], colors[j]);
            }
        }
    }

    #[test]
    fn scatter_places_extremes_in_corners() {
        let px = scatter(&[(0.0, 0.0), (1.0, 1.0)], &[[0.0; 3], [0.5; 3]]);
        let at = |x: usize, y: usize| px[y * CELL + x];
        // Low point near the bottom-left, high point near the top-right.
        assert!((0..CELL).any(|y| y > CELL / 2 && (0..CELL / 2).any(|x| px[y * CELL + x] == 0.0)));
        assert!((0..CELL / 2).any(|y| (CELL / 2..CELL).any(|x| at(x, y) == 0.5)));
    }
}
