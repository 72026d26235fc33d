//! Inference-time edits on posterior means: factor swaps between a source and
//! a target, latent traversals, and PPM mosaics of the results.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grad::{Real, Tensor};
use crate::model::{BnMode, LatentLayout, ModelError, XFactorsModel};

#[derive(Debug, Error)]
pub enum EditError {
    #[error("editing requires the model in eval mode")]
    TrainMode,
    #[error("layout mismatch: {0}")]
    Layout(String),
    #[error("factor index {index} out of range for {k} subspaces")]
    FactorIndex { index: usize, k: usize },
    #[error("grid point {point} has width {got}, subspace {factor} has width {want}")]
    GridWidth { point: usize, factor: usize, got: usize, want: usize },
    #[error("mosaic: {0}")]
    Mosaic(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Posterior means of one sample, split per layout.
#[derive(Clone, Debug, PartialEq)]
pub struct MeanLatent<T> {
    pub z_s: Vec<T>,
    pub z_t_parts: Vec<Vec<T>>,
}

impl<T: Real> MeanLatent<T> {
    pub fn matches(&self, layout: &LatentLayout) -> bool {
        self.z_s.len() == layout.dim_s()
            && self.z_t_parts.len() == layout.k()
            && self.z_t_parts.iter().zip(layout.dims_t()).all(|(p, &d)| p.len() == d)
    }

    /// `[z_s ∥ z_t]` as one latent row.
    pub fn flatten(&self) -> Vec<T> {
        let mut z = self.z_s.clone();
        for p in &self.z_t_parts {
            z.extend_from_slice(p);
        }
        z
    }

    fn same_shape(&self, other: &Self) -> bool {
        self.z_s.len() == other.z_s.len()
            && self.z_t_parts.len() == other.z_t_parts.len()
            && self.z_t_parts.iter().zip(&other.z_t_parts).all(|(a, b)| a.len() == b.len())
    }
}

fn require_eval<T: Real>(model: &XFactorsModel<T>) -> Result<(), EditError> {
    if model.mode() != BnMode::Eval {
        return Err(EditError::TrainMode);
    }
    Ok(())
}

/// Posterior means for a batch `[B, C, H, W]`, one [`MeanLatent`] per image.
pub fn embed_means<T: Real>(model: &XFactorsModel<T>, x: &Tensor<T>) -> Result<Vec<MeanLatent<T>>, EditError> {
    require_eval(model)?;
    let (s, t) = model.encode(x)?;
    let layout = model.layout();
    Ok((0..x.shape()[0])
        .map(|r| MeanLatent {
            z_s: s.mu.row(r).to_vec(),
            z_t_parts: (0..layout.k())
                .map(|i| t.mu.row(r)[layout.t_local(i).expect("factor in range")].to_vec())
                .collect(),
        })
        .collect())
}

/// `src` with subspace `i` taken from `tgt`.
pub fn swap_factor<T: Real>(src: &MeanLatent<T>, tgt: &MeanLatent<T>, i: usize) -> Result<MeanLatent<T>, EditError> {
    if !src.same_shape(tgt) {
        return Err(EditError::Layout("source and target latents have different layouts".into()));
    }
    let k = src.z_t_parts.len();
    if i >= k {
        return Err(EditError::FactorIndex { index: i, k });
    }
    let mut out = src.clone();
    out.z_t_parts[i] = tgt.z_t_parts[i].clone();
    Ok(out)
}

/// Decodes latents to images `[B, C, H, W]` in `[0, 1]`.
pub fn decode_edit<T: Real>(model: &XFactorsModel<T>, latents: &[MeanLatent<T>]) -> Result<Tensor<T>, EditError> {
    require_eval(model)?;
    let layout = model.layout();
    if let Some(bad) = latents.iter().position(|l| !l.matches(layout)) {
        return Err(EditError::Layout(format!("latent {bad} does not match the model layout")));
    }
    let data: Vec<T> = latents.iter().flat_map(MeanLatent::flatten).collect();
    let z = Tensor::new(vec![latents.len(), layout.dim_z()], data).map_err(ModelError::from)?;
    Ok(model.decode(&z)?)
}

/// Decodes `base` with subspace `i` set to each grid point in turn.
pub fn traverse<T: Real>(model: &XFactorsModel<T>, base: &MeanLatent<T>, i: usize, grid: &[Vec<T>]) -> Result<Tensor<T>, EditError> {
    let layout = model.layout();
    if i >= layout.k() {
        return Err(EditError::FactorIndex { index: i, k: layout.k() });
    }
    let want = layout.dims_t()[i];
    let mut latents = Vec::with_capacity(grid.len());
    for (point, g) in grid.iter().enumerate() {
        if g.len() != want {
            return Err(EditError::GridWidth {
                point,
                factor: i,
                got: g.len(),
                want,
            });
        }
        let mut l = base.clone();
        l.z_t_parts[i] = g.clone();
        latents.push(l);
    }
    decode_edit(model, &latents)
}

/// Linear interpolation percentile of sorted `v`, `q` in `[0, 1]`.
fn percentile(v: &[f64], q: f64) -> f64 {
    let pos = q * (v.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

/// Regular grid with `steps` points per axis over the 5th–95th percentile box
/// of `values` (one row per sample), in row-major order with the last axis
/// fastest.
pub fn percentile_grid<T: Real>(values: &[Vec<T>], steps: usize) -> Result<Vec<Vec<T>>, EditError> {
    let d = values.first().map_or(0, Vec::len);
    if d == 0 || steps == 0 || values.iter().any(|v| v.len() != d) {
        return Err(EditError::Mosaic("percentile grid needs equal-width, nonempty rows".into()));
    }
    let axes: Vec<Vec<f64>> = (0..d)
        .map(|c| {
            let mut col: Vec<f64> = values.iter().map(|v| v[c].as_f64()).collect();
            col.sort_by(f64::total_cmp);
            let (lo, hi) = (percentile(&col, 0.05), percentile(&col, 0.95));
            (0..steps)
                .map(|s| {
                    if steps == 1 {
                        (lo + hi) / 2.0
                    } else {
                        lo + (hi - lo) * s as f64 / (steps - 1) as f64
                    }
                })
                .collect()
        })
        .collect();
    let total = steps.pow(d as u32);
    Ok((0..total)
        .map(|mut n| {
            let mut p = vec![T::zero(); d];
            for c in (0..d).rev() {
                p[c] = T::lit(axes[c][n % steps]);
                n /= steps;
            }
            p
        })
        .collect())
}

/// Row and column captions stored next to a mosaic.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MosaicSidecar {
    pub rows: Vec<String>,
    pub columns: Vec<String>,
    pub cell_width: usize,
    pub cell_height: usize,
    pub padding: usize,
}

pub const MOSAIC_PADDING: usize = 1;

/// Tiles `images` (`[rows * cols, C, H, W]`, row-major) into one RGB image.
/// Grayscale cells are replicated across channels; padding is white.
pub fn mosaic_rgb<T: Real>(images: &Tensor<T>, rows: usize, cols: usize) -> Result<(usize, usize, Vec<u8>), EditError> {
    let s = images.shape();
    if s.len() != 4 || s[0] != rows * cols || !(s[1] == 1 || s[1] == 3) {
        return Err(EditError::Mosaic(format!("cannot tile {s:?} as {rows} x {cols} grayscale or RGB cells")));
    }
    let (c, h, w) = (s[1], s[2], s[3]);
    let p = MOSAIC_PADDING;
    let (width, height) = (cols * (w + p) + p, rows * (h + p) + p);
    let mut rgb = vec![255u8; width * height * 3];
    let data = images.data();
    for cell in 0..rows * cols {
        let (r, col) = (cell / cols, cell % cols);
        for y in 0..h {
            for x in 0..w {
                let px = ((r * (h + p) + p + y) * width + col * (w + p) + p + x) * 3;
                for ch in 0..3 {
                    let src = if c == 1 { 0 } else { ch };
                    let v = data[((cell * c + src) * h + y) * w + x].as_f64();
                    rgb[px + ch] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
                }
            }
        }
    }
    Ok((width, height, rgb))
}

/// Binary PPM (P6) with maxval 255.
pub fn write_ppm<W: Write>(mut out: W, width: usize, height: usize, rgb: &[u8]) -> Result<(), EditError> {
    if rgb.len() != width * height * 3 {
        return Err(EditError::Mosaic("pixel buffer does not match dimensions".into()));
    }
    write!(out, "P6\n{width} {height}\n255\n")?;
    out.write_all(rgb)?;
    Ok(())
}

/// Writes `path` as a PPM mosaic and `path` with a `.json` extension as its
/// caption sidecar.
pub fn save_mosaic<T: Real>(
    path: &Path,
    images: &Tensor<T>,
    row_labels: Vec<String>,
    column_labels: Vec<String>,
) -> Result<MosaicSidecar, EditError> {
    let (rows, cols) = (row_labels.len(), column_labels.len());
    let (width, height, rgb) = mosaic_rgb(images, rows, cols)?;
    write_ppm(std::io::BufWriter::new(std::fs::File::create(path)?), width, height, &rgb)?;
    let sidecar = MosaicSidecar {
        rows: row_labels,
        columns: column_labels,
        cell_width: images.shape()[3],
        cell_height: images.shape()[2],
        padding: MOSAIC_PADDING,
    };
    let json = serde_json::to_string_pretty(&sidecar).map_err(|e| EditError::Io(e.into()))?;
    std::fs::write(path.with_extension("json"), json)?;
    Ok(sidecar)
}
