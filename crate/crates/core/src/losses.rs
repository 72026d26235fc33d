//! Reconstruction, KL and supervised InfoNCE terms, and their weighted sum
//! `L = reco + β_s·KL_s + β_t·KL_t + Σ λ_i·NCE_i`.
//!
//! Reductions sum over pixels or latent dimensions and average over the batch.

use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grad::{GradError, Real, Tape, Tensor, Var};

/// Added to the diagonal of the similarity matrix so an anchor never counts
/// itself as a candidate.
const SELF_MASK: f64 = -1e30;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error(transparent)]
    Grad(#[from] GradError),
    #[error("info_nce: no anchor has a positive in a batch of {0}")]
    NoPositives(usize),
    #[error("{0}")]
    Shape(String),
    #[error("invalid weights: {0}")]
    Weights(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub beta_s: f64,
    pub beta_t: f64,
    /// One weight per factor subspace.
    pub lambdas: Vec<f64>,
    /// InfoNCE temperature.
    pub tau: f64,
    /// Compare normalized latents instead of the raw dot product.
    #[serde(default)]
    pub cosine: bool,
}

impl LossWeights {
    /// β_s = β_t = 100, λ_i = 0.5, τ = 0.1, raw dot-product similarity.
    pub fn paper(k: usize) -> Self {
        Self {
            beta_s: 100.0,
            beta_t: 100.0,
            lambdas: vec![0.5; k],
            tau: 0.1,
            cosine: false,
        }
    }

    pub fn validate(&self) -> Result<(), LossError> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(LossError::Weights(format!("tau must be positive, got {}", self.tau)));
        }
        let all = [self.beta_s, self.beta_t].into_iter().chain(self.lambdas.iter().copied());
        for w in all {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(LossError::Weights(format!("weights must be finite and nonnegative, got {w}")));
            }
        }
        Ok(())
    }
}

/// Scalar values of every term of one evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub reco: f64,
    pub kl_s: f64,
    pub kl_t: f64,
    pub nce: Vec<f64>,
    pub total: f64,
}

impl LossBreakdown {
    /// The objective recomputed from the stored terms.
    pub fn weighted_sum(&self, w: &LossWeights) -> f64 {
        self.reco + w.beta_s * self.kl_s + w.beta_t * self.kl_t + self.nce.iter().zip(&w.lambdas).map(|(n, l)| n * l).sum::<f64>()
    }

    pub fn is_finite(&self) -> bool {
        [self.reco, self.kl_s, self.kl_t, self.total]
            .iter()
            .chain(&self.nce)
            .all(|v| v.is_finite())
    }
}

/// Tape handles of every term; `kl_s` is absent without a residual subspace.
#[derive(Clone, Debug)]
pub struct LossVars {
    pub reco: Var,
    pub kl_s: Option<Var>,
    pub kl_t: Var,
    pub nce: Vec<Var>,
    pub total: Var,
}

impl LossVars {
    pub fn breakdown<T: Real>(&self, tape: &Tape<T>) -> LossBreakdown {
        let v = |x: Var| tape.value(x).item().as_f64();
        LossBreakdown {
            reco: v(self.reco),
            kl_s: self.kl_s.map_or(0.0, v),
            kl_t: v(self.kl_t),
            nce: self.nce.iter().map(|&n| v(n)).collect(),
            total: v(self.total),
        }
    }
}

fn batch_of<T: Real>(tape: &Tape<T>, x: Var) -> usize {
    tape.shape(x)[0]
}

/// `Σ (x̂ - x)² / B`.
pub fn recon_mse<T: Real>(tape: &mut Tape<T>, x_hat: Var, x: Var) -> Result<Var, LossError> {
    if tape.shape(x_hat) != tape.shape(x) {
        return Err(LossError::Shape(format!("recon_mse: {:?} vs {:?}", tape.shape(x_hat), tape.shape(x))));
    }
    let b = batch_of(tape, x);
    let d = tape.sub(x_hat, x)?;
    let sq = tape.mul(d, d)?;
    let s = tape.sum(sq)?;
    Ok(tape.scale(s, 1.0 / b as f64)?)
}

/// `0.5 · Σ (μ² + exp(log_var) - 1 - log_var) / B` against a standard normal prior.
pub fn kl_gaussian<T: Real>(tape: &mut Tape<T>, mu: Var, log_var: Var) -> Result<Var, LossError> {
    let b = batch_of(tape, mu);
    let mu2 = tape.mul(mu, mu)?;
    let var = tape.exp(log_var)?;
    let a = tape.add(mu2, var)?;
    let a = tape.sub(a, log_var)?;
    let a = tape.add_scalar(a, -1.0)?;
    let s = tape.sum(a)?;
    Ok(tape.scale(s, 0.5 / b as f64)?)
}

/// Rows of `z` divided by their Euclidean norm.
fn normalize_rows<T: Real>(tape: &mut Tape<T>, z: Var) -> Result<Var, GradError> {
    let (b, d) = (tape.shape(z)[0], tape.shape(z)[1]);
    let sq = tape.mul(z, z)?;
    let n2 = tape.sum_axis(sq, 1)?;
    let n2 = tape.add_scalar(n2, 1e-12)?;
    let ln = tape.log(n2)?;
    let half = tape.scale(ln, -0.5)?;
    let inv = tape.exp(half)?;
    let col = tape.reshape(inv, &[b, 1])?;
    let ones = tape.constant(Tensor::full(&[1, d], T::one()));
    let spread = tape.matmul(col, ones)?;
    tape.mul(z, spread)
}

/// Multi-positive supervised InfoNCE over one factor subspace.
///
/// For anchor `a` with positives `P(a)` (same label, not `a`) the loss is
/// `-1/|P(a)| Σ_p log softmax_{c≠a}(z_aᵀz_c/τ)_p`, averaged over anchors that
/// have at least one positive.
pub fn info_nce<T: Real>(tape: &mut Tape<T>, z: Var, labels: &[usize], tau: f64, cosine: bool) -> Result<Var, LossError> {
    let shape = tape.shape(z).to_vec();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(LossError::Shape(format!("info_nce: latents {shape:?} with {} labels", labels.len())));
    }
    let b = labels.len();
    let mut pos_w = vec![T::zero(); b * b];
    let mut anchors = Vec::new();
    for a in 0..b {
        let pos: Vec<usize> = (0..b).filter(|&p| p != a && labels[p] == labels[a]).collect();
        if pos.is_empty() {
            continue;
        }
        anchors.push(a);
        let w = T::lit(1.0 / pos.len() as f64);
        for p in pos {
            pos_w[a * b + p] = w;
        }
    }
    if anchors.is_empty() {
        return Err(LossError::NoPositives(b));
    }
    let mut anchor_w = vec![T::zero(); b];
    for &a in &anchors {
        anchor_w[a] = T::lit(1.0 / anchors.len() as f64);
    }
    let mut mask = vec![T::zero(); b * b];
    for a in 0..b {
        mask[a * b + a] = T::lit(SELF_MASK);
    }

    let z = if cosine { normalize_rows(tape, z)? } else { z };
    let gram = tape.matmul_nt(z, z)?;
    let sim = tape.scale(gram, 1.0 / tau)?;
    let mask = tape.constant(Tensor::new(vec![b, b], mask)?);
    let masked = tape.add(sim, mask)?;
    let lse = tape.logsumexp(masked, 1)?;
    let pos_w = tape.constant(Tensor::new(vec![b, b], pos_w)?);
    let weighted = tape.mul(sim, pos_w)?;
    let pos_mean = tape.sum_axis(weighted, 1)?;
    let per_anchor = tape.sub(lse, pos_mean)?;
    let anchor_w = tape.constant(Tensor::new(vec![b], anchor_w)?);
    let weighted = tape.mul(per_anchor, anchor_w)?;
    Ok(tape.sum(weighted)?)
}

/// `log(B - 1) - L_NCE`, the mutual-information lower bound implied by an
/// InfoNCE value over `batch` samples.
pub fn mi_bound(batch: usize, nce: f64) -> f64 {
    ((batch.max(2) - 1) as f64).ln() - nce
}

/// Combines precomputed terms into the objective. Terms with zero weight
/// are kept for reporting but left out of the differentiated total.
pub fn total_loss<T: Real>(
    tape: &mut Tape<T>,
    reco: Var,
    kl_s: Option<Var>,
    kl_t: Var,
    nce: Vec<Var>,
    weights: &LossWeights,
) -> Result<LossVars, LossError> {
    weights.validate()?;
    if nce.len() != weights.lambdas.len() {
        return Err(LossError::Weights(format!(
            "{} contrastive terms but {} lambdas",
            nce.len(),
            weights.lambdas.len()
        )));
    }
    let mut total = reco;
    let mut add = |tape: &mut Tape<T>, v: Var, w: f64| -> Result<(), GradError> {
        if w != 0.0 {
            let s = tape.scale(v, w)?;
            total = tape.add(total, s)?;
        }
        Ok(())
    };
    if let Some(k) = kl_s {
        add(tape, k, weights.beta_s)?;
    }
    add(tape, kl_t, weights.beta_t)?;
    for (&n, &l) in nce.iter().zip(&weights.lambdas) {
        add(tape, n, l)?;
    }
    Ok(LossVars {
        reco,
        kl_s,
        kl_t,
        nce,
        total,
    })
}

/// Header of the per-step training log.
pub fn log_header(k: usize) -> String {
    let mut cols = vec!["step".to_string(), "reco".into(), "kl_s".into(), "kl_t".into()];
    cols.extend((1..=k).map(|i| format!("nce_{i}")));
    cols.push("total".into());
    cols.extend((1..=k).map(|i| format!("mi_bound_{i}")));
    cols.join(",")
}

/// Appends one log row: the breakdown followed by per-factor MI bounds.
pub fn write_log_row<W: Write>(out: &mut W, step: u64, b: &LossBreakdown, batch: usize) -> std::io::Result<()> {
    let mut cols = vec![step.to_string(), b.reco.to_string(), b.kl_s.to_string(), b.kl_t.to_string()];
    cols.extend(b.nce.iter().map(|v| v.to_string()));
    cols.push(b.total.to_string());
    cols.extend(b.nce.iter().map(|&v| mi_bound(batch, v).to_string()));
    writeln!(out, "{}", cols.join(","))
}
