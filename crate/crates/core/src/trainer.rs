//! Training loop: encode, reparameterize, decode, score, backprop, Adam.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::data::{encode as encode_dataset, sample_contrastive_batch, ContrastiveBatch, DataError, FactorizedDataset};
use crate::grad::{GradError, ParamStore, Real, Tape, Tensor};
use crate::losses::{info_nce, kl_gaussian, log_header, recon_mse, total_loss, write_log_row, LossBreakdown, LossError, LossVars, LossWeights};
use crate::model::{
    reparameterize_vars, save_checkpoint, standard_normal, BatchNormRecord, BnMode, Bound, Checkpoint, LatentLayout, ModelConfig, ModelError,
    Moments, RunRecord, XFactorsModel,
};

pub const LOG_FILE: &str = "train_log.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.xfck";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("config: {0}")]
    Config(String),
    #[error("non-finite loss at step {step}: {breakdown:?}")]
    NonFinite { step: u64, breakdown: LossBreakdown },
    #[error("numeric failure at step {step}: {source}")]
    Numeric { step: u64, source: GradError },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Grad(#[from] GradError),
    #[error("evaluation hook failed: {0}")]
    Eval(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam: AdamConfig,
    pub weights: LossWeights,
    pub seed: u64,
    /// Run the evaluation hook every this many epochs; 0 disables it.
    pub eval_every: usize,
    /// Global gradient-norm ceiling; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl TrainConfig {
    /// Desk-scale defaults: batch 64, 30 epochs, Adam at 1e-3, clip at 10.
    pub fn desk(k: usize, seed: u64) -> Self {
        Self {
            epochs: 30,
            batch_size: 64,
            learning_rate: 1e-3,
            adam: AdamConfig::default(),
            weights: LossWeights::paper(k),
            seed,
            eval_every: 0,
            clip_norm: Some(10.0),
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch_size < 4 {
            return Err(TrainError::Config(format!("batch size must be at least 4, got {}", self.batch_size)));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(TrainError::Config(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(TrainError::Config(format!("clip norm must be positive, got {c}")));
            }
        }
        self.weights.validate()?;
        Ok(())
    }

    pub fn steps_per_epoch(&self, pool: usize) -> u64 {
        pool.div_ceil(self.batch_size) as u64
    }
}

/// Everything needed to continue a run bit-identically.
#[derive(Clone, Debug)]
pub struct RunState<T> {
    pub step: u64,
    pub model: XFactorsModel<T>,
    pub moments: Moments<T>,
    pub rng: ChaCha8Rng,
    /// Best evaluation score seen so far and the epoch it was reached.
    pub best: Option<(u64, f64)>,
}

fn zero_moments<T: Real>(params: &ParamStore<T>) -> Moments<T> {
    let zeros = || params.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
    Moments {
        t: 0,
        m: zeros(),
        v: zeros(),
    }
}

impl<T: Real> RunState<T> {
    /// Fresh run: model initialized from `seed`, data and noise drawn from a
    /// separate stream of the same seed.
    pub fn new(model_cfg: ModelConfig, seed: u64) -> Result<Self, TrainError> {
        let model = XFactorsModel::new(model_cfg, seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        Ok(Self {
            step: 0,
            moments: zero_moments(model.params()),
            model,
            rng,
            best: None,
        })
    }

    pub fn from_checkpoint(ck: Checkpoint<T>) -> Result<Self, TrainError> {
        let run = ck.run.ok_or_else(|| TrainError::Config("checkpoint carries no run state".into()))?;
        let moments = match ck.moments {
            Some(m) => m,
            None => zero_moments(ck.model.params()),
        };
        let mut rng = ChaCha8Rng::from_seed(run.rng_seed);
        rng.set_stream(run.rng_stream);
        rng.set_word_pos(run.rng_word_pos);
        Ok(Self {
            step: run.step,
            model: ck.model,
            moments,
            rng,
            best: None,
        })
    }

    pub fn to_checkpoint(&self) -> Checkpoint<T> {
        Checkpoint {
            model: self.model.clone(),
            moments: Some(self.moments.clone()),
            run: Some(RunRecord {
                step: self.step,
                rng_seed: self.rng.get_seed(),
                rng_stream: self.rng.get_stream(),
                rng_word_pos: self.rng.get_word_pos(),
            }),
        }
    }
}

/// Bias-corrected Adam step on the accumulated gradients of `params`.
pub fn adam_update<T: Real>(params: &mut ParamStore<T>, moments: &mut Moments<T>, lr: f64, cfg: &AdamConfig) {
    moments.t += 1;
    let t = moments.t as i32;
    let (b1, b2) = (T::lit(cfg.beta1), T::lit(cfg.beta2));
    let c1 = T::lit(1.0 - cfg.beta1.powi(t));
    let c2 = T::lit(1.0 - cfg.beta2.powi(t));
    let (lr, eps) = (T::lit(lr), T::lit(cfg.eps));
    let one = T::one();
    for ((p, m), v) in params.iter_mut().zip(&mut moments.m).zip(&mut moments.v) {
        let g = p.grad.data();
        let w = p.value.data_mut();
        for i in 0..w.len() {
            let gi = g[i];
            let mi = b1 * m.data()[i] + (one - b1) * gi;
            let vi = b2 * v.data()[i] + (one - b2) * gi * gi;
            m.data_mut()[i] = mi;
            v.data_mut()[i] = vi;
            w[i] -= lr * (mi / c1) / ((vi / c2).sqrt() + eps);
        }
    }
}

/// Rescales gradients so their global norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_grad_norm<T: Real>(params: &mut ParamStore<T>, max_norm: f64) -> f64 {
    let norm = params.grad_norm();
    if norm > max_norm {
        let s = T::lit(max_norm / norm);
        for p in params.iter_mut() {
            p.grad.data_mut().iter_mut().for_each(|g| *g *= s);
        }
    }
    norm
}

/// Reparameterization noise for one batch, drawn s first then t.
#[derive(Clone, Debug)]
pub struct Noise<T> {
    pub eps_s: Option<Tensor<T>>,
    pub eps_t: Tensor<T>,
}

impl<T: Real> Noise<T> {
    pub fn draw<R: rand::Rng>(layout: &LatentLayout, batch: usize, rng: &mut R) -> Self {
        let eps_s = (layout.dim_s() > 0).then(|| standard_normal(&[batch, layout.dim_s()], rng));
        let eps_t = standard_normal(&[batch, layout.dim_t()], rng);
        Self { eps_s, eps_t }
    }
}

fn lift_model(e: ModelError) -> TrainError {
    match e {
        ModelError::Grad(g) => TrainError::Grad(g),
        other => TrainError::Model(other),
    }
}

fn lift_loss(e: LossError) -> TrainError {
    match e {
        LossError::Grad(g) => TrainError::Grad(g),
        other => TrainError::Loss(other),
    }
}

/// Records the full objective for `batch` on `tape`: reconstruction, both KL
/// terms and one InfoNCE term per supervised factor on its slice of the
/// sampled z_t.
#[allow(clippy::too_many_arguments)]
pub fn batch_loss<T: Real>(
    tape: &mut Tape<T>,
    model: &XFactorsModel<T>,
    bound: &Bound,
    ds: &FactorizedDataset,
    batch: &ContrastiveBatch,
    noise: Noise<T>,
    weights: &LossWeights,
    record: &mut BatchNormRecord,
) -> Result<LossVars, TrainError> {
    let layout = model.layout();
    let supervised = ds.supervised();
    if supervised.len() != layout.k() {
        return Err(TrainError::Config(format!(
            "dataset has {} supervised factors, layout has {} subspaces",
            supervised.len(),
            layout.k()
        )));
    }
    let x = tape.constant(batch.images::<T>(ds));
    let (code_s, code_t) = model.encode_vars(tape, bound, x, record).map_err(lift_model)?;
    let z_s = match (code_s, noise.eps_s) {
        (Some(c), Some(eps)) => Some(reparameterize_vars(tape, c, eps)?),
        (None, None) => None,
        _ => return Err(TrainError::Config("noise does not match the residual code".into())),
    };
    let z_t = reparameterize_vars(tape, code_t, noise.eps_t)?;
    let z = match z_s {
        Some(zs) => tape.concat(&[zs, z_t], 1)?,
        None => z_t,
    };
    let x_hat = model.decode_vars(tape, bound, z, record).map_err(lift_model)?;

    let reco = recon_mse(tape, x_hat, x).map_err(lift_loss)?;
    let kl_s = match code_s {
        Some(c) => Some(kl_gaussian(tape, c.mu, c.log_var).map_err(lift_loss)?),
        None => None,
    };
    let kl_t = kl_gaussian(tape, code_t.mu, code_t.log_var).map_err(lift_loss)?;
    let mut nce = Vec::with_capacity(layout.k());
    for (i, &f) in supervised.iter().enumerate() {
        let r = layout.t_local(i)?;
        let part = tape.slice(z_t, 1, r.start, r.end)?;
        let labels = batch.factor_labels(f, ds.num_factors());
        nce.push(info_nce(tape, part, &labels, weights.tau, weights.cosine).map_err(lift_loss)?);
    }
    total_loss(tape, reco, kl_s, kl_t, nce, weights).map_err(lift_loss)
}

/// One optimization step on `batch`.
pub fn train_step<T: Real>(
    state: &mut RunState<T>,
    cfg: &TrainConfig,
    ds: &FactorizedDataset,
    batch: &ContrastiveBatch,
) -> Result<LossBreakdown, TrainError> {
    if state.model.mode() != BnMode::Train {
        return Err(TrainError::Config("train_step requires the model in train mode".into()));
    }
    let step = state.step + 1;
    let at_step = |e: TrainError| match e {
        TrainError::Grad(source) => TrainError::Numeric { step, source },
        other => other,
    };

    let noise = Noise::draw(state.model.layout(), batch.len(), &mut state.rng);
    let mut tape = Tape::new();
    let bound = state.model.bind(&mut tape, true);
    let mut rec = BatchNormRecord::default();
    let vars = batch_loss(&mut tape, &state.model, &bound, ds, batch, noise, &cfg.weights, &mut rec).map_err(at_step)?;
    let breakdown = vars.breakdown(&tape);
    if !breakdown.is_finite() {
        return Err(TrainError::NonFinite { step, breakdown });
    }

    let grads = tape.backward(vars.total).map_err(|source| TrainError::Numeric { step, source })?;
    let model = &mut state.model;
    model.params_mut().zero_grads();
    model.params_mut().accumulate(&grads, &bound.params);
    if let Some(c) = cfg.clip_norm {
        clip_grad_norm(model.params_mut(), c);
    }
    adam_update(model.params_mut(), &mut state.moments, cfg.learning_rate, &cfg.adam);
    model.commit_batch_stats(&tape, &rec);
    state.step = step;
    Ok(breakdown)
}

/// Hex sha256 over `"blob {len}\0"` followed by the bytes, as git does for
/// its object ids.
pub fn git_style_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    hex::encode(h.finalize())
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct DatasetRecord {
    pub hash: String,
    pub samples: usize,
    pub pool: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Manifest {
    /// Caller-supplied configuration document, echoed unchanged.
    pub config: Option<serde_json::Value>,
    pub train: TrainConfig,
    pub model: ModelConfig,
    pub dataset: DatasetRecord,
    pub precision: String,
    pub steps: u64,
    pub final_loss: Option<LossBreakdown>,
}

pub type EvalHook<'a, T> = Box<dyn FnMut(&XFactorsModel<T>, u64) -> Result<f64, String> + 'a>;

#[derive(Default)]
pub struct FitOptions<'a, T> {
    /// Directory receiving the log CSV, final checkpoint and manifest.
    pub out_dir: Option<&'a Path>,
    pub resume: Option<Checkpoint<T>>,
    /// Called with an eval-mode copy of the model every `eval_every` epochs;
    /// returns a score where larger is better.
    pub on_eval: Option<EvalHook<'a, T>>,
    pub config_echo: Option<serde_json::Value>,
}

pub struct FitResult<T> {
    pub state: RunState<T>,
    /// `(step, breakdown)` for every step taken in this call.
    pub log: Vec<(u64, LossBreakdown)>,
    /// `(epoch, score)` from the evaluation hook.
    pub evals: Vec<(u64, f64)>,
}

fn check_coverage(ds: &FactorizedDataset, pool: &[usize]) -> Result<(), TrainError> {
    for f in ds.supervised() {
        let mut counts = vec![0usize; ds.specs()[f].cardinality];
        for &i in pool {
            counts[ds.label(i, f)] += 1;
        }
        if let Some(v) = counts.iter().position(|&c| c < 2) {
            return Err(TrainError::Config(format!(
                "factor {} value {v} has {} training samples, need at least 2",
                ds.specs()[f].name,
                counts[v]
            )));
        }
    }
    Ok(())
}

/// Trains for `cfg.epochs` epochs of `⌈|pool| / batch⌉` steps over the
/// samples `pool` of `ds`, continuing from `opts.resume` when given.
pub fn fit<T: Real>(
    cfg: &TrainConfig,
    model_cfg: &ModelConfig,
    ds: &FactorizedDataset,
    pool: &[usize],
    opts: FitOptions<'_, T>,
) -> Result<FitResult<T>, TrainError> {
    cfg.validate()?;
    if cfg.weights.lambdas.len() != model_cfg.layout.k() {
        return Err(TrainError::Config(format!(
            "{} lambdas for {} factor subspaces",
            cfg.weights.lambdas.len(),
            model_cfg.layout.k()
        )));
    }
    if ds.supervised().len() != model_cfg.layout.k() {
        return Err(TrainError::Config(format!(
            "dataset has {} supervised factors, layout has {} subspaces",
            ds.supervised().len(),
            model_cfg.layout.k()
        )));
    }
    if ds.image_shape() != model_cfg.image_shape {
        return Err(TrainError::Config(format!(
            "dataset images are {:?}, model expects {:?}",
            ds.image_shape(),
            model_cfg.image_shape
        )));
    }
    check_coverage(ds, pool)?;

    let resumed = opts.resume.is_some();
    let mut state = match opts.resume {
        Some(ck) => {
            if ck.model.config() != model_cfg {
                return Err(TrainError::Config("checkpoint architecture differs from the model config".into()));
            }
            RunState::from_checkpoint(ck)?
        }
        None => RunState::new(model_cfg.clone(), cfg.seed)?,
    };
    state.model.set_mode(BnMode::Train);

    let mut log_out = match opts.out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            let path = dir.join(LOG_FILE);
            let fresh = !(resumed && path.exists());
            let file = if fresh {
                File::create(&path)?
            } else {
                OpenOptions::new().append(true).open(&path)?
            };
            let mut w = BufWriter::new(file);
            if fresh {
                writeln!(w, "{}", log_header(model_cfg.layout.k()))?;
            }
            Some(w)
        }
        None => None,
    };

    let spe = cfg.steps_per_epoch(pool.len());
    let total = cfg.epochs as u64 * spe;
    let mut on_eval = opts.on_eval;
    let mut log = Vec::new();
    let mut evals = Vec::new();
    while state.step < total {
        let batch = sample_contrastive_batch(ds, pool, cfg.batch_size, &mut state.rng)?;
        let breakdown = train_step(&mut state, cfg, ds, &batch)?;
        if let Some(w) = log_out.as_mut() {
            write_log_row(w, state.step, &breakdown, batch.len())?;
        }
        log.push((state.step, breakdown));
        let epoch = state.step / spe;
        if state.step.is_multiple_of(spe) && cfg.eval_every > 0 && epoch.is_multiple_of(cfg.eval_every as u64) {
            if let Some(hook) = on_eval.as_mut() {
                let mut frozen = state.model.clone();
                frozen.set_mode(BnMode::Eval);
                let score = hook(&frozen, epoch).map_err(TrainError::Eval)?;
                evals.push((epoch, score));
                if state.best.is_none_or(|(_, b)| score > b) {
                    state.best = Some((epoch, score));
                }
            }
        }
    }
    if let Some(mut w) = log_out {
        w.flush()?;
    }

    if let Some(dir) = opts.out_dir {
        save_checkpoint(&state.to_checkpoint(), &dir.join(CHECKPOINT_FILE))?;
        let manifest = Manifest {
            config: opts.config_echo,
            train: cfg.clone(),
            model: model_cfg.clone(),
            dataset: DatasetRecord {
                hash: git_style_hash(&encode_dataset(ds)),
                samples: ds.len(),
                pool: pool.len(),
            },
            precision: T::NAME.to_string(),
            steps: state.step,
            final_loss: log.last().map(|(_, b)| b.clone()),
        };
        let json = serde_json::to_string_pretty(&manifest).map_err(|e| TrainError::Io(e.into()))?;
        std::fs::write(dir.join(MANIFEST_FILE), json)?;
    }
    Ok(FitResult { state, log, evals })
}
