//! The XFactors network: two parallel variational encoders `psi_s`, `psi_t`,
//! a partitioned latent `[z_s ∥ z_t]` and a decoder `phi`.

mod checkpoint;
mod layout;
mod net;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grad::{GradError, ParamStore, Real, Tape, Tensor, Var};

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint, Moments, RunRecord};
pub use layout::{assemble_latent, slice_factor, split_latent, GaussianCode, LatentLayout};
pub use net::{BatchNormRecord, RunningStats};

use net::{Builder, Ctx, Layer, Net};

/// Bounds of the posterior log-variance on the forward path.
pub const LOG_VAR_CLAMP: f64 = 12.0;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Grad(#[from] GradError),
    #[error("layout: {0}")]
    Layout(String),
    #[error("shape: {0}")]
    Shape(String),
    #[error("config: {0}")]
    Config(String),
    #[error("checkpoint parse error at byte {offset}: {detail}")]
    Parse { offset: u64, detail: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    /// Fully connected encoders and decoder, one hidden layer per width.
    Mlp,
    /// Strided-conv encoders and transposed-conv decoder with three widths.
    Conv,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BnMode {
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub arch: Arch,
    pub layout: LatentLayout,
    /// `[C, H, W]` of the input images.
    pub image_shape: [usize; 3],
    /// Hidden widths (mlp) or the three stage channel counts (conv).
    pub widths: Vec<usize>,
    /// Whether the residual encoder `psi_s` exists at all.
    pub residual_encoder: bool,
    pub slope: f64,
    pub bn_eps: f64,
    pub bn_momentum: f64,
}

impl ModelConfig {
    pub fn mlp(layout: LatentLayout, image_shape: [usize; 3]) -> Self {
        Self {
            arch: Arch::Mlp,
            layout,
            image_shape,
            widths: vec![256, 256],
            residual_encoder: true,
            slope: 0.01,
            bn_eps: 1e-5,
            bn_momentum: 0.1,
        }
    }

    pub fn conv(layout: LatentLayout, image_shape: [usize; 3]) -> Self {
        Self {
            arch: Arch::Conv,
            widths: vec![48, 96, 192],
            ..Self::mlp(layout, image_shape)
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |s: String| Err(ModelError::Config(s));
        if self.image_shape.contains(&0) {
            return bad(format!("image shape {:?} has a zero extent", self.image_shape));
        }
        if !self.residual_encoder && self.layout.dim_s() > 0 {
            return bad(format!("dim_s = {} requires the residual encoder", self.layout.dim_s()));
        }
        if self.layout.k() == 0 {
            return bad("at least one factor subspace is required".into());
        }
        if self.widths.contains(&0) {
            return bad(format!("zero width in {:?}", self.widths));
        }
        match self.arch {
            Arch::Mlp if self.widths.is_empty() => bad("mlp needs at least one hidden width".into()),
            Arch::Conv => {
                let [_, h, w] = self.image_shape;
                if self.widths.len() != 3 {
                    bad(format!("conv needs exactly 3 widths, got {:?}", self.widths))
                } else if h % 8 != 0 || w % 8 != 0 {
                    bad(format!("conv needs height and width divisible by 8, got {h}x{w}"))
                } else {
                    Ok(())
                }
            }
            _ => Ok(()),
        }
    }
}

/// Posterior parameters recorded on a tape.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CodeVars {
    pub mu: Var,
    pub log_var: Var,
}

/// Model parameters and batch-norm buffers bound to one tape.
#[derive(Clone, Debug)]
pub struct Bound {
    pub params: Vec<Var>,
    stats: Vec<(Var, Var)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct XFactorsModel<T> {
    config: ModelConfig,
    params: ParamStore<T>,
    stats: Vec<RunningStats<T>>,
    psi_s: Option<Net>,
    psi_t: Net,
    phi: Net,
    mode: BnMode,
}

fn build_encoder<T: Real, R: Rng>(b: &mut Builder<'_, T, R>, cfg: &ModelConfig, head: usize) -> Result<(), ModelError> {
    let [c, h, w] = cfg.image_shape;
    match cfg.arch {
        Arch::Mlp => {
            b.push(Layer::Flatten);
            let mut width = c * h * w;
            for (i, &hidden) in cfg.widths.iter().enumerate() {
                b.linear(&format!("fc{}", i + 1), width, hidden)?;
                b.push(Layer::Act);
                width = hidden;
            }
            b.linear("head", width, 2 * head)?;
        }
        Arch::Conv => {
            let [c1, c2, c3] = [cfg.widths[0], cfg.widths[1], cfg.widths[2]];
            b.conv("conv1", c, c1, 2)?;
            b.batch_norm("bn1", c1)?;
            b.push(Layer::Act);
            b.conv("res1", c1, c1, 1)?;
            b.batch_norm("res1_bn", c1)?;
            b.push(Layer::Act);
            b.conv("conv2", c1, c2, 2)?;
            b.batch_norm("bn2", c2)?;
            b.push(Layer::Act);
            b.conv("res2", c2, c2, 1)?;
            b.batch_norm("res2_bn", c2)?;
            b.push(Layer::Act);
            b.conv("conv3", c2, c3, 2)?;
            b.batch_norm("bn3", c3)?;
            b.push(Layer::Act);
            b.conv("conv4", c3, c3, 1)?;
            b.push(Layer::Act);
            b.push(Layer::Flatten);
            b.linear("head", c3 * h.div_ceil(8) * w.div_ceil(8), 2 * head)?;
        }
    }
    Ok(())
}

fn build_decoder<T: Real, R: Rng>(b: &mut Builder<'_, T, R>, cfg: &ModelConfig) -> Result<(), ModelError> {
    let [c, h, w] = cfg.image_shape;
    let dz = cfg.layout.dim_z();
    match cfg.arch {
        Arch::Mlp => {
            let mut width = dz;
            for (i, &hidden) in cfg.widths.iter().enumerate() {
                b.linear(&format!("fc{}", i + 1), width, hidden)?;
                b.push(Layer::Act);
                width = hidden;
            }
            b.linear("out", width, c * h * w)?;
            b.push(Layer::Sigmoid);
            b.push(Layer::Unflatten { shape: [c, h, w] });
        }
        Arch::Conv => {
            let [c1, c2, c3] = [cfg.widths[0], cfg.widths[1], cfg.widths[2]];
            let (he, we) = (h / 8, w / 8);
            b.linear("fc", dz, c3 * he * we)?;
            b.push(Layer::Unflatten { shape: [c3, he, we] });
            b.conv("conv1", c3, c3, 1)?;
            b.batch_norm("bn1", c3)?;
            b.push(Layer::Act);
            b.conv_t("up1", c3, c2)?;
            b.batch_norm("up1_bn", c2)?;
            b.push(Layer::Act);
            b.conv("res1", c2, c2, 1)?;
            b.batch_norm("res1_bn", c2)?;
            b.push(Layer::Act);
            b.conv_t("up2", c2, c1)?;
            b.batch_norm("up2_bn", c1)?;
            b.push(Layer::Act);
            b.conv("res2", c1, c1, 1)?;
            b.batch_norm("res2_bn", c1)?;
            b.push(Layer::Act);
            b.conv_t("up3", c1, c)?;
            b.push(Layer::Act);
            b.conv("out", c, c, 1)?;
            b.push(Layer::Sigmoid);
        }
    }
    Ok(())
}

impl<T: Real> XFactorsModel<T> {
    /// Builds the networks with Kaiming-uniform weights and zero biases drawn from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let mut stats = Vec::new();
        let mut nets = Vec::new();
        let parts: Vec<(&str, Option<usize>)> = {
            let mut p = Vec::new();
            if config.residual_encoder {
                p.push(("psi_s", Some(config.layout.dim_s())));
            }
            p.push(("psi_t", Some(config.layout.dim_t())));
            p.push(("phi", None));
            p
        };
        for (prefix, head) in parts {
            let mut b = Builder {
                params: &mut params,
                stats: &mut stats,
                rng: &mut rng,
                slope: config.slope,
                prefix: prefix.to_string(),
                net: Net::default(),
            };
            match head {
                Some(d) => build_encoder(&mut b, &config, d)?,
                None => build_decoder(&mut b, &config)?,
            }
            nets.push(b.net);
        }
        let phi = nets.pop().expect("decoder");
        let psi_t = nets.pop().expect("factor encoder");
        let psi_s = nets.pop();
        Ok(Self {
            config,
            params,
            stats,
            psi_s,
            psi_t,
            phi,
            mode: BnMode::Train,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> &LatentLayout {
        &self.config.layout
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn running_stats(&self) -> &[RunningStats<T>] {
        &self.stats
    }

    pub fn running_stats_mut(&mut self) -> &mut [RunningStats<T>] {
        &mut self.stats
    }

    pub fn mode(&self) -> BnMode {
        self.mode
    }

    /// Selects batch statistics (train) or running statistics (eval) for
    /// every batch-norm layer.
    pub fn set_mode(&mut self, mode: BnMode) {
        self.mode = mode;
    }

    /// Records parameters on `tape`, as leaves when `trainable`.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Bound {
        let params = if trainable {
            self.params.bind(tape)
        } else {
            self.params.bind_frozen(tape)
        };
        let stats = self
            .stats
            .iter()
            .map(|s| (tape.constant(s.mean.clone()), tape.constant(s.var.clone())))
            .collect();
        Bound { params, stats }
    }

    /// Like [`bind`](Self::bind) but reuses parameter vars already on `tape`,
    /// in store order.
    pub fn bind_with(&self, tape: &mut Tape<T>, params: Vec<Var>) -> Bound {
        let stats = self
            .stats
            .iter()
            .map(|s| (tape.constant(s.mean.clone()), tape.constant(s.var.clone())))
            .collect();
        Bound { params, stats }
    }

    fn ctx<'a>(&self, bound: &'a Bound) -> Ctx<'a> {
        Ctx {
            vars: &bound.params,
            stats_vars: &bound.stats,
            slope: self.config.slope,
            eps: self.config.bn_eps,
            training: self.mode == BnMode::Train,
        }
    }

    fn check_input(&self, shape: &[usize]) -> Result<(), ModelError> {
        let [c, h, w] = self.config.image_shape;
        if shape.len() != 4 || shape[1..] != [c, h, w] {
            return Err(ModelError::Shape(format!("expected images [B, {c}, {h}, {w}], got {shape:?}")));
        }
        Ok(())
    }

    fn head(tape: &mut Tape<T>, out: Var, d: usize) -> Result<CodeVars, GradError> {
        let mu = tape.slice(out, 1, 0, d)?;
        let raw = tape.slice(out, 1, d, 2 * d)?;
        let log_var = tape.clamp(raw, -LOG_VAR_CLAMP, LOG_VAR_CLAMP)?;
        Ok(CodeVars { mu, log_var })
    }

    /// Runs both encoders on `x`. The residual code is `None` when `dim_s = 0`.
    pub fn encode_vars(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        x: Var,
        record: &mut BatchNormRecord,
    ) -> Result<(Option<CodeVars>, CodeVars), ModelError> {
        self.check_input(tape.shape(x))?;
        let ctx = self.ctx(bound);
        let s = match (&self.psi_s, self.config.layout.dim_s()) {
            (Some(net), d) if d > 0 => {
                let out = net.forward(tape, &ctx, x, record)?;
                Some(Self::head(tape, out, d)?)
            }
            _ => None,
        };
        let out = self.psi_t.forward(tape, &ctx, x, record)?;
        let t = Self::head(tape, out, self.config.layout.dim_t())?;
        Ok((s, t))
    }

    pub fn decode_vars(&self, tape: &mut Tape<T>, bound: &Bound, z: Var, record: &mut BatchNormRecord) -> Result<Var, ModelError> {
        let shape = tape.shape(z);
        if shape.len() != 2 || shape[1] != self.config.layout.dim_z() {
            return Err(ModelError::Shape(format!(
                "decoder expects [B, {}], got {shape:?}",
                self.config.layout.dim_z()
            )));
        }
        Ok(self.phi.forward(tape, &self.ctx(bound), z, record)?)
    }

    /// `(code_s, code_t)` for a batch of images in the current mode. The
    /// residual code has width 0 when `dim_s = 0`.
    pub fn encode(&self, x: &Tensor<T>) -> Result<(GaussianCode<T>, GaussianCode<T>), ModelError> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let (s, t) = self.encode_vars(&mut tape, &bound, xv, &mut BatchNormRecord::default())?;
        let b = x.shape()[0];
        let code = |c: Option<CodeVars>| match c {
            Some(c) => GaussianCode {
                mu: tape.value(c.mu).clone(),
                log_var: tape.value(c.log_var).clone(),
            },
            None => GaussianCode {
                mu: Tensor::zeros(&[b, 0]),
                log_var: Tensor::zeros(&[b, 0]),
            },
        };
        Ok((code(s), code(Some(t))))
    }

    pub fn decode(&self, z: &Tensor<T>) -> Result<Tensor<T>, ModelError> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let zv = tape.constant(z.clone());
        let out = self.decode_vars(&mut tape, &bound, zv, &mut BatchNormRecord::default())?;
        Ok(tape.value(out).clone())
    }

    /// Posterior means `[μ_s ∥ μ_t]` for a batch of images.
    pub fn embed(&self, x: &Tensor<T>) -> Result<Tensor<T>, ModelError> {
        let (s, t) = self.encode(x)?;
        assemble_latent(&s.mu, &t.mu, self.layout())
    }

    /// Folds the batch statistics of a training-mode pass into the running
    /// estimates: `r <- (1 - m) r + m b`, with the unbiased batch variance.
    pub fn commit_batch_stats(&mut self, tape: &Tape<T>, record: &BatchNormRecord) {
        let m = T::lit(self.config.bn_momentum);
        let keep = T::one() - m;
        for &(i, node) in &record.nodes {
            let Some((mean, var, count)) = tape.batch_stats(node) else {
                continue;
            };
            let unbias = if count > 1 {
                T::lit(count as f64 / (count - 1) as f64)
            } else {
                T::one()
            };
            let s = &mut self.stats[i];
            for (r, &b) in s.mean.data_mut().iter_mut().zip(mean.data()) {
                *r = keep * *r + m * b;
            }
            for (r, &b) in s.var.data_mut().iter_mut().zip(var.data()) {
                *r = keep * *r + m * b * unbias;
            }
        }
    }

    /// Same architecture with every tensor converted to `U`.
    pub fn cast<U: Real>(&self) -> XFactorsModel<U> {
        let mut params = ParamStore::new();
        for p in self.params.iter() {
            params.add(p.name.clone(), p.value.cast()).expect("names already unique");
        }
        XFactorsModel {
            config: self.config.clone(),
            params,
            stats: self
                .stats
                .iter()
                .map(|s| RunningStats {
                    name: s.name.clone(),
                    mean: s.mean.cast(),
                    var: s.var.cast(),
                })
                .collect(),
            psi_s: self.psi_s.clone(),
            psi_t: self.psi_t.clone(),
            phi: self.phi.clone(),
            mode: self.mode,
        }
    }
}

/// Standard normal noise of the given shape.
pub fn standard_normal<T: Real, R: Rng>(shape: &[usize], rng: &mut R) -> Tensor<T> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::lit(rng.sample::<f64, _>(StandardNormal))).collect();
    Tensor::new(shape.to_vec(), data).expect("noise extent")
}

/// `z = μ + exp(log_var / 2) ⊙ ε` on the tape; `eps` is a constant so no
/// gradient reaches the noise.
pub fn reparameterize_vars<T: Real>(tape: &mut Tape<T>, code: CodeVars, eps: Tensor<T>) -> Result<Var, GradError> {
    let half = tape.scale(code.log_var, 0.5)?;
    let std = tape.exp(half)?;
    let e = tape.constant(eps);
    let noise = tape.mul(std, e)?;
    tape.add(code.mu, noise)
}

pub fn reparameterize<T: Real, R: Rng>(code: &GaussianCode<T>, rng: &mut R) -> Tensor<T> {
    let eps: Tensor<T> = standard_normal(code.mu.shape(), rng);
    let mut z = code.mu.clone();
    for ((z, &lv), &e) in z.data_mut().iter_mut().zip(code.log_var.data()).zip(eps.data()) {
        *z += (lv * T::lit(0.5)).exp() * e;
    }
    z
}

#[cfg(test)]
mod tests;
