use rand::Rng;

use super::ModelError;
use crate::grad::{GradError, OpKind, ParamId, ParamStore, Real, Tape, Tensor, Var};

/// Running statistics of one batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<T> {
    pub name: String,
    pub mean: Tensor<T>,
    pub var: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) enum Layer {
    /// `w [in, out]`, `b [out]`.
    Linear {
        w: ParamId,
        b: ParamId,
    },
    Conv {
        w: ParamId,
        b: ParamId,
        stride: usize,
    },
    ConvT {
        w: ParamId,
        b: ParamId,
    },
    BatchNorm {
        gamma: ParamId,
        beta: ParamId,
        stats: usize,
    },
    Act,
    Sigmoid,
    Flatten,
    Unflatten {
        shape: [usize; 3],
    },
}

/// Sequential stack of layers whose parameters live in a shared store.
#[derive(Clone, Debug, PartialEq, Default)]
pub(crate) struct Net {
    pub layers: Vec<Layer>,
}

/// Batch-norm nodes recorded during a training-mode forward pass.
#[derive(Debug, Default)]
pub struct BatchNormRecord {
    pub(crate) nodes: Vec<(usize, Var)>,
}

pub(crate) struct Ctx<'a> {
    pub vars: &'a [Var],
    pub stats_vars: &'a [(Var, Var)],
    pub slope: f64,
    pub eps: f64,
    pub training: bool,
}

impl Net {
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, ctx: &Ctx<'_>, mut x: Var, record: &mut BatchNormRecord) -> Result<Var, GradError> {
        for layer in &self.layers {
            x = match layer {
                Layer::Linear { w, b } => {
                    let h = tape.matmul(x, ctx.vars[w.index()])?;
                    tape.add(h, ctx.vars[b.index()])?
                }
                Layer::Conv { w, b, stride } => tape.apply(OpKind::Conv2d { stride: *stride }, &[x, ctx.vars[w.index()], ctx.vars[b.index()]])?,
                Layer::ConvT { w, b } => tape.apply(OpKind::ConvTranspose2d, &[x, ctx.vars[w.index()], ctx.vars[b.index()]])?,
                Layer::BatchNorm { gamma, beta, stats } => {
                    let (g, bt) = (ctx.vars[gamma.index()], ctx.vars[beta.index()]);
                    let kind = OpKind::BatchNorm {
                        eps: ctx.eps,
                        training: ctx.training,
                    };
                    if ctx.training {
                        let y = tape.apply(kind, &[x, g, bt])?;
                        record.nodes.push((*stats, y));
                        y
                    } else {
                        let (m, v) = ctx.stats_vars[*stats];
                        tape.apply(kind, &[x, g, bt, m, v])?
                    }
                }
                Layer::Act => tape.leaky_relu(x, ctx.slope)?,
                Layer::Sigmoid => tape.sigmoid(x)?,
                Layer::Flatten => {
                    let s = tape.shape(x).to_vec();
                    let rest = s[1..].iter().product();
                    tape.reshape(x, &[s[0], rest])?
                }
                Layer::Unflatten { shape } => {
                    let b = tape.shape(x)[0];
                    tape.reshape(x, &[b, shape[0], shape[1], shape[2]])?
                }
            };
        }
        Ok(x)
    }
}

/// Appends layers to a [`Net`] while registering their parameters.
pub(crate) struct Builder<'a, T, R> {
    pub params: &'a mut ParamStore<T>,
    pub stats: &'a mut Vec<RunningStats<T>>,
    pub rng: &'a mut R,
    pub slope: f64,
    pub prefix: String,
    pub net: Net,
}

impl<T: Real, R: Rng> Builder<'_, T, R> {
    fn kaiming(&mut self, shape: &[usize], fan_in: usize) -> Tensor<T> {
        let bound = (6.0 / ((1.0 + self.slope * self.slope) * fan_in.max(1) as f64)).sqrt();
        let n = shape.iter().product();
        let data = (0..n).map(|_| T::lit(self.rng.random_range(-bound..=bound))).collect();
        Tensor::new(shape.to_vec(), data).expect("init extent")
    }

    fn add(&mut self, layer: &str, field: &str, value: Tensor<T>) -> Result<ParamId, ModelError> {
        Ok(self.params.add(format!("{}.{layer}.{field}", self.prefix), value)?)
    }

    pub fn linear(&mut self, name: &str, inputs: usize, outputs: usize) -> Result<(), ModelError> {
        let init = self.kaiming(&[inputs, outputs], inputs);
        let w = self.add(name, "weight", init)?;
        let b = self.add(name, "bias", Tensor::zeros(&[outputs]))?;
        self.net.layers.push(Layer::Linear { w, b });
        Ok(())
    }

    pub fn conv(&mut self, name: &str, cin: usize, cout: usize, stride: usize) -> Result<(), ModelError> {
        let init = self.kaiming(&[cout, cin, 3, 3], cin * 9);
        let w = self.add(name, "weight", init)?;
        let b = self.add(name, "bias", Tensor::zeros(&[cout]))?;
        self.net.layers.push(Layer::Conv { w, b, stride });
        Ok(())
    }

    pub fn conv_t(&mut self, name: &str, cin: usize, cout: usize) -> Result<(), ModelError> {
        let init = self.kaiming(&[cin, cout, 4, 4], cout * 16);
        let w = self.add(name, "weight", init)?;
        let b = self.add(name, "bias", Tensor::zeros(&[cout]))?;
        self.net.layers.push(Layer::ConvT { w, b });
        Ok(())
    }

    pub fn batch_norm(&mut self, name: &str, channels: usize) -> Result<(), ModelError> {
        let gamma = self.add(name, "gamma", Tensor::full(&[channels], T::one()))?;
        let beta = self.add(name, "beta", Tensor::zeros(&[channels]))?;
        self.stats.push(RunningStats {
            name: format!("{}.{name}", self.prefix),
            mean: Tensor::zeros(&[channels]),
            var: Tensor::full(&[channels], T::one()),
        });
        let stats = self.stats.len() - 1;
        self.net.layers.push(Layer::BatchNorm { gamma, beta, stats });
        Ok(())
    }

    pub fn push(&mut self, layer: Layer) {
        self.net.layers.push(layer);
    }
}
