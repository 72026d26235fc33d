//! `.xfck` checkpoints.
//!
//! Layout (little-endian): magic `XFCK`, version u32, element width u32 (4 or
//! 8), latent layout, architecture block, then tagged sections each made of
//! `{name_len u32, name, rank u32, dims u32[rank], data}` records. Section 1
//! holds parameters, 2 batch-norm running statistics, 3 optimizer moments
//! (preceded by the step count), 4 the run state; tag 0 ends the file.

use std::path::Path;

use super::{Arch, BnMode, LatentLayout, ModelConfig, ModelError, XFactorsModel};
use crate::grad::{Real, Tensor};

const MAGIC: &[u8; 4] = b"XFCK";
const VERSION: u32 = 1;

const TAG_END: u8 = 0;
const TAG_PARAMS: u8 = 1;
const TAG_STATS: u8 = 2;
const TAG_MOMENTS: u8 = 3;
const TAG_RUN: u8 = 4;

/// First and second moment estimates, aligned with the parameter store order.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments<T> {
    pub t: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

/// Position of a training run: step counter and the exact RNG state.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RunRecord {
    pub step: u64,
    pub rng_seed: [u8; 32],
    pub rng_stream: u64,
    pub rng_word_pos: u128,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub model: XFactorsModel<T>,
    pub moments: Option<Moments<T>>,
    pub run: Option<RunRecord>,
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_record<T: Real>(out: &mut Vec<u8>, name: &str, t: &Tensor<T>) {
    put_u32(out, name.len());
    out.extend_from_slice(name.as_bytes());
    put_u32(out, t.rank());
    for &d in t.shape() {
        put_u32(out, d);
    }
    for &v in t.data() {
        v.to_le(out);
    }
}

pub fn encode_checkpoint<T: Real>(ck: &Checkpoint<T>) -> Vec<u8> {
    let model = &ck.model;
    let cfg = model.config();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    put_u32(&mut out, T::BYTES);

    put_u32(&mut out, cfg.layout.dim_s());
    put_u32(&mut out, cfg.layout.k());
    for &d in cfg.layout.dims_t() {
        put_u32(&mut out, d);
    }

    out.push(match cfg.arch {
        Arch::Mlp => 0,
        Arch::Conv => 1,
    });
    out.push(u8::from(cfg.residual_encoder));
    for d in cfg.image_shape {
        put_u32(&mut out, d);
    }
    put_u32(&mut out, cfg.widths.len());
    for &w in &cfg.widths {
        put_u32(&mut out, w);
    }
    for v in [cfg.slope, cfg.bn_eps, cfg.bn_momentum] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.push(match model.mode() {
        BnMode::Train => 0,
        BnMode::Eval => 1,
    });

    out.push(TAG_PARAMS);
    put_u32(&mut out, model.params().len());
    for p in model.params().iter() {
        put_record(&mut out, &p.name, &p.value);
    }

    out.push(TAG_STATS);
    put_u32(&mut out, 2 * model.running_stats().len());
    for s in model.running_stats() {
        put_record(&mut out, &format!("{}.running_mean", s.name), &s.mean);
        put_record(&mut out, &format!("{}.running_var", s.name), &s.var);
    }

    if let Some(m) = &ck.moments {
        out.push(TAG_MOMENTS);
        out.extend_from_slice(&m.t.to_le_bytes());
        put_u32(&mut out, 2 * m.m.len());
        for (p, (m1, m2)) in model.params().iter().zip(m.m.iter().zip(&m.v)) {
            put_record(&mut out, &format!("{}.m", p.name), m1);
            put_record(&mut out, &format!("{}.v", p.name), m2);
        }
    }

    if let Some(r) = &ck.run {
        out.push(TAG_RUN);
        out.extend_from_slice(&r.step.to_le_bytes());
        out.extend_from_slice(&r.rng_seed);
        out.extend_from_slice(&r.rng_stream.to_le_bytes());
        out.extend_from_slice(&r.rng_word_pos.to_le_bytes());
    }

    out.push(TAG_END);
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    width: usize,
}

impl<'a> Reader<'a> {
    fn err_at(&self, offset: usize, detail: impl Into<String>) -> ModelError {
        ModelError::Parse {
            offset: offset as u64,
            detail: detail.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], ModelError> {
        let avail = self.bytes.len() - self.pos;
        if avail < n {
            return Err(self.err_at(self.pos, format!("truncated {what}: need {n} bytes, {avail} remain")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8, ModelError> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<usize, ModelError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()) as usize)
    }

    fn u64(&mut self, what: &str) -> Result<u64, ModelError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn f64(&mut self, what: &str) -> Result<f64, ModelError> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn record<T: Real>(&mut self) -> Result<(String, Tensor<T>, usize), ModelError> {
        let start = self.pos;
        let len = self.u32("record name length")?;
        let name = std::str::from_utf8(self.take(len, "record name")?)
            .map_err(|_| self.err_at(start + 4, "record name is not utf-8"))?
            .to_string();
        let rank = self.u32("record rank")?;
        if rank > 8 {
            return Err(self.err_at(self.pos - 4, format!("record {name:?} has implausible rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u32("record dims")?);
        }
        let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let bytes = numel
            .and_then(|n| n.checked_mul(self.width))
            .ok_or_else(|| self.err_at(self.pos, format!("record {name:?} size overflows")))?;
        let raw = self.take(bytes, "record data")?;
        let data: Vec<T> = raw
            .chunks_exact(self.width)
            .map(|c| {
                if self.width == 4 {
                    T::lit(<f32 as Real>::from_le(c) as f64)
                } else {
                    T::lit(<f64 as Real>::from_le(c))
                }
            })
            .collect();
        Ok((name, Tensor::new(shape, data)?, start))
    }
}

/// Overwrites `dst` with a record, insisting on the expected name and shape.
fn fill<T: Real>(r: &mut Reader<'_>, expected: &str, dst: &mut Tensor<T>) -> Result<(), ModelError> {
    let (name, t, at) = r.record::<T>()?;
    if name != expected || t.shape() != dst.shape() {
        return Err(r.err_at(
            at,
            format!("expected record {expected:?} {:?}, found {name:?} {:?}", dst.shape(), t.shape()),
        ));
    }
    *dst = t;
    Ok(())
}

/// Parses a checkpoint, converting stored values to `T` if the element width differs.
pub fn decode_checkpoint<T: Real>(bytes: &[u8]) -> Result<Checkpoint<T>, ModelError> {
    let mut r = Reader { bytes, pos: 0, width: 4 };
    if r.take(4, "magic")? != MAGIC {
        return Err(r.err_at(0, "bad magic, expected \"XFCK\""));
    }
    let version = r.u32("version")?;
    if version != VERSION as usize {
        return Err(r.err_at(4, format!("unsupported version {version}, expected {VERSION}")));
    }
    r.width = r.u32("element width")?;
    if r.width != 4 && r.width != 8 {
        return Err(r.err_at(8, format!("element width must be 4 or 8, got {}", r.width)));
    }

    let layout_at = r.pos;
    let dim_s = r.u32("dim_s")?;
    let k = r.u32("factor count")?;
    if k > 4096 {
        return Err(r.err_at(layout_at + 4, format!("implausible factor count {k}")));
    }
    let mut dims_t = Vec::with_capacity(k);
    for _ in 0..k {
        dims_t.push(r.u32("dims_t")?);
    }
    let layout = LatentLayout::new(dim_s, dims_t).map_err(|e| r.err_at(layout_at, e.to_string()))?;

    let arch_at = r.pos;
    let arch = match r.u8("arch")? {
        0 => Arch::Mlp,
        1 => Arch::Conv,
        v => return Err(r.err_at(arch_at, format!("unknown architecture code {v}"))),
    };
    let residual_encoder = r.u8("residual flag")? != 0;
    let image_shape = [r.u32("channels")?, r.u32("height")?, r.u32("width")?];
    let n_widths = r.u32("width count")?;
    if n_widths > 64 {
        return Err(r.err_at(r.pos - 4, format!("implausible width count {n_widths}")));
    }
    let mut widths = Vec::with_capacity(n_widths);
    for _ in 0..n_widths {
        widths.push(r.u32("widths")?);
    }
    let config = ModelConfig {
        arch,
        layout,
        image_shape,
        widths,
        residual_encoder,
        slope: r.f64("slope")?,
        bn_eps: r.f64("bn eps")?,
        bn_momentum: r.f64("bn momentum")?,
    };
    let mode_at = r.pos;
    let mode = match r.u8("mode")? {
        0 => BnMode::Train,
        1 => BnMode::Eval,
        v => return Err(r.err_at(mode_at, format!("unknown batch-norm mode {v}"))),
    };
    let mut model = XFactorsModel::<T>::new(config, 0).map_err(|e| r.err_at(arch_at, e.to_string()))?;
    model.set_mode(mode);

    let mut moments = None;
    let mut run = None;
    let mut seen_params = false;
    let mut seen_stats = false;
    loop {
        let tag_at = r.pos;
        let tag = r.u8("section tag")?;
        match tag {
            TAG_END => break,
            TAG_PARAMS | TAG_STATS if (tag == TAG_PARAMS && seen_params) || (tag == TAG_STATS && seen_stats) => {
                return Err(r.err_at(tag_at, format!("duplicate section {tag}")));
            }
            TAG_PARAMS => {
                seen_params = true;
                let count = r.u32("parameter count")?;
                if count != model.params().len() {
                    return Err(r.err_at(
                        tag_at + 1,
                        format!("{count} parameters stored, architecture has {}", model.params().len()),
                    ));
                }
                for p in model.params_mut().iter_mut() {
                    let name = p.name.clone();
                    fill(&mut r, &name, &mut p.value)?;
                }
            }
            TAG_STATS => {
                seen_stats = true;
                let count = r.u32("statistics count")?;
                if count != 2 * model.running_stats().len() {
                    return Err(r.err_at(
                        tag_at + 1,
                        format!("{count} statistics stored, architecture has {}", 2 * model.running_stats().len()),
                    ));
                }
                for s in model.running_stats_mut() {
                    let base = s.name.clone();
                    fill(&mut r, &format!("{base}.running_mean"), &mut s.mean)?;
                    fill(&mut r, &format!("{base}.running_var"), &mut s.var)?;
                }
            }
            TAG_MOMENTS => {
                let t = r.u64("moment step")?;
                let count = r.u32("moment count")?;
                let n = model.params().len();
                if count != 2 * n {
                    return Err(r.err_at(tag_at + 9, format!("{count} moments stored, expected {}", 2 * n)));
                }
                let mut m = Vec::with_capacity(n);
                let mut v = Vec::with_capacity(n);
                for p in model.params().iter() {
                    let mut a = Tensor::zeros(p.value.shape());
                    let mut b = Tensor::zeros(p.value.shape());
                    fill(&mut r, &format!("{}.m", p.name), &mut a)?;
                    fill(&mut r, &format!("{}.v", p.name), &mut b)?;
                    m.push(a);
                    v.push(b);
                }
                moments = Some(Moments { t, m, v });
            }
            TAG_RUN => {
                let step = r.u64("run step")?;
                let rng_seed: [u8; 32] = r.take(32, "rng seed")?.try_into().unwrap();
                let rng_stream = r.u64("rng stream")?;
                let rng_word_pos = u128::from_le_bytes(r.take(16, "rng position")?.try_into().unwrap());
                run = Some(RunRecord {
                    step,
                    rng_seed,
                    rng_stream,
                    rng_word_pos,
                });
            }
            other => return Err(r.err_at(tag_at, format!("unknown section tag {other}"))),
        }
    }
    if !seen_params {
        return Err(r.err_at(r.pos, "checkpoint has no parameter section"));
    }
    if r.pos != bytes.len() {
        return Err(r.err_at(r.pos, format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(Checkpoint { model, moments, run })
}

pub fn save_checkpoint<T: Real>(ck: &Checkpoint<T>, path: &Path) -> Result<(), ModelError> {
    std::fs::write(path, encode_checkpoint(ck))?;
    Ok(())
}

pub fn load_checkpoint<T: Real>(path: &Path) -> Result<Checkpoint<T>, ModelError> {
    decode_checkpoint(&std::fs::read(path)?)
}
