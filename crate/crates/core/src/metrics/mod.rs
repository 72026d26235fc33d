//! Disentanglement metrics: FactorVAE score, DCI via a random forest, PCA of
//! the residual space and contrastive mutual-information bounds.

mod forest;
mod pca;

use std::io::Write;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{sample_contrastive_batch, DataError, FactorizedDataset};
use crate::grad::{Real, Tape, Tensor};
use crate::losses::{info_nce, mi_bound};
use crate::model::{BnMode, LatentLayout, ModelError, XFactorsModel};

pub use forest::{ForestParams, RandomForest};
pub use pca::{pca_top2, Pca2};

/// Columns whose spread falls below this are treated as dead.
pub const COLLAPSE_STD: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("invalid input: {0}")]
    Input(String),
    #[error("every latent dimension is collapsed")]
    AllCollapsed,
    #[error("factor {factor}: no value with at least {needed} samples after {tries} draws")]
    InsufficientSamples { factor: usize, needed: usize, tries: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Posterior means of a model over a set of samples, paired with their
/// factor labels.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentTable {
    /// `N x D` row-major, columns ordered `[S, T_1 .. T_K]`.
    pub codes: Vec<f64>,
    /// `N x F` row-major.
    pub labels: Vec<usize>,
    pub cardinalities: Vec<usize>,
    pub factor_names: Vec<String>,
    pub layout: LatentLayout,
}

impl LatentTable {
    pub fn new(
        codes: Vec<f64>,
        labels: Vec<usize>,
        cardinalities: Vec<usize>,
        factor_names: Vec<String>,
        layout: LatentLayout,
    ) -> Result<Self, MetricError> {
        let (d, f) = (layout.dim_z(), cardinalities.len());
        if f == 0 || factor_names.len() != f {
            return Err(MetricError::Input(format!("{} names for {f} factors", factor_names.len())));
        }
        if !codes.len().is_multiple_of(d) || labels.len() != codes.len() / d * f {
            return Err(MetricError::Input(format!(
                "{} code values and {} labels do not form rows of width {d} and {f}",
                codes.len(),
                labels.len()
            )));
        }
        if codes.len() / d < 2 {
            return Err(MetricError::Input("latent table needs at least 2 rows".into()));
        }
        if let Some(i) = labels.iter().enumerate().position(|(i, &v)| v >= cardinalities[i % f]) {
            return Err(MetricError::Input(format!("label {} out of range at row {}", labels[i], i / f)));
        }
        Ok(Self {
            codes,
            labels,
            cardinalities,
            factor_names,
            layout,
        })
    }

    /// Embeds `indices` of `ds` with the model's posterior means, in eval mode.
    pub fn from_model<T: Real>(model: &XFactorsModel<T>, ds: &FactorizedDataset, indices: &[usize]) -> Result<Self, MetricError> {
        let mut frozen = model.clone();
        frozen.set_mode(BnMode::Eval);
        let mut codes = Vec::with_capacity(indices.len() * model.layout().dim_z());
        for chunk in indices.chunks(256) {
            let z = frozen.embed(&ds.batch_tensor::<T>(chunk))?;
            codes.extend(z.data().iter().map(|v| v.as_f64()));
        }
        let f = ds.num_factors();
        let mut labels = Vec::with_capacity(indices.len() * f);
        for &i in indices {
            labels.extend(ds.label_row(i).iter().map(|&v| v as usize));
        }
        Self::new(
            codes,
            labels,
            ds.specs().iter().map(|s| s.cardinality).collect(),
            ds.specs().iter().map(|s| s.name.clone()).collect(),
            model.layout().clone(),
        )
    }

    pub fn rows(&self) -> usize {
        self.codes.len() / self.dims()
    }

    pub fn dims(&self) -> usize {
        self.layout.dim_z()
    }

    pub fn factors(&self) -> usize {
        self.cardinalities.len()
    }

    pub fn label(&self, row: usize, factor: usize) -> usize {
        self.labels[row * self.factors() + factor]
    }

    /// Labeling in which every factor not flagged in `keep` is folded into a
    /// single trailing factor `s` whose value is their joint combination.
    pub fn grouped_residual(&self, keep: &[bool]) -> Result<Self, MetricError> {
        if keep.len() != self.factors() {
            return Err(MetricError::Input(format!("{} flags for {} factors", keep.len(), self.factors())));
        }
        let folded: Vec<usize> = (0..self.factors()).filter(|&f| !keep[f]).collect();
        if folded.is_empty() {
            return Ok(self.clone());
        }
        let kept: Vec<usize> = (0..self.factors()).filter(|&f| keep[f]).collect();
        let joint: usize = folded.iter().map(|&f| self.cardinalities[f]).product();
        let mut labels = Vec::with_capacity(self.rows() * (kept.len() + 1));
        for r in 0..self.rows() {
            labels.extend(kept.iter().map(|&f| self.label(r, f)));
            labels.push(folded.iter().fold(0, |acc, &f| acc * self.cardinalities[f] + self.label(r, f)));
        }
        let mut cards: Vec<usize> = kept.iter().map(|&f| self.cardinalities[f]).collect();
        cards.push(joint);
        let mut names: Vec<String> = kept.iter().map(|&f| self.factor_names[f].clone()).collect();
        names.push("s".into());
        Self::new(self.codes.clone(), labels, cards, names, self.layout.clone())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Standardized {
    /// `N x D` row-major; collapsed columns are zero.
    pub values: Vec<f64>,
    pub collapsed: Vec<bool>,
}

fn column_stats(codes: &[f64], d: usize) -> (Vec<f64>, Vec<f64>) {
    let n = (codes.len() / d) as f64;
    let mut mean = vec![0.0; d];
    for row in codes.chunks(d) {
        mean.iter_mut().zip(row).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; d];
    for row in codes.chunks(d) {
        for c in 0..d {
            var[c] += (row[c] - mean[c]).powi(2);
        }
    }
    (mean, var.into_iter().map(|v| (v / n).sqrt()).collect())
}

/// Per-column zero mean and unit (population) variance over all rows.
pub fn standardize(codes: &[f64], d: usize) -> Result<Standardized, MetricError> {
    if d == 0 || !codes.len().is_multiple_of(d) || codes.len() / d < 2 {
        return Err(MetricError::Input("standardize needs at least 2 rows".into()));
    }
    let (mean, std) = column_stats(codes, d);
    let collapsed: Vec<bool> = std.iter().map(|&s| !(s >= COLLAPSE_STD)).collect();
    if collapsed.iter().all(|&c| c) {
        return Err(MetricError::AllCollapsed);
    }
    let values = codes
        .chunks(d)
        .flat_map(|row| {
            (0..d)
                .map(|c| if collapsed[c] { 0.0 } else { (row[c] - mean[c]) / std[c] })
                .collect::<Vec<_>>()
        })
        .collect();
    Ok(Standardized { values, collapsed })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FactorVaeResult {
    pub score: f64,
    /// `D x F` vote counts: how often dimension d had the least variance
    /// while factor f was held fixed.
    pub votes: Vec<Vec<usize>>,
}

const VALUE_RETRIES: usize = 100;

/// Majority-vote FactorVAE score, evaluated on the voting pairs.
pub fn factor_vae_score<R: Rng>(table: &LatentTable, n_iter: usize, vote_batch: usize, rng: &mut R) -> Result<FactorVaeResult, MetricError> {
    if n_iter == 0 || vote_batch < 2 {
        return Err(MetricError::Input("FactorVAE needs n_iter >= 1 and vote_batch >= 2".into()));
    }
    let (d, f) = (table.dims(), table.factors());
    let std = standardize(&table.codes, d)?;
    let mut by_value: Vec<Vec<Vec<usize>>> = table.cardinalities.iter().map(|&c| vec![Vec::new(); c]).collect();
    for r in 0..table.rows() {
        for (k, values) in by_value.iter_mut().enumerate() {
            values[table.label(r, k)].push(r);
        }
    }
    let mut votes = vec![vec![0usize; f]; d];
    let mut var = vec![0.0; d];
    let mut mean = vec![0.0; d];
    for _ in 0..n_iter {
        let k = rng.random_range(0..f);
        let mut rows = None;
        for _ in 0..VALUE_RETRIES {
            let v = rng.random_range(0..table.cardinalities[k]);
            if by_value[k][v].len() >= vote_batch {
                rows = Some(&by_value[k][v]);
                break;
            }
        }
        let rows = rows.ok_or(MetricError::InsufficientSamples {
            factor: k,
            needed: vote_batch,
            tries: VALUE_RETRIES,
        })?;
        let pick = sample(rng, rows.len(), vote_batch);
        mean.iter_mut().for_each(|m| *m = 0.0);
        var.iter_mut().for_each(|m| *m = 0.0);
        for i in pick.iter() {
            let row = &std.values[rows[i] * d..(rows[i] + 1) * d];
            mean.iter_mut().zip(row).for_each(|(m, x)| *m += x);
        }
        mean.iter_mut().for_each(|m| *m /= vote_batch as f64);
        for i in pick.iter() {
            let row = &std.values[rows[i] * d..(rows[i] + 1) * d];
            for c in 0..d {
                var[c] += (row[c] - mean[c]).powi(2);
            }
        }
        let mut best = None;
        for c in (0..d).filter(|&c| !std.collapsed[c]) {
            if best.is_none_or(|b: usize| var[c] < var[b]) {
                best = Some(c);
            }
        }
        votes[best.expect("at least one live dimension")][k] += 1;
    }
    let correct: usize = votes.iter().map(|row| row.iter().copied().max().unwrap_or(0)).sum();
    Ok(FactorVaeResult {
        score: correct as f64 / n_iter as f64,
        votes,
    })
}

/// Nonnegative `D x F` importances of latent dimensions for predicting
/// factors, row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImportanceMatrix {
    pub dims: usize,
    pub factors: usize,
    pub values: Vec<f64>,
    /// Factors whose column is all zero (no forest could use any dimension).
    pub zero_columns: Vec<bool>,
}

impl ImportanceMatrix {
    pub fn new(dims: usize, factors: usize, values: Vec<f64>) -> Result<Self, MetricError> {
        if values.len() != dims * factors || values.iter().any(|v| !(*v >= 0.0)) {
            return Err(MetricError::Input("importance matrix must be D x F and nonnegative".into()));
        }
        let zero_columns = (0..factors).map(|f| (0..dims).all(|d| values[d * factors + f] == 0.0)).collect();
        Ok(Self {
            dims,
            factors,
            values,
            zero_columns,
        })
    }

    pub fn get(&self, d: usize, f: usize) -> f64 {
        self.values[d * self.factors + f]
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        self.values.chunks(self.factors).map(<[f64]>::to_vec).collect()
    }

    pub fn write_csv<W: Write>(&self, out: W, factor_names: &[String]) -> Result<(), MetricError> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["dim".to_string()];
        header.extend(factor_names.iter().cloned());
        w.write_record(&header).map_err(csv_err)?;
        for d in 0..self.dims {
            let mut rec = vec![d.to_string()];
            rec.extend((0..self.factors).map(|f| self.get(d, f).to_string()));
            w.write_record(&rec).map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn csv_err(e: csv::Error) -> MetricError {
    MetricError::Io(std::io::Error::other(e))
}

/// Entropy of the normalized vector `p` in base `base`; zero mass gives 0.
fn entropy(p: &[f64], base: usize) -> f64 {
    let s: f64 = p.iter().sum();
    if s <= 0.0 || base < 2 {
        return 0.0;
    }
    -p.iter().filter(|&&v| v > 0.0).map(|&v| (v / s) * (v / s).ln()).sum::<f64>() / (base as f64).ln()
}

/// `Σ_d ρ_d (1 − H_F(R_d))` with `ρ_d` the share of total importance in row d.
pub fn disentanglement(r: &ImportanceMatrix) -> f64 {
    let total: f64 = r.values.iter().sum();
    if total <= 0.0 {
        return 0.0;
    }
    r.values
        .chunks(r.factors)
        .map(|row| {
            let mass: f64 = row.iter().sum();
            if r.factors < 2 {
                mass / total
            } else {
                mass / total * (1.0 - entropy(row, r.factors))
            }
        })
        .sum()
}

/// Mean over factors of `1 − H(R_·f)`, entropy taken over the live
/// dimensions in base equal to their count. All-zero columns score 0.
pub fn completeness(r: &ImportanceMatrix, live: &[bool]) -> f64 {
    let active: Vec<usize> = (0..r.dims).filter(|&d| live[d]).collect();
    let sum: f64 = (0..r.factors)
        .map(|f| {
            let col: Vec<f64> = active.iter().map(|&d| r.get(d, f)).collect();
            if col.iter().sum::<f64>() <= 0.0 {
                0.0
            } else if active.len() < 2 {
                1.0
            } else {
                1.0 - entropy(&col, active.len())
            }
        })
        .sum();
    sum / r.factors as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DciResult {
    pub disentanglement: f64,
    pub completeness: f64,
    pub informativeness: f64,
    pub importance: ImportanceMatrix,
    /// Held-out accuracy per factor.
    pub accuracy: Vec<f64>,
}

/// DCI from one forest per factor on a seeded train split; informativeness
/// is mean held-out accuracy.
pub fn dci<R: Rng>(table: &LatentTable, train_fraction: f64, params: &ForestParams, rng: &mut R) -> Result<DciResult, MetricError> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(MetricError::Input(format!("train fraction must be in (0, 1), got {train_fraction}")));
    }
    let (n, d, f) = (table.rows(), table.dims(), table.factors());
    let n_train = ((n as f64 * train_fraction).round() as usize).clamp(1, n - 1);
    let mut order: Vec<usize> = sample(rng, n, n).into_vec();
    let test = order.split_off(n_train);
    let train = order;
    let gather = |rows: &[usize]| {
        rows.iter()
            .flat_map(|&r| table.codes[r * d..(r + 1) * d].iter().copied())
            .collect::<Vec<_>>()
    };
    let (x_train, x_test) = (gather(&train), gather(&test));
    let live: Vec<bool> = column_stats(&table.codes, d).1.iter().map(|&s| s >= COLLAPSE_STD).collect();

    let mut values = vec![0.0; d * f];
    let mut accuracy = Vec::with_capacity(f);
    for k in 0..f {
        let y_train: Vec<usize> = train.iter().map(|&r| table.label(r, k)).collect();
        let y_test: Vec<usize> = test.iter().map(|&r| table.label(r, k)).collect();
        let forest = RandomForest::fit(&x_train, d, &y_train, params, rng)?;
        for (dim, &imp) in forest.importances().iter().enumerate() {
            values[dim * f + k] = imp;
        }
        accuracy.push(forest.accuracy(&x_test, &y_test));
    }
    let importance = ImportanceMatrix::new(d, f, values)?;
    Ok(DciResult {
        disentanglement: disentanglement(&importance),
        completeness: completeness(&importance, &live),
        informativeness: accuracy.iter().sum::<f64>() / f as f64,
        importance,
        accuracy,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricConfig {
    pub n_iter: usize,
    pub vote_batch: usize,
    pub forest: ForestParams,
    pub train_fraction: f64,
    /// Number of repeated evaluations, seeded `seed, seed + 1, ...`.
    pub seeds: usize,
    pub seed: u64,
    /// Fold unsupervised factors into one residual factor before scoring.
    pub grouped_residual: bool,
    /// Contrastive batches and their size for the MI bounds.
    pub mi_batches: usize,
    pub mi_batch_size: usize,
    pub tau: f64,
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self {
            n_iter: 10_000,
            vote_batch: 64,
            forest: ForestParams::default(),
            train_fraction: 0.8,
            seeds: 5,
            seed: 0,
            grouped_residual: false,
            mi_batches: 16,
            mi_batch_size: 64,
            tau: 0.1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
}

impl Summary {
    /// Mean and population standard deviation.
    pub fn of(values: &[f64]) -> Self {
        let n = values.len().max(1) as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Self { mean, std: var.sqrt() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DciSummary {
    #[serde(rename = "D")]
    pub d: Summary,
    #[serde(rename = "C")]
    pub c: Summary,
    #[serde(rename = "I")]
    pub i: Summary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PcaSummary {
    pub explained: f64,
    pub components: [Vec<f64>; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub factor_vae: Summary,
    pub dci: DciSummary,
    /// `D x F`, averaged over evaluation seeds.
    pub importance: Vec<Vec<f64>>,
    pub factor_names: Vec<String>,
    pub pca: Option<PcaSummary>,
    /// Per supervised factor `log(B − 1) − L_InfoNCE` on posterior means.
    pub mi_bounds: Vec<f64>,
    pub per_seed: Vec<SeedScores>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedScores {
    pub seed: u64,
    pub factor_vae: f64,
    #[serde(rename = "D")]
    pub d: f64,
    #[serde(rename = "C")]
    pub c: f64,
    #[serde(rename = "I")]
    pub i: f64,
}

/// FactorVAE and DCI on a fixed table, repeated over `cfg.seeds` seeds.
/// Seeds run on separate threads; results do not depend on scheduling.
pub fn evaluate_table(table: &LatentTable, cfg: &MetricConfig) -> Result<(Vec<SeedScores>, ImportanceMatrix), MetricError> {
    if cfg.seeds == 0 {
        return Err(MetricError::Input("at least one evaluation seed is required".into()));
    }
    let runs: Vec<Result<(SeedScores, ImportanceMatrix), MetricError>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..cfg.seeds as u64)
            .map(|i| {
                let seed = cfg.seed.wrapping_add(i);
                s.spawn(move || {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    let fv = factor_vae_score(table, cfg.n_iter, cfg.vote_batch, &mut rng)?;
                    let dc = dci(table, cfg.train_fraction, &cfg.forest, &mut rng)?;
                    Ok((
                        SeedScores {
                            seed,
                            factor_vae: fv.score,
                            d: dc.disentanglement,
                            c: dc.completeness,
                            i: dc.informativeness,
                        },
                        dc.importance,
                    ))
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("metric worker panicked")).collect()
    });
    let mut scores = Vec::with_capacity(runs.len());
    let (dims, factors) = (table.dims(), table.factors());
    let mut mean = vec![0.0; dims * factors];
    for run in runs {
        let (s, imp) = run?;
        mean.iter_mut().zip(&imp.values).for_each(|(m, v)| *m += v / cfg.seeds as f64);
        scores.push(s);
    }
    Ok((scores, ImportanceMatrix::new(dims, factors, mean)?))
}

/// Contrastive bounds per supervised factor, from posterior means of the T
/// slices over `cfg.mi_batches` sampled batches.
pub fn mi_bounds(table: &LatentTable, ds: &FactorizedDataset, indices: &[usize], cfg: &MetricConfig) -> Result<Vec<f64>, MetricError> {
    let supervised = ds.supervised();
    let layout = &table.layout;
    if supervised.len() != layout.k() || table.rows() != indices.len() {
        return Err(MetricError::Input("table does not match the dataset's supervised factors".into()));
    }
    let b = cfg.mi_batch_size.min(indices.len());
    let positions: Vec<usize> = (0..indices.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6d69);
    // `positions` index rows of the table; map labels through `indices`.
    let sub = ds.subset(indices);
    let mut total = vec![0.0; layout.k()];
    for _ in 0..cfg.mi_batches {
        let batch = sample_contrastive_batch(&sub, &positions, b, &mut rng)?;
        for (i, &f) in supervised.iter().enumerate() {
            let r = layout.t_range(i)?;
            let mut vals = Vec::with_capacity(b * r.len());
            for &row in &batch.indices {
                vals.extend_from_slice(&table.codes[row * table.dims() + r.start..row * table.dims() + r.end]);
            }
            let mut tape = Tape::<f64>::new();
            let z = tape.constant(Tensor::new(vec![b, r.len()], vals).map_err(ModelError::from)?);
            let labels = batch.factor_labels(f, ds.num_factors());
            let nce = info_nce(&mut tape, z, &labels, cfg.tau, false).map_err(|e| MetricError::Input(e.to_string()))?;
            total[i] += tape.value(nce).item();
        }
    }
    Ok(total.into_iter().map(|l| mi_bound(b, l / cfg.mi_batches as f64)).collect())
}

/// Full report for a model over the samples `indices` of `ds`.
pub fn evaluate<T: Real>(
    model: &XFactorsModel<T>,
    ds: &FactorizedDataset,
    indices: &[usize],
    cfg: &MetricConfig,
) -> Result<MetricReport, MetricError> {
    let table = LatentTable::from_model(model, ds, indices)?;
    let bounds = if table.layout.k() > 0 {
        mi_bounds(&table, ds, indices, cfg)?
    } else {
        Vec::new()
    };
    let pca = match table.layout.dim_s() {
        ds_ if ds_ >= 2 => {
            let s = table.layout.s_range();
            let codes: Vec<f64> = table.codes.chunks(table.dims()).flat_map(|row| row[s.clone()].iter().copied()).collect();
            let p = pca_top2(&codes, table.rows(), ds_)?;
            Some(PcaSummary {
                explained: p.explained,
                components: p.components,
            })
        }
        _ => None,
    };
    let scored = if cfg.grouped_residual {
        let keep: Vec<bool> = ds.specs().iter().map(|s| s.supervised).collect();
        table.grouped_residual(&keep)?
    } else {
        table
    };
    let (per_seed, importance) = evaluate_table(&scored, cfg)?;
    let pick = |g: fn(&SeedScores) -> f64| Summary::of(&per_seed.iter().map(g).collect::<Vec<_>>());
    Ok(MetricReport {
        factor_vae: pick(|s| s.factor_vae),
        dci: DciSummary {
            d: pick(|s| s.d),
            c: pick(|s| s.c),
            i: pick(|s| s.i),
        },
        importance: importance.rows(),
        factor_names: scored.factor_names.clone(),
        pca,
        mi_bounds: bounds,
        per_seed,
    })
}
