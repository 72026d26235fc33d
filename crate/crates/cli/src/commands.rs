use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde_json::{json, Value};
use xfactors::data::{save, split, FactorizedDataset};
use xfactors::editing::{decode_edit, embed_means, save_mosaic, swap_factor, MeanLatent};
use xfactors::grad::{Real, Tensor};
use xfactors::metrics::{evaluate, pca_top2, LatentTable, MetricError, MetricReport};
use xfactors::model::{load_checkpoint, BnMode, XFactorsModel};
use xfactors::trainer::{fit, FitOptions, TrainError};

use crate::config::{plan, supervise_all, Ablation, LoadedConfig, Overrides};
use crate::plot::{cells_tensor, palette, scatter};
use crate::CliError;

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

fn train_error(e: TrainError) -> CliError {
    match e {
        TrainError::Config(_) | TrainError::Data(_) => CliError::Usage(e.to_string()),
        other => runtime(other),
    }
}

fn metric_error(e: MetricError) -> CliError {
    match e {
        MetricError::Input(_) | MetricError::InsufficientSamples { .. } => CliError::Usage(e.to_string()),
        other => runtime(other),
    }
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| runtime(format!("cannot create {}: {e}", dir.display())))
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(runtime)?;
    std::fs::write(path, text + "\n").map_err(|e| runtime(format!("cannot write {}: {e}", path.display())))
}

pub fn generate(config: &Option<PathBuf>, seed: Option<u64>, out: &Path) -> Result<(), CliError> {
    let mut cfg = LoadedConfig::read(config.as_deref())?;
    if let Some(s) = seed {
        cfg.file.data_seed = Some(s);
    }
    // A dataset path in the config names an input, not what to render.
    cfg.file.dataset = None;
    let ds = cfg.dataset(None)?;
    if let Some(dir) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    save(&ds, out).map_err(runtime)?;
    println!("{} samples -> {}", ds.len(), out.display());
    println!("checksum {}", ds.checksum());
    Ok(())
}

/// Applies the factor supervision a checkpoint was trained with: a model
/// with one subspace per factor and no residual treats every factor as
/// supervised.
fn align_dataset<T: Real>(model: &XFactorsModel<T>, ds: FactorizedDataset) -> Result<FactorizedDataset, CliError> {
    let layout = model.layout();
    let ds = if layout.k() == ds.num_factors() && layout.k() != ds.supervised().len() && layout.dim_s() == 0 {
        supervise_all(&ds)?
    } else {
        ds
    };
    if layout.k() != ds.supervised().len() {
        return Err(CliError::Usage(format!(
            "checkpoint has {} factor subspaces but the dataset has {} supervised factors",
            layout.k(),
            ds.supervised().len()
        )));
    }
    if model.config().image_shape != ds.image_shape() {
        return Err(CliError::Usage(format!(
            "checkpoint expects images {:?} but the dataset has {:?}",
            model.config().image_shape,
            ds.image_shape()
        )));
    }
    Ok(ds)
}

fn load_model<T: Real>(path: &Path) -> Result<XFactorsModel<T>, CliError> {
    let ck = load_checkpoint::<T>(path).map_err(|e| CliError::Usage(format!("checkpoint {}: {e}", path.display())))?;
    let mut model = ck.model;
    model.set_mode(BnMode::Eval);
    Ok(model)
}

pub(crate) struct Trained<T> {
    pub model: XFactorsModel<T>,
    pub dataset: FactorizedDataset,
}

fn train_run<T: Real>(
    cfg: &LoadedConfig,
    o: &Overrides,
    dataset: Option<&Path>,
    resume: Option<&Path>,
    out: &Path,
    quiet: bool,
) -> Result<Trained<T>, CliError> {
    let mut ds = cfg.dataset(dataset)?;
    if o.ablate == Some(Ablation::EmptyS) {
        ds = supervise_all(&ds)?;
    }
    let p = plan(&cfg.file, &ds, o)?;
    let policy = cfg.file.split.unwrap_or_default();
    let (pool, _) = split(&ds, &policy).map_err(|e| CliError::Usage(e.to_string()))?;
    let resume = match resume {
        Some(path) => Some(load_checkpoint::<T>(path).map_err(|e| CliError::Usage(format!("checkpoint {}: {e}", path.display())))?),
        None => None,
    };
    create_dir(out)?;
    let result = fit(
        &p.train,
        &p.model,
        &ds,
        &pool,
        FitOptions {
            out_dir: Some(out),
            resume,
            on_eval: None,
            config_echo: Some(cfg.raw.clone()),
        },
    )
    .map_err(train_error)?;
    if !quiet {
        match result.log.last() {
            Some((step, b)) => println!(
                "step {step}: total {:.4} (reco {:.4}, kl_s {:.4}, kl_t {:.4})",
                b.total, b.reco, b.kl_s, b.kl_t
            ),
            None => println!("no steps taken"),
        }
        println!("artifacts in {}", out.display());
    }
    let mut model = result.state.model;
    model.set_mode(BnMode::Eval);
    Ok(Trained { model, dataset: ds })
}

pub fn train<T: Real>(config: &Option<PathBuf>, o: &Overrides, dataset: Option<&Path>, resume: Option<&Path>, out: &Path) -> Result<(), CliError> {
    let cfg = LoadedConfig::read(config.as_deref())?;
    train_run::<T>(&cfg, o, dataset, resume, out, false).map(|_| ())
}

fn write_report(report: &MetricReport, out: &Path) -> Result<(), CliError> {
    create_dir(out)?;
    write_json(&out.join("report.json"), report)?;
    let mut w = csv::Writer::from_path(out.join("importance.csv")).map_err(runtime)?;
    let mut header = vec!["dim".to_string()];
    header.extend(report.factor_names.iter().cloned());
    w.write_record(&header).map_err(runtime)?;
    for (d, row) in report.importance.iter().enumerate() {
        let mut rec = vec![d.to_string()];
        rec.extend(row.iter().map(|v| v.to_string()));
        w.write_record(&rec).map_err(runtime)?;
    }
    w.flush().map_err(runtime)
}

pub fn eval<T: Real>(
    config: &Option<PathBuf>,
    checkpoint: &Path,
    dataset: Option<&Path>,
    seeds: Option<usize>,
    seed: Option<u64>,
    out: &Path,
) -> Result<(), CliError> {
    let cfg = LoadedConfig::read(config.as_deref())?;
    let model = load_model::<T>(checkpoint)?;
    let ds = align_dataset(&model, cfg.dataset(dataset)?)?;
    let mut mc = cfg.metrics();
    if let Some(s) = seeds {
        mc.seeds = s;
    }
    if let Some(s) = seed {
        mc.seed = s;
    }
    let all: Vec<usize> = (0..ds.len()).collect();
    let report = evaluate(&model, &ds, &all, &mc).map_err(metric_error)?;
    write_report(&report, out)?;
    println!(
        "factor_vae {:.4} ± {:.4}  D {:.4}  C {:.4}  I {:.4}",
        report.factor_vae.mean, report.factor_vae.std, report.dci.d.mean, report.dci.c.mean, report.dci.i.mean
    );
    Ok(())
}

/// Concatenates equally shaped `[n, C, H, W]` tensors along the batch axis.
fn stack_rows<T: Real>(rows: &[Tensor<T>]) -> Result<Tensor<T>, CliError> {
    let mut shape = rows[0].shape().to_vec();
    shape[0] = rows.iter().map(|r| r.shape()[0]).sum();
    let data: Vec<T> = rows.iter().flat_map(|r| r.data().iter().copied()).collect();
    Tensor::new(shape, data).map_err(runtime)
}

pub fn swap<T: Real>(
    config: &Option<PathBuf>,
    checkpoint: &Path,
    dataset: Option<&Path>,
    src: &[usize],
    tgt: &[usize],
    factors: Option<&[usize]>,
    out: &Path,
) -> Result<(), CliError> {
    let cfg = LoadedConfig::read(config.as_deref())?;
    let model = load_model::<T>(checkpoint)?;
    let ds = align_dataset(&model, cfg.dataset(dataset)?)?;
    if src.len() != tgt.len() {
        return Err(CliError::Usage(format!("{} source indices but {} target indices", src.len(), tgt.len())));
    }
    if let Some(&bad) = src.iter().chain(tgt).find(|&&i| i >= ds.len()) {
        return Err(CliError::Usage(format!("sample index {bad} out of range for {} samples", ds.len())));
    }
    let k = model.layout().k();
    let factors: Vec<usize> = factors.map(<[usize]>::to_vec).unwrap_or_else(|| (0..k).collect());
    if let Some(&bad) = factors.iter().find(|&&i| i >= k) {
        return Err(CliError::Usage(format!("factor index {bad} out of range for {k} factor subspaces")));
    }
    let embed = |idx: &[usize]| embed_means(&model, &ds.batch_tensor::<T>(idx)).map_err(runtime);
    let (s, t) = (embed(src)?, embed(tgt)?);
    let mut rows = vec![decode_edit(&model, &s).map_err(runtime)?, decode_edit(&model, &t).map_err(runtime)?];
    let names: Vec<String> = ds.supervised().iter().map(|&f| ds.specs()[f].name.clone()).collect();
    let mut row_labels = vec!["source".to_string(), "target".to_string()];
    for &i in &factors {
        let edited: Vec<MeanLatent<T>> = s
            .iter()
            .zip(&t)
            .map(|(a, b)| swap_factor(a, b, i))
            .collect::<Result<_, _>>()
            .map_err(runtime)?;
        rows.push(decode_edit(&model, &edited).map_err(runtime)?);
        row_labels.push(format!("swap {}", names[i]));
    }
    let cols: Vec<String> = src.iter().zip(tgt).map(|(a, b)| format!("{a}<-{b}")).collect();
    if let Some(dir) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    save_mosaic(out, &stack_rows(&rows)?, row_labels, cols).map_err(runtime)?;
    println!("{} rows x {} columns -> {}", factors.len() + 2, src.len(), out.display());
    Ok(())
}

pub struct SweepGrid {
    pub dim_s: Vec<usize>,
    pub beta_t: Vec<f64>,
    pub jobs: usize,
    pub seeds: Option<usize>,
    pub overrides: Overrides,
}

fn set_path(doc: &mut Value, section: &str, key: &str, v: Value) {
    if !doc.is_object() {
        *doc = json!({});
    }
    let obj = doc.as_object_mut().expect("object");
    let sec = obj.entry(section.to_string()).or_insert_with(|| json!({}));
    if !sec.is_object() {
        *sec = json!({});
    }
    sec.as_object_mut().expect("object").insert(key.to_string(), v);
}

/// The standalone config of one sweep cell: the base document with the
/// grid point and command-line overrides written in.
fn cell_config(base: &LoadedConfig, grid: &SweepGrid, dim_s: usize, beta_t: f64) -> Result<LoadedConfig, CliError> {
    let mut raw = base.raw.clone();
    if !raw.is_object() {
        raw = json!({});
    }
    set_path(&mut raw, "layout", "dim_s", json!(dim_s));
    set_path(&mut raw, "train", "beta_t", json!(beta_t));
    let o = &grid.overrides;
    if let Some(s) = o.seed {
        set_path(&mut raw, "train", "seed", json!(s));
    }
    if let Some(e) = o.epochs {
        set_path(&mut raw, "train", "epochs", json!(e));
    }
    if let Some(s) = grid.seeds {
        set_path(&mut raw, "metrics", "seeds", json!(s));
    }
    let obj = raw.as_object_mut().expect("object");
    if let Some(a) = o.arch {
        obj.insert("arch".into(), serde_json::to_value(a).map_err(runtime)?);
    }
    // Cells live in their own directories, so pin the dataset path.
    if let Some(p) = &base.file.dataset {
        let abs = if p.is_absolute() { p.clone() } else { base.base.join(p) };
        let abs = std::fs::canonicalize(&abs).unwrap_or(abs);
        obj.insert("dataset".into(), json!(abs));
    }
    let file = serde_json::from_value(raw.clone()).map_err(|e| CliError::Usage(format!("sweep cell config: {e}")))?;
    Ok(LoadedConfig {
        file,
        raw,
        base: base.base.clone(),
    })
}

pub fn sweep<T: Real>(config: &Option<PathBuf>, grid: &SweepGrid, out: &Path) -> Result<(), CliError> {
    let base = LoadedConfig::read(config.as_deref())?;
    if grid.dim_s.is_empty() || grid.beta_t.is_empty() {
        return Err(CliError::Usage("sweep grid is empty".into()));
    }
    let cells: Vec<(usize, f64)> = grid.dim_s.iter().flat_map(|&d| grid.beta_t.iter().map(move |&b| (d, b))).collect();
    let configs: Vec<LoadedConfig> = cells.iter().map(|&(d, b)| cell_config(&base, grid, d, b)).collect::<Result<_, _>>()?;
    create_dir(out)?;
    let dirs: Vec<PathBuf> = cells.iter().map(|&(d, b)| out.join(format!("dim_s={d}_beta_t={b}"))).collect();
    for (dir, c) in dirs.iter().zip(&configs) {
        create_dir(dir)?;
        write_json(&dir.join("config.json"), &c.raw)?;
    }

    let run_cell = |i: usize| -> Result<MetricReport, CliError> {
        let no_overrides = Overrides {
            seed: None,
            epochs: None,
            arch: None,
            ablate: None,
        };
        let trained = train_run::<T>(&configs[i], &no_overrides, None, None, &dirs[i], true)?;
        let all: Vec<usize> = (0..trained.dataset.len()).collect();
        let report = evaluate(&trained.model, &trained.dataset, &all, &configs[i].metrics()).map_err(metric_error)?;
        write_report(&report, &dirs[i])?;
        Ok(report)
    };
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<MetricReport, CliError>>>> = Mutex::new((0..cells.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..grid.jobs.clamp(1, cells.len()) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= cells.len() {
                    break;
                }
                let r = run_cell(i);
                if let Ok(rep) = &r {
                    eprintln!("dim_s={} beta_t={}: factor_vae {:.4}", cells[i].0, cells[i].1, rep.factor_vae.mean);
                }
                results.lock().expect("results lock")[i] = Some(r);
            });
        }
    });

    let mut w = csv::Writer::from_path(out.join("sweep.csv")).map_err(runtime)?;
    w.write_record(["dim_s", "beta_t", "factor_vae_mean", "factor_vae_std"])
        .map_err(runtime)?;
    for (cell, r) in cells.iter().zip(results.into_inner().expect("results lock")) {
        let rep = r.expect("every cell ran")?;
        w.write_record([
            cell.0.to_string(),
            cell.1.to_string(),
            rep.factor_vae.mean.to_string(),
            rep.factor_vae.std.to_string(),
        ])
        .map_err(runtime)?;
    }
    w.flush().map_err(runtime)?;
    println!("{} cells -> {}", cells.len(), out.join("sweep.csv").display());
    Ok(())
}

/// 2-D coordinates of the columns `range` of `codes`: the block itself when
/// it is at most 2 wide, else its leading principal components.
fn project(table: &LatentTable, range: std::ops::Range<usize>) -> Result<(Vec<(f64, f64)>, Option<f64>), CliError> {
    let (n, d) = (table.rows(), table.dims());
    let width = range.len();
    let block: Vec<f64> = table.codes.chunks(d).flat_map(|r| r[range.clone()].iter().copied()).collect();
    Ok(match width {
        0 => (Vec::new(), None),
        1 => (block.iter().map(|&v| (v, 0.0)).collect(), None),
        2 => (block.chunks(2).map(|p| (p[0], p[1])).collect(), None),
        _ => {
            let p = pca_top2(&block, n, width).map_err(metric_error)?;
            (p.projection.chunks(2).map(|q| (q[0], q[1])).collect(), Some(p.explained))
        }
    })
}

pub fn plot_latents<T: Real>(config: &Option<PathBuf>, checkpoint: &Path, dataset: Option<&Path>, out: &Path) -> Result<(), CliError> {
    let cfg = LoadedConfig::read(config.as_deref())?;
    let model = load_model::<T>(checkpoint)?;
    let ds = align_dataset(&model, cfg.dataset(dataset)?)?;
    let all: Vec<usize> = (0..ds.len()).collect();
    let table = LatentTable::from_model(&model, &ds, &all).map_err(metric_error)?;
    let layout = table.layout.clone();
    create_dir(out)?;

    let mut blocks = Vec::new();
    let mut row_labels = Vec::new();
    for (i, &f) in ds.supervised().iter().enumerate() {
        blocks.push(project(&table, layout.t_range(i).map_err(runtime)?)?.0);
        row_labels.push(format!("T_{}", ds.specs()[f].name));
    }
    if layout.dim_s() > 0 {
        let (pts, explained) = project(&table, layout.s_range())?;
        blocks.push(pts);
        match explained {
            Some(e) => {
                row_labels.push(format!("S ({:.0}% explained variance)", e * 100.0));
                println!("S: PCA ({:.0}% explained variance)", e * 100.0);
            }
            None => row_labels.push("S".into()),
        }
    }
    let f = table.factors();
    let mut cells = Vec::with_capacity(blocks.len() * f);
    for pts in &blocks {
        for c in 0..f {
            let colors: Vec<[f64; 3]> = (0..table.rows()).map(|r| palette(table.label(r, c), table.cardinalities[c])).collect();
            cells.push(scatter(pts, &colors));
        }
    }
    save_mosaic(&out.join("latents.ppm"), &cells_tensor(cells), row_labels, table.factor_names.clone()).map_err(runtime)?;

    let mut w = csv::Writer::from_path(out.join("latents.csv")).map_err(runtime)?;
    let mut header = vec!["index".to_string()];
    header.extend(table.factor_names.iter().cloned());
    header.extend((0..table.dims()).map(|j| format!("z_{j}")));
    w.write_record(&header).map_err(runtime)?;
    for r in 0..table.rows() {
        let mut rec = vec![r.to_string()];
        rec.extend((0..f).map(|c| table.label(r, c).to_string()));
        rec.extend(table.codes[r * table.dims()..(r + 1) * table.dims()].iter().map(|v| v.to_string()));
        w.write_record(&rec).map_err(runtime)?;
    }
    w.flush().map_err(runtime)?;
    println!("{} subspace rows x {f} factor columns -> {}", blocks.len(), out.display());
    Ok(())
}
