use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use xfactors::data::{generate_dataset, sample_contrastive_batch, ContrastiveBatch, FactorizedDataset, MiniSprites};
use xfactors::grad::{grad_check, Real};
use xfactors::model::{load_checkpoint, Arch, BatchNormRecord, LatentLayout, ModelConfig, XFactorsModel};
use xfactors::trainer::{batch_loss, fit, train_step, FitOptions, Noise, RunState, TrainConfig, CHECKPOINT_FILE, LOG_FILE};

fn sprites() -> FactorizedDataset {
    let cfg = MiniSprites {
        height: 16,
        width: 16,
        min_radius: 2.0,
        max_radius: 3.0,
        scales: 2,
        positions: 3,
        intensities: Some(2),
        ..Default::default()
    };
    generate_dataset(&cfg, 0, 1000).unwrap()
}

fn mlp(hidden: usize) -> ModelConfig {
    ModelConfig {
        widths: vec![hidden],
        ..ModelConfig::mlp(LatentLayout::uniform(3, 4, 2).unwrap(), [1, 16, 16])
    }
}

fn train_cfg(seed: u64) -> TrainConfig {
    let mut cfg = TrainConfig::desk(4, seed);
    cfg.batch_size = 8;
    cfg.epochs = 2;
    cfg
}

fn four_image_batch(ds: &FactorizedDataset, seed: u64) -> ContrastiveBatch {
    let pool: Vec<usize> = (0..ds.len()).collect();
    sample_contrastive_batch(ds, &pool, 4, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

/// Full objective on a fixed batch with fixed noise, no parameter update.
fn eval_total<T: Real>(model: &XFactorsModel<T>, ds: &FactorizedDataset, batch: &ContrastiveBatch, cfg: &TrainConfig) -> f64 {
    let noise = Noise::draw(model.layout(), batch.len(), &mut ChaCha8Rng::seed_from_u64(99));
    let mut tape = xfactors::grad::Tape::new();
    let bound = model.bind(&mut tape, false);
    let vars = batch_loss(&mut tape, model, &bound, ds, batch, noise, &cfg.weights, &mut BatchNormRecord::default()).unwrap();
    vars.breakdown(&tape).total
}

#[test]
fn repeating_one_batch_lowers_its_loss() {
    let ds = sprites();
    let cfg = train_cfg(3);
    let batch = four_image_batch(&ds, 1);
    let mut state = RunState::<f64>::new(mlp(32), 3).unwrap();
    let before = eval_total(&state.model, &ds, &batch, &cfg);
    for _ in 0..50 {
        train_step(&mut state, &cfg, &ds, &batch).unwrap();
    }
    let after = eval_total(&state.model, &ds, &batch, &cfg);
    assert!(after < before, "{before} -> {after}");
}

#[test]
fn overfit_four_images_below_ten_percent() {
    let ds = sprites();
    let cfg = train_cfg(4);
    let batch = four_image_batch(&ds, 2);
    let mut state = RunState::<f64>::new(mlp(64), 4).unwrap();
    let initial = eval_total(&state.model, &ds, &batch, &cfg);
    let mut reached = None;
    for step in 1..=500 {
        let b = train_step(&mut state, &cfg, &ds, &batch).unwrap();
        if b.total < 0.1 * initial {
            reached = Some(step);
            break;
        }
    }
    assert!(reached.is_some(), "initial {initial}, never dropped below 10%");
}

#[test]
fn same_seed_same_trace() {
    let ds = sprites();
    let cfg = train_cfg(11);
    let pool: Vec<usize> = (0..ds.len()).collect();
    let a = fit::<f64>(&cfg, &mlp(16), &ds, &pool, FitOptions::default()).unwrap();
    let b = fit::<f64>(&cfg, &mlp(16), &ds, &pool, FitOptions::default()).unwrap();
    assert_eq!(a.log, b.log);
    assert_eq!(a.state.model, b.state.model);
    let c = fit::<f64>(&train_cfg(12), &mlp(16), &ds, &pool, FitOptions::default()).unwrap();
    assert_ne!(a.log, c.log);
}

#[test]
fn single_precision_is_deterministic_too() {
    let ds = sprites();
    let mut cfg = train_cfg(5);
    cfg.epochs = 1;
    let pool: Vec<usize> = (0..ds.len()).collect();
    let a = fit::<f32>(&cfg, &mlp(16), &ds, &pool, FitOptions::default()).unwrap();
    let b = fit::<f32>(&cfg, &mlp(16), &ds, &pool, FitOptions::default()).unwrap();
    for ((_, x), (_, y)) in a.log.iter().zip(&b.log) {
        assert!((x.total - y.total).abs() <= 1e-4 * x.total.abs());
    }
}

#[test]
fn resume_continues_bit_identically() {
    let ds = sprites();
    let pool: Vec<usize> = (0..ds.len()).collect();
    let cfg = train_cfg(7);
    let straight = fit::<f64>(&cfg, &mlp(16), &ds, &pool, FitOptions::default()).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let mut half = cfg.clone();
    half.epochs = 1;
    let first = fit::<f64>(
        &half,
        &mlp(16),
        &ds,
        &pool,
        FitOptions {
            out_dir: Some(dir.path()),
            ..Default::default()
        },
    )
    .unwrap();
    let s = first.state.step;
    let ck = load_checkpoint::<f64>(&dir.path().join(CHECKPOINT_FILE)).unwrap();
    assert_eq!(ck.moments.as_ref().unwrap(), &first.state.moments);
    let second = fit::<f64>(
        &cfg,
        &mlp(16),
        &ds,
        &pool,
        FitOptions {
            out_dir: Some(dir.path()),
            resume: Some(ck),
            ..Default::default()
        },
    )
    .unwrap();
    assert_eq!(second.log.first().unwrap().0, s + 1);
    assert_eq!(second.state.model, straight.state.model);
    let joined: Vec<_> = first.log.iter().chain(&second.log).cloned().collect();
    assert_eq!(joined, straight.log);

    let csv = std::fs::read_to_string(dir.path().join(LOG_FILE)).unwrap();
    let steps: Vec<u64> = csv.lines().skip(1).map(|l| l.split(',').next().unwrap().parse().unwrap()).collect();
    assert_eq!(steps, (1..=straight.state.step).collect::<Vec<_>>());
    assert!(csv.starts_with("step,reco,kl_s,kl_t,nce_1,nce_2,nce_3,nce_4,total,mi_bound_1"));
}

#[test]
fn fit_writes_manifest_with_dataset_hash() {
    let ds = sprites();
    let pool: Vec<usize> = (0..ds.len()).collect();
    let mut cfg = train_cfg(2);
    cfg.epochs = 1;
    let dir = tempfile::tempdir().unwrap();
    fit::<f64>(
        &cfg,
        &mlp(16),
        &ds,
        &pool,
        FitOptions {
            out_dir: Some(dir.path()),
            ..Default::default()
        },
    )
    .unwrap();
    let m: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m["dataset"]["hash"].as_str().unwrap().len(), 64);
    assert_eq!(m["precision"], "f64");
    assert_eq!(m["steps"], pool.len().div_ceil(8) as u64);
}

#[test]
fn eval_hook_runs_on_schedule() {
    let ds = sprites();
    let pool: Vec<usize> = (0..ds.len()).collect();
    let mut cfg = train_cfg(2);
    cfg.epochs = 4;
    cfg.eval_every = 2;
    let out = fit::<f64>(
        &cfg,
        &mlp(8),
        &ds,
        &pool,
        FitOptions {
            on_eval: Some(Box::new(|m: &XFactorsModel<f64>, epoch| {
                assert_eq!(m.mode(), xfactors::model::BnMode::Eval);
                Ok(-(epoch as f64 - 2.0).abs())
            })),
            ..Default::default()
        },
    )
    .unwrap();
    assert_eq!(out.evals.iter().map(|e| e.0).collect::<Vec<_>>(), vec![2, 4]);
    assert_eq!(out.state.best, Some((2, 0.0)));
}

fn full_loss_grad_check(config: ModelConfig) {
    let ds = sprites();
    let cfg = train_cfg(0);
    let batch = four_image_batch(&ds, 5);
    let model = XFactorsModel::<f64>::new(config, 21).unwrap();
    let noise = Noise::<f64>::draw(model.layout(), 4, &mut ChaCha8Rng::seed_from_u64(8));
    let report = grad_check(
        |tape, vars| {
            let bound = model.bind_with(tape, vars.to_vec());
            let mut rec = BatchNormRecord::default();
            batch_loss(tape, &model, &bound, &ds, &batch, noise.clone(), &cfg.weights, &mut rec)
                .map(|v| v.total)
                .map_err(|e| match e {
                    xfactors::trainer::TrainError::Grad(g) => g,
                    other => panic!("{other}"),
                })
        },
        model.params(),
        1e-5,
        1e-6,
    )
    .unwrap();
    assert!(
        report.passed(),
        "{:?}",
        report.params.iter().max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    );
}

#[test]
fn full_objective_gradients_match_finite_differences_mlp() {
    full_loss_grad_check(mlp(8));
}

#[test]
fn full_objective_gradients_match_finite_differences_conv() {
    full_loss_grad_check(ModelConfig {
        arch: Arch::Conv,
        widths: vec![2, 3, 4],
        ..ModelConfig::conv(LatentLayout::uniform(3, 4, 2).unwrap(), [1, 16, 16])
    });
}
