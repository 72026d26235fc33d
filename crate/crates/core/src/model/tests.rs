use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::data::{generate_dataset, MiniSprites, DEFAULT_CAP};
use crate::grad::{grad_check, OpKind, ParamStore};

fn random_images(b: usize, shape: [usize; 3], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = b * shape.iter().product::<usize>();
    let data = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
    Tensor::new(vec![b, shape[0], shape[1], shape[2]], data).unwrap()
}

fn small_conv(layout: LatentLayout, shape: [usize; 3]) -> XFactorsModel<f64> {
    let cfg = ModelConfig {
        widths: vec![4, 6, 8],
        ..ModelConfig::conv(layout, shape)
    };
    XFactorsModel::new(cfg, 1).unwrap()
}

#[test]
fn code_widths_follow_layout() {
    let layout = LatentLayout::uniform(16, 4, 2).unwrap();
    let model = XFactorsModel::<f64>::new(ModelConfig::mlp(layout, [1, 32, 32]), 0).unwrap();
    let (s, t) = model.encode(&random_images(8, [1, 32, 32], 0)).unwrap();
    assert_eq!(s.mu.shape(), &[8, 16]);
    assert_eq!(s.log_var.shape(), &[8, 16]);
    assert_eq!(t.mu.shape(), &[8, 8]);
    assert_eq!(t.log_var.shape(), &[8, 8]);
}

#[test]
fn wrong_input_shape_is_an_error() {
    let layout = LatentLayout::uniform(2, 1, 2).unwrap();
    let model = XFactorsModel::<f64>::new(ModelConfig::mlp(layout, [1, 32, 32]), 0).unwrap();
    assert!(matches!(model.encode(&random_images(2, [1, 16, 16], 0)), Err(ModelError::Shape(_))));
    assert!(matches!(model.decode(&Tensor::zeros(&[2, 5])), Err(ModelError::Shape(_))));
}

#[test]
fn zero_head_gives_prior_code() {
    let layout = LatentLayout::uniform(3, 2, 2).unwrap();
    let mut model = XFactorsModel::<f64>::new(ModelConfig::mlp(layout, [1, 8, 8]), 0).unwrap();
    for name in ["psi_s.head.weight", "psi_t.head.weight"] {
        let id = model.params().id(name).unwrap();
        model.params_mut().get_mut(id).value.data_mut().fill(0.0);
    }
    let (s, t) = model.encode(&random_images(5, [1, 8, 8], 3)).unwrap();
    for c in [s, t] {
        assert!(c.mu.data().iter().all(|&v| v == 0.0));
        assert!(c.log_var.data().iter().all(|&v| v == 0.0));
    }
}

#[test]
fn encoding_is_deterministic() {
    let layout = LatentLayout::uniform(4, 2, 2).unwrap();
    let model = XFactorsModel::<f64>::new(ModelConfig::mlp(layout, [1, 8, 8]), 2).unwrap();
    let x = random_images(3, [1, 8, 8], 1);
    assert_eq!(model.encode(&x).unwrap(), model.encode(&x).unwrap());
}

#[test]
fn clamped_log_var_collapses_sample_to_mean() {
    let mu = Tensor::from_f64(&[1, 3], &[0.5, -1.0, 2.0]).unwrap();
    let code = GaussianCode {
        mu: mu.clone(),
        log_var: Tensor::full(&[1, 3], -LOG_VAR_CLAMP),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let z = reparameterize(&code, &mut rng);
    let eps: Tensor<f64> = standard_normal(&[1, 3], &mut ChaCha8Rng::seed_from_u64(0));
    for ((z, m), e) in z.data().iter().zip(mu.data()).zip(eps.data()) {
        assert!((z - m).abs() <= 0.0025 * e.abs());
    }
}

#[test]
fn prior_samples_have_unit_moments() {
    let n = 100_000;
    let code = GaussianCode {
        mu: Tensor::<f64>::zeros(&[n, 1]),
        log_var: Tensor::zeros(&[n, 1]),
    };
    let z = reparameterize(&code, &mut ChaCha8Rng::seed_from_u64(5));
    let mean = z.sum_f64() / n as f64;
    let var = z.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    assert!(mean.abs() < 3.0 / (n as f64).sqrt());
    assert!((var - 1.0).abs() < 0.05);
    let again = reparameterize(&code, &mut ChaCha8Rng::seed_from_u64(5));
    assert_eq!(z, again);
}

#[test]
fn reparameterization_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let eps: Tensor<f64> = standard_normal(&[2, 3], &mut rng);
    let mut store = ParamStore::new();
    store.add("mu", random_images(1, [1, 2, 3], 8).reshaped(&[2, 3]).unwrap()).unwrap();
    let lv = Tensor::from_f64(&[2, 3], &[-1.0, 0.0, 0.5, 1.0, -0.3, 0.2]).unwrap();
    store.add("log_var", lv.clone()).unwrap();
    let f = |tape: &mut Tape<f64>, v: &[Var]| {
        let z = reparameterize_vars(tape, CodeVars { mu: v[0], log_var: v[1] }, eps.clone())?;
        tape.sum(z)
    };
    let report = grad_check(f, &store, 1e-5, 1e-6).unwrap();
    assert!(report.passed(), "{report:?}");

    let mut tape = Tape::new();
    let vars = store.bind(&mut tape);
    let loss = f(&mut tape, &vars).unwrap();
    let g = tape.backward(loss).unwrap();
    assert!(g.wrt(vars[0]).data().iter().all(|&d| d == 1.0));
    for ((d, l), e) in g.wrt(vars[1]).data().iter().zip(lv.data()).zip(eps.data()) {
        assert!((d - 0.5 * (0.5 * l).exp() * e).abs() < 1e-15);
    }
}

#[test]
fn decoder_output_is_an_image_in_unit_range() {
    let layout = LatentLayout::uniform(4, 4, 2).unwrap();
    let model = XFactorsModel::<f64>::new(ModelConfig::mlp(layout, [1, 32, 32]), 0).unwrap();
    let z: Tensor<f64> = standard_normal(&[3, 12], &mut ChaCha8Rng::seed_from_u64(1)).map(|v| 5.0 * v);
    let x = model.decode(&z).unwrap();
    assert_eq!(x.shape(), &[3, 1, 32, 32]);
    assert!(x.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    assert_eq!(model.decode(&z).unwrap(), x);
}

#[test]
fn conv_trunk_matches_table_at_64px() {
    let layout = LatentLayout::uniform(126, 5, 2).unwrap();
    let model = XFactorsModel::<f32>::new(ModelConfig::conv(layout, [3, 64, 64]), 0).unwrap();
    let head = model.params().id("psi_t.head.weight").unwrap();
    assert_eq!(model.params().get(head).value.shape(), &[192 * 8 * 8, 20]);
    let fc = model.params().id("phi.fc.weight").unwrap();
    assert_eq!(model.params().get(fc).value.shape(), &[136, 192 * 8 * 8]);
}

#[test]
fn conv_model_round_trips_shapes() {
    let layout = LatentLayout::uniform(3, 2, 2).unwrap();
    let model = small_conv(layout, [1, 16, 24]);
    let x = random_images(2, [1, 16, 24], 0);
    let z = model.embed(&x).unwrap();
    assert_eq!(z.shape(), &[2, 7]);
    assert_eq!(model.decode(&z).unwrap().shape(), &[2, 1, 16, 24]);
}

#[test]
fn conv_requires_multiple_of_eight() {
    let layout = LatentLayout::uniform(3, 2, 2).unwrap();
    assert!(XFactorsModel::<f64>::new(ModelConfig::conv(layout, [1, 30, 32]), 0).is_err());
}

#[test]
fn residual_encoder_can_be_removed_or_emptied() {
    let layout = LatentLayout::uniform(0, 2, 2).unwrap();
    let removed = ModelConfig {
        residual_encoder: false,
        ..ModelConfig::mlp(layout.clone(), [1, 8, 8])
    };
    let removed = XFactorsModel::<f64>::new(removed, 0).unwrap();
    assert!(removed.params().iter().all(|p| !p.name.starts_with("psi_s")));
    let emptied = XFactorsModel::<f64>::new(ModelConfig::mlp(layout, [1, 8, 8]), 0).unwrap();
    assert!(emptied.params().iter().any(|p| p.name.starts_with("psi_s")));
    let x = random_images(2, [1, 8, 8], 0);
    for m in [&removed, &emptied] {
        let (s, t) = m.encode(&x).unwrap();
        assert_eq!(s.width(), 0);
        assert_eq!(m.embed(&x).unwrap(), t.mu);
    }
    let bad = ModelConfig {
        residual_encoder: false,
        ..ModelConfig::mlp(LatentLayout::uniform(2, 2, 2).unwrap(), [1, 8, 8])
    };
    assert!(XFactorsModel::<f64>::new(bad, 0).is_err());
}

#[test]
fn constant_batch_normalizes_to_zero() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::full(&[8, 3], 2.5f64));
    let g = tape.constant(Tensor::full(&[3], 1.0));
    let b = tape.constant(Tensor::zeros(&[3]));
    let y = tape.apply(OpKind::BatchNorm { eps: 1e-5, training: true }, &[x, g, b]).unwrap();
    assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
}

fn rms(a: &Tensor<f64>) -> f64 {
    (a.data().iter().map(|v| v * v).sum::<f64>() / a.numel() as f64).sqrt()
}

#[test]
fn running_statistics_track_batch_statistics() {
    let ds = generate_dataset(&MiniSprites::default(), 0, DEFAULT_CAP).unwrap();
    let layout = LatentLayout::uniform(4, 4, 2).unwrap();
    let mut model = small_conv(layout, [1, 32, 32]);
    let fresh = model.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..60 {
        let idx: Vec<usize> = (0..32).map(|_| rng.random_range(0..ds.len())).collect();
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, false);
        let x = tape.constant(ds.batch_tensor(&idx));
        let mut rec = BatchNormRecord::default();
        model.encode_vars(&mut tape, &bound, x, &mut rec).unwrap();
        model.commit_batch_stats(&tape, &rec);
    }
    assert_ne!(model.running_stats(), fresh.running_stats());
    let idx: Vec<usize> = (0..64).map(|_| rng.random_range(0..ds.len())).collect();
    let x = ds.batch_tensor(&idx);
    let train = model.encode(&x).unwrap().1.mu;
    model.set_mode(BnMode::Eval);
    let eval = model.encode(&x).unwrap().1.mu;
    let diff = Tensor::new(train.shape().to_vec(), train.data().iter().zip(eval.data()).map(|(a, b)| a - b).collect()).unwrap();
    assert!(rms(&diff) < 0.1 * rms(&train), "{} vs {}", rms(&diff), rms(&train));
}

#[test]
fn eval_before_training_uses_initial_statistics() {
    let layout = LatentLayout::uniform(2, 2, 2).unwrap();
    let mut model = small_conv(layout, [1, 8, 8]);
    assert!(model.running_stats().iter().all(|s| s.mean.data().iter().all(|&v| v == 0.0)));
    assert!(model.running_stats().iter().all(|s| s.var.data().iter().all(|&v| v == 1.0)));
    model.set_mode(BnMode::Eval);
    let x = random_images(3, [1, 8, 8], 0);
    let once = model.encode(&x).unwrap();
    model.set_mode(BnMode::Eval);
    assert_eq!(model.encode(&x).unwrap(), once);
    model.set_mode(BnMode::Train);
    model.set_mode(BnMode::Train);
    let train = model.encode(&x).unwrap();
    model.set_mode(BnMode::Train);
    assert_eq!(model.encode(&x).unwrap(), train);
}

fn checkpoint_of(model: XFactorsModel<f64>, with_extras: bool) -> Checkpoint<f64> {
    let moments = with_extras.then(|| Moments {
        t: 17,
        m: model.params().iter().map(|p| p.value.map(|v| v * 0.5)).collect(),
        v: model.params().iter().map(|p| p.value.map(|v| v * v)).collect(),
    });
    let run = with_extras.then_some(RunRecord {
        step: 17,
        rng_seed: [7; 32],
        rng_stream: 3,
        rng_word_pos: 123_456_789_012_345,
    });
    Checkpoint { model, moments, run }
}

#[test]
fn checkpoint_round_trip_is_exact() {
    let layout = LatentLayout::new(3, vec![2, 1]).unwrap();
    let mut conv = small_conv(layout.clone(), [1, 8, 16]);
    conv.running_stats_mut()[0].mean.data_mut()[0] = 0.125;
    conv.set_mode(BnMode::Eval);
    let mlp = XFactorsModel::new(ModelConfig::mlp(layout, [2, 4, 4]), 9).unwrap();
    for model in [conv, mlp] {
        for extras in [false, true] {
            let ck = checkpoint_of(model.clone(), extras);
            let back = decode_checkpoint::<f64>(&encode_checkpoint(&ck)).unwrap();
            assert_eq!(back, ck);
        }
    }
}

#[test]
fn checkpoint_precision_conversion() {
    let layout = LatentLayout::uniform(2, 2, 2).unwrap();
    let model = XFactorsModel::<f32>::new(ModelConfig::mlp(layout, [1, 4, 4]), 0).unwrap();
    let ck = Checkpoint {
        model: model.clone(),
        moments: None,
        run: None,
    };
    let wide = decode_checkpoint::<f64>(&encode_checkpoint(&ck)).unwrap();
    assert_eq!(wide.model.cast::<f32>(), model);
}

#[test]
fn checkpoint_corruption_is_located() {
    let layout = LatentLayout::uniform(2, 2, 2).unwrap();
    let model = XFactorsModel::<f64>::new(ModelConfig::mlp(layout, [1, 4, 4]), 0).unwrap();
    let bytes = encode_checkpoint(&checkpoint_of(model, true));
    let offset = |b: &[u8]| match decode_checkpoint::<f64>(b) {
        Err(ModelError::Parse { offset, .. }) => offset,
        other => panic!("expected parse error, got {other:?}"),
    };
    let mut bad = bytes.clone();
    bad[0] = b'Y';
    assert_eq!(offset(&bad), 0);
    let mut bad = bytes.clone();
    bad[4] = 9;
    assert_eq!(offset(&bad), 4);
    assert!(offset(&bytes[..bytes.len() - 5]) > 0);
    let mut longer = bytes.clone();
    longer.push(0);
    assert_eq!(offset(&longer), bytes.len() as u64);
}
