use std::path::Path;

use stgan_core::checkpoint;
use stgan_core::data::synth::{generate, SynthSpec};
use stgan_core::data::Dataset;
use stgan_core::losses::LossWeights;
use stgan_core::networks::GeneratorConfig;
use stgan_core::optim::{Adam, AdamConfig};
use stgan_core::train::{checkpoint_path, TrainConfig, Trainer, METRICS_FILE};
use stgan_core::Error;
use stgan_tensor::{ParamStore, Tensor};

fn data() -> Dataset {
    generate(&SynthSpec {
        image_size: 32,
        seed: 1,
        train: 16,
        test: 4,
    })
    .unwrap()
    .splits
    .train
}

fn tiny(iterations: u64) -> TrainConfig {
    TrainConfig {
        model: GeneratorConfig {
            image_size: 32,
            width: 0.0625,
            ..Default::default()
        },
        batch_size: 4,
        n_critic: 2,
        iterations: Some(iterations),
        seed: 3,
        ..Default::default()
    }
}

#[test]
fn adam_matches_scalar_oracle() {
    let mut store = ParamStore::<f64>::new();
    store.add("w", Tensor::new(&[2], vec![0.5, -1.5]).unwrap()).unwrap();
    let cfg = AdamConfig::default();
    let mut adam = Adam::new(cfg, &store);
    let (mut w, mut m, mut v) = ([0.5f64, -1.5], [0.0f64; 2], [0.0f64; 2]);
    let lr = 0.01;
    for t in 1..=10 {
        let g = [w[0].sin() + 0.3 * t as f64, 2.0 * w[1]];
        store.iter_mut().next().unwrap().grad = Tensor::new(&[2], g.to_vec()).unwrap();
        adam.update(&mut store, lr).unwrap();
        for i in 0..2 {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            let mh = m[i] / (1.0 - cfg.beta1.powi(t));
            let vh = v[i] / (1.0 - cfg.beta2.powi(t));
            w[i] -= lr * mh / (vh.sqrt() + cfg.eps);
        }
        let got = store.by_name("w").unwrap().value.data();
        for i in 0..2 {
            assert!((got[i] - w[i]).abs() < 1e-10, "step {t}: {} vs {}", got[i], w[i]);
        }
    }
}

#[test]
fn adam_minimizes_a_quadratic() {
    let mut store = ParamStore::<f64>::new();
    store.add("w", Tensor::new(&[3], vec![4.0, -2.0, 0.5]).unwrap()).unwrap();
    let target = [1.0, 1.0, -1.0];
    let mut adam = Adam::new(AdamConfig { beta1: 0.9, ..Default::default() }, &store);
    for _ in 0..2000 {
        let p = store.iter_mut().next().unwrap();
        let g: Vec<f64> = p.value.data().iter().zip(target).map(|(w, t)| 2.0 * (w - t)).collect();
        p.grad = Tensor::new(&[3], g).unwrap();
        adam.update(&mut store, 0.01).unwrap();
    }
    for (w, t) in store.by_name("w").unwrap().value.data().iter().zip(target) {
        assert!((w - t).abs() < 1e-3);
    }
}

#[test]
fn config_round_trips_and_rejects_unknown_keys() {
    let cfg = tiny(7);
    assert_eq!(TrainConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    assert!(TrainConfig::from_toml("batch_sise = 3").is_err());
    assert!(TrainConfig::from_toml("n_critic = 0").is_err());
    let partial = TrainConfig::from_toml("epochs = 2\n[model]\nwidth = 0.5\n").unwrap();
    assert_eq!(partial.model.width, 0.5);
    assert_eq!(partial.batch_size, TrainConfig::default().batch_size);
}

#[test]
fn epoch_accounting() {
    let cfg = TrainConfig {
        batch_size: 16,
        n_critic: 5,
        epochs: 20,
        decay_epoch: 3,
        ..Default::default()
    };
    // 2000 samples: 125 critic batches, 25 iterations per epoch
    assert_eq!(cfg.batches_per_epoch(2000), 125);
    assert_eq!(cfg.iterations_per_epoch(2000), 25);
    assert_eq!(cfg.total_iterations(2000), 500);
    assert_eq!(cfg.lr_at_epoch(2), cfg.lr_initial);
    assert_eq!(cfg.lr_at_epoch(3), cfg.lr_finetune);
}

fn metrics(dir: &Path) -> Vec<u8> {
    std::fs::read(dir.join(METRICS_FILE)).unwrap()
}

#[test]
fn smoke_run_logs_and_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let d = data();
    let mut cfg = tiny(3);
    cfg.checkpoint_every = 2;
    let mut t = Trainer::new(cfg).unwrap();
    let mut seen = 0;
    let records = t.run(&d, Some(dir.path()), |_| seen += 1).unwrap();
    assert_eq!((records.len(), seen), (3, 3));
    let lines = String::from_utf8(metrics(dir.path())).unwrap();
    assert_eq!(lines.lines().count(), 3);
    assert!(checkpoint_path(dir.path(), Some(2)).exists());
    let back = Trainer::load(&checkpoint_path(dir.path(), None)).unwrap();
    assert_eq!(back.iteration, 3);
    assert_eq!(back.gen.params.checksum(), t.gen.params.checksum());
    assert_eq!(back.disc.params.checksum(), t.disc.params.checksum());
    assert_eq!(back.config, t.config);
}

#[test]
fn same_seed_gives_a_bitwise_identical_log() {
    let d = data();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    Trainer::new(tiny(3)).unwrap().run(&d, Some(a.path()), |_| {}).unwrap();
    Trainer::new(tiny(3)).unwrap().run(&d, Some(b.path()), |_| {}).unwrap();
    assert_eq!(metrics(a.path()), metrics(b.path()));
    let ca = std::fs::read(checkpoint_path(a.path(), None)).unwrap();
    let cb = std::fs::read(checkpoint_path(b.path(), None)).unwrap();
    assert_eq!(ca, cb);

    let c = tempfile::tempdir().unwrap();
    let mut other = tiny(3);
    other.seed = 4;
    Trainer::new(other).unwrap().run(&d, Some(c.path()), |_| {}).unwrap();
    assert_ne!(metrics(a.path()), metrics(c.path()));
}

#[test]
fn resumed_training_continues_bitwise() {
    let d = data();
    let mut straight = Trainer::new(tiny(4)).unwrap();
    let all = straight.run(&d, None, |_| {}).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let mut first = Trainer::new(tiny(2)).unwrap();
    first.run(&d, Some(dir.path()), |_| {}).unwrap();
    let mut resumed = Trainer::load(&checkpoint_path(dir.path(), None)).unwrap();
    resumed.config.iterations = Some(4);
    let rest = resumed.run(&d, None, |_| {}).unwrap();
    assert_eq!(rest, all[2..]);
    assert_eq!(resumed.gen.params.checksum(), straight.gen.params.checksum());
    assert_eq!(resumed.g_opt, straight.g_opt);
}

#[test]
fn divergence_aborts_and_keeps_the_last_checkpoint() {
    let d = data();
    let dir = tempfile::tempdir().unwrap();
    let mut t = Trainer::new(tiny(2)).unwrap();
    t.run(&d, Some(dir.path()), |_| {}).unwrap();
    let saved = std::fs::read(checkpoint_path(dir.path(), None)).unwrap();

    t.config.iterations = Some(4);
    let p = t.gen.params.iter_mut().next().unwrap();
    p.value.data_mut()[0] = f32::NAN;
    match t.run(&d, Some(dir.path()), |_| {}) {
        Err(Error::Diverged { iteration, .. }) => assert_eq!(iteration, 2),
        other => panic!("expected divergence, got {other:?}"),
    }
    assert_eq!(std::fs::read(checkpoint_path(dir.path(), None)).unwrap(), saved);
    assert_eq!(Trainer::load(&checkpoint_path(dir.path(), None)).unwrap().iteration, 2);
}

#[test]
fn logged_totals_are_the_weighted_sums() {
    let d = data();
    let mut cfg = tiny(3);
    cfg.weights = LossWeights {
        lambda_gp: 5.0,
        lambda1: 2.0,
        lambda2: 3.0,
        lambda3: 50.0,
    };
    let w = cfg.weights;
    for r in Trainer::new(cfg).unwrap().run(&d, None, |_| {}).unwrap() {
        let g = r.g.adv + w.lambda2 * r.g.att + w.lambda3 * r.g.rec;
        assert!((r.g.total - g).abs() <= 1e-5 * g.abs().max(1.0), "{r:?}");
        let adv = r.d.fake_score - r.d.real_score + w.lambda_gp * r.d.gradient_penalty;
        assert!((r.d.adv - adv).abs() <= 1e-5 * adv.abs().max(1.0), "{r:?}");
        let dt = r.d.adv + w.lambda1 * r.d.att;
        assert!((r.d.total - dt).abs() <= 1e-5 * dt.abs().max(1.0), "{r:?}");
        assert!(r.d.gradient_penalty >= 0.0 && r.g.rec >= 0.0);
    }
}

#[test]
fn reconstruction_dominated_training_reduces_l1() {
    let d = data();
    let mut cfg = tiny(120);
    cfg.weights = LossWeights {
        lambda_gp: 10.0,
        lambda1: 1.0,
        lambda2: 0.0,
        lambda3: 1000.0,
    };
    cfg.lr_initial = 1e-3;
    let records = Trainer::new(cfg).unwrap().run(&d, None, |_| {}).unwrap();
    // batches of four are noisy: compare ten-step windows
    let head: f64 = records[..10].iter().map(|r| r.g.rec).sum::<f64>() / 10.0;
    let tail: f64 = records[110..].iter().map(|r| r.g.rec).sum::<f64>() / 10.0;
    assert!(tail < 0.7 * head, "{head} -> {tail}");
}

#[test]
fn mismatched_data_is_a_config_error() {
    let d = data();
    let mut cfg = tiny(1);
    cfg.model.image_size = 64;
    assert!(matches!(Trainer::new(cfg).unwrap().step(&d), Err(Error::Config(_))));
    let mut cfg = tiny(1);
    cfg.batch_size = 32;
    assert!(matches!(Trainer::new(cfg).unwrap().step(&d), Err(Error::Config(_))));
}

#[test]
fn corrupted_checkpoints_are_refused() {
    let dir = tempfile::tempdir().unwrap();
    let t = Trainer::new(tiny(1)).unwrap();
    let path = dir.path().join("a.ckpt");
    let id = t.save(&path).unwrap();
    assert_eq!(id.len(), 16);
    let mut bytes = std::fs::read(&path).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x40;
    std::fs::write(&path, &bytes).unwrap();
    assert!(matches!(Trainer::load(&path), Err(Error::Checkpoint(_))));
    assert!(checkpoint::decode(&bytes[..10]).is_err());
}
