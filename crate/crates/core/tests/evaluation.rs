use std::sync::OnceLock;

use stgan_core::data::synth::{generate, SynthSet, SynthSpec};
use stgan_core::eval::ablation::{ablation_run, Variant};
use stgan_core::eval::metrics::{psnr, ssim_channel, Image255, PSNR_CAP};
use stgan_core::eval::{evaluate, reconstruction_eval, GeneratorEditor, IdentityEditor, Judge, JudgeConfig, RendererEditor};
use stgan_core::networks::GeneratorConfig;
use stgan_core::train::{TrainConfig, Trainer};
use stgan_core::Error;
use stgan_tensor::Tensor;

fn set() -> &'static SynthSet {
    static SET: OnceLock<SynthSet> = OnceLock::new();
    SET.get_or_init(|| {
        generate(&SynthSpec {
            image_size: 32,
            seed: 21,
            train: 600,
            test: 60,
        })
        .unwrap()
    })
}

fn judge() -> &'static Judge {
    static JUDGE: OnceLock<Judge> = OnceLock::new();
    JUDGE.get_or_init(|| {
        let s = set();
        let cfg = JudgeConfig { epochs: 8, ..Default::default() };
        Judge::train(&s.splits.train, &s.splits.test, &cfg).unwrap()
    })
}

#[test]
fn psnr_of_known_errors() {
    let a = vec![100.0; 64];
    assert_eq!(psnr(&a, &a), PSNR_CAP);
    // uniform error of 1 level: 20 log10(255)
    let b: Vec<f64> = a.iter().map(|v| v + 1.0).collect();
    assert!((psnr(&a, &b) - 48.130_803_608_679_1).abs() < 1e-9);
    let c: Vec<f64> = a.iter().map(|v| v + 16.0).collect();
    assert!((psnr(&a, &c) - (48.130_803_608_679_1 - 20.0 * 16f64.log10())).abs() < 1e-9);
}

#[test]
fn ssim_bounds() {
    let (h, w) = (16, 16);
    let a: Vec<f64> = (0..h * w).map(|i| ((i * 37) % 251) as f64).collect();
    assert!((ssim_channel(&a, &a, h, w) - 1.0).abs() < 1e-12);
    let neg: Vec<f64> = a.iter().map(|v| 255.0 - v).collect();
    assert!(ssim_channel(&a, &neg, h, w) < 0.2);
    let shifted: Vec<f64> = a.iter().map(|v| (v + 3.0).min(255.0)).collect();
    let s = ssim_channel(&a, &shifted, h, w);
    assert!(s > 0.9 && s < 1.0, "{s}");
}

#[test]
fn image_conversion_matches_pixel_levels() {
    let t = Tensor::<f32>::new(&[3, 1, 2], vec![-0.99, 0.99, 0.0, 0.0, 0.5, -0.5]).unwrap();
    let img = Image255::from_unit(&t).unwrap();
    assert_eq!(img.height, 1);
    assert!(Image255::from_unit(&Tensor::<f32>::zeros(&[2, 2])).is_err());
}

#[test]
fn judge_is_accurate_and_deterministic() {
    let j = judge();
    assert!(j.meta.accuracy >= 0.97, "{:?}", j.meta.per_attribute);
    let s = set();
    let cfg = JudgeConfig { epochs: 8, ..Default::default() };
    let again = Judge::train(&s.splits.train, &s.splits.test, &cfg).unwrap();
    assert_eq!(again.params.checksum(), j.params.checksum());
}

#[test]
fn untrained_judge_is_near_chance_and_refused() {
    let s = set();
    let cfg = JudgeConfig { epochs: 0, ..Default::default() };
    let j = Judge::train(&s.splits.train, &s.splits.test, &cfg).unwrap();
    assert!(j.meta.accuracy < 0.8, "{}", j.meta.accuracy);
    let r = evaluate("x", &IdentityEditor, &j, &s.splits.test, 0.97, None);
    assert!(matches!(r, Err(Error::Evaluation(_))));
}

#[test]
fn reference_editors_bracket_the_metrics() {
    let s = set();
    let j = judge();
    let test = &s.splits.test;
    let identity = evaluate("identity", &IdentityEditor, j, test, 0.97, None).unwrap();
    assert!(identity.accuracy.mean < 0.1, "{}", identity.table());
    assert_eq!(identity.reconstruction.psnr, PSNR_CAP);
    assert!((identity.reconstruction.ssim - 1.0).abs() < 1e-12);

    let oracle = RendererEditor { params: &s.test_params, image_size: 32 };
    let r = evaluate("renderer", &oracle, j, test, 0.97, None).unwrap();
    assert!(r.accuracy.mean > 0.95, "{}", r.table());
    assert_eq!(r.reconstruction.psnr, PSNR_CAP);
    assert_eq!(r.test_samples, 60);
    assert!(r.table().contains("background_tint"));
}

#[test]
fn evaluation_leaves_the_model_untouched() {
    let s = set();
    let cfg = TrainConfig {
        model: GeneratorConfig { image_size: 32, width: 0.0625, ..Default::default() },
        ..Default::default()
    };
    let t = Trainer::new(cfg).unwrap();
    let before = t.gen.params.checksum();
    let a = reconstruction_eval(&GeneratorEditor(&t.gen), &s.splits.test).unwrap();
    let b = reconstruction_eval(&GeneratorEditor(&t.gen), &s.splits.test).unwrap();
    assert_eq!(a, b);
    assert_eq!(t.gen.params.checksum(), before);
    assert!(a.psnr < 30.0);
}

#[test]
fn empty_test_sets_are_refused() {
    let s = set();
    let empty = stgan_core::data::Dataset::empty(s.splits.test.attribute_names.clone(), 32);
    assert!(reconstruction_eval(&IdentityEditor, &empty).is_err());
}

#[test]
fn variant_names_parse() {
    for v in Variant::ALL {
        assert_eq!(v.name().parse::<Variant>().unwrap(), v);
    }
    assert_eq!(Variant::parse_list("gru, raw1").unwrap(), [Variant::GruOutput, Variant::SkipRaw1]);
    assert!("resnet".parse::<Variant>().is_err());
}

#[test]
fn ablation_records_failures_and_continues() {
    let s = set();
    let base = TrainConfig {
        model: GeneratorConfig { image_size: 32, width: 0.0625, ..Default::default() },
        batch_size: 8,
        n_critic: 1,
        iterations: Some(1),
        ..Default::default()
    };
    let table = ablation_run(&base, &[Variant::Standard, Variant::SkipNone], &s.splits, judge(), 0.97, None);
    assert_eq!(table.rows.len(), 2);
    assert!(table.rows.iter().all(|r| r.report.is_some()));
    // an impossible floor fails every row without aborting the table
    let table = ablation_run(&base, &[Variant::Dst, Variant::Res], &s.splits, judge(), 1.01, None);
    assert!(table.rows.iter().all(|r| r.error.is_some()));
    assert!(table.to_text().contains("failed"));
}
