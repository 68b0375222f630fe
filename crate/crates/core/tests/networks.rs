use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use stgan_core::networks::{
    Conditioning, Discriminator, DiscriminatorConfig, Generator, GeneratorConfig, Norm, SkipMode, NUM_LAYERS,
};
use stgan_core::stu::{StuHooks, StuVariant};
use stgan_tensor::{Tape, Tensor};

fn config(size: usize, skip_mode: SkipMode) -> GeneratorConfig {
    GeneratorConfig {
        image_size: size,
        num_attributes: 3,
        width: 0.0625,
        skip_mode,
        ..Default::default()
    }
}

fn gen(cfg: GeneratorConfig, seed: u64) -> Generator<f64> {
    Generator::new(cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

fn images(n: usize, size: usize, seed: u64) -> Tensor<f64> {
    Tensor::uniform(&[n, 3, size, size], -0.99, 0.99, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn cond(n: usize) -> Tensor<f64> {
    let pattern = [1.0, 0.0, -1.0, 0.0, 1.0, 1.0];
    Tensor::from_fn(&[n, 3], |i| pattern[i % pattern.len()])
}

#[test]
fn encoder_halves_resolution_at_every_layer() {
    let g = gen(config(64, SkipMode::Stu), 0);
    let widths = g.config.widths();
    let mut tape = Tape::new();
    let x = tape.constant(images(2, 64, 1)).unwrap();
    let feats = g.encode(&mut tape, x).unwrap();
    assert_eq!(feats.len(), NUM_LAYERS);
    for (l, f) in feats.iter().enumerate() {
        let side = 64 >> (l + 1);
        assert_eq!(tape.shape(*f), [2, widths[l], side, side]);
    }
}

#[test]
fn outputs_are_images_for_every_skip_mode_and_size() {
    for size in [32, 64] {
        for mode in SkipMode::ALL {
            let g = gen(config(size, mode), 2);
            let out = g.edit(&images(2, size, 3), &cond(2)).unwrap();
            assert_eq!(out.shape(), [2, 3, size, size], "{mode:?}");
            assert!(out.data().iter().all(|v| v.abs() < 1.0));
        }
    }
}

#[test]
fn skip_ladder_adds_connections_from_the_inside_out() {
    let expect = [
        (SkipMode::None, [false; 4]),
        (SkipMode::Raw1, [false, false, false, true]),
        (SkipMode::Raw2, [false, false, true, true]),
        (SkipMode::RawAll, [true; 4]),
        (SkipMode::Stu, [true; 4]),
    ];
    for (mode, skips) in expect {
        for l in 1..=4 {
            assert_eq!(mode.has_skip(l), skips[l - 1], "{mode:?} layer {l}");
        }
        let g = gen(config(32, mode), 0);
        let mut tape = Tape::new();
        let x = tape.constant(images(1, 32, 0)).unwrap();
        let f = g.encode(&mut tape, x).unwrap();
        let s = g.transfer(&mut tape, &f, &cond(1), StuHooks::default()).unwrap();
        assert_eq!(s.iter().map(Option::is_some).collect::<Vec<_>>(), skips);
    }
    let c = config(64, SkipMode::RawAll).widths();
    let inputs = config(64, SkipMode::RawAll).decoder_inputs();
    assert_eq!(inputs, [c[4] + 3, 2 * c[3], 2 * c[2], 2 * c[1], 2 * c[0]]);
    let inputs = config(64, SkipMode::None).decoder_inputs();
    assert_eq!(inputs, [c[4] + 3, c[3], c[2], c[1], c[0]]);
}

#[test]
fn raw_skips_pass_encoder_features_verbatim() {
    let g = gen(config(32, SkipMode::RawAll), 4);
    let mut tape = Tape::new();
    let x = tape.constant(images(1, 32, 5)).unwrap();
    let f = g.encode(&mut tape, x).unwrap();
    let s = g.transfer(&mut tape, &f, &cond(1), StuHooks::default()).unwrap();
    for l in 0..4 {
        assert_eq!(s[l], Some(f[l]));
    }
}

#[test]
fn composition_equals_generate() {
    let g = gen(config(32, SkipMode::Stu), 6);
    let x0 = images(2, 32, 7);
    let mut tape = Tape::new();
    let x = tape.constant(x0.clone()).unwrap();
    let f = g.encode(&mut tape, x).unwrap();
    let s = g.transfer(&mut tape, &f, &cond(2), StuHooks::default()).unwrap();
    let y = g.decode(&mut tape, f[4], &s, &cond(2)).unwrap();
    assert_eq!(tape.value(y), &g.edit(&x0, &cond(2)).unwrap());
}

#[test]
fn construction_and_inference_are_deterministic() {
    let a = gen(config(32, SkipMode::Stu), 8);
    let b = gen(config(32, SkipMode::Stu), 8);
    assert_eq!(a.params.checksum(), b.params.checksum());
    let x = images(3, 32, 9);
    assert_eq!(a.edit(&x, &cond(3)).unwrap(), b.edit(&x, &cond(3)).unwrap());
    assert_ne!(gen(config(32, SkipMode::Stu), 9).params.checksum(), a.params.checksum());
}

#[test]
fn transfer_cells_change_the_output() {
    let x = images(2, 32, 10);
    let stu = gen(config(32, SkipMode::Stu), 11).edit(&x, &cond(2)).unwrap();
    let none = gen(config(32, SkipMode::None), 11).edit(&x, &cond(2)).unwrap();
    assert!(stu.max_abs_diff(&none).unwrap() > 1e-3);
}

#[test]
fn conditioning_reaches_the_output() {
    let g = gen(config(32, SkipMode::Stu), 12);
    let x = images(2, 32, 13);
    let a = g.edit(&x, &cond(2)).unwrap();
    let b = g.edit(&x, &Tensor::zeros(&[2, 3])).unwrap();
    assert!(a.max_abs_diff(&b).unwrap() > 1e-4);
}

#[test]
fn batch_members_do_not_interact() {
    let g = gen(config(32, SkipMode::Stu), 14);
    let x = images(2, 32, 15);
    let both = g.edit(&x, &cond(2)).unwrap();
    let first = g.edit(&x.sample(0).unwrap().reshape(&[1, 3, 32, 32]).unwrap(), &cond(1)).unwrap();
    assert!(both.sample(0).unwrap().max_abs_diff(&first.sample(0).unwrap()).unwrap() < 1e-12);
}

#[test]
fn every_parameter_receives_gradient() {
    for variant in StuVariant::ALL {
        for mode in SkipMode::ALL {
            if mode != SkipMode::Stu && variant != StuVariant::Standard {
                continue;
            }
            let cfg = GeneratorConfig { stu_variant: variant, ..config(32, mode) };
            let g = gen(cfg, 16);
            let mut tape = Tape::new();
            let x = tape.constant(images(2, 32, 17)).unwrap();
            let y = g.generate(&mut tape, x, &cond(2)).unwrap();
            // a non-symmetric read-out keeps instance-norm shifts alive
            let w = tape.constant(images(2, 32, 18)).unwrap();
            let p = tape.mul(y, w).unwrap();
            let loss = tape.sum(p).unwrap();
            let grads = tape.backward(loss).unwrap();
            for id in g.params.ids() {
                let p = g.params.get(id);
                let gr = grads.get(&g.params, id).unwrap_or_else(|| panic!("{} has no gradient", p.name));
                assert!(gr.data().iter().any(|v| *v != 0.0), "{} ({variant:?}, {mode:?}) is dead", p.name);
            }
        }
    }
}

#[test]
fn unnormalized_generator_has_no_norm_parameters() {
    let g = gen(GeneratorConfig { norm: Norm::None, ..config(32, SkipMode::Stu) }, 0);
    assert!(g.params.iter().all(|p| !p.name.contains("norm")));
    let n = gen(config(32, SkipMode::Stu), 0);
    // the first encoder layer is never normalized
    assert!(n.params.by_name("generator/encoder/0/norm/scale").is_none());
    assert!(n.params.by_name("generator/encoder/1/norm/scale").is_some());
}

#[test]
fn target_conditioning_codes_plus_minus_one() {
    let cfg = GeneratorConfig { conditioning: Conditioning::Target, ..config(32, SkipMode::Stu) };
    let s = stgan_core::data::AttributeVector::binary(&[1, 0, 1]);
    let t = stgan_core::data::AttributeVector::binary(&[0, 0, 1]);
    assert_eq!(cfg.condition(&s, &t).unwrap().values(), [-1.0, -1.0, 1.0]);
    let diff = config(32, SkipMode::Stu).condition(&s, &t).unwrap();
    assert_eq!(diff.values(), [-1.0, 0.0, 0.0]);
}

#[test]
fn malformed_inputs_are_rejected() {
    let g = gen(config(32, SkipMode::Stu), 0);
    assert!(g.edit(&images(1, 64, 0), &cond(1)).is_err());
    assert!(g.edit(&images(1, 32, 0), &cond(2)).is_err());
    assert!(g.edit(&Tensor::full(&[1, 3, 32, 32], 1.5), &cond(1)).is_err());
    assert!(Generator::<f64>::new(config(48, SkipMode::Stu), &mut ChaCha8Rng::seed_from_u64(0)).is_err());
}

#[test]
fn full_width_matches_reference_parameter_counts() {
    // counted by hand from the layer list at 128px, width 1, 13 attributes
    let cfg = GeneratorConfig { image_size: 128, num_attributes: 13, width: 1.0, ..Default::default() };
    let c = [64usize, 128, 256, 512, 1024];
    let mut expect = 3 * 64 * 16 + 64;
    for l in 1..5 {
        expect += c[l - 1] * c[l] * 16 + 2 * c[l];
    }
    for l in 1..=4 {
        let (enc, st, a) = (c[l - 1], c[l], 13);
        expect += (st + a) * enc * 16 + enc; // upsampling
        expect += 3 * (2 * enc * enc * 9 + enc); // reset, update, candidate
    }
    let inputs = [1024 + 13, 1024, 512, 256, 128];
    let outputs = [512, 256, 128, 64, 3];
    for k in 0..5 {
        expect += inputs[k] * outputs[k] * 16;
        expect += if k < 4 { 2 * outputs[k] } else { 3 };
    }
    let g = Generator::<f32>::new(cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert_eq!(g.params.num_elements(), expect);
}

fn disc(size: usize) -> Discriminator<f64> {
    let cfg = DiscriminatorConfig { image_size: size, num_attributes: 3, width: 0.0625 };
    Discriminator::new(cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap()
}

#[test]
fn discriminator_heads_share_one_trunk() {
    let d = disc(32);
    let x = images(4, 32, 20);
    let (scores, probs) = d.discriminate(&x).unwrap();
    assert_eq!(scores.len(), 4);
    assert_eq!(probs.shape(), [4, 3]);
    assert!(probs.data().iter().all(|&p| p > 0.0 && p < 1.0));

    let mut tape = Tape::new();
    let xv = tape.constant(x).unwrap();
    let out = d.forward(&mut tape, xv).unwrap();
    let a = tape.sum(out.att_logits).unwrap();
    let grads = tape.backward(a).unwrap();
    for p in d.params.iter() {
        let touched = grads.get(&d.params, d.params.id(&p.name).unwrap()).is_some();
        assert_eq!(touched, !p.name.contains("/adv/"), "{}", p.name);
    }
    let mut tape = Tape::new();
    let xv = tape.constant(images(4, 32, 20)).unwrap();
    let c = d.critic(&mut tape, xv).unwrap();
    assert_eq!(tape.value(c).data(), &scores[..]);
}

#[test]
fn discriminator_rejects_wrong_sizes() {
    assert!(disc(64).discriminate(&images(1, 32, 0)).is_err());
}
