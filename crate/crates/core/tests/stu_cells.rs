//! Transfer-cell identities and an independent transcription of the cell.

#![allow(clippy::needless_range_loop)]

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use stgan_core::stu::{stretch_diff, StuCell, StuHooks, StuVariant};
use stgan_tensor::{ParamStore, Tape, Tensor, Var};

struct Fixture {
    store: ParamStore<f64>,
    cell: StuCell,
    f_enc: Tensor<f64>,
    state: Tensor<f64>,
    diff: Tensor<f64>,
}

fn fixture(variant: StuVariant, seed: u64) -> Fixture {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let cell = StuCell::new(&mut store, "stu/2", 2, variant, 3, 4, 2, &mut rng).unwrap();
    for p in store.iter_mut() {
        if p.name.contains("/b_") {
            p.value = Tensor::uniform(p.value.shape(), -0.3, 0.3, &mut rng);
        }
    }
    let f_enc = Tensor::uniform(&[2, 3, 8, 8], -1.0, 1.0, &mut rng);
    let state = Tensor::uniform(&[2, 4, 4, 4], -1.0, 1.0, &mut rng);
    let d = Tensor::new(&[2, 2], vec![1.0, -1.0, 0.0, 1.0]).unwrap();
    let diff = stretch_diff(&d, 4, 4).unwrap();
    Fixture {
        store,
        cell,
        f_enc,
        state,
        diff,
    }
}

struct Run {
    tape: Tape<f64>,
    upsampled: Var,
    reset: Option<Var>,
    update: Option<Var>,
    candidate: Option<Var>,
    transformed: Var,
    state: Var,
    f_enc: Var,
}

fn run(fx: &Fixture, hooks: StuHooks) -> Run {
    let mut tape = Tape::new();
    let f = tape.constant(fx.f_enc.clone()).unwrap();
    let s = tape.constant(fx.state.clone()).unwrap();
    let d = tape.constant(fx.diff.clone()).unwrap();
    let tr = fx.cell.forward(&mut tape, &fx.store, f, s, d, hooks).unwrap();
    Run {
        upsampled: tr.upsampled,
        reset: tr.reset,
        update: tr.update,
        candidate: tr.candidate,
        transformed: tr.transformed,
        state: tr.state,
        f_enc: f,
        tape,
    }
}

fn zero_all(store: &mut ParamStore<f64>) {
    for p in store.iter_mut() {
        p.value.data_mut().fill(0.0);
    }
}

#[test]
fn zero_weights_propagate_to_fixed_point() {
    let mut fx = fixture(StuVariant::Standard, 1);
    zero_all(&mut fx.store);
    let r = run(&fx, StuHooks::default());
    let v = |x: Var| r.tape.value(x).data().to_vec();
    assert!(v(r.upsampled).iter().all(|&x| x == 0.0));
    assert!(v(r.reset.unwrap()).iter().all(|&x| x == 0.5));
    assert!(v(r.update.unwrap()).iter().all(|&x| x == 0.5));
    assert!(v(r.state).iter().all(|&x| x == 0.0));
    assert!(v(r.candidate.unwrap()).iter().all(|&x| x == 0.0));
    assert!(v(r.transformed).iter().all(|&x| x == 0.0));
}

#[test]
fn closed_update_gate_passes_upsampled_state_exactly() {
    let fx = fixture(StuVariant::Standard, 2);
    let r = run(&fx, StuHooks { force_update: Some(0.0) });
    assert_eq!(r.tape.value(r.transformed).data(), r.tape.value(r.upsampled).data());
}

#[test]
fn residual_cell_with_zeroed_branch_is_identity() {
    let mut fx = fixture(StuVariant::Res, 3);
    zero_all(&mut fx.store);
    let r = run(&fx, StuHooks::default());
    assert_eq!(r.tape.value(r.transformed).data(), fx.f_enc.data());
}

#[test]
fn gru_output_emits_one_tensor_twice() {
    let fx = fixture(StuVariant::GruOutput, 4);
    let r = run(&fx, StuHooks::default());
    assert_eq!(r.transformed, r.state);
}

#[test]
fn conv_res_minus_conv_is_the_encoder_feature() {
    let conv = fixture(StuVariant::Conv, 5);
    let mut res = fixture(StuVariant::ConvRes, 5);
    for (a, b) in res.store.iter_mut().zip(conv.store.iter()) {
        a.value = b.value.clone();
    }
    let rc = run(&conv, StuHooks::default());
    let rr = run(&res, StuHooks::default());
    let a = rc.tape.value(rc.transformed);
    let b = rr.tape.value(rr.transformed);
    let expect = a.zip_map(&conv.f_enc, |x, f| x + f).unwrap();
    assert_eq!(b.data(), expect.data());
    assert_eq!(rc.tape.value(rc.state).data(), rc.tape.value(rc.upsampled).data());
}

#[test]
fn gates_are_open_intervals_and_output_is_convex() {
    for seed in 0..5 {
        let mut fx = fixture(StuVariant::Standard, 10 + seed);
        // push pre-activations far out to stress the bounds
        for p in fx.store.iter_mut() {
            p.value = p.value.map(|v| v * 6.0);
        }
        let r = run(&fx, StuHooks::default());
        let t = &r.tape;
        for g in [r.reset.unwrap(), r.update.unwrap()] {
            assert!(t.value(g).data().iter().all(|&v| v > 0.0 && v < 1.0));
        }
        let cand = t.value(r.candidate.unwrap()).data();
        assert!(cand.iter().all(|&v| v > -1.0 && v < 1.0));
        let up = t.value(r.upsampled).data();
        for ((&f, &s), &c) in t.value(r.transformed).data().iter().zip(up).zip(cand) {
            let (lo, hi) = (s.min(c), s.max(c));
            assert!(f >= lo - 1e-12 && f <= hi + 1e-12);
        }
    }
}

#[test]
fn zero_difference_still_runs_deterministically() {
    let mut fx = fixture(StuVariant::Standard, 6);
    fx.diff = stretch_diff(&Tensor::zeros(&[2, 2]), 4, 4).unwrap();
    let a = run(&fx, StuHooks::default());
    let b = run(&fx, StuHooks::default());
    assert_eq!(a.tape.value(a.transformed).data(), b.tape.value(b.transformed).data());
    assert_ne!(a.tape.value(a.transformed).data(), fx.f_enc.data());
}

#[test]
fn stretched_map_averages_back_to_the_vector() {
    let d = Tensor::new(&[1, 3], vec![0.0f64, -1.0, 1.0]).unwrap();
    let m = stretch_diff(&d, 3, 5).unwrap();
    for (i, plane) in m.data().chunks(15).enumerate() {
        assert_eq!(plane.iter().sum::<f64>() / 15.0, d.data()[i]);
    }
}

#[test]
fn cells_own_disjoint_parameters() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut store = ParamStore::<f64>::new();
    let c2 = StuCell::new(&mut store, "stu/2", 2, StuVariant::Standard, 3, 4, 2, &mut rng).unwrap();
    let c3 = StuCell::new(&mut store, "stu/3", 3, StuVariant::Standard, 4, 5, 2, &mut rng).unwrap();
    let a = c2.param_ids();
    assert!(c3.param_ids().iter().all(|id| !a.contains(id)));
}

// ---- independent transcription ----

type Map = Vec<Vec<Vec<Vec<f64>>>>; // [n][c][h][w]

fn to_map(t: &Tensor<f64>) -> Map {
    let (n, c, h, w) = t.dims4().unwrap();
    (0..n)
        .map(|b| {
            (0..c)
                .map(|ch| (0..h).map(|y| (0..w).map(|x| t.data()[((b * c + ch) * h + y) * w + x]).collect()).collect())
                .collect()
        })
        .collect()
}

fn cat(a: &Map, b: &Map) -> Map {
    a.iter().zip(b).map(|(x, y)| x.iter().chain(y).cloned().collect()).collect()
}

fn weight(store: &ParamStore<f64>, name: &str) -> (Vec<usize>, Vec<f64>) {
    let p = store.by_name(name).unwrap();
    (p.value.shape().to_vec(), p.value.data().to_vec())
}

/// 3x3, stride 1, padding 1, weight (out, in, 3, 3).
fn conv3(x: &Map, w: &(Vec<usize>, Vec<f64>), b: &[f64]) -> Map {
    let (o, c) = (w.0[0], w.0[1]);
    let (h, wd) = (x[0][0].len(), x[0][0][0].len());
    x.iter()
        .map(|s| {
            (0..o)
                .map(|oc| {
                    (0..h)
                        .map(|i| {
                            (0..wd)
                                .map(|j| {
                                    let mut acc = b[oc];
                                    for ic in 0..c {
                                        for ki in 0..3 {
                                            for kj in 0..3 {
                                                let (y, xx) = (i as isize + ki as isize - 1, j as isize + kj as isize - 1);
                                                if y >= 0 && xx >= 0 && (y as usize) < h && (xx as usize) < wd {
                                                    acc += s[ic][y as usize][xx as usize] * w.1[((oc * c + ic) * 3 + ki) * 3 + kj];
                                                }
                                            }
                                        }
                                    }
                                    acc
                                })
                                .collect()
                        })
                        .collect()
                })
                .collect()
        })
        .collect()
}

/// Kernel 4, stride 2, padding 1 transposed convolution, weight (in, out, 4, 4).
fn up4(x: &Map, w: &(Vec<usize>, Vec<f64>), b: &[f64]) -> Map {
    let (a, o) = (w.0[0], w.0[1]);
    let (h, wd) = (x[0][0].len(), x[0][0][0].len());
    x.iter()
        .map(|s| {
            let mut out = vec![vec![vec![0.0; 2 * wd]; 2 * h]; o];
            for (oc, plane) in out.iter_mut().enumerate() {
                for row in plane.iter_mut() {
                    row.fill(b[oc]);
                }
            }
            for ic in 0..a {
                for i in 0..h {
                    for j in 0..wd {
                        for oc in 0..o {
                            for ki in 0..4 {
                                for kj in 0..4 {
                                    let (y, xx) = (2 * i as isize + ki as isize - 1, 2 * j as isize + kj as isize - 1);
                                    if y >= 0 && xx >= 0 && (y as usize) < 2 * h && (xx as usize) < 2 * wd {
                                        out[oc][y as usize][xx as usize] += s[ic][i][j] * w.1[((ic * o + oc) * 4 + ki) * 4 + kj];
                                    }
                                }
                            }
                        }
                    }
                }
            }
            out
        })
        .collect()
}

fn map2(a: &Map, b: &Map, f: impl Fn(f64, f64) -> f64) -> Map {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            x.iter()
                .zip(y)
                .map(|(p, q)| p.iter().zip(q).map(|(r, s)| r.iter().zip(s).map(|(&u, &v)| f(u, v)).collect()).collect())
                .collect()
        })
        .collect()
}

fn map1(a: &Map, f: impl Fn(f64) -> f64) -> Map {
    map2(a, a, |u, _| f(u))
}

fn flat(m: &Map) -> Vec<f64> {
    m.iter().flatten().flatten().flatten().copied().collect()
}

#[test]
fn matches_straight_line_transcription() {
    for seed in 0..4 {
        let fx = fixture(StuVariant::Standard, 100 + seed);
        let p = "stu/2";
        let bias = |n: &str| fx.store.by_name(&format!("{p}/{n}")).unwrap().value.data().to_vec();
        let w = |n: &str| weight(&fx.store, &format!("{p}/{n}"));
        let sigma = |v: f64| 1.0 / (1.0 + (-v).exp());

        let f_enc = to_map(&fx.f_enc);
        let s_next = to_map(&fx.state);
        let diff = to_map(&fx.diff);
        let s_hat = up4(&cat(&s_next, &diff), &w("w_t"), &bias("b_t"));
        let joint = cat(&f_enc, &s_hat);
        let r = map1(&conv3(&joint, &w("w_r"), &bias("b_r")), sigma);
        let z = map1(&conv3(&joint, &w("w_z"), &bias("b_z")), sigma);
        let s = map2(&r, &s_hat, |a, b| a * b);
        let f_hat = map1(&conv3(&cat(&f_enc, &s), &w("w_h"), &bias("b_h")), f64::tanh);
        let keep = map2(&z, &s_hat, |zz, sh| (1.0 - zz) * sh);
        let f_t = map2(&keep, &map2(&z, &f_hat, |zz, fh| zz * fh), |a, b| a + b);

        let run = run(&fx, StuHooks::default());
        for (got, want) in [(run.transformed, flat(&f_t)), (run.state, flat(&s))] {
            let got = run.tape.value(got).data();
            assert_eq!(got.len(), want.len());
            for (a, b) in got.iter().zip(&want) {
                assert!((a - b).abs() < 1e-6, "{a} vs {b}");
            }
        }
        let _ = run.f_enc;
    }
}
