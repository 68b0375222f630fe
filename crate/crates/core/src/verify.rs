//! Finite-difference verification of every differentiable building block,
//! run by the `grad-check` command and the acceptance suite.

use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use stgan_tensor::{grad_check, CustomOp, GradCheckReport, ParamStore, Tape, Tensor, TensorError, Var};

use crate::error::Result;
use crate::losses;
use crate::stu::{StuCell, StuHooks, StuVariant};

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckSummary {
    pub name: String,
    pub cases: usize,
    pub failed_cases: usize,
    pub max_rel_err: f64,
}

impl CheckSummary {
    pub fn passed(&self) -> bool {
        self.failed_cases == 0 && self.cases > 0
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct VerifyReport {
    pub tolerance: f64,
    pub checks: Vec<CheckSummary>,
    /// A deliberately wrong adjoint was caught.
    pub negative_control_caught: bool,
    /// Largest relative deviation from linearity of backward.
    pub linearity_err: f64,
    pub seconds: f64,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(CheckSummary::passed) && self.negative_control_caught && self.linearity_err < 1e-9
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for c in &self.checks {
            s += &format!(
                "{:<6} {:<22} {:>3} cases  max rel err {:.2e}\n",
                if c.passed() { "ok" } else { "FAIL" },
                c.name,
                c.cases,
                c.max_rel_err
            );
        }
        s += &format!(
            "{:<6} {:<22} corrupted adjoint {}\n",
            if self.negative_control_caught { "ok" } else { "FAIL" },
            "negative_control",
            if self.negative_control_caught { "rejected" } else { "accepted" }
        );
        s += &format!(
            "{:<6} {:<22} max rel err {:.2e}\n",
            if self.linearity_err < 1e-9 { "ok" } else { "FAIL" },
            "linearity",
            self.linearity_err
        );
        s
    }
}

type CaseFn = fn(&mut ChaCha8Rng) -> Result<GradCheckReport>;
type Combine<'a> = dyn Fn(&mut Tape<f64>, Var, Var) -> stgan_tensor::Result<Var> + 'a;

/// Values bounded away from zero, so kinks never sit inside a difference step.
fn away_from_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(0.1..1.0);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

fn uniform(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::uniform(shape, -1.0, 1.0, rng)
}

/// Contracts `y` against a fixed random tensor so every output element
/// contributes with its own weight.
fn readout(tape: &mut Tape<f64>, y: Var, weights: &Tensor<f64>) -> stgan_tensor::Result<Var> {
    let r = tape.constant(weights.clone())?;
    let p = tape.mul(y, r)?;
    tape.sum(p)
}

fn check<F>(store: &mut ParamStore<f64>, f: F) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape<f64>, &ParamStore<f64>) -> stgan_tensor::Result<Var>,
{
    Ok(grad_check(store, f, STEP, TOLERANCE)?)
}

fn dims(rng: &mut ChaCha8Rng) -> [usize; 4] {
    [rng.random_range(1..=2), rng.random_range(1..=3), rng.random_range(2..=5), rng.random_range(2..=5)]
}

fn unary_case(rng: &mut ChaCha8Rng, op: fn(&mut Tape<f64>, Var) -> stgan_tensor::Result<Var>, kinked: bool) -> Result<GradCheckReport> {
    let shape = dims(rng);
    let mut store = ParamStore::new();
    let x = if kinked { away_from_zero(&shape, rng) } else { uniform(&shape, rng) };
    store.add("x", x)?;
    let w = uniform(&shape, rng);
    check(&mut store, move |t, s| {
        let x = t.param(s, s.id("x").unwrap())?;
        let y = op(t, x)?;
        readout(t, y, &w)
    })
}

fn binary_case(rng: &mut ChaCha8Rng, op: fn(&mut Tape<f64>, Var, Var) -> stgan_tensor::Result<Var>) -> Result<GradCheckReport> {
    let shape = dims(rng);
    let mut store = ParamStore::new();
    store.add("a", uniform(&shape, rng))?;
    store.add("b", uniform(&shape, rng))?;
    let w = uniform(&shape, rng);
    check(&mut store, move |t, s| {
        let a = t.param(s, s.id("a").unwrap())?;
        let b = t.param(s, s.id("b").unwrap())?;
        let y = op(t, a, b)?;
        readout(t, y, &w)
    })
}

fn positive_case(rng: &mut ChaCha8Rng, op: fn(&mut Tape<f64>, Var) -> stgan_tensor::Result<Var>) -> Result<GradCheckReport> {
    let shape = dims(rng);
    let mut store = ParamStore::new();
    store.add("x", Tensor::uniform(&shape, 0.2, 1.5, rng))?;
    let w = uniform(&shape, rng);
    check(&mut store, move |t, s| {
        let x = t.param(s, s.id("x").unwrap())?;
        let y = op(t, x)?;
        readout(t, y, &w)
    })
}

fn clamp_case(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let shape = dims(rng);
    let mut store = ParamStore::new();
    // keep inputs clear of the clamp bounds at +-0.5
    let x = Tensor::from_fn(&shape, |_| {
        let m = if rng.random_bool(0.5) { rng.random_range(0.0..0.4) } else { rng.random_range(0.6..1.0) };
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    });
    store.add("x", x)?;
    let w = uniform(&shape, rng);
    check(&mut store, move |t, s| {
        let x = t.param(s, s.id("x").unwrap())?;
        let y = t.clamp(x, -0.5, 0.5)?;
        readout(t, y, &w)
    })
}

/// Reductions feed a nonlinearity so their adjoint is not trivially uniform.
fn reduction_case(rng: &mut ChaCha8Rng, op: fn(&mut Tape<f64>, Var) -> stgan_tensor::Result<Var>) -> Result<GradCheckReport> {
    let shape = dims(rng);
    let mut store = ParamStore::new();
    store.add("x", uniform(&shape, rng))?;
    check(&mut store, move |t, s| {
        let x = t.param(s, s.id("x").unwrap())?;
        let y = op(t, x)?;
        let y = t.scale(y, 0.3)?;
        let y = t.tanh(y)?;
        t.sum(y)
    })
}

fn expand_case(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let shape = dims(rng);
    let mut store = ParamStore::new();
    store.add("v", uniform(&[shape[0]], rng))?;
    let w = uniform(&shape, rng);
    check(&mut store, move |t, s| {
        let v = t.param(s, s.id("v").unwrap())?;
        let y = t.expand_per_sample(v, &shape)?;
        readout(t, y, &w)
    })
}

fn reshape_case(rng: &mut ChaCha8Rng, flatten: bool) -> Result<GradCheckReport> {
    let [n, c, h, w] = dims(rng);
    let mut store = ParamStore::new();
    store.add("x", uniform(&[n, c, h, w], rng))?;
    let r = uniform(&[n, c * h * w], rng);
    check(&mut store, move |t, s| {
        let x = t.param(s, s.id("x").unwrap())?;
        let y = if flatten { t.flatten(x)? } else { t.reshape(x, &[n, c * h * w])? };
        readout(t, y, &r)
    })
}

fn matmul_case(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let (m, k, p) = (rng.random_range(1..=4), rng.random_range(1..=4), rng.random_range(1..=4));
    let (ta, tb) = (rng.random_bool(0.5), rng.random_bool(0.5));
    let mut store = ParamStore::new();
    let a_shape = if ta { [k, m] } else { [m, k] };
    let b_shape = if tb { [p, k] } else { [k, p] };
    store.add("a", uniform(&a_shape, rng))?;
    store.add("b", uniform(&b_shape, rng))?;
    let r = uniform(&[m, p], rng);
    check(&mut store, move |t, s| {
        let a = t.param(s, s.id("a").unwrap())?;
        let b = t.param(s, s.id("b").unwrap())?;
        let y = t.matmul(a, b, ta, tb)?;
        readout(t, y, &r)
    })
}

fn row_bias_case(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let (n, d) = (rng.random_range(1..=4), rng.random_range(1..=5));
    let mut store = ParamStore::new();
    store.add("x", uniform(&[n, d], rng))?;
    store.add("b", uniform(&[d], rng))?;
    let r = uniform(&[n, d], rng);
    check(&mut store, move |t, s| {
        let x = t.param(s, s.id("x").unwrap())?;
        let b = t.param(s, s.id("b").unwrap())?;
        let y = t.add_row_bias(x, b)?;
        readout(t, y, &r)
    })
}

fn channel_bias_case(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let shape = dims(rng);
    let mut store = ParamStore::new();
    store.add("x", uniform(&shape, rng))?;
    store.add("b", uniform(&[shape[1]], rng))?;
    let r = uniform(&shape, rng);
    check(&mut store, move |t, s| {
        let x = t.param(s, s.id("x").unwrap())?;
        let b = t.param(s, s.id("b").unwrap())?;
        let y = t.add_channel_bias(x, b)?;
        readout(t, y, &r)
    })
}

fn slice_case(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let [n, _, h, w] = dims(rng);
    let c = rng.random_range(2..=5);
    let start = rng.random_range(0..c);
    let len = rng.random_range(1..=c - start);
    let mut store = ParamStore::new();
    store.add("x", uniform(&[n, c, h, w], rng))?;
    let r = uniform(&[n, len, h, w], rng);
    check(&mut store, move |t, s| {
        let x = t.param(s, s.id("x").unwrap())?;
        let y = t.slice_channels(x, start, len)?;
        readout(t, y, &r)
    })
}

fn conv_case(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let k = rng.random_range(1..=4);
    let stride = rng.random_range(1..=2);
    let pad = rng.random_range(0..=1);
    let (n, cin, cout) = (rng.random_range(1..=2), rng.random_range(1..=3), rng.random_range(1..=3));
    let side = rng.random_range(k.max(3)..=6);
    let out = (side + 2 * pad - k) / stride + 1;
    let mut store = ParamStore::new();
    store.add("x", uniform(&[n, cin, side, side], rng))?;
    store.add("w", uniform(&[cout, cin, k, k], rng))?;
    store.add("b", uniform(&[cout], rng))?;
    let r = uniform(&[n, cout, out, out], rng);
    check(&mut store, move |t, s| {
        let x = t.param(s, s.id("x").unwrap())?;
        let w = t.param(s, s.id("w").unwrap())?;
        let b = t.param(s, s.id("b").unwrap())?;
        let y = t.conv2d(x, w, Some(b), stride, pad)?;
        readout(t, y, &r)
    })
}

fn conv_transpose_case(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let k = rng.random_range(2..=4);
    let stride = rng.random_range(1..=2);
    let pad = rng.random_range(0..=1).min(k - 1);
    let (n, cin, cout) = (rng.random_range(1..=2), rng.random_range(1..=3), rng.random_range(1..=3));
    let side = rng.random_range(2..=4);
    let out = (side - 1) * stride + k - 2 * pad;
    let mut store = ParamStore::new();
    store.add("x", uniform(&[n, cin, side, side], rng))?;
    store.add("w", uniform(&[cin, cout, k, k], rng))?;
    store.add("b", uniform(&[cout], rng))?;
    let r = uniform(&[n, cout, out, out], rng);
    check(&mut store, move |t, s| {
        let x = t.param(s, s.id("x").unwrap())?;
        let w = t.param(s, s.id("w").unwrap())?;
        let b = t.param(s, s.id("b").unwrap())?;
        let y = t.conv_transpose2d(x, w, Some(b), stride, pad)?;
        readout(t, y, &r)
    })
}

fn fc_case(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let (n, din, dout) = (rng.random_range(1..=4), rng.random_range(1..=6), rng.random_range(1..=5));
    let mut store = ParamStore::new();
    store.add("x", uniform(&[n, din], rng))?;
    store.add("w", uniform(&[dout, din], rng))?;
    store.add("b", uniform(&[dout], rng))?;
    let r = uniform(&[n, dout], rng);
    check(&mut store, move |t, s| {
        let x = t.param(s, s.id("x").unwrap())?;
        let w = t.param(s, s.id("w").unwrap())?;
        let b = t.param(s, s.id("b").unwrap())?;
        let y = t.fully_connected(x, w, Some(b))?;
        readout(t, y, &r)
    })
}

fn concat_case(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let [n, c1, h, w] = dims(rng);
    let c2 = rng.random_range(1..=3);
    let mut store = ParamStore::new();
    store.add("a", uniform(&[n, c1, h, w], rng))?;
    store.add("b", uniform(&[n, c2, h, w], rng))?;
    let r = uniform(&[n, c1 + c2, h, w], rng);
    check(&mut store, move |t, s| {
        let a = t.param(s, s.id("a").unwrap())?;
        let b = t.param(s, s.id("b").unwrap())?;
        let y = t.concat_channels(a, b)?;
        readout(t, y, &r)
    })
}

fn instance_norm_case(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let [n, c, h, w] = dims(rng);
    let (h, w) = (h.max(2), w.max(2));
    let mut store = ParamStore::new();
    store.add("x", uniform(&[n, c, h, w], rng))?;
    store.add("scale", uniform(&[c], rng))?;
    store.add("shift", uniform(&[c], rng))?;
    let r = uniform(&[n, c, h, w], rng);
    check(&mut store, move |t, s| {
        let x = t.param(s, s.id("x").unwrap())?;
        let g = t.param(s, s.id("scale").unwrap())?;
        let b = t.param(s, s.id("shift").unwrap())?;
        let y = t.instance_norm(x, g, b, 1e-5)?;
        readout(t, y, &r)
    })
}

fn stu_case(rng: &mut ChaCha8Rng, variant: StuVariant) -> Result<GradCheckReport> {
    let n = rng.random_range(1..=2);
    let (enc, state, attr) = (rng.random_range(1..=3), rng.random_range(1..=3), rng.random_range(1..=3));
    let side = 2 * rng.random_range(1..=2);
    let mut store = ParamStore::new();
    let cell = StuCell::new(&mut store, "stu", 1, variant, enc, state, attr, rng)?;
    // randomize the zero-initialized biases too
    for p in store.iter_mut() {
        if p.name.contains("/b_") {
            p.value = uniform(p.value.shape(), rng).map(|v| 0.5 * v);
        }
    }
    store.add("f_enc", uniform(&[n, enc, side, side], rng))?;
    store.add("state", uniform(&[n, state, side / 2, side / 2], rng))?;
    let diff = Tensor::from_fn(&[n, attr], |_| [-1.0, 0.0, 1.0][rng.random_range(0..3)]);
    let diff_map = crate::stu::stretch_diff(&diff, side / 2, side / 2)?;
    let r1 = uniform(&[n, enc, side, side], rng);
    let r2 = uniform(&[n, enc, side, side], rng);
    check(&mut store, move |t, s| {
        let f = t.param(s, s.id("f_enc").unwrap())?;
        let st = t.param(s, s.id("state").unwrap())?;
        let d = t.constant(diff_map.clone())?;
        let tr = cell
            .forward(t, s, f, st, d, StuHooks::default())
            .map_err(|e| TensorError::Harness(e.to_string()))?;
        let a = readout(t, tr.transformed, &r1)?;
        let b = readout(t, tr.state, &r2)?;
        t.add(a, b)
    })
}

/// Penalty of a small conv critic, differentiated with respect to the
/// critic's weights: exercises double backward through conv, leaky relu,
/// fully connected, squares and square roots.
fn penalty_case(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let n = rng.random_range(1..=3);
    let (c, side, hidden) = (rng.random_range(1..=2), 4, rng.random_range(1..=3));
    let mut store = ParamStore::new();
    store.add("w", uniform(&[hidden, c, 3, 3], rng))?;
    store.add("b", uniform(&[hidden], rng).map(|v| 0.2 * v))?;
    store.add("fc", uniform(&[1, hidden * 4], rng))?;
    let real = uniform(&[n, c, side, side], rng);
    let fake = uniform(&[n, c, side, side], rng);
    let alpha: Vec<f64> = (0..n).map(|_| rng.random()).collect();
    check(&mut store, move |t, s| {
        let critic = |t: &mut Tape<f64>, x: Var| -> Result<Var> {
            let w = t.param(s, s.id("w").unwrap())?;
            let b = t.param(s, s.id("b").unwrap())?;
            let fc = t.param(s, s.id("fc").unwrap())?;
            let h = t.conv2d(x, w, Some(b), 2, 1)?;
            let h = t.leaky_relu(h, 0.2)?;
            let h = t.flatten(h)?;
            Ok(t.fully_connected(h, fc, None)?)
        };
        losses::gradient_penalty(t, critic, &real, &fake, &alpha).map_err(|e| TensorError::Harness(e.to_string()))
    })
}

fn bce_case(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let (n, c) = (rng.random_range(1..=4), rng.random_range(1..=5));
    let mut store = ParamStore::new();
    store.add("logits", uniform(&[n, c], rng).map(|v| 3.0 * v))?;
    let labels = Tensor::from_fn(&[n, c], |_| if rng.random_bool(0.5) { 1.0 } else { 0.0 });
    check(&mut store, move |t, s| {
        let l = t.param(s, s.id("logits").unwrap())?;
        losses::d_att_loss(t, l, &labels).map_err(|e| TensorError::Harness(e.to_string()))
    })
}

fn l1_case(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let shape = dims(rng);
    let x = uniform(&shape, rng);
    let mut store = ParamStore::new();
    // keep every residual clear of the kink at zero
    let offset = away_from_zero(&shape, rng);
    store.add("x_rec", x.zip_map(&offset, |a, b| a + b)?)?;
    check(&mut store, move |t, s| {
        let r = t.param(s, s.id("x_rec").unwrap())?;
        let xv = t.constant(x.clone())?;
        losses::reconstruction_loss(t, xv, r).map_err(|e| TensorError::Harness(e.to_string()))
    })
}

/// Square whose adjoint is off by a factor of 1.5.
struct CorruptedSquare;

impl CustomOp<f64> for CorruptedSquare {
    fn name(&self) -> &'static str {
        "corrupted_square"
    }

    fn forward(&self, inputs: &[&Tensor<f64>]) -> stgan_tensor::Result<Tensor<f64>> {
        Ok(inputs[0].map(|v| v * v))
    }

    fn vjp(&self, tape: &mut Tape<f64>, inputs: &[Var], _: Var, grad: Var) -> stgan_tensor::Result<Vec<Option<Var>>> {
        let g = tape.mul(grad, inputs[0])?;
        Ok(vec![Some(tape.scale(g, 3.0)?)])
    }
}

fn negative_control(rng: &mut ChaCha8Rng) -> Result<bool> {
    let mut store = ParamStore::new();
    store.add("x", uniform(&[2, 3], rng))?;
    let op: Arc<dyn CustomOp<f64>> = Arc::new(CorruptedSquare);
    let report = check(&mut store, move |t, s| {
        let x = t.param(s, s.id("x").unwrap())?;
        let y = t.custom(op.clone(), &[x])?;
        t.sum(y)
    })?;
    Ok(!report.passed)
}

/// grad(a f + b g) against a grad(f) + b grad(g) on a random conv graph.
fn linearity(rng: &mut ChaCha8Rng) -> Result<f64> {
    let mut store = ParamStore::new();
    let w = store.add("w", uniform(&[2, 2, 3, 3], rng))?;
    let x = uniform(&[1, 2, 5, 5], rng);
    let (a, b) = (rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
    let graph = |t: &mut Tape<f64>| -> Result<(Var, Var)> {
        let xv = t.constant(x.clone())?;
        let wv = t.param(&store, w)?;
        let y = t.conv2d(xv, wv, None, 1, 1)?;
        let f = t.tanh(y)?;
        let f = t.sum(f)?;
        let g = t.mul(y, y)?;
        let g = t.mean(g)?;
        Ok((f, g))
    };
    let grad_of = |pick: &Combine<'_>| -> Result<Tensor<f64>> {
        let mut t = Tape::new();
        let (f, g) = graph(&mut t)?;
        let root = pick(&mut t, f, g)?;
        let grads = t.backward(root)?;
        Ok(grads.get(&store, w).cloned().unwrap_or_else(|| Tensor::zeros(&[2, 2, 3, 3])))
    };
    let combined = grad_of(&|t, f, g| {
        let fa = t.scale(f, a)?;
        let gb = t.scale(g, b)?;
        t.add(fa, gb)
    })?;
    let gf = grad_of(&|_, f, _| Ok(f))?;
    let gg = grad_of(&|_, _, g| Ok(g))?;
    let mut worst: f64 = 0.0;
    for ((c, f), g) in combined.data().iter().zip(gf.data()).zip(gg.data()) {
        let expect = a * f + b * g;
        worst = worst.max((c - expect).abs() / expect.abs().max(1e-3));
    }
    Ok(worst)
}

/// Every check with its case generator.
pub fn catalogue() -> Vec<(&'static str, CaseFn)> {
    vec![
        ("conv2d", conv_case),
        ("conv_transpose2d", conv_transpose_case),
        ("fully_connected", fc_case),
        ("add", |r| binary_case(r, |t, a, b| t.add(a, b))),
        ("sub", |r| binary_case(r, |t, a, b| t.sub(a, b))),
        ("mul", |r| binary_case(r, |t, a, b| t.mul(a, b))),
        ("affine", |r| unary_case(r, |t, x| t.affine(x, 1.7, -0.3), false)),
        ("scale", |r| unary_case(r, |t, x| t.scale(x, -2.5), false)),
        ("neg", |r| unary_case(r, |t, x| t.neg(x), false)),
        ("add_scalar", |r| unary_case(r, |t, x| t.add_scalar(x, 0.7), false)),
        ("clamp", clamp_case),
        ("log", |r| positive_case(r, |t, x| t.log(x))),
        ("recip", |r| positive_case(r, |t, x| t.recip(x))),
        ("sqrt", |r| positive_case(r, |t, x| t.sqrt(x))),
        ("sum", |r| reduction_case(r, |t, x| t.sum(x))),
        ("mean", |r| reduction_case(r, |t, x| t.mean(x))),
        ("sum_per_sample", |r| reduction_case(r, |t, x| t.sum_per_sample(x))),
        ("expand_per_sample", expand_case),
        ("reshape", |r| reshape_case(r, false)),
        ("flatten", |r| reshape_case(r, true)),
        ("matmul", matmul_case),
        ("add_row_bias", row_bias_case),
        ("add_channel_bias", channel_bias_case),
        ("slice_channels", slice_case),
        ("sigmoid", |r| unary_case(r, |t, x| t.sigmoid(x), false)),
        ("tanh", |r| unary_case(r, |t, x| t.tanh(x), false)),
        ("relu", |r| unary_case(r, |t, x| t.relu(x), true)),
        ("leaky_relu", |r| unary_case(r, |t, x| t.leaky_relu(x, 0.2), true)),
        ("abs", |r| unary_case(r, |t, x| t.abs(x), true)),
        ("concat_channels", concat_case),
        ("instance_norm", instance_norm_case),
        ("reconstruction_loss", l1_case),
        ("attribute_bce", bce_case),
        ("gradient_penalty", penalty_case),
        ("stu_standard", |r| stu_case(r, StuVariant::Standard)),
        ("stu_gru_output", |r| stu_case(r, StuVariant::GruOutput)),
        ("stu_conv", |r| stu_case(r, StuVariant::Conv)),
        ("stu_conv_res", |r| stu_case(r, StuVariant::ConvRes)),
        ("stu_res", |r| stu_case(r, StuVariant::Res)),
    ]
}

/// Runs `cases` randomized cases of every check, seeded per check and case.
pub fn run(cases: usize, seed: u64) -> Result<VerifyReport> {
    let start = Instant::now();
    let mut checks = Vec::new();
    for (k, (name, case)) in catalogue().into_iter().enumerate() {
        let mut summary = CheckSummary {
            name: name.into(),
            cases: 0,
            failed_cases: 0,
            max_rel_err: 0.0,
        };
        for i in 0..cases {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(((k as u64) << 32) | i as u64);
            let report = case(&mut rng)?;
            summary.cases += 1;
            summary.max_rel_err = summary.max_rel_err.max(report.max_rel_err());
            if !report.passed {
                summary.failed_cases += 1;
            }
        }
        checks.push(summary);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let negative_control_caught = negative_control(&mut rng)?;
    let linearity_err = (0..cases).map(|_| linearity(&mut rng)).collect::<Result<Vec<_>>>()?.into_iter().fold(0.0, f64::max);
    Ok(VerifyReport {
        tolerance: TOLERANCE,
        checks,
        negative_control_caught,
        linearity_err,
        seconds: start.elapsed().as_secs_f64(),
    })
}
