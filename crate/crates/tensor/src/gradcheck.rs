//! Central finite-difference verification of analytic gradients.

use crate::error::{Result, TensorError};
use crate::{ParamStore, Tape, Var};

/// Worst-case agreement for one parameter tensor.
#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub worst_index: usize,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub tol: f64,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_err).fold(0.0, f64::max)
    }
}

/// Relative error. Magnitudes below `1e-3` are floored there, so entries
/// that are both essentially zero are compared on an absolute scale where
/// central-difference round-off (about `1e-10` at `h = 1e-5`) is harmless.
fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
}

fn eval<F>(f: &mut F, store: &ParamStore<f64>) -> Result<f64>
where
    F: FnMut(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var>,
{
    // a full tape: `f` may differentiate internally (gradient penalties)
    let mut tape = Tape::new();
    let root = f(&mut tape, store)?;
    tape.value(root).item()
}

/// Compares the tape's gradients of `f` with central differences of step `h`
/// for every element of every parameter in `store`.
pub fn grad_check<F>(store: &mut ParamStore<f64>, mut f: F, h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let base = eval(&mut f, store)?;
    let again = eval(&mut f, store)?;
    if base.to_bits() != again.to_bits() {
        return Err(TensorError::Harness(format!(
            "function is not deterministic: {base} then {again}"
        )));
    }

    let mut tape = Tape::new();
    let root = f(&mut tape, store)?;
    let grads = tape.backward(root)?;

    let ids: Vec<_> = store.ids().collect();
    let mut params = Vec::with_capacity(ids.len());
    for id in ids {
        let analytic = grads
            .get(store, id)
            .map(|g| g.data().to_vec())
            .unwrap_or_else(|| vec![0.0; store.get(id).value.numel()]);
        let mut check = ParamCheck {
            name: store.get(id).name.clone(),
            max_rel_err: 0.0,
            max_abs_err: 0.0,
            worst_index: 0,
        };
        for (i, &a) in analytic.iter().enumerate() {
            let orig = store.get(id).value.data()[i];
            store.get_mut(id).value.data_mut()[i] = orig + h;
            let plus = eval(&mut f, store);
            store.get_mut(id).value.data_mut()[i] = orig - h;
            let minus = eval(&mut f, store);
            store.get_mut(id).value.data_mut()[i] = orig;
            let numeric = (plus? - minus?) / (2.0 * h);
            let r = rel_err(a, numeric);
            if r > check.max_rel_err {
                check.max_rel_err = r;
                check.worst_index = i;
            }
            check.max_abs_err = check.max_abs_err.max((a - numeric).abs());
        }
        params.push(check);
    }
    let passed = params.iter().all(|p| p.max_rel_err < tol);
    Ok(GradCheckReport { params, tol, passed })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Tensor;

    #[test]
    fn quadratic_form_passes_tightly() {
        let mut store = ParamStore::new();
        store
            .add("x", Tensor::new(&[1, 3], vec![0.3, -1.2, 2.0]).unwrap())
            .unwrap();
        let a = Tensor::new(&[3, 3], vec![2.0, 0.5, 0.0, 0.5, 3.0, -1.0, 0.0, -1.0, 1.5]).unwrap();
        let report = grad_check(
            &mut store,
            |tape, s| {
                let x = tape.param(s, s.id("x").unwrap())?;
                let m = tape.constant(a.clone())?;
                let ax = tape.matmul(x, m, false, false)?;
                let xax = tape.mul(ax, x)?;
                tape.sum(xax)
            },
            1e-5,
            1e-6,
        )
        .unwrap();
        assert!(report.passed, "{report:?}");
    }

    #[test]
    fn nondeterministic_function_is_rejected() {
        let mut store = ParamStore::new();
        store.add("x", Tensor::ones(&[1])).unwrap();
        let mut calls = 0.0;
        let err = grad_check(
            &mut store,
            |tape, s| {
                calls += 1.0;
                let x = tape.param(s, s.id("x").unwrap())?;
                let y = tape.add_scalar(x, calls)?;
                tape.sum(y)
            },
            1e-5,
            1e-6,
        )
        .unwrap_err();
        assert!(matches!(err, TensorError::Harness(_)));
    }
}
