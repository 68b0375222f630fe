use rand::Rng;
use stgan_tensor::{init, Float, ParamId, ParamStore, Tape, Tensor, Var};

use crate::error::Result;

#[derive(Clone, Debug)]
pub(crate) struct Conv {
    pub w: ParamId,
    /// Absent when a normalization follows and would cancel it.
    pub b: Option<ParamId>,
    pub transposed: bool,
}

impl Conv {
    /// `transposed` weights are stored (in, out, k, k).
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Float, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        cin: usize,
        cout: usize,
        k: usize,
        transposed: bool,
        bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let (shape, fan_in) = if transposed {
            // a stride-2 transposed conv sees a quarter of its taps per output
            ([cin, cout, k, k], cin * k * k / 4)
        } else {
            ([cout, cin, k, k], cin * k * k)
        };
        let w = store.add(format!("{prefix}/weight"), init::uniform_fan_in(&shape, fan_in, rng))?;
        let b = bias
            .then(|| store.add(format!("{prefix}/bias"), Tensor::zeros(&[cout])))
            .transpose()?;
        Ok(Self { w, b, transposed })
    }

    pub fn apply<T: Float>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var, stride: usize, pad: usize) -> Result<Var> {
        let w = tape.param(store, self.w)?;
        let b = self.b.map(|b| tape.param(store, b)).transpose()?;
        Ok(if self.transposed {
            tape.conv_transpose2d(x, w, b, stride, pad)?
        } else {
            tape.conv2d(x, w, b, stride, pad)?
        })
    }
}

#[derive(Clone, Debug)]
pub(crate) struct InstanceNorm {
    pub scale: ParamId,
    pub shift: ParamId,
}

impl InstanceNorm {
    pub fn new<T: Float>(store: &mut ParamStore<T>, prefix: &str, c: usize) -> Result<Self> {
        let scale = store.add(format!("{prefix}/scale"), Tensor::ones(&[c]))?;
        let shift = store.add(format!("{prefix}/shift"), Tensor::zeros(&[c]))?;
        Ok(Self { scale, shift })
    }

    pub fn apply<T: Float>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let scale = tape.param(store, self.scale)?;
        let shift = tape.param(store, self.shift)?;
        Ok(tape.instance_norm(x, scale, shift, T::of(1e-5))?)
    }
}

#[derive(Clone, Debug)]
pub(crate) struct Dense {
    pub w: ParamId,
    pub b: ParamId,
}

impl Dense {
    pub fn new<T: Float, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        din: usize,
        dout: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let w = store.add(format!("{prefix}/weight"), init::uniform_fan_in(&[dout, din], din, rng))?;
        let b = store.add(format!("{prefix}/bias"), Tensor::zeros(&[dout]))?;
        Ok(Self { w, b })
    }

    pub fn apply<T: Float>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = tape.param(store, self.w)?;
        let b = tape.param(store, self.b)?;
        Ok(tape.fully_connected(x, w, Some(b))?)
    }
}
