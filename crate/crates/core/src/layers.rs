//! Parameterised convolution layers shared by every module.

use rand::Rng;

use crate::error::Result;
use crate::tensor::{ParamId, ParamStore, Scalar, Tape, Var};

#[derive(Debug, Clone, Copy)]
pub struct Conv1dLayer {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Conv1dLayer {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
    ) -> Result<Self> {
        let weight = store.add_he(format!("{name}.weight"), &[c_out, c_in, kernel], c_in * kernel, rng)?;
        let bias = store.add_zeros(format!("{name}.bias"), &[c_out])?;
        Ok(Conv1dLayer { weight, bias })
    }

    pub fn bind<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>) -> (Var, Var) {
        (tape.param(store, self.weight), tape.param(store, self.bias))
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let (w, b) = self.bind(tape, store);
        tape.conv1d(x, w, b)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Conv2dLayer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
}

impl Conv2dLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
    ) -> Result<Self> {
        let fan_in = c_in * kernel * kernel;
        let weight = store.add_he(format!("{name}.weight"), &[c_out, c_in, kernel, kernel], fan_in, rng)?;
        let bias = store.add_zeros(format!("{name}.bias"), &[c_out])?;
        Ok(Conv2dLayer { weight, bias, stride })
    }

    /// Multiply the initial weights by `gain`.
    pub fn rescale<T: Scalar>(&self, store: &mut ParamStore<T>, gain: f64) {
        let g = T::of(gain);
        for v in store.get_mut(self.weight).value.data_mut() {
            *v = *v * g;
        }
    }

    pub fn bind<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>) -> (Var, Var) {
        (tape.param(store, self.weight), tape.param(store, self.bias))
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let (w, b) = self.bind(tape, store);
        tape.conv2d(x, w, b, self.stride)
    }
}
