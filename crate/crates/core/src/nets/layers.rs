use rand::Rng;

use super::params::{ParamId, ParamStore};
use crate::autograd::{Tape, Var};
use crate::error::Result;

pub(crate) const LEAKY_SLOPE: f64 = 0.2;

/// `x W + b` with `W` stored as `[in, out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub(crate) weight: ParamId,
    pub(crate) bias: ParamId,
}

impl Linear {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, inp: usize, out: usize, rng: &mut R) -> Self {
        let weight = store.add_normal(format!("{name}.weight"), &[inp, out], rng);
        let bias = store.add_const(format!("{name}.bias"), &[1, out], 0.0);
        Linear { weight, bias }
    }

    pub fn forward(&self, tape: &Tape, p: &[Var], x: Var) -> Result<Var> {
        let m = tape.matmul(x, p[self.weight.index()])?;
        tape.add(m, p[self.bias.index()])
    }
}

/// 2-D convolution with a per-channel bias.
#[derive(Debug, Clone)]
pub struct Conv {
    pub(crate) weight: ParamId,
    pub(crate) bias: ParamId,
    pub(crate) stride: usize,
    pub(crate) pad: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut R,
    ) -> Self {
        let weight = store.add_normal(format!("{name}.weight"), &[cout, cin, kernel, kernel], rng);
        let bias = store.add_const(format!("{name}.bias"), &[1, cout, 1, 1], 0.0);
        Conv {
            weight,
            bias,
            stride,
            pad,
        }
    }

    pub fn forward(&self, tape: &Tape, p: &[Var], x: Var) -> Result<Var> {
        let c = tape.conv2d(x, p[self.weight.index()], self.stride, self.pad)?;
        tape.add(c, p[self.bias.index()])
    }
}
