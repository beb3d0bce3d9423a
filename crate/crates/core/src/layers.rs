use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::autodiff::{NodeId, Tape};
use crate::error::Result;
use crate::tensor::{ParamId, ParamStore, Tensor};

/// Glorot-uniform initialised matrix of shape `fan_in x fan_out`.
pub fn glorot<R: Rng + ?Sized>(rng: &mut R, fan_in: usize, fan_out: usize) -> Vec<f64> {
    let limit = (6.0 / (fan_in + fan_out).max(1) as f64).sqrt();
    let dist = Uniform::new_inclusive(-limit, limit).expect("finite limit");
    (0..fan_in * fan_out).map(|_| dist.sample(rng)).collect()
}

pub fn uniform<R: Rng + ?Sized>(rng: &mut R, n: usize, limit: f64) -> Vec<f64> {
    let dist = Uniform::new_inclusive(-limit, limit).expect("finite limit");
    (0..n).map(|_| dist.sample(rng)).collect()
}

/// Affine map `x W + b` with `W: inputs x outputs`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub inputs: usize,
    pub outputs: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, name: &str, inputs: usize, outputs: usize) -> Self {
        let weight = store.add(Tensor::new(format!("{name}.weight"), vec![inputs, outputs], glorot(rng, inputs, outputs)));
        let bias = store.add(Tensor::new(format!("{name}.bias"), vec![outputs], vec![0.0; outputs]));
        Linear { weight, bias, inputs, outputs }
    }

    pub fn forward(&self, tape: &mut Tape, x: NodeId) -> Result<NodeId> {
        let w = tape.param(self.weight);
        let b = tape.param(self.bias);
        let xw = tape.matmul(x, w)?;
        tape.add(xw, b)
    }

    /// Same map on plain row-major data, outside any tape.
    pub fn apply(&self, store: &ParamStore, rows: usize, x: &[f64]) -> Vec<f64> {
        let w = &store.get(self.weight).values;
        let b = &store.get(self.bias).values;
        let mut out = vec![0.0; rows * self.outputs];
        crate::autodiff::matmul_into(rows, self.inputs, self.outputs, x, w, &mut out);
        for r in 0..rows {
            out[r * self.outputs..(r + 1) * self.outputs].iter_mut().zip(b).for_each(|(o, b)| *o += b);
        }
        out
    }
}
