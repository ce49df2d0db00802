use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use super::{ParamId, ParamSet, Tape, Tensor, Var};
use crate::Result;

/// Glorot-uniform `[rows, cols]` matrix.
pub fn init_matrix<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> Tensor {
    let bound = libm::sqrt(6.0 / (rows + cols) as f64);
    let data: Vec<f64> = (0..rows * cols).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::matrix(rows, cols, data).expect("extents are positive")
}

/// Affine map `x W + b` with `W: [inputs, outputs]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub inputs: usize,
    pub outputs: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        params: &mut ParamSet,
        name: &str,
        inputs: usize,
        outputs: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let weight = params.add(&format!("{name}.weight"), init_matrix(rng, inputs, outputs))?;
        let bias = params.add(&format!("{name}.bias"), Tensor::zeros(&[outputs]))?;
        Ok(Self {
            weight,
            bias,
            inputs,
            outputs,
        })
    }

    /// Looks up an existing layer by name.
    pub fn bind(params: &ParamSet, name: &str) -> Result<Self> {
        let weight = params.id(&format!("{name}.weight"))?;
        let bias = params.id(&format!("{name}.bias"))?;
        let w = params.value(weight);
        Ok(Self {
            weight,
            bias,
            inputs: w.rows(),
            outputs: w.cols(),
        })
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let w = tape.param(self.weight);
        let b = tape.param(self.bias);
        let y = tape.matmul(x, w)?;
        tape.add_row(y, b)
    }
}

/// Gated recurrent cell with update and reset gates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GruCell {
    pub input_weight: ParamId,
    pub hidden_weight: ParamId,
    pub bias: ParamId,
    pub inputs: usize,
    pub hidden: usize,
}

impl GruCell {
    pub fn new<R: Rng + ?Sized>(
        params: &mut ParamSet,
        name: &str,
        inputs: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let input_weight = params.add(&format!("{name}.input_weight"), init_matrix(rng, inputs, 3 * hidden))?;
        let hidden_weight = params.add(&format!("{name}.hidden_weight"), init_matrix(rng, hidden, 3 * hidden))?;
        let bias = params.add(&format!("{name}.bias"), Tensor::zeros(&[3 * hidden]))?;
        Ok(Self {
            input_weight,
            hidden_weight,
            bias,
            inputs,
            hidden,
        })
    }

    pub fn bind(params: &ParamSet, name: &str) -> Result<Self> {
        let input_weight = params.id(&format!("{name}.input_weight"))?;
        let hidden_weight = params.id(&format!("{name}.hidden_weight"))?;
        let bias = params.id(&format!("{name}.bias"))?;
        let hidden = params.value(hidden_weight).rows();
        Ok(Self {
            input_weight,
            hidden_weight,
            bias,
            inputs: params.value(input_weight).rows(),
            hidden,
        })
    }

    /// One step: `h' = n + z * (h - n)`.
    pub fn forward(&self, tape: &mut Tape, x: Var, h: Var) -> Result<Var> {
        let hd = self.hidden;
        let wx = tape.param(self.input_weight);
        let wh = tape.param(self.hidden_weight);
        let b = tape.param(self.bias);
        let gx = tape.matmul(x, wx)?;
        let gx = tape.add_row(gx, b)?;
        let gh = tape.matmul(h, wh)?;

        let zx = tape.slice_cols(gx, 0, hd)?;
        let zh = tape.slice_cols(gh, 0, hd)?;
        let z = tape.add(zx, zh)?;
        let z = tape.sigmoid(z)?;

        let rx = tape.slice_cols(gx, hd, hd)?;
        let rh = tape.slice_cols(gh, hd, hd)?;
        let r = tape.add(rx, rh)?;
        let r = tape.sigmoid(r)?;

        let nx = tape.slice_cols(gx, 2 * hd, hd)?;
        let nh = tape.slice_cols(gh, 2 * hd, hd)?;
        let nh = tape.mul(r, nh)?;
        let n = tape.add(nx, nh)?;
        let n = tape.tanh(n)?;

        let d = tape.sub(h, n)?;
        let d = tape.mul(z, d)?;
        tape.add(n, d)
    }
}
