//! Weight containers for the transformer pieces shared by both encoder
//! towers and the simulator, plus their tape bindings.
//!
//! `parameters()` and `bind()` visit weights in the same order, so the vars
//! collected while binding line up with `parameters_mut()` for the optimizer.

use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::tensor::Matrix;

/// Types that own trainable or frozen weight matrices.
pub trait Parameters {
    fn parameters(&self) -> Vec<&Matrix>;
    fn parameters_mut(&mut self) -> Vec<&mut Matrix>;

    fn num_parameters(&self) -> usize {
        self.parameters().iter().map(|m| m.as_slice().len()).sum()
    }
}

fn bind_one<'a>(t: &mut Tape<'a>, m: &'a Matrix, trainable: bool, collect: &mut Vec<Var>) -> Var {
    let v = t.leaf(m, trainable);
    if trainable {
        collect.push(v);
    }
    v
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    /// `in × out`
    pub weight: Matrix,
    /// `1 × out`
    pub bias: Matrix,
}

impl Linear {
    pub fn init<R: Rng + ?Sized>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let std = 1.0 / libm::sqrt(inputs as f64);
        Self { weight: Matrix::randn(inputs, outputs, std, rng), bias: Matrix::zeros(1, outputs) }
    }

    pub fn inputs(&self) -> usize {
        self.weight.rows()
    }

    pub fn outputs(&self) -> usize {
        self.weight.cols()
    }

    pub fn bind<'a>(&'a self, t: &mut Tape<'a>, trainable: bool, collect: &mut Vec<Var>) -> BoundLinear {
        BoundLinear {
            weight: bind_one(t, &self.weight, trainable, collect),
            bias: bind_one(t, &self.bias, trainable, collect),
        }
    }
}

impl Parameters for Linear {
    fn parameters(&self) -> Vec<&Matrix> {
        alloc::vec![&self.weight, &self.bias]
    }
    fn parameters_mut(&mut self) -> Vec<&mut Matrix> {
        alloc::vec![&mut self.weight, &mut self.bias]
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BoundLinear {
    weight: Var,
    bias: Var,
}

impl BoundLinear {
    pub fn forward(&self, t: &mut Tape<'_>, x: Var) -> Var {
        let y = t.matmul(x, self.weight);
        t.add_row(y, self.bias)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerNorm {
    pub gain: Matrix,
    pub bias: Matrix,
}

impl LayerNorm {
    pub fn new(width: usize) -> Self {
        Self { gain: Matrix::filled(1, width, 1.0), bias: Matrix::zeros(1, width) }
    }

    pub fn bind<'a>(&'a self, t: &mut Tape<'a>, trainable: bool, collect: &mut Vec<Var>) -> BoundLayerNorm {
        BoundLayerNorm {
            gain: bind_one(t, &self.gain, trainable, collect),
            bias: bind_one(t, &self.bias, trainable, collect),
        }
    }
}

impl Parameters for LayerNorm {
    fn parameters(&self) -> Vec<&Matrix> {
        alloc::vec![&self.gain, &self.bias]
    }
    fn parameters_mut(&mut self) -> Vec<&mut Matrix> {
        alloc::vec![&mut self.gain, &mut self.bias]
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BoundLayerNorm {
    gain: Var,
    bias: Var,
}

impl BoundLayerNorm {
    pub fn forward(&self, t: &mut Tape<'_>, x: Var) -> Var {
        t.layer_norm(x, self.gain, self.bias)
    }
}

/// Pre-norm transformer block: `x + attn(ln(x))`, then `x + mlp(ln(x))`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Block {
    pub heads: usize,
    pub causal: bool,
    pub ln_attn: LayerNorm,
    pub qkv: Linear,
    pub attn_out: Linear,
    pub ln_mlp: LayerNorm,
    pub fc_in: Linear,
    pub fc_out: Linear,
}

impl Block {
    pub fn init<R: Rng + ?Sized>(width: usize, heads: usize, mlp_ratio: usize, causal: bool, rng: &mut R) -> Self {
        let hidden = width * mlp_ratio;
        Self {
            heads,
            causal,
            ln_attn: LayerNorm::new(width),
            qkv: Linear::init(width, 3 * width, rng),
            attn_out: Linear::init(width, width, rng),
            ln_mlp: LayerNorm::new(width),
            fc_in: Linear::init(width, hidden, rng),
            fc_out: Linear::init(hidden, width, rng),
        }
    }

    pub fn width(&self) -> usize {
        self.qkv.inputs()
    }

    pub fn bind<'a>(&'a self, t: &mut Tape<'a>, trainable: bool, collect: &mut Vec<Var>) -> BoundBlock {
        BoundBlock {
            heads: self.heads,
            causal: self.causal,
            ln_attn: self.ln_attn.bind(t, trainable, collect),
            qkv: self.qkv.bind(t, trainable, collect),
            attn_out: self.attn_out.bind(t, trainable, collect),
            ln_mlp: self.ln_mlp.bind(t, trainable, collect),
            fc_in: self.fc_in.bind(t, trainable, collect),
            fc_out: self.fc_out.bind(t, trainable, collect),
        }
    }
}

impl Parameters for Block {
    fn parameters(&self) -> Vec<&Matrix> {
        let mut v = self.ln_attn.parameters();
        v.extend(self.qkv.parameters());
        v.extend(self.attn_out.parameters());
        v.extend(self.ln_mlp.parameters());
        v.extend(self.fc_in.parameters());
        v.extend(self.fc_out.parameters());
        v
    }
    fn parameters_mut(&mut self) -> Vec<&mut Matrix> {
        let mut v = self.ln_attn.parameters_mut();
        v.extend(self.qkv.parameters_mut());
        v.extend(self.attn_out.parameters_mut());
        v.extend(self.ln_mlp.parameters_mut());
        v.extend(self.fc_in.parameters_mut());
        v.extend(self.fc_out.parameters_mut());
        v
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BoundBlock {
    heads: usize,
    causal: bool,
    ln_attn: BoundLayerNorm,
    qkv: BoundLinear,
    attn_out: BoundLinear,
    ln_mlp: BoundLayerNorm,
    fc_in: BoundLinear,
    fc_out: BoundLinear,
}

impl BoundBlock {
    pub fn forward(&self, t: &mut Tape<'_>, x: Var) -> Var {
        let h = self.ln_attn.forward(t, x);
        let h = self.qkv.forward(t, h);
        let h = t.attention(h, self.heads, self.causal);
        let h = self.attn_out.forward(t, h);
        let x = t.add(x, h);
        let h = self.ln_mlp.forward(t, x);
        let h = self.fc_in.forward(t, h);
        let h = t.gelu(h);
        let h = self.fc_out.forward(t, h);
        t.add(x, h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn bind_order_matches_parameter_order() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let block = Block::init(8, 2, 4, false, &mut rng);
        let mut t = Tape::new();
        let mut vars = Vec::new();
        block.bind(&mut t, true, &mut vars);
        let params = block.parameters();
        assert_eq!(vars.len(), params.len());
        for (v, p) in vars.iter().zip(params) {
            assert!(core::ptr::eq(t.value(*v), p));
        }
    }

    #[test]
    fn frozen_binding_collects_nothing() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let block = Block::init(8, 2, 4, false, &mut rng);
        let mut t = Tape::new();
        let mut vars = Vec::new();
        block.bind(&mut t, false, &mut vars);
        assert!(vars.is_empty());
    }
}
