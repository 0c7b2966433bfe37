//! Transformer building blocks over a [`Tape`].

use crate::error::Result;
use crate::numerics::{Init, ParamBuilder, ParamId, ParamStore, Tape, Var};

pub const LN_EPS: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn declare(pb: &mut ParamBuilder, name: &str, fan_in: usize, fan_out: usize) -> Self {
        pb.scoped(name, |pb| Linear {
            w: pb.declare("w", &[fan_in, fan_out], Init::XavierUniform),
            b: pb.declare("b", &[1, fan_out], Init::Zeros),
        })
    }

    pub fn forward(&self, tape: &Tape, p: &ParamStore, x: Var) -> Result<Var> {
        let y = tape.matmul(x, tape.param(p, self.w))?;
        tape.add_row(y, tape.param(p, self.b))
    }
}

/// Layer norm with learned gain and bias.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub g: ParamId,
    pub b: ParamId,
}

impl LayerNorm {
    pub fn declare(pb: &mut ParamBuilder, name: &str, width: usize) -> Self {
        pb.scoped(name, |pb| LayerNorm {
            g: pb.declare("g", &[1, width], Init::Ones),
            b: pb.declare("b", &[1, width], Init::Zeros),
        })
    }

    pub fn forward(&self, tape: &Tape, p: &ParamStore, x: Var) -> Result<Var> {
        let n = tape.layer_norm(x, LN_EPS)?;
        let n = tape.mul_row(n, tape.param(p, self.g))?;
        tape.add_row(n, tape.param(p, self.b))
    }
}

/// Pre-norm block: `x + attn(ln(x))`, then `x + mlp(ln(x))`.
#[derive(Clone, Debug)]
pub struct Block {
    pub heads: usize,
    pub width: usize,
    pub ln1: LayerNorm,
    pub qkv: Linear,
    pub proj: Linear,
    pub ln2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Block {
    pub fn declare(pb: &mut ParamBuilder, name: &str, width: usize, heads: usize, mlp_ratio: usize) -> Self {
        pb.scoped(name, |pb| Block {
            heads,
            width,
            ln1: LayerNorm::declare(pb, "ln1", width),
            qkv: Linear::declare(pb, "qkv", width, 3 * width),
            proj: Linear::declare(pb, "proj", width, width),
            ln2: LayerNorm::declare(pb, "ln2", width),
            fc1: Linear::declare(pb, "fc1", width, mlp_ratio * width),
            fc2: Linear::declare(pb, "fc2", mlp_ratio * width, width),
        })
    }

    pub fn attention(&self, tape: &Tape, p: &ParamStore, x: Var) -> Result<Var> {
        let h = self.width;
        let d = h / self.heads;
        let qkv = self.qkv.forward(tape, p, x)?;
        let mut outs = Vec::with_capacity(self.heads);
        for i in 0..self.heads {
            let q = tape.slice_cols(qkv, i * d, d)?;
            let k = tape.slice_cols(qkv, h + i * d, d)?;
            let v = tape.slice_cols(qkv, 2 * h + i * d, d)?;
            let s = tape.matmul(q, tape.transpose(k)?)?;
            let a = tape.softmax_rows(tape.scale(s, 1.0 / (d as f64).sqrt()))?;
            outs.push(tape.matmul(a, v)?);
        }
        let o = if outs.len() == 1 { outs[0] } else { tape.concat_cols(&outs)? };
        self.proj.forward(tape, p, o)
    }

    pub fn forward(&self, tape: &Tape, p: &ParamStore, x: Var) -> Result<Var> {
        let a = self.attention(tape, p, self.ln1.forward(tape, p, x)?)?;
        let x = tape.add(x, a)?;
        let h = self.fc1.forward(tape, p, self.ln2.forward(tape, p, x)?)?;
        let m = self.fc2.forward(tape, p, tape.gelu(h))?;
        tape.add(x, m)
    }
}

pub fn declare_blocks(
    pb: &mut ParamBuilder,
    name: &str,
    depth: usize,
    width: usize,
    heads: usize,
    mlp_ratio: usize,
) -> Vec<Block> {
    pb.scoped(name, |pb| (0..depth).map(|i| Block::declare(pb, &i.to_string(), width, heads, mlp_ratio)).collect())
}

pub fn run_blocks(blocks: &[Block], tape: &Tape, p: &ParamStore, mut x: Var) -> Result<Var> {
    for b in blocks {
        x = b.forward(tape, p, x)?;
    }
    Ok(x)
}
