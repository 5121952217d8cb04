//! Transformer building blocks shared by the speech encoder and text decoder.
//!
//! Blocks hold parameter *names* only; values live in a [`ParamRegistry`]
//! and are bound into a fresh graph for every forward pass.

use rand::Rng;
use rand_distr::StandardNormal;
use s2tt_autodiff::{Bound, Graph, Group, ParamRegistry, Scalar, Segment, Tensor, Var};

use crate::error::Result;

pub const LN_EPS: f64 = 1e-5;

pub fn normal_tensor<R: Rng>(rng: &mut R, shape: &[usize], std: f64) -> Tensor<f32> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| (std * rng.sample::<f64, _>(StandardNormal)) as f32)
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches generated data")
}

/// `pe[p][2i] = sin(p / 10000^(2i/d))`, `pe[p][2i+1] = cos(...)`.
pub fn sinusoidal_table<F: Scalar>(positions: usize, dim: usize) -> Tensor<F> {
    let mut data = Vec::with_capacity(positions * dim);
    for p in 0..positions {
        for j in 0..dim {
            let i = (j / 2) as f64;
            let angle = p as f64 / 10000f64.powf(2.0 * i / dim as f64);
            data.push(F::from_f64_lossy(if j % 2 == 0 { angle.sin() } else { angle.cos() }));
        }
    }
    Tensor::new(vec![positions, dim], data).expect("table shape is consistent")
}

/// Low-rank residual attached to a [`Linear`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LoraAttachment {
    pub rank: usize,
    pub scale: f64,
}

/// `y = x·Wᵀ + b` with `W` stored as `[d_out x d_in]`, plus an optional
/// low-rank path `scale · (x·Aᵀ)·Bᵀ`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub name: String,
    pub d_in: usize,
    pub d_out: usize,
    pub bias: bool,
    pub lora: Option<LoraAttachment>,
}

impl Linear {
    pub fn new(name: impl Into<String>, d_in: usize, d_out: usize, bias: bool) -> Self {
        Self {
            name: name.into(),
            d_in,
            d_out,
            bias,
            lora: None,
        }
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }

    pub fn lora_a_name(&self) -> String {
        format!("{}.lora.A", self.name)
    }

    pub fn lora_b_name(&self) -> String {
        format!("{}.lora.B", self.name)
    }

    pub fn register<R: Rng>(
        &self,
        reg: &mut ParamRegistry<f32>,
        rng: &mut R,
        group: Group,
        std: f64,
    ) -> Result<()> {
        reg.register(
            self.weight_name(),
            normal_tensor(rng, &[self.d_out, self.d_in], std),
            group,
        )?;
        if self.bias {
            reg.register(self.bias_name(), Tensor::zeros(&[self.d_out]), group)?;
        }
        Ok(())
    }

    pub fn forward<F: Scalar>(&self, g: &mut Graph<F>, b: &Bound<'_>, x: Var) -> Result<Var> {
        let mut y = g.matmul_nt(x, b.get(&self.weight_name())?)?;
        if self.bias {
            y = g.add_bias(y, b.get(&self.bias_name())?)?;
        }
        if let Some(lora) = self.lora {
            let xa = g.matmul_nt(x, b.get(&self.lora_a_name())?)?;
            let xab = g.matmul_nt(xa, b.get(&self.lora_b_name())?)?;
            let delta = g.scale(xab, lora.scale);
            y = g.add(y, delta)?;
        }
        Ok(y)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub name: String,
    pub dim: usize,
}

impl LayerNorm {
    pub fn new(name: impl Into<String>, dim: usize) -> Self {
        Self {
            name: name.into(),
            dim,
        }
    }

    pub fn gain_name(&self) -> String {
        format!("{}.gain", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }

    pub fn register(&self, reg: &mut ParamRegistry<f32>, group: Group) -> Result<()> {
        reg.register(self.gain_name(), Tensor::full(&[self.dim], 1.0), group)?;
        reg.register(self.bias_name(), Tensor::zeros(&[self.dim]), group)?;
        Ok(())
    }

    pub fn forward<F: Scalar>(&self, g: &mut Graph<F>, b: &Bound<'_>, x: Var) -> Result<Var> {
        Ok(g.layer_norm(x, b.get(&self.gain_name())?, b.get(&self.bias_name())?, LN_EPS)?)
    }
}

/// Multi-head self-attention with q/k/v/o projections.
#[derive(Debug, Clone, PartialEq)]
pub struct SelfAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl SelfAttention {
    pub fn forward<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        b: &Bound<'_>,
        x: Var,
        segments: &[Segment],
        contexts: &[Option<Segment>],
        causal: bool,
    ) -> Result<Var> {
        let q = self.q.forward(g, b, x)?;
        let k = self.k.forward(g, b, x)?;
        let v = self.v.forward(g, b, x)?;
        let a = g.attention_with_context(q, k, v, segments, contexts, self.heads, causal)?;
        self.o.forward(g, b, a)
    }

    pub fn projections(&self) -> [&Linear; 4] {
        [&self.q, &self.k, &self.v, &self.o]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn forward<F: Scalar>(&self, g: &mut Graph<F>, b: &Bound<'_>, x: Var) -> Result<Var> {
        let h = self.up.forward(g, b, x)?;
        let h = g.gelu(h);
        self.down.forward(g, b, h)
    }
}

/// Group tags for the three parameter families inside a block.
#[derive(Debug, Clone, Copy)]
pub struct BlockGroups {
    pub ln: Group,
    pub attn: Group,
    pub ffn: Group,
}

/// Pre-norm residual block: `x + attn(ln(x))`, then `x + ffn(ln(x))`.
#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub ln_attn: LayerNorm,
    pub attn: SelfAttention,
    pub ln_ffn: LayerNorm,
    pub ffn: FeedForward,
}

impl Block {
    pub fn new(prefix: &str, dim: usize, heads: usize, ffn_dim: usize, bias: bool) -> Self {
        let lin = |n: &str, i, o| Linear::new(format!("{prefix}.{n}"), i, o, bias);
        Self {
            ln_attn: LayerNorm::new(format!("{prefix}.ln_attn"), dim),
            attn: SelfAttention {
                q: lin("attn.q", dim, dim),
                // a key bias shifts every score of a query equally, so softmax
                // ignores it and its gradient is identically zero
                k: Linear::new(format!("{prefix}.attn.k"), dim, dim, false),
                v: lin("attn.v", dim, dim),
                o: lin("attn.o", dim, dim),
                heads,
            },
            ln_ffn: LayerNorm::new(format!("{prefix}.ln_ffn"), dim),
            ffn: FeedForward {
                up: lin("ffn.up", dim, ffn_dim),
                down: lin("ffn.down", ffn_dim, dim),
            },
        }
    }

    /// Fan-in scaled init; residual output projections are further shrunk
    /// by `1/sqrt(2 * depth)`.
    pub fn register<R: Rng>(
        &self,
        reg: &mut ParamRegistry<f32>,
        rng: &mut R,
        groups: BlockGroups,
        depth: usize,
    ) -> Result<()> {
        let fan_in = |l: &Linear| 1.0 / (l.d_in as f64).sqrt();
        let resid = 1.0 / ((2 * depth.max(1)) as f64).sqrt();
        self.ln_attn.register(reg, groups.ln)?;
        for l in [&self.attn.q, &self.attn.k, &self.attn.v] {
            l.register(reg, rng, groups.attn, fan_in(l))?;
        }
        self.attn
            .o
            .register(reg, rng, groups.attn, fan_in(&self.attn.o) * resid)?;
        self.ln_ffn.register(reg, groups.ln)?;
        self.ffn
            .up
            .register(reg, rng, groups.ffn, fan_in(&self.ffn.up))?;
        self.ffn
            .down
            .register(reg, rng, groups.ffn, fan_in(&self.ffn.down) * resid)?;
        Ok(())
    }

    pub fn forward<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        b: &Bound<'_>,
        x: Var,
        segments: &[Segment],
        contexts: &[Option<Segment>],
        causal: bool,
    ) -> Result<Var> {
        let h = self.ln_attn.forward(g, b, x)?;
        let h = self.attn.forward(g, b, h, segments, contexts, causal)?;
        let x = g.add(x, h)?;
        let h = self.ln_ffn.forward(g, b, x)?;
        let h = self.ffn.forward(g, b, h)?;
        Ok(g.add(x, h)?)
    }

    pub fn linears(&self) -> [&Linear; 6] {
        [
            &self.attn.q,
            &self.attn.k,
            &self.attn.v,
            &self.attn.o,
            &self.ffn.up,
            &self.ffn.down,
        ]
    }

    pub fn linears_mut(&mut self) -> [&mut Linear; 6] {
        [
            &mut self.attn.q,
            &mut self.attn.k,
            &mut self.attn.v,
            &mut self.attn.o,
            &mut self.ffn.up,
            &mut self.ffn.down,
        ]
    }
}
