//! Speech encoder over synthetic frames and the convolutional length adaptor.

use rand::Rng;
use s2tt_autodiff::{Bound, Graph, Group, ParamRegistry, Scalar, Segment, Tensor, Var};

use crate::error::{Error, Result};
use crate::nn::{normal_tensor, sinusoidal_table, Block, BlockGroups, LayerNorm, Linear};

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    pub layers: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub input_dim: usize,
    pub adaptor_k: usize,
    pub decoder_dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            model_dim: 64,
            heads: 4,
            ffn_dim: 256,
            input_dim: 16,
            adaptor_k: 2,
            decoder_dim: 64,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || !self.model_dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "encoder.model_dim {} not divisible by encoder.heads {}",
                self.model_dim, self.heads
            )));
        }
        if self.adaptor_k == 0 {
            return Err(Error::Config("adaptor.k must be at least 1".into()));
        }
        if self.model_dim < 2 || self.decoder_dim < 2 || self.input_dim == 0 || self.ffn_dim == 0 {
            return Err(Error::Config("encoder dimensions too small".into()));
        }
        Ok(())
    }
}

pub const ADAPTOR_WEIGHT: &str = "adaptor.conv.weight";
pub const ADAPTOR_BIAS: &str = "adaptor.conv.bias";

#[derive(Debug, Clone)]
pub struct SpeechEncoder {
    pub cfg: EncoderConfig,
    pub input: Linear,
    pub blocks: Vec<Block>,
    pub final_ln: LayerNorm,
}

impl SpeechEncoder {
    pub fn new(cfg: EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let blocks = (0..cfg.layers)
            .map(|i| {
                Block::new(
                    &format!("encoder.layers.{i}"),
                    cfg.model_dim,
                    cfg.heads,
                    cfg.ffn_dim,
                    true,
                )
            })
            .collect();
        Ok(Self {
            input: Linear::new("encoder.input", cfg.input_dim, cfg.model_dim, true),
            final_ln: LayerNorm::new("encoder.final_ln", cfg.model_dim),
            blocks,
            cfg,
        })
    }

    pub fn register<R: Rng>(&self, reg: &mut ParamRegistry<f32>, rng: &mut R) -> Result<()> {
        let groups = BlockGroups {
            ln: Group::Encoder,
            attn: Group::Encoder,
            ffn: Group::Encoder,
        };
        self.input
            .register(reg, rng, Group::Encoder, 1.0 / (self.cfg.input_dim as f64).sqrt())?;
        for b in &self.blocks {
            b.register(reg, rng, groups, self.cfg.layers)?;
        }
        self.final_ln.register(reg, Group::Encoder)?;
        let (k, he, h) = (self.cfg.adaptor_k, self.cfg.model_dim, self.cfg.decoder_dim);
        reg.register(
            ADAPTOR_WEIGHT,
            normal_tensor(rng, &[k, he, h], 1.0 / ((k * he) as f64).sqrt()),
            Group::Adaptor,
        )?;
        reg.register(ADAPTOR_BIAS, Tensor::zeros(&[h]), Group::Adaptor)?;
        Ok(())
    }

    /// `E_s(F)` for a packed batch of frame sequences: `[N x d_f] -> [N x h_e]`.
    pub fn encode_frames<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        b: &Bound<'_>,
        frames: Var,
        segments: &[Segment],
    ) -> Result<Var> {
        let shape = g.shape(frames).to_vec();
        if shape.len() != 2 || shape[1] != self.cfg.input_dim {
            return Err(Error::Config(format!(
                "frame dim {:?} does not match encoder input_dim {}",
                shape, self.cfg.input_dim
            )));
        }
        let x = self.input.forward(g, b, frames)?;
        let pe = g.constant(packed_sinusoids(segments, self.cfg.model_dim));
        let mut x = g.add(x, pe)?;
        let contexts = vec![None; segments.len()];
        for block in &self.blocks {
            x = block.forward(g, b, x, segments, &contexts, false)?;
        }
        self.final_ln.forward(g, b, x)
    }

    /// Conv with filter = stride = k into the decoder width, then GELU.
    pub fn length_adapt<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        b: &Bound<'_>,
        hidden: Var,
        segments: &[Segment],
    ) -> Result<(Var, Vec<Segment>)> {
        let (y, segs) = g.conv1d_packed(
            hidden,
            segments,
            b.get(ADAPTOR_WEIGHT)?,
            b.get(ADAPTOR_BIAS)?,
            self.cfg.adaptor_k,
        )?;
        Ok((g.gelu(y), segs))
    }

    /// Encoder followed by the adaptor.
    pub fn forward<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        b: &Bound<'_>,
        frames: Var,
        segments: &[Segment],
    ) -> Result<(Var, Vec<Segment>)> {
        let h = self.encode_frames(g, b, frames, segments)?;
        self.length_adapt(g, b, h, segments)
    }
}

/// Sinusoidal positions restarting at 0 in every segment.
fn packed_sinusoids<F: Scalar>(segments: &[Segment], dim: usize) -> Tensor<F> {
    let longest = segments.iter().map(|s| s.len).max().unwrap_or(1);
    let table = sinusoidal_table::<F>(longest, dim);
    let mut data = Vec::new();
    for s in segments {
        data.extend_from_slice(&table.data()[..s.len * dim]);
    }
    let rows = data.len() / dim;
    Tensor::new(vec![rows.max(1), dim], data).expect("segments are non-empty")
}

/// Adapted length for `n` frames.
pub fn adapted_len(n: usize, k: usize) -> usize {
    n.div_ceil(k)
}
