//! Causal decoder over the interleaved text/speech sequence.

use rand::Rng;
use s2tt_autodiff::{Bound, Graph, Group, ParamRegistry, Scalar, Segment, Tensor, Var};

use crate::corpus::EOS;
use crate::error::{Error, Result};
use crate::nn::{normal_tensor, sinusoidal_table, Block, BlockGroups, LayerNorm};
use crate::taskfmt::TaskSample;

pub const EMBED_TOKENS: &str = "decoder.embed.tokens";
pub const EMBED_POSITIONS: &str = "decoder.embed.positions";
pub const OUTPUT_PROJ: &str = "output.proj";

/// Output projection std is `OUTPUT_INIT / sqrt(h)`, which keeps untrained
/// logits close to uniform.
pub const OUTPUT_INIT: f64 = 0.2;

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderConfig {
    pub layers: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub vocab: usize,
    pub max_positions: usize,
    pub bias: bool,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            layers: 3,
            model_dim: 64,
            heads: 4,
            ffn_dim: 256,
            vocab: 0,
            max_positions: 512,
            bias: true,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || !self.model_dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "decoder.model_dim {} not divisible by decoder.heads {}",
                self.model_dim, self.heads
            )));
        }
        if self.vocab == 0 || self.max_positions == 0 || self.model_dim < 2 || self.ffn_dim == 0 {
            return Err(Error::Config("decoder dimensions must be positive".into()));
        }
        Ok(())
    }
}

/// Where a row of the flattened sequence came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Origin {
    Prefix,
    Speech,
    Suffix,
    Target,
}

/// Packed `X = {Emb(X¹), E_s(F), Emb(X²), Emb(Y')}` for a batch of samples.
#[derive(Debug, Clone)]
pub struct InterleavedInput {
    pub x: Var,
    /// Attention segments; together they tile the rows.
    pub segments: Vec<Segment>,
    /// For each attention segment, an earlier segment it also attends to.
    pub contexts: Vec<Option<Segment>>,
    /// Rows belonging to each sample. With shared prefixes these exclude the
    /// instruction, which lives in a context segment.
    pub samples: Vec<Segment>,
    pub origins: Vec<Origin>,
    /// Rows of `samples[i]` before its first target row.
    pub lead: Vec<usize>,
}

impl InterleavedInput {
    pub fn len(&self) -> usize {
        self.origins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.origins.is_empty()
    }

    /// Loss mask over the flattened rows: true on target positions.
    pub fn loss_mask(&self) -> Vec<bool> {
        self.origins.iter().map(|&o| o == Origin::Target).collect()
    }
}

#[derive(Debug, Clone)]
pub struct TextDecoder {
    pub cfg: DecoderConfig,
    pub blocks: Vec<Block>,
    pub final_ln: LayerNorm,
}

impl TextDecoder {
    pub fn new(cfg: DecoderConfig) -> Result<Self> {
        cfg.validate()?;
        let blocks = (0..cfg.layers)
            .map(|i| {
                Block::new(
                    &format!("decoder.layers.{i}"),
                    cfg.model_dim,
                    cfg.heads,
                    cfg.ffn_dim,
                    cfg.bias,
                )
            })
            .collect();
        Ok(Self {
            final_ln: LayerNorm::new("decoder.final_ln", cfg.model_dim),
            blocks,
            cfg,
        })
    }

    pub fn register<R: Rng>(&self, reg: &mut ParamRegistry<f32>, rng: &mut R) -> Result<()> {
        let h = self.cfg.model_dim;
        reg.register(
            EMBED_TOKENS,
            normal_tensor(rng, &[self.cfg.vocab, h], 1.0),
            Group::DecoderEmbed,
        )?;
        reg.register(
            EMBED_POSITIONS,
            sinusoidal_table(self.cfg.max_positions, h),
            Group::DecoderEmbed,
        )?;
        let groups = BlockGroups {
            ln: Group::DecoderLn,
            attn: Group::DecoderAttn,
            ffn: Group::DecoderFfn,
        };
        for b in &self.blocks {
            b.register(reg, rng, groups, self.cfg.layers)?;
        }
        self.final_ln.register(reg, Group::DecoderLn)?;
        reg.register(
            OUTPUT_PROJ,
            normal_tensor(rng, &[h, self.cfg.vocab], OUTPUT_INIT / (h as f64).sqrt()),
            Group::OutputProj,
        )?;
        Ok(())
    }

    /// Flattens each sample into `[X¹, speech, X², (Y')]` rows and adds
    /// positional embeddings over the flattened length.
    ///
    /// `speech` holds the adapted speech rows of all samples, split by
    /// `speech_segments`. Target rows are included only when `train` is set.
    pub fn assemble_sequence<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        b: &Bound<'_>,
        samples: &[&TaskSample],
        speech: Var,
        speech_segments: &[Segment],
        train: bool,
    ) -> Result<InterleavedInput> {
        self.assemble(g, b, samples, speech, speech_segments, train, false)
    }

    /// Same sequences as [`TextDecoder::assemble_sequence`], but each distinct
    /// instruction prefix is embedded once and attended to as a context by
    /// every sample that uses it. The causal attention pattern, and so every
    /// non-prefix output row, is unchanged.
    pub fn assemble_shared_prefix<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        b: &Bound<'_>,
        samples: &[&TaskSample],
        speech: Var,
        speech_segments: &[Segment],
        train: bool,
    ) -> Result<InterleavedInput> {
        self.assemble(g, b, samples, speech, speech_segments, train, true)
    }

    #[allow(clippy::too_many_arguments)]
    fn assemble<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        b: &Bound<'_>,
        samples: &[&TaskSample],
        speech: Var,
        speech_segments: &[Segment],
        train: bool,
        share: bool,
    ) -> Result<InterleavedInput> {
        if speech_segments.len() != samples.len() {
            return Err(Error::Config(format!(
                "{} speech segments for {} samples",
                speech_segments.len(),
                samples.len()
            )));
        }
        let sdim = g.shape(speech).get(1).copied().unwrap_or(0);
        if sdim != self.cfg.model_dim {
            return Err(Error::Config(format!(
                "speech dim {sdim} does not match decoder model_dim {}",
                self.cfg.model_dim
            )));
        }
        // pieces in row order: Ok(text id range) or Err(speech segment)
        let mut pieces: Vec<std::result::Result<(usize, usize), Segment>> = Vec::new();
        let mut ids: Vec<usize> = Vec::new();
        let mut positions = Vec::new();
        let mut origins = Vec::new();
        let mut segments = Vec::new();
        let mut contexts = Vec::new();
        let text = |ids: &mut Vec<usize>, toks: &[u32], pieces: &mut Vec<_>| {
            pieces.push(Ok((ids.len(), toks.len())));
            ids.extend(toks.iter().map(|&i| i as usize));
        };
        let mut shared: Vec<(&[u32], Segment)> = Vec::new();
        if share {
            for s in samples {
                if s.prefix.is_empty() || shared.iter().any(|(p, _)| *p == &s.prefix[..]) {
                    continue;
                }
                let seg = Segment::new(origins.len(), s.prefix.len());
                shared.push((&s.prefix, seg));
                segments.push(seg);
                contexts.push(None);
                positions.extend(0..s.prefix.len());
                origins.extend(std::iter::repeat_n(Origin::Prefix, s.prefix.len()));
                text(&mut ids, &s.prefix, &mut pieces);
            }
        }
        let mut sample_segs = Vec::with_capacity(samples.len());
        let mut lead = Vec::with_capacity(samples.len());
        for (s, seg) in samples.iter().zip(speech_segments) {
            let target: &[u32] = if train { &s.target } else { &[] };
            let t = s.prefix.len() + seg.len + s.suffix.len() + target.len();
            if t > self.cfg.max_positions {
                return Err(Error::SequenceTooLong {
                    len: t,
                    max: self.cfg.max_positions,
                });
            }
            let ctx = shared.iter().find(|(p, _)| *p == &s.prefix[..]).map(|&(_, c)| c);
            let start = origins.len();
            if ctx.is_none() {
                origins.extend(std::iter::repeat_n(Origin::Prefix, s.prefix.len()));
                text(&mut ids, &s.prefix, &mut pieces);
            }
            origins.extend(std::iter::repeat_n(Origin::Speech, seg.len));
            origins.extend(std::iter::repeat_n(Origin::Suffix, s.suffix.len()));
            origins.extend(std::iter::repeat_n(Origin::Target, target.len()));
            pieces.push(Err(*seg));
            text(&mut ids, &s.suffix, &mut pieces);
            text(&mut ids, target, &mut pieces);
            let own = Segment::new(start, origins.len() - start);
            positions.extend(t - own.len..t);
            segments.push(own);
            contexts.push(ctx);
            sample_segs.push(own);
            lead.push(own.len - target.len());
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= self.cfg.vocab) {
            return Err(Error::UnknownToken(bad as u32));
        }
        let emb = g.gather_rows(b.get(EMBED_TOKENS)?, &ids)?;
        let mut parts = Vec::with_capacity(pieces.len());
        for p in pieces {
            match p {
                Ok((_, 0)) => {}
                Ok((at, n)) => parts.push(g.slice_rows(emb, at, n)?),
                Err(seg) => parts.push(g.slice_rows(speech, seg.start, seg.len)?),
            }
        }
        let x = g.concat_rows(&parts)?;
        let pos = g.gather_rows(b.get(EMBED_POSITIONS)?, &positions)?;
        let x = g.add(x, pos)?;
        Ok(InterleavedInput {
            x,
            segments,
            contexts,
            samples: sample_segs,
            origins,
            lead,
        })
    }

    /// `D(X)`: causal pre-norm blocks and the final layer norm.
    pub fn decoder_forward<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        b: &Bound<'_>,
        input: &InterleavedInput,
    ) -> Result<Var> {
        let mut x = input.x;
        for block in &self.blocks {
            x = block.forward(g, b, x, &input.segments, &input.contexts, true)?;
        }
        self.final_ln.forward(g, b, x)
    }
}

/// `O = Wᵀ D(X)` laid out row-wise: `[T x h] · [h x |V|]`.
pub fn output_logits<F: Scalar>(g: &mut Graph<F>, hidden: Var, w: Var) -> Result<Var> {
    Ok(g.matmul(hidden, w)?)
}

/// Row targets and weights for the shifted next-token loss: row `lead-1+i`
/// predicts `y'_i`. Each sample's mean NLL is averaged over the batch.
pub fn shifted_targets(input: &InterleavedInput, samples: &[&TaskSample]) -> Result<(Vec<usize>, Vec<f64>)> {
    let rows = input.len();
    let mut targets = vec![0usize; rows];
    let mut weights = vec![0.0f64; rows];
    let per_sample = 1.0 / samples.len() as f64;
    for ((s, seg), &lead) in samples.iter().zip(&input.samples).zip(&input.lead) {
        if s.target.is_empty() {
            return Err(Error::Tensor(s2tt_autodiff::TensorError::EmptyLoss));
        }
        if lead == 0 || seg.len != lead + s.target.len() {
            return Err(Error::Config("loss requires training-mode assembly".into()));
        }
        let w = per_sample / s.target.len() as f64;
        for (i, &y) in s.target.iter().enumerate() {
            let r = seg.start + lead - 1 + i;
            targets[r] = y as usize;
            weights[r] = w;
        }
    }
    Ok((targets, weights))
}

/// `L(S, Y') = −(1/M') Σ log P(y'_i | ...)`, averaged over the batch.
pub fn s2tt_loss<F: Scalar>(
    g: &mut Graph<F>,
    logits: Var,
    input: &InterleavedInput,
    samples: &[&TaskSample],
) -> Result<Var> {
    let (targets, weights) = shifted_targets(input, samples)?;
    Ok(g.weighted_cross_entropy(logits, &targets, &weights)?)
}

/// Per-sample mean NLL computed from logit values.
pub fn per_sample_nll<F: Scalar>(
    logits: &Tensor<F>,
    input: &InterleavedInput,
    samples: &[&TaskSample],
) -> Vec<f64> {
    samples
        .iter()
        .zip(&input.samples)
        .zip(&input.lead)
        .map(|((s, seg), &lead)| {
            let total: f64 = s
                .target
                .iter()
                .enumerate()
                .map(|(i, &y)| {
                    let row: Vec<f64> = logits
                        .row(seg.start + lead - 1 + i)
                        .iter()
                        .map(|v| v.to_f64_lossy())
                        .collect();
                    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
                    lse - row[y as usize]
                })
                .sum();
            total / s.target.len().max(1) as f64
        })
        .collect()
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax_lowest(values: &[f32]) -> u32 {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best as u32
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Decoded {
    /// Generated ids without the terminating EOS.
    pub tokens: Vec<u32>,
    pub terminated: bool,
}

/// Greedy search for `n` sequences at once. `step` receives the tokens
/// generated so far for each still-active sequence (with its index) and
/// returns next-token logits for each of them, in the same order.
pub fn greedy_loop<S>(n: usize, max_len: usize, mut step: S) -> Result<Vec<Decoded>>
where
    S: FnMut(&[(usize, &[u32])]) -> Result<Vec<Vec<f32>>>,
{
    let mut out: Vec<Decoded> = (0..n)
        .map(|_| Decoded {
            tokens: Vec::new(),
            terminated: false,
        })
        .collect();
    let mut active: Vec<usize> = (0..n).collect();
    for _ in 0..max_len {
        if active.is_empty() {
            break;
        }
        let logits = {
            let view: Vec<(usize, &[u32])> =
                active.iter().map(|&i| (i, out[i].tokens.as_slice())).collect();
            step(&view)?
        };
        if logits.len() != active.len() {
            return Err(Error::Config("step returned wrong number of rows".into()));
        }
        let mut still = Vec::with_capacity(active.len());
        for (&i, row) in active.iter().zip(&logits) {
            let next = argmax_lowest(row);
            if next == EOS {
                out[i].terminated = true;
            } else {
                out[i].tokens.push(next);
                still.push(i);
            }
        }
        active = still;
    }
    Ok(out)
}
