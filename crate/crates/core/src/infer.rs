//! Graph-free incremental decoder pass with cached keys and values.
//!
//! Mirrors [`crate::decoder::TextDecoder::decoder_forward`] numerically but
//! processes new rows against cached attention state, so greedy decoding
//! costs one pass over the sequence instead of one pass per token.

use s2tt_autodiff::{ParamRegistry, Scalar};

use crate::decoder::{TextDecoder, EMBED_POSITIONS, EMBED_TOKENS, OUTPUT_PROJ};
use crate::error::{Error, Result};
use crate::nn::{Block, LayerNorm, Linear, LN_EPS};

const GELU_C: f32 = 0.797_884_6;
const GELU_A: f32 = 0.044_715;

/// Cached keys and values for every decoder layer of one sequence.
#[derive(Debug, Clone, Default)]
pub struct KvCache {
    keys: Vec<Vec<f32>>,
    values: Vec<Vec<f32>>,
    len: usize,
}

impl KvCache {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

fn linear(x: &[f32], n: usize, lin: &Linear, reg: &ParamRegistry<f32>) -> Result<Vec<f32>> {
    let w = reg.tensor(&lin.weight_name())?.data();
    let (di, dout) = (lin.d_in, lin.d_out);
    let mut y = vec![0.0f32; n * dout];
    f32::gemm(n, di, dout, 1.0, x, (di, 1), w, (1, di), 0.0, &mut y, (dout, 1));
    if lin.bias {
        let b = reg.tensor(&lin.bias_name())?.data();
        for row in y.chunks_mut(dout) {
            for (v, bb) in row.iter_mut().zip(b) {
                *v += bb;
            }
        }
    }
    if let Some(att) = lin.lora {
        let a = reg.tensor(&lin.lora_a_name())?.data();
        let b = reg.tensor(&lin.lora_b_name())?.data();
        let r = att.rank;
        let mut xa = vec![0.0f32; n * r];
        f32::gemm(n, di, r, 1.0, x, (di, 1), a, (1, di), 0.0, &mut xa, (r, 1));
        let mut delta = vec![0.0f32; n * dout];
        f32::gemm(n, r, dout, 1.0, &xa, (r, 1), b, (1, r), 0.0, &mut delta, (dout, 1));
        let s = att.scale as f32;
        for (v, d) in y.iter_mut().zip(&delta) {
            *v += d * s;
        }
    }
    Ok(y)
}

fn layer_norm(x: &[f32], h: usize, ln: &LayerNorm, reg: &ParamRegistry<f32>) -> Result<Vec<f32>> {
    let g = reg.tensor(&ln.gain_name())?.data();
    let b = reg.tensor(&ln.bias_name())?.data();
    let inv_h = 1.0 / h as f32;
    let eps = LN_EPS as f32;
    let mut out = vec![0.0f32; x.len()];
    for (row, o) in x.chunks(h).zip(out.chunks_mut(h)) {
        let mu = row.iter().sum::<f32>() * inv_h;
        let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<f32>() * inv_h;
        let rs = 1.0 / (var + eps).sqrt();
        for j in 0..h {
            o[j] = (row[j] - mu) * rs * g[j] + b[j];
        }
    }
    Ok(out)
}

fn gelu(x: &mut [f32]) {
    for v in x {
        let t = (GELU_C * (*v + GELU_A * *v * *v * *v)).tanh();
        *v = 0.5 * *v * (1.0 + t);
    }
}

impl TextDecoder {
    /// Embeds text ids at `positions` (token rows plus position rows).
    pub fn embed_tokens(&self, reg: &ParamRegistry<f32>, ids: &[u32], first_pos: usize) -> Result<Vec<f32>> {
        let h = self.cfg.model_dim;
        let tok = reg.tensor(EMBED_TOKENS)?;
        let mut out = Vec::with_capacity(ids.len() * h);
        for &id in ids {
            if id as usize >= self.cfg.vocab {
                return Err(Error::UnknownToken(id));
            }
            out.extend_from_slice(tok.row(id as usize));
        }
        self.add_positions(reg, &mut out, first_pos)?;
        Ok(out)
    }

    /// Adds positional rows `first_pos..` to already embedded rows.
    pub fn add_positions(&self, reg: &ParamRegistry<f32>, rows: &mut [f32], first_pos: usize) -> Result<()> {
        let h = self.cfg.model_dim;
        let pos = reg.tensor(EMBED_POSITIONS)?;
        let n = rows.len() / h;
        if first_pos + n > self.cfg.max_positions {
            return Err(Error::SequenceTooLong {
                len: first_pos + n,
                max: self.cfg.max_positions,
            });
        }
        for (i, row) in rows.chunks_mut(h).enumerate() {
            for (v, p) in row.iter_mut().zip(pos.row(first_pos + i)) {
                *v += p;
            }
        }
        Ok(())
    }

    fn block_cached(
        &self,
        block: &Block,
        layer: usize,
        reg: &ParamRegistry<f32>,
        cache: &mut KvCache,
        x: &mut [f32],
        n: usize,
    ) -> Result<()> {
        let h = self.cfg.model_dim;
        let heads = self.cfg.heads;
        let d = h / heads;
        let past = cache.len;
        let hn = layer_norm(x, h, &block.ln_attn, reg)?;
        let q = linear(&hn, n, &block.attn.q, reg)?;
        cache.keys[layer].extend(linear(&hn, n, &block.attn.k, reg)?);
        cache.values[layer].extend(linear(&hn, n, &block.attn.v, reg)?);
        let (keys, values) = (&cache.keys[layer], &cache.values[layer]);
        let scale = 1.0 / (d as f32).sqrt();
        let mut ctx = vec![0.0f32; n * h];
        let mut scores = vec![0.0f32; past + n];
        for i in 0..n {
            let live = past + i + 1;
            for head in 0..heads {
                let qi = &q[i * h + head * d..i * h + head * d + d];
                for (j, s) in scores[..live].iter_mut().enumerate() {
                    let kj = &keys[j * h + head * d..j * h + head * d + d];
                    *s = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f32>() * scale;
                }
                let m = scores[..live].iter().copied().fold(f32::NEG_INFINITY, f32::max);
                let mut total = 0.0;
                for s in &mut scores[..live] {
                    *s = (*s - m).exp();
                    total += *s;
                }
                let out = &mut ctx[i * h + head * d..i * h + head * d + d];
                for (j, &p) in scores[..live].iter().enumerate() {
                    let w = p / total;
                    let vj = &values[j * h + head * d..j * h + head * d + d];
                    for (o, v) in out.iter_mut().zip(vj) {
                        *o += w * v;
                    }
                }
            }
        }
        let a = linear(&ctx, n, &block.attn.o, reg)?;
        for (v, d) in x.iter_mut().zip(&a) {
            *v += d;
        }
        let hn = layer_norm(x, h, &block.ln_ffn, reg)?;
        let mut up = linear(&hn, n, &block.ffn.up, reg)?;
        gelu(&mut up);
        let down = linear(&up, n, &block.ffn.down, reg)?;
        for (v, d) in x.iter_mut().zip(&down) {
            *v += d;
        }
        Ok(())
    }

    /// Runs `n` new embedded rows (positions already added) through the
    /// decoder, appending to `cache`. Returns next-token logits `[n x |V|]`.
    pub fn extend_cached(
        &self,
        reg: &ParamRegistry<f32>,
        cache: &mut KvCache,
        rows: &[f32],
    ) -> Result<Vec<f32>> {
        let h = self.cfg.model_dim;
        let n = rows.len() / h;
        if n == 0 || !rows.len().is_multiple_of(h) {
            return Err(Error::Config("extend_cached needs whole rows".into()));
        }
        if cache.keys.is_empty() {
            cache.keys = vec![Vec::new(); self.blocks.len()];
            cache.values = vec![Vec::new(); self.blocks.len()];
        }
        let mut x = rows.to_vec();
        for (layer, block) in self.blocks.iter().enumerate() {
            self.block_cached(block, layer, reg, cache, &mut x, n)?;
        }
        cache.len += n;
        let hid = layer_norm(&x, h, &self.final_ln, reg)?;
        let w = reg.tensor(OUTPUT_PROJ)?.data();
        let v = self.cfg.vocab;
        let mut logits = vec![0.0f32; n * v];
        f32::gemm(n, h, v, 1.0, &hid, (h, 1), w, (v, 1), 0.0, &mut logits, (v, 1));
        Ok(logits)
    }
}
