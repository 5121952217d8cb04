//! Full speech-to-text model: encoder, adaptor and causal decoder.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use s2tt_autodiff::{Bound, Graph, ParamRegistry, Scalar, Segment, Tensor, Var};

use crate::decoder::{
    output_logits, s2tt_loss, Decoded, DecoderConfig, InterleavedInput, TextDecoder, OUTPUT_PROJ,
};
use crate::encoder::{EncoderConfig, SpeechEncoder};
use crate::error::{Error, Result};
use crate::infer::KvCache;
use crate::nn::Linear;
use crate::taskfmt::TaskSample;

/// Prompts decoded together in one packed graph.
const DECODE_CHUNK: usize = 32;

#[derive(Debug, Clone)]
pub struct S2ttModel {
    pub encoder: SpeechEncoder,
    pub decoder: TextDecoder,
}

pub struct Forward {
    pub logits: Var,
    pub input: InterleavedInput,
}

/// Stacks the frame matrices of `samples` into one `[N x d_f]` tensor.
pub fn pack_frames<F: Scalar>(samples: &[&TaskSample]) -> Result<(Tensor<F>, Vec<Segment>)> {
    let dim = samples
        .first()
        .map(|s| s.frames.dim())
        .ok_or_else(|| Error::Config("empty batch".into()))?;
    let mut data = Vec::new();
    let mut segs = Vec::with_capacity(samples.len());
    for s in samples {
        if s.frames.dim() != dim {
            return Err(Error::Config("frame dims differ within batch".into()));
        }
        segs.push(Segment::new(data.len() / dim, s.frames.len()));
        data.extend(s.frames.tensor().data().iter().map(|&v| F::from_f64_lossy(v as f64)));
    }
    let rows = data.len() / dim;
    Ok((Tensor::new(vec![rows, dim], data)?, segs))
}

impl S2ttModel {
    pub fn new(enc: EncoderConfig, dec: DecoderConfig) -> Result<Self> {
        if enc.decoder_dim != dec.model_dim {
            return Err(Error::Config(format!(
                "adaptor width {} must equal decoder.model_dim {}",
                enc.decoder_dim, dec.model_dim
            )));
        }
        Ok(Self {
            encoder: SpeechEncoder::new(enc)?,
            decoder: TextDecoder::new(dec)?,
        })
    }

    /// Fresh parameters drawn from `seed`; everything starts trainable.
    pub fn init_registry(&self, seed: u64) -> Result<ParamRegistry<f32>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut reg = ParamRegistry::new();
        self.encoder.register(&mut reg, &mut rng)?;
        self.decoder.register(&mut reg, &mut rng)?;
        Ok(reg)
    }

    pub fn decoder_linears(&self) -> impl Iterator<Item = &Linear> {
        self.decoder.blocks.iter().flat_map(|b| b.linears())
    }

    pub fn decoder_linears_mut(&mut self) -> impl Iterator<Item = &mut Linear> {
        self.decoder.blocks.iter_mut().flat_map(|b| b.linears_mut())
    }

    /// Encoder plus adaptor for a packed batch: `(speech rows, segments)`.
    pub fn speech<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        b: &Bound<'_>,
        samples: &[&TaskSample],
    ) -> Result<(Var, Vec<Segment>)> {
        let (frames, segs) = pack_frames::<F>(samples)?;
        let frames = g.constant(frames);
        self.encoder.forward(g, b, frames, &segs)
    }

    /// Decoder pass given already-adapted speech rows.
    pub fn forward_with_speech<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        b: &Bound<'_>,
        samples: &[&TaskSample],
        speech: Var,
        speech_segments: &[Segment],
        train: bool,
    ) -> Result<Forward> {
        let input = self
            .decoder
            .assemble_sequence(g, b, samples, speech, speech_segments, train)?;
        let hidden = self.decoder.decoder_forward(g, b, &input)?;
        let logits = output_logits(g, hidden, b.get(OUTPUT_PROJ)?)?;
        Ok(Forward { logits, input })
    }

    pub fn forward<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        b: &Bound<'_>,
        samples: &[&TaskSample],
        train: bool,
    ) -> Result<Forward> {
        let (speech, segs) = self.speech(g, b, samples)?;
        self.forward_with_speech(g, b, samples, speech, &segs, train)
    }

    /// Batch loss: mean over samples of each sample's mean target NLL.
    /// Instruction prefixes shared by several samples are computed once.
    pub fn loss<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        b: &Bound<'_>,
        samples: &[&TaskSample],
    ) -> Result<(Var, Forward)> {
        let (speech, segs) = self.speech(g, b, samples)?;
        let input = self
            .decoder
            .assemble_shared_prefix(g, b, samples, speech, &segs, true)?;
        let hidden = self.decoder.decoder_forward(g, b, &input)?;
        let logits = output_logits(g, hidden, b.get(OUTPUT_PROJ)?)?;
        let fwd = Forward { logits, input };
        let loss = s2tt_loss(g, fwd.logits, &fwd.input, samples)?;
        Ok((loss, fwd))
    }

    /// Greedy decoding of inference prompts with cached attention state.
    pub fn greedy_decode(
        &self,
        reg: &ParamRegistry<f32>,
        prompts: &[TaskSample],
        max_len: usize,
    ) -> Result<Vec<Decoded>> {
        let h = self.decoder.cfg.model_dim;
        let vocab = self.decoder.cfg.vocab;
        let mut out = Vec::with_capacity(prompts.len());
        for chunk in prompts.chunks(DECODE_CHUNK) {
            let (speech, segs) = self.speech_values(reg, chunk)?;
            let mut caches = vec![KvCache::default(); chunk.len()];
            let decoded = crate::decoder::greedy_loop(chunk.len(), max_len, |active| {
                active
                    .iter()
                    .map(|&(i, generated)| {
                        let rows = match generated.last() {
                            Some(&tok) => self.decoder.embed_tokens(reg, &[tok], caches[i].len())?,
                            None => {
                                let p = &chunk[i];
                                let seg = segs[i];
                                let mut rows = self.decoder.embed_tokens(reg, &p.prefix, 0)?;
                                let mut sp = speech.data()[seg.start * h..seg.end() * h].to_vec();
                                self.decoder.add_positions(reg, &mut sp, p.prefix.len())?;
                                rows.extend(sp);
                                rows.extend(self.decoder.embed_tokens(
                                    reg,
                                    &p.suffix,
                                    p.prefix.len() + seg.len,
                                )?);
                                rows
                            }
                        };
                        let logits = self.decoder.extend_cached(reg, &mut caches[i], &rows)?;
                        Ok(logits[logits.len() - vocab..].to_vec())
                    })
                    .collect()
            })?;
            out.extend(decoded);
        }
        Ok(out)
    }

    /// Adapted speech rows for `samples`, computed without gradient tracking.
    pub fn speech_values(
        &self,
        reg: &ParamRegistry<f32>,
        samples: &[TaskSample],
    ) -> Result<(Tensor<f32>, Vec<Segment>)> {
        let refs: Vec<&TaskSample> = samples.iter().collect();
        let mut g = Graph::<f32>::new();
        let b = reg.bind_frozen(&mut g);
        let (s, segs) = self.speech(&mut g, &b, &refs)?;
        Ok((g.value(s).clone(), segs))
    }

    /// Greedy decoding that re-runs the full graph forward for every token.
    /// Slow; kept as the reference for [`S2ttModel::greedy_decode`].
    pub fn greedy_decode_uncached(
        &self,
        reg: &ParamRegistry<f32>,
        prompts: &[TaskSample],
        max_len: usize,
    ) -> Result<Vec<Decoded>> {
        let mut out = Vec::with_capacity(prompts.len());
        for chunk in prompts.chunks(DECODE_CHUNK) {
            let (speech, segs) = self.speech_values(reg, chunk)?;
            let decoded = crate::decoder::greedy_loop(chunk.len(), max_len, |active| {
                let mut g = Graph::<f32>::new();
                let b = reg.bind_frozen(&mut g);
                let sp = g.constant(speech.clone());
                let mut parts = Vec::with_capacity(active.len());
                let mut sub_segs = Vec::with_capacity(active.len());
                let mut samples = Vec::with_capacity(active.len());
                for &(i, generated) in active {
                    parts.push(g.slice_rows(sp, segs[i].start, segs[i].len)?);
                    sub_segs.push(Segment::new(
                        sub_segs.last().map_or(0, |s: &Segment| s.end()),
                        segs[i].len,
                    ));
                    let mut s = chunk[i].clone();
                    s.target = generated.to_vec();
                    samples.push(s);
                }
                let sp = g.concat_rows(&parts)?;
                let refs: Vec<&TaskSample> = samples.iter().collect();
                let fwd = self.forward_with_speech(&mut g, &b, &refs, sp, &sub_segs, true)?;
                let logits = g.value(fwd.logits);
                Ok(fwd
                    .input
                    .samples
                    .iter()
                    .map(|s| logits.row(s.end() - 1).to_vec())
                    .collect())
            })?;
            out.extend(decoded);
        }
        Ok(out)
    }
}
