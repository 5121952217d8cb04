//! Deterministic synthetic parallel corpus.
//!
//! Source sentences are random words over a small alphabet, targets come
//! from a bijective rewrite rule, and "speech" is a matrix of noisy
//! per-character prototype frames standing in for filterbank features.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use s2tt_autodiff::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const SEP: u32 = 3;
pub const NUM_SPECIALS: u32 = 4;

/// Character-level tokenizer. Specials occupy ids `0..4`, symbols follow in
/// the order given.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tokenizer {
    symbols: Vec<char>,
    lookup: HashMap<char, u32>,
}

impl Tokenizer {
    pub fn new(symbols: &[char]) -> Result<Self> {
        if symbols.is_empty() {
            return Err(Error::Config("alphabet is empty".into()));
        }
        let mut lookup = HashMap::new();
        for (i, &c) in symbols.iter().enumerate() {
            if lookup.insert(c, NUM_SPECIALS + i as u32).is_some() {
                return Err(Error::Config(format!("duplicate alphabet symbol {c:?}")));
            }
        }
        Ok(Self {
            symbols: symbols.to_vec(),
            lookup,
        })
    }

    /// Appends symbols not already present, keeping existing ids stable.
    pub fn extended(&self, extra: impl IntoIterator<Item = char>) -> Self {
        let mut out = self.clone();
        for c in extra {
            if !out.lookup.contains_key(&c) {
                out.lookup.insert(c, NUM_SPECIALS + out.symbols.len() as u32);
                out.symbols.push(c);
            }
        }
        out
    }

    pub fn vocab_size(&self) -> usize {
        NUM_SPECIALS as usize + self.symbols.len()
    }

    pub fn symbols(&self) -> &[char] {
        &self.symbols
    }

    pub fn encode(&self, text: &str) -> Result<Vec<u32>> {
        text.chars()
            .map(|c| self.lookup.get(&c).copied().ok_or(Error::UnknownSymbol(c)))
            .collect()
    }

    /// Inverse of [`Tokenizer::encode`]; special ids are errors.
    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        ids.iter()
            .map(|&id| {
                id.checked_sub(NUM_SPECIALS)
                    .and_then(|i| self.symbols.get(i as usize).copied())
                    .ok_or(Error::UnknownToken(id))
            })
            .collect()
    }

    /// Like [`Tokenizer::decode`] but drops ids without a surface form.
    pub fn decode_lossy(&self, ids: &[u32]) -> String {
        ids.iter()
            .filter_map(|&id| {
                id.checked_sub(NUM_SPECIALS)
                    .and_then(|i| self.symbols.get(i as usize).copied())
            })
            .collect()
    }
}

/// Bijective source-to-target rewrite.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TranslationRule {
    /// Shift every letter `k` places along the letter alphabet.
    Rot(i32),
    /// Reverse the letters of each space-separated word.
    WordReverse,
    /// `Rot(k)` applied after `WordReverse`.
    RotReverse(i32),
}

impl TranslationRule {
    pub fn apply(&self, text: &str, letters: &[char]) -> String {
        match *self {
            Self::Rot(k) => rot(text, k, letters),
            Self::WordReverse => reverse_words(text),
            Self::RotReverse(k) => rot(&reverse_words(text), k, letters),
        }
    }

    /// Rule undoing this one.
    pub fn inverse(&self) -> Vec<TranslationRule> {
        match *self {
            Self::Rot(k) => vec![Self::Rot(-k)],
            Self::WordReverse => vec![Self::WordReverse],
            Self::RotReverse(k) => vec![Self::Rot(-k), Self::WordReverse],
        }
    }
}

impl fmt::Display for TranslationRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Rot(k) => write!(f, "rot:{k}"),
            Self::WordReverse => write!(f, "reverse"),
            Self::RotReverse(k) => write!(f, "rot:{k}+reverse"),
        }
    }
}

impl FromStr for TranslationRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parse_k = |k: &str| {
            k.parse::<i32>()
                .map_err(|_| Error::Config(format!("unknown translation rule `{s}`")))
        };
        if s == "reverse" {
            Ok(Self::WordReverse)
        } else if let Some(k) = s.strip_prefix("rot:").and_then(|r| r.strip_suffix("+reverse")) {
            Ok(Self::RotReverse(parse_k(k)?))
        } else if let Some(k) = s.strip_prefix("rot:") {
            Ok(Self::Rot(parse_k(k)?))
        } else {
            Err(Error::Config(format!("unknown translation rule `{s}`")))
        }
    }
}

fn rot(text: &str, k: i32, letters: &[char]) -> String {
    let n = letters.len() as i32;
    text.chars()
        .map(|c| match letters.iter().position(|&l| l == c) {
            Some(i) => letters[(i as i32 + k).rem_euclid(n) as usize],
            None => c,
        })
        .collect()
}

fn reverse_words(text: &str) -> String {
    text.split(' ')
        .map(|w| w.chars().rev().collect::<String>())
        .collect::<Vec<_>>()
        .join(" ")
}

/// `target = rule(source)` over the corpus letters.
pub fn make_parallel_pair(source_text: &str, rule: TranslationRule, spec: &CorpusSpec) -> String {
    rule.apply(source_text, &spec.letters())
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusSpec {
    pub alphabet: Vec<char>,
    pub frames_per_token: usize,
    pub feature_dim: usize,
    pub noise_sigma: f64,
    pub rule: TranslationRule,
    pub seed: u64,
}

pub const DEFAULT_ALPHABET: &str = "abcdefghijklmnop ";
pub const MIN_TEXT_LEN: usize = 3;
pub const MAX_TEXT_LEN: usize = 12;
const SPACE_PROB: f64 = 0.3;

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            alphabet: DEFAULT_ALPHABET.chars().collect(),
            frames_per_token: 4,
            feature_dim: 16,
            noise_sigma: 0.1,
            rule: TranslationRule::RotReverse(3),
            seed: 0,
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        if self.frames_per_token < 1 {
            return Err(Error::Config("corpus.frames_per_token must be >= 1".into()));
        }
        if self.feature_dim < 2 {
            return Err(Error::Config("corpus.feature_dim must be >= 2".into()));
        }
        if self.noise_sigma.is_nan() || self.noise_sigma < 0.0 {
            return Err(Error::Config("corpus.noise_sigma must be >= 0".into()));
        }
        if self.letters().is_empty() {
            return Err(Error::Config("alphabet needs at least one non-space symbol".into()));
        }
        Tokenizer::new(&self.alphabet).map(|_| ())
    }

    /// Alphabet without the word separator.
    pub fn letters(&self) -> Vec<char> {
        self.alphabet.iter().copied().filter(|&c| c != ' ').collect()
    }

    fn has_space(&self) -> bool {
        self.alphabet.contains(&' ')
    }
}

pub fn build_tokenizer(spec: &CorpusSpec) -> Result<Tokenizer> {
    Tokenizer::new(&spec.alphabet)
}

/// `n x d_f` matrix of synthetic feature frames.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameSequence(Tensor<f32>);

impl FrameSequence {
    pub fn new(t: Tensor<f32>) -> Self {
        Self(t)
    }

    pub fn len(&self) -> usize {
        self.0.rows()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dim(&self) -> usize {
        self.0.cols()
    }

    pub fn tensor(&self) -> &Tensor<f32> {
        &self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub source_text: String,
    pub target_text: String,
    pub frames: FrameSequence,
}

/// Frame generator holding the per-symbol prototypes drawn from the corpus seed.
#[derive(Debug, Clone)]
pub struct FrameSynth {
    spec: CorpusSpec,
    prototypes: HashMap<char, Vec<f32>>,
}

impl FrameSynth {
    pub fn new(spec: &CorpusSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(spec.seed, 0x5eed_f4a3));
        let prototypes = spec
            .alphabet
            .iter()
            .map(|&c| {
                let v = (0..spec.feature_dim)
                    .map(|_| rng.sample::<f64, _>(StandardNormal) as f32)
                    .collect();
                (c, v)
            })
            .collect();
        Ok(Self {
            spec: spec.clone(),
            prototypes,
        })
    }

    pub fn prototype(&self, c: char) -> Option<&[f32]> {
        self.prototypes.get(&c).map(Vec::as_slice)
    }

    /// `frames_per_token` rows per character: prototype plus N(0, sigma²) noise.
    pub fn synth(&self, text: &str, seed: u64) -> Result<FrameSequence> {
        if text.is_empty() {
            return Err(Error::Config("cannot synthesize frames for empty text".into()));
        }
        let r = self.spec.frames_per_token;
        let d = self.spec.feature_dim;
        let sigma = self.spec.noise_sigma;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut data = Vec::with_capacity(text.chars().count() * r * d);
        for c in text.chars() {
            let proto = self.prototype(c).ok_or(Error::UnknownSymbol(c))?;
            for _ in 0..r {
                for &p in proto {
                    let noise = if sigma > 0.0 {
                        sigma * rng.sample::<f64, _>(StandardNormal)
                    } else {
                        0.0
                    };
                    data.push(p + noise as f32);
                }
            }
        }
        let n = data.len() / d;
        Ok(FrameSequence(Tensor::new(vec![n, d], data)?))
    }

    /// Recovers text by averaging each character's frames and picking the
    /// closest prototype. Used to confirm the frame mapping is invertible.
    pub fn nearest_prototype_transcript(&self, frames: &FrameSequence) -> String {
        let r = self.spec.frames_per_token;
        let d = frames.dim();
        let t = frames.tensor();
        (0..frames.len() / r)
            .map(|i| {
                let mut mean = vec![0f32; d];
                for row in i * r..(i + 1) * r {
                    for (m, &v) in mean.iter_mut().zip(t.row(row)) {
                        *m += v / r as f32;
                    }
                }
                let mut best = (f32::INFINITY, ' ');
                for &c in &self.spec.alphabet {
                    let p = &self.prototypes[&c];
                    let dist: f32 = p.iter().zip(&mean).map(|(a, b)| (a - b) * (a - b)).sum();
                    if dist < best.0 {
                        best = (dist, c);
                    }
                }
                best.1
            })
            .collect()
    }
}

pub fn synth_frames(text: &str, spec: &CorpusSpec, seed: u64) -> Result<FrameSequence> {
    FrameSynth::new(spec)?.synth(text, seed)
}

/// SplitMix64-style combination of two seeds.
pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusSplits {
    pub train: Vec<Utterance>,
    pub dev: Vec<Utterance>,
    pub test: Vec<Utterance>,
}

impl CorpusSplits {
    pub fn split(&self, name: &str) -> Result<&[Utterance]> {
        match name {
            "train" => Ok(&self.train),
            "dev" => Ok(&self.dev),
            "test" => Ok(&self.test),
            other => Err(Error::Config(format!("unknown split `{other}`"))),
        }
    }
}

fn sample_text(rng: &mut ChaCha8Rng, letters: &[char], allow_space: bool) -> String {
    let n = rng.random_range(MIN_TEXT_LEN..=MAX_TEXT_LEN);
    let mut out = String::with_capacity(n);
    let mut prev_space = true;
    for i in 0..n {
        let interior = i > 0 && i + 1 < n;
        if allow_space && interior && !prev_space && rng.random_bool(SPACE_PROB) {
            out.push(' ');
            prev_space = true;
        } else {
            out.push(letters[rng.random_range(0..letters.len())]);
            prev_space = false;
        }
    }
    out
}

/// Draws `size` distinct source sentences and splits them 90/5/5.
pub fn sample_corpus(spec: &CorpusSpec, size: usize, split_seed: u64) -> Result<CorpusSplits> {
    if size < 10 {
        return Err(Error::Config(format!("corpus size must be >= 10, got {size}")));
    }
    let synth = FrameSynth::new(spec)?;
    let letters = spec.letters();
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(split_seed, 0xc0_7905));
    let mut seen = HashSet::new();
    let mut sources = Vec::with_capacity(size);
    while sources.len() < size {
        let s = sample_text(&mut rng, &letters, spec.has_space());
        if seen.insert(s.clone()) {
            sources.push(s);
        }
    }
    let utterances = sources
        .into_iter()
        .enumerate()
        .map(|(i, source_text)| {
            let target_text = make_parallel_pair(&source_text, spec.rule, spec);
            let seed = mix_seed(mix_seed(spec.seed, split_seed), i as u64);
            let frames = synth.synth(&source_text, seed)?;
            Ok(Utterance {
                source_text,
                target_text,
                frames,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let held_out = (size * 5 / 100).max(1);
    let train_len = size - 2 * held_out;
    let mut it = utterances.into_iter();
    let train = it.by_ref().take(train_len).collect();
    let dev = it.by_ref().take(held_out).collect();
    let test = it.collect();
    Ok(CorpusSplits { train, dev, test })
}

/// One exported utterance; field order is the on-disk order.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct UtteranceRecord {
    pub source_text: String,
    pub target_text: String,
    /// Base64 of the little-endian f32 frame matrix, row-major.
    pub frames: String,
    pub shape: [usize; 2],
}

impl From<&Utterance> for UtteranceRecord {
    fn from(u: &Utterance) -> Self {
        let t = u.frames.tensor();
        let bytes: Vec<u8> = t.data().iter().flat_map(|v| v.to_le_bytes()).collect();
        Self {
            source_text: u.source_text.clone(),
            target_text: u.target_text.clone(),
            frames: B64.encode(bytes),
            shape: [t.rows(), t.cols()],
        }
    }
}

impl TryFrom<UtteranceRecord> for Utterance {
    type Error = Error;

    fn try_from(r: UtteranceRecord) -> Result<Self> {
        let bytes = B64
            .decode(r.frames.as_bytes())
            .map_err(|e| Error::Config(format!("bad frame payload: {e}")))?;
        if bytes.len() != r.shape[0] * r.shape[1] * 4 {
            return Err(Error::Config(format!(
                "frame payload has {} bytes, shape {:?} needs {}",
                bytes.len(),
                r.shape,
                r.shape[0] * r.shape[1] * 4
            )));
        }
        let data = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        Ok(Utterance {
            source_text: r.source_text,
            target_text: r.target_text,
            frames: FrameSequence(Tensor::new(r.shape.to_vec(), data)?),
        })
    }
}

/// Writes one JSON record per line.
pub fn export_utterances<W: Write>(mut w: W, utterances: &[Utterance]) -> Result<()> {
    for u in utterances {
        let line = serde_json::to_string(&UtteranceRecord::from(u))
            .map_err(|e| Error::Config(format!("serialize utterance: {e}")))?;
        writeln!(w, "{line}")?;
    }
    Ok(())
}

pub fn import_utterances<R: BufRead>(r: R) -> Result<Vec<Utterance>> {
    r.lines()
        .filter(|l| !matches!(l, Ok(s) if s.trim().is_empty()))
        .map(|line| {
            let rec: UtteranceRecord = serde_json::from_str(&line?)
                .map_err(|e| Error::Config(format!("bad utterance record: {e}")))?;
            Utterance::try_from(rec)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenizer_ids_and_round_trip() {
        let alpha: Vec<char> = "abcdefghijklmnop".chars().collect();
        let tok = Tokenizer::new(&alpha).unwrap();
        assert_eq!(tok.vocab_size(), 20);
        assert_eq!(tok.encode("ab").unwrap(), vec![4, 5]);
        assert_eq!(tok.decode(&[4, 5]).unwrap(), "ab");
        assert!(matches!(tok.encode("az"), Err(Error::UnknownSymbol('z'))));
        assert!(tok.decode(&[EOS]).is_err());
        assert!(Tokenizer::new(&['a', 'b', 'a']).is_err());
    }

    #[test]
    fn extension_keeps_existing_ids() {
        let tok = Tokenizer::new(&['a', 'b']).unwrap();
        let ext = tok.extended(":ab T".chars());
        assert_eq!(ext.encode("ab").unwrap(), vec![4, 5]);
        assert_eq!(ext.vocab_size(), 4 + 5);
    }

    #[test]
    fn rules() {
        let spec = CorpusSpec::default();
        assert_eq!(make_parallel_pair("abc", TranslationRule::Rot(3), &spec), "def");
        assert_eq!(make_parallel_pair("ab cd", TranslationRule::WordReverse, &spec), "ba dc");
        assert_eq!(make_parallel_pair("nop", TranslationRule::Rot(3), &spec), "abc");
        let there = make_parallel_pair("hello pop", TranslationRule::Rot(3), &spec);
        let back = make_parallel_pair(&there, TranslationRule::Rot(-3), &spec);
        assert_eq!(back, "hello pop");
        assert_eq!(make_parallel_pair("ab cd", TranslationRule::RotReverse(3), &spec), "ed gf");
        assert!("rot:x".parse::<TranslationRule>().is_err());
        assert!("shuffle".parse::<TranslationRule>().is_err());
        for r in ["rot:3", "reverse", "rot:-2+reverse"] {
            assert_eq!(r.parse::<TranslationRule>().unwrap().to_string(), r);
        }
    }

    #[test]
    fn frame_lengths_and_zero_noise() {
        let spec = CorpusSpec {
            noise_sigma: 0.0,
            ..CorpusSpec::default()
        };
        let f = synth_frames("abc", &spec, 9).unwrap();
        assert_eq!((f.len(), f.dim()), (12, 16));
        let t = f.tensor();
        for i in 1..4 {
            assert_eq!(t.row(0), t.row(i));
        }
        assert_ne!(t.row(0), t.row(4));
        assert!(synth_frames("", &spec, 1).is_err());
    }

    #[test]
    fn frames_are_deterministic() {
        let spec = CorpusSpec::default();
        let a = synth_frames("ab cd", &spec, 42).unwrap();
        let b = synth_frames("ab cd", &spec, 42).unwrap();
        assert_eq!(a, b);
        let c = synth_frames("ab cd", &spec, 43).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn corpus_splits() {
        let spec = CorpusSpec::default();
        let c = sample_corpus(&spec, 2000, 7).unwrap();
        assert_eq!((c.train.len(), c.dev.len(), c.test.len()), (1800, 100, 100));
        let train: HashSet<_> = c.train.iter().map(|u| &u.source_text).collect();
        assert!(c.test.iter().all(|u| !train.contains(&u.source_text)));
        assert!(c.dev.iter().all(|u| !train.contains(&u.source_text)));
        for u in c.train.iter().chain(&c.test) {
            let n = u.source_text.chars().count();
            assert!((MIN_TEXT_LEN..=MAX_TEXT_LEN).contains(&n));
            assert_eq!(u.frames.len(), spec.frames_per_token * n);
            assert!(!u.source_text.starts_with(' ') && !u.source_text.ends_with(' '));
            assert!(!u.source_text.contains("  "));
        }
        assert_eq!(c, sample_corpus(&spec, 2000, 7).unwrap());
        assert!(sample_corpus(&spec, 9, 7).is_err());
    }

    #[test]
    fn nearest_prototype_recovers_text_without_noise() {
        let spec = CorpusSpec {
            noise_sigma: 0.0,
            ..CorpusSpec::default()
        };
        let synth = FrameSynth::new(&spec).unwrap();
        let c = sample_corpus(&spec, 200, 3).unwrap();
        for u in c.train.iter().chain(&c.dev).chain(&c.test) {
            assert_eq!(synth.nearest_prototype_transcript(&u.frames), u.source_text);
        }
    }

    #[test]
    fn export_is_byte_stable_and_round_trips() {
        let spec = CorpusSpec::default();
        let c = sample_corpus(&spec, 20, 1).unwrap();
        let mut a = Vec::new();
        let mut b = Vec::new();
        export_utterances(&mut a, &c.train).unwrap();
        export_utterances(&mut b, &c.train).unwrap();
        assert_eq!(a, b);
        let first = std::str::from_utf8(&a).unwrap().lines().next().unwrap();
        assert!(first.starts_with("{\"source_text\":"));
        let back = import_utterances(&a[..]).unwrap();
        assert_eq!(back, c.train);
    }
}
