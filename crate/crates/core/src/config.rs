//! Flat `key = value` run configuration.

use std::fmt::Write as _;
use std::path::Path;

use crate::corpus::{CorpusSpec, TranslationRule};
use crate::decoder::DecoderConfig;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::peft::{FreezePolicy, LoraConfig, LoraTargets, PeftPolicy};
use crate::taskfmt::{InferenceMode, TaskWeights};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub peak_lr: f64,
    pub warmup_steps: usize,
    pub max_steps: usize,
    pub batch_frames: usize,
    pub weight_decay: f64,
    pub task_weights: TaskWeights,
    pub seed: u64,
    pub eval_every: usize,
    /// Dev utterances decoded per evaluation; 0 means the whole split.
    pub eval_samples: usize,
    pub policy: PeftPolicy,
    pub inference_mode: InferenceMode,
    pub max_decode_len: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            peak_lr: 5e-3,
            warmup_steps: 200,
            max_steps: 5000,
            batch_frames: 2048,
            weight_decay: 0.01,
            task_weights: TaskWeights::default(),
            seed: 0,
            eval_every: 500,
            eval_samples: 0,
            policy: PeftPolicy::Lna,
            inference_mode: InferenceMode::Direct,
            max_decode_len: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub corpus: CorpusSpec,
    pub corpus_size: usize,
    pub split_seed: u64,
    pub src_lang: String,
    pub tgt_lang: String,
    /// `input_dim` and `decoder_dim` are derived from the corpus and decoder.
    pub encoder: EncoderConfig,
    /// `vocab` is derived from the tokenizer.
    pub decoder: DecoderConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            corpus: CorpusSpec::default(),
            corpus_size: 2000,
            split_seed: 0,
            src_lang: "src".into(),
            tgt_lang: "tgt".into(),
            encoder: EncoderConfig::default(),
            decoder: DecoderConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("invalid value `{v}` for `{key}`")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("invalid boolean `{v}` for `{key}`"))),
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut policy = "lna".to_string();
        let mut lora = LoraConfig::new(8, LoraTargets::Qv);
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected `key = value`", lineno + 1))
            })?;
            let (key, v) = (key.trim(), value.trim());
            match key {
                "corpus.alphabet" => cfg.corpus.alphabet = v.trim_matches('"').chars().collect(),
                "corpus.frames_per_token" => cfg.corpus.frames_per_token = parse_num(key, v)?,
                "corpus.feature_dim" => cfg.corpus.feature_dim = parse_num(key, v)?,
                "corpus.noise_sigma" => cfg.corpus.noise_sigma = parse_num(key, v)?,
                "corpus.rule" => cfg.corpus.rule = v.parse::<TranslationRule>()?,
                "corpus.seed" => cfg.corpus.seed = parse_num(key, v)?,
                "corpus.size" => cfg.corpus_size = parse_num(key, v)?,
                "corpus.split_seed" => cfg.split_seed = parse_num(key, v)?,
                "corpus.src_lang" => cfg.src_lang = v.to_string(),
                "corpus.tgt_lang" => cfg.tgt_lang = v.to_string(),
                "encoder.layers" => cfg.encoder.layers = parse_num(key, v)?,
                "encoder.model_dim" => cfg.encoder.model_dim = parse_num(key, v)?,
                "encoder.heads" => cfg.encoder.heads = parse_num(key, v)?,
                "encoder.ffn_dim" => cfg.encoder.ffn_dim = parse_num(key, v)?,
                "adaptor.k" => cfg.encoder.adaptor_k = parse_num(key, v)?,
                "decoder.layers" => cfg.decoder.layers = parse_num(key, v)?,
                "decoder.model_dim" => cfg.decoder.model_dim = parse_num(key, v)?,
                "decoder.heads" => cfg.decoder.heads = parse_num(key, v)?,
                "decoder.ffn_dim" => cfg.decoder.ffn_dim = parse_num(key, v)?,
                "decoder.max_positions" => cfg.decoder.max_positions = parse_num(key, v)?,
                "decoder.bias" => cfg.decoder.bias = parse_bool(key, v)?,
                "train.peak_lr" => cfg.train.peak_lr = parse_num(key, v)?,
                "train.warmup_steps" => cfg.train.warmup_steps = parse_num(key, v)?,
                "train.max_steps" => cfg.train.max_steps = parse_num(key, v)?,
                "train.batch_frames" => cfg.train.batch_frames = parse_num(key, v)?,
                "train.weight_decay" => cfg.train.weight_decay = parse_num(key, v)?,
                "train.seed" => cfg.train.seed = parse_num(key, v)?,
                "train.eval_every" => cfg.train.eval_every = parse_num(key, v)?,
                "train.eval_samples" => cfg.train.eval_samples = parse_num(key, v)?,
                "tasks.weights" => {
                    let w: Vec<f64> = v
                        .split(',')
                        .map(|p| parse_num(key, p.trim()))
                        .collect::<Result<_>>()?;
                    let w: [f64; 3] = w.try_into().map_err(|_| {
                        Error::Config("tasks.weights needs exactly three values".into())
                    })?;
                    cfg.train.task_weights = TaskWeights(w);
                }
                "peft.policy" => policy = v.to_string(),
                "lora.rank" => lora.rank = parse_num(key, v)?,
                "lora.alpha" => lora.alpha = Some(parse_num(key, v)?),
                "lora.targets" => lora.targets = v.parse()?,
                "infer.mode" => cfg.train.inference_mode = v.parse()?,
                "infer.max_len" => cfg.train.max_decode_len = parse_num(key, v)?,
                _ => return Err(Error::Config(format!("unknown config key `{key}`"))),
            }
        }
        cfg.train.policy = match policy.as_str() {
            "lna" => PeftPolicy::Lna,
            "lora" => PeftPolicy::Lora(lora),
            "freeze-encoder" => PeftPolicy::Freeze(FreezePolicy::FreezeEncoder),
            "freeze-decoder" => PeftPolicy::Freeze(FreezePolicy::FreezeDecoder),
            "full" => PeftPolicy::Freeze(FreezePolicy::Full),
            other => return Err(Error::Config(format!("unknown peft.policy `{other}`"))),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        if self.corpus_size < 10 {
            return Err(Error::Config("corpus.size must be at least 10".into()));
        }
        if self.src_lang.is_empty() || self.tgt_lang.is_empty() {
            return Err(Error::Config("language names must be non-empty".into()));
        }
        let t = &self.train;
        if t.warmup_steps >= t.max_steps {
            return Err(Error::Config(format!(
                "train.warmup_steps {} must be below train.max_steps {}",
                t.warmup_steps, t.max_steps
            )));
        }
        if !(t.peak_lr > 0.0 && t.peak_lr.is_finite()) || t.weight_decay < 0.0 {
            return Err(Error::Config("learning rate and weight decay must be valid".into()));
        }
        let longest = crate::corpus::MAX_TEXT_LEN * self.corpus.frames_per_token;
        if t.batch_frames < longest {
            return Err(Error::Config(format!(
                "train.batch_frames {} is below the longest utterance ({longest} frames)",
                t.batch_frames
            )));
        }
        if t.eval_every == 0 || t.max_decode_len == 0 {
            return Err(Error::Config("train.eval_every and infer.max_len must be positive".into()));
        }
        t.task_weights.validate()?;
        self.encoder_config().validate()?;
        Ok(())
    }

    pub fn encoder_config(&self) -> EncoderConfig {
        EncoderConfig {
            input_dim: self.corpus.feature_dim,
            decoder_dim: self.decoder.model_dim,
            ..self.encoder.clone()
        }
    }

    pub fn decoder_config(&self, vocab: usize) -> DecoderConfig {
        DecoderConfig {
            vocab,
            ..self.decoder.clone()
        }
    }

    /// Canonical text form; parsing it yields an equal config.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let alphabet: String = self.corpus.alphabet.iter().collect();
        let c = &self.corpus;
        let t = &self.train;
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("corpus.alphabet", format!("\"{alphabet}\""));
        kv("corpus.frames_per_token", c.frames_per_token.to_string());
        kv("corpus.feature_dim", c.feature_dim.to_string());
        kv("corpus.noise_sigma", c.noise_sigma.to_string());
        kv("corpus.rule", c.rule.to_string());
        kv("corpus.seed", c.seed.to_string());
        kv("corpus.size", self.corpus_size.to_string());
        kv("corpus.split_seed", self.split_seed.to_string());
        kv("corpus.src_lang", self.src_lang.clone());
        kv("corpus.tgt_lang", self.tgt_lang.clone());
        kv("encoder.layers", self.encoder.layers.to_string());
        kv("encoder.model_dim", self.encoder.model_dim.to_string());
        kv("encoder.heads", self.encoder.heads.to_string());
        kv("encoder.ffn_dim", self.encoder.ffn_dim.to_string());
        kv("adaptor.k", self.encoder.adaptor_k.to_string());
        kv("decoder.layers", self.decoder.layers.to_string());
        kv("decoder.model_dim", self.decoder.model_dim.to_string());
        kv("decoder.heads", self.decoder.heads.to_string());
        kv("decoder.ffn_dim", self.decoder.ffn_dim.to_string());
        kv("decoder.max_positions", self.decoder.max_positions.to_string());
        kv("decoder.bias", self.decoder.bias.to_string());
        kv("train.peak_lr", t.peak_lr.to_string());
        kv("train.warmup_steps", t.warmup_steps.to_string());
        kv("train.max_steps", t.max_steps.to_string());
        kv("train.batch_frames", t.batch_frames.to_string());
        kv("train.weight_decay", t.weight_decay.to_string());
        kv("train.seed", t.seed.to_string());
        kv("train.eval_every", t.eval_every.to_string());
        kv("train.eval_samples", t.eval_samples.to_string());
        let w = t.task_weights.0;
        kv("tasks.weights", format!("{},{},{}", w[0], w[1], w[2]));
        let (policy, lora) = match t.policy {
            PeftPolicy::Lna => ("lna", None),
            PeftPolicy::Lora(l) => ("lora", Some(l)),
            PeftPolicy::Freeze(FreezePolicy::FreezeEncoder) => ("freeze-encoder", None),
            PeftPolicy::Freeze(FreezePolicy::FreezeDecoder) => ("freeze-decoder", None),
            PeftPolicy::Freeze(FreezePolicy::Full) => ("full", None),
        };
        kv("peft.policy", policy.to_string());
        if let Some(l) = lora {
            kv("lora.rank", l.rank.to_string());
            if let Some(a) = l.alpha {
                kv("lora.alpha", a.to_string());
            }
            kv("lora.targets", l.targets.to_string());
        }
        kv("infer.mode", t.inference_mode.to_string());
        kv("infer.max_len", t.max_decode_len.to_string());
        s
    }
}
