//! Task formulations: direct translation, transcription, and chained
//! transcription-then-translation, with their instructions and target templates.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::corpus::{FrameSequence, Tokenizer, Utterance, BOS, EOS, SEP};
use crate::error::{Error, Result};

pub const TRANSCRIPTION_MARKER: &str = "Transcription: ";
pub const TRANSLATION_MARKER: &str = "Translation: ";
/// Separator between the two halves of a chained target.
pub const CHAINED_JOIN: &str = " Translation: ";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Formulation {
    Direct,
    Asr,
    Chained,
}

impl Formulation {
    pub const ALL: [Formulation; 3] = [Formulation::Direct, Formulation::Asr, Formulation::Chained];

    pub fn index(self) -> usize {
        match self {
            Self::Direct => 0,
            Self::Asr => 1,
            Self::Chained => 2,
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            Self::Direct => "direct",
            Self::Asr => "asr",
            Self::Chained => "chained",
        }
    }
}

impl fmt::Display for Formulation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

/// Formulations usable at inference time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum InferenceMode {
    Direct,
    Chained,
}

impl InferenceMode {
    pub fn formulation(self) -> Formulation {
        match self {
            Self::Direct => Formulation::Direct,
            Self::Chained => Formulation::Chained,
        }
    }
}

impl fmt::Display for InferenceMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.formulation().tag())
    }
}

impl FromStr for InferenceMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "direct" => Ok(Self::Direct),
            "chained" => Ok(Self::Chained),
            other => Err(Error::Config(format!(
                "inference mode must be direct or chained, got `{other}`"
            ))),
        }
    }
}

pub fn instruction_for(t: Formulation, src_lang: &str, tgt_lang: &str) -> String {
    match t {
        Formulation::Direct => format!("Translate the {src_lang} speech into {tgt_lang} text."),
        Formulation::Asr => format!("Transcribe the {src_lang} speech."),
        Formulation::Chained => {
            format!("Transcribe the {src_lang} speech, then translate it into {tgt_lang} text.")
        }
    }
}

/// Target template `Y'` before tokenization.
pub fn target_text(t: Formulation, transcript: &str, translation: &str) -> String {
    match t {
        Formulation::Direct => format!("{TRANSLATION_MARKER}{translation}"),
        Formulation::Asr => format!("{TRANSCRIPTION_MARKER}{transcript}"),
        Formulation::Chained => {
            format!("{TRANSCRIPTION_MARKER}{transcript}{CHAINED_JOIN}{translation}")
        }
    }
}

/// One formatted example `[X¹, F, X²] -> Y'`.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskSample {
    /// `BOS + instruction + SEP`.
    pub prefix: Vec<u32>,
    pub frames: FrameSequence,
    /// `SEP`.
    pub suffix: Vec<u32>,
    /// Encoded template followed by `EOS`; empty for inference prompts.
    pub target: Vec<u32>,
    pub formulation: Formulation,
}

impl TaskSample {
    /// Loss mask over `[X¹, speech (speech_len rows), X², Y']`: true exactly on Y'.
    pub fn loss_mask(&self, speech_len: usize) -> Vec<bool> {
        let lead = self.prefix.len() + speech_len + self.suffix.len();
        std::iter::repeat_n(false, lead)
            .chain(std::iter::repeat_n(true, self.target.len()))
            .collect()
    }

    pub fn is_prompt(&self) -> bool {
        self.target.is_empty()
    }
}

/// Formats utterances with a fixed tokenizer and language names.
#[derive(Debug, Clone)]
pub struct TaskFormatter {
    tokenizer: Tokenizer,
    src_lang: String,
    tgt_lang: String,
}

impl TaskFormatter {
    /// Extends `base` with every symbol the templates need.
    pub fn new(base: &Tokenizer, src_lang: &str, tgt_lang: &str) -> Result<Self> {
        if src_lang.is_empty() || tgt_lang.is_empty() {
            return Err(Error::Config("language names must be non-empty".into()));
        }
        let mut template_chars = String::new();
        for t in Formulation::ALL {
            template_chars.push_str(&instruction_for(t, src_lang, tgt_lang));
        }
        template_chars.push_str(TRANSCRIPTION_MARKER);
        template_chars.push_str(CHAINED_JOIN);
        Ok(Self {
            tokenizer: base.extended(template_chars.chars()),
            src_lang: src_lang.to_string(),
            tgt_lang: tgt_lang.to_string(),
        })
    }

    pub fn tokenizer(&self) -> &Tokenizer {
        &self.tokenizer
    }

    pub fn src_lang(&self) -> &str {
        &self.src_lang
    }

    pub fn tgt_lang(&self) -> &str {
        &self.tgt_lang
    }

    fn prompt(&self, frames: &FrameSequence, t: Formulation) -> Result<TaskSample> {
        let mut prefix = vec![BOS];
        prefix.extend(
            self.tokenizer
                .encode(&instruction_for(t, &self.src_lang, &self.tgt_lang))?,
        );
        prefix.push(SEP);
        Ok(TaskSample {
            prefix,
            frames: frames.clone(),
            suffix: vec![SEP],
            target: Vec::new(),
            formulation: t,
        })
    }

    /// Training example for formulation `t`.
    pub fn format_sample(&self, u: &Utterance, t: Formulation) -> Result<TaskSample> {
        if u.source_text.is_empty() || u.target_text.is_empty() {
            return Err(Error::Config("utterance texts must be non-empty".into()));
        }
        let mut s = self.prompt(&u.frames, t)?;
        s.target = self
            .tokenizer
            .encode(&target_text(t, &u.source_text, &u.target_text))?;
        s.target.push(EOS);
        Ok(s)
    }

    /// Inference prompt (no target) for direct or chained decoding.
    pub fn inference_prompt(&self, frames: &FrameSequence, mode: InferenceMode) -> Result<TaskSample> {
        self.prompt(frames, mode.formulation())
    }

    /// Decodes generated ids (EOS already stripped) into the translation span.
    pub fn extract_translation(&self, ids: &[u32], mode: InferenceMode) -> Result<String> {
        let text = self.tokenizer.decode_lossy(ids);
        match mode {
            InferenceMode::Direct => Ok(text
                .strip_prefix(TRANSLATION_MARKER)
                .unwrap_or(&text)
                .trim()
                .to_string()),
            InferenceMode::Chained => parse_chained_output(&text).map(|(_, tr)| tr),
        }
    }
}

/// Splits `"Transcription: X Translation: Y"` into `(X, Y)`, both trimmed.
pub fn parse_chained_output(text: &str) -> Result<(String, String)> {
    let missing = || Error::ChainedParse(text.to_string());
    let start = text.find(TRANSCRIPTION_MARKER).ok_or_else(missing)?;
    let rest = &text[start + TRANSCRIPTION_MARKER.len()..];
    let split = rest.find(CHAINED_JOIN).ok_or_else(missing)?;
    let transcript = rest[..split].trim().to_string();
    let translation = rest[split + CHAINED_JOIN.len()..].trim().to_string();
    Ok((transcript, translation))
}

/// Sampling weights over the three training formulations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TaskWeights(pub [f64; 3]);

impl Default for TaskWeights {
    fn default() -> Self {
        Self([1.0, 1.0, 1.0])
    }
}

impl TaskWeights {
    pub fn validate(&self) -> Result<()> {
        if self.0.iter().any(|w| *w < 0.0 || !w.is_finite()) || self.0.iter().sum::<f64>() <= 0.0 {
            return Err(Error::Config(format!(
                "task weights must be non-negative with a positive sum, got {:?}",
                self.0
            )));
        }
        Ok(())
    }

    pub fn draw<R: Rng>(&self, rng: &mut R) -> Formulation {
        let total: f64 = self.0.iter().sum();
        let mut u = rng.random::<f64>() * total;
        for t in Formulation::ALL {
            let w = self.0[t.index()];
            if w > 0.0 && u < w {
                return t;
            }
            u -= w;
        }
        // rounding fallthrough: last formulation with positive weight
        *Formulation::ALL
            .iter()
            .rev()
            .find(|t| self.0[t.index()] > 0.0)
            .expect("validated weights have a positive entry")
    }

    pub fn enabled(&self) -> Vec<Formulation> {
        Formulation::ALL
            .into_iter()
            .filter(|t| self.0[t.index()] > 0.0)
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::corpus::{build_tokenizer, synth_frames, CorpusSpec};

    fn formatter() -> TaskFormatter {
        let spec = CorpusSpec::default();
        TaskFormatter::new(&build_tokenizer(&spec).unwrap(), "srclang", "tgtlang").unwrap()
    }

    fn utt(src: &str, tgt: &str) -> Utterance {
        Utterance {
            source_text: src.into(),
            target_text: tgt.into(),
            frames: synth_frames(src, &CorpusSpec::default(), 1).unwrap(),
        }
    }

    #[test]
    fn instructions() {
        assert_eq!(
            instruction_for(Formulation::Direct, "srclang", "tgtlang"),
            "Translate the srclang speech into tgtlang text."
        );
        assert!(!instruction_for(Formulation::Asr, "srclang", "tgtlang").contains("tgtlang"));
        assert_eq!(
            instruction_for(Formulation::Chained, "a", "b"),
            instruction_for(Formulation::Chained, "a", "b")
        );
    }

    #[test]
    fn chained_and_direct_targets() {
        let f = formatter();
        let tok = f.tokenizer();
        let s = f.format_sample(&utt("ab", "de"), Formulation::Chained).unwrap();
        let (body, eos) = s.target.split_at(s.target.len() - 1);
        assert_eq!(eos, &[EOS]);
        assert_eq!(tok.decode(body).unwrap(), "Transcription: ab Translation: de");
        let d = f.format_sample(&utt("ab", "de"), Formulation::Direct).unwrap();
        assert_eq!(tok.decode(&d.target[..d.target.len() - 1]).unwrap(), "Translation: de");
        assert_eq!(d.prefix[0], BOS);
        assert_eq!(*d.prefix.last().unwrap(), SEP);
        assert_eq!(d.suffix, vec![SEP]);
    }

    #[test]
    fn mask_counts_only_target() {
        let f = formatter();
        let s = f.format_sample(&utt("ab c", "ed f"), Formulation::Asr).unwrap();
        let m = s.loss_mask(4);
        assert_eq!(m.iter().filter(|&&b| b).count(), s.target.len());
        let lead = s.prefix.len() + 4 + s.suffix.len();
        assert!(m[..lead].iter().all(|&b| !b));
    }

    #[test]
    fn parse_cases() {
        assert_eq!(
            parse_chained_output("Transcription: bonjour Translation: hello").unwrap(),
            ("bonjour".to_string(), "hello".to_string())
        );
        let err = parse_chained_output("Translation: hello").unwrap_err();
        assert!(matches!(err, Error::ChainedParse(raw) if raw == "Translation: hello"));
        assert!(parse_chained_output("Transcription: abc").is_err());
    }

    #[test]
    fn weights_select_formulations() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let w = TaskWeights([1.0, 0.0, 0.0]);
        assert!((0..200).all(|_| w.draw(&mut rng) == Formulation::Direct));
        let w = TaskWeights::default();
        let mut counts = [0; 3];
        for _ in 0..3000 {
            counts[w.draw(&mut rng).index()] += 1;
        }
        assert!(counts.iter().all(|&c| c > 850), "{counts:?}");
        assert!(TaskWeights([0.0, 0.0, 0.0]).validate().is_err());
        assert!(TaskWeights([-1.0, 1.0, 0.0]).validate().is_err());
    }
}
