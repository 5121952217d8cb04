//! Greedy-decode evaluation with BLEU and exact match.

use s2tt_autodiff::ParamRegistry;
use serde::Serialize;

use crate::bleu::corpus_bleu;
use crate::corpus::Utterance;
use crate::decoder::Decoded;
use crate::error::Result;
use crate::model::S2ttModel;
use crate::taskfmt::{InferenceMode, TaskFormatter};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SampleRecord {
    pub source: String,
    pub reference: String,
    pub hypothesis: String,
    pub raw: String,
    pub terminated: bool,
    pub parsed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub mode: String,
    pub bleu: f64,
    pub exact_match: f64,
    pub parse_failures: usize,
    pub parse_failure_rate: f64,
    pub records: Vec<SampleRecord>,
}

/// Scores already-decoded outputs. Chained outputs that fail to parse are
/// scored as an empty translation.
pub fn score_outputs(
    fmt: &TaskFormatter,
    utts: &[Utterance],
    decoded: &[Decoded],
    mode: InferenceMode,
) -> Result<EvalReport> {
    let mut records = Vec::with_capacity(utts.len());
    let mut failures = 0;
    for (u, d) in utts.iter().zip(decoded) {
        let raw = fmt.tokenizer().decode_lossy(&d.tokens);
        let (hypothesis, parsed) = match fmt.extract_translation(&d.tokens, mode) {
            Ok(h) => (h, true),
            Err(_) => {
                failures += 1;
                (String::new(), false)
            }
        };
        records.push(SampleRecord {
            source: u.source_text.clone(),
            reference: u.target_text.clone(),
            hypothesis,
            raw,
            terminated: d.terminated,
            parsed,
        });
    }
    let hyps: Vec<&str> = records.iter().map(|r| r.hypothesis.as_str()).collect();
    let refs: Vec<&str> = records.iter().map(|r| r.reference.as_str()).collect();
    let bleu = corpus_bleu(&hyps, &refs)?;
    let exact = records.iter().filter(|r| r.hypothesis == r.reference).count();
    let n = records.len().max(1) as f64;
    Ok(EvalReport {
        mode: mode.to_string(),
        bleu,
        exact_match: exact as f64 / n,
        parse_failures: failures,
        parse_failure_rate: failures as f64 / n,
        records,
    })
}

/// Greedy-decodes every utterance in `mode` and scores the translations.
/// Parameters are only read.
pub fn evaluate(
    model: &S2ttModel,
    reg: &ParamRegistry<f32>,
    fmt: &TaskFormatter,
    utts: &[Utterance],
    mode: InferenceMode,
    max_len: usize,
) -> Result<EvalReport> {
    let prompts = utts
        .iter()
        .map(|u| fmt.inference_prompt(&u.frames, mode))
        .collect::<Result<Vec<_>>>()?;
    let decoded = model.greedy_decode(reg, &prompts, max_len)?;
    score_outputs(fmt, utts, &decoded, mode)
}
