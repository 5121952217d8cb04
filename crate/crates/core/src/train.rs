//! Experiment setup and the multi-task training loop.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use s2tt_autodiff::{Graph, ParamRegistry};
use serde::Serialize;

use crate::checkpoint::{save_checkpoint, write_atomic, Checkpoint};
use crate::config::RunConfig;
use crate::corpus::{build_tokenizer, mix_seed, sample_corpus, CorpusSplits, Utterance};
use crate::decoder::per_sample_nll;
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalReport};
use crate::model::S2ttModel;
use crate::optim::{lr_at, AdamW, OptimState};
use crate::peft::{PeftPolicy, TrainabilityMask};
use crate::taskfmt::{Formulation, TaskFormatter, TaskSample};

const INIT_STREAM: u64 = 0x1;
const ADAPTER_STREAM: u64 = 0x2;
const BATCH_STREAM: u64 = 0x3;

/// Everything needed to train or evaluate one configuration.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub cfg: RunConfig,
    pub corpus: CorpusSplits,
    pub formatter: TaskFormatter,
    pub model: S2ttModel,
    pub reg: ParamRegistry<f32>,
    pub mask: TrainabilityMask,
}

impl Experiment {
    /// Builds the corpus and a freshly initialised model with the policy applied.
    pub fn new(cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        let corpus = sample_corpus(&cfg.corpus, cfg.corpus_size, cfg.split_seed)?;
        Self::with_corpus(cfg, corpus)
    }

    /// Like [`Experiment::new`] but reuses an already sampled corpus.
    pub fn with_corpus(cfg: RunConfig, corpus: CorpusSplits) -> Result<Self> {
        let formatter = TaskFormatter::new(&build_tokenizer(&cfg.corpus)?, &cfg.src_lang, &cfg.tgt_lang)?;
        let vocab = formatter.tokenizer().vocab_size();
        let mut model = S2ttModel::new(cfg.encoder_config(), cfg.decoder_config(vocab))?;
        let mut reg = model.init_registry(mix_seed(cfg.train.seed, INIT_STREAM))?;
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.train.seed, ADAPTER_STREAM));
        let mask = cfg.train.policy.install(&mut model, &mut reg, &mut rng)?;
        Ok(Self {
            cfg,
            corpus,
            formatter,
            model,
            reg,
            mask,
        })
    }

    /// Rebuilds the experiment described by a checkpoint's config echo and
    /// loads its tensors. A LoRA checkpoint saved after merging loads as a
    /// plain model.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let cfg = RunConfig::parse(&ck.config)?;
        if cfg.to_text() != ck.config {
            return Err(Error::Checkpoint("config echo is not in canonical form".into()));
        }
        let mut exp = Self::new(cfg)?;
        let has_adapters = ck.tensors.iter().any(|(n, _)| n.ends_with(".lora.A"));
        if matches!(exp.cfg.train.policy, PeftPolicy::Lora(_)) && !has_adapters {
            for lin in exp.model.decoder_linears_mut() {
                if lin.lora.take().is_some() {
                    exp.reg.remove(&lin.lora_a_name())?;
                    exp.reg.remove(&lin.lora_b_name())?;
                }
            }
        }
        ck.restore_into(&mut exp.reg)?;
        Ok(exp)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::from_registry(&self.reg, &self.cfg.to_text())
    }

    pub fn evaluate_split(&self, utts: &[Utterance]) -> Result<EvalReport> {
        evaluate(
            &self.model,
            &self.reg,
            &self.formatter,
            utts,
            self.cfg.train.inference_mode,
            self.cfg.train.max_decode_len,
        )
    }

    /// Mean per-sample target NLL of `utts` formatted as `f`, without
    /// gradient tracking.
    pub fn split_loss(&self, utts: &[Utterance], f: Formulation) -> Result<f64> {
        if utts.is_empty() {
            return Err(Error::Config("split_loss needs at least one utterance".into()));
        }
        let mut total = 0.0;
        for chunk in utts.chunks(32) {
            let samples = chunk
                .iter()
                .map(|u| self.formatter.format_sample(u, f))
                .collect::<Result<Vec<_>>>()?;
            let refs: Vec<&TaskSample> = samples.iter().collect();
            let mut g = Graph::<f32>::new();
            let b = self.reg.bind_frozen(&mut g);
            let (loss, _) = self.model.loss(&mut g, &b, &refs)?;
            total += g.value(loss).item() as f64 * chunk.len() as f64;
        }
        Ok(total / utts.len() as f64)
    }

    /// Dev subset used for periodic evaluation.
    pub fn dev_subset(&self) -> &[Utterance] {
        let n = self.cfg.train.eval_samples;
        let dev = &self.corpus.dev;
        if n == 0 || n >= dev.len() {
            dev
        } else {
            &dev[..n]
        }
    }
}

/// Shuffles `utts` and packs them greedily into batches whose total frame
/// count stays within `budget`.
pub fn frame_batches<R: rand::Rng>(utts: &[Utterance], budget: usize, rng: &mut R) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..utts.len()).collect();
    order.shuffle(rng);
    let mut batches = Vec::new();
    let mut cur = Vec::new();
    let mut frames = 0;
    for i in order {
        let n = utts[i].frames.len();
        if !cur.is_empty() && frames + n > budget {
            batches.push(std::mem::take(&mut cur));
            frames = 0;
        }
        cur.push(i);
        frames += n;
    }
    if !cur.is_empty() {
        batches.push(cur);
    }
    batches
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsRecord {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    /// Mean loss per formulation (direct, asr, chained) within the batch.
    pub task_loss: [Option<f64>; 3],
    pub dev_bleu: Option<f64>,
    pub dev_exact_match: Option<f64>,
    pub wall_time: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub metrics: Vec<MetricsRecord>,
    pub best_bleu: f64,
    pub best_step: usize,
    /// Parameters at `best_step`.
    pub best: Checkpoint,
    pub formulation_counts: [usize; 3],
    pub steps: usize,
}

/// One optimisation step on `samples`. Returns the batch loss and the
/// per-sample losses.
pub fn train_step(
    exp: &mut Experiment,
    opt: &AdamW,
    state: &mut OptimState,
    samples: &[&TaskSample],
    lr: f64,
) -> Result<(f64, Vec<f64>)> {
    let (loss, per_sample, grads) = {
        let mut g = Graph::<f32>::new();
        let b = exp.reg.bind(&mut g);
        let (loss, fwd) = exp.model.loss(&mut g, &b, samples)?;
        let value = g.value(loss).item() as f64;
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("training loss is {value}")));
        }
        let per_sample = per_sample_nll(g.value(fwd.logits), &fwd.input, samples);
        let mut grads = g.backward(loss)?;
        (value, per_sample, exp.reg.collect_grads(&b, &mut grads))
    };
    opt.step(&mut exp.reg, &grads, state, lr)?;
    Ok((loss, per_sample))
}

/// Trains for `max_steps`. With `out_dir`, writes `metrics.jsonl`,
/// `best.ckpt` (highest dev BLEU) and `final.ckpt`. A non-finite loss or
/// gradient aborts the run after saving `last_good.ckpt`.
pub fn train(exp: &mut Experiment, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    let steps = exp.cfg.train.max_steps;
    train_until(exp, out_dir, steps)
}

/// Runs the first `stop` steps of the configured schedule, so the learning
/// rate follows the full-length warmup and decay.
pub fn train_until(exp: &mut Experiment, out_dir: Option<&Path>, stop: usize) -> Result<TrainOutcome> {
    let t = exp.cfg.train.clone();
    let stop = stop.min(t.max_steps);
    let opt = AdamW {
        weight_decay: t.weight_decay,
        ..AdamW::default()
    };
    let mut state = OptimState::new(&exp.reg);
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(t.seed, BATCH_STREAM));
    let mut metrics_file = match out_dir {
        Some(d) => {
            std::fs::create_dir_all(d)?;
            Some(std::io::BufWriter::new(std::fs::File::create(d.join("metrics.jsonl"))?))
        }
        None => None,
    };
    let config_text = exp.cfg.to_text();
    let start = Instant::now();
    let mut metrics = Vec::new();
    let mut counts = [0usize; 3];
    let mut best = (f64::NEG_INFINITY, 0usize);
    let mut best_ck = exp.checkpoint();
    let mut batches = Vec::new().into_iter();
    for step in 1..=stop {
        let batch = match batches.next() {
            Some(b) => b,
            None => {
                batches = frame_batches(&exp.corpus.train, t.batch_frames, &mut rng).into_iter();
                batches.next().ok_or_else(|| Error::Config("empty training split".into()))?
            }
        };
        let samples = batch
            .iter()
            .map(|&i| {
                let f = t.task_weights.draw(&mut rng);
                counts[f.index()] += 1;
                exp.formatter.format_sample(&exp.corpus.train[i], f)
            })
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&TaskSample> = samples.iter().collect();
        let lr = lr_at(step, t.peak_lr, t.warmup_steps, t.max_steps)?;
        let (loss, per_sample) = match train_step(exp, &opt, &mut state, &refs, lr) {
            Ok(v) => v,
            Err(e @ Error::NonFinite(_)) => {
                // nothing was updated, so the registry still holds the last good step
                if let Some(d) = out_dir {
                    save_checkpoint(&exp.reg, &config_text, &d.join("last_good.ckpt"))?;
                }
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        let mut task_loss = [None; 3];
        for f in Formulation::ALL {
            let vals: Vec<f64> = samples
                .iter()
                .zip(&per_sample)
                .filter(|(s, _)| s.formulation == f)
                .map(|(_, &l)| l)
                .collect();
            if !vals.is_empty() {
                task_loss[f.index()] = Some(vals.iter().sum::<f64>() / vals.len() as f64);
            }
        }
        let mut rec = MetricsRecord {
            step,
            loss,
            lr,
            task_loss,
            dev_bleu: None,
            dev_exact_match: None,
            wall_time: 0.0,
        };
        if step % t.eval_every == 0 || step == stop {
            let report = exp.evaluate_split(exp.dev_subset())?;
            rec.dev_bleu = Some(report.bleu);
            rec.dev_exact_match = Some(report.exact_match);
            if report.bleu > best.0 {
                best = (report.bleu, step);
                best_ck = exp.checkpoint();
                if let Some(d) = out_dir {
                    write_atomic(&d.join("best.ckpt"), &best_ck.to_bytes()?)?;
                }
            }
        }
        rec.wall_time = start.elapsed().as_secs_f64();
        if let Some(f) = metrics_file.as_mut() {
            serde_json::to_writer(&mut *f, &rec).map_err(|e| Error::Config(e.to_string()))?;
            f.write_all(b"\n")?;
        }
        metrics.push(rec);
    }
    if let Some(mut f) = metrics_file {
        f.flush()?;
    }
    if let Some(d) = out_dir {
        write_atomic(&d.join("final.ckpt"), &exp.checkpoint().to_bytes()?)?;
    }
    Ok(TrainOutcome {
        metrics,
        best_bleu: best.0,
        best_step: best.1,
        best: best_ck,
        formulation_counts: counts,
        steps: stop,
    })
}
