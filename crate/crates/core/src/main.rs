use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use base64::Engine as _;
use clap::{Parser, Subcommand, ValueEnum};
use s2tt_core::ablate::{ablation_matrix, AblationConfig, HEADER};
use s2tt_core::checkpoint::load_checkpoint;
use s2tt_core::config::RunConfig;
use s2tt_core::corpus::{sample_corpus, synth_frames};
use s2tt_core::gradsuite::run_suite;
use s2tt_core::taskfmt::InferenceMode;
use s2tt_core::train::{train, Experiment};

#[derive(Parser)]
#[command(name = "s2tt", version, about = "Toy decoder-only speech translation")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Direct,
    Chained,
    /// Score both modes, one row each.
    Both,
}

impl Mode {
    fn modes(self) -> Vec<InferenceMode> {
        match self {
            Mode::Direct => vec![InferenceMode::Direct],
            Mode::Chained => vec![InferenceMode::Chained],
            Mode::Both => vec![InferenceMode::Direct, InferenceMode::Chained],
        }
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model; writes metrics.jsonl, best.ckpt and final.ckpt.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Greedy-decode a split and report BLEU / exact match.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long, value_enum, default_value = "direct")]
        mode: Mode,
        /// Write per-sample records as JSON lines.
        #[arg(long)]
        records: Option<PathBuf>,
    },
    /// Synthesize frames for a source sentence and translate them.
    Decode {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        text: String,
        #[arg(long, value_enum, default_value = "direct")]
        mode: Mode,
        /// Seed for the frame noise.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Finite-difference check of every primitive and the one-layer blocks.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        seeds: u64,
    },
    /// Run the policy x task-set matrix and print a TSV table.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Also write the table here.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Keep each cell's checkpoints and metrics under this directory.
        #[arg(long)]
        runs: Option<PathBuf>,
    },
    /// Write the corpus splits as JSON lines with base64 f32 frames.
    ExportCorpus {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn read_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::from_file(p).with_context(|| format!("reading {}", p.display())),
        None => Ok(RunConfig::default()),
    }
}

fn load_experiment(path: &Path) -> Result<Experiment> {
    let ck = load_checkpoint(path).with_context(|| format!("loading {}", path.display()))?;
    Ok(Experiment::from_checkpoint(&ck)?)
}

fn main() -> Result<()> {
    match Cli::parse().cmd {
        Cmd::Train { config, out } => {
            let cfg = read_config(config.as_deref())?;
            let mut exp = Experiment::new(cfg)?;
            eprintln!(
                "params {} (trainable {}) policy {}",
                exp.reg.num_elements(),
                exp.reg.num_trainable_elements(),
                exp.cfg.train.policy
            );
            let outcome = train(&mut exp, Some(&out))?;
            let last = outcome.metrics.last().context("no steps run")?;
            println!(
                "steps {} final_loss {:.4} best_dev_bleu {:.2} at step {} wall {:.1}s",
                outcome.steps, last.loss, outcome.best_bleu, outcome.best_step, last.wall_time
            );
        }
        Cmd::Eval { ckpt, split, mode, records } => {
            let exp = load_experiment(&ckpt)?;
            let utts = exp.corpus.split(&split)?;
            let mut rec_out = match records {
                Some(p) => Some(BufWriter::new(File::create(p)?)),
                None => None,
            };
            println!("split\tmode\tbleu\texact_match\tparse_failure_rate");
            for m in mode.modes() {
                let mut e = exp.clone();
                e.cfg.train.inference_mode = m;
                let report = e.evaluate_split(utts)?;
                println!(
                    "{split}\t{m}\t{:.2}\t{:.4}\t{:.4}",
                    report.bleu, report.exact_match, report.parse_failure_rate
                );
                if let Some(w) = rec_out.as_mut() {
                    for r in &report.records {
                        let line = serde_json::json!({
                            "mode": m.to_string(),
                            "source": r.source,
                            "reference": r.reference,
                            "hypothesis": r.hypothesis,
                            "raw": r.raw,
                            "terminated": r.terminated,
                            "parsed": r.parsed,
                        });
                        writeln!(w, "{line}")?;
                    }
                }
            }
        }
        Cmd::Decode { ckpt, text, mode, seed } => {
            let exp = load_experiment(&ckpt)?;
            let frames = synth_frames(&text, &exp.cfg.corpus, seed)?;
            for m in mode.modes() {
                let prompt = exp.formatter.inference_prompt(&frames, m)?;
                let out = exp
                    .model
                    .greedy_decode(&exp.reg, &[prompt], exp.cfg.train.max_decode_len)?;
                let raw = exp.formatter.tokenizer().decode_lossy(&out[0].tokens);
                match exp.formatter.extract_translation(&out[0].tokens, m) {
                    Ok(t) => println!("{m}\t{t}"),
                    Err(_) => println!("{m}\t<unparsed> {raw}"),
                }
            }
        }
        Cmd::Gradcheck { seeds } => {
            let start = Instant::now();
            let rows = run_suite(seeds);
            let mut failed = 0;
            for r in &rows {
                let status = match r.failed_seed {
                    None => "ok".to_string(),
                    Some(s) => {
                        failed += 1;
                        format!("FAIL (seed {s})")
                    }
                };
                println!("{:<28} seeds {:<3} worst_rel {:.3e}  {status}", r.name, r.seeds, r.worst_rel_error);
            }
            println!("{} cases, {failed} failed, {:.1}s", rows.len(), start.elapsed().as_secs_f64());
            if failed > 0 {
                bail!("{failed} gradient cases failed");
            }
        }
        Cmd::Ablate { config, out, runs } => {
            let text = match &config {
                Some(p) => std::fs::read_to_string(p)?,
                None => String::new(),
            };
            let (abl, base) = AblationConfig::parse(&text)?;
            eprintln!("{} cells", abl.cells());
            println!("{HEADER}");
            let rows = ablation_matrix(&base, &abl, runs.as_deref(), |row| {
                println!("{}", row.to_tsv());
            })?;
            if let Some(p) = out {
                s2tt_core::ablate::write_table(BufWriter::new(File::create(p)?), &rows)?;
            }
        }
        Cmd::ExportCorpus { config, out } => {
            let cfg = read_config(config.as_deref())?;
            let corpus = sample_corpus(&cfg.corpus, cfg.corpus_size, cfg.split_seed)?;
            std::fs::create_dir_all(&out)?;
            for name in ["train", "dev", "test"] {
                let mut w = BufWriter::new(File::create(out.join(format!("{name}.jsonl")))?);
                for u in corpus.split(name)? {
                    let t = u.frames.tensor();
                    let bytes: Vec<u8> = t.data().iter().flat_map(|v| v.to_le_bytes()).collect();
                    let line = serde_json::json!({
                        "source": u.source_text,
                        "target": u.target_text,
                        "frames_shape": t.shape(),
                        "frames_f32le_b64": base64::engine::general_purpose::STANDARD.encode(bytes),
                    });
                    writeln!(w, "{line}")?;
                }
                w.flush()?;
            }
            println!("wrote {} utterances to {}", corpus.train.len() + corpus.dev.len() + corpus.test.len(), out.display());
        }
    }
    Ok(())
}
