//! Policy x task-set ablation matrix.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use crate::config::RunConfig;
use crate::corpus::sample_corpus;
use crate::error::{Error, Result};
use crate::peft::PeftPolicy;
use crate::taskfmt::TaskWeights;
use crate::train::{train, Experiment};

pub const HEADER: &str = "policy\ttask_set\tseed\tbleu\texact_match\tstatus";

/// Which formulations stay in the training mix.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskSet {
    All,
    NoChain,
    NoAsr,
    NoBoth,
}

impl TaskSet {
    pub const ALL: [TaskSet; 4] = [TaskSet::All, TaskSet::NoChain, TaskSet::NoAsr, TaskSet::NoBoth];

    /// `base` with the removed formulations zeroed.
    pub fn weights(self, base: TaskWeights) -> TaskWeights {
        let [d, a, c] = base.0;
        TaskWeights(match self {
            TaskSet::All => [d, a, c],
            TaskSet::NoChain => [d, a, 0.0],
            TaskSet::NoAsr => [d, 0.0, c],
            TaskSet::NoBoth => [d, 0.0, 0.0],
        })
    }
}

impl fmt::Display for TaskSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TaskSet::All => "all",
            TaskSet::NoChain => "-chain",
            TaskSet::NoAsr => "-asr",
            TaskSet::NoBoth => "-both",
        })
    }
}

impl FromStr for TaskSet {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(TaskSet::All),
            "-chain" => Ok(TaskSet::NoChain),
            "-asr" => Ok(TaskSet::NoAsr),
            "-both" => Ok(TaskSet::NoBoth),
            _ => Err(Error::Config(format!("unknown task set `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationConfig {
    pub policies: Vec<PeftPolicy>,
    pub task_sets: Vec<TaskSet>,
    pub seeds: Vec<u64>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        let p = |s: &str| s.parse().expect("built-in policy tag");
        Self {
            policies: vec![
                PeftPolicy::Lna,
                p("lora-qv-r8"),
                p("lora-qkvo-r32"),
                p("lora-all-linear-r32"),
                p("freeze-encoder"),
                p("freeze-decoder"),
            ],
            task_sets: TaskSet::ALL.to_vec(),
            seeds: vec![0],
        }
    }
}

fn parse_list<T: FromStr<Err = Error>>(v: &str) -> Result<Vec<T>> {
    let items = v
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(str::parse)
        .collect::<Result<Vec<T>>>()?;
    if items.is_empty() {
        return Err(Error::Config(format!("empty list `{v}`")));
    }
    Ok(items)
}

impl AblationConfig {
    /// Splits a config file into its `ablate.*` keys and the base run config.
    pub fn parse(text: &str) -> Result<(Self, RunConfig)> {
        let mut abl = AblationConfig::default();
        let mut rest = String::new();
        for raw in text.lines() {
            let line = raw.split('#').next().unwrap_or("").trim();
            let Some(kv) = line.strip_prefix("ablate.") else {
                rest.push_str(raw);
                rest.push('\n');
                continue;
            };
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("expected key = value, got `{line}`")))?;
            let v = v.trim();
            match k.trim() {
                "policies" => abl.policies = parse_list(v)?,
                "task_sets" => abl.task_sets = parse_list(v)?,
                "seeds" => {
                    abl.seeds = v
                        .split(',')
                        .map(|s| {
                            s.trim()
                                .parse()
                                .map_err(|_| Error::Config(format!("invalid seed `{s}`")))
                        })
                        .collect::<Result<_>>()?
                }
                other => return Err(Error::Config(format!("unknown config key `ablate.{other}`"))),
            }
        }
        Ok((abl, RunConfig::parse(&rest)?))
    }

    pub fn cells(&self) -> usize {
        self.policies.len() * self.task_sets.len() * self.seeds.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub policy: String,
    pub task_set: TaskSet,
    pub seed: u64,
    pub bleu: Option<f64>,
    pub exact_match: Option<f64>,
    /// `ok`, or `failed: <reason>`.
    pub status: String,
}

impl AblationRow {
    pub fn to_tsv(&self) -> String {
        let num = |v: Option<f64>, p: usize| v.map_or("NA".to_string(), |x| format!("{x:.p$}"));
        format!(
            "{}\t{}\t{}\t{}\t{}\t{}",
            self.policy,
            self.task_set,
            self.seed,
            num(self.bleu, 2),
            num(self.exact_match, 4),
            self.status.replace(['\t', '\n'], " ")
        )
    }
}

/// Trains one cell and scores its best-dev checkpoint on the test split.
pub fn run_cell(base: &RunConfig, corpus: &crate::corpus::CorpusSplits, policy: &PeftPolicy, set: TaskSet, seed: u64, out_dir: Option<&Path>) -> Result<(f64, f64)> {
    let mut cfg = base.clone();
    cfg.train.policy = *policy;
    cfg.train.task_weights = set.weights(base.train.task_weights);
    cfg.train.seed = seed;
    cfg.validate()?;
    let mut exp = Experiment::with_corpus(cfg, corpus.clone())?;
    let outcome = train(&mut exp, out_dir)?;
    outcome.best.restore_into(&mut exp.reg)?;
    let report = exp.evaluate_split(&exp.corpus.test)?;
    Ok((report.bleu, report.exact_match))
}

/// Runs the whole matrix over one shared corpus. A failed cell is recorded
/// and the matrix continues. `on_row` sees each row as soon as it is done.
pub fn ablation_matrix<W: FnMut(&AblationRow)>(base: &RunConfig, abl: &AblationConfig, out_dir: Option<&Path>, mut on_row: W) -> Result<Vec<AblationRow>> {
    let corpus = sample_corpus(&base.corpus, base.corpus_size, base.split_seed)?;
    let mut rows = Vec::with_capacity(abl.cells());
    for policy in &abl.policies {
        for &set in &abl.task_sets {
            for &seed in &abl.seeds {
                let dir = out_dir.map(|d| d.join(format!("{policy}_{set}_s{seed}")));
                let res = run_cell(base, &corpus, policy, set, seed, dir.as_deref());
                let row = match res {
                    Ok((bleu, em)) => AblationRow {
                        policy: policy.tag(),
                        task_set: set,
                        seed,
                        bleu: Some(bleu),
                        exact_match: Some(em),
                        status: "ok".into(),
                    },
                    Err(e) => AblationRow {
                        policy: policy.tag(),
                        task_set: set,
                        seed,
                        bleu: None,
                        exact_match: None,
                        status: format!("failed: {e}"),
                    },
                };
                on_row(&row);
                rows.push(row);
            }
        }
    }
    Ok(rows)
}

/// Writes `rows` as a tab-separated table with [`HEADER`].
pub fn write_table<W: Write>(mut w: W, rows: &[AblationRow]) -> Result<()> {
    writeln!(w, "{HEADER}")?;
    for r in rows {
        writeln!(w, "{}", r.to_tsv())?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn task_set_weights() {
        let w = TaskWeights([1.0, 2.0, 3.0]);
        assert_eq!(TaskSet::NoChain.weights(w).0, [1.0, 2.0, 0.0]);
        assert_eq!(TaskSet::NoAsr.weights(w).0, [1.0, 0.0, 3.0]);
        assert_eq!(TaskSet::NoBoth.weights(w).0, [1.0, 0.0, 0.0]);
        for t in TaskSet::ALL {
            assert_eq!(t.to_string().parse::<TaskSet>().unwrap(), t);
        }
    }

    #[test]
    fn splits_ablation_keys() {
        let (abl, cfg) = AblationConfig::parse(
            "ablate.policies = lna, freeze-encoder\nablate.task_sets = all,-both\nablate.seeds = 1,2\ntrain.max_steps = 300\n",
        )
        .unwrap();
        assert_eq!(abl.cells(), 8);
        assert_eq!(cfg.train.max_steps, 300);
        assert!(AblationConfig::parse("ablate.nope = 1\n").is_err());
        assert_eq!(AblationConfig::default().cells(), 24);
    }
}
