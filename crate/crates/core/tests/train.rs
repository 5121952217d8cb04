use std::path::Path;

use s2tt_core::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use s2tt_core::config::RunConfig;
use s2tt_core::peft::merge_lora;
use s2tt_core::taskfmt::Formulation;
use s2tt_core::train::{train, train_until, Experiment};
use s2tt_core::Error;

const TINY: &str = "
corpus.size = 120
encoder.layers = 1
encoder.model_dim = 16
encoder.heads = 2
encoder.ffn_dim = 32
decoder.layers = 1
decoder.model_dim = 16
decoder.heads = 2
decoder.ffn_dim = 32
train.batch_frames = 96
train.warmup_steps = 5
train.eval_samples = 4
infer.max_len = 16
";

fn tiny(extra: &str) -> RunConfig {
    RunConfig::parse(&format!("{TINY}\n{extra}")).unwrap()
}

fn metrics_without_time(dir: &Path) -> Vec<serde_json::Value> {
    std::fs::read_to_string(dir.join("metrics.jsonl"))
        .unwrap()
        .lines()
        .map(|l| {
            let mut v: serde_json::Value = serde_json::from_str(l).unwrap();
            v.as_object_mut().unwrap().remove("wall_time");
            v
        })
        .collect()
}

#[test]
fn identical_seeds_give_identical_runs() {
    let cfg = tiny("train.max_steps = 30\ntrain.eval_every = 15\ntrain.seed = 4");
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for d in &dirs {
        train(&mut Experiment::new(cfg.clone()).unwrap(), Some(d.path())).unwrap();
    }
    for f in ["final.ckpt", "best.ckpt"] {
        let a = std::fs::read(dirs[0].path().join(f)).unwrap();
        let b = std::fs::read(dirs[1].path().join(f)).unwrap();
        assert!(a == b, "{f} differs");
    }
    let m = metrics_without_time(dirs[0].path());
    assert_eq!(m.len(), 30);
    assert_eq!(m, metrics_without_time(dirs[1].path()));
    let steps: Vec<u64> = m.iter().map(|v| v["step"].as_u64().unwrap()).collect();
    assert_eq!(steps, (1..=30).collect::<Vec<_>>());
    assert!(m[14]["dev_bleu"].is_number() && m[13]["dev_bleu"].is_null());

    let other = tiny("train.max_steps = 30\ntrain.eval_every = 15\ntrain.seed = 5");
    let d = tempfile::tempdir().unwrap();
    train(&mut Experiment::new(other).unwrap(), Some(d.path())).unwrap();
    assert_ne!(std::fs::read(d.path().join("final.ckpt")).unwrap(), std::fs::read(dirs[0].path().join("final.ckpt")).unwrap());
}

#[test]
fn task_weights_select_formulations() {
    let mut exp = Experiment::new(tiny("train.max_steps = 20\ntrain.eval_every = 100\ntasks.weights = 1,0,0")).unwrap();
    let out = train(&mut exp, None).unwrap();
    assert!(out.formulation_counts[0] > 0);
    assert_eq!(out.formulation_counts[1..], [0, 0]);
    assert!(out.metrics.iter().all(|m| m.task_loss[1].is_none() && m.task_loss[2].is_none()));

    let mut exp = Experiment::new(tiny("train.max_steps = 20\ntrain.eval_every = 100")).unwrap();
    let out = train(&mut exp, None).unwrap();
    assert!(out.formulation_counts.iter().all(|&c| c > 0), "{:?}", out.formulation_counts);
}

#[test]
fn trainability_audit_after_hundred_steps() {
    for policy in ["lna", "lora\nlora.rank = 4\nlora.targets = qkvo", "freeze-encoder", "freeze-decoder", "full"] {
        let mut exp = Experiment::new(tiny(&format!("train.max_steps = 100\ntrain.eval_every = 1000\npeft.policy = {policy}"))).unwrap();
        let init = exp.reg.clone();
        train(&mut exp, None).unwrap();
        let mut moved = 0;
        for p in exp.reg.iter() {
            let q = init.get(&p.name).unwrap();
            assert_eq!(p.trainable, exp.mask.is_trainable(&p.name).unwrap());
            if p.trainable {
                assert_ne!(p.tensor, q.tensor, "{policy}: trainable {} unchanged", p.name);
                moved += 1;
            } else {
                assert_eq!(p.tensor, q.tensor, "{policy}: frozen {} changed", p.name);
            }
        }
        assert!(moved > 0);
    }
}

#[test]
fn evaluation_does_not_touch_parameters() {
    let mut exp = Experiment::new(tiny("train.max_steps = 10\ntrain.eval_every = 100")).unwrap();
    train(&mut exp, None).unwrap();
    let before = exp.checkpoint().to_bytes().unwrap();
    let report = exp.evaluate_split(&exp.corpus.test).unwrap();
    assert_eq!(report.records.len(), exp.corpus.test.len());
    exp.split_loss(&exp.corpus.dev, Formulation::Chained).unwrap();
    assert_eq!(exp.checkpoint().to_bytes().unwrap(), before);
}

#[test]
fn untrained_loss_is_near_uniform() {
    let exp = Experiment::new(RunConfig::default()).unwrap();
    let ln_v = (exp.formatter.tokenizer().vocab_size() as f64).ln();
    for f in Formulation::ALL {
        let l = exp.split_loss(&exp.corpus.dev, f).unwrap();
        assert!((l - ln_v).abs() / ln_v < 0.01, "{f}: {l} vs ln|V| {ln_v}");
    }
}

#[test]
fn default_run_beats_uniform_within_200_steps() {
    let mut cfg = RunConfig::default();
    cfg.train.eval_every = 200;
    cfg.train.eval_samples = 8;
    let mut exp = Experiment::new(cfg).unwrap();
    let ln_v = (exp.formatter.tokenizer().vocab_size() as f64).ln();
    assert_eq!(train_until(&mut exp, None, 200).unwrap().steps, 200);
    for f in Formulation::ALL {
        let l = exp.split_loss(&exp.corpus.dev, f).unwrap();
        assert!(l < ln_v, "{f}: dev loss {l} not below {ln_v}");
    }
}

#[test]
fn lora_checkpoint_restores_adapters_and_merges() {
    let cfg = tiny("train.max_steps = 20\ntrain.eval_every = 100\npeft.policy = lora\nlora.rank = 4\nlora.targets = qv");
    let mut exp = Experiment::new(cfg).unwrap();
    train(&mut exp, None).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("lora.ckpt");
    save_checkpoint(&exp.reg, &exp.cfg.to_text(), &path).unwrap();
    let ck = load_checkpoint(&path).unwrap();
    let mut back = Experiment::from_checkpoint(&ck).unwrap();
    assert!(back.reg.iter().any(|p| p.name.ends_with(".lora.B")));
    assert_eq!(back.checkpoint().to_bytes().unwrap(), ck.to_bytes().unwrap());
    let test = &exp.corpus.test;
    let want = exp.evaluate_split(test).unwrap();
    assert_eq!(back.evaluate_split(test).unwrap().records, want.records);

    assert_eq!(merge_lora(&mut back.model, &mut back.reg).unwrap(), 2);
    let merged = Checkpoint::from_registry(&back.reg, &back.cfg.to_text());
    let plain = Experiment::from_checkpoint(&merged).unwrap();
    assert!(plain.reg.iter().all(|p| !p.name.contains(".lora.")));
    assert!(plain.model.decoder_linears().all(|l| l.lora.is_none()));
}

#[test]
fn non_finite_loss_aborts_and_keeps_last_good() {
    let mut exp = Experiment::new(tiny("train.max_steps = 10\ntrain.eval_every = 100")).unwrap();
    exp.reg.get_mut("output.proj").unwrap().tensor.data_mut()[0] = f32::NAN;
    let dir = tempfile::tempdir().unwrap();
    let err = train(&mut exp, Some(dir.path())).unwrap_err();
    assert!(matches!(err, Error::NonFinite(_)), "{err}");
    let ck = load_checkpoint(&dir.path().join("last_good.ckpt")).unwrap();
    assert_eq!(ck.to_bytes().unwrap(), exp.checkpoint().to_bytes().unwrap());
}
