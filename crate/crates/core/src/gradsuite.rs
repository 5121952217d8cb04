//! Finite-difference gradient suite over the autodiff primitives and
//! one-layer encoder/decoder models, as run by `s2tt gradcheck`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use s2tt_autodiff::{grad_check, probe_loss, Graph, Segment, Tensor, TensorError, Var};

use crate::corpus::{FrameSequence, BOS, EOS, SEP};
use crate::decoder::DecoderConfig;
use crate::encoder::EncoderConfig;
use crate::model::S2ttModel;
use crate::taskfmt::{Formulation, TaskSample};

pub const EPS: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteRow {
    pub name: String,
    pub seeds: u64,
    pub worst_rel_error: f64,
    /// First failing seed, if any.
    pub failed_seed: Option<u64>,
}

impl SuiteRow {
    pub fn passed(&self) -> bool {
        self.failed_seed.is_none()
    }
}

type Shapes = fn(&mut ChaCha8Rng) -> Vec<Vec<usize>>;
type Build = fn(&mut Graph<f64>, &[Var], &[Vec<usize>]) -> s2tt_autodiff::Result<Var>;

fn d(r: &mut ChaCha8Rng) -> usize {
    r.random_range(1..=8)
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
        .expect("shape matches data")
}

fn halves(n: usize) -> Vec<Segment> {
    let split = n / 2;
    if split == 0 {
        vec![Segment::new(0, n)]
    } else {
        vec![Segment::new(0, split), Segment::new(split, n - split)]
    }
}

fn primitives() -> Vec<(&'static str, Shapes, Build)> {
    vec![
        ("matmul", |r| {
            let (m, k, n) = (d(r), d(r), d(r));
            vec![vec![m, k], vec![k, n]]
        }, |g, v, _| g.matmul(v[0], v[1])),
        ("matmul_nt", |r| {
            let (m, k, n) = (d(r), d(r), d(r));
            vec![vec![m, k], vec![n, k]]
        }, |g, v, _| g.matmul_nt(v[0], v[1])),
        ("add", |r| {
            let s = vec![d(r), d(r)];
            vec![s.clone(), s]
        }, |g, v, _| g.add(v[0], v[1])),
        ("mul", |r| {
            let s = vec![d(r), d(r)];
            vec![s.clone(), s]
        }, |g, v, _| g.mul(v[0], v[1])),
        ("add_bias", |r| {
            let (m, n) = (d(r), d(r));
            vec![vec![m, n], vec![n]]
        }, |g, v, _| g.add_bias(v[0], v[1])),
        ("gelu", |r| vec![vec![d(r), d(r)]], |g, v, _| {
            let x = g.scale(v[0], 3.0);
            Ok(g.gelu(x))
        }),
        ("layer_norm", |r| {
            let h = r.random_range(2..=8);
            vec![vec![d(r), h], vec![h], vec![h]]
        }, |g, v, _| g.layer_norm(v[0], v[1], v[2], 1e-5)),
        ("softmax_causal", |r| {
            let n = d(r);
            vec![vec![n, n]]
        }, |g, v, _| Ok(g.softmax_rows(v[0], true))),
        ("gather_rows", |r| vec![vec![d(r) + 1, d(r)]], |g, v, s| {
            let ids: Vec<usize> = (0..6).map(|i| (i * 3 + 1) % s[0][0]).collect();
            g.gather_rows(v[0], &ids)
        }),
        ("concat_slice_rows", |r| {
            let c = d(r);
            vec![vec![d(r) + 1, c], vec![d(r), c]]
        }, |g, v, _| {
            let a = g.slice_rows(v[0], 1, 1)?;
            g.concat_rows(&[v[1], a, v[0]])
        }),
        ("attention_causal", |r| {
            let heads = r.random_range(1..=2);
            vec![vec![6, 2 * heads]; 3]
        }, |g, v, s| g.attention(v[0], v[1], v[2], &halves(6), s[0][1] / 2, true)),
        ("attention_bidirectional", |r| {
            let heads = r.random_range(1..=2);
            vec![vec![7, 2 * heads]; 3]
        }, |g, v, s| g.attention(v[0], v[1], v[2], &halves(7), s[0][1] / 2, false)),
        ("attention_context", |r| {
            let heads = r.random_range(1..=2);
            vec![vec![8, 2 * heads]; 3]
        }, |g, v, s| {
            let ctx = Segment::new(0, 3);
            let segs = [ctx, Segment::new(3, 2), Segment::new(5, 3)];
            g.attention_with_context(v[0], v[1], v[2], &segs, &[None, Some(ctx), Some(ctx)], s[0][1] / 2, true)
        }),
        ("conv1d_packed", |r| {
            let k = r.random_range(1..=3);
            let c = d(r);
            vec![vec![7, c], vec![k, c, 3], vec![3]]
        }, |g, v, s| {
            let segs = [Segment::new(0, 3), Segment::new(3, 4)];
            Ok(g.conv1d_packed(v[0], &segs, v[1], v[2], s[1][0])?.0)
        }),
        ("weighted_cross_entropy", |r| vec![vec![d(r) + 1, d(r) + 1]], |g, v, s| {
            let (rows, vocab) = (s[0][0], s[0][1]);
            let targets: Vec<usize> = (0..rows).map(|i| (i * 5 + 2) % vocab).collect();
            let weights: Vec<f64> = (0..rows).map(|i| if i % 3 == 1 { 0.0 } else { 0.5 }).collect();
            let x = g.scale(v[0], 2.0);
            g.weighted_cross_entropy(x, &targets, &weights)
        }),
    ]
}

fn tiny_model(k: usize) -> S2ttModel {
    let enc = EncoderConfig {
        layers: 1,
        model_dim: 8,
        heads: 2,
        ffn_dim: 8,
        input_dim: 4,
        adaptor_k: k,
        decoder_dim: 8,
    };
    let dec = DecoderConfig {
        layers: 1,
        model_dim: 8,
        heads: 2,
        ffn_dim: 8,
        vocab: 10,
        max_positions: 64,
        bias: true,
    };
    S2ttModel::new(enc, dec).expect("valid tiny config")
}

fn frames(rng: &mut ChaCha8Rng, n: usize) -> FrameSequence {
    let data = (0..n * 4).map(|_| rng.random_range(-1.0f32..1.0)).collect();
    FrameSequence::new(Tensor::new(vec![n, 4], data).expect("shape matches data"))
}

fn toy_sample(rng: &mut ChaCha8Rng, prefix: usize, n_frames: usize, target: usize) -> TaskSample {
    let mut p = vec![BOS];
    p.extend((2..prefix).map(|_| rng.random_range(4..10)));
    p.push(SEP);
    let mut t: Vec<u32> = (1..target).map(|_| rng.random_range(4..10)).collect();
    t.push(EOS);
    TaskSample {
        prefix: p,
        frames: frames(rng, n_frames),
        suffix: vec![SEP],
        target: t,
        formulation: Formulation::Direct,
    }
}

fn lift(e: crate::Error) -> TensorError {
    match e {
        crate::Error::Tensor(t) => t,
        other => TensorError::Config(other.to_string()),
    }
}

/// Worst relative error of one model-level check, or the error message.
fn model_case(seed: u64, encoder_only: bool) -> Result<(f64, bool), String> {
    let model = tiny_model(1 + (seed as usize % 2));
    let reg = model
        .init_registry(seed)
        .map_err(|e| e.to_string())?
        .cast::<f64>();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = [toy_sample(&mut rng, 4, 5, 3), toy_sample(&mut rng, 3, 3, 2)];
    samples[1].prefix = samples[0].prefix.clone();
    let refs: Vec<&TaskSample> = samples.iter().collect();
    let report = grad_check(&reg.named_tensors(), EPS, TOLERANCE, |g, vars| {
        let b = reg.bind_vars(vars)?;
        if encoder_only {
            let (y, _) = model.speech(g, &b, &refs).map_err(lift)?;
            probe_loss(g, y)
        } else {
            Ok(model.loss(g, &b, &refs).map_err(lift)?.0)
        }
    })
    .map_err(|e| e.to_string())?;
    Ok((report.max_rel_error(), report.passed()))
}

/// Runs every case for `seeds` seeds.
pub fn run_suite(seeds: u64) -> Vec<SuiteRow> {
    let mut rows = Vec::new();
    for (name, shapes, build) in primitives() {
        let mut row = SuiteRow {
            name: name.into(),
            seeds,
            worst_rel_error: 0.0,
            failed_seed: None,
        };
        for seed in 0..seeds {
            let mut rng = ChaCha8Rng::seed_from_u64(seed * 7919 + name.len() as u64);
            let dims = shapes(&mut rng);
            let inputs: Vec<(String, Tensor<f64>)> = dims
                .iter()
                .enumerate()
                .map(|(i, s)| (format!("in{i}"), rand_tensor(&mut rng, s)))
                .collect();
            let res = grad_check(&inputs, EPS, TOLERANCE, |g, v| {
                let y = build(g, v, &dims)?;
                probe_loss(g, y)
            });
            match res {
                Ok(r) => {
                    row.worst_rel_error = row.worst_rel_error.max(r.max_rel_error());
                    if !r.passed() && row.failed_seed.is_none() {
                        row.failed_seed = Some(seed);
                    }
                }
                Err(_) => {
                    row.worst_rel_error = f64::INFINITY;
                    row.failed_seed.get_or_insert(seed);
                }
            }
        }
        rows.push(row);
    }
    for (name, encoder_only) in [("encoder_block_and_adaptor", true), ("decoder_block_full_model", false)] {
        let mut row = SuiteRow {
            name: name.into(),
            seeds,
            worst_rel_error: 0.0,
            failed_seed: None,
        };
        for seed in 0..seeds {
            match model_case(seed, encoder_only) {
                Ok((rel, ok)) => {
                    row.worst_rel_error = row.worst_rel_error.max(rel);
                    if !ok {
                        row.failed_seed.get_or_insert(seed);
                    }
                }
                Err(_) => {
                    row.worst_rel_error = f64::INFINITY;
                    row.failed_seed.get_or_insert(seed);
                }
            }
        }
        rows.push(row);
    }
    rows
}
