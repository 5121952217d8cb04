use std::sync::Arc;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use s2tt_autodiff::{grad_check, grad_check_sweep, probe_loss, Graph, Result, Segment, Tensor, Var};

const EPS: f64 = 1e-5;
const TOL: f64 = 1e-4;
const SEEDS: u64 = 20;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn dim(rng: &mut ChaCha8Rng) -> usize {
    rng.random_range(1..=8)
}

fn named(parts: Vec<Tensor<f64>>) -> Vec<(String, Tensor<f64>)> {
    parts
        .into_iter()
        .enumerate()
        .map(|(i, t)| (format!("in{i}"), t))
        .collect()
}

/// Checks `build` over `SEEDS` random draws and fails with the full report.
fn check_seeds<S, B>(label: &str, mut shapes: S, build: B)
where
    S: FnMut(&mut ChaCha8Rng) -> Vec<Vec<usize>>,
    B: Fn(&mut Graph<f64>, &[Var], &[Vec<usize>]) -> Result<Var>,
{
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed * 7919 + label.len() as u64);
        let dims = shapes(&mut rng);
        let inputs = named(dims.iter().map(|s| rand_tensor(&mut rng, s)).collect());
        let report = grad_check(&inputs, EPS, TOL, |g, v| {
            let y = build(g, v, &dims)?;
            probe_loss(g, y)
        })
        .unwrap();
        assert!(report.passed(), "{label} seed {seed}:\n{report}");
    }
}

#[test]
fn matmul_and_transposed_matmul() {
    check_seeds(
        "matmul",
        |r| {
            let (m, k, n) = (dim(r), dim(r), dim(r));
            vec![vec![m, k], vec![k, n]]
        },
        |g, v, _| g.matmul(v[0], v[1]),
    );
    check_seeds(
        "matmul_nt",
        |r| {
            let (m, k, n) = (dim(r), dim(r), dim(r));
            vec![vec![m, k], vec![n, k]]
        },
        |g, v, _| g.matmul_nt(v[0], v[1]),
    );
}

#[test]
fn elementwise_ops() {
    let same = |r: &mut ChaCha8Rng| {
        let s = vec![dim(r), dim(r)];
        vec![s.clone(), s]
    };
    check_seeds("add", same, |g, v, _| g.add(v[0], v[1]));
    check_seeds("mul", same, |g, v, _| g.mul(v[0], v[1]));
    check_seeds(
        "add_bias",
        |r| {
            let (m, n) = (dim(r), dim(r));
            vec![vec![m, n], vec![n]]
        },
        |g, v, _| g.add_bias(v[0], v[1]),
    );
    check_seeds("scale", |r| vec![vec![dim(r), dim(r)]], |g, v, _| Ok(g.scale(v[0], -1.7)));
    check_seeds("gelu", |r| vec![vec![dim(r), dim(r)]], |g, v, _| {
        let x = g.scale(v[0], 3.0);
        Ok(g.gelu(x))
    });
}

#[test]
fn structural_ops() {
    check_seeds(
        "concat_rows",
        |r| {
            let c = dim(r);
            vec![vec![dim(r), c], vec![dim(r), c], vec![dim(r), c]]
        },
        |g, v, _| g.concat_rows(v),
    );
    check_seeds(
        "slice_rows",
        |r| vec![vec![dim(r) + 2, dim(r)]],
        |g, v, s| g.slice_rows(v[0], 1, s[0][0] - 2),
    );
    check_seeds(
        "concat_cols",
        |r| {
            let m = dim(r);
            vec![vec![m, dim(r)], vec![m, dim(r)]]
        },
        |g, v, _| g.concat_cols(v),
    );
    check_seeds(
        "slice_cols",
        |r| vec![vec![dim(r), dim(r) + 2]],
        |g, v, s| g.slice_cols(v[0], 1, s[0][1] - 2),
    );
    check_seeds("pad_rows", |r| vec![vec![dim(r), dim(r)]], |g, v, _| Ok(g.pad_rows(v[0], 3)));
    check_seeds(
        "reshape",
        |r| vec![vec![dim(r), 2 * dim(r)]],
        |g, v, s| g.reshape(v[0], &[s[0][0] * s[0][1] / 2, 2]),
    );
    check_seeds("transpose", |r| vec![vec![dim(r), dim(r)]], |g, v, _| g.transpose(v[0]));
    check_seeds(
        "gather_rows",
        |r| vec![vec![dim(r) + 1, dim(r)]],
        |g, v, s| {
            let rows = s[0][0];
            let ids: Vec<usize> = (0..6).map(|i| (i * 3 + 1) % rows).collect();
            g.gather_rows(v[0], &ids)
        },
    );
}

#[test]
fn reductions() {
    check_seeds("sum", |r| vec![vec![dim(r), dim(r)]], |g, v, _| {
        let s = g.sum(v[0]);
        g.mul(s, s)
    });
    check_seeds("mean", |r| vec![vec![dim(r), dim(r)]], |g, v, _| {
        let m = g.mean(v[0]);
        g.mul(m, m)
    });
}

#[test]
fn layer_norm_grad() {
    check_seeds(
        "layer_norm",
        |r| {
            let h = r.random_range(2..=8);
            vec![vec![dim(r), h], vec![h], vec![h]]
        },
        |g, v, _| g.layer_norm(v[0], v[1], v[2], 1e-5),
    );
}

#[test]
fn softmax_grad() {
    check_seeds("softmax", |r| vec![vec![dim(r), dim(r)]], |g, v, _| Ok(g.softmax_rows(v[0], false)));
    check_seeds(
        "softmax_causal",
        |r| {
            let n = dim(r);
            vec![vec![n, n]]
        },
        |g, v, _| Ok(g.softmax_rows(v[0], true)),
    );
}

#[test]
fn attention_grad() {
    for causal in [true, false] {
        check_seeds(
            if causal { "attn_causal" } else { "attn_bidir" },
            |r| {
                let heads = r.random_range(1..=2);
                let h = heads * r.random_range(1..=4);
                let n = r.random_range(2..=8);
                vec![vec![n, h], vec![n, h], vec![n, h], vec![heads]]
            },
            |g, v, s| {
                let n = s[0][0];
                let heads = s[3][0];
                let split = n / 2;
                let segs = if split == 0 || split == n {
                    vec![Segment::new(0, n)]
                } else {
                    vec![Segment::new(0, split), Segment::new(split, n - split)]
                };
                g.attention(v[0], v[1], v[2], &segs, heads, causal)
            },
        );
    }
}

#[test]
fn attention_context_grad() {
    for causal in [true, false] {
        check_seeds(
            if causal { "attn_ctx_causal" } else { "attn_ctx_bidir" },
            |r| {
                let heads = r.random_range(1..=2);
                let h = heads * r.random_range(1..=4);
                // one shared context of c rows, then two segments using it
                let c = r.random_range(1..=3);
                let n = c + r.random_range(2..=6);
                vec![vec![n, h], vec![n, h], vec![n, h], vec![heads, c]]
            },
            |g, v, s| {
                let n = s[0][0];
                let (heads, c) = (s[3][0], s[3][1]);
                let rest = n - c;
                let split = c + rest / 2;
                let ctx = Segment::new(0, c);
                let segs = [Segment::new(0, c), Segment::new(c, split - c), Segment::new(split, n - split)];
                g.attention_with_context(v[0], v[1], v[2], &segs, &[None, Some(ctx), Some(ctx)], heads, causal)
            },
        );
    }
}

#[test]
fn attention_context_matches_concatenation() {
    // a segment with a context equals the tail rows of one causal segment over both
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut g = Graph::<f64>::new();
    let q = g.param(rand_tensor(&mut rng, &[7, 4]));
    let k = g.param(rand_tensor(&mut rng, &[7, 4]));
    let v = g.param(rand_tensor(&mut rng, &[7, 4]));
    let joint = g.attention(q, k, v, &[Segment::new(0, 7)], 2, true).unwrap();
    let segs = [Segment::new(0, 3), Segment::new(3, 4)];
    let split = g
        .attention_with_context(q, k, v, &segs, &[None, Some(Segment::new(0, 3))], 2, true)
        .unwrap();
    for (a, b) in g.value(joint).data().iter().zip(g.value(split).data()) {
        assert!((a - b).abs() < 1e-12);
    }
    assert!(g
        .attention_with_context(q, k, v, &segs, &[None], 2, true)
        .is_err());
}

#[test]
fn cross_entropy_grad() {
    check_seeds(
        "cross_entropy",
        |r| vec![vec![dim(r) + 1, dim(r) + 1]],
        |g, v, s| {
            let (rows, vocab) = (s[0][0], s[0][1]);
            let targets: Vec<usize> = (0..rows).map(|i| (i * 5 + 2) % vocab).collect();
            let mask: Vec<bool> = (0..rows).map(|i| i % 3 != 1).collect();
            let x = g.scale(v[0], 2.0);
            g.softmax_cross_entropy(x, &targets, &mask)
        },
    );
}

#[test]
fn conv1d_grad() {
    check_seeds(
        "conv1d",
        |r| {
            let k = r.random_range(1..=3);
            let (c_in, c_out) = (dim(r), dim(r));
            vec![vec![dim(r), c_in], vec![k, c_in, c_out], vec![c_out]]
        },
        |g, v, s| g.conv1d(v[0], v[1], v[2], s[1][0]),
    );
    check_seeds(
        "conv1d_packed",
        |r| {
            let k = r.random_range(1..=3);
            let c = dim(r);
            vec![vec![7, c], vec![k, c, 3], vec![3]]
        },
        |g, v, s| {
            let segs = [Segment::new(0, 3), Segment::new(3, 4)];
            Ok(g.conv1d_packed(v[0], &segs, v[1], v[2], s[1][0])?.0)
        },
    );
}

#[test]
fn corrupted_backward_is_reported() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let inputs = named(vec![rand_tensor(&mut rng, &[3, 3])]);
    let report = grad_check(&inputs, EPS, TOL, |g, v| {
        // forward: x^2, backward deliberately claims 3x instead of 2x
        let x = g.value(v[0]).clone();
        let sq: Vec<f64> = x.data().iter().map(|a| a * a).collect();
        let out = Tensor::new(x.shape().to_vec(), sq).unwrap();
        let y = g.custom(
            &[v[0]],
            out,
            Arc::new(|gout, parents, _| {
                let d = gout
                    .data()
                    .iter()
                    .zip(parents[0].data())
                    .map(|(g, x)| 3.0 * x * g)
                    .collect();
                vec![Tensor::new(gout.shape().to_vec(), d).unwrap()]
            }),
        );
        probe_loss(g, y)
    })
    .unwrap();
    assert!(!report.passed());
    assert_eq!(report.failures().count(), 1);
}

#[test]
fn eps_sweep_reports_each_step() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let inputs = named(vec![rand_tensor(&mut rng, &[4, 3]), rand_tensor(&mut rng, &[3, 5])]);
    let reports = grad_check_sweep(&inputs, &[1e-4, 1e-5, 1e-6], TOL, |g, v| {
        let y = g.matmul(v[0], v[1])?;
        let y = g.gelu(y);
        probe_loss(g, y)
    })
    .unwrap();
    assert_eq!(reports.len(), 3);
    for r in &reports {
        assert!(r.passed(), "{r}");
        assert_eq!(r.entries.len(), 2);
    }
    assert_eq!(reports.iter().map(|r| r.eps).collect::<Vec<_>>(), vec![1e-4, 1e-5, 1e-6]);
}

fn attention_loss_grads(seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut g = Graph::<f64>::new();
    let x = g.param(rand_tensor(&mut rng, &[6, 4]));
    let w = g.param(rand_tensor(&mut rng, &[4, 4]));
    let q = g.matmul(x, w).unwrap();
    let a = g.attention(q, q, x, &[Segment::new(0, 6)], 2, true).unwrap();
    let loss = probe_loss(&mut g, a).unwrap();
    let grads = g.backward(loss).unwrap();
    let mut out = grads.get(x).unwrap().data().to_vec();
    out.extend_from_slice(grads.get(w).unwrap().data());
    // a second sweep starts from fresh zero accumulators
    let again = g.backward(loss).unwrap();
    assert_eq!(again.get(x).unwrap().data(), &out[..24]);
    out
}

#[test]
fn backward_is_bit_deterministic() {
    for seed in 0..5 {
        let a = attention_loss_grads(seed);
        let b = attention_loss_grads(seed);
        assert_eq!(a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }
}

proptest! {
    #[test]
    fn conv1d_output_length_law(n in 1usize..=64, k in prop::sample::select(vec![1usize, 2, 4, 8])) {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::full(&[n, 3], 1.0));
        let w = g.constant(Tensor::full(&[k, 3, 2], 0.5));
        let b = g.constant(Tensor::zeros(&[2]));
        let y = g.conv1d(x, w, b, k).unwrap();
        prop_assert_eq!(g.shape(y), &[n.div_ceil(k), 2][..]);
    }
}
