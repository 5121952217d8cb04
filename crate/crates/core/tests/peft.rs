use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use s2tt_autodiff::{Graph, Group, ParamRegistry, Tensor};
use s2tt_core::corpus::{FrameSequence, BOS, SEP};
use s2tt_core::decoder::DecoderConfig;
use s2tt_core::encoder::EncoderConfig;
use s2tt_core::model::S2ttModel;
use s2tt_core::optim::{AdamW, OptimState};
use s2tt_core::peft::{
    apply_freeze, apply_lna, apply_lora, lora_forward, merge_lora, merged_weight, FreezePolicy, LoraConfig, LoraTargets,
};
use s2tt_core::taskfmt::{Formulation, TaskSample};

fn model(layers: usize, h: usize, bias: bool) -> S2ttModel {
    let enc = EncoderConfig {
        layers: 1,
        model_dim: 8,
        heads: 2,
        ffn_dim: 16,
        input_dim: 4,
        adaptor_k: 2,
        decoder_dim: h,
    };
    let dec = DecoderConfig {
        layers,
        model_dim: h,
        heads: 2,
        ffn_dim: 2 * h,
        vocab: 12,
        max_positions: 64,
        bias,
    };
    S2ttModel::new(enc, dec).unwrap()
}

fn sample(rng: &mut ChaCha8Rng, with_target: bool) -> TaskSample {
    let n = rng.random_range(2..9);
    let frames = Tensor::new(vec![n, 4], (0..n * 4).map(|_| rng.random_range(-1.0f32..1.0)).collect()).unwrap();
    let target = if with_target {
        (0..rng.random_range(1..5)).map(|_| rng.random_range(4..12)).collect()
    } else {
        Vec::new()
    };
    TaskSample {
        prefix: vec![BOS, rng.random_range(4..12), SEP],
        frames: FrameSequence::new(frames),
        suffix: vec![SEP],
        target,
        formulation: Formulation::Direct,
    }
}

fn logits(m: &S2ttModel, reg: &ParamRegistry<f32>, s: &TaskSample) -> Vec<f32> {
    let mut g = Graph::<f32>::new();
    let b = reg.bind_frozen(&mut g);
    let fwd = m.forward(&mut g, &b, &[s], true).unwrap();
    g.value(fwd.logits).data().to_vec()
}

fn group_numel(reg: &ParamRegistry<f32>, group: Group, trainable: bool) -> usize {
    reg.iter()
        .filter(|p| p.group == group && p.trainable == trainable)
        .map(|p| p.tensor.numel())
        .sum()
}

#[test]
fn lna_counts_on_toy_decoder() {
    let m = model(2, 16, false);
    let mut reg = m.init_registry(0).unwrap();
    let mask = apply_lna(&reg).unwrap();
    mask.apply(&mut reg).unwrap();
    // q, k, v, o of 16x16 in each of 2 layers
    assert_eq!(group_numel(&reg, Group::DecoderAttn, true), 4 * 16 * 16 * 2);
    assert_eq!(group_numel(&reg, Group::DecoderAttn, false), 0);
    for g in [Group::DecoderFfn, Group::DecoderEmbed, Group::OutputProj] {
        assert_eq!(group_numel(&reg, g, true), 0, "{g}");
        assert!(group_numel(&reg, g, false) > 0);
    }
    for g in [Group::Encoder, Group::Adaptor, Group::DecoderLn] {
        assert_eq!(group_numel(&reg, g, false), 0, "{g}");
    }
    assert_eq!(mask.is_trainable("adaptor.conv.weight"), Some(true));
    // 2 layers x 2 norms + final norm, gain and bias each
    assert_eq!(group_numel(&reg, Group::DecoderLn, true), 5 * 2 * 16);
}

#[test]
fn lora_adapter_counts_and_rank_limit() {
    let layers = 3;
    for (rank, targets, per_layer) in [
        (8, LoraTargets::Qv, 2),
        (32, LoraTargets::Qkvo, 4),
        (32, LoraTargets::AllLinear, 6),
    ] {
        let mut m = model(layers, 32, true);
        let mut reg = m.init_registry(1).unwrap();
        let base = reg.len();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (names, mask) = apply_lora(&mut m, &mut reg, &LoraConfig::new(rank, targets), &mut rng).unwrap();
        assert_eq!(names.len(), per_layer * layers, "{targets}");
        assert_eq!(reg.len(), base + 2 * names.len());
        for (name, trainable) in mask.entries() {
            let g = reg.get(name).unwrap().group;
            let want = matches!(g, Group::Encoder | Group::Adaptor | Group::DecoderLora);
            assert_eq!(*trainable, want, "{name}");
        }
        if targets == LoraTargets::AllLinear {
            assert!(names.iter().any(|n| n.ends_with("ffn.up")));
            assert!(names.iter().all(|n| n != "output.proj"));
        }
    }
    let mut m = model(1, 16, true);
    let mut reg = m.init_registry(0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert!(apply_lora(&mut m, &mut reg, &LoraConfig::new(17, LoraTargets::Qv), &mut rng).is_err());
    assert!(apply_lora(&mut m, &mut reg, &LoraConfig::new(0, LoraTargets::Qv), &mut rng).is_err());
}

#[test]
fn lora_hand_case_and_merge() {
    let w = Tensor::from_rows(&[vec![1.0f32, 0.0], vec![0.0, 1.0]]).unwrap();
    let a = Tensor::from_rows(&[vec![0.0f32, 1.0]]).unwrap();
    let b = Tensor::from_rows(&[vec![1.0f32], vec![0.0]]).unwrap();
    let x = Tensor::from_rows(&[vec![3.0f32, 5.0], vec![-2.0, 0.5]]).unwrap();
    let y = lora_forward(&x, &w, &a, &b, 1.0).unwrap();
    assert_eq!(y.data(), &[8.0, 5.0, -1.5, 0.5]);
    let merged = merged_weight(&w, &a, &b, 1.0).unwrap();
    assert_eq!(merged.data(), &[1.0, 1.0, 0.0, 1.0]);
    let zero = Tensor::zeros(&[2, 1]);
    assert_eq!(merged_weight(&w, &a, &zero, 1.0).unwrap(), w);
    assert_eq!(lora_forward(&x, &w, &a, &zero, 1.0).unwrap(), x);
}

#[test]
fn zero_init_adapters_reproduce_base_logits_bitwise() {
    let base = model(2, 16, true);
    let reg0 = base.init_registry(7).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let inputs: Vec<TaskSample> = (0..20).map(|_| sample(&mut rng, true)).collect();
    for targets in [LoraTargets::Qv, LoraTargets::Qkvo, LoraTargets::AllLinear] {
        let mut m = base.clone();
        let mut reg = reg0.clone();
        apply_lora(&mut m, &mut reg, &LoraConfig::new(4, targets), &mut rng).unwrap();
        for s in &inputs {
            let a: Vec<u32> = logits(&base, &reg0, s).iter().map(|v| v.to_bits()).collect();
            let b: Vec<u32> = logits(&m, &reg, s).iter().map(|v| v.to_bits()).collect();
            assert_eq!(a, b);
        }
    }
}

#[test]
fn merged_logits_match_adapter_logits() {
    let base = model(2, 16, true);
    let mut m = base.clone();
    let mut reg = base.init_registry(11).unwrap();
    let pre_count = reg.num_elements();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (names, _) = apply_lora(&mut m, &mut reg, &LoraConfig::new(4, LoraTargets::AllLinear), &mut rng).unwrap();
    // pretend training moved B away from zero
    for n in &names {
        let t = &mut reg.get_mut(&format!("{n}.lora.B")).unwrap().tensor;
        for v in t.data_mut() {
            *v = rng.random_range(-0.1..0.1);
        }
    }
    let inputs: Vec<TaskSample> = (0..100).map(|_| sample(&mut rng, true)).collect();
    let before: Vec<Vec<f32>> = inputs.iter().map(|s| logits(&m, &reg, s)).collect();
    assert_eq!(merge_lora(&mut m, &mut reg).unwrap(), names.len());
    assert_eq!(reg.num_elements(), pre_count);
    assert!(merge_lora(&mut m, &mut reg).is_err());
    let mut worst = 0f32;
    for (s, want) in inputs.iter().zip(&before) {
        for (a, b) in logits(&m, &reg, s).iter().zip(want) {
            worst = worst.max((a - b).abs());
        }
    }
    assert!(worst <= 1e-6, "max abs logit difference {worst}");
}

/// One optimizer step on a random batch; returns the registry before and after.
fn one_step(m: &S2ttModel, reg: &mut ParamRegistry<f32>) -> ParamRegistry<f32> {
    let before = reg.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let samples: Vec<TaskSample> = (0..4).map(|_| sample(&mut rng, true)).collect();
    let refs: Vec<&TaskSample> = samples.iter().collect();
    let grads = {
        let mut g = Graph::<f32>::new();
        let b = reg.bind(&mut g);
        let (loss, _) = m.loss(&mut g, &b, &refs).unwrap();
        let mut grads = g.backward(loss).unwrap();
        reg.collect_grads(&b, &mut grads)
    };
    for (p, gr) in reg.iter().zip(&grads) {
        assert_eq!(p.trainable, gr.is_some(), "{} gradient presence", p.name);
    }
    let mut state = OptimState::new(reg);
    AdamW::default().step(reg, &grads, &mut state, 1e-2).unwrap();
    before
}

#[test]
fn freeze_policies_route_gradients() {
    let m = model(2, 16, true);
    for policy in [FreezePolicy::FreezeEncoder, FreezePolicy::FreezeDecoder, FreezePolicy::Full] {
        let mut reg = m.init_registry(2).unwrap();
        apply_freeze(&reg, policy).unwrap().apply(&mut reg).unwrap();
        let before = one_step(&m, &mut reg);
        for (p, q) in reg.iter().zip(before.iter()) {
            let encoder_side = matches!(p.group, Group::Encoder | Group::Adaptor);
            let lna_side = matches!(p.group, Group::DecoderLn | Group::DecoderAttn);
            let frozen = match policy {
                // the encoder is frozen on top of the LNA decoder selection
                FreezePolicy::FreezeEncoder => !lna_side,
                FreezePolicy::FreezeDecoder => !encoder_side,
                FreezePolicy::Full => false,
            };
            assert_eq!(p.trainable, !frozen, "{policy:?} {}", p.name);
            if frozen {
                assert_eq!(p.tensor, q.tensor, "{policy:?} {} moved", p.name);
            } else {
                assert_ne!(p.tensor, q.tensor, "{policy:?} {} did not move", p.name);
            }
        }
    }
}

#[test]
fn lna_refuses_adapter_groups() {
    let mut m = model(1, 16, true);
    let mut reg = m.init_registry(0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    apply_lora(&mut m, &mut reg, &LoraConfig::new(2, LoraTargets::Qv), &mut rng).unwrap();
    assert!(apply_lna(&reg).is_err());
}
