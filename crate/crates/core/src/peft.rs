//! Trainability policies: LNA, LoRA adapters and freeze ablations.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use s2tt_autodiff::{matmul_plain, Graph, Group, ParamRegistry, Tensor};

use crate::error::{Error, Result};
use crate::model::S2ttModel;
use crate::nn::{normal_tensor, Linear, LoraAttachment};

pub const LORA_A_STD: f64 = 0.02;

/// Per-parameter trainable flag, in registry order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainabilityMask {
    entries: Vec<(String, bool)>,
}

impl TrainabilityMask {
    fn from_rule<F: Fn(Group) -> Result<bool>>(reg: &ParamRegistry<f32>, rule: F) -> Result<Self> {
        let entries = reg
            .iter()
            .map(|p| Ok((p.name.clone(), rule(p.group)?)))
            .collect::<Result<_>>()?;
        Ok(Self { entries })
    }

    pub fn is_trainable(&self, name: &str) -> Option<bool> {
        self.entries.iter().find(|(n, _)| n == name).map(|&(_, t)| t)
    }

    pub fn entries(&self) -> &[(String, bool)] {
        &self.entries
    }

    pub fn trainable_names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().filter(|e| e.1).map(|e| e.0.as_str())
    }

    pub fn apply(&self, reg: &mut ParamRegistry<f32>) -> Result<()> {
        for (name, t) in &self.entries {
            reg.set_trainable(name, *t)?;
        }
        Ok(())
    }
}

fn lna_rule(g: Group) -> Result<bool> {
    match g {
        Group::Encoder | Group::Adaptor | Group::DecoderLn | Group::DecoderAttn => Ok(true),
        Group::DecoderEmbed | Group::DecoderFfn | Group::OutputProj => Ok(false),
        Group::DecoderLora => Err(Error::Tensor(s2tt_autodiff::TensorError::Registry(format!(
            "group `{g}` has no meaning under the LNA policy"
        )))),
    }
}

/// Encoder and adaptor plus every decoder layer norm and attention projection.
pub fn apply_lna(reg: &ParamRegistry<f32>) -> Result<TrainabilityMask> {
    TrainabilityMask::from_rule(reg, lna_rule)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FreezePolicy {
    /// LNA on the decoder with the encoder and adaptor frozen.
    FreezeEncoder,
    /// Encoder and adaptor trainable, the whole decoder frozen.
    FreezeDecoder,
    Full,
}

pub fn apply_freeze(reg: &ParamRegistry<f32>, policy: FreezePolicy) -> Result<TrainabilityMask> {
    TrainabilityMask::from_rule(reg, |g| match policy {
        FreezePolicy::FreezeEncoder => match g {
            Group::Encoder | Group::Adaptor => Ok(false),
            _ => lna_rule(g),
        },
        FreezePolicy::FreezeDecoder => Ok(!g.is_decoder()),
        FreezePolicy::Full => Ok(true),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LoraTargets {
    Qv,
    Qkvo,
    AllLinear,
}

impl LoraTargets {
    /// Projection suffixes within a decoder layer.
    pub fn suffixes(self) -> &'static [&'static str] {
        match self {
            LoraTargets::Qv => &["attn.q", "attn.v"],
            LoraTargets::Qkvo => &["attn.q", "attn.k", "attn.v", "attn.o"],
            LoraTargets::AllLinear => &["attn.q", "attn.k", "attn.v", "attn.o", "ffn.up", "ffn.down"],
        }
    }

    pub fn matches(self, linear_name: &str) -> bool {
        self.suffixes()
            .iter()
            .any(|s| linear_name.strip_suffix(s).is_some_and(|p| p.ends_with('.')))
    }
}

impl fmt::Display for LoraTargets {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LoraTargets::Qv => "qv",
            LoraTargets::Qkvo => "qkvo",
            LoraTargets::AllLinear => "all-linear",
        })
    }
}

impl FromStr for LoraTargets {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "qv" => Ok(LoraTargets::Qv),
            "qkvo" => Ok(LoraTargets::Qkvo),
            "all-linear" | "all" => Ok(LoraTargets::AllLinear),
            _ => Err(Error::Config(format!("unknown lora target set `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LoraConfig {
    pub rank: usize,
    /// Defaults to `rank` (scale 1) when unset.
    pub alpha: Option<f64>,
    pub targets: LoraTargets,
}

impl LoraConfig {
    pub fn new(rank: usize, targets: LoraTargets) -> Self {
        Self {
            rank,
            alpha: None,
            targets,
        }
    }

    pub fn scale(&self) -> f64 {
        self.alpha.unwrap_or(self.rank as f64) / self.rank as f64
    }
}

/// Attaches an `(A, B)` pair to every targeted decoder projection. All base
/// decoder weights are frozen; encoder, adaptor and adapters train.
pub fn apply_lora<R: Rng>(
    model: &mut S2ttModel,
    reg: &mut ParamRegistry<f32>,
    cfg: &LoraConfig,
    rng: &mut R,
) -> Result<(Vec<String>, TrainabilityMask)> {
    if cfg.rank == 0 {
        return Err(Error::Config("lora.rank must be at least 1".into()));
    }
    let mut targets = Vec::new();
    for lin in model.decoder_linears_mut() {
        if !cfg.targets.matches(&lin.name) {
            continue;
        }
        if cfg.rank > lin.d_in.min(lin.d_out) {
            return Err(Error::Config(format!(
                "lora.rank {} exceeds min(d_in, d_out) = {} for `{}`",
                cfg.rank,
                lin.d_in.min(lin.d_out),
                lin.name
            )));
        }
        if lin.lora.is_some() {
            return Err(Error::Config(format!("`{}` already has an adapter", lin.name)));
        }
        reg.register(
            lin.lora_a_name(),
            normal_tensor(rng, &[cfg.rank, lin.d_in], LORA_A_STD),
            Group::DecoderLora,
        )?;
        reg.register(
            lin.lora_b_name(),
            Tensor::zeros(&[lin.d_out, cfg.rank]),
            Group::DecoderLora,
        )?;
        lin.lora = Some(LoraAttachment {
            rank: cfg.rank,
            scale: cfg.scale(),
        });
        targets.push(lin.name.clone());
    }
    if targets.is_empty() {
        return Err(Error::Config("lora target set matched no decoder projection".into()));
    }
    let mask = TrainabilityMask::from_rule(reg, |g| {
        Ok(matches!(g, Group::Encoder | Group::Adaptor | Group::DecoderLora))
    })?;
    Ok((targets, mask))
}

/// Re-attaches adapters whose matrices are already present in `reg`
/// (e.g. after loading a checkpoint). Returns the attached targets.
pub fn attach_existing_lora(model: &mut S2ttModel, reg: &ParamRegistry<f32>, alpha: Option<f64>) -> Result<Vec<String>> {
    let mut names = Vec::new();
    for lin in model.decoder_linears_mut() {
        if !reg.contains(&lin.lora_a_name()) {
            continue;
        }
        let rank = reg.tensor(&lin.lora_a_name())?.shape()[0];
        lin.lora = Some(LoraAttachment {
            rank,
            scale: alpha.unwrap_or(rank as f64) / rank as f64,
        });
        names.push(lin.name.clone());
    }
    Ok(names)
}

/// `y = x·Wᵀ + scale · (x·Aᵀ)·Bᵀ` for row-vector inputs `x [N x d_in]`.
pub fn lora_forward(x: &Tensor<f32>, w: &Tensor<f32>, a: &Tensor<f32>, b: &Tensor<f32>, scale: f64) -> Result<Tensor<f32>> {
    let mut g = Graph::<f32>::new();
    let xv = g.constant(x.clone());
    let mut reg = ParamRegistry::new();
    reg.register("t.weight", w.clone(), Group::DecoderAttn)?;
    reg.register("t.lora.A", a.clone(), Group::DecoderLora)?;
    reg.register("t.lora.B", b.clone(), Group::DecoderLora)?;
    let bound = reg.bind_frozen(&mut g);
    let mut lin = Linear::new("t", w.shape()[1], w.shape()[0], false);
    lin.lora = Some(LoraAttachment {
        rank: a.shape()[0],
        scale,
    });
    let y = lin.forward(&mut g, &bound, xv)?;
    Ok(g.value(y).clone())
}

/// `W' = W + scale · B·A`.
pub fn merged_weight(w: &Tensor<f32>, a: &Tensor<f32>, b: &Tensor<f32>, scale: f64) -> Result<Tensor<f32>> {
    let ba = matmul_plain(b, a)?;
    if ba.shape() != w.shape() {
        return Err(Error::Config(format!(
            "adapter product {:?} does not match weight {:?}",
            ba.shape(),
            w.shape()
        )));
    }
    let data = w
        .data()
        .iter()
        .zip(ba.data())
        .map(|(&w, &d)| (w as f64 + scale * d as f64) as f32)
        .collect();
    Ok(Tensor::new(w.shape().to_vec(), data)?)
}

/// Folds every active adapter into its base weight and removes it.
/// Errors when no adapter is active (e.g. merging twice).
pub fn merge_lora(model: &mut S2ttModel, reg: &mut ParamRegistry<f32>) -> Result<usize> {
    let mut merged = 0;
    for lin in model.decoder_linears_mut() {
        let Some(att) = lin.lora else { continue };
        let a = reg.remove(&lin.lora_a_name())?.tensor;
        let b = reg.remove(&lin.lora_b_name())?.tensor;
        let w = reg.tensor(&lin.weight_name())?;
        let w2 = merged_weight(w, &a, &b, att.scale)?;
        reg.get_mut(&lin.weight_name())?.tensor = w2;
        lin.lora = None;
        merged += 1;
    }
    if merged == 0 {
        return Err(Error::Config("no active LoRA adapters to merge".into()));
    }
    Ok(merged)
}

/// Policy selected by `peft.policy`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PeftPolicy {
    Lna,
    Lora(LoraConfig),
    Freeze(FreezePolicy),
}

impl PeftPolicy {
    pub fn tag(&self) -> String {
        match self {
            PeftPolicy::Lna => "lna".into(),
            PeftPolicy::Lora(c) => format!("lora-{}-r{}", c.targets, c.rank),
            PeftPolicy::Freeze(FreezePolicy::FreezeEncoder) => "freeze-encoder".into(),
            PeftPolicy::Freeze(FreezePolicy::FreezeDecoder) => "freeze-decoder".into(),
            PeftPolicy::Freeze(FreezePolicy::Full) => "full".into(),
        }
    }

    /// Installs the policy on a freshly initialised model.
    pub fn install<R: Rng>(&self, model: &mut S2ttModel, reg: &mut ParamRegistry<f32>, rng: &mut R) -> Result<TrainabilityMask> {
        let mask = match self {
            PeftPolicy::Lna => apply_lna(reg)?,
            PeftPolicy::Lora(cfg) => apply_lora(model, reg, cfg, rng)?.1,
            PeftPolicy::Freeze(p) => apply_freeze(reg, *p)?,
        };
        mask.apply(reg)?;
        Ok(mask)
    }
}

impl FromStr for PeftPolicy {
    type Err = Error;

    /// Parses the form produced by [`PeftPolicy::tag`], e.g. `lora-qkvo-r32`.
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lna" => return Ok(PeftPolicy::Lna),
            "freeze-encoder" => return Ok(PeftPolicy::Freeze(FreezePolicy::FreezeEncoder)),
            "freeze-decoder" => return Ok(PeftPolicy::Freeze(FreezePolicy::FreezeDecoder)),
            "full" => return Ok(PeftPolicy::Freeze(FreezePolicy::Full)),
            _ => {}
        }
        let bad = || Error::Config(format!("unknown policy `{s}`"));
        let rest = s.strip_prefix("lora-").ok_or_else(bad)?;
        let (targets, rank) = rest.rsplit_once("-r").ok_or_else(bad)?;
        let rank = rank.parse().map_err(|_| bad())?;
        Ok(PeftPolicy::Lora(LoraConfig::new(rank, targets.parse()?)))
    }
}

impl fmt::Display for PeftPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.tag())
    }
}
