//! Named parameter store with trainability flags and group tags.

use std::collections::HashMap;
use std::fmt;

use crate::error::{Result, TensorError};
use crate::graph::{Gradients, Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Partition of model parameters used by fine-tuning policies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Group {
    Encoder,
    Adaptor,
    DecoderEmbed,
    DecoderLn,
    DecoderAttn,
    DecoderFfn,
    OutputProj,
    /// Low-rank adapter factors injected beside frozen decoder weights.
    DecoderLora,
}

impl Group {
    pub const ALL: [Group; 8] = [
        Group::Encoder,
        Group::Adaptor,
        Group::DecoderEmbed,
        Group::DecoderLn,
        Group::DecoderAttn,
        Group::DecoderFfn,
        Group::OutputProj,
        Group::DecoderLora,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            Group::Encoder => "encoder",
            Group::Adaptor => "adaptor",
            Group::DecoderEmbed => "decoder-embed",
            Group::DecoderLn => "decoder-ln",
            Group::DecoderAttn => "decoder-attn",
            Group::DecoderFfn => "decoder-ffn",
            Group::OutputProj => "output-proj",
            Group::DecoderLora => "decoder-lora",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Group> {
        Group::ALL.into_iter().find(|g| g.tag() == tag)
    }

    /// True for every group owned by the text decoder (including its head).
    pub fn is_decoder(self) -> bool {
        !matches!(self, Group::Encoder | Group::Adaptor)
    }
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param<F> {
    pub name: String,
    pub tensor: Tensor<F>,
    pub trainable: bool,
    pub group: Group,
}

/// Ordered `name -> (tensor, trainable, group)` map.
///
/// Iteration order is registration order, which fixes the gradient
/// reduction order and the checkpoint layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamRegistry<F> {
    params: Vec<Param<F>>,
    index: HashMap<String, usize>,
}

impl<F: Scalar> Default for ParamRegistry<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> ParamRegistry<F> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            index: HashMap::new(),
        }
    }

    /// Registers a trainable parameter. Names must be unique.
    pub fn register(&mut self, name: impl Into<String>, tensor: Tensor<F>, group: Group) -> Result<usize> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(TensorError::Registry(format!("duplicate parameter name `{name}`")));
        }
        let id = self.params.len();
        self.index.insert(name.clone(), id);
        self.params.push(Param {
            name,
            tensor,
            trainable: true,
            group,
        });
        Ok(id)
    }

    /// Removes a parameter, shifting later ids down by one.
    pub fn remove(&mut self, name: &str) -> Result<Param<F>> {
        let id = self.id(name)?;
        let p = self.params.remove(id);
        self.rebuild_index();
        Ok(p)
    }

    fn rebuild_index(&mut self) {
        self.index = self
            .params
            .iter()
            .enumerate()
            .map(|(i, p)| (p.name.clone(), i))
            .collect();
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn id(&self, name: &str) -> Result<usize> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| TensorError::Registry(format!("unknown parameter `{name}`")))
    }

    pub fn get(&self, name: &str) -> Result<&Param<F>> {
        Ok(&self.params[self.id(name)?])
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Param<F>> {
        let id = self.id(name)?;
        Ok(&mut self.params[id])
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor<F>> {
        Ok(&self.get(name)?.tensor)
    }

    pub fn params(&self) -> &[Param<F>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<F>] {
        &mut self.params
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<F>> {
        self.params.iter()
    }

    pub fn num_elements(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    pub fn num_trainable_elements(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.tensor.numel())
            .sum()
    }

    pub fn set_trainable(&mut self, name: &str, trainable: bool) -> Result<()> {
        self.get_mut(name)?.trainable = trainable;
        Ok(())
    }

    /// Inserts every parameter as a leaf; only trainable ones track grads.
    pub fn bind(&self, graph: &mut Graph<F>) -> Bound<'_> {
        self.bind_inner(graph, true)
    }

    /// Inserts every parameter as a constant leaf (inference).
    pub fn bind_frozen(&self, graph: &mut Graph<F>) -> Bound<'_> {
        self.bind_inner(graph, false)
    }

    /// Wraps graph handles created elsewhere (one per parameter, in
    /// registry order), e.g. the inputs of [`crate::grad_check`].
    pub fn bind_vars(&self, vars: &[Var]) -> Result<Bound<'_>> {
        if vars.len() != self.params.len() {
            return Err(TensorError::Registry(format!(
                "{} vars for {} parameters",
                vars.len(),
                self.params.len()
            )));
        }
        Ok(Bound {
            index: &self.index,
            vars: vars.to_vec(),
        })
    }

    /// `(name, tensor)` pairs in registry order.
    pub fn named_tensors(&self) -> Vec<(String, Tensor<F>)> {
        self.params
            .iter()
            .map(|p| (p.name.clone(), p.tensor.clone()))
            .collect()
    }

    fn bind_inner(&self, graph: &mut Graph<F>, track: bool) -> Bound<'_> {
        let vars = self
            .params
            .iter()
            .map(|p| graph.leaf(p.tensor.clone(), track && p.trainable))
            .collect();
        Bound {
            index: &self.index,
            vars,
        }
    }

    /// Gradient per parameter in registry order; `None` for frozen ones.
    /// Trainable parameters the loss never touched get explicit zeros.
    pub fn collect_grads(&self, bound: &Bound<'_>, grads: &mut Gradients<F>) -> Vec<Option<Tensor<F>>> {
        self.params
            .iter()
            .zip(&bound.vars)
            .map(|(p, &v)| {
                p.trainable.then(|| {
                    grads
                        .take(v)
                        .unwrap_or_else(|| Tensor::zeros(p.tensor.shape()))
                })
            })
            .collect()
    }

    pub fn cast<G: Scalar>(&self) -> ParamRegistry<G> {
        ParamRegistry {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    tensor: p.tensor.cast(),
                    trainable: p.trainable,
                    group: p.group,
                })
                .collect(),
            index: self.index.clone(),
        }
    }
}

/// Graph handles for every registry entry of one forward pass.
pub struct Bound<'a> {
    index: &'a HashMap<String, usize>,
    vars: Vec<Var>,
}

impl Bound<'_> {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.index
            .get(name)
            .map(|&i| self.vars[i])
            .ok_or_else(|| TensorError::Registry(format!("unknown parameter `{name}`")))
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}
