//! Named parameter storage with group labels and lock flags.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::tensor::{Tape, Tensor, TensorError, Var};

/// Optimizer group a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Group {
    Image,
    Text,
    Fusion,
    Loss,
}

impl Group {
    pub const ALL: [Group; 4] = [Group::Image, Group::Text, Group::Fusion, Group::Loss];

    pub fn as_str(self) -> &'static str {
        match self {
            Group::Image => "image",
            Group::Text => "text",
            Group::Fusion => "fusion",
            Group::Loss => "loss",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|g| g.as_str() == s)
    }
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub group: Group,
    /// Transformer layer index within its encoder, `None` for stems, heads
    /// and everything else outside the layer stack.
    pub layer: Option<usize>,
    pub value: Tensor,
    pub locked: bool,
}

/// Parameters in registration order. Order is part of the checkpoint format.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ModelParams {
    params: Vec<Param>,
}

impl ModelParams {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(
        &mut self,
        name: impl Into<String>,
        group: Group,
        layer: Option<usize>,
        value: Tensor,
    ) -> ParamId {
        let name = name.into();
        debug_assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.params.push(Param {
            name,
            group,
            layer,
            value,
            locked: false,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    /// Number of scalar values that will receive gradients.
    pub fn trainable_elements(&self) -> usize {
        self.params.iter().filter(|p| !p.locked).map(|p| p.value.numel()).sum()
    }

    pub fn total_elements(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Puts every parameter on `tape` as a leaf; locked ones are frozen.
    pub fn bind(&self, tape: &mut Tape) -> Result<Bound, TensorError> {
        let vars = self
            .params
            .iter()
            .map(|p| tape.leaf(p.value.clone(), !p.locked))
            .collect::<Result<_, _>>()?;
        Ok(Bound { vars })
    }

    /// Like [`ModelParams::bind`] but every parameter is a constant.
    pub fn bind_constant(&self, tape: &mut Tape) -> Result<Bound, TensorError> {
        let vars = self
            .params
            .iter()
            .map(|p| tape.constant(p.value.clone()))
            .collect::<Result<_, _>>()?;
        Ok(Bound { vars })
    }
}

/// Tape handles for every parameter, indexed by [`ParamId`].
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self { vars }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bind_respects_locks() {
        let mut p = ModelParams::new();
        let a = p.register("a", Group::Image, Some(0), Tensor::zeros([2, 2]));
        let b = p.register("b", Group::Text, None, Tensor::zeros([3]));
        p.get_mut(a).locked = true;
        assert_eq!(p.trainable_elements(), 3);
        assert_eq!(p.total_elements(), 7);
        let mut tape = Tape::new();
        let bound = p.bind(&mut tape).unwrap();
        assert!(!tape.requires_grad(bound.var(a)));
        assert!(tape.requires_grad(bound.var(b)));
        assert_eq!(p.find("b"), Some(b));
    }

    #[test]
    fn group_names_round_trip() {
        for g in Group::ALL {
            assert_eq!(Group::parse(g.as_str()), Some(g));
        }
        assert_eq!(Group::parse("vision"), None);
    }
}
