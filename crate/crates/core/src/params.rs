//! Named parameter storage, grouped by pipeline component.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{G2pError, Result};
use crate::tensor::{Scalar, Tensor};

/// The pipeline stage a parameter belongs to. Freezing works per component.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Component {
    Embedding,
    Reinforcer,
    Lm,
    Classifier,
}

impl Component {
    pub const ALL: [Component; 4] = [
        Component::Embedding,
        Component::Reinforcer,
        Component::Lm,
        Component::Classifier,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Component::Embedding => "embedding",
            Component::Reinforcer => "reinforcer",
            Component::Lm => "lm",
            Component::Classifier => "classifier",
        }
    }
}

impl fmt::Display for Component {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Component {
    type Err = G2pError;

    fn from_str(s: &str) -> Result<Self> {
        Component::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| G2pError::Config(format!("unknown component `{s}`")))
    }
}

/// Parses a comma separated component list such as `lm,embedding`.
pub fn parse_component_set(spec: &str) -> Result<Vec<Component>> {
    let mut out: Vec<Component> = Vec::new();
    for part in spec.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let c = part.parse()?;
        if !out.contains(&c) {
            out.push(c);
        }
    }
    out.sort();
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug)]
pub struct Parameter<S> {
    pub name: String,
    pub component: Component,
    pub value: Tensor<S>,
    pub grad: Option<Tensor<S>>,
    pub requires_grad: bool,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore<S> {
    params: Vec<Parameter<S>>,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, component: Component, value: Tensor<S>) -> ParamId {
        let name = name.into();
        debug_assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.params.push(Parameter {
            name,
            component,
            value,
            grad: None,
            requires_grad: true,
        });
        ParamId(self.params.len() - 1)
    }

    /// Adds a parameter initialised uniformly in `[-bound, bound]`.
    pub fn add_uniform(
        &mut self,
        name: impl Into<String>,
        component: Component,
        shape: &[usize],
        bound: f64,
        rng: &mut impl Rng,
    ) -> ParamId {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                if bound > 0.0 {
                    S::from_f64(rng.gen_range(-bound..=bound))
                } else {
                    S::ZERO
                }
            })
            .collect();
        let value = Tensor::new(shape.to_vec(), data).expect("shape matches data");
        self.add(name, component, value)
    }

    pub fn get(&self, id: ParamId) -> &Parameter<S> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<S> {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<S> {
        &self.params[id.0].value
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<S>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<S>> {
        self.params.iter_mut()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn num_scalars_in(&self, component: Component) -> usize {
        self.params
            .iter()
            .filter(|p| p.component == component)
            .map(|p| p.value.numel())
            .sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    /// Marks every parameter of the listed components as not trainable and
    /// re-enables all others.
    pub fn freeze(&mut self, frozen: &[Component]) {
        for p in &mut self.params {
            p.requires_grad = !frozen.contains(&p.component);
            if !p.requires_grad {
                p.grad = None;
            }
        }
    }

    pub fn cast<T: Scalar>(&self) -> ParamStore<T> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    component: p.component,
                    value: p.value.cast(),
                    grad: p.grad.as_ref().map(Tensor::cast),
                    requires_grad: p.requires_grad,
                })
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn component_set_parsing() {
        assert_eq!(
            parse_component_set("lm, embedding").unwrap(),
            vec![Component::Embedding, Component::Lm]
        );
        assert!(parse_component_set("").unwrap().is_empty());
        assert!(parse_component_set("bert").is_err());
    }

    #[test]
    fn freeze_toggles_requires_grad() {
        let mut store = ParamStore::<f64>::new();
        let a = store.add("a", Component::Lm, Tensor::zeros(&[2]));
        let b = store.add("b", Component::Classifier, Tensor::zeros(&[2]));
        store.freeze(&[Component::Lm]);
        assert!(!store.get(a).requires_grad);
        assert!(store.get(b).requires_grad);
        store.freeze(&[]);
        assert!(store.get(a).requires_grad);
    }
}
