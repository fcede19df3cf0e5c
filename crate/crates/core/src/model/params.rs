use std::collections::BTreeMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tape, Tensor, Var};

/// Named parameters in lexicographic name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T: Scalar = f32> {
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> ParamStore<T> {
    /// Adds a parameter; panics on a duplicate name.
    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) {
        let name = name.into();
        let prev = self.tensors.insert(name.clone(), t);
        assert!(prev.is_none(), "duplicate parameter {name}");
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    /// Total element count.
    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore { tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect() }
    }

    /// Errors naming the first parameter that is missing, unexpected or
    /// differently shaped in `other`.
    pub fn check_compatible(&self, other: &ParamStore<T>) -> Result<()> {
        for (name, t) in &self.tensors {
            match other.tensors.get(name) {
                None => return Err(Error::Checkpoint(format!("missing parameter `{name}`"))),
                Some(o) if o.shape() != t.shape() => {
                    return Err(Error::Checkpoint(format!(
                        "parameter `{name}` has shape {:?}, model expects {:?}",
                        o.shape(),
                        t.shape()
                    )))
                }
                Some(_) => {}
            }
        }
        if let Some(name) = other.tensors.keys().find(|k| !self.tensors.contains_key(*k)) {
            return Err(Error::Checkpoint(format!("unexpected parameter `{name}`")));
        }
        Ok(())
    }

    pub(crate) fn bind(&self, tape: &mut Tape<T>, track: bool) -> ParamVars {
        let vars = self
            .tensors
            .iter()
            .map(|(name, t)| {
                let v = if track { tape.leaf(&t.clone().with_requires_grad(true)) } else { tape.constant(t) };
                (name.clone(), v)
            })
            .collect();
        ParamVars { vars: Arc::new(vars), prefix: String::new() }
    }
}

/// Parameters recorded on a tape, addressed by name relative to a prefix.
#[derive(Clone, Debug)]
pub struct ParamVars {
    vars: Arc<BTreeMap<String, Var>>,
    prefix: String,
}

impl ParamVars {
    pub(crate) fn from_named(vars: impl IntoIterator<Item = (String, Var)>) -> Self {
        ParamVars { vars: Arc::new(vars.into_iter().collect()), prefix: String::new() }
    }

    /// A view with `name.` appended to the prefix.
    pub fn scope(&self, name: &str) -> ParamVars {
        ParamVars { vars: Arc::clone(&self.vars), prefix: self.full(name) + "." }
    }

    fn full(&self, name: &str) -> String {
        format!("{}{name}", self.prefix)
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        let full = self.full(name);
        self.vars.get(&full).copied().ok_or_else(|| Error::Checkpoint(format!("missing parameter `{full}`")))
    }

    /// Every bound `(name, var)` pair, regardless of prefix.
    pub fn all(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, &v)| (k.as_str(), v))
    }
}
