use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};

/// Which named parameters receive gradients while recording a graph.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Trainable {
    Nothing,
    /// Parameters whose name starts with any of these prefixes.
    Prefixes(Vec<String>),
}

impl Trainable {
    pub fn prefixes<I, S>(p: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Trainable::Prefixes(p.into_iter().map(Into::into).collect())
    }

    pub fn contains(&self, name: &str) -> bool {
        match self {
            Trainable::Nothing => false,
            Trainable::Prefixes(ps) => ps.iter().any(|p| name.starts_with(p.as_str())),
        }
    }
}

/// A tape plus the named parameters bound onto it.
///
/// Each parameter is recorded at most once per graph, so a parameter used by
/// two forward paths accumulates both contributions. Frozen parameters enter
/// as constants and therefore never appear among the gradients.
#[derive(Debug)]
pub struct Graph {
    tape: Tape,
    bound: BTreeMap<String, Var>,
    trainable: Trainable,
}

impl Graph {
    pub fn new(trainable: Trainable) -> Self {
        Self {
            tape: Tape::new(),
            bound: BTreeMap::new(),
            trainable,
        }
    }

    pub fn inference() -> Self {
        Self::new(Trainable::Nothing)
    }

    /// Continues recording on an existing tape.
    pub fn from_tape(tape: Tape, trainable: Trainable) -> Self {
        Self {
            tape,
            bound: BTreeMap::new(),
            trainable,
        }
    }

    pub fn into_tape(self) -> Tape {
        self.tape
    }

    /// Makes `name` resolve to `v` instead of the model's stored tensor.
    pub fn bind(&mut self, name: &str, v: Var) {
        self.bound.insert(name.to_owned(), v);
    }

    pub fn tape(&self) -> &Tape {
        &self.tape
    }

    pub fn tape_mut(&mut self) -> &mut Tape {
        &mut self.tape
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.tape.value(v)
    }

    pub fn param(&mut self, name: &str, t: &Tensor) -> Var {
        if let Some(v) = self.bound.get(name) {
            return *v;
        }
        let trainable = self.trainable.contains(name);
        let v = self.tape.leaf(t.clone().with_requires_grad(trainable));
        self.bound.insert(name.to_owned(), v);
        v
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.tape.constant(t)
    }

    /// Names of bound parameters that take gradients.
    pub fn trainable_bound(&self) -> impl Iterator<Item = &str> {
        self.bound
            .iter()
            .filter(|(_, v)| self.tape.requires_grad(**v))
            .map(|(n, _)| n.as_str())
    }

    /// Gradients keyed by parameter name, covering only trainable parameters.
    pub fn backward(&self, root: Var) -> Result<BTreeMap<String, Tensor>> {
        let grads = self.tape.backward(root)?;
        let mut out = BTreeMap::new();
        for (name, var) in &self.bound {
            if let Some(g) = grads.get(*var) {
                out.insert(name.clone(), g.clone());
            }
        }
        if out.len() != grads.len() {
            return Err(Error::Contract(
                "gradient flowed into an unnamed leaf".into(),
            ));
        }
        Ok(out)
    }
}
