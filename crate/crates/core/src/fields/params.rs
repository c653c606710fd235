use super::mat::Mat;
use super::tape::{ParamGrad, Tape, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct ParamGroup {
    pub name: String,
    pub value: Mat,
}

/// Named trainable tensors, in registration order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    pub groups: Vec<ParamGroup>,
}

/// Tape handles for every group of a [`ParamStore`], indexed by group id.
#[derive(Clone, Debug, Default)]
pub struct ParamVars(Vec<Var>);

impl ParamVars {
    pub fn get(&self, group: usize) -> Var {
        self.0[group]
    }
}

impl ParamStore {
    pub fn add(&mut self, name: impl Into<String>, value: Mat) -> usize {
        self.groups.push(ParamGroup {
            name: name.into(),
            value,
        });
        self.groups.len() - 1
    }

    pub fn find(&self, name: &str) -> Option<usize> {
        self.groups.iter().position(|g| g.name == name)
    }

    pub fn num_scalars(&self) -> usize {
        self.groups.iter().map(|g| g.value.len()).sum()
    }

    pub fn bind(&self, tape: &mut Tape) -> ParamVars {
        ParamVars(
            self.groups
                .iter()
                .enumerate()
                .map(|(i, g)| tape.param(i, g.value.clone()))
                .collect(),
        )
    }

    /// Copies values from `other`, which must have identical names and shapes.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<()> {
        if self.groups.len() != other.groups.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter groups, found {}",
                self.groups.len(),
                other.groups.len()
            )));
        }
        for (a, b) in self.groups.iter_mut().zip(&other.groups) {
            if a.name != b.name || a.value.shape() != b.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "group mismatch: expected {} {:?}, found {} {:?}",
                    a.name,
                    a.value.shape(),
                    b.name,
                    b.value.shape()
                )));
            }
            a.value = b.value.clone();
        }
        Ok(())
    }
}

/// One gradient tensor per parameter group.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients(pub Vec<Mat>);

impl Gradients {
    pub fn zeros(store: &ParamStore) -> Self {
        Self(
            store
                .groups
                .iter()
                .map(|g| Mat::zeros(g.value.rows, g.value.cols))
                .collect(),
        )
    }

    pub fn from_tape(store: &ParamStore, grads: Vec<ParamGrad>) -> Self {
        let mut out = Self::zeros(store);
        for g in grads {
            out.0[g.group].add_assign(&g.grad);
        }
        out
    }

    pub fn accumulate(&mut self, other: &Gradients) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            a.add_assign(b);
        }
    }

    /// Name of the first group holding a non-finite entry.
    pub fn first_non_finite<'a>(&self, store: &'a ParamStore) -> Option<&'a str> {
        self.0
            .iter()
            .zip(&store.groups)
            .find(|(g, _)| !g.all_finite())
            .map(|(_, p)| p.name.as_str())
    }
}
