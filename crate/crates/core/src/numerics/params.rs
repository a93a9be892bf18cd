use serde::{Deserialize, Serialize};

use super::{Array, Gradients, Graph, Scalar, Var};
use crate::{Error, Result};

/// Named trainable arrays of one model, in registration order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamSet<T> {
    names: Vec<String>,
    values: Vec<Array<T>>,
}

impl<T: Scalar> Default for ParamSet<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
        }
    }

    /// Registers a parameter and returns its index.
    pub fn add(&mut self, name: impl Into<String>, value: Array<T>) -> usize {
        self.names.push(name.into());
        self.values.push(value);
        self.values.len() - 1
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, i: usize) -> &Array<T> {
        &self.values[i]
    }

    pub fn get_mut(&mut self, i: usize) -> &mut Array<T> {
        &mut self.values[i]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Array<T>] {
        &self.values
    }

    pub fn shapes(&self) -> Vec<Vec<usize>> {
        self.values.iter().map(|v| v.shape().to_vec()).collect()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.values.iter().map(Array::numel).sum()
    }

    /// Places every parameter on the tape as a trainable leaf.
    pub fn bind(&self, g: &mut Graph<T>) -> Vec<Var> {
        self.values.iter().map(|v| g.leaf(v.clone())).collect()
    }

    /// Places every parameter on the tape as a constant.
    pub fn bind_frozen(&self, g: &mut Graph<T>) -> Vec<Var> {
        self.values.iter().map(|v| g.input(v.clone())).collect()
    }

    /// Gradients for bound parameters; unreachable parameters get zeros.
    pub fn collect_grads(&self, grads: &Gradients<T>, vars: &[Var]) -> Vec<Array<T>> {
        vars.iter()
            .zip(&self.values)
            .map(|(&v, p)| grads.get_or_zeros(v, p.shape()))
            .collect()
    }

    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        ParamSet {
            names: self.names.clone(),
            values: self.values.iter().map(Array::cast).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(Array::is_finite)
    }

    /// All values concatenated in registration order.
    pub fn flat(&self) -> Vec<T> {
        self.values
            .iter()
            .flat_map(|v| v.data().iter().copied())
            .collect()
    }

    /// Overwrites all values from a flat slice produced by [`ParamSet::flat`].
    pub fn load_flat(&mut self, flat: &[T]) -> Result<()> {
        if flat.len() != self.numel() {
            return Err(Error::Layout(format!(
                "parameter payload has {} values, model expects {}",
                flat.len(),
                self.numel()
            )));
        }
        let mut off = 0;
        for v in &mut self.values {
            let n = v.numel();
            v.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }
}
