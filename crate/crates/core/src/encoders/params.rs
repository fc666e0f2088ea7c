//! Named parameter storage with stable ordering.

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::error::{contract_err, Result};
use crate::tensor::Tensor;

/// Whether a parameter set is trained by the optimizer or only tracked by EMA.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamRole {
    Online,
    Shadow,
}

/// An ordered list of named tensors. Ordering is fixed at construction and
/// survives checkpointing.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet {
    role: ParamRole,
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamSet {
    pub fn new(role: ParamRole) -> Self {
        ParamSet { role, names: Vec::new(), values: Vec::new() }
    }

    pub fn role(&self) -> ParamRole {
        self.role
    }

    /// A copy of this set with a different role (used to seed the EMA shadow).
    pub fn with_role(&self, role: ParamRole) -> ParamSet {
        ParamSet { role, ..self.clone() }
    }

    pub fn push(&mut self, name: impl Into<String>, value: Tensor) -> usize {
        let name = name.into();
        assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.values.push(value);
        self.values.len() - 1
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor] {
        &mut self.values
    }

    pub fn get(&self, i: usize) -> &Tensor {
        &self.values[i]
    }

    pub fn get_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.values[i]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    pub fn zeros_like(&self) -> ParamSet {
        ParamSet {
            role: self.role,
            names: self.names.clone(),
            values: self.values.iter().map(|t| Tensor::zeros(t.rows(), t.cols())).collect(),
        }
    }

    pub fn same_layout(&self, other: &ParamSet) -> bool {
        self.names == other.names && self.values.iter().zip(&other.values).all(|(a, b)| a.shape() == b.shape())
    }

    pub fn check_layout(&self, other: &ParamSet) -> Result<()> {
        if self.same_layout(other) {
            Ok(())
        } else {
            contract_err("parameter sets differ in names or shapes")
        }
    }

    /// Puts every tensor on the tape: trainable leaves for online sets,
    /// constants otherwise (or when `trainable` is false).
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Vec<Var> {
        let train = trainable && self.role == ParamRole::Online;
        self.values.iter().map(|t| if train { g.param(t.clone()) } else { g.constant(t.clone()) }).collect()
    }

    /// Replaces values in place from a list of the same layout.
    pub fn assign(&mut self, values: Vec<Tensor>) -> Result<()> {
        if values.len() != self.values.len() || values.iter().zip(&self.values).any(|(a, b)| a.shape() != b.shape()) {
            return contract_err("assigned values do not match the parameter layout");
        }
        self.values = values;
        Ok(())
    }
}

/// Allocates and initializes parameters, handing back their indices.
pub(crate) struct ParamBuilder<'a, R: Rng> {
    pub set: ParamSet,
    prefix: String,
    rng: &'a mut R,
    std: f64,
}

impl<'a, R: Rng> ParamBuilder<'a, R> {
    pub fn new(prefix: &str, rng: &'a mut R, std: f64) -> Self {
        ParamBuilder { set: ParamSet::new(ParamRole::Online), prefix: prefix.to_string(), rng, std }
    }

    fn name(&self, n: &str) -> String {
        format!("{}.{}", self.prefix, n)
    }

    pub fn normal(&mut self, n: &str, rows: usize, cols: usize) -> usize {
        let t = Tensor::randn(rows, cols, self.std, self.rng);
        let name = self.name(n);
        self.set.push(name, t)
    }

    pub fn zeros(&mut self, n: &str, rows: usize, cols: usize) -> usize {
        let name = self.name(n);
        self.set.push(name, Tensor::zeros(rows, cols))
    }

    pub fn ones(&mut self, n: &str, rows: usize, cols: usize) -> usize {
        let name = self.name(n);
        self.set.push(name, Tensor::filled(rows, cols, 1.0))
    }
}
