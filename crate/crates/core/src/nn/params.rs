use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::graph::{Graph, Var};

/// Named, ordered collection of trainable matrices.
#[derive(Clone, Debug, Default, Serialize, Deserialize, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Array2<f64>>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Array2<f64>) -> usize {
        self.names.push(name.into());
        self.tensors.push(value);
        self.tensors.len() - 1
    }

    /// Adds a matrix drawn from `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub fn add_uniform<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        shape: (usize, usize),
        fan_in: usize,
        rng: &mut R,
    ) -> usize {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let value = Array2::from_shape_fn(shape, |_| rng.random_range(-bound..bound));
        self.add(name, value)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, i: usize) -> &Array2<f64> {
        &self.tensors[i]
    }

    pub fn get_mut(&mut self, i: usize) -> &mut Array2<f64> {
        &mut self.tensors[i]
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array2<f64>)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter())
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Array2<f64>> {
        self.tensors.iter_mut()
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    /// Squared Euclidean norm of all parameters.
    pub fn squared_norm(&self) -> f64 {
        self.tensors.iter().flat_map(|t| t.iter()).map(|x| x * x).sum()
    }

    /// Largest absolute parameter value.
    pub fn max_abs(&self) -> f64 {
        self.tensors
            .iter()
            .flat_map(|t| t.iter())
            .fold(0.0_f64, |m, x| m.max(x.abs()))
    }

    /// Inserts every parameter into `g` as a leaf, in order.
    pub fn bind(&self, g: &mut Graph) -> Vec<Var> {
        self.tensors.iter().map(|t| g.leaf(t.clone())).collect()
    }

    /// Projects every entry onto `[-c, c]`.
    pub fn clamp(&mut self, c: f64) {
        for t in &mut self.tensors {
            t.mapv_inplace(|x| x.clamp(-c, c));
        }
    }

    /// Flattened copy, in parameter order.
    pub fn flatten(&self) -> Vec<f64> {
        self.tensors.iter().flat_map(|t| t.iter().copied()).collect()
    }
}

/// Sum of squared entries of the bound parameters, as a graph scalar.
pub fn l2_term(g: &mut Graph, params: &[Var]) -> Var {
    let mut acc = g.scalar_leaf(0.0);
    for &p in params {
        let s = g.sum_squares(p);
        acc = g.add(acc, s);
    }
    acc
}
