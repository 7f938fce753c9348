//! Named parameter tensors shared by the model, optimizer and checkpoints.

use indexmap::IndexMap;
use ndarray::{ArrayD, ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2, Ix1, Ix2, IxDyn};
use rand::Rng;

use crate::error::{Result, UsatError};

/// Ordered map from parameter name to tensor. Insertion order is the
/// serialization order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    tensors: IndexMap<String, ArrayD<f64>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: ArrayD<f64>) {
        self.tensors.insert(name.into(), value);
    }

    pub fn zeros(&mut self, name: impl Into<String>, shape: &[usize]) {
        self.insert(name, ArrayD::zeros(IxDyn(shape)));
    }

    pub fn ones(&mut self, name: impl Into<String>, shape: &[usize]) {
        self.insert(name, ArrayD::ones(IxDyn(shape)));
    }

    /// Uniform in `[-bound, bound]`, rounded to f32 so checkpoints round-trip exactly.
    pub fn uniform<R: Rng>(&mut self, name: impl Into<String>, shape: &[usize], bound: f64, rng: &mut R) {
        let t = ArrayD::from_shape_simple_fn(IxDyn(shape), || {
            (rng.random_range(-bound..=bound) as f32) as f64
        });
        self.insert(name, t);
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&ArrayD<f64>> {
        self.tensors
            .get(name)
            .ok_or_else(|| UsatError::Config(format!("missing parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ArrayD<f64>> {
        self.tensors.get_mut(name)
    }

    pub fn matrix(&self, name: &str) -> ArrayView2<'_, f64> {
        self.tensors[name]
            .view()
            .into_dimensionality::<Ix2>()
            .unwrap_or_else(|_| panic!("{name} is not a matrix"))
    }

    pub fn vector(&self, name: &str) -> ArrayView1<'_, f64> {
        self.tensors[name]
            .view()
            .into_dimensionality::<Ix1>()
            .unwrap_or_else(|_| panic!("{name} is not a vector"))
    }

    pub fn matrix_mut(&mut self, name: &str) -> ArrayViewMut2<'_, f64> {
        self.tensors
            .get_mut(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"))
            .view_mut()
            .into_dimensionality::<Ix2>()
            .unwrap_or_else(|_| panic!("{name} is not a matrix"))
    }

    pub fn vector_mut(&mut self, name: &str) -> ArrayViewMut1<'_, f64> {
        self.tensors
            .get_mut(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"))
            .view_mut()
            .into_dimensionality::<Ix1>()
            .unwrap_or_else(|_| panic!("{name} is not a vector"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ArrayD<f64>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut ArrayD<f64>)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(|t| t.len()).sum()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), ArrayD::zeros(v.raw_dim())))
                .collect(),
        }
    }

    /// `self += other` for every tensor the two share.
    pub fn add_assign(&mut self, other: &ParamStore) {
        for (k, v) in other.iter() {
            if let Some(t) = self.tensors.get_mut(k) {
                *t += v;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for t in self.tensors.values_mut() {
            t.mapv_inplace(|v| v * factor);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.tensors
            .values()
            .flat_map(|t| t.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().flat_map(|t| t.iter()).all(|v| v.is_finite())
    }

    pub fn remove(&mut self, name: &str) -> Option<ArrayD<f64>> {
        self.tensors.shift_remove(name)
    }
}
