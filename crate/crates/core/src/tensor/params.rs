use std::collections::HashMap;

use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Named, insertion-ordered collection of trainable matrices.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Array2<f64>>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Array2<f64>) -> ParamId {
        let name = name.into();
        if let Some(id) = self.index.get(&name) {
            self.values[id.0] = value;
            return *id;
        }
        let id = ParamId(self.values.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        id
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Array2<f64> {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Array2<f64> {
        &mut self.values[id.0]
    }

    pub fn get(&self, name: &str) -> Option<&Array2<f64>> {
        self.id(name).map(|id| &self.values[id.0])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Array2<f64>> {
        let id = self.id(name)?;
        Some(&mut self.values[id.0])
    }

    pub fn require(&self, name: &str) -> Result<&Array2<f64>> {
        self.get(name)
            .ok_or_else(|| Error::Invalid(format!("missing parameter `{name}`")))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Array2<f64>)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    pub fn ids_with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = ParamId> + 'a {
        self.iter()
            .filter(move |(_, n, _)| n.starts_with(prefix))
            .map(|(id, _, _)| id)
    }

    /// Copies every parameter of `other` into `self`, overwriting same-named entries.
    pub fn merge(&mut self, other: &ParamStore) {
        for (_, name, value) in other.iter() {
            self.insert(name, value.clone());
        }
    }

    /// Rounds every value to the nearest `f32`, the precision of the checkpoint format.
    pub fn round_to_f32(&mut self) {
        for v in &mut self.values {
            v.mapv_inplace(|x| x as f32 as f64);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.iter().all(|x| x.is_finite()))
    }
}

pub fn zeros(rows: usize, cols: usize) -> Array2<f64> {
    Array2::zeros((rows, cols))
}

pub fn ones(rows: usize, cols: usize) -> Array2<f64> {
    Array2::ones((rows, cols))
}

/// Gaussian matrix with the given standard deviation.
pub fn gaussian<R: Rng>(rng: &mut R, rows: usize, cols: usize, std: f64) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || {
        let z: f64 = rng.sample(StandardNormal);
        z * std
    })
}

/// Fan-in scaled Gaussian init for a `fan_in × fan_out` weight.
pub fn fan_in<R: Rng>(rng: &mut R, fan_in: usize, fan_out: usize) -> Array2<f64> {
    gaussian(rng, fan_in, fan_out, 1.0 / (fan_in as f64).sqrt())
}
