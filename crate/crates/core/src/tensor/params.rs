use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Gradients, Tensor};
use crate::error::{Error, Result};

/// Trainable weights addressed by a `/`-separated path. Iteration order is
/// the sorted name order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
    seed: u64,
}

/// One serialised parameter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

/// Flat checkpoint form of a [`ParamStore`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamSnapshot {
    pub seed: u64,
    pub params: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        Self {
            params: BTreeMap::new(),
            seed,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::Contract(format!("duplicate parameter `{name}`")));
        }
        self.params.insert(name, tensor.with_grad());
        Ok(())
    }

    /// Adds a `rows × cols` weight drawn from `U(-bound, bound)`.
    pub fn insert_uniform<R: Rng>(
        &mut self,
        rng: &mut R,
        name: &str,
        rows: usize,
        cols: usize,
        bound: f64,
    ) -> Result<()> {
        let values = (0..rows * cols).map(|_| rng.gen_range(-bound..=bound)).collect();
        self.insert(name, Tensor::matrix(rows, cols, values)?)
    }

    /// Adds a `rows × cols` weight drawn from `N(0, std²)`.
    pub fn insert_normal<R: Rng>(&mut self, rng: &mut R, name: &str, rows: usize, cols: usize, std: f64) -> Result<()> {
        let dist = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
        let values = (0..rows * cols).map(|_| dist.sample(rng)).collect();
        self.insert(name, Tensor::matrix(rows, cols, values)?)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar weights.
    pub fn num_values(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    pub fn zero_grads(&mut self) {
        for t in self.params.values_mut() {
            match t.grad_mut() {
                Some(g) => g.iter_mut().for_each(|v| *v = 0.0),
                None => *t = t.clone().with_grad(),
            }
        }
    }

    /// Adds `scale * grads` into the stored gradient slots.
    pub fn accumulate(&mut self, grads: &Gradients, scale: f64) -> Result<()> {
        for (name, g) in grads.iter() {
            let t = self.get_mut(name)?;
            let slot = t
                .grad_mut()
                .ok_or_else(|| Error::Contract(format!("`{name}` has no gradient slot")))?;
            if slot.len() != g.len() {
                return Err(Error::Dimension(format!(
                    "gradient for `{name}` has {} values, parameter has {}",
                    g.len(),
                    slot.len()
                )));
            }
            for (s, &v) in slot.iter_mut().zip(g) {
                *s += scale * v;
            }
        }
        Ok(())
    }

    pub fn snapshot(&self) -> ParamSnapshot {
        ParamSnapshot {
            seed: self.seed,
            params: self
                .params
                .iter()
                .map(|(name, t)| ParamEntry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                    values: t.values().to_vec(),
                })
                .collect(),
        }
    }

    pub fn from_snapshot(snap: &ParamSnapshot) -> Result<Self> {
        let mut store = Self::new(snap.seed);
        for e in &snap.params {
            let t = Tensor::new(e.shape.clone(), e.values.clone())
                .map_err(|err| Error::Checkpoint(format!("`{}`: {err}", e.name)))?;
            store
                .insert(e.name.clone(), t)
                .map_err(|err| Error::Checkpoint(err.to_string()))?;
        }
        Ok(store)
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        let f = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer(f, &self.snapshot())?;
        Ok(())
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let f = std::io::BufReader::new(std::fs::File::open(path)?);
        let snap: ParamSnapshot = serde_json::from_reader(f)?;
        Self::from_snapshot(&snap)
    }
}
