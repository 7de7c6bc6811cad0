//! Named parameter storage.
//!
//! Layout structs (attention units, the classifier) hold [`ParamId`]s into
//! a flat [`ParamStore`]. A layout is always rebuilt from the model config
//! through a [`ParamSource`], which either draws fresh values or looks them
//! up by name in a loaded checkpoint.

use std::collections::HashMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::numerics::{Matrix, Real};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Matrix>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, value: Matrix) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Matrix)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut Matrix> {
        self.values.iter_mut()
    }

    /// Total number of scalar weights.
    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(|m| m.data().len()).sum()
    }

    /// Weights converted to `F`, ready for [`crate::numerics::Eval`].
    pub fn shared<F: Real>(&self) -> Vec<Arc<Matrix<F>>> {
        self.values.iter().map(|m| Arc::new(m.cast())).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(Matrix::is_finite)
    }
}

/// How a fresh parameter is drawn.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    Ones,
    /// Glorot uniform on `(fan_in, fan_out) = (rows, cols)`.
    Xavier,
    Normal(f64),
}

pub trait ParamSource {
    fn param(&mut self, name: &str, rows: usize, cols: usize, init: Init) -> Result<ParamId>;
    fn into_store(self: Box<Self>) -> Result<ParamStore>;
}

/// Draws every parameter from a seeded generator.
pub struct Initializer {
    store: ParamStore,
    rng: ChaCha8Rng,
}

impl Initializer {
    pub fn new(seed: u64) -> Self {
        Self {
            store: ParamStore::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }
}

impl ParamSource for Initializer {
    fn param(&mut self, name: &str, rows: usize, cols: usize, init: Init) -> Result<ParamId> {
        let value = match init {
            Init::Zeros => Matrix::zeros(rows, cols),
            Init::Ones => Matrix::filled(rows, cols, 1.0),
            Init::Xavier => {
                let bound = (6.0 / (rows + cols) as f64).sqrt();
                Matrix::from_fn(rows, cols, |_, _| self.rng.random_range(-bound..bound))
            }
            Init::Normal(std) => {
                let normal = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
                Matrix::from_fn(rows, cols, |_, _| normal.sample(&mut self.rng))
            }
        };
        Ok(self.store.push(name, value))
    }

    fn into_store(self: Box<Self>) -> Result<ParamStore> {
        Ok(self.store)
    }
}

/// Pulls parameters out of named blobs, checking shapes. Blobs the layout
/// never asks for are an error.
pub struct Loader {
    blobs: HashMap<String, Matrix>,
    store: ParamStore,
}

impl Loader {
    pub fn new(blobs: impl IntoIterator<Item = (String, Matrix)>) -> Self {
        Self {
            blobs: blobs.into_iter().collect(),
            store: ParamStore::new(),
        }
    }
}

impl ParamSource for Loader {
    fn param(&mut self, name: &str, rows: usize, cols: usize, _init: Init) -> Result<ParamId> {
        let value = self
            .blobs
            .remove(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))?;
        if value.shape() != (rows, cols) {
            return Err(Error::format(
                "checkpoint",
                format!("`{name}` is {:?}, expected {:?}", value.shape(), (rows, cols)),
            ));
        }
        Ok(self.store.push(name, value))
    }

    fn into_store(self: Box<Self>) -> Result<ParamStore> {
        if let Some(extra) = self.blobs.keys().min() {
            return Err(Error::format("checkpoint", format!("unexpected blob `{extra}`")));
        }
        Ok(self.store)
    }
}
