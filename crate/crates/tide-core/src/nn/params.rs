//! Central parameter storage.
//!
//! All trainable state lives in one `ParamStore`; models hold `ParamId`
//! handles. Sharing a `ParamId` between two forward paths (e.g. the image
//! encoder used by both the online and the auxiliary head) makes gradient
//! accumulation and checkpointing automatic.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Result, TideError};

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug)]
pub struct ParamStore {
    values: Vec<Array2<f64>>,
    names: Vec<String>,
    trainable: Vec<bool>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore {
            values: Vec::new(),
            names: Vec::new(),
            trainable: Vec::new(),
        }
    }

    /// Register a parameter. Names must be unique; they key the checkpoint
    /// format, so keep them stable.
    pub fn add(&mut self, name: &str, value: Array2<f64>, trainable: bool) -> ParamId {
        assert!(
            !self.names.iter().any(|n| n == name),
            "duplicate parameter name: {name}"
        );
        let id = ParamId(self.values.len());
        self.values.push(value);
        self.names.push(name.to_string());
        self.trainable.push(trainable);
        id
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Array2<f64> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Array2<f64> {
        &mut self.values[id.0]
    }

    pub fn set(&mut self, id: ParamId, value: Array2<f64>) {
        assert_eq!(self.values[id.0].dim(), value.dim(), "shape change for {}", self.names[id.0]);
        self.values[id.0] = value;
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.trainable[id.0]
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.trainable[id.0] = trainable;
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        (0..self.values.len())
            .filter(|&i| self.trainable[i])
            .map(ParamId)
            .collect()
    }

    pub fn lookup(&self, name: &str) -> Result<ParamId> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(ParamId)
            .ok_or_else(|| TideError::data(format!("unknown parameter: {name}")))
    }

    /// Total number of scalar entries across all parameters.
    pub fn n_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}
