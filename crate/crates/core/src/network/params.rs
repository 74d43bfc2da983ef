use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::neurons::{clamp_scalars, scalars_in_range};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ParamRole {
    /// Synaptic weights (dense, conv, classifier). The only role subject to
    /// weight decay.
    Weight,
    Bias,
    /// The seven per-layer neuron scalars `alpha1..phi`.
    NeuronScalars,
    BnScale,
    BnShift,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamBlock {
    pub name: String,
    pub role: ParamRole,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
    /// Element indices excluded from optimisation.
    #[serde(default)]
    pub frozen: Vec<usize>,
}

impl ParamBlock {
    pub fn is_learnable(&self, i: usize) -> bool {
        !self.frozen.contains(&i)
    }

    pub fn learnable_count(&self) -> usize {
        self.values.len() - self.frozen.len()
    }
}

/// Flat, ordered collection of every learnable block of a model.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    blocks: Vec<ParamBlock>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, role: ParamRole, shape: &[usize], values: Vec<f64>) -> ParamId {
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        self.blocks.push(ParamBlock {
            name: name.into(),
            role,
            shape: shape.to_vec(),
            values,
            frozen: Vec::new(),
        });
        ParamId(self.blocks.len() - 1)
    }

    pub fn block(&self, id: ParamId) -> &ParamBlock {
        &self.blocks[id.0]
    }

    pub fn block_mut(&mut self, id: ParamId) -> &mut ParamBlock {
        &mut self.blocks[id.0]
    }

    pub fn values(&self, id: ParamId) -> &[f64] {
        &self.blocks[id.0].values
    }

    pub fn values_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.blocks[id.0].values
    }

    pub fn blocks(&self) -> &[ParamBlock] {
        &self.blocks
    }

    pub fn blocks_mut(&mut self) -> &mut [ParamBlock] {
        &mut self.blocks
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.blocks.iter().position(|b| b.name == name).map(ParamId)
    }

    pub fn total_len(&self) -> usize {
        self.blocks.iter().map(|b| b.values.len()).sum()
    }

    /// Projects every neuron scalar block into its admissible ranges.
    pub fn clamp_neuron_scalars(&mut self) {
        for b in self.blocks.iter_mut().filter(|b| b.role == ParamRole::NeuronScalars) {
            clamp_scalars(&mut b.values);
        }
    }

    pub fn neuron_scalars_in_range(&self) -> bool {
        self.blocks
            .iter()
            .filter(|b| b.role == ParamRole::NeuronScalars)
            .all(|b| scalars_in_range(&b.values))
    }

    pub fn all_finite(&self) -> bool {
        self.blocks.iter().all(|b| b.values.iter().all(|v| v.is_finite()))
    }

    /// Copies values from `other`, which must have the same layout.
    pub fn copy_values_from(&mut self, other: &ParamStore) -> Result<()> {
        if self.blocks.len() != other.blocks.len() {
            return Err(Error::shape("parameter stores have different block counts"));
        }
        for (a, b) in self.blocks.iter_mut().zip(&other.blocks) {
            if a.name != b.name || a.values.len() != b.values.len() {
                return Err(Error::shape(format!(
                    "parameter block {} does not match {}",
                    a.name, b.name
                )));
            }
            a.values.copy_from_slice(&b.values);
        }
        Ok(())
    }

    pub(crate) fn hash_into(&self, h: &mut Sha256) {
        for b in &self.blocks {
            h.update(b.name.as_bytes());
            for v in &b.values {
                h.update(v.to_le_bytes());
            }
        }
    }

    /// Hex SHA-256 of every block name and value.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        self.hash_into(&mut h);
        hex::encode(h.finalize())
    }
}
