//! Named parameter storage shared by every network in a model.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Which network a parameter belongs to. Domain indices are zero-based.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ParamGroup {
    Encoder(usize),
    Decoder(usize),
    Discriminator(usize),
    Shared,
    Classifier,
}

impl ParamGroup {
    /// Parameters updated by the generator-side optimizer.
    pub fn is_generator(self) -> bool {
        matches!(self, Self::Encoder(_) | Self::Decoder(_) | Self::Shared)
    }

    pub fn is_discriminator(self) -> bool {
        matches!(self, Self::Discriminator(_))
    }

    /// File stem of the checkpoint blob holding this group.
    pub fn blob_name(self) -> String {
        match self {
            Self::Encoder(d) => format!("encoder_{}", d + 1),
            Self::Decoder(d) => format!("decoder_{}", d + 1),
            Self::Discriminator(d) => format!("discriminator_{}", d + 1),
            Self::Shared => "shared".to_string(),
            Self::Classifier => "classifier".to_string(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub group: ParamGroup,
    pub value: Tensor,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, group: ParamGroup, value: Tensor) -> ParamId {
        self.entries.push(ParamEntry {
            name: name.into(),
            group,
            value,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn ids_where(&self, pred: impl Fn(ParamGroup) -> bool) -> Vec<ParamId> {
        self.ids()
            .filter(|&id| pred(self.entries[id.0].group))
            .collect()
    }

    /// Total scalar count across all parameters.
    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    /// Distinct groups in insertion order.
    pub fn groups(&self) -> Vec<ParamGroup> {
        let mut out: Vec<ParamGroup> = Vec::new();
        for e in &self.entries {
            if !out.contains(&e.group) {
                out.push(e.group);
            }
        }
        out
    }

    /// SHA-256 over names, shapes and little-endian values of the given ids.
    pub fn digest(&self, ids: &[ParamId]) -> String {
        let mut h = Sha256::new();
        for &id in ids {
            let e = &self.entries[id.0];
            h.update((e.name.len() as u64).to_le_bytes());
            h.update(e.name.as_bytes());
            for &d in e.value.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for v in e.value.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

/// Gradients keyed by parameter.
#[derive(Clone, Debug, Default)]
pub struct Grads {
    pub(crate) by_param: BTreeMap<ParamId, Tensor>,
}

impl Grads {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.by_param.get(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.by_param.iter().map(|(k, v)| (*k, v))
    }

    pub fn all_finite(&self) -> bool {
        self.by_param.values().all(Tensor::all_finite)
    }
}
