//! Shared domain types.

use std::collections::BTreeSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Identity label of a distractor image. Never a training class.
pub const DISTRACTOR_IDENTITY: i64 = -1;

/// One sample: labels plus the backbone feature vector of the image and,
/// optionally, of its horizontal flip.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub sample_id: String,
    pub identity: i64,
    pub camera: u32,
    pub dataset: String,
    pub features: Vec<f64>,
    pub flip_features: Option<Vec<f64>>,
}

impl ImageRecord {
    pub fn is_distractor(&self) -> bool {
        self.identity == DISTRACTOR_IDENTITY
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub records: Vec<ImageRecord>,
    pub cameras: BTreeSet<u32>,
    pub identities: BTreeSet<i64>,
}

impl Dataset {
    pub fn empty(name: impl Into<String>) -> Self {
        Dataset {
            name: name.into(),
            records: Vec::new(),
            cameras: BTreeSet::new(),
            identities: BTreeSet::new(),
        }
    }

    /// Builds a dataset, checking that every record carries `name` as its
    /// dataset tag and that feature dimensions agree.
    pub fn new(name: impl Into<String>, records: Vec<ImageRecord>) -> Result<Self> {
        let name = name.into();
        let mut dim = None;
        for (i, r) in records.iter().enumerate() {
            if r.dataset != name {
                return Err(Error::contract(format!(
                    "record {i} ({}) is tagged `{}`, expected `{name}`",
                    r.sample_id, r.dataset
                )));
            }
            if r.identity < DISTRACTOR_IDENTITY {
                return Err(Error::contract(format!(
                    "record {i} ({}) has invalid identity {}",
                    r.sample_id, r.identity
                )));
            }
            let d = *dim.get_or_insert(r.features.len());
            if r.features.len() != d {
                return Err(Error::contract(format!(
                    "record {i} ({}) has feature dimension {}, expected {d}",
                    r.sample_id,
                    r.features.len()
                )));
            }
            if let Some(flip) = &r.flip_features {
                if flip.len() != d {
                    return Err(Error::contract(format!(
                        "record {i} ({}) has flip dimension {}, expected {d}",
                        r.sample_id,
                        flip.len()
                    )));
                }
            }
        }
        let cameras = records.iter().map(|r| r.camera).collect();
        let identities = records.iter().map(|r| r.identity).collect();
        Ok(Dataset {
            name,
            records,
            cameras,
            identities,
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Feature dimension F, or `None` for an empty dataset.
    pub fn feature_dim(&self) -> Option<usize> {
        self.records.first().map(|r| r.features.len())
    }

    /// Identities usable as training classes (distractors excluded).
    pub fn trainable_identities(&self) -> impl Iterator<Item = i64> + '_ {
        self.identities
            .iter()
            .copied()
            .filter(|&id| id != DISTRACTOR_IDENTITY)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EmbeddingVector(pub Vec<f64>);

impl EmbeddingVector {
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Root of every random stream in the crate. Independent streams are
/// obtained with [`RngSeed::derive`] so that stages can be replayed in
/// isolation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RngSeed(pub u64);

impl RngSeed {
    /// Sub-seed for a named stream. FNV-1a over the label, mixed with the
    /// parent through splitmix64.
    pub fn derive(self, label: &str) -> RngSeed {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in label.bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        RngSeed(splitmix64(self.0 ^ splitmix64(h)))
    }

    pub fn rng(self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.0)
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
