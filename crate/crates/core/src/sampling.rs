//! P×K batch construction, multi-dataset scheduling with single-dataset
//! batches, and train-time flip augmentation.

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::CameraKey;
use crate::types::{Dataset, ImageRecord, DISTRACTOR_IDENTITY};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PkConfig {
    /// Identities per batch.
    pub p: usize,
    /// Images per identity.
    pub k: usize,
}

impl Default for PkConfig {
    fn default() -> Self {
        PkConfig { p: 18, k: 4 }
    }
}

impl PkConfig {
    pub fn batch_size(&self) -> usize {
        self.p * self.k
    }

    pub fn validate(&self) -> Result<()> {
        if self.p < 2 || self.k < 2 {
            return Err(Error::config(format!(
                "P and K must both be >= 2 (got P={}, K={})",
                self.p, self.k
            )));
        }
        Ok(())
    }
}

/// A block of records drawn from exactly one dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub dataset: String,
    pub records: Vec<ImageRecord>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn features(&self) -> Array2<f64> {
        let dim = self.records.first().map_or(0, |r| r.features.len());
        Array2::from_shape_fn((self.records.len(), dim), |(i, j)| self.records[i].features[j])
    }

    pub fn labels(&self) -> Vec<i64> {
        self.records.iter().map(|r| r.identity).collect()
    }

    pub fn camera_keys(&self) -> Vec<CameraKey> {
        self.records
            .iter()
            .map(|r| CameraKey::new(r.dataset.clone(), r.camera))
            .collect()
    }
}

/// Record indices per trainable identity of one dataset, built once and
/// reused across steps.
#[derive(Debug, Clone)]
pub struct PkSampler<'a> {
    dataset: &'a Dataset,
    by_identity: Vec<(i64, Vec<usize>)>,
    cfg: PkConfig,
}

impl<'a> PkSampler<'a> {
    pub fn new(dataset: &'a Dataset, cfg: PkConfig) -> Result<Self> {
        cfg.validate()?;
        let mut map: BTreeMap<i64, Vec<usize>> = BTreeMap::new();
        for (i, r) in dataset.records.iter().enumerate() {
            if r.identity != DISTRACTOR_IDENTITY {
                map.entry(r.identity).or_default().push(i);
            }
        }
        if map.len() < cfg.p {
            return Err(Error::Sampling(format!(
                "dataset `{}` has {} identities, P = {} required",
                dataset.name,
                map.len(),
                cfg.p
            )));
        }
        Ok(PkSampler {
            dataset,
            by_identity: map.into_iter().collect(),
            cfg,
        })
    }

    /// P distinct identities, K records each; identities with fewer than K
    /// records are sampled with replacement.
    pub fn sample(&self, rng: &mut impl Rng) -> Batch {
        let ids = index::sample(rng, self.by_identity.len(), self.cfg.p);
        let mut records = Vec::with_capacity(self.cfg.batch_size());
        for id_pos in ids.iter() {
            let members = &self.by_identity[id_pos].1;
            if members.len() >= self.cfg.k {
                for m in index::sample(rng, members.len(), self.cfg.k).iter() {
                    records.push(self.dataset.records[members[m]].clone());
                }
            } else {
                for _ in 0..self.cfg.k {
                    let m = rng.random_range(0..members.len());
                    records.push(self.dataset.records[members[m]].clone());
                }
            }
        }
        Batch {
            dataset: self.dataset.name.clone(),
            records,
        }
    }
}

pub fn pk_sample(dataset: &Dataset, cfg: PkConfig, rng: &mut impl Rng) -> Result<Batch> {
    Ok(PkSampler::new(dataset, cfg)?.sample(rng))
}

/// `size` records from `pool`, without replacement when the pool is large
/// enough, with replacement otherwise. Used where there are no labels.
pub fn uniform_sample(dataset: &str, pool: &[&ImageRecord], size: usize, rng: &mut impl Rng) -> Result<Batch> {
    if pool.is_empty() {
        return Err(Error::Sampling(format!("no records to sample from `{dataset}`")));
    }
    let records = if pool.len() >= size {
        index::sample(rng, pool.len(), size)
            .iter()
            .map(|i| pool[i].clone())
            .collect()
    } else {
        (0..size)
            .map(|_| pool[rng.random_range(0..pool.len())].clone())
            .collect()
    };
    Ok(Batch {
        dataset: dataset.to_string(),
        records,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SchedulePolicy {
    /// Datasets in declared order, cyclically.
    #[default]
    RoundRobin,
    /// Deterministic interleaving proportional to dataset size.
    Proportional,
}

/// Which dataset each training step draws its batch from.
pub fn dataset_scheduler(
    datasets: &[Dataset],
    steps: usize,
    pk: PkConfig,
    policy: SchedulePolicy,
) -> Result<Vec<usize>> {
    if datasets.is_empty() {
        return Err(Error::config("no datasets to schedule"));
    }
    for ds in datasets {
        let n = ds.trainable_identities().count();
        if n < pk.p {
            return Err(Error::config(format!(
                "dataset `{}` has {n} identities, fewer than P = {}",
                ds.name, pk.p
            )));
        }
    }
    let n = datasets.len();
    Ok(match policy {
        SchedulePolicy::RoundRobin => (0..steps).map(|s| s % n).collect(),
        SchedulePolicy::Proportional => {
            let sizes: Vec<f64> = datasets.iter().map(|d| d.len() as f64).collect();
            let total: f64 = sizes.iter().sum();
            let mut counts = vec![0usize; n];
            (0..steps)
                .map(|t| {
                    // Largest deficit against the ideal share; ties to the
                    // lowest index.
                    let mut best = 0;
                    let mut best_deficit = f64::NEG_INFINITY;
                    for (i, size) in sizes.iter().enumerate() {
                        let deficit = size / total * (t + 1) as f64 - counts[i] as f64;
                        if deficit > best_deficit {
                            best = i;
                            best_deficit = deficit;
                        }
                    }
                    counts[best] += 1;
                    best
                })
                .collect()
        }
    })
}

/// Replaces each record's features by its flip features with probability
/// 1/2. One draw is made per record whether or not it has a flip.
pub fn augment_flip(batch: Batch, rng: &mut impl Rng) -> Batch {
    augment_flip_with_probability(batch, 0.5, rng)
}

pub fn augment_flip_with_probability(mut batch: Batch, probability: f64, rng: &mut impl Rng) -> Batch {
    for r in &mut batch.records {
        let flip = rng.random::<f64>() < probability;
        if flip {
            if let Some(f) = r.flip_features.take() {
                r.flip_features = Some(std::mem::replace(&mut r.features, f));
            }
        }
    }
    batch
}
