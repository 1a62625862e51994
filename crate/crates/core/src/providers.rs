//! Sources of backbone feature vectors.
//!
//! The backbone network itself is out of reach of this crate: features are
//! either produced by the seeded synthetic cross-camera world below or read
//! from precomputed feature files.
//!
//! # Synthetic world
//!
//! With `d = id_subspace_dim`, `F = feature_dim`, `s = camera_shift_scale`
//! and `σ = nuisance_noise_scale`:
//!
//! * `world_seed` fixes an appearance basis `E ∈ R^{F×d}` with entries
//!   `N(0, 1/d)`. Datasets sharing a `world_seed` share appearance physics;
//!   this is what makes transfer between them possible.
//! * `seed` draws, per identity, `u_y ~ N(0, I_d)` and, per camera, a map
//!   `x ↦ (I + s·R_c) x + s·b_c` with `R_c` entries `N(0, 1/F)` and
//!   `b_c ~ N(0, I_F)`.
//! * Each image: `features = camera_map(E u_y) + σ·ε`, `ε ~ N(0, I_F)`;
//!   its flip is `features + 0.1·σ·ε'`.
//!
//! All random draws happen in a fixed order independent of the scale
//! values, so changing a scale with a fixed seed changes only magnitudes.
//! Feature values are rounded to `f32` so that writing them to a feature
//! file and reading them back is lossless.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{Dataset, ImageRecord, RngSeed};

pub const FEATURE_MAGIC: &[u8; 5] = b"EMBF1";
pub const MANIFEST_FILE: &str = "manifest.csv";
pub const FEATURES_FILE: &str = "features.bin";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticWorldConfig {
    #[serde(default = "default_name")]
    pub name: String,
    pub n_identities: usize,
    pub n_cameras: usize,
    pub feature_dim: usize,
    pub id_subspace_dim: usize,
    pub camera_shift_scale: f64,
    pub nuisance_noise_scale: f64,
    pub images_per_identity_per_camera: usize,
    pub seed: RngSeed,
    #[serde(default = "default_world_seed")]
    pub world_seed: RngSeed,
    /// Strength of the per-camera linear mixing. Defaults to
    /// `camera_shift_scale`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub camera_mix_scale: Option<f64>,
    /// When set, camera offsets lie in a subspace of this dimension shared
    /// by every dataset drawn with the same `world_seed` (think lighting or
    /// colour cast). When unset they are isotropic in R^F.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub camera_offset_rank: Option<usize>,
}

fn default_name() -> String {
    "synthetic".to_string()
}

fn default_world_seed() -> RngSeed {
    RngSeed(0)
}

impl SyntheticWorldConfig {
    pub fn mix_scale(&self) -> f64 {
        self.camera_mix_scale.unwrap_or(self.camera_shift_scale)
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_identities", self.n_identities),
            ("n_cameras", self.n_cameras),
            ("feature_dim", self.feature_dim),
            ("id_subspace_dim", self.id_subspace_dim),
            ("images_per_identity_per_camera", self.images_per_identity_per_camera),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::config(format!("{name} must be positive")));
            }
        }
        if let Some(k) = self.camera_offset_rank {
            if k == 0 || k > self.feature_dim {
                return Err(Error::config(format!(
                    "camera_offset_rank {k} must lie in 1..={}",
                    self.feature_dim
                )));
            }
        }
        if self.id_subspace_dim > self.feature_dim {
            return Err(Error::config(format!(
                "id_subspace_dim {} exceeds feature_dim {}",
                self.id_subspace_dim, self.feature_dim
            )));
        }
        // Zero scales are accepted: they give the degenerate noiseless world.
        for (name, v) in [
            ("camera_shift_scale", self.camera_shift_scale),
            ("nuisance_noise_scale", self.nuisance_noise_scale),
            ("camera_mix_scale", self.mix_scale()),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

fn normal_matrix(rng: &mut impl Rng, rows: usize, cols: usize, std: f64) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || std * rng.sample::<f64, _>(StandardNormal))
}

fn normal_vector(rng: &mut impl Rng, n: usize) -> Array1<f64> {
    Array1::from_shape_simple_fn(n, || rng.sample::<f64, _>(StandardNormal))
}

fn to_f32_precision(v: f64) -> f64 {
    f64::from(v as f32)
}

/// Draws a dataset from the synthetic cross-camera world.
pub fn synth_generate(config: &SyntheticWorldConfig) -> Result<Dataset> {
    config.validate()?;
    let f = config.feature_dim;
    let d = config.id_subspace_dim;
    let s = config.camera_shift_scale;
    let mix = config.mix_scale();
    let sigma = config.nuisance_noise_scale;

    let mut world = config.world_seed.derive("synthetic/appearance").rng();
    let basis = normal_matrix(&mut world, f, d, (1.0 / d as f64).sqrt());

    let offset_basis = config.camera_offset_rank.map(|k| {
        let mut world = config.world_seed.derive("synthetic/camera-offsets").rng();
        normal_matrix(&mut world, f, k, (1.0 / k as f64).sqrt())
    });

    let mut rng = config.seed.derive("synthetic/identities").rng();
    let appearances: Vec<Array1<f64>> = (0..config.n_identities)
        .map(|_| basis.dot(&normal_vector(&mut rng, d)))
        .collect();

    let mut rng = config.seed.derive("synthetic/cameras").rng();
    let camera_maps: Vec<(Array2<f64>, Array1<f64>)> = (0..config.n_cameras)
        .map(|_| {
            let r = normal_matrix(&mut rng, f, f, (1.0 / f as f64).sqrt());
            let b = match &offset_basis {
                Some(c) => c.dot(&normal_vector(&mut rng, c.ncols())),
                None => normal_vector(&mut rng, f),
            };
            (Array2::eye(f) + r * mix, b * s)
        })
        .collect();

    let mut rng = config.seed.derive("synthetic/images").rng();
    let mut records = Vec::with_capacity(
        config.n_identities * config.n_cameras * config.images_per_identity_per_camera,
    );
    for (id, appearance) in appearances.iter().enumerate() {
        for (cam, (a, b)) in camera_maps.iter().enumerate() {
            let clean = a.dot(appearance) + b;
            for k in 0..config.images_per_identity_per_camera {
                let noise = normal_vector(&mut rng, f);
                let flip_noise = normal_vector(&mut rng, f);
                let features = &clean + &(noise * sigma);
                let flip = &features + &(flip_noise * (0.1 * sigma));
                records.push(ImageRecord {
                    sample_id: format!("{}_{id:04}_c{cam}_{k:03}", config.name),
                    identity: id as i64,
                    camera: cam as u32,
                    dataset: config.name.clone(),
                    features: features.iter().map(|&v| to_f32_precision(v)).collect(),
                    flip_features: Some(flip.iter().map(|&v| to_f32_precision(v)).collect()),
                });
            }
        }
    }
    Dataset::new(config.name.clone(), records)
}

/// Precomputed features keyed by sample id.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FeatureStore {
    pub feature_dim: usize,
    pub entries: BTreeMap<String, (Vec<f64>, Option<Vec<f64>>)>,
}

impl FeatureStore {
    pub fn get(&self, sample_id: &str) -> Option<&(Vec<f64>, Option<Vec<f64>>)> {
        self.entries.get(sample_id)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ManifestRow {
    sample_id: String,
    identity: i64,
    camera: u32,
    dataset: String,
    row_index: i64,
    flip_row_index: i64,
}

/// Raw contents of a feature file: the header's row count and dimension,
/// and the rows that are completely present.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub declared_rows: usize,
    pub dim: usize,
    pub rows: Vec<Vec<f32>>,
    /// Number of values present for the first incomplete row, if the file
    /// is truncated.
    pub partial_row: Option<usize>,
}

pub fn read_feature_file(path: &Path) -> Result<FeatureMatrix> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path).map_err(|e| Error::load(path, e.to_string()))?)
        .read_to_end(&mut bytes)?;
    if bytes.len() < 13 || &bytes[..5] != FEATURE_MAGIC {
        return Err(Error::load(path, "missing EMBF1 header"));
    }
    let declared_rows = u32::from_le_bytes(bytes[5..9].try_into().expect("4 bytes")) as usize;
    let dim = u32::from_le_bytes(bytes[9..13].try_into().expect("4 bytes")) as usize;
    let body = &bytes[13..];
    let values: Vec<f32> = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    let mut rows = Vec::with_capacity(declared_rows);
    let mut partial_row = None;
    for r in 0..declared_rows {
        let start = r * dim;
        if start + dim <= values.len() {
            rows.push(values[start..start + dim].to_vec());
        } else {
            partial_row = Some(values.len().saturating_sub(start));
            break;
        }
    }
    if partial_row.is_none() && values.len() > declared_rows * dim {
        return Err(Error::load(
            path,
            format!(
                "{} trailing values beyond {declared_rows} declared rows",
                values.len() - declared_rows * dim
            ),
        ));
    }
    Ok(FeatureMatrix {
        declared_rows,
        dim,
        rows,
        partial_row,
    })
}

pub fn write_feature_file(path: &Path, dim: usize, rows: &[&[f64]]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(FEATURE_MAGIC)?;
    let n = u32::try_from(rows.len()).map_err(|_| Error::contract("too many feature rows"))?;
    let f = u32::try_from(dim).map_err(|_| Error::contract("feature dimension too large"))?;
    w.write_all(&n.to_le_bytes())?;
    w.write_all(&f.to_le_bytes())?;
    for (i, row) in rows.iter().enumerate() {
        if row.len() != dim {
            return Err(Error::contract(format!(
                "row {i} has {} values, expected {dim}",
                row.len()
            )));
        }
        for &v in row.iter() {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Writes `dataset` as `manifest.csv` + `features.bin` under `dir`. Flip
/// rows follow all primary rows.
pub fn write_precomputed(dir: &Path, dataset: &Dataset) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let dim = dataset.feature_dim().unwrap_or(0);
    let mut rows: Vec<&[f64]> = dataset.records.iter().map(|r| r.features.as_slice()).collect();
    let mut manifest = csv::Writer::from_path(dir.join(MANIFEST_FILE))?;
    let mut next_flip = dataset.records.len();
    for (i, r) in dataset.records.iter().enumerate() {
        let flip_row_index = match &r.flip_features {
            Some(flip) => {
                rows.push(flip.as_slice());
                next_flip += 1;
                (next_flip - 1) as i64
            }
            None => -1,
        };
        manifest.serialize(ManifestRow {
            sample_id: r.sample_id.clone(),
            identity: r.identity,
            camera: r.camera,
            dataset: r.dataset.clone(),
            row_index: i as i64,
            flip_row_index,
        })?;
    }
    manifest.flush()?;
    write_feature_file(&dir.join(FEATURES_FILE), dim, &rows)
}

fn feature_row(
    matrix: &FeatureMatrix,
    path: &Path,
    manifest_row: usize,
    index: i64,
) -> Result<Vec<f64>> {
    let idx = usize::try_from(index).map_err(|_| Error::LoadRow {
        path: path.to_path_buf(),
        row: manifest_row,
        message: format!("negative feature row index {index}"),
    })?;
    if idx >= matrix.declared_rows {
        return Err(Error::LoadRow {
            path: path.to_path_buf(),
            row: manifest_row,
            message: format!(
                "feature row {idx} out of range ({} rows declared)",
                matrix.declared_rows
            ),
        });
    }
    match matrix.rows.get(idx) {
        Some(r) => Ok(r.iter().map(|&v| f64::from(v)).collect()),
        None => Err(Error::LoadRow {
            path: path.to_path_buf(),
            row: manifest_row,
            message: format!(
                "feature row {idx} has {} values, header declares F = {}",
                if idx == matrix.rows.len() {
                    matrix.partial_row.unwrap_or(0)
                } else {
                    0
                },
                matrix.dim
            ),
        }),
    }
}

/// Reads a precomputed-feature directory.
pub fn load_precomputed(dir: &Path) -> Result<(Dataset, FeatureStore)> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let features_path = dir.join(FEATURES_FILE);
    if !manifest_path.is_file() {
        return Err(Error::load(&manifest_path, "manifest not found"));
    }
    let mut reader = csv::Reader::from_path(&manifest_path)
        .map_err(|e| Error::load(&manifest_path, e.to_string()))?;
    let mut manifest = Vec::new();
    for (i, row) in reader.deserialize::<ManifestRow>().enumerate() {
        manifest.push(row.map_err(|e| Error::LoadRow {
            path: manifest_path.clone(),
            row: i,
            message: e.to_string(),
        })?);
    }
    let fallback_name = dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".to_string());
    if manifest.is_empty() {
        let dim = if features_path.is_file() {
            read_feature_file(&features_path)?.dim
        } else {
            0
        };
        let store = FeatureStore {
            feature_dim: dim,
            entries: BTreeMap::new(),
        };
        return Ok((Dataset::empty(fallback_name), store));
    }
    let matrix = read_feature_file(&features_path)?;
    let name = manifest[0].dataset.clone();
    let mut records = Vec::with_capacity(manifest.len());
    let mut store = FeatureStore {
        feature_dim: matrix.dim,
        entries: BTreeMap::new(),
    };
    for (i, row) in manifest.into_iter().enumerate() {
        if row.dataset != name {
            return Err(Error::LoadRow {
                path: manifest_path,
                row: i,
                message: format!("dataset `{}` differs from `{name}`", row.dataset),
            });
        }
        if row.identity < -1 {
            return Err(Error::LoadRow {
                path: manifest_path,
                row: i,
                message: format!("invalid identity {}", row.identity),
            });
        }
        let features = feature_row(&matrix, &features_path, i, row.row_index)?;
        let flip_features = if row.flip_row_index < 0 {
            None
        } else {
            Some(feature_row(&matrix, &features_path, i, row.flip_row_index)?)
        };
        if store.entries.contains_key(&row.sample_id) {
            return Err(Error::LoadRow {
                path: manifest_path,
                row: i,
                message: format!("duplicate sample_id `{}`", row.sample_id),
            });
        }
        store
            .entries
            .insert(row.sample_id.clone(), (features.clone(), flip_features.clone()));
        records.push(ImageRecord {
            sample_id: row.sample_id,
            identity: row.identity,
            camera: row.camera,
            dataset: row.dataset,
            features,
            flip_features,
        });
    }
    Ok((Dataset::new(name, records)?, store))
}
