//! Dataset directories on disk.
//!
//! Two layouts are accepted. A directory holding `manifest.csv` is read
//! with [`load_precomputed`]. Otherwise every regular file whose name does
//! not start with `.` and is not a feature file is an image name of the
//! form `<id>_c<cam>…` (Market-1501 style); `features.bin` holds one row
//! per image in sorted filename order and an optional `features_flip.bin`
//! holds the mirrored rows in the same order.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use regex::Regex;

use crate::error::{Error, Result};
use crate::providers::{load_precomputed, read_feature_file, FeatureMatrix, FEATURES_FILE, MANIFEST_FILE};
use crate::types::{Dataset, ImageRecord};

pub const FLIP_FEATURES_FILE: &str = "features_flip.bin";

fn name_pattern() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^(-?\d+)_c(\d+)").expect("valid pattern"))
}

/// Identity and camera from an image name such as `0002_c1s1_000451_03`.
pub fn parse_image_name(name: &str) -> Result<(i64, u32)> {
    let bad = |why: &str| Error::load(name, format!("cannot parse identity/camera from `{name}`: {why}"));
    let caps = name_pattern()
        .captures(name)
        .ok_or_else(|| bad("expected `<id>_c<cam>`"))?;
    let identity: i64 = caps[1].parse().map_err(|_| bad("identity out of range"))?;
    if identity < -1 {
        return Err(bad("identity below -1"));
    }
    let camera: u32 = caps[2].parse().map_err(|_| bad("camera out of range"))?;
    Ok((identity, camera))
}

fn dir_name(path: &Path) -> String {
    path.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".to_string())
}

fn matrix_rows(matrix: FeatureMatrix, path: &Path, expected: usize) -> Result<Vec<Vec<f64>>> {
    if matrix.declared_rows != expected || matrix.rows.len() != expected {
        return Err(Error::load(
            path,
            format!(
                "{} complete feature rows ({} declared) for {expected} images",
                matrix.rows.len(),
                matrix.declared_rows
            ),
        ));
    }
    Ok(matrix
        .rows
        .into_iter()
        .map(|r| r.into_iter().map(f64::from).collect())
        .collect())
}

/// Reads a dataset directory in either supported layout.
pub fn load_dataset_dir(path: &Path) -> Result<Dataset> {
    if !path.is_dir() {
        return Err(Error::load(path, "not a directory"));
    }
    if path.join(MANIFEST_FILE).is_file() {
        return Ok(load_precomputed(path)?.0);
    }
    let skip: BTreeSet<&str> = [FEATURES_FILE, FLIP_FEATURES_FILE].into_iter().collect();
    let mut names = Vec::new();
    for entry in std::fs::read_dir(path).map_err(|e| Error::load(path, e.to_string()))? {
        let entry = entry?;
        if !entry.file_type()?.is_file() {
            continue;
        }
        let name = entry.file_name().to_string_lossy().into_owned();
        if name.starts_with('.') || skip.contains(name.as_str()) {
            continue;
        }
        names.push(name);
    }
    names.sort();
    let name = dir_name(path);
    if names.is_empty() {
        return Ok(Dataset::empty(name));
    }
    let parsed = names
        .iter()
        .map(|n| parse_image_name(n).map_err(|_| Error::load(path.join(n), format!("unparseable image name `{n}`"))))
        .collect::<Result<Vec<_>>>()?;

    let features_path = path.join(FEATURES_FILE);
    if !features_path.is_file() {
        return Err(Error::load(&features_path, "feature file not found"));
    }
    let features = matrix_rows(read_feature_file(&features_path)?, &features_path, names.len())?;
    let flip_path: PathBuf = path.join(FLIP_FEATURES_FILE);
    let flips = if flip_path.is_file() {
        Some(matrix_rows(read_feature_file(&flip_path)?, &flip_path, names.len())?)
    } else {
        None
    };

    let mut flips = flips.map(Vec::into_iter);
    let records = names
        .iter()
        .zip(parsed)
        .zip(features)
        .map(|((file, (identity, camera)), features)| {
            let stem = Path::new(file)
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| file.clone());
            ImageRecord {
                sample_id: stem,
                identity,
                camera,
                dataset: name.clone(),
                features,
                flip_features: flips.as_mut().and_then(Iterator::next),
            }
        })
        .collect();
    Dataset::new(name, records)
}

/// Train / query / gallery partition of one target dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetSplit {
    /// Unlabeled fine-tuning data.
    pub train: Dataset,
    pub query: Dataset,
    pub gallery: Dataset,
}

/// Splits by identity: even identities form the fine-tuning set, odd ones
/// the test set. In the test set the first image of every
/// (identity, camera) pair is a query and the rest form the gallery.
/// Distractors always go to the gallery.
pub fn split_by_identity(dataset: &Dataset) -> Result<TargetSplit> {
    let mut train = Vec::new();
    let mut query = Vec::new();
    let mut gallery = Vec::new();
    let mut seen = BTreeSet::new();
    for r in &dataset.records {
        if r.is_distractor() {
            gallery.push(r.clone());
        } else if r.identity % 2 == 0 {
            train.push(r.clone());
        } else if seen.insert((r.identity, r.camera)) {
            query.push(r.clone());
        } else {
            gallery.push(r.clone());
        }
    }
    if train.is_empty() || query.is_empty() || gallery.is_empty() {
        return Err(Error::config(format!(
            "dataset `{}` is too small to split into train/query/gallery",
            dataset.name
        )));
    }
    let name = &dataset.name;
    Ok(TargetSplit {
        train: Dataset::new(name.clone(), train)?,
        query: Dataset::new(name.clone(), query)?,
        gallery: Dataset::new(name.clone(), gallery)?,
    })
}
