//! Re-identification scoring: embedding extraction with flip test-time
//! augmentation and length normalization, then Rank-1 / mAP with junk
//! removal, and the `-nd` variants that drop every gallery image from the
//! query's camera.

use std::collections::BTreeMap;

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::distance::euclidean_unchecked;
use crate::error::{Error, Result};
use crate::model::{BnMode, ParamSet};
use crate::types::{EmbeddingVector, ImageRecord, DISTRACTOR_IDENTITY};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub rank1: f64,
    pub rank1_nd: f64,
    pub map: f64,
    pub map_nd: f64,
    /// Queries with at least one cross-camera positive (standard metrics).
    pub n_queries_scored: usize,
    pub n_queries_scored_nd: usize,
    /// Queries whose gallery was empty after filtering.
    pub n_queries_empty: usize,
}

fn rows(records: &[&ImageRecord], flip: bool) -> Array2<f64> {
    let dim = records.first().map_or(0, |r| r.features.len());
    Array2::from_shape_fn((records.len(), dim), |(i, j)| {
        let r = records[i];
        match (&r.flip_features, flip) {
            (Some(f), true) => f[j],
            _ => r.features[j],
        }
    })
}

/// `z_id` per sample id, in eval batch-norm mode. With `tta`, records that
/// have flip features get the mean of both encodings. With `normalize`,
/// vectors are scaled to unit length after averaging; zero vectors are
/// left as they are.
pub fn embed_for_eval(
    records: &[ImageRecord],
    params: &ParamSet,
    tta: bool,
    normalize: bool,
) -> Result<BTreeMap<String, EmbeddingVector>> {
    let mut out = BTreeMap::new();
    if records.is_empty() {
        return Ok(out);
    }
    let refs: Vec<&ImageRecord> = records.iter().collect();
    let base = params.encode_id(rows(&refs, false).view(), BnMode::Eval)?;
    let flipped = if tta && records.iter().any(|r| r.flip_features.is_some()) {
        Some(params.encode_id(rows(&refs, true).view(), BnMode::Eval)?)
    } else {
        None
    };
    for (i, r) in records.iter().enumerate() {
        let mut z: Vec<f64> = base.row(i).to_vec();
        if let (Some(f), Some(_)) = (&flipped, &r.flip_features) {
            for (v, w) in z.iter_mut().zip(f.row(i).iter()) {
                *v = (*v + w) / 2.0;
            }
        }
        if normalize {
            let norm = z.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 0.0 {
                z.iter_mut().for_each(|v| *v /= norm);
            }
        }
        out.insert(r.sample_id.clone(), EmbeddingVector(z));
    }
    Ok(out)
}

/// A query or gallery entry ready for scoring.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalItem {
    pub sample_id: String,
    pub identity: i64,
    pub camera: u32,
    pub embedding: Vec<f64>,
}

/// Pairs records with their embeddings.
pub fn eval_items(
    records: &[ImageRecord],
    embeddings: &BTreeMap<String, EmbeddingVector>,
) -> Result<Vec<EvalItem>> {
    records
        .iter()
        .map(|r| {
            let e = embeddings.get(&r.sample_id).ok_or_else(|| {
                Error::contract(format!("no embedding for sample `{}`", r.sample_id))
            })?;
            Ok(EvalItem {
                sample_id: r.sample_id.clone(),
                identity: r.identity,
                camera: r.camera,
                embedding: e.0.clone(),
            })
        })
        .collect()
}

/// Outcome of one query under one protocol.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryScore {
    pub rank1_hit: bool,
    pub ap: f64,
    /// Relevance of the filtered ranking, best match first.
    pub relevance: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryOutcome {
    /// `None` when the query has no positive under that protocol.
    pub standard: Option<QueryScore>,
    pub nd: Option<QueryScore>,
    pub empty: bool,
}

fn score_relevance(relevance: Vec<bool>) -> Option<QueryScore> {
    let n_pos = relevance.iter().filter(|&&r| r).count();
    if n_pos == 0 {
        return None;
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (k, &rel) in relevance.iter().enumerate() {
        if rel {
            hits += 1;
            sum += hits as f64 / (k + 1) as f64;
        }
    }
    Some(QueryScore {
        rank1_hit: relevance[0],
        ap: sum / n_pos as f64,
        relevance,
    })
}

fn check_dims(query: &[EvalItem], gallery: &[EvalItem]) -> Result<()> {
    let Some(dim) = query.first().or(gallery.first()).map(|i| i.embedding.len()) else {
        return Ok(());
    };
    for item in query.iter().chain(gallery) {
        if item.embedding.len() != dim {
            return Err(Error::contract(format!(
                "embedding of `{}` has dimension {}, expected {dim}",
                item.sample_id,
                item.embedding.len()
            )));
        }
    }
    Ok(())
}

/// Per-query outcomes, in query order.
pub fn score_queries(query: &[EvalItem], gallery: &[EvalItem]) -> Result<Vec<QueryOutcome>> {
    check_dims(query, gallery)?;
    Ok(query
        .par_iter()
        .map(|q| {
            let mut ranked: Vec<(f64, &EvalItem)> = gallery
                .iter()
                .map(|g| (euclidean_unchecked(&q.embedding, &g.embedding), g))
                .collect();
            ranked.sort_by(|a, b| {
                a.0.total_cmp(&b.0)
                    .then_with(|| a.1.sample_id.cmp(&b.1.sample_id))
            });
            let is_pos = |g: &EvalItem| {
                q.identity != DISTRACTOR_IDENTITY && g.identity == q.identity && g.camera != q.camera
            };
            let standard: Vec<bool> = ranked
                .iter()
                .filter(|(_, g)| !(g.identity == q.identity && g.camera == q.camera))
                .map(|(_, g)| is_pos(g))
                .collect();
            let nd: Vec<bool> = ranked
                .iter()
                .filter(|(_, g)| g.camera != q.camera)
                .map(|(_, g)| is_pos(g))
                .collect();
            let empty = standard.is_empty() || nd.is_empty();
            QueryOutcome {
                standard: score_relevance(standard),
                nd: score_relevance(nd),
                empty,
            }
        })
        .collect())
}

fn mean_of(scores: impl Iterator<Item = (bool, f64)>) -> (f64, f64, usize) {
    let (mut r1, mut ap, mut n) = (0.0, 0.0, 0usize);
    for (hit, a) in scores {
        if hit {
            r1 += 1.0;
        }
        ap += a;
        n += 1;
    }
    if n == 0 {
        (0.0, 0.0, 0)
    } else {
        (r1 / n as f64, ap / n as f64, n)
    }
}

/// Rank-1, mAP and their `-nd` variants. Queries without a cross-camera
/// positive are excluded from the corresponding means.
pub fn score(query: &[EvalItem], gallery: &[EvalItem]) -> Result<Scores> {
    let outcomes = score_queries(query, gallery)?;
    let n_queries_empty = outcomes.iter().filter(|o| o.empty).count();
    if n_queries_empty > 0 {
        log::warn!("{n_queries_empty} queries had an empty gallery after filtering");
    }
    let (rank1, map, n_queries_scored) = mean_of(
        outcomes
            .iter()
            .filter_map(|o| o.standard.as_ref().map(|s| (s.rank1_hit, s.ap))),
    );
    let (rank1_nd, map_nd, n_queries_scored_nd) = mean_of(
        outcomes
            .iter()
            .filter_map(|o| o.nd.as_ref().map(|s| (s.rank1_hit, s.ap))),
    );
    Ok(Scores {
        rank1,
        rank1_nd,
        map,
        map_nd,
        n_queries_scored,
        n_queries_scored_nd,
        n_queries_empty,
    })
}

/// Average precision by direct enumeration of precision at every relevant
/// rank. Used as a test oracle.
pub fn brute_force_ap(relevance: &[bool], n_positives: usize) -> Result<f64> {
    let ones = relevance.iter().filter(|&&r| r).count();
    if n_positives == 0 || ones != n_positives {
        return Err(Error::contract(format!(
            "relevance list holds {ones} positives, {n_positives} declared"
        )));
    }
    let mut total = 0.0;
    for k in 0..relevance.len() {
        if relevance[k] {
            let hits = relevance[..=k].iter().filter(|&&r| r).count();
            total += hits as f64 / (k + 1) as f64;
        }
    }
    Ok(total / n_positives as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_params, HeadArchitecture, NuiMode};
    use crate::types::RngSeed;
    use rand::Rng;

    fn item(id: &str, identity: i64, camera: u32, e: &[f64]) -> EvalItem {
        EvalItem {
            sample_id: id.into(),
            identity,
            camera,
            embedding: e.to_vec(),
        }
    }

    #[test]
    fn single_cross_camera_positive() {
        let q = [item("q", 1, 0, &[0.0])];
        let g = [item("g", 1, 1, &[1.0])];
        let s = score(&q, &g).unwrap();
        assert_eq!((s.rank1, s.rank1_nd, s.map, s.map_nd), (1.0, 1.0, 1.0, 1.0));
        assert_eq!(s.n_queries_scored, 1);
    }

    #[test]
    fn ap_with_positives_first_and_third() {
        let q = [item("q", 1, 0, &[0.0])];
        let g = [
            item("a", 1, 1, &[1.0]),
            item("b", 2, 1, &[2.0]),
            item("c", 1, 2, &[3.0]),
            // Junk: same identity, same camera; removed.
            item("j", 1, 0, &[0.5]),
        ];
        let s = score(&q, &g).unwrap();
        assert!((s.map - 5.0 / 6.0).abs() < 1e-15);
        assert_eq!(s.rank1, 1.0);
        assert!((brute_force_ap(&[true, false, true], 2).unwrap() - 5.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn nd_drops_same_camera_distractors() {
        let q = [item("q", 1, 0, &[0.0])];
        let g = [item("n", 2, 0, &[0.1]), item("p", 1, 1, &[1.0])];
        let s = score(&q, &g).unwrap();
        assert_eq!(s.rank1, 0.0);
        assert_eq!(s.map, 0.5);
        assert_eq!(s.rank1_nd, 1.0);
        assert_eq!(s.map_nd, 1.0);
    }

    #[test]
    fn zero_positive_and_empty_queries_are_skipped() {
        let q = [item("q1", 1, 0, &[0.0]), item("q2", 5, 0, &[0.0]), item("q3", 1, 2, &[0.0])];
        let g = [item("p", 1, 1, &[1.0]), item("x", 3, 2, &[1.0])];
        let s = score(&q, &g).unwrap();
        assert_eq!(s.n_queries_scored, 2);
        let only_same_cam = [item("z", 1, 0, &[0.0])];
        let s = score(&q[..1], &only_same_cam).unwrap();
        assert_eq!(s.n_queries_scored, 0);
        assert_eq!(s.n_queries_empty, 1);
        assert_eq!(s.rank1, 0.0);
    }

    #[test]
    fn ties_break_by_sample_id() {
        let q = [item("q", 1, 0, &[0.0])];
        let g = [item("b", 1, 1, &[1.0]), item("a", 2, 1, &[-1.0])];
        let s = score(&q, &g).unwrap();
        assert_eq!(s.rank1, 0.0);
        let g = [item("a", 1, 1, &[1.0]), item("b", 2, 1, &[-1.0])];
        assert_eq!(score(&q, &g).unwrap().rank1, 1.0);
    }

    #[test]
    fn brute_force_cases() {
        assert_eq!(brute_force_ap(&[true], 1).unwrap(), 1.0);
        assert_eq!(brute_force_ap(&[false, true], 1).unwrap(), 0.5);
        assert!(brute_force_ap(&[true, true], 1).is_err());
        assert!(brute_force_ap(&[false], 0).is_err());
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let q = [item("q", 1, 0, &[0.0, 1.0])];
        let g = [item("g", 1, 1, &[1.0])];
        assert!(score(&q, &g).is_err());
    }

    fn records(n: usize, flip_equal: bool) -> Vec<ImageRecord> {
        let mut rng = RngSeed(4).rng();
        (0..n)
            .map(|i| {
                let f: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
                let flip = if flip_equal {
                    f.clone()
                } else {
                    f.iter().map(|v| v + 0.3).collect()
                };
                ImageRecord {
                    sample_id: format!("r{i}"),
                    identity: i as i64,
                    camera: 0,
                    dataset: "d".into(),
                    features: f,
                    flip_features: Some(flip),
                }
            })
            .collect()
    }

    fn params() -> ParamSet {
        let arch = HeadArchitecture {
            input_dim: 6,
            hidden_dim: 8,
            embedding_dim: 4,
            nuisance_dim: 4,
            decoder_hidden_dim: 8,
        };
        init_params(arch, NuiMode::Shared, &[], RngSeed(2)).unwrap()
    }

    #[test]
    fn embedding_extraction_modes() {
        let p = params();
        let recs = records(5, false);
        let raw = embed_for_eval(&recs, &p, false, false).unwrap();
        let x = rows(&recs.iter().collect::<Vec<_>>(), false);
        let direct = p.encode_id(x.view(), BnMode::Eval).unwrap();
        for (i, r) in recs.iter().enumerate() {
            assert_eq!(raw[&r.sample_id].0, direct.row(i).to_vec());
        }
        let normed = embed_for_eval(&recs, &p, true, true).unwrap();
        for v in normed.values() {
            assert!((v.norm() - 1.0).abs() < 1e-9);
        }
        let tta = embed_for_eval(&recs, &p, true, false).unwrap();
        assert_ne!(tta, raw);

        let same = records(5, true);
        assert_eq!(
            embed_for_eval(&same, &p, true, false).unwrap(),
            embed_for_eval(&same, &p, false, false).unwrap()
        );
    }

    #[test]
    fn zero_vector_is_not_normalized() {
        let mut p = params();
        p.emb.module = crate::model::Head::zeros(6, 8, 4);
        let e = embed_for_eval(&records(2, false), &p, true, true).unwrap();
        assert!(e.values().all(|v| v.0.iter().all(|&x| x == 0.0)));
    }
}
