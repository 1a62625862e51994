//! Batch-hard triplet loss and feature-space reconstruction loss.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::distance::pairwise_row_distances;
use crate::error::{Error, Result};

/// How the per-anchor gap `hp - hn` is turned into a loss term.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MarginMode {
    /// `[m + hp - hn]_+`
    Hinge(f64),
    /// `ln(1 + exp(hp - hn))`; keeps pulling positives in after the margin
    /// is met.
    #[default]
    Softplus,
}

impl MarginMode {
    pub fn validate(self) -> Result<Self> {
        match self {
            MarginMode::Hinge(m) if !(m > 0.0 && m.is_finite()) => {
                Err(Error::config(format!("hinge margin must be > 0, got {m}")))
            }
            mode => Ok(mode),
        }
    }

    fn term(self, gap: f64) -> (f64, f64) {
        match self {
            MarginMode::Hinge(m) => {
                let v = m + gap;
                if v > 0.0 {
                    (v, 1.0)
                } else {
                    (0.0, 0.0)
                }
            }
            MarginMode::Softplus => (softplus(gap), sigmoid(gap)),
        }
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Hardest positive and negative of one anchor, as batch indices.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HardPair {
    pub positive: usize,
    pub negative: usize,
    pub hp: f64,
    pub hn: f64,
}

/// Batch-hard mining over a precomputed distance matrix. Ties go to the
/// lowest batch index.
pub fn mine_batch_hard(dist: ArrayView2<'_, f64>, labels: &[i64]) -> Result<Vec<HardPair>> {
    let n = labels.len();
    if dist.nrows() != n || dist.ncols() != n {
        return Err(Error::contract(format!(
            "distance matrix {:?} does not match {n} labels",
            dist.shape()
        )));
    }
    (0..n)
        .map(|a| {
            let mut pos: Option<(usize, f64)> = None;
            let mut neg: Option<(usize, f64)> = None;
            for j in 0..n {
                if j == a {
                    continue;
                }
                let d = dist[[a, j]];
                if labels[j] == labels[a] {
                    if pos.is_none_or(|(_, best)| d > best) {
                        pos = Some((j, d));
                    }
                } else if neg.is_none_or(|(_, best)| d < best) {
                    neg = Some((j, d));
                }
            }
            match (pos, neg) {
                (Some((p, hp)), Some((q, hn))) => Ok(HardPair {
                    positive: p,
                    negative: q,
                    hp,
                    hn,
                }),
                (None, _) => Err(Error::contract(format!(
                    "anchor {a} with label {} has no positive in the batch",
                    labels[a]
                ))),
                (_, None) => Err(Error::contract(format!(
                    "anchor {a} with label {} has no negative in the batch",
                    labels[a]
                ))),
            }
        })
        .collect()
}

fn check_batch(embeddings: ArrayView2<'_, f64>, labels: &[i64]) -> Result<()> {
    if embeddings.nrows() != labels.len() {
        return Err(Error::contract(format!(
            "{} embeddings but {} labels",
            embeddings.nrows(),
            labels.len()
        )));
    }
    if labels.len() < 3 {
        return Err(Error::contract(format!(
            "batch of {} cannot hold a positive and a negative for every anchor",
            labels.len()
        )));
    }
    Ok(())
}

/// Mean over anchors of the batch-hard triplet term.
pub fn batch_hard_triplet_loss(
    embeddings: ArrayView2<'_, f64>,
    labels: &[i64],
    mode: MarginMode,
) -> Result<f64> {
    check_batch(embeddings, labels)?;
    let dist = pairwise_row_distances(embeddings);
    let pairs = mine_batch_hard(dist.view(), labels)?;
    let total: f64 = pairs.iter().map(|p| mode.term(p.hp - p.hn).0).sum();
    Ok(total / labels.len() as f64)
}

/// Loss value and its gradient with respect to every embedding row.
///
/// Only the selected hardest pairs carry gradient. A zero-length pair
/// contributes a zero subgradient.
pub fn batch_hard_triplet_loss_grad(
    embeddings: ArrayView2<'_, f64>,
    labels: &[i64],
    mode: MarginMode,
) -> Result<(f64, Array2<f64>)> {
    check_batch(embeddings, labels)?;
    let n = labels.len();
    let dist = pairwise_row_distances(embeddings);
    let pairs = mine_batch_hard(dist.view(), labels)?;
    let mut grad = Array2::zeros(embeddings.raw_dim());
    let mut total = 0.0;
    let scale = 1.0 / n as f64;
    for (a, pair) in pairs.iter().enumerate() {
        let (value, slope) = mode.term(pair.hp - pair.hn);
        total += value;
        if slope == 0.0 {
            continue;
        }
        let w = slope * scale;
        // d hp / d e_a = (e_a - e_p) / hp ; d hn / d e_a = (e_a - e_n) / hn
        for (other, d, sign) in [(pair.positive, pair.hp, 1.0), (pair.negative, pair.hn, -1.0)] {
            if d == 0.0 {
                continue;
            }
            let coef = sign * w / d;
            for k in 0..embeddings.ncols() {
                let diff = embeddings[[a, k]] - embeddings[[other, k]];
                grad[[a, k]] += coef * diff;
                grad[[other, k]] -= coef * diff;
            }
        }
    }
    Ok((total / n as f64, grad))
}

fn check_same_shape(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::contract(format!(
            "reconstruction shape {:?} does not match target {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// Mean squared error over every element.
pub fn reconstruction_loss(
    reconstructed: ArrayView2<'_, f64>,
    target: ArrayView2<'_, f64>,
) -> Result<f64> {
    check_same_shape(reconstructed, target)?;
    let n = reconstructed.len();
    if n == 0 {
        return Ok(0.0);
    }
    let sum: f64 = reconstructed
        .iter()
        .zip(target.iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(sum / n as f64)
}

pub fn reconstruction_loss_grad(
    reconstructed: ArrayView2<'_, f64>,
    target: ArrayView2<'_, f64>,
) -> Result<(f64, Array2<f64>)> {
    let value = reconstruction_loss(reconstructed, target)?;
    let n = reconstructed.len().max(1) as f64;
    let grad = (&reconstructed - &target) * (2.0 / n);
    Ok((value, grad))
}
