//! Euclidean distances, always evaluated in double precision.

use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};

pub fn euclidean_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::contract(format!(
            "distance between vectors of dimension {} and {}",
            a.len(),
            b.len()
        )));
    }
    Ok(euclidean_unchecked(a, b))
}

#[inline]
pub(crate) fn euclidean_unchecked(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = x - y;
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

/// Full symmetric distance matrix between the given vectors.
pub fn pairwise_distances(xs: &[Vec<f64>]) -> Result<Array2<f64>> {
    let Some(first) = xs.first() else {
        return Err(Error::contract("pairwise distances of an empty list"));
    };
    let dim = first.len();
    if let Some((i, v)) = xs.iter().enumerate().find(|(_, v)| v.len() != dim) {
        return Err(Error::contract(format!(
            "vector {i} has dimension {}, expected {dim}",
            v.len()
        )));
    }
    let n = xs.len();
    let mut d = Array2::zeros((n, n));
    for i in 0..n {
        for j in (i + 1)..n {
            let v = euclidean_unchecked(&xs[i], &xs[j]);
            d[[i, j]] = v;
            d[[j, i]] = v;
        }
    }
    Ok(d)
}

/// Distance matrix between the rows of a matrix.
pub fn pairwise_row_distances(rows: ArrayView2<'_, f64>) -> Array2<f64> {
    let n = rows.nrows();
    let mut d = Array2::zeros((n, n));
    for i in 0..n {
        for j in (i + 1)..n {
            let v = rows
                .row(i)
                .iter()
                .zip(rows.row(j).iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            d[[i, j]] = v;
            d[[j, i]] = v;
        }
    }
    d
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::RngSeed;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_vecs(seed: u64, n: usize, dim: usize) -> Vec<Vec<f64>> {
        let mut rng = RngSeed(seed).rng();
        (0..n)
            .map(|_| (0..dim).map(|_| rng.random_range(-3.0..3.0)).collect())
            .collect()
    }

    #[test]
    fn trivial_cases() {
        assert_eq!(euclidean_distance(&[0.0, 0.0], &[0.0, 0.0]).unwrap(), 0.0);
        assert_eq!(euclidean_distance(&[0.0, 0.0], &[3.0, 4.0]).unwrap(), 5.0);
        assert!(euclidean_distance(&[0.0], &[0.0, 1.0]).is_err());
    }

    #[test]
    fn matches_elementwise_oracle_128d() {
        let v = random_vecs(1, 2, 128);
        let mut acc = 0.0;
        for k in 0..128 {
            acc += (v[0][k] - v[1][k]).powi(2);
        }
        let oracle = acc.sqrt();
        assert!((euclidean_distance(&v[0], &v[1]).unwrap() - oracle).abs() < 1e-12);
    }

    #[test]
    fn pairwise_small_cases() {
        let d = pairwise_distances(&[vec![1.0, 2.0]]).unwrap();
        assert_eq!(d.shape(), &[1, 1]);
        assert_eq!(d[[0, 0]], 0.0);
        let d = pairwise_distances(&[vec![0.0], vec![1.0]]).unwrap();
        assert_eq!(d, ndarray::array![[0.0, 1.0], [1.0, 0.0]]);
        assert!(pairwise_distances(&[]).is_err());
        assert!(pairwise_distances(&[vec![0.0], vec![1.0, 2.0]]).is_err());
    }

    #[test]
    fn pairwise_matches_nested_loop() {
        let v = random_vecs(2, 10, 7);
        let d = pairwise_distances(&v).unwrap();
        let rows = ndarray::Array2::from_shape_fn((10, 7), |(i, j)| v[i][j]);
        let d2 = pairwise_row_distances(rows.view());
        for i in 0..10 {
            for j in 0..10 {
                let o = euclidean_distance(&v[i], &v[j]).unwrap();
                assert!((d[[i, j]] - o).abs() < 1e-12);
                assert!((d2[[i, j]] - o).abs() < 1e-12);
            }
        }
        // Determinism.
        assert_eq!(d, pairwise_distances(&random_vecs(2, 10, 7)).unwrap());
    }

    proptest! {
        #[test]
        fn metric_axioms(seed in any::<u64>(), dim in 1usize..12) {
            let v = random_vecs(seed, 3, dim);
            let ab = euclidean_distance(&v[0], &v[1]).unwrap();
            let ba = euclidean_distance(&v[1], &v[0]).unwrap();
            let bc = euclidean_distance(&v[1], &v[2]).unwrap();
            let ac = euclidean_distance(&v[0], &v[2]).unwrap();
            prop_assert_eq!(ab, ba);
            prop_assert!(ab >= 0.0);
            prop_assert!(ac <= ab + bc + 1e-12);
            prop_assert_eq!(euclidean_distance(&v[0], &v[0]).unwrap(), 0.0);
        }
    }
}
