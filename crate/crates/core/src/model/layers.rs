//! Dense, batch-norm and the two composite blocks (encoder head, decoder),
//! with explicit forward caches and backward passes.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BnMode {
    /// Batch statistics; running statistics are updated by the trainer.
    Train,
    /// Running statistics; the block is a row-wise function.
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    /// `(in, out)`
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Dense {
    pub fn zeros(input: usize, output: usize) -> Self {
        Dense {
            weight: Array2::zeros((input, output)),
            bias: Array1::zeros(output),
        }
    }

    /// Uniform weights in `±sqrt(3 / fan_in)` (unit-variance preserving),
    /// zero bias.
    pub fn init(input: usize, output: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = (3.0 / input as f64).sqrt();
        let weight = Array2::from_shape_simple_fn((input, output), || rng.random_range(-bound..bound));
        Dense {
            weight,
            bias: Array1::zeros(output),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn forward(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        x.dot(&self.weight) + &self.bias
    }

    fn backward(&self, x: ArrayView2<'_, f64>, dy: &Array2<f64>, want_params: bool) -> (Option<DenseGrads>, Array2<f64>) {
        let dx = dy.dot(&self.weight.t());
        let grads = want_params.then(|| DenseGrads {
            weight: x.t().dot(dy),
            bias: dy.sum_axis(Axis(0)),
        });
        (grads, dx)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseGrads {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
    pub momentum: f64,
    pub eps: f64,
}

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

impl BatchNorm {
    pub fn new(dim: usize) -> Self {
        BatchNorm {
            gamma: Array1::ones(dim),
            beta: Array1::zeros(dim),
            running_mean: Array1::zeros(dim),
            running_var: Array1::ones(dim),
            momentum: BN_MOMENTUM,
            eps: BN_EPS,
        }
    }

    fn forward(&self, h: &Array2<f64>, mode: BnMode) -> (Array2<f64>, BnCache) {
        let n = h.nrows().max(1) as f64;
        let (mean, var) = match mode {
            BnMode::Train => {
                let mean = h.sum_axis(Axis(0)) / n;
                let centered = h - &mean;
                let var = (&centered * &centered).sum_axis(Axis(0)) / n;
                (mean, var)
            }
            BnMode::Eval => (self.running_mean.clone(), self.running_var.clone()),
        };
        let inv_std = var.mapv(|v| 1.0 / (v + self.eps).sqrt());
        let xhat = (h - &mean) * &inv_std;
        let y = &xhat * &self.gamma + &self.beta;
        (
            y,
            BnCache {
                mode,
                xhat,
                inv_std,
                mean,
                var,
                rows: h.nrows(),
            },
        )
    }

    fn backward(&self, cache: &BnCache, dy: &Array2<f64>, want_params: bool) -> (Option<BnGrads>, Array2<f64>) {
        let grads = want_params.then(|| BnGrads {
            gamma: (dy * &cache.xhat).sum_axis(Axis(0)),
            beta: dy.sum_axis(Axis(0)),
        });
        let dxhat = dy * &self.gamma;
        let dx = match cache.mode {
            BnMode::Eval => dxhat * &cache.inv_std,
            BnMode::Train => {
                let n = cache.rows as f64;
                let sum_dxhat = dxhat.sum_axis(Axis(0));
                let sum_dxhat_xhat = (&dxhat * &cache.xhat).sum_axis(Axis(0));
                let inner = dxhat * n - &sum_dxhat - &cache.xhat * &sum_dxhat_xhat;
                inner * &(&cache.inv_std / n)
            }
        };
        (grads, dx)
    }

    /// Exponential moving update of the running statistics from one
    /// train-mode batch. Variance is stored unbiased.
    pub fn update_running(&mut self, stats: &BnBatchStats) {
        let m = self.momentum;
        let n = stats.rows as f64;
        let correction = if stats.rows > 1 { n / (n - 1.0) } else { 1.0 };
        self.running_mean = &self.running_mean * (1.0 - m) + &stats.mean * m;
        self.running_var = &self.running_var * (1.0 - m) + &stats.var * (m * correction);
    }
}

#[derive(Debug, Clone)]
struct BnCache {
    mode: BnMode,
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
    mean: Array1<f64>,
    var: Array1<f64>,
    rows: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BnGrads {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
}

/// Batch statistics observed by a train-mode forward pass (biased variance).
#[derive(Debug, Clone, PartialEq)]
pub struct BnBatchStats {
    pub mean: Array1<f64>,
    pub var: Array1<f64>,
    pub rows: usize,
}

/// Encoder head: `dense2(BN(ReLU(dense1(x))))`, linear output.
#[derive(Debug, Clone, PartialEq)]
pub struct Head {
    pub dense1: Dense,
    pub bn: BatchNorm,
    pub dense2: Dense,
}

#[derive(Debug, Clone)]
pub struct HeadCache {
    input: Array2<f64>,
    pre_relu: Array2<f64>,
    bn: BnCache,
    bn_out: Array2<f64>,
}

impl HeadCache {
    pub fn batch_stats(&self) -> Option<BnBatchStats> {
        (self.bn.mode == BnMode::Train).then(|| BnBatchStats {
            mean: self.bn.mean.clone(),
            var: self.bn.var.clone(),
            rows: self.bn.rows,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadGrads {
    pub dense1: DenseGrads,
    pub bn: BnGrads,
    pub dense2: DenseGrads,
}

impl Head {
    pub fn init(input: usize, hidden: usize, output: usize, rng: &mut ChaCha8Rng) -> Self {
        Head {
            dense1: Dense::init(input, hidden, rng),
            bn: BatchNorm::new(hidden),
            dense2: Dense::init(hidden, output, rng),
        }
    }

    pub fn zeros(input: usize, hidden: usize, output: usize) -> Self {
        Head {
            dense1: Dense::zeros(input, hidden),
            bn: BatchNorm::new(hidden),
            dense2: Dense::zeros(hidden, output),
        }
    }

    pub fn forward(&self, x: ArrayView2<'_, f64>, mode: BnMode) -> Array2<f64> {
        self.forward_cached(x, mode).0
    }

    pub fn forward_cached(&self, x: ArrayView2<'_, f64>, mode: BnMode) -> (Array2<f64>, HeadCache) {
        let pre_relu = self.dense1.forward(x);
        let act = pre_relu.mapv(|v| v.max(0.0));
        let (bn_out, bn) = self.bn.forward(&act, mode);
        let out = self.dense2.forward(bn_out.view());
        (
            out,
            HeadCache {
                input: x.to_owned(),
                pre_relu,
                bn,
                bn_out,
            },
        )
    }

    /// Parameter gradients for `d loss / d out = dout`. The input gradient
    /// is not needed anywhere (inputs are data).
    pub fn backward(&self, cache: &HeadCache, dout: &Array2<f64>) -> HeadGrads {
        let (g2, dbn_out) = self.dense2.backward(cache.bn_out.view(), dout, true);
        let (gbn, dact) = self.bn.backward(&cache.bn, &dbn_out, true);
        let mut dpre = dact;
        ndarray::Zip::from(&mut dpre)
            .and(&cache.pre_relu)
            .for_each(|d, &p| {
                if p <= 0.0 {
                    *d = 0.0;
                }
            });
        let (g1, _) = self.dense1.backward(cache.input.view(), &dpre, true);
        HeadGrads {
            dense1: g1.expect("requested"),
            bn: gbn.expect("requested"),
            dense2: g2.expect("requested"),
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.dense1.weight.len()
            + self.dense1.bias.len()
            + self.bn.gamma.len()
            + self.bn.beta.len()
            + self.dense2.weight.len()
            + self.dense2.bias.len()
    }
}

/// Decoder: `dense_out(ReLU(dense_hidden(z)))`, no batch norm.
#[derive(Debug, Clone, PartialEq)]
pub struct Decoder {
    pub dense1: Dense,
    pub dense2: Dense,
}

#[derive(Debug, Clone)]
pub struct DecoderCache {
    input: Array2<f64>,
    pre_relu: Array2<f64>,
    act: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderGrads {
    pub dense1: DenseGrads,
    pub dense2: DenseGrads,
}

impl Decoder {
    pub fn init(input: usize, hidden: usize, output: usize, rng: &mut ChaCha8Rng) -> Self {
        Decoder {
            dense1: Dense::init(input, hidden, rng),
            dense2: Dense::init(hidden, output, rng),
        }
    }

    pub fn zeros(input: usize, hidden: usize, output: usize) -> Self {
        Decoder {
            dense1: Dense::zeros(input, hidden),
            dense2: Dense::zeros(hidden, output),
        }
    }

    pub fn forward(&self, z: ArrayView2<'_, f64>) -> Array2<f64> {
        self.forward_cached(z).0
    }

    pub fn forward_cached(&self, z: ArrayView2<'_, f64>) -> (Array2<f64>, DecoderCache) {
        let pre_relu = self.dense1.forward(z);
        let act = pre_relu.mapv(|v| v.max(0.0));
        let out = self.dense2.forward(act.view());
        (
            out,
            DecoderCache {
                input: z.to_owned(),
                pre_relu,
                act,
            },
        )
    }

    /// Returns parameter gradients (when requested) and the gradient with
    /// respect to the latent input.
    pub fn backward(&self, cache: &DecoderCache, dout: &Array2<f64>, want_params: bool) -> (Option<DecoderGrads>, Array2<f64>) {
        let (g2, dact) = self.dense2.backward(cache.act.view(), dout, want_params);
        let mut dpre = dact;
        ndarray::Zip::from(&mut dpre)
            .and(&cache.pre_relu)
            .for_each(|d, &p| {
                if p <= 0.0 {
                    *d = 0.0;
                }
            });
        let (g1, dz) = self.dense1.backward(cache.input.view(), &dpre, want_params);
        let grads = match (g1, g2) {
            (Some(dense1), Some(dense2)) => Some(DecoderGrads { dense1, dense2 }),
            _ => None,
        };
        (grads, dz)
    }

    pub fn parameter_count(&self) -> usize {
        self.dense1.weight.len() + self.dense1.bias.len() + self.dense2.weight.len() + self.dense2.bias.len()
    }
}
