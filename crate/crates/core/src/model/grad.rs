//! Exact gradients of the two training objectives with respect to every
//! non-frozen tensor.
//!
//! Frozen groups run their forward pass in eval mode (running statistics)
//! and receive no gradient entry. Trainable heads run in train mode and
//! report their batch statistics so the caller can update running stats
//! after the optimizer step.

use std::collections::BTreeMap;

use ndarray::{concatenate, s, Array2, ArrayView2, Axis};

use super::layers::{BnBatchStats, BnMode, DecoderGrads, HeadGrads};
use super::{check_cols, CameraKey, ParamSet, DEC, EMB};
use crate::error::{Error, Result};
use crate::loss::{batch_hard_triplet_loss_grad, reconstruction_loss_grad, MarginMode};

/// Map group → tensor name → flat gradient (same layout as the tensor).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Gradients {
    groups: BTreeMap<String, BTreeMap<&'static str, Vec<f64>>>,
}

impl Gradients {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, group: &str, name: &'static str, grad: Vec<f64>) {
        self.groups.entry(group.to_string()).or_default().insert(name, grad);
    }

    pub fn get(&self, group: &str, name: &str) -> Option<&[f64]> {
        self.groups.get(group)?.get(name).map(Vec::as_slice)
    }

    pub fn contains_group(&self, group: &str) -> bool {
        self.groups.contains_key(group)
    }

    pub fn group_names(&self) -> impl Iterator<Item = &str> {
        self.groups.keys().map(String::as_str)
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &'static str, &[f64])> {
        self.groups.iter().flat_map(|(g, ts)| {
            ts.iter()
                .map(move |(name, v)| (g.as_str(), *name, v.as_slice()))
        })
    }

    fn add_head(&mut self, group: &str, g: HeadGrads) {
        self.insert(group, "dense1.weight", flat2(g.dense1.weight));
        self.insert(group, "dense1.bias", g.dense1.bias.to_vec());
        self.insert(group, "bn.gamma", g.bn.gamma.to_vec());
        self.insert(group, "bn.beta", g.bn.beta.to_vec());
        self.insert(group, "dense2.weight", flat2(g.dense2.weight));
        self.insert(group, "dense2.bias", g.dense2.bias.to_vec());
    }

    fn add_decoder(&mut self, g: DecoderGrads) {
        self.insert(DEC, "dense1.weight", flat2(g.dense1.weight));
        self.insert(DEC, "dense1.bias", g.dense1.bias.to_vec());
        self.insert(DEC, "dense2.weight", flat2(g.dense2.weight));
        self.insert(DEC, "dense2.bias", g.dense2.bias.to_vec());
    }
}

fn flat2(a: Array2<f64>) -> Vec<f64> {
    if a.is_standard_layout() {
        a.into_raw_vec_and_offset().0
    } else {
        a.iter().copied().collect()
    }
}

/// Loss value, gradients, and train-mode batch statistics of one step.
#[derive(Debug, Clone)]
pub struct LossEval {
    pub loss: f64,
    pub grads: Gradients,
    pub bn_stats: Vec<(String, BnBatchStats)>,
}

fn bn_mode_for(frozen: bool) -> BnMode {
    if frozen {
        BnMode::Eval
    } else {
        BnMode::Train
    }
}

/// Batch-hard triplet loss of `z_id = f_emb(x)` and its gradient for the
/// `emb` group.
pub fn triplet_gradients(
    params: &ParamSet,
    x: ArrayView2<'_, f64>,
    labels: &[i64],
    margin: MarginMode,
) -> Result<LossEval> {
    check_cols(x, params.arch.input_dim, "features")?;
    let head = &params.emb.module;
    if params.emb.frozen {
        let z = head.forward(x, BnMode::Eval);
        let (loss, _) = batch_hard_triplet_loss_grad(z.view(), labels, margin)?;
        return Ok(LossEval {
            loss,
            grads: Gradients::new(),
            bn_stats: Vec::new(),
        });
    }
    let (z, cache) = head.forward_cached(x, BnMode::Train);
    let (loss, dz) = batch_hard_triplet_loss_grad(z.view(), labels, margin)?;
    let mut grads = Gradients::new();
    grads.add_head(EMB, head.backward(&cache, &dz));
    let bn_stats = cache
        .batch_stats()
        .map(|s| vec![(EMB.to_string(), s)])
        .unwrap_or_default();
    Ok(LossEval {
        loss,
        grads,
        bn_stats,
    })
}

/// Mean squared reconstruction error of
/// `f_dec(f_emb(x), f_nui[camera](x))` against `x`, with gradients for
/// every trainable group. Rows are routed to nuisance groups by camera;
/// each group's batch norm sees only its own rows.
pub fn reconstruction_gradients(
    params: &ParamSet,
    x: ArrayView2<'_, f64>,
    cameras: &[CameraKey],
) -> Result<LossEval> {
    check_cols(x, params.arch.input_dim, "features")?;
    if cameras.len() != x.nrows() {
        return Err(Error::contract(format!(
            "{} feature rows but {} camera tags",
            x.nrows(),
            cameras.len()
        )));
    }
    let n = x.nrows();
    let mut bn_stats = Vec::new();
    let mut grads = Gradients::new();

    let emb = &params.emb;
    let (z_id, emb_cache) = emb.module.forward_cached(x, bn_mode_for(emb.frozen));
    if !emb.frozen {
        bn_stats.extend(emb_cache.batch_stats().map(|s| (EMB.to_string(), s)));
    }

    // Route rows to nuisance groups.
    let mut routes: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (row, key) in cameras.iter().enumerate() {
        routes.entry(params.nui_group_for(key)?).or_default().push(row);
    }
    let mut z_nui = Array2::zeros((n, params.arch.nuisance_dim));
    let mut nui_caches = Vec::new();
    for (group, rows) in &routes {
        let g = &params.nui[group];
        let sub = x.select(Axis(0), rows);
        let (out, cache) = g.module.forward_cached(sub.view(), bn_mode_for(g.frozen));
        for (i, &r) in rows.iter().enumerate() {
            z_nui.row_mut(r).assign(&out.row(i));
        }
        if !g.frozen {
            bn_stats.extend(cache.batch_stats().map(|s| (group.clone(), s)));
            nui_caches.push((group, rows, cache));
        }
    }

    let z = concatenate(Axis(1), &[z_id.view(), z_nui.view()]).expect("aligned rows");
    let dec = &params.dec;
    let (recon, dec_cache) = dec.module.forward_cached(z.view());
    let (loss, drecon) = reconstruction_loss_grad(recon.view(), x)?;

    let need_latent = !emb.frozen || !nui_caches.is_empty();
    if dec.frozen && !need_latent {
        return Ok(LossEval {
            loss,
            grads,
            bn_stats,
        });
    }
    let (dec_grads, dz) = dec.module.backward(&dec_cache, &drecon, !dec.frozen);
    if let Some(g) = dec_grads {
        grads.add_decoder(g);
    }
    let m = params.arch.embedding_dim;
    if !emb.frozen {
        let dz_id = dz.slice(s![.., ..m]).to_owned();
        grads.add_head(EMB, emb.module.backward(&emb_cache, &dz_id));
    }
    for (group, rows, cache) in nui_caches {
        let dz_nui = dz.slice(s![.., m..]).select(Axis(0), rows);
        grads.add_head(group, params.nui[group].module.backward(&cache, &dz_nui));
    }
    Ok(LossEval {
        loss,
        grads,
        bn_stats,
    })
}
