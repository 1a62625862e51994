//! Encoder heads, decoder, parameter groups with freezing, and the
//! per-camera nuisance registry.
//!
//! Group names are `emb`, `dec`, and one nuisance group per registry key:
//! `nui` (shared), `nui/<dataset>` (per dataset) or `nui/<dataset>/<camera>`
//! (per camera).

mod grad;
pub mod layers;

use std::collections::BTreeMap;

use ndarray::{concatenate, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::RngSeed;

pub use grad::{reconstruction_gradients, triplet_gradients, Gradients, LossEval};
pub use layers::{BnMode, Decoder, Head};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadArchitecture {
    /// Backbone feature dimension F.
    pub input_dim: usize,
    #[serde(default = "default_hidden")]
    pub hidden_dim: usize,
    /// Dimension M of z_id.
    #[serde(default = "default_latent")]
    pub embedding_dim: usize,
    #[serde(default = "default_latent")]
    pub nuisance_dim: usize,
    #[serde(default = "default_hidden")]
    pub decoder_hidden_dim: usize,
}

fn default_hidden() -> usize {
    1024
}

fn default_latent() -> usize {
    128
}

impl HeadArchitecture {
    pub fn new(input_dim: usize) -> Self {
        HeadArchitecture {
            input_dim,
            hidden_dim: default_hidden(),
            embedding_dim: default_latent(),
            nuisance_dim: default_latent(),
            decoder_hidden_dim: default_hidden(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("input_dim", self.input_dim),
            ("hidden_dim", self.hidden_dim),
            ("embedding_dim", self.embedding_dim),
            ("nuisance_dim", self.nuisance_dim),
            ("decoder_hidden_dim", self.decoder_hidden_dim),
        ];
        for (name, d) in dims {
            if d == 0 {
                return Err(Error::config(format!("{name} must be positive")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NuiMode {
    #[default]
    Shared,
    PerDataset,
    PerCamera,
}

/// Cameras are keyed by dataset because camera ids collide across datasets.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CameraKey {
    pub dataset: String,
    pub camera: u32,
}

impl CameraKey {
    pub fn new(dataset: impl Into<String>, camera: u32) -> Self {
        CameraKey {
            dataset: dataset.into(),
            camera,
        }
    }
}

impl std::fmt::Display for CameraKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}/{}", self.dataset, self.camera)
    }
}

pub const EMB: &str = "emb";
pub const DEC: &str = "dec";
pub const NUI: &str = "nui";

/// Registry group name a camera maps to under `mode`.
pub fn nui_group_name(mode: NuiMode, key: &CameraKey) -> String {
    match mode {
        NuiMode::Shared => NUI.to_string(),
        NuiMode::PerDataset => format!("{NUI}/{}", key.dataset),
        NuiMode::PerCamera => format!("{NUI}/{}/{}", key.dataset, key.camera),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Group<T> {
    pub module: T,
    pub frozen: bool,
}

impl<T> Group<T> {
    fn trainable(module: T) -> Self {
        Group {
            module,
            frozen: false,
        }
    }
}

/// Flat, named access to a module's tensors.
pub trait Tensors {
    /// Trainable tensors, in a fixed order.
    fn tensor_names(&self) -> &'static [&'static str];
    /// Non-trainable state (batch-norm running statistics).
    fn buffer_names(&self) -> &'static [&'static str];
    /// Data and shape of a tensor or buffer.
    fn get(&self, name: &str) -> Option<(&[f64], Vec<usize>)>;
    fn get_mut(&mut self, name: &str) -> Option<&mut [f64]>;
}

const HEAD_TENSORS: &[&str] = &[
    "dense1.weight",
    "dense1.bias",
    "bn.gamma",
    "bn.beta",
    "dense2.weight",
    "dense2.bias",
];
const HEAD_BUFFERS: &[&str] = &["bn.running_mean", "bn.running_var"];
const DEC_TENSORS: &[&str] = &["dense1.weight", "dense1.bias", "dense2.weight", "dense2.bias"];

macro_rules! view {
    ($a:expr) => {
        Some(($a.as_slice().expect("standard layout"), $a.shape().to_vec()))
    };
}

impl Tensors for Head {
    fn tensor_names(&self) -> &'static [&'static str] {
        HEAD_TENSORS
    }

    fn buffer_names(&self) -> &'static [&'static str] {
        HEAD_BUFFERS
    }

    fn get(&self, name: &str) -> Option<(&[f64], Vec<usize>)> {
        match name {
            "dense1.weight" => view!(self.dense1.weight),
            "dense1.bias" => view!(self.dense1.bias),
            "bn.gamma" => view!(self.bn.gamma),
            "bn.beta" => view!(self.bn.beta),
            "bn.running_mean" => view!(self.bn.running_mean),
            "bn.running_var" => view!(self.bn.running_var),
            "dense2.weight" => view!(self.dense2.weight),
            "dense2.bias" => view!(self.dense2.bias),
            _ => None,
        }
    }

    fn get_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        match name {
            "dense1.weight" => self.dense1.weight.as_slice_mut(),
            "dense1.bias" => self.dense1.bias.as_slice_mut(),
            "bn.gamma" => self.bn.gamma.as_slice_mut(),
            "bn.beta" => self.bn.beta.as_slice_mut(),
            "bn.running_mean" => self.bn.running_mean.as_slice_mut(),
            "bn.running_var" => self.bn.running_var.as_slice_mut(),
            "dense2.weight" => self.dense2.weight.as_slice_mut(),
            "dense2.bias" => self.dense2.bias.as_slice_mut(),
            _ => None,
        }
    }
}

impl Tensors for Decoder {
    fn tensor_names(&self) -> &'static [&'static str] {
        DEC_TENSORS
    }

    fn buffer_names(&self) -> &'static [&'static str] {
        &[]
    }

    fn get(&self, name: &str) -> Option<(&[f64], Vec<usize>)> {
        match name {
            "dense1.weight" => view!(self.dense1.weight),
            "dense1.bias" => view!(self.dense1.bias),
            "dense2.weight" => view!(self.dense2.weight),
            "dense2.bias" => view!(self.dense2.bias),
            _ => None,
        }
    }

    fn get_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        match name {
            "dense1.weight" => self.dense1.weight.as_slice_mut(),
            "dense1.bias" => self.dense1.bias.as_slice_mut(),
            "dense2.weight" => self.dense2.weight.as_slice_mut(),
            "dense2.bias" => self.dense2.bias.as_slice_mut(),
            _ => None,
        }
    }
}

/// Every trainable tensor of the model, partitioned into groups.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    pub arch: HeadArchitecture,
    pub mode: NuiMode,
    pub emb: Group<Head>,
    pub nui: BTreeMap<String, Group<Head>>,
    pub dec: Group<Decoder>,
}

/// One tensor or buffer as seen through [`ParamSet::entries`].
#[derive(Debug, Clone, Copy)]
pub struct TensorEntry<'a> {
    pub group: &'a str,
    pub name: &'static str,
    pub is_buffer: bool,
    pub data: &'a [f64],
}

fn fresh_nui_head(arch: &HeadArchitecture, seed: RngSeed) -> Head {
    // Every nuisance group starts from the same sub-seed so that later
    // divergence between cameras is attributable to data alone.
    let mut rng = seed.derive("init/nui").rng();
    Head::init(arch.input_dim, arch.hidden_dim, arch.nuisance_dim, &mut rng)
}

/// Deterministic initialization: scaled-uniform fan-in weights, zero
/// biases, batch-norm gamma = 1 and beta = 0.
pub fn init_params(
    arch: HeadArchitecture,
    mode: NuiMode,
    cameras: &[CameraKey],
    seed: RngSeed,
) -> Result<ParamSet> {
    arch.validate()?;
    if mode != NuiMode::Shared && cameras.is_empty() {
        return Err(Error::config(format!(
            "{mode:?} nuisance mode needs at least one camera"
        )));
    }
    let mut rng = seed.derive("init/emb").rng();
    let emb = Head::init(arch.input_dim, arch.hidden_dim, arch.embedding_dim, &mut rng);
    let mut rng = seed.derive("init/dec").rng();
    let dec = Decoder::init(
        arch.embedding_dim + arch.nuisance_dim,
        arch.decoder_hidden_dim,
        arch.input_dim,
        &mut rng,
    );
    let mut params = ParamSet {
        arch,
        mode,
        emb: Group::trainable(emb),
        nui: BTreeMap::new(),
        dec: Group::trainable(dec),
    };
    if mode == NuiMode::Shared {
        params.reset_nui_group(NUI, seed);
    } else {
        for key in cameras {
            let name = nui_group_name(mode, key);
            params.reset_nui_group(&name, seed);
        }
    }
    Ok(params)
}

impl ParamSet {
    /// (Re)creates a nuisance group from the shared nuisance sub-seed of
    /// `seed`. The group starts trainable.
    pub fn reset_nui_group(&mut self, name: &str, seed: RngSeed) {
        let head = fresh_nui_head(&self.arch, seed);
        self.nui.insert(name.to_string(), Group::trainable(head));
    }

    pub fn group_names(&self) -> Vec<String> {
        let mut names = vec![EMB.to_string(), DEC.to_string()];
        names.extend(self.nui.keys().cloned());
        names
    }

    pub fn has_group(&self, name: &str) -> bool {
        name == EMB || name == DEC || self.nui.contains_key(name)
    }

    pub fn is_frozen(&self, group: &str) -> Option<bool> {
        match group {
            EMB => Some(self.emb.frozen),
            DEC => Some(self.dec.frozen),
            other => self.nui.get(other).map(|g| g.frozen),
        }
    }

    pub fn set_frozen(&mut self, group: &str, frozen: bool) -> Result<()> {
        match group {
            EMB => self.emb.frozen = frozen,
            DEC => self.dec.frozen = frozen,
            other => {
                self.nui
                    .get_mut(other)
                    .ok_or_else(|| Error::Registry(other.to_string()))?
                    .frozen = frozen
            }
        }
        Ok(())
    }

    pub fn set_all_nui_frozen(&mut self, frozen: bool) {
        for g in self.nui.values_mut() {
            g.frozen = frozen;
        }
    }

    /// Group a camera resolves to, which must exist.
    pub fn nui_group_for(&self, key: &CameraKey) -> Result<String> {
        let name = nui_group_name(self.mode, key);
        if self.nui.contains_key(&name) {
            Ok(name)
        } else {
            Err(Error::Registry(format!("camera {key} (group `{name}`)")))
        }
    }

    fn module(&self, group: &str) -> Option<&dyn Tensors> {
        match group {
            EMB => Some(&self.emb.module),
            DEC => Some(&self.dec.module),
            other => self.nui.get(other).map(|g| &g.module as &dyn Tensors),
        }
    }

    fn module_mut(&mut self, group: &str) -> Option<&mut dyn Tensors> {
        match group {
            EMB => Some(&mut self.emb.module),
            DEC => Some(&mut self.dec.module),
            other => self.nui.get_mut(other).map(|g| &mut g.module as &mut dyn Tensors),
        }
    }

    pub fn tensor(&self, group: &str, name: &str) -> Option<(&[f64], Vec<usize>)> {
        self.module(group)?.get(name)
    }

    pub fn tensor_mut(&mut self, group: &str, name: &str) -> Option<&mut [f64]> {
        self.module_mut(group)?.get_mut(name)
    }

    /// Tensors then buffers of every group, groups in [`Self::group_names`]
    /// order. This is also the checkpoint order.
    pub fn entries(&self) -> Vec<TensorEntry<'_>> {
        let mut out = Vec::new();
        let mut groups: Vec<(&str, &dyn Tensors)> =
            vec![(EMB, &self.emb.module), (DEC, &self.dec.module)];
        for (name, g) in &self.nui {
            groups.push((name.as_str(), &g.module));
        }
        for (group, m) in groups {
            for (names, is_buffer) in [(m.tensor_names(), false), (m.buffer_names(), true)] {
                for &name in names {
                    let (data, _) = m.get(name).expect("listed tensor exists");
                    out.push(TensorEntry {
                        group,
                        name,
                        is_buffer,
                        data,
                    });
                }
            }
        }
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.entries()
            .iter()
            .filter(|e| !e.is_buffer)
            .map(|e| e.data.len())
            .sum()
    }

    /// Folds train-mode batch statistics into running statistics. Stats for
    /// frozen groups are ignored.
    pub fn apply_bn_stats(&mut self, stats: &[(String, layers::BnBatchStats)]) {
        for (group, s) in stats {
            let head = match group.as_str() {
                EMB if !self.emb.frozen => &mut self.emb.module,
                EMB | DEC => continue,
                other => match self.nui.get_mut(other) {
                    Some(g) if !g.frozen => &mut g.module,
                    _ => continue,
                },
            };
            head.bn.update_running(s);
        }
    }

    pub fn encode_id(&self, x: ArrayView2<'_, f64>, mode: BnMode) -> Result<Array2<f64>> {
        check_cols(x, self.arch.input_dim, "features")?;
        Ok(self.emb.module.forward(x, mode))
    }

    pub fn encode_nui(
        &self,
        x: ArrayView2<'_, f64>,
        camera: Option<&CameraKey>,
        mode: BnMode,
    ) -> Result<Array2<f64>> {
        check_cols(x, self.arch.input_dim, "features")?;
        let group = match (self.mode, camera) {
            (NuiMode::Shared, _) => NUI.to_string(),
            (_, Some(key)) => self.nui_group_for(key)?,
            (m, None) => {
                return Err(Error::Registry(format!(
                    "unspecified camera in {m:?} mode"
                )))
            }
        };
        let head = &self
            .nui
            .get(&group)
            .ok_or_else(|| Error::Registry(group.clone()))?
            .module;
        Ok(head.forward(x, mode))
    }

    pub fn decode(&self, z_id: ArrayView2<'_, f64>, z_nui: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        if z_id.nrows() != z_nui.nrows() {
            return Err(Error::contract(format!(
                "z_id batch of {} rows and z_nui batch of {} rows",
                z_id.nrows(),
                z_nui.nrows()
            )));
        }
        check_cols(z_id, self.arch.embedding_dim, "z_id")?;
        check_cols(z_nui, self.arch.nuisance_dim, "z_nui")?;
        let z = concatenate(Axis(1), &[z_id, z_nui]).expect("row counts checked");
        Ok(self.dec.module.forward(z.view()))
    }
}

pub(crate) fn check_cols(x: ArrayView2<'_, f64>, expected: usize, what: &str) -> Result<()> {
    if x.ncols() != expected {
        return Err(Error::contract(format!(
            "{what} have dimension {}, expected {expected}",
            x.ncols()
        )));
    }
    Ok(())
}

/// `z_id` for a batch of feature rows.
pub fn encode_id(x: ArrayView2<'_, f64>, params: &ParamSet, mode: BnMode) -> Result<Array2<f64>> {
    params.encode_id(x, mode)
}

pub fn encode_nui(
    x: ArrayView2<'_, f64>,
    params: &ParamSet,
    camera: Option<&CameraKey>,
    mode: BnMode,
) -> Result<Array2<f64>> {
    params.encode_nui(x, camera, mode)
}

/// Reconstructed backbone features from `concat(z_id, z_nui)`.
pub fn decode(z_id: ArrayView2<'_, f64>, z_nui: ArrayView2<'_, f64>, params: &ParamSet) -> Result<Array2<f64>> {
    params.decode(z_id, z_nui)
}

#[cfg(test)]
mod tests;
