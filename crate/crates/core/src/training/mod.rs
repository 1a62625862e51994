//! Optimizer, learning-rate schedule and the three training procedures:
//! triplet embedding training, autoencoder pre-training with a frozen
//! embedding, and unsupervised fine-tuning on an unlabeled target.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::MarginMode;
use crate::model::{
    nui_group_name, reconstruction_gradients, triplet_gradients, CameraKey, Gradients, Group, Head, NuiMode,
    ParamSet, Tensors, DEC, EMB,
};
use crate::sampling::{
    augment_flip, dataset_scheduler, uniform_sample, PkConfig, PkSampler, SchedulePolicy,
};
use crate::types::{Dataset, ImageRecord, RngSeed};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// ADAM moments, keyed `group/tensor`.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Default for OptimizerState {
    fn default() -> Self {
        OptimizerState {
            beta1: BETA1,
            beta2: BETA2,
            eps: ADAM_EPS,
            step: 0,
            moments: BTreeMap::new(),
        }
    }
}

/// One bias-corrected ADAM update of every tensor that has a gradient.
pub fn adam_step(
    params: &mut ParamSet,
    grads: &Gradients,
    state: &mut OptimizerState,
    lr: f64,
) -> Result<()> {
    // Validate everything before touching anything.
    for (group, name, g) in grads.iter() {
        match params.is_frozen(group) {
            None => return Err(Error::Registry(group.to_string())),
            Some(true) => {
                return Err(Error::contract(format!(
                    "gradient supplied for frozen tensor {group}/{name}"
                )))
            }
            Some(false) => {}
        }
        let (data, _) = params
            .tensor(group, name)
            .ok_or_else(|| Error::contract(format!("unknown tensor {group}/{name}")))?;
        if data.len() != g.len() {
            return Err(Error::contract(format!(
                "gradient for {group}/{name} has {} entries, tensor has {}",
                g.len(),
                data.len()
            )));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    for (group, name, g) in grads.iter() {
        let key = format!("{group}/{name}");
        let (m, v) = state
            .moments
            .entry(key)
            .or_insert_with(|| (vec![0.0; g.len()], vec![0.0; g.len()]));
        let data = params.tensor_mut(group, name).expect("validated above");
        for i in 0..g.len() {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            data[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Flat learning rate, then geometric decay to `final_lr`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    #[serde(default = "default_base_lr")]
    pub base_lr: f64,
    #[serde(default = "default_flat_epochs")]
    pub flat_epochs: f64,
    #[serde(default = "default_decay_epochs")]
    pub decay_epochs: f64,
    #[serde(default = "default_final_lr")]
    pub final_lr: f64,
    /// Defaults to `floor(N_total / N_batch)`.
    #[serde(default)]
    pub steps_per_epoch: Option<usize>,
}

fn default_base_lr() -> f64 {
    1e-4
}
fn default_flat_epochs() -> f64 {
    100.0
}
fn default_decay_epochs() -> f64 {
    300.0
}
fn default_final_lr() -> f64 {
    1e-7
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            base_lr: default_base_lr(),
            flat_epochs: default_flat_epochs(),
            decay_epochs: default_decay_epochs(),
            final_lr: default_final_lr(),
            steps_per_epoch: None,
        }
    }
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.final_lr > 0.0 && self.final_lr < self.base_lr) {
            return Err(Error::config(format!(
                "need 0 < final_lr < base_lr (got {} and {})",
                self.final_lr, self.base_lr
            )));
        }
        if !(self.flat_epochs >= 0.0 && self.decay_epochs > 0.0) {
            return Err(Error::config("epoch counts must be positive"));
        }
        if self.steps_per_epoch == Some(0) {
            return Err(Error::config("steps_per_epoch must be positive"));
        }
        Ok(())
    }

    pub fn resolved_steps_per_epoch(&self, n_total: usize, batch_size: usize) -> usize {
        self.steps_per_epoch
            .unwrap_or_else(|| n_total / batch_size.max(1))
            .max(1)
    }

    pub fn total_epochs(&self) -> f64 {
        self.flat_epochs + self.decay_epochs
    }
}

pub fn lr_schedule(epoch: f64, cfg: &ScheduleConfig) -> f64 {
    if epoch <= cfg.flat_epochs {
        return cfg.base_lr;
    }
    let progress = (epoch - cfg.flat_epochs) / cfg.decay_epochs;
    if progress >= 1.0 {
        return cfg.final_lr;
    }
    cfg.base_lr * (cfg.final_lr / cfg.base_lr).powf(progress)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: usize,
    pub epoch: f64,
    pub lr: f64,
    pub loss: f64,
    pub phase: String,
    pub variant: String,
}

pub fn write_trace_csv(path: &Path, rows: &[TraceRow]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

fn step_and_record(
    params: &mut ParamSet,
    eval: crate::model::LossEval,
    opt: &mut OptimizerState,
    lr: f64,
) -> Result<f64> {
    adam_step(params, &eval.grads, opt, lr)?;
    params.apply_bn_stats(&eval.bn_stats);
    Ok(eval.loss)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbeddingConfig {
    #[serde(default)]
    pub pk: PkConfig,
    #[serde(default)]
    pub schedule: ScheduleConfig,
    #[serde(default)]
    pub margin: MarginMode,
    #[serde(default = "yes")]
    pub flip: bool,
    #[serde(default)]
    pub policy: SchedulePolicy,
    /// Overrides the schedule-derived step count.
    #[serde(default)]
    pub total_steps: Option<usize>,
}

fn yes() -> bool {
    true
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        EmbeddingConfig {
            pk: PkConfig::default(),
            schedule: ScheduleConfig::default(),
            margin: MarginMode::Softplus,
            flip: true,
            policy: SchedulePolicy::RoundRobin,
            total_steps: None,
        }
    }
}

/// Triplet training of the `emb` group over P×K batches, each drawn from a
/// single dataset. Other groups are frozen for the duration.
pub fn train_embedding(
    datasets: &[Dataset],
    params: &mut ParamSet,
    cfg: &EmbeddingConfig,
    seed: RngSeed,
) -> Result<Vec<TraceRow>> {
    cfg.pk.validate()?;
    cfg.schedule.validate()?;
    cfg.margin.validate()?;
    let n_total: usize = datasets.iter().map(Dataset::len).sum();
    let steps_per_epoch = cfg
        .schedule
        .resolved_steps_per_epoch(n_total, cfg.pk.batch_size());
    let total = cfg.total_steps.unwrap_or_else(|| {
        (cfg.schedule.total_epochs() * steps_per_epoch as f64).round() as usize
    });
    let schedule = dataset_scheduler(datasets, total, cfg.pk, cfg.policy)?;
    let samplers = datasets
        .iter()
        .map(|d| PkSampler::new(d, cfg.pk))
        .collect::<Result<Vec<_>>>()?;

    params.set_frozen(EMB, false)?;
    params.set_frozen(DEC, true)?;
    params.set_all_nui_frozen(true);

    let mut rng = seed.derive("train_embedding").rng();
    let mut opt = OptimizerState::default();
    let mut trace = Vec::with_capacity(total);
    for (step, &ds) in schedule.iter().enumerate() {
        let epoch = step as f64 / steps_per_epoch as f64;
        let lr = lr_schedule(epoch, &cfg.schedule);
        let mut batch = samplers[ds].sample(&mut rng);
        if cfg.flip {
            batch = augment_flip(batch, &mut rng);
        }
        let eval = triplet_gradients(params, batch.features().view(), &batch.labels(), cfg.margin)?;
        let loss = step_and_record(params, eval, &mut opt, lr)?;
        trace.push(TraceRow {
            step,
            epoch,
            lr,
            loss,
            phase: "embedding".into(),
            variant: String::new(),
        });
    }
    Ok(trace)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub steps: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_base_lr")]
    pub lr: f64,
    /// Defaults to per-camera groups.
    #[serde(default = "default_pretrain_mode")]
    pub nui_mode: NuiMode,
    #[serde(default = "yes")]
    pub flip: bool,
}

fn default_pretrain_mode() -> NuiMode {
    NuiMode::PerCamera
}

fn default_batch() -> usize {
    PkConfig::default().batch_size()
}

/// Autoencoder pre-training on the labeled sources with `emb` frozen
/// (weights and batch-norm statistics). Nuisance groups for the configured
/// mode are created where missing.
pub fn pretrain_embae(
    datasets: &[Dataset],
    params: &mut ParamSet,
    cfg: &PretrainConfig,
    seed: RngSeed,
) -> Result<Vec<TraceRow>> {
    if datasets.is_empty() {
        return Err(Error::config("no source datasets"));
    }
    if cfg.batch_size == 0 {
        return Err(Error::config("batch_size must be positive"));
    }
    params.mode = cfg.nui_mode;
    let mut source_groups = Vec::new();
    for ds in datasets {
        if ds.is_empty() {
            return Err(Error::config(format!("source dataset `{}` is empty", ds.name)));
        }
        for &cam in &ds.cameras {
            let name = nui_group_name(cfg.nui_mode, &CameraKey::new(ds.name.clone(), cam));
            if !params.nui.contains_key(&name) {
                params.reset_nui_group(&name, seed);
            }
            if !source_groups.contains(&name) {
                source_groups.push(name);
            }
        }
    }
    params.set_frozen(EMB, true)?;
    params.set_frozen(DEC, false)?;
    params.set_all_nui_frozen(true);
    for g in &source_groups {
        params.set_frozen(g, false)?;
    }

    let pools: Vec<Vec<&ImageRecord>> = datasets.iter().map(|d| d.records.iter().collect()).collect();
    let mut rng = seed.derive("pretrain_embae").rng();
    let mut opt = OptimizerState::default();
    let mut trace = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let ds = step % datasets.len();
        let mut batch = uniform_sample(&datasets[ds].name, &pools[ds], cfg.batch_size, &mut rng)?;
        if cfg.flip {
            batch = augment_flip(batch, &mut rng);
        }
        let eval = reconstruction_gradients(params, batch.features().view(), &batch.camera_keys())?;
        let loss = step_and_record(params, eval, &mut opt, cfg.lr)?;
        trace.push(TraceRow {
            step,
            epoch: 0.0,
            lr: cfg.lr,
            loss,
            phase: "pretrain".into(),
            variant: String::new(),
        });
    }
    Ok(trace)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FinetuneKind {
    /// Update `emb`, `nui` and `dec` jointly.
    Full,
    /// `nui` frozen; update `emb` and `dec`.
    FixNui,
    /// Fresh `nui` trained alone, then frozen while `emb` and `dec` train.
    NewNui,
    /// As `NewNui` with one fresh nuisance group per target camera.
    CamNui,
}

impl FinetuneKind {
    pub fn as_str(self) -> &'static str {
        match self {
            FinetuneKind::Full => "full",
            FinetuneKind::FixNui => "fix-nui",
            FinetuneKind::NewNui => "new-nui",
            FinetuneKind::CamNui => "cam-nui",
        }
    }

    pub fn is_two_phase(self) -> bool {
        matches!(self, FinetuneKind::NewNui | FinetuneKind::CamNui)
    }
}

impl std::str::FromStr for FinetuneKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('_', "-").as_str() {
            "full" => Ok(FinetuneKind::Full),
            "fix-nui" => Ok(FinetuneKind::FixNui),
            "new-nui" => Ok(FinetuneKind::NewNui),
            "cam-nui" => Ok(FinetuneKind::CamNui),
            other => Err(Error::config(format!("unknown fine-tuning variant `{other}`"))),
        }
    }
}

impl std::fmt::Display for FinetuneKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneVariant {
    pub kind: FinetuneKind,
    /// Nuisance-only steps of the two-phase variants.
    #[serde(default = "default_phase_steps")]
    pub phase1_steps: usize,
    /// Steps that update `emb` and `dec`. Single-phase variants run this
    /// many steps.
    #[serde(default = "default_phase_steps")]
    pub phase2_steps: usize,
}

fn default_phase_steps() -> usize {
    1000
}

impl FinetuneVariant {
    pub fn new(kind: FinetuneKind) -> Self {
        FinetuneVariant {
            kind,
            phase1_steps: default_phase_steps(),
            phase2_steps: default_phase_steps(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneConfig {
    pub variant: FinetuneVariant,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_base_lr")]
    pub lr: f64,
    /// Learning rate of the nuisance-only phase; defaults to `lr`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phase1_lr: Option<f64>,
    #[serde(default = "yes")]
    pub flip: bool,
}

/// Copies of the target records with identity scrubbed: fine-tuning never
/// sees labels.
fn unlabeled(target: &Dataset) -> Vec<ImageRecord> {
    target
        .records
        .iter()
        .map(|r| ImageRecord {
            sample_id: r.sample_id.clone(),
            identity: 0,
            camera: r.camera,
            dataset: r.dataset.clone(),
            features: r.features.clone(),
            flip_features: r.flip_features.clone(),
        })
        .collect()
}

struct ReconLoop<'a> {
    rng: rand_chacha::ChaCha8Rng,
    cfg: &'a FinetuneConfig,
    dataset: &'a str,
    trace: Vec<TraceRow>,
}

impl ReconLoop<'_> {
    fn run(
        &mut self,
        params: &mut ParamSet,
        pools: &[Vec<&ImageRecord>],
        steps: usize,
        phase: &str,
        lr: f64,
    ) -> Result<()> {
        let mut opt = OptimizerState::default();
        for step in 0..steps {
            let pool = &pools[step % pools.len()];
            let mut batch = uniform_sample(self.dataset, pool, self.cfg.batch_size, &mut self.rng)?;
            if self.cfg.flip {
                batch = augment_flip(batch, &mut self.rng);
            }
            let eval = reconstruction_gradients(params, batch.features().view(), &batch.camera_keys())?;
            let loss = step_and_record(params, eval, &mut opt, lr)?;
            self.trace.push(TraceRow {
                step: self.trace.len(),
                epoch: 0.0,
                lr,
                loss,
                phase: phase.to_string(),
                variant: self.cfg.variant.kind.as_str().to_string(),
            });
        }
        Ok(())
    }
}

/// Element-wise mean of every nuisance head, batch-norm statistics
/// included.
fn mean_nui_head(params: &ParamSet) -> Option<Head> {
    let heads: Vec<&Head> = params.nui.values().map(|g| &g.module).collect();
    let mut out = (*heads.first()?).clone();
    let n = heads.len() as f64;
    let names: Vec<&'static str> = out.tensor_names().iter().chain(out.buffer_names()).copied().collect();
    for name in names {
        let dst = out.get_mut(name).expect("listed tensor");
        dst.iter_mut().for_each(|v| *v = 0.0);
        for h in &heads {
            let (src, _) = h.get(name).expect("listed tensor");
            for (d, s) in dst.iter_mut().zip(src) {
                *d += s;
            }
        }
        dst.iter_mut().for_each(|v| *v /= n);
    }
    Some(out)
}

/// Unsupervised adaptation to `target` by reconstruction only.
pub fn finetune(
    target: &Dataset,
    params: &mut ParamSet,
    cfg: &FinetuneConfig,
    seed: RngSeed,
) -> Result<Vec<TraceRow>> {
    if cfg.batch_size == 0 {
        return Err(Error::config("batch_size must be positive"));
    }
    let records = unlabeled(target);
    if records.is_empty() {
        return Err(Error::config(format!("target `{}` is empty", target.name)));
    }
    let mut by_camera: BTreeMap<u32, Vec<&ImageRecord>> =
        target.cameras.iter().map(|&c| (c, Vec::new())).collect();
    for r in &records {
        by_camera.entry(r.camera).or_default().push(r);
    }
    let all: Vec<&ImageRecord> = records.iter().collect();
    let kind = cfg.variant.kind;
    let reinit_seed = seed.derive("finetune/nui-reinit");

    if kind == FinetuneKind::CamNui {
        if let Some((cam, _)) = by_camera.iter().find(|(_, rs)| rs.is_empty()) {
            return Err(Error::config(format!(
                "target camera {cam} has no records; cannot fit its nuisance encoder"
            )));
        }
        params.mode = NuiMode::PerCamera;
    }
    // Groups the target routes through, under the (possibly updated) mode.
    let mut target_groups: Vec<String> = Vec::new();
    for &cam in by_camera.keys() {
        let name = nui_group_name(params.mode, &CameraKey::new(target.name.clone(), cam));
        if !target_groups.contains(&name) {
            target_groups.push(name);
        }
    }
    if kind.is_two_phase() {
        for g in &target_groups {
            params.reset_nui_group(g, reinit_seed);
        }
    } else {
        // Target cameras unseen in pre-training start from the average of
        // the pre-trained nuisance encoders.
        let missing: Vec<&String> = target_groups.iter().filter(|g| !params.nui.contains_key(*g)).collect();
        if !missing.is_empty() {
            let mean = mean_nui_head(params).ok_or_else(|| {
                Error::Registry(format!(
                    "target group `{}`; {kind} fine-tuning needs pre-trained nuisance encoders",
                    missing[0]
                ))
            })?;
            for g in missing {
                params.nui.insert(g.clone(), Group { module: mean.clone(), frozen: false });
            }
        }
    }

    let mut lp = ReconLoop {
        rng: seed.derive("finetune").rng(),
        cfg,
        dataset: &target.name,
        trace: Vec::new(),
    };
    let unrestricted = vec![all];
    match kind {
        FinetuneKind::Full | FinetuneKind::FixNui => {
            params.set_frozen(EMB, false)?;
            params.set_frozen(DEC, false)?;
            params.set_all_nui_frozen(true);
            if kind == FinetuneKind::Full {
                for g in &target_groups {
                    params.set_frozen(g, false)?;
                }
            }
            lp.run(params, &unrestricted, cfg.variant.phase2_steps, "finetune", cfg.lr)?;
        }
        FinetuneKind::NewNui | FinetuneKind::CamNui => {
            params.set_frozen(EMB, true)?;
            params.set_frozen(DEC, true)?;
            params.set_all_nui_frozen(true);
            for g in &target_groups {
                params.set_frozen(g, false)?;
            }
            let phase1_pools = if kind == FinetuneKind::CamNui {
                by_camera.into_values().collect::<Vec<_>>()
            } else {
                unrestricted.clone()
            };
            lp.run(params, &phase1_pools, cfg.variant.phase1_steps, "phase1", cfg.phase1_lr.unwrap_or(cfg.lr))?;

            params.set_all_nui_frozen(true);
            params.set_frozen(EMB, false)?;
            params.set_frozen(DEC, false)?;
            lp.run(params, &unrestricted, cfg.variant.phase2_steps, "phase2", cfg.lr)?;
        }
    }
    Ok(lp.trace)
}
