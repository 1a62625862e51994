//! Experiment orchestration: declarative configs, the staged transfer
//! pipeline, checkpoints and reports.
//!
//! The pipeline runs
//! `embedding → baseline eval → pretrain → finetune → final eval`.
//! Each training stage writes `checkpoints/<stage>/` and
//! `traces/<stage>.csv` under the output directory, tagged with a
//! fingerprint of the configuration it depends on; a rerun reuses any
//! checkpoint whose fingerprint still matches.

pub mod checkpoint;
pub mod dataset;

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use dataset::{load_dataset_dir, parse_image_name, split_by_identity, TargetSplit};

use crate::error::{Error, Result};
use crate::eval::{embed_for_eval, eval_items, score, Scores};
use crate::model::{init_params, CameraKey, HeadArchitecture, ParamSet};
use crate::providers::{synth_generate, SyntheticWorldConfig};
use crate::training::{
    finetune, pretrain_embae, train_embedding, write_trace_csv, EmbeddingConfig, FinetuneConfig,
    FinetuneKind, PretrainConfig, TraceRow,
};
use crate::types::{Dataset, RngSeed};

pub const SCHEMA_VERSION: u32 = 1;
pub const CHECKPOINTS_DIR: &str = "checkpoints";
pub const TRACES_DIR: &str = "traces";
pub const REPORT_CSV: &str = "report.csv";
pub const REPORT_JSON: &str = "report.json";
pub const RESOLVED_CONFIG: &str = "config.resolved";

/// A dataset given either as a directory or as a synthetic world.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticWorldConfig>,
}

impl DatasetSpec {
    fn validate(&self, what: &str) -> Result<()> {
        match (&self.path, &self.synthetic) {
            (Some(p), None) => require_dir(p, what),
            (None, Some(s)) => s.validate(),
            _ => Err(Error::config(format!("{what}: give exactly one of `path` or `synthetic`"))),
        }
    }

    pub fn load(&self) -> Result<Dataset> {
        match (&self.path, &self.synthetic) {
            (Some(p), None) => load_dataset_dir(p),
            (None, Some(s)) => synth_generate(s),
            _ => Err(Error::config("give exactly one of `path` or `synthetic`")),
        }
    }
}

/// The target domain: a synthetic world split by identity, or explicit
/// train / query / gallery directories.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticWorldConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub query: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gallery: Option<PathBuf>,
}

impl TargetSpec {
    fn validate(&self) -> Result<()> {
        match (&self.synthetic, &self.train, &self.query, &self.gallery) {
            (Some(s), None, None, None) => s.validate(),
            (None, Some(t), Some(q), Some(g)) => {
                require_dir(t, "target.train")?;
                require_dir(q, "target.query")?;
                require_dir(g, "target.gallery")
            }
            _ => Err(Error::config(
                "target: give either `synthetic` or all of `train`, `query`, `gallery`",
            )),
        }
    }

    pub fn load(&self) -> Result<TargetSplit> {
        if let Some(s) = &self.synthetic {
            return split_by_identity(&synth_generate(s)?);
        }
        let get = |p: &Option<PathBuf>| {
            p.as_deref()
                .ok_or_else(|| Error::config("target directory missing"))
                .and_then(load_dataset_dir)
        };
        Ok(TargetSplit {
            train: get(&self.train)?,
            query: get(&self.query)?,
            gallery: get(&self.gallery)?,
        })
    }
}

fn require_dir(p: &Path, what: &str) -> Result<()> {
    if p.is_dir() {
        Ok(())
    } else {
        Err(Error::config(format!("{what}: directory {} does not exist", p.display())))
    }
}

/// Layer widths; the input width comes from the data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchConfig {
    pub hidden_dim: usize,
    pub embedding_dim: usize,
    pub nuisance_dim: usize,
    pub decoder_hidden_dim: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        let a = HeadArchitecture::new(1);
        ArchConfig {
            hidden_dim: a.hidden_dim,
            embedding_dim: a.embedding_dim,
            nuisance_dim: a.nuisance_dim,
            decoder_hidden_dim: a.decoder_hidden_dim,
        }
    }
}

impl ArchConfig {
    pub fn for_input(&self, input_dim: usize) -> HeadArchitecture {
        HeadArchitecture {
            input_dim,
            hidden_dim: self.hidden_dim,
            embedding_dim: self.embedding_dim,
            nuisance_dim: self.nuisance_dim,
            decoder_hidden_dim: self.decoder_hidden_dim,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub tta: bool,
    pub normalize: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            tta: true,
            normalize: true,
        }
    }
}

/// One complete transfer experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub seed: RngSeed,
    pub output_dir: PathBuf,
    pub sources: Vec<DatasetSpec>,
    pub target: TargetSpec,
    #[serde(default)]
    pub arch: ArchConfig,
    #[serde(default)]
    pub embedding: EmbeddingConfig,
    pub pretrain: PretrainConfig,
    pub finetune: FinetuneConfig,
    #[serde(default)]
    pub eval: EvalConfig,
}

fn resolve(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

impl ExperimentConfig {
    /// Parses TOML; relative paths are taken relative to `base_dir`.
    pub fn from_toml_str(text: &str, base_dir: &Path) -> Result<Self> {
        let mut cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::config(format!("invalid config: {}", e.message())))?;
        resolve(base_dir, &mut cfg.output_dir);
        for s in &mut cfg.sources {
            if let Some(p) = &mut s.path {
                resolve(base_dir, p);
            }
        }
        for p in [&mut cfg.target.train, &mut cfg.target.query, &mut cfg.target.gallery]
            .into_iter()
            .flatten()
        {
            resolve(base_dir, p);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::load(path, e.to_string()))?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        Self::from_toml_str(&text, base)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::config(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if self.sources.is_empty() {
            return Err(Error::config("at least one source dataset is required"));
        }
        for (i, s) in self.sources.iter().enumerate() {
            s.validate(&format!("sources[{i}]"))?;
        }
        self.target.validate()?;
        self.arch.for_input(1).validate()?;
        self.embedding.pk.validate()?;
        self.embedding.schedule.validate()?;
        self.embedding.margin.validate()?;
        if self.pretrain.batch_size == 0 || self.finetune.batch_size == 0 {
            return Err(Error::config("batch sizes must be positive"));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::config(format!("cannot serialize config: {e}")))
    }
}

fn fingerprint<T: Serialize>(parts: &T) -> Result<String> {
    Ok(hex::encode(Sha256::digest(serde_json::to_vec(parts)?)))
}

fn stage<T>(name: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| Error::Stage {
        stage: name.to_string(),
        source: Box::new(e),
    })
}

/// One row of the score report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub model: String,
    pub variant: String,
    pub rank1: f64,
    pub rank1_nd: f64,
    pub map: f64,
    pub map_nd: f64,
    pub n_query: usize,
    pub n_query_nd: usize,
    pub delta_rank1: f64,
    pub delta_rank1_nd: f64,
    pub delta_map: f64,
    pub delta_map_nd: f64,
}

impl ReportRow {
    pub fn new(model: &str, variant: &str, s: &Scores, baseline: &Scores) -> Self {
        ReportRow {
            model: model.into(),
            variant: variant.into(),
            rank1: s.rank1,
            rank1_nd: s.rank1_nd,
            map: s.map,
            map_nd: s.map_nd,
            n_query: s.n_queries_scored,
            n_query_nd: s.n_queries_scored_nd,
            delta_rank1: s.rank1 - baseline.rank1,
            delta_rank1_nd: s.rank1_nd - baseline.rank1_nd,
            delta_map: s.map - baseline.map,
            delta_map_nd: s.map_nd - baseline.map_nd,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolNotes {
    pub tta: bool,
    pub normalize: bool,
    /// Queries without a cross-camera positive are left out of the means.
    pub zero_positive_queries: String,
    pub tie_break: String,
    pub n_queries_empty: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub seed: RngSeed,
    pub variant: String,
    pub rows: Vec<ReportRow>,
    pub protocol: ProtocolNotes,
}

/// How far [`Experiment::run`] goes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum RunUntil {
    Embedding,
    Pretrain,
    Full,
}

/// Loaded data plus configuration for one experiment.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub cfg: ExperimentConfig,
    pub sources: Vec<Dataset>,
    pub target: TargetSplit,
    pub arch: HeadArchitecture,
    /// Reuse checkpoints whose fingerprint matches.
    pub resume: bool,
}

/// Which stage artifacts were reused rather than recomputed.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct StageLog {
    pub resumed: BTreeSet<String>,
}

impl Experiment {
    pub fn prepare(cfg: ExperimentConfig) -> Result<Self> {
        stage("load", cfg.validate())?;
        let sources = stage(
            "load",
            cfg.sources.iter().map(DatasetSpec::load).collect::<Result<Vec<_>>>(),
        )?;
        let target = stage("load", cfg.target.load())?;
        let mut names = BTreeSet::new();
        let mut dim = None;
        for ds in sources.iter().chain([&target.train, &target.query, &target.gallery]) {
            let d = ds.feature_dim();
            match (dim, d) {
                (None, Some(d)) => dim = Some(d),
                (Some(a), Some(b)) if a != b => {
                    return stage(
                        "load",
                        Err(Error::config(format!("dataset `{}` has F = {b}, expected {a}", ds.name))),
                    )
                }
                _ => {}
            }
        }
        for ds in &sources {
            if !names.insert(ds.name.clone()) {
                return stage("load", Err(Error::config(format!("duplicate source name `{}`", ds.name))));
            }
        }
        if names.contains(&target.train.name) {
            return stage(
                "load",
                Err(Error::config(format!("target name `{}` clashes with a source", target.train.name))),
            );
        }
        let dim = dim.ok_or_else(|| Error::config("all datasets are empty"))?;
        let arch = cfg.arch.for_input(dim);
        Ok(Experiment {
            cfg,
            sources,
            target,
            arch,
            resume: true,
        })
    }

    pub fn output_dir(&self) -> &Path {
        &self.cfg.output_dir
    }

    fn checkpoint_dir(&self, name: &str) -> PathBuf {
        self.output_dir().join(CHECKPOINTS_DIR).join(name)
    }

    fn trace_path(&self, name: &str) -> PathBuf {
        self.output_dir().join(TRACES_DIR).join(format!("{name}.csv"))
    }

    fn variant_label(&self) -> &'static str {
        self.cfg.finetune.variant.kind.as_str()
    }

    pub fn finetune_stage_name(&self) -> String {
        format!("finetune-{}", self.variant_label())
    }

    pub fn embedding_fingerprint(&self) -> Result<String> {
        fingerprint(&(
            "embedding",
            self.cfg.seed,
            &self.cfg.sources,
            &self.cfg.arch,
            &self.cfg.embedding,
        ))
    }

    pub fn pretrain_fingerprint(&self) -> Result<String> {
        fingerprint(&("pretrain", self.embedding_fingerprint()?, &self.cfg.pretrain))
    }

    pub fn finetune_fingerprint(&self) -> Result<String> {
        fingerprint(&(
            "finetune",
            self.pretrain_fingerprint()?,
            &self.cfg.target,
            &self.cfg.finetune,
        ))
    }

    /// Fresh parameters with nuisance groups for every source camera.
    pub fn initial_params(&self) -> Result<ParamSet> {
        let mode = self.cfg.pretrain.nui_mode;
        let mut keys: Vec<CameraKey> = Vec::new();
        for ds in &self.sources {
            keys.extend(ds.cameras.iter().map(|&c| CameraKey::new(ds.name.clone(), c)));
        }
        init_params(self.arch, mode, &keys, self.cfg.seed.derive("init"))
    }

    fn cached(&self, name: &str, fp: &str) -> Option<ParamSet> {
        if !self.resume {
            return None;
        }
        let ckpt = load_checkpoint(&self.checkpoint_dir(name)).ok()?;
        let ok = ckpt.meta.get("fingerprint").map(String::as_str) == Some(fp)
            && self.trace_path(name).is_file();
        ok.then_some(ckpt.params)
    }

    fn persist(&self, name: &str, fp: &str, params: &ParamSet, trace: &[TraceRow]) -> Result<()> {
        let mut ckpt = Checkpoint::new(params.clone());
        ckpt.meta.insert("stage".into(), name.into());
        ckpt.meta.insert("fingerprint".into(), fp.into());
        std::fs::create_dir_all(self.output_dir().join(TRACES_DIR))?;
        write_trace_csv(&self.trace_path(name), trace)?;
        save_checkpoint(&self.checkpoint_dir(name), &ckpt)
    }

    /// Triplet training on the sources, from fresh parameters.
    pub fn embedding_stage(&self, log: &mut StageLog) -> Result<ParamSet> {
        let name = "embedding";
        let fp = self.embedding_fingerprint()?;
        if let Some(p) = self.cached(name, &fp) {
            log.resumed.insert(name.into());
            return Ok(p);
        }
        stage(name, (|| {
            let mut params = self.initial_params()?;
            let trace = train_embedding(&self.sources, &mut params, &self.cfg.embedding, self.cfg.seed)?;
            self.persist(name, &fp, &params, &trace)?;
            Ok(params)
        })())
    }

    /// Autoencoder pre-training on the sources, from `input`.
    pub fn pretrain_stage(&self, input: &ParamSet, log: &mut StageLog) -> Result<ParamSet> {
        let name = "pretrain";
        let fp = self.pretrain_fingerprint()?;
        if let Some(p) = self.cached(name, &fp) {
            log.resumed.insert(name.into());
            return Ok(p);
        }
        stage(name, (|| {
            let mut params = input.clone();
            let trace = pretrain_embae(&self.sources, &mut params, &self.cfg.pretrain, self.cfg.seed)?;
            self.persist(name, &fp, &params, &trace)?;
            Ok(params)
        })())
    }

    /// Unsupervised adaptation to the target training split, from `input`.
    pub fn finetune_stage(&self, input: &ParamSet, log: &mut StageLog) -> Result<ParamSet> {
        let name = self.finetune_stage_name();
        let fp = self.finetune_fingerprint()?;
        if let Some(p) = self.cached(&name, &fp) {
            log.resumed.insert(name);
            return Ok(p);
        }
        stage(&name, (|| {
            let mut params = input.clone();
            let trace = finetune(&self.target.train, &mut params, &self.cfg.finetune, self.cfg.seed)?;
            self.persist(&name, &fp, &params, &trace)?;
            Ok(params)
        })())
    }

    /// Scores `params` on the target query/gallery split.
    pub fn evaluate(&self, params: &ParamSet) -> Result<Scores> {
        evaluate_split(params, &self.target.query, &self.target.gallery, self.cfg.eval)
    }

    /// Runs the pipeline up to `until`. Returns the report when the full
    /// pipeline ran.
    pub fn run(&self, until: RunUntil, log: &mut StageLog) -> Result<Option<Report>> {
        std::fs::create_dir_all(self.output_dir())?;
        std::fs::write(self.output_dir().join(RESOLVED_CONFIG), self.cfg.to_toml()?)?;
        let embedded = self.embedding_stage(log)?;
        if until == RunUntil::Embedding {
            return Ok(None);
        }
        let baseline = stage("baseline_eval", self.evaluate(&embedded))?;
        let pretrained = self.pretrain_stage(&embedded, log)?;
        if until == RunUntil::Pretrain {
            return Ok(None);
        }
        let tuned = self.finetune_stage(&pretrained, log)?;
        let final_scores = stage("final_eval", self.evaluate(&tuned))?;
        let report = Report {
            seed: self.cfg.seed,
            variant: self.variant_label().into(),
            rows: vec![
                ReportRow::new("baseline", "-", &baseline, &baseline),
                ReportRow::new("embae", self.variant_label(), &final_scores, &baseline),
            ],
            protocol: ProtocolNotes {
                tta: self.cfg.eval.tta,
                normalize: self.cfg.eval.normalize,
                zero_positive_queries: "excluded".into(),
                tie_break: "sample_id".into(),
                n_queries_empty: final_scores.n_queries_empty,
            },
        };
        stage("report", write_report(self.output_dir(), &report))?;
        Ok(Some(report))
    }
}

/// Embeds and scores a query/gallery pair.
pub fn evaluate_split(params: &ParamSet, query: &Dataset, gallery: &Dataset, eval: EvalConfig) -> Result<Scores> {
    let q = embed_for_eval(&query.records, params, eval.tta, eval.normalize)?;
    let g = embed_for_eval(&gallery.records, params, eval.tta, eval.normalize)?;
    score(&eval_items(&query.records, &q)?, &eval_items(&gallery.records, &g)?)
}

pub fn write_report(dir: &Path, report: &Report) -> Result<()> {
    let mut w = csv::Writer::from_path(dir.join(REPORT_CSV))?;
    for row in &report.rows {
        w.serialize(row)?;
    }
    w.flush()?;
    std::fs::write(dir.join(REPORT_JSON), serde_json::to_vec_pretty(report)?)?;
    Ok(())
}

/// Full pipeline with checkpoint reuse.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Report> {
    let exp = Experiment::prepare(cfg.clone())?;
    let report = exp.run(RunUntil::Full, &mut StageLog::default())?;
    Ok(report.expect("full run produces a report"))
}

/// Overrides the fine-tuning variant, keeping the configured step counts.
pub fn with_variant(cfg: &ExperimentConfig, kind: FinetuneKind) -> ExperimentConfig {
    let mut out = cfg.clone();
    out.finetune.variant.kind = kind;
    out
}

#[cfg(test)]
mod tests;
