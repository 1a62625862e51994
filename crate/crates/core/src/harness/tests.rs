use super::*;

const TINY: &str = r#"
schema_version = 1
seed = 11
output_dir = "out"

[[sources]]
[sources.synthetic]
name = "srcA"
n_identities = 12
n_cameras = 2
feature_dim = 10
id_subspace_dim = 3
camera_shift_scale = 0.3
nuisance_noise_scale = 0.1
images_per_identity_per_camera = 2
seed = 1

[[sources]]
[sources.synthetic]
name = "srcB"
n_identities = 10
n_cameras = 3
feature_dim = 10
id_subspace_dim = 3
camera_shift_scale = 0.3
nuisance_noise_scale = 0.1
images_per_identity_per_camera = 2
seed = 2

[target.synthetic]
name = "tgt"
n_identities = 10
n_cameras = 3
feature_dim = 10
id_subspace_dim = 3
camera_shift_scale = 0.6
nuisance_noise_scale = 0.1
images_per_identity_per_camera = 3
seed = 3

[arch]
hidden_dim = 12
embedding_dim = 4
nuisance_dim = 3
decoder_hidden_dim = 12

[embedding]
pk = { p = 3, k = 2 }
total_steps = 12
schedule = { base_lr = 1e-3, flat_epochs = 1.0, decay_epochs = 2.0, final_lr = 1e-5 }

[pretrain]
steps = 6
batch_size = 8
lr = 1e-3

[finetune]
batch_size = 8
lr = 1e-3
variant = { kind = "cam-nui", phase1_steps = 4, phase2_steps = 5 }
"#;

fn tiny(dir: &Path) -> ExperimentConfig {
    ExperimentConfig::from_toml_str(TINY, dir).unwrap()
}

#[test]
fn config_parses_and_resolves_paths() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    assert_eq!(cfg.output_dir, dir.path().join("out"));
    assert_eq!(cfg.sources.len(), 2);
    assert_eq!(cfg.finetune.variant.kind, FinetuneKind::CamNui);
    assert_eq!(cfg.eval, EvalConfig::default());
    let again = ExperimentConfig::from_toml_str(&cfg.to_toml().unwrap(), Path::new("/elsewhere")).unwrap();
    assert_eq!(again, cfg);
}

#[test]
fn config_rejects_bad_input() {
    let dir = tempfile::tempdir().unwrap();
    let missing = TINY.replace(
        "[[sources]]\n[sources.synthetic]\nname = \"srcA\"",
        "[[sources]]\npath = \"nope\"\n[sources.synthetic]\nname = \"srcA\"",
    );
    assert!(ExperimentConfig::from_toml_str(&missing, dir.path()).is_err());
    let typo = TINY.replace("lr = 1e-3\nvariant", "lrr = 1e-3\nvariant");
    assert!(ExperimentConfig::from_toml_str(&typo, dir.path()).is_err());
    let version = TINY.replace("schema_version = 1", "schema_version = 9");
    assert!(ExperimentConfig::from_toml_str(&version, dir.path()).is_err());
    let no_seed = TINY.replace("seed = 11\n", "");
    assert!(ExperimentConfig::from_toml_str(&no_seed, dir.path()).is_err());
    let path_target = TINY.replace("[target.synthetic]", "[target]\ntrain = \"x\"\n[target.synthetic]");
    assert!(ExperimentConfig::from_toml_str(&path_target, dir.path()).is_err());
}

#[test]
fn pipeline_report_shape_and_deltas() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = with_variant(&tiny(dir.path()), FinetuneKind::FixNui);
    let report = run_experiment(&cfg).unwrap();
    assert_eq!(report.rows.len(), 2);
    let (b, f) = (&report.rows[0], &report.rows[1]);
    assert_eq!((b.model.as_str(), f.variant.as_str()), ("baseline", "fix-nui"));
    assert_eq!(f.delta_rank1, f.rank1 - b.rank1);
    assert_eq!(f.delta_map_nd, f.map_nd - b.map_nd);
    assert_eq!(b.delta_map, 0.0);

    let out = &cfg.output_dir;
    for p in [
        "checkpoints/embedding/params.bin",
        "checkpoints/pretrain/params.json",
        "checkpoints/finetune-fix-nui/params.bin",
        "traces/embedding.csv",
        "traces/pretrain.csv",
        "traces/finetune-fix-nui.csv",
        REPORT_CSV,
        REPORT_JSON,
        RESOLVED_CONFIG,
    ] {
        assert!(out.join(p).is_file(), "missing {p}");
    }
    let csv_text = std::fs::read_to_string(out.join(REPORT_CSV)).unwrap();
    assert_eq!(csv_text.lines().count(), 3);
    assert!(csv_text.starts_with("model,variant,rank1,rank1_nd,map,map_nd,n_query"));
}

#[test]
fn rerun_is_bit_identical_and_resumes() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ra = run_experiment(&tiny(a.path())).unwrap();
    let rb = run_experiment(&tiny(b.path())).unwrap();
    assert_eq!(ra, rb);
    let read = |d: &Path| std::fs::read(d.join("out").join(REPORT_CSV)).unwrap();
    assert_eq!(read(a.path()), read(b.path()));

    let exp = Experiment::prepare(tiny(a.path())).unwrap();
    let mut log = StageLog::default();
    let again = exp.run(RunUntil::Full, &mut log).unwrap().unwrap();
    assert_eq!(again, ra);
    assert_eq!(log.resumed.len(), 3, "{:?}", log.resumed);
}

#[test]
fn finetune_stage_alone_matches_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    run_experiment(&cfg).unwrap();
    let out = &cfg.output_dir;
    let input = load_checkpoint(&out.join("checkpoints/pretrain")).unwrap().params;
    let full = load_checkpoint(&out.join("checkpoints/finetune-cam-nui")).unwrap().params;

    let mut isolated_cfg = cfg.clone();
    isolated_cfg.output_dir = dir.path().join("isolated");
    let mut exp = Experiment::prepare(isolated_cfg).unwrap();
    exp.resume = false;
    let alone = exp.finetune_stage(&input, &mut StageLog::default()).unwrap();
    assert_eq!(alone, full);
}

#[test]
fn stage_failure_names_the_stage_and_keeps_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::create_dir(dir.path().join("empty")).unwrap();
    let text = TINY.replace(
        "[[sources]]\n[sources.synthetic]\nname = \"srcA\"",
        "[[sources]]\npath = \"empty\"\n\n[[unused]]\nname = \"srcA\"",
    );
    let start = text.find("[[unused]]").unwrap();
    let end = text[start..].find("[[sources]]").unwrap() + start;
    let text = format!("{}{}", &text[..start], &text[end..]);
    let cfg = ExperimentConfig::from_toml_str(&text, dir.path()).unwrap();
    match run_experiment(&cfg).unwrap_err() {
        Error::Stage { stage, .. } => assert_eq!(stage, "embedding"),
        other => panic!("unexpected error {other}"),
    }
    assert!(cfg.output_dir.join(RESOLVED_CONFIG).is_file());

    // A later failure leaves the earlier checkpoints in place.
    let cfg = with_variant(&tiny(dir.path()), FinetuneKind::Full);
    let exp = Experiment::prepare(cfg.clone()).unwrap();
    let mut log = StageLog::default();
    exp.run(RunUntil::Pretrain, &mut log).unwrap();
    let mut broken = load_checkpoint(&cfg.output_dir.join("checkpoints/pretrain")).unwrap().params;
    broken.nui.clear();
    match exp.finetune_stage(&broken, &mut log).unwrap_err() {
        Error::Stage { stage, source } => {
            assert_eq!(stage, "finetune-full");
            assert!(matches!(*source, Error::Registry(_)));
        }
        other => panic!("unexpected error {other}"),
    }
    assert!(cfg.output_dir.join("checkpoints/pretrain/params.bin").is_file());
    assert!(!cfg.output_dir.join("checkpoints/finetune-full").exists());
    assert!(!cfg.output_dir.join(REPORT_CSV).exists());
}

#[test]
fn explicit_target_directories() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    let split = cfg.target.load().unwrap();
    for (name, ds) in [("train", &split.train), ("query", &split.query), ("gallery", &split.gallery)] {
        crate::providers::write_precomputed(&dir.path().join(name), ds).unwrap();
    }
    let text = TINY.replace(
        "[target.synthetic]\nname = \"tgt\"",
        "[target]\ntrain = \"train\"\nquery = \"query\"\ngallery = \"gallery\"\n\n[unused]\nname = \"tgt\"",
    );
    // Drop the leftover synthetic keys by cutting the `[unused]` table.
    let start = text.find("[unused]").unwrap();
    let end = text.find("[arch]").unwrap();
    let text = format!("{}{}", &text[..start], &text[end..]);
    let path_cfg = ExperimentConfig::from_toml_str(&text, dir.path()).unwrap();
    let exp = Experiment::prepare(path_cfg).unwrap();
    assert_eq!(exp.target, split);
}
