use std::path::Path;

use cpdiff_core::config::{AblationAxis, AblationLevel, ExperimentConfig};
use cpdiff_core::paramstore::NormMode;
use cpdiff_core::pipeline::{artifact_digests, files, Pipeline, StageId, StageStatus, MANIFEST};
use cpdiff_core::Error;

const TINY: &str = r#"
seed = 11

[suite]
family = "blobs"
phis = [0.0, 3.141592653589793]
train_size = 64
val_size = 64

[base]
steps = 100
batch = 16
lr = 0.01
train_size = 64

[lora]
rank = 2
alpha = 8.0

[harvest]
n = 4
stride = 5
total_steps = 40
batch = 16
optimizer = { kind = "adam", learning_rate = 0.01 }

[normalization]
mode = "task"

[autoencoder]
latent_dim = 8
channels = [4, 8]
kernel = 3
xi_scale = 0.001
lr = 0.001
steps = 20
batch = 8

[diffusion]
timesteps = 20
beta_start = 0.0001
beta_end = 0.02
channels = [4, 8]
kernel = 3
cond_dim = 8
time_dim = 8
cond_kind = "descriptor"
exemplars = 4
lr = 0.001
steps = 20
batch = 8

[generation]
m = 3
trajectory_seeds = 1
trajectory_stride = 5

[analysis]
pca_components = 2
interpolation_steps = 3

[ablation]
tasks = 2
dataset_sizes = [1, 4]
norm_modes = ["none", "batch", "task"]
condition_kinds = ["descriptor"]
layer_subsets = [[0]]
"#;

fn tiny() -> ExperimentConfig {
    ExperimentConfig::from_toml(TINY).unwrap()
}

fn statuses(p: &Pipeline) -> Vec<StageStatus> {
    p.load_manifest()
        .unwrap()
        .stages
        .iter()
        .map(|s| s.status)
        .collect()
}

fn inner(e: Error) -> Error {
    match e {
        Error::Stage { source, .. } => *source,
        other => other,
    }
}

#[test]
fn full_run_then_cached_rerun() {
    let dir = tempfile::tempdir().unwrap();
    let p = Pipeline::new(tiny(), dir.path());
    let m = p.run_all().unwrap();
    assert_eq!(m.stages.len(), 5);
    assert!(m.stages.iter().all(|s| s.status == StageStatus::Ran));
    assert_eq!(m.failed_stage, None);
    assert_eq!(m.config_hash, tiny().hash());
    for s in &m.stages {
        assert!(!s.artifacts.is_empty(), "{:?}", s.stage);
        for a in &s.artifacts {
            assert!(p.path(a).is_file(), "{a} listed but missing");
        }
    }
    let reports = p.load_reports().unwrap();
    assert_eq!(reports.len(), 2);
    for r in &reports {
        assert_eq!(r.m(), 3);
        assert!(r.baselines.is_some());
        assert!(p.path(&format!("reports/{}.json", r.task)).is_file());
    }
    for f in [
        files::HARVEST_CSV,
        files::FIDELITY,
        files::GENERATION,
        files::SPECIFICITY,
        files::NOVELTY,
        files::PCA_CSV,
        files::INTERP_JSON,
    ] {
        assert!(p.path(f).is_file(), "{f}");
    }
    assert!(m.metrics.get("generation").is_some());

    let before = artifact_digests(dir.path()).unwrap();
    p.run_all().unwrap();
    assert_eq!(statuses(&p), vec![StageStatus::Cached; 5]);
    assert_eq!(artifact_digests(dir.path()).unwrap(), before);
}

#[test]
fn forced_rerun_is_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    Pipeline::new(tiny(), a.path()).run_all().unwrap();
    let mut p = Pipeline::new(tiny(), b.path());
    p.force = true;
    p.run_all().unwrap();
    let da = artifact_digests(a.path()).unwrap();
    assert_eq!(da, artifact_digests(b.path()).unwrap());
    assert!(!da.contains_key(MANIFEST));
    assert!(da.keys().any(|k| k.starts_with(".stamps/")));
}

#[test]
fn changing_a_downstream_section_keeps_upstream_cache() {
    let dir = tempfile::tempdir().unwrap();
    Pipeline::new(tiny(), dir.path()).run_all().unwrap();
    let mut cfg = tiny();
    cfg.diffusion.steps = 25;
    let p = Pipeline::new(cfg, dir.path());
    assert!(p.is_cached(StageId::Harvest));
    assert!(p.is_cached(StageId::TrainAe));
    assert!(!p.is_cached(StageId::TrainDiff));
    p.run_all().unwrap();
    assert_eq!(
        statuses(&p),
        vec![
            StageStatus::Cached,
            StageStatus::Cached,
            StageStatus::Ran,
            StageStatus::Ran,
            StageStatus::Ran
        ]
    );
}

#[test]
fn stale_upstream_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    Pipeline::new(tiny(), dir.path()).run_all().unwrap();
    let mut cfg = tiny();
    cfg.diffusion.lr = 0.002;
    let p = Pipeline::new(cfg, dir.path());
    let (rec, err) = p.run_stage(StageId::Generate);
    assert_eq!(rec.status, StageStatus::Failed);
    assert!(matches!(
        inner(err.unwrap()),
        Error::StaleArtifact {
            producer: "train-diff",
            ..
        }
    ));
}

#[test]
fn missing_upstream_is_reported_and_manifest_written() {
    let dir = tempfile::tempdir().unwrap();
    let p = Pipeline::new(tiny(), dir.path());
    let err = p.run(&[StageId::TrainAe]).unwrap_err();
    assert!(matches!(
        inner(err),
        Error::MissingArtifact {
            producer: "harvest",
            ..
        }
    ));
    let m = p.load_manifest().unwrap();
    assert_eq!(m.failed_stage, Some(StageId::TrainAe));
    assert!(m.stages[0].error.is_some());
}

#[test]
fn corrupted_model_fails_checksum_and_invalidates_cache() {
    let dir = tempfile::tempdir().unwrap();
    let p = Pipeline::new(tiny(), dir.path());
    p.run_all().unwrap();
    let path = p.path(files::DENOISER);
    let mut bytes = std::fs::read(&path).unwrap();
    let n = bytes.len();
    bytes[n - 20] ^= 0x01;
    std::fs::write(&path, bytes).unwrap();
    assert!(!p.is_cached(StageId::TrainDiff));
    let mut forced = Pipeline::new(tiny(), dir.path());
    forced.force = true;
    let (_, err) = forced.run_stage(StageId::Generate);
    assert!(matches!(inner(err.unwrap()), Error::Checksum { .. }));
}

#[test]
fn stage_keys_and_seeds_are_distinct() {
    let p = Pipeline::new(tiny(), "unused");
    let keys: std::collections::HashSet<_> = StageId::ALL.iter().map(|&s| p.stage_key(s)).collect();
    let seeds: std::collections::HashSet<_> =
        StageId::ALL.iter().map(|&s| p.stage_seed(s)).collect();
    assert_eq!(keys.len(), 5);
    assert_eq!(seeds.len(), 5);
    let mut other = tiny();
    other.seed = 12;
    let q = Pipeline::new(other, "unused");
    assert_ne!(p.stage_key(StageId::Harvest), q.stage_key(StageId::Harvest));
    assert_eq!(p.candidate_seeds(0).len(), 3);
    assert_ne!(p.candidate_seeds(0), p.candidate_seeds(1));
}

#[test]
fn norm_ablation_writes_grid() {
    let dir = tempfile::tempdir().unwrap();
    let p = Pipeline::new(tiny(), dir.path());
    let grid = p.ablate(AblationAxis::NormMode).unwrap();
    assert_eq!(grid.runs.len(), 3);
    assert!(grid.runs.iter().all(|r| r.error.is_none()));
    assert_eq!(grid.rows().len(), 6);
    for mode in [NormMode::None, NormMode::Batch, NormMode::Task] {
        let name = &grid.runs[0].reports[0].task;
        assert!(grid.metric(&AblationLevel::NormMode(mode), name).is_some());
    }
    let abl = dir.path().join("ablation");
    assert!(abl.join("norm_mode.json").is_file());
    assert!(abl.join("norm_mode.csv").is_file());
    for r in &grid.runs {
        assert!(Path::new(&dir.path().join(&r.run_dir))
            .join("reports.json")
            .is_file());
    }
}

#[test]
fn ablation_levels_share_identical_runs() {
    let dir = tempfile::tempdir().unwrap();
    let p = Pipeline::new(tiny(), dir.path());
    let sizes = p.ablate(AblationAxis::DatasetSize).unwrap();
    let full = sizes
        .runs
        .iter()
        .find(|r| r.level == AblationLevel::DatasetSize(4))
        .unwrap()
        .run_dir
        .clone();
    let cfg = tiny()
        .ablation_level(
            AblationAxis::NormMode,
            &AblationLevel::NormMode(NormMode::Task),
        )
        .unwrap();
    assert_eq!(format!("runs/{}", &cfg.hash()[..16]), full);
}

#[test]
fn invalid_configs_are_config_errors() {
    let bad = TINY.replace("n = 4", "n = 40");
    assert!(matches!(
        ExperimentConfig::from_toml(&bad),
        Err(Error::Config(_))
    ));
    let unknown = TINY.replace("[lora]", "[lora]\nbogus = 1");
    assert!(matches!(
        ExperimentConfig::from_toml(&unknown),
        Err(Error::Config(_))
    ));
    let cfg = tiny();
    let back = ExperimentConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
    assert_eq!(back, cfg);
    assert_eq!(back.hash(), cfg.hash());
}
