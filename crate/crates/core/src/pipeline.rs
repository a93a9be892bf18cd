//! Staged experiment runs. Every stage writes its artifacts under one output directory
//! together with a stamp holding the stage key (a hash of the configuration the stage
//! depends on) and the digest of every artifact. A stage whose stamp matches is skipped.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::autoencoder::{train_ae, AeModel};
use crate::bench::{
    baselines, best_of, held_out_condition_eval, interpolation_sweep, pca_project, similarity,
    similarity_summary, spearman, splice, write_csv, write_json, write_table, AblationGrid,
    AblationRun, GenerationReport, Generator,
};
use crate::conddiff::{
    p_sample_batch, record_trajectory, train_diffusion, ConditionSpec, DenoiserModel,
};
use crate::config::{hash_json, AblationAxis, ExperimentConfig, SuiteEntry};
use crate::lora::{LayoutDescriptor, ParameterVector, Provenance};
use crate::paramstore::{NormMode, ParamDataset};
use crate::rng::{split, Stage};
use crate::tasks::{
    evaluate, finetune_collect, make_task, pretrain_base, BaseModel, CheckpointSet, Split, Task,
};
use crate::{Error, Result};

pub const MANIFEST: &str = "manifest.json";
const STAMPS: &str = ".stamps";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StageId {
    Harvest,
    TrainAe,
    TrainDiff,
    Generate,
    Analyze,
}

impl StageId {
    pub const ALL: [StageId; 5] = [
        StageId::Harvest,
        StageId::TrainAe,
        StageId::TrainDiff,
        StageId::Generate,
        StageId::Analyze,
    ];

    /// Also the CLI command that produces the stage's artifacts.
    pub fn name(self) -> &'static str {
        match self {
            StageId::Harvest => "harvest",
            StageId::TrainAe => "train-ae",
            StageId::TrainDiff => "train-diff",
            StageId::Generate => "generate",
            StageId::Analyze => "analyze",
        }
    }

    fn upstream(self) -> Option<StageId> {
        let i = StageId::ALL
            .iter()
            .position(|&s| s == self)
            .expect("listed");
        i.checked_sub(1).map(|j| StageId::ALL[j])
    }

    fn seed_stage(self) -> Stage {
        match self {
            StageId::Harvest => Stage::Harvest,
            StageId::TrainAe => Stage::Autoencoder,
            StageId::TrainDiff => Stage::Diffusion,
            StageId::Generate => Stage::Generate,
            StageId::Analyze => Stage::Analyze,
        }
    }
}

pub mod files {
    pub const BASE: &str = "base.json";
    pub const CHECKPOINTS: &str = "checkpoints.pset";
    pub const HARVEST_CSV: &str = "harvest.csv";
    pub const DATASET: &str = "dataset.pset";
    pub const AE: &str = "ae.cpae";
    pub const AE_CURVE: &str = "ae_curve.csv";
    pub const FIDELITY: &str = "fidelity.csv";
    pub const DENOISER: &str = "denoiser.cpdm";
    pub const DIFF_CURVE: &str = "diffusion_curve.csv";
    pub const REPORTS: &str = "reports.json";
    pub const CANDIDATES: &str = "candidates.csv";
    pub const GENERATION: &str = "generation.csv";
    pub const GENERATED: &str = "generated.pset";
    pub const SPECIFICITY: &str = "specificity.csv";
    pub const SIMILARITY: &str = "similarity.csv";
    pub const NOVELTY: &str = "novelty.json";
    pub const PCA_CSV: &str = "pca.csv";
    pub const PCA_JSON: &str = "pca.json";
    pub const INTERP_CSV: &str = "interpolation.csv";
    pub const INTERP_JSON: &str = "interpolation.json";
    pub const HELD_OUT: &str = "held_out.csv";
    pub const TRAJECTORIES: &str = "trajectories";
    pub const SUMMARY: &str = "summary.json";
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageStatus {
    Ran,
    Cached,
    Failed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: StageId,
    pub status: StageStatus,
    pub key: String,
    pub seed: u64,
    pub seconds: f64,
    pub artifacts: Vec<String>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub source_revision: Option<String>,
    pub seed: u64,
    pub stages: Vec<StageRecord>,
    pub failed_stage: Option<StageId>,
    pub metrics: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Stamp {
    key: String,
    artifacts: BTreeMap<String, String>,
}

/// Summary line per generated condition.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationRow {
    pub task: String,
    pub seen: bool,
    pub m: usize,
    pub chosen_seed: u64,
    pub chosen_val: f64,
    pub original_best: Option<f64>,
    pub soup: Option<f64>,
    pub nn_ratio: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct HarvestRow {
    task: String,
    step: usize,
    train_metric: f64,
    val_metric: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct CandidateRow {
    task: String,
    seen: bool,
    index: usize,
    seed: u64,
    train_metric: f64,
    val_metric: f64,
    chosen: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct SimilarityRow {
    task: String,
    index: usize,
    seed: u64,
    min_l2: f64,
    mean_l2: f64,
    nn_task: String,
    nn_step: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Novelty {
    pub min_l2: f64,
    pub nn_ratio: f64,
    pub per_task: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InterpolationSummary {
    pub task_a: String,
    pub task_b: String,
    pub steps: usize,
    pub spearman_blend: f64,
    pub spearman_realized: f64,
}

/// Reconstruction quality against the full fine-tuned checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FidelityRow {
    pub task: String,
    pub source_mean_val: f64,
    pub source_min_val: f64,
    pub mean_abs_delta: f64,
    pub max_abs_delta: f64,
    pub normalized_mse: f64,
}

/// Selectable parts of the analysis stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnalysisKind {
    Similarity,
    Interpolate,
    Pca,
    Trajectory,
}

impl AnalysisKind {
    pub const ALL: [AnalysisKind; 4] = [
        AnalysisKind::Similarity,
        AnalysisKind::Interpolate,
        AnalysisKind::Pca,
        AnalysisKind::Trajectory,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AnalysisKind::Similarity => "similarity",
            AnalysisKind::Interpolate => "interpolate",
            AnalysisKind::Pca => "pca",
            AnalysisKind::Trajectory => "trajectory",
        }
    }
}

impl std::str::FromStr for AnalysisKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AnalysisKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown analysis {s:?}")))
    }
}

/// An experiment rooted at one output directory.
pub struct Pipeline {
    pub cfg: ExperimentConfig,
    pub out: PathBuf,
    pub force: bool,
    pub revision: Option<String>,
    /// Restricts the analysis stage; `None` runs every analysis.
    pub analyses: Option<Vec<AnalysisKind>>,
}

struct Loaded {
    base: BaseModel,
    entries: Vec<SuiteEntry>,
    tasks: Vec<Task>,
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(Sha256::digest(&bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect())
}

fn restrict_set(
    set: &CheckpointSet,
    layers: &[usize],
) -> Result<(CheckpointSet, Vec<std::ops::Range<usize>>)> {
    let (sub, ranges) = set.layout.restrict(layers)?;
    let sub = std::sync::Arc::new(sub);
    let vectors = set
        .vectors
        .iter()
        .map(|v| {
            let vals = ranges
                .iter()
                .flat_map(|r| v.values()[r.clone()].iter().copied())
                .collect();
            ParameterVector::new(vals, sub.clone(), Provenance::Harvested)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((
        CheckpointSet {
            layout: sub,
            vectors,
            ..set.clone()
        },
        ranges,
    ))
}

fn full_ranges(layout: &LayoutDescriptor) -> Vec<std::ops::Range<usize>> {
    vec![0..layout.total_length]
}

fn nearest_trained(entries: &[SuiteEntry], i: usize) -> usize {
    let d = entries[i].spec.condition.descriptor();
    let dist = |j: usize| -> f64 {
        entries[j]
            .spec
            .condition
            .descriptor()
            .iter()
            .zip(&d)
            .map(|(a, b)| ((a - b) as f64).powi(2))
            .sum()
    };
    (0..entries.len())
        .filter(|&j| entries[j].trained)
        .min_by(|&a, &b| dist(a).total_cmp(&dist(b)))
        .expect("a trained entry")
}

impl Pipeline {
    pub fn new(cfg: ExperimentConfig, out: impl Into<PathBuf>) -> Self {
        Pipeline {
            cfg,
            out: out.into(),
            force: false,
            revision: None,
            analyses: None,
        }
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.out.join(rel)
    }

    fn master(&self) -> u64 {
        self.cfg.seed
    }

    pub fn stage_seed(&self, s: StageId) -> u64 {
        s.seed_stage().seed(self.master())
    }

    fn data_seed(&self) -> u64 {
        split(Stage::Base.seed(self.master()), 1)
    }

    /// Hash of everything `s` and its upstream stages read from the configuration.
    pub fn stage_key(&self, s: StageId) -> String {
        let c = &self.cfg;
        let v = match s {
            StageId::Harvest => json!({
                "seed": c.seed, "suite": c.suite, "base": c.base,
                "lora": {"rank": c.lora.rank, "alpha": c.lora.alpha}, "harvest": c.harvest,
            }),
            StageId::TrainAe => json!({
                "up": self.stage_key(StageId::Harvest), "generated_layers": c.lora.generated_layers,
                "normalization": c.normalization, "autoencoder": c.autoencoder,
            }),
            StageId::TrainDiff => {
                json!({"up": self.stage_key(StageId::TrainAe), "diffusion": c.diffusion})
            }
            StageId::Generate => {
                json!({"up": self.stage_key(StageId::TrainDiff), "generation": c.generation})
            }
            StageId::Analyze => match &self.analyses {
                None => json!({"up": self.stage_key(StageId::Generate), "analysis": c.analysis}),
                Some(k) => {
                    json!({"up": self.stage_key(StageId::Generate), "analysis": c.analysis, "only": k})
                }
            },
        };
        hash_json(&v)
    }

    fn stamp_path(&self, s: StageId) -> PathBuf {
        self.out.join(STAMPS).join(format!("{}.json", s.name()))
    }

    fn read_stamp(&self, s: StageId) -> Option<Stamp> {
        let bytes = std::fs::read(self.stamp_path(s)).ok()?;
        serde_json::from_slice(&bytes).ok()
    }

    /// True when the stamp matches the current key and every artifact is intact.
    pub fn is_cached(&self, s: StageId) -> bool {
        let Some(stamp) = self.read_stamp(s) else {
            return false;
        };
        stamp.key == self.stage_key(s)
            && stamp
                .artifacts
                .iter()
                .all(|(rel, digest)| sha256_file(&self.path(rel)).is_ok_and(|d| &d == digest))
    }

    /// Fails unless the artifacts of `s` exist and were produced under the current key.
    fn require(&self, s: StageId) -> Result<()> {
        match self.read_stamp(s) {
            None => Err(Error::MissingArtifact {
                path: self.stamp_path(s),
                producer: s.name(),
            }),
            Some(st) if st.key != self.stage_key(s) => Err(Error::StaleArtifact {
                path: self.stamp_path(s),
                producer: s.name(),
            }),
            Some(st) => {
                for rel in st.artifacts.keys() {
                    if !self.path(rel).exists() {
                        return Err(Error::MissingArtifact {
                            path: self.path(rel),
                            producer: s.name(),
                        });
                    }
                }
                Ok(())
            }
        }
    }

    fn write_stamp(&self, s: StageId, artifacts: &[String]) -> Result<()> {
        let mut map = BTreeMap::new();
        for rel in artifacts {
            map.insert(rel.clone(), sha256_file(&self.path(rel))?);
        }
        let stamp = Stamp {
            key: self.stage_key(s),
            artifacts: map,
        };
        write_json(&self.stamp_path(s), &stamp)
    }

    fn load_common(&self) -> Result<Loaded> {
        let path = self.path(files::BASE);
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let base: BaseModel = serde_json::from_slice(&bytes)
            .map_err(|e| Error::Header(format!("{}: {e}", path.display())))?;
        let entries = self.cfg.suite.entries(self.data_seed())?;
        let tasks = entries
            .iter()
            .map(|e| make_task(e.spec.clone()))
            .collect::<Result<Vec<_>>>()?;
        Ok(Loaded {
            base,
            entries,
            tasks,
        })
    }

    fn load_checkpoints(&self) -> Result<ParamDataset> {
        ParamDataset::load(&self.path(files::CHECKPOINTS))
    }

    fn load_ae(&self) -> Result<AeModel> {
        let path = self.path(files::AE);
        let (ae, key) = AeModel::load(&path)?;
        if key != self.stage_key(StageId::TrainAe) {
            return Err(Error::StaleArtifact {
                path,
                producer: StageId::TrainAe.name(),
            });
        }
        Ok(ae)
    }

    fn load_denoiser(&self) -> Result<DenoiserModel> {
        let path = self.path(files::DENOISER);
        let (dm, key) = DenoiserModel::load(&path)?;
        if key != self.stage_key(StageId::TrainDiff) {
            return Err(Error::StaleArtifact {
                path,
                producer: StageId::TrainDiff.name(),
            });
        }
        Ok(dm)
    }

    pub fn load_reports(&self) -> Result<Vec<GenerationReport>> {
        let path = self.path(files::REPORTS);
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_slice(&bytes)
            .map_err(|e| Error::Header(format!("{}: {e}", path.display())))
    }

    pub fn load_manifest(&self) -> Option<RunManifest> {
        let bytes = std::fs::read(self.path(MANIFEST)).ok()?;
        serde_json::from_slice(&bytes).ok()
    }

    fn condition_for(&self, loaded: &Loaded, i: usize) -> ConditionSpec {
        let entry_id = if loaded.entries[i].trained {
            i
        } else {
            nearest_trained(&loaded.entries, i)
        };
        let mut spec = ConditionSpec::for_task(
            self.cfg.diffusion.cond_kind,
            entry_id,
            &loaded.tasks[i],
            self.cfg.diffusion.exemplars,
        );
        if !loaded.entries[i].trained {
            spec.task_id = None;
        }
        spec
    }

    fn run_harvest(&self) -> Result<Vec<String>> {
        let c = &self.cfg;
        let family = c.suite.family();
        let base = pretrain_base(
            family,
            c.suite.classes(),
            split(Stage::Base.seed(self.master()), 0),
            &c.base,
        )?;
        let entries = c.suite.entries(self.data_seed())?;
        let hseed = self.stage_seed(StageId::Harvest);
        let ft = c.finetune();
        let results = entries
            .par_iter()
            .enumerate()
            .filter(|(_, e)| e.trained)
            .map(|(i, e)| {
                let task = make_task(e.spec.clone())?;
                let set = finetune_collect(&base, &task, &ft, split(hseed, i as u64))?;
                Ok((task, set))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut rows = Vec::new();
        for (task, set) in &results {
            for (j, v) in set.vectors.iter().enumerate() {
                rows.push(HarvestRow {
                    task: task.spec.name.clone(),
                    step: set.steps[j],
                    train_metric: set.train_metrics[j],
                    val_metric: evaluate(&base, v, task, Split::Val)?,
                });
            }
        }
        let sets = results.into_iter().map(|(_, s)| s).collect();
        let ds = ParamDataset::new(sets, NormMode::None, c.normalization.eps)?;
        write_json(&self.path(files::BASE), &base)?;
        ds.save(&self.path(files::CHECKPOINTS))?;
        write_csv(&self.path(files::HARVEST_CSV), &rows)?;
        Ok(vec![
            files::BASE.into(),
            files::CHECKPOINTS.into(),
            files::HARVEST_CSV.into(),
        ])
    }

    /// Source sets restricted to the generated layers, with the ranges they came from.
    fn training_sets(
        &self,
        raw: &ParamDataset,
    ) -> Result<(Vec<CheckpointSet>, Vec<std::ops::Range<usize>>)> {
        let layers = &self.cfg.lora.generated_layers;
        if layers.is_empty() {
            return Ok((raw.sets.clone(), full_ranges(&raw.layout)));
        }
        let mut ranges = Vec::new();
        let mut sets = Vec::new();
        for s in &raw.sets {
            let (r, rg) = restrict_set(s, layers)?;
            sets.push(r);
            ranges = rg;
        }
        Ok((sets, ranges))
    }

    fn run_train_ae(&self) -> Result<Vec<String>> {
        let c = &self.cfg;
        let loaded = self.load_common()?;
        let raw = self.load_checkpoints()?;
        let (sets, ranges) = self.training_sets(&raw)?;
        let ds = ParamDataset::new(sets, c.normalization.mode, c.normalization.eps)?;
        let mut curve = Vec::new();
        let ae = train_ae(
            &ds,
            &c.autoencoder,
            self.stage_seed(StageId::TrainAe),
            &mut curve,
        )?;
        ds.save(&self.path(files::DATASET))?;
        ae.save(&self.path(files::AE), &self.stage_key(StageId::TrainAe))?;
        write_curve(&self.path(files::AE_CURVE), &curve)?;
        let mut rows = Vec::new();
        for (t, src) in raw.sets.iter().enumerate() {
            let task = &loaded.tasks[t];
            let norm = ds.normalized(t)?;
            let rec =
                ae.reconstruct_batch(&norm.iter().map(|v| v.as_slice()).collect::<Vec<_>>())?;
            let (mut sum, mut max, mut se, mut src_sum, mut src_min) =
                (0.0f64, 0.0f64, 0.0f64, 0.0f64, f64::INFINITY);
            for ((full, r), n) in src.vectors.iter().zip(&rec).zip(norm) {
                se += r
                    .iter()
                    .zip(n)
                    .map(|(a, b)| ((a - b) as f64).powi(2))
                    .sum::<f64>()
                    / n.len() as f64;
                let v = splice(full, &ranges, &ds.denormalize(t, r)?)?
                    .with_provenance(Provenance::Reconstructed);
                let m0 = evaluate(&loaded.base, full, task, Split::Val)?;
                let d = (evaluate(&loaded.base, &v, task, Split::Val)? - m0).abs();
                sum += d;
                max = max.max(d);
                src_sum += m0;
                src_min = src_min.min(m0);
            }
            let n = rec.len().max(1) as f64;
            rows.push(FidelityRow {
                task: task.spec.name.clone(),
                source_mean_val: src_sum / n,
                source_min_val: src_min,
                mean_abs_delta: sum / n,
                max_abs_delta: max,
                normalized_mse: se / n,
            });
        }
        write_csv(&self.path(files::FIDELITY), &rows)?;
        Ok(vec![
            files::DATASET.into(),
            files::AE.into(),
            files::AE_CURVE.into(),
            files::FIDELITY.into(),
        ])
    }

    fn run_train_diff(&self) -> Result<Vec<String>> {
        let c = &self.cfg;
        let loaded = self.load_common()?;
        let ds = ParamDataset::load(&self.path(files::DATASET))?;
        let ae = self.load_ae()?;
        let mut latents = Vec::new();
        for t in 0..ds.num_tasks() {
            let rows: Vec<&[f32]> = ds.normalized(t)?.iter().map(|v| v.as_slice()).collect();
            latents.extend(ae.encode_batch(&rows)?.into_iter().map(|z| (t, z)));
        }
        let conditions: Vec<ConditionSpec> = (0..ds.num_tasks())
            .map(|t| self.condition_for(&loaded, t))
            .collect();
        let mut curve = Vec::new();
        let dm = train_diffusion(
            &latents,
            &conditions,
            &c.diffusion,
            self.stage_seed(StageId::TrainDiff),
            &mut curve,
        )?;
        dm.save(
            &self.path(files::DENOISER),
            &self.stage_key(StageId::TrainDiff),
        )?;
        write_curve(&self.path(files::DIFF_CURVE), &curve)?;
        Ok(vec![files::DENOISER.into(), files::DIFF_CURVE.into()])
    }

    /// Candidate seeds of suite entry `i`; shared by every run with the same master seed.
    pub fn candidate_seeds(&self, i: usize) -> Vec<u64> {
        let s = split(self.stage_seed(StageId::Generate), i as u64);
        (0..self.cfg.generation.m as u64)
            .map(|j| split(s, j))
            .collect()
    }

    fn run_generate(&self) -> Result<Vec<String>> {
        let c = &self.cfg;
        let loaded = self.load_common()?;
        let raw = self.load_checkpoints()?;
        let ds = ParamDataset::load(&self.path(files::DATASET))?;
        let ae = self.load_ae()?;
        let dm = self.load_denoiser()?;
        let (_, ranges) = self.training_sets(&raw)?;
        let gen = Generator {
            ae: &ae,
            denoiser: &dm,
            dataset: &ds,
        };
        let train_pool: Vec<ParameterVector> = raw
            .sets
            .iter()
            .flat_map(|s| s.vectors.iter().cloned())
            .collect();
        let hash = c.hash();
        let out = (0..loaded.entries.len())
            .into_par_iter()
            .map(|i| -> Result<(GenerationReport, Vec<ParameterVector>)> {
                let trained = loaded.entries[i].trained;
                let anchor = if trained {
                    i
                } else {
                    nearest_trained(&loaded.entries, i)
                };
                let seeds = self.candidate_seeds(i);
                let cond = self.condition_for(&loaded, i);
                let final_ckpt = raw.sets[anchor]
                    .vectors
                    .last()
                    .expect("harvested sets are non-empty");
                let cands = gen
                    .generate_candidates(&cond, anchor, &seeds)?
                    .iter()
                    .map(|v| splice(final_ckpt, &ranges, v.values()))
                    .collect::<Result<Vec<_>>>()?;
                let task = &loaded.tasks[i];
                let mut report = best_of(&cands, &seeds, &loaded.base, task)?;
                report.seen = trained;
                report.baselines = if trained {
                    Some(baselines(&raw.sets[i], &loaded.base, task)?)
                } else {
                    None
                };
                report.similarity = Some(similarity_summary(&cands, &train_pool)?);
                report.config_hash = hash.clone();
                report.seed = c.seed;
                Ok((report, cands))
            })
            .collect::<Result<Vec<_>>>()?;

        let mut cand_rows = Vec::new();
        let mut gen_rows = Vec::new();
        let mut gen_sets = Vec::new();
        for (i, (r, cands)) in out.iter().enumerate() {
            for j in 0..r.m() {
                cand_rows.push(CandidateRow {
                    task: r.task.clone(),
                    seen: r.seen,
                    index: j,
                    seed: r.seeds[j],
                    train_metric: r.train_metrics[j],
                    val_metric: r.val_metrics[j],
                    chosen: j == r.chosen,
                });
            }
            gen_rows.push(GenerationRow {
                task: r.task.clone(),
                seen: r.seen,
                m: r.m(),
                chosen_seed: r.chosen_seed(),
                chosen_val: r.chosen_val,
                original_best: r.baselines.as_ref().map(|b| b.original_best),
                soup: r.baselines.as_ref().map(|b| b.soup),
                nn_ratio: r.similarity.as_ref().map(|s| s.nn_ratio),
            });
            gen_sets.push(CheckpointSet {
                task: loaded.entries[i].spec.clone(),
                layout: raw.layout.clone(),
                vectors: cands.clone(),
                steps: (0..cands.len()).collect(),
                stride: 1,
                optimizer: c.harvest.optimizer,
                train_metrics: r.train_metrics.clone(),
            });
        }
        let trained: Vec<usize> = (0..loaded.entries.len())
            .filter(|&i| loaded.entries[i].trained)
            .collect();
        let header: Vec<String> = std::iter::once("task".to_string())
            .chain(trained.iter().map(|&j| loaded.entries[j].spec.name.clone()))
            .collect();
        let mut spec_rows = Vec::new();
        for &t in &trained {
            let mut row = vec![loaded.entries[t].spec.name.clone()];
            for &j in &trained {
                let (r, cands) = &out[j];
                row.push(
                    evaluate(&loaded.base, &cands[r.chosen], &loaded.tasks[t], Split::Val)?
                        .to_string(),
                );
            }
            spec_rows.push(row);
        }
        let reports: Vec<&GenerationReport> = out.iter().map(|(r, _)| r).collect();
        std::fs::create_dir_all(self.path("reports"))
            .map_err(|e| Error::io(self.path("reports"), e))?;
        let mut artifacts = Vec::new();
        for r in &reports {
            let rel = format!("reports/{}.json", r.task);
            write_json(&self.path(&rel), r)?;
            artifacts.push(rel);
        }
        write_json(&self.path(files::REPORTS), &reports)?;
        write_csv(&self.path(files::CANDIDATES), &cand_rows)?;
        write_csv(&self.path(files::GENERATION), &gen_rows)?;
        write_table(&self.path(files::SPECIFICITY), &header, &spec_rows)?;
        ParamDataset::new(gen_sets, NormMode::None, c.normalization.eps)?
            .save(&self.path(files::GENERATED))?;
        artifacts.extend(
            [
                files::REPORTS,
                files::CANDIDATES,
                files::GENERATION,
                files::SPECIFICITY,
                files::GENERATED,
            ]
            .map(String::from),
        );
        Ok(artifacts)
    }

    fn run_analyze(&self) -> Result<Vec<String>> {
        let c = &self.cfg;
        let loaded = self.load_common()?;
        let raw = self.load_checkpoints()?;
        let generated = ParamDataset::load(&self.path(files::GENERATED))?;
        let reports = self.load_reports()?;
        let dm = self.load_denoiser()?;
        let mut artifacts = Vec::new();
        let wants = |k: AnalysisKind| self.analyses.as_ref().is_none_or(|a| a.contains(&k));

        let pool: Vec<(usize, usize, &ParameterVector)> = raw
            .sets
            .iter()
            .enumerate()
            .flat_map(|(t, s)| s.vectors.iter().enumerate().map(move |(j, v)| (t, j, v)))
            .collect();
        let pool_vecs: Vec<ParameterVector> = pool.iter().map(|p| p.2.clone()).collect();
        if wants(AnalysisKind::Similarity) {
            let mut sim_rows = Vec::new();
            let mut per_task = BTreeMap::new();
            let mut all_gen = Vec::new();
            for (set, r) in generated.sets.iter().zip(&reports) {
                for (j, g) in set.vectors.iter().enumerate() {
                    let s = similarity(g, &pool_vecs)?;
                    let (t, k, _) = pool[s.nn_index];
                    sim_rows.push(SimilarityRow {
                        task: r.task.clone(),
                        index: j,
                        seed: r.seeds[j],
                        min_l2: s.min_l2,
                        mean_l2: s.mean_l2,
                        nn_task: raw.sets[t].task.name.clone(),
                        nn_step: raw.sets[t].steps[k],
                    });
                }
                per_task.insert(
                    r.task.clone(),
                    similarity_summary(&set.vectors, &pool_vecs)?.nn_ratio,
                );
                all_gen.extend(set.vectors.iter().cloned());
            }
            let overall = similarity_summary(&all_gen, &pool_vecs)?;
            let novelty = Novelty {
                min_l2: overall.min_l2.iter().copied().fold(f64::INFINITY, f64::min),
                nn_ratio: overall.nn_ratio,
                per_task,
            };
            write_csv(&self.path(files::SIMILARITY), &sim_rows)?;
            write_json(&self.path(files::NOVELTY), &novelty)?;
            artifacts.extend([files::SIMILARITY, files::NOVELTY].map(String::from));
        }

        if wants(AnalysisKind::Pca) {
            let mut labels = Vec::new();
            let mut data = Vec::new();
            for s in &raw.sets {
                for (j, v) in s.vectors.iter().enumerate() {
                    labels.push((s.task.name.clone(), "harvested", j));
                    data.push(v.values().iter().map(|&x| x as f64).collect::<Vec<_>>());
                }
            }
            for s in &generated.sets {
                for (j, v) in s.vectors.iter().enumerate() {
                    labels.push((s.task.name.clone(), "generated", j));
                    data.push(v.values().iter().map(|&x| x as f64).collect());
                }
            }
            let k = c.analysis.pca_components.min(data[0].len());
            let pca = pca_project(&data, k)?;
            let mut header = vec!["task".to_string(), "source".into(), "index".into()];
            header.extend((1..=k).map(|i| format!("pc{i}")));
            let rows: Vec<Vec<String>> = labels
                .iter()
                .zip(&pca.coords)
                .map(|((t, src, j), xy)| {
                    let mut row = vec![t.clone(), src.to_string(), j.to_string()];
                    row.extend(xy.iter().map(|v| v.to_string()));
                    row
                })
                .collect();
            write_table(&self.path(files::PCA_CSV), &header, &rows)?;
            write_json(
                &self.path(files::PCA_JSON),
                &json!({"explained_ratio": pca.explained_ratio, "eigenvalues": pca.eigenvalues.iter().take(32).collect::<Vec<_>>()}),
            )?;
            artifacts.extend([files::PCA_CSV, files::PCA_JSON].map(String::from));
        }

        if wants(AnalysisKind::Trajectory) {
            let tdir = self.path(files::TRAJECTORIES);
            std::fs::create_dir_all(&tdir).map_err(|e| Error::io(&tdir, e))?;
            let n_traj = c.generation.trajectory_seeds;
            let trajs = (0..loaded.entries.len())
                .into_par_iter()
                .map(|i| {
                    let seeds = &self.candidate_seeds(i)[..n_traj];
                    p_sample_batch(&dm, &self.condition_for(&loaded, i), seeds, true)
                        .map(|(_, t)| t)
                })
                .collect::<Result<Vec<_>>>()?;
            for (i, ts) in trajs.iter().enumerate() {
                for (j, tr) in ts.iter().enumerate() {
                    let rel = format!(
                        "{}/{}_{j}.csv",
                        files::TRAJECTORIES,
                        loaded.entries[i].spec.name
                    );
                    record_trajectory(tr, c.generation.trajectory_stride, &self.path(&rel))?;
                    artifacts.push(rel);
                }
            }
        }

        let trained: Vec<usize> = (0..loaded.entries.len())
            .filter(|&i| loaded.entries[i].trained)
            .collect();
        if trained.len() >= 2 && wants(AnalysisKind::Interpolate) {
            let (ia, ib) = (trained[0], trained[trained.len() - 1]);
            let pick = |i: usize| generated.sets[i].vectors[reports[i].chosen].clone();
            let (ca, cb) = (
                loaded.entries[ia].spec.condition,
                loaded.entries[ib].spec.condition,
            );
            let steps = c.analysis.interpolation_steps;
            let targets = crate::bench::lambda_grid(steps)?
                .iter()
                .enumerate()
                .map(|(j, &l)| {
                    let mut spec = loaded.entries[ia].spec.clone();
                    spec.name = format!("blend_{l:.3}");
                    spec.condition = ca.blend(&cb, l)?;
                    spec.seed = split(self.data_seed(), 10_000 + j as u64);
                    make_task(spec)
                })
                .collect::<Result<Vec<_>>>()?;
            let sweep = interpolation_sweep(&pick(ia), &pick(ib), &loaded.base, &targets)?;
            let lambdas: Vec<f64> = sweep.iter().map(|r| r.lambda).collect();
            let summary = InterpolationSummary {
                task_a: loaded.entries[ia].spec.name.clone(),
                task_b: loaded.entries[ib].spec.name.clone(),
                steps,
                spearman_blend: spearman(
                    &lambdas,
                    &sweep.iter().map(|r| r.metric_blend).collect::<Vec<_>>(),
                ),
                spearman_realized: spearman(
                    &lambdas,
                    &sweep.iter().map(|r| r.realized_lambda).collect::<Vec<_>>(),
                ),
            };
            write_csv(&self.path(files::INTERP_CSV), &sweep)?;
            write_json(&self.path(files::INTERP_JSON), &summary)?;
            artifacts.extend([files::INTERP_CSV, files::INTERP_JSON].map(String::from));
        }

        if c.suite.has_held_out() && wants(AnalysisKind::Interpolate) {
            let seen: Vec<GenerationReport> = reports.iter().filter(|r| r.seen).cloned().collect();
            let rows = held_out_condition_eval(&seen, &reports)?;
            write_csv(&self.path(files::HELD_OUT), &rows)?;
            artifacts.push(files::HELD_OUT.into());
        }
        Ok(artifacts)
    }

    fn execute(&self, s: StageId) -> Result<Vec<String>> {
        std::fs::create_dir_all(&self.out).map_err(|e| Error::io(&self.out, e))?;
        match s {
            StageId::Harvest => self.run_harvest(),
            StageId::TrainAe => self.run_train_ae(),
            StageId::TrainDiff => self.run_train_diff(),
            StageId::Generate => self.run_generate(),
            StageId::Analyze => self.run_analyze(),
        }
    }

    /// Runs one stage (or confirms its cache). Upstream artifacts must already exist.
    pub fn run_stage(&self, s: StageId) -> (StageRecord, Option<Error>) {
        let t0 = Instant::now();
        let key = self.stage_key(s);
        let seed = self.stage_seed(s);
        let record = |status, artifacts, error| StageRecord {
            stage: s,
            status,
            key: key.clone(),
            seed,
            seconds: t0.elapsed().as_secs_f64(),
            artifacts,
            error,
        };
        if !self.force && self.is_cached(s) {
            let artifacts = self
                .read_stamp(s)
                .map(|st| st.artifacts.into_keys().collect())
                .unwrap_or_default();
            return (record(StageStatus::Cached, artifacts, None), None);
        }
        let result = s
            .upstream()
            .map_or(Ok(()), |u| self.require(u))
            .and_then(|()| self.execute(s))
            .and_then(|arts| {
                self.write_stamp(s, &arts)?;
                Ok(arts)
            });
        match result {
            Ok(arts) => (record(StageStatus::Ran, arts, None), None),
            Err(e) => {
                let rec = record(StageStatus::Failed, Vec::new(), Some(e.to_string()));
                (
                    rec,
                    Some(Error::Stage {
                        stage: s.name(),
                        source: Box::new(e),
                    }),
                )
            }
        }
    }

    /// Runs `stages` in order, stopping at the first failure, and writes the manifest.
    /// The error of the failing stage is returned after the manifest is on disk.
    pub fn run(&self, stages: &[StageId]) -> Result<RunManifest> {
        let mut manifest = self
            .load_manifest()
            .filter(|m| m.config_hash == self.cfg.hash())
            .unwrap_or_else(|| RunManifest {
                config_hash: self.cfg.hash(),
                source_revision: None,
                seed: self.cfg.seed,
                stages: Vec::new(),
                failed_stage: None,
                metrics: json!({}),
            });
        manifest.source_revision = self.revision.clone();
        manifest.failed_stage = None;
        let mut failure = None;
        for &s in stages {
            let (rec, err) = self.run_stage(s);
            manifest.stages.retain(|r| r.stage != s);
            manifest.stages.push(rec);
            if let Some(e) = err {
                manifest.failed_stage = Some(s);
                failure = Some(e);
                break;
            }
        }
        manifest.stages.sort_by_key(|r| r.stage);
        manifest.metrics = self.metric_summary();
        std::fs::create_dir_all(&self.out).map_err(|e| Error::io(&self.out, e))?;
        write_json(&self.path(MANIFEST), &manifest)?;
        match failure {
            Some(e) => Err(e),
            None => Ok(manifest),
        }
    }

    pub fn run_all(&self) -> Result<RunManifest> {
        self.run(&StageId::ALL)
    }

    /// Condensed metrics from whatever report files exist.
    pub fn metric_summary(&self) -> serde_json::Value {
        let mut m = serde_json::Map::new();
        if let Ok(reports) = self.load_reports() {
            let per: Vec<_> = reports
                .iter()
                .map(|r| {
                    json!({
                        "task": r.task, "seen": r.seen, "chosen_val": r.chosen_val,
                        "original_best": r.baselines.as_ref().map(|b| b.original_best),
                        "soup": r.baselines.as_ref().map(|b| b.soup),
                    })
                })
                .collect();
            m.insert("generation".into(), json!(per));
        }
        for (name, file) in [
            ("novelty", files::NOVELTY),
            ("interpolation", files::INTERP_JSON),
        ] {
            if let Ok(bytes) = std::fs::read(self.path(file)) {
                if let Ok(v) = serde_json::from_slice::<serde_json::Value>(&bytes) {
                    m.insert(name.into(), v);
                }
            }
        }
        serde_json::Value::Object(m)
    }

    /// One pipeline per level of `axis`, each under `runs/<hash>` so identical levels of
    /// different axes share work. A failing level is recorded and the grid continues.
    pub fn ablate(&self, axis: AblationAxis) -> Result<AblationGrid> {
        let levels = self.cfg.ablation_levels(axis);
        let runs: Vec<AblationRun> = levels
            .par_iter()
            .map(|level| {
                let cfg = match self.cfg.ablation_level(axis, level) {
                    Ok(c) => c,
                    Err(e) => {
                        return AblationRun::failed(
                            level.clone(),
                            String::new(),
                            String::new(),
                            e.to_string(),
                        )
                    }
                };
                let hash = cfg.hash();
                let rel = format!("runs/{}", &hash[..16]);
                let sub = Pipeline {
                    cfg,
                    out: self.path(&rel),
                    force: self.force,
                    revision: self.revision.clone(),
                    analyses: None,
                };
                match sub.run(&StageId::ALL[..4]).and_then(|_| sub.load_reports()) {
                    Ok(reports) => AblationRun {
                        level: level.clone(),
                        config_hash: hash,
                        run_dir: rel,
                        reports,
                        error: None,
                    },
                    Err(e) => AblationRun::failed(level.clone(), hash, rel, e.to_string()),
                }
            })
            .collect();
        let grid = AblationGrid { axis, runs };
        let dir = self.path("ablation");
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        write_json(&dir.join(format!("{}.json", axis.name())), &grid)?;
        write_csv(&dir.join(format!("{}.csv", axis.name())), &grid.rows())?;
        Ok(grid)
    }
}

fn write_curve(path: &Path, curve: &[f64]) -> Result<()> {
    let rows: Vec<Vec<String>> = curve
        .iter()
        .enumerate()
        .map(|(i, l)| vec![(i + 1).to_string(), l.to_string()])
        .collect();
    write_table(path, &["epoch".into(), "loss".into()], &rows)
}

/// Files under `dir` (relative paths, sorted), skipping the manifest, which records timings.
pub fn artifact_digests(dir: &Path) -> Result<BTreeMap<String, String>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<String, String>) -> Result<()> {
        let mut entries: Vec<_> = std::fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .collect::<std::io::Result<_>>()
            .map_err(|e| Error::io(dir, e))?;
        entries.sort_by_key(|e| e.file_name());
        for e in entries {
            let p = e.path();
            if p.is_dir() {
                walk(root, &p, out)?;
            } else {
                let rel = p
                    .strip_prefix(root)
                    .expect("under root")
                    .to_string_lossy()
                    .replace('\\', "/");
                if rel != MANIFEST {
                    out.insert(rel, sha256_file(&p)?);
                }
            }
        }
        Ok(())
    }
    let mut out = BTreeMap::new();
    walk(dir, dir, &mut out)?;
    Ok(out)
}
