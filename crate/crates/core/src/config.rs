//! Experiment configuration: one TOML file, validated up front and hashed.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autoencoder::AeConfig;
use crate::conddiff::{ConditionKind, DiffConfig};
use crate::numerics::OptimizerState;
use crate::paramstore::NormMode;
use crate::rng::split;
use crate::tasks::{Condition, Family, FinetuneConfig, PretrainConfig, TaskSpec};
use crate::{Error, Result};

/// Task suite: a set of trained conditions and, optionally, held-out ones.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "lowercase", deny_unknown_fields)]
pub enum SuiteConfig {
    Blobs {
        phis: Vec<f64>,
        #[serde(default = "default_radius")]
        radius: f64,
        #[serde(default = "default_classes")]
        classes: usize,
        #[serde(default = "default_blob_std")]
        blob_std: f64,
        #[serde(default = "default_split_size")]
        train_size: usize,
        #[serde(default = "default_split_size")]
        val_size: usize,
    },
    Sine {
        cond_a: SineEndpoint,
        cond_b: SineEndpoint,
        train_lambdas: Vec<f64>,
        #[serde(default)]
        held_out_lambdas: Vec<f64>,
        #[serde(default = "default_split_size")]
        train_size: usize,
        #[serde(default = "default_split_size")]
        val_size: usize,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SineEndpoint {
    pub amplitude: f64,
    pub phase: f64,
}

fn default_radius() -> f64 {
    2.0
}
fn default_classes() -> usize {
    2
}
fn default_blob_std() -> f64 {
    0.3
}
fn default_split_size() -> usize {
    512
}

/// One condition of the suite, in generation order.
#[derive(Clone, Debug, PartialEq)]
pub struct SuiteEntry {
    pub spec: TaskSpec,
    /// Whether checkpoints are harvested for it.
    pub trained: bool,
}

impl SuiteConfig {
    pub fn family(&self) -> Family {
        match self {
            SuiteConfig::Blobs { .. } => Family::Blobs,
            SuiteConfig::Sine { .. } => Family::Sine,
        }
    }

    pub fn classes(&self) -> usize {
        match self {
            SuiteConfig::Blobs { classes, .. } => *classes,
            SuiteConfig::Sine { .. } => 1,
        }
    }

    /// Trained entries first, then held-out ones. Task data seeds derive from `data_seed`.
    pub fn entries(&self, data_seed: u64) -> Result<Vec<SuiteEntry>> {
        let mut out = Vec::new();
        match self {
            SuiteConfig::Blobs {
                phis,
                radius,
                classes,
                blob_std,
                train_size,
                val_size,
            } => {
                for (i, &phi) in phis.iter().enumerate() {
                    out.push(SuiteEntry {
                        spec: TaskSpec {
                            name: format!("blobs_phi{:.3}", phi),
                            condition: Condition::Blobs {
                                phi,
                                radius: *radius,
                                classes: *classes,
                            },
                            seed: split(data_seed, i as u64),
                            train_size: *train_size,
                            val_size: *val_size,
                            blob_std: *blob_std,
                        },
                        trained: true,
                    });
                }
            }
            SuiteConfig::Sine {
                cond_a,
                cond_b,
                train_lambdas,
                held_out_lambdas,
                train_size,
                val_size,
            } => {
                let a = Condition::Sine {
                    amplitude: cond_a.amplitude,
                    phase: cond_a.phase,
                };
                let b = Condition::Sine {
                    amplitude: cond_b.amplitude,
                    phase: cond_b.phase,
                };
                let all = train_lambdas
                    .iter()
                    .map(|&l| (l, true))
                    .chain(held_out_lambdas.iter().map(|&l| (l, false)));
                for (i, (lambda, trained)) in all.enumerate() {
                    out.push(SuiteEntry {
                        spec: TaskSpec {
                            name: format!("sine_l{:.3}", lambda),
                            condition: a.blend(&b, lambda)?,
                            seed: split(data_seed, i as u64),
                            train_size: *train_size,
                            val_size: *val_size,
                            blob_std: default_blob_std(),
                        },
                        trained,
                    });
                }
            }
        }
        Ok(out)
    }

    /// Keeps only the first `n` trained conditions (held-out ones are dropped).
    pub fn truncated(&self, n: usize) -> SuiteConfig {
        let mut s = self.clone();
        match &mut s {
            SuiteConfig::Blobs { phis, .. } => phis.truncate(n),
            SuiteConfig::Sine {
                train_lambdas,
                held_out_lambdas,
                ..
            } => {
                train_lambdas.truncate(n);
                held_out_lambdas.clear();
            }
        }
        s
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("suite: {m}")));
        match self {
            SuiteConfig::Blobs {
                phis,
                train_size,
                val_size,
                blob_std,
                ..
            } => {
                if phis.is_empty() {
                    return bad("phis must list at least one angle".into());
                }
                if *train_size == 0 || *val_size == 0 {
                    return bad("split sizes must be positive".into());
                }
                if !(*blob_std > 0.0) {
                    return bad(format!("blob_std must be positive, got {blob_std}"));
                }
            }
            SuiteConfig::Sine {
                train_lambdas,
                held_out_lambdas,
                train_size,
                val_size,
                ..
            } => {
                if train_lambdas.len() < 2 {
                    return bad("sine suites need at least two train_lambdas".into());
                }
                if *train_size == 0 || *val_size == 0 {
                    return bad("split sizes must be positive".into());
                }
                for &l in train_lambdas.iter().chain(held_out_lambdas) {
                    if !(0.0..=1.0).contains(&l) {
                        return bad(format!("lambda {l} outside [0, 1]"));
                    }
                }
                if held_out_lambdas.iter().any(|l| train_lambdas.contains(l)) {
                    return bad("a held-out lambda is also a train lambda".into());
                }
            }
        }
        for e in self.entries(0)? {
            e.spec
                .condition
                .validate()
                .map_err(|e| Error::Config(format!("suite: {e}")))?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoraSection {
    pub rank: usize,
    pub alpha: f64,
    /// Layers whose adapters are generated; the rest keep their fine-tuned values.
    /// Empty means all layers.
    #[serde(default)]
    pub generated_layers: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HarvestSection {
    pub n: usize,
    pub stride: usize,
    pub total_steps: usize,
    pub batch: usize,
    pub optimizer: OptimizerState,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NormalizationSection {
    pub mode: NormMode,
    #[serde(default = "default_eps")]
    pub eps: f32,
}

fn default_eps() -> f32 {
    crate::paramstore::DEFAULT_EPS
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerationSection {
    /// Candidates sampled per condition.
    pub m: usize,
    /// Candidates per task whose reverse trajectory is exported.
    pub trajectory_seeds: usize,
    pub trajectory_stride: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisSection {
    pub pca_components: usize,
    pub interpolation_steps: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationSection {
    /// Number of suite conditions used by every ablation run.
    pub tasks: usize,
    pub dataset_sizes: Vec<usize>,
    pub norm_modes: Vec<NormMode>,
    pub condition_kinds: Vec<ConditionKind>,
    pub layer_subsets: Vec<Vec<usize>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub suite: SuiteConfig,
    pub base: PretrainConfig,
    pub lora: LoraSection,
    pub harvest: HarvestSection,
    pub normalization: NormalizationSection,
    pub autoencoder: AeConfig,
    pub diffusion: DiffConfig,
    pub generation: GenerationSection,
    pub analysis: AnalysisSection,
    pub ablation: AblationSection,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        hash_json(&serde_json::to_value(self).expect("config serializes"))
    }

    pub fn finetune(&self) -> FinetuneConfig {
        FinetuneConfig {
            rank: self.lora.rank,
            alpha: self.lora.alpha,
            optimizer: self.harvest.optimizer,
            total_steps: self.harvest.total_steps,
            batch: self.harvest.batch,
            n: self.harvest.n,
            stride: self.harvest.stride,
        }
    }

    /// Checks every field against the preconditions of the stage that consumes it.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        self.suite.validate()?;
        if self.base.steps == 0
            || self.base.batch == 0
            || self.base.train_size == 0
            || !(self.base.lr > 0.0)
        {
            return bad("base: steps, batch, train_size and lr must be positive".into());
        }
        if self.lora.rank == 0 || !(self.lora.alpha > 0.0) {
            return bad("lora: rank and alpha must be positive".into());
        }
        let mut layers = self.lora.generated_layers.clone();
        layers.sort_unstable();
        layers.dedup();
        if layers.len() != self.lora.generated_layers.len() || layers.iter().any(|&l| l > 1) {
            return bad(format!(
                "lora: generated_layers {:?} must be distinct ids in 0..=1",
                self.lora.generated_layers
            ));
        }
        let h = &self.harvest;
        if h.n == 0 || h.stride == 0 || h.batch == 0 || h.total_steps < h.n * h.stride {
            return bad(format!(
                "harvest: need n, stride, batch >= 1 and total_steps >= n*stride (got {} < {}*{})",
                h.total_steps, h.n, h.stride
            ));
        }
        if !(h.optimizer.learning_rate > 0.0) {
            return bad("harvest: learning rate must be positive".into());
        }
        if !(self.normalization.eps > 0.0) {
            return bad("normalization: eps must be positive".into());
        }
        self.autoencoder.validate()?;
        self.diffusion.validate(self.autoencoder.latent_dim)?;
        if self.suite.has_held_out() && self.diffusion.cond_kind.uses_table() {
            return bad(format!(
                "diffusion: condition kind {} cannot represent held-out conditions",
                self.diffusion.cond_kind.name()
            ));
        }
        if self.generation.m == 0 {
            return bad("generation: m must be positive".into());
        }
        if self.generation.trajectory_seeds > self.generation.m
            || self.generation.trajectory_stride == 0
        {
            return bad(
                "generation: trajectory_seeds must be <= m and trajectory_stride positive".into(),
            );
        }
        if self.analysis.pca_components == 0 || self.analysis.interpolation_steps < 2 {
            return bad("analysis: need pca_components >= 1 and interpolation_steps >= 2".into());
        }
        let a = &self.ablation;
        if a.tasks == 0 || a.tasks > self.suite.trained_count() {
            return bad(format!(
                "ablation: tasks must be in 1..={}",
                self.suite.trained_count()
            ));
        }
        if a.dataset_sizes
            .iter()
            .any(|&n| n == 0 || n * h.stride > h.total_steps)
        {
            return bad(format!(
                "ablation: dataset_sizes {:?} must fit in harvest.total_steps",
                a.dataset_sizes
            ));
        }
        if a.layer_subsets
            .iter()
            .any(|s| s.is_empty() || s.iter().any(|&l| l > 1))
        {
            return bad(
                "ablation: layer_subsets must be non-empty lists of layer ids in 0..=1".into(),
            );
        }
        Ok(())
    }

    /// Configuration of one ablation level: the ablation task subset plus one changed field.
    pub fn ablation_level(
        &self,
        axis: AblationAxis,
        level: &AblationLevel,
    ) -> Result<ExperimentConfig> {
        let mut c = self.clone();
        c.suite = self.suite.truncated(self.ablation.tasks);
        match (axis, level) {
            (AblationAxis::DatasetSize, AblationLevel::DatasetSize(n)) => c.harvest.n = *n,
            (AblationAxis::NormMode, AblationLevel::NormMode(m)) => c.normalization.mode = *m,
            (AblationAxis::ConditionKind, AblationLevel::ConditionKind(k)) => {
                c.diffusion.cond_kind = *k
            }
            (AblationAxis::LayerSubset, AblationLevel::LayerSubset(l)) => {
                c.lora.generated_layers = l.clone()
            }
            _ => {
                return Err(Error::Config(format!(
                    "level {level} does not belong to axis {}",
                    axis.name()
                )))
            }
        }
        c.validate()?;
        Ok(c)
    }

    pub fn ablation_levels(&self, axis: AblationAxis) -> Vec<AblationLevel> {
        let a = &self.ablation;
        match axis {
            AblationAxis::DatasetSize => a
                .dataset_sizes
                .iter()
                .map(|&n| AblationLevel::DatasetSize(n))
                .collect(),
            AblationAxis::NormMode => a
                .norm_modes
                .iter()
                .map(|&m| AblationLevel::NormMode(m))
                .collect(),
            AblationAxis::ConditionKind => a
                .condition_kinds
                .iter()
                .map(|&k| AblationLevel::ConditionKind(k))
                .collect(),
            AblationAxis::LayerSubset => a
                .layer_subsets
                .iter()
                .map(|l| AblationLevel::LayerSubset(l.clone()))
                .collect(),
        }
    }
}

impl SuiteConfig {
    pub fn trained_count(&self) -> usize {
        match self {
            SuiteConfig::Blobs { phis, .. } => phis.len(),
            SuiteConfig::Sine { train_lambdas, .. } => train_lambdas.len(),
        }
    }

    pub fn has_held_out(&self) -> bool {
        matches!(self, SuiteConfig::Sine { held_out_lambdas, .. } if !held_out_lambdas.is_empty())
    }
}

pub(crate) fn hash_json(v: &serde_json::Value) -> String {
    let bytes = serde_json::to_vec(v).expect("json value serializes");
    Sha256::digest(&bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationAxis {
    DatasetSize,
    NormMode,
    ConditionKind,
    LayerSubset,
}

impl AblationAxis {
    pub const ALL: [AblationAxis; 4] = [
        AblationAxis::DatasetSize,
        AblationAxis::NormMode,
        AblationAxis::ConditionKind,
        AblationAxis::LayerSubset,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AblationAxis::DatasetSize => "dataset_size",
            AblationAxis::NormMode => "norm_mode",
            AblationAxis::ConditionKind => "condition_kind",
            AblationAxis::LayerSubset => "layer_subset",
        }
    }
}

impl std::str::FromStr for AblationAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AblationAxis::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation axis {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AblationLevel {
    DatasetSize(usize),
    NormMode(NormMode),
    ConditionKind(ConditionKind),
    LayerSubset(Vec<usize>),
}

impl std::fmt::Display for AblationLevel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            AblationLevel::DatasetSize(n) => write!(f, "{n}"),
            AblationLevel::NormMode(m) => f.write_str(m.name()),
            AblationLevel::ConditionKind(k) => f.write_str(k.name()),
            AblationLevel::LayerSubset(l) => {
                let ids: Vec<String> = l.iter().map(|i| i.to_string()).collect();
                write!(f, "{}", ids.join("-"))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
seed = 3

[suite]
family = "blobs"
phis = [0.0, 3.0]

[base]
steps = 10
batch = 8
lr = 0.01
train_size = 32

[lora]
rank = 2
alpha = 8.0

[harvest]
n = 4
stride = 2
total_steps = 10
batch = 8
optimizer = { kind = "adam", learning_rate = 0.001 }

[normalization]
mode = "task"

[autoencoder]
latent_dim = 8
channels = [4, 4]
kernel = 3
xi_scale = 0.001
lr = 0.001
steps = 5
batch = 4

[diffusion]
timesteps = 50
beta_start = 0.0001
beta_end = 0.02
channels = [4, 8]
kernel = 3
cond_dim = 8
time_dim = 8
cond_kind = "descriptor"
exemplars = 4
lr = 0.001
steps = 5
batch = 4

[generation]
m = 3
trajectory_seeds = 1
trajectory_stride = 10

[analysis]
pca_components = 2
interpolation_steps = 5

[ablation]
tasks = 2
dataset_sizes = [1, 4]
norm_modes = ["none", "task"]
condition_kinds = ["one_hot"]
layer_subsets = [[0], [0, 1]]
"#;

    #[test]
    fn parses_and_hashes_stably() {
        let a = ExperimentConfig::from_toml(MINIMAL).unwrap();
        let b = ExperimentConfig::from_toml(&a.to_toml().unwrap()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
        let mut c = a.clone();
        c.seed += 1;
        assert_ne!(a.hash(), c.hash());
    }

    #[test]
    fn rejects_bad_beta_range() {
        let text = MINIMAL.replace("beta_end = 0.02", "beta_end = 0.00001");
        assert!(matches!(
            ExperimentConfig::from_toml(&text),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn rejects_unknown_keys() {
        let text = MINIMAL.replace("seed = 3", "seed = 3\nsede = 4");
        assert!(matches!(
            ExperimentConfig::from_toml(&text),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn ablation_levels_change_one_field() {
        let cfg = ExperimentConfig::from_toml(MINIMAL).unwrap();
        for axis in AblationAxis::ALL {
            for level in cfg.ablation_levels(axis) {
                let c = cfg.ablation_level(axis, &level).unwrap();
                assert_eq!(c.seed, cfg.seed);
                assert_eq!(c.suite.trained_count(), 2);
                assert_eq!(c.diffusion.steps, cfg.diffusion.steps);
            }
        }
        let lvl = AblationLevel::NormMode(NormMode::None);
        assert!(cfg.ablation_level(AblationAxis::DatasetSize, &lvl).is_err());
    }

    #[test]
    fn sine_suite_orders_trained_first() {
        let suite = SuiteConfig::Sine {
            cond_a: SineEndpoint {
                amplitude: 0.5,
                phase: 0.0,
            },
            cond_b: SineEndpoint {
                amplitude: 2.0,
                phase: 1.0,
            },
            train_lambdas: vec![0.1, 0.9],
            held_out_lambdas: vec![0.5],
            train_size: 16,
            val_size: 16,
        };
        let e = suite.entries(1).unwrap();
        assert_eq!(
            e.iter().map(|x| x.trained).collect::<Vec<_>>(),
            [true, true, false]
        );
        assert_eq!(
            e[2].spec.condition,
            Condition::Sine {
                amplitude: 1.25,
                phase: 0.5
            }
        );
    }
}
