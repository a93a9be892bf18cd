//! Checkpoint datasets: invertible z-score normalization and `.pset` persistence.

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::container::{self, DATASET_MAGIC};
use crate::lora::{LayoutDescriptor, ParameterVector, Provenance};
use crate::numerics::OptimizerState;
use crate::tasks::{CheckpointSet, TaskSpec};
use crate::{Error, Result};

pub const DEFAULT_EPS: f32 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormMode {
    None,
    Batch,
    Task,
}

impl NormMode {
    pub fn name(self) -> &'static str {
        match self {
            NormMode::None => "none",
            NormMode::Batch => "batch",
            NormMode::Task => "task",
        }
    }
}

impl std::str::FromStr for NormMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(NormMode::None),
            "batch" => Ok(NormMode::Batch),
            "task" => Ok(NormMode::Task),
            _ => Err(Error::InvalidArgument(format!(
                "unknown normalization mode {s:?}"
            ))),
        }
    }
}

/// Per-coordinate mean and clamped population std.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    /// Task the stats belong to; `None` for pooled statistics.
    pub task_id: Option<usize>,
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
    pub eps: f32,
}

impl NormStats {
    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }

    fn compute<'a>(
        rows: impl Iterator<Item = &'a [f32]> + Clone,
        k: usize,
        eps: f32,
        task_id: Option<usize>,
    ) -> Result<Self> {
        let mut n = 0usize;
        let mut sum = vec![0.0f64; k];
        for r in rows.clone() {
            if r.len() != k {
                return Err(Error::Layout(format!(
                    "vector of length {} in a K={k} set",
                    r.len()
                )));
            }
            if r.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("normalization input".into()));
            }
            for (s, &v) in sum.iter_mut().zip(r) {
                *s += v as f64;
            }
            n += 1;
        }
        if n == 0 {
            return Err(Error::InvalidArgument(
                "cannot normalize an empty set".into(),
            ));
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
        let mut sq = vec![0.0f64; k];
        for r in rows {
            for ((q, &v), m) in sq.iter_mut().zip(r).zip(&mean) {
                *q += (v as f64 - m).powi(2);
            }
        }
        let std = sq
            .iter()
            .map(|q| ((q / n as f64).sqrt() as f32).max(eps))
            .collect();
        Ok(NormStats {
            task_id,
            mean: mean.into_iter().map(|m| m as f32).collect(),
            std,
            eps,
        })
    }

    pub fn apply(&self, v: &[f32]) -> Result<Vec<f32>> {
        self.check(v.len())?;
        Ok(v.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(&x, (&m, &s))| ((x as f64 - m as f64) / s as f64) as f32)
            .collect())
    }

    fn check(&self, k: usize) -> Result<()> {
        if k != self.len() {
            return Err(Error::Layout(format!(
                "vector length {k} does not match stats length {}",
                self.len()
            )));
        }
        Ok(())
    }
}

fn normalize_rows(stats: &NormStats, rows: &[ParameterVector]) -> Result<Vec<Vec<f32>>> {
    rows.iter().map(|v| stats.apply(v.values())).collect()
}

/// Z-scores one checkpoint set with its own statistics.
pub fn task_normalize(set: &CheckpointSet, eps: f32) -> Result<(Vec<Vec<f32>>, NormStats)> {
    task_normalize_as(set, eps, None)
}

fn task_normalize_as(
    set: &CheckpointSet,
    eps: f32,
    task_id: Option<usize>,
) -> Result<(Vec<Vec<f32>>, NormStats)> {
    let k = set.layout.total_length;
    let stats = NormStats::compute(set.vectors.iter().map(|v| v.values()), k, eps, task_id)?;
    Ok((normalize_rows(&stats, &set.vectors)?, stats))
}

/// Z-scores every set with statistics pooled across all of them.
pub fn batch_normalize(
    sets: &[&CheckpointSet],
    eps: f32,
) -> Result<(Vec<Vec<Vec<f32>>>, NormStats)> {
    let first = sets
        .first()
        .ok_or_else(|| Error::InvalidArgument("no sets to pool".into()))?;
    check_shared_layout(sets.iter().copied())?;
    let k = first.layout.total_length;
    let rows = sets
        .iter()
        .flat_map(|s| s.vectors.iter().map(|v| v.values()));
    let stats = NormStats::compute(rows, k, eps, None)?;
    let out = sets
        .iter()
        .map(|s| normalize_rows(&stats, &s.vectors))
        .collect::<Result<_>>()?;
    Ok((out, stats))
}

/// Inverts normalization; coordinates whose std was clamped come back as the mean.
pub fn denormalize(v: &[f32], stats: &NormStats) -> Result<Vec<f32>> {
    stats.check(v.len())?;
    Ok(v.iter()
        .zip(stats.mean.iter().zip(&stats.std))
        .map(|(&x, (&m, &s))| {
            if s <= stats.eps {
                m
            } else {
                ((x as f64) * s as f64 + m as f64) as f32
            }
        })
        .collect())
}

fn check_shared_layout<'a>(mut sets: impl Iterator<Item = &'a CheckpointSet>) -> Result<()> {
    let Some(first) = sets.next() else {
        return Ok(());
    };
    for s in sets {
        if *s.layout != *first.layout {
            return Err(Error::Layout(format!(
                "{} and {} use different layouts",
                first.task.name, s.task.name
            )));
        }
    }
    for s in std::iter::once(first) {
        if s.vectors.iter().any(|v| *v.layout() != s.layout) {
            return Err(Error::Layout(format!("{} mixes layouts", s.task.name)));
        }
    }
    Ok(())
}

/// Training corpus for the autoencoder and the denoiser.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamDataset {
    pub sets: Vec<CheckpointSet>,
    pub layout: Arc<LayoutDescriptor>,
    pub mode: NormMode,
    /// One entry per task in `task` mode, a single pooled entry in `batch` mode.
    pub stats: Vec<NormStats>,
    normalized: Vec<Vec<Vec<f32>>>,
}

impl ParamDataset {
    pub fn new(sets: Vec<CheckpointSet>, mode: NormMode, eps: f32) -> Result<Self> {
        let layout = sets
            .first()
            .map(|s| s.layout.clone())
            .ok_or_else(|| Error::InvalidArgument("dataset needs at least one task".into()))?;
        check_shared_layout(sets.iter())?;
        for s in &sets {
            if s.vectors.iter().any(|v| **v.layout() != *layout) {
                return Err(Error::Layout(format!(
                    "{} contains a vector with a foreign layout",
                    s.task.name
                )));
            }
        }
        let (stats, normalized) = match mode {
            NormMode::None => (
                vec![],
                sets.iter()
                    .map(|s| s.vectors.iter().map(|v| v.values().to_vec()).collect())
                    .collect(),
            ),
            NormMode::Task => {
                let mut stats = Vec::with_capacity(sets.len());
                let mut out = Vec::with_capacity(sets.len());
                for (i, s) in sets.iter().enumerate() {
                    let (n, st) = task_normalize_as(s, eps, Some(i))?;
                    out.push(n);
                    stats.push(st);
                }
                (stats, out)
            }
            NormMode::Batch => {
                let refs: Vec<&CheckpointSet> = sets.iter().collect();
                let (n, st) = batch_normalize(&refs, eps)?;
                (vec![st], n)
            }
        };
        Ok(ParamDataset {
            sets,
            layout,
            mode,
            stats,
            normalized,
        })
    }

    pub fn num_tasks(&self) -> usize {
        self.sets.len()
    }

    pub fn k(&self) -> usize {
        self.layout.total_length
    }

    pub fn normalized(&self, task: usize) -> Result<&[Vec<f32>]> {
        self.normalized
            .get(task)
            .map(|v| v.as_slice())
            .ok_or(Error::UnknownTask(task))
    }

    /// `(task, normalized vector)` pairs in task order.
    pub fn all_normalized(&self) -> impl Iterator<Item = (usize, &[f32])> {
        self.normalized
            .iter()
            .enumerate()
            .flat_map(|(t, vs)| vs.iter().map(move |v| (t, v.as_slice())))
    }

    pub fn stats_for(&self, task: usize) -> Result<Option<&NormStats>> {
        if task >= self.sets.len() {
            return Err(Error::UnknownTask(task));
        }
        Ok(match self.mode {
            NormMode::None => None,
            NormMode::Batch => self.stats.first(),
            NormMode::Task => self.stats.get(task),
        })
    }

    /// Maps a normalized vector of `task` back to raw weights.
    pub fn denormalize(&self, task: usize, v: &[f32]) -> Result<Vec<f32>> {
        match self.stats_for(task)? {
            Some(st) => denormalize(v, st),
            None => {
                if v.len() != self.k() {
                    return Err(Error::Layout(format!(
                        "vector length {} vs K={}",
                        v.len(),
                        self.k()
                    )));
                }
                Ok(v.to_vec())
            }
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let (header, payload) = self.to_parts();
        container::write(path, DATASET_MAGIC, &header, &payload)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (header, payload) = container::read::<DatasetHeader>(path, DATASET_MAGIC)?;
        Self::from_parts(header, payload)
    }

    fn to_parts(&self) -> (DatasetHeader, Vec<f32>) {
        let k = self.k();
        let mut payload = Vec::new();
        let mut tasks = Vec::new();
        for s in &self.sets {
            tasks.push(TaskEntry {
                spec: s.task.clone(),
                vector_offset: payload.len(),
                count: s.vectors.len(),
                steps: s.steps.clone(),
                stride: s.stride,
                optimizer: s.optimizer,
                train_metrics: s.train_metrics.clone(),
                provenance: s.vectors.iter().map(|v| v.provenance).collect(),
            });
            for v in &s.vectors {
                payload.extend_from_slice(v.values());
            }
        }
        let vector_count = payload.len() / k.max(1);
        let mut stats = Vec::new();
        for st in &self.stats {
            let mean_offset = payload.len();
            payload.extend_from_slice(&st.mean);
            let std_offset = payload.len();
            payload.extend_from_slice(&st.std);
            stats.push(StatsEntry {
                task_id: st.task_id,
                mean_offset,
                std_offset,
            });
        }
        let eps = self.stats.first().map_or(DEFAULT_EPS, |s| s.eps);
        let header = DatasetHeader {
            k,
            layout: (*self.layout).clone(),
            mode: self.mode,
            eps,
            vector_count,
            tasks,
            stats,
        };
        (header, payload)
    }

    fn from_parts(h: DatasetHeader, payload: Vec<f32>) -> Result<Self> {
        let k = h.k;
        if h.layout.total_length != k {
            return Err(Error::Header(format!(
                "K={k} but layout covers {}",
                h.layout.total_length
            )));
        }
        let expected = k * (h.vector_count + 2 * h.stats.len());
        if payload.len() != expected {
            return Err(Error::Truncated(format!(
                "payload has {} floats, header implies {expected}",
                payload.len()
            )));
        }
        let slice = |off: usize| -> Result<Vec<f32>> {
            payload
                .get(off..off + k)
                .map(|s| s.to_vec())
                .ok_or_else(|| Error::Header(format!("offset {off} outside payload")))
        };
        let layout = Arc::new(h.layout);
        let mut sets = Vec::with_capacity(h.tasks.len());
        for t in h.tasks {
            if t.provenance.len() != t.count
                || t.steps.len() != t.count
                || t.train_metrics.len() != t.count
            {
                return Err(Error::Header(format!(
                    "task {} has inconsistent per-vector fields",
                    t.spec.name
                )));
            }
            let vectors = (0..t.count)
                .map(|i| {
                    ParameterVector::new(
                        slice(t.vector_offset + i * k)?,
                        layout.clone(),
                        t.provenance[i],
                    )
                })
                .collect::<Result<_>>()?;
            sets.push(CheckpointSet {
                task: t.spec,
                layout: layout.clone(),
                vectors,
                steps: t.steps,
                stride: t.stride,
                optimizer: t.optimizer,
                train_metrics: t.train_metrics,
            });
        }
        let stats = h
            .stats
            .iter()
            .map(|s| {
                Ok(NormStats {
                    task_id: s.task_id,
                    mean: slice(s.mean_offset)?,
                    std: slice(s.std_offset)?,
                    eps: h.eps,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let ds = ParamDataset::new(sets, h.mode, h.eps)?;
        if ds.stats != stats {
            return Err(Error::Header(
                "stored normalization stats disagree with the vectors".into(),
            ));
        }
        Ok(ds)
    }
}

#[derive(Serialize, Deserialize)]
struct DatasetHeader {
    k: usize,
    layout: LayoutDescriptor,
    mode: NormMode,
    eps: f32,
    vector_count: usize,
    tasks: Vec<TaskEntry>,
    stats: Vec<StatsEntry>,
}

#[derive(Serialize, Deserialize)]
struct TaskEntry {
    spec: TaskSpec,
    vector_offset: usize,
    count: usize,
    steps: Vec<usize>,
    stride: usize,
    optimizer: OptimizerState,
    train_metrics: Vec<f64>,
    provenance: Vec<Provenance>,
}

#[derive(Serialize, Deserialize)]
struct StatsEntry {
    task_id: Option<usize>,
    mean_offset: usize,
    std_offset: usize,
}
