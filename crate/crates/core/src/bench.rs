//! Generation harness, baselines, and weight-space analyses.

use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::autoencoder::AeModel;
use crate::conddiff::{p_sample_batch, ConditionSpec, DenoiserModel};
use crate::config::{AblationAxis, AblationLevel};
use crate::container::write_atomic;
use crate::lora::{ParameterVector, Provenance};
use crate::paramstore::ParamDataset;
use crate::tasks::{evaluate, BaseModel, CheckpointSet, Condition, Split, Task};
use crate::{Error, Result};

/// Trained models needed to turn a condition into adapters.
pub struct Generator<'a> {
    pub ae: &'a AeModel,
    pub denoiser: &'a DenoiserModel,
    pub dataset: &'a ParamDataset,
}

impl Generator<'_> {
    /// Samples one adapter per seed: diffusion → inference decode → denormalize with the
    /// statistics of dataset task `stats_task`.
    pub fn generate_candidates(
        &self,
        cond: &ConditionSpec,
        stats_task: usize,
        seeds: &[u64],
    ) -> Result<Vec<ParameterVector>> {
        let (codes, _) = p_sample_batch(self.denoiser, cond, seeds, false)?;
        let refs: Vec<&[f32]> = codes.iter().map(|c| c.values.as_slice()).collect();
        self.ae
            .decode_batch(&refs)?
            .into_iter()
            .map(|v| {
                ParameterVector::new(
                    self.dataset.denormalize(stats_task, &v)?,
                    self.dataset.layout.clone(),
                    Provenance::Generated,
                )
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Baselines {
    /// Best validation metric among the harvested checkpoints.
    pub original_best: f64,
    pub soup: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimilaritySummary {
    pub min_l2: Vec<f64>,
    pub nn_index: Vec<usize>,
    /// Generated-to-training mean nearest-neighbour distance over the training set's own
    /// leave-one-out mean nearest-neighbour distance.
    pub nn_ratio: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationReport {
    pub task: String,
    pub condition: Condition,
    pub seen: bool,
    pub seeds: Vec<u64>,
    pub train_metrics: Vec<f64>,
    pub val_metrics: Vec<f64>,
    pub chosen: usize,
    pub chosen_val: f64,
    pub baselines: Option<Baselines>,
    pub similarity: Option<SimilaritySummary>,
    pub config_hash: String,
    pub seed: u64,
}

impl GenerationReport {
    pub fn m(&self) -> usize {
        self.seeds.len()
    }

    pub fn chosen_seed(&self) -> u64 {
        self.seeds[self.chosen]
    }
}

/// Evaluates every candidate on both splits and picks the train-split argmax; ties go to
/// the lowest seed.
pub fn best_of(
    candidates: &[ParameterVector],
    seeds: &[u64],
    base: &BaseModel,
    task: &Task,
) -> Result<GenerationReport> {
    if candidates.is_empty() || candidates.len() != seeds.len() {
        return Err(Error::InvalidArgument(format!(
            "{} candidates for {} seeds",
            candidates.len(),
            seeds.len()
        )));
    }
    let train = candidates
        .iter()
        .map(|c| evaluate(base, c, task, Split::Train))
        .collect::<Result<Vec<_>>>()?;
    let val = candidates
        .iter()
        .map(|c| evaluate(base, c, task, Split::Val))
        .collect::<Result<Vec<_>>>()?;
    let mut chosen = 0;
    for i in 1..train.len() {
        if train[i] > train[chosen] || (train[i] == train[chosen] && seeds[i] < seeds[chosen]) {
            chosen = i;
        }
    }
    Ok(GenerationReport {
        task: task.spec.name.clone(),
        condition: task.spec.condition,
        seen: true,
        seeds: seeds.to_vec(),
        chosen_val: val[chosen],
        train_metrics: train,
        val_metrics: val,
        chosen,
        baselines: None,
        similarity: None,
        config_hash: String::new(),
        seed: 0,
    })
}

/// Coordinatewise mean of the raw checkpoints.
pub fn model_soup(set: &CheckpointSet) -> Result<ParameterVector> {
    let first = set
        .vectors
        .first()
        .ok_or_else(|| Error::InvalidArgument("soup of an empty set".into()))?;
    let k = first.len();
    let mut acc = vec![0.0f64; k];
    for v in &set.vectors {
        if v.layout() != first.layout() {
            return Err(Error::Layout("soup over mixed layouts".into()));
        }
        for (a, &x) in acc.iter_mut().zip(v.values()) {
            *a += x as f64;
        }
    }
    let n = set.vectors.len() as f64;
    ParameterVector::new(
        acc.into_iter().map(|a| (a / n) as f32).collect(),
        first.layout().clone(),
        Provenance::Soup,
    )
}

pub fn baselines(set: &CheckpointSet, base: &BaseModel, task: &Task) -> Result<Baselines> {
    let original_best = set
        .vectors
        .iter()
        .map(|v| evaluate(base, v, task, Split::Val))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .fold(f64::NEG_INFINITY, f64::max);
    let soup = evaluate(base, &model_soup(set)?, task, Split::Val)?;
    Ok(Baselines {
        original_best,
        soup,
    })
}

fn l2(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| ((x - y) as f64).powi(2))
        .sum::<f64>()
        .sqrt()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Similarity {
    pub min_l2: f64,
    pub mean_l2: f64,
    pub nn_index: usize,
}

/// Euclidean distances from `generated` to every vector of `set`.
pub fn similarity(generated: &ParameterVector, set: &[ParameterVector]) -> Result<Similarity> {
    if set.is_empty() {
        return Err(Error::InvalidArgument(
            "similarity against an empty set".into(),
        ));
    }
    let mut best = (f64::INFINITY, 0);
    let mut sum = 0.0;
    for (i, v) in set.iter().enumerate() {
        if v.layout() != generated.layout() {
            return Err(Error::Layout("similarity across different layouts".into()));
        }
        let d = l2(generated.values(), v.values());
        sum += d;
        if d < best.0 {
            best = (d, i);
        }
    }
    Ok(Similarity {
        min_l2: best.0,
        mean_l2: sum / set.len() as f64,
        nn_index: best.1,
    })
}

/// Per-candidate nearest-neighbour distances and the novelty ratio against `set`.
pub fn similarity_summary(
    generated: &[ParameterVector],
    set: &[ParameterVector],
) -> Result<SimilaritySummary> {
    let sims = generated
        .iter()
        .map(|g| similarity(g, set))
        .collect::<Result<Vec<_>>>()?;
    let gen_nn = sims.iter().map(|s| s.min_l2).sum::<f64>() / sims.len().max(1) as f64;
    let train_nn = if set.len() < 2 {
        0.0
    } else {
        let mut total = 0.0;
        for (i, a) in set.iter().enumerate() {
            let nn = set
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != i)
                .map(|(_, b)| l2(a.values(), b.values()))
                .fold(f64::INFINITY, f64::min);
            total += nn;
        }
        total / set.len() as f64
    };
    Ok(SimilaritySummary {
        min_l2: sims.iter().map(|s| s.min_l2).collect(),
        nn_index: sims.iter().map(|s| s.nn_index).collect(),
        nn_ratio: if train_nn > 0.0 {
            gen_nn / train_nn
        } else {
            f64::INFINITY
        },
    })
}

/// `(1-λ)θ1 + λθ2`; the endpoints return the inputs bit for bit.
pub fn interpolate(
    a: &ParameterVector,
    b: &ParameterVector,
    lambda: f64,
) -> Result<ParameterVector> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::InvalidArgument(format!(
            "interpolation factor {lambda} outside [0, 1]"
        )));
    }
    if a.layout() != b.layout() {
        return Err(Error::Layout(
            "interpolating across different layouts".into(),
        ));
    }
    let values = if lambda == 0.0 {
        a.values().to_vec()
    } else if lambda == 1.0 {
        b.values().to_vec()
    } else {
        a.values()
            .iter()
            .zip(b.values())
            .map(|(&x, &y)| ((1.0 - lambda) * x as f64 + lambda * y as f64) as f32)
            .collect()
    };
    ParameterVector::new(values, a.layout().clone(), Provenance::Interpolated)
}

/// `steps` evenly spaced factors `i/(steps-1)`.
pub fn lambda_grid(steps: usize) -> Result<Vec<f64>> {
    match steps {
        0 => Err(Error::InvalidArgument(
            "need at least one interpolation step".into(),
        )),
        1 => Ok(vec![0.0]),
        _ => Ok((0..steps).map(|i| i as f64 / (steps - 1) as f64).collect()),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub lambda: f64,
    /// Metric on the target whose condition is blended by the same λ.
    pub metric_blend: f64,
    pub metric_a: f64,
    pub metric_b: f64,
    /// Grid λ of the blended target on which this mix scores best (ties to the lowest).
    pub realized_lambda: f64,
}

/// Interpolates between two adapters over `targets.len()` evenly spaced λ values;
/// `targets[i]` is the task blended at the i-th λ, so the first and last are the endpoints.
pub fn interpolation_sweep(
    theta_a: &ParameterVector,
    theta_b: &ParameterVector,
    base: &BaseModel,
    targets: &[Task],
) -> Result<Vec<SweepRow>> {
    let grid = lambda_grid(targets.len())?;
    grid.iter()
        .enumerate()
        .map(|(i, &lambda)| {
            let th = interpolate(theta_a, theta_b, lambda)?;
            let scores = targets
                .iter()
                .map(|t| evaluate(base, &th, t, Split::Val))
                .collect::<Result<Vec<_>>>()?;
            let best = (0..scores.len()).fold(0, |b, j| if scores[j] > scores[b] { j } else { b });
            Ok(SweepRow {
                lambda,
                metric_blend: scores[i],
                metric_a: scores[0],
                metric_b: scores[scores.len() - 1],
                realized_lambda: grid[best],
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeldOutRow {
    pub task: String,
    /// Raw condition parameters separated by `;`.
    pub condition: String,
    pub seen: bool,
    pub metric: f64,
    /// Trained condition closest in descriptor space, and its generated metric.
    pub nearest_trained: String,
    pub nearest_metric: f64,
}

/// Pairs each report with the nearest seen condition's report.
pub fn held_out_condition_eval(
    trained: &[GenerationReport],
    all: &[GenerationReport],
) -> Result<Vec<HeldOutRow>> {
    if trained.is_empty() {
        return Err(Error::InvalidArgument("no trained conditions".into()));
    }
    all.iter()
        .map(|r| {
            let d = r.condition.descriptor();
            let nearest = trained
                .iter()
                .min_by(|a, b| {
                    let da = l2(&a.condition.descriptor(), &d);
                    let db = l2(&b.condition.descriptor(), &d);
                    da.total_cmp(&db)
                })
                .expect("non-empty");
            Ok(HeldOutRow {
                task: r.task.clone(),
                condition: r
                    .condition
                    .params()
                    .iter()
                    .map(|p| p.to_string())
                    .collect::<Vec<_>>()
                    .join(";"),
                seen: r.seen,
                metric: r.chosen_val,
                nearest_trained: nearest.task.clone(),
                nearest_metric: nearest.chosen_val,
            })
        })
        .collect()
}

/// Spearman rank correlation with average ranks for ties; `NaN` if either side is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for &k in &idx[i..=j] {
                r[k] = avg;
            }
            i = j + 1;
        }
        r
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pca {
    pub mean: Vec<f64>,
    /// Top-k unit directions, sign-fixed so the largest-magnitude entry is positive.
    pub components: Vec<Vec<f64>>,
    /// All covariance eigenvalues, descending.
    pub eigenvalues: Vec<f64>,
    pub explained_ratio: Vec<f64>,
    pub coords: Vec<Vec<f64>>,
}

impl Pca {
    /// Mean squared distance between each point and its top-k reconstruction.
    pub fn reconstruction_error(&self, data: &[Vec<f64>]) -> f64 {
        let mut total = 0.0;
        for (x, c) in data.iter().zip(&self.coords) {
            let mut r = self.mean.clone();
            for (comp, &a) in self.components.iter().zip(c) {
                for (ri, &ci) in r.iter_mut().zip(comp) {
                    *ri += a * ci;
                }
            }
            total += x.iter().zip(&r).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        }
        total / data.len() as f64
    }
}

/// Principal components from the eigen-decomposition of the population covariance.
pub fn pca_project(data: &[Vec<f64>], k: usize) -> Result<Pca> {
    let n = data.len();
    let d = data.first().map_or(0, |r| r.len());
    if k == 0 || k > d {
        return Err(Error::InvalidArgument(format!(
            "cannot take {k} components of {d}-dim data"
        )));
    }
    if n < k + 1 {
        return Err(Error::InvalidArgument(format!(
            "{n} points are too few for {k} components"
        )));
    }
    if data.iter().any(|r| r.len() != d) {
        return Err(Error::shape("pca_project", "rows of different lengths"));
    }
    let mut mean = vec![0.0; d];
    for r in data {
        for (m, &v) in mean.iter_mut().zip(r) {
            *m += v / n as f64;
        }
    }
    let centered = DMatrix::from_fn(n, d, |i, j| data[i][j] - mean[j]);
    let cov = centered.transpose() * &centered / n as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let eigenvalues: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i].max(0.0)).collect();
    let total: f64 = eigenvalues.iter().sum();
    let components: Vec<Vec<f64>> = order[..k]
        .iter()
        .map(|&i| {
            let mut c: Vec<f64> = eig.eigenvectors.column(i).iter().copied().collect();
            let lead = c
                .iter()
                .copied()
                .fold(0.0f64, |acc, v| if v.abs() > acc.abs() { v } else { acc });
            if lead < 0.0 {
                c.iter_mut().for_each(|v| *v = -*v);
            }
            c
        })
        .collect();
    let coords = (0..n)
        .map(|i| {
            components
                .iter()
                .map(|c| {
                    c.iter()
                        .zip(centered.row(i).iter())
                        .map(|(a, b)| a * b)
                        .sum()
                })
                .collect()
        })
        .collect();
    let explained_ratio = eigenvalues[..k]
        .iter()
        .map(|e| if total > 0.0 { e / total } else { 0.0 })
        .collect();
    Ok(Pca {
        mean,
        components,
        eigenvalues,
        explained_ratio,
        coords,
    })
}

/// Writes serializable rows as CSV with a header row, atomically.
pub fn write_csv<R: Serialize>(path: &Path, rows: &[R]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)
            .map_err(|e| Error::Header(format!("csv: {e}")))?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::Header(format!("csv: {e}")))?;
    write_atomic(path, &bytes)
}

/// Writes a CSV from explicit header and string rows, atomically.
pub fn write_table(path: &Path, header: &[String], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| Error::Header(format!("csv: {e}"));
    w.write_record(header).map_err(err)?;
    for r in rows {
        w.write_record(r).map_err(err)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::Header(format!("csv: {e}")))?;
    write_atomic(path, &bytes)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

/// Copy of `full` with the coordinates in `ranges` overwritten, in order, by `part`.
pub fn splice(
    full: &ParameterVector,
    ranges: &[std::ops::Range<usize>],
    part: &[f32],
) -> Result<ParameterVector> {
    let mut v = full.values().to_vec();
    let mut at = 0;
    for r in ranges {
        let src = part
            .get(at..at + r.len())
            .ok_or_else(|| Error::Layout("splice part too short".into()))?;
        v.get_mut(r.clone())
            .ok_or_else(|| Error::Layout("splice range outside vector".into()))?
            .copy_from_slice(src);
        at += r.len();
    }
    if at != part.len() {
        return Err(Error::Layout(format!(
            "splice part has {} values, ranges cover {at}",
            part.len()
        )));
    }
    ParameterVector::new(v, full.layout().clone(), Provenance::Generated)
}

/// One ablation level: its run directory and reports, or the error that stopped it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRun {
    pub level: AblationLevel,
    pub config_hash: String,
    pub run_dir: String,
    pub reports: Vec<GenerationReport>,
    pub error: Option<String>,
}

impl AblationRun {
    pub fn failed(
        level: AblationLevel,
        config_hash: String,
        run_dir: String,
        error: String,
    ) -> Self {
        AblationRun {
            level,
            config_hash,
            run_dir,
            reports: Vec::new(),
            error: Some(error),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub axis: String,
    pub level: String,
    pub task: String,
    pub chosen_val: Option<f64>,
    pub original_best: Option<f64>,
    pub soup: Option<f64>,
    pub config_hash: String,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationGrid {
    pub axis: AblationAxis,
    pub runs: Vec<AblationRun>,
}

impl AblationGrid {
    /// One row per (level, task); failed levels contribute one row carrying the error.
    pub fn rows(&self) -> Vec<AblationRow> {
        let mut out = Vec::new();
        for r in &self.runs {
            let row = |task: String, rep: Option<&GenerationReport>| AblationRow {
                axis: self.axis.name().into(),
                level: r.level.to_string(),
                task,
                chosen_val: rep.map(|x| x.chosen_val),
                original_best: rep
                    .and_then(|x| x.baselines.as_ref())
                    .map(|b| b.original_best),
                soup: rep.and_then(|x| x.baselines.as_ref()).map(|b| b.soup),
                config_hash: r.config_hash.clone(),
                error: r.error.clone(),
            };
            if r.reports.is_empty() {
                out.push(row(String::new(), None));
            }
            for rep in &r.reports {
                out.push(row(rep.task.clone(), Some(rep)));
            }
        }
        out
    }

    /// Chosen val metric of `task` at `level`, if that level succeeded.
    pub fn metric(&self, level: &AblationLevel, task: &str) -> Option<f64> {
        self.runs
            .iter()
            .find(|r| &r.level == level)?
            .reports
            .iter()
            .find(|r| r.task == task)
            .map(|r| r.chosen_val)
    }
}
