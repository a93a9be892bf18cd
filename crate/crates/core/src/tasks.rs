//! Toy task families, the frozen base network, LoRA fine-tuning and
//! checkpoint harvesting.
//!
//! Two families cover the two conditioning regimes:
//! * `blobs`: classification of Gaussian blobs placed on a circle at angles
//!   `phi + 2πj/K`; the condition is categorical in practice (which rotation).
//! * `sine`: regression of `a·sin(x + phi)`; the condition is continuous.

use std::f64::consts::PI;
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::lora::{
    self, AdaptedMatrix, LayoutDescriptor, LoraAdapter, LoraLayer, ParameterVector, Provenance,
};
use crate::numerics::{init, Array, Graph, Optimizer, OptimizerState, ParamSet, Scalar, Var};
use crate::rng::{rng, split};
use crate::{Error, Result};

/// Hidden width of the base network.
pub const HIDDEN: usize = 32;
/// Metric reported when a model produces non-finite outputs.
pub const METRIC_FAILURE: f64 = -1.0e9;
pub const MAX_CLASSES: usize = 8;
const SINE_NOISE_STD: f64 = 0.01;
const A_INIT_STD: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Blobs,
    Sine,
}

/// Raw task condition.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "lowercase")]
pub enum Condition {
    Blobs {
        phi: f64,
        radius: f64,
        classes: usize,
    },
    Sine {
        amplitude: f64,
        phase: f64,
    },
}

impl Condition {
    pub fn family(&self) -> Family {
        match self {
            Condition::Blobs { .. } => Family::Blobs,
            Condition::Sine { .. } => Family::Sine,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            Condition::Blobs {
                phi,
                radius,
                classes,
            } => {
                (0.0..2.0 * PI).contains(&phi)
                    && radius > 0.0
                    && radius <= 10.0
                    && (2..=MAX_CLASSES).contains(&classes)
            }
            Condition::Sine { amplitude, phase } => {
                (0.0..=5.0).contains(&amplitude) && (0.0..2.0 * PI).contains(&phase)
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!(
                "condition out of bounds: {self:?}"
            )))
        }
    }

    /// Raw condition parameters as listed in the task metadata.
    pub fn params(&self) -> Vec<f64> {
        match *self {
            Condition::Blobs {
                phi,
                radius,
                classes,
            } => vec![phi, radius, classes as f64],
            Condition::Sine { amplitude, phase } => vec![amplitude, phase],
        }
    }

    /// Continuous descriptor fed to condition projectors; angles enter as (cos, sin).
    pub fn descriptor(&self) -> Vec<f32> {
        match *self {
            Condition::Blobs {
                phi,
                radius,
                classes,
            } => {
                vec![
                    phi.cos() as f32,
                    phi.sin() as f32,
                    radius as f32,
                    classes as f32,
                ]
            }
            Condition::Sine { amplitude, phase } => {
                vec![amplitude as f32, phase.cos() as f32, phase.sin() as f32]
            }
        }
    }

    /// Linear blend of two conditions of the same family (angles blended linearly).
    pub fn blend(&self, other: &Condition, lambda: f64) -> Result<Condition> {
        let mix = |a: f64, b: f64| (1.0 - lambda) * a + lambda * b;
        match (*self, *other) {
            (
                Condition::Sine {
                    amplitude: a1,
                    phase: p1,
                },
                Condition::Sine {
                    amplitude: a2,
                    phase: p2,
                },
            ) => Ok(Condition::Sine {
                amplitude: mix(a1, a2),
                phase: mix(p1, p2),
            }),
            (
                Condition::Blobs {
                    phi: f1,
                    radius: r1,
                    classes: k1,
                },
                Condition::Blobs {
                    phi: f2,
                    radius: r2,
                    classes: k2,
                },
            ) if k1 == k2 => Ok(Condition::Blobs {
                phi: mix(f1, f2),
                radius: mix(r1, r2),
                classes: k1,
            }),
            _ => Err(Error::InvalidArgument(
                "cannot blend conditions of different kinds".into(),
            )),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub name: String,
    pub condition: Condition,
    pub seed: u64,
    pub train_size: usize,
    pub val_size: usize,
    /// Blob standard deviation (blobs only).
    #[serde(default = "default_blob_std")]
    pub blob_std: f64,
}

fn default_blob_std() -> f64 {
    0.3
}

impl TaskSpec {
    pub fn family(&self) -> Family {
        self.condition.family()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Targets {
    Labels(Vec<usize>),
    Values(Vec<f32>),
}

impl Targets {
    fn len(&self) -> usize {
        match self {
            Targets::Labels(v) => v.len(),
            Targets::Values(v) => v.len(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SplitData {
    /// `(n, input_dim)`
    pub x: Array<f32>,
    pub y: Targets,
}

/// A task with its generated splits.
#[derive(Clone, Debug, PartialEq)]
pub struct Task {
    pub spec: TaskSpec,
    pub train: SplitData,
    pub val: SplitData,
}

impl Task {
    pub fn split(&self, s: Split) -> &SplitData {
        match s {
            Split::Train => &self.train,
            Split::Val => &self.val,
        }
    }

    /// First `m` training points encoded as `[x..., y-encoding...]` rows.
    pub fn exemplars(&self, m: usize) -> Vec<Vec<f32>> {
        let m = m.min(self.train.y.len());
        let d = self.train.x.shape()[1];
        (0..m)
            .map(|i| {
                let mut row = self.train.x.data()[i * d..(i + 1) * d].to_vec();
                match &self.train.y {
                    Targets::Labels(l) => {
                        let mut oh = vec![0.0; MAX_CLASSES];
                        oh[l[i]] = 1.0;
                        row.extend(oh);
                    }
                    Targets::Values(v) => row.push(v[i]),
                }
                row
            })
            .collect()
    }
}

pub fn exemplar_dim(family: Family) -> usize {
    match family {
        Family::Blobs => 2 + MAX_CLASSES,
        Family::Sine => 2,
    }
}

pub fn descriptor_dim(family: Family) -> usize {
    match family {
        Family::Blobs => 4,
        Family::Sine => 3,
    }
}

fn gen_split(spec: &TaskSpec, n: usize, seed: u64) -> SplitData {
    let mut r = rng(seed);
    match spec.condition {
        Condition::Blobs {
            phi,
            radius,
            classes,
        } => {
            let noise = Normal::new(0.0, spec.blob_std).expect("blob std > 0");
            let mut x = Vec::with_capacity(2 * n);
            let mut y = Vec::with_capacity(n);
            for i in 0..n {
                let j = i % classes;
                let ang = phi + 2.0 * PI * j as f64 / classes as f64;
                x.push((radius * ang.cos() + noise.sample(&mut r)) as f32);
                x.push((radius * ang.sin() + noise.sample(&mut r)) as f32);
                y.push(j);
            }
            SplitData {
                x: Array::from_vec(&[n, 2], x).unwrap(),
                y: Targets::Labels(y),
            }
        }
        Condition::Sine { amplitude, phase } => {
            let ux = Uniform::new_inclusive(-PI, PI).unwrap();
            let noise = Normal::new(0.0, SINE_NOISE_STD).unwrap();
            let mut x = Vec::with_capacity(n);
            let mut y = Vec::with_capacity(n);
            for _ in 0..n {
                let xi = ux.sample(&mut r);
                x.push(xi as f32);
                y.push((amplitude * (xi + phase).sin() + noise.sample(&mut r)) as f32);
            }
            SplitData {
                x: Array::from_vec(&[n, 1], x).unwrap(),
                y: Targets::Values(y),
            }
        }
    }
}

/// Generates the train and validation splits of a task. Deterministic in `spec.seed`.
pub fn make_task(spec: TaskSpec) -> Result<Task> {
    spec.condition.validate()?;
    if spec.train_size == 0 || spec.val_size == 0 {
        return Err(Error::InvalidArgument(
            "task splits must be non-empty".into(),
        ));
    }
    if spec.family() == Family::Blobs && !(spec.blob_std > 0.0) {
        return Err(Error::InvalidArgument("blob_std must be positive".into()));
    }
    let train = gen_split(&spec, spec.train_size, split(spec.seed, 0));
    let val = gen_split(&spec, spec.val_size, split(spec.seed, 1));
    Ok(Task { spec, train, val })
}

/// Frozen two-layer tanh MLP. Weight matrices are stored `out × in`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaseModel {
    pub family: Family,
    pub input_dim: usize,
    pub hidden: usize,
    pub output_dim: usize,
    pub w0: Array<f32>,
    pub b0: Array<f32>,
    pub w1: Array<f32>,
    pub b1: Array<f32>,
}

impl BaseModel {
    pub fn adapted_matrices(&self) -> Vec<AdaptedMatrix> {
        vec![
            AdaptedMatrix {
                layer_id: 0,
                d: self.hidden,
                k: self.input_dim,
            },
            AdaptedMatrix {
                layer_id: 1,
                d: self.output_dim,
                k: self.hidden,
            },
        ]
    }

    pub fn layout(&self, rank: usize, alpha: f64) -> Result<LayoutDescriptor> {
        LayoutDescriptor::new(rank, alpha, &self.adapted_matrices())
    }

    fn weight(&self, layer_id: usize) -> &Array<f32> {
        if layer_id == 0 {
            &self.w0
        } else {
            &self.w1
        }
    }

    /// Weights after merging `adapter` (layers it does not cover stay frozen).
    pub fn merged(&self, adapter: &LoraAdapter) -> Result<(Array<f32>, Array<f32>)> {
        let mut ws = [self.w0.clone(), self.w1.clone()];
        for l in &adapter.layers {
            if l.layer_id > 1 {
                return Err(Error::Layout(format!("base has no layer {}", l.layer_id)));
            }
            ws[l.layer_id] = lora::merge(self.weight(l.layer_id), l, adapter.alpha, adapter.rank)?;
        }
        let [w0, w1] = ws;
        Ok((w0, w1))
    }

    /// Plain forward pass with explicit weights: `(n, in)` → `(n, out)`.
    pub fn forward_with(&self, w0: &Array<f32>, w1: &Array<f32>, x: &Array<f32>) -> Vec<f32> {
        let n = x.shape()[0];
        let mut out = vec![0.0f32; n * self.output_dim];
        let mut h = vec![0.0f32; self.hidden];
        for i in 0..n {
            let xi = x.row(i);
            for (j, hj) in h.iter_mut().enumerate() {
                let s: f32 = w0.row(j).iter().zip(xi).map(|(a, b)| a * b).sum();
                *hj = (s + self.b0.data()[j]).tanh();
            }
            for o in 0..self.output_dim {
                let s: f32 = w1.row(o).iter().zip(&h).map(|(a, b)| a * b).sum();
                out[i * self.output_dim + o] = s + self.b1.data()[o];
            }
        }
        out
    }

    /// Records the adapted forward pass on a graph; `adapter` holds `[A0, B0, A1, B1, ...]`
    /// in layout order.
    pub fn forward_graph<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        layout: &LayoutDescriptor,
        adapter: &[Var],
        x: Var,
    ) -> Result<Var> {
        let scale = layout.alpha / layout.rank as f64;
        let mut ws = [g.input(self.w0.cast()), g.input(self.w1.cast())];
        for (i, pair) in layout.entries.chunks(2).enumerate() {
            let id = pair[0].layer_id;
            let ba = g.matmul(adapter[2 * i + 1], adapter[2 * i])?;
            let ba = g.scale(ba, scale);
            ws[id] = g.add(ws[id], ba)?;
        }
        let b0 = g.input(self.b0.cast());
        let b1 = g.input(self.b1.cast());
        let w0t = g.transpose(ws[0])?;
        let h = g.matmul(x, w0t)?;
        let h = g.add_row_bias(h, b0)?;
        let h = g.tanh(h);
        let w1t = g.transpose(ws[1])?;
        let o = g.matmul(h, w1t)?;
        g.add_row_bias(o, b1)
    }
}

fn metric(family: Family, out: &[f32], y: &Targets, out_dim: usize) -> f64 {
    if out.iter().any(|v| !v.is_finite()) {
        return METRIC_FAILURE;
    }
    match (family, y) {
        (Family::Blobs, Targets::Labels(labels)) => {
            let correct = labels
                .iter()
                .enumerate()
                .filter(|&(i, &l)| {
                    let row = &out[i * out_dim..(i + 1) * out_dim];
                    let mut best = 0;
                    for j in 1..out_dim {
                        if row[j] > row[best] {
                            best = j;
                        }
                    }
                    best == l
                })
                .count();
            correct as f64 / labels.len() as f64
        }
        (Family::Sine, Targets::Values(v)) => {
            let mse: f64 = out
                .iter()
                .zip(v)
                .map(|(&p, &t)| ((p - t) as f64).powi(2))
                .sum::<f64>()
                / v.len() as f64;
            -mse
        }
        _ => METRIC_FAILURE,
    }
}

pub fn is_failure(m: f64) -> bool {
    m <= METRIC_FAILURE
}

/// Metric of the frozen base without any adapter.
pub fn evaluate_base(base: &BaseModel, task: &Task, split: Split) -> f64 {
    let d = task.split(split);
    let out = base.forward_with(&base.w0, &base.w1, &d.x);
    metric(base.family, &out, &d.y, base.output_dim)
}

pub fn evaluate_adapter(
    base: &BaseModel,
    adapter: &LoraAdapter,
    task: &Task,
    split: Split,
) -> Result<f64> {
    let (w0, w1) = base.merged(adapter)?;
    let d = task.split(split);
    let out = base.forward_with(&w0, &w1, &d.x);
    Ok(metric(base.family, &out, &d.y, base.output_dim))
}

/// Accuracy (blobs) or negative MSE (sine) of the base with `vector` merged in.
pub fn evaluate(
    base: &BaseModel,
    vector: &ParameterVector,
    task: &Task,
    split: Split,
) -> Result<f64> {
    let adapter = lora::unflatten(vector, vector.layout())?;
    evaluate_adapter(base, &adapter, task, split)
}

fn loss<T: Scalar>(
    g: &mut Graph<T>,
    family: Family,
    out: Var,
    y: &Targets,
    idx: &[usize],
) -> Result<Var> {
    match (family, y) {
        (Family::Blobs, Targets::Labels(l)) => {
            let labels: Vec<usize> = idx.iter().map(|&i| l[i]).collect();
            g.softmax_cross_entropy(out, &labels)
        }
        (Family::Sine, Targets::Values(v)) => {
            let t: Vec<T> = idx.iter().map(|&i| T::of(v[i] as f64)).collect();
            let t = g.input(Array::from_vec(&[idx.len(), 1], t)?);
            g.mse(out, t)
        }
        _ => Err(Error::InvalidArgument("targets do not match family".into())),
    }
}

/// Fine-tuning objective on the train rows `idx`: cross-entropy (blobs) or MSE (sine)
/// of the base with the adapter `[A0, B0, A1, B1, ...]` merged in.
pub fn finetune_loss_graph<T: Scalar>(
    g: &mut Graph<T>,
    base: &BaseModel,
    layout: &LayoutDescriptor,
    adapter: &[Var],
    task: &Task,
    idx: &[usize],
) -> Result<Var> {
    let x = g.input(batch_x(&task.train.x, idx).cast());
    let out = base.forward_graph(g, layout, adapter, x)?;
    loss(g, base.family, out, &task.train.y, idx)
}

fn batch_x(x: &Array<f32>, idx: &[usize]) -> Array<f32> {
    let d = x.shape()[1];
    let data = idx.iter().flat_map(|&i| x.row(i).iter().copied()).collect();
    Array::from_vec(&[idx.len(), d], data).unwrap()
}

/// Neutral condition the base network is pretrained on.
pub fn neutral_condition(family: Family, classes: usize) -> Condition {
    match family {
        Family::Blobs => Condition::Blobs {
            phi: 0.0,
            radius: 2.0,
            classes,
        },
        Family::Sine => Condition::Sine {
            amplitude: 1.0,
            phase: 0.0,
        },
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub train_size: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 1500,
            batch: 64,
            lr: 1e-2,
            train_size: 512,
        }
    }
}

/// Trains the full MLP on the neutral task of `family`, then returns it frozen.
pub fn pretrain_base(
    family: Family,
    classes: usize,
    seed: u64,
    cfg: &PretrainConfig,
) -> Result<BaseModel> {
    let cond = neutral_condition(family, classes);
    let task = make_task(TaskSpec {
        name: "neutral".into(),
        condition: cond,
        seed: split(seed, 0),
        train_size: cfg.train_size,
        val_size: 64,
        blob_std: default_blob_std(),
    })?;
    let (input_dim, output_dim) = match family {
        Family::Blobs => (2, classes),
        Family::Sine => (1, 1),
    };
    let mut r = rng(split(seed, 1));
    let mut ps = ParamSet::<f32>::new();
    ps.add(
        "w0",
        init::fan_in_uniform(&mut r, &[HIDDEN, input_dim], input_dim),
    );
    ps.add("b0", init::fan_in_uniform(&mut r, &[HIDDEN], input_dim));
    ps.add(
        "w1",
        init::fan_in_uniform(&mut r, &[output_dim, HIDDEN], HIDDEN),
    );
    ps.add("b1", init::fan_in_uniform(&mut r, &[output_dim], HIDDEN));
    let mut opt = Optimizer::new(OptimizerState::adam(cfg.lr), &ps);
    let n = task.train.y.len();
    for step in 0..cfg.steps {
        let idx: Vec<usize> = (0..cfg.batch).map(|_| r.random_range(0..n)).collect();
        let mut g = Graph::new();
        let v = ps.bind(&mut g);
        let x = g.input(batch_x(&task.train.x, &idx));
        let w0t = g.transpose(v[0])?;
        let h = g.matmul(x, w0t)?;
        let h = g.add_row_bias(h, v[1])?;
        let h = g.tanh(h);
        let w1t = g.transpose(v[2])?;
        let o = g.matmul(h, w1t)?;
        let o = g.add_row_bias(o, v[3])?;
        let l = loss(&mut g, family, o, &task.train.y, &idx)?;
        if !g.value(l).item().is_finite() {
            return Err(Error::Diverged {
                step,
                what: "base pretraining loss".into(),
            });
        }
        let grads = g.backward(l)?;
        let gs = ps.collect_grads(&grads, &v);
        opt.step(&mut ps, &gs)?;
    }
    Ok(BaseModel {
        family,
        input_dim,
        hidden: HIDDEN,
        output_dim,
        w0: ps.get(0).clone(),
        b0: ps.get(1).clone(),
        w1: ps.get(2).clone(),
        b1: ps.get(3).clone(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneConfig {
    pub rank: usize,
    pub alpha: f64,
    pub optimizer: OptimizerState,
    pub total_steps: usize,
    pub batch: usize,
    /// Number of checkpoints kept.
    pub n: usize,
    /// Steps between kept checkpoints.
    pub stride: usize,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            rank: 2,
            alpha: 8.0,
            optimizer: OptimizerState::adam(1e-3),
            total_steps: 2000,
            batch: 64,
            n: 64,
            stride: 10,
        }
    }
}

/// The harvested training set of one task.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointSet {
    pub task: TaskSpec,
    pub layout: Arc<LayoutDescriptor>,
    pub vectors: Vec<ParameterVector>,
    /// Training step (1-based) at which each vector was recorded.
    pub steps: Vec<usize>,
    pub stride: usize,
    pub optimizer: OptimizerState,
    pub train_metrics: Vec<f64>,
}

impl CheckpointSet {
    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    /// The last `n` checkpoints (same stride, later window).
    pub fn tail(&self, n: usize) -> Result<CheckpointSet> {
        if n == 0 || n > self.len() {
            return Err(Error::InvalidArgument(format!(
                "cannot keep {n} of {} checkpoints",
                self.len()
            )));
        }
        let k = self.len() - n;
        Ok(CheckpointSet {
            vectors: self.vectors[k..].to_vec(),
            steps: self.steps[k..].to_vec(),
            train_metrics: self.train_metrics[k..].to_vec(),
            ..self.clone()
        })
    }
}

/// LoRA-only fine-tuning of `base` on `task`, keeping one flattened checkpoint
/// every `stride` steps over the final `n·stride` steps.
pub fn finetune_collect(
    base: &BaseModel,
    task: &Task,
    cfg: &FinetuneConfig,
    seed: u64,
) -> Result<CheckpointSet> {
    if cfg.n == 0 || cfg.stride == 0 || cfg.total_steps < cfg.n * cfg.stride {
        return Err(Error::InvalidArgument(format!(
            "need total_steps >= n*stride with n, stride >= 1 (got {} < {}*{})",
            cfg.total_steps, cfg.n, cfg.stride
        )));
    }
    if task.spec.family() != base.family {
        return Err(Error::InvalidArgument(
            "task family does not match base model".into(),
        ));
    }
    let layout = Arc::new(base.layout(cfg.rank, cfg.alpha)?);
    let mut r = rng(seed);
    let mut ps = ParamSet::<f32>::new();
    for e in &layout.entries {
        let v = match e.role {
            lora::MatrixRole::A => init::normal(&mut r, &[e.rows, e.cols], A_INIT_STD),
            lora::MatrixRole::B => Array::zeros(&[e.rows, e.cols]),
        };
        ps.add(format!("{:?}{}", e.role, e.layer_id), v);
    }
    let mut opt = Optimizer::new(cfg.optimizer, &ps);
    let first_kept = cfg.total_steps - (cfg.n - 1) * cfg.stride;
    let mut set = CheckpointSet {
        task: task.spec.clone(),
        layout: layout.clone(),
        vectors: Vec::with_capacity(cfg.n),
        steps: Vec::with_capacity(cfg.n),
        stride: cfg.stride,
        optimizer: cfg.optimizer,
        train_metrics: Vec::with_capacity(cfg.n),
    };
    let n = task.train.y.len();
    for step in 1..=cfg.total_steps {
        let idx: Vec<usize> = (0..cfg.batch).map(|_| r.random_range(0..n)).collect();
        let mut g = Graph::new();
        let v = ps.bind(&mut g);
        let l = finetune_loss_graph(&mut g, base, &layout, &v, task, &idx)?;
        if !g.value(l).item().is_finite() {
            return Err(Error::Diverged {
                step,
                what: format!(
                    "fine-tune loss on {} ({} checkpoints recorded)",
                    task.spec.name,
                    set.vectors.len()
                ),
            });
        }
        let grads = g.backward(l)?;
        let gs = ps.collect_grads(&grads, &v);
        opt.step(&mut ps, &gs)?;
        if step >= first_kept && (step - first_kept).is_multiple_of(cfg.stride) {
            let pv = ParameterVector::new(ps.flat(), layout.clone(), Provenance::Harvested)?;
            let m = evaluate(base, &pv, task, Split::Train)?;
            set.vectors.push(pv);
            set.steps.push(step);
            set.train_metrics.push(m);
        }
    }
    Ok(set)
}

/// Adapter built from per-layer matrices, for callers that hold `A`/`B` directly.
pub fn adapter_from_layers(rank: usize, alpha: f64, layers: Vec<LoraLayer>) -> LoraAdapter {
    LoraAdapter {
        rank,
        alpha,
        layers,
    }
}
