use std::collections::HashMap;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::condition::{CondInputs, ConditionEmbedding, ConditionKind, ConditionSpec};
use super::schedule::{make_schedule, q_sample, timestep_embedding, NoiseSchedule, ScheduleParams};
use crate::container::{self, DENOISER_MAGIC};
use crate::numerics::{
    cosine_lr, init, Array, ConvSpec, Graph, Optimizer, OptimizerState, ParamSet, Scalar, Var,
};
use crate::rng::{rng, EpochSampler};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiffConfig {
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub channels: Vec<usize>,
    pub kernel: usize,
    pub cond_dim: usize,
    pub time_dim: usize,
    pub cond_kind: ConditionKind,
    pub exemplars: usize,
    pub lr: f64,
    pub steps: usize,
    pub batch: usize,
}

impl Default for DiffConfig {
    fn default() -> Self {
        Self {
            timesteps: 1000,
            beta_start: 1e-4,
            beta_end: 2e-2,
            channels: vec![32, 64, 128],
            kernel: 3,
            cond_dim: 64,
            time_dim: 64,
            cond_kind: ConditionKind::Descriptor,
            exemplars: 16,
            lr: 5e-4,
            steps: 10000,
            batch: 64,
        }
    }
}

impl DiffConfig {
    pub fn validate(&self, latent_dim: usize) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("diffusion: {m}")));
        make_schedule(self.timesteps, self.beta_start, self.beta_end)
            .map_err(|e| Error::Config(format!("diffusion: {e}")))?;
        if self.channels.len() < 2 || self.channels.contains(&0) {
            return bad("channels needs at least two positive widths".into());
        }
        let m = 1usize << (self.channels.len() - 1);
        if !latent_dim.is_multiple_of(m) {
            return bad(format!("latent dim {latent_dim} not divisible by {m}"));
        }
        if self.kernel.is_multiple_of(2) {
            return bad("kernel must be odd".into());
        }
        if self.cond_dim == 0 || self.time_dim == 0 || !self.time_dim.is_multiple_of(2) {
            return bad("cond_dim must be positive and time_dim positive and even".into());
        }
        if self.cond_kind == ConditionKind::DescriptorPlusExemplars && self.exemplars == 0 {
            return bad("exemplar conditioning needs exemplars >= 1".into());
        }
        if !(self.lr > 0.0) || self.steps == 0 || self.batch == 0 {
            return bad("lr, steps and batch must be positive".into());
        }
        Ok(())
    }
}

/// Shape of the denoiser and of its condition projector.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DenoiserArch {
    pub latent_dim: usize,
    pub channels: Vec<usize>,
    pub kernel: usize,
    pub cond_dim: usize,
    pub time_dim: usize,
    pub cond_kind: ConditionKind,
    pub num_tasks: usize,
    pub descriptor_dim: usize,
    pub exemplar_dim: usize,
    pub exemplar_count: usize,
    /// Seed of the fixed one-hot projection.
    pub projection_seed: u64,
}

enum InitKind {
    Zero,
    FanIn(usize),
    Normal,
}

impl DenoiserArch {
    fn specs(&self) -> Vec<(String, Vec<usize>, InitKind)> {
        use InitKind::*;
        let (k, c, ch) = (self.kernel, self.cond_dim, &self.channels);
        let top = *ch.last().expect("validated");
        let mut v: Vec<(String, Vec<usize>, InitKind)> = Vec::new();
        let mut push = |n: &str, s: &[usize], i: InitKind| v.push((n.to_string(), s.to_vec(), i));
        push("in.w", &[ch[0], 1, k], FanIn(k));
        push("in.b", &[ch[0]], Zero);
        for i in 0..ch.len() - 1 {
            push(
                &format!("down{i}.w"),
                &[ch[i + 1], ch[i], k],
                FanIn(ch[i] * k),
            );
            push(&format!("down{i}.b"), &[ch[i + 1]], Zero);
        }
        push("mid.w", &[top, top, k], FanIn(top * k));
        push("mid.b", &[top], Zero);
        for i in (0..ch.len() - 1).rev() {
            push(
                &format!("up{i}.w"),
                &[ch[i + 1], ch[i], k],
                FanIn(ch[i + 1] * k),
            );
            push(&format!("up{i}.b"), &[ch[i]], Zero);
        }
        push("out.w", &[1, ch[0], k], Zero);
        push("out.b", &[1], Zero);
        push("time1.w", &[self.time_dim, c], FanIn(self.time_dim));
        push("time1.b", &[c], Zero);
        push("time2.w", &[c, c], FanIn(c));
        push("time2.b", &[c], Zero);
        match self.cond_kind {
            ConditionKind::OneHot => {}
            ConditionKind::LearnableEmbed => push("table", &[self.num_tasks, c], Normal),
            ConditionKind::Descriptor | ConditionKind::DescriptorPlusExemplars => {
                push(
                    "desc1.w",
                    &[self.descriptor_dim, c],
                    FanIn(self.descriptor_dim),
                );
                push("desc1.b", &[c], Zero);
                push("desc2.w", &[c, c], FanIn(c));
                push("desc2.b", &[c], Zero);
            }
        }
        if self.cond_kind == ConditionKind::DescriptorPlusExemplars {
            push("ex1.w", &[self.exemplar_dim, c], FanIn(self.exemplar_dim));
            push("ex1.b", &[c], Zero);
            push("ex2.w", &[c, c], FanIn(c));
            push("ex2.b", &[c], Zero);
            push("cat.w", &[2 * c, c], FanIn(2 * c));
            push("cat.b", &[c], Zero);
        }
        push("emb.w", &[c, top], FanIn(c));
        push("emb.b", &[top], Zero);
        v
    }

    pub fn init_params<T: Scalar>(&self, seed: u64) -> ParamSet<T> {
        let mut r = rng(seed);
        let mut p = ParamSet::new();
        for (name, shape, kind) in self.specs() {
            let a = match kind {
                InitKind::Zero => Array::zeros(&shape),
                InitKind::FanIn(f) => init::fan_in_uniform(&mut r, &shape, f),
                InitKind::Normal => init::normal(&mut r, &shape, 1.0),
            };
            p.add(name, a);
        }
        p
    }

    fn one_hot_projection<T: Scalar>(&self) -> Array<T> {
        init::normal(
            &mut rng(self.projection_seed),
            &[self.num_tasks, self.cond_dim],
            1.0,
        )
    }

    fn validate_spec(&self, spec: &ConditionSpec) -> Result<()> {
        if spec.kind != self.cond_kind {
            return Err(Error::InvalidArgument(format!(
                "model expects {} conditions, got {}",
                self.cond_kind.name(),
                spec.kind.name()
            )));
        }
        spec.validate(
            self.num_tasks,
            self.descriptor_dim,
            self.exemplar_dim,
            self.exemplar_count,
        )
    }

    /// Condition projector `τ(y; ρ)`: `(B, C)`.
    pub(crate) fn cond_graph<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &Slots,
        ci: CondInputs<T>,
    ) -> Result<Var> {
        let dense = |g: &mut Graph<T>, x: Var, n: &str, act: bool| -> Result<Var> {
            let h = g.matmul(x, p.get(&format!("{n}.w")))?;
            let h = g.add_row_bias(h, p.get(&format!("{n}.b")))?;
            Ok(if act { g.gelu(h) } else { h })
        };
        match self.cond_kind {
            ConditionKind::OneHot => {
                let oh = g.input(ci.one_hot.expect("table input"));
                let proj = g.input(self.one_hot_projection());
                g.matmul(oh, proj)
            }
            ConditionKind::LearnableEmbed => {
                let oh = g.input(ci.one_hot.expect("table input"));
                g.matmul(oh, p.get("table"))
            }
            ConditionKind::Descriptor => {
                let d = g.input(ci.descriptor.expect("descriptor input"));
                let h = dense(g, d, "desc1", true)?;
                dense(g, h, "desc2", false)
            }
            ConditionKind::DescriptorPlusExemplars => {
                let d = g.input(ci.descriptor.expect("descriptor input"));
                let b = g.shape(d)[0];
                let h = dense(g, d, "desc1", true)?;
                let h = dense(g, h, "desc2", false)?;
                let e = g.input(ci.exemplars.expect("exemplar input"));
                let x = dense(g, e, "ex1", true)?;
                let x = dense(g, x, "ex2", false)?;
                let x = g.reshape(x, &[b, self.exemplar_count, self.cond_dim])?;
                let x = g.mean_pool(x)?;
                let hc = g.concat(h, x)?;
                dense(g, hc, "cat", false)
            }
        }
    }

    /// `ε_θ(z_t, t, c)` for `z_t` of shape `(B, L)`, sinusoidal time features `(B, time_dim)`,
    /// and projected conditions `(B, C)`.
    pub(crate) fn eps_graph<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &Slots,
        zt: Var,
        temb: Array<T>,
        cond: Var,
    ) -> Result<Var> {
        let b = g.shape(zt)[0];
        let (k, ch) = (self.kernel, &self.channels);
        let same = ConvSpec::same(k);
        let down = ConvSpec::down2(k);
        let conv =
            |g: &mut Graph<T>, x: Var, n: &str, spec: ConvSpec, transpose: bool| -> Result<Var> {
                let w = p.get(&format!("{n}.w"));
                let h = if transpose {
                    g.conv1d_transpose(x, w, spec)?
                } else {
                    g.conv1d(x, w, spec)?
                };
                g.add_channel_bias(h, p.get(&format!("{n}.b")))
            };

        let t = g.input(temb);
        let t = g.matmul(t, p.get("time1.w"))?;
        let t = g.add_row_bias(t, p.get("time1.b"))?;
        let t = g.gelu(t);
        let t = g.matmul(t, p.get("time2.w"))?;
        let t = g.add_row_bias(t, p.get("time2.b"))?;
        let e = g.add(t, cond)?;
        let e = g.gelu(e);
        let e = g.matmul(e, p.get("emb.w"))?;
        let e = g.add_row_bias(e, p.get("emb.b"))?;

        let x = g.reshape(zt, &[b, 1, self.latent_dim])?;
        let h = conv(g, x, "in", same, false)?;
        let mut h = g.gelu(h);
        let mut skips = Vec::with_capacity(ch.len());
        for i in 0..ch.len() - 1 {
            skips.push(h);
            let d = conv(g, h, &format!("down{i}"), down, false)?;
            h = g.gelu(d);
        }
        h = g.add_channel_embed(h, e)?;
        let m = conv(g, h, "mid", same, false)?;
        h = g.gelu(m);
        for i in (0..ch.len() - 1).rev() {
            let u = conv(g, h, &format!("up{i}"), down, true)?;
            let u = g.gelu(u);
            h = g.add(u, skips[i])?;
        }
        let o = conv(g, h, "out", same, false)?;
        g.reshape(o, &[b, self.latent_dim])
    }

    /// Training objective: `L · mean((ε - ε_θ)²)`, i.e. squared error summed over the latent
    /// and averaged over the batch.
    pub fn loss_graph<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        vars: &[Var],
        names: &[String],
        zt: Array<T>,
        steps: &[usize],
        eps: Array<T>,
        conds: &[&ConditionSpec],
    ) -> Result<Var> {
        for c in conds {
            self.validate_spec(c)?;
        }
        let p = Slots::new(names, vars);
        let ci = CondInputs::build(conds, self.num_tasks)?;
        let cond = self.cond_graph(g, &p, ci)?;
        let zt = g.input(zt);
        let pred = self.eps_graph(g, &p, zt, self.time_features(steps), cond)?;
        let eps = g.input(eps);
        let mse = g.mse(pred, eps)?;
        Ok(g.scale(mse, self.latent_dim as f64))
    }

    pub(crate) fn time_features<T: Scalar>(&self, steps: &[usize]) -> Array<T> {
        let data = steps
            .iter()
            .flat_map(|&t| timestep_embedding(t, self.time_dim))
            .map(T::of)
            .collect();
        Array::from_vec(&[steps.len(), self.time_dim], data).expect("time feature shape")
    }
}

/// Name → graph variable lookup.
pub(crate) struct Slots(HashMap<String, Var>);

impl Slots {
    pub fn new(names: &[String], vars: &[Var]) -> Self {
        Self(names.iter().cloned().zip(vars.iter().copied()).collect())
    }

    fn get(&self, name: &str) -> Var {
        self.0[name]
    }
}

/// Trained denoiser with its schedule and the scalar latent scale applied before diffusion.
#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserModel {
    pub arch: DenoiserArch,
    pub schedule: NoiseSchedule,
    pub params: ParamSet<f32>,
    /// Codes are multiplied by this before diffusion and divided by it after sampling.
    pub latent_scale: f32,
}

impl DenoiserModel {
    pub fn condition_project(&self, spec: &ConditionSpec) -> Result<ConditionEmbedding> {
        self.arch.validate_spec(spec)?;
        let mut g = Graph::new();
        let vars = self.params.bind_frozen(&mut g);
        let p = Slots::new(self.params.names(), &vars);
        let c =
            self.arch
                .cond_graph(&mut g, &p, CondInputs::build(&[spec], self.arch.num_tasks)?)?;
        let values = g.value(c).data().to_vec();
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("condition embedding".into()));
        }
        Ok(ConditionEmbedding { values })
    }

    /// `ε_θ` for a batch of scaled latents sharing one timestep and one embedding.
    pub(crate) fn predict_eps(
        &self,
        zt: &[f32],
        batch: usize,
        t: usize,
        emb: &ConditionEmbedding,
    ) -> Result<Vec<f32>> {
        let mut g = Graph::new();
        let vars = self.params.bind_frozen(&mut g);
        let p = Slots::new(self.params.names(), &vars);
        let c = emb.values.len();
        if c != self.arch.cond_dim {
            return Err(Error::shape(
                "predict_eps",
                format!("embedding of length {c}, model uses {}", self.arch.cond_dim),
            ));
        }
        let cond = g.input(Array::from_vec(&[batch, c], emb.values.repeat(batch))?);
        let z = g.input(Array::from_vec(
            &[batch, self.arch.latent_dim],
            zt.to_vec(),
        )?);
        let out = self.arch.eps_graph(
            &mut g,
            &p,
            z,
            self.arch.time_features(&vec![t; batch]),
            cond,
        )?;
        Ok(g.value(out).data().to_vec())
    }

    pub fn save(&self, path: &Path, config_hash: &str) -> Result<()> {
        let header = DenoiserHeader {
            arch: self.arch.clone(),
            schedule: self.schedule.params(),
            latent_scale: self.latent_scale,
            names: self.params.names().to_vec(),
            shapes: self.params.shapes(),
            config_hash: config_hash.to_string(),
        };
        container::write(path, DENOISER_MAGIC, &header, &self.params.flat())
    }

    pub fn load(path: &Path) -> Result<(Self, String)> {
        let (h, payload): (DenoiserHeader, Vec<f32>) = container::read(path, DENOISER_MAGIC)?;
        let mut params = h.arch.init_params::<f32>(0);
        if params.names() != h.names.as_slice() || params.shapes() != h.shapes {
            return Err(Error::Header(
                "parameter list does not match the stored architecture".into(),
            ));
        }
        params
            .load_flat(&payload)
            .map_err(|_| Error::Truncated("denoiser payload length".into()))?;
        let schedule = make_schedule(
            h.schedule.timesteps,
            h.schedule.beta_start,
            h.schedule.beta_end,
        )
        .map_err(|e| Error::Header(e.to_string()))?;
        Ok((
            Self {
                arch: h.arch,
                schedule,
                params,
                latent_scale: h.latent_scale,
            },
            h.config_hash,
        ))
    }
}

#[derive(Serialize, Deserialize)]
struct DenoiserHeader {
    arch: DenoiserArch,
    schedule: ScheduleParams,
    latent_scale: f32,
    names: Vec<String>,
    shapes: Vec<Vec<usize>>,
    config_hash: String,
}

/// Trains `ε_θ` and the condition projector jointly on `(task, code)` pairs.
/// `conditions[t]` is the condition of task `t`. Per-epoch mean losses go to `curve`.
pub fn train_diffusion(
    latents: &[(usize, Vec<f32>)],
    conditions: &[ConditionSpec],
    cfg: &DiffConfig,
    seed: u64,
    curve: &mut Vec<f64>,
) -> Result<DenoiserModel> {
    let l = latents
        .first()
        .map(|(_, z)| z.len())
        .ok_or_else(|| Error::InvalidArgument("no latents to train on".into()))?;
    cfg.validate(l)?;
    if latents
        .iter()
        .any(|(t, z)| z.len() != l || *t >= conditions.len())
    {
        return Err(Error::InvalidArgument(
            "latents must share one length and reference known tasks".into(),
        ));
    }
    let first = &conditions[0];
    let arch = DenoiserArch {
        latent_dim: l,
        channels: cfg.channels.clone(),
        kernel: cfg.kernel,
        cond_dim: cfg.cond_dim,
        time_dim: cfg.time_dim,
        cond_kind: cfg.cond_kind,
        num_tasks: conditions.len(),
        descriptor_dim: first.descriptor.as_ref().map_or(0, |d| d.len()),
        exemplar_dim: first
            .exemplars
            .as_ref()
            .and_then(|e| e.first())
            .map_or(0, |r| r.len()),
        exemplar_count: first.exemplars.as_ref().map_or(0, |e| e.len()),
        projection_seed: crate::rng::split(seed, 1),
    };
    for c in conditions {
        arch.validate_spec(c)?;
    }
    let schedule = make_schedule(cfg.timesteps, cfg.beta_start, cfg.beta_end)?;
    let n_vals = (latents.len() * l) as f64;
    let mean = latents
        .iter()
        .flat_map(|(_, z)| z)
        .map(|&v| v as f64)
        .sum::<f64>()
        / n_vals;
    let var = latents
        .iter()
        .flat_map(|(_, z)| z)
        .map(|&v| (v as f64 - mean).powi(2))
        .sum::<f64>()
        / n_vals;
    let latent_scale = if var > 0.0 {
        (1.0 / var.sqrt()) as f32
    } else {
        1.0
    };

    let mut params = arch.init_params::<f32>(crate::rng::split(seed, 2));
    let mut opt = Optimizer::new(OptimizerState::adam(cfg.lr), &params);
    let mut r = rng(crate::rng::split(seed, 3));
    let mut sampler = EpochSampler::new(latents.len());
    let batch = cfg.batch.min(latents.len());
    let (mut sum, mut cnt) = (0.0, 0usize);
    for step in 0..cfg.steps {
        let (idx, wrapped) = sampler.next(batch, &mut r);
        if wrapped && cnt > 0 {
            curve.push(sum / cnt as f64);
            (sum, cnt) = (0.0, 0);
        }
        let mut zt = Vec::with_capacity(batch * l);
        let mut eps_all = Vec::with_capacity(batch * l);
        let mut ts = Vec::with_capacity(batch);
        for &i in &idx {
            let t = r.random_range(1..=cfg.timesteps);
            let eps = init::standard_normal(&mut r, l);
            let z0: Vec<f32> = latents[i].1.iter().map(|v| v * latent_scale).collect();
            zt.extend(q_sample(&z0, t, &eps, &schedule)?);
            eps_all.extend(eps);
            ts.push(t);
        }
        let conds: Vec<&ConditionSpec> = idx.iter().map(|&i| &conditions[latents[i].0]).collect();
        let mut g = Graph::new();
        let vars = params.bind(&mut g);
        let loss = arch.loss_graph(
            &mut g,
            &vars,
            params.names(),
            Array::from_vec(&[batch, l], zt)?,
            &ts,
            Array::from_vec(&[batch, l], eps_all)?,
            &conds,
        )?;
        let lv = g.value(loss).item() as f64;
        if !lv.is_finite() {
            if cnt > 0 {
                curve.push(sum / cnt as f64);
            }
            return Err(Error::Diverged {
                step,
                what: "diffusion loss".into(),
            });
        }
        sum += lv;
        cnt += 1;
        let grads = g.backward(loss)?;
        let gs = params.collect_grads(&grads, &vars);
        opt.step_with_lr(&mut params, &gs, cosine_lr(cfg.lr, step, cfg.steps))?;
    }
    if cnt > 0 {
        curve.push(sum / cnt as f64);
    }
    Ok(DenoiserModel {
        arch,
        schedule,
        params,
        latent_scale,
    })
}
