use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::condition::ConditionSpec;
use super::model::DenoiserModel;
use crate::autoencoder::{LatentCode, LatentSource};
use crate::container::write_atomic;
use crate::numerics::init;
use crate::rng::rng;
use crate::{Error, Result};

/// Latent states of one sampling run, from `z_T` (step `T`) down to `z_0` (step 0).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub seed: u64,
    pub states: Vec<(usize, Vec<f32>)>,
}

/// Ancestral sampling for one seed.
pub fn p_sample_loop(
    model: &DenoiserModel,
    cond: &ConditionSpec,
    seed: u64,
    record: bool,
) -> Result<(LatentCode, Option<Trajectory>)> {
    let (mut z, mut tr) = p_sample_batch(model, cond, &[seed], record)?;
    Ok((z.pop().expect("one sample"), tr.pop()))
}

/// Ancestral sampling for several seeds at once. Each seed owns its noise stream, so a
/// seed's result does not depend on which other seeds share the batch.
pub fn p_sample_batch(
    model: &DenoiserModel,
    cond: &ConditionSpec,
    seeds: &[u64],
    record: bool,
) -> Result<(Vec<LatentCode>, Vec<Trajectory>)> {
    let emb = model.condition_project(cond)?;
    let l = model.arch.latent_dim;
    let b = seeds.len();
    let sched = &model.schedule;
    let big_t = sched.timesteps();
    let scale = model.latent_scale;
    let mut rngs: Vec<_> = seeds.iter().map(|&s| rng(s)).collect();
    let mut z: Vec<f32> = rngs
        .iter_mut()
        .flat_map(|r| init::standard_normal(r, l))
        .collect();
    let mut trajectories: Vec<Trajectory> = seeds
        .iter()
        .map(|&seed| Trajectory {
            seed,
            states: Vec::new(),
        })
        .collect();
    let snapshot = |tr: &mut [Trajectory], z: &[f32], t: usize| {
        for (i, traj) in tr.iter_mut().enumerate() {
            traj.states
                .push((t, z[i * l..(i + 1) * l].iter().map(|v| v / scale).collect()));
        }
    };
    if record {
        snapshot(&mut trajectories, &z, big_t);
    }
    for t in (1..=big_t).rev() {
        let eps = model.predict_eps(&z, b, t, &emb)?;
        let (beta, alpha, ab) = (sched.beta(t), sched.alpha(t), sched.alpha_bar(t));
        let c_eps = beta / (1.0 - ab).sqrt();
        let c_out = 1.0 / alpha.sqrt();
        let sigma = sched.posterior_variance(t).sqrt();
        for (i, r) in rngs.iter_mut().enumerate() {
            let xi = if t > 1 {
                init::standard_normal(r, l)
            } else {
                vec![0.0; l]
            };
            for j in 0..l {
                let k = i * l + j;
                let mean = c_out * (z[k] as f64 - c_eps * eps[k] as f64);
                z[k] = (mean + sigma * xi[j] as f64) as f32;
            }
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::SamplingNonFinite(t));
        }
        if record {
            snapshot(&mut trajectories, &z, t - 1);
        }
    }
    let codes = z
        .chunks(l)
        .map(|c| LatentCode {
            values: c.iter().map(|v| v / scale).collect(),
            source: LatentSource::Diffused,
        })
        .collect();
    Ok((codes, if record { trajectories } else { Vec::new() }))
}

/// Writes every `stride`-th state (always including the first and last) as CSV rows
/// `step,v0,v1,...`.
pub fn record_trajectory(tr: &Trajectory, stride: usize, path: &Path) -> Result<()> {
    if stride == 0 {
        return Err(Error::InvalidArgument(
            "trajectory stride must be >= 1".into(),
        ));
    }
    let width = tr.states.first().map_or(0, |s| s.1.len());
    let mut out = String::from("step");
    for j in 0..width {
        write!(out, ",z{j}").expect("string write");
    }
    out.push('\n');
    let last = tr.states.len().saturating_sub(1);
    for (i, (step, values)) in tr.states.iter().enumerate() {
        if i % stride != 0 && i != last {
            continue;
        }
        write!(out, "{step}").expect("string write");
        for v in values {
            write!(out, ",{v}").expect("string write");
        }
        out.push('\n');
    }
    write_atomic(path, out.as_bytes())
}

pub fn read_trajectory(path: &Path, seed: u64) -> Result<Trajectory> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut states = Vec::new();
    for line in text.lines().skip(1) {
        let mut parts = line.split(',');
        let step = parts
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Header(format!("bad trajectory row in {}", path.display())))?;
        let values = parts
            .map(|s| s.parse::<f32>().map_err(|e| Error::Header(e.to_string())))
            .collect::<Result<Vec<_>>>()?;
        states.push((step, values));
    }
    Ok(Trajectory { seed, states })
}
