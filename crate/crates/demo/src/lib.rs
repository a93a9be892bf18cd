//! WebAssembly bindings for the static demo page in `www/`.
//!
//! Every export returns a JSON string; errors surface as JS exceptions.

use std::cell::RefCell;
use std::collections::HashMap;

use cpdiff_core::bench::interpolate;
use cpdiff_core::conddiff::{make_schedule, q_sample};
use cpdiff_core::lora::{self, ParameterVector};
use cpdiff_core::numerics::{Array, OptimizerState};
use cpdiff_core::rng::{rng, split};
use cpdiff_core::tasks::{
    evaluate, evaluate_base, finetune_collect, make_task, pretrain_base, BaseModel, Condition,
    Family, FinetuneConfig, PretrainConfig, Split, Task, TaskSpec,
};
use serde_json::json;
use wasm_bindgen::prelude::*;

const SEED: u64 = 42;

thread_local! {
    static BASES: RefCell<HashMap<Family, BaseModel>> = RefCell::new(HashMap::new());
}

fn err(e: impl std::fmt::Display) -> JsError {
    JsError::new(&e.to_string())
}

fn base(family: Family) -> Result<BaseModel, JsError> {
    BASES.with(|b| {
        if let Some(m) = b.borrow().get(&family) {
            return Ok(m.clone());
        }
        let classes = if family == Family::Blobs { 2 } else { 1 };
        let m = pretrain_base(family, classes, split(SEED, 0), &PretrainConfig::default())
            .map_err(err)?;
        b.borrow_mut().insert(family, m.clone());
        Ok(m)
    })
}

fn task(condition: Condition, seed: u64) -> Result<Task, JsError> {
    make_task(TaskSpec {
        name: "demo".into(),
        condition,
        seed,
        train_size: 256,
        val_size: 256,
        blob_std: 0.3,
    })
    .map_err(err)
}

fn finetune(
    base: &BaseModel,
    task: &Task,
    rank: usize,
    steps: usize,
) -> Result<ParameterVector, JsError> {
    let cfg = FinetuneConfig {
        rank,
        alpha: 8.0,
        optimizer: OptimizerState::adam(3e-3),
        total_steps: steps.max(1),
        batch: 64,
        n: 1,
        stride: 1,
    };
    let set = finetune_collect(base, task, &cfg, split(SEED, 1)).map_err(err)?;
    Ok(set.vectors.into_iter().next_back().expect("one checkpoint"))
}

fn predict(
    base: &BaseModel,
    v: Option<&ParameterVector>,
    x: Array<f32>,
) -> Result<Vec<f32>, JsError> {
    let (w0, w1) = match v {
        Some(v) => base
            .merged(&lora::unflatten(v, v.layout()).map_err(err)?)
            .map_err(err)?,
        None => (base.w0.clone(), base.w1.clone()),
    };
    Ok(base.forward_with(&w0, &w1, &x))
}

/// ᾱ_t over the whole schedule plus one forward-noised copy of a sine wave at step `t`.
#[wasm_bindgen]
pub fn schedule_explorer(
    timesteps: usize,
    beta_start: f64,
    beta_end: f64,
    t: usize,
) -> Result<String, JsError> {
    let s = make_schedule(timesteps, beta_start, beta_end).map_err(err)?;
    s.check_step(t).map_err(err)?;
    let n = 128;
    let z0: Vec<f32> = (0..n)
        .map(|i| (i as f32 / n as f32 * std::f32::consts::TAU).sin())
        .collect();
    let mut r = rng(split(SEED, 2));
    let eps = cpdiff_core::numerics::init::standard_normal(&mut r, n);
    let zt = q_sample(&z0, t, &eps, &s).map_err(err)?;
    let alpha_bar: Vec<f64> = (0..=timesteps).map(|k| s.alpha_bar(k)).collect();
    Ok(json!({
        "alpha_bar": alpha_bar,
        "alpha_bar_t": s.alpha_bar(t),
        "clean": z0,
        "noisy": zt,
    })
    .to_string())
}

/// LoRA fine-tuning of the frozen blobs base on blobs rotated by `phi`, with class
/// predictions over a grid for drawing decision regions.
#[wasm_bindgen]
pub fn finetune_blobs(phi: f64, rank: usize, steps: usize) -> Result<String, JsError> {
    let base = base(Family::Blobs)?;
    let t = task(
        Condition::Blobs {
            phi,
            radius: 2.0,
            classes: 2,
        },
        split(SEED, 3),
    )?;
    let before = evaluate_base(&base, &t, Split::Val);
    let v = finetune(&base, &t, rank, steps)?;
    let after = evaluate(&base, &v, &t, Split::Val).map_err(err)?;
    let g = 48;
    let lim = 4.0f32;
    let grid: Vec<f32> = (0..g * g)
        .flat_map(|k| {
            let (i, j) = (k / g, k % g);
            [
                -lim + 2.0 * lim * j as f32 / (g - 1) as f32,
                lim - 2.0 * lim * i as f32 / (g - 1) as f32,
            ]
        })
        .collect();
    let out = predict(
        &base,
        Some(&v),
        Array::from_vec(&[g * g, 2], grid).map_err(err)?,
    )?;
    let classes: Vec<u8> = out.chunks(2).map(|o| u8::from(o[1] > o[0])).collect();
    let points: Vec<[f32; 3]> = (0..t.val.x.shape()[0].min(200))
        .map(|i| {
            let row = t.val.x.row(i);
            let label = match &t.val.y {
                cpdiff_core::tasks::Targets::Labels(l) => l[i] as f32,
                cpdiff_core::tasks::Targets::Values(_) => 0.0,
            };
            [row[0], row[1], label]
        })
        .collect();
    Ok(json!({
        "before": before,
        "after": after,
        "k": v.len(),
        "grid": g,
        "limit": lim,
        "classes": classes,
        "points": points,
    })
    .to_string())
}

/// Fine-tunes sine adapters for two conditions and evaluates their interpolation at `lambda`
/// on the blended target.
#[wasm_bindgen]
pub fn interpolate_sine(
    a1: f64,
    p1: f64,
    a2: f64,
    p2: f64,
    lambda: f64,
    steps: usize,
) -> Result<String, JsError> {
    let base = base(Family::Sine)?;
    let ca = Condition::Sine {
        amplitude: a1,
        phase: p1,
    };
    let cb = Condition::Sine {
        amplitude: a2,
        phase: p2,
    };
    let ta = task(ca, split(SEED, 4))?;
    let tb = task(cb, split(SEED, 5))?;
    let va = finetune(&base, &ta, 1, steps)?;
    let vb = finetune(&base, &tb, 1, steps)?;
    let mix = interpolate(&va, &vb, lambda).map_err(err)?;
    let target = task(ca.blend(&cb, lambda).map_err(err)?, split(SEED, 6))?;
    let n = 120;
    let xs: Vec<f32> = (0..n)
        .map(|i| -std::f32::consts::PI + std::f32::consts::TAU * i as f32 / (n - 1) as f32)
        .collect();
    let ys = predict(
        &base,
        Some(&mix),
        Array::from_vec(&[n, 1], xs.clone()).map_err(err)?,
    )?;
    let (amp, ph) = match ca.blend(&cb, lambda).map_err(err)? {
        Condition::Sine { amplitude, phase } => (amplitude, phase),
        Condition::Blobs { .. } => unreachable!(),
    };
    let truth: Vec<f64> = xs.iter().map(|&x| amp * (x as f64 + ph).sin()).collect();
    Ok(json!({
        "x": xs,
        "prediction": ys,
        "target": truth,
        "metric_blend": evaluate(&base, &mix, &target, Split::Val).map_err(err)?,
        "metric_a": evaluate(&base, &mix, &ta, Split::Val).map_err(err)?,
        "metric_b": evaluate(&base, &mix, &tb, Split::Val).map_err(err)?,
    })
    .to_string())
}
