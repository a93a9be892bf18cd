use serde::{Deserialize, Serialize};

use super::{Array, ParamSet, Scalar};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

/// Hyperparameters of an optimizer.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    #[serde(default)]
    pub weight_decay: f64,
}

impl OptimizerState {
    pub fn adam(learning_rate: f64) -> Self {
        Self {
            kind: OptimizerKind::Adam,
            learning_rate,
            weight_decay: 0.0,
        }
    }

    pub fn sgd(learning_rate: f64) -> Self {
        Self {
            kind: OptimizerKind::Sgd,
            learning_rate,
            weight_decay: 0.0,
        }
    }
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Running optimizer: hyperparameters plus per-parameter moments.
#[derive(Clone, Debug)]
pub struct Optimizer<T> {
    pub config: OptimizerState,
    step: u64,
    m: Vec<Array<T>>,
    v: Vec<Array<T>>,
}

/// Cosine annealing from `base` at step 0 to zero at `total`.
pub fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    let t = (step.min(total) as f64) / total as f64;
    base * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(config: OptimizerState, params: &ParamSet<T>) -> Self {
        let zeros: Vec<Array<T>> = params
            .values()
            .iter()
            .map(|p| Array::zeros(p.shape()))
            .collect();
        let (m, v) = match config.kind {
            OptimizerKind::Adam => (zeros.clone(), zeros),
            OptimizerKind::Sgd => (Vec::new(), Vec::new()),
        };
        Self {
            config,
            step: 0,
            m,
            v,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update at the configured learning rate.
    pub fn step(&mut self, params: &mut ParamSet<T>, grads: &[Array<T>]) -> Result<()> {
        self.step_with_lr(params, grads, self.config.learning_rate)
    }

    /// Applies one update at learning rate `lr`. A non-finite gradient refuses the step
    /// and leaves parameters and moments untouched.
    pub fn step_with_lr(
        &mut self,
        params: &mut ParamSet<T>,
        grads: &[Array<T>],
        lr: f64,
    ) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::InvalidArgument(format!(
                "{} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        for (i, (g, p)) in grads.iter().zip(params.values()).enumerate() {
            if g.shape() != p.shape() {
                return Err(Error::shape(
                    "optimizer_step",
                    format!("gradient {:?} for parameter {:?}", g.shape(), p.shape()),
                ));
            }
            if !g.is_finite() {
                return Err(Error::NonFinite(format!(
                    "gradient of {}",
                    params.names()[i]
                )));
            }
        }
        self.step += 1;
        let lr_t = T::of(lr);
        let wd = T::of(self.config.weight_decay);
        match self.config.kind {
            OptimizerKind::Sgd => {
                for (i, g) in grads.iter().enumerate() {
                    for (p, &gi) in params.get_mut(i).data_mut().iter_mut().zip(g.data()) {
                        *p = *p - lr_t * gi - lr_t * wd * *p;
                    }
                }
            }
            OptimizerKind::Adam => {
                let (b1, b2) = (T::of(BETA1), T::of(BETA2));
                let bc1 = T::of(1.0 - BETA1.powi(self.step as i32));
                let bc2 = T::of(1.0 - BETA2.powi(self.step as i32));
                let eps = T::of(ADAM_EPS);
                let one = T::one();
                for (i, g) in grads.iter().enumerate() {
                    let m = self.m[i].data_mut();
                    let v = self.v[i].data_mut();
                    let p = params.get_mut(i).data_mut();
                    for j in 0..g.numel() {
                        let gj = g.data()[j] + wd * p[j];
                        m[j] = b1 * m[j] + (one - b1) * gj;
                        v[j] = b2 * v[j] + (one - b2) * gj * gj;
                        let mh = m[j] / bc1;
                        let vh = v[j] / bc2;
                        p[j] -= lr_t * mh / (vh.sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}
