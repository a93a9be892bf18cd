//! Central-difference audit of reverse-mode gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, ParamSet, Var};
use crate::{Error, Result};

pub const MIN_EPSILON: f64 = 1e-7;
pub const MAX_EPSILON: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct AuditOptions {
    pub epsilon: f64,
    /// Audit at most this many coordinates per parameter (sampled with `seed`).
    pub max_coords_per_param: Option<usize>,
    /// Skip coordinates whose current value lies within this distance of zero
    /// (used when the parameter feeds a relu directly).
    pub kink_margin: Option<f64>,
    pub seed: u64,
}

impl Default for AuditOptions {
    fn default() -> Self {
        Self {
            epsilon: 1e-6,
            max_coords_per_param: None,
            kink_margin: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AuditReport {
    pub max_relative_error: f64,
    /// `(parameter index, coordinate)` of the worst coordinate.
    pub worst: Option<(usize, usize)>,
    pub analytic: f64,
    pub numeric: f64,
    pub coords_checked: usize,
}

fn eval(
    params: &ParamSet<f64>,
    loss: &impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
) -> Result<f64> {
    let mut g = Graph::new();
    let vars = params.bind(&mut g);
    let l = loss(&mut g, &vars)?;
    let v = g.value(l);
    if v.numel() != 1 {
        return Err(Error::shape(
            "grad_audit",
            format!("loss must be scalar, got {:?}", v.shape()),
        ));
    }
    Ok(v.item())
}

/// Compares `backward` against `(f(x+ε) - f(x-ε)) / 2ε` coordinate by coordinate.
///
/// The relative error of a coordinate is `|a - n| / max(|a|, |n|, 1e-12)`; the
/// report carries the worst one.
pub fn grad_audit(
    params: &ParamSet<f64>,
    loss: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
    opts: &AuditOptions,
) -> Result<AuditReport> {
    let eps = opts.epsilon;
    if !(MIN_EPSILON..=MAX_EPSILON).contains(&eps) {
        return Err(Error::InvalidArgument(format!(
            "audit epsilon {eps} outside [{MIN_EPSILON}, {MAX_EPSILON}]"
        )));
    }
    let mut g = Graph::new();
    let vars = params.bind(&mut g);
    let l = loss(&mut g, &vars)?;
    let grads = g.backward(l)?;
    let analytic = params.collect_grads(&grads, &vars);

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut work = params.clone();
    let mut report = AuditReport {
        max_relative_error: 0.0,
        worst: None,
        analytic: 0.0,
        numeric: 0.0,
        coords_checked: 0,
    };
    for pi in 0..params.len() {
        let n = params.get(pi).numel();
        let coords: Vec<usize> = match opts.max_coords_per_param {
            Some(cap) if cap < n => sample(&mut rng, n, cap).into_vec(),
            _ => (0..n).collect(),
        };
        for c in coords {
            let x0 = params.get(pi).data()[c];
            if let Some(m) = opts.kink_margin {
                if x0.abs() < m.max(2.0 * eps) {
                    continue;
                }
            }
            work.get_mut(pi).data_mut()[c] = x0 + eps;
            let fp = eval(&work, &loss)?;
            work.get_mut(pi).data_mut()[c] = x0 - eps;
            let fm = eval(&work, &loss)?;
            work.get_mut(pi).data_mut()[c] = x0;
            if !fp.is_finite() || !fm.is_finite() {
                return Err(Error::NonFinite(format!(
                    "loss at perturbed coordinate {c} of parameter {}",
                    params.names()[pi]
                )));
            }
            let numeric = (fp - fm) / (2.0 * eps);
            let a = analytic[pi].data()[c];
            let denom = a.abs().max(numeric.abs()).max(1e-12);
            let rel = (a - numeric).abs() / denom;
            report.coords_checked += 1;
            if rel > report.max_relative_error || report.worst.is_none() {
                report.max_relative_error = rel.max(report.max_relative_error);
                if rel >= report.max_relative_error {
                    report.worst = Some((pi, c));
                    report.analytic = a;
                    report.numeric = numeric;
                }
            }
        }
    }
    Ok(report)
}
