//! Deterministic parameter initializers.

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use super::{Array, Scalar};

pub fn normal<T: Scalar, R: Rng>(rng: &mut R, shape: &[usize], std: f64) -> Array<T> {
    let n: usize = shape.iter().product();
    let dist = Normal::new(0.0, std).expect("std >= 0");
    let data = (0..n).map(|_| T::of(dist.sample(rng))).collect();
    Array::from_vec(shape, data).expect("shape matches")
}

/// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`, the usual default for dense and conv layers.
pub fn fan_in_uniform<T: Scalar, R: Rng>(rng: &mut R, shape: &[usize], fan_in: usize) -> Array<T> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::of(dist.sample(rng))).collect();
    Array::from_vec(shape, data).expect("shape matches")
}

/// Standard normal vector of length `n`.
pub fn standard_normal<R: Rng>(rng: &mut R, n: usize) -> Vec<f32> {
    (0..n)
        .map(|_| rng.sample::<f32, _>(rand_distr::StandardNormal))
        .collect()
}
