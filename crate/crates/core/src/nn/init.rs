//! Weight initialization. Samples are drawn in `f64` from ChaCha streams and
//! converted, so the init sequence is identical across scalar types.

use crate::rng::Rng;
use crate::scalar::Scalar;
use ndarray::{Array1, Array2, Array4};
use rand::Rng as _;

/// Box-Muller normal sample; avoids pulling trait bounds for rand_distr.
fn normal(rng: &mut Rng, std: f64) -> f64 {
    let u1: f64 = rng.random::<f64>().max(1e-12);
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos() * std
}

/// Kaiming-normal conv weight: std = sqrt(2 / fan_in), fan_in = cin*kh*kw.
pub fn kaiming_conv<F: Scalar>(
    rng: &mut Rng,
    cout: usize,
    cin: usize,
    kh: usize,
    kw: usize,
) -> Array4<F> {
    let std = (2.0 / (cin * kh * kw) as f64).sqrt();
    Array4::from_shape_simple_fn((cout, cin, kh, kw), || F::from_f64(normal(rng, std)))
}

/// Kaiming-normal linear weight: std = sqrt(2 / fan_in).
pub fn kaiming_linear<F: Scalar>(rng: &mut Rng, out_dim: usize, in_dim: usize) -> Array2<F> {
    let std = (2.0 / in_dim as f64).sqrt();
    Array2::from_shape_simple_fn((out_dim, in_dim), || F::from_f64(normal(rng, std)))
}

/// Xavier-uniform linear weight, used for attention projections.
pub fn xavier_linear<F: Scalar>(rng: &mut Rng, out_dim: usize, in_dim: usize) -> Array2<F> {
    let bound = (6.0 / (in_dim + out_dim) as f64).sqrt();
    Array2::from_shape_simple_fn((out_dim, in_dim), || {
        F::from_f64(rng.random::<f64>() * 2.0 * bound - bound)
    })
}

pub fn zeros1<F: Scalar>(n: usize) -> Array1<F> {
    Array1::zeros(n)
}

pub fn ones1<F: Scalar>(n: usize) -> Array1<F> {
    Array1::from_elem(n, F::one())
}

/// Small normal init for embedding-style tensors.
pub fn small_normal2<F: Scalar>(rng: &mut Rng, rows: usize, cols: usize) -> Array2<F> {
    Array2::from_shape_simple_fn((rows, cols), || F::from_f64(normal(rng, 0.02)))
}
