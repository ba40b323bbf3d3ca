//! Layer normalization over the last axis of a (batch, tokens, dim) tensor.

use super::{NamedTensor, NamedTensorMut, Param};
use crate::scalar::Scalar;
use ndarray::{Array2, Array3, Ix1};

#[derive(Debug, Clone)]
pub struct LayerNorm<F: Scalar> {
    pub gamma: Param<F>,
    pub beta: Param<F>,
    pub eps: F,
    cache: Option<(Array3<F>, Array2<F>)>, // (xhat, inv_std)
}

impl<F: Scalar> LayerNorm<F> {
    pub fn new(name: &str, dim: usize) -> Self {
        LayerNorm {
            gamma: Param::new(format!("{name}.weight"), super::init::ones1::<F>(dim).into_dyn()),
            beta: Param::new(format!("{name}.bias"), super::init::zeros1::<F>(dim).into_dyn()),
            eps: F::from_f64(1e-5),
            cache: None,
        }
    }

    pub fn dim(&self) -> usize {
        self.gamma.len()
    }

    pub fn forward(&mut self, x: &Array3<F>, cache: bool) -> Array3<F> {
        let (b, t, d) = x.dim();
        let dn = F::from_f64(d as f64);
        let gamma = self.gamma.value.view().into_dimensionality::<Ix1>().unwrap();
        let beta = self.beta.value.view().into_dimensionality::<Ix1>().unwrap();
        let mut xhat = Array3::<F>::zeros((b, t, d));
        let mut inv_std = Array2::<F>::zeros((b, t));
        let mut y = Array3::<F>::zeros((b, t, d));
        for bi in 0..b {
            for ti in 0..t {
                let row = x.index_axis(ndarray::Axis(0), bi);
                let row = row.index_axis(ndarray::Axis(0), ti);
                let mean = row.iter().cloned().sum::<F>() / dn;
                let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / dn;
                let is = F::one() / (var + self.eps).sqrt();
                inv_std[[bi, ti]] = is;
                for di in 0..d {
                    let xh = (row[di] - mean) * is;
                    xhat[[bi, ti, di]] = xh;
                    y[[bi, ti, di]] = xh * gamma[di] + beta[di];
                }
            }
        }
        if cache {
            self.cache = Some((xhat, inv_std));
        }
        y
    }

    pub fn backward(&mut self, dy: &Array3<F>) -> Array3<F> {
        let (xhat, inv_std) =
            self.cache.as_ref().expect("LayerNorm::backward without cached forward");
        let (b, t, d) = dy.dim();
        let dn = F::from_f64(d as f64);
        let gamma = self.gamma.value.view().into_dimensionality::<Ix1>().unwrap();

        let mut dgamma = vec![F::zero(); d];
        let mut dbeta = vec![F::zero(); d];
        let mut dx = Array3::<F>::zeros((b, t, d));
        for bi in 0..b {
            for ti in 0..t {
                let mut sum_dxhat = F::zero();
                let mut sum_dxhat_xhat = F::zero();
                for di in 0..d {
                    let g = dy[[bi, ti, di]];
                    dgamma[di] += g * xhat[[bi, ti, di]];
                    dbeta[di] += g;
                    let dxhat = g * gamma[di];
                    sum_dxhat += dxhat;
                    sum_dxhat_xhat += dxhat * xhat[[bi, ti, di]];
                }
                let is = inv_std[[bi, ti]];
                for di in 0..d {
                    let dxhat = dy[[bi, ti, di]] * gamma[di];
                    dx[[bi, ti, di]] = is / dn
                        * (dn * dxhat - sum_dxhat - xhat[[bi, ti, di]] * sum_dxhat_xhat);
                }
            }
        }
        for di in 0..d {
            self.gamma.grad.as_slice_mut().unwrap()[di] += dgamma[di];
            self.beta.grad.as_slice_mut().unwrap()[di] += dbeta[di];
        }
        dx
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<F>> {
        vec![&mut self.gamma, &mut self.beta]
    }

    pub fn named_tensors(&self) -> Vec<NamedTensor<'_, F>> {
        vec![
            NamedTensor { name: self.gamma.name.clone(), view: self.gamma.value.view(), is_param: true },
            NamedTensor { name: self.beta.name.clone(), view: self.beta.value.view(), is_param: true },
        ]
    }

    pub fn named_tensors_mut(&mut self) -> Vec<NamedTensorMut<'_, F>> {
        vec![
            NamedTensorMut { name: self.gamma.name.clone(), view: self.gamma.value.view_mut() },
            NamedTensorMut { name: self.beta.name.clone(), view: self.beta.value.view_mut() },
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn normalizes_rows_to_zero_mean_unit_var() {
        let mut ln = LayerNorm::<f64>::new("ln", 8);
        let x = Array3::from_shape_fn((2, 3, 8), |(a, b, c)| ((a * 29 + b * 7 + c) as f64).sin() * 3.0);
        let y = ln.forward(&x, false);
        for bi in 0..2 {
            for ti in 0..3 {
                let row = y.index_axis(ndarray::Axis(0), bi);
                let row = row.index_axis(ndarray::Axis(0), ti);
                let mean: f64 = row.iter().sum::<f64>() / 8.0;
                let var: f64 = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
                assert_abs_diff_eq!(mean, 0.0, epsilon = 1e-12);
                assert_abs_diff_eq!(var, 1.0, epsilon = 1e-4);
            }
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut ln = LayerNorm::<f64>::new("ln", 5);
        ln.gamma.value.as_slice_mut().unwrap().copy_from_slice(&[1.1, 0.9, 1.3, 0.8, 1.0]);
        let x = Array3::from_shape_fn((2, 2, 5), |(a, b, c)| ((a * 13 + b * 5 + c * 3) as f64).cos());

        let loss = |ln: &mut LayerNorm<f64>, x: &Array3<f64>| -> f64 {
            let y = ln.forward(x, true);
            y.iter().enumerate().map(|(i, v)| v * v * (1.0 + 0.02 * i as f64)).sum()
        };

        let mut ln2 = ln.clone();
        let y = ln2.forward(&x, true);
        let dims = y.dim();
        let dy = Array3::from_shape_fn(dims, |(a, b, c)| {
            let i = (a * dims.1 + b) * dims.2 + c;
            2.0 * y[[a, b, c]] * (1.0 + 0.02 * i as f64)
        });
        let dx = ln2.backward(&dy);

        let h = 1e-6;
        let mut xp = x.clone();
        for idx in 0..x.len() {
            let orig = xp.as_slice().unwrap()[idx];
            xp.as_slice_mut().unwrap()[idx] = orig + h;
            let lp = loss(&mut ln, &xp);
            xp.as_slice_mut().unwrap()[idx] = orig - h;
            let lm = loss(&mut ln, &xp);
            xp.as_slice_mut().unwrap()[idx] = orig;
            assert_abs_diff_eq!((lp - lm) / (2.0 * h), dx.as_slice().unwrap()[idx], epsilon = 1e-5);
        }
        for idx in 0..5 {
            let orig = ln.gamma.value.as_slice().unwrap()[idx];
            ln.gamma.value.as_slice_mut().unwrap()[idx] = orig + h;
            let lp = loss(&mut ln, &x);
            ln.gamma.value.as_slice_mut().unwrap()[idx] = orig - h;
            let lm = loss(&mut ln, &x);
            ln.gamma.value.as_slice_mut().unwrap()[idx] = orig;
            assert_abs_diff_eq!(
                (lp - lm) / (2.0 * h),
                ln2.gamma.grad.as_slice().unwrap()[idx],
                epsilon = 1e-5
            );
        }
    }
}
