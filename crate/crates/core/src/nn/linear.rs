//! Fully connected layer: y = x W^T + b.

use super::{NamedTensor, NamedTensorMut, Param};
use crate::rng::Rng;
use crate::scalar::Scalar;
use ndarray::{Array2, ArrayView2, Ix1, Ix2};

#[derive(Debug, Clone)]
pub struct Linear<F: Scalar> {
    pub weight: Param<F>, // (out, in)
    pub bias: Param<F>,   // (out,)
    cache_input: Option<Array2<F>>,
}

impl<F: Scalar> Linear<F> {
    pub fn new(name: &str, rng: &mut Rng, in_dim: usize, out_dim: usize) -> Self {
        let w = super::init::kaiming_linear::<F>(rng, out_dim, in_dim);
        Linear {
            weight: Param::new(format!("{name}.weight"), w.into_dyn()),
            bias: Param::new(format!("{name}.bias"), super::init::zeros1::<F>(out_dim).into_dyn()),
            cache_input: None,
        }
    }

    /// Xavier-initialized variant (attention / fusion projections).
    pub fn new_xavier(name: &str, rng: &mut Rng, in_dim: usize, out_dim: usize) -> Self {
        let w = super::init::xavier_linear::<F>(rng, out_dim, in_dim);
        Linear {
            weight: Param::new(format!("{name}.weight"), w.into_dyn()),
            bias: Param::new(format!("{name}.bias"), super::init::zeros1::<F>(out_dim).into_dyn()),
            cache_input: None,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn forward(&mut self, x: ArrayView2<'_, F>, cache: bool) -> Array2<F> {
        let w = self.weight.value.view().into_dimensionality::<Ix2>().unwrap();
        let b = self.bias.value.view().into_dimensionality::<Ix1>().unwrap();
        let mut y = x.dot(&w.t());
        y += &b;
        if cache {
            self.cache_input = Some(x.to_owned());
        }
        y
    }

    /// Accumulates parameter gradients and returns dL/dx.
    pub fn backward(&mut self, dy: ArrayView2<'_, F>) -> Array2<F> {
        let x = self
            .cache_input
            .as_ref()
            .expect("Linear::backward called without cached forward");
        let w = self.weight.value.view().into_dimensionality::<Ix2>().unwrap();
        let dw = dy.t().dot(x);
        self.weight.grad += &dw.into_dyn();
        let db = dy.sum_axis(ndarray::Axis(0));
        self.bias.grad += &db.into_dyn();
        dy.dot(&w)
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<F>> {
        vec![&mut self.weight, &mut self.bias]
    }

    pub fn named_tensors(&self) -> Vec<NamedTensor<'_, F>> {
        vec![
            NamedTensor { name: self.weight.name.clone(), view: self.weight.value.view(), is_param: true },
            NamedTensor { name: self.bias.name.clone(), view: self.bias.value.view(), is_param: true },
        ]
    }

    pub fn named_tensors_mut(&mut self) -> Vec<NamedTensorMut<'_, F>> {
        vec![
            NamedTensorMut { name: self.weight.name.clone(), view: self.weight.value.view_mut() },
            NamedTensorMut { name: self.bias.name.clone(), view: self.bias.value.view_mut() },
        ]
    }

    pub fn clear_cache(&mut self) {
        self.cache_input = None;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    #[test]
    fn forward_matches_hand_arithmetic() {
        let mut rng = rng_from_seed(0);
        let mut lin = Linear::<f64>::new("fc", &mut rng, 2, 3);
        lin.weight.value = array![[1.0, 2.0], [0.0, 1.0], [-1.0, 0.5]].into_dyn();
        lin.bias.value = array![0.5, 0.0, -0.5].into_dyn();
        let x = array![[1.0, 1.0]];
        let y = lin.forward(x.view(), false);
        assert_abs_diff_eq!(y[[0, 0]], 3.5);
        assert_abs_diff_eq!(y[[0, 1]], 1.0);
        assert_abs_diff_eq!(y[[0, 2]], -1.0);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = rng_from_seed(1);
        let mut lin = Linear::<f64>::new("fc", &mut rng, 4, 3);
        let x = ndarray::Array2::from_shape_fn((5, 4), |(i, j)| ((i * 7 + j * 3) as f64).sin());

        // Scalar loss: sum of squares of the output.
        let loss = |lin: &mut Linear<f64>| -> f64 {
            let y = lin.forward(x.view(), true);
            y.iter().map(|v| v * v).sum()
        };

        let mut lin2 = lin.clone();
        let base_y = lin2.forward(x.view(), true);
        let dy = base_y.mapv(|v| 2.0 * v);
        lin2.backward(dy.view());

        let h = 1e-6;
        for idx in 0..lin.weight.len() {
            let flat = lin.weight.value.as_slice_mut().unwrap();
            let orig = flat[idx];
            flat[idx] = orig + h;
            let lp = loss(&mut lin);
            lin.weight.value.as_slice_mut().unwrap()[idx] = orig - h;
            let lm = loss(&mut lin);
            lin.weight.value.as_slice_mut().unwrap()[idx] = orig;
            let num = (lp - lm) / (2.0 * h);
            let ana = lin2.weight.grad.as_slice().unwrap()[idx];
            assert_abs_diff_eq!(num, ana, epsilon = 1e-5);
        }
    }
}
