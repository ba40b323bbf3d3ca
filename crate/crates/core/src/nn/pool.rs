//! Pooling layers: max pooling with argmax caching and global average
//! pooling, plus the ReLU activation.

use crate::scalar::Scalar;
use ndarray::parallel::prelude::*;
use ndarray::{Array2, Array4, Axis};

#[derive(Debug, Clone)]
pub struct MaxPool2d<F: Scalar> {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    /// Flat (iy * W + ix) input index of each pooled maximum.
    cache_argmax: Option<(Array4<u32>, (usize, usize))>,
    _marker: std::marker::PhantomData<F>,
}

impl<F: Scalar> MaxPool2d<F> {
    pub fn new(kernel: usize, stride: usize, padding: usize) -> Self {
        MaxPool2d { kernel, stride, padding, cache_argmax: None, _marker: Default::default() }
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.padding - self.kernel) / self.stride + 1,
            (w + 2 * self.padding - self.kernel) / self.stride + 1,
        )
    }

    pub fn forward(&mut self, x: &Array4<F>, cache: bool) -> Array4<F> {
        let (b, c, h, w) = x.dim();
        let (ho, wo) = self.out_hw(h, w);
        let (k, s, p) = (self.kernel, self.stride, self.padding);
        let mut out = Array4::<F>::zeros((b, c, ho, wo));
        let mut argmax = Array4::<u32>::zeros((b, c, ho, wo));

        out.axis_iter_mut(Axis(0))
            .into_par_iter()
            .zip(argmax.axis_iter_mut(Axis(0)).into_par_iter())
            .zip(x.axis_iter(Axis(0)).into_par_iter())
            .for_each(|((mut ob, mut ab), xb)| {
                for ci in 0..c {
                    let plane = xb.index_axis(Axis(0), ci);
                    let plane = plane.as_slice().unwrap();
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let mut best = F::neg_infinity();
                            let mut best_idx = 0u32;
                            for ki in 0..k {
                                let iy = (oy * s + ki) as isize - p as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for kj in 0..k {
                                    let ix = (ox * s + kj) as isize - p as isize;
                                    if ix < 0 || ix >= w as isize {
                                        continue;
                                    }
                                    let v = plane[iy as usize * w + ix as usize];
                                    if v > best {
                                        best = v;
                                        best_idx = (iy as usize * w + ix as usize) as u32;
                                    }
                                }
                            }
                            ob[[ci, oy, ox]] = best;
                            ab[[ci, oy, ox]] = best_idx;
                        }
                    }
                }
            });

        if cache {
            self.cache_argmax = Some((argmax, (h, w)));
        }
        out
    }

    pub fn backward(&mut self, dy: &Array4<F>) -> Array4<F> {
        let (argmax, (h, w)) = self
            .cache_argmax
            .as_ref()
            .expect("MaxPool2d::backward without cached forward");
        let (h, w) = (*h, *w);
        let (b, c, ho, wo) = dy.dim();
        let mut dx = Array4::<F>::zeros((b, c, h, w));
        dx.axis_iter_mut(Axis(0))
            .into_par_iter()
            .zip(dy.axis_iter(Axis(0)).into_par_iter())
            .zip(argmax.axis_iter(Axis(0)).into_par_iter())
            .for_each(|((mut dxb, dyb), ab)| {
                for ci in 0..c {
                    let mut dplane = dxb.index_axis_mut(Axis(0), ci);
                    let dplane = dplane.as_slice_mut().unwrap();
                    for oy in 0..ho {
                        for ox in 0..wo {
                            dplane[ab[[ci, oy, ox]] as usize] += dyb[[ci, oy, ox]];
                        }
                    }
                }
            });
        dx
    }

    pub fn clear_cache(&mut self) {
        self.cache_argmax = None;
    }
}

/// Global average pooling (adaptive average pool to 1x1, flattened).
#[derive(Debug, Clone, Default)]
pub struct GlobalAvgPool {
    cache_hw: Option<(usize, usize)>,
}

impl GlobalAvgPool {
    pub fn new() -> Self {
        Default::default()
    }

    pub fn forward<F: Scalar>(&mut self, x: &Array4<F>, cache: bool) -> Array2<F> {
        let (_, _, h, w) = x.dim();
        if cache {
            self.cache_hw = Some((h, w));
        }
        let n = F::from_f64((h * w) as f64);
        x.sum_axis(Axis(3)).sum_axis(Axis(2)).mapv_into(|v| v / n)
    }

    pub fn backward<F: Scalar>(&self, dy: &Array2<F>) -> Array4<F> {
        let (h, w) = self.cache_hw.expect("GlobalAvgPool::backward without cached forward");
        let (b, c) = dy.dim();
        let n = F::from_f64((h * w) as f64);
        let mut dx = Array4::<F>::zeros((b, c, h, w));
        for bi in 0..b {
            for ci in 0..c {
                let v = dy[[bi, ci]] / n;
                dx.index_axis_mut(Axis(0), bi).index_axis_mut(Axis(0), ci).fill(v);
            }
        }
        dx
    }
}

/// ReLU with a boolean pass-through mask for backward.
#[derive(Debug, Clone, Default)]
pub struct Relu {
    mask: Option<Vec<bool>>,
}

impl Relu {
    pub fn new() -> Self {
        Default::default()
    }

    pub fn forward<F: Scalar>(&mut self, mut x: Array4<F>, cache: bool) -> Array4<F> {
        if cache {
            let mask = x.iter().map(|&v| v > F::zero()).collect();
            self.mask = Some(mask);
        }
        x.par_mapv_inplace(|v| if v > F::zero() { v } else { F::zero() });
        x
    }

    pub fn backward<F: Scalar>(&self, mut dy: Array4<F>) -> Array4<F> {
        let mask = self.mask.as_ref().expect("Relu::backward without cached forward");
        for (d, &m) in dy.iter_mut().zip(mask.iter()) {
            if !m {
                *d = F::zero();
            }
        }
        dy
    }

    pub fn clear_cache(&mut self) {
        self.mask = None;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn maxpool_2x2_picks_maxima_and_routes_gradient() {
        let mut pool = MaxPool2d::<f64>::new(2, 2, 0);
        let x = ndarray::Array4::from_shape_vec(
            (1, 1, 2, 4),
            vec![1.0, 2.0, 3.0, 0.0, 0.5, 0.1, -1.0, 4.0],
        )
        .unwrap();
        let y = pool.forward(&x, true);
        assert_eq!(y.dim(), (1, 1, 1, 2));
        assert_abs_diff_eq!(y[[0, 0, 0, 0]], 2.0);
        assert_abs_diff_eq!(y[[0, 0, 0, 1]], 4.0);
        let dy = ndarray::Array4::from_elem((1, 1, 1, 2), 1.0);
        let dx = pool.backward(&dy);
        assert_abs_diff_eq!(dx[[0, 0, 0, 1]], 1.0);
        assert_abs_diff_eq!(dx[[0, 1 - 1, 1, 3]], 1.0);
        assert_abs_diff_eq!(dx.sum(), 2.0);
    }

    #[test]
    fn maxpool_with_padding_ignores_padded_cells() {
        // ResNet stem pooling: 3x3 stride 2 pad 1.
        let mut pool = MaxPool2d::<f64>::new(3, 2, 1);
        let x = ndarray::Array4::from_shape_fn((1, 1, 5, 5), |(_, _, i, j)| -((i * 5 + j) as f64));
        let y = pool.forward(&x, true);
        assert_eq!(y.dim(), (1, 1, 3, 3));
        // all inputs negative; maxima must still come from real cells
        assert!(y.iter().all(|v| v.is_finite()));
        assert_abs_diff_eq!(y[[0, 0, 0, 0]], 0.0); // top-left corner value
    }

    #[test]
    fn gap_means_and_spreads_gradient() {
        let mut gap = GlobalAvgPool::new();
        let x = ndarray::Array4::from_shape_fn((2, 3, 4, 4), |(a, b, c, d)| {
            (a + b + c + d) as f64
        });
        let y = gap.forward(&x, true);
        assert_eq!(y.dim(), (2, 3));
        assert_abs_diff_eq!(y[[0, 0]], 3.0); // mean of (c + d) over 4x4 grid
        let dy = ndarray::Array2::from_elem((2, 3), 16.0);
        let dx = gap.backward(&dy);
        assert_abs_diff_eq!(dx[[0, 0, 0, 0]], 1.0);
    }

    #[test]
    fn relu_masks_gradient() {
        let mut relu = Relu::new();
        let x = ndarray::Array4::from_shape_vec((1, 1, 1, 4), vec![-1.0, 2.0, 0.0, 3.0]).unwrap();
        let y = relu.forward(x, true);
        assert_eq!(y.as_slice().unwrap(), &[0.0, 2.0, 0.0, 3.0]);
        let dy = ndarray::Array4::from_elem((1, 1, 1, 4), 5.0);
        let dx = relu.backward(dy);
        assert_eq!(dx.as_slice().unwrap(), &[0.0, 5.0, 0.0, 5.0]);
    }
}
