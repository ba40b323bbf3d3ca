//! 2D convolution via im2col + GEMM. Batch samples are processed in
//! parallel; weight-gradient partials are accumulated over fixed-size batch
//! chunks and reduced in chunk order, so results do not depend on the rayon
//! thread count.

use super::{NamedTensor, NamedTensorMut, Param};
use crate::rng::Rng;
use crate::scalar::Scalar;
use ndarray::linalg::general_mat_mul;
use ndarray::parallel::prelude::*;
use ndarray::{Array2, Array4, ArrayView2, ArrayViewMut2, Axis, Ix1, Ix4};

/// Batch chunk size for the weight-gradient reduction. Fixed (not derived
/// from the thread count) to keep float accumulation order stable.
const GRAD_CHUNK: usize = 4;

#[derive(Debug, Clone)]
pub struct Conv2d<F: Scalar> {
    pub weight: Param<F>, // (cout, cin, k, k)
    pub bias: Option<Param<F>>,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    cache_input: Option<Array4<F>>,
}

impl<F: Scalar> Conv2d<F> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: &str,
        rng: &mut Rng,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
    ) -> Self {
        let w = super::init::kaiming_conv::<F>(rng, cout, cin, kernel, kernel);
        Conv2d {
            weight: Param::new(format!("{name}.weight"), w.into_dyn()),
            bias: bias.then(|| {
                Param::new(format!("{name}.bias"), super::init::zeros1::<F>(cout).into_dyn())
            }),
            kernel,
            stride,
            padding,
            cache_input: None,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.padding - self.kernel) / self.stride + 1,
            (w + 2 * self.padding - self.kernel) / self.stride + 1,
        )
    }

    fn weight2d(&self) -> ArrayView2<'_, F> {
        let s = self.weight.value.shape();
        let (cout, ckk) = (s[0], s[1] * s[2] * s[3]);
        self.weight
            .value
            .view()
            .into_dimensionality::<Ix4>()
            .unwrap()
            .into_shape_with_order((cout, ckk))
            .unwrap()
    }

    pub fn forward(&mut self, x: &Array4<F>, cache: bool) -> Array4<F> {
        let (b, cin, h, w) = x.dim();
        assert_eq!(cin, self.in_channels(), "conv input channel mismatch");
        let (ho, wo) = self.out_hw(h, w);
        let cout = self.out_channels();
        let (k, s, p) = (self.kernel, self.stride, self.padding);
        let ckk = cin * k * k;
        let l = ho * wo;
        let w2 = self.weight2d();

        let mut out = Array4::<F>::zeros((b, cout, ho, wo));
        out.axis_iter_mut(Axis(0))
            .into_par_iter()
            .zip(x.axis_iter(Axis(0)).into_par_iter())
            .for_each(|(o, xb)| {
                let mut cols = vec![F::zero(); ckk * l];
                im2col(xb.as_slice().unwrap(), cin, h, w, k, s, p, ho, wo, &mut cols);
                let cols_v = ArrayView2::from_shape((ckk, l), &cols).unwrap();
                let mut y: ArrayViewMut2<'_, F> =
                    o.into_shape_with_order((cout, l)).unwrap();
                general_mat_mul(F::one(), &w2, &cols_v, F::zero(), &mut y);
            });

        if let Some(bias) = &self.bias {
            let bv = bias.value.view().into_dimensionality::<Ix1>().unwrap();
            out.axis_iter_mut(Axis(0)).into_par_iter().for_each(|mut ob| {
                for (c, mut plane) in ob.outer_iter_mut().enumerate() {
                    plane += bv[c];
                }
            });
        }

        if cache {
            self.cache_input = Some(x.clone());
        }
        out
    }

    /// Accumulates weight/bias gradients and returns dL/dx.
    pub fn backward(&mut self, dy: &Array4<F>) -> Array4<F> {
        let x = self
            .cache_input
            .as_ref()
            .expect("Conv2d::backward called without cached forward");
        let (b, cin, h, w) = x.dim();
        let (_, cout, ho, wo) = dy.dim();
        let (k, s, p) = (self.kernel, self.stride, self.padding);
        let ckk = cin * k * k;
        let l = ho * wo;

        // dX, parallel per sample.
        let mut dx = Array4::<F>::zeros((b, cin, h, w));
        {
            let w2 = self.weight2d();
            dx.axis_iter_mut(Axis(0))
                .into_par_iter()
                .zip(dy.axis_iter(Axis(0)).into_par_iter())
                .for_each(|(mut dxb, dyb)| {
                    let dy_m = dyb.into_shape_with_order((cout, l)).unwrap();
                    let mut dcols = Array2::<F>::zeros((ckk, l));
                    general_mat_mul(F::one(), &w2.t(), &dy_m, F::zero(), &mut dcols);
                    col2im_add(
                        dcols.as_slice().unwrap(),
                        cin,
                        h,
                        w,
                        k,
                        s,
                        p,
                        ho,
                        wo,
                        dxb.as_slice_mut().unwrap(),
                    );
                });
        }

        // dW over fixed-size chunks, reduced in chunk order.
        let chunk_starts: Vec<usize> = (0..b).step_by(GRAD_CHUNK).collect();
        let partials: Vec<Array2<F>> = chunk_starts
            .par_iter()
            .map(|&start| {
                let end = (start + GRAD_CHUNK).min(b);
                let mut dw = Array2::<F>::zeros((cout, ckk));
                let mut cols = vec![F::zero(); ckk * l];
                for bi in start..end {
                    let xb = x.index_axis(Axis(0), bi);
                    im2col(xb.as_slice().unwrap(), cin, h, w, k, s, p, ho, wo, &mut cols);
                    let cols_v = ArrayView2::from_shape((ckk, l), &cols).unwrap();
                    let dy_m = dy
                        .index_axis(Axis(0), bi)
                        .into_shape_with_order((cout, l))
                        .unwrap();
                    general_mat_mul(F::one(), &dy_m, &cols_v.t(), F::one(), &mut dw);
                }
                dw
            })
            .collect();
        let mut dw_total = Array2::<F>::zeros((cout, ckk));
        for partial in partials {
            dw_total += &partial;
        }
        let dw4 = dw_total
            .into_shape_with_order((cout, cin, k, k))
            .unwrap()
            .into_dyn();
        self.weight.grad += &dw4;

        if let Some(bias) = &mut self.bias {
            let db = dy.sum_axis(Axis(0)).sum_axis(Axis(1)).sum_axis(Axis(1));
            bias.grad += &db.into_dyn();
        }

        dx
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<F>> {
        let mut v = vec![&mut self.weight];
        if let Some(b) = &mut self.bias {
            v.push(b);
        }
        v
    }

    pub fn named_tensors(&self) -> Vec<NamedTensor<'_, F>> {
        let mut v = vec![NamedTensor {
            name: self.weight.name.clone(),
            view: self.weight.value.view(),
            is_param: true,
        }];
        if let Some(b) = &self.bias {
            v.push(NamedTensor { name: b.name.clone(), view: b.value.view(), is_param: true });
        }
        v
    }

    pub fn named_tensors_mut(&mut self) -> Vec<NamedTensorMut<'_, F>> {
        let mut v = vec![NamedTensorMut {
            name: self.weight.name.clone(),
            view: self.weight.value.view_mut(),
        }];
        if let Some(b) = &mut self.bias {
            v.push(NamedTensorMut { name: b.name.clone(), view: b.value.view_mut() });
        }
        v
    }

    pub fn clear_cache(&mut self) {
        self.cache_input = None;
    }
}

/// x: (cin, h, w) flattened; cols: (cin*k*k, ho*wo) flattened, row-major.
#[allow(clippy::too_many_arguments)]
fn im2col<F: Scalar>(
    x: &[F],
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    cols: &mut [F],
) {
    let l = ho * wo;
    for c in 0..cin {
        let xc = &x[c * h * w..(c + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row0 = ((c * k + ki) * k + kj) * l;
                // ox range with in-bounds input column.
                let ox_lo = pad.saturating_sub(kj).div_ceil(stride.max(1)).min(wo);
                let ox_hi = if w + pad > kj {
                    (((w + pad - kj - 1) / stride) + 1).min(wo)
                } else {
                    0
                };
                for oy in 0..ho {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    let dst = &mut cols[row0 + oy * wo..row0 + (oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        dst.fill(F::zero());
                        continue;
                    }
                    let src = &xc[iy as usize * w..(iy as usize + 1) * w];
                    dst[..ox_lo].fill(F::zero());
                    dst[ox_hi.max(ox_lo)..].fill(F::zero());
                    for (ox, d) in dst.iter_mut().enumerate().take(ox_hi).skip(ox_lo) {
                        *d = src[ox * stride + kj - pad];
                    }
                }
            }
        }
    }
}

/// Scatter-add inverse of `im2col`.
#[allow(clippy::too_many_arguments)]
fn col2im_add<F: Scalar>(
    cols: &[F],
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    dx: &mut [F],
) {
    let l = ho * wo;
    for c in 0..cin {
        let dxc = &mut dx[c * h * w..(c + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row0 = ((c * k + ki) * k + kj) * l;
                let ox_lo = pad.saturating_sub(kj).div_ceil(stride.max(1)).min(wo);
                let ox_hi = if w + pad > kj {
                    (((w + pad - kj - 1) / stride) + 1).min(wo)
                } else {
                    0
                };
                for oy in 0..ho {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &cols[row0 + oy * wo..row0 + (oy + 1) * wo];
                    let drow = &mut dxc[iy as usize * w..(iy as usize + 1) * w];
                    for ox in ox_lo..ox_hi.max(ox_lo) {
                        drow[ox * stride + kj - pad] += src[ox];
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;
    use approx::assert_abs_diff_eq;

    /// Direct convolution, the independent reference for the GEMM path.
    fn conv_reference(
        x: &Array4<f64>,
        w: &ndarray::Array4<f64>,
        bias: Option<&ndarray::Array1<f64>>,
        stride: usize,
        pad: usize,
    ) -> Array4<f64> {
        let (b, cin, h, wd) = x.dim();
        let (cout, _, k, _) = w.dim();
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (wd + 2 * pad - k) / stride + 1;
        let mut y = Array4::<f64>::zeros((b, cout, ho, wo));
        for bi in 0..b {
            for co in 0..cout {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = bias.map_or(0.0, |bv| bv[co]);
                        for ci in 0..cin {
                            for ki in 0..k {
                                for kj in 0..k {
                                    let iy = (oy * stride + ki) as isize - pad as isize;
                                    let ix = (ox * stride + kj) as isize - pad as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd
                                    {
                                        acc += x[[bi, ci, iy as usize, ix as usize]]
                                            * w[[co, ci, ki, kj]];
                                    }
                                }
                            }
                        }
                        y[[bi, co, oy, ox]] = acc;
                    }
                }
            }
        }
        y
    }

    #[test]
    fn forward_matches_direct_convolution() {
        for &(stride, pad, k) in &[(1usize, 1usize, 3usize), (2, 1, 3), (2, 3, 7), (1, 0, 1)] {
            let mut rng = rng_from_seed(3);
            let mut conv = Conv2d::<f64>::new("c", &mut rng, 3, 4, k, stride, pad, true);
            let x = Array4::from_shape_fn((2, 3, 11, 9), |(a, b, c, d)| {
                ((a * 131 + b * 31 + c * 7 + d) as f64 * 0.37).sin()
            });
            let y = conv.forward(&x, false);
            let wref = conv.weight.value.view().into_dimensionality::<Ix4>().unwrap().to_owned();
            let bref = conv
                .bias
                .as_ref()
                .map(|b| b.value.view().into_dimensionality::<Ix1>().unwrap().to_owned());
            let yref = conv_reference(&x, &wref, bref.as_ref(), stride, pad);
            assert_eq!(y.dim(), yref.dim());
            for (a, b) in y.iter().zip(yref.iter()) {
                assert_abs_diff_eq!(a, b, epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = rng_from_seed(5);
        let mut conv = Conv2d::<f64>::new("c", &mut rng, 2, 3, 3, 2, 1, true);
        let x = Array4::from_shape_fn((3, 2, 7, 7), |(a, b, c, d)| {
            ((a * 53 + b * 17 + c * 5 + d) as f64 * 0.61).cos()
        });

        let loss = |conv: &mut Conv2d<f64>, x: &Array4<f64>| -> f64 {
            let y = conv.forward(x, true);
            y.iter().map(|v| v * v).sum()
        };

        let y = conv.forward(&x, true);
        let dy = y.mapv(|v| 2.0 * v);
        let dx = conv.backward(&dy);

        let h = 1e-6;
        // weight gradient
        for idx in (0..conv.weight.len()).step_by(7) {
            let orig = conv.weight.value.as_slice().unwrap()[idx];
            conv.weight.value.as_slice_mut().unwrap()[idx] = orig + h;
            let lp = loss(&mut conv, &x);
            conv.weight.value.as_slice_mut().unwrap()[idx] = orig - h;
            let lm = loss(&mut conv, &x);
            conv.weight.value.as_slice_mut().unwrap()[idx] = orig;
            let num = (lp - lm) / (2.0 * h);
            let ana = conv.weight.grad.as_slice().unwrap()[idx];
            assert_abs_diff_eq!(num, ana, epsilon = 1e-4);
        }
        // input gradient
        let mut xp = x.clone();
        for idx in (0..x.len()).step_by(11) {
            let orig = xp.as_slice().unwrap()[idx];
            xp.as_slice_mut().unwrap()[idx] = orig + h;
            let lp = loss(&mut conv, &xp);
            xp.as_slice_mut().unwrap()[idx] = orig - h;
            let lm = loss(&mut conv, &xp);
            xp.as_slice_mut().unwrap()[idx] = orig;
            let num = (lp - lm) / (2.0 * h);
            let ana = dx.as_slice().unwrap()[idx];
            assert_abs_diff_eq!(num, ana, epsilon = 1e-4);
        }
        // bias gradient: dL/db_c = sum of dy over (b, spatial)
        let db_ref = dy.sum_axis(Axis(0)).sum_axis(Axis(1)).sum_axis(Axis(1));
        for (a, b) in conv.bias.as_ref().unwrap().grad.iter().zip(db_ref.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-10);
        }
    }
}
