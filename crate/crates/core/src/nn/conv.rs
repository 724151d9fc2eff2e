//! 2-D convolution and pooling on NHWC batches (im2col + GEMM).

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, Array4, ArrayView4, Axis};

use super::{join, Module, Param, Real};
use crate::rng::Rng;

/// Square-kernel convolution. Weight is stored as (k·k·C_in, C_out) with
/// rows ordered (ky, kx, c_in).
#[derive(Clone, Debug)]
pub struct Conv2d<F> {
    pub weight: Param<F>,
    pub bias: Param<F>,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

#[derive(Clone, Debug)]
pub struct ConvCache<F> {
    cols: Array2<F>,
    input_dim: (usize, usize, usize, usize),
}

fn out_size(n: usize, k: usize, s: usize, p: usize) -> usize {
    (n + 2 * p - k) / s + 1
}

impl<F: Real> Conv2d<F> {
    /// Uniform(±1/sqrt(k·k·C_in)).
    pub fn new(c_in: usize, c_out: usize, kernel: usize, stride: usize, padding: usize, rng: &mut Rng) -> Self {
        let fan_in = kernel * kernel * c_in;
        let bound = 1.0 / (fan_in as f64).sqrt();
        Conv2d {
            weight: Param::uniform(&[fan_in, c_out], bound, rng),
            bias: Param::uniform(&[c_out], bound, rng),
            kernel,
            stride,
            padding,
        }
    }

    pub fn zeros(c_in: usize, c_out: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        Conv2d {
            weight: Param::zeros(&[kernel * kernel * c_in, c_out]),
            bias: Param::zeros(&[c_out]),
            kernel,
            stride,
            padding,
        }
    }

    pub fn c_in(&self) -> usize {
        self.weight.shape()[0] / (self.kernel * self.kernel)
    }

    pub fn c_out(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn output_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            out_size(h, self.kernel, self.stride, self.padding),
            out_size(w, self.kernel, self.stride, self.padding),
        )
    }

    fn im2col(&self, x: ArrayView4<F>) -> Array2<F> {
        let (b, h, w, c) = x.dim();
        let (ho, wo) = self.output_hw(h, w);
        let k = self.kernel;
        let x = x.as_standard_layout();
        let src = x.as_slice().expect("standard layout");
        let row_len = k * k * c;
        let mut cols = vec![F::zero(); b * ho * wo * row_len];
        for n in 0..b {
            for oy in 0..ho {
                for ox in 0..wo {
                    let row = ((n * ho + oy) * wo + ox) * row_len;
                    for ky in 0..k {
                        let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let s0 = ((n * h + iy as usize) * w + ix as usize) * c;
                            let d0 = row + (ky * k + kx) * c;
                            cols[d0..d0 + c].copy_from_slice(&src[s0..s0 + c]);
                        }
                    }
                }
            }
        }
        Array2::from_shape_vec((b * ho * wo, row_len), cols).expect("im2col shape")
    }

    fn col2im(&self, dcols: &Array2<F>, dim: (usize, usize, usize, usize)) -> Array4<F> {
        let (b, h, w, c) = dim;
        let (ho, wo) = self.output_hw(h, w);
        let k = self.kernel;
        let mut dx = vec![F::zero(); b * h * w * c];
        let src = dcols.as_slice().expect("standard layout");
        let row_len = k * k * c;
        for n in 0..b {
            for oy in 0..ho {
                for ox in 0..wo {
                    let row = ((n * ho + oy) * wo + ox) * row_len;
                    for ky in 0..k {
                        let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let d0 = ((n * h + iy as usize) * w + ix as usize) * c;
                            let s0 = row + (ky * k + kx) * c;
                            for (d, s) in dx[d0..d0 + c].iter_mut().zip(&src[s0..s0 + c]) {
                                *d += *s;
                            }
                        }
                    }
                }
            }
        }
        Array4::from_shape_vec(dim, dx).expect("col2im shape")
    }

    pub fn forward(&self, x: ArrayView4<F>) -> (Array4<F>, ConvCache<F>) {
        let (b, h, w, _) = x.dim();
        let (ho, wo) = self.output_hw(h, w);
        let cols = self.im2col(x);
        let mut y = cols.dot(&self.weight.mat());
        y += &self.bias.vec();
        let y = y
            .into_shape_with_order((b, ho, wo, self.c_out()))
            .expect("conv output shape");
        (
            y,
            ConvCache {
                cols,
                input_dim: x.dim(),
            },
        )
    }

    /// Returns dL/dx when `input_grad` is set (skip it for the first layer).
    pub fn backward(&mut self, cache: &ConvCache<F>, dy: ArrayView4<F>, input_grad: bool) -> Option<Array4<F>> {
        let rows = cache.cols.nrows();
        let dy = dy.as_standard_layout();
        let dy2 = dy
            .view()
            .into_shape_with_order((rows, self.c_out()))
            .expect("dy rows");
        if !self.weight.frozen {
            general_mat_mul(F::one(), &cache.cols.t(), &dy2, F::one(), &mut self.weight.grad_mat());
        }
        if !self.bias.frozen {
            let db = dy2.sum_axis(Axis(0));
            self.bias.grad_vec().zip_mut_with(&db, |a, &d| *a += d);
        }
        input_grad.then(|| {
            let dcols = dy2.dot(&self.weight.mat().t());
            self.col2im(&dcols, cache.input_dim)
        })
    }
}

impl<F: Real> Module<F> for Conv2d<F> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(String, &Param<F>)) {
        f(join(prefix, "weight"), &self.weight);
        f(join(prefix, "bias"), &self.bias);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<F>)) {
        f(join(prefix, "weight"), &mut self.weight);
        f(join(prefix, "bias"), &mut self.bias);
    }
}

/// 2×2 max pooling with stride 2.
#[derive(Clone, Copy, Debug, Default)]
pub struct MaxPool2;

#[derive(Clone, Debug)]
pub struct MaxPoolCache {
    argmax: Vec<usize>,
    input_dim: (usize, usize, usize, usize),
}

impl MaxPool2 {
    pub fn forward<F: Real>(&self, x: ArrayView4<F>) -> (Array4<F>, MaxPoolCache) {
        let (b, h, w, c) = x.dim();
        let (ho, wo) = (h / 2, w / 2);
        let x = x.as_standard_layout();
        let src = x.as_slice().expect("standard layout");
        let mut out = Vec::with_capacity(b * ho * wo * c);
        let mut argmax = Vec::with_capacity(b * ho * wo * c);
        for n in 0..b {
            for oy in 0..ho {
                for ox in 0..wo {
                    for ch in 0..c {
                        let mut best = usize::MAX;
                        for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                            let idx = ((n * h + 2 * oy + dy) * w + 2 * ox + dx) * c + ch;
                            if best == usize::MAX || src[idx] > src[best] {
                                best = idx;
                            }
                        }
                        out.push(src[best]);
                        argmax.push(best);
                    }
                }
            }
        }
        (
            Array4::from_shape_vec((b, ho, wo, c), out).expect("pool shape"),
            MaxPoolCache {
                argmax,
                input_dim: (b, h, w, c),
            },
        )
    }

    pub fn backward<F: Real>(&self, cache: &MaxPoolCache, dy: ArrayView4<F>) -> Array4<F> {
        let mut dx = Array4::zeros(cache.input_dim);
        let flat = dx.as_slice_mut().expect("standard layout");
        for (&i, &g) in cache.argmax.iter().zip(dy.iter()) {
            flat[i] += g;
        }
        dx
    }
}

/// Fixed (non-trainable) `k×k` average pooling with stride `k`.
#[derive(Clone, Copy, Debug)]
pub struct AvgPool(pub usize);

impl AvgPool {
    /// Pools a single HWC image.
    pub fn apply<F: Real>(&self, x: ndarray::ArrayView3<F>) -> ndarray::Array3<F> {
        let k = self.0;
        let (h, w, c) = x.dim();
        let scale = F::lit(1.0 / (k * k) as f64);
        let mut out = ndarray::Array3::zeros((h / k, w / k, c));
        for ((oy, ox, ch), v) in out.indexed_iter_mut() {
            let mut acc = F::zero();
            for dy in 0..k {
                for dx in 0..k {
                    acc += x[[oy * k + dy, ox * k + dx, ch]];
                }
            }
            *v = acc * scale;
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array3};

    #[test]
    fn identity_like_kernel_on_hand_patch() {
        // 3×3 kernel that picks the centre pixel plus half of the right
        // neighbour, single channel, padding 1.
        let mut conv = Conv2d::<f64>::zeros(1, 1, 3, 1, 1);
        let mut w = conv.weight.mat_mut();
        w[[4, 0]] = 1.0; // (ky=1, kx=1)
        w[[5, 0]] = 0.5; // (ky=1, kx=2)
        conv.bias.value = array![0.25].into_dyn();
        let img = array![[1.0, 2.0, 3.0], [4.0, 5.0, 6.0], [7.0, 8.0, 9.0]];
        let x = img.clone().into_shape_with_order((1, 3, 3, 1)).unwrap();
        let (y, _) = conv.forward(x.view());
        for r in 0..3 {
            for c in 0..3 {
                let right = if c + 1 < 3 { img[[r, c + 1]] } else { 0.0 };
                let expected = img[[r, c]] + 0.5 * right + 0.25;
                assert!((y[[0, r, c, 0]] - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn strided_output_size() {
        let conv = Conv2d::<f32>::zeros(3, 8, 3, 2, 1);
        assert_eq!(conv.output_hw(56, 56), (28, 28));
        assert_eq!(conv.output_hw(7, 7), (4, 4));
    }

    #[test]
    fn max_pool_routes_gradient_to_max() {
        let x = array![[1.0, 4.0], [3.0, 2.0]].into_shape_with_order((1, 2, 2, 1)).unwrap();
        let (y, cache) = MaxPool2.forward::<f64>(x.view());
        assert_eq!(y[[0, 0, 0, 0]], 4.0);
        let dx = MaxPool2.backward(&cache, Array4::from_elem((1, 1, 1, 1), 1.0).view());
        assert_eq!(dx.into_raw_vec_and_offset().0, vec![0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn avg_pool_means() {
        let x = Array3::from_shape_fn((4, 4, 1), |(y, x, _)| (y * 4 + x) as f64);
        let p = AvgPool(2).apply(x.view());
        assert_eq!(p[[0, 0, 0]], (0.0 + 1.0 + 4.0 + 5.0) / 4.0);
        assert_eq!(p.dim(), (2, 2, 1));
    }
}
