//! 2D convolution with SAME padding, implemented as im2col + GEMM.

use ndarray::{Array1, Array2, Array3};
use rand::Rng as _;

use super::param::{ParamVisitor, Params};
use crate::rng::Rng;
use crate::visit_pair;

/// Activations cached by a forward pass, needed for backward.
pub struct ConvCache {
    cols: Array2<f64>,
    in_shape: (usize, usize, usize),
    out_hw: (usize, usize),
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    /// Weights flattened to [out_c, in_c * k * k] so forward is one GEMM.
    pub w: Array2<f64>,
    pub b: Array1<f64>,
    pub gw: Array2<f64>,
    pub gb: Array1<f64>,
}

impl Conv2d {
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, rng: &mut Rng) -> Self {
        let fan_in = (in_channels * kernel * kernel) as f64;
        // Kaiming-uniform with ReLU gain; keeps activation variance through
        // the stacked stride-2 layers
        let bound = (6.0 / fan_in).sqrt();
        let w = Array2::from_shape_fn((out_channels, in_channels * kernel * kernel), |_| {
            rng.gen_range(-bound..bound)
        });
        Conv2d {
            in_channels,
            out_channels,
            kernel,
            stride,
            gw: Array2::zeros(w.raw_dim()),
            w,
            b: Array1::zeros(out_channels),
            gb: Array1::zeros(out_channels),
        }
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (h.div_ceil(self.stride), w.div_ceil(self.stride))
    }

    fn pad_before(&self, in_dim: usize, out_dim: usize) -> isize {
        let total = ((out_dim - 1) * self.stride + self.kernel).saturating_sub(in_dim);
        (total / 2) as isize
    }

    fn im2col(&self, x: &Array3<f64>) -> (Array2<f64>, (usize, usize)) {
        let (c, h, w) = x.dim();
        assert_eq!(c, self.in_channels, "conv input channel mismatch");
        let (oh, ow) = self.out_hw(h, w);
        let (ph, pw) = (self.pad_before(h, oh), self.pad_before(w, ow));
        let k = self.kernel;
        let mut cols = Array2::zeros((c * k * k, oh * ow));
        for ic in 0..c {
            for ki in 0..k {
                for kj in 0..k {
                    let row = (ic * k + ki) * k + kj;
                    for oy in 0..oh {
                        let iy = (oy * self.stride) as isize - ph + ki as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for ox in 0..ow {
                            let ix = (ox * self.stride) as isize - pw + kj as isize;
                            if ix >= 0 && ix < w as isize {
                                cols[(row, oy * ow + ox)] = x[(ic, iy as usize, ix as usize)];
                            }
                        }
                    }
                }
            }
        }
        (cols, (oh, ow))
    }

    pub fn forward(&self, x: &Array3<f64>) -> Array3<f64> {
        self.forward_cached(x).0
    }

    pub fn forward_cached(&self, x: &Array3<f64>) -> (Array3<f64>, ConvCache) {
        let (cols, (oh, ow)) = self.im2col(x);
        let mut y = self.w.dot(&cols);
        for (mut row, &bias) in y.rows_mut().into_iter().zip(self.b.iter()) {
            row.mapv_inplace(|v| v + bias);
        }
        let y3 = y.into_shape_with_order((self.out_channels, oh, ow)).unwrap();
        (
            y3,
            ConvCache {
                cols,
                in_shape: x.dim(),
                out_hw: (oh, ow),
            },
        )
    }

    /// Accumulates parameter gradients and returns the gradient w.r.t. the input.
    pub fn backward(&mut self, gy: &Array3<f64>, cache: &ConvCache) -> Array3<f64> {
        let (oh, ow) = cache.out_hw;
        let gy2 = gy
            .view()
            .into_shape_with_order((self.out_channels, oh * ow))
            .unwrap();
        self.gw += &gy2.dot(&cache.cols.t());
        for (gb, row) in self.gb.iter_mut().zip(gy2.rows()) {
            *gb += row.sum();
        }
        let gcols = self.w.t().dot(&gy2);
        // col2im
        let (c, h, w) = cache.in_shape;
        let k = self.kernel;
        let (ph, pw) = (self.pad_before(h, oh), self.pad_before(w, ow));
        let mut gx = Array3::zeros((c, h, w));
        for ic in 0..c {
            for ki in 0..k {
                for kj in 0..k {
                    let row = (ic * k + ki) * k + kj;
                    for oy in 0..oh {
                        let iy = (oy * self.stride) as isize - ph + ki as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for ox in 0..ow {
                            let ix = (ox * self.stride) as isize - pw + kj as isize;
                            if ix >= 0 && ix < w as isize {
                                gx[(ic, iy as usize, ix as usize)] += gcols[(row, oy * ow + ox)];
                            }
                        }
                    }
                }
            }
        }
        gx
    }

    /// Multiply-adds for one forward pass at the given input spatial size.
    pub fn flops(&self, h: usize, w: usize) -> u64 {
        let (oh, ow) = self.out_hw(h, w);
        (oh * ow * self.out_channels * self.in_channels * self.kernel * self.kernel) as u64
    }

    pub fn param_count(&self) -> usize {
        self.w.len() + self.b.len()
    }
}

impl Params for Conv2d {
    fn visit_params(&mut self, prefix: &str, f: &mut ParamVisitor) {
        visit_pair!(f, prefix, "w", self.w, self.gw);
        visit_pair!(f, prefix, "b", self.b, self.gb);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from;

    #[test]
    fn same_padding_output_shape() {
        let mut rng = rng_from(0, "t");
        let conv = Conv2d::new(1, 4, 3, 2, &mut rng);
        let x = Array3::zeros((1, 7, 7));
        assert_eq!(conv.forward(&x).dim(), (4, 4, 4));
    }

    #[test]
    fn zero_input_zero_bias_gives_zero() {
        let mut rng = rng_from(0, "t");
        let conv = Conv2d::new(2, 3, 3, 1, &mut rng);
        let y = conv.forward(&Array3::zeros((2, 5, 5)));
        assert!(y.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_is_deterministic() {
        let mut rng = rng_from(1, "t");
        let conv = Conv2d::new(1, 2, 3, 1, &mut rng);
        let x = Array3::from_shape_fn((1, 6, 6), |(_, i, j)| (i * 6 + j) as f64 * 0.01);
        assert_eq!(conv.forward(&x), conv.forward(&x));
    }

    #[test]
    fn known_3x3_sum_kernel() {
        let mut rng = rng_from(0, "t");
        let mut conv = Conv2d::new(1, 1, 3, 1, &mut rng);
        conv.w.fill(1.0);
        let x = Array3::from_elem((1, 4, 4), 1.0);
        let y = conv.forward(&x);
        // interior pixels see all 9 taps, corners only 4
        assert_eq!(y[(0, 1, 1)], 9.0);
        assert_eq!(y[(0, 0, 0)], 4.0);
    }

    #[test]
    fn flops_single_conv() {
        let mut rng = rng_from(0, "t");
        let conv = Conv2d::new(1, 1, 3, 1, &mut rng);
        // 3x3 conv, 1->1 channels, 8x8 output: 9 * 64
        assert_eq!(conv.flops(8, 8), 576);
    }
}
