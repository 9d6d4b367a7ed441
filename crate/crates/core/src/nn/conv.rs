use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{Param, Tensor};

/// Upper bound on the im2col buffer, in floats. Large images are processed
/// in bands of output rows so memory stays flat.
const COL_BUDGET: usize = 1 << 22;

/// 2-D convolution with square kernels, zero padding and stride.
///
/// Weights are laid out `[cout, cin, k, k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub weight: Param,
    pub bias: Param,
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    /// He-normal initialisation scaled for leaky ReLU activations.
    pub fn new<R: Rng + ?Sized>(
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = (cin * kernel * kernel) as f64;
        let gain = 2.0 / (1.0 + super::LEAKY_SLOPE as f64 * super::LEAKY_SLOPE as f64);
        let normal = Normal::new(0.0, (gain / fan_in).sqrt()).expect("finite std");
        let n = cout * cin * kernel * kernel;
        let w: Vec<f32> = (0..n).map(|_| normal.sample(rng) as f32).collect();
        Self {
            weight: Param::new(vec![cout, cin, kernel, kernel], w),
            bias: Param::new(vec![cout], vec![0.0; cout]),
            cin,
            cout,
            kernel,
            stride,
            pad,
        }
    }

    pub fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.kernel) / self.stride + 1,
            (w + 2 * self.pad - self.kernel) / self.stride + 1,
        )
    }

    fn k_dim(&self) -> usize {
        self.cin * self.kernel * self.kernel
    }

    fn band_rows(&self, wo: usize) -> usize {
        (COL_BUDGET / (self.k_dim() * wo).max(1)).max(1)
    }

    /// Fill `cols` (`K x rows*wo`) for output rows `[r0, r1)` of one sample.
    fn im2col(&self, x: &[f32], h: usize, w: usize, wo: usize, r0: usize, r1: usize, cols: &mut [f32]) {
        let k = self.kernel;
        let ncols = (r1 - r0) * wo;
        let (s, p) = (self.stride as isize, self.pad as isize);
        for ci in 0..self.cin {
            let plane = &x[ci * h * w..(ci + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let dst = &mut cols[row * ncols..(row + 1) * ncols];
                    for oy in r0..r1 {
                        let iy = oy as isize * s - p + ky as isize;
                        let base = (oy - r0) * wo;
                        if iy < 0 || iy >= h as isize {
                            dst[base..base + wo].iter_mut().for_each(|v| *v = 0.0);
                            continue;
                        }
                        let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                        for ox in 0..wo {
                            let ix = ox as isize * s - p + kx as isize;
                            dst[base + ox] = if ix < 0 || ix >= w as isize {
                                0.0
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    /// Scatter-add `cols` back into the input gradient of one sample.
    fn col2im(&self, cols: &[f32], h: usize, w: usize, wo: usize, r0: usize, r1: usize, dx: &mut [f32]) {
        let k = self.kernel;
        let ncols = (r1 - r0) * wo;
        let (s, p) = (self.stride as isize, self.pad as isize);
        for ci in 0..self.cin {
            let plane = &mut dx[ci * h * w..(ci + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let src = &cols[row * ncols..(row + 1) * ncols];
                    for oy in r0..r1 {
                        let iy = oy as isize * s - p + ky as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let base = (oy - r0) * wo;
                        let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                        for ox in 0..wo {
                            let ix = ox as isize * s - p + kx as isize;
                            if ix >= 0 && ix < w as isize {
                                dst[ix as usize] += src[base + ox];
                            }
                        }
                    }
                }
            }
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        let (_, wo) = self.out_size(x.h, x.w);
        self.forward_banded(x, self.band_rows(wo))
    }

    fn forward_banded(&self, x: &Tensor, band: usize) -> Tensor {
        assert_eq!(x.c, self.cin, "conv input channels");
        let (ho, wo) = self.out_size(x.h, x.w);
        let mut out = Tensor::zeros(x.n, self.cout, ho, wo);
        let kd = self.k_dim();
        let mut cols = vec![0.0f32; kd * band.min(ho) * wo];
        let plane_out = ho * wo;
        for b in 0..x.n {
            let xs = x.sample(b);
            let ys = out.sample_mut(b);
            let mut r0 = 0;
            while r0 < ho {
                let r1 = (r0 + band).min(ho);
                let ncols = (r1 - r0) * wo;
                self.im2col(xs, x.h, x.w, wo, r0, r1, &mut cols[..kd * ncols]);
                // y[:, r0*wo ..] = W (cout x K) . cols (K x ncols)
                unsafe {
                    matrixmultiply::sgemm(
                        self.cout,
                        kd,
                        ncols,
                        1.0,
                        self.weight.value.as_ptr(),
                        kd as isize,
                        1,
                        cols.as_ptr(),
                        ncols as isize,
                        1,
                        0.0,
                        ys.as_mut_ptr().add(r0 * wo),
                        plane_out as isize,
                        1,
                    );
                }
                r0 = r1;
            }
            for co in 0..self.cout {
                let bias = self.bias.value[co];
                ys[co * plane_out..(co + 1) * plane_out]
                    .iter_mut()
                    .for_each(|v| *v += bias);
            }
        }
        out
    }

    /// Accumulate parameter gradients for `dy` given the forward input `x`,
    /// and return the input gradient when `need_dx` is set.
    pub fn backward(&mut self, x: &Tensor, dy: &Tensor, need_dx: bool) -> Option<Tensor> {
        let (_, wo) = self.out_size(x.h, x.w);
        let band = self.band_rows(wo);
        self.backward_banded(x, dy, need_dx, band)
    }

    fn backward_banded(&mut self, x: &Tensor, dy: &Tensor, need_dx: bool, band: usize) -> Option<Tensor> {
        let (ho, wo) = self.out_size(x.h, x.w);
        assert_eq!((dy.n, dy.c, dy.h, dy.w), (x.n, self.cout, ho, wo), "conv grad shape");
        let kd = self.k_dim();
        let mut cols = vec![0.0f32; kd * band.min(ho) * wo];
        let mut dcols = if need_dx {
            vec![0.0f32; kd * band.min(ho) * wo]
        } else {
            Vec::new()
        };
        let mut dx = need_dx.then(|| Tensor::zeros(x.n, x.c, x.h, x.w));
        let plane_out = ho * wo;
        for b in 0..x.n {
            let xs = x.sample(b);
            let gs = dy.sample(b);
            for co in 0..self.cout {
                self.bias.grad[co] += gs[co * plane_out..(co + 1) * plane_out].iter().sum::<f32>();
            }
            let mut r0 = 0;
            while r0 < ho {
                let r1 = (r0 + band).min(ho);
                let ncols = (r1 - r0) * wo;
                self.im2col(xs, x.h, x.w, wo, r0, r1, &mut cols[..kd * ncols]);
                // dW += dy (cout x ncols) . cols^T (ncols x K)
                unsafe {
                    matrixmultiply::sgemm(
                        self.cout,
                        ncols,
                        kd,
                        1.0,
                        gs.as_ptr().add(r0 * wo),
                        plane_out as isize,
                        1,
                        cols.as_ptr(),
                        1,
                        ncols as isize,
                        1.0,
                        self.weight.grad.as_mut_ptr(),
                        kd as isize,
                        1,
                    );
                }
                if let Some(dx) = dx.as_mut() {
                    // dcols = W^T (K x cout) . dy (cout x ncols)
                    unsafe {
                        matrixmultiply::sgemm(
                            kd,
                            self.cout,
                            ncols,
                            1.0,
                            self.weight.value.as_ptr(),
                            1,
                            kd as isize,
                            gs.as_ptr().add(r0 * wo),
                            plane_out as isize,
                            1,
                            0.0,
                            dcols.as_mut_ptr(),
                            ncols as isize,
                            1,
                        );
                    }
                    self.col2im(&dcols[..kd * ncols], x.h, x.w, wo, r0, r1, dx.sample_mut(b));
                }
                r0 = r1;
            }
        }
        dx
    }

    pub fn params(&self) -> [&Param; 2] {
        [&self.weight, &self.bias]
    }

    pub fn params_mut(&mut self) -> [&mut Param; 2] {
        [&mut self.weight, &mut self.bias]
    }
}
