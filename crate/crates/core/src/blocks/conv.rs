use rand::Rng;

use super::param::{join, Param, Parameterized};
use super::tensor::FeatureMap;
use crate::error::{Error, Result};

/// Row-major `C = A x B + beta * C` over arbitrary strides.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (isize, isize),
    b: &[f64],
    b_strides: (isize, isize),
    beta: f64,
    c: &mut [f64],
) {
    assert!(c.len() >= m * n);
    assert!(m == 0 || k == 0 || a.len() as isize > (m as isize - 1) * a_strides.0 + (k as isize - 1) * a_strides.1);
    assert!(k == 0 || n == 0 || b.len() as isize > (k as isize - 1) * b_strides.0 + (n as isize - 1) * b_strides.1);
    // SAFETY: the asserts above bound every element the kernel touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0,
            a_strides.1,
            b.as_ptr(),
            b_strides.0,
            b_strides.1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Square-kernel 2-D convolution with "same"-style padding (`kernel / 2`).
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub weight: Param,
    pub bias: Param,
}

/// Saved forward state: the unfolded input patches.
#[derive(Clone, Debug)]
pub struct ConvCache {
    cols: Vec<f64>,
    in_h: usize,
    in_w: usize,
    in_stride: usize,
    out_h: usize,
    out_w: usize,
}

impl Conv2d {
    pub fn new<R: Rng + ?Sized>(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        Conv2d {
            in_channels,
            out_channels,
            kernel,
            stride,
            weight: Param::kaiming_uniform(&[out_channels, in_channels, kernel, kernel], fan_in, rng),
            bias: Param::zeros(&[out_channels]),
        }
    }

    pub fn padding(&self) -> usize {
        self.kernel / 2
    }

    pub fn out_size(&self, len: usize) -> usize {
        (len + 2 * self.padding() - self.kernel) / self.stride + 1
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    fn check_input(&self, x: &FeatureMap) -> Result<()> {
        if x.channels() != self.in_channels {
            return Err(Error::config(format!(
                "convolution expects {} input channels, got {}",
                self.in_channels,
                x.channels()
            )));
        }
        if x.height() + 2 * self.padding() < self.kernel || x.width() + 2 * self.padding() < self.kernel {
            return Err(Error::config("input smaller than convolution kernel"));
        }
        Ok(())
    }

    fn im2col(&self, x: &FeatureMap, out_h: usize, out_w: usize) -> Vec<f64> {
        let (k, s, p) = (self.kernel, self.stride, self.padding() as isize);
        let (h, w) = (x.height() as isize, x.width() as isize);
        let plane = out_h * out_w;
        let mut cols = vec![0.0; self.patch_len() * plane];
        for c in 0..self.in_channels {
            let src = x.channel(c);
            for ki in 0..k {
                for kj in 0..k {
                    let row = (c * k + ki) * k + kj;
                    let dst = &mut cols[row * plane..(row + 1) * plane];
                    for oy in 0..out_h {
                        let iy = (oy * s + ki) as isize - p;
                        if iy < 0 || iy >= h {
                            continue;
                        }
                        let src_row = &src[(iy * w) as usize..((iy + 1) * w) as usize];
                        let dst_row = &mut dst[oy * out_w..(oy + 1) * out_w];
                        for (ox, d) in dst_row.iter_mut().enumerate() {
                            let ix = (ox * s + kj) as isize - p;
                            if ix >= 0 && ix < w {
                                *d = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &[f64], cache: &ConvCache) -> Vec<f64> {
        let (k, s, p) = (self.kernel, self.stride, self.padding() as isize);
        let (h, w) = (cache.in_h as isize, cache.in_w as isize);
        let (out_h, out_w) = (cache.out_h, cache.out_w);
        let plane = out_h * out_w;
        let mut dx = vec![0.0; self.in_channels * cache.in_h * cache.in_w];
        for c in 0..self.in_channels {
            let dst = &mut dx[c * cache.in_h * cache.in_w..(c + 1) * cache.in_h * cache.in_w];
            for ki in 0..k {
                for kj in 0..k {
                    let row = (c * k + ki) * k + kj;
                    let src = &cols[row * plane..(row + 1) * plane];
                    for oy in 0..out_h {
                        let iy = (oy * s + ki) as isize - p;
                        if iy < 0 || iy >= h {
                            continue;
                        }
                        for ox in 0..out_w {
                            let ix = (ox * s + kj) as isize - p;
                            if ix >= 0 && ix < w {
                                dst[(iy * w + ix) as usize] += src[oy * out_w + ox];
                            }
                        }
                    }
                }
            }
        }
        dx
    }

    pub fn forward(&self, x: &FeatureMap) -> Result<FeatureMap> {
        self.forward_train(x).map(|(y, _)| y)
    }

    pub fn forward_train(&self, x: &FeatureMap) -> Result<(FeatureMap, ConvCache)> {
        self.check_input(x)?;
        let out_h = self.out_size(x.height());
        let out_w = self.out_size(x.width());
        let plane = out_h * out_w;
        let cols = self.im2col(x, out_h, out_w);
        let kk = self.patch_len() as isize;
        let mut out = vec![0.0; self.out_channels * plane];
        for (o, chunk) in out.chunks_mut(plane).enumerate() {
            chunk.fill(self.bias.value[o]);
        }
        gemm(
            self.out_channels,
            self.patch_len(),
            plane,
            &self.weight.value,
            (kk, 1),
            &cols,
            (plane as isize, 1),
            1.0,
            &mut out,
        );
        let y = FeatureMap::from_vec(self.out_channels, out_h, out_w, x.stride() * self.stride, out)?;
        Ok((
            y,
            ConvCache {
                cols,
                in_h: x.height(),
                in_w: x.width(),
                in_stride: x.stride(),
                out_h,
                out_w,
            },
        ))
    }

    /// Accumulates weight/bias gradients; returns the input gradient when
    /// `need_input` is set.
    pub fn backward(&mut self, cache: &ConvCache, grad_out: &FeatureMap, need_input: bool) -> Option<FeatureMap> {
        let plane = cache.out_h * cache.out_w;
        debug_assert_eq!(grad_out.data().len(), self.out_channels * plane);
        let kk = self.patch_len();
        let g = grad_out.data();
        // dW += dY [out, P] x cols^T [P, K]
        gemm(
            self.out_channels,
            plane,
            kk,
            g,
            (plane as isize, 1),
            &cache.cols,
            (1, plane as isize),
            1.0,
            self.weight.grad_mut(),
        );
        let db = self.bias.grad_mut();
        for (o, chunk) in g.chunks(plane).enumerate() {
            db[o] += chunk.iter().sum::<f64>();
        }
        if !need_input {
            return None;
        }
        // dcols [K, P] = W^T [K, out] x dY [out, P]
        let mut dcols = vec![0.0; kk * plane];
        gemm(
            kk,
            self.out_channels,
            plane,
            &self.weight.value,
            (1, kk as isize),
            g,
            (plane as isize, 1),
            0.0,
            &mut dcols,
        );
        let dx = self.col2im(&dcols, cache);
        Some(
            FeatureMap::from_vec(self.in_channels, cache.in_h, cache.in_w, cache.in_stride, dx)
                .expect("input gradient matches cached input shape"),
        )
    }
}

impl Parameterized for Conv2d {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}
