//! Region pooling and the re-id head: RoIAlign -> conv stage -> GAP -> BN.

use rand::Rng;

use crate::blocks::param::{join, Param, Parameterized};
use crate::blocks::stage::StageCache;
use crate::blocks::{FeatureMap, Stage, StageSpec};
use crate::error::{Error, Result};
use crate::geometry::{bilinear_taps, roi_grid, BBox};

/// Bilinearly samples an `out_h x out_w` grid over `b` from every channel of
/// `fm` (one sample per bin center).
pub fn roi_align(fm: &FeatureMap, b: &BBox, out_h: usize, out_w: usize) -> Result<FeatureMap> {
    let grid = roi_grid(b, out_h, out_w)?;
    let (c, h, w, s) = (fm.channels(), fm.height(), fm.width(), fm.stride());
    let taps: Vec<_> = grid.points.iter().map(|&(x, y)| bilinear_taps(x, y, s, h, w)).collect();
    let n = out_h * out_w;
    let mut out = vec![0.0; c * n];
    for ch in 0..c {
        let src = fm.channel(ch);
        for (o, t) in out[ch * n..(ch + 1) * n].iter_mut().zip(&taps) {
            *o = t.iter().map(|&(i, wt)| wt * src[i]).sum();
        }
    }
    FeatureMap::from_vec(c, out_h, out_w, 1, out)
}

/// Scatters a pooled-region gradient back onto a map of the source shape.
pub fn roi_align_backward(grad: &FeatureMap, b: &BBox, target: &mut FeatureMap) -> Result<()> {
    if grad.channels() != target.channels() {
        return Err(Error::config("region gradient channel count differs from feature map"));
    }
    let grid = roi_grid(b, grad.height(), grad.width())?;
    let (h, w, s) = (target.height(), target.width(), target.stride());
    let taps: Vec<_> = grid.points.iter().map(|&(x, y)| bilinear_taps(x, y, s, h, w)).collect();
    let n = grad.plane_len();
    let plane = target.plane_len();
    let dst = target.data_mut();
    for ch in 0..grad.channels() {
        let g = grad.channel(ch);
        let d = &mut dst[ch * plane..(ch + 1) * plane];
        for (gv, t) in g.iter().zip(&taps) {
            for &(i, wt) in t {
                d[i] += wt * gv;
            }
        }
    }
    debug_assert_eq!(taps.len(), n);
    Ok(())
}

/// Channel-wise global average.
pub fn global_avg_pool(x: &FeatureMap) -> Vec<f64> {
    let n = x.plane_len() as f64;
    (0..x.channels()).map(|c| x.channel(c).iter().sum::<f64>() / n).collect()
}

pub fn global_avg_pool_backward(grad: &[f64], shape: (usize, usize, usize, usize)) -> FeatureMap {
    let (c, h, w, s) = shape;
    let n = (h * w) as f64;
    let data = grad.iter().flat_map(|&g| std::iter::repeat_n(g / n, h * w)).collect();
    FeatureMap::from_vec(c, h, w, s, data).expect("pooled gradient matches shape")
}

/// 1-D batch normalisation over a batch of feature vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm1d {
    pub dim: usize,
    pub momentum: f64,
    pub eps: f64,
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Param,
    pub running_var: Param,
}

#[derive(Clone, Debug)]
pub struct BatchNormCache {
    xhat: Vec<Vec<f64>>,
    inv_std: Vec<f64>,
}

impl BatchNorm1d {
    pub fn new(dim: usize, momentum: f64) -> Self {
        BatchNorm1d {
            dim,
            momentum,
            eps: 1e-5,
            gamma: Param::from_vec(&[dim], vec![1.0; dim]),
            beta: Param::zeros(&[dim]),
            running_mean: Param::zeros(&[dim]),
            running_var: Param::from_vec(&[dim], vec![1.0; dim]),
        }
    }

    fn check(&self, batch: &[Vec<f64>]) -> Result<()> {
        if let Some(bad) = batch.iter().find(|v| v.len() != self.dim) {
            return Err(Error::config(format!(
                "batch norm expects dimension {}, got {}",
                self.dim,
                bad.len()
            )));
        }
        Ok(())
    }

    /// Normalises with batch statistics and folds them into the running
    /// estimates.
    pub fn forward_train(&mut self, batch: &[Vec<f64>]) -> Result<(Vec<Vec<f64>>, BatchNormCache)> {
        self.check(batch)?;
        let n = batch.len();
        if n == 0 {
            return Ok((
                Vec::new(),
                BatchNormCache {
                    xhat: Vec::new(),
                    inv_std: vec![0.0; self.dim],
                },
            ));
        }
        let nf = n as f64;
        let mut mean = vec![0.0; self.dim];
        for v in batch {
            for (m, x) in mean.iter_mut().zip(v) {
                *m += x / nf;
            }
        }
        let mut var = vec![0.0; self.dim];
        for v in batch {
            for ((s, x), m) in var.iter_mut().zip(v).zip(&mean) {
                *s += (x - m) * (x - m) / nf;
            }
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect();
        let xhat: Vec<Vec<f64>> = batch
            .iter()
            .map(|v| {
                v.iter()
                    .zip(&mean)
                    .zip(&inv_std)
                    .map(|((x, m), is)| (x - m) * is)
                    .collect()
            })
            .collect();
        let out = xhat
            .iter()
            .map(|xh| {
                xh.iter()
                    .enumerate()
                    .map(|(k, v)| v * self.gamma.value[k] + self.beta.value[k])
                    .collect()
            })
            .collect();
        let unbias = if n > 1 { nf / (nf - 1.0) } else { 1.0 };
        let m = self.momentum;
        for k in 0..self.dim {
            self.running_mean.value[k] = (1.0 - m) * self.running_mean.value[k] + m * mean[k];
            self.running_var.value[k] = (1.0 - m) * self.running_var.value[k] + m * var[k] * unbias;
        }
        Ok((out, BatchNormCache { xhat, inv_std }))
    }

    pub fn forward_eval(&self, batch: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        self.check(batch)?;
        Ok(batch
            .iter()
            .map(|v| {
                v.iter()
                    .enumerate()
                    .map(|(k, x)| {
                        let xh = (x - self.running_mean.value[k]) / (self.running_var.value[k] + self.eps).sqrt();
                        xh * self.gamma.value[k] + self.beta.value[k]
                    })
                    .collect()
            })
            .collect())
    }

    pub fn backward(&mut self, cache: &BatchNormCache, grad: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let n = grad.len();
        if n == 0 {
            return Vec::new();
        }
        let nf = n as f64;
        let mut sum_g = vec![0.0; self.dim];
        let mut sum_gx = vec![0.0; self.dim];
        for (g, xh) in grad.iter().zip(&cache.xhat) {
            for k in 0..self.dim {
                sum_g[k] += g[k];
                sum_gx[k] += g[k] * xh[k];
            }
        }
        {
            let dg = self.gamma.grad_mut();
            for k in 0..self.dim {
                dg[k] += sum_gx[k];
            }
        }
        {
            let db = self.beta.grad_mut();
            for k in 0..self.dim {
                db[k] += sum_g[k];
            }
        }
        grad.iter()
            .zip(&cache.xhat)
            .map(|(g, xh)| {
                (0..self.dim)
                    .map(|k| {
                        self.gamma.value[k] * cache.inv_std[k] / nf
                            * (nf * g[k] - sum_g[k] - xh[k] * sum_gx[k])
                    })
                    .collect()
            })
            .collect()
    }
}

impl Parameterized for BatchNorm1d {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        f(&join(prefix, "gamma"), &self.gamma);
        f(&join(prefix, "beta"), &self.beta);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "gamma"), &mut self.gamma);
        f(&join(prefix, "beta"), &mut self.beta);
    }

    fn visit_buffers(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        f(&join(prefix, "running_mean"), &self.running_mean);
        f(&join(prefix, "running_var"), &self.running_var);
    }

    fn visit_buffers_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "running_mean"), &mut self.running_mean);
        f(&join(prefix, "running_var"), &mut self.running_var);
    }
}

/// Region pooling, a stride-1 conv stage, global average pooling and batch
/// norm. The batch norm runs across all regions of a training step, so it
/// is applied by the caller on the pooled vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct ReidHead {
    pub roi_h: usize,
    pub roi_w: usize,
    pub stage: Stage,
    pub bn: BatchNorm1d,
}

pub struct RegionCache {
    bbox: BBox,
    stage: StageCache,
    shape: (usize, usize, usize, usize),
}

impl ReidHead {
    pub fn new<R: Rng + ?Sized>(
        in_channels: usize,
        embedding_dim: usize,
        depth: usize,
        roi: (usize, usize),
        groups: usize,
        bn_momentum: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let spec = StageSpec {
            in_channels,
            out_channels: embedding_dim,
            depth,
            downsample: false,
        };
        Ok(ReidHead {
            roi_h: roi.0,
            roi_w: roi.1,
            stage: Stage::new(spec, groups, rng)?,
            bn: BatchNorm1d::new(embedding_dim, bn_momentum),
        })
    }

    pub fn embedding_dim(&self) -> usize {
        self.bn.dim
    }

    /// Pre-normalisation feature of one region.
    pub fn pool_region(&self, fm: &FeatureMap, b: &BBox) -> Result<Vec<f64>> {
        self.pool_region_train(fm, b).map(|(v, _)| v)
    }

    pub fn pool_region_train(&self, fm: &FeatureMap, b: &BBox) -> Result<(Vec<f64>, RegionCache)> {
        let roi = roi_align(fm, b, self.roi_h, self.roi_w)?;
        let (y, stage) = self.stage.forward_train(&roi)?;
        let pooled = global_avg_pool(&y);
        Ok((
            pooled,
            RegionCache {
                bbox: *b,
                stage,
                shape: (y.channels(), y.height(), y.width(), y.stride()),
            },
        ))
    }

    /// Backpropagates one region's pooled-vector gradient into `fm_grad`.
    pub fn backward_region(&mut self, cache: &RegionCache, grad: &[f64], fm_grad: &mut FeatureMap) -> Result<()> {
        let g = global_avg_pool_backward(grad, cache.shape);
        let droi = self
            .stage
            .backward(&cache.stage, &g, true)
            .expect("input gradient requested");
        roi_align_backward(&droi, &cache.bbox, fm_grad)
    }
}

impl Parameterized for ReidHead {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.stage.visit_params(&join(prefix, "stage"), f);
        self.bn.visit_params(&join(prefix, "bn"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.stage.visit_params_mut(&join(prefix, "stage"), f);
        self.bn.visit_params_mut(&join(prefix, "bn"), f);
    }

    fn visit_buffers(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.bn.visit_buffers(&join(prefix, "bn"), f);
    }

    fn visit_buffers_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.bn.visit_buffers_mut(&join(prefix, "bn"), f);
    }
}
