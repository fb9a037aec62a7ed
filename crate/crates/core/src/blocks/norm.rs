use super::param::{join, Param, Parameterized};
use super::tensor::FeatureMap;
use crate::error::{Error, Result};

const EPS: f64 = 1e-5;

/// Group normalisation with a per-channel affine transform. Statistics are
/// computed per sample, so train and eval behave identically.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupNorm {
    pub groups: usize,
    pub channels: usize,
    pub gamma: Param,
    pub beta: Param,
}

#[derive(Clone, Debug)]
pub struct GroupNormCache {
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
}

impl GroupNorm {
    pub fn new(groups: usize, channels: usize) -> Result<Self> {
        if groups == 0 || channels % groups != 0 {
            return Err(Error::config(format!(
                "{channels} channels cannot be split into {groups} groups"
            )));
        }
        Ok(GroupNorm {
            groups,
            channels,
            gamma: Param::from_vec(&[channels], vec![1.0; channels]),
            beta: Param::zeros(&[channels]),
        })
    }

    pub fn forward_train(&self, x: &FeatureMap) -> Result<(FeatureMap, GroupNormCache)> {
        if x.channels() != self.channels {
            return Err(Error::config(format!(
                "group norm expects {} channels, got {}",
                self.channels,
                x.channels()
            )));
        }
        let plane = x.plane_len();
        let group_len = self.channels / self.groups * plane;
        let mut xhat = vec![0.0; x.data().len()];
        let mut inv_std = Vec::with_capacity(self.groups);
        for (src, dst) in x.data().chunks(group_len).zip(xhat.chunks_mut(group_len)) {
            let n = group_len as f64;
            let mean = src.iter().sum::<f64>() / n;
            let var = src.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let istd = 1.0 / (var + EPS).sqrt();
            for (d, s) in dst.iter_mut().zip(src) {
                *d = (s - mean) * istd;
            }
            inv_std.push(istd);
        }
        let mut out = xhat.clone();
        for (c, chunk) in out.chunks_mut(plane).enumerate() {
            let (ga, be) = (self.gamma.value[c], self.beta.value[c]);
            chunk.iter_mut().for_each(|v| *v = *v * ga + be);
        }
        let y = FeatureMap::from_vec(x.channels(), x.height(), x.width(), x.stride(), out)?;
        Ok((y, GroupNormCache { xhat, inv_std }))
    }

    pub fn backward(&mut self, cache: &GroupNormCache, grad_out: &FeatureMap) -> FeatureMap {
        let plane = grad_out.plane_len();
        let g = grad_out.data();
        {
            let dgamma = self.gamma.grad_mut();
            for c in 0..self.channels {
                let r = c * plane..(c + 1) * plane;
                dgamma[c] += g[r.clone()].iter().zip(&cache.xhat[r]).map(|(a, b)| a * b).sum::<f64>();
            }
        }
        {
            let dbeta = self.beta.grad_mut();
            for c in 0..self.channels {
                dbeta[c] += g[c * plane..(c + 1) * plane].iter().sum::<f64>();
            }
        }
        let mut dxhat = g.to_vec();
        for (c, chunk) in dxhat.chunks_mut(plane).enumerate() {
            let ga = self.gamma.value[c];
            chunk.iter_mut().for_each(|v| *v *= ga);
        }
        let group_len = self.channels / self.groups * plane;
        let n = group_len as f64;
        let mut dx = vec![0.0; g.len()];
        for ((dxh, xh), (d, istd)) in dxhat
            .chunks(group_len)
            .zip(cache.xhat.chunks(group_len))
            .zip(dx.chunks_mut(group_len).zip(&cache.inv_std))
        {
            let sum_d: f64 = dxh.iter().sum();
            let sum_dx: f64 = dxh.iter().zip(xh).map(|(a, b)| a * b).sum();
            for ((o, a), b) in d.iter_mut().zip(dxh).zip(xh) {
                *o = istd / n * (n * a - sum_d - b * sum_dx);
            }
        }
        FeatureMap::from_vec(
            grad_out.channels(),
            grad_out.height(),
            grad_out.width(),
            grad_out.stride(),
            dx,
        )
        .expect("gradient keeps its shape")
    }
}

impl Parameterized for GroupNorm {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        f(&join(prefix, "gamma"), &self.gamma);
        f(&join(prefix, "beta"), &self.beta);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "gamma"), &mut self.gamma);
        f(&join(prefix, "beta"), &mut self.beta);
    }
}

/// In-place ReLU; returns the activation mask for the backward pass.
pub fn relu_inplace(x: &mut FeatureMap) -> Vec<bool> {
    x.data_mut()
        .iter_mut()
        .map(|v| {
            let keep = *v > 0.0;
            if !keep {
                *v = 0.0;
            }
            keep
        })
        .collect()
}

pub fn relu_backward(grad: &mut FeatureMap, mask: &[bool]) {
    for (g, &m) in grad.data_mut().iter_mut().zip(mask) {
        if !m {
            *g = 0.0;
        }
    }
}
