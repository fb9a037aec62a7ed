//! Bridges between the detection and re-id side-networks.
//!
//! Side-ada adapts the shared input-layer output for the re-id branch;
//! side-fusion blends a detection-branch tap into the re-id branch. Both
//! come in a homogeneous flavour (identity / alpha blend) and a
//! heterogeneous one (a single 1x1 convolution).

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::conv::{Conv2d, ConvCache};
use super::param::{join, Param, Parameterized};
use super::tensor::FeatureMap;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionMode {
    Homogeneous,
    Heterogeneous,
}

impl std::str::FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "homogeneous" => Ok(FusionMode::Homogeneous),
            "heterogeneous" => Ok(FusionMode::Heterogeneous),
            other => Err(Error::config(format!("unknown fusion mode '{other}'"))),
        }
    }
}

pub fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// `alpha * x_d + (1 - alpha) * x_r`, elementwise.
pub fn blend(x_d: &FeatureMap, x_r: &FeatureMap, alpha: f64) -> Result<FeatureMap> {
    if !x_d.same_shape(x_r) {
        return Err(Error::config(format!(
            "side-fusion blend needs equal shapes, got {:?} and {:?}",
            x_d.shape(),
            x_r.shape()
        )));
    }
    let mut out = x_r.clone();
    for (o, d) in out.data_mut().iter_mut().zip(x_d.data()) {
        *o = alpha * d + (1.0 - alpha) * *o;
    }
    Ok(out)
}

/// Spatial ratio between two resolutions as a conv stride.
fn stride_for(from: (usize, usize), to: (usize, usize)) -> Result<usize> {
    let ratio = from.0 / to.0.max(1);
    let out = |len: usize| (len - 1) / ratio + 1;
    if ratio == 0 || !ratio.is_power_of_two() || out(from.0) != to.0 || out(from.1) != to.1 {
        return Err(Error::config(format!(
            "cannot map a {}x{} map onto {}x{} with a strided 1x1 convolution",
            from.0, from.1, to.0, to.1
        )));
    }
    Ok(ratio)
}

#[derive(Clone, Debug, PartialEq)]
pub enum SideAda {
    Identity,
    Conv(Conv2d),
}

#[derive(Debug)]
pub enum SideAdaCache {
    Identity,
    Conv(ConvCache),
}

impl SideAda {
    /// Builds the adapter mapping a `c x h x w` input onto the re-id
    /// network's expected `c' x h' x w'`.
    pub fn new<R: Rng + ?Sized>(
        mode: FusionMode,
        input: (usize, usize, usize),
        target: (usize, usize, usize),
        rng: &mut R,
    ) -> Result<Self> {
        match mode {
            FusionMode::Homogeneous => {
                if input != target {
                    return Err(Error::config(format!(
                        "homogeneous side-ada needs matching shapes, got {input:?} -> {target:?}"
                    )));
                }
                Ok(SideAda::Identity)
            }
            FusionMode::Heterogeneous => {
                let stride = stride_for((input.1, input.2), (target.1, target.2))?;
                Ok(SideAda::Conv(Conv2d::new(input.0, target.0, 1, stride, rng)))
            }
        }
    }

    pub fn forward_train(&self, x: &FeatureMap) -> Result<(FeatureMap, SideAdaCache)> {
        match self {
            SideAda::Identity => Ok((x.clone(), SideAdaCache::Identity)),
            SideAda::Conv(conv) => {
                let (y, c) = conv.forward_train(x)?;
                Ok((y, SideAdaCache::Conv(c)))
            }
        }
    }

    pub fn forward(&self, x: &FeatureMap) -> Result<FeatureMap> {
        self.forward_train(x).map(|(y, _)| y)
    }

    pub fn backward(&mut self, cache: &SideAdaCache, grad_out: &FeatureMap, need_input: bool) -> Option<FeatureMap> {
        match (self, cache) {
            (SideAda::Identity, SideAdaCache::Identity) => need_input.then(|| grad_out.clone()),
            (SideAda::Conv(conv), SideAdaCache::Conv(c)) => conv.backward(c, grad_out, need_input),
            _ => unreachable!("side-ada cache does not match module"),
        }
    }
}

impl Parameterized for SideAda {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        if let SideAda::Conv(conv) = self {
            conv.visit_params(&join(prefix, "conv"), f);
        }
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        if let SideAda::Conv(conv) = self {
            conv.visit_params_mut(&join(prefix, "conv"), f);
        }
    }
}

/// Learnable fusion of a detection tap `x_d` into the re-id stream `x_r`.
///
/// The blend weight is stored as an unconstrained logit so `alpha` stays in
/// `[0, 1]` under any update.
#[derive(Clone, Debug, PartialEq)]
pub enum SideFusion {
    Blend { logit: Param },
    Conv(Conv2d),
}

#[derive(Debug)]
pub enum SideFusionCache {
    Blend { x_d: FeatureMap, x_r: FeatureMap },
    Conv(ConvCache),
}

/// Gradients of a fusion w.r.t. its two inputs.
#[derive(Debug)]
pub struct FusionGrads {
    pub x_d: Option<FeatureMap>,
    pub x_r: FeatureMap,
}

impl SideFusion {
    pub fn new<R: Rng + ?Sized>(
        mode: FusionMode,
        det: (usize, usize, usize),
        reid: (usize, usize, usize),
        rng: &mut R,
    ) -> Result<Self> {
        match mode {
            FusionMode::Homogeneous => {
                if det != reid {
                    return Err(Error::config(format!(
                        "homogeneous side-fusion needs matching shapes, got {det:?} and {reid:?}"
                    )));
                }
                Ok(SideFusion::with_alpha(0.5))
            }
            FusionMode::Heterogeneous => {
                let stride = stride_for((det.1, det.2), (reid.1, reid.2))?;
                Ok(SideFusion::Conv(Conv2d::new(det.0, reid.0, 1, stride, rng)))
            }
        }
    }

    /// Homogeneous fusion with a fixed starting blend weight. `alpha` of
    /// exactly 0 or 1 maps to an infinite logit, which the sigmoid returns
    /// exactly.
    pub fn with_alpha(alpha: f64) -> Self {
        let logit = (alpha / (1.0 - alpha)).ln();
        SideFusion::Blend {
            logit: Param::from_vec(&[1], vec![logit]),
        }
    }

    pub fn alpha(&self) -> Option<f64> {
        match self {
            SideFusion::Blend { logit } => Some(sigmoid(logit.value[0])),
            SideFusion::Conv(_) => None,
        }
    }

    pub fn forward(&self, x_d: &FeatureMap, x_r: &FeatureMap) -> Result<FeatureMap> {
        match self {
            SideFusion::Blend { .. } => blend(x_d, x_r, self.alpha().expect("blend")),
            SideFusion::Conv(conv) => {
                let mut y = conv.forward(x_d)?;
                y.add_assign(x_r).map_err(|_| {
                    Error::config(format!(
                        "side-fusion conv maps {:?} to {:?}, re-id stream is {:?}",
                        x_d.shape(),
                        y.shape(),
                        x_r.shape()
                    ))
                })?;
                Ok(y)
            }
        }
    }

    pub fn forward_train(&self, x_d: &FeatureMap, x_r: &FeatureMap) -> Result<(FeatureMap, SideFusionCache)> {
        match self {
            SideFusion::Blend { .. } => {
                let y = self.forward(x_d, x_r)?;
                Ok((
                    y,
                    SideFusionCache::Blend {
                        x_d: x_d.clone(),
                        x_r: x_r.clone(),
                    },
                ))
            }
            SideFusion::Conv(conv) => {
                let (mut y, c) = conv.forward_train(x_d)?;
                y.add_assign(x_r)?;
                Ok((y, SideFusionCache::Conv(c)))
            }
        }
    }

    /// `need_det` controls whether a gradient for the detection tap is
    /// produced at all; with it unset nothing flows back into the detector.
    pub fn backward(&mut self, cache: &SideFusionCache, grad_out: &FeatureMap, need_det: bool) -> FusionGrads {
        match (self, cache) {
            (SideFusion::Blend { logit }, SideFusionCache::Blend { x_d, x_r }) => {
                let alpha = sigmoid(logit.value[0]);
                let g = grad_out.data();
                let dalpha: f64 = g
                    .iter()
                    .zip(x_d.data().iter().zip(x_r.data()))
                    .map(|(g, (d, r))| g * (d - r))
                    .sum();
                logit.grad_mut()[0] += dalpha * alpha * (1.0 - alpha);
                FusionGrads {
                    x_d: need_det.then(|| grad_out.scaled(alpha)),
                    x_r: grad_out.scaled(1.0 - alpha),
                }
            }
            (SideFusion::Conv(conv), SideFusionCache::Conv(c)) => FusionGrads {
                x_d: conv.backward(c, grad_out, need_det),
                x_r: grad_out.clone(),
            },
            _ => unreachable!("side-fusion cache does not match module"),
        }
    }
}

impl Parameterized for SideFusion {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        match self {
            SideFusion::Blend { logit } => f(&join(prefix, "alpha_logit"), logit),
            SideFusion::Conv(conv) => conv.visit_params(&join(prefix, "conv"), f),
        }
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        match self {
            SideFusion::Blend { logit } => f(&join(prefix, "alpha_logit"), logit),
            SideFusion::Conv(conv) => conv.visit_params_mut(&join(prefix, "conv"), f),
        }
    }
}
