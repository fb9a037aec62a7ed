use rand::Rng;
use serde::{Deserialize, Serialize};

use super::conv::{Conv2d, ConvCache};
use super::norm::{relu_backward, relu_inplace, GroupNorm, GroupNormCache};
use super::param::{join, Param, Parameterized};
use super::tensor::FeatureMap;
use crate::error::{Error, Result};

/// Shape contract of one convolution stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub depth: usize,
    pub downsample: bool,
}

impl StageSpec {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::config("stage channels must be positive"));
        }
        if self.depth == 0 {
            return Err(Error::config("stage depth must be at least 1"));
        }
        Ok(())
    }
}

/// conv3x3 -> group norm -> ReLU
#[derive(Clone, Debug, PartialEq)]
pub struct ConvUnit {
    pub conv: Conv2d,
    pub norm: GroupNorm,
}

#[derive(Clone, Debug)]
pub struct UnitCache {
    conv: ConvCache,
    norm: GroupNormCache,
    mask: Vec<bool>,
}

impl ConvUnit {
    pub fn new<R: Rng + ?Sized>(
        in_channels: usize,
        out_channels: usize,
        stride: usize,
        groups: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(ConvUnit {
            conv: Conv2d::new(in_channels, out_channels, 3, stride, rng),
            norm: GroupNorm::new(groups, out_channels)?,
        })
    }

    pub fn forward_train(&self, x: &FeatureMap) -> Result<(FeatureMap, UnitCache)> {
        let (y, conv) = self.conv.forward_train(x)?;
        let (mut y, norm) = self.norm.forward_train(&y)?;
        let mask = relu_inplace(&mut y);
        Ok((y, UnitCache { conv, norm, mask }))
    }

    pub fn backward(&mut self, cache: &UnitCache, grad_out: &FeatureMap, need_input: bool) -> Option<FeatureMap> {
        let mut g = grad_out.clone();
        relu_backward(&mut g, &cache.mask);
        let g = self.norm.backward(&cache.norm, &g);
        self.conv.backward(&cache.conv, &g, need_input)
    }
}

impl Parameterized for ConvUnit {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.conv.visit_params(&join(prefix, "conv"), f);
        self.norm.visit_params(&join(prefix, "norm"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.conv.visit_params_mut(&join(prefix, "conv"), f);
        self.norm.visit_params_mut(&join(prefix, "norm"), f);
    }
}

/// A stack of [`ConvUnit`]s; the first one halves the resolution when the
/// spec asks for downsampling.
#[derive(Clone, Debug, PartialEq)]
pub struct Stage {
    pub spec: StageSpec,
    pub units: Vec<ConvUnit>,
}

#[derive(Clone, Debug)]
pub struct StageCache {
    units: Vec<UnitCache>,
}

impl Stage {
    pub fn new<R: Rng + ?Sized>(spec: StageSpec, groups: usize, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let units = (0..spec.depth)
            .map(|i| {
                let (cin, stride) = if i == 0 {
                    (spec.in_channels, if spec.downsample { 2 } else { 1 })
                } else {
                    (spec.out_channels, 1)
                };
                ConvUnit::new(cin, spec.out_channels, stride, groups, rng)
            })
            .collect::<Result<_>>()?;
        Ok(Stage { spec, units })
    }

    pub fn forward(&self, x: &FeatureMap) -> Result<FeatureMap> {
        self.forward_train(x).map(|(y, _)| y)
    }

    pub fn forward_train(&self, x: &FeatureMap) -> Result<(FeatureMap, StageCache)> {
        if x.channels() != self.spec.in_channels {
            return Err(Error::config(format!(
                "stage expects {} input channels, got {}",
                self.spec.in_channels,
                x.channels()
            )));
        }
        let mut caches = Vec::with_capacity(self.units.len());
        let mut cur: Option<FeatureMap> = None;
        for unit in &self.units {
            let (y, c) = unit.forward_train(cur.as_ref().unwrap_or(x))?;
            caches.push(c);
            cur = Some(y);
        }
        Ok((cur.expect("depth >= 1"), StageCache { units: caches }))
    }

    pub fn backward(&mut self, cache: &StageCache, grad_out: &FeatureMap, need_input: bool) -> Option<FeatureMap> {
        let mut g = grad_out.clone();
        let n = self.units.len();
        for (i, (unit, c)) in self.units.iter_mut().zip(&cache.units).enumerate().rev() {
            let need = i > 0 || need_input;
            match unit.backward(c, &g, need) {
                Some(next) => g = next,
                None => {
                    debug_assert!(i == 0 && n > 0);
                    return None;
                }
            }
        }
        Some(g)
    }
}

impl Parameterized for Stage {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        for (i, u) in self.units.iter().enumerate() {
            u.visit_params(&join(prefix, &i.to_string()), f);
        }
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        for (i, u) in self.units.iter_mut().enumerate() {
            u.visit_params_mut(&join(prefix, &i.to_string()), f);
        }
    }
}
