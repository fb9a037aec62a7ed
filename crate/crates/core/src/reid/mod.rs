//! The re-id side-network: side-ada, two re-id stages fused with the
//! detection taps, the region head, and the OIM + triplet objectives.

pub mod head;
pub mod oim;
pub mod triplet;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::blocks::fusion::{SideAdaCache, SideFusionCache};
use crate::blocks::param::{join, Param, Parameterized};
use crate::blocks::stage::StageCache;
use crate::blocks::{FeatureMap, FusionMode, SideAda, SideFusion, Stage, StageSpec};
use crate::error::{Error, Result};

pub use head::{roi_align, BatchNorm1d, ReidHead};
pub use oim::{l2_normalize, OimConfig, OimState};
pub use triplet::triplet_loss;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReidConfig {
    pub layer1: StageSpec,
    pub layer2: StageSpec,
    pub fusion: FusionMode,
    pub roi_h: usize,
    pub roi_w: usize,
    pub head_depth: usize,
    pub embedding_dim: usize,
    pub bn_momentum: f64,
    pub oim: OimConfig,
    pub triplet_margin: f64,
}

impl Default for ReidConfig {
    fn default() -> Self {
        ReidConfig {
            layer1: StageSpec {
                in_channels: 16,
                out_channels: 24,
                depth: 2,
                downsample: true,
            },
            layer2: StageSpec {
                in_channels: 24,
                out_channels: 32,
                depth: 2,
                downsample: true,
            },
            fusion: FusionMode::Homogeneous,
            roi_h: 16,
            roi_w: 8,
            head_depth: 1,
            embedding_dim: 128,
            bn_momentum: 0.1,
            oim: OimConfig::default(),
            triplet_margin: 0.3,
        }
    }
}

impl ReidConfig {
    pub fn validate(&self) -> Result<()> {
        self.layer1.validate()?;
        self.layer2.validate()?;
        if self.layer1.out_channels != self.layer2.in_channels {
            return Err(Error::config("re-id layer2 input must match layer1 output"));
        }
        if self.roi_h == 0 || self.roi_w == 0 || self.embedding_dim == 0 || self.head_depth == 0 {
            return Err(Error::config("region size, head depth and embedding dimension must be positive"));
        }
        if !(self.bn_momentum > 0.0 && self.bn_momentum <= 1.0) {
            return Err(Error::config("bn_momentum must be in (0, 1]"));
        }
        if self.triplet_margin < 0.0 {
            return Err(Error::config("triplet margin must be non-negative"));
        }
        Ok(())
    }
}

/// Shapes the re-id trunk is wired against: the input-layer output and the
/// two detection taps, each `(channels, height, width)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TrunkShapes {
    pub input: (usize, usize, usize),
    pub taps: [(usize, usize, usize); 2],
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReidNet {
    pub cfg: ReidConfig,
    pub ada: SideAda,
    pub layer1: Stage,
    pub layer2: Stage,
    pub fusion: Vec<SideFusion>,
    pub head: ReidHead,
}

pub struct TrunkCache {
    ada: SideAdaCache,
    layer1: StageCache,
    fuse1: SideFusionCache,
    layer2: StageCache,
    fuse2: SideFusionCache,
}

fn downsampled(shape: (usize, usize, usize), channels: usize, down: bool) -> (usize, usize, usize) {
    if down {
        (channels, shape.1.div_ceil(2), shape.2.div_ceil(2))
    } else {
        (channels, shape.1, shape.2)
    }
}

impl ReidNet {
    pub fn new<R: Rng + ?Sized>(cfg: ReidConfig, shapes: TrunkShapes, groups: usize, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let ada_target = (cfg.layer1.in_channels, shapes.input.1, shapes.input.2);
        let ada = SideAda::new(cfg.fusion, shapes.input, ada_target, rng)?;
        let layer1 = Stage::new(cfg.layer1, groups, rng)?;
        let r1 = downsampled(ada_target, cfg.layer1.out_channels, cfg.layer1.downsample);
        let fuse1 = SideFusion::new(cfg.fusion, shapes.taps[0], r1, rng)?;
        let layer2 = Stage::new(cfg.layer2, groups, rng)?;
        let r2 = downsampled(r1, cfg.layer2.out_channels, cfg.layer2.downsample);
        let fuse2 = SideFusion::new(cfg.fusion, shapes.taps[1], r2, rng)?;
        let head = ReidHead::new(
            cfg.layer2.out_channels,
            cfg.embedding_dim,
            cfg.head_depth,
            (cfg.roi_h, cfg.roi_w),
            groups,
            cfg.bn_momentum,
            rng,
        )?;
        Ok(ReidNet {
            cfg,
            ada,
            layer1,
            layer2,
            fusion: vec![fuse1, fuse2],
            head,
        })
    }

    /// Image-level re-id features `F_img` from the shared input-layer output
    /// and the detection taps.
    pub fn trunk_forward(&self, x: &FeatureMap, taps: &[FeatureMap]) -> Result<FeatureMap> {
        self.trunk_forward_train(x, taps).map(|(y, _)| y)
    }

    pub fn trunk_forward_train(&self, x: &FeatureMap, taps: &[FeatureMap]) -> Result<(FeatureMap, TrunkCache)> {
        if taps.len() != self.fusion.len() {
            return Err(Error::config(format!(
                "re-id trunk expects {} detection taps, got {}",
                self.fusion.len(),
                taps.len()
            )));
        }
        let (a, ada) = self.ada.forward_train(x)?;
        if a.channels() != self.cfg.layer1.in_channels {
            return Err(Error::config(format!(
                "side-ada produced {} channels, re-id layer1 expects {}",
                a.channels(),
                self.cfg.layer1.in_channels
            )));
        }
        let (r1, layer1) = self.layer1.forward_train(&a)?;
        let (s1, fuse1) = self.fusion[0].forward_train(&taps[0], &r1)?;
        let (r2, layer2) = self.layer2.forward_train(&s1)?;
        let (s2, fuse2) = self.fusion[1].forward_train(&taps[1], &r2)?;
        Ok((
            s2,
            TrunkCache {
                ada,
                layer1,
                fuse1,
                layer2,
                fuse2,
            },
        ))
    }

    /// Backpropagates `grad` (w.r.t. `F_img`). Returns per-tap gradients for
    /// the detector, all `None` unless `need_det` is set.
    pub fn trunk_backward(&mut self, cache: &TrunkCache, grad: &FeatureMap, need_det: bool) -> Vec<Option<FeatureMap>> {
        let f2 = self.fusion[1].backward(&cache.fuse2, grad, need_det);
        let gs1 = self
            .layer2
            .backward(&cache.layer2, &f2.x_r, true)
            .expect("input gradient requested");
        let f1 = self.fusion[0].backward(&cache.fuse1, &gs1, need_det);
        let ada_trainable = matches!(self.ada, SideAda::Conv(_));
        if let Some(ga) = self.layer1.backward(&cache.layer1, &f1.x_r, ada_trainable) {
            self.ada.backward(&cache.ada, &ga, false);
        }
        vec![f1.x_d, f2.x_d]
    }

    pub fn alphas(&self) -> Vec<f64> {
        self.fusion.iter().filter_map(|f| f.alpha()).collect()
    }
}

impl Parameterized for ReidNet {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.ada.visit_params(&join(prefix, "side_ada"), f);
        self.layer1.visit_params(&join(prefix, "layer1"), f);
        self.layer2.visit_params(&join(prefix, "layer2"), f);
        for (i, fu) in self.fusion.iter().enumerate() {
            fu.visit_params(&join(prefix, &format!("side_fusion{}", i + 1)), f);
        }
        self.head.visit_params(&join(prefix, "head"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.ada.visit_params_mut(&join(prefix, "side_ada"), f);
        self.layer1.visit_params_mut(&join(prefix, "layer1"), f);
        self.layer2.visit_params_mut(&join(prefix, "layer2"), f);
        for (i, fu) in self.fusion.iter_mut().enumerate() {
            fu.visit_params_mut(&join(prefix, &format!("side_fusion{}", i + 1)), f);
        }
        self.head.visit_params_mut(&join(prefix, "head"), f);
    }

    fn visit_buffers(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.head.visit_buffers(&join(prefix, "head"), f);
    }

    fn visit_buffers_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.head.visit_buffers_mut(&join(prefix, "head"), f);
    }
}
