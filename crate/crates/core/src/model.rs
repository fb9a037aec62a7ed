//! The assembled person-search network: frozen input layer, detection
//! side-net, re-id side-net and the OIM memory.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::blocks::param::{join, Param, Parameterized};
use crate::blocks::{FeatureMap, InputLayer};
use crate::detector::{decode_and_nms, Detection, Detector, DetectorConfig};
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::reid::{OimState, ReidConfig, ReidNet, TrunkShapes};
use crate::rng::substream;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub image_width: usize,
    pub image_height: usize,
    pub input_hidden: usize,
    pub input_channels: usize,
    pub groups: usize,
    pub detector: DetectorConfig,
    pub reid: ReidConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_width: 128,
            image_height: 128,
            input_hidden: 8,
            input_channels: 16,
            groups: 4,
            detector: DetectorConfig::default(),
            reid: ReidConfig::default(),
        }
    }
}

fn half(n: usize) -> usize {
    n.div_ceil(2)
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_width < 32 || self.image_height < 32 {
            return Err(Error::config("images must be at least 32x32"));
        }
        if self.input_hidden == 0 || self.input_channels == 0 || self.groups == 0 {
            return Err(Error::config("input layer widths and group count must be positive"));
        }
        self.detector.validate()?;
        self.reid.validate()?;
        if self.detector.layer1.in_channels != self.input_channels {
            return Err(Error::config(format!(
                "detection layer1 expects {} channels but the input layer produces {}",
                self.detector.layer1.in_channels, self.input_channels
            )));
        }
        Ok(())
    }

    /// Feature shapes the re-id trunk is wired against.
    pub fn trunk_shapes(&self) -> TrunkShapes {
        let (h, w) = (half(half(self.image_height)), half(half(self.image_width)));
        let d1 = (self.detector.layer1.out_channels, half(h), half(w));
        let d2 = (self.detector.layer2.out_channels, half(d1.1), half(d1.2));
        TrunkShapes {
            input: (self.input_channels, h, w),
            taps: [d1, d2],
        }
    }

    /// Whether a detector trained under `other` can be dropped into a model
    /// built from `self`.
    pub fn detector_compatible(&self, other: &ModelConfig) -> bool {
        self.image_width == other.image_width
            && self.image_height == other.image_height
            && self.input_hidden == other.input_hidden
            && self.input_channels == other.input_channels
            && self.groups == other.groups
            && self.detector == other.detector
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PersonSearchModel {
    pub cfg: ModelConfig,
    pub input: InputLayer,
    pub det: Detector,
    pub reid: ReidNet,
    pub oim: OimState,
}

impl PersonSearchModel {
    /// Fresh model. Every part draws from its own named substream, so the
    /// input layer and detector initialisation do not depend on re-id
    /// settings.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let input = InputLayer::new(cfg.input_hidden, cfg.input_channels, &mut substream(seed, "init.input"));
        let det = Detector::new(cfg.detector.clone(), cfg.groups, &mut substream(seed, "init.det"))?;
        let reid = ReidNet::new(
            cfg.reid.clone(),
            cfg.trunk_shapes(),
            cfg.groups,
            &mut substream(seed, "init.reid"),
        )?;
        let oim = OimState::new(&cfg.reid.oim, cfg.reid.embedding_dim)?;
        Ok(PersonSearchModel {
            cfg,
            input,
            det,
            reid,
            oim,
        })
    }

    pub fn embedding_dim(&self) -> usize {
        self.cfg.reid.embedding_dim
    }

    /// Shared stride-4 features. Checks the image against the configured size.
    pub fn features(&self, image: &FeatureMap) -> Result<FeatureMap> {
        if image.width() != self.cfg.image_width || image.height() != self.cfg.image_height {
            return Err(Error::input(format!(
                "image is {}x{}, model expects {}x{}",
                image.width(),
                image.height(),
                self.cfg.image_width,
                self.cfg.image_height
            )));
        }
        self.input.forward(image)
    }

    pub fn detect(&self, image: &FeatureMap) -> Result<Vec<Detection>> {
        let x = self.features(image)?;
        let out = self.det.forward(&x)?;
        Ok(decode_and_nms(&out.preds, self.image_size(), &self.cfg.detector))
    }

    /// Eval-mode embeddings for given boxes (batch norm uses running stats).
    pub fn embed(&self, image: &FeatureMap, boxes: &[BBox]) -> Result<Vec<Vec<f64>>> {
        if boxes.is_empty() {
            return Ok(Vec::new());
        }
        let x = self.features(image)?;
        let out = self.det.forward(&x)?;
        let f = self.reid.trunk_forward(&x, &out.taps)?;
        self.embed_regions(&f, boxes)
    }

    /// Detections and their embeddings from a single forward pass.
    pub fn detect_and_embed(&self, image: &FeatureMap) -> Result<(Vec<Detection>, Vec<Vec<f64>>)> {
        let x = self.features(image)?;
        let out = self.det.forward(&x)?;
        let dets = decode_and_nms(&out.preds, self.image_size(), &self.cfg.detector);
        if dets.is_empty() {
            return Ok((dets, Vec::new()));
        }
        let f = self.reid.trunk_forward(&x, &out.taps)?;
        let boxes: Vec<BBox> = dets.iter().map(|d| d.bbox).collect();
        let emb = self.embed_regions(&f, &boxes)?;
        Ok((dets, emb))
    }

    fn embed_regions(&self, f: &FeatureMap, boxes: &[BBox]) -> Result<Vec<Vec<f64>>> {
        let pooled = boxes
            .iter()
            .map(|b| self.reid.head.pool_region(f, b))
            .collect::<Result<Vec<_>>>()?;
        self.reid.head.bn.forward_eval(&pooled)
    }

    pub fn image_size(&self) -> (usize, usize) {
        (self.cfg.image_width, self.cfg.image_height)
    }

    /// SHA-256 over the names and raw values of all parameters under the
    /// given prefixes (`""` selects everything).
    pub fn checksum(&self, prefixes: &[&str]) -> String {
        let mut h = Sha256::new();
        self.visit_params("", &mut |name, p| {
            if prefixes.iter().any(|pre| name.starts_with(pre)) {
                h.update(name.as_bytes());
                for v in &p.value {
                    h.update(v.to_le_bytes());
                }
            }
        });
        hex::encode(h.finalize())
    }

    /// Checksum of the frozen-in-stage-2 part: input layer plus detector.
    pub fn detector_checksum(&self) -> String {
        self.checksum(&[INPUT_PREFIX, DET_PREFIX])
    }

    /// Names of parameters that currently hold a gradient.
    pub fn params_with_grad(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.visit_params("", &mut |name, p| {
            if p.grad.is_some() {
                names.push(name.to_string());
            }
        });
        names
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.visit_params("", &mut |name, _| names.push(name.to_string()));
        names
    }
}

pub const INPUT_PREFIX: &str = "input.";
pub const DET_PREFIX: &str = "det.";
pub const REID_PREFIX: &str = "reid.";

impl Parameterized for PersonSearchModel {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.input.visit_params(&join(prefix, "input"), f);
        self.det.visit_params(&join(prefix, "det"), f);
        self.reid.visit_params(&join(prefix, "reid"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.input.visit_params_mut(&join(prefix, "input"), f);
        self.det.visit_params_mut(&join(prefix, "det"), f);
        self.reid.visit_params_mut(&join(prefix, "reid"), f);
    }

    fn visit_buffers(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.reid.visit_buffers(&join(prefix, "reid"), f);
        self.oim.visit_buffers(&join(prefix, "oim"), f);
    }

    fn visit_buffers_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.reid.visit_buffers_mut(&join(prefix, "reid"), f);
        self.oim.visit_buffers_mut(&join(prefix, "oim"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelConfig {
        ModelConfig {
            image_width: 64,
            image_height: 64,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn trunk_shapes_follow_strides() {
        let s = ModelConfig::default().trunk_shapes();
        assert_eq!(s.input, (16, 32, 32));
        assert_eq!(s.taps, [(24, 16, 16), (32, 8, 8)]);
    }

    #[test]
    fn embeddings_have_configured_dimension_and_repeat() {
        let m = PersonSearchModel::new(small(), 3).unwrap();
        let img = FeatureMap::filled(3, 64, 64, 1, 0.3).unwrap();
        let b = BBox::new(10.0, 8.0, 30.0, 50.0).unwrap();
        let e = m.embed(&img, &[b, b]).unwrap();
        assert_eq!(e.len(), 2);
        assert_eq!(e[0].len(), 128);
        assert_eq!(e[0], e[1]);
        assert!(m.embed(&img, &[]).unwrap().is_empty());
    }

    #[test]
    fn wrong_image_size_is_rejected() {
        let m = PersonSearchModel::new(small(), 0).unwrap();
        let img = FeatureMap::filled(3, 32, 32, 1, 0.0).unwrap();
        assert!(matches!(m.detect(&img), Err(Error::Input(_))));
    }

    #[test]
    fn same_seed_same_detector_regardless_of_reid_config() {
        let a = PersonSearchModel::new(small(), 9).unwrap();
        let mut cfg = small();
        cfg.reid.embedding_dim = 64;
        let b = PersonSearchModel::new(cfg, 9).unwrap();
        assert_eq!(a.detector_checksum(), b.detector_checksum());
        assert_ne!(a.checksum(&[REID_PREFIX]), b.checksum(&[REID_PREFIX]));
    }

    #[test]
    fn input_channel_mismatch_is_config_error() {
        let mut cfg = small();
        cfg.input_channels = 8;
        assert!(matches!(PersonSearchModel::new(cfg, 0), Err(Error::Config(_))));
    }
}
