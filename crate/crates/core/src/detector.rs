//! The detection side-network: two feature stages, a dense anchor-free
//! head on the stride-16 grid, its training loss, and box decoding.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::blocks::conv::{Conv2d, ConvCache};
use crate::blocks::param::{join, Param, Parameterized};
use crate::blocks::stage::{ConvUnit, StageCache, UnitCache};
use crate::blocks::{sigmoid, FeatureMap, Stage, StageSpec};
use crate::error::{Error, Result};
use crate::geometry::{iou, BBox};

/// Regression outputs are exponentiated; clamp keeps `exp` finite.
const MAX_LOG_DIST: f64 = 8.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    #[serde(flatten)]
    pub bbox: BBox,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorConfig {
    pub layer1: StageSpec,
    pub layer2: StageSpec,
    pub head_channels: usize,
    pub score_threshold: f64,
    pub nms_iou: f64,
    pub max_detections: usize,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
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
            head_channels: 32,
            score_threshold: 0.05,
            nms_iou: 0.5,
            max_detections: 20,
            focal_alpha: 0.25,
            focal_gamma: 2.0,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        self.layer1.validate()?;
        self.layer2.validate()?;
        if self.layer1.out_channels != self.layer2.in_channels {
            return Err(Error::config("detection layer2 input must match layer1 output"));
        }
        if !(self.layer1.downsample && self.layer2.downsample) {
            return Err(Error::config("both detection stages must downsample (stride 4 -> 8 -> 16)"));
        }
        let unit = |v: f64| v > 0.0 && v < 1.0;
        if !unit(self.score_threshold) || !unit(self.nms_iou) {
            return Err(Error::config("score_threshold and nms_iou must lie in (0, 1)"));
        }
        if self.max_detections == 0 || self.head_channels == 0 {
            return Err(Error::config("max_detections and head_channels must be positive"));
        }
        Ok(())
    }
}

/// Dense per-cell predictions on the detector grid.
///
/// `offsets` holds four planes (left, top, right, bottom) of log-distances
/// from the cell center to the box edges, in units of the stride.
#[derive(Clone, Debug, PartialEq)]
pub struct DensePreds {
    pub grid_h: usize,
    pub grid_w: usize,
    pub stride: usize,
    pub logits: Vec<f64>,
    pub offsets: Vec<f64>,
}

impl DensePreds {
    pub fn cells(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn cell_center(&self, cell: usize) -> (f64, f64) {
        let (i, j) = (cell / self.grid_w, cell % self.grid_w);
        let s = self.stride as f64;
        ((j as f64 + 0.5) * s, (i as f64 + 0.5) * s)
    }

    /// Edge distances `[l, t, r, b]` predicted at a cell.
    pub fn distances(&self, cell: usize) -> [f64; 4] {
        let n = self.cells();
        let s = self.stride as f64;
        std::array::from_fn(|k| s * self.offsets[k * n + cell].clamp(-MAX_LOG_DIST, MAX_LOG_DIST).exp())
    }

    pub fn decode_cell(&self, cell: usize) -> Option<BBox> {
        let (cx, cy) = self.cell_center(cell);
        let [l, t, r, b] = self.distances(cell);
        BBox::new(cx - l, cy - t, cx + r, cy + b).ok()
    }
}

/// Everything the detector exposes per image: the side-fusion taps (one per
/// stage) and the dense predictions.
#[derive(Clone, Debug)]
pub struct DetectorOutput {
    pub taps: Vec<FeatureMap>,
    pub preds: DensePreds,
}

pub struct DetectorCache {
    layer1: StageCache,
    layer2: StageCache,
    head: UnitCache,
    cls: ConvCache,
    reg: ConvCache,
    head_shape: (usize, usize, usize, usize),
}

/// Upstream gradients for a detector backward pass. Either part may be
/// absent: the detection loss feeds `logits`/`offsets`, the re-id branch
/// feeds `taps` through side-fusion.
#[derive(Default)]
pub struct DetectorGrads {
    pub logits: Option<Vec<f64>>,
    pub offsets: Option<Vec<f64>>,
    pub taps: Vec<Option<FeatureMap>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Detector {
    pub cfg: DetectorConfig,
    pub layer1: Stage,
    pub layer2: Stage,
    pub head: ConvUnit,
    pub cls: Conv2d,
    pub reg: Conv2d,
}

impl Detector {
    pub const NUM_TAPS: usize = 2;

    pub fn new<R: Rng + ?Sized>(cfg: DetectorConfig, groups: usize, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let layer1 = Stage::new(cfg.layer1, groups, rng)?;
        let layer2 = Stage::new(cfg.layer2, groups, rng)?;
        let head = ConvUnit::new(cfg.layer2.out_channels, cfg.head_channels, 1, groups, rng)?;
        let cls = Conv2d::new(cfg.head_channels, 1, 1, 1, rng);
        let mut reg = Conv2d::new(cfg.head_channels, 4, 1, 1, rng);
        reg.weight.value.iter_mut().for_each(|w| *w *= 0.1);
        let mut det = Detector {
            cfg,
            layer1,
            layer2,
            head,
            cls,
            reg,
        };
        // background prior of 0.01 keeps the focal loss stable early on
        det.cls.bias.value[0] = -(99.0f64).ln();
        // a stride-sized square as the initial box guess
        det.reg.bias.value.fill(0.5f64.ln());
        Ok(det)
    }

    pub fn forward(&self, x: &FeatureMap) -> Result<DetectorOutput> {
        self.forward_train(x).map(|(o, _)| o)
    }

    pub fn forward_train(&self, x: &FeatureMap) -> Result<(DetectorOutput, DetectorCache)> {
        let (x1, c1) = self.layer1.forward_train(x)?;
        let (x2, c2) = self.layer2.forward_train(&x1)?;
        let (h, ch) = self.head.forward_train(&x2)?;
        let (logits, cc) = self.cls.forward_train(&h)?;
        let (offsets, cr) = self.reg.forward_train(&h)?;
        let preds = DensePreds {
            grid_h: h.height(),
            grid_w: h.width(),
            stride: h.stride(),
            logits: logits.into_data(),
            offsets: offsets.into_data(),
        };
        let head_shape = (h.channels(), h.height(), h.width(), h.stride());
        Ok((
            DetectorOutput {
                taps: vec![x1, x2],
                preds,
            },
            DetectorCache {
                layer1: c1,
                layer2: c2,
                head: ch,
                cls: cc,
                reg: cr,
                head_shape,
            },
        ))
    }

    /// Accumulates parameter gradients. The frozen input layer sits below,
    /// so no input gradient is produced.
    pub fn backward(&mut self, cache: &DetectorCache, grads: DetectorGrads) -> Result<()> {
        let (hc, hh, hw, hs) = cache.head_shape;
        let mut g2: Option<FeatureMap> = None;
        if grads.logits.is_some() || grads.offsets.is_some() {
            let mut dh = FeatureMap::zeros(hc, hh, hw, hs)?;
            if let Some(dl) = grads.logits {
                let dl = FeatureMap::from_vec(1, hh, hw, hs, dl)?;
                let d = self.cls.backward(&cache.cls, &dl, true).expect("input grad requested");
                dh.add_assign(&d)?;
            }
            if let Some(dr) = grads.offsets {
                let dr = FeatureMap::from_vec(4, hh, hw, hs, dr)?;
                let d = self.reg.backward(&cache.reg, &dr, true).expect("input grad requested");
                dh.add_assign(&d)?;
            }
            g2 = self.head.backward(&cache.head, &dh, true);
        }
        let mut taps = grads.taps.into_iter();
        let tap1 = taps.next().flatten();
        let tap2 = taps.next().flatten();
        let g2 = add_opt(g2, tap2)?;
        let g1 = match g2 {
            Some(g) => self.layer2.backward(&cache.layer2, &g, true),
            None => None,
        };
        if let Some(g) = add_opt(g1, tap1)? {
            self.layer1.backward(&cache.layer1, &g, false);
        }
        Ok(())
    }
}

fn add_opt(a: Option<FeatureMap>, b: Option<FeatureMap>) -> Result<Option<FeatureMap>> {
    Ok(match (a, b) {
        (Some(mut a), Some(b)) => {
            a.add_assign(&b)?;
            Some(a)
        }
        (a, None) => a,
        (None, b) => b,
    })
}

impl Parameterized for Detector {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.layer1.visit_params(&join(prefix, "layer1"), f);
        self.layer2.visit_params(&join(prefix, "layer2"), f);
        self.head.visit_params(&join(prefix, "head"), f);
        self.cls.visit_params(&join(prefix, "cls"), f);
        self.reg.visit_params(&join(prefix, "reg"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.layer1.visit_params_mut(&join(prefix, "layer1"), f);
        self.layer2.visit_params_mut(&join(prefix, "layer2"), f);
        self.head.visit_params_mut(&join(prefix, "head"), f);
        self.cls.visit_params_mut(&join(prefix, "cls"), f);
        self.reg.visit_params_mut(&join(prefix, "reg"), f);
    }
}

/// Positive assignment: a cell is positive for a GT box when its center lies
/// strictly inside the box; among several such boxes the one with the nearest
/// center wins (earlier box on exact ties).
pub fn assign_targets(preds: &DensePreds, gt: &[BBox]) -> Vec<Option<usize>> {
    (0..preds.cells())
        .map(|cell| {
            let (x, y) = preds.cell_center(cell);
            let mut best: Option<(usize, f64)> = None;
            for (k, b) in gt.iter().enumerate() {
                if !b.contains_point(x, y) {
                    continue;
                }
                let (cx, cy) = b.center();
                let d = (cx - x).powi(2) + (cy - y).powi(2);
                if best.is_none_or(|(_, bd)| d < bd) {
                    best = Some((k, d));
                }
            }
            best.map(|(k, _)| k)
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionLoss {
    pub total: f64,
    pub cls: f64,
    pub bbox: f64,
    pub num_pos: usize,
}

fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// Sigmoid focal loss for one logit and its derivative.
pub fn focal_loss(z: f64, positive: bool, alpha: f64, gamma: f64) -> (f64, f64) {
    let p = sigmoid(z);
    if positive {
        let log_p = -softplus(-z);
        let w = (1.0 - p).powf(gamma);
        let loss = -alpha * w * log_p;
        let grad = alpha * w * (gamma * p * log_p - (1.0 - p));
        (loss, grad)
    } else {
        let log_q = -softplus(z);
        let w = p.powf(gamma);
        let loss = -(1.0 - alpha) * w * log_q;
        let grad = (1.0 - alpha) * w * (p - gamma * (1.0 - p) * log_q);
        (loss, grad)
    }
}

/// `-ln IoU` between a predicted and a target edge-distance quadruple that
/// share a center, with its gradient w.r.t. the predicted distances.
pub fn iou_loss(pred: [f64; 4], target: [f64; 4]) -> (f64, [f64; 4]) {
    let [pl, pt, pr, pb] = pred;
    let [gl, gt, gr, gb] = target;
    let iw = pl.min(gl) + pr.min(gr);
    let ih = pt.min(gt) + pb.min(gb);
    let inter = iw * ih;
    let area_p = (pl + pr) * (pt + pb);
    let area_g = (gl + gr) * (gt + gb);
    let union = area_p + area_g - inter;
    let loss = union.ln() - inter.ln();
    let di = [
        if pl < gl { ih } else { 0.0 },
        if pt < gt { iw } else { 0.0 },
        if pr < gr { ih } else { 0.0 },
        if pb < gb { iw } else { 0.0 },
    ];
    let da = [pt + pb, pl + pr, pt + pb, pl + pr];
    let grad = std::array::from_fn(|k| (da[k] - di[k]) / union - di[k] / inter);
    (loss, grad)
}

/// Gradients of [`detection_loss`] w.r.t. the dense predictions.
pub struct DenseGrads {
    pub logits: Vec<f64>,
    pub offsets: Vec<f64>,
}

/// Focal classification over all cells plus `-ln IoU` box regression over
/// positives, both normalised by the positive count.
pub fn detection_loss(preds: &DensePreds, gt: &[BBox], cfg: &DetectorConfig) -> (DetectionLoss, DenseGrads) {
    let n = preds.cells();
    let assignment = assign_targets(preds, gt);
    let num_pos = assignment.iter().filter(|a| a.is_some()).count();
    let norm = num_pos.max(1) as f64;
    let mut dlogits = vec![0.0; n];
    let mut doffsets = vec![0.0; 4 * n];
    let mut cls = 0.0;
    let mut bbox = 0.0;
    for cell in 0..n {
        let (l, g) = focal_loss(preds.logits[cell], assignment[cell].is_some(), cfg.focal_alpha, cfg.focal_gamma);
        cls += l / norm;
        dlogits[cell] = g / norm;
        if let Some(k) = assignment[cell] {
            let (x, y) = preds.cell_center(cell);
            let b = &gt[k];
            let target = [x - b.x1, y - b.y1, b.x2 - x, b.y2 - y];
            let dist = preds.distances(cell);
            let (l, g) = iou_loss(dist, target);
            bbox += l / norm;
            for k in 0..4 {
                let raw = preds.offsets[k * n + cell];
                if raw.abs() < MAX_LOG_DIST {
                    // d = s * exp(raw)
                    doffsets[k * n + cell] = g[k] * dist[k] / norm;
                }
            }
        }
    }
    (
        DetectionLoss {
            total: cls + bbox,
            cls,
            bbox,
            num_pos,
        },
        DenseGrads {
            logits: dlogits,
            offsets: doffsets,
        },
    )
}

/// Greedy non-maximum suppression. Input order breaks score ties.
pub fn nms(mut dets: Vec<Detection>, iou_threshold: f64, max_detections: usize) -> Vec<Detection> {
    dets.sort_by(|a, b| b.score.total_cmp(&a.score));
    let mut keep: Vec<Detection> = Vec::new();
    for d in dets {
        if keep.len() >= max_detections {
            break;
        }
        if keep.iter().all(|k| iou(&k.bbox, &d.bbox) < iou_threshold) {
            keep.push(d);
        }
    }
    keep
}

/// Scores every cell, drops those below the threshold, clips boxes to the
/// image and runs NMS.
pub fn decode_and_nms(preds: &DensePreds, image_size: (usize, usize), cfg: &DetectorConfig) -> Vec<Detection> {
    let (w, h) = (image_size.0 as f64, image_size.1 as f64);
    let dets = (0..preds.cells())
        .filter_map(|cell| {
            let score = sigmoid(preds.logits[cell]);
            if score < cfg.score_threshold {
                return None;
            }
            let bbox = preds.decode_cell(cell)?.clip(w, h)?;
            Some(Detection { bbox, score })
        })
        .collect();
    nms(dets, cfg.nms_iou, cfg.max_detections)
}
