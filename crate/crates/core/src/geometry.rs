//! Boxes, overlap, region sampling grids and spatial-noise box augmentation.

use rand::distributions::{Distribution, Open01};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned person box in image pixel coordinates, stored as corners.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let b = BBox { x1, y1, x2, y2 };
        if b.is_valid() {
            Ok(b)
        } else {
            Err(Error::input(format!(
                "degenerate box ({x1}, {y1}, {x2}, {y2})"
            )))
        }
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        Self::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)
    }

    pub fn is_valid(&self) -> bool {
        [self.x1, self.y1, self.x2, self.y2].iter().all(|v| v.is_finite())
            && self.x2 > self.x1
            && self.y2 > self.y1
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn contains_point(&self, x: f64, y: f64) -> bool {
        x > self.x1 && x < self.x2 && y > self.y1 && y < self.y2
    }

    /// Clips to `[0, width] x [0, height]`; `None` when nothing of positive
    /// area remains.
    pub fn clip(&self, width: f64, height: f64) -> Option<BBox> {
        let b = BBox {
            x1: self.x1.clamp(0.0, width),
            y1: self.y1.clamp(0.0, height),
            x2: self.x2.clamp(0.0, width),
            y2: self.y2.clamp(0.0, height),
        };
        b.is_valid().then_some(b)
    }

    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let w = (self.x2.min(other.x2) - self.x1.max(other.x1)).max(0.0);
        let h = (self.y2.min(other.y2) - self.y1.max(other.y1)).max(0.0);
        w * h
    }
}

/// Intersection over union of two valid boxes.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection_area(b);
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Spatial-noise augmentation settings.
///
/// `lambda1` bounds the center shift (as a fraction of half the box side),
/// `lambda2` the relative size change; `n` copies are drawn per box.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SnaConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub n: usize,
    pub seed: u64,
}

impl Default for SnaConfig {
    fn default() -> Self {
        SnaConfig {
            lambda1: 0.2,
            lambda2: 0.2,
            n: 4,
            seed: 0,
        }
    }
}

impl SnaConfig {
    pub fn validate(&self) -> Result<()> {
        let open_unit = |v: f64| v > 0.0 && v < 1.0;
        if !open_unit(self.lambda1) || !open_unit(self.lambda2) {
            return Err(Error::config(format!(
                "SnA noise scales must lie in (0, 1), got lambda1={} lambda2={}",
                self.lambda1, self.lambda2
            )));
        }
        if self.n == 0 {
            return Err(Error::config("SnA copy count n must be positive"));
        }
        Ok(())
    }
}

/// Result of augmenting one box. `fallbacks` counts copies that collapsed
/// after clipping and were replaced by the source box.
#[derive(Clone, Debug, PartialEq)]
pub struct SnaOutput {
    pub boxes: Vec<BBox>,
    pub fallbacks: usize,
}

/// Draws `cfg.n` jittered copies of `b`.
///
/// Center offsets are uniform on the open intervals
/// `(-lambda1 * w / 2, lambda1 * w / 2)` and `(-lambda1 * h / 2, lambda1 * h / 2)`;
/// width and height are uniform on `[(1 - lambda2) s, (1 + lambda2) s]`.
/// When `clip` (image width, height) is given, copies are clipped to it.
pub fn sna_augment<R: Rng + ?Sized>(
    b: &BBox,
    cfg: &SnaConfig,
    clip: Option<(f64, f64)>,
    rng: &mut R,
) -> Result<SnaOutput> {
    cfg.validate()?;
    let (cx, cy) = b.center();
    let (w, h) = (b.width(), b.height());
    let mut boxes = Vec::with_capacity(cfg.n);
    let mut fallbacks = 0;
    for _ in 0..cfg.n {
        let ux: f64 = Open01.sample(rng);
        let uy: f64 = Open01.sample(rng);
        let dx = (2.0 * ux - 1.0) * cfg.lambda1 * w / 2.0;
        let dy = (2.0 * uy - 1.0) * cfg.lambda1 * h / 2.0;
        let sw = rng.gen_range((1.0 - cfg.lambda2)..=(1.0 + cfg.lambda2));
        let sh = rng.gen_range((1.0 - cfg.lambda2)..=(1.0 + cfg.lambda2));
        let candidate = BBox::from_center(cx + dx, cy + dy, w * sw, h * sh).ok();
        let candidate = match (candidate, clip) {
            (Some(c), Some((iw, ih))) => c.clip(iw, ih),
            (c, _) => c,
        };
        match candidate {
            Some(c) => boxes.push(c),
            None => {
                fallbacks += 1;
                boxes.push(*b);
            }
        }
    }
    Ok(SnaOutput { boxes, fallbacks })
}

/// Regular sampling grid over a box: one point at the center of each of
/// `out_h x out_w` bins, in image coordinates, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct RoiGrid {
    pub out_h: usize,
    pub out_w: usize,
    pub points: Vec<(f64, f64)>,
}

pub fn roi_grid(b: &BBox, out_h: usize, out_w: usize) -> Result<RoiGrid> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::config("region grid must be at least 1x1"));
    }
    let bin_w = b.width() / out_w as f64;
    let bin_h = b.height() / out_h as f64;
    let mut points = Vec::with_capacity(out_h * out_w);
    for i in 0..out_h {
        let y = b.y1 + (i as f64 + 0.5) * bin_h;
        for j in 0..out_w {
            points.push((b.x1 + (j as f64 + 0.5) * bin_w, y));
        }
    }
    Ok(RoiGrid {
        out_h,
        out_w,
        points,
    })
}

/// Four-neighbour bilinear taps `(flat spatial index, weight)` for an image
/// point sampled from a `height x width` map with the given stride.
///
/// Pixel centers sit at `(k + 0.5) * stride`; points beyond the outermost
/// centers are clamped to the border. Weights always sum to one.
pub fn bilinear_taps(x: f64, y: f64, stride: usize, height: usize, width: usize) -> [(usize, f64); 4] {
    let (x0, fx) = axis_tap(x / stride as f64 - 0.5, width);
    let (y0, fy) = axis_tap(y / stride as f64 - 0.5, height);
    let x1 = (x0 + 1).min(width - 1);
    let y1 = (y0 + 1).min(height - 1);
    [
        (y0 * width + x0, (1.0 - fy) * (1.0 - fx)),
        (y0 * width + x1, (1.0 - fy) * fx),
        (y1 * width + x0, fy * (1.0 - fx)),
        (y1 * width + x1, fy * fx),
    ]
}

fn axis_tap(u: f64, len: usize) -> (usize, f64) {
    if len == 1 {
        return (0, 0.0);
    }
    let u = u.clamp(0.0, (len - 1) as f64);
    let i0 = (u.floor() as usize).min(len - 2);
    (i0, u - i0 as f64)
}
