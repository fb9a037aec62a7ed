//! Slow, deliberately naive reference implementations used as test oracles.
//! None of them call into the crate's metric or loss code.

use psearch::detector::Detection;
use psearch::evaluation::{GalleryEntry, GalleryImage, Query};
use psearch::geometry::BBox;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn box_iou(a: &BBox, b: &BBox) -> f64 {
    let w = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let h = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = w * h;
    let union = (a.x2 - a.x1) * (a.y2 - a.y1) + (b.x2 - b.x1) * (b.y2 - b.y1) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// AP as the sum over rank cutoffs of recall gain times the best precision
/// at any deeper cutoff.
pub fn envelope_ap(hits: &[bool], positives: usize) -> f64 {
    if positives == 0 {
        return 0.0;
    }
    let prec_at = |k: usize| hits[..=k].iter().filter(|&&h| h).count() as f64 / (k + 1) as f64;
    let mut ap = 0.0;
    for k in 0..hits.len() {
        if !hits[k] {
            continue;
        }
        let best = (k..hits.len()).map(prec_at).fold(0.0, f64::max);
        ap += best / positives as f64;
    }
    ap
}

/// Detection AP and recall. Each image is matched on its own: detections
/// in descending score take the best unmatched GT with IoU >= thresh.
pub fn detection_ap(dets: &[Vec<Detection>], gt: &[Vec<BBox>], thresh: f64) -> (f64, f64) {
    let mut flagged: Vec<(f64, usize, usize, bool)> = Vec::new();
    for (img, (ds, gs)) in dets.iter().zip(gt).enumerate() {
        let mut order: Vec<usize> = (0..ds.len()).collect();
        order.sort_by(|&a, &b| ds[b].score.partial_cmp(&ds[a].score).unwrap().then(a.cmp(&b)));
        let mut used = vec![false; gs.len()];
        for &d in &order {
            let mut pick: Option<(usize, f64)> = None;
            for (g, gb) in gs.iter().enumerate() {
                let v = box_iou(&ds[d].bbox, gb);
                if used[g] || v < thresh {
                    continue;
                }
                if pick.is_none() || v > pick.unwrap().1 {
                    pick = Some((g, v));
                }
            }
            if let Some((g, _)) = pick {
                used[g] = true;
            }
            flagged.push((ds[d].score, img, d, pick.is_some()));
        }
    }
    flagged.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let hits: Vec<bool> = flagged.iter().map(|f| f.3).collect();
    let total: usize = gt.iter().map(Vec::len).sum();
    let tp = hits.iter().filter(|&&h| h).count();
    (envelope_ap(&hits, total), tp as f64 / total as f64)
}

fn cos(a: &[f64], b: &[f64]) -> f64 {
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for i in 0..a.len() {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na.sqrt() * nb.sqrt())
    }
}

/// Per-query (AP, top-1) by replaying the ranked list from the start for
/// every cutoff: position k is a hit when its box covers (IoU > 0.5) a
/// same-identity GT person that no earlier position already claimed.
pub fn search_query(q: &Query, images: &[GalleryImage], entries: &[GalleryEntry], cws: bool) -> (f64, bool) {
    let mut cands: Vec<(f64, usize)> = entries
        .iter()
        .enumerate()
        .filter(|(_, e)| e.image_id != q.image_id)
        .map(|(i, e)| {
            let s = cos(&q.embedding, &e.embedding);
            (if cws { s * e.detection.score } else { s }, i)
        })
        .collect();
    cands.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    let num_gt = images
        .iter()
        .filter(|g| g.image_id != q.image_id)
        .map(|g| g.identities.iter().filter(|id| **id == Some(q.identity)).count())
        .sum::<usize>();
    let claim = |upto: usize| -> (Vec<(String, usize)>, bool) {
        let mut claimed: Vec<(String, usize)> = Vec::new();
        let mut last = false;
        for &(_, e) in &cands[..=upto] {
            let entry = &entries[e];
            last = false;
            let Some(img) = images.iter().find(|g| g.image_id == entry.image_id) else { continue };
            let mut pick: Option<(usize, f64)> = None;
            for k in 0..img.boxes.len() {
                if img.identities[k] != Some(q.identity) || claimed.contains(&(img.image_id.clone(), k)) {
                    continue;
                }
                let v = box_iou(&entry.detection.bbox, &img.boxes[k]);
                if v > 0.5 && pick.is_none_or(|(_, b)| v > b) {
                    pick = Some((k, v));
                }
            }
            if let Some((k, _)) = pick {
                claimed.push((img.image_id.clone(), k));
                last = true;
            }
        }
        (claimed, last)
    };
    let hits: Vec<bool> = (0..cands.len()).map(|k| claim(k).1).collect();
    let ap = if num_gt == 0 {
        0.0
    } else {
        let mut sum = 0.0;
        for k in 0..hits.len() {
            if hits[k] {
                sum += hits[..=k].iter().filter(|&&h| h).count() as f64 / (k + 1) as f64;
            }
        }
        sum / num_gt as f64
    };
    (ap, hits.first().copied().unwrap_or(false))
}

/// Reference OIM state: lookup table rows, circular queue, head.
pub struct RefOim {
    pub lut: Vec<Vec<f64>>,
    pub queue: Vec<Vec<f64>>,
    pub head: usize,
    pub gamma: f64,
}

fn unit(x: &[f64]) -> Vec<f64> {
    let n = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    x.iter().map(|v| v / n).collect()
}

impl RefOim {
    pub fn new(l: usize, q: usize, d: usize, gamma: f64) -> Self {
        RefOim { lut: vec![vec![0.0; d]; l], queue: vec![vec![0.0; d]; q], head: 0, gamma }
    }

    pub fn observe(&mut self, x: &[f64], label: Option<usize>) {
        let x = unit(x);
        match label {
            Some(id) => {
                let mixed: Vec<f64> = self.lut[id].iter().zip(&x).map(|(v, u)| self.gamma * v + (1.0 - self.gamma) * u).collect();
                self.lut[id] = unit(&mixed);
            }
            None => {
                self.queue[self.head] = x;
                self.head = (self.head + 1) % self.queue.len();
            }
        }
    }
}

/// Batch-hard triplet loss by enumerating every (anchor, positive, negative)
/// triple and keeping, per anchor, the one with the largest hinge argument.
pub fn triplet_exhaustive(emb: &[Vec<f64>], labels: &[Option<usize>], margin: f64) -> f64 {
    let u: Vec<Vec<f64>> = emb.iter().map(|e| unit(e)).collect();
    let d = |i: usize, j: usize| u[i].iter().zip(&u[j]).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let mut total = 0.0;
    let mut anchors = 0;
    for a in 0..emb.len() {
        let mut worst: Option<f64> = None;
        for p in 0..emb.len() {
            for n in 0..emb.len() {
                let (Some(la), Some(lp), Some(ln)) = (labels[a], labels[p], labels[n]) else { continue };
                if p == a || lp != la || ln == la {
                    continue;
                }
                let v = d(a, p) - d(a, n);
                worst = Some(worst.map_or(v, |w: f64| w.max(v)));
            }
        }
        if let Some(w) = worst {
            anchors += 1;
            total += (w + margin).max(0.0);
        }
    }
    if anchors == 0 {
        0.0
    } else {
        total / anchors as f64
    }
}

pub fn random_box(rng: &mut ChaCha8Rng, extent: f64) -> BBox {
    let x1 = rng.gen_range(0.0..extent * 0.8);
    let y1 = rng.gen_range(0.0..extent * 0.8);
    let w = rng.gen_range(4.0..extent * 0.4);
    let h = rng.gen_range(4.0..extent * 0.4);
    BBox::new(x1, y1, x1 + w, y1 + h).unwrap()
}

/// A detection near `b` (often overlapping enough to match) or anywhere.
pub fn jittered(rng: &mut ChaCha8Rng, b: &BBox) -> BBox {
    let s = rng.gen_range(0.0..6.0);
    let mut j = |v: f64| v + rng.gen_range(-s..=s);
    let (x1, y1) = (j(b.x1), j(b.y1));
    let (x2, y2) = (j(b.x2).max(x1 + 1.0), j(b.y2).max(y1 + 1.0));
    BBox::new(x1, y1, x2, y2).unwrap()
}
