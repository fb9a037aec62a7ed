//! Random small detection and search problems for oracle comparisons.

use super::oracles::{jittered, random_box};
use psearch::detector::Detection;
use psearch::evaluation::{GalleryEntry, GalleryImage, Query};
use psearch::geometry::BBox;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

const EXTENT: f64 = 100.0;

pub struct Instance {
    pub dets: Vec<Vec<Detection>>,
    pub gt: Vec<Vec<BBox>>,
}

/// Up to 10 GT boxes spread over a few images, with detections that mostly
/// sit near a GT box and sometimes nowhere in particular.
pub fn detection_instance(rng: &mut ChaCha8Rng) -> Instance {
    let images = rng.gen_range(1..=3);
    let mut budget = rng.gen_range(1..=10usize);
    let mut gt = Vec::new();
    let mut dets = Vec::new();
    for i in 0..images {
        let n = if i + 1 == images { budget } else { rng.gen_range(0..=budget) };
        budget -= n;
        let g: Vec<BBox> = (0..n).map(|_| random_box(rng, EXTENT)).collect();
        let mut d = Vec::new();
        for _ in 0..rng.gen_range(0..=n + 3) {
            let bbox = if !g.is_empty() && rng.gen_bool(0.7) {
                let near = *g.choose(rng).unwrap();
                jittered(rng, &near)
            } else {
                random_box(rng, EXTENT)
            };
            d.push(Detection { bbox, score: rng.gen_range(0.0..1.0) });
        }
        gt.push(g);
        dets.push(d);
    }
    Instance { dets, gt }
}

pub struct SearchInstance {
    pub queries: Vec<Query>,
    pub images: Vec<GalleryImage>,
    pub entries: Vec<GalleryEntry>,
}

/// A small gallery (at most 20 entries) over a handful of identities.
pub fn search_instance(rng: &mut ChaCha8Rng) -> SearchInstance {
    let ids = rng.gen_range(2..=4usize);
    let dim = 4;
    let mut images = Vec::new();
    let mut entries = Vec::new();
    let n_images = rng.gen_range(2..=5);
    for i in 0..n_images {
        let image_id = format!("img{i}");
        let n = rng.gen_range(1..=3);
        let boxes: Vec<BBox> = (0..n).map(|_| random_box(rng, EXTENT)).collect();
        let identities: Vec<Option<usize>> =
            (0..n).map(|_| if rng.gen_bool(0.85) { Some(rng.gen_range(0..ids)) } else { None }).collect();
        for b in &boxes {
            for _ in 0..rng.gen_range(1..=2) {
                if entries.len() >= 20 {
                    break;
                }
                let bbox = if rng.gen_bool(0.8) { jittered(rng, b) } else { random_box(rng, EXTENT) };
                entries.push(GalleryEntry {
                    image_id: image_id.clone(),
                    detection: Detection { bbox, score: rng.gen_range(0.01..1.0) },
                    embedding: (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                });
            }
        }
        images.push(GalleryImage { image_id, boxes, identities });
    }
    let queries = (0..rng.gen_range(1..=4))
        .map(|k| Query {
            query_id: format!("q{k}"),
            // some queries come from a gallery image and must not retrieve from it
            image_id: if rng.gen_bool(0.3) { "img0".into() } else { format!("query{k}") },
            bbox: random_box(rng, EXTENT),
            identity: rng.gen_range(0..ids),
            embedding: (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        })
        .collect();
    SearchInstance { queries, images, entries }
}
