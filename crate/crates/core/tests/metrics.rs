mod common;

use common::instances::{detection_instance, search_instance};
use common::oracles;
use proptest::prelude::*;
use psearch::detector::Detection;
use psearch::evaluation::{detection_pr, search_eval, search_eval_with, GalleryEntry, GalleryImage, Query, SearchConfig};
use psearch::geometry::BBox;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn detection_pr_matches_brute_force_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut partial = 0;
    for case in 0..100 {
        let inst = detection_instance(&mut rng);
        let got = detection_pr(&inst.dets, &inst.gt, 0.5).unwrap();
        let (ap, recall) = oracles::detection_ap(&inst.dets, &inst.gt, 0.5);
        assert!((got.ap - ap).abs() <= 1e-9, "case {case}: AP {} vs oracle {ap}", got.ap);
        assert!((got.recall - recall).abs() <= 1e-9, "case {case}: recall {} vs oracle {recall}", got.recall);
        partial += (ap > 0.0 && ap < 1.0) as usize;
    }
    assert!(partial >= 20, "only {partial} instances with fractional AP");
}

#[test]
fn search_eval_matches_brute_force_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut partial = 0;
    for case in 0..100 {
        let inst = search_instance(&mut rng);
        for cws in [false, true] {
            let cfg = SearchConfig { use_cws: cws, exclude_absent: false };
            let got = search_eval(&inst.queries, &inst.images, &inst.entries, &cfg).unwrap();
            for (q, r) in inst.queries.iter().zip(&got.per_query) {
                let (ap, top1) = oracles::search_query(q, &inst.images, &inst.entries, cws);
                assert!((r.ap - ap).abs() <= 1e-9, "case {case} cws {cws} {}: AP {} vs {ap}", q.query_id, r.ap);
                assert_eq!(r.top1, top1, "case {case} cws {cws} {}", q.query_id);
                partial += (ap > 0.0 && ap < 1.0) as usize;
            }
        }
    }
    assert!(partial >= 20, "only {partial} queries with fractional AP");
}

#[test]
fn gt_gallery_with_one_hot_embeddings_is_perfect() {
    let boxes = [BBox::new(0.0, 0.0, 10.0, 20.0).unwrap(), BBox::new(30.0, 0.0, 40.0, 20.0).unwrap()];
    let one_hot = |k: usize| (0..3).map(|i| if i == k { 1.0 } else { 0.0 }).collect::<Vec<f64>>();
    let mut images = Vec::new();
    let mut entries = Vec::new();
    for (i, ids) in [[0, 1], [1, 2], [2, 0]].iter().enumerate() {
        let image_id = format!("g{i}");
        for (b, &id) in boxes.iter().zip(ids) {
            entries.push(GalleryEntry {
                image_id: image_id.clone(),
                detection: Detection { bbox: *b, score: 1.0 },
                embedding: one_hot(id),
            });
        }
        images.push(GalleryImage { image_id, boxes: boxes.to_vec(), identities: ids.iter().map(|&i| Some(i)).collect() });
    }
    let queries: Vec<Query> = (0..3)
        .map(|id| Query {
            query_id: format!("q{id}"),
            image_id: "q".into(),
            bbox: boxes[0],
            identity: id,
            embedding: one_hot(id),
        })
        .collect();
    let m = search_eval(&queries, &images, &entries, &SearchConfig::default()).unwrap();
    assert_eq!((m.map, m.top1), (1.0, 1.0));
}

fn metrics_pair(a: &psearch::evaluation::SearchMetrics, b: &psearch::evaluation::SearchMetrics) -> bool {
    (a.map - b.map).abs() <= 1e-12 && a.top1 == b.top1
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn monotone_transform_of_similarity_keeps_metrics(seed in any::<u64>()) {
        let inst = search_instance(&mut ChaCha8Rng::seed_from_u64(seed));
        let cfg = SearchConfig::default();
        let base = search_eval(&inst.queries, &inst.images, &inst.entries, &cfg).unwrap();
        let exp = search_eval_with(&inst.queries, &inst.images, &inst.entries, &cfg, |q, e| {
            psearch::evaluation::cosine(&q.embedding, &e.embedding).exp()
        })
        .unwrap();
        prop_assert!(metrics_pair(&base, &exp));
    }

    #[test]
    fn cws_with_constant_scores_changes_nothing(seed in any::<u64>(), c in 0.01f64..1.0) {
        let mut inst = search_instance(&mut ChaCha8Rng::seed_from_u64(seed));
        for e in &mut inst.entries {
            e.detection.score = c;
        }
        let plain = search_eval(&inst.queries, &inst.images, &inst.entries, &SearchConfig::default()).unwrap();
        let cws = search_eval(&inst.queries, &inst.images, &inst.entries, &SearchConfig { use_cws: true, exclude_absent: false }).unwrap();
        prop_assert!(metrics_pair(&plain, &cws));
    }

    #[test]
    fn gallery_image_order_is_irrelevant(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inst = search_instance(&mut rng);
        let cfg = SearchConfig::default();
        let base = search_eval(&inst.queries, &inst.images, &inst.entries, &cfg).unwrap();
        let mut images = inst.images.clone();
        images.shuffle(&mut rng);
        // entries move with their image; within an image they keep their order
        let entries: Vec<GalleryEntry> = images
            .iter()
            .flat_map(|g| inst.entries.iter().filter(move |e| e.image_id == g.image_id).cloned())
            .collect();
        let shuffled = search_eval(&inst.queries, &images, &entries, &cfg).unwrap();
        prop_assert!(metrics_pair(&base, &shuffled));
    }

    #[test]
    fn detection_ap_and_recall_lie_in_unit_interval(seed in any::<u64>()) {
        let inst = detection_instance(&mut ChaCha8Rng::seed_from_u64(seed));
        let r = detection_pr(&inst.dets, &inst.gt, 0.5).unwrap();
        prop_assert!((0.0..=1.0).contains(&r.ap) && (0.0..=1.0).contains(&r.recall));
        prop_assert!(r.ap <= r.recall + 1e-12);
    }
}
