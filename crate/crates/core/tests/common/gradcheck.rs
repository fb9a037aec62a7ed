//! Central finite-difference checks for every differentiable block.
//!
//! Each check draws a random block, a random input and a random linear
//! read-out `L = sum(w * y)`, then compares analytic gradients with
//! `(L(p + h) - L(p - h)) / 2h` at randomly chosen coordinates.

use psearch::blocks::{Conv2d, FeatureMap, FusionMode, GroupNorm, Parameterized, SideAda, SideFusion, Stage, StageSpec};
use psearch::detector::{detection_loss, focal_loss, iou_loss, Detector, DetectorConfig, DetectorGrads};
use psearch::geometry::BBox;
use psearch::reid::head::{roi_align, roi_align_backward};
use psearch::model::{ModelConfig, PersonSearchModel};
use psearch::reid::{triplet_loss, BatchNorm1d, OimConfig, OimState, ReidHead, ReidNet};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-5;
pub const POINTS: usize = 10;

/// `|a - n| / max(|a|, |n|, 1e-6)`
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

pub fn random_map(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize, stride: usize) -> FeatureMap {
    let data = (0..c * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
    FeatureMap::from_vec(c, h, w, stride, data).unwrap()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn param_table<M: Parameterized>(m: &M) -> Vec<(String, usize)> {
    let mut out = Vec::new();
    m.visit_params("", &mut |name, p| out.push((name.to_string(), p.numel())));
    out
}

fn grad_of<M: Parameterized>(m: &M, name: &str, idx: usize) -> f64 {
    let mut g = 0.0;
    m.visit_params("", &mut |n, p| {
        if n == name {
            g = p.grad.as_ref().map_or(0.0, |v| v[idx]);
        }
    });
    g
}

fn nudge<M: Parameterized + Clone>(m: &M, name: &str, idx: usize, delta: f64) -> M {
    let mut c = m.clone();
    c.visit_params_mut("", &mut |n, p| {
        if n == name {
            p.value[idx] += delta;
        }
    });
    c
}

/// Worst relative error over `POINTS` random parameter coordinates.
/// `analytic` is `m` after its backward pass.
pub fn check_params<M: Parameterized + Clone>(
    m: &M,
    analytic: &M,
    loss: impl Fn(&M) -> f64,
    rng: &mut ChaCha8Rng,
) -> f64 {
    let table = param_table(m);
    let total: usize = table.iter().map(|(_, n)| n).sum();
    assert!(total > 0, "block has no parameters");
    let mut worst: f64 = 0.0;
    for _ in 0..POINTS {
        let mut k = rng.gen_range(0..total);
        let (name, idx) = table
            .iter()
            .find_map(|(n, len)| {
                if k < *len {
                    Some((n.clone(), k))
                } else {
                    k -= len;
                    None
                }
            })
            .unwrap();
        let num = (loss(&nudge(m, &name, idx, STEP)) - loss(&nudge(m, &name, idx, -STEP))) / (2.0 * STEP);
        worst = worst.max(rel_err(grad_of(analytic, &name, idx), num));
    }
    worst
}

/// Worst relative error over `POINTS` random coordinates of a flat input.
pub fn check_input(x: &[f64], grad: &[f64], loss: impl Fn(&[f64]) -> f64, rng: &mut ChaCha8Rng) -> f64 {
    let mut worst: f64 = 0.0;
    for _ in 0..POINTS {
        let i = rng.gen_range(0..x.len());
        let mut p = x.to_vec();
        p[i] += STEP;
        let mut q = x.to_vec();
        q[i] -= STEP;
        let num = (loss(&p) - loss(&q)) / (2.0 * STEP);
        worst = worst.max(rel_err(grad[i], num));
    }
    worst
}

fn with_data(x: &FeatureMap, data: &[f64]) -> FeatureMap {
    FeatureMap::from_vec(x.channels(), x.height(), x.width(), x.stride(), data.to_vec()).unwrap()
}

fn readout_like(rng: &mut ChaCha8Rng, y: &FeatureMap) -> FeatureMap {
    let (c, h, w) = y.shape();
    random_map(rng, c, h, w, y.stride())
}

pub fn conv(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = Conv2d::new(3, 5, 3, 2, &mut rng);
    m.bias.value.iter_mut().for_each(|b| *b = rng.gen_range(-0.5..0.5));
    let x = random_map(&mut rng, 3, 7, 6, 4);
    let (y, cache) = m.forward_train(&x).unwrap();
    let w = readout_like(&mut rng, &y);
    let mut a = m.clone();
    let gx = a.backward(&cache, &w, true).unwrap();
    let lp = |m: &Conv2d| dot(m.forward(&x).unwrap().data(), w.data());
    let lx = |d: &[f64]| dot(m.forward(&with_data(&x, d)).unwrap().data(), w.data());
    check_params(&m, &a, lp, &mut rng).max(check_input(x.data(), gx.data(), lx, &mut rng))
}

pub fn group_norm(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = GroupNorm::new(2, 4).unwrap();
    m.gamma.value.iter_mut().for_each(|g| *g = rng.gen_range(0.5..1.5));
    m.beta.value.iter_mut().for_each(|b| *b = rng.gen_range(-0.5..0.5));
    let x = random_map(&mut rng, 4, 3, 3, 1);
    let (y, cache) = m.forward_train(&x).unwrap();
    let w = readout_like(&mut rng, &y);
    let mut a = m.clone();
    let gx = a.backward(&cache, &w);
    let f = |m: &GroupNorm, x: &FeatureMap| dot(m.forward_train(x).unwrap().0.data(), w.data());
    check_params(&m, &a, |m| f(m, &x), &mut rng).max(check_input(x.data(), gx.data(), |d| f(&m, &with_data(&x, d)), &mut rng))
}

pub fn stage(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = StageSpec {
        in_channels: 4,
        out_channels: 8,
        depth: 2,
        downsample: true,
    };
    let m = Stage::new(spec, 2, &mut rng).unwrap();
    let x = random_map(&mut rng, 4, 6, 6, 4);
    let (y, cache) = m.forward_train(&x).unwrap();
    let w = readout_like(&mut rng, &y);
    let mut a = m.clone();
    let gx = a.backward(&cache, &w, true).unwrap();
    let f = |m: &Stage, x: &FeatureMap| dot(m.forward(x).unwrap().data(), w.data());
    check_params(&m, &a, |m| f(m, &x), &mut rng).max(check_input(x.data(), gx.data(), |d| f(&m, &with_data(&x, d)), &mut rng))
}

fn fusion(seed: u64, mode: FusionMode) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (det, reid) = match mode {
        FusionMode::Homogeneous => ((4, 4, 4), (4, 4, 4)),
        FusionMode::Heterogeneous => ((3, 8, 8), (5, 4, 4)),
    };
    let mut m = SideFusion::new(mode, det, reid, &mut rng).unwrap();
    if let SideFusion::Blend { logit } = &mut m {
        logit.value[0] = rng.gen_range(-2.0..2.0);
    }
    let xd = random_map(&mut rng, det.0, det.1, det.2, 8 * 4 / det.1);
    let xr = random_map(&mut rng, reid.0, reid.1, reid.2, 8 * 4 / reid.1);
    let (y, cache) = m.forward_train(&xd, &xr).unwrap();
    let w = readout_like(&mut rng, &y);
    let mut a = m.clone();
    let g = a.backward(&cache, &w, true);
    let f = |m: &SideFusion, d: &FeatureMap, r: &FeatureMap| dot(m.forward(d, r).unwrap().data(), w.data());
    let e_p = check_params(&m, &a, |m| f(m, &xd, &xr), &mut rng);
    let e_d = check_input(xd.data(), g.x_d.unwrap().data(), |d| f(&m, &with_data(&xd, d), &xr), &mut rng);
    let e_r = check_input(xr.data(), g.x_r.data(), |d| f(&m, &xd, &with_data(&xr, d)), &mut rng);
    e_p.max(e_d).max(e_r)
}

pub fn fusion_blend(seed: u64) -> f64 {
    fusion(seed, FusionMode::Homogeneous)
}

pub fn fusion_conv(seed: u64) -> f64 {
    fusion(seed, FusionMode::Heterogeneous)
}

pub fn side_ada_conv(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = SideAda::new(FusionMode::Heterogeneous, (4, 8, 8), (6, 4, 4), &mut rng).unwrap();
    let x = random_map(&mut rng, 4, 8, 8, 4);
    let (y, cache) = m.forward_train(&x).unwrap();
    let w = readout_like(&mut rng, &y);
    let mut a = m.clone();
    let gx = a.backward(&cache, &w, true).unwrap();
    let f = |m: &SideAda, x: &FeatureMap| dot(m.forward(x).unwrap().data(), w.data());
    check_params(&m, &a, |m| f(m, &x), &mut rng).max(check_input(x.data(), gx.data(), |d| f(&m, &with_data(&x, d)), &mut rng))
}

pub fn roi_align_input(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = random_map(&mut rng, 3, 8, 8, 8);
    let b = BBox::new(rng.gen_range(0.0..20.0), rng.gen_range(0.0..20.0), rng.gen_range(30.0..64.0), rng.gen_range(30.0..64.0)).unwrap();
    let y = roi_align(&x, &b, 6, 4).unwrap();
    let w = readout_like(&mut rng, &y);
    let mut gx = x.zeros_like();
    roi_align_backward(&w, &b, &mut gx).unwrap();
    check_input(x.data(), gx.data(), |d| dot(roi_align(&with_data(&x, d), &b, 6, 4).unwrap().data(), w.data()), &mut rng)
}

pub fn batch_norm(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = BatchNorm1d::new(5, 0.1);
    m.gamma.value.iter_mut().for_each(|g| *g = rng.gen_range(0.5..1.5));
    let batch: Vec<Vec<f64>> = (0..6).map(|_| (0..5).map(|_| rng.gen_range(-2.0..2.0)).collect()).collect();
    let w: Vec<Vec<f64>> = (0..6).map(|_| (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
    let f = |m: &BatchNorm1d, b: &[Vec<f64>]| {
        let (y, _) = m.clone().forward_train(b).unwrap();
        y.iter().zip(&w).map(|(a, b)| dot(a, b)).sum::<f64>()
    };
    let mut a = m.clone();
    let (_, cache) = a.forward_train(&batch).unwrap();
    let gx: Vec<f64> = a.backward(&cache, &w).concat();
    let flat = batch.concat();
    let unflat = |d: &[f64]| d.chunks(5).map(|c| c.to_vec()).collect::<Vec<_>>();
    check_params(&m, &a, |m| f(m, &batch), &mut rng).max(check_input(&flat, &gx, |d| f(&m, &unflat(d)), &mut rng))
}

fn random_embeddings(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> Vec<Vec<f64>> {
    (0..n).map(|_| (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect()
}

pub fn oim(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = 6;
    let cfg = OimConfig {
        num_identities: 4,
        queue_size: 5,
        momentum: 0.5,
        temperature: 0.1,
    };
    let mut s = OimState::new(&cfg, dim).unwrap();
    for e in random_embeddings(&mut rng, 4, dim).iter().enumerate() {
        s.update_lut(e.0, e.1);
    }
    for e in random_embeddings(&mut rng, 3, dim) {
        s.push_unlabeled(&e);
    }
    let x = random_embeddings(&mut rng, 5, dim);
    let labels = vec![Some(0), Some(2), None, Some(2), Some(3)];
    let out = s.loss(&x, &labels).unwrap();
    let unflat = |d: &[f64]| d.chunks(dim).map(|c| c.to_vec()).collect::<Vec<_>>();
    check_input(&x.concat(), &out.grads.concat(), |d| s.loss(&unflat(d), &labels).unwrap().loss, &mut rng)
}

pub fn triplet(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = 4;
    let x = random_embeddings(&mut rng, 6, dim);
    let labels = vec![Some(0), Some(0), Some(1), Some(1), Some(2), None];
    let out = triplet_loss(&x, &labels, 0.3);
    let unflat = |d: &[f64]| d.chunks(dim).map(|c| c.to_vec()).collect::<Vec<_>>();
    check_input(&x.concat(), &out.grads.concat(), |d| triplet_loss(&unflat(d), &labels, 0.3).loss, &mut rng)
}

pub fn focal(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for i in 0..POINTS {
        let z = rng.gen_range(-4.0..4.0);
        let pos = i % 2 == 0;
        let (_, g) = focal_loss(z, pos, 0.25, 2.0);
        let num = (focal_loss(z + STEP, pos, 0.25, 2.0).0 - focal_loss(z - STEP, pos, 0.25, 2.0).0) / (2.0 * STEP);
        worst = worst.max(rel_err(g, num));
    }
    worst
}

pub fn iou(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..POINTS {
        let p: [f64; 4] = std::array::from_fn(|_| rng.gen_range(1.0..20.0));
        let t: [f64; 4] = std::array::from_fn(|_| rng.gen_range(1.0..20.0));
        let (_, g) = iou_loss(p, t);
        let k = rng.gen_range(0..4);
        let (mut a, mut b) = (p, p);
        a[k] += STEP;
        b[k] -= STEP;
        worst = worst.max(rel_err(g[k], (iou_loss(a, t).0 - iou_loss(b, t).0) / (2.0 * STEP)));
    }
    worst
}

/// Detector with both the detection loss and re-id tap gradients.
pub fn detector(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = DetectorConfig::default();
    let m = Detector::new(cfg.clone(), 4, &mut rng).unwrap();
    let x = random_map(&mut rng, cfg.layer1.in_channels, 8, 8, 4);
    let gt = vec![BBox::new(3.0, 2.0, 20.0, 30.0).unwrap(), BBox::new(14.0, 10.0, 31.0, 32.0).unwrap()];
    let (out, cache) = m.forward_train(&x).unwrap();
    let tw: Vec<FeatureMap> = out.taps.iter().map(|t| readout_like(&mut rng, t)).collect();
    let loss = |m: &Detector| {
        let o = m.forward(&x).unwrap();
        let (l, _) = detection_loss(&o.preds, &gt, &cfg);
        l.total + o.taps.iter().zip(&tw).map(|(t, w)| dot(t.data(), w.data())).sum::<f64>()
    };
    let (_, dg) = detection_loss(&out.preds, &gt, &cfg);
    let mut a = m.clone();
    a.backward(
        &cache,
        DetectorGrads {
            logits: Some(dg.logits),
            offsets: Some(dg.offsets),
            taps: tw.iter().map(|w| Some(w.clone())).collect(),
        },
    )
    .unwrap();
    check_params(&m, &a, loss, &mut rng)
}

/// Re-id head: region pooling, conv stage, pooling and batch norm together.
pub fn reid_head(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = ReidHead::new(4, 8, 1, (6, 4), 2, 0.1, &mut rng).unwrap();
    let fm = random_map(&mut rng, 4, 8, 8, 8);
    let boxes = [BBox::new(2.0, 3.0, 30.0, 50.0).unwrap(), BBox::new(20.0, 10.0, 60.0, 62.0).unwrap(), BBox::new(5.0, 5.0, 40.0, 40.0).unwrap()];
    let w = random_embeddings(&mut rng, boxes.len(), 8);
    let f = |m: &ReidHead, fm: &FeatureMap| {
        let pooled: Vec<Vec<f64>> = boxes.iter().map(|b| m.pool_region(fm, b).unwrap()).collect();
        let (y, _) = m.bn.clone().forward_train(&pooled).unwrap();
        y.iter().zip(&w).map(|(a, b)| dot(a, b)).sum::<f64>()
    };
    let mut a = m.clone();
    let mut caches = Vec::new();
    let mut pooled = Vec::new();
    for b in &boxes {
        let (v, c) = a.pool_region_train(&fm, b).unwrap();
        pooled.push(v);
        caches.push(c);
    }
    let (_, bc) = a.bn.forward_train(&pooled).unwrap();
    let dp = a.bn.backward(&bc, &w);
    let mut gfm = fm.zeros_like();
    for (c, g) in caches.iter().zip(&dp) {
        a.backward_region(c, g, &mut gfm).unwrap();
    }
    check_params(&m, &a, |m| f(m, &fm), &mut rng).max(check_input(fm.data(), gfm.data(), |d| f(&m, &with_data(&fm, d)), &mut rng))
}

/// Re-id trunk (side-ada, stages, both fusions) including the gradients
/// handed back to the detection taps.
pub fn reid_trunk(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = ModelConfig {
        image_width: 32,
        image_height: 32,
        ..ModelConfig::default()
    };
    let model = PersonSearchModel::new(cfg, seed).unwrap();
    let mut m: ReidNet = model.reid.clone();
    for f in m.fusion.iter_mut() {
        if let psearch::blocks::SideFusion::Blend { logit } = f {
            logit.value[0] = rng.gen_range(-1.0..1.0);
        }
    }
    let s = model.cfg.trunk_shapes();
    let x = random_map(&mut rng, s.input.0, s.input.1, s.input.2, 4);
    let taps: Vec<FeatureMap> = s.taps.iter().zip([8, 16]).map(|(&(c, h, w), st)| random_map(&mut rng, c, h, w, st)).collect();
    let (y, cache) = m.trunk_forward_train(&x, &taps).unwrap();
    let w = readout_like(&mut rng, &y);
    let mut a = m.clone();
    let tg = a.trunk_backward(&cache, &w, true);
    let f = |m: &ReidNet, taps: &[FeatureMap]| dot(m.trunk_forward(&x, taps).unwrap().data(), w.data());
    let mut worst = check_params(&m, &a, |m| f(m, &taps), &mut rng);
    for k in 0..taps.len() {
        let g = tg[k].as_ref().expect("tap gradient requested");
        worst = worst.max(check_input(taps[k].data(), g.data(), |d| {
            let mut t = taps.clone();
            t[k] = with_data(&taps[k], d);
            f(&m, &t)
        }, &mut rng));
    }
    worst
}

/// Every block with its name, in a fixed order.
pub fn all() -> Vec<(&'static str, fn(u64) -> f64)> {
    vec![
        ("conv2d", conv),
        ("group_norm", group_norm),
        ("stage", stage),
        ("side_fusion_blend", fusion_blend),
        ("side_fusion_conv", fusion_conv),
        ("side_ada_conv", side_ada_conv),
        ("roi_align", roi_align_input),
        ("batch_norm1d", batch_norm),
        ("oim", oim),
        ("triplet", triplet),
        ("focal", focal),
        ("iou_loss", iou),
        ("detector", detector),
        ("reid_head", reid_head),
        ("reid_trunk", reid_trunk),
    ]
}
