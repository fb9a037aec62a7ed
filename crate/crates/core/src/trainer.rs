//! Training regimes: task-incremental (detector, then re-id with the detector
//! frozen), joint, and hybrid (re-id stage with a tiny detector learning rate).

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::blocks::param::Parameterized;
use crate::blocks::FeatureMap;
use crate::checkpoint::{self, CheckpointKind};
use crate::detector::{detection_loss, DetectorGrads};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, evaluate_detection, Metrics, PrResult, SearchConfig};
use crate::geometry::{sna_augment, BBox, SnaConfig};
use crate::model::{ModelConfig, PersonSearchModel, DET_PREFIX, REID_PREFIX};
use crate::reid::head::RegionCache;
use crate::reid::triplet_loss;
use crate::rng::substream;
use crate::synthdata::{Dataset, Scene};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    Incremental,
    Joint,
    Hybrid,
}

impl Regime {
    pub const ALL: [Regime; 3] = [Regime::Incremental, Regime::Joint, Regime::Hybrid];

    pub fn name(self) -> &'static str {
        match self {
            Regime::Incremental => "incremental",
            Regime::Joint => "joint",
            Regime::Hybrid => "hybrid",
        }
    }
}

impl FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "incremental" => Ok(Regime::Incremental),
            "joint" => Ok(Regime::Joint),
            "hybrid" => Ok(Regime::Hybrid),
            other => Err(Error::config(format!(
                "unknown regime {other:?} (expected incremental, joint or hybrid)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub regime: Regime,
    pub seed: u64,
    /// Stage 1 (detector) epochs.
    pub det_epochs: usize,
    /// Stage 2 (re-id) epochs, also used by the hybrid regime.
    pub reid_epochs: usize,
    pub joint_epochs: usize,
    pub det_batch: usize,
    pub reid_batch: usize,
    pub base_lr: f64,
    pub warmup_epochs: usize,
    /// The learning rate drops by 10x once this many epochs of a stage are
    /// done; 0 disables the drop.
    pub det_decay_epoch: usize,
    pub reid_decay_epoch: usize,
    pub joint_decay_epoch: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Learning rate of the detection side-net in the hybrid regime.
    pub hybrid_det_lr: f64,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub grad_clip: f64,
    pub sna: SnaConfig,
    /// Evaluate on the gallery every this many epochs (drives the best
    /// checkpoint); 0 evaluates after the last epoch only.
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            regime: Regime::Incremental,
            seed: 0,
            det_epochs: 12,
            reid_epochs: 60,
            joint_epochs: 12,
            det_batch: 4,
            reid_batch: 4,
            base_lr: 0.02,
            warmup_epochs: 1,
            det_decay_epoch: 9,
            reid_decay_epoch: 45,
            joint_decay_epoch: 9,
            momentum: 0.9,
            weight_decay: 5e-4,
            hybrid_det_lr: 1e-5,
            grad_clip: 10.0,
            sna: SnaConfig::default(),
            eval_every: 10,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.det_batch == 0 || self.reid_batch == 0 {
            return Err(Error::config("batch sizes must be positive"));
        }
        if !(self.base_lr > 0.0) || !(self.hybrid_det_lr >= 0.0) {
            return Err(Error::config("learning rates must be positive"));
        }
        if self.hybrid_det_lr >= self.base_lr {
            return Err(Error::config("hybrid_det_lr must be far below base_lr"));
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 || self.grad_clip < 0.0 {
            return Err(Error::config("momentum must be in [0, 1); weight decay and clip non-negative"));
        }
        self.sna.validate()
    }
}

/// Everything a run is configured by; the on-disk config file mirrors it
/// with `[model]`, `[train]` and `[eval]` sections.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: SearchConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::config(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()
    }
}

/// Plain SGD with momentum and per-group learning rates.
#[derive(Clone, Debug, Default)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: HashMap<String, Vec<f64>>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            momentum,
            weight_decay,
            velocity: HashMap::new(),
        }
    }

    /// Updates every parameter that holds a gradient, at the rate `lr_of`
    /// assigns to its name. Parameters without a gradient are left
    /// untouched, weight decay included.
    pub fn step(&mut self, model: &mut dyn Parameterized, lr_of: &dyn Fn(&str) -> f64) {
        let (mu, wd) = (self.momentum, self.weight_decay);
        let velocity = &mut self.velocity;
        model.visit_params_mut("", &mut |name, p| {
            let Some(g) = p.grad.as_ref() else { return };
            let lr = lr_of(name);
            let v = velocity.entry(name.to_string()).or_insert_with(|| vec![0.0; g.len()]);
            for ((w, gi), vi) in p.value.iter_mut().zip(g).zip(v.iter_mut()) {
                *vi = mu * *vi + gi + wd * *w;
                *w -= lr * *vi;
            }
        });
    }
}

/// Scales all gradients so their global norm is at most `max_norm`.
/// Returns the norm before scaling.
pub fn clip_grad_norm(model: &mut dyn Parameterized, max_norm: f64) -> f64 {
    let mut sq = 0.0;
    model.visit_params_mut("", &mut |_, p| {
        if let Some(g) = &p.grad {
            sq += g.iter().map(|v| v * v).sum::<f64>();
        }
    });
    let norm = sq.sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        model.visit_params_mut("", &mut |_, p| {
            if let Some(g) = &mut p.grad {
                g.iter_mut().for_each(|v| *v *= s);
            }
        });
    }
    norm
}

/// Linear warmup over the first `warmup` epochs, then a single 10x drop
/// once `decay_epoch` epochs are complete.
pub fn lr_factor(epoch: usize, iter: usize, iters_per_epoch: usize, warmup: usize, decay_epoch: usize) -> f64 {
    let mut f = 1.0;
    if epoch < warmup {
        let done = (epoch * iters_per_epoch + iter + 1) as f64;
        f *= done / (warmup * iters_per_epoch) as f64;
    }
    if decay_epoch > 0 && epoch >= decay_epoch {
        f *= 0.1;
    }
    f
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    /// Stage 1: detection loss into the detection side-net.
    Detector,
    /// Stage 2: re-id loss, detection side-net frozen.
    Reid,
    /// Stage 2 with the re-id loss also reaching the detection side-net.
    Hybrid,
    /// Both losses into both side-nets.
    Joint,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Detector => "detector",
            Phase::Reid => "reid",
            Phase::Hybrid => "hybrid",
            Phase::Joint => "joint",
        }
    }

    fn det_loss(self) -> bool {
        matches!(self, Phase::Detector | Phase::Joint)
    }

    fn reid_loss(self) -> bool {
        !matches!(self, Phase::Detector)
    }

    fn grad_into_det(self) -> bool {
        !matches!(self, Phase::Reid)
    }

    /// Parameter-name prefixes that must receive gradients in this phase.
    /// The input layer is never among them.
    pub fn trainable_prefixes(self) -> Vec<&'static str> {
        match self {
            Phase::Detector => vec![DET_PREFIX],
            Phase::Reid => vec![REID_PREFIX],
            // the re-id loss enters the detector only through its fused stages
            Phase::Hybrid => vec![REID_PREFIX, "det.layer1.", "det.layer2."],
            Phase::Joint => vec![DET_PREFIX, REID_PREFIX],
        }
    }
}

/// The parameter names a phase declares trainable.
pub fn declared_trainable(model: &PersonSearchModel, phase: Phase) -> BTreeSet<String> {
    let prefixes = phase.trainable_prefixes();
    model
        .param_names()
        .into_iter()
        .filter(|n| prefixes.iter().any(|p| n.starts_with(p)))
        .collect()
}

/// Fails unless exactly the declared parameters hold gradients.
pub fn check_freeze_ledger(model: &PersonSearchModel, phase: Phase) -> Result<()> {
    let declared = declared_trainable(model, phase);
    let actual: BTreeSet<String> = model.params_with_grad().into_iter().collect();
    if declared != actual {
        let extra: Vec<_> = actual.difference(&declared).cloned().collect();
        let missing: Vec<_> = declared.difference(&actual).cloned().collect();
        return Err(Error::Invariant(format!(
            "{} phase: unexpected gradients on {extra:?}, missing gradients on {missing:?}",
            phase.name()
        )));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    pub total: f64,
    pub det: f64,
    pub cls: f64,
    pub bbox: f64,
    pub oim: f64,
    pub triplet: f64,
}

/// Per-step record handed to observers and written to the step log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepInfo {
    pub phase: Phase,
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub losses: StepLosses,
    pub alphas: Vec<f64>,
    pub regions: usize,
    pub sna_fallbacks: usize,
    pub grad_norm: f64,
}

#[derive(Clone, Debug, Serialize)]
struct LogLine<'a> {
    #[serde(flatten)]
    info: &'a StepInfo,
    timings: Timings,
}

#[derive(Clone, Copy, Debug, Default, Serialize)]
struct Timings {
    forward_ms: f64,
    backward_ms: f64,
    update_ms: f64,
}

/// Called after each backward pass, before the parameter update, so the
/// gradients are still visible.
pub type StepObserver<'a> = dyn FnMut(&StepInfo, &PersonSearchModel) + 'a;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub mean_loss: f64,
    pub detection: Option<PrResult>,
    pub metrics: Option<Metrics>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub phase: Phase,
    pub steps: usize,
    pub epochs: Vec<EpochReport>,
    pub sna_fallbacks: usize,
    pub seconds: f64,
}

/// Where a run writes checkpoints and step logs. `None` trains in memory.
#[derive(Clone, Debug)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn new(root: &Path) -> Result<Self> {
        for sub in ["checkpoints", "logs"] {
            let d = root.join(sub);
            fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        }
        Ok(RunDir { root: root.to_path_buf() })
    }

    pub fn checkpoint(&self, name: &str) -> PathBuf {
        self.root.join("checkpoints").join(format!("{name}.ckpt"))
    }

    pub fn log(&self, name: &str) -> PathBuf {
        self.root.join("logs").join(format!("{name}.jsonl"))
    }
}

/// One region fed to the re-id head during training.
struct Region {
    image: usize,
    bbox: BBox,
    label: Option<usize>,
}

/// GT boxes plus `n` SnA copies of each, all carrying the GT label.
fn sna_regions<R: rand::Rng>(scene: &Scene, image: usize, sna: &SnaConfig, rng: &mut R) -> Result<(Vec<Region>, usize)> {
    let mut out = Vec::with_capacity(scene.boxes.len() * (1 + sna.n));
    let mut fallbacks = 0;
    let clip = Some((scene.width as f64, scene.height as f64));
    for (b, id) in scene.boxes.iter().zip(&scene.identities) {
        out.push(Region {
            image,
            bbox: *b,
            label: *id,
        });
        let aug = sna_augment(b, sna, clip, rng)?;
        fallbacks += aug.fallbacks;
        out.extend(aug.boxes.into_iter().map(|bbox| Region {
            image,
            bbox,
            label: *id,
        }));
    }
    Ok((out, fallbacks))
}

/// Drives one training phase over a dataset.
pub struct Trainer<'a> {
    pub cfg: &'a RunConfig,
    pub data: &'a Dataset,
    pub dir: Option<&'a RunDir>,
    pub observer: Option<&'a mut StepObserver<'a>>,
}

impl<'a> Trainer<'a> {
    pub fn new(cfg: &'a RunConfig, data: &'a Dataset) -> Self {
        Trainer {
            cfg,
            data,
            dir: None,
            observer: None,
        }
    }

    fn phase_schedule(&self, phase: Phase) -> (usize, usize, usize) {
        let t = &self.cfg.train;
        match phase {
            Phase::Detector => (t.det_epochs, t.det_batch, t.det_decay_epoch),
            Phase::Reid | Phase::Hybrid => (t.reid_epochs, t.reid_batch, t.reid_decay_epoch),
            Phase::Joint => (t.joint_epochs, t.reid_batch, t.joint_decay_epoch),
        }
    }

    /// Trains `model` for one phase, writing `<phase>_last` / `<phase>_best`
    /// checkpoints and a step log when a run directory is attached.
    pub fn run_phase(&mut self, model: &mut PersonSearchModel, phase: Phase) -> Result<StageReport> {
        self.cfg.validate()?;
        let t = &self.cfg.train;
        let (epochs, batch, decay) = self.phase_schedule(phase);
        let scenes = &self.data.train;
        if scenes.is_empty() {
            return Err(Error::input("training split is empty"));
        }
        let iters = scenes.len().div_ceil(batch);
        let total_steps = epochs * iters;
        let mut opt = Sgd::new(t.momentum, t.weight_decay);
        let mut log = match self.dir {
            Some(d) => {
                let p = d.log(phase.name());
                Some((BufWriter::new(fs::File::create(&p).map_err(|e| Error::io(&p, e))?), p))
            }
            None => None,
        };
        let started = Instant::now();
        let mut report = StageReport {
            phase,
            steps: 0,
            epochs: Vec::new(),
            sna_fallbacks: 0,
            seconds: 0.0,
        };
        let mut best: Option<f64> = None;
        let mut step = 0;
        for epoch in 0..epochs {
            let mut order: Vec<usize> = (0..scenes.len()).collect();
            order.shuffle(&mut substream(t.seed, &format!("shuffle.{}.{epoch}", phase.name())));
            let mut sna_rng = substream(t.seed ^ t.sna.seed, &format!("sna.{}.{epoch}", phase.name()));
            let mut loss_sum = 0.0;
            for (iter, chunk) in order.chunks(batch).enumerate() {
                let factor = lr_factor(epoch, iter, iters, t.warmup_epochs, decay);
                let lr = t.base_lr * factor;
                let det_lr = if phase == Phase::Hybrid { t.hybrid_det_lr * factor } else { lr };
                let batch_scenes: Vec<&Scene> = chunk.iter().map(|&i| &scenes[i]).collect();
                let t0 = Instant::now();
                model.clear_grads();
                let (losses, regions, fallbacks, fwd_ms) = self.forward_backward(model, phase, &batch_scenes, &mut sna_rng)?;
                let t1 = Instant::now();
                if !losses.total.is_finite() {
                    return Err(Error::Divergence {
                        step,
                        detail: format!("{} loss is {:?}", phase.name(), losses),
                    });
                }
                if step == 0 || step + 1 == total_steps {
                    check_freeze_ledger(model, phase)?;
                }
                let grad_norm = clip_grad_norm(model, t.grad_clip);
                let info = StepInfo {
                    phase,
                    epoch,
                    step,
                    lr,
                    losses,
                    alphas: model.reid.alphas(),
                    regions,
                    sna_fallbacks: fallbacks,
                    grad_norm,
                };
                if let Some(obs) = self.observer.as_mut() {
                    obs(&info, model);
                }
                opt.step(model, &|name: &str| if name.starts_with(DET_PREFIX) { det_lr } else { lr });
                model.clear_grads();
                let t2 = Instant::now();
                if let Some((w, p)) = log.as_mut() {
                    let line = LogLine {
                        info: &info,
                        timings: Timings {
                            forward_ms: fwd_ms,
                            backward_ms: (t1 - t0).as_secs_f64() * 1e3 - fwd_ms,
                            update_ms: (t2 - t1).as_secs_f64() * 1e3,
                        },
                    };
                    let s = serde_json::to_string(&line).map_err(|e| Error::json("step log", e))?;
                    writeln!(w, "{s}").map_err(|e| Error::io(p.as_path(), e))?;
                }
                report.sna_fallbacks += fallbacks;
                loss_sum += losses.total;
                step += 1;
            }
            let mut er = EpochReport {
                epoch: epoch + 1,
                mean_loss: loss_sum / iters as f64,
                detection: None,
                metrics: None,
            };
            let last = epoch + 1 == epochs;
            if last || (t.eval_every > 0 && (epoch + 1) % t.eval_every == 0) {
                match phase {
                    Phase::Detector => er.detection = Some(evaluate_detection(model, &self.data.gallery)?),
                    _ => er.metrics = Some(evaluate(model, &self.data.gallery, &self.data.query, &self.cfg.eval, None)?),
                }
            }
            log::info!(
                "{} epoch {}/{}: loss {:.4}{}",
                phase.name(),
                epoch + 1,
                epochs,
                er.mean_loss,
                match (&er.detection, &er.metrics) {
                    (Some(d), _) => format!(", AP {:.4}", d.ap),
                    (_, Some(m)) => format!(", AP {:.4} mAP {:.4} top-1 {:.4}", m.ap, m.map, m.top1),
                    _ => String::new(),
                }
            );
            if let Some(dir) = self.dir {
                let kind = if phase == Phase::Detector { CheckpointKind::Detector } else { CheckpointKind::Full };
                let meta = serde_json::json!({
                    "phase": phase.name(),
                    "epoch": epoch + 1,
                    "seed": t.seed,
                    "detection": er.detection,
                    "mAP": er.metrics.as_ref().map(|m| m.map),
                });
                checkpoint::save(model, kind, meta.clone(), &dir.checkpoint(&format!("{}_last", phase.name())))?;
                let score = er.detection.map(|d| d.ap).or(er.metrics.as_ref().map(|m| m.map));
                if let Some(s) = score {
                    if best.is_none_or(|b| s > b) {
                        best = Some(s);
                        checkpoint::save(model, kind, meta, &dir.checkpoint(&format!("{}_best", phase.name())))?;
                    }
                }
            }
            report.epochs.push(er);
        }
        if let Some((w, p)) = log.as_mut() {
            w.flush().map_err(|e| Error::io(p.as_path(), e))?;
        }
        report.steps = step;
        report.seconds = started.elapsed().as_secs_f64();
        Ok(report)
    }

    /// Forward and backward for one batch. Gradients accumulate in `model`.
    fn forward_backward(
        &self,
        model: &mut PersonSearchModel,
        phase: Phase,
        batch: &[&Scene],
        sna_rng: &mut crate::rng::Rng,
    ) -> Result<(StepLosses, usize, usize, f64)> {
        let started = Instant::now();
        let inv_b = 1.0 / batch.len() as f64;
        let mut losses = StepLosses::default();
        let mut det_caches = Vec::with_capacity(batch.len());
        let mut det_grads: Vec<DetectorGrads> = Vec::with_capacity(batch.len());
        let mut trunk = Vec::new();
        let mut regions = Vec::new();
        let mut fallbacks = 0;
        for (i, scene) in batch.iter().enumerate() {
            let x = model.features(&scene.image())?;
            let (out, cache) = if phase.grad_into_det() {
                let (o, c) = model.det.forward_train(&x)?;
                (o, Some(c))
            } else {
                (model.det.forward(&x)?, None)
            };
            let mut g = DetectorGrads::default();
            if phase.det_loss() {
                let (l, dg) = detection_loss(&out.preds, &scene.boxes, &model.cfg.detector);
                losses.det += l.total * inv_b;
                losses.cls += l.cls * inv_b;
                losses.bbox += l.bbox * inv_b;
                g.logits = Some(dg.logits.iter().map(|v| v * inv_b).collect());
                g.offsets = Some(dg.offsets.iter().map(|v| v * inv_b).collect());
            }
            if phase.reid_loss() {
                let (f, tc) = model.reid.trunk_forward_train(&x, &out.taps)?;
                let (r, fb) = sna_regions(scene, i, &self.cfg.train.sna, sna_rng)?;
                fallbacks += fb;
                regions.extend(r);
                trunk.push((f, tc));
            }
            det_caches.push(cache);
            det_grads.push(g);
        }
        let forward_ms = started.elapsed().as_secs_f64() * 1e3;
        if phase.reid_loss() && !regions.is_empty() {
            let mut pooled = Vec::with_capacity(regions.len());
            let mut rcaches: Vec<RegionCache> = Vec::with_capacity(regions.len());
            for r in &regions {
                let (v, c) = model.reid.head.pool_region_train(&trunk[r.image].0, &r.bbox)?;
                pooled.push(v);
                rcaches.push(c);
            }
            let (emb, bn_cache) = model.reid.head.bn.forward_train(&pooled)?;
            let labels: Vec<Option<usize>> = regions.iter().map(|r| r.label).collect();
            let oim = model.oim.loss_and_update(&emb, &labels)?;
            let tri = triplet_loss(&emb, &labels, model.cfg.reid.triplet_margin);
            losses.oim = oim.loss;
            losses.triplet = tri.loss;
            let demb: Vec<Vec<f64>> = oim
                .grads
                .iter()
                .zip(&tri.grads)
                .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x + y).collect())
                .collect();
            let dpooled = model.reid.head.bn.backward(&bn_cache, &demb);
            let mut fgrads: Vec<FeatureMap> = trunk.iter().map(|(f, _)| f.zeros_like()).collect();
            for ((r, c), g) in regions.iter().zip(&rcaches).zip(&dpooled) {
                model.reid.head.backward_region(c, g, &mut fgrads[r.image])?;
            }
            let need_det = phase.grad_into_det();
            for (i, ((_, tc), fg)) in trunk.iter().zip(&fgrads).enumerate() {
                let taps = model.reid.trunk_backward(tc, fg, need_det);
                if need_det {
                    det_grads[i].taps = taps;
                }
            }
        }
        if phase.grad_into_det() {
            for (cache, g) in det_caches.iter().zip(det_grads) {
                let cache = cache.as_ref().expect("detector cache kept when gradients flow into it");
                model.det.backward(cache, g)?;
            }
        }
        losses.total = losses.det + losses.oim + losses.triplet;
        Ok((losses, regions.len(), fallbacks, forward_ms))
    }
}

/// Outcome of a complete regime run.
#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub regime: Regime,
    pub model: PersonSearchModel,
    pub metrics: Metrics,
    /// Stage-1 detection metrics on the gallery (incremental and hybrid).
    pub stage1: Option<PrResult>,
    pub stage1_checksum: Option<String>,
    pub stages: Vec<StageReport>,
}

/// Runs a regime end to end. Incremental and hybrid train (or load, given
/// `det_ckpt`) a stage-1 detector first; joint trains from scratch.
pub fn run_regime(
    cfg: &RunConfig,
    data: &Dataset,
    dir: Option<&RunDir>,
    det_ckpt: Option<&Path>,
    mut observer: Option<&mut StepObserver<'_>>,
) -> Result<RunOutcome> {
    cfg.validate()?;
    let regime = cfg.train.regime;
    let mut model = PersonSearchModel::new(cfg.model.clone(), cfg.train.seed)?;
    let mut stages = Vec::new();
    let mut stage1 = None;
    let mut stage1_checksum = None;
    let phase_run = |model: &mut PersonSearchModel, phase: Phase, obs: &mut Option<&mut StepObserver<'_>>| {
        let mut obs_fn = |info: &StepInfo, m: &PersonSearchModel| {
            if let Some(o) = obs.as_mut() {
                o(info, m);
            }
        };
        let mut tr = Trainer {
            cfg,
            data,
            dir,
            observer: Some(&mut obs_fn),
        };
        tr.run_phase(model, phase)
    };
    match regime {
        Regime::Incremental | Regime::Hybrid => {
            match det_ckpt {
                Some(p) => {
                    checkpoint::load_detector_into(&mut model, p)?;
                    log::info!("stage 1 skipped: detector loaded from {}", p.display());
                }
                None => stages.push(phase_run(&mut model, Phase::Detector, &mut observer)?),
            }
            stage1 = Some(evaluate_detection(&model, &data.gallery)?);
            stage1_checksum = Some(model.detector_checksum());
            let phase = if regime == Regime::Hybrid { Phase::Hybrid } else { Phase::Reid };
            stages.push(phase_run(&mut model, phase, &mut observer)?);
            if regime == Regime::Incremental && Some(model.detector_checksum()) != stage1_checksum {
                return Err(Error::Invariant("detector changed during the frozen re-id stage".into()));
            }
        }
        Regime::Joint => stages.push(phase_run(&mut model, Phase::Joint, &mut observer)?),
    }
    let dump = dir.map(|d| d.root.join("dumps"));
    let metrics = evaluate(&model, &data.gallery, &data.query, &cfg.eval, dump.as_deref())?;
    if let Some(d) = dir {
        let meta = serde_json::json!({"regime": regime.name(), "seed": cfg.train.seed});
        checkpoint::save(&model, CheckpointKind::Full, meta, &d.checkpoint("final"))?;
    }
    Ok(RunOutcome {
        regime,
        model,
        metrics,
        stage1,
        stage1_checksum,
        stages,
    })
}
