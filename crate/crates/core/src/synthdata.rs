//! Procedural person-search scenes: identity-bearing sprites on cluttered
//! backgrounds, written as PNG images plus one JSON-lines annotation file per
//! split, and the loader for that layout.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::blocks::FeatureMap;
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::rng::substream;

pub const SPLITS: [&str; 3] = ["train", "gallery", "query"];

/// Gap kept between non-occluding sprites, in pixels.
const GAP: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pattern {
    Solid,
    HStripes,
    VStripes,
    Checker,
}

const PATTERNS: [Pattern; 4] = [Pattern::Solid, Pattern::HStripes, Pattern::VStripes, Pattern::Checker];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Appearance {
    pub upper: [u8; 3],
    pub lower: [u8; 3],
    pub accent: [u8; 3],
    pub skin: [u8; 3],
    pub pattern: Pattern,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub num_identities: usize,
    /// Extra appearances that only ever show up unlabeled.
    pub unlabeled_identities: usize,
    pub unlabeled_probability: f64,
    /// Explicit labeled appearances; generated from the seed when empty.
    pub appearances: Vec<Appearance>,
    pub train_scenes: usize,
    pub gallery_scenes: usize,
    pub query_scenes: usize,
    pub persons_per_scene: [usize; 2],
    pub sprite_width: [usize; 2],
    pub sprite_height: [usize; 2],
    /// 0 = plain background, 1 = heavy clutter.
    pub clutter: f64,
    pub occlusion_probability: f64,
    pub image_width: usize,
    pub image_height: usize,
    /// Train identities disjoint from gallery/query identities.
    pub disjoint_identities: bool,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            num_identities: 10,
            unlabeled_identities: 0,
            unlabeled_probability: 0.0,
            appearances: Vec::new(),
            train_scenes: 200,
            gallery_scenes: 50,
            query_scenes: 20,
            persons_per_scene: [2, 4],
            sprite_width: [20, 32],
            sprite_height: [40, 60],
            clutter: 0.3,
            occlusion_probability: 0.0,
            image_width: 128,
            image_height: 128,
            disjoint_identities: false,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::config(format!("synthetic spec: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text).map_err(|e| Error::config(format!("synthetic spec: {e}")))
        } else {
            Self::from_toml(&text)
        }
    }

    /// Identity ids used in the train and in the gallery/query splits.
    pub fn identity_split(&self) -> (Vec<usize>, Vec<usize>) {
        let all: Vec<usize> = (0..self.num_identities).collect();
        if self.disjoint_identities {
            let k = self.num_identities.div_ceil(2);
            (all[..k].to_vec(), all[k..].to_vec())
        } else {
            (all.clone(), all)
        }
    }

    /// Fallback grid of sprite slots; placement can always succeed on it.
    fn slot_grid(&self) -> (usize, usize) {
        let cols = (self.image_width + GAP) / (self.sprite_width[1] + GAP);
        let rows = (self.image_height + GAP) / (self.sprite_height[1] + GAP);
        (cols, rows)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_identities < 2 {
            return Err(Error::config("num_identities must be at least 2"));
        }
        if self.image_width < 64 || self.image_height < 64 {
            return Err(Error::config("image size must be at least 64x64"));
        }
        let [pmin, pmax] = self.persons_per_scene;
        if pmin == 0 || pmin > pmax {
            return Err(Error::config("persons_per_scene must be [min, max] with 1 <= min <= max"));
        }
        for (name, [lo, hi]) in [("sprite_width", self.sprite_width), ("sprite_height", self.sprite_height)] {
            if lo < 8 || lo > hi {
                return Err(Error::config(format!("{name} must be [min, max] with 8 <= min <= max")));
            }
        }
        if self.sprite_width[1] > self.image_width || self.sprite_height[1] > self.image_height {
            return Err(Error::config("sprites do not fit in the image"));
        }
        let (cols, rows) = self.slot_grid();
        if cols * rows < pmax {
            return Err(Error::config(format!(
                "cannot place {pmax} sprites of up to {}x{} without overlap in a {}x{} image",
                self.sprite_width[1], self.sprite_height[1], self.image_width, self.image_height
            )));
        }
        for (name, p) in [
            ("unlabeled_probability", self.unlabeled_probability),
            ("occlusion_probability", self.occlusion_probability),
            ("clutter", self.clutter),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::config(format!("{name} must lie in [0, 1]")));
            }
        }
        if self.unlabeled_probability > 0.0 && self.unlabeled_identities == 0 {
            return Err(Error::config("unlabeled_probability > 0 needs unlabeled_identities > 0"));
        }
        if !self.appearances.is_empty() && self.appearances.len() != self.num_identities {
            return Err(Error::config("appearances must list exactly num_identities entries"));
        }
        if self.train_scenes == 0 || self.gallery_scenes == 0 || self.query_scenes == 0 {
            return Err(Error::config("every split needs at least one scene"));
        }
        let (train_ids, test_ids) = self.identity_split();
        if pmax > train_ids.len().min(test_ids.len()) {
            return Err(Error::config(format!(
                "{pmax} persons per scene need at least {pmax} distinct identities in every split"
            )));
        }
        if self.gallery_scenes * pmin < 2 * test_ids.len() {
            return Err(Error::config(format!(
                "{} gallery scenes with at least {pmin} persons cannot show each of {} identities twice",
                self.gallery_scenes,
                test_ids.len()
            )));
        }
        if self.query_scenes * pmin < test_ids.len() {
            return Err(Error::config("too few query scenes to query every gallery identity"));
        }
        Ok(())
    }

    /// Labeled appearances followed by the unlabeled-only ones.
    pub fn resolved_appearances(&self) -> Vec<Appearance> {
        let total = self.num_identities + self.unlabeled_identities;
        let mut rng = substream(self.seed, "synth.appearance");
        let offset: f64 = rng.gen_range(0.0..360.0);
        let mut out: Vec<Appearance> = (0..total)
            .map(|i| {
                // spread upper-body hues evenly; lower-body hue walks by the golden angle
                let hu = (offset + 360.0 * i as f64 / total as f64) % 360.0;
                let hl = (offset + 137.5 * i as f64 + 90.0) % 360.0;
                let vu = if i % 2 == 0 { 0.95 } else { 0.7 };
                let vl = [0.35, 0.6, 0.85][i % 3];
                let skin_tones = [[224, 172, 105], [198, 134, 66], [141, 85, 36], [255, 219, 172]];
                Appearance {
                    upper: hsv(hu, 0.8, vu),
                    lower: hsv(hl, 0.65, vl),
                    accent: hsv((hu + 180.0) % 360.0, 0.5, 1.0 - 0.5 * vu),
                    skin: skin_tones[rng.gen_range(0..skin_tones.len())],
                    pattern: PATTERNS[i % PATTERNS.len()],
                }
            })
            .collect();
        for (slot, a) in out.iter_mut().zip(&self.appearances) {
            *slot = *a;
        }
        out
    }
}

fn hsv(h: f64, s: f64, v: f64) -> [u8; 3] {
    let c = v * s;
    let hp = h / 60.0;
    let x = c * (1.0 - (hp % 2.0 - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    let q = |u: f64| ((u + m) * 255.0).round().clamp(0.0, 255.0) as u8;
    [q(r), q(g), q(b)]
}

/// One annotated image held in memory.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub image_id: String,
    pub width: usize,
    pub height: usize,
    /// Interleaved RGB, row-major.
    pub pixels: Vec<u8>,
    pub boxes: Vec<BBox>,
    pub identities: Vec<Option<usize>>,
}

impl Scene {
    /// Channel-first image with values in `[0, 1]`.
    pub fn image(&self) -> FeatureMap {
        let n = self.width * self.height;
        let mut data = vec![0.0; 3 * n];
        for (i, px) in self.pixels.chunks_exact(3).enumerate() {
            for c in 0..3 {
                data[c * n + i] = px[c] as f64 / 255.0;
            }
        }
        FeatureMap::from_vec(3, self.height, self.width, 1, data).expect("scene dimensions are consistent")
    }
}

/// One line of `annotations.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub image: String,
    pub width: usize,
    pub height: usize,
    pub boxes: Vec<[f64; 4]>,
    pub identities: Vec<Option<usize>>,
}

struct Canvas {
    w: usize,
    h: usize,
    px: Vec<u8>,
}

impl Canvas {
    fn put(&mut self, x: usize, y: usize, c: [u8; 3]) {
        if x < self.w && y < self.h {
            let i = 3 * (y * self.w + x);
            self.px[i..i + 3].copy_from_slice(&c);
        }
    }

    fn rect(&mut self, x0: usize, y0: usize, x1: usize, y1: usize, mut color: impl FnMut(usize, usize) -> [u8; 3]) {
        for y in y0..y1.min(self.h) {
            for x in x0..x1.min(self.w) {
                self.put(x, y, color(x - x0, y - y0));
            }
        }
    }

    fn ellipse(&mut self, cx: f64, cy: f64, rx: f64, ry: f64, c: [u8; 3]) {
        let (x0, x1) = ((cx - rx).floor().max(0.0) as usize, (cx + rx).ceil() as usize);
        let (y0, y1) = ((cy - ry).floor().max(0.0) as usize, (cy + ry).ceil() as usize);
        for y in y0..y1.min(self.h) {
            for x in x0..x1.min(self.w) {
                let dx = (x as f64 + 0.5 - cx) / rx;
                let dy = (y as f64 + 0.5 - cy) / ry;
                if dx * dx + dy * dy <= 1.0 {
                    self.put(x, y, c);
                }
            }
        }
    }
}

fn shade(c: [u8; 3], f: f64) -> [u8; 3] {
    c.map(|v| (v as f64 * f).round().clamp(0.0, 255.0) as u8)
}

/// Draws a person filling `[x, x + w) x [y, y + h)` exactly: head on top,
/// patterned torso, two legs reaching the bottom edge.
fn draw_person(cv: &mut Canvas, x: usize, y: usize, w: usize, h: usize, a: &Appearance, brightness: f64) {
    let head_h = (h as f64 * 0.2).round().max(3.0) as usize;
    let torso_end = (h as f64 * 0.55).round() as usize;
    let upper = shade(a.upper, brightness);
    let accent = shade(a.accent, brightness);
    let lower = shade(a.lower, brightness);
    let skin = shade(a.skin, brightness);
    let fx = x as f64;
    cv.ellipse(
        fx + w as f64 / 2.0,
        y as f64 + head_h as f64 / 2.0,
        w as f64 * 0.25,
        head_h as f64 / 2.0,
        skin,
    );
    let period = 4;
    let pattern = a.pattern;
    cv.rect(x, y + head_h, x + w, y + torso_end, |dx, dy| {
        let on = match pattern {
            Pattern::Solid => false,
            Pattern::HStripes => (dy / period) % 2 == 1,
            Pattern::VStripes => (dx / period) % 2 == 1,
            Pattern::Checker => ((dx / period) + (dy / period)) % 2 == 1,
        };
        if on {
            accent
        } else {
            upper
        }
    });
    let leg_w = (w as f64 * 0.4).round().max(2.0) as usize;
    cv.rect(x, y + torso_end, x + leg_w, y + h, |_, _| lower);
    cv.rect(x + w - leg_w, y + torso_end, x + w, y + h, |_, _| lower);
}

fn overlaps(a: &BBox, b: &BBox, gap: f64) -> bool {
    a.x1 < b.x2 + gap && b.x1 < a.x2 + gap && a.y1 < b.y2 + gap && b.y1 < a.y2 + gap
}

/// Which appearance each person of a scene shows; `None` means unlabeled
/// with the given unlabeled appearance index.
#[derive(Clone, Copy, Debug)]
enum Who {
    Labeled(usize),
    Unlabeled(usize),
}

fn render_scene<R: Rng>(
    spec: &SyntheticSpec,
    appearances: &[Appearance],
    people: &[Who],
    image_id: String,
    rng: &mut R,
) -> Scene {
    let (w, h) = (spec.image_width, spec.image_height);
    let bg = [rng.gen_range(70..150), rng.gen_range(70..150), rng.gen_range(70..150)];
    let mut cv = Canvas {
        w,
        h,
        px: bg.repeat(w * h),
    };
    let clutter_items = (spec.clutter * 24.0).round() as usize;
    for _ in 0..clutter_items {
        let c = [rng.gen(), rng.gen(), rng.gen()];
        let (sw, sh) = (rng.gen_range(3..14), rng.gen_range(3..14));
        let (x, y) = (rng.gen_range(0..w), rng.gen_range(0..h));
        if rng.gen_bool(0.5) {
            cv.rect(x, y, x + sw, y + sh, |_, _| c);
        } else {
            cv.ellipse(x as f64, y as f64, sw as f64 / 2.0, sh as f64 / 2.0, c);
        }
    }
    let sizes: Vec<(usize, usize)> = people
        .iter()
        .map(|_| {
            (
                rng.gen_range(spec.sprite_width[0]..=spec.sprite_width[1]),
                rng.gen_range(spec.sprite_height[0]..=spec.sprite_height[1]),
            )
        })
        .collect();
    let boxes = place(spec, &sizes, rng);
    let mut identities = Vec::with_capacity(people.len());
    for (who, b) in people.iter().zip(&boxes) {
        let (app, id) = match *who {
            Who::Labeled(id) => (&appearances[id], Some(id)),
            Who::Unlabeled(k) => (&appearances[spec.num_identities + k], None),
        };
        let brightness = rng.gen_range(0.85..1.1);
        draw_person(
            &mut cv,
            b.x1 as usize,
            b.y1 as usize,
            b.width() as usize,
            b.height() as usize,
            app,
            brightness,
        );
        identities.push(id);
    }
    // mild sensor noise
    for v in cv.px.iter_mut() {
        *v = (*v as i32 + rng.gen_range(-6..=6)).clamp(0, 255) as u8;
    }
    Scene {
        image_id,
        width: w,
        height: h,
        pixels: cv.px,
        boxes,
        identities,
    }
}

/// Random placement with rejection; falls back to a shuffled slot grid when
/// random tries keep colliding.
fn place<R: Rng>(spec: &SyntheticSpec, sizes: &[(usize, usize)], rng: &mut R) -> Vec<BBox> {
    let (w, h) = (spec.image_width, spec.image_height);
    let mut boxes: Vec<BBox> = Vec::new();
    for &(sw, sh) in sizes {
        let occluding = spec.occlusion_probability > 0.0 && rng.gen_bool(spec.occlusion_probability);
        let mut placed = None;
        for _ in 0..200 {
            let x = rng.gen_range(0..=w - sw) as f64;
            let y = rng.gen_range(0..=h - sh) as f64;
            let b = BBox::new(x, y, x + sw as f64, y + sh as f64).expect("positive sprite size");
            if occluding || boxes.iter().all(|o| !overlaps(o, &b, GAP as f64)) {
                placed = Some(b);
                break;
            }
        }
        match placed {
            Some(b) => boxes.push(b),
            None => return place_on_slots(spec, sizes, rng),
        }
    }
    boxes
}

fn place_on_slots<R: Rng>(spec: &SyntheticSpec, sizes: &[(usize, usize)], rng: &mut R) -> Vec<BBox> {
    let (cols, rows) = spec.slot_grid();
    let (cw, ch) = (spec.sprite_width[1] + GAP, spec.sprite_height[1] + GAP);
    let mut slots: Vec<(usize, usize)> = (0..rows).flat_map(|r| (0..cols).map(move |c| (c, r))).collect();
    slots.shuffle(rng);
    sizes
        .iter()
        .zip(slots)
        .map(|(&(sw, sh), (c, r))| {
            let x = (c * cw + rng.gen_range(0..=cw - GAP - sw)) as f64;
            let y = (r * ch + rng.gen_range(0..=ch - GAP - sh)) as f64;
            BBox::new(x, y, x + sw as f64, y + sh as f64).expect("positive sprite size")
        })
        .collect()
}

/// Cast of every scene in a split.
fn cast<R: Rng>(spec: &SyntheticSpec, ids: &[usize], scenes: usize, min_each: usize, rng: &mut R) -> Vec<Vec<Who>> {
    let [pmin, pmax] = spec.persons_per_scene;
    let counts: Vec<usize> = (0..scenes).map(|_| rng.gen_range(pmin..=pmax)).collect();
    let mut cast: Vec<Vec<Who>> = vec![Vec::new(); scenes];
    // guaranteed appearances first, each in a distinct scene per identity
    let mut order: Vec<usize> = (0..scenes).collect();
    order.shuffle(rng);
    let mut cursor = 0;
    for round in 0..min_each {
        for &id in ids {
            // skip scenes that are full or already show this identity
            let mut tries = 0;
            loop {
                let s = order[cursor % scenes];
                cursor += 1;
                tries += 1;
                let has = cast[s].iter().any(|w| matches!(w, Who::Labeled(i) if *i == id));
                if cast[s].len() < counts[s] && !has {
                    cast[s].push(Who::Labeled(id));
                    break;
                }
                assert!(tries <= 2 * scenes, "validated spec leaves room for round {round}");
            }
        }
    }
    for (s, who) in cast.iter_mut().enumerate() {
        while who.len() < counts[s] {
            if spec.unlabeled_identities > 0 && rng.gen_bool(spec.unlabeled_probability) {
                who.push(Who::Unlabeled(rng.gen_range(0..spec.unlabeled_identities)));
            } else {
                // a person appears at most once per scene
                let absent: Vec<usize> = ids
                    .iter()
                    .copied()
                    .filter(|id| !who.iter().any(|w| matches!(w, Who::Labeled(i) if i == id)))
                    .collect();
                who.push(Who::Labeled(absent[rng.gen_range(0..absent.len())]));
            }
        }
        who.shuffle(rng);
    }
    cast
}

/// Renders all three splits in memory.
pub fn render(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let appearances = spec.resolved_appearances();
    let (train_ids, test_ids) = spec.identity_split();
    let plan = [
        ("train", spec.train_scenes, &train_ids, 0),
        ("gallery", spec.gallery_scenes, &test_ids, 2),
        ("query", spec.query_scenes, &test_ids, 1),
    ];
    let mut splits = BTreeMap::new();
    for (split, n, ids, min_each) in plan {
        let mut rng = substream(spec.seed, &format!("synth.cast.{split}"));
        let casting = cast(spec, ids, n, min_each, &mut rng);
        let scenes = casting
            .iter()
            .enumerate()
            .map(|(i, people)| {
                let mut rng = substream(spec.seed, &format!("synth.scene.{split}.{i}"));
                render_scene(spec, &appearances, people, format!("{split}_{i:04}"), &mut rng)
            })
            .collect();
        splits.insert(split.to_string(), scenes);
    }
    let mut take = |k: &str| splits.remove(k).expect("split rendered");
    Ok(Dataset {
        train: take("train"),
        gallery: take("gallery"),
        query: take("query"),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub train: Vec<Scene>,
    pub gallery: Vec<Scene>,
    pub query: Vec<Scene>,
}

impl Dataset {
    pub fn split(&self, name: &str) -> Option<&[Scene]> {
        match name {
            "train" => Some(&self.train),
            "gallery" => Some(&self.gallery),
            "query" => Some(&self.query),
            _ => None,
        }
    }

    /// Writes `<split>/images/*.png` and `<split>/annotations.jsonl`.
    pub fn write(&self, out: &Path) -> Result<()> {
        for split in SPLITS {
            let dir = out.join(split);
            let img_dir = dir.join("images");
            fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
            let ann_path = dir.join("annotations.jsonl");
            let mut ann = fs::File::create(&ann_path).map_err(|e| Error::io(&ann_path, e))?;
            for s in self.split(split).expect("known split") {
                let rel = format!("images/{}.png", s.image_id);
                let path = dir.join(&rel);
                let img = image::RgbImage::from_raw(s.width as u32, s.height as u32, s.pixels.clone())
                    .expect("pixel buffer matches dimensions");
                img.save_with_format(&path, image::ImageFormat::Png)
                    .map_err(|e| Error::Image { path: path.clone(), source: e })?;
                let line = Annotation {
                    image: rel,
                    width: s.width,
                    height: s.height,
                    boxes: s.boxes.iter().map(|b| [b.x1, b.y1, b.x2, b.y2]).collect(),
                    identities: s.identities.clone(),
                };
                let json = serde_json::to_string(&line).map_err(|e| Error::json("annotation", e))?;
                writeln!(ann, "{json}").map_err(|e| Error::io(&ann_path, e))?;
            }
        }
        Ok(())
    }

    /// Reads a dataset written by [`Dataset::write`].
    pub fn load(root: &Path) -> Result<Self> {
        let read = |split: &str| load_split(&root.join(split));
        Ok(Dataset {
            train: read("train")?,
            gallery: read("gallery")?,
            query: read("query")?,
        })
    }
}

fn load_split(dir: &Path) -> Result<Vec<Scene>> {
    let ann_path = dir.join("annotations.jsonl");
    let text = fs::read_to_string(&ann_path).map_err(|e| Error::io(&ann_path, e))?;
    let mut scenes = Vec::new();
    for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let a: Annotation =
            serde_json::from_str(line).map_err(|e| Error::json(format!("{}:{}", ann_path.display(), n + 1), e))?;
        if a.boxes.len() != a.identities.len() {
            return Err(Error::input(format!(
                "{}:{}: {} boxes but {} identities",
                ann_path.display(),
                n + 1,
                a.boxes.len(),
                a.identities.len()
            )));
        }
        let path = dir.join(&a.image);
        let img = image::open(&path)
            .map_err(|e| Error::Image { path: path.clone(), source: e })?
            .to_rgb8();
        if (img.width() as usize, img.height() as usize) != (a.width, a.height) {
            return Err(Error::input(format!("{}: size differs from its annotation", path.display())));
        }
        let boxes = a
            .boxes
            .iter()
            .map(|&[x1, y1, x2, y2]| BBox::new(x1, y1, x2, y2))
            .collect::<Result<Vec<_>>>()?;
        let image_id = Path::new(&a.image)
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| a.image.clone());
        scenes.push(Scene {
            image_id,
            width: a.width,
            height: a.height,
            pixels: img.into_raw(),
            boxes,
            identities: a.identities,
        });
    }
    Ok(scenes)
}

/// Renders `spec` and writes it under `out`, returning the directory hash.
pub fn generate(spec: &SyntheticSpec, out: &Path) -> Result<String> {
    let data = render(spec)?;
    data.write(out)?;
    let spec_path = out.join("spec.json");
    let json = serde_json::to_string_pretty(spec).map_err(|e| Error::json("spec", e))?;
    fs::write(&spec_path, json).map_err(|e| Error::io(&spec_path, e))?;
    dir_hash(out)
}

fn walk(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_dir() {
            walk(&path, out)?;
        } else {
            out.push(path);
        }
    }
    Ok(())
}

/// SHA-256 over sorted relative paths and file contents.
pub fn dir_hash(root: &Path) -> Result<String> {
    let mut files = Vec::new();
    walk(root, &mut files)?;
    let mut rel: Vec<(String, PathBuf)> = files
        .into_iter()
        .map(|p| {
            let r = p.strip_prefix(root).unwrap_or(&p).to_string_lossy().replace('\\', "/");
            (r, p)
        })
        .collect();
    rel.sort();
    let mut h = Sha256::new();
    for (r, p) in rel {
        let bytes = fs::read(&p).map_err(|e| Error::io(&p, e))?;
        h.update((r.len() as u64).to_le_bytes());
        h.update(r.as_bytes());
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(&bytes);
    }
    Ok(hex::encode(h.finalize()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::{BTreeSet, HashSet};

    fn tiny() -> SyntheticSpec {
        SyntheticSpec {
            train_scenes: 6,
            gallery_scenes: 10,
            query_scenes: 5,
            ..SyntheticSpec::default()
        }
    }

    #[test]
    fn every_gallery_identity_appears_twice_and_queries_are_covered() {
        let spec = SyntheticSpec {
            gallery_scenes: 50,
            ..tiny()
        };
        let data = render(&spec).unwrap();
        let mut scenes_per_id: BTreeMap<usize, HashSet<usize>> = BTreeMap::new();
        for (i, s) in data.gallery.iter().enumerate() {
            for id in s.identities.iter().flatten() {
                scenes_per_id.entry(*id).or_default().insert(i);
            }
        }
        assert_eq!(scenes_per_id.len(), 10);
        assert!(scenes_per_id.values().all(|s| s.len() >= 2));
        let query_ids: BTreeSet<usize> = data.query.iter().flat_map(|s| s.identities.iter().flatten().copied()).collect();
        assert!(query_ids.iter().all(|id| scenes_per_id.contains_key(id)));
    }

    #[test]
    fn boxes_are_inside_and_disjoint_without_occlusion() {
        let data = render(&tiny()).unwrap();
        for s in data.train.iter().chain(&data.gallery).chain(&data.query) {
            let [pmin, pmax] = tiny().persons_per_scene;
            assert!((pmin..=pmax).contains(&s.boxes.len()));
            for (i, a) in s.boxes.iter().enumerate() {
                assert!(a.x1 >= 0.0 && a.y1 >= 0.0 && a.x2 <= 128.0 && a.y2 <= 128.0);
                for b in &s.boxes[i + 1..] {
                    assert_eq!(a.intersection_area(b), 0.0);
                }
            }
        }
    }

    #[test]
    fn a_labeled_identity_appears_once_per_scene() {
        let data = render(&tiny()).unwrap();
        for s in data.train.iter().chain(&data.gallery).chain(&data.query) {
            let ids: Vec<usize> = s.identities.iter().flatten().copied().collect();
            let unique: HashSet<usize> = ids.iter().copied().collect();
            assert_eq!(unique.len(), ids.len(), "{}", s.image_id);
        }
        let disjoint_crowd = SyntheticSpec {
            num_identities: 6,
            disjoint_identities: true,
            persons_per_scene: [2, 4],
            ..tiny()
        };
        assert!(matches!(disjoint_crowd.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn crowded_spec_is_rejected() {
        let spec = SyntheticSpec {
            persons_per_scene: [2, 12],
            ..tiny()
        };
        assert!(matches!(spec.validate(), Err(Error::Config(_))));
        let spec = SyntheticSpec {
            num_identities: 1,
            ..tiny()
        };
        assert!(spec.validate().is_err());
    }

    #[test]
    fn disjoint_flag_separates_identity_sets() {
        let spec = SyntheticSpec {
            disjoint_identities: true,
            ..tiny()
        };
        let data = render(&spec).unwrap();
        let train: BTreeSet<usize> = data.train.iter().flat_map(|s| s.identities.iter().flatten().copied()).collect();
        let test: BTreeSet<usize> = data
            .gallery
            .iter()
            .chain(&data.query)
            .flat_map(|s| s.identities.iter().flatten().copied())
            .collect();
        assert!(train.is_disjoint(&test));
        let shared = render(&tiny()).unwrap();
        let train: BTreeSet<usize> = shared.train.iter().flat_map(|s| s.identities.iter().flatten().copied()).collect();
        assert!(train.iter().all(|id| *id < 10));
    }

    #[test]
    fn write_load_round_trip_and_stable_hash() {
        let spec = SyntheticSpec {
            train_scenes: 2,
            gallery_scenes: 10,
            query_scenes: 5,
            ..SyntheticSpec::default()
        };
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let ha = generate(&spec, a.path()).unwrap();
        let hb = generate(&spec, b.path()).unwrap();
        assert_eq!(ha, hb);
        let loaded = Dataset::load(a.path()).unwrap();
        assert_eq!(loaded, render(&spec).unwrap());
        let other = SyntheticSpec { seed: 1, ..spec };
        let c = tempfile::tempdir().unwrap();
        assert_ne!(generate(&other, c.path()).unwrap(), ha);
    }

    fn mean_color(s: &Scene, x0: usize, y0: usize, x1: usize, y1: usize) -> [f64; 3] {
        let mut acc = [0.0; 3];
        let mut n = 0.0;
        for y in y0..y1 {
            for x in x0..x1 {
                let i = 3 * (y * s.width + x);
                for c in 0..3 {
                    acc[c] += s.pixels[i + c] as f64;
                }
                n += 1.0;
            }
        }
        acc.map(|v| v / n)
    }

    fn dist(a: [f64; 3], b: [u8; 3]) -> f64 {
        (0..3).map(|c| (a[c] - b[c] as f64).powi(2)).sum::<f64>().sqrt()
    }

    #[test]
    fn crops_match_their_identity_template() {
        // the lower-body (legs) colour of a GT crop is closer to its own
        // identity template than the background patch beside the scene is
        let spec = tiny();
        let apps = spec.resolved_appearances();
        let data = render(&spec).unwrap();
        let mut own = 0.0;
        let mut other = 0.0;
        let mut n = 0.0;
        for s in &data.gallery {
            for (b, id) in s.boxes.iter().zip(&s.identities) {
                let Some(id) = id else { continue };
                let (x1, y2) = (b.x1 as usize, b.y2 as usize);
                let leg = mean_color(s, x1, y2 - 4, x1 + 3, y2);
                own += dist(leg, apps[*id].lower);
                other += (0..spec.num_identities)
                    .filter(|j| j != id)
                    .map(|j| dist(leg, apps[j].lower))
                    .fold(f64::INFINITY, f64::min);
                n += 1.0;
            }
        }
        assert!(own / n < other / n, "own {} vs nearest other {}", own / n, other / n);
    }
}
