//! Detection AP/Recall and person-search mAP/top-1 over a gallery built from
//! the model's own detections.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::detector::Detection;
use crate::error::{Error, Result};
use crate::geometry::{iou, BBox};
use crate::model::PersonSearchModel;
use crate::synthdata::Scene;

/// IoU above which a retrieved box counts as covering a GT person.
pub const SEARCH_IOU: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrResult {
    pub ap: f64,
    pub recall: f64,
}

/// Area under the precision envelope (all-points interpolation), given the
/// TP/FP flags in rank order and the number of positives.
pub fn interpolated_ap(tp: &[bool], num_pos: usize) -> f64 {
    if num_pos == 0 {
        return 0.0;
    }
    let mut recall = Vec::with_capacity(tp.len());
    let mut precision = Vec::with_capacity(tp.len());
    let mut hits = 0usize;
    for (k, &t) in tp.iter().enumerate() {
        hits += t as usize;
        recall.push(hits as f64 / num_pos as f64);
        precision.push(hits as f64 / (k + 1) as f64);
    }
    for k in (0..precision.len().saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    let mut ap = 0.0;
    let mut prev = 0.0;
    for (r, p) in recall.iter().zip(&precision) {
        ap += (r - prev) * p;
        prev = *r;
    }
    ap
}

/// Detection AP and Recall at `iou_thresh`.
///
/// Detections from all images are ranked by score (ties keep image order,
/// then per-image order). Each detection takes the unmatched GT box of its
/// image with the highest IoU, provided that IoU reaches the threshold.
pub fn detection_pr(detections: &[Vec<Detection>], gt: &[Vec<BBox>], iou_thresh: f64) -> Result<PrResult> {
    if detections.len() != gt.len() {
        return Err(Error::input("detections and ground truth cover different image counts"));
    }
    let total: usize = gt.iter().map(Vec::len).sum();
    if total == 0 {
        return Err(Error::Undefined("detection AP with zero ground-truth boxes".into()));
    }
    let mut all: Vec<(usize, &Detection)> = detections
        .iter()
        .enumerate()
        .flat_map(|(i, ds)| ds.iter().map(move |d| (i, d)))
        .collect();
    all.sort_by(|a, b| b.1.score.total_cmp(&a.1.score));
    let mut taken: Vec<Vec<bool>> = gt.iter().map(|g| vec![false; g.len()]).collect();
    let tp: Vec<bool> = all
        .iter()
        .map(|&(i, d)| {
            let best = gt[i]
                .iter()
                .enumerate()
                .filter(|(k, _)| !taken[i][*k])
                .map(|(k, g)| (k, iou(&d.bbox, g)))
                .filter(|(_, v)| *v >= iou_thresh)
                .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)));
            match best {
                Some((k, _)) => {
                    taken[i][k] = true;
                    true
                }
                None => false,
            }
        })
        .collect();
    let matched = tp.iter().filter(|&&t| t).count();
    Ok(PrResult {
        ap: interpolated_ap(&tp, total),
        recall: matched as f64 / total as f64,
    })
}

/// One retrieval candidate: a detection in a gallery image and its embedding.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GalleryEntry {
    pub image_id: String,
    pub detection: Detection,
    pub embedding: Vec<f64>,
}

/// Ground truth of one gallery image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GalleryImage {
    pub image_id: String,
    pub boxes: Vec<BBox>,
    pub identities: Vec<Option<usize>>,
}

impl GalleryImage {
    pub fn from_scene(s: &Scene) -> Self {
        GalleryImage {
            image_id: s.image_id.clone(),
            boxes: s.boxes.clone(),
            identities: s.identities.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Query {
    pub query_id: String,
    pub image_id: String,
    pub bbox: BBox,
    pub identity: usize,
    pub embedding: Vec<f64>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchConfig {
    pub use_cws: bool,
    /// Drop queries whose identity never appears in the gallery instead of
    /// scoring them as AP 0.
    pub exclude_absent: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryResult {
    pub query_id: String,
    pub identity: usize,
    pub ap: f64,
    pub top1: bool,
    pub num_gt: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchMetrics {
    #[serde(rename = "mAP")]
    pub map: f64,
    pub top1: f64,
    pub per_query: Vec<QueryResult>,
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Indices sorted by descending value; equal values keep index order.
pub fn rank_descending(values: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]));
    idx
}

/// Average precision of one ranked list whose hits are flagged in `matches`;
/// the denominator is the number of GT instances, so missed ones cost recall.
pub fn ranked_ap(matches: &[bool], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (k, &m) in matches.iter().enumerate() {
        if m {
            hits += 1;
            sum += hits as f64 / (k + 1) as f64;
        }
    }
    sum / num_gt as f64
}

/// Flags the ranked candidates that retrieve an instance of `identity`.
/// A GT person is claimed by its highest-ranked qualifying detection only.
pub fn match_ranking(
    ranking: &[usize],
    entries: &[GalleryEntry],
    images: &HashMap<&str, &GalleryImage>,
    identity: usize,
) -> Vec<bool> {
    let mut claimed: HashMap<(&str, usize), ()> = HashMap::new();
    ranking
        .iter()
        .map(|&e| {
            let entry = &entries[e];
            let Some(img) = images.get(entry.image_id.as_str()) else {
                return false;
            };
            let hit = img
                .boxes
                .iter()
                .zip(&img.identities)
                .enumerate()
                .filter(|(_, (_, id))| **id == Some(identity))
                .filter(|(k, _)| !claimed.contains_key(&(img.image_id.as_str(), *k)))
                .map(|(k, (b, _))| (k, iou(&entry.detection.bbox, b)))
                .filter(|(_, v)| *v > SEARCH_IOU)
                .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)));
            match hit {
                Some((k, _)) => {
                    claimed.insert((img.image_id.as_str(), k), ());
                    true
                }
                None => false,
            }
        })
        .collect()
}

/// Search evaluation with an arbitrary similarity function.
pub fn search_eval_with(
    queries: &[Query],
    images: &[GalleryImage],
    entries: &[GalleryEntry],
    cfg: &SearchConfig,
    similarity: impl Fn(&Query, &GalleryEntry) -> f64,
) -> Result<SearchMetrics> {
    let by_id: HashMap<&str, &GalleryImage> = images.iter().map(|g| (g.image_id.as_str(), g)).collect();
    if by_id.len() != images.len() {
        return Err(Error::input("duplicate gallery image id"));
    }
    let mut per_query = Vec::with_capacity(queries.len());
    for q in queries {
        let candidates: Vec<usize> = (0..entries.len()).filter(|&e| entries[e].image_id != q.image_id).collect();
        let sims: Vec<f64> = candidates.iter().map(|&e| similarity(q, &entries[e])).collect();
        let ranking: Vec<usize> = rank_descending(&sims).into_iter().map(|k| candidates[k]).collect();
        let num_gt = images
            .iter()
            .filter(|g| g.image_id != q.image_id)
            .flat_map(|g| &g.identities)
            .filter(|id| **id == Some(q.identity))
            .count();
        if num_gt == 0 {
            log::warn!("query {} (identity {}) has no gallery instance", q.query_id, q.identity);
            if cfg.exclude_absent {
                continue;
            }
        }
        let matches = match_ranking(&ranking, entries, &by_id, q.identity);
        per_query.push(QueryResult {
            query_id: q.query_id.clone(),
            identity: q.identity,
            ap: ranked_ap(&matches, num_gt),
            top1: matches.first().copied().unwrap_or(false),
            num_gt,
        });
    }
    if per_query.is_empty() {
        return Err(Error::Undefined("search metrics with no evaluable query".into()));
    }
    let n = per_query.len() as f64;
    Ok(SearchMetrics {
        map: per_query.iter().map(|r| r.ap).sum::<f64>() / n,
        top1: per_query.iter().filter(|r| r.top1).count() as f64 / n,
        per_query,
    })
}

/// Cosine similarity, multiplied by the detection score under CWS.
pub fn search_eval(
    queries: &[Query],
    images: &[GalleryImage],
    entries: &[GalleryEntry],
    cfg: &SearchConfig,
) -> Result<SearchMetrics> {
    let cws = cfg.use_cws;
    search_eval_with(queries, images, entries, cfg, |q, e| {
        let s = cosine(&q.embedding, &e.embedding);
        if cws {
            s * e.detection.score
        } else {
            s
        }
    })
}

/// Runs detection and embedding on every gallery image.
pub fn build_gallery(model: &PersonSearchModel, scenes: &[Scene]) -> Result<(Vec<Vec<Detection>>, Vec<GalleryEntry>)> {
    let mut dets = Vec::with_capacity(scenes.len());
    let mut entries = Vec::new();
    for s in scenes {
        let (d, emb) = model.detect_and_embed(&s.image())?;
        for (det, e) in d.iter().zip(emb) {
            entries.push(GalleryEntry {
                image_id: s.image_id.clone(),
                detection: *det,
                embedding: e,
            });
        }
        dets.push(d);
    }
    Ok((dets, entries))
}

/// One query per labeled GT box of the query scenes.
pub fn embed_queries(model: &PersonSearchModel, scenes: &[Scene]) -> Result<Vec<Query>> {
    let mut out = Vec::new();
    for s in scenes {
        let labeled: Vec<(usize, BBox, usize)> = s
            .boxes
            .iter()
            .zip(&s.identities)
            .enumerate()
            .filter_map(|(k, (b, id))| id.map(|id| (k, *b, id)))
            .collect();
        if labeled.is_empty() {
            continue;
        }
        let boxes: Vec<BBox> = labeled.iter().map(|(_, b, _)| *b).collect();
        let emb = model.embed(&s.image(), &boxes)?;
        for ((k, b, id), e) in labeled.into_iter().zip(emb) {
            out.push(Query {
                query_id: format!("{}#{k}", s.image_id),
                image_id: s.image_id.clone(),
                bbox: b,
                identity: id,
                embedding: e,
            });
        }
    }
    Ok(out)
}

/// `detections.jsonl` line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub image_id: String,
    pub detections: Vec<Detection>,
}

/// `embeddings.jsonl` line: a gallery detection or a query box.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRecord {
    pub image_id: String,
    pub kind: EmbeddingKind,
    #[serde(rename = "box")]
    pub bbox: BBox,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub identity: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub query_id: Option<String>,
    pub embedding: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbeddingKind {
    Gallery,
    Query,
}

fn write_jsonl<T: Serialize>(path: &Path, items: impl IntoIterator<Item = T>) -> Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path).map_err(|e| Error::io(path, e))?);
    for it in items {
        let line = serde_json::to_string(&it).map_err(|e| Error::json(path.display().to_string(), e))?;
        writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
    }
    f.flush().map_err(|e| Error::io(path, e))
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| serde_json::from_str(l).map_err(|e| Error::json(format!("{}:{}", path.display(), n + 1), e)))
        .collect()
}

/// Everything the search evaluation consumes, in dump form.
#[derive(Clone, Debug, PartialEq)]
pub struct Dumps {
    pub detections: Vec<DetectionRecord>,
    pub embeddings: Vec<EmbeddingRecord>,
}

impl Dumps {
    pub fn new(gallery: &[Scene], dets: &[Vec<Detection>], entries: &[GalleryEntry], queries: &[Query]) -> Self {
        let detections = gallery
            .iter()
            .zip(dets)
            .map(|(s, d)| DetectionRecord {
                image_id: s.image_id.clone(),
                detections: d.clone(),
            })
            .collect();
        let embeddings = entries
            .iter()
            .map(|e| EmbeddingRecord {
                image_id: e.image_id.clone(),
                kind: EmbeddingKind::Gallery,
                bbox: e.detection.bbox,
                score: Some(e.detection.score),
                identity: None,
                query_id: None,
                embedding: e.embedding.clone(),
            })
            .chain(queries.iter().map(|q| EmbeddingRecord {
                image_id: q.image_id.clone(),
                kind: EmbeddingKind::Query,
                bbox: q.bbox,
                score: None,
                identity: Some(q.identity),
                query_id: Some(q.query_id.clone()),
                embedding: q.embedding.clone(),
            }))
            .collect();
        Dumps { detections, embeddings }
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_jsonl(&dir.join("detections.jsonl"), &self.detections)?;
        write_jsonl(&dir.join("embeddings.jsonl"), &self.embeddings)
    }

    pub fn read(dir: &Path) -> Result<Self> {
        Ok(Dumps {
            detections: read_jsonl(&dir.join("detections.jsonl"))?,
            embeddings: read_jsonl(&dir.join("embeddings.jsonl"))?,
        })
    }

    pub fn gallery_entries(&self) -> Vec<GalleryEntry> {
        self.embeddings
            .iter()
            .filter(|r| r.kind == EmbeddingKind::Gallery)
            .map(|r| GalleryEntry {
                image_id: r.image_id.clone(),
                detection: Detection {
                    bbox: r.bbox,
                    score: r.score.unwrap_or(1.0),
                },
                embedding: r.embedding.clone(),
            })
            .collect()
    }

    pub fn queries(&self) -> Result<Vec<Query>> {
        self.embeddings
            .iter()
            .filter(|r| r.kind == EmbeddingKind::Query)
            .map(|r| {
                Ok(Query {
                    query_id: r.query_id.clone().unwrap_or_else(|| r.image_id.clone()),
                    image_id: r.image_id.clone(),
                    bbox: r.bbox,
                    identity: r
                        .identity
                        .ok_or_else(|| Error::input(format!("query record in {} lacks an identity", r.image_id)))?,
                    embedding: r.embedding.clone(),
                })
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    #[serde(rename = "AP")]
    pub ap: f64,
    #[serde(rename = "Recall")]
    pub recall: f64,
    #[serde(rename = "mAP")]
    pub map: f64,
    pub top1: f64,
    pub cws: bool,
    pub per_query: Vec<QueryResult>,
}

impl Metrics {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("query_id,identity,ap,top1,num_gt\n");
        for q in &self.per_query {
            s.push_str(&format!("{},{},{},{},{}\n", q.query_id, q.identity, q.ap, q.top1 as u8, q.num_gt));
        }
        s
    }
}

/// Metrics from dumps: detection AP/Recall on the gallery and search over the
/// dynamic gallery.
pub fn metrics_from_dumps(dumps: &Dumps, gallery: &[Scene], cfg: &SearchConfig) -> Result<Metrics> {
    let by_id: HashMap<&str, &DetectionRecord> = dumps.detections.iter().map(|r| (r.image_id.as_str(), r)).collect();
    let dets: Vec<Vec<Detection>> = gallery
        .iter()
        .map(|s| by_id.get(s.image_id.as_str()).map(|r| r.detections.clone()).unwrap_or_default())
        .collect();
    let gt: Vec<Vec<BBox>> = gallery.iter().map(|s| s.boxes.clone()).collect();
    let pr = detection_pr(&dets, &gt, 0.5)?;
    let images: Vec<GalleryImage> = gallery.iter().map(GalleryImage::from_scene).collect();
    let search = search_eval(&dumps.queries()?, &images, &dumps.gallery_entries(), cfg)?;
    Ok(Metrics {
        ap: pr.ap,
        recall: pr.recall,
        map: search.map,
        top1: search.top1,
        cws: cfg.use_cws,
        per_query: search.per_query,
    })
}

/// Full evaluation of a model. When `dump_dir` is given the dumps are written
/// there and the metrics are computed from the files read back.
pub fn evaluate(
    model: &PersonSearchModel,
    gallery: &[Scene],
    query: &[Scene],
    cfg: &SearchConfig,
    dump_dir: Option<&Path>,
) -> Result<Metrics> {
    let (dets, entries) = build_gallery(model, gallery)?;
    let queries = embed_queries(model, query)?;
    let dumps = Dumps::new(gallery, &dets, &entries, &queries);
    match dump_dir {
        Some(dir) => {
            dumps.write(dir)?;
            metrics_from_dumps(&Dumps::read(dir)?, gallery, cfg)
        }
        None => metrics_from_dumps(&dumps, gallery, cfg),
    }
}

/// Detection-only metrics on a split.
pub fn evaluate_detection(model: &PersonSearchModel, scenes: &[Scene]) -> Result<PrResult> {
    let dets = scenes.iter().map(|s| model.detect(&s.image())).collect::<Result<Vec<_>>>()?;
    let gt: Vec<Vec<BBox>> = scenes.iter().map(|s| s.boxes.clone()).collect();
    detection_pr(&dets, &gt, 0.5)
}
