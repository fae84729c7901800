//! Grounding evaluation: region ranking, IoU, Recall@k stratified over
//! implicit/explicit annotations and per relation type, plus prediction
//! dumps for inspection.

use std::collections::{BTreeMap, HashMap};

use serde::Serialize;
use thiserror::Error;

use crate::corpus::{BoundingBox, GoldAnnotation, PairedSample, Phrase, Region};
use crate::model::{Ablation, Model};
use crate::tensor::TensorError;
use crate::training::score_pair;

pub const DEFAULT_IOU_THRESHOLD: f64 = 0.5;
pub const DEFAULT_KS: [usize; 2] = [1, 5];

/// Env var that caps the evaluation worker count.
pub const THREADS_ENV: &str = "IECI_THREADS";

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("degenerate bounding box ({x1}, {y1}, {x2}, {y2})")]
    DegenerateBox { x1: f64, y1: f64, x2: f64, y2: f64 },
    #[error("pair {pair_id}: {scores} scores for {regions} regions")]
    LengthMismatch {
        pair_id: u64,
        scores: usize,
        regions: usize,
    },
    #[error("pair {pair_id}: non-finite score for phrase {phrase_id}")]
    NonFiniteScores { pair_id: u64, phrase_id: u32 },
    #[error("pair {pair_id}, phrase {phrase_id}: gold region {region_id} not among ranked regions")]
    UnknownGoldRegion {
        pair_id: u64,
        phrase_id: u32,
        region_id: u32,
    },
    #[error("recall needs at least one annotation")]
    NoAnnotations,
    #[error("k must be >= 1")]
    ZeroK,
    #[error("iou threshold must be in (0, 1], got {0}")]
    BadThreshold(f64),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, EvalError>;

/// Intersection-over-union of two axis-aligned boxes.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> Result<f64> {
    for bx in [a, b] {
        if !bx.is_valid() {
            return Err(EvalError::DegenerateBox {
                x1: bx.x1,
                y1: bx.y1,
                x2: bx.x2,
                y2: bx.y2,
            });
        }
    }
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    Ok(inter / union)
}

/// One region in a ranking, with its box resolved for IoU checks.
#[derive(Debug, Clone, Serialize)]
pub struct RankedRegion {
    pub region_id: u32,
    pub bbox: BoundingBox,
    pub score: f64,
}

/// Full descending ranking of one phrase over its pair's regions.
#[derive(Debug, Clone, Serialize)]
pub struct PhrasePrediction {
    pub pair_id: u64,
    pub phrase_id: u32,
    pub phrase_text: Option<String>,
    pub ranked: Vec<RankedRegion>,
}

/// Sort one phrase's region scores descending; ties break toward the
/// lower region id.
pub fn rank_regions(
    pair_id: u64,
    phrase: &Phrase,
    scores: &[f64],
    regions: &[Region],
) -> Result<PhrasePrediction> {
    if scores.len() != regions.len() {
        return Err(EvalError::LengthMismatch {
            pair_id,
            scores: scores.len(),
            regions: regions.len(),
        });
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(EvalError::NonFiniteScores {
            pair_id,
            phrase_id: phrase.phrase_id,
        });
    }
    let mut ranked: Vec<RankedRegion> = regions
        .iter()
        .zip(scores)
        .map(|(region, &score)| RankedRegion {
            region_id: region.region_id,
            bbox: region.bbox,
            score,
        })
        .collect();
    ranked.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .expect("scores are finite")
            .then(a.region_id.cmp(&b.region_id))
    });
    Ok(PhrasePrediction {
        pair_id,
        phrase_id: phrase.phrase_id,
        phrase_text: phrase.text.clone(),
        ranked,
    })
}

/// Score every phrase of one pair with the model and rank its regions.
pub fn predict_pair(
    model: &Model,
    ablation: Ablation,
    sample: &PairedSample,
) -> Result<Vec<PhrasePrediction>> {
    let scores = score_pair(model, ablation, sample)?;
    sample
        .sentence
        .iter()
        .enumerate()
        .map(|(i, phrase)| rank_regions(sample.pair_id, phrase, scores.row(i), &sample.image))
        .collect()
}

fn worker_count(pairs: usize) -> usize {
    let available = std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1);
    let cap = std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n >= 1)
        .unwrap_or(available);
    available.min(cap).min(pairs).max(1)
}

/// Rank every phrase of every pair. Pairs are scored in parallel (worker
/// count capped by the `IECI_THREADS` env var) and aggregated by index,
/// so the output order and content never depend on scheduling.
pub fn predict_pairs(
    model: &Model,
    ablation: Ablation,
    pairs: &[PairedSample],
) -> Result<Vec<PhrasePrediction>> {
    if pairs.is_empty() {
        return Ok(Vec::new());
    }
    let workers = worker_count(pairs.len());
    let mut slots: Vec<Option<Result<Vec<PhrasePrediction>>>> = Vec::new();
    slots.resize_with(pairs.len(), || None);
    let chunk_len = pairs.len().div_ceil(workers);

    std::thread::scope(|scope| {
        for (pair_chunk, slot_chunk) in pairs.chunks(chunk_len).zip(slots.chunks_mut(chunk_len)) {
            scope.spawn(move || {
                for (sample, slot) in pair_chunk.iter().zip(slot_chunk) {
                    *slot = Some(predict_pair(model, ablation, sample));
                }
            });
        }
    });

    let mut out = Vec::new();
    for slot in slots {
        out.extend(slot.expect("every slot filled")?);
    }
    Ok(out)
}

fn hit(
    prediction: &PhrasePrediction,
    gold_region_ids: &[u32],
    k: usize,
    iou_threshold: f64,
) -> Result<bool> {
    let gold_boxes: Vec<BoundingBox> = gold_region_ids
        .iter()
        .map(|&gid| {
            prediction
                .ranked
                .iter()
                .find(|r| r.region_id == gid)
                .map(|r| r.bbox)
                .ok_or(EvalError::UnknownGoldRegion {
                    pair_id: prediction.pair_id,
                    phrase_id: prediction.phrase_id,
                    region_id: gid,
                })
        })
        .collect::<Result<_>>()?;
    for top in prediction.ranked.iter().take(k) {
        for gold in &gold_boxes {
            if iou(&top.bbox, gold)? >= iou_threshold {
                return Ok(true);
            }
        }
    }
    Ok(false)
}

/// Fraction of annotated phrases whose gold region (any of them) overlaps
/// any top-`k` predicted box at IoU ≥ `iou_threshold`. Phrases with no
/// prediction count as misses and emit a warning on stderr.
pub fn recall_at_k(
    predictions: &[PhrasePrediction],
    annotations: &[GoldAnnotation],
    k: usize,
    iou_threshold: f64,
) -> Result<f64> {
    if annotations.is_empty() {
        return Err(EvalError::NoAnnotations);
    }
    if k == 0 {
        return Err(EvalError::ZeroK);
    }
    if !(iou_threshold > 0.0 && iou_threshold <= 1.0) {
        return Err(EvalError::BadThreshold(iou_threshold));
    }
    let by_key: HashMap<(u64, u32), &PhrasePrediction> = predictions
        .iter()
        .map(|p| ((p.pair_id, p.phrase_id), p))
        .collect();
    let mut hits = 0usize;
    for annotation in annotations {
        match by_key.get(&(annotation.pair_id, annotation.phrase_id)) {
            Some(prediction) => {
                if hit(prediction, &annotation.gold_region_ids, k, iou_threshold)? {
                    hits += 1;
                }
            }
            None => {
                eprintln!(
                    "warning: no prediction for pair {} phrase {}; counting as miss",
                    annotation.pair_id, annotation.phrase_id
                );
            }
        }
    }
    Ok(hits as f64 / annotations.len() as f64)
}

/// Recall numbers for one stratum, keyed by k.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SplitMetrics {
    pub count: usize,
    pub recall: BTreeMap<usize, f64>,
}

impl SplitMetrics {
    pub fn recall_at(&self, k: usize) -> Option<f64> {
        self.recall.get(&k).copied()
    }
}

/// Recall@k per stratum (implicit / explicit / full) and per relation
/// tag. Strata with no annotations are absent, not zero.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub iou_threshold: f64,
    pub ks: Vec<usize>,
    pub splits: BTreeMap<String, SplitMetrics>,
    pub per_relation: BTreeMap<String, SplitMetrics>,
}

fn metrics(
    predictions: &[PhrasePrediction],
    annotations: &[GoldAnnotation],
    ks: &[usize],
    iou_threshold: f64,
) -> Result<SplitMetrics> {
    let mut recall = BTreeMap::new();
    for &k in ks {
        recall.insert(k, recall_at_k(predictions, annotations, k, iou_threshold)?);
    }
    Ok(SplitMetrics {
        count: annotations.len(),
        recall,
    })
}

/// Build the stratified report: implicit/explicit/full rows plus one row
/// per relation tag present in the annotations.
pub fn stratified_report(
    predictions: &[PhrasePrediction],
    annotations: &[GoldAnnotation],
    ks: &[usize],
    iou_threshold: f64,
) -> Result<EvalReport> {
    if annotations.is_empty() {
        return Err(EvalError::NoAnnotations);
    }
    if ks.is_empty() || ks.contains(&0) {
        return Err(EvalError::ZeroK);
    }
    let mut ks: Vec<usize> = ks.to_vec();
    ks.sort_unstable();
    ks.dedup();

    let strata = crate::corpus::stratify(annotations);
    let mut splits = BTreeMap::new();
    if !strata.implicit.is_empty() {
        splits.insert(
            "implicit".to_string(),
            metrics(predictions, &strata.implicit, &ks, iou_threshold)?,
        );
    }
    if !strata.explicit.is_empty() {
        splits.insert(
            "explicit".to_string(),
            metrics(predictions, &strata.explicit, &ks, iou_threshold)?,
        );
    }
    splits.insert(
        "full".to_string(),
        metrics(predictions, annotations, &ks, iou_threshold)?,
    );

    let mut per_relation = BTreeMap::new();
    let mut by_tag: BTreeMap<String, Vec<GoldAnnotation>> = BTreeMap::new();
    for annotation in annotations {
        by_tag
            .entry(annotation.relation_tag.as_str().to_string())
            .or_default()
            .push(annotation.clone());
    }
    for (tag, tagged) in by_tag {
        per_relation.insert(tag, metrics(predictions, &tagged, &ks, iou_threshold)?);
    }
    Ok(EvalReport {
        iou_threshold,
        ks,
        splits,
        per_relation,
    })
}

impl EvalReport {
    /// A report over zero annotations: every cell absent.
    pub fn empty(ks: &[usize], iou_threshold: f64) -> EvalReport {
        EvalReport {
            iou_threshold,
            ks: ks.to_vec(),
            splits: BTreeMap::new(),
            per_relation: BTreeMap::new(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// CSV with one row per stratum, relation rows prefixed `relation:`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("stratum,count");
        for k in &self.ks {
            out.push_str(&format!(",recall_at_{k}"));
        }
        out.push('\n');
        let mut push_row = |name: &str, m: &SplitMetrics| {
            out.push_str(&format!("{name},{}", m.count));
            for k in &self.ks {
                match m.recall.get(k) {
                    Some(v) => out.push_str(&format!(",{v}")),
                    None => out.push(','),
                }
            }
            out.push('\n');
        };
        for (name, m) in &self.splits {
            push_row(name, m);
        }
        for (tag, m) in &self.per_relation {
            push_row(&format!("relation:{tag}"), m);
        }
        out
    }
}

/// JSON-lines dump of the top-5 ranking per phrase, for inspection.
pub fn prediction_dump(predictions: &[PhrasePrediction]) -> String {
    let mut out = String::new();
    for p in predictions {
        let top5: Vec<serde_json::Value> = p
            .ranked
            .iter()
            .take(5)
            .map(|r| {
                serde_json::json!({
                    "region_id": r.region_id,
                    "box": [r.bbox.x1, r.bbox.y1, r.bbox.x2, r.bbox.y2],
                    "score": r.score,
                })
            })
            .collect();
        let line = serde_json::json!({
            "pair_id": p.pair_id,
            "phrase_id": p.phrase_id,
            "phrase_text": p.phrase_text,
            "top5": top5,
        });
        out.push_str(&line.to_string());
        out.push('\n');
    }
    out
}
