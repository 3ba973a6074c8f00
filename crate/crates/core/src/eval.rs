//! Detection post-processing and VOC-style average precision.

use std::cmp::Ordering;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::annotation::Annotation;
use crate::detector::{decode_predictions, ConvDetector, DefaultBoxSet, DetectorModel, PredictionGrid};
use crate::error::{Error, Result};
use crate::geometry::Detection;
use crate::tensor::Image;

pub use crate::geometry::iou;

pub const DEFAULT_NMS_IOU: f64 = 0.45;
pub const DEFAULT_MATCH_IOU: f64 = 0.5;

/// Score-descending order; equal scores keep their original index order.
fn score_order(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    order
}

/// Greedy per-class suppression. Returns indices of the kept detections in
/// the order they were accepted (score descending, ties by lower index).
pub fn nms_indices(detections: &[Detection], iou_threshold: f64) -> Vec<usize> {
    let scores: Vec<f64> = detections.iter().map(|d| d.score).collect();
    let mut kept: Vec<usize> = Vec::new();
    for i in score_order(&scores) {
        let d = &detections[i];
        let suppressed = kept.iter().any(|&j| {
            let k = &detections[j];
            k.class_id == d.class_id && iou(&k.bbox, &d.bbox) > iou_threshold
        });
        if !suppressed {
            kept.push(i);
        }
    }
    kept
}

pub fn nms(detections: &[Detection], iou_threshold: f64) -> Vec<Detection> {
    nms_indices(detections, iou_threshold)
        .into_iter()
        .map(|i| detections[i])
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PostProcess {
    pub score_threshold: f64,
    pub nms_iou: f64,
    pub top_k: usize,
}

impl Default for PostProcess {
    fn default() -> Self {
        Self {
            score_threshold: 0.01,
            nms_iou: DEFAULT_NMS_IOU,
            top_k: 200,
        }
    }
}

/// Decode, threshold, suppress and cap one image's predictions.
pub fn postprocess(grid: &PredictionGrid, boxes: &DefaultBoxSet, cfg: &PostProcess) -> Vec<Detection> {
    let candidates: Vec<Detection> = decode_predictions(grid, boxes)
        .into_iter()
        .filter(|d| d.score >= cfg.score_threshold && d.bbox.is_valid())
        .collect();
    let mut kept = nms(&candidates, cfg.nms_iou);
    kept.truncate(cfg.top_k);
    kept
}

const DETECT_CHUNK: usize = 32;

/// Runs the model over `images` in fixed-size chunks and post-processes each grid.
pub fn detect(model: &ConvDetector, images: &[Image], cfg: &PostProcess) -> Result<Vec<Vec<Detection>>> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(DETECT_CHUNK) {
        for grid in model.forward(chunk)? {
            out.push(postprocess(&grid, model.default_boxes(), cfg));
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Interpolation {
    #[default]
    AllPoint,
    ElevenPoint,
}

/// Ranked detections of one class after matching: `true` for a true positive.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RankedMatches {
    pub hits: Vec<bool>,
    pub num_gt: usize,
}

/// Greedy VOC matching of one class across images. Detections are visited in
/// global score order; each claims the unclaimed GT of highest IoU. GT flagged
/// `difficult` neither count towards recall nor penalize detections that hit them.
pub fn match_class(
    detections: &[Vec<Detection>],
    ground_truth: &[Annotation],
    class_id: usize,
    iou_threshold: f64,
) -> Result<RankedMatches> {
    if detections.len() != ground_truth.len() {
        return Err(Error::shape(format!(
            "{} detection lists for {} annotations",
            detections.len(),
            ground_truth.len()
        )));
    }
    let mut flat: Vec<(usize, &Detection)> = Vec::new();
    for (img, dets) in detections.iter().enumerate() {
        flat.extend(dets.iter().filter(|d| d.class_id == class_id).map(|d| (img, d)));
    }
    let gts: Vec<Vec<(usize, bool)>> = ground_truth
        .iter()
        .map(|a| {
            a.objects
                .iter()
                .enumerate()
                .filter(|(_, o)| o.class_id == class_id)
                .map(|(i, o)| (i, o.difficult))
                .collect()
        })
        .collect();
    let num_gt = gts.iter().flatten().filter(|(_, difficult)| !difficult).count();
    let mut claimed: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();

    let scores: Vec<f64> = flat.iter().map(|(_, d)| d.score).collect();
    let mut hits = Vec::with_capacity(flat.len());
    for i in score_order(&scores) {
        let (img, det) = flat[i];
        let mut best: Option<(usize, f64)> = None;
        for (slot, &(obj, _)) in gts[img].iter().enumerate() {
            let overlap = iou(&det.bbox, &ground_truth[img].objects[obj].bbox);
            if best.is_none_or(|(_, b)| overlap > b) {
                best = Some((slot, overlap));
            }
        }
        match best {
            Some((slot, overlap)) if overlap >= iou_threshold => {
                if gts[img][slot].1 {
                    continue;
                }
                if claimed[img][slot] {
                    hits.push(false);
                } else {
                    claimed[img][slot] = true;
                    hits.push(true);
                }
            }
            _ => hits.push(false),
        }
    }
    Ok(RankedMatches { hits, num_gt })
}

/// Precision at every rank of a ranked hit list.
fn precisions(hits: &[bool]) -> Vec<f64> {
    let mut tp = 0usize;
    hits.iter()
        .enumerate()
        .map(|(i, &h)| {
            tp += h as usize;
            tp as f64 / (i + 1) as f64
        })
        .collect()
}

/// Average precision of a ranked hit list. All-point interpolation sums the
/// precision envelope at each true positive; each contributes `1 / num_gt` recall.
pub fn average_precision(m: &RankedMatches, interpolation: Interpolation) -> f64 {
    if m.num_gt == 0 {
        return 0.0;
    }
    let prec = precisions(&m.hits);
    let mut envelope = prec.clone();
    for i in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[i] = envelope[i].max(envelope[i + 1]);
    }
    match interpolation {
        Interpolation::AllPoint => {
            let sum: f64 = m.hits.iter().zip(&envelope).filter(|(&h, _)| h).map(|(_, &p)| p).sum();
            sum / m.num_gt as f64
        }
        Interpolation::ElevenPoint => {
            let mut tp = 0usize;
            let recalls: Vec<f64> = m
                .hits
                .iter()
                .map(|&h| {
                    tp += h as usize;
                    tp as f64 / m.num_gt as f64
                })
                .collect();
            let total: f64 = (0..=10)
                .map(|t| {
                    let r = t as f64 / 10.0;
                    recalls
                        .iter()
                        .zip(&envelope)
                        .find(|(&rc, _)| rc >= r)
                        .map_or(0.0, |(_, &p)| p)
                })
                .sum();
            total / 11.0
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub iou_threshold: f64,
    pub interpolation: Interpolation,
    /// AP per foreground class (index 0 is class 1); `None` when the class has no GT.
    pub per_class_ap: Vec<Option<f64>>,
    /// Mean over classes with GT, in `[0, 1]`.
    pub map: f64,
}

/// Per-class AP and mAP over a dataset. Classes absent from the ground truth
/// are excluded from the mean.
pub fn evaluate(
    detections: &[Vec<Detection>],
    ground_truth: &[Annotation],
    num_classes: usize,
    iou_threshold: f64,
    interpolation: Interpolation,
) -> Result<EvalReport> {
    let mut per_class_ap = Vec::with_capacity(num_classes);
    for class_id in 1..=num_classes {
        let m = match_class(detections, ground_truth, class_id, iou_threshold)?;
        per_class_ap.push((m.num_gt > 0).then(|| average_precision(&m, interpolation)));
    }
    let present: Vec<f64> = per_class_ap.iter().flatten().copied().collect();
    let map = if present.is_empty() {
        0.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    };
    Ok(EvalReport {
        iou_threshold,
        interpolation,
        per_class_ap,
        map,
    })
}

/// mAP averaged over IoU thresholds 0.50, 0.55, …, 0.95.
pub fn coco_style_map(detections: &[Vec<Detection>], ground_truth: &[Annotation], num_classes: usize) -> Result<f64> {
    let mut total = 0.0;
    for i in 0..10 {
        let thr = 0.5 + 0.05 * i as f64;
        total += evaluate(detections, ground_truth, num_classes, thr, Interpolation::AllPoint)?.map;
    }
    Ok(total / 10.0)
}

#[derive(Serialize)]
struct DumpRow<'a> {
    image_id: &'a str,
    class: usize,
    score: f64,
    #[serde(rename = "box")]
    bbox: [f64; 4],
}

/// One JSON object per detection: image id, class, score, box.
pub fn write_detections_jsonl(path: &Path, images: &[(String, Vec<Detection>)]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for (id, dets) in images {
        for d in dets {
            let row = DumpRow {
                image_id: id,
                class: d.class_id,
                score: d.score,
                bbox: [d.bbox.xmin, d.bbox.ymin, d.bbox.xmax, d.bbox.ymax],
            };
            serde_json::to_writer(&mut out, &row)?;
            out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
        }
    }
    out.flush().map_err(|e| Error::io(path, e))
}
