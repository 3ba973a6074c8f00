//! Default-box geometry and the offset encoding between ground truth and anchors.

use serde::{Deserialize, Serialize};

use crate::annotation::Annotation;
use crate::error::{Error, Result};
use crate::geometry::{iou, BBox, CenterBox, Detection};

use super::grid::PredictionGrid;

/// Anchor layout for one pyramid level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorLevel {
    pub grid_height: usize,
    pub grid_width: usize,
    /// Box side length relative to the image, for aspect ratio 1.
    pub scale: f64,
    /// Width / height ratios; one default box per entry at every cell.
    pub aspect_ratios: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LevelShape {
    pub grid_height: usize,
    pub grid_width: usize,
    pub boxes_per_cell: usize,
}

impl LevelShape {
    pub fn len(&self) -> usize {
        self.grid_height * self.grid_width * self.boxes_per_cell
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A pyramid location `(level, row, col, box)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Location {
    pub level: usize,
    pub row: usize,
    pub col: usize,
    pub slot: usize,
}

/// Fixed anchor geometry. Flat index `k` enumerates `(level, row, col, slot)` in
/// row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct DefaultBoxSet {
    levels: Vec<LevelShape>,
    offsets: Vec<usize>,
    boxes: Vec<CenterBox>,
}

impl DefaultBoxSet {
    /// Builds a set from explicit per-location boxes.
    pub fn from_parts(levels: Vec<LevelShape>, boxes: Vec<CenterBox>) -> Result<Self> {
        if levels.is_empty() {
            return Err(Error::config("default box set needs at least one level"));
        }
        let mut offsets = Vec::with_capacity(levels.len());
        let mut total = 0;
        for lvl in &levels {
            if lvl.is_empty() {
                return Err(Error::config("pyramid level with zero locations"));
            }
            offsets.push(total);
            total += lvl.len();
        }
        if boxes.len() != total {
            return Err(Error::config(format!(
                "{} boxes supplied for {} locations",
                boxes.len(),
                total
            )));
        }
        for (k, b) in boxes.iter().enumerate() {
            if !(b.w > 0.0 && b.h > 0.0) {
                return Err(Error::config(format!("default box {k} has non-positive size")));
            }
            if !(0.0..=1.0).contains(&b.cx) || !(0.0..=1.0).contains(&b.cy) {
                return Err(Error::config(format!("default box {k} center outside the image")));
            }
        }
        Ok(Self { levels, offsets, boxes })
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    pub fn levels(&self) -> &[LevelShape] {
        &self.levels
    }

    pub fn boxes(&self) -> &[CenterBox] {
        &self.boxes
    }

    pub fn get(&self, k: usize) -> &CenterBox {
        &self.boxes[k]
    }

    pub fn level_offset(&self, level: usize) -> usize {
        self.offsets[level]
    }

    pub fn flat_index(&self, loc: Location) -> usize {
        let lvl = &self.levels[loc.level];
        debug_assert!(loc.row < lvl.grid_height && loc.col < lvl.grid_width);
        debug_assert!(loc.slot < lvl.boxes_per_cell);
        self.offsets[loc.level] + (loc.row * lvl.grid_width + loc.col) * lvl.boxes_per_cell + loc.slot
    }

    pub fn location(&self, k: usize) -> Location {
        assert!(k < self.len(), "flat index {k} out of range");
        let level = match self.offsets.binary_search(&k) {
            Ok(p) => p,
            Err(p) => p - 1,
        };
        let lvl = &self.levels[level];
        let local = k - self.offsets[level];
        let slot = local % lvl.boxes_per_cell;
        let cell = local / lvl.boxes_per_cell;
        Location {
            level,
            row: cell / lvl.grid_width,
            col: cell % lvl.grid_width,
            slot,
        }
    }
}

/// SSD-style default boxes: centers at `((c + 0.5) / W, (r + 0.5) / H)` and sizes
/// `(s·√a, s/√a)` for every aspect ratio `a` of the level.
pub fn build_default_boxes(config: &[AnchorLevel]) -> Result<DefaultBoxSet> {
    if config.is_empty() {
        return Err(Error::config("anchor configuration has no levels"));
    }
    let mut levels = Vec::with_capacity(config.len());
    let mut boxes = Vec::new();
    for (p, lvl) in config.iter().enumerate() {
        if !(lvl.scale > 0.0 && lvl.scale <= 1.0) {
            return Err(Error::config(format!("level {p}: scale {} outside (0, 1]", lvl.scale)));
        }
        if lvl.aspect_ratios.is_empty() || lvl.aspect_ratios.iter().any(|&a| a.is_nan() || a <= 0.0) {
            return Err(Error::config(format!(
                "level {p}: aspect ratios must be non-empty and positive"
            )));
        }
        if lvl.grid_height == 0 || lvl.grid_width == 0 {
            return Err(Error::config(format!("level {p}: empty grid")));
        }
        levels.push(LevelShape {
            grid_height: lvl.grid_height,
            grid_width: lvl.grid_width,
            boxes_per_cell: lvl.aspect_ratios.len(),
        });
        for r in 0..lvl.grid_height {
            for c in 0..lvl.grid_width {
                let cx = (c as f64 + 0.5) / lvl.grid_width as f64;
                let cy = (r as f64 + 0.5) / lvl.grid_height as f64;
                for &a in &lvl.aspect_ratios {
                    let sq = a.sqrt();
                    boxes.push(CenterBox::new(cx, cy, lvl.scale * sq, lvl.scale / sq));
                }
            }
        }
    }
    DefaultBoxSet::from_parts(levels, boxes)
}

/// Offsets `[Δcx, Δcy, Δw, Δh]` of `gt` relative to `anchor`.
pub fn encode_offsets(gt: &CenterBox, anchor: &CenterBox) -> [f64; 4] {
    [
        (gt.cx - anchor.cx) / anchor.w,
        (gt.cy - anchor.cy) / anchor.h,
        (gt.w / anchor.w).ln(),
        (gt.h / anchor.h).ln(),
    ]
}

// Keeps exp() finite for wild untrained offsets.
const MAX_LOG_SCALE: f64 = 10.0;

/// Inverse of [`encode_offsets`], without clipping.
pub fn decode_offsets(offsets: &[f64; 4], anchor: &CenterBox) -> CenterBox {
    CenterBox {
        cx: anchor.cx + offsets[0] * anchor.w,
        cy: anchor.cy + offsets[1] * anchor.h,
        w: anchor.w * offsets[2].min(MAX_LOG_SCALE).exp(),
        h: anchor.h * offsets[3].min(MAX_LOG_SCALE).exp(),
    }
}

/// Per-location training targets produced by [`encode_gt`].
#[derive(Debug, Clone, PartialEq)]
pub struct MatchTargets {
    /// Class per location, 0 for background.
    pub cls: Vec<usize>,
    /// Encoded offsets; zero where unmatched.
    pub loc: Vec<[f64; 4]>,
    pub positive: Vec<bool>,
}

impl MatchTargets {
    pub fn num_positive(&self) -> usize {
        self.positive.iter().filter(|&&p| p).count()
    }
}

/// Matches ground truth to default boxes.
///
/// A default box is positive when its best IoU against any object reaches
/// `iou_threshold`; every object additionally claims its own best-IoU box.
pub fn encode_gt(annotation: &Annotation, boxes: &DefaultBoxSet, iou_threshold: f64) -> Result<MatchTargets> {
    if !(iou_threshold > 0.0 && iou_threshold < 1.0) {
        return Err(Error::config(format!(
            "matching threshold {iou_threshold} outside (0, 1)"
        )));
    }
    let k_total = boxes.len();
    let mut targets = MatchTargets {
        cls: vec![0; k_total],
        loc: vec![[0.0; 4]; k_total],
        positive: vec![false; k_total],
    };
    if annotation.objects.is_empty() {
        return Ok(targets);
    }
    let anchors: Vec<BBox> = boxes.boxes().iter().map(|b| b.to_corners()).collect();

    let mut best_gt = vec![usize::MAX; k_total];
    let mut best_gt_iou = vec![-1.0f64; k_total];
    let mut forced = Vec::with_capacity(annotation.objects.len());
    for (g, obj) in annotation.objects.iter().enumerate() {
        let mut best_k = 0;
        let mut best = -1.0;
        for (k, a) in anchors.iter().enumerate() {
            let v = iou(&obj.bbox, a);
            if v > best {
                best = v;
                best_k = k;
            }
            if v > best_gt_iou[k] {
                best_gt_iou[k] = v;
                best_gt[k] = g;
            }
        }
        forced.push(best_k);
    }
    for (g, &k) in forced.iter().enumerate() {
        best_gt[k] = g;
        best_gt_iou[k] = f64::INFINITY;
    }
    for k in 0..k_total {
        if best_gt_iou[k] >= iou_threshold {
            let obj = &annotation.objects[best_gt[k]];
            targets.positive[k] = true;
            targets.cls[k] = obj.class_id;
            targets.loc[k] = encode_offsets(&obj.bbox.to_center(), boxes.get(k));
        }
    }
    Ok(targets)
}

/// Decodes every foreground class score at every location into a detection.
/// Boxes are clipped to the image.
pub fn decode_predictions(grid: &PredictionGrid, boxes: &DefaultBoxSet) -> Vec<Detection> {
    let n_cls = grid.cls_width();
    let mut out = Vec::with_capacity(grid.len() * n_cls);
    for k in 0..grid.len() {
        let bbox = decode_offsets(grid.loc(k), boxes.get(k)).to_corners().clipped();
        let probs = grid.cls_row(k);
        for (class_id, &score) in probs.iter().enumerate().skip(1) {
            out.push(Detection { class_id, score, bbox });
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::annotation::AnnotatedObject;

    fn single_level(h: usize, w: usize, scale: f64, ars: &[f64]) -> Vec<AnchorLevel> {
        vec![AnchorLevel {
            grid_height: h,
            grid_width: w,
            scale,
            aspect_ratios: ars.to_vec(),
        }]
    }

    #[test]
    fn degenerate_single_box() {
        let set = build_default_boxes(&single_level(1, 1, 1.0, &[1.0])).unwrap();
        assert_eq!(set.len(), 1);
        assert_eq!(*set.get(0), CenterBox::new(0.5, 0.5, 1.0, 1.0));
    }

    #[test]
    fn two_by_two_centers() {
        let set = build_default_boxes(&single_level(2, 2, 0.5, &[1.0])).unwrap();
        let centers: Vec<(f64, f64)> = set.boxes().iter().map(|b| (b.cx, b.cy)).collect();
        assert_eq!(centers, vec![(0.25, 0.25), (0.75, 0.25), (0.25, 0.75), (0.75, 0.75)]);
        assert!(set.boxes().iter().all(|b| b.w == 0.5 && b.h == 0.5));
    }

    #[test]
    fn deterministic_geometry() {
        let cfg = vec![
            AnchorLevel {
                grid_height: 8,
                grid_width: 8,
                scale: 0.2,
                aspect_ratios: vec![1.0, 2.0, 0.5],
            },
            AnchorLevel {
                grid_height: 4,
                grid_width: 4,
                scale: 0.45,
                aspect_ratios: vec![1.0, 2.0, 0.5],
            },
        ];
        let a = build_default_boxes(&cfg).unwrap();
        let b = build_default_boxes(&cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 8 * 8 * 3 + 4 * 4 * 3);
    }

    #[test]
    fn rejects_bad_config() {
        assert!(build_default_boxes(&[]).is_err());
        assert!(build_default_boxes(&single_level(2, 2, 0.0, &[1.0])).is_err());
        assert!(build_default_boxes(&single_level(2, 2, -0.3, &[1.0])).is_err());
        assert!(build_default_boxes(&single_level(2, 2, 1.5, &[1.0])).is_err());
    }

    #[test]
    fn flat_index_bijection() {
        let cfg = vec![
            AnchorLevel {
                grid_height: 3,
                grid_width: 5,
                scale: 0.2,
                aspect_ratios: vec![1.0, 2.0],
            },
            AnchorLevel {
                grid_height: 2,
                grid_width: 2,
                scale: 0.5,
                aspect_ratios: vec![1.0, 2.0, 0.5],
            },
        ];
        let set = build_default_boxes(&cfg).unwrap();
        let mut k = 0;
        for (p, lvl) in set.levels().to_vec().iter().enumerate() {
            for row in 0..lvl.grid_height {
                for col in 0..lvl.grid_width {
                    for slot in 0..lvl.boxes_per_cell {
                        let loc = Location {
                            level: p,
                            row,
                            col,
                            slot,
                        };
                        assert_eq!(set.flat_index(loc), k);
                        assert_eq!(set.location(k), loc);
                        k += 1;
                    }
                }
            }
        }
        assert_eq!(k, set.len());
    }

    fn one_object(b: BBox) -> Annotation {
        Annotation::new(vec![AnnotatedObject {
            class_id: 2,
            bbox: b,
            difficult: false,
        }])
    }

    #[test]
    fn identical_gt_encodes_to_zero() {
        let set = build_default_boxes(&single_level(2, 2, 0.5, &[1.0])).unwrap();
        let ann = one_object(set.get(3).to_corners());
        let t = encode_gt(&ann, &set, 0.5).unwrap();
        assert!(t.positive[3]);
        assert_eq!(t.cls[3], 2);
        for v in t.loc[3] {
            assert!(v.abs() < 1e-12);
        }
        assert_eq!(t.num_positive(), 1);
    }

    #[test]
    fn empty_annotation_is_all_background() {
        let set = build_default_boxes(&single_level(2, 2, 0.5, &[1.0])).unwrap();
        let t = encode_gt(&Annotation::default(), &set, 0.5).unwrap();
        assert!(t.positive.iter().all(|p| !p));
        assert!(t.cls.iter().all(|&c| c == 0));
    }

    #[test]
    fn size_offsets_are_log_ratios() {
        let anchor = CenterBox::new(0.5, 0.5, 0.2, 0.2);
        let gt = CenterBox::new(0.5, 0.5, 0.4, 0.4);
        let off = encode_offsets(&gt, &anchor);
        assert_eq!(off[0], 0.0);
        assert_eq!(off[1], 0.0);
        assert!((off[2] - 2f64.ln()).abs() < 1e-15);
        assert!((off[3] - 2f64.ln()).abs() < 1e-15);
        let back = decode_offsets(&[0.0, 0.0, 2f64.ln(), 2f64.ln()], &anchor);
        assert!((back.w - 0.4).abs() < 1e-15);
    }

    #[test]
    fn tiny_object_still_claims_best_anchor() {
        let set = build_default_boxes(&single_level(2, 2, 0.5, &[1.0])).unwrap();
        let ann = one_object(BBox::new(0.7, 0.7, 0.75, 0.75));
        let t = encode_gt(&ann, &set, 0.5).unwrap();
        assert_eq!(t.num_positive(), 1);
        assert!(t.positive[3]);
    }

    #[test]
    fn rejects_bad_threshold() {
        let set = build_default_boxes(&single_level(1, 1, 1.0, &[1.0])).unwrap();
        assert!(encode_gt(&Annotation::default(), &set, 0.0).is_err());
        assert!(encode_gt(&Annotation::default(), &set, 1.0).is_err());
    }

    #[test]
    fn zero_offsets_decode_to_default_boxes() {
        let set = build_default_boxes(&single_level(2, 3, 0.4, &[1.0, 2.0])).unwrap();
        let k = set.len();
        let mut cls = vec![0.0; k * 3];
        for row in cls.chunks_mut(3) {
            row.copy_from_slice(&[0.2, 0.5, 0.3]);
        }
        let grid = PredictionGrid::new(3, cls, vec![[0.0; 4]; k]).unwrap();
        let dets = decode_predictions(&grid, &set);
        assert_eq!(dets.len(), k * 2);
        for (i, det) in dets.iter().enumerate() {
            let anchor = set.get(i / 2).to_corners().clipped();
            assert_eq!(det.bbox, anchor);
            assert!(det.class_id >= 1);
        }
    }
}
