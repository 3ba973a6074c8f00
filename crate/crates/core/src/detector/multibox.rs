//! Supervised multibox loss: cross-entropy over positives and hard-mined
//! negatives plus smooth-L1 localization over positives.

use super::boxes::MatchTargets;
use super::grid::{GridGrad, PredictionGrid};

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct MultiboxLoss {
    pub cls: f64,
    pub loc: f64,
    pub num_positive: usize,
}

impl MultiboxLoss {
    pub fn total(&self) -> f64 {
        self.cls + self.loc
    }
}

fn neg_log(p: f64) -> f64 {
    -p.max(f64::MIN_POSITIVE).ln()
}

fn smooth_l1(x: f64) -> (f64, f64) {
    if x.abs() < 1.0 {
        (0.5 * x * x, x)
    } else {
        (x.abs() - 0.5, x.signum())
    }
}

/// Locations entering the classification term: all positives plus the
/// highest-loss negatives, `neg_pos_ratio` per positive (one when there are
/// no positives). Ties go to the lower index.
pub fn mine_hard_negatives(grid: &PredictionGrid, targets: &MatchTargets, neg_pos_ratio: f64) -> Vec<bool> {
    let mut selected = targets.positive.clone();
    let num_pos = targets.num_positive();
    let wanted = if num_pos == 0 {
        1
    } else {
        (neg_pos_ratio * num_pos as f64).floor() as usize
    };
    let mut negatives: Vec<(f64, usize)> = (0..grid.len())
        .filter(|&k| !targets.positive[k])
        .map(|k| (neg_log(grid.cls_row(k)[0]), k))
        .collect();
    negatives.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    for &(_, k) in negatives.iter().take(wanted) {
        selected[k] = true;
    }
    selected
}

/// One image's contribution to a batch multibox loss.
pub struct MultiboxItem<'a> {
    pub grid: &'a PredictionGrid,
    pub targets: &'a MatchTargets,
    /// Output of [`mine_hard_negatives`].
    pub selected: &'a [bool],
}

/// Batch multibox loss normalized by the total number of positives (at least 1).
///
/// When `grads` is given, `scale · ∂L/∂grid` is added to each image's gradient;
/// class gradients go straight to the logits.
pub fn multibox_batch(items: &[MultiboxItem<'_>], mut grads: Option<(&mut [GridGrad], f64)>) -> MultiboxLoss {
    let num_positive: usize = items.iter().map(|it| it.targets.num_positive()).sum();
    let norm = num_positive.max(1) as f64;
    let mut cls = 0.0;
    let mut loc = 0.0;
    for (i, it) in items.iter().enumerate() {
        for k in 0..it.grid.len() {
            if it.selected[k] {
                let probs = it.grid.cls_row(k);
                let target = it.targets.cls[k];
                cls += neg_log(probs[target]);
                if let Some((g, scale)) = grads.as_mut() {
                    let row = g[i].logit_row_mut(k);
                    for (j, (r, &p)) in row.iter_mut().zip(probs).enumerate() {
                        let onehot = if j == target { 1.0 } else { 0.0 };
                        *r += *scale * (p - onehot) / norm;
                    }
                }
            }
            if it.targets.positive[k] {
                let pred = it.grid.loc(k);
                let tgt = &it.targets.loc[k];
                for t in 0..4 {
                    let (v, d) = smooth_l1(pred[t] - tgt[t]);
                    loc += v;
                    if let Some((g, scale)) = grads.as_mut() {
                        g[i].loc[k][t] += *scale * d / norm;
                    }
                }
            }
        }
    }
    MultiboxLoss {
        cls: cls / norm,
        loc: loc / norm,
        num_positive,
    }
}

/// Single-image multibox loss with hard-negative mining.
pub fn multibox_loss(grid: &PredictionGrid, targets: &MatchTargets, neg_pos_ratio: f64) -> MultiboxLoss {
    let selected = mine_hard_negatives(grid, targets, neg_pos_ratio);
    multibox_batch(
        &[MultiboxItem {
            grid,
            targets,
            selected: &selected,
        }],
        None,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(rows: &[&[f64]], loc: Vec<[f64; 4]>) -> PredictionGrid {
        let width = rows[0].len();
        let cls = rows.iter().flat_map(|r| r.iter().copied()).collect();
        PredictionGrid::new(width, cls, loc).unwrap()
    }

    fn targets(cls: Vec<usize>, loc: Vec<[f64; 4]>) -> MatchTargets {
        let positive = cls.iter().map(|&c| c != 0).collect();
        MatchTargets { cls, loc, positive }
    }

    #[test]
    fn perfect_predictions_have_zero_loss() {
        let g = grid(
            &[&[0.0, 1.0, 0.0], &[1.0, 0.0, 0.0], &[1.0, 0.0, 0.0]],
            vec![[0.1, -0.2, 0.3, 0.0], [0.0; 4], [0.0; 4]],
        );
        let t = targets(vec![1, 0, 0], vec![[0.1, -0.2, 0.3, 0.0], [0.0; 4], [0.0; 4]]);
        let l = multibox_loss(&g, &t, 3.0);
        assert_eq!(l.total(), 0.0);
    }

    #[test]
    fn no_positives_means_no_localization() {
        let g = grid(&[&[0.4, 0.6], &[0.9, 0.1]], vec![[5.0; 4], [1.0; 4]]);
        let t = targets(vec![0, 0], vec![[0.0; 4]; 2]);
        let selected = mine_hard_negatives(&g, &t, 3.0);
        assert_eq!(selected, vec![true, false]);
        let l = multibox_loss(&g, &t, 3.0);
        assert_eq!(l.loc, 0.0);
        assert!((l.cls - (-(0.4f64).ln())).abs() < 1e-15);
    }

    #[test]
    fn half_probability_on_true_class() {
        let g = grid(
            &[&[0.5, 0.5, 0.0], &[1.0, 0.0, 0.0], &[1.0, 0.0, 0.0], &[1.0, 0.0, 0.0]],
            vec![[0.0; 4]; 4],
        );
        let t = targets(vec![1, 0, 0, 0], vec![[0.0; 4]; 4]);
        let l = multibox_loss(&g, &t, 3.0);
        assert!((l.cls - 0.5f64.ln().abs()).abs() < 1e-12);
        assert!((l.cls - std::f64::consts::LN_2).abs() < 1e-12);
        assert_eq!(l.loc, 0.0);
    }

    #[test]
    fn mining_picks_worst_negatives() {
        let g = grid(
            &[&[0.2, 0.8], &[0.9, 0.1], &[0.3, 0.7], &[0.1, 0.9], &[0.99, 0.01]],
            vec![[0.0; 4]; 5],
        );
        let t = targets(vec![1, 0, 0, 0, 0], vec![[0.0; 4]; 5]);
        let sel = mine_hard_negatives(&g, &t, 2.0);
        assert_eq!(sel, vec![true, false, true, true, false]);
    }

    #[test]
    fn smooth_l1_localization() {
        let g = grid(&[&[0.0, 1.0]], vec![[0.5, 2.0, 0.0, 0.0]]);
        let t = targets(vec![1], vec![[0.0; 4]]);
        let l = multibox_loss(&g, &t, 3.0);
        assert!((l.loc - (0.125 + 1.5)).abs() < 1e-15);
    }
}
