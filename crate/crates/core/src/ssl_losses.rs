//! Unsupervised consistency losses and their gradients.
//!
//! All divergences are in nats. The second argument of a KL term is clamped to
//! at least [`LOG_EPS`] before taking its logarithm. Jensen-Shannon needs no
//! clamp: its midpoint is positive wherever a term contributes.
//!
//! Every batch-level function takes an optional gradient sink. Masks and
//! Type-II targets are treated as constants; gradients are only written for
//! the live predictions.

use serde::{Deserialize, Serialize};

use crate::augment::mix_weights;
use crate::detector::{GridGrad, PredictionGrid};
use crate::error::{Error, Result};
use crate::masks::{ObjectnessMask, TypeMasks};

pub const LOG_EPS: f64 = 1e-7;

/// Scale of the squared-L2 offset consistency terms.
pub const LOC_L2_SCALE: f64 = 0.25;

#[inline]
fn xlogx_term(p: f64) -> f64 {
    if p > 0.0 {
        p * p.ln()
    } else {
        0.0
    }
}

fn check_len(p: &[f64], q: &[f64]) -> Result<()> {
    if p.len() != q.len() {
        return Err(Error::shape(format!(
            "probability vectors of length {} and {}",
            p.len(),
            q.len()
        )));
    }
    Ok(())
}

fn kl_raw(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .map(|(&pi, &qi)| {
            if pi > 0.0 {
                xlogx_term(pi) - pi * qi.max(LOG_EPS).ln()
            } else {
                0.0
            }
        })
        .sum()
}

/// `KL(p ‖ q) = Σ p_i ln(p_i / q_i)` with `0 · ln 0 = 0`.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    check_len(p, q)?;
    Ok(kl_raw(p, q).max(0.0))
}

fn js_raw(p: &[f64], q: &[f64]) -> f64 {
    let mut sum = 0.0;
    for (&pi, &qi) in p.iter().zip(q) {
        let m = (0.5 * (pi + qi)).max(f64::MIN_POSITIVE).ln();
        if pi > 0.0 {
            sum += 0.5 * (xlogx_term(pi) - pi * m);
        }
        if qi > 0.0 {
            sum += 0.5 * (xlogx_term(qi) - qi * m);
        }
    }
    sum
}

/// Jensen-Shannon divergence `½KL(p‖m) + ½KL(q‖m)`, `m = (p + q) / 2`.
pub fn js_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    check_len(p, q)?;
    Ok(js_raw(p, q).max(0.0))
}

/// Adds `scale · ∂KL(p‖q)/∂q` to `gq`; `p` is a constant target.
fn kl_grad_q(p: &[f64], q: &[f64], scale: f64, gq: &mut [f64]) {
    for ((&pi, &qi), g) in p.iter().zip(q).zip(gq.iter_mut()) {
        if pi > 0.0 && qi > LOG_EPS {
            *g -= scale * pi / qi;
        }
    }
}

/// Adds `scale · ∂JS/∂p` and `scale · ∂JS/∂q`.
fn js_grads(p: &[f64], q: &[f64], scale: f64, gp: &mut [f64], gq: &mut [f64]) {
    for i in 0..p.len() {
        let (pi, qi) = (p[i], q[i]);
        let m = 0.5 * (pi + qi);
        let active = m > 0.0;
        let ln_m = m.max(f64::MIN_POSITIVE).ln();
        let shared = if active { 0.25 * (pi + qi) / m } else { 0.0 };
        let d = |x: f64| 0.5 * (x.max(f64::MIN_POSITIVE).ln() + 1.0) - 0.5 * ln_m - shared;
        gp[i] += scale * d(pi);
        gq[i] += scale * d(qi);
    }
}

/// Mean of a per-location loss over the selected locations of a batch.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct MaskedMean {
    pub value: f64,
    pub count: usize,
}

/// A mixed pair `(A, B)` and the prediction on `Mix_λ(A, B)`, with its type masks.
pub struct MixedItem<'a> {
    pub a: &'a PredictionGrid,
    pub b: &'a PredictionGrid,
    pub m: &'a PredictionGrid,
    pub masks: &'a TypeMasks,
}

/// Gradient sinks for the three grids of each [`MixedItem`].
pub struct MixedGrads<'a> {
    pub a: &'a mut [GridGrad],
    pub b: &'a mut [GridGrad],
    pub m: &'a mut [GridGrad],
}

/// Type-I loss: mean over Type-I locations of
/// `JS(λ·A_cls + (1−λ)·B_cls ‖ M_cls)`. Both the mixed target and the mixed
/// prediction receive gradient. Empty mask gives 0.
pub fn type1_batch(items: &[MixedItem<'_>], lam: f64, mut grads: Option<(MixedGrads<'_>, f64)>) -> MaskedMean {
    let count: usize = items.iter().map(|it| it.masks.counts().0).sum();
    if count == 0 {
        return MaskedMean::default();
    }
    let (wa, wb) = mix_weights(lam);
    let norm = count as f64;
    let width = items[0].a.cls_width();
    let mut mixed = vec![0.0; width];
    let mut gp = vec![0.0; width];
    let mut gq = vec![0.0; width];
    let mut total = 0.0;
    for (i, it) in items.iter().enumerate() {
        for k in (0..it.a.len()).filter(|&k| it.masks.type1[k]) {
            let (ra, rb, rm) = (it.a.cls_row(k), it.b.cls_row(k), it.m.cls_row(k));
            for j in 0..width {
                mixed[j] = wa * ra[j] + wb * rb[j];
            }
            total += js_raw(&mixed, rm);
            if let Some((g, scale)) = grads.as_mut() {
                gp.iter_mut().for_each(|v| *v = 0.0);
                gq.iter_mut().for_each(|v| *v = 0.0);
                js_grads(&mixed, rm, *scale / norm, &mut gp, &mut gq);
                let ga = g.a[i].cls_row_mut(k);
                for j in 0..width {
                    ga[j] += wa * gp[j];
                }
                let gb = g.b[i].cls_row_mut(k);
                for j in 0..width {
                    gb[j] += wb * gp[j];
                }
                let gm = g.m[i].cls_row_mut(k);
                for j in 0..width {
                    gm[j] += gq[j];
                }
            }
        }
    }
    MaskedMean {
        value: (total / norm).max(0.0),
        count,
    }
}

/// Which source of a mixed pair acts as the foreground target.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    A,
    B,
}

/// Per-side Type-II value: the two means share the same denominator.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Type2Value {
    pub cls: f64,
    pub loc: f64,
    pub count: usize,
}

/// Type-II loss for one side: mean over that side's Type-II locations of
/// `KL(target_cls ‖ M_cls)` and `¼‖target_loc − M_loc‖²`.
///
/// The foreground grid is a fixed target; gradients (scaled by `cls_scale` and
/// `loc_scale`) only reach the mixed prediction.
pub fn type2_batch(items: &[MixedItem<'_>], side: Side, mut grads: Option<(&mut [GridGrad], f64, f64)>) -> Type2Value {
    let pick = |it: &MixedItem<'_>| -> usize {
        match side {
            Side::A => it.masks.counts().1,
            Side::B => it.masks.counts().2,
        }
    };
    let count: usize = items.iter().map(pick).sum();
    if count == 0 {
        return Type2Value::default();
    }
    let norm = count as f64;
    let mut cls = 0.0;
    let mut loc = 0.0;
    for (i, it) in items.iter().enumerate() {
        let (target, mask) = match side {
            Side::A => (it.a, &it.masks.type2_a),
            Side::B => (it.b, &it.masks.type2_b),
        };
        for k in (0..it.m.len()).filter(|&k| mask[k]) {
            let (p, q) = (target.cls_row(k), it.m.cls_row(k));
            cls += kl_raw(p, q);
            let (lt, lm) = (target.loc(k), it.m.loc(k));
            loc += LOC_L2_SCALE * (0..4).map(|t| (lt[t] - lm[t]).powi(2)).sum::<f64>();
            if let Some((g, cls_scale, loc_scale)) = grads.as_mut() {
                kl_grad_q(p, q, *cls_scale / norm, g[i].cls_row_mut(k));
                for t in 0..4 {
                    g[i].loc[k][t] += *loc_scale / norm * 2.0 * LOC_L2_SCALE * (lm[t] - lt[t]);
                }
            }
        }
    }
    Type2Value {
        cls: (cls / norm).max(0.0),
        loc: loc / norm,
        count,
    }
}

/// A prediction and the flip-corresponded prediction of its mirrored image.
pub struct CsdItem<'a> {
    pub original: &'a PredictionGrid,
    pub flipped: &'a PredictionGrid,
    pub mask: &'a ObjectnessMask,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct CsdValue {
    pub cls: f64,
    pub loc: f64,
    pub count: usize,
}

/// Flip-consistency loss with background elimination: over locations where the
/// original prediction is foreground, mean JS between class rows and mean
/// `loc_l2_scale · ‖Δ‖²` between offsets. Both predictions are live.
pub fn csd_batch(
    items: &[CsdItem<'_>],
    loc_l2_scale: f64,
    mut grads: Option<(&mut [GridGrad], &mut [GridGrad], f64, f64)>,
) -> CsdValue {
    let count: usize = items.iter().map(|it| it.mask.count()).sum();
    if count == 0 {
        return CsdValue::default();
    }
    let norm = count as f64;
    let mut cls = 0.0;
    let mut loc = 0.0;
    for (i, it) in items.iter().enumerate() {
        for k in (0..it.original.len()).filter(|&k| it.mask.bits[k]) {
            let (p, q) = (it.original.cls_row(k), it.flipped.cls_row(k));
            cls += js_raw(p, q);
            let (lo, lf) = (it.original.loc(k), it.flipped.loc(k));
            loc += loc_l2_scale * (0..4).map(|t| (lo[t] - lf[t]).powi(2)).sum::<f64>();
            if let Some((go, gf, cls_scale, loc_scale)) = grads.as_mut() {
                let w = p.len();
                let mut gp = vec![0.0; w];
                let mut gq = vec![0.0; w];
                js_grads(p, q, *cls_scale / norm, &mut gp, &mut gq);
                for (dst, v) in go[i].cls_row_mut(k).iter_mut().zip(&gp) {
                    *dst += v;
                }
                for (dst, v) in gf[i].cls_row_mut(k).iter_mut().zip(&gq) {
                    *dst += v;
                }
                for t in 0..4 {
                    let d = *loc_scale / norm * 2.0 * loc_l2_scale * (lo[t] - lf[t]);
                    go[i].loc[k][t] += d;
                    gf[i].loc[k][t] -= d;
                }
            }
        }
    }
    CsdValue {
        cls: (cls / norm).max(0.0),
        loc: loc / norm,
        count,
    }
}

/// Single-grid Type-I loss.
pub fn type1_loss(ga: &PredictionGrid, gb: &PredictionGrid, gm: &PredictionGrid, lam: f64, type1_mask: &[bool]) -> f64 {
    let none = vec![false; type1_mask.len()];
    let masks = TypeMasks {
        type1: type1_mask.to_vec(),
        type2_a: none.clone(),
        type2_b: none,
    };
    type1_batch(
        &[MixedItem {
            a: ga,
            b: gb,
            m: gm,
            masks: &masks,
        }],
        lam,
        None,
    )
    .value
}

/// Single-grid Type-II loss `(cls, loc)` against a fixed foreground target.
pub fn type2_loss(target: &PredictionGrid, gm: &PredictionGrid, mask: &[bool]) -> (f64, f64) {
    let none = vec![false; mask.len()];
    let masks = TypeMasks {
        type1: none.clone(),
        type2_a: mask.to_vec(),
        type2_b: none,
    };
    let v = type2_batch(
        &[MixedItem {
            a: target,
            b: target,
            m: gm,
            masks: &masks,
        }],
        Side::A,
        None,
    );
    (v.cls, v.loc)
}

/// Single-grid flip-consistency loss `(cls, loc)`.
pub fn csd_loss(ga: &PredictionGrid, flipped: &PredictionGrid, mask: &ObjectnessMask) -> (f64, f64) {
    let v = csd_batch(
        &[CsdItem {
            original: ga,
            flipped,
            mask,
        }],
        LOC_L2_SCALE,
        None,
    );
    (v.cls, v.loc)
}

/// Interpolation-consistency loss and its parts.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct IsdLoss {
    pub type1: f64,
    pub type2_a: Type2Parts,
    pub type2_b: Type2Parts,
    pub total: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Type2Parts {
    pub cls: f64,
    pub loc: f64,
}

impl IsdLoss {
    pub fn type2_cls(&self) -> f64 {
        self.type2_a.cls + self.type2_b.cls
    }

    pub fn type2_loc(&self) -> f64 {
        self.type2_a.loc + self.type2_b.loc
    }

    pub fn type2(&self) -> f64 {
        self.type2_cls() + self.type2_loc()
    }
}

pub fn check_gammas(gamma1: f64, gamma2: f64) -> Result<()> {
    if !(gamma1 >= 0.0 && gamma2 >= 0.0) {
        return Err(Error::config(format!(
            "loss weights must be non-negative, got γ1 = {gamma1}, γ2 = {gamma2}"
        )));
    }
    Ok(())
}

/// `γ1 · L_I + γ2 · (L_II^A + L_II^B)` over a batch of mixed pairs.
pub fn isd_batch(items: &[MixedItem<'_>], lam: f64, gamma1: f64, gamma2: f64) -> Result<IsdLoss> {
    check_gammas(gamma1, gamma2)?;
    let type1 = type1_batch(items, lam, None).value;
    let a = type2_batch(items, Side::A, None);
    let b = type2_batch(items, Side::B, None);
    let mut loss = IsdLoss {
        type1,
        type2_a: Type2Parts { cls: a.cls, loc: a.loc },
        type2_b: Type2Parts { cls: b.cls, loc: b.loc },
        total: 0.0,
    };
    loss.total = gamma1 * loss.type1 + gamma2 * loss.type2();
    Ok(loss)
}

/// Single-pair ISD loss.
pub fn isd_loss(
    ga: &PredictionGrid,
    gb: &PredictionGrid,
    gm: &PredictionGrid,
    lam: f64,
    masks: &TypeMasks,
    gamma1: f64,
    gamma2: f64,
) -> Result<IsdLoss> {
    isd_batch(
        &[MixedItem {
            a: ga,
            b: gb,
            m: gm,
            masks,
        }],
        lam,
        gamma1,
        gamma2,
    )
}

/// Ramp-up / plateau / ramp-down weight for the unsupervised terms.
///
/// `exp(−5(1 − t/ramp_up)²)` while ramping up, 1 on the plateau and
/// `exp(−12.5(1 − (total − t)/ramp_down)²)` over the last `ramp_down` steps.
pub fn weight_schedule(t: usize, ramp_up: usize, total: usize, ramp_down: usize) -> Result<f64> {
    if ramp_up + ramp_down > total {
        return Err(Error::config(format!(
            "ramp lengths {ramp_up} + {ramp_down} exceed {total} iterations"
        )));
    }
    if t > total {
        return Err(Error::config(format!("iteration {t} beyond schedule end {total}")));
    }
    if t < ramp_up {
        let x = 1.0 - t as f64 / ramp_up as f64;
        return Ok((-5.0 * x * x).exp());
    }
    if ramp_down > 0 && t > total - ramp_down {
        let x = 1.0 - (total - t) as f64 / ramp_down as f64;
        return Ok((-12.5 * x * x).exp());
    }
    Ok(1.0)
}

/// `L_S + w · (L_CSD + L_ISD)`.
pub fn total_loss(l_sup: f64, csd: f64, isd: f64, w: f64) -> f64 {
    l_sup + w * (csd + isd)
}

/// Every loss component and the mask statistics of one training step.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_sup: f64,
    pub l_csd_cls: f64,
    pub l_csd_loc: f64,
    pub l_type1: f64,
    pub l_type2_cls: f64,
    pub l_type2_loc: f64,
    pub l_isd: f64,
    pub l_total: f64,
    pub n_type1: usize,
    pub n_type2_a: usize,
    pub n_type2_b: usize,
    pub n_objectness_a: usize,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masks::{objectness_mask, type_masks};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const LN2: f64 = std::f64::consts::LN_2;

    /// Plain-formula oracle, no clamping.
    fn kl_oracle(p: &[f64], q: &[f64]) -> f64 {
        p.iter()
            .zip(q)
            .filter(|(pi, _)| **pi > 0.0)
            .map(|(pi, qi)| pi * (pi / qi).ln())
            .sum()
    }

    fn grid(rows: &[&[f64]], loc: Vec<[f64; 4]>) -> PredictionGrid {
        PredictionGrid::new(
            rows[0].len(),
            rows.iter().flat_map(|r| r.iter().copied()).collect(),
            loc,
        )
        .unwrap()
    }

    fn prob_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        let raw: Vec<f64> = (0..n).map(|_| rng.random::<f64>() + 1e-3).collect();
        let s: f64 = raw.iter().sum();
        raw.into_iter().map(|v| v / s).collect()
    }

    #[test]
    fn kl_examples() {
        assert_eq!(kl_divergence(&[0.3, 0.7], &[0.3, 0.7]).unwrap(), 0.0);
        let v = kl_divergence(&[0.5, 0.5], &[0.25, 0.75]).unwrap();
        let expected = 0.5 * 2f64.ln() + 0.5 * (2.0f64 / 3.0).ln();
        assert!((v - expected).abs() < 1e-12);
        assert!((v - 0.143_841_036_225_890_1).abs() < 1e-12);
        let v = kl_divergence(&[1.0, 0.0, 0.0, 0.0], &[0.25; 4]).unwrap();
        assert!((v - 4f64.ln()).abs() < 1e-12);
        assert!(kl_divergence(&[1.0], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn js_examples() {
        assert_eq!(js_divergence(&[0.2, 0.8], &[0.2, 0.8]).unwrap(), 0.0);
        assert!((js_divergence(&[1.0, 0.0], &[0.0, 1.0]).unwrap() - LN2).abs() < 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..100 {
            let p = prob_vec(&mut rng, 4);
            let q = prob_vec(&mut rng, 4);
            let m: Vec<f64> = p.iter().zip(&q).map(|(a, b)| 0.5 * (a + b)).collect();
            let oracle = 0.5 * kl_oracle(&p, &m) + 0.5 * kl_oracle(&q, &m);
            let v = js_divergence(&p, &q).unwrap();
            assert!((v - oracle).abs() < 1e-12);
            assert!((v - js_divergence(&q, &p).unwrap()).abs() < 1e-15);
        }
    }

    #[test]
    fn type1_examples() {
        let a = grid(&[&[0.0, 1.0, 0.0]], vec![[0.0; 4]]);
        let b = grid(&[&[0.0, 0.0, 1.0]], vec![[0.0; 4]]);
        let m = grid(&[&[0.0, 0.5, 0.5]], vec![[0.0; 4]]);
        assert_eq!(type1_loss(&a, &b, &m, 0.5, &[false]), 0.0);
        assert!(type1_loss(&a, &b, &m, 0.5, &[true]).abs() < 1e-15);
        assert_eq!(type1_loss(&a, &b, &a, 1.0, &[true]), 0.0);
    }

    #[test]
    fn type2_examples() {
        let t = grid(&[&[0.5, 0.5], &[0.1, 0.9]], vec![[1.0, 0.0, 0.0, 0.0], [0.3; 4]]);
        assert_eq!(type2_loss(&t, &t, &[true, true]), (0.0, 0.0));
        let m = grid(&[&[0.25, 0.75], &[0.1, 0.9]], vec![[0.0; 4], [0.3; 4]]);
        let (cls, loc) = type2_loss(&t, &m, &[true, false]);
        assert!((cls - 0.143_841_036_225_890_1).abs() < 1e-12);
        assert!((loc - 0.25).abs() < 1e-15);
        assert_eq!(type2_loss(&t, &m, &[false, false]), (0.0, 0.0));
    }

    #[test]
    fn csd_examples() {
        let a = grid(&[&[0.0, 1.0]], vec![[0.2, 0.1, 0.0, 0.0]]);
        let on = ObjectnessMask { bits: vec![true] };
        let off = ObjectnessMask { bits: vec![false] };
        assert_eq!(csd_loss(&a, &a, &on), (0.0, 0.0));
        let f = grid(&[&[1.0, 0.0]], vec![[0.0, 0.1, 0.0, 0.0]]);
        assert_eq!(csd_loss(&a, &f, &off), (0.0, 0.0));
        let (cls, loc) = csd_loss(&a, &f, &on);
        assert!((cls - LN2).abs() < 1e-12);
        assert!((loc - 0.25 * 0.04).abs() < 1e-15);
    }

    #[test]
    fn isd_examples() {
        let a = grid(&[&[0.2, 0.8], &[0.9, 0.1], &[0.3, 0.7]], vec![[0.1; 4]; 3]);
        let b = grid(&[&[0.3, 0.7], &[0.2, 0.8], &[0.8, 0.2]], vec![[0.2; 4]; 3]);
        let m = grid(&[&[0.4, 0.6], &[0.5, 0.5], &[0.6, 0.4]], vec![[0.0; 4]; 3]);
        let masks = type_masks(&objectness_mask(&a), &objectness_mask(&b)).unwrap();
        assert_eq!(masks.counts(), (1, 1, 1));
        let l = isd_loss(&a, &b, &m, 0.3, &masks, 0.1, 1.0).unwrap();
        assert!((l.total - (0.1 * l.type1 + l.type2())).abs() < 1e-12);
        assert!(l.type1 > 0.0 && l.type2_a.cls > 0.0 && l.type2_b.loc > 0.0);
        let only2 = isd_loss(&a, &b, &m, 0.3, &masks, 0.0, 1.0).unwrap();
        assert_eq!(only2.total, only2.type2());
        let only1 = isd_loss(&a, &b, &m, 0.3, &masks, 0.1, 0.0).unwrap();
        assert_eq!(only1.total, 0.1 * only1.type1);
        let empty = TypeMasks {
            type1: vec![false; 3],
            type2_a: vec![false; 3],
            type2_b: vec![false; 3],
        };
        assert_eq!(isd_loss(&a, &b, &m, 0.3, &empty, 0.1, 1.0).unwrap().total, 0.0);
        assert!(isd_loss(&a, &b, &m, 0.3, &masks, -0.1, 1.0).is_err());
        // λ = 1 means M = A.
        let l = isd_loss(&a, &b, &a, 1.0, &masks, 0.1, 1.0).unwrap();
        assert_eq!(l.type1, 0.0);
        assert_eq!(l.type2_a, Type2Parts::default());
    }

    #[test]
    fn schedule_examples() {
        let w0 = weight_schedule(0, 100, 1000, 200).unwrap();
        assert!((w0 - (-5.0f64).exp()).abs() < 1e-15);
        assert!((w0 - 0.006_737_946_999_085_467).abs() < 1e-15);
        assert_eq!(weight_schedule(100, 100, 1000, 200).unwrap(), 1.0);
        assert_eq!(weight_schedule(800, 100, 1000, 200).unwrap(), 1.0);
        let end = weight_schedule(1000, 100, 1000, 200).unwrap();
        assert!((end - 3.726_653_172_078_671e-6).abs() < 1e-18);
        assert!(weight_schedule(5, 600, 1000, 500).is_err());
        assert_eq!(weight_schedule(0, 0, 10, 0).unwrap(), 1.0);
    }

    #[test]
    fn total_examples() {
        assert_eq!(total_loss(1.0, 0.2, 0.3, 0.0), 1.0);
        assert_eq!(total_loss(1.0, 0.0, 0.0, 0.7), 1.0);
        assert!((total_loss(1.0, 0.2, 0.3, 0.5) - 1.25).abs() < 1e-15);
    }

    /// Finite-difference check of the per-row divergence gradients.
    #[test]
    fn divergence_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let h = 1e-7;
        for _ in 0..50 {
            let p = prob_vec(&mut rng, 4);
            let q = prob_vec(&mut rng, 4);
            let mut gp = vec![0.0; 4];
            let mut gq = vec![0.0; 4];
            js_grads(&p, &q, 1.0, &mut gp, &mut gq);
            let mut gkl = vec![0.0; 4];
            kl_grad_q(&p, &q, 1.0, &mut gkl);
            for i in 0..4 {
                let bump = |v: &[f64], s: f64| {
                    let mut v = v.to_vec();
                    v[i] += s * h;
                    v
                };
                let fd_p = (js_raw(&bump(&p, 1.0), &q) - js_raw(&bump(&p, -1.0), &q)) / (2.0 * h);
                let fd_q = (js_raw(&p, &bump(&q, 1.0)) - js_raw(&p, &bump(&q, -1.0))) / (2.0 * h);
                let fd_kl = (kl_raw(&p, &bump(&q, 1.0)) - kl_raw(&p, &bump(&q, -1.0))) / (2.0 * h);
                assert!((fd_p - gp[i]).abs() < 1e-6);
                assert!((fd_q - gq[i]).abs() < 1e-6);
                assert!((fd_kl - gkl[i]).abs() < 1e-5);
            }
        }
    }

    proptest! {
        #[test]
        fn divergences_are_bounded(seed in any::<u64>(), n in 2usize..8) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = prob_vec(&mut rng, n);
            let q = prob_vec(&mut rng, n);
            let kl = kl_divergence(&p, &q).unwrap();
            let js = js_divergence(&p, &q).unwrap();
            prop_assert!(kl >= 0.0);
            prop_assert!((0.0..=LN2 + 1e-12).contains(&js));
            prop_assert!((kl - kl_oracle(&p, &q)).abs() < 1e-9);
        }
    }
}
