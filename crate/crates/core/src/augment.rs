//! Flip and mix augmentations, and assembly of the mixed training batch.

use rand::Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::detector::{DefaultBoxSet, GridGrad, Location, PredictionGrid};
use crate::error::{Error, Result};
use crate::tensor::Image;

/// Mirrors every row: column `j` moves to `W − 1 − j`.
pub fn flip_image(image: &Image) -> Image {
    let mut out = image.clone();
    let w = image.width;
    for row in out.data.chunks_mut(w) {
        row.reverse();
    }
    out
}

/// Horizontal mirror correspondence between prediction-grid locations.
///
/// `partner[k]` is the location whose default box is the mirror image of box `k`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FlipMap {
    partner: Vec<usize>,
}

const MIRROR_TOL: f64 = 1e-9;

impl FlipMap {
    /// Fails when some default box has no mirrored partner in the mirrored cell.
    pub fn new(boxes: &DefaultBoxSet) -> Result<Self> {
        let mut partner = vec![usize::MAX; boxes.len()];
        #[allow(clippy::needless_range_loop)]
        for k in 0..boxes.len() {
            let loc = boxes.location(k);
            let lvl = boxes.levels()[loc.level];
            let b = boxes.get(k);
            let col = lvl.grid_width - 1 - loc.col;
            let matches = |slot: usize| {
                let j = boxes.flat_index(Location { col, slot, ..loc });
                let m = boxes.get(j);
                ((1.0 - b.cx) - m.cx).abs() < MIRROR_TOL
                    && (b.cy - m.cy).abs() < MIRROR_TOL
                    && (b.w - m.w).abs() < MIRROR_TOL
                    && (b.h - m.h).abs() < MIRROR_TOL
            };
            let slot = if matches(loc.slot) {
                Some(loc.slot)
            } else {
                (0..lvl.boxes_per_cell).find(|&s| matches(s))
            };
            let slot = slot.ok_or_else(|| {
                Error::config(format!(
                    "default box {k} at level {} ({}, {}, {}) has no horizontal mirror partner",
                    loc.level, loc.row, loc.col, loc.slot
                ))
            })?;
            partner[k] = boxes.flat_index(Location { col, slot, ..loc });
        }
        for (k, &j) in partner.iter().enumerate() {
            if partner[j] != k {
                return Err(Error::config("default box mirror mapping is not one-to-one"));
            }
        }
        Ok(Self { partner })
    }

    pub fn partner(&self, k: usize) -> usize {
        self.partner[k]
    }

    pub fn len(&self) -> usize {
        self.partner.len()
    }

    pub fn is_empty(&self) -> bool {
        self.partner.is_empty()
    }

    /// Re-indexes the grid predicted on a flipped image so it lines up with the
    /// original image: class rows move to the mirrored location, `Δcx` changes sign.
    pub fn apply(&self, grid: &PredictionGrid) -> Result<PredictionGrid> {
        if grid.len() != self.partner.len() {
            return Err(Error::shape(format!(
                "grid has {} locations, flip map covers {}",
                grid.len(),
                self.partner.len()
            )));
        }
        let mut out = grid.clone();
        for (k, &j) in self.partner.iter().enumerate() {
            out.cls_row_mut(k).copy_from_slice(grid.cls_row(j));
            let l = grid.loc(j);
            *out.loc_mut(k) = [-l[0], l[1], l[2], l[3]];
        }
        Ok(out)
    }

    /// Adjoint of [`FlipMap::apply`] for gradients: maps `∂L/∂(corresponded grid)`
    /// back onto the grid that was predicted for the flipped image.
    pub fn pull_back(&self, grad: &GridGrad) -> GridGrad {
        let mut out = grad.clone();
        let w = grad.width;
        for (k, &j) in self.partner.iter().enumerate() {
            out.cls[j * w..(j + 1) * w].copy_from_slice(&grad.cls[k * w..(k + 1) * w]);
            out.logits[j * w..(j + 1) * w].copy_from_slice(&grad.logits[k * w..(k + 1) * w]);
            let l = grad.loc[k];
            out.loc[j] = [-l[0], l[1], l[2], l[3]];
        }
        out
    }
}

/// Convenience wrapper building the [`FlipMap`] on the fly.
pub fn flip_grid_correspondence(grid: &PredictionGrid, boxes: &DefaultBoxSet) -> Result<PredictionGrid> {
    FlipMap::new(boxes)?.apply(grid)
}

/// Draws λ ~ Beta(α, α), strictly inside (0, 1).
pub fn sample_lambda<R: Rng + ?Sized>(alpha: f64, rng: &mut R) -> Result<f64> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::config(format!("Beta parameter must be positive, got {alpha}")));
    }
    let beta = Beta::new(alpha, alpha).map_err(|e| Error::config(e.to_string()))?;
    loop {
        let lam = beta.sample(rng);
        if lam > 0.0 && lam < 1.0 {
            return Ok(lam);
        }
    }
}

/// Blend weights `(w_a, w_b)` for mixing coefficient `lam`.
///
/// The pair always sums to exactly 1 and `mix_weights(1 − λ)` is the reversed
/// pair, so `Mix_λ(A, B)` and `Mix_{1−λ}(B, A)` agree bit for bit.
pub fn mix_weights(lam: f64) -> (f64, f64) {
    if lam >= 0.5 {
        (lam, 1.0 - lam)
    } else {
        let wb = 1.0 - lam;
        (1.0 - wb, wb)
    }
}

/// `λ·A + (1 − λ)·B`, elementwise.
pub fn mix_images(a: &Image, b: &Image, lam: f64) -> Result<Image> {
    if !a.same_shape(b) {
        return Err(Error::shape(format!(
            "cannot mix {}x{}x{} with {}x{}x{}",
            a.channels, a.height, a.width, b.channels, b.height, b.width
        )));
    }
    if !(0.0..=1.0).contains(&lam) {
        return Err(Error::config(format!("mixing coefficient {lam} outside [0, 1]")));
    }
    let (wa, wb) = mix_weights(lam);
    let data = a.data.iter().zip(&b.data).map(|(x, y)| wa * x + wb * y).collect();
    Ok(Image { data, ..a.clone() })
}

/// How the flipped batch is permuted before mixing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShuffleKind {
    /// `i ↦ (i + ⌈n/2⌉) mod n`.
    #[default]
    HalfRotation,
    /// A uniformly random single cycle (Sattolo), drawn from the batch RNG.
    RandomCycle,
}

pub fn half_rotation(n: usize) -> Vec<usize> {
    let shift = n.div_ceil(2);
    (0..n).map(|i| (i + shift) % n).collect()
}

fn random_cycle<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..i);
        perm.swap(i, j);
    }
    perm
}

/// The image quadruple of one training iteration.
#[derive(Debug, Clone)]
pub struct MixBatch {
    pub a: Vec<Image>,
    pub a_flip: Vec<Image>,
    /// `b[i] = a_flip[perm[i]]`.
    pub b: Vec<Image>,
    /// `m[i] = Mix_λ(a[i], b[i])`.
    pub m: Vec<Image>,
    pub lam: f64,
    pub perm: Vec<usize>,
    pub labeled_flags: Vec<bool>,
}

impl MixBatch {
    pub fn len(&self) -> usize {
        self.a.len()
    }

    pub fn is_empty(&self) -> bool {
        self.a.is_empty()
    }
}

/// Options for [`assemble_mix_batch`].
#[derive(Debug, Clone, Copy)]
pub struct MixOptions {
    pub alpha: f64,
    pub shuffle: ShuffleKind,
    /// Use this λ instead of sampling one.
    pub lambda: Option<f64>,
}

/// Builds `(A, Â, B, M)` with labeled images first, one λ for the whole batch.
pub fn assemble_mix_batch<R: Rng + ?Sized>(
    labeled: &[Image],
    unlabeled: &[Image],
    opts: MixOptions,
    rng: &mut R,
) -> Result<MixBatch> {
    let n = labeled.len() + unlabeled.len();
    if n < 2 {
        return Err(Error::config(format!("a mixed batch needs at least 2 images, got {n}")));
    }
    let lam = match opts.lambda {
        Some(l) if (0.0..=1.0).contains(&l) => l,
        Some(l) => return Err(Error::config(format!("forced λ {l} outside [0, 1]"))),
        None => sample_lambda(opts.alpha, rng)?,
    };
    let perm = match opts.shuffle {
        ShuffleKind::HalfRotation => half_rotation(n),
        ShuffleKind::RandomCycle => random_cycle(n, rng),
    };
    let a: Vec<Image> = labeled.iter().chain(unlabeled).cloned().collect();
    let a_flip: Vec<Image> = a.iter().map(flip_image).collect();
    let b: Vec<Image> = perm.iter().map(|&j| a_flip[j].clone()).collect();
    let m = a
        .iter()
        .zip(&b)
        .map(|(x, y)| mix_images(x, y, lam))
        .collect::<Result<Vec<_>>>()?;
    let labeled_flags = (0..n).map(|i| i < labeled.len()).collect();
    Ok(MixBatch {
        a,
        a_flip,
        b,
        m,
        lam,
        perm,
        labeled_flags,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::{build_default_boxes, AnchorLevel, LevelShape};
    use crate::geometry::CenterBox;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn img(w: usize, values: &[f64]) -> Image {
        Image::from_vec(1, values.len() / w, w, values.to_vec()).unwrap()
    }

    #[test]
    fn flip_examples() {
        let x = img(2, &[0.1, 0.9]);
        assert_eq!(flip_image(&x).data, vec![0.9, 0.1]);
        let col = img(1, &[0.1, 0.2, 0.3]);
        assert_eq!(flip_image(&col), col);
        let rgb = Image::from_vec(3, 2, 3, (0..18).map(|v| v as f64 / 18.0).collect()).unwrap();
        assert_eq!(flip_image(&flip_image(&rgb)), rgb);
        assert_eq!(flip_image(&rgb).at(1, 1, 0), rgb.at(1, 1, 2));
    }

    #[test]
    fn mix_examples() {
        let a = Image::filled(3, 4, 4, 1.0);
        let b = Image::filled(3, 4, 4, 0.0);
        assert_eq!(mix_images(&a, &b, 1.0).unwrap(), a);
        assert_eq!(mix_images(&a, &b, 0.0).unwrap(), b);
        assert!(mix_images(&a, &b, 0.5).unwrap().data.iter().all(|&v| v == 0.5));
        assert!(mix_images(&a, &Image::filled(3, 4, 5, 0.0), 0.5).is_err());
    }

    fn toy_boxes() -> DefaultBoxSet {
        build_default_boxes(&[
            AnchorLevel {
                grid_height: 3,
                grid_width: 4,
                scale: 0.3,
                aspect_ratios: vec![1.0, 2.0, 0.5],
            },
            AnchorLevel {
                grid_height: 2,
                grid_width: 2,
                scale: 0.6,
                aspect_ratios: vec![1.0],
            },
        ])
        .unwrap()
    }

    fn random_grid(k: usize, width: usize, rng: &mut ChaCha8Rng) -> PredictionGrid {
        let mut cls = Vec::with_capacity(k * width);
        for _ in 0..k {
            let raw: Vec<f64> = (0..width).map(|_| rng.random::<f64>() + 1e-3).collect();
            let s: f64 = raw.iter().sum();
            cls.extend(raw.iter().map(|v| v / s));
        }
        let loc = (0..k)
            .map(|_| std::array::from_fn(|_| rng.random_range(-1.0..1.0)))
            .collect();
        PredictionGrid::new(width, cls, loc).unwrap()
    }

    #[test]
    fn correspondence_is_an_involution_and_permutes_rows() {
        let boxes = toy_boxes();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = random_grid(boxes.len(), 4, &mut rng);
        let once = flip_grid_correspondence(&g, &boxes).unwrap();
        let twice = flip_grid_correspondence(&once, &boxes).unwrap();
        assert_eq!(twice, g);
        let mut a: Vec<Vec<u64>> = (0..g.len())
            .map(|k| g.cls_row(k).iter().map(|v| v.to_bits()).collect())
            .collect();
        let mut b: Vec<Vec<u64>> = (0..g.len())
            .map(|k| once.cls_row(k).iter().map(|v| v.to_bits()).collect())
            .collect();
        a.sort();
        b.sort();
        assert_eq!(a, b);
    }

    #[test]
    fn correspondence_negates_dcx() {
        let boxes = toy_boxes();
        let map = FlipMap::new(&boxes).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut g = random_grid(boxes.len(), 3, &mut rng);
        let k = boxes.flat_index(Location {
            level: 0,
            row: 1,
            col: 0,
            slot: 1,
        });
        g.loc_mut(k)[0] = 0.3;
        let out = map.apply(&g).unwrap();
        let mirrored = boxes.flat_index(Location {
            level: 0,
            row: 1,
            col: 3,
            slot: 1,
        });
        assert_eq!(map.partner(k), mirrored);
        assert_eq!(out.loc(mirrored)[0], -0.3);
        assert_eq!(out.loc(mirrored)[1..], g.loc(k)[1..]);
        assert_eq!(out.cls_row(mirrored), g.cls_row(k));
    }

    #[test]
    fn asymmetric_layout_is_rejected() {
        let levels = vec![LevelShape {
            grid_height: 1,
            grid_width: 2,
            boxes_per_cell: 1,
        }];
        let boxes = DefaultBoxSet::from_parts(
            levels,
            vec![CenterBox::new(0.2, 0.5, 0.2, 0.2), CenterBox::new(0.75, 0.5, 0.2, 0.2)],
        )
        .unwrap();
        assert!(matches!(FlipMap::new(&boxes), Err(Error::Config(_))));
    }

    #[test]
    fn pull_back_is_adjoint_of_apply() {
        let boxes = toy_boxes();
        let map = FlipMap::new(&boxes).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = random_grid(boxes.len(), 3, &mut rng);
        let h = random_grid(boxes.len(), 3, &mut rng);
        let mut grad = GridGrad::zeros_like(&h);
        grad.cls.copy_from_slice(h.cls_values());
        grad.loc.copy_from_slice(h.loc_values());
        // <apply(g), h> == <g, pull_back(h)>
        let applied = map.apply(&g).unwrap();
        let pulled = map.pull_back(&grad);
        let dot = |x: &PredictionGrid, y: &GridGrad| -> f64 {
            let c: f64 = x.cls_values().iter().zip(&y.cls).map(|(a, b)| a * b).sum();
            let l: f64 = x
                .loc_values()
                .iter()
                .zip(&y.loc)
                .map(|(a, b)| (0..4).map(|t| a[t] * b[t]).sum::<f64>())
                .sum();
            c + l
        };
        assert!((dot(&applied, &grad) - dot(&g, &pulled)).abs() < 1e-12);
    }

    #[test]
    fn lambda_moments_and_determinism() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let draws: Vec<f64> = (0..100_000).map(|_| sample_lambda(100.0, &mut rng).unwrap()).collect();
        let n = draws.len() as f64;
        let mean = draws.iter().sum::<f64>() / n;
        let var = draws.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let expected = 1.0 / (4.0 * 201.0);
        assert!((mean - 0.5).abs() <= 0.005);
        assert!((var - expected).abs() <= 0.1 * expected, "var {var}");
        let mut r1 = ChaCha8Rng::seed_from_u64(5);
        let mut r2 = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10 {
            assert_eq!(
                sample_lambda(1.0, &mut r1).unwrap(),
                sample_lambda(1.0, &mut r2).unwrap()
            );
        }
        assert!(sample_lambda(0.0, &mut r1).is_err());
        assert!(sample_lambda(-1.0, &mut r1).is_err());
    }

    #[test]
    fn half_rotation_examples() {
        assert_eq!(half_rotation(4), vec![2, 3, 0, 1]);
        assert_eq!(half_rotation(3), vec![2, 0, 1]);
        assert_eq!(half_rotation(2), vec![1, 0]);
    }

    #[test]
    fn batch_construction() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let imgs: Vec<Image> = (0..4)
            .map(|i| Image::from_vec(1, 1, 3, vec![i as f64 / 4.0, 0.1, 0.2]).unwrap())
            .collect();
        let opts = MixOptions {
            alpha: 100.0,
            shuffle: ShuffleKind::HalfRotation,
            lambda: None,
        };
        let batch = assemble_mix_batch(&imgs[..2], &imgs[2..], opts, &mut rng).unwrap();
        assert_eq!(batch.perm, vec![2, 3, 0, 1]);
        assert_eq!(batch.labeled_flags, vec![true, true, false, false]);
        for i in 0..4 {
            assert_eq!(batch.b[i], flip_image(&batch.a[batch.perm[i]]));
            assert_eq!(batch.m[i], mix_images(&batch.a[i], &batch.b[i], batch.lam).unwrap());
        }
        assert!(assemble_mix_batch(&imgs[..1], &[], opts, &mut rng).is_err());
    }

    #[test]
    fn random_cycle_is_a_derangement() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for n in 2..20 {
            let p = random_cycle(n, &mut rng);
            let mut seen = p.clone();
            seen.sort();
            assert_eq!(seen, (0..n).collect::<Vec<_>>());
            assert!(p.iter().enumerate().all(|(i, &j)| i != j));
        }
    }

    proptest! {
        #[test]
        fn mix_is_symmetric_under_swap(
            lam in 0.0f64..=1.0,
            a in prop::collection::vec(0.0f64..=1.0, 12),
            b in prop::collection::vec(0.0f64..=1.0, 12),
        ) {
            let ia = Image::from_vec(3, 2, 2, a).unwrap();
            let ib = Image::from_vec(3, 2, 2, b).unwrap();
            let m1 = mix_images(&ia, &ib, lam).unwrap();
            let m2 = mix_images(&ib, &ia, 1.0 - lam).unwrap();
            prop_assert_eq!(&m1, &m2);
            prop_assert!(m1.data.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }

        #[test]
        fn half_rotation_never_fixes_a_point(n in 2usize..64) {
            let p = half_rotation(n);
            prop_assert!(p.iter().enumerate().all(|(i, &j)| i != j));
        }
    }
}
