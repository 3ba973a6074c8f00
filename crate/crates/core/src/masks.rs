//! Objectness masks and interpolation-type categorization.
//!
//! Masks are derived from predictions with hard argmax decisions, so they are
//! constants as far as differentiation is concerned.

use crate::detector::PredictionGrid;
use crate::error::{Error, Result};

/// `bits[k]` is set when the argmax class at `k` is a foreground class.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ObjectnessMask {
    pub bits: Vec<bool>,
}

impl ObjectnessMask {
    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }
}

/// Disjoint per-location categories of a mixed pair.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TypeMasks {
    /// Both sources foreground.
    pub type1: Vec<bool>,
    /// Only the first source (A) foreground.
    pub type2_a: Vec<bool>,
    /// Only the second source (B) foreground.
    pub type2_b: Vec<bool>,
}

impl TypeMasks {
    pub fn counts(&self) -> (usize, usize, usize) {
        let c = |v: &[bool]| v.iter().filter(|&&b| b).count();
        (c(&self.type1), c(&self.type2_a), c(&self.type2_b))
    }
}

/// Background elimination: a location counts as an object when some
/// foreground class strictly beats the background probability.
pub fn objectness_mask(grid: &PredictionGrid) -> ObjectnessMask {
    let bits = (0..grid.len())
        .map(|k| {
            let row = grid.cls_row(k);
            let best_fg = row[1..].iter().copied().fold(f64::NEG_INFINITY, f64::max);
            best_fg > row[0]
        })
        .collect();
    ObjectnessMask { bits }
}

pub fn type_masks(ma: &ObjectnessMask, mb: &ObjectnessMask) -> Result<TypeMasks> {
    if ma.len() != mb.len() {
        return Err(Error::shape(format!(
            "objectness masks of length {} and {}",
            ma.len(),
            mb.len()
        )));
    }
    let zip =
        |f: fn(bool, bool) -> bool| -> Vec<bool> { ma.bits.iter().zip(&mb.bits).map(|(&a, &b)| f(a, b)).collect() };
    Ok(TypeMasks {
        type1: zip(|a, b| a && b),
        type2_a: zip(|a, b| a && !b),
        type2_b: zip(|a, b| !a && b),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(rows: &[&[f64]]) -> PredictionGrid {
        let w = rows[0].len();
        PredictionGrid::new(
            w,
            rows.iter().flat_map(|r| r.iter().copied()).collect(),
            vec![[0.0; 4]; rows.len()],
        )
        .unwrap()
    }

    #[test]
    fn argmax_rule() {
        let g = grid(&[&[0.6, 0.3, 0.1], &[0.2, 0.7, 0.1], &[0.5, 0.5, 0.0]]);
        assert_eq!(objectness_mask(&g).bits, vec![false, true, false]);
    }

    #[test]
    fn truth_table() {
        let ma = ObjectnessMask {
            bits: vec![true, true, false, false],
        };
        let mb = ObjectnessMask {
            bits: vec![true, false, true, false],
        };
        let t = type_masks(&ma, &mb).unwrap();
        assert_eq!(t.type1, vec![true, false, false, false]);
        assert_eq!(t.type2_a, vec![false, true, false, false]);
        assert_eq!(t.type2_b, vec![false, false, true, false]);
        assert_eq!(t.counts(), (1, 1, 1));
    }

    #[test]
    fn swap_symmetry() {
        let ma = ObjectnessMask {
            bits: vec![true, false, true, false, true],
        };
        let mb = ObjectnessMask {
            bits: vec![false, false, true, true, true],
        };
        let ab = type_masks(&ma, &mb).unwrap();
        let ba = type_masks(&mb, &ma).unwrap();
        assert_eq!(ab.type1, ba.type1);
        assert_eq!(ab.type2_a, ba.type2_b);
        assert_eq!(ab.type2_b, ba.type2_a);
    }

    #[test]
    fn length_mismatch() {
        let ma = ObjectnessMask { bits: vec![true] };
        let mb = ObjectnessMask {
            bits: vec![true, false],
        };
        assert!(type_masks(&ma, &mb).is_err());
    }
}
