use crate::error::{Error, Result};

/// Detector output for one image: a probability row over `C + 1` classes
/// (column 0 is background) and four offsets `[Δcx, Δcy, Δw, Δh]` per location.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionGrid {
    width: usize,
    cls: Vec<f64>,
    loc: Vec<[f64; 4]>,
}

impl PredictionGrid {
    /// `cls` is row-major `K × cls_width`. Rows are not renormalized.
    pub fn new(cls_width: usize, cls: Vec<f64>, loc: Vec<[f64; 4]>) -> Result<Self> {
        if cls_width < 2 {
            return Err(Error::shape("class rows need background plus at least one class"));
        }
        if cls.len() != loc.len() * cls_width {
            return Err(Error::shape(format!(
                "{} class values for {} locations of width {}",
                cls.len(),
                loc.len(),
                cls_width
            )));
        }
        Ok(Self {
            width: cls_width,
            cls,
            loc,
        })
    }

    /// Number of locations `K`.
    pub fn len(&self) -> usize {
        self.loc.len()
    }

    pub fn is_empty(&self) -> bool {
        self.loc.is_empty()
    }

    /// `C + 1`.
    pub fn cls_width(&self) -> usize {
        self.width
    }

    pub fn cls_row(&self, k: usize) -> &[f64] {
        &self.cls[k * self.width..(k + 1) * self.width]
    }

    pub fn cls_row_mut(&mut self, k: usize) -> &mut [f64] {
        &mut self.cls[k * self.width..(k + 1) * self.width]
    }

    pub fn loc(&self, k: usize) -> &[f64; 4] {
        &self.loc[k]
    }

    pub fn loc_mut(&mut self, k: usize) -> &mut [f64; 4] {
        &mut self.loc[k]
    }

    pub fn cls_values(&self) -> &[f64] {
        &self.cls
    }

    pub fn loc_values(&self) -> &[[f64; 4]] {
        &self.loc
    }

    pub fn same_shape(&self, other: &PredictionGrid) -> bool {
        self.width == other.width && self.len() == other.len()
    }
}

/// Gradient of a scalar objective with respect to one [`PredictionGrid`].
///
/// Class gradients may be expressed against the probabilities (`cls`) or
/// directly against the pre-softmax logits (`logits`); the model sums both
/// routes during backpropagation.
#[derive(Debug, Clone, PartialEq)]
pub struct GridGrad {
    pub width: usize,
    pub cls: Vec<f64>,
    pub logits: Vec<f64>,
    pub loc: Vec<[f64; 4]>,
}

impl GridGrad {
    pub fn zeros_like(grid: &PredictionGrid) -> Self {
        Self {
            width: grid.width,
            cls: vec![0.0; grid.cls.len()],
            logits: vec![0.0; grid.cls.len()],
            loc: vec![[0.0; 4]; grid.len()],
        }
    }

    pub fn len(&self) -> usize {
        self.loc.len()
    }

    pub fn is_empty(&self) -> bool {
        self.loc.is_empty()
    }

    pub fn cls_row_mut(&mut self, k: usize) -> &mut [f64] {
        &mut self.cls[k * self.width..(k + 1) * self.width]
    }

    pub fn logit_row_mut(&mut self, k: usize) -> &mut [f64] {
        &mut self.logits[k * self.width..(k + 1) * self.width]
    }

    /// `self += other`.
    pub fn accumulate(&mut self, other: &GridGrad) {
        for (a, b) in self.cls.iter_mut().zip(&other.cls) {
            *a += b;
        }
        for (a, b) in self.logits.iter_mut().zip(&other.logits) {
            *a += b;
        }
        for (a, b) in self.loc.iter_mut().zip(&other.loc) {
            for j in 0..4 {
                a[j] += b[j];
            }
        }
    }

    pub fn is_zero(&self) -> bool {
        self.cls.iter().chain(&self.logits).all(|&v| v == 0.0) && self.loc.iter().all(|l| l.iter().all(|&v| v == 0.0))
    }
}

/// Numerically stable softmax of `logits` into `out`.
pub fn softmax_into(logits: &[f64], out: &mut [f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &z) in out.iter_mut().zip(logits) {
        *o = (z - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}
