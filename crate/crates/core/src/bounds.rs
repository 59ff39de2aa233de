//! Axis-aligned boxes: dataset bounds, OPU input normalization and the
//! centroid search region.

use std::path::Path;

use ndarray::ArrayView2;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct BoundingBox {
    lo: Vec<f64>,
    hi: Vec<f64>,
}

impl BoundingBox {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self> {
        if lo.len() != hi.len() {
            return Err(Error::DimensionMismatch { expected: lo.len(), got: hi.len() });
        }
        if lo.is_empty() {
            return Err(Error::Empty("bounding box"));
        }
        for (j, (l, h)) in lo.iter().zip(&hi).enumerate() {
            if !(l.is_finite() && h.is_finite() && l < h) {
                return Err(Error::InvalidArgument(format!(
                    "coordinate {j}: need finite lo < hi, got [{l}, {h}]"
                )));
            }
        }
        Ok(Self { lo, hi })
    }

    /// Per-coordinate min/max of the rows of `points`. Degenerate
    /// (constant) coordinates are widened by 0.5 on either side so the
    /// box keeps a positive width.
    pub fn from_points(points: ArrayView2<'_, f64>) -> Result<Self> {
        if points.nrows() == 0 || points.ncols() == 0 {
            return Err(Error::Empty("points"));
        }
        let d = points.ncols();
        let mut lo = vec![f64::INFINITY; d];
        let mut hi = vec![f64::NEG_INFINITY; d];
        for row in points.rows() {
            for j in 0..d {
                lo[j] = lo[j].min(row[j]);
                hi[j] = hi[j].max(row[j]);
            }
        }
        for j in 0..d {
            if lo[j] == hi[j] {
                lo[j] -= 0.5;
                hi[j] += 0.5;
            }
        }
        Self::new(lo, hi)
    }

    /// Two headerless CSV rows: `lo` then `hi`.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
        for row in [&self.lo, &self.hi] {
            w.write_record(row.iter().map(|v| format!("{v:e}")))?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        let mut r = csv::ReaderBuilder::new().has_headers(false).trim(csv::Trim::All).from_path(path)?;
        let mut rows = Vec::new();
        for (i, rec) in r.records().enumerate() {
            let rec = rec?;
            let row = rec
                .iter()
                .map(|f| f.parse::<f64>().map_err(|_| Error::Parse { line: i + 1, msg: format!("bad number {f:?}") }))
                .collect::<Result<Vec<f64>>>()?;
            rows.push(row);
        }
        let [lo, hi]: [Vec<f64>; 2] =
            rows.try_into().map_err(|r: Vec<_>| Error::Format(format!("box file needs 2 rows, got {}", r.len())))?;
        Self::new(lo, hi)
    }

    pub fn unit(d: usize) -> Self {
        Self { lo: vec![0.0; d], hi: vec![1.0; d] }
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn lo(&self) -> &[f64] {
        &self.lo
    }

    pub fn hi(&self) -> &[f64] {
        &self.hi
    }

    pub fn width(&self, j: usize) -> f64 {
        self.hi[j] - self.lo[j]
    }

    pub fn diameter(&self) -> f64 {
        (0..self.dim()).map(|j| self.width(j).powi(2)).sum::<f64>().sqrt()
    }

    /// Grows every side by `frac` of its width in both directions.
    pub fn inflate(&self, frac: f64) -> Self {
        let (lo, hi) = (0..self.dim())
            .map(|j| {
                let pad = frac * self.width(j);
                (self.lo[j] - pad, self.hi[j] + pad)
            })
            .unzip();
        Self { lo, hi }
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.dim()
            && x.iter().zip(self.lo.iter().zip(&self.hi)).all(|(v, (l, h))| *v >= *l && *v <= *h)
    }

    pub fn project(&self, x: &mut [f64]) {
        for (v, (l, h)) in x.iter_mut().zip(self.lo.iter().zip(&self.hi)) {
            *v = v.clamp(*l, *h);
        }
    }

    /// Maps `x` affinely into `[0,1]^D`, clamping out-of-box coordinates.
    /// Returns how many coordinates had to be clamped.
    pub fn normalize_into(&self, x: &[f64], out: &mut [f64]) -> usize {
        let mut clamped = 0;
        for j in 0..self.dim() {
            let t = (x[j] - self.lo[j]) / self.width(j);
            if !(0.0..=1.0).contains(&t) {
                clamped += 1;
            }
            out[j] = t.clamp(0.0, 1.0);
        }
        clamped
    }

    pub fn denormalize(&self, u: &[f64]) -> Vec<f64> {
        (0..self.dim()).map(|j| self.lo[j] + u[j] * self.width(j)).collect()
    }
}
