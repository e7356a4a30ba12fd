use nalgebra::DMatrixView;

use super::FeatureMap;
use crate::error::{Error, Result};

/// Column-centered copy of a feature matrix with its Gram norm `‖XᵀX‖_F`,
/// reusable across many alignments against the same target.
#[derive(Debug, Clone)]
pub struct CenteredGram {
    rows: usize,
    cols: usize,
    centered: Vec<f64>,
    gram_norm: f64,
}

impl CenteredGram {
    pub fn new(f: &FeatureMap) -> Self {
        let (n, c) = (f.rows(), f.channels);
        let mut centered = f.data.clone();
        for j in 0..c {
            let mean = f.column(j).sum::<f64>() / n as f64;
            for v in centered.iter_mut().skip(j).step_by(c) {
                *v -= mean;
            }
        }
        let gram_norm = cross_norm_sq(&centered, c, &centered, c, n).sqrt();
        CenteredGram {
            rows: n,
            cols: c,
            centered,
            gram_norm,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }
}

/// `‖XᵀY‖²_F` with row-major `x` (n×cx) and `y` (n×cy).
fn cross_norm_sq(x: &[f64], cx: usize, y: &[f64], cy: usize, n: usize) -> f64 {
    // Row-major storage read column-major is the transpose.
    let xt = DMatrixView::from_slice(x, cx, n);
    let yt = DMatrixView::from_slice(y, cy, n);
    let m = xt * yt.transpose();
    m.iter().map(|v| v * v).sum()
}

/// Alignment of `a` against a prepared target.
pub fn lcka_with_target(a: &FeatureMap, target: &CenteredGram) -> Result<f64> {
    lcka_centered(&CenteredGram::new(a), target)
}

fn lcka_centered(x: &CenteredGram, y: &CenteredGram) -> Result<f64> {
    if x.rows != y.rows {
        return Err(Error::LocationMismatch(x.rows, y.rows));
    }
    if x.rows < 2 {
        return Err(Error::InvalidConfig("lcka needs at least two locations".into()));
    }
    let denom = x.gram_norm * y.gram_norm;
    if !(denom > 0.0) {
        return Ok(0.0);
    }
    let num = cross_norm_sq(&x.centered, x.cols, &y.centered, y.cols, x.rows);
    Ok((num / denom).clamp(0.0, 1.0))
}

/// Linear centered kernel alignment between two maps over the same
/// locations; 0 when either map is constant.
pub fn lcka(a: &FeatureMap, b: &FeatureMap) -> Result<f64> {
    if a.rows() != b.rows() {
        return Err(Error::LocationMismatch(a.rows(), b.rows()));
    }
    lcka_centered(&CenteredGram::new(a), &CenteredGram::new(b))
}
