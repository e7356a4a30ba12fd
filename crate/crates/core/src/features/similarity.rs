use serde::Serialize;

use super::FeatureMap;
use crate::error::{Error, Result};

/// Cosine similarities between every source row and every target row.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimilarityMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl SimilarityMatrix {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }
}

fn normalized_rows(f: &FeatureMap) -> Vec<f64> {
    let mut out = f.data.clone();
    for row in out.chunks_mut(f.channels) {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            row.iter_mut().for_each(|v| *v /= norm);
        }
    }
    out
}

pub fn similarity_matrix(src: &FeatureMap, tgt: &FeatureMap) -> Result<SimilarityMatrix> {
    if src.channels != tgt.channels {
        return Err(Error::ChannelMismatch(src.channels, tgt.channels));
    }
    let c = src.channels;
    let a = normalized_rows(src);
    let b = normalized_rows(tgt);
    let (rows, cols) = (src.rows(), tgt.rows());
    let mut data = Vec::with_capacity(rows * cols);
    for ra in a.chunks(c) {
        for rb in b.chunks(c) {
            data.push(ra.iter().zip(rb).map(|(x, y)| x * y).sum::<f64>().clamp(-1.0, 1.0));
        }
    }
    Ok(SimilarityMatrix { rows, cols, data })
}

/// Mean cosine between co-located rows, i.e. the similarity-matrix diagonal,
/// without building the full matrix. A zero row against a nonzero one
/// contributes 0; two zero rows count as identical.
pub fn mean_diagonal_cosine(src: &FeatureMap, tgt: &FeatureMap) -> Result<f64> {
    if src.channels != tgt.channels {
        return Err(Error::ChannelMismatch(src.channels, tgt.channels));
    }
    if src.rows() != tgt.rows() {
        return Err(Error::LocationMismatch(src.rows(), tgt.rows()));
    }
    let c = src.channels;
    let mut total = 0.0;
    for (ra, rb) in src.data.chunks(c).zip(tgt.data.chunks(c)) {
        let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
        for (x, y) in ra.iter().zip(rb) {
            ab += x * y;
            aa += x * x;
            bb += y * y;
        }
        if aa > 0.0 && bb > 0.0 {
            total += ab / (aa.sqrt() * bb.sqrt());
        } else if aa == 0.0 && bb == 0.0 {
            total += 1.0;
        }
    }
    Ok(total / src.rows() as f64)
}
