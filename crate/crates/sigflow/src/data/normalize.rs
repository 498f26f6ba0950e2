//! Channel-wise z-score normalization, fit on the training split only.

use super::{Split, WindowDataset};
use crate::error::{Error, Result};
#[cfg(test)]
use crate::tensor::Tensor;

/// Per-channel normalization statistics (population 1/N convention).
#[derive(Debug, Clone)]
pub struct NormStats {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
    pub source_split: Split,
    /// Channels whose std was clamped to eps.
    pub clamped: Vec<usize>,
}

pub fn zscore_fit(train: &WindowDataset, eps: f32) -> Result<NormStats> {
    if train.is_empty() {
        return Err(Error::InvalidArgument("zscore_fit on empty dataset".into()));
    }
    if train.split != Split::Train {
        return Err(Error::InvalidArgument(
            "normalization statistics must come from a train split".into(),
        ));
    }
    let (n, c, l) = (train.len(), train.channels(), train.window_len());
    let count = (n * l) as f64;
    let mut mean = vec![0f64; c];
    let mut sq = vec![0f64; c];
    for i in 0..n {
        let w = train.window(i);
        for ch in 0..c {
            for &v in &w[ch * l..(ch + 1) * l] {
                mean[ch] += v as f64;
                sq[ch] += (v as f64) * (v as f64);
            }
        }
    }
    let mut clamped = Vec::new();
    let mut std = vec![0f32; c];
    let mut mean32 = vec![0f32; c];
    for ch in 0..c {
        let m = mean[ch] / count;
        let var = (sq[ch] / count - m * m).max(0.0);
        let mut s = var.sqrt() as f32;
        if s < eps {
            s = eps;
            clamped.push(ch);
        }
        mean32[ch] = m as f32;
        std[ch] = s;
    }
    Ok(NormStats {
        mean: mean32,
        std,
        source_split: train.split,
        clamped,
    })
}

pub fn zscore_apply(ds: &WindowDataset, stats: &NormStats) -> Result<WindowDataset> {
    let (n, c, l) = (ds.len(), ds.channels(), ds.window_len());
    if stats.mean.len() != c {
        return Err(Error::ShapeMismatch(format!(
            "stats for {} channels applied to {}",
            stats.mean.len(),
            c
        )));
    }
    let mut out = ds.clone();
    let data = out.windows.data_mut();
    for i in 0..n {
        for ch in 0..c {
            let m = stats.mean[ch];
            let inv = 1.0 / stats.std[ch];
            for v in &mut data[(i * c + ch) * l..(i * c + ch + 1) * l] {
                *v = (*v - m) * inv;
            }
        }
    }
    Ok(out)
}

/// Inverse affine of `zscore_apply`.
pub fn zscore_invert(ds: &WindowDataset, stats: &NormStats) -> Result<WindowDataset> {
    let (n, c, l) = (ds.len(), ds.channels(), ds.window_len());
    if stats.mean.len() != c {
        return Err(Error::ShapeMismatch("zscore_invert channel count".into()));
    }
    let mut out = ds.clone();
    let data = out.windows.data_mut();
    for i in 0..n {
        for ch in 0..c {
            let m = stats.mean[ch];
            let s = stats.std[ch];
            for v in &mut data[(i * c + ch) * l..(i * c + ch + 1) * l] {
                *v = *v * s + m;
            }
        }
    }
    Ok(out)
}
