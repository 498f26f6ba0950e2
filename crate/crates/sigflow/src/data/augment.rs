//! Classical augmentation baselines: replicate, jitter+scale, mixup.

use super::WindowDataset;
#[cfg(test)]
use super::Split;
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;
use rand::Rng;
use rand_distr::{Beta, Distribution, Normal};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentMethod {
    Replicate,
    JitterScale,
    Mixup,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AugmentParams {
    /// Std of the per-window multiplicative scale (scale ~ N(1, sigma_scale^2)).
    pub sigma_scale: f32,
    /// Std of the per-sample additive noise.
    pub sigma_jitter: f32,
    /// Beta(alpha, alpha) concentration for mixup.
    pub alpha: f64,
}

impl Default for AugmentParams {
    fn default() -> Self {
        AugmentParams {
            sigma_scale: 0.1,
            sigma_jitter: 0.05,
            alpha: 0.2,
        }
    }
}

/// Append N augmented windows to the N originals. Mixup emits the hard label
/// of the dominant component (ties keep the first component's label).
pub fn augment_baseline(
    ds: &WindowDataset,
    method: AugmentMethod,
    params: &AugmentParams,
    seed: u64,
) -> Result<WindowDataset> {
    if ds.is_empty() {
        return Err(Error::InvalidArgument("augment on empty dataset".into()));
    }
    let n = ds.len();
    let cl = ds.channels() * ds.window_len();
    let mut data = ds.windows.data().to_vec();
    let mut labels = ds.labels.clone();
    let mut trials = ds.trial_ids.clone();
    match method {
        AugmentMethod::Replicate => {
            data.extend_from_within(..);
            labels.extend_from_within(..);
            trials.extend_from_within(..);
        }
        AugmentMethod::JitterScale => {
            let scale_dist = Normal::new(1.0f32, params.sigma_scale)
                .map_err(|e| Error::InvalidArgument(format!("sigma_scale: {}", e)))?;
            let jitter_dist = Normal::new(0.0f32, params.sigma_jitter)
                .map_err(|e| Error::InvalidArgument(format!("sigma_jitter: {}", e)))?;
            for i in 0..n {
                let mut r = rng::stream(seed, "augment/jitter_scale", i as u64);
                let s = scale_dist.sample(&mut r);
                for &v in ds.window(i) {
                    data.push(s * v + jitter_dist.sample(&mut r));
                }
                labels.push(ds.labels[i]);
                trials.push(ds.trial_ids[i]);
            }
        }
        AugmentMethod::Mixup => {
            if n < 2 {
                return Err(Error::InvalidArgument(
                    "mixup needs at least two windows".into(),
                ));
            }
            if params.alpha <= 0.0 {
                return Err(Error::InvalidArgument("mixup alpha must be > 0".into()));
            }
            let beta = Beta::new(params.alpha, params.alpha)
                .map_err(|e| Error::InvalidArgument(format!("alpha: {}", e)))?;
            for i in 0..n {
                let mut r = rng::stream(seed, "augment/mixup", i as u64);
                let lambda = beta.sample(&mut r) as f32;
                let mut j = r.gen_range(0..n - 1);
                if j >= i {
                    j += 1;
                }
                let (wi, wj) = (ds.window(i), ds.window(j));
                for e in 0..cl {
                    data.push(lambda * wi[e] + (1.0 - lambda) * wj[e]);
                }
                labels.push(if lambda >= 0.5 { ds.labels[i] } else { ds.labels[j] });
                trials.push(if lambda >= 0.5 {
                    ds.trial_ids[i]
                } else {
                    ds.trial_ids[j]
                });
            }
        }
    }
    let out = WindowDataset {
        windows: Tensor::from_vec(vec![2 * n, ds.channels(), ds.window_len()], data)?,
        labels,
        subject_id: ds.subject_id.clone(),
        split: ds.split,
        trial_ids: trials,
        num_classes: ds.num_classes,
    };
    out.validate()?;
    Ok(out)
}
