//! Session-to-window preprocessing, normalization, the synthetic corpus,
//! classical augmentation baselines, and the dataset container format.

mod augment;
mod io;
mod normalize;
mod synth;
mod window;

pub use augment::{augment_baseline, AugmentMethod, AugmentParams};
pub use io::{dataset_load, dataset_save, session_from_csv};
pub use normalize::{zscore_apply, zscore_fit, zscore_invert, NormStats};
pub use synth::{synth_generate, ClassProfile, SynthConfig};
pub use window::{drop_rest_and_split, segment_windows};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

/// Which split a dataset belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
    Synthetic,
}

impl Split {
    pub fn tag(self) -> u8 {
        match self {
            Split::Train => 0,
            Split::Test => 1,
            Split::Synthetic => 2,
        }
    }

    pub fn from_tag(t: u8) -> Result<Self> {
        match t {
            0 => Ok(Split::Train),
            1 => Ok(Split::Test),
            2 => Ok(Split::Synthetic),
            _ => Err(Error::InvalidArgument(format!("unknown split tag {}", t))),
        }
    }
}

/// A continuous multichannel recording with per-sample labels and trial ids.
#[derive(Debug, Clone)]
pub struct RecordingSession {
    pub subject_id: String,
    pub sampling_rate: f64,
    /// `[C, T]` signal matrix.
    pub signal: Tensor<f32>,
    /// Per-sample gesture id; 0 = rest.
    pub labels: Vec<u16>,
    /// Per-sample trial id.
    pub trials: Vec<u16>,
}

impl RecordingSession {
    pub fn channels(&self) -> usize {
        self.signal.shape()[0]
    }

    pub fn samples(&self) -> usize {
        self.signal.shape()[1]
    }

    pub fn validate(&self) -> Result<()> {
        if self.sampling_rate <= 0.0 {
            return Err(Error::InvalidArgument("sampling_rate must be > 0".into()));
        }
        let t = self.samples();
        if self.labels.len() != t || self.trials.len() != t {
            return Err(Error::ShapeMismatch(format!(
                "session arrays disagree: T={} labels={} trials={}",
                t,
                self.labels.len(),
                self.trials.len()
            )));
        }
        Ok(())
    }
}

/// Labeled fixed-length windows with provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowDataset {
    /// `[N, C, L]`.
    pub windows: Tensor<f32>,
    /// Gesture ids; dense in `[1..K]` after rest removal.
    pub labels: Vec<u16>,
    pub subject_id: String,
    pub split: Split,
    /// Trial id per window; 0 for synthetic windows.
    pub trial_ids: Vec<u16>,
    /// Number of gesture classes K.
    pub num_classes: u16,
}

impl WindowDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.windows.shape()[1]
    }

    pub fn window_len(&self) -> usize {
        self.windows.shape()[2]
    }

    pub fn empty(c: usize, l: usize, k: u16, subject: &str, split: Split) -> Self {
        WindowDataset {
            windows: Tensor::zeros(&[0, c, l]),
            labels: vec![],
            subject_id: subject.to_string(),
            split,
            trial_ids: vec![],
            num_classes: k,
        }
    }

    /// Window `i` as a flat `[C*L]` slice.
    pub fn window(&self, i: usize) -> &[f32] {
        let cl = self.channels() * self.window_len();
        &self.windows.data()[i * cl..(i + 1) * cl]
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.windows.shape()[0];
        if n != self.labels.len() || n != self.trial_ids.len() {
            return Err(Error::ShapeMismatch(format!(
                "dataset arrays disagree: N={} labels={} trials={}",
                n,
                self.labels.len(),
                self.trial_ids.len()
            )));
        }
        if !self.windows.all_finite() {
            return Err(Error::Numerical("non-finite window values".into()));
        }
        if self.split == Split::Synthetic && self.trial_ids.iter().any(|&t| t != 0) {
            return Err(Error::InvalidArgument(
                "synthetic windows must not carry real trial ids".into(),
            ));
        }
        Ok(())
    }

    /// Select a subset of windows by index, preserving order.
    pub fn select(&self, idx: &[usize]) -> WindowDataset {
        let (c, l) = (self.channels(), self.window_len());
        let mut data = Vec::with_capacity(idx.len() * c * l);
        let mut labels = Vec::with_capacity(idx.len());
        let mut trials = Vec::with_capacity(idx.len());
        for &i in idx {
            data.extend_from_slice(self.window(i));
            labels.push(self.labels[i]);
            trials.push(self.trial_ids[i]);
        }
        WindowDataset {
            windows: Tensor::from_vec(vec![idx.len(), c, l], data).unwrap(),
            labels,
            subject_id: self.subject_id.clone(),
            split: self.split,
            trial_ids: trials,
            num_classes: self.num_classes,
        }
    }

    /// Append another dataset's windows (shapes and K must agree).
    pub fn concat(&self, other: &WindowDataset) -> Result<WindowDataset> {
        if self.channels() != other.channels() || self.window_len() != other.window_len() {
            return Err(Error::ShapeMismatch("concat window shapes differ".into()));
        }
        let mut data = self.windows.data().to_vec();
        data.extend_from_slice(other.windows.data());
        let mut labels = self.labels.clone();
        labels.extend_from_slice(&other.labels);
        let mut trials = self.trial_ids.clone();
        trials.extend_from_slice(&other.trial_ids);
        Ok(WindowDataset {
            windows: Tensor::from_vec(
                vec![self.len() + other.len(), self.channels(), self.window_len()],
                data,
            )?,
            labels,
            subject_id: self.subject_id.clone(),
            split: self.split,
            trial_ids: trials,
            num_classes: self.num_classes.max(other.num_classes),
        })
    }
}
