//! Sliding-window segmentation and trial-based splitting.

use super::{RecordingSession, Split, WindowDataset};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use std::collections::{BTreeSet, HashMap};

fn ms_to_samples(ms: f64, fs: f64, what: &str) -> Result<usize> {
    let exact = ms * fs / 1000.0;
    let rounded = exact.round();
    if (exact - rounded).abs() > 1e-9 || rounded < 1.0 {
        return Err(Error::InvalidArgument(format!(
            "{} of {} ms is not an integer sample count >= 1 at {} Hz",
            what, ms, fs
        )));
    }
    Ok(rounded as usize)
}

/// Majority vote with ties resolved toward the value occurring earliest in
/// the window.
fn majority(values: &[u16]) -> u16 {
    let mut counts: HashMap<u16, (usize, usize)> = HashMap::new(); // value -> (count, first index)
    for (i, &v) in values.iter().enumerate() {
        let e = counts.entry(v).or_insert((0, i));
        e.0 += 1;
    }
    let mut best = (0usize, usize::MAX, 0u16);
    for (&v, &(count, first)) in &counts {
        if count > best.0 || (count == best.0 && first < best.1) {
            best = (count, first, v);
        }
    }
    best.2
}

/// Cut a session into fixed-length windows at a fixed stride.
///
/// Window label and trial id are the majority vote over the window's
/// per-sample annotations. A session shorter than one window yields an
/// empty dataset.
pub fn segment_windows(
    session: &RecordingSession,
    win_ms: f64,
    stride_ms: f64,
) -> Result<WindowDataset> {
    session.validate()?;
    let l = ms_to_samples(win_ms, session.sampling_rate, "window")?;
    let stride = ms_to_samples(stride_ms, session.sampling_rate, "stride")?;
    let c = session.channels();
    let t = session.samples();
    let max_label = session.labels.iter().copied().max().unwrap_or(0);
    if t < l {
        return Ok(WindowDataset::empty(c, l, max_label, &session.subject_id, Split::Train));
    }
    let n = (t - l) / stride + 1;
    let mut data = Vec::with_capacity(n * c * l);
    let mut labels = Vec::with_capacity(n);
    let mut trials = Vec::with_capacity(n);
    for w in 0..n {
        let start = w * stride;
        for ch in 0..c {
            let row = &session.signal.data()[ch * t + start..ch * t + start + l];
            data.extend_from_slice(row);
        }
        labels.push(majority(&session.labels[start..start + l]));
        trials.push(majority(&session.trials[start..start + l]));
    }
    Ok(WindowDataset {
        windows: Tensor::from_vec(vec![n, c, l], data)?,
        labels,
        subject_id: session.subject_id.clone(),
        split: Split::Train,
        trial_ids: trials,
        num_classes: max_label,
    })
}

/// Remove rest windows, route by trial id, and re-index labels densely to
/// `[1..K]`. Returns `(train, test, dropped)` where `dropped` counts windows
/// whose trial id was in neither set.
pub fn drop_rest_and_split(
    dataset: &WindowDataset,
    train_trials: &BTreeSet<u16>,
    test_trials: &BTreeSet<u16>,
) -> Result<(WindowDataset, WindowDataset, usize)> {
    if train_trials.intersection(test_trials).next().is_some() {
        return Err(Error::InvalidArgument(
            "train and test trial sets overlap".into(),
        ));
    }
    let kept: Vec<usize> = (0..dataset.len())
        .filter(|&i| dataset.labels[i] != 0)
        .collect();
    let mut distinct: BTreeSet<u16> = kept.iter().map(|&i| dataset.labels[i]).collect();
    let remap: HashMap<u16, u16> = distinct
        .iter()
        .enumerate()
        .map(|(j, &v)| (v, (j + 1) as u16))
        .collect();
    let k = distinct.len() as u16;
    distinct.clear();

    let mut train_idx = Vec::new();
    let mut test_idx = Vec::new();
    let mut dropped = 0usize;
    for &i in &kept {
        let trial = dataset.trial_ids[i];
        if train_trials.contains(&trial) {
            train_idx.push(i);
        } else if test_trials.contains(&trial) {
            test_idx.push(i);
        } else {
            dropped += 1;
        }
    }
    let relabel = |mut ds: WindowDataset, split: Split| {
        for lab in &mut ds.labels {
            *lab = remap[lab];
        }
        ds.split = split;
        ds.num_classes = k;
        ds
    };
    let train = relabel(dataset.select(&train_idx), Split::Train);
    let test = relabel(dataset.select(&test_idx), Split::Test);
    Ok((train, test, dropped))
}
