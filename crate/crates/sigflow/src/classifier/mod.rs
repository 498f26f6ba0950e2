//! Compact 1D conv classifier used both as the evaluation feature extractor
//! and as the downstream model in train-on-synthetic protocols.

use crate::data::{Split, WindowDataset};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{adam_step, AdamConfig, OptimState, Param, Tape, Tensor, Var};
use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Purpose {
    FeatureExtractor,
    Downstream,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassifierConfig {
    pub channels: usize,
    pub window_len: usize,
    pub num_classes: u16,
    pub width: usize,
    /// Penultimate feature dimension.
    pub feature_dim: usize,
    pub groups: usize,
    pub purpose: Purpose,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub smoothing: f64,
    pub warmup_epochs: usize,
    pub seed: u64,
}

impl ClassifierConfig {
    /// Defaults per purpose: the extractor trains 75 epochs with smoothing
    /// 0.05 and a 5-epoch linear warmup; the downstream model trains 100
    /// epochs at lr 1e-3 with decoupled weight decay 3e-4, batch 256.
    pub fn for_purpose(purpose: Purpose) -> Self {
        match purpose {
            Purpose::FeatureExtractor => ClassifierConfig {
                channels: 4,
                window_len: 400,
                num_classes: 6,
                width: 8,
                feature_dim: 256,
                groups: 4,
                purpose,
                epochs: 75,
                batch_size: 128,
                lr: 1e-3,
                weight_decay: 0.0,
                smoothing: 0.05,
                warmup_epochs: 5,
                seed: 0,
            },
            Purpose::Downstream => ClassifierConfig {
                channels: 4,
                window_len: 400,
                num_classes: 6,
                width: 8,
                feature_dim: 256,
                groups: 4,
                purpose,
                epochs: 100,
                batch_size: 256,
                lr: 1e-3,
                weight_decay: 3e-4,
                smoothing: 0.0,
                warmup_epochs: 0,
                seed: 0,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.window_len == 0 || self.num_classes == 0 {
            return Err(Error::Config("classifier dimensions must be positive".into()));
        }
        if self.width == 0 || self.feature_dim == 0 || self.groups == 0 {
            return Err(Error::Config("classifier widths must be positive".into()));
        }
        if self.width % self.groups != 0 {
            return Err(Error::Config(format!(
                "width {} not divisible by {} norm groups",
                self.width, self.groups
            )));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.smoothing) {
            return Err(Error::Config("smoothing must be in [0,1)".into()));
        }
        Ok(())
    }

    /// Per-epoch learning rate: linear warmup, then cosine decay.
    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        if epoch < self.warmup_epochs {
            return self.lr * (epoch + 1) as f64 / self.warmup_epochs as f64;
        }
        let span = (self.epochs - self.warmup_epochs).max(1) as f64;
        let progress = (epoch - self.warmup_epochs) as f64 / span;
        self.lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

/// What data a trained classifier has seen, by window provenance.
/// Synthetic windows are identified by their zero trial id.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Provenance {
    pub real_train_windows: usize,
    pub real_test_windows: usize,
    pub synthetic_windows: usize,
    /// FNV-1a hash over the trained parameters.
    pub content_hash: u64,
}

fn count_provenance(ds: &WindowDataset) -> (usize, usize, usize) {
    let mut real_train = 0;
    let mut real_test = 0;
    let mut synthetic = 0;
    for i in 0..ds.len() {
        if ds.trial_ids[i] == 0 {
            synthetic += 1;
        } else if ds.split == Split::Test {
            real_test += 1;
        } else {
            real_train += 1;
        }
    }
    (real_train, real_test, synthetic)
}

struct Conv {
    w: Param<f32>,
    b: Param<f32>,
    stride: usize,
    pad: usize,
}

struct Linear {
    w: Param<f32>,
    b: Param<f32>,
}

pub struct Classifier {
    pub cfg: ClassifierConfig,
    conv1: Conv,
    conv2: Conv,
    conv3: Conv,
    gn: Vec<(Param<f32>, Param<f32>)>,
    fc1: Linear,
    fc2: Linear,
    pub provenance: Provenance,
    pub train_loss: Vec<f32>,
}

fn new_conv(name: &str, ci: usize, co: usize, k: usize, stride: usize, r: &mut impl rand::Rng) -> Conv {
    let std = (2.0 / (ci * k) as f64).sqrt();
    let d = Normal::new(0.0, std).unwrap();
    Conv {
        w: Param::new(
            format!("{}.w", name),
            Tensor::from_vec(vec![co, ci, k], (0..co * ci * k).map(|_| d.sample(r) as f32).collect())
                .unwrap(),
        ),
        b: Param::new(format!("{}.b", name), Tensor::zeros(&[co])),
        stride,
        pad: k / 2,
    }
}

fn new_linear(name: &str, din: usize, dout: usize, r: &mut impl rand::Rng) -> Linear {
    let std = (1.0 / din as f64).sqrt();
    let d = Normal::new(0.0, std).unwrap();
    Linear {
        w: Param::new(
            format!("{}.w", name),
            Tensor::from_vec(vec![din, dout], (0..din * dout).map(|_| d.sample(r) as f32).collect())
                .unwrap(),
        ),
        b: Param::new(format!("{}.b", name), Tensor::zeros(&[dout])),
    }
}

impl Classifier {
    fn build(cfg: &ClassifierConfig) -> Result<Self> {
        cfg.validate()?;
        let mut r = rng::stream(cfg.seed, "classifier/init", 0);
        let w = cfg.width;
        let conv1 = new_conv("c1", cfg.channels, w, 5, 2, &mut r);
        let conv2 = new_conv("c2", w, 2 * w, 3, 2, &mut r);
        let conv3 = new_conv("c3", 2 * w, 2 * w, 3, 2, &mut r);
        let gn = vec![
            (
                Param::new("gn1.gamma", Tensor::full(&[w], 1.0)),
                Param::new("gn1.beta", Tensor::zeros(&[w])),
            ),
            (
                Param::new("gn2.gamma", Tensor::full(&[2 * w], 1.0)),
                Param::new("gn2.beta", Tensor::zeros(&[2 * w])),
            ),
            (
                Param::new("gn3.gamma", Tensor::full(&[2 * w], 1.0)),
                Param::new("gn3.beta", Tensor::zeros(&[2 * w])),
            ),
        ];
        let fc1 = new_linear("fc1", 2 * w, cfg.feature_dim, &mut r);
        let fc2 = new_linear("fc2", cfg.feature_dim, cfg.num_classes as usize, &mut r);
        Ok(Classifier {
            cfg: cfg.clone(),
            conv1,
            conv2,
            conv3,
            gn,
            fc1,
            fc2,
            provenance: Provenance {
                real_train_windows: 0,
                real_test_windows: 0,
                synthetic_windows: 0,
                content_hash: 0,
            },
            train_loss: Vec::new(),
        })
    }

    fn params(&self) -> Vec<&Param<f32>> {
        let mut out = vec![
            &self.conv1.w,
            &self.conv1.b,
            &self.conv2.w,
            &self.conv2.b,
            &self.conv3.w,
            &self.conv3.b,
        ];
        for (g, b) in &self.gn {
            out.push(g);
            out.push(b);
        }
        out.extend([&self.fc1.w, &self.fc1.b, &self.fc2.w, &self.fc2.b]);
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Param<f32>> {
        let mut out = vec![
            &mut self.conv1.w,
            &mut self.conv1.b,
            &mut self.conv2.w,
            &mut self.conv2.b,
            &mut self.conv3.w,
            &mut self.conv3.b,
        ];
        for (g, b) in &mut self.gn {
            out.push(g);
            out.push(b);
        }
        out.extend([
            &mut self.fc1.w,
            &mut self.fc1.b,
            &mut self.fc2.w,
            &mut self.fc2.b,
        ]);
        out
    }

    /// Returns (penultimate features, logits).
    fn forward(&self, tape: &mut Tape<f32>, x: Var) -> Result<(Var, Var)> {
        let shape = tape.value(x).shape().to_vec();
        if shape.len() != 3 || shape[1] != self.cfg.channels || shape[2] != self.cfg.window_len {
            return Err(Error::ShapeMismatch(format!(
                "classifier input {:?}, expected [N, {}, {}]",
                shape, self.cfg.channels, self.cfg.window_len
            )));
        }
        let g = self.cfg.groups;
        let mut h = x;
        for (i, conv) in [&self.conv1, &self.conv2, &self.conv3].into_iter().enumerate() {
            let wv = tape.param(&conv.w);
            let bv = tape.param(&conv.b);
            h = tape.conv1d(h, wv, bv, conv.stride, conv.pad)?;
            let (gamma, beta) = &self.gn[i];
            let gv = tape.param(gamma);
            let betav = tape.param(beta);
            h = tape.group_norm(h, g, gv, betav, 1e-5)?;
            h = tape.silu(h);
        }
        let pooled = tape.mean_time(h)?;
        let w1 = tape.param(&self.fc1.w);
        let b1 = tape.param(&self.fc1.b);
        let pre = tape.linear(pooled, w1, b1)?;
        let feat = tape.silu(pre);
        let w2 = tape.param(&self.fc2.w);
        let b2 = tape.param(&self.fc2.b);
        let logits = tape.linear(feat, w2, b2)?;
        Ok((feat, logits))
    }

    /// Penultimate-layer activations, [N, feature_dim].
    pub fn features(&self, windows: &Tensor<f32>) -> Result<Tensor<f32>> {
        let mut tape = Tape::new();
        let x = tape.leaf(windows.clone(), false);
        let (feat, _) = self.forward(&mut tape, x)?;
        Ok(tape.value(feat).clone())
    }

    /// Class probabilities via a numerically stable softmax, [N, K].
    pub fn probs(&self, windows: &Tensor<f32>) -> Result<Tensor<f32>> {
        let mut tape = Tape::new();
        let x = tape.leaf(windows.clone(), false);
        let (_, logits) = self.forward(&mut tape, x)?;
        let lv = tape.value(logits);
        let (n, k) = (lv.shape()[0], lv.shape()[1]);
        let mut out = vec![0f32; n * k];
        for i in 0..n {
            let row = &lv.data()[i * k..(i + 1) * k];
            let m = row.iter().cloned().fold(f32::MIN, f32::max);
            let mut z = 0f32;
            for (j, &v) in row.iter().enumerate() {
                let e = (v - m).exp();
                out[i * k + j] = e;
                z += e;
            }
            for v in &mut out[i * k..(i + 1) * k] {
                *v /= z;
            }
        }
        Tensor::from_vec(vec![n, k], out)
    }

    /// Predicted labels in [1..K].
    pub fn predict(&self, windows: &Tensor<f32>) -> Result<Vec<u16>> {
        let p = self.probs(windows)?;
        let k = p.shape()[1];
        Ok((0..p.shape()[0])
            .map(|i| {
                let row = &p.data()[i * k..(i + 1) * k];
                let mut best = 0;
                for j in 1..k {
                    if row[j] > row[best] {
                        best = j;
                    }
                }
                (best + 1) as u16
            })
            .collect())
    }

    pub fn fingerprint(&self) -> u64 {
        self.provenance.content_hash
    }

    fn refresh_hash(&mut self) {
        let mut h: u64 = 0xcbf29ce484222325;
        for p in self.params() {
            for &v in p.value.data() {
                for byte in v.to_le_bytes() {
                    h ^= byte as u64;
                    h = h.wrapping_mul(0x100000001b3);
                }
            }
        }
        self.provenance.content_hash = h;
    }
}

/// Train a classifier for the given purpose on one dataset. Shuffled
/// minibatch epochs, AdamW, warmup + cosine LR, label smoothing from config.
pub fn train_classifier(cfg: &ClassifierConfig, data: &WindowDataset) -> Result<Classifier> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidArgument("classifier training data is empty".into()));
    }
    let k = cfg.num_classes;
    let mut seen = vec![false; k as usize];
    for &l in &data.labels {
        if l == 0 || l > k {
            return Err(Error::InvalidArgument(format!(
                "label {} outside [1..{}]",
                l, k
            )));
        }
        seen[(l - 1) as usize] = true;
    }
    if !seen.iter().all(|&s| s) {
        return Err(Error::InvalidArgument(
            "labels are not dense in [1..K]".into(),
        ));
    }
    let mut clf = Classifier::build(cfg)?;
    let (tr, te, syn) = count_provenance(data);
    clf.provenance.real_train_windows = tr;
    clf.provenance.real_test_windows = te;
    clf.provenance.synthetic_windows = syn;

    let (n, c, l) = (data.len(), data.channels(), data.window_len());
    let mut opt_states: Vec<OptimState<f32>> = clf
        .params()
        .iter()
        .map(|p| OptimState::new(p.value.shape()))
        .collect();
    let base = AdamConfig {
        lr: cfg.lr,
        weight_decay: cfg.weight_decay,
        ..AdamConfig::default()
    };
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at_epoch(epoch);
        let adam = AdamConfig { lr, ..base };
        let mut er = rng::stream(cfg.seed, "classifier/shuffle", epoch as u64);
        order.shuffle(&mut er);
        let mut epoch_loss = 0f64;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let mut xb = Vec::with_capacity(chunk.len() * c * l);
            let mut targets = Vec::with_capacity(chunk.len());
            for &i in chunk {
                xb.extend_from_slice(data.window(i));
                targets.push((data.labels[i] - 1) as usize);
            }
            let xb = Tensor::from_vec(vec![chunk.len(), c, l], xb)?;
            let mut tape = Tape::new();
            let xv = tape.leaf(xb, false);
            let (_, logits) = clf.forward(&mut tape, xv)?;
            let loss_var = tape.softmax_xent(logits, &targets, cfg.smoothing)?;
            let loss = tape.value(loss_var).item()?;
            if !loss.is_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite classifier loss at epoch {}",
                    epoch
                )));
            }
            let grads = tape.backward(loss_var)?;
            let gvals: Vec<Tensor<f32>> = clf.params().iter().map(|p| grads.for_param(p)).collect();
            for ((p, g), st) in clf.params_mut().into_iter().zip(&gvals).zip(&mut opt_states) {
                adam_step(&mut p.value, g, st, &adam)?;
            }
            epoch_loss += loss as f64;
            batches += 1;
        }
        clf.train_loss.push((epoch_loss / batches as f64) as f32);
    }
    clf.refresh_hash();
    Ok(clf)
}
