//! Flow-matching training: interpolation paths, time samplers, condition
//! dropout, LR schedule, and EMA maintenance.

use crate::data::WindowDataset;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, VelocityNet};
use crate::rng;
use crate::tensor::{adam_step, ema_update, AdamConfig, OptimState, Tape, Tensor};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimeKind {
    Uniform,
    LogitNormal,
}

/// Training-time distribution over the path time t.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TimeSampler {
    pub kind: TimeKind,
    pub mu: f64,
    pub sigma: f64,
}

impl Default for TimeSampler {
    fn default() -> Self {
        TimeSampler {
            kind: TimeKind::LogitNormal,
            mu: 0.0,
            sigma: 1.0,
        }
    }
}

impl TimeSampler {
    pub fn uniform() -> Self {
        TimeSampler {
            kind: TimeKind::Uniform,
            mu: 0.0,
            sigma: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kind == TimeKind::LogitNormal && self.sigma <= 0.0 {
            return Err(Error::Config("logit-normal sigma must be > 0".into()));
        }
        Ok(())
    }

    /// Draw n times strictly inside (0, 1).
    pub fn sample(&self, n: usize, r: &mut impl Rng) -> Vec<f32> {
        const EPS: f64 = 1e-6;
        (0..n)
            .map(|_| {
                let t = match self.kind {
                    TimeKind::Uniform => r.gen::<f64>(),
                    TimeKind::LogitNormal => {
                        let z: f64 = <StandardNormal as Distribution<f64>>::sample(
                            &StandardNormal,
                            r,
                        );
                        let v = self.mu + self.sigma * z;
                        1.0 / (1.0 + (-v).exp())
                    }
                };
                t.clamp(EPS, 1.0 - EPS) as f32
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    Cosine,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_schedule: LrSchedule,
    pub ema_start_step: u64,
    pub ema_decay: f64,
    pub cond_drop_prob: f64,
    pub time_sampler: TimeSampler,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 20_000,
            batch_size: 128,
            lr: 5e-4,
            lr_schedule: LrSchedule::Cosine,
            ema_start_step: 6_000,
            ema_decay: 0.9999,
            cond_drop_prob: 0.05,
            time_sampler: TimeSampler::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::Config("steps and batch size must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.cond_drop_prob) {
            return Err(Error::Config("cond_drop_prob must be in [0,1]".into()));
        }
        if self.ema_start_step > self.steps {
            return Err(Error::Config("ema_start_step must be <= steps".into()));
        }
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return Err(Error::Config("ema_decay must be in [0,1]".into()));
        }
        self.time_sampler.validate()
    }

    pub fn lr_at(&self, step: u64) -> f64 {
        match self.lr_schedule {
            LrSchedule::Constant => self.lr,
            LrSchedule::Cosine => {
                self.lr * 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / self.steps as f64).cos())
            }
        }
    }
}

/// Interpolation path for one window: x0 ~ N(0, I),
/// x_t = (1-t) x0 + t x1, target velocity u = x1 - x0.
pub fn make_pair(
    x1: &Tensor<f32>,
    t: f32,
    r: &mut impl Rng,
) -> (Tensor<f32>, Tensor<f32>, Tensor<f32>) {
    let noise: Vec<f32> = (0..x1.numel())
        .map(|_| <StandardNormal as Distribution<f64>>::sample(&StandardNormal, r) as f32)
        .collect();
    let x0 = Tensor::from_vec(x1.shape().to_vec(), noise).unwrap();
    let mut xt = Tensor::zeros(x1.shape());
    let mut u = Tensor::zeros(x1.shape());
    for i in 0..x1.numel() {
        let (a, b) = (x0.data()[i], x1.data()[i]);
        xt.data_mut()[i] = (1.0 - t) * a + t * b;
        u.data_mut()[i] = b - a;
    }
    (x0, xt, u)
}

/// Mean squared error between predicted and target velocity.
pub fn fm_loss(v_pred: &Tensor<f32>, u_target: &Tensor<f32>) -> Result<f32> {
    if v_pred.shape() != u_target.shape() {
        return Err(Error::ShapeMismatch("fm_loss shapes differ".into()));
    }
    let n = v_pred.numel() as f64;
    let s: f64 = v_pred
        .data()
        .iter()
        .zip(u_target.data())
        .map(|(&a, &b)| {
            let d = (a - b) as f64;
            d * d
        })
        .sum();
    Ok((s / n) as f32)
}

/// One `step,loss,lr` row of the training history.
#[derive(Debug, Clone, Serialize)]
pub struct LossRow {
    pub step: u64,
    pub loss: f32,
    pub lr: f64,
}

pub fn loss_history_csv(rows: &[LossRow]) -> String {
    let mut s = String::from("step,loss,lr\n");
    for r in rows {
        s.push_str(&format!("{},{},{}\n", r.step, r.loss, r.lr));
    }
    s
}

/// Train a velocity network with the flow-matching objective. Returns the
/// online network, the EMA network, and the loss history.
pub fn train_generator(
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    data: &WindowDataset,
) -> Result<(VelocityNet, VelocityNet, Vec<LossRow>)> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidArgument("training data is empty".into()));
    }
    if data.labels.iter().any(|&l| l == 0 || l > model_cfg.num_classes) {
        return Err(Error::InvalidArgument(format!(
            "labels must lie in [1..{}]",
            model_cfg.num_classes
        )));
    }
    let mut net = VelocityNet::new(model_cfg.clone(), cfg.seed)?;
    let (n, c, l) = (data.len(), data.channels(), data.window_len());
    let batch = cfg.batch_size;
    let adam_base = AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    };
    let mut opt_states: Vec<OptimState<f32>> = net
        .params()
        .iter()
        .map(|p| OptimState::new(p.value.shape()))
        .collect();
    let mut ema: Vec<Tensor<f32>> = net.params().iter().map(|p| p.value.clone()).collect();
    let mut history = Vec::with_capacity(cfg.steps as usize);

    for step in 0..cfg.steps {
        let mut br = rng::stream(cfg.seed, "train/batch", step);
        let mut tr = rng::stream(cfg.seed, "train/time", step);
        let mut xr = rng::stream(cfg.seed, "train/x0", step);
        let mut dr = rng::stream(cfg.seed, "train/drop", step);

        let idx: Vec<usize> = (0..batch).map(|_| br.gen_range(0..n)).collect();
        let t = cfg.time_sampler.sample(batch, &mut tr);
        let mut xt = Vec::with_capacity(batch * c * l);
        let mut u = Vec::with_capacity(batch * c * l);
        let mut y = Vec::with_capacity(batch);
        for (bi, &i) in idx.iter().enumerate() {
            let x1 = Tensor::from_vec(vec![c, l], data.window(i).to_vec())?;
            let (_, xti, ui) = make_pair(&x1, t[bi], &mut xr);
            xt.extend_from_slice(xti.data());
            u.extend_from_slice(ui.data());
            y.push(if dr.gen::<f64>() < cfg.cond_drop_prob {
                None
            } else {
                Some(data.labels[i])
            });
        }
        let xt = Tensor::from_vec(vec![batch, c, l], xt)?;
        let u = Tensor::from_vec(vec![batch, c, l], u)?;

        let mut tape = Tape::new();
        let xv = tape.leaf(xt, false);
        let pred = net.forward(&mut tape, xv, &t, &y)?;
        let target = tape.constant(u);
        let loss_var = tape.mse(pred, target)?;
        let loss = tape.value(loss_var).item()?;
        if !loss.is_finite() {
            return Err(Error::Numerical(format!(
                "non-finite loss {} at step {}",
                loss, step
            )));
        }
        let grads = tape.backward(loss_var)?;
        let lr = cfg.lr_at(step);
        let adam = AdamConfig { lr, ..adam_base };
        let mut param_grads: Vec<Tensor<f32>> =
            net.params().iter().map(|p| grads.for_param(p)).collect();
        // the null-condition row stays pinned at its zero init
        for (p, g) in net.params().iter().zip(&mut param_grads) {
            if p.name == "cond.class_table" {
                let d = g.shape()[1];
                let rows = g.shape()[0];
                for v in &mut g.data_mut()[(rows - 1) * d..] {
                    *v = 0.0;
                }
            }
        }
        for ((p, g), st) in net
            .params_mut()
            .into_iter()
            .zip(&param_grads)
            .zip(&mut opt_states)
        {
            adam_step(&mut p.value, g, st, &adam)?;
        }
        if step + 1 <= cfg.ema_start_step {
            for (s, p) in ema.iter_mut().zip(net.params()) {
                s.clone_from(&p.value);
            }
        } else {
            for (s, p) in ema.iter_mut().zip(net.params()) {
                ema_update(s, &p.value, cfg.ema_decay)?;
            }
        }
        history.push(LossRow { step, loss, lr });
    }

    let mut ema_net = VelocityNet::new(model_cfg.clone(), cfg.seed)?;
    let group: Vec<(String, Tensor<f32>)> = net
        .params()
        .iter()
        .zip(ema)
        .map(|(p, t)| (p.name.clone(), t))
        .collect();
    ema_net.load_param_group(&group)?;
    Ok((net, ema_net, history))
}
