//! Conditional velocity network: time/class embeddings, three conditioning
//! modes, and a compact 1D encoder-decoder backbone.

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{ParamGroup, Param, Tape, Tensor, Var};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

/// How the condition embedding reaches the backbone.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CondMode {
    /// Scale/shift modulation at every normalization site.
    Adagn,
    /// Embedding broadcast-added to the stem features.
    Add,
    /// Embedding tiled along time and concatenated as input channels.
    Concat,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelConfig {
    pub channels: usize,
    pub window_len: usize,
    pub num_classes: u16,
    pub base_width: usize,
    pub depth: usize,
    pub time_embed_dim: usize,
    pub cond_mode: CondMode,
    pub groups: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            channels: 4,
            window_len: 400,
            num_classes: 6,
            base_width: 16,
            depth: 2,
            time_embed_dim: 128,
            cond_mode: CondMode::Adagn,
            groups: 8,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.base_width == 0 || self.num_classes == 0 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if self.depth == 0 || self.window_len % (1 << self.depth) != 0 {
            return Err(Error::Config(format!(
                "window length {} must be divisible by 2^depth (depth {})",
                self.window_len, self.depth
            )));
        }
        if self.groups == 0 || self.base_width % self.groups != 0 {
            return Err(Error::Config(format!(
                "base width {} not divisible by {} norm groups",
                self.base_width, self.groups
            )));
        }
        if self.time_embed_dim % 2 != 0 || self.time_embed_dim == 0 {
            return Err(Error::Config("time embedding dimension must be even".into()));
        }
        Ok(())
    }

    fn width(&self, level: usize) -> usize {
        self.base_width << level
    }
}

/// Sinusoidal encoding of t with a geometric frequency ladder
/// f_i = 10^(-4 i / (d/2)).
pub fn time_encoding(t: &[f32], dim: usize) -> Tensor<f32> {
    let half = dim / 2;
    let mut data = Vec::with_capacity(t.len() * dim);
    for &tv in t {
        for i in 0..half {
            let f = 10f64.powf(-4.0 * i as f64 / half as f64);
            data.push((f * tv as f64).sin() as f32);
        }
        for i in 0..half {
            let f = 10f64.powf(-4.0 * i as f64 / half as f64);
            data.push((f * tv as f64).cos() as f32);
        }
    }
    Tensor::from_vec(vec![t.len(), dim], data).unwrap()
}

struct Conv {
    w: Param<f32>,
    b: Param<f32>,
    stride: usize,
    pad: usize,
}

impl Conv {
    fn new(
        name: &str,
        ci: usize,
        co: usize,
        k: usize,
        stride: usize,
        pad: usize,
        r: &mut impl Rng,
    ) -> Self {
        let std = (2.0 / (ci * k) as f64).sqrt();
        let n = Normal::new(0.0, std).unwrap();
        let w = Tensor::from_vec(
            vec![co, ci, k],
            (0..co * ci * k).map(|_| n.sample(r) as f32).collect(),
        )
        .unwrap();
        Conv {
            w: Param::new(format!("{}.w", name), w),
            b: Param::new(format!("{}.b", name), Tensor::zeros(&[co])),
            stride,
            pad,
        }
    }

    fn apply(&self, tape: &mut Tape<f32>, x: Var) -> Result<Var> {
        let w = tape.param(&self.w);
        let b = tape.param(&self.b);
        tape.conv1d(x, w, b, self.stride, self.pad)
    }
}

struct Linear {
    w: Param<f32>,
    b: Param<f32>,
}

impl Linear {
    fn new(name: &str, din: usize, dout: usize, r: &mut impl Rng) -> Self {
        let std = (1.0 / din as f64).sqrt();
        let n = Normal::new(0.0, std).unwrap();
        let w = Tensor::from_vec(
            vec![din, dout],
            (0..din * dout).map(|_| n.sample(r) as f32).collect(),
        )
        .unwrap();
        Linear {
            w: Param::new(format!("{}.w", name), w),
            b: Param::new(format!("{}.b", name), Tensor::zeros(&[dout])),
        }
    }

    fn zeros(name: &str, din: usize, dout: usize) -> Self {
        Linear {
            w: Param::new(format!("{}.w", name), Tensor::zeros(&[din, dout])),
            b: Param::new(format!("{}.b", name), Tensor::zeros(&[dout])),
        }
    }

    fn apply(&self, tape: &mut Tape<f32>, x: Var) -> Result<Var> {
        let w = tape.param(&self.w);
        let b = tape.param(&self.b);
        tape.linear(x, w, b)
    }
}

/// Zero-initialized scale/shift projections so that modulation is the
/// identity before the first optimizer step.
struct Modulation {
    scale: Linear,
    shift: Linear,
}

impl Modulation {
    fn new(name: &str, emb_dim: usize, ch: usize) -> Self {
        Modulation {
            scale: Linear::zeros(&format!("{}.scale", name), emb_dim, ch),
            shift: Linear::zeros(&format!("{}.shift", name), emb_dim, ch),
        }
    }
}

/// conv -> group norm -> optional modulation -> silu
struct Block {
    conv: Conv,
    gamma: Param<f32>,
    beta: Param<f32>,
    modulation: Option<Modulation>,
}

impl Block {
    fn new(
        name: &str,
        ci: usize,
        co: usize,
        emb_dim: usize,
        modulated: bool,
        r: &mut impl Rng,
    ) -> Self {
        Block {
            conv: Conv::new(&format!("{}.conv", name), ci, co, 3, 1, 1, r),
            gamma: Param::new(format!("{}.gn.gamma", name), Tensor::full(&[co], 1.0)),
            beta: Param::new(format!("{}.gn.beta", name), Tensor::zeros(&[co])),
            modulation: modulated.then(|| Modulation::new(&format!("{}.mod", name), emb_dim, co)),
        }
    }

    fn apply(&self, tape: &mut Tape<f32>, x: Var, emb: Var, groups: usize) -> Result<Var> {
        let h = self.conv.apply(tape, x)?;
        let gamma = tape.param(&self.gamma);
        let beta = tape.param(&self.beta);
        let mut h = tape.group_norm(h, groups, gamma, beta, 1e-5)?;
        if let Some(m) = &self.modulation {
            let scale = m.scale.apply(tape, emb)?;
            let shift = m.shift.apply(tape, emb)?;
            h = tape.channel_affine(h, scale, shift)?;
        }
        Ok(tape.silu(h))
    }
}

/// The conditional velocity field v(x_t, t, y). The class table has K+1
/// rows; row K encodes the dropped (null) condition.
pub struct VelocityNet {
    pub cfg: ModelConfig,
    class_table: Param<f32>,
    time_proj: Linear,
    stem_cond: Option<Linear>,
    stem: Conv,
    enc: Vec<Block>,
    down: Vec<Conv>,
    mid: Block,
    up: Vec<Conv>,
    dec: Vec<Block>,
    head: Conv,
}

impl VelocityNet {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut r = rng::stream(seed, "model/init", 0);
        let d = cfg.time_embed_dim;
        let k = cfg.num_classes as usize;
        // Zero-init table: class rows learn from gradients; the null row
        // (row K) is held at zero by the trainer so a dropped condition is
        // always the same fixed embedding.
        let class_table = Param::new("cond.class_table", Tensor::zeros(&[k + 1, d]));
        let time_proj = Linear::new("cond.time", d, d, &mut r);
        let modulated = cfg.cond_mode == CondMode::Adagn;
        let stem_cond = match cfg.cond_mode {
            CondMode::Adagn => None,
            CondMode::Add => Some(Linear::new("cond.stem_add", d, cfg.base_width, &mut r)),
            CondMode::Concat => Some(Linear::new("cond.stem_cat", d, cfg.base_width, &mut r)),
        };
        let stem_in = if cfg.cond_mode == CondMode::Concat {
            cfg.channels + cfg.base_width
        } else {
            cfg.channels
        };
        let stem = Conv::new("stem", stem_in, cfg.base_width, 3, 1, 1, &mut r);
        let mut enc = Vec::new();
        let mut down = Vec::new();
        for i in 0..cfg.depth {
            enc.push(Block::new(
                &format!("enc{}", i),
                cfg.width(i),
                cfg.width(i),
                d,
                modulated,
                &mut r,
            ));
            down.push(Conv::new(
                &format!("down{}", i),
                cfg.width(i),
                cfg.width(i + 1),
                3,
                2,
                1,
                &mut r,
            ));
        }
        let mid = Block::new(
            "mid",
            cfg.width(cfg.depth),
            cfg.width(cfg.depth),
            d,
            modulated,
            &mut r,
        );
        let mut up = Vec::new();
        let mut dec = Vec::new();
        for i in (0..cfg.depth).rev() {
            up.push(Conv::new(
                &format!("up{}", i),
                cfg.width(i + 1),
                cfg.width(i),
                3,
                1,
                1,
                &mut r,
            ));
            dec.push(Block::new(
                &format!("dec{}", i),
                2 * cfg.width(i),
                cfg.width(i),
                d,
                modulated,
                &mut r,
            ));
        }
        let head = Conv::new("head", cfg.base_width, cfg.channels, 3, 1, 1, &mut r);
        Ok(VelocityNet {
            cfg,
            class_table,
            time_proj,
            stem_cond,
            stem,
            enc,
            down,
            mid,
            up,
            dec,
            head,
        })
    }

    /// Embedding rows for a batch: class row (null -> row K) plus the
    /// projected sinusoidal time encoding.
    fn condition_embed(
        &self,
        tape: &mut Tape<f32>,
        t: &[f32],
        y: &[Option<u16>],
    ) -> Result<Var> {
        let k = self.cfg.num_classes;
        let mut idx = Vec::with_capacity(y.len());
        for &label in y {
            match label {
                None => idx.push(k as usize),
                Some(v) if (1..=k).contains(&v) => idx.push((v - 1) as usize),
                Some(v) => {
                    return Err(Error::InvalidArgument(format!(
                        "class id {} outside [1..{}]",
                        v, k
                    )))
                }
            }
        }
        for &tv in t {
            if !(0.0..=1.0).contains(&tv) {
                return Err(Error::InvalidArgument(format!("time {} outside [0,1]", tv)));
            }
        }
        let enc = tape.constant(time_encoding(t, self.cfg.time_embed_dim));
        let temb = self.time_proj.apply(tape, enc)?;
        let table = tape.param(&self.class_table);
        let cemb = tape.embed(table, &idx)?;
        tape.add(temb, cemb)
    }

    /// Batched forward: x is [N, C, L], with per-sample t and labels.
    pub fn forward(
        &self,
        tape: &mut Tape<f32>,
        x: Var,
        t: &[f32],
        y: &[Option<u16>],
    ) -> Result<Var> {
        let shape = tape.value(x).shape().to_vec();
        if shape.len() != 3 || shape[1] != self.cfg.channels || shape[2] != self.cfg.window_len {
            return Err(Error::ShapeMismatch(format!(
                "input {:?} does not match model [N, {}, {}]",
                shape, self.cfg.channels, self.cfg.window_len
            )));
        }
        if t.len() != shape[0] || y.len() != shape[0] {
            return Err(Error::ShapeMismatch(
                "t and y must have one entry per batch element".into(),
            ));
        }
        let emb = self.condition_embed(tape, t, y)?;
        let groups = self.cfg.groups;
        let mut h = match self.cfg.cond_mode {
            CondMode::Concat => {
                let e = self.stem_cond.as_ref().unwrap().apply(tape, emb)?;
                let tiled = tape.tile_time(e, self.cfg.window_len);
                let x = tape.concat_channels(x, tiled)?;
                self.stem.apply(tape, x)?
            }
            CondMode::Add => {
                let h = self.stem.apply(tape, x)?;
                let e = self.stem_cond.as_ref().unwrap().apply(tape, emb)?;
                tape.add_channel_vec(h, e)?
            }
            CondMode::Adagn => self.stem.apply(tape, x)?,
        };
        let mut skips = Vec::with_capacity(self.cfg.depth);
        for i in 0..self.cfg.depth {
            h = self.enc[i].apply(tape, h, emb, groups)?;
            skips.push(h);
            h = self.down[i].apply(tape, h)?;
        }
        h = self.mid.apply(tape, h, emb, groups)?;
        for (j, i) in (0..self.cfg.depth).rev().enumerate() {
            h = tape.upsample2(h);
            h = self.up[j].apply(tape, h)?;
            h = tape.concat_channels(h, skips[i])?;
            h = self.dec[j].apply(tape, h, emb, groups)?;
        }
        self.head.apply(tape, h)
    }

    /// Inference forward without gradient tracking.
    pub fn velocity(
        &self,
        x: &Tensor<f32>,
        t: &[f32],
        y: &[Option<u16>],
    ) -> Result<Tensor<f32>> {
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone(), false);
        let out = self.forward(&mut tape, xv, t, y)?;
        Ok(tape.value(out).clone())
    }

    pub fn params(&self) -> Vec<&Param<f32>> {
        let mut out: Vec<&Param<f32>> = vec![
            &self.class_table,
            &self.time_proj.w,
            &self.time_proj.b,
        ];
        if let Some(l) = &self.stem_cond {
            out.push(&l.w);
            out.push(&l.b);
        }
        fn conv<'a>(out: &mut Vec<&'a Param<f32>>, c: &'a Conv) {
            out.push(&c.w);
            out.push(&c.b);
        }
        fn block<'a>(out: &mut Vec<&'a Param<f32>>, b: &'a Block) {
            conv(out, &b.conv);
            out.push(&b.gamma);
            out.push(&b.beta);
            if let Some(m) = &b.modulation {
                out.push(&m.scale.w);
                out.push(&m.scale.b);
                out.push(&m.shift.w);
                out.push(&m.shift.b);
            }
        }
        conv(&mut out, &self.stem);
        for b in &self.enc {
            block(&mut out, b);
        }
        for c in &self.down {
            conv(&mut out, c);
        }
        block(&mut out, &self.mid);
        for c in &self.up {
            conv(&mut out, c);
        }
        for b in &self.dec {
            block(&mut out, b);
        }
        conv(&mut out, &self.head);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<f32>> {
        let mut out: Vec<&mut Param<f32>> = vec![
            &mut self.class_table,
            &mut self.time_proj.w,
            &mut self.time_proj.b,
        ];
        if let Some(l) = &mut self.stem_cond {
            out.push(&mut l.w);
            out.push(&mut l.b);
        }
        fn conv<'a>(out: &mut Vec<&'a mut Param<f32>>, c: &'a mut Conv) {
            out.push(&mut c.w);
            out.push(&mut c.b);
        }
        fn block<'a>(out: &mut Vec<&'a mut Param<f32>>, b: &'a mut Block) {
            conv(out, &mut b.conv);
            out.push(&mut b.gamma);
            out.push(&mut b.beta);
            if let Some(m) = &mut b.modulation {
                out.push(&mut m.scale.w);
                out.push(&mut m.scale.b);
                out.push(&mut m.shift.w);
                out.push(&mut m.shift.b);
            }
        }
        conv(&mut out, &mut self.stem);
        for b in &mut self.enc {
            block(&mut out, b);
        }
        for c in &mut self.down {
            conv(&mut out, c);
        }
        block(&mut out, &mut self.mid);
        for c in &mut self.up {
            conv(&mut out, c);
        }
        for b in &mut self.dec {
            block(&mut out, b);
        }
        conv(&mut out, &mut self.head);
        out
    }

    /// Snapshot all parameters as a named checkpoint group.
    pub fn param_group(&self) -> ParamGroup {
        self.params()
            .into_iter()
            .map(|p| (p.name.clone(), p.value.clone()))
            .collect()
    }

    /// Restore parameters from a checkpoint group, matching by name.
    pub fn load_param_group(&mut self, group: &ParamGroup) -> Result<()> {
        let map: std::collections::HashMap<&str, &Tensor<f32>> =
            group.iter().map(|(n, t)| (n.as_str(), t)).collect();
        for p in self.params_mut() {
            let t = map.get(p.name.as_str()).ok_or_else(|| {
                Error::InvalidArgument(format!("checkpoint missing parameter {}", p.name))
            })?;
            if t.shape() != p.value.shape() {
                return Err(Error::ShapeMismatch(format!(
                    "parameter {} has shape {:?}, checkpoint {:?}",
                    p.name,
                    p.value.shape(),
                    t.shape()
                )));
            }
            p.value = (*t).clone();
        }
        Ok(())
    }
}
