//! Wengert-list reverse-mode differentiation.
//!
//! One tape lives for one training step: record the forward pass, call
//! [`Tape::backward`], read gradients, drop the tape.

use super::kernels as k;
use super::{Scalar, Tensor};
use crate::error::{Error, Result};
use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

/// Handle to a value recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

static PARAM_COUNTER: AtomicU64 = AtomicU64::new(0);

/// A trainable parameter: named tensor with a process-unique identity.
#[derive(Debug, Clone)]
pub struct Param<F: Scalar = f32> {
    pub name: String,
    pub id: u64,
    pub value: Tensor<F>,
}

impl<F: Scalar> Param<F> {
    pub fn new(name: impl Into<String>, value: Tensor<F>) -> Self {
        Param {
            name: name.into(),
            id: PARAM_COUNTER.fetch_add(1, Ordering::Relaxed),
            value,
        }
    }
}

type BackFn<F> = Box<dyn Fn(&Tensor<F>, &mut Vec<Option<Tensor<F>>>)>;

struct Node<F: Scalar> {
    value: Tensor<F>,
    requires_grad: bool,
    back: Option<BackFn<F>>,
}

/// Gradient buffers produced by one backward pass.
pub struct Gradients<F: Scalar = f32> {
    grads: Vec<Option<Tensor<F>>>,
    param_vars: HashMap<u64, Var>,
}

impl<F: Scalar> Gradients<F> {
    pub fn get(&self, v: Var) -> Option<&Tensor<F>> {
        self.grads[v.0].as_ref()
    }

    /// Gradient for a registered parameter; zeros if it never touched the loss.
    pub fn for_param(&self, p: &Param<F>) -> Tensor<F> {
        self.param_vars
            .get(&p.id)
            .and_then(|v| self.grads[v.0].clone())
            .unwrap_or_else(|| Tensor::zeros(p.value.shape()))
    }
}

fn accum<F: Scalar>(grads: &mut Vec<Option<Tensor<F>>>, var: Var, g: Tensor<F>) {
    match &mut grads[var.0] {
        Some(existing) => existing.accumulate(&g),
        slot => *slot = Some(g),
    }
}

pub struct Tape<F: Scalar = f32> {
    nodes: Vec<Node<F>>,
    param_vars: HashMap<u64, Var>,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            param_vars: HashMap::new(),
        }
    }

    pub fn leaf(&mut self, value: Tensor<F>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            back: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.leaf(value, false)
    }

    /// Intern a parameter; repeated calls return the same var so gradients
    /// from all uses accumulate in one buffer.
    pub fn param(&mut self, p: &Param<F>) -> Var {
        if let Some(&v) = self.param_vars.get(&p.id) {
            return v;
        }
        let v = self.leaf(p.value.clone(), true);
        self.param_vars.insert(p.id, v);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    fn needs_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn push(&mut self, value: Tensor<F>, requires_grad: bool, back: Option<BackFn<F>>) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            back: if requires_grad { back } else { None },
        });
        Var(self.nodes.len() - 1)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = k::binary(self.value(a), self.value(b), k::BinaryKind::Add)?;
        let rg = self.needs_grad(&[a, b]);
        Ok(self.push(
            out,
            rg,
            Some(Box::new(move |g, grads| {
                accum(grads, a, g.clone());
                accum(grads, b, g.clone());
            })),
        ))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = k::binary(self.value(a), self.value(b), k::BinaryKind::Sub)?;
        let rg = self.needs_grad(&[a, b]);
        Ok(self.push(
            out,
            rg,
            Some(Box::new(move |g, grads| {
                accum(grads, a, g.clone());
                accum(grads, b, k::scale(g, -F::one()));
            })),
        ))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let av = self.value(a).clone();
        let bv = self.value(b).clone();
        let out = k::binary(&av, &bv, k::BinaryKind::Mul)?;
        let rg = self.needs_grad(&[a, b]);
        Ok(self.push(
            out,
            rg,
            Some(Box::new(move |g, grads| {
                accum(grads, a, k::binary(g, &bv, k::BinaryKind::Mul).unwrap());
                accum(grads, b, k::binary(g, &av, k::BinaryKind::Mul).unwrap());
            })),
        ))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let av = self.value(a).clone();
        let bv = self.value(b).clone();
        let out = k::binary(&av, &bv, k::BinaryKind::Div)?;
        let rg = self.needs_grad(&[a, b]);
        Ok(self.push(
            out,
            rg,
            Some(Box::new(move |g, grads| {
                let da = k::binary(g, &bv, k::BinaryKind::Div).unwrap();
                accum(grads, a, da);
                // db = -g * a / b^2
                let b2 = k::binary(&bv, &bv, k::BinaryKind::Mul).unwrap();
                let ga = k::binary(g, &av, k::BinaryKind::Mul).unwrap();
                let db = k::scale(&k::binary(&ga, &b2, k::BinaryKind::Div).unwrap(), -F::one());
                accum(grads, b, db);
            })),
        ))
    }

    pub fn scale(&mut self, a: Var, s: F) -> Var {
        let out = k::scale(self.value(a), s);
        let rg = self.needs_grad(&[a]);
        self.push(
            out,
            rg,
            Some(Box::new(move |g, grads| {
                accum(grads, a, k::scale(g, s));
            })),
        )
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let av = self.value(a).clone();
        let bv = self.value(b).clone();
        let out = k::matmul(&av, &bv)?;
        let rg = self.needs_grad(&[a, b]);
        Ok(self.push(
            out,
            rg,
            Some(Box::new(move |g, grads| {
                accum(grads, a, k::matmul_nt(g, &bv).unwrap());
                accum(grads, b, k::matmul_tn(&av, g).unwrap());
            })),
        ))
    }

    /// Conv over `[N,Ci,L]` (or a single `[Ci,L]` window).
    pub fn conv1d(&mut self, x: Var, w: Var, bias: Var, stride: usize, pad: usize) -> Result<Var> {
        let lifted = self.value(x).rank() == 2;
        let xv = if lifted {
            let s = self.value(x).shape().to_vec();
            self.value(x).reshape(&[1, s[0], s[1]])?
        } else {
            self.value(x).clone()
        };
        let wv = self.value(w).clone();
        let out3 = k::conv1d(&xv, &wv, self.value(bias), stride, pad)?;
        let out = if lifted {
            let s = out3.shape().to_vec();
            out3.reshape(&[s[1], s[2]])?
        } else {
            out3
        };
        let rg = self.needs_grad(&[x, w, bias]);
        Ok(self.push(
            out,
            rg,
            Some(Box::new(move |g, grads| {
                let g3 = if lifted {
                    let s = g.shape().to_vec();
                    g.reshape(&[1, s[0], s[1]]).unwrap()
                } else {
                    g.clone()
                };
                let (dx, dw, db) = k::conv1d_backward(&xv, &wv, &g3, stride, pad);
                let dx = if lifted {
                    let s = dx.shape().to_vec();
                    dx.reshape(&[s[1], s[2]]).unwrap()
                } else {
                    dx
                };
                accum(grads, x, dx);
                accum(grads, w, dw);
                accum(grads, bias, db);
            })),
        ))
    }

    /// GroupNorm over `[N,C,L]` (or a single `[C,L]` window).
    pub fn group_norm(
        &mut self,
        x: Var,
        groups: usize,
        gamma: Var,
        beta: Var,
        eps: F,
    ) -> Result<Var> {
        let lifted = self.value(x).rank() == 2;
        let xv = if lifted {
            let s = self.value(x).shape().to_vec();
            self.value(x).reshape(&[1, s[0], s[1]])?
        } else {
            self.value(x).clone()
        };
        let gv = self.value(gamma).clone();
        let (out3, stats) = k::group_norm(&xv, groups, &gv, self.value(beta), eps)?;
        let out = if lifted {
            let s = out3.shape().to_vec();
            out3.reshape(&[s[1], s[2]])?
        } else {
            out3
        };
        let rg = self.needs_grad(&[x, gamma, beta]);
        Ok(self.push(
            out,
            rg,
            Some(Box::new(move |g, grads| {
                let g3 = if lifted {
                    let s = g.shape().to_vec();
                    g.reshape(&[1, s[0], s[1]]).unwrap()
                } else {
                    g.clone()
                };
                let (dx, dgamma, dbeta) = k::group_norm_backward(&xv, groups, &gv, &stats, &g3);
                let dx = if lifted {
                    let s = dx.shape().to_vec();
                    dx.reshape(&[s[1], s[2]]).unwrap()
                } else {
                    dx
                };
                accum(grads, x, dx);
                accum(grads, gamma, dgamma);
                accum(grads, beta, dbeta);
            })),
        ))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let xv = self.value(x).clone();
        let out = k::silu(&xv);
        let rg = self.needs_grad(&[x]);
        self.push(
            out,
            rg,
            Some(Box::new(move |g, grads| {
                accum(grads, x, k::silu_backward(&xv, g));
            })),
        )
    }

    /// Mean label-smoothed cross-entropy; returns a scalar var.
    pub fn softmax_xent(&mut self, logits: Var, targets: &[usize], smoothing: f64) -> Result<Var> {
        let (loss, probs) = k::softmax_xent(self.value(logits), targets, smoothing)?;
        let targets = targets.to_vec();
        let rg = self.needs_grad(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            rg,
            Some(Box::new(move |g, grads| {
                let gv = g.item().unwrap();
                accum(
                    grads,
                    logits,
                    k::softmax_xent_backward(&probs, &targets, smoothing, gv),
                );
            })),
        ))
    }

    /// Mean squared error; returns a scalar var.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let av = self.value(a).clone();
        let bv = self.value(b).clone();
        let loss = k::mse(&av, &bv)?;
        let rg = self.needs_grad(&[a, b]);
        Ok(self.push(
            Tensor::scalar(loss),
            rg,
            Some(Box::new(move |g, grads| {
                let gv = g.item().unwrap();
                let da = k::mse_backward(&av, &bv, gv);
                accum(grads, b, k::scale(&da, -F::one()));
                accum(grads, a, da);
            })),
        ))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let c1 = self.value(a).shape()[1];
        let out = k::concat_channels(self.value(a), self.value(b))?;
        let rg = self.needs_grad(&[a, b]);
        Ok(self.push(
            out,
            rg,
            Some(Box::new(move |g, grads| {
                let (da, db) = k::split_channels(g, c1);
                accum(grads, a, da);
                accum(grads, b, db);
            })),
        ))
    }

    pub fn upsample2(&mut self, x: Var) -> Var {
        let out = k::upsample2(self.value(x));
        let rg = self.needs_grad(&[x]);
        self.push(
            out,
            rg,
            Some(Box::new(move |g, grads| {
                accum(grads, x, k::upsample2_backward(g));
            })),
        )
    }

    /// `h * (1 + scale) + shift` with per-sample channel vectors.
    pub fn channel_affine(&mut self, h: Var, scale: Var, shift: Var) -> Result<Var> {
        let hv = self.value(h).clone();
        let sv = self.value(scale).clone();
        let out = k::channel_affine(&hv, &sv, self.value(shift))?;
        let rg = self.needs_grad(&[h, scale, shift]);
        Ok(self.push(
            out,
            rg,
            Some(Box::new(move |g, grads| {
                let (dh, ds, dsh) = k::channel_affine_backward(&hv, &sv, g);
                accum(grads, h, dh);
                accum(grads, scale, ds);
                accum(grads, shift, dsh);
            })),
        ))
    }

    pub fn add_channel_vec(&mut self, h: Var, v: Var) -> Result<Var> {
        let out = k::add_channel_vec(self.value(h), self.value(v))?;
        let rg = self.needs_grad(&[h, v]);
        Ok(self.push(
            out,
            rg,
            Some(Box::new(move |g, grads| {
                accum(grads, h, g.clone());
                accum(grads, v, k::sum_over_time(g));
            })),
        ))
    }

    /// Mean over the time axis: [N, C, L] -> [N, C].
    pub fn mean_time(&mut self, h: Var) -> Result<Var> {
        let hv = self.value(h);
        if hv.rank() != 3 {
            return Err(Error::ShapeMismatch(format!(
                "mean_time expects [N, C, L], got {:?}",
                hv.shape()
            )));
        }
        let (n, c, l) = (hv.shape()[0], hv.shape()[1], hv.shape()[2]);
        let inv = F::of_f64(1.0 / l as f64);
        let mut out = vec![F::zero(); n * c];
        for r in 0..n * c {
            out[r] = hv.data()[r * l..(r + 1) * l].iter().copied().sum::<F>() * inv;
        }
        let out = Tensor::from_vec(vec![n, c], out)?;
        let rg = self.needs_grad(&[h]);
        Ok(self.push(
            out,
            rg,
            Some(Box::new(move |g, grads| {
                let mut dh = vec![F::zero(); n * c * l];
                for r in 0..n * c {
                    let gv = g.data()[r] * inv;
                    for v in &mut dh[r * l..(r + 1) * l] {
                        *v = gv;
                    }
                }
                accum(grads, h, Tensor::from_vec(vec![n, c, l], dh).unwrap());
            })),
        ))
    }

    pub fn tile_time(&mut self, v: Var, l: usize) -> Var {
        let out = k::tile_time(self.value(v), l);
        let rg = self.needs_grad(&[v]);
        self.push(
            out,
            rg,
            Some(Box::new(move |g, grads| {
                accum(grads, v, k::sum_over_time(g));
            })),
        )
    }

    pub fn linear(&mut self, x: Var, w: Var, bias: Var) -> Result<Var> {
        let xv = self.value(x).clone();
        let wv = self.value(w).clone();
        let out = k::linear(&xv, &wv, self.value(bias))?;
        let rg = self.needs_grad(&[x, w, bias]);
        Ok(self.push(
            out,
            rg,
            Some(Box::new(move |g, grads| {
                accum(grads, x, k::matmul_nt(g, &wv).unwrap());
                accum(grads, w, k::matmul_tn(&xv, g).unwrap());
                // bias grad: column sums
                let (n, d) = (g.shape()[0], g.shape()[1]);
                let mut db = vec![F::zero(); d];
                for i in 0..n {
                    for j in 0..d {
                        db[j] += g.data()[i * d + j];
                    }
                }
                accum(grads, bias, Tensor::from_vec(vec![d], db).unwrap());
            })),
        ))
    }

    pub fn embed(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let (rows, d) = (self.value(table).shape()[0], self.value(table).shape()[1]);
        let out = k::embed_gather(self.value(table), idx)?;
        let idx = idx.to_vec();
        let rg = self.needs_grad(&[table]);
        Ok(self.push(
            out,
            rg,
            Some(Box::new(move |g, grads| {
                accum(grads, table, k::embed_scatter(rows, d, &idx, g));
            })),
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let orig = self.value(a).shape().to_vec();
        let out = self.value(a).reshape(shape)?;
        let rg = self.needs_grad(&[a]);
        Ok(self.push(
            out,
            rg,
            Some(Box::new(move |g, grads| {
                accum(grads, a, g.reshape(&orig).unwrap());
            })),
        ))
    }

    /// Reverse sweep from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients<F>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<F>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), F::one()));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].clone() else { continue };
            if let Some(back) = &self.nodes[i].back {
                back(&g, &mut grads);
            }
        }
        Ok(Gradients {
            grads,
            param_vars: self.param_vars.clone(),
        })
    }
}
