//! Forward and backward compute kernels on plain tensors.
//!
//! The tape records which kernel produced a value; these functions do the
//! actual arithmetic for both the differentiable path and inference.

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

pub fn binary<F: Scalar>(a: &Tensor<F>, b: &Tensor<F>, kind: BinaryKind) -> Result<Tensor<F>> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch(format!(
            "elementwise {:?}: {:?} vs {:?}",
            kind,
            a.shape(),
            b.shape()
        )));
    }
    if kind == BinaryKind::Div && b.data().iter().any(|v| *v == F::zero()) {
        return Err(Error::DivisionByZero);
    }
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| match kind {
            BinaryKind::Add => x + y,
            BinaryKind::Sub => x - y,
            BinaryKind::Mul => x * y,
            BinaryKind::Div => x / y,
        })
        .collect();
    Tensor::from_vec(a.shape().to_vec(), data)
}

pub fn scale<F: Scalar>(a: &Tensor<F>, s: F) -> Tensor<F> {
    a.map(|v| v * s)
}

/// `[m,k] x [k,n] -> [m,n]`.
pub fn matmul<F: Scalar>(a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
        return Err(Error::ShapeMismatch(format!(
            "matmul {:?} x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[1];
    let mut out = vec![F::zero(); m * n];
    let ad = a.data();
    let bd = b.data();
    for i in 0..m {
        let arow = &ad[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &bd[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::from_vec(vec![m, n], out)
}

/// `[m,k]^T x [m,n] -> [k,n]`; used by matmul backward without materializing transposes.
pub fn matmul_tn<F: Scalar>(a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[1];
    if b.shape()[0] != m {
        return Err(Error::ShapeMismatch("matmul_tn".into()));
    }
    let mut out = vec![F::zero(); k * n];
    for i in 0..m {
        let arow = &a.data()[i * k..(i + 1) * k];
        let brow = &b.data()[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::from_vec(vec![k, n], out)
}

/// `[m,k] x [n,k]^T -> [m,n]`.
pub fn matmul_nt<F: Scalar>(a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[0];
    if b.shape()[1] != k {
        return Err(Error::ShapeMismatch("matmul_nt".into()));
    }
    let mut out = vec![F::zero(); m * n];
    for i in 0..m {
        let arow = &a.data()[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b.data()[j * k..(j + 1) * k];
            let mut s = F::zero();
            for (&av, &bv) in arow.iter().zip(brow) {
                s += av * bv;
            }
            out[i * n + j] = s;
        }
    }
    Tensor::from_vec(vec![m, n], out)
}

pub fn conv1d_out_len(l: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    if stride < 1 {
        return Err(Error::InvalidArgument("conv1d stride must be >= 1".into()));
    }
    if k > l + 2 * pad {
        return Err(Error::InvalidArgument(format!(
            "conv1d kernel {} exceeds padded length {}",
            k,
            l + 2 * pad
        )));
    }
    let lo = (l + 2 * pad - k) / stride + 1;
    if lo == 0 {
        return Err(Error::InvalidArgument("conv1d empty output".into()));
    }
    Ok(lo)
}

fn pad_row<F: Scalar>(row: &[F], pad: usize) -> Vec<F> {
    let mut p = vec![F::zero(); row.len() + 2 * pad];
    p[pad..pad + row.len()].copy_from_slice(row);
    p
}

/// Batched 1-D convolution. `x [N,Ci,L]`, `w [Co,Ci,k]`, `bias [Co]` -> `[N,Co,Lo]`.
pub fn conv1d<F: Scalar>(
    x: &Tensor<F>,
    w: &Tensor<F>,
    bias: &Tensor<F>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<F>> {
    let (n, ci, l) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (co, wci, k) = (w.shape()[0], w.shape()[1], w.shape()[2]);
    if wci != ci || bias.shape() != [co] {
        return Err(Error::ShapeMismatch(format!(
            "conv1d x {:?} w {:?} bias {:?}",
            x.shape(),
            w.shape(),
            bias.shape()
        )));
    }
    let lo = conv1d_out_len(l, k, stride, pad)?;
    let mut out = vec![F::zero(); n * co * lo];
    let mut padded = vec![F::zero(); ci * (l + 2 * pad)];
    let lp = l + 2 * pad;
    for b in 0..n {
        for c in 0..ci {
            let row = &x.data()[(b * ci + c) * l..(b * ci + c + 1) * l];
            padded[c * lp + pad..c * lp + pad + l].copy_from_slice(row);
            if pad > 0 {
                for v in &mut padded[c * lp..c * lp + pad] {
                    *v = F::zero();
                }
                for v in &mut padded[c * lp + pad + l..(c + 1) * lp] {
                    *v = F::zero();
                }
            }
        }
        for oc in 0..co {
            let orow = &mut out[(b * co + oc) * lo..(b * co + oc + 1) * lo];
            let bv = bias.data()[oc];
            for o in orow.iter_mut() {
                *o = bv;
            }
            for c in 0..ci {
                let prow = &padded[c * lp..(c + 1) * lp];
                for kk in 0..k {
                    let wv = w.data()[(oc * ci + c) * k + kk];
                    if stride == 1 {
                        let src = &prow[kk..kk + lo];
                        for (o, &pv) in orow.iter_mut().zip(src) {
                            *o += wv * pv;
                        }
                    } else {
                        for (t, o) in orow.iter_mut().enumerate() {
                            *o += wv * prow[t * stride + kk];
                        }
                    }
                }
            }
        }
    }
    Tensor::from_vec(vec![n, co, lo], out)
}

/// Gradients of conv1d w.r.t. input, weight, and bias.
pub fn conv1d_backward<F: Scalar>(
    x: &Tensor<F>,
    w: &Tensor<F>,
    grad_out: &Tensor<F>,
    stride: usize,
    pad: usize,
) -> (Tensor<F>, Tensor<F>, Tensor<F>) {
    let (n, ci, l) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (co, _, k) = (w.shape()[0], w.shape()[1], w.shape()[2]);
    let lo = grad_out.shape()[2];
    let lp = l + 2 * pad;

    let mut dx = vec![F::zero(); n * ci * l];
    let mut dw = vec![F::zero(); co * ci * k];
    let mut db = vec![F::zero(); co];
    let mut dpad = vec![F::zero(); ci * lp];
    for b in 0..n {
        for v in dpad.iter_mut() {
            *v = F::zero();
        }
        for oc in 0..co {
            let grow = &grad_out.data()[(b * co + oc) * lo..(b * co + oc + 1) * lo];
            db[oc] += grow.iter().copied().sum();
            for c in 0..ci {
                let xrow = pad_row(&x.data()[(b * ci + c) * l..(b * ci + c + 1) * l], pad);
                let drow = &mut dpad[c * lp..(c + 1) * lp];
                for kk in 0..k {
                    let mut ws = F::zero();
                    let wv = w.data()[(oc * ci + c) * k + kk];
                    if stride == 1 {
                        for (t, &gv) in grow.iter().enumerate() {
                            ws += gv * xrow[t + kk];
                            drow[t + kk] += wv * gv;
                        }
                    } else {
                        for (t, &gv) in grow.iter().enumerate() {
                            ws += gv * xrow[t * stride + kk];
                            drow[t * stride + kk] += wv * gv;
                        }
                    }
                    dw[(oc * ci + c) * k + kk] += ws;
                }
            }
        }
        for c in 0..ci {
            let drow = &dpad[c * lp..(c + 1) * lp];
            let out = &mut dx[(b * ci + c) * l..(b * ci + c + 1) * l];
            for (o, &dv) in out.iter_mut().zip(&drow[pad..pad + l]) {
                *o += dv;
            }
        }
    }
    (
        Tensor::from_vec(vec![n, ci, l], dx).unwrap(),
        Tensor::from_vec(vec![co, ci, k], dw).unwrap(),
        Tensor::from_vec(vec![co], db).unwrap(),
    )
}

/// Saved statistics from the group-norm forward pass.
#[derive(Debug, Clone)]
pub struct GroupNormStats<F> {
    pub mean: Vec<F>,    // [N*G]
    pub inv_std: Vec<F>, // [N*G]
}

/// Group normalization over `[N,C,L]` with trained per-channel affine.
pub fn group_norm<F: Scalar>(
    x: &Tensor<F>,
    groups: usize,
    gamma: &Tensor<F>,
    beta: &Tensor<F>,
    eps: F,
) -> Result<(Tensor<F>, GroupNormStats<F>)> {
    let (n, c, l) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    if c % groups != 0 {
        return Err(Error::InvalidArgument(format!(
            "group_norm: {} channels not divisible by {} groups",
            c, groups
        )));
    }
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::ShapeMismatch("group_norm affine".into()));
    }
    if eps <= F::zero() {
        return Err(Error::InvalidArgument("group_norm eps must be > 0".into()));
    }
    let cg = c / groups;
    let gsize = cg * l;
    let mut out = vec![F::zero(); n * c * l];
    let mut mean = vec![F::zero(); n * groups];
    let mut inv_std = vec![F::zero(); n * groups];
    let gs_f = F::of_f64(gsize as f64);
    for b in 0..n {
        for g in 0..groups {
            let start = (b * c + g * cg) * l;
            let seg = &x.data()[start..start + gsize];
            let mu = seg.iter().copied().sum::<F>() / gs_f;
            let var = seg.iter().map(|&v| (v - mu) * (v - mu)).sum::<F>() / gs_f;
            let inv = F::one() / (var + eps).sqrt();
            mean[b * groups + g] = mu;
            inv_std[b * groups + g] = inv;
            for cc in 0..cg {
                let ch = g * cg + cc;
                let ga = gamma.data()[ch];
                let be = beta.data()[ch];
                let xrow = &x.data()[(b * c + ch) * l..(b * c + ch + 1) * l];
                let orow = &mut out[(b * c + ch) * l..(b * c + ch + 1) * l];
                for (o, &v) in orow.iter_mut().zip(xrow) {
                    *o = ga * (v - mu) * inv + be;
                }
            }
        }
    }
    Ok((
        Tensor::from_vec(vec![n, c, l], out)?,
        GroupNormStats { mean, inv_std },
    ))
}

pub fn group_norm_backward<F: Scalar>(
    x: &Tensor<F>,
    groups: usize,
    gamma: &Tensor<F>,
    stats: &GroupNormStats<F>,
    grad_out: &Tensor<F>,
) -> (Tensor<F>, Tensor<F>, Tensor<F>) {
    let (n, c, l) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let cg = c / groups;
    let gsize = cg * l;
    let gs_f = F::of_f64(gsize as f64);
    let mut dx = vec![F::zero(); n * c * l];
    let mut dgamma = vec![F::zero(); c];
    let mut dbeta = vec![F::zero(); c];
    for b in 0..n {
        for g in 0..groups {
            let mu = stats.mean[b * groups + g];
            let inv = stats.inv_std[b * groups + g];
            // group-level sums of dy*gamma and dy*gamma*xhat
            let mut s1 = F::zero();
            let mut s2 = F::zero();
            for cc in 0..cg {
                let ch = g * cg + cc;
                let ga = gamma.data()[ch];
                let xrow = &x.data()[(b * c + ch) * l..(b * c + ch + 1) * l];
                let grow = &grad_out.data()[(b * c + ch) * l..(b * c + ch + 1) * l];
                for (&xv, &gv) in xrow.iter().zip(grow) {
                    let xhat = (xv - mu) * inv;
                    dgamma[ch] += gv * xhat;
                    dbeta[ch] += gv;
                    s1 += gv * ga;
                    s2 += gv * ga * xhat;
                }
            }
            let m1 = s1 / gs_f;
            let m2 = s2 / gs_f;
            for cc in 0..cg {
                let ch = g * cg + cc;
                let ga = gamma.data()[ch];
                let xrow = &x.data()[(b * c + ch) * l..(b * c + ch + 1) * l];
                let grow = &grad_out.data()[(b * c + ch) * l..(b * c + ch + 1) * l];
                let drow = &mut dx[(b * c + ch) * l..(b * c + ch + 1) * l];
                for ((o, &xv), &gv) in drow.iter_mut().zip(xrow).zip(grow) {
                    let xhat = (xv - mu) * inv;
                    *o = inv * (gv * ga - m1 - xhat * m2);
                }
            }
        }
    }
    (
        Tensor::from_vec(vec![n, c, l], dx).unwrap(),
        Tensor::from_vec(vec![c], dgamma).unwrap(),
        Tensor::from_vec(vec![c], dbeta).unwrap(),
    )
}

fn sigmoid<F: Scalar>(v: F) -> F {
    F::one() / (F::one() + (-v).exp())
}

pub fn silu<F: Scalar>(x: &Tensor<F>) -> Tensor<F> {
    x.map(|v| v * sigmoid(v))
}

pub fn silu_backward<F: Scalar>(x: &Tensor<F>, grad_out: &Tensor<F>) -> Tensor<F> {
    let data = x
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&v, &g)| {
            let s = sigmoid(v);
            g * s * (F::one() + v * (F::one() - s))
        })
        .collect();
    Tensor::from_vec(x.shape().to_vec(), data).unwrap()
}

/// Mean cross-entropy of `logits [N,K]` against label-smoothed targets.
///
/// Smoothed target row: `s/K` everywhere plus `1-s` on the true class.
pub fn softmax_xent<F: Scalar>(
    logits: &Tensor<F>,
    targets: &[usize],
    smoothing: f64,
) -> Result<(F, Tensor<F>)> {
    let (n, k) = (logits.shape()[0], logits.shape()[1]);
    if targets.len() != n {
        return Err(Error::ShapeMismatch("softmax_xent target count".into()));
    }
    if !(0.0..1.0).contains(&smoothing) {
        return Err(Error::InvalidArgument("smoothing must be in [0,1)".into()));
    }
    if let Some(t) = targets.iter().find(|&&t| t >= k) {
        return Err(Error::InvalidArgument(format!(
            "label {} out of range [0,{})",
            t, k
        )));
    }
    let s = F::of_f64(smoothing);
    let sk = s / F::of_f64(k as f64);
    let mut probs = vec![F::zero(); n * k];
    let mut loss = F::zero();
    for i in 0..n {
        let row = &logits.data()[i * k..(i + 1) * k];
        let mx = row.iter().copied().fold(F::neg_infinity(), F::max);
        let mut denom = F::zero();
        for (p, &v) in probs[i * k..(i + 1) * k].iter_mut().zip(row) {
            *p = (v - mx).exp();
            denom += *p;
        }
        let log_denom = denom.ln();
        for (j, p) in probs[i * k..(i + 1) * k].iter_mut().enumerate() {
            *p /= denom;
            let logp = row[j] - mx - log_denom;
            let mut q = sk;
            if j == targets[i] {
                q += F::one() - s;
            }
            loss -= q * logp;
        }
    }
    Ok((loss / F::of_f64(n as f64), Tensor::from_vec(vec![n, k], probs)?))
}

pub fn softmax_xent_backward<F: Scalar>(
    probs: &Tensor<F>,
    targets: &[usize],
    smoothing: f64,
    grad_out: F,
) -> Tensor<F> {
    let (n, k) = (probs.shape()[0], probs.shape()[1]);
    let s = F::of_f64(smoothing);
    let sk = s / F::of_f64(k as f64);
    let inv_n = grad_out / F::of_f64(n as f64);
    let mut d = vec![F::zero(); n * k];
    for i in 0..n {
        for j in 0..k {
            let mut q = sk;
            if j == targets[i] {
                q += F::one() - s;
            }
            d[i * k + j] = (probs.data()[i * k + j] - q) * inv_n;
        }
    }
    Tensor::from_vec(vec![n, k], d).unwrap()
}

/// Mean squared error over all elements.
pub fn mse<F: Scalar>(a: &Tensor<F>, b: &Tensor<F>) -> Result<F> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch(format!(
            "mse {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let n = F::of_f64(a.numel() as f64);
    let s: F = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x - y) * (x - y))
        .sum();
    Ok(s / n)
}

pub fn mse_backward<F: Scalar>(a: &Tensor<F>, b: &Tensor<F>, grad_out: F) -> Tensor<F> {
    let two_over_n = grad_out * F::of_f64(2.0 / a.numel() as f64);
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x - y) * two_over_n)
        .collect();
    Tensor::from_vec(a.shape().to_vec(), data).unwrap()
}

/// Concatenate along the channel axis of `[N,C,L]` tensors.
pub fn concat_channels<F: Scalar>(a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    let (n, c1, l) = (a.shape()[0], a.shape()[1], a.shape()[2]);
    let (n2, c2, l2) = (b.shape()[0], b.shape()[1], b.shape()[2]);
    if n != n2 || l != l2 {
        return Err(Error::ShapeMismatch(format!(
            "concat_channels {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = vec![F::zero(); n * (c1 + c2) * l];
    for i in 0..n {
        out[i * (c1 + c2) * l..i * (c1 + c2) * l + c1 * l]
            .copy_from_slice(&a.data()[i * c1 * l..(i + 1) * c1 * l]);
        out[i * (c1 + c2) * l + c1 * l..(i + 1) * (c1 + c2) * l]
            .copy_from_slice(&b.data()[i * c2 * l..(i + 1) * c2 * l]);
    }
    Tensor::from_vec(vec![n, c1 + c2, l], out)
}

pub fn split_channels<F: Scalar>(g: &Tensor<F>, c1: usize) -> (Tensor<F>, Tensor<F>) {
    let (n, c, l) = (g.shape()[0], g.shape()[1], g.shape()[2]);
    let c2 = c - c1;
    let mut a = vec![F::zero(); n * c1 * l];
    let mut b = vec![F::zero(); n * c2 * l];
    for i in 0..n {
        a[i * c1 * l..(i + 1) * c1 * l].copy_from_slice(&g.data()[i * c * l..i * c * l + c1 * l]);
        b[i * c2 * l..(i + 1) * c2 * l]
            .copy_from_slice(&g.data()[i * c * l + c1 * l..(i + 1) * c * l]);
    }
    (
        Tensor::from_vec(vec![n, c1, l], a).unwrap(),
        Tensor::from_vec(vec![n, c2, l], b).unwrap(),
    )
}

/// Nearest-neighbor 2x upsampling along time.
pub fn upsample2<F: Scalar>(x: &Tensor<F>) -> Tensor<F> {
    let (n, c, l) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let mut out = vec![F::zero(); n * c * 2 * l];
    for r in 0..n * c {
        let xrow = &x.data()[r * l..(r + 1) * l];
        let orow = &mut out[r * 2 * l..(r + 1) * 2 * l];
        for (t, &v) in xrow.iter().enumerate() {
            orow[2 * t] = v;
            orow[2 * t + 1] = v;
        }
    }
    Tensor::from_vec(vec![n, c, 2 * l], out).unwrap()
}

pub fn upsample2_backward<F: Scalar>(grad_out: &Tensor<F>) -> Tensor<F> {
    let (n, c, l2) = (
        grad_out.shape()[0],
        grad_out.shape()[1],
        grad_out.shape()[2],
    );
    let l = l2 / 2;
    let mut dx = vec![F::zero(); n * c * l];
    for r in 0..n * c {
        let grow = &grad_out.data()[r * l2..(r + 1) * l2];
        let drow = &mut dx[r * l..(r + 1) * l];
        for (t, o) in drow.iter_mut().enumerate() {
            *o = grow[2 * t] + grow[2 * t + 1];
        }
    }
    Tensor::from_vec(vec![n, c, l], dx).unwrap()
}

/// `h [N,C,L] * (1 + scale [N,C]) + shift [N,C]`, broadcast over time.
pub fn channel_affine<F: Scalar>(
    h: &Tensor<F>,
    scale: &Tensor<F>,
    shift: &Tensor<F>,
) -> Result<Tensor<F>> {
    let (n, c, l) = (h.shape()[0], h.shape()[1], h.shape()[2]);
    if scale.shape() != [n, c] || shift.shape() != [n, c] {
        return Err(Error::ShapeMismatch("channel_affine".into()));
    }
    let mut out = vec![F::zero(); n * c * l];
    for r in 0..n * c {
        let s = F::one() + scale.data()[r];
        let sh = shift.data()[r];
        let hrow = &h.data()[r * l..(r + 1) * l];
        let orow = &mut out[r * l..(r + 1) * l];
        for (o, &v) in orow.iter_mut().zip(hrow) {
            *o = v * s + sh;
        }
    }
    Tensor::from_vec(vec![n, c, l], out)
}

pub fn channel_affine_backward<F: Scalar>(
    h: &Tensor<F>,
    scale: &Tensor<F>,
    grad_out: &Tensor<F>,
) -> (Tensor<F>, Tensor<F>, Tensor<F>) {
    let (n, c, l) = (h.shape()[0], h.shape()[1], h.shape()[2]);
    let mut dh = vec![F::zero(); n * c * l];
    let mut dscale = vec![F::zero(); n * c];
    let mut dshift = vec![F::zero(); n * c];
    for r in 0..n * c {
        let s = F::one() + scale.data()[r];
        let hrow = &h.data()[r * l..(r + 1) * l];
        let grow = &grad_out.data()[r * l..(r + 1) * l];
        let drow = &mut dh[r * l..(r + 1) * l];
        let mut ds = F::zero();
        let mut dsh = F::zero();
        for ((o, &hv), &gv) in drow.iter_mut().zip(hrow).zip(grow) {
            *o = gv * s;
            ds += gv * hv;
            dsh += gv;
        }
        dscale[r] = ds;
        dshift[r] = dsh;
    }
    (
        Tensor::from_vec(vec![n, c, l], dh).unwrap(),
        Tensor::from_vec(vec![n, c], dscale).unwrap(),
        Tensor::from_vec(vec![n, c], dshift).unwrap(),
    )
}

/// `h [N,C,L] + v [N,C]` broadcast over time.
pub fn add_channel_vec<F: Scalar>(h: &Tensor<F>, v: &Tensor<F>) -> Result<Tensor<F>> {
    let (n, c, l) = (h.shape()[0], h.shape()[1], h.shape()[2]);
    if v.shape() != [n, c] {
        return Err(Error::ShapeMismatch("add_channel_vec".into()));
    }
    let mut out = h.data().to_vec();
    for r in 0..n * c {
        let b = v.data()[r];
        for o in &mut out[r * l..(r + 1) * l] {
            *o += b;
        }
    }
    Tensor::from_vec(vec![n, c, l], out)
}

pub fn sum_over_time<F: Scalar>(grad_out: &Tensor<F>) -> Tensor<F> {
    let (n, c, l) = (
        grad_out.shape()[0],
        grad_out.shape()[1],
        grad_out.shape()[2],
    );
    let mut dv = vec![F::zero(); n * c];
    for r in 0..n * c {
        dv[r] = grad_out.data()[r * l..(r + 1) * l].iter().copied().sum();
    }
    Tensor::from_vec(vec![n, c], dv).unwrap()
}

/// `v [N,D] -> [N,D,L]` tiled along time.
pub fn tile_time<F: Scalar>(v: &Tensor<F>, l: usize) -> Tensor<F> {
    let (n, d) = (v.shape()[0], v.shape()[1]);
    let mut out = vec![F::zero(); n * d * l];
    for r in 0..n * d {
        let val = v.data()[r];
        for o in &mut out[r * l..(r + 1) * l] {
            *o = val;
        }
    }
    Tensor::from_vec(vec![n, d, l], out).unwrap()
}

/// `x [N,Din] @ w [Din,Dout] + bias [Dout]`.
pub fn linear<F: Scalar>(x: &Tensor<F>, w: &Tensor<F>, bias: &Tensor<F>) -> Result<Tensor<F>> {
    let mut y = matmul(x, w)?;
    let (n, dout) = (y.shape()[0], y.shape()[1]);
    if bias.shape() != [dout] {
        return Err(Error::ShapeMismatch("linear bias".into()));
    }
    for i in 0..n {
        for j in 0..dout {
            y.data_mut()[i * dout + j] += bias.data()[j];
        }
    }
    Ok(y)
}

/// Row gather: `table [R,D]` indexed by `idx` -> `[N,D]`.
pub fn embed_gather<F: Scalar>(table: &Tensor<F>, idx: &[usize]) -> Result<Tensor<F>> {
    let (r, d) = (table.shape()[0], table.shape()[1]);
    let mut out = vec![F::zero(); idx.len() * d];
    for (i, &row) in idx.iter().enumerate() {
        if row >= r {
            return Err(Error::InvalidArgument(format!(
                "embedding row {} out of range [0,{})",
                row, r
            )));
        }
        out[i * d..(i + 1) * d].copy_from_slice(&table.data()[row * d..(row + 1) * d]);
    }
    Tensor::from_vec(vec![idx.len(), d], out)
}

pub fn embed_scatter<F: Scalar>(
    rows: usize,
    d: usize,
    idx: &[usize],
    grad_out: &Tensor<F>,
) -> Tensor<F> {
    let mut dt = vec![F::zero(); rows * d];
    for (i, &row) in idx.iter().enumerate() {
        let g = &grad_out.data()[i * d..(i + 1) * d];
        for (o, &gv) in dt[row * d..(row + 1) * d].iter_mut().zip(g) {
            *o += gv;
        }
    }
    Tensor::from_vec(vec![rows, d], dt).unwrap()
}
