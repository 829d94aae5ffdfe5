//! Differentiable operations on [`Var`].
//!
//! Conventions: "last axis" ops treat a tensor of shape `[..., F]` as a stack
//! of rows of length `F`. Sequence ops treat `[..., T, C]` as a stack of
//! `T×C` sequences with channels last.

use std::cell::Cell;
use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tape::Var;
use crate::tensor::{axpy, dot, matmul_into, matmul_nt_into, matmul_tn_into, Tensor};

thread_local! {
    static CORRUPT_SILU: Cell<bool> = const { Cell::new(false) };
}

/// Runs `f` with the SiLU backward rule deliberately wrong (sign flipped).
/// Negative control for the gradient checkers.
#[doc(hidden)]
pub fn with_corrupted_silu_backward<R>(f: impl FnOnce() -> R) -> R {
    CORRUPT_SILU.with(|c| c.set(true));
    let out = f();
    CORRUPT_SILU.with(|c| c.set(false));
    out
}

/// Counter-based dropout mask source: one ChaCha stream per (seed, stream).
pub struct DropoutRng {
    rng: ChaCha8Rng,
}

impl DropoutRng {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        DropoutRng { rng }
    }

    fn keep(&mut self, rate: f64) -> bool {
        self.rng.random::<f64>() >= rate
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// Inverse of [`softplus`] for positive inputs.
pub fn softplus_inverse(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// tanh-form GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let inner = GELU_C * (x + 0.044715 * x * x * x);
    let th = inner.tanh();
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn rows_of(shape: &[usize]) -> (usize, usize) {
    let f = shape.last().copied().unwrap_or(1);
    let n: usize = shape.iter().product();
    (if f == 0 { 0 } else { n / f }, f)
}

impl<'t> Var<'t> {
    fn elementwise(
        self,
        f: impl Fn(f64) -> f64,
        df: impl Fn(f64, f64) -> f64 + 'static,
    ) -> Var<'t> {
        let x = self.value();
        let y = Rc::new(x.map(f));
        let y_keep = Rc::clone(&y);
        self.tape.record((*y).clone(), &[self], move |g, _| {
            let mut out = g.clone();
            for ((o, &xv), &yv) in out.data_mut().iter_mut().zip(x.data()).zip(y_keep.data()) {
                *o *= df(xv, yv);
            }
            vec![Some(out)]
        })
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        let v = self.value().zip_map(&other.value(), |a, b| a + b)?;
        Ok(self
            .tape
            .record(v, &[self, other], |g, _| vec![Some(g.clone()), Some(g.clone())]))
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        let v = self.value().zip_map(&other.value(), |a, b| a - b)?;
        Ok(self
            .tape
            .record(v, &[self, other], |g, _| vec![Some(g.clone()), Some(g.map(|x| -x))]))
    }

    /// Elementwise product.
    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        let v = a.zip_map(&b, |x, y| x * y)?;
        Ok(self.tape.record(v, &[self, other], move |g, need| {
            vec![
                need[0].then(|| g.zip_map(&b, |x, y| x * y).unwrap()),
                need[1].then(|| g.zip_map(&a, |x, y| x * y).unwrap()),
            ]
        }))
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        let v = self.value().map(|x| x * c);
        self.tape
            .record(v, &[self], move |g, _| vec![Some(g.map(|x| x * c))])
    }

    pub fn neg(self) -> Var<'t> {
        self.scale(-1.0)
    }

    /// Multiply every element by the single value held in `s` (shape `[1]`).
    pub fn mul_scalar(self, s: Var<'t>) -> Result<Var<'t>> {
        let x = self.value();
        let sv = s.value().item()?;
        let v = x.map(|a| a * sv);
        Ok(self.tape.record(v, &[self, s], move |g, need| {
            vec![
                need[0].then(|| g.map(|a| a * sv)),
                need[1].then(|| Tensor::scalar(dot(g.data(), x.data()))),
            ]
        }))
    }

    /// `self[..., F] + bias[F]`.
    pub fn add_bias(self, bias: Var<'t>) -> Result<Var<'t>> {
        let x = self.value();
        let b = bias.value();
        let (rows, f) = rows_of(x.shape());
        if b.shape() != [f] {
            return Err(Error::shape(format!(
                "bias {:?} does not match last axis of {:?}",
                b.shape(),
                x.shape()
            )));
        }
        let mut v = (*x).clone();
        for r in 0..rows {
            for (o, &bv) in v.data_mut()[r * f..(r + 1) * f].iter_mut().zip(b.data()) {
                *o += bv;
            }
        }
        Ok(self.tape.record(v, &[self, bias], move |g, need| {
            let gb = need[1].then(|| {
                let mut gb = vec![0.0; f];
                for r in 0..rows {
                    axpy(1.0, &g.data()[r * f..(r + 1) * f], &mut gb);
                }
                Tensor::from_vec(gb)
            });
            vec![need[0].then(|| g.clone()), gb]
        }))
    }

    /// `self[..., F] * s[...]`: scales each row by its own scalar.
    pub fn mul_rows(self, s: Var<'t>) -> Result<Var<'t>> {
        let x = self.value();
        let sv = s.value();
        let (rows, f) = rows_of(x.shape());
        if sv.shape() != &x.shape()[..x.ndim() - 1] {
            return Err(Error::shape(format!(
                "row scale {:?} does not match rows of {:?}",
                sv.shape(),
                x.shape()
            )));
        }
        let mut v = (*x).clone();
        for r in 0..rows {
            let k = sv.data()[r];
            v.data_mut()[r * f..(r + 1) * f].iter_mut().for_each(|o| *o *= k);
        }
        Ok(self.tape.record(v, &[self, s], move |g, need| {
            let gx = need[0].then(|| {
                let mut gx = g.clone();
                for r in 0..rows {
                    let k = sv.data()[r];
                    gx.data_mut()[r * f..(r + 1) * f].iter_mut().for_each(|o| *o *= k);
                }
                gx
            });
            let gs = need[1].then(|| {
                let d: Vec<f64> = (0..rows)
                    .map(|r| dot(&g.data()[r * f..(r + 1) * f], &x.data()[r * f..(r + 1) * f]))
                    .collect();
                Tensor::new(sv.shape().to_vec(), d).unwrap()
            });
            vec![gx, gs]
        }))
    }

    /// `self[..., K] · w[K, N]`.
    pub fn matmul(self, w: Var<'t>) -> Result<Var<'t>> {
        let x = self.value();
        let wv = w.value();
        let v = x.matmul(&wv)?;
        let (m, k) = rows_of(x.shape());
        let n = wv.dim(1);
        Ok(self.tape.record(v, &[self, w], move |g, need| {
            let gx = need[0].then(|| {
                let mut d = vec![0.0; m * k];
                matmul_nt_into(g.data(), wv.data(), &mut d, m, n, k);
                Tensor::new(x.shape().to_vec(), d).unwrap()
            });
            let gw = need[1].then(|| {
                let mut d = vec![0.0; k * n];
                matmul_tn_into(x.data(), g.data(), &mut d, m, k, n);
                Tensor::new(vec![k, n], d).unwrap()
            });
            vec![gx, gw]
        }))
    }

    /// `self[..., K] · w[N, K]ᵀ`.
    pub fn matmul_t(self, w: Var<'t>) -> Result<Var<'t>> {
        let x = self.value();
        let wv = w.value();
        let (m, k) = rows_of(x.shape());
        if wv.ndim() != 2 || wv.dim(1) != k {
            return Err(Error::shape(format!(
                "matmul_t needs [..,K]·[N,K]ᵀ, got {:?}·{:?}",
                x.shape(),
                wv.shape()
            )));
        }
        let n = wv.dim(0);
        let mut out = vec![0.0; m * n];
        matmul_nt_into(x.data(), wv.data(), &mut out, m, k, n);
        let mut shape = x.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let v = Tensor::new(shape, out)?;
        Ok(self.tape.record(v, &[self, w], move |g, need| {
            let gx = need[0].then(|| {
                let mut d = vec![0.0; m * k];
                matmul_into(g.data(), wv.data(), &mut d, m, n, k);
                Tensor::new(x.shape().to_vec(), d).unwrap()
            });
            let gw = need[1].then(|| {
                let mut d = vec![0.0; n * k];
                matmul_tn_into(g.data(), x.data(), &mut d, m, n, k);
                Tensor::new(vec![n, k], d).unwrap()
            });
            vec![gx, gw]
        }))
    }

    /// Normalizes each row over the last axis, then applies `gain`/`bias`.
    pub fn layer_norm(self, gain: Var<'t>, bias: Var<'t>, eps: f64) -> Result<Var<'t>> {
        let x = self.value();
        let (rows, f) = rows_of(x.shape());
        if f == 0 {
            return Err(Error::shape("layer_norm over an empty axis"));
        }
        if eps <= 0.0 {
            return Err(Error::Config("layer_norm eps must be positive".into()));
        }
        let gv = gain.value();
        let bv = bias.value();
        if gv.shape() != [f] || bv.shape() != [f] {
            return Err(Error::shape("layer_norm affine params must match last axis"));
        }
        let mut xhat = vec![0.0; x.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; x.len()];
        for r in 0..rows {
            let row = &x.data()[r * f..(r + 1) * f];
            let mean = row.iter().sum::<f64>() / f as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / f as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..f {
                let h = (row[c] - mean) * rs;
                xhat[r * f + c] = h;
                out[r * f + c] = h * gv.data()[c] + bv.data()[c];
            }
        }
        let v = Tensor::new(x.shape().to_vec(), out)?;
        let shape = x.shape().to_vec();
        Ok(self.tape.record(v, &[self, gain, bias], move |g, need| {
            let gd = g.data();
            let gx = need[0].then(|| {
                let mut d = vec![0.0; rows * f];
                for r in 0..rows {
                    let gh: Vec<f64> = (0..f).map(|c| gd[r * f + c] * gv.data()[c]).collect();
                    let xh = &xhat[r * f..(r + 1) * f];
                    let mean_g = gh.iter().sum::<f64>() / f as f64;
                    let mean_gx = dot(&gh, xh) / f as f64;
                    for c in 0..f {
                        d[r * f + c] = rstd[r] * (gh[c] - mean_g - xh[c] * mean_gx);
                    }
                }
                Tensor::new(shape.clone(), d).unwrap()
            });
            let gg = need[1].then(|| {
                let mut d = vec![0.0; f];
                for r in 0..rows {
                    for c in 0..f {
                        d[c] += gd[r * f + c] * xhat[r * f + c];
                    }
                }
                Tensor::from_vec(d)
            });
            let gb = need[2].then(|| {
                let mut d = vec![0.0; f];
                for r in 0..rows {
                    axpy(1.0, &gd[r * f..(r + 1) * f], &mut d);
                }
                Tensor::from_vec(d)
            });
            vec![gx, gg, gb]
        }))
    }

    /// Layer norm over the entries of each row where `mask` is nonzero, with
    /// scalar `gain`/`bias` (shape `[1]`). Masked-out entries come out as 0;
    /// a row with no valid entry is all zeros.
    pub fn masked_layer_norm(
        self,
        mask: &Tensor,
        gain: Var<'t>,
        bias: Var<'t>,
        eps: f64,
    ) -> Result<Var<'t>> {
        let x = self.value();
        x.same_shape(mask)?;
        let (rows, f) = rows_of(x.shape());
        let gv = gain.value().item()?;
        let bv = bias.value().item()?;
        let valid: Vec<bool> = mask.data().iter().map(|&m| m != 0.0).collect();
        let mut xhat = vec![0.0; x.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; x.len()];
        for r in 0..rows {
            let idx: Vec<usize> = (r * f..(r + 1) * f).filter(|&i| valid[i]).collect();
            if idx.is_empty() {
                continue;
            }
            let n = idx.len() as f64;
            let mean = idx.iter().map(|&i| x.data()[i]).sum::<f64>() / n;
            let var = idx
                .iter()
                .map(|&i| (x.data()[i] - mean).powi(2))
                .sum::<f64>()
                / n;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for &i in &idx {
                xhat[i] = (x.data()[i] - mean) * rs;
                out[i] = xhat[i] * gv + bv;
            }
        }
        let v = Tensor::new(x.shape().to_vec(), out)?;
        let shape = x.shape().to_vec();
        Ok(self.tape.record(v, &[self, gain, bias], move |g, need| {
            let gd = g.data();
            let gx = need[0].then(|| {
                let mut d = vec![0.0; rows * f];
                for r in 0..rows {
                    let idx: Vec<usize> = (r * f..(r + 1) * f).filter(|&i| valid[i]).collect();
                    if idx.is_empty() {
                        continue;
                    }
                    let n = idx.len() as f64;
                    let mean_g = idx.iter().map(|&i| gd[i] * gv).sum::<f64>() / n;
                    let mean_gx = idx.iter().map(|&i| gd[i] * gv * xhat[i]).sum::<f64>() / n;
                    for &i in &idx {
                        d[i] = rstd[r] * (gd[i] * gv - mean_g - xhat[i] * mean_gx);
                    }
                }
                Tensor::new(shape.clone(), d).unwrap()
            });
            let gg = need[1].then(|| {
                Tensor::scalar((0..gd.len()).filter(|&i| valid[i]).map(|i| gd[i] * xhat[i]).sum())
            });
            let gb = need[2]
                .then(|| Tensor::scalar((0..gd.len()).filter(|&i| valid[i]).map(|i| gd[i]).sum()));
            vec![gx, gg, gb]
        }))
    }

    /// Depthwise causal convolution over axis `-2` of `self[..., T, C]`:
    /// `out[t, c] = Σ_m x[max(t−m, 0), c] · kernel[m, c] + bias[c]`.
    ///
    /// Positions before the sequence start read position 0 (index clamp),
    /// not zeros.
    pub fn causal_conv1d(self, kernel: Var<'t>, bias: Var<'t>) -> Result<Var<'t>> {
        let x = self.value();
        let kv = kernel.value();
        let bv = bias.value();
        if x.ndim() < 2 {
            return Err(Error::shape("causal_conv1d needs [..., T, C]"));
        }
        let c = x.last_dim();
        let t = x.dim(x.ndim() - 2);
        if kv.ndim() != 2 || kv.dim(1) != c || kv.dim(0) == 0 {
            return Err(Error::shape(format!(
                "conv kernel {:?} incompatible with input {:?}",
                kv.shape(),
                x.shape()
            )));
        }
        if bv.shape() != [c] {
            return Err(Error::shape("conv bias must match channels"));
        }
        let k = kv.dim(0);
        let seqs = if t * c == 0 { 0 } else { x.len() / (t * c) };
        let mut out = vec![0.0; x.len()];
        for s in 0..seqs {
            let base = s * t * c;
            for ti in 0..t {
                let o = &mut out[base + ti * c..base + (ti + 1) * c];
                o.copy_from_slice(bv.data());
                for m in 0..k {
                    let src = ti.saturating_sub(m);
                    let xr = &x.data()[base + src * c..base + (src + 1) * c];
                    let kr = &kv.data()[m * c..(m + 1) * c];
                    for ((ov, &xv), &kw) in o.iter_mut().zip(xr).zip(kr) {
                        *ov += xv * kw;
                    }
                }
            }
        }
        let v = Tensor::new(x.shape().to_vec(), out)?;
        Ok(self.tape.record(v, &[self, kernel, bias], move |g, need| {
            let gd = g.data();
            let mut gx = need[0].then(|| vec![0.0; x.len()]);
            let mut gk = need[1].then(|| vec![0.0; k * c]);
            let mut gb = need[2].then(|| vec![0.0; c]);
            for s in 0..seqs {
                let base = s * t * c;
                for ti in 0..t {
                    let gr = &gd[base + ti * c..base + (ti + 1) * c];
                    if let Some(gb) = gb.as_mut() {
                        axpy(1.0, gr, gb);
                    }
                    for m in 0..k {
                        let src = ti.saturating_sub(m);
                        if let Some(gx) = gx.as_mut() {
                            let kr = &kv.data()[m * c..(m + 1) * c];
                            let dst = &mut gx[base + src * c..base + (src + 1) * c];
                            for ((dv, &gv), &kw) in dst.iter_mut().zip(gr).zip(kr) {
                                *dv += gv * kw;
                            }
                        }
                        if let Some(gk) = gk.as_mut() {
                            let xr = &x.data()[base + src * c..base + (src + 1) * c];
                            let dst = &mut gk[m * c..(m + 1) * c];
                            for ((dv, &gv), &xv) in dst.iter_mut().zip(gr).zip(xr) {
                                *dv += gv * xv;
                            }
                        }
                    }
                }
            }
            vec![
                gx.map(|d| Tensor::new(x.shape().to_vec(), d).unwrap()),
                gk.map(|d| Tensor::new(vec![k, c], d).unwrap()),
                gb.map(Tensor::from_vec),
            ]
        }))
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.elementwise(sigmoid, |_, y| y * (1.0 - y))
    }

    pub fn silu(self) -> Var<'t> {
        let corrupt = CORRUPT_SILU.with(Cell::get);
        self.elementwise(silu, move |x, _| {
            let s = sigmoid(x);
            let d = s * (1.0 + x * (1.0 - s));
            if corrupt {
                -d
            } else {
                d
            }
        })
    }

    pub fn gelu(self) -> Var<'t> {
        self.elementwise(gelu, |x, _| gelu_grad(x))
    }

    pub fn softplus(self) -> Var<'t> {
        self.elementwise(softplus, |x, _| sigmoid(x))
    }

    pub fn exp(self) -> Var<'t> {
        self.elementwise(f64::exp, |_, y| y)
    }

    /// Inverted dropout: survivors scaled by `1/(1−rate)` in training,
    /// identity otherwise.
    pub fn dropout(self, rate: f64, train: bool, rng: &mut DropoutRng) -> Result<Var<'t>> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate {rate} outside [0, 1)")));
        }
        if !train || rate == 0.0 {
            return Ok(self);
        }
        let x = self.value();
        let scale = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = (0..x.len())
            .map(|_| if rng.keep(rate) { scale } else { 0.0 })
            .collect();
        let v = Tensor::new(
            x.shape().to_vec(),
            x.data().iter().zip(&mask).map(|(a, m)| a * m).collect(),
        )?;
        Ok(self.tape.record(v, &[self], move |g, _| {
            let d = g.data().iter().zip(&mask).map(|(a, m)| a * m).collect();
            vec![Some(Tensor::new(g.shape().to_vec(), d).unwrap())]
        }))
    }

    /// Softmax over the last axis (max-subtracted).
    pub fn softmax(self) -> Var<'t> {
        let x = self.value();
        let (rows, f) = rows_of(x.shape());
        let mut y = vec![0.0; x.len()];
        for r in 0..rows {
            softmax_row(&x.data()[r * f..(r + 1) * f], &mut y[r * f..(r + 1) * f]);
        }
        let y = Rc::new(Tensor::new(x.shape().to_vec(), y).unwrap());
        let yk = Rc::clone(&y);
        self.tape.record((*y).clone(), &[self], move |g, _| {
            let mut d = vec![0.0; g.len()];
            for r in 0..rows {
                let yr = &yk.data()[r * f..(r + 1) * f];
                let gr = &g.data()[r * f..(r + 1) * f];
                let s = dot(gr, yr);
                for c in 0..f {
                    d[r * f + c] = yr[c] * (gr[c] - s);
                }
            }
            vec![Some(Tensor::new(g.shape().to_vec(), d).unwrap())]
        })
    }

    /// Mean cross-entropy of `self[B, V]` logits against `targets`, with
    /// column 0 (padding) excluded from the softmax.
    pub fn cross_entropy(self, targets: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        if x.ndim() != 2 || x.dim(0) != targets.len() {
            return Err(Error::shape(format!(
                "cross_entropy needs [B, V] logits for {} targets, got {:?}",
                targets.len(),
                x.shape()
            )));
        }
        let (b, v) = (x.dim(0), x.dim(1));
        if targets.is_empty() {
            return Err(Error::Data("cross_entropy over an empty batch".into()));
        }
        if let Some(&t) = targets.iter().find(|&&t| t == 0 || t >= v) {
            return Err(Error::Data(format!("invalid target id {t}")));
        }
        let mut probs = vec![0.0; b * v];
        let mut loss = 0.0;
        for r in 0..b {
            let row = &x.data()[r * v..(r + 1) * v];
            let p = &mut probs[r * v..(r + 1) * v];
            softmax_row(&row[1..], &mut p[1..]);
            let max = row[1..].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row[1..].iter().map(|z| (z - max).exp()).sum::<f64>().ln();
            loss += lse - row[targets[r]];
        }
        let targets = targets.to_vec();
        let v_out = Tensor::scalar(loss / b as f64);
        Ok(self.tape.record(v_out, &[self], move |g, _| {
            let scale = g.data()[0] / b as f64;
            let mut d = probs.clone();
            for (r, &t) in targets.iter().enumerate() {
                d[r * v + t] -= 1.0;
            }
            d.iter_mut().for_each(|z| *z *= scale);
            vec![Some(Tensor::new(vec![b, v], d).unwrap())]
        }))
    }

    pub fn sum(self) -> Var<'t> {
        let x = self.value();
        let shape = x.shape().to_vec();
        self.tape.record(Tensor::scalar(x.sum()), &[self], move |g, _| {
            vec![Some(Tensor::full(&shape, g.data()[0]))]
        })
    }

    pub fn mean(self) -> Var<'t> {
        let n = self.value().len().max(1) as f64;
        self.sum().scale(1.0 / n)
    }

    /// Slice `[start, start+len)` of the last axis.
    pub fn narrow(self, start: usize, len: usize) -> Result<Var<'t>> {
        let x = self.value();
        let (rows, f) = rows_of(x.shape());
        if start + len > f {
            return Err(Error::shape(format!(
                "narrow {start}+{len} exceeds last axis {f}"
            )));
        }
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&x.data()[r * f + start..r * f + start + len]);
        }
        let mut shape = x.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        let in_shape = x.shape().to_vec();
        let v = Tensor::new(shape, out)?;
        Ok(self.tape.record(v, &[self], move |g, _| {
            let mut d = vec![0.0; rows * f];
            for r in 0..rows {
                d[r * f + start..r * f + start + len]
                    .copy_from_slice(&g.data()[r * len..(r + 1) * len]);
            }
            vec![Some(Tensor::new(in_shape.clone(), d).unwrap())]
        }))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        let v = x.reshape(shape)?;
        let in_shape = x.shape().to_vec();
        Ok(self.tape.record(v, &[self], move |g, _| {
            vec![Some(g.reshape(&in_shape).unwrap())]
        }))
    }

    /// `self[B, T, F] -> [B, F]` at step `t`.
    pub fn take_step(self, t: usize) -> Result<Var<'t>> {
        let x = self.value();
        if x.ndim() != 3 || t >= x.dim(1) {
            return Err(Error::shape(format!("take_step {t} on {:?}", x.shape())));
        }
        let (b, steps, f) = (x.dim(0), x.dim(1), x.dim(2));
        let mut out = Vec::with_capacity(b * f);
        for bi in 0..b {
            let off = (bi * steps + t) * f;
            out.extend_from_slice(&x.data()[off..off + f]);
        }
        let v = Tensor::new(vec![b, f], out)?;
        Ok(self.tape.record(v, &[self], move |g, _| {
            let mut d = vec![0.0; b * steps * f];
            for bi in 0..b {
                let off = (bi * steps + t) * f;
                d[off..off + f].copy_from_slice(&g.data()[bi * f..(bi + 1) * f]);
            }
            vec![Some(Tensor::new(vec![b, steps, f], d).unwrap())]
        }))
    }

    /// Block `[r0, r0+rows) × [c0, c0+cols)` of a matrix.
    pub fn submatrix(self, r0: usize, c0: usize, rows: usize, cols: usize) -> Result<Var<'t>> {
        let x = self.value();
        if x.ndim() != 2 || r0 + rows > x.dim(0) || c0 + cols > x.dim(1) {
            return Err(Error::shape(format!(
                "submatrix ({r0},{c0},{rows},{cols}) of {:?}",
                x.shape()
            )));
        }
        let n = x.dim(1);
        let mut out = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            out.extend_from_slice(&x.data()[(r0 + r) * n + c0..(r0 + r) * n + c0 + cols]);
        }
        let full = x.shape().to_vec();
        let v = Tensor::new(vec![rows, cols], out)?;
        Ok(self.tape.record(v, &[self], move |g, _| {
            let mut d = Tensor::zeros(&full);
            for r in 0..rows {
                d.data_mut()[(r0 + r) * n + c0..(r0 + r) * n + c0 + cols]
                    .copy_from_slice(&g.data()[r * cols..(r + 1) * cols]);
            }
            vec![Some(d)]
        }))
    }

    /// Row lookup `table[ids]`, output shape `lead ++ [D]`.
    pub fn gather_rows(table: Var<'t>, ids: &[usize], lead: &[usize]) -> Result<Var<'t>> {
        let tv = table.value();
        if tv.ndim() != 2 {
            return Err(Error::shape("gather_rows needs a 2-D table"));
        }
        if lead.iter().product::<usize>() != ids.len() {
            return Err(Error::shape("gather_rows lead shape does not match ids"));
        }
        let (rows, d) = (tv.dim(0), tv.dim(1));
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(Error::Data(format!("id {bad} out of range for {rows} rows")));
        }
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&tv.data()[i * d..(i + 1) * d]);
        }
        let mut shape = lead.to_vec();
        shape.push(d);
        let ids = ids.to_vec();
        let v = Tensor::new(shape, out)?;
        Ok(table.tape.record(v, &[table], move |g, _| {
            let mut grad = vec![0.0; rows * d];
            for (k, &i) in ids.iter().enumerate() {
                axpy(1.0, &g.data()[k * d..(k + 1) * d], &mut grad[i * d..(i + 1) * d]);
            }
            vec![Some(Tensor::new(vec![rows, d], grad).unwrap())]
        }))
    }

    /// Per-head decay exponents: `out[b, h, t] = a[h] · self[b, t]`.
    pub fn head_outer(self, a: Var<'t>) -> Result<Var<'t>> {
        let x = self.value();
        let av = a.value();
        if x.ndim() != 2 || av.ndim() != 1 {
            return Err(Error::shape("head_outer needs [B, T] and [H]"));
        }
        let (b, t, h) = (x.dim(0), x.dim(1), av.dim(0));
        let mut out = vec![0.0; b * h * t];
        for bi in 0..b {
            for hi in 0..h {
                for ti in 0..t {
                    out[(bi * h + hi) * t + ti] = av.data()[hi] * x.data()[bi * t + ti];
                }
            }
        }
        let v = Tensor::new(vec![b, h, t], out)?;
        Ok(self.tape.record(v, &[self, a], move |g, need| {
            let gd = g.data();
            let gx = need[0].then(|| {
                let mut d = vec![0.0; b * t];
                for bi in 0..b {
                    for hi in 0..h {
                        let ah = av.data()[hi];
                        for ti in 0..t {
                            d[bi * t + ti] += gd[(bi * h + hi) * t + ti] * ah;
                        }
                    }
                }
                Tensor::new(vec![b, t], d).unwrap()
            });
            let ga = need[1].then(|| {
                let mut d = vec![0.0; h];
                for bi in 0..b {
                    for (hi, dh) in d.iter_mut().enumerate() {
                        *dh += dot(
                            &gd[(bi * h + hi) * t..(bi * h + hi + 1) * t],
                            &x.data()[bi * t..(bi + 1) * t],
                        );
                    }
                }
                Tensor::from_vec(d)
            });
            vec![gx, ga]
        }))
    }
}

pub(crate) fn softmax_row(x: &[f64], out: &mut [f64]) {
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for (o, &v) in out.iter_mut().zip(x) {
        *o = (v - max).exp();
        s += *o;
    }
    out.iter_mut().for_each(|o| *o /= s);
}

/// Plain (non-differentiable) softmax of a vector.
pub fn softmax(x: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    softmax_row(x, &mut out);
    out
}
