//! Quadratic reference evaluation `Y = (L ∘ C Bᵀ) X`.

use super::mask::{DecayMode, DecaySequence, Domain, FactorDomain, LogDomain, MaskedMatrix};
use crate::error::{Error, Result};
use crate::tensor::{axpy, dot, Tensor};

/// Checks `x [T, H·P]`, `b`/`c [T, N]` against `heads`; returns `(T, N, P)`.
pub(crate) fn check_inputs(x: &Tensor, b: &Tensor, c: &Tensor, heads: usize) -> Result<(usize, usize, usize)> {
    if x.ndim() != 2 || b.ndim() != 2 || c.ndim() != 2 {
        return Err(Error::shape("ssd inputs must be 2-D"));
    }
    let t = x.dim(0);
    if b.dim(0) != t || c.dim(0) != t {
        return Err(Error::shape(format!(
            "sequence lengths differ: x {:?}, b {:?}, c {:?}",
            x.shape(),
            b.shape(),
            c.shape()
        )));
    }
    if b.dim(1) != c.dim(1) {
        return Err(Error::shape("B and C must share the state size"));
    }
    if heads == 0 || x.dim(1) % heads != 0 {
        return Err(Error::shape(format!(
            "width {} not divisible by {heads} heads",
            x.dim(1)
        )));
    }
    Ok((t, b.dim(1), x.dim(1) / heads))
}

/// `Y_i = Σ_{j≤i} mask[i][j] · (C_i·B_j) · X_j` per head slice of `x`.
pub fn naive_ssd_forward(x: &Tensor, b: &Tensor, c: &Tensor, mask: &MaskedMatrix) -> Result<Tensor> {
    let heads = mask.heads();
    let (t, n, p) = check_inputs(x, b, c, heads)?;
    if mask.len() != t {
        return Err(Error::shape(format!(
            "mask is {}×{} but sequence has {t} steps",
            mask.len(),
            mask.len()
        )));
    }
    let hp = heads * p;
    let (xd, bd, cd) = (x.data(), b.data(), c.data());
    let mut y = vec![0.0; t * hp];
    for i in 0..t {
        let ci = &cd[i * n..(i + 1) * n];
        for j in 0..=i {
            let g = dot(ci, &bd[j * n..(j + 1) * n]);
            for h in 0..heads {
                let w = mask.head(h)[i * t + j] * g;
                axpy(
                    w,
                    &xd[j * hp + h * p..j * hp + (h + 1) * p],
                    &mut y[i * hp + h * p..i * hp + (h + 1) * p],
                );
            }
        }
    }
    Tensor::new(vec![t, hp], y)
}

/// Same semantics as [`naive_ssd_forward`] with mask rows generated on the
/// fly: `O(T²)` work, `O(T)` extra memory.
pub fn naive_ssd_streaming(x: &Tensor, b: &Tensor, c: &Tensor, decay: &DecaySequence) -> Result<Tensor> {
    match decay.mode() {
        DecayMode::ExactExp => streaming::<LogDomain>(x, b, c, decay),
        DecayMode::LinearApprox => streaming::<FactorDomain>(x, b, c, decay),
    }
}

fn streaming<D: Domain>(x: &Tensor, b: &Tensor, c: &Tensor, decay: &DecaySequence) -> Result<Tensor> {
    let heads = decay.heads();
    let (t, n, p) = check_inputs(x, b, c, heads)?;
    if decay.len() != t {
        return Err(Error::shape("decay length differs from sequence length"));
    }
    let hp = heads * p;
    let (xd, bd, cd) = (x.data(), b.data(), c.data());
    let mut y = vec![0.0; t * hp];
    let mut g = vec![0.0; t];
    for i in 0..t {
        let ci = &cd[i * n..(i + 1) * n];
        for (j, gj) in g.iter_mut().enumerate().take(i + 1) {
            *gj = dot(ci, &bd[j * n..(j + 1) * n]);
        }
        for h in 0..heads {
            let a = decay.head(h);
            let yi = &mut y[i * hp + h * p..i * hp + (h + 1) * p];
            let mut acc = D::IDENTITY;
            for j in (0..=i).rev() {
                if j < i {
                    acc = D::combine(acc, a[j + 1]);
                }
                axpy(D::weight(acc) * g[j], &xd[j * hp + h * p..j * hp + (h + 1) * p], yi);
            }
        }
    }
    Tensor::new(vec![t, hp], y)
}
