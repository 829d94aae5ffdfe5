//! Vector-Jacobian products of the SSD map for one sequence.
//!
//! Two independent routes:
//!
//! * [`naive_ssd_backward`] differentiates the materialized mask, `O(T²)`
//!   (`O(T³)` for the decay gradient in factor mode).
//! * [`scan_ssd_backward`] runs the recurrence forwards for the states
//!   `s_i = a_i s_{i−1} + B_i ⊗ X_i` and backwards for the adjoint states
//!   `r_j = a_{j+1} r_{j+1} + C_j ⊗ dY_j`, `O(T·H·N·P)`. Then
//!   `dX_j = r_jᵀ B_j`, `dB_j = Σ_h r_j X_j`, `dC_i = Σ_h s_i dY_i`, and the
//!   derivative with respect to factor `a_k` is `⟨r_k, s_{k−1}⟩`.

use super::mask::{build_mask, DecayMode, DecaySequence};
use super::naive::check_inputs;
use crate::error::{Error, Result};
use crate::tensor::{axpy, dot, Tensor};

/// Cotangents of `(x, b, c, decay values)`.
#[derive(Clone, Debug)]
pub struct SsdGrads {
    pub dx: Tensor,
    pub db: Tensor,
    pub dc: Tensor,
    /// Gradient with respect to the stored decay values (log values in
    /// exact-exp mode, raw factors in linear-approx mode), `[H, T]`.
    pub ddecay: Tensor,
}

fn check(x: &Tensor, b: &Tensor, c: &Tensor, decay: &DecaySequence, dy: &Tensor) -> Result<(usize, usize, usize, usize)> {
    let heads = decay.heads();
    let (t, n, p) = check_inputs(x, b, c, heads)?;
    if decay.len() != t {
        return Err(Error::shape("decay length differs from sequence length"));
    }
    if dy.shape() != x.shape() {
        return Err(Error::shape("output cotangent must match x"));
    }
    Ok((t, n, p, heads))
}

pub fn naive_ssd_backward(
    x: &Tensor,
    b: &Tensor,
    c: &Tensor,
    decay: &DecaySequence,
    dy: &Tensor,
) -> Result<SsdGrads> {
    let (t, n, p, heads) = check(x, b, c, decay, dy)?;
    let hp = heads * p;
    let mask = build_mask(decay);
    let (xd, bd, cd, dyd) = (x.data(), b.data(), c.data(), dy.data());

    let mut gram = vec![0.0; t * t];
    for i in 0..t {
        for j in 0..=i {
            gram[i * t + j] = dot(&cd[i * n..(i + 1) * n], &bd[j * n..(j + 1) * n]);
        }
    }

    let mut dx = vec![0.0; t * hp];
    let mut dgram = vec![0.0; t * t];
    let mut ddecay = vec![0.0; heads * t];
    let mut dmask = vec![0.0; t * t];
    for h in 0..heads {
        let l = mask.head(h);
        for i in 0..t {
            let dyi = &dyd[i * hp + h * p..i * hp + (h + 1) * p];
            for j in 0..=i {
                let xj = &xd[j * hp + h * p..j * hp + (h + 1) * p];
                let dm = dot(dyi, xj);
                dgram[i * t + j] += l[i * t + j] * dm;
                dmask[i * t + j] = gram[i * t + j] * dm;
                axpy(
                    l[i * t + j] * gram[i * t + j],
                    dyi,
                    &mut dx[j * hp + h * p..j * hp + (h + 1) * p],
                );
            }
        }
        let dd = &mut ddecay[h * t..(h + 1) * t];
        match decay.mode() {
            DecayMode::ExactExp => {
                // d/dlog a_k of L_ij is L_ij for every pair with j < k ≤ i
                let mut row_prefix = vec![0.0; t + 1];
                let mut col_acc = vec![0.0; t + 1];
                for i in 0..t {
                    row_prefix[0] = 0.0;
                    for j in 0..i {
                        row_prefix[j + 1] = row_prefix[j] + dmask[i * t + j] * l[i * t + j];
                    }
                    // pairs (i, j<k) for every k ≤ i
                    for k in 1..=i {
                        col_acc[k] += row_prefix[k];
                    }
                }
                dd[1..t].copy_from_slice(&col_acc[1..t]);
            }
            DecayMode::LinearApprox => {
                // d/da_k of L_ij = L_ik · L_{k−1,j}
                for k in 1..t {
                    let mut s = 0.0;
                    for i in k..t {
                        for j in 0..k {
                            s += dmask[i * t + j] * l[i * t + k] * l[(k - 1) * t + j];
                        }
                    }
                    dd[k] = s;
                }
            }
        }
    }

    let mut db = vec![0.0; t * n];
    let mut dc = vec![0.0; t * n];
    for i in 0..t {
        for j in 0..=i {
            let g = dgram[i * t + j];
            if g == 0.0 {
                continue;
            }
            axpy(g, &bd[j * n..(j + 1) * n], &mut dc[i * n..(i + 1) * n]);
            axpy(g, &cd[i * n..(i + 1) * n], &mut db[j * n..(j + 1) * n]);
        }
    }

    Ok(SsdGrads {
        dx: Tensor::new(x.shape().to_vec(), dx)?,
        db: Tensor::new(b.shape().to_vec(), db)?,
        dc: Tensor::new(c.shape().to_vec(), dc)?,
        ddecay: Tensor::new(vec![heads, t], ddecay)?,
    })
}

pub fn scan_ssd_backward(
    x: &Tensor,
    b: &Tensor,
    c: &Tensor,
    decay: &DecaySequence,
    dy: &Tensor,
) -> Result<SsdGrads> {
    let (t, n, p, heads) = check(x, b, c, decay, dy)?;
    let hp = heads * p;
    let np = n * p;
    let (xd, bd, cd, dyd) = (x.data(), b.data(), c.data(), dy.data());

    let mut dx = vec![0.0; t * hp];
    let mut db = vec![0.0; t * n];
    let mut dc = vec![0.0; t * n];
    let mut ddecay = vec![0.0; heads * t];

    let mut states = vec![0.0; t * np];
    let mut adjoint = vec![0.0; np];
    for h in 0..heads {
        let factors: Vec<f64> = (0..t).map(|k| decay.factor(h, k)).collect();
        let xh = |j: usize| &xd[j * hp + h * p..j * hp + (h + 1) * p];
        let dyh = |j: usize| &dyd[j * hp + h * p..j * hp + (h + 1) * p];

        // forward states s_i
        for i in 0..t {
            let (prev, cur) = states.split_at_mut(i * np);
            let cur = &mut cur[..np];
            if i == 0 {
                cur.iter_mut().for_each(|v| *v = 0.0);
            } else {
                let prev = &prev[(i - 1) * np..];
                for (cv, &pv) in cur.iter_mut().zip(prev) {
                    *cv = factors[i] * pv;
                }
            }
            for k in 0..n {
                axpy(bd[i * n + k], xh(i), &mut cur[k * p..(k + 1) * p]);
            }
            // dC_i = Σ_p s_i[k, p] dY_i[p]
            for k in 0..n {
                dc[i * n + k] += dot(&cur[k * p..(k + 1) * p], dyh(i));
            }
        }

        // adjoint states r_j, walking backwards
        adjoint.iter_mut().for_each(|v| *v = 0.0);
        for j in (0..t).rev() {
            if j + 1 < t {
                let a = factors[j + 1];
                adjoint.iter_mut().for_each(|v| *v *= a);
            }
            for k in 0..n {
                axpy(cd[j * n + k], dyh(j), &mut adjoint[k * p..(k + 1) * p]);
            }
            let dxj = &mut dx[j * hp + h * p..j * hp + (h + 1) * p];
            for k in 0..n {
                let rk = &adjoint[k * p..(k + 1) * p];
                axpy(bd[j * n + k], rk, dxj);
                db[j * n + k] += dot(rk, xh(j));
            }
            if j >= 1 {
                let g = dot(&adjoint, &states[(j - 1) * np..j * np]);
                ddecay[h * t + j] = match decay.mode() {
                    DecayMode::ExactExp => factors[j] * g,
                    DecayMode::LinearApprox => g,
                };
            }
        }
    }

    Ok(SsdGrads {
        dx: Tensor::new(x.shape().to_vec(), dx)?,
        db: Tensor::new(b.shape().to_vec(), db)?,
        dc: Tensor::new(c.shape().to_vec(), dc)?,
        ddecay: Tensor::new(vec![heads, t], ddecay)?,
    })
}
