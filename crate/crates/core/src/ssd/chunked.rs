//! Linear-time blocked evaluation of the semiseparable product.
//!
//! The sequence is cut into chunks of length `Q`. Inside a chunk the mask is
//! small and dense, so the exact quadratic form is cheap. Across chunks the
//! mask factorizes through a recurrent state of shape `[H, N, P]`:
//!
//! ```text
//! y_i   = Σ_{j in chunk, j≤i} L_ij (C_i·B_j) X_j          intra-chunk
//!       + (Π_{k=start..=i} a_k) · C_i · state              inter-chunk
//! state ← (Π_{k in chunk} a_k) · state + Σ_j (Π_{k=j+1..end} a_k) B_j ⊗ X_j
//! ```
//!
//! Work is `O(T·Q·(N + H·P) + T·H·N·P)`.

use super::mask::{DecayMode, DecaySequence, Domain, FactorDomain, LogDomain};
use super::naive::check_inputs;
use crate::error::{Error, Result};
use crate::tensor::{axpy, dot, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KernelConfig {
    pub heads: usize,
    pub state_size: usize,
    pub chunk: usize,
    pub mode: DecayMode,
}

impl Default for KernelConfig {
    fn default() -> Self {
        KernelConfig {
            heads: 4,
            state_size: 32,
            chunk: 16,
            mode: DecayMode::ExactExp,
        }
    }
}

impl KernelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.chunk == 0 {
            return Err(Error::Config("chunk size must be at least 1".into()));
        }
        if self.heads == 0 || self.state_size == 0 {
            return Err(Error::Config("heads and state size must be positive".into()));
        }
        Ok(())
    }
}

/// Recurrent carry between chunks, `[H, N, P]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ChunkState {
    pub state: Tensor,
}

impl ChunkState {
    pub fn zeros(heads: usize, state_size: usize, head_dim: usize) -> Self {
        ChunkState {
            state: Tensor::zeros(&[heads, state_size, head_dim]),
        }
    }
}

/// Chunked forward from a zero state. Returns the outputs `[T, H·P]` and the
/// final state, which continues the sequence when passed to
/// [`chunked_ssd_forward_from`].
pub fn chunked_ssd_forward(
    x: &Tensor,
    b: &Tensor,
    c: &Tensor,
    decay: &DecaySequence,
    cfg: &KernelConfig,
) -> Result<(Tensor, ChunkState)> {
    chunked_ssd_forward_from(x, b, c, decay, cfg, None)
}

pub fn chunked_ssd_forward_from(
    x: &Tensor,
    b: &Tensor,
    c: &Tensor,
    decay: &DecaySequence,
    cfg: &KernelConfig,
    initial: Option<&ChunkState>,
) -> Result<(Tensor, ChunkState)> {
    cfg.validate()?;
    let heads = decay.heads();
    if heads != cfg.heads {
        return Err(Error::shape(format!(
            "decay has {heads} heads, config {}",
            cfg.heads
        )));
    }
    if decay.mode() != cfg.mode {
        return Err(Error::Config("decay mode differs from kernel mode".into()));
    }
    let (t, n, p) = check_inputs(x, b, c, heads)?;
    if n != cfg.state_size {
        return Err(Error::shape(format!(
            "state size {n} differs from config {}",
            cfg.state_size
        )));
    }
    if decay.len() != t {
        return Err(Error::shape("decay length differs from sequence length"));
    }
    let mut state = match initial {
        Some(s) if s.state.shape() == [heads, n, p] => s.state.clone(),
        Some(s) => {
            return Err(Error::shape(format!(
                "initial state {:?}, expected {:?}",
                s.state.shape(),
                [heads, n, p]
            )))
        }
        None => Tensor::zeros(&[heads, n, p]),
    };
    let mut y = vec![0.0; t * heads * p];
    let dims = Dims { t, n, p, heads };
    match decay.mode() {
        DecayMode::ExactExp => run::<LogDomain>(x, b, c, decay, cfg.chunk, dims, &mut y, &mut state),
        DecayMode::LinearApprox => {
            run::<FactorDomain>(x, b, c, decay, cfg.chunk, dims, &mut y, &mut state)
        }
    }
    Ok((Tensor::new(vec![t, heads * p], y)?, ChunkState { state }))
}

#[derive(Clone, Copy)]
struct Dims {
    t: usize,
    n: usize,
    p: usize,
    heads: usize,
}

#[allow(clippy::too_many_arguments)]
fn run<D: Domain>(
    x: &Tensor,
    b: &Tensor,
    c: &Tensor,
    decay: &DecaySequence,
    chunk: usize,
    Dims { t, n, p, heads }: Dims,
    y: &mut [f64],
    state: &mut Tensor,
) {
    let hp = heads * p;
    let (xd, bd, cd) = (x.data(), b.data(), c.data());
    let mut gram = vec![0.0; chunk * chunk];
    let mut weights = vec![0.0; chunk * chunk];
    let mut into_chunk = vec![0.0; chunk];
    let mut to_end = vec![0.0; chunk];
    let mut proj = vec![0.0; p];

    let mut start = 0;
    while start < t {
        // the last chunk may be short; equivalent to zero-padding it
        let q = chunk.min(t - start);

        // C_i · B_j, shared by all heads
        for i in 0..q {
            let ci = &cd[(start + i) * n..(start + i + 1) * n];
            for j in 0..=i {
                gram[i * q + j] = dot(ci, &bd[(start + j) * n..(start + j + 1) * n]);
            }
        }

        for h in 0..heads {
            let a = &decay.head(h)[start..start + q];
            let st = &mut state.data_mut()[h * n * p..(h + 1) * n * p];

            // decay weights inside the chunk, built by running products
            for i in 0..q {
                let mut acc = D::IDENTITY;
                weights[i * q + i] = 1.0;
                for j in (0..i).rev() {
                    acc = D::combine(acc, a[j + 1]);
                    weights[i * q + j] = D::weight(acc);
                }
            }
            let mut acc = D::IDENTITY;
            for (i, w) in into_chunk.iter_mut().enumerate().take(q) {
                acc = D::combine(acc, a[i]);
                *w = D::weight(acc);
            }
            let total = into_chunk[q - 1];
            let mut acc = D::IDENTITY;
            to_end[q - 1] = 1.0;
            for j in (0..q - 1).rev() {
                acc = D::combine(acc, a[j + 1]);
                to_end[j] = D::weight(acc);
            }

            for i in 0..q {
                let row = start + i;
                let yi = &mut y[row * hp + h * p..row * hp + (h + 1) * p];
                for j in 0..=i {
                    let w = weights[i * q + j] * gram[i * q + j];
                    let col = start + j;
                    axpy(w, &xd[col * hp + h * p..col * hp + (h + 1) * p], yi);
                }
                // inter-chunk term reads the state carried into this chunk
                if into_chunk[i] != 0.0 {
                    proj.iter_mut().for_each(|v| *v = 0.0);
                    let ci = &cd[row * n..(row + 1) * n];
                    for (k, &cv) in ci.iter().enumerate() {
                        axpy(cv, &st[k * p..(k + 1) * p], &mut proj);
                    }
                    axpy(into_chunk[i], &proj, yi);
                }
            }

            st.iter_mut().for_each(|v| *v *= total);
            for j in 0..q {
                let col = start + j;
                let xj = &xd[col * hp + h * p..col * hp + (h + 1) * p];
                let bj = &bd[col * n..(col + 1) * n];
                for (k, &bv) in bj.iter().enumerate() {
                    let coef = to_end[j] * bv;
                    if coef != 0.0 {
                        axpy(coef, xj, &mut st[k * p..(k + 1) * p]);
                    }
                }
            }
        }
        start += q;
    }
}
