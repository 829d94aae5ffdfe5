use log::warn;

use super::chunked::{chunked_ssd_forward, KernelConfig};
use super::mask::{DecayMode, DecaySequence};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Output of [`discretize`].
#[derive(Clone, Debug)]
pub struct Discretized {
    pub decay: DecaySequence,
    /// `B̄ = Δ̂ · B`, `[T, N]`.
    pub b_bar: Tensor,
    /// Linear-approx mode produced some `|â| ≥ 1`, so mask products can
    /// grow or flip sign.
    pub divergent: bool,
}

/// Fuses the step size with the time signal (`Δ̂ = Δ·d`, or `Δ̂ = Δ` when
/// `d` is absent) and produces the per-head decays `â = Δ̂·A_h` plus
/// `B̄ = Δ̂·B`.
///
/// `a` holds the per-head `A_h` values (`≤ 0`). In exact-exp mode the decays
/// are stored as logs; in linear-approx mode as raw factors.
pub fn discretize(
    dt: &Tensor,
    a: &[f64],
    b: &Tensor,
    d: Option<&Tensor>,
    mode: DecayMode,
) -> Result<Discretized> {
    if dt.ndim() != 1 || b.ndim() != 2 || b.dim(0) != dt.len() {
        return Err(Error::shape(format!(
            "discretize needs Δ [T] and B [T, N], got {:?} and {:?}",
            dt.shape(),
            b.shape()
        )));
    }
    let t = dt.len();
    let dt_hat: Vec<f64> = match d {
        Some(d) => {
            if d.shape() != dt.shape() {
                return Err(Error::shape("time signal must match Δ"));
            }
            dt.data().iter().zip(d.data()).map(|(x, y)| x * y).collect()
        }
        None => dt.data().to_vec(),
    };
    let mut values = Vec::with_capacity(a.len() * t);
    for &ah in a {
        values.extend(dt_hat.iter().map(|&s| s * ah));
    }
    let divergent = mode == DecayMode::LinearApprox && values.iter().any(|v| v.abs() >= 1.0);
    if divergent {
        warn!("linear-approx decay has factors with |â| ≥ 1; mask products diverge");
    }
    let decay = DecaySequence::new(Tensor::new(vec![a.len(), t], values)?, mode)?;
    let n = b.dim(1);
    let mut b_bar = b.clone();
    for (i, &s) in dt_hat.iter().enumerate() {
        b_bar.data_mut()[i * n..(i + 1) * n].iter_mut().for_each(|v| *v *= s);
    }
    Ok(Discretized {
        decay,
        b_bar,
        divergent,
    })
}

/// `Y = (L ∘ C B̄ᵀ) X` with `L` built from the time-aware decays.
///
/// Passing `d = None` gives the plain SSD map; `d ≡ 1` gives bit-identical
/// output.
pub fn tissd_apply(
    x: &Tensor,
    b: &Tensor,
    c: &Tensor,
    dt: &Tensor,
    d: Option<&Tensor>,
    a: &[f64],
    cfg: &KernelConfig,
) -> Result<Tensor> {
    if a.len() != cfg.heads {
        return Err(Error::shape(format!(
            "{} decay rates for {} heads",
            a.len(),
            cfg.heads
        )));
    }
    let disc = discretize(dt, a, b, d, cfg.mode)?;
    let (y, _) = chunked_ssd_forward(x, &disc.b_bar, c, &disc.decay, cfg)?;
    Ok(y)
}
