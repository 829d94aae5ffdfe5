//! Decay sequences and the 1-semiseparable masks they generate.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// How decay values are stored and combined.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum DecayMode {
    /// Values are `log â`; mask entries are `exp` of segment sums, so every
    /// entry lies in `(0, 1]` whenever the values are `≤ 0`.
    #[default]
    ExactExp,
    /// Values are the raw factors `â = Δ̂·A`, multiplied directly. Only
    /// meaningful for short sequences with `|â| < 1`.
    LinearApprox,
}

impl DecayMode {
    pub fn as_str(self) -> &'static str {
        match self {
            DecayMode::ExactExp => "exact-exp",
            DecayMode::LinearApprox => "linear-approx",
        }
    }
}

impl std::str::FromStr for DecayMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exact-exp" | "exact" => Ok(DecayMode::ExactExp),
            "linear-approx" | "linear" => Ok(DecayMode::LinearApprox),
            other => Err(Error::Config(format!("unknown decay mode {other:?}"))),
        }
    }
}

/// Accumulation rule for products of per-step decay factors.
pub(crate) trait Domain {
    const IDENTITY: f64;
    fn combine(acc: f64, value: f64) -> f64;
    fn weight(acc: f64) -> f64;
}

pub(crate) struct LogDomain;
pub(crate) struct FactorDomain;

impl Domain for LogDomain {
    const IDENTITY: f64 = 0.0;
    #[inline(always)]
    fn combine(acc: f64, value: f64) -> f64 {
        acc + value
    }
    #[inline(always)]
    fn weight(acc: f64) -> f64 {
        acc.exp()
    }
}

impl Domain for FactorDomain {
    const IDENTITY: f64 = 1.0;
    #[inline(always)]
    fn combine(acc: f64, value: f64) -> f64 {
        acc * value
    }
    #[inline(always)]
    fn weight(acc: f64) -> f64 {
        acc
    }
}

/// Per-head, per-position decay values `[H, T]`.
///
/// Entry `i` is the decay applied between positions `i−1` and `i`; entry 0
/// only matters when a carried state enters the sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct DecaySequence {
    values: Tensor,
    mode: DecayMode,
}

impl DecaySequence {
    /// Log-domain decays (`ExactExp`). `−∞` is allowed and cuts all
    /// information flow across that step.
    pub fn from_log(log_decay: Tensor) -> Result<Self> {
        Self::new(log_decay, DecayMode::ExactExp)
    }

    /// Raw multiplicative factors (`LinearApprox`).
    pub fn from_factors(factors: Tensor) -> Result<Self> {
        Self::new(factors, DecayMode::LinearApprox)
    }

    pub fn new(values: Tensor, mode: DecayMode) -> Result<Self> {
        if values.ndim() != 2 {
            return Err(Error::shape(format!(
                "decay sequence must be [H, T], got {:?}",
                values.shape()
            )));
        }
        let ok = match mode {
            DecayMode::ExactExp => values
                .data()
                .iter()
                .all(|v| !v.is_nan() && *v != f64::INFINITY),
            DecayMode::LinearApprox => values.all_finite(),
        };
        if !ok {
            return Err(Error::Numeric(format!(
                "invalid decay values for {} mode",
                mode.as_str()
            )));
        }
        Ok(DecaySequence { values, mode })
    }

    /// Same decay for every head.
    pub fn uniform_heads(per_step: &[f64], heads: usize, mode: DecayMode) -> Result<Self> {
        let mut data = Vec::with_capacity(heads * per_step.len());
        for _ in 0..heads {
            data.extend_from_slice(per_step);
        }
        Self::new(Tensor::new(vec![heads, per_step.len()], data)?, mode)
    }

    pub fn heads(&self) -> usize {
        self.values.dim(0)
    }

    pub fn len(&self) -> usize {
        self.values.dim(1)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn mode(&self) -> DecayMode {
        self.mode
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn head(&self, h: usize) -> &[f64] {
        self.values.row(h)
    }

    /// Multiplicative factor `â` of step `k` for head `h`.
    pub fn factor(&self, h: usize, k: usize) -> f64 {
        let v = self.values.at(&[h, k]);
        match self.mode {
            DecayMode::ExactExp => v.exp(),
            DecayMode::LinearApprox => v,
        }
    }
}

/// Segment sums `S[h, i, j] = Σ_{k=j+1..=i} log_decay[h, k]` for `i ≥ j`,
/// `−∞` above the diagonal.
pub fn segsum(log_decay: &Tensor) -> Result<Tensor> {
    if log_decay.ndim() != 2 {
        return Err(Error::shape("segsum needs [H, T]"));
    }
    let (h, t) = (log_decay.dim(0), log_decay.dim(1));
    let mut out = Tensor::full(&[h, t, t], f64::NEG_INFINITY);
    for hi in 0..h {
        let a = log_decay.row(hi);
        let block = &mut out.data_mut()[hi * t * t..(hi + 1) * t * t];
        for i in 0..t {
            // running sum leftwards keeps each entry a direct sum, no differences
            let mut acc = 0.0;
            block[i * t + i] = 0.0;
            for j in (0..i).rev() {
                acc += a[j + 1];
                block[i * t + j] = acc;
            }
        }
    }
    Ok(out)
}

/// Lower-triangular per-head mask `[H, T, T]`.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskedMatrix {
    entries: Tensor,
}

impl MaskedMatrix {
    pub fn entries(&self) -> &Tensor {
        &self.entries
    }

    pub fn heads(&self) -> usize {
        self.entries.dim(0)
    }

    pub fn len(&self) -> usize {
        self.entries.dim(1)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, h: usize, i: usize, j: usize) -> f64 {
        self.entries.at(&[h, i, j])
    }

    /// `T×T` block of head `h`.
    pub fn head(&self, h: usize) -> &[f64] {
        let t = self.len();
        &self.entries.data()[h * t * t..(h + 1) * t * t]
    }

    /// Same mask for every head, e.g. the all-ones causal mask of plain
    /// masked attention.
    pub fn from_head(block: &Tensor, heads: usize) -> Result<Self> {
        if block.ndim() != 2 || block.dim(0) != block.dim(1) {
            return Err(Error::shape("mask block must be square"));
        }
        let t = block.dim(0);
        let mut data = Vec::with_capacity(heads * t * t);
        for _ in 0..heads {
            data.extend_from_slice(block.data());
        }
        Ok(MaskedMatrix {
            entries: Tensor::new(vec![heads, t, t], data)?,
        })
    }

    pub fn causal_ones(t: usize, heads: usize) -> Self {
        let mut block = Tensor::zeros(&[t, t]);
        for i in 0..t {
            for j in 0..=i {
                block.set(&[i, j], 1.0);
            }
        }
        Self::from_head(&block, heads).expect("square block")
    }
}

/// Materializes `L[h, i, j] = Π_{k=j+1..=i} â[h, k]` (unit diagonal, zero
/// above it).
pub fn build_mask(decay: &DecaySequence) -> MaskedMatrix {
    let (h, t) = (decay.heads(), decay.len());
    let entries = match decay.mode() {
        DecayMode::ExactExp => {
            let mut s = segsum(decay.values()).expect("decay is [H, T]");
            s.data_mut().iter_mut().for_each(|v| *v = v.exp());
            s
        }
        DecayMode::LinearApprox => {
            let mut out = Tensor::zeros(&[h, t, t]);
            for hi in 0..h {
                let a = decay.head(hi).to_vec();
                let block = &mut out.data_mut()[hi * t * t..(hi + 1) * t * t];
                for i in 0..t {
                    let mut acc = 1.0;
                    block[i * t + i] = 1.0;
                    for j in (0..i).rev() {
                        acc *= a[j + 1];
                        block[i * t + j] = acc;
                    }
                }
            }
            out
        }
    };
    MaskedMatrix { entries }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_log_decay_gives_causal_ones() {
        let d = DecaySequence::from_log(Tensor::new(vec![1, 3], vec![0.0; 3]).unwrap()).unwrap();
        let s = segsum(d.values()).unwrap();
        for i in 0..3 {
            for j in 0..=i {
                assert_eq!(s.at(&[0, i, j]), 0.0);
            }
        }
        assert_eq!(build_mask(&d), MaskedMatrix::causal_ones(3, 1));
    }

    #[test]
    fn hand_products() {
        let log = vec![0.0, 0.5f64.ln(), 0.25f64.ln()];
        let d = DecaySequence::from_log(Tensor::new(vec![1, 3], log).unwrap()).unwrap();
        let m = build_mask(&d);
        let expect = [[1.0, 0.0, 0.0], [0.5, 1.0, 0.0], [0.125, 0.25, 1.0]];
        for (i, row) in expect.iter().enumerate() {
            for (j, &e) in row.iter().enumerate() {
                assert!((m.get(0, i, j) - e).abs() < 1e-15, "({i},{j})");
            }
        }
    }

    #[test]
    fn single_position() {
        let d = DecaySequence::from_log(Tensor::new(vec![1, 1], vec![-3.0]).unwrap()).unwrap();
        assert_eq!(segsum(d.values()).unwrap().data(), &[0.0]);
        assert_eq!(build_mask(&d).entries().data(), &[1.0]);
    }

    #[test]
    fn factor_mode_matches_log_mode_for_positive_factors() {
        let f = vec![0.9, 0.8, 0.7, 0.6];
        let lin = DecaySequence::from_factors(Tensor::new(vec![1, 4], f.clone()).unwrap()).unwrap();
        let log = DecaySequence::from_log(
            Tensor::new(vec![1, 4], f.iter().map(|v: &f64| v.ln()).collect()).unwrap(),
        )
        .unwrap();
        let diff = build_mask(&lin)
            .entries()
            .max_abs_diff(build_mask(&log).entries())
            .unwrap();
        assert!(diff < 1e-15);
    }

    #[test]
    fn rejects_non_finite() {
        let t = Tensor::new(vec![1, 2], vec![0.0, f64::NAN]).unwrap();
        assert!(DecaySequence::from_log(t).is_err());
    }

    #[test]
    fn mode_parses() {
        assert_eq!("exact-exp".parse::<DecayMode>().unwrap(), DecayMode::ExactExp);
        assert_eq!("linear-approx".parse::<DecayMode>().unwrap(), DecayMode::LinearApprox);
        assert!("cubic".parse::<DecayMode>().is_err());
    }
}
