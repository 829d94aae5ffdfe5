//! Interaction-time pipeline: timestamps → gaps → normalized gaps → gated,
//! convolved time signal `D` consumed by the decay discretization.
//!
//! Sequences are left-padded. The differentiable stages work on `[B, T]`
//! batches together with a `{0, 1}` validity mask of the same shape; pad
//! positions always come out as exactly 0 so that they never influence valid
//! positions.

use crate::error::{Error, Result};
use crate::ops::DropoutRng;
use crate::tape::Var;
use crate::tensor::Tensor;

/// Unix-second timestamps of one sequence plus a validity flag per slot.
#[derive(Clone, Debug, PartialEq)]
pub struct TimestampSeq {
    pub t: Vec<f64>,
    pub valid: Vec<bool>,
}

impl TimestampSeq {
    /// All positions valid.
    pub fn new(t: Vec<f64>) -> Self {
        let valid = vec![true; t.len()];
        TimestampSeq { t, valid }
    }

    pub fn with_mask(t: Vec<f64>, valid: Vec<bool>) -> Result<Self> {
        if t.len() != valid.len() {
            return Err(Error::shape("timestamps and validity mask differ in length"));
        }
        Ok(TimestampSeq { t, valid })
    }

    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DeltaStage {
    Raw,
    Normalized,
    Enhanced,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DeltaSeq {
    pub d: Tensor,
    pub stage: DeltaStage,
}

/// Backward differences with a leading zero: `d₀ = 0`, `dᵢ = tᵢ − tᵢ₋₁`.
///
/// The first valid position and every pad get 0. A decreasing pair of valid
/// timestamps is a data error.
pub fn time_deltas(ts: &TimestampSeq) -> Result<DeltaSeq> {
    let mut d = vec![0.0; ts.len()];
    let mut prev: Option<f64> = None;
    for (i, (&t, &ok)) in ts.t.iter().zip(&ts.valid).enumerate() {
        if !ok {
            continue;
        }
        if let Some(p) = prev {
            let gap = t - p;
            if gap < 0.0 {
                return Err(Error::Data(format!(
                    "timestamps decrease at position {i}: {p} then {t}"
                )));
            }
            d[i] = gap;
        }
        prev = Some(t);
    }
    Ok(DeltaSeq {
        d: Tensor::from_vec(d),
        stage: DeltaStage::Raw,
    })
}

/// Learnable pieces of the per-layer time path.
#[derive(Clone, Copy, Debug)]
pub struct DeltaPathParams<'t> {
    /// `[T, T]`, only entries `W[s, t]` with `s ≤ t` are used.
    pub w1: Var<'t>,
    /// `[T]`.
    pub b1: Var<'t>,
    pub w2: Var<'t>,
    pub b2: Var<'t>,
    /// `[K, 1]`.
    pub kernel: Var<'t>,
    /// `[1]`.
    pub conv_bias: Var<'t>,
}

/// Masked layer norm over the valid positions of each row, then dropout.
pub fn normalize_deltas<'t>(
    d: Var<'t>,
    valid: &Tensor,
    gain: Var<'t>,
    bias: Var<'t>,
    dropout: f64,
    train: bool,
    rng: &mut DropoutRng,
) -> Result<Var<'t>> {
    d.masked_layer_norm(valid, gain, bias, crate::model::LN_EPS)?
        .dropout(dropout, train, rng)
}

/// `s ≤ t` mask for row-vector products `D·W`.
fn causal_weight_mask(t: usize) -> Tensor {
    let mut m = Tensor::zeros(&[t, t]);
    for s in 0..t {
        for c in s..t {
            m.set(&[s, c], 1.0);
        }
    }
    m
}

/// Bottom-right `w×w` view of a `[T, T]` weight, causally masked.
fn window<'t>(w: Var<'t>, width: usize) -> Result<Var<'t>> {
    let full = w.value().dim(0);
    if width > full {
        return Err(Error::shape(format!(
            "sequence width {width} exceeds the configured max length {full}"
        )));
    }
    let off = full - width;
    let m = w.tape().constant(causal_weight_mask(width));
    w.submatrix(off, off, width, width)?.mul(m)
}

fn tail<'t>(b: Var<'t>, width: usize) -> Result<Var<'t>> {
    let full = b.value().len();
    if width > full {
        return Err(Error::shape(format!(
            "sequence width {width} exceeds the configured max length {full}"
        )));
    }
    b.narrow(full - width, width)
}

/// `D ← σ(silu(D W₁ + b₁) W₂ + b₂) ∘ D` on `[B, W]`, `W ≤ T`.
///
/// Narrower batches use the trailing window of the `[T, T]` weights, which
/// matches left padding to the full length.
pub fn gate_deltas<'t>(d: Var<'t>, valid: &Tensor, p: &DeltaPathParams<'t>) -> Result<Var<'t>> {
    if d.value().ndim() != 2 {
        return Err(Error::shape("gate_deltas needs [B, T]"));
    }
    let width = d.value().dim(1);
    let tape = d.tape();
    let mask = tape.constant(valid.clone());
    let hidden = d
        .matmul(window(p.w1, width)?)?
        .add_bias(tail(p.b1, width)?)?
        .silu()
        .mul(mask)?;
    let alpha = hidden
        .matmul(window(p.w2, width)?)?
        .add_bias(tail(p.b2, width)?)?
        .sigmoid();
    alpha.mul(d)
}

/// Single-channel causal convolution with index clamping, then SiLU; pads
/// re-zeroed.
pub fn enhance_deltas<'t>(d: Var<'t>, valid: &Tensor, p: &DeltaPathParams<'t>) -> Result<Var<'t>> {
    let shape = d.shape();
    if shape.len() != 2 {
        return Err(Error::shape("enhance_deltas needs [B, T]"));
    }
    let mask = d.tape().constant(valid.clone());
    d.reshape(&[shape[0], shape[1], 1])?
        .causal_conv1d(p.kernel, p.conv_bias)?
        .reshape(&shape)?
        .silu()
        .mul(mask)
}

/// `σ(g)·d_used + (1 − σ(g))·d_in`.
pub fn layer_transition<'t>(d_in: Var<'t>, d_used: Var<'t>, g: Var<'t>) -> Result<Var<'t>> {
    let s = g.sigmoid();
    d_used.sub(d_in)?.mul_scalar(s)?.add(d_in)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::Tape;

    fn run_deltas(t: &[f64]) -> Vec<f64> {
        time_deltas(&TimestampSeq::new(t.to_vec())).unwrap().d.into_data()
    }

    #[test]
    fn deltas_examples() {
        assert_eq!(run_deltas(&[100.0, 160.0, 200.0]), vec![0.0, 60.0, 40.0]);
        assert_eq!(run_deltas(&[7.0, 7.0, 7.0]), vec![0.0; 3]);
        assert_eq!(run_deltas(&[42.0]), vec![0.0]);
    }

    #[test]
    fn deltas_reject_unsorted() {
        let r = time_deltas(&TimestampSeq::new(vec![5.0, 3.0]));
        assert!(matches!(r, Err(Error::Data(_))));
    }

    #[test]
    fn deltas_skip_pads() {
        let ts = TimestampSeq::with_mask(vec![0.0, 0.0, 10.0, 25.0], vec![false, false, true, true]).unwrap();
        assert_eq!(time_deltas(&ts).unwrap().d.data(), &[0.0, 0.0, 0.0, 15.0]);
    }

    #[test]
    fn normalize_example() {
        let tape = Tape::new();
        let d = tape.constant(Tensor::from_rows(&[[0.0, 60.0, 40.0]]).unwrap());
        let valid = Tensor::ones(&[1, 3]);
        let g = tape.constant(Tensor::scalar(1.0));
        let b = tape.constant(Tensor::scalar(0.0));
        let out = normalize_deltas(d, &valid, g, b, 0.0, true, &mut DropoutRng::new(0, 0)).unwrap();
        // mean 100/3, population std sqrt(5600/9)
        let (m, s) = (100.0 / 3.0, (5600.0f64 / 9.0).sqrt());
        for (o, x) in out.value().data().iter().zip([0.0, 60.0, 40.0]) {
            assert!((o - (x - m) / s).abs() < 1e-9);
        }
        assert!((out.value().data()[0] + 1.336).abs() < 1e-3);
    }

    fn zero_params(tape: &Tape, t: usize) -> DeltaPathParams<'_> {
        DeltaPathParams {
            w1: tape.constant(Tensor::zeros(&[t, t])),
            b1: tape.constant(Tensor::zeros(&[t])),
            w2: tape.constant(Tensor::zeros(&[t, t])),
            b2: tape.constant(Tensor::zeros(&[t])),
            kernel: tape.constant(Tensor::from_rows(&[[1.0], [0.0], [0.0], [0.0]]).unwrap()),
            conv_bias: tape.constant(Tensor::zeros(&[1])),
        }
    }

    #[test]
    fn zero_gate_halves() {
        let tape = Tape::new();
        let p = zero_params(&tape, 3);
        let d = tape.constant(Tensor::from_rows(&[[2.0, -4.0, 6.0]]).unwrap());
        let out = gate_deltas(d, &Tensor::ones(&[1, 3]), &p).unwrap();
        assert_eq!(out.value().data(), &[1.0, -2.0, 3.0]);
    }

    #[test]
    fn enhance_identity_and_clamp() {
        let tape = Tape::new();
        let p = zero_params(&tape, 3);
        let d = tape.constant(Tensor::from_rows(&[[1.0, 2.0, 3.0]]).unwrap());
        let out = enhance_deltas(d, &Tensor::ones(&[1, 3]), &p).unwrap();
        let expect: Vec<f64> = [1.0, 2.0, 3.0].iter().map(|&x| crate::ops::silu(x)).collect();
        assert_eq!(out.value().data(), expect.as_slice());

        let p2 = DeltaPathParams {
            kernel: tape.constant(Tensor::from_rows(&[[1.0], [1.0]]).unwrap()),
            ..p
        };
        let out = enhance_deltas(d, &Tensor::ones(&[1, 3]), &p2).unwrap();
        let expect: Vec<f64> = [2.0, 3.0, 5.0].iter().map(|&x| crate::ops::silu(x)).collect();
        assert_eq!(out.value().data(), expect.as_slice());
    }

    #[test]
    fn transition_limits() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::from_vec(vec![1.0, 2.0]));
        let b = tape.constant(Tensor::from_vec(vec![3.0, 6.0]));
        let mid = layer_transition(a, b, tape.constant(Tensor::scalar(0.0))).unwrap();
        assert_eq!(mid.value().data(), &[2.0, 4.0]);
        let skip = layer_transition(a, b, tape.constant(Tensor::scalar(-800.0))).unwrap();
        assert_eq!(skip.value().data(), &[1.0, 2.0]);
        let used = layer_transition(a, b, tape.constant(Tensor::scalar(800.0))).unwrap();
        assert_eq!(used.value().data(), &[3.0, 6.0]);
    }

    #[test]
    fn gate_is_causal() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let tape = Tape::new();
        let p = DeltaPathParams {
            w1: tape.constant(Tensor::normal(&[6, 6], 1.0, &mut rng)),
            b1: tape.constant(Tensor::normal(&[6], 1.0, &mut rng)),
            w2: tape.constant(Tensor::normal(&[6, 6], 1.0, &mut rng)),
            b2: tape.constant(Tensor::normal(&[6], 1.0, &mut rng)),
            ..zero_params(&tape, 6)
        };
        let base = Tensor::normal(&[1, 6], 1.0, &mut rng);
        let mut bumped = base.clone();
        bumped.data_mut()[4] += 3.0;
        let valid = Tensor::ones(&[1, 6]);
        let y0 = enhance_deltas(gate_deltas(tape.constant(base), &valid, &p).unwrap(), &valid, &p).unwrap();
        let y1 = enhance_deltas(gate_deltas(tape.constant(bumped), &valid, &p).unwrap(), &valid, &p).unwrap();
        assert_eq!(&y0.value().data()[..4], &y1.value().data()[..4]);
        assert_ne!(y0.value().data()[4], y1.value().data()[4]);
    }
}
