//! Semiseparable masked-matrix kernels.
//!
//! All kernels compute `Y = (L ∘ C Bᵀ) X` per head, where `L` is the
//! lower-triangular matrix of decay products built from a [`DecaySequence`].
//! `x` is `[T, H·P]`, `b` and `c` are `[T, N]` and shared by every head.

mod backward;
mod chunked;
mod discretize;
mod mask;
mod naive;
mod op;

pub use backward::{naive_ssd_backward, scan_ssd_backward, SsdGrads};
pub use chunked::{chunked_ssd_forward, chunked_ssd_forward_from, ChunkState, KernelConfig};
pub use discretize::{discretize, tissd_apply, Discretized};
pub use mask::{build_mask, segsum, DecayMode, DecaySequence, MaskedMatrix};
pub use naive::{naive_ssd_forward, naive_ssd_streaming};
pub use op::{ssd, SsdPath};

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn inputs(t: usize, hp: usize, n: usize, rng: &mut ChaCha8Rng) -> (Tensor, Tensor, Tensor) {
        (
            Tensor::normal(&[t, hp], 1.0, rng),
            Tensor::normal(&[t, n], 1.0, rng),
            Tensor::normal(&[t, n], 1.0, rng),
        )
    }

    fn log_decay(h: usize, t: usize, rng: &mut ChaCha8Rng) -> DecaySequence {
        let v: Vec<f64> = (0..h * t).map(|_| -rng.random::<f64>()).collect();
        DecaySequence::from_log(Tensor::new(vec![h, t], v).unwrap()).unwrap()
    }

    // M[i][j] = L[i][j] · (C_i·B_j), then Y = M X, all by hand
    fn brute_force(x: &Tensor, b: &Tensor, c: &Tensor, decay: &DecaySequence) -> Tensor {
        let (t, hp, n) = (x.dim(0), x.dim(1), b.dim(1));
        let heads = decay.heads();
        let p = hp / heads;
        let mut y = Tensor::zeros(&[t, hp]);
        for h in 0..heads {
            for i in 0..t {
                for j in 0..=i {
                    let mut l = 1.0;
                    for k in j + 1..=i {
                        l *= decay.factor(h, k);
                    }
                    let g: f64 = (0..n).map(|k| c.at(&[i, k]) * b.at(&[j, k])).sum();
                    for q in 0..p {
                        let col = h * p + q;
                        let v = y.at(&[i, col]) + l * g * x.at(&[j, col]);
                        y.set(&[i, col], v);
                    }
                }
            }
        }
        y
    }

    #[test]
    fn naive_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (x, b, c) = inputs(9, 6, 3, &mut rng);
        let d = log_decay(2, 9, &mut rng);
        let y = naive_ssd_forward(&x, &b, &c, &build_mask(&d)).unwrap();
        assert!(y.rel_err(&brute_force(&x, &b, &c, &d)).unwrap() < 1e-12);
        let s = naive_ssd_streaming(&x, &b, &c, &d).unwrap();
        assert!(s.rel_err(&y).unwrap() < 1e-12);
    }

    #[test]
    fn single_step() {
        let x = Tensor::from_rows(&[[2.0, -1.0]]).unwrap();
        let b = Tensor::from_rows(&[[1.0, 2.0]]).unwrap();
        let c = Tensor::from_rows(&[[3.0, 0.5]]).unwrap();
        let y = naive_ssd_forward(&x, &b, &c, &MaskedMatrix::causal_ones(1, 1)).unwrap();
        assert_eq!(y.data(), &[8.0, -4.0]);
    }

    #[test]
    fn causal_prefix_sum() {
        let x = Tensor::from_rows(&[[1.0], [2.0], [3.0], [4.0]]).unwrap();
        let ones = Tensor::ones(&[4, 1]);
        let y = naive_ssd_forward(&x, &ones, &ones, &MaskedMatrix::causal_ones(4, 1)).unwrap();
        assert_eq!(y.data(), &[1.0, 3.0, 6.0, 10.0]);
    }

    #[test]
    fn chunked_equals_naive_across_chunks() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (x, b, c) = inputs(64, 8, 4, &mut rng);
        let d = log_decay(4, 64, &mut rng);
        let reference = naive_ssd_forward(&x, &b, &c, &build_mask(&d)).unwrap();
        for chunk in [1, 3, 4, 8, 16, 32, 64, 100] {
            let cfg = KernelConfig { heads: 4, state_size: 4, chunk, mode: DecayMode::ExactExp };
            let (y, _) = chunked_ssd_forward(&x, &b, &c, &d, &cfg).unwrap();
            assert!(y.rel_err(&reference).unwrap() < 1e-10, "chunk {chunk}");
        }
    }

    #[test]
    fn linear_mode_chunked_equals_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (x, b, c) = inputs(20, 4, 2, &mut rng);
        let f: Vec<f64> = (0..40).map(|_| rng.random_range(-0.9..0.9)).collect();
        let d = DecaySequence::from_factors(Tensor::new(vec![2, 20], f).unwrap()).unwrap();
        let reference = brute_force(&x, &b, &c, &d);
        let cfg = KernelConfig { heads: 2, state_size: 2, chunk: 6, mode: DecayMode::LinearApprox };
        let (y, _) = chunked_ssd_forward(&x, &b, &c, &d, &cfg).unwrap();
        assert!(y.rel_err(&reference).unwrap() < 1e-10);
    }

    #[test]
    fn zero_chunk_is_config_error() {
        let x = Tensor::zeros(&[2, 1]);
        let b = Tensor::zeros(&[2, 1]);
        let d = DecaySequence::uniform_heads(&[0.0, 0.0], 1, DecayMode::ExactExp).unwrap();
        let cfg = KernelConfig { heads: 1, state_size: 1, chunk: 0, mode: DecayMode::ExactExp };
        assert!(matches!(
            chunked_ssd_forward(&x, &b, &b, &d, &cfg),
            Err(crate::Error::Config(_))
        ));
    }

    #[test]
    fn streaming_continuation() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (x, b, c) = inputs(24, 4, 3, &mut rng);
        let d = log_decay(2, 24, &mut rng);
        let cfg = KernelConfig { heads: 2, state_size: 3, chunk: 5, mode: DecayMode::ExactExp };
        let (full, end) = chunked_ssd_forward(&x, &b, &c, &d, &cfg).unwrap();

        let split = |t: &Tensor, lo: usize, hi: usize| {
            let w = t.last_dim();
            Tensor::new(vec![hi - lo, w], t.data()[lo * w..hi * w].to_vec()).unwrap()
        };
        let dh = |lo: usize, hi: usize| {
            let mut v = Vec::new();
            for h in 0..2 {
                v.extend_from_slice(&d.head(h)[lo..hi]);
            }
            DecaySequence::from_log(Tensor::new(vec![2, hi - lo], v).unwrap()).unwrap()
        };
        let (y1, s1) = chunked_ssd_forward(&split(&x, 0, 11), &split(&b, 0, 11), &split(&c, 0, 11), &dh(0, 11), &cfg).unwrap();
        let (y2, s2) = chunked_ssd_forward_from(
            &split(&x, 11, 24),
            &split(&b, 11, 24),
            &split(&c, 11, 24),
            &dh(11, 24),
            &cfg,
            Some(&s1),
        )
        .unwrap();
        let mut joined = y1.data().to_vec();
        joined.extend_from_slice(y2.data());
        let joined = Tensor::new(full.shape().to_vec(), joined).unwrap();
        assert!(joined.rel_err(&full).unwrap() < 1e-12);
        assert!(s2.state.rel_err(&end.state).unwrap() < 1e-12);
    }

    #[test]
    fn information_cut() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (x, b, c) = inputs(16, 2, 2, &mut rng);
        let mut v = vec![-0.1; 16];
        v[8] = f64::NEG_INFINITY;
        let d = DecaySequence::from_log(Tensor::new(vec![1, 16], v).unwrap()).unwrap();
        let cfg = KernelConfig { heads: 1, state_size: 2, chunk: 4, mode: DecayMode::ExactExp };
        let (y, _) = chunked_ssd_forward(&x, &b, &c, &d, &cfg).unwrap();
        let mut x2 = x.clone();
        for i in 0..16 {
            x2.data_mut()[i] += 5.0;
        }
        let (y2, _) = chunked_ssd_forward(&x2, &b, &c, &d, &cfg).unwrap();
        assert_eq!(&y.data()[16..], &y2.data()[16..]);
        assert_ne!(&y.data()[..16], &y2.data()[..16]);
    }

    #[test]
    fn unit_decay_is_linear_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (x, b, c) = inputs(12, 3, 4, &mut rng);
        let d = DecaySequence::uniform_heads(&[0.0; 12], 1, DecayMode::ExactExp).unwrap();
        // softmax-free causal attention: y_i = Σ_{j≤i} (q_i·k_j) v_j
        let scores = c.matmul(&b.transpose2().unwrap()).unwrap();
        let mut expect = Tensor::zeros(&[12, 3]);
        for i in 0..12 {
            for j in 0..=i {
                for q in 0..3 {
                    let v = expect.at(&[i, q]) + scores.at(&[i, j]) * x.at(&[j, q]);
                    expect.set(&[i, q], v);
                }
            }
        }
        let cfg = KernelConfig { heads: 1, state_size: 4, chunk: 5, mode: DecayMode::ExactExp };
        let (y, _) = chunked_ssd_forward(&x, &b, &c, &d, &cfg).unwrap();
        assert!(y.rel_err(&expect).unwrap() < 1e-10);
    }

    #[test]
    fn two_step_hand_case() {
        let x = Tensor::from_rows(&[[1.0], [2.0]]).unwrap();
        let b = Tensor::from_rows(&[[1.0], [1.0]]).unwrap();
        let c = Tensor::from_rows(&[[1.0], [3.0]]).unwrap();
        let dt = Tensor::from_vec(vec![0.5, 0.5]);
        let d = Tensor::from_vec(vec![1.0, 2.0]);
        let cfg = KernelConfig { heads: 1, state_size: 1, chunk: 2, mode: DecayMode::ExactExp };
        let y = tissd_apply(&x, &b, &c, &dt, Some(&d), &[-1.0], &cfg).unwrap();
        // b̄ = [0.5, 1.0], â₁ = exp(−1)
        let y1 = 3.0 * 1.0 * 2.0 + (-1.0f64).exp() * 3.0 * 0.5 * 1.0;
        assert!((y.data()[1] - y1).abs() < 1e-14);
        assert!((y.data()[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn ablation_identity_is_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (x, b, c) = inputs(30, 4, 3, &mut rng);
        let dt = Tensor::uniform(&[30], 1.0, &mut rng).map(f64::abs);
        let cfg = KernelConfig { heads: 2, state_size: 3, chunk: 8, mode: DecayMode::ExactExp };
        let plain = tissd_apply(&x, &b, &c, &dt, None, &[-0.3, -1.2], &cfg).unwrap();
        let ones = tissd_apply(&x, &b, &c, &dt, Some(&Tensor::ones(&[30])), &[-0.3, -1.2], &cfg).unwrap();
        assert_eq!(plain, ones);
    }

    #[test]
    fn chunked_backward_matches_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (x, b, c) = inputs(17, 6, 3, &mut rng);
        let dy = Tensor::normal(&[17, 6], 1.0, &mut rng);
        for mode in [DecayMode::ExactExp, DecayMode::LinearApprox] {
            let v: Vec<f64> = (0..51).map(|_| -rng.random::<f64>() * 0.9).collect();
            let v = match mode {
                DecayMode::ExactExp => v,
                DecayMode::LinearApprox => v.iter().map(|a| -a).collect(),
            };
            let d = DecaySequence::new(Tensor::new(vec![3, 17], v).unwrap(), mode).unwrap();
            let n = naive_ssd_backward(&x, &b, &c, &d, &dy).unwrap();
            let s = scan_ssd_backward(&x, &b, &c, &d, &dy).unwrap();
            assert!(s.dx.rel_err(&n.dx).unwrap() < 1e-10);
            assert!(s.db.rel_err(&n.db).unwrap() < 1e-10);
            assert!(s.dc.rel_err(&n.dc).unwrap() < 1e-10);
            assert!(s.ddecay.rel_err(&n.ddecay).unwrap() < 1e-10, "{mode:?}");
        }
    }
}
