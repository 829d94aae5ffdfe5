use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tim4rec::ssd::{
    build_mask, chunked_ssd_forward, chunked_ssd_forward_from, naive_ssd_forward, DecayMode, DecaySequence,
    KernelConfig,
};
use tim4rec::temporal::{gate_deltas, time_deltas, DeltaPathParams, TimestampSeq};
use tim4rec::{Tape, Tensor};

struct Case {
    x: Tensor,
    b: Tensor,
    c: Tensor,
    decay: DecaySequence,
}

fn case(t: usize, n: usize, heads: usize, p: usize, mode: DecayMode, seed: u64) -> Case {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let raw = Tensor::uniform(&[heads, t], 1.0, &mut rng);
    let decay = match mode {
        DecayMode::ExactExp => DecaySequence::from_log(raw.map(|v| -v.abs())).unwrap(),
        DecayMode::LinearApprox => DecaySequence::from_factors(raw.map(|v| 0.2 + 0.75 * v.abs())).unwrap(),
    };
    Case {
        x: Tensor::normal(&[t, heads * p], 1.0, &mut rng),
        b: Tensor::normal(&[t, n], 1.0, &mut rng),
        c: Tensor::normal(&[t, n], 1.0, &mut rng),
        decay,
    }
}

fn mode_of(linear: bool) -> DecayMode {
    if linear {
        DecayMode::LinearApprox
    } else {
        DecayMode::ExactExp
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn chunked_matches_naive(t in 1usize..80, chunk in 1usize..90, heads in 1usize..4, linear: bool, seed: u64) {
        let mode = mode_of(linear);
        let k = case(t, 3, heads, 2, mode, seed);
        let cfg = KernelConfig { heads, state_size: 3, chunk, mode };
        let (y, _) = chunked_ssd_forward(&k.x, &k.b, &k.c, &k.decay, &cfg).unwrap();
        let want = naive_ssd_forward(&k.x, &k.b, &k.c, &build_mask(&k.decay)).unwrap();
        prop_assert!(y.rel_err(&want).unwrap() <= 1e-10);
    }

    #[test]
    fn perturbing_the_future_changes_nothing_before(t in 2usize..40, pos in 0usize..40, seed: u64) {
        let pos = pos % t;
        let k = case(t, 4, 2, 2, DecayMode::ExactExp, seed);
        let cfg = KernelConfig { heads: 2, state_size: 4, chunk: 5, mode: DecayMode::ExactExp };
        let (y0, _) = chunked_ssd_forward(&k.x, &k.b, &k.c, &k.decay, &cfg).unwrap();
        let mut x = k.x.clone();
        x.data_mut()[pos * 4..(pos + 1) * 4].iter_mut().for_each(|v| *v += 1.0);
        let (y1, _) = chunked_ssd_forward(&x, &k.b, &k.c, &k.decay, &cfg).unwrap();
        prop_assert_eq!(&y0.data()[..pos * 4], &y1.data()[..pos * 4]);
    }

    #[test]
    fn split_stream_equals_whole(t in 2usize..60, cut in 1usize..60, chunk in 1usize..12, seed: u64) {
        let cut = 1 + cut % (t - 1);
        let k = case(t, 3, 2, 2, DecayMode::ExactExp, seed);
        let cfg = KernelConfig { heads: 2, state_size: 3, chunk, mode: DecayMode::ExactExp };
        let (whole, _) = chunked_ssd_forward(&k.x, &k.b, &k.c, &k.decay, &cfg).unwrap();
        let rows = |m: &Tensor, a: usize, b: usize| {
            let w = m.dim(1);
            Tensor::new(vec![b - a, w], m.data()[a * w..b * w].to_vec()).unwrap()
        };
        let dec = |a: usize, b: usize| {
            let v: Vec<f64> = (0..2).flat_map(|h| k.decay.head(h)[a..b].to_vec()).collect();
            DecaySequence::from_log(Tensor::new(vec![2, b - a], v).unwrap()).unwrap()
        };
        let (y1, s) = chunked_ssd_forward_from(&rows(&k.x, 0, cut), &rows(&k.b, 0, cut), &rows(&k.c, 0, cut), &dec(0, cut), &cfg, None).unwrap();
        let (y2, _) = chunked_ssd_forward_from(&rows(&k.x, cut, t), &rows(&k.b, cut, t), &rows(&k.c, cut, t), &dec(cut, t), &cfg, Some(&s)).unwrap();
        let mut joined = y1.data().to_vec();
        joined.extend_from_slice(y2.data());
        let joined = Tensor::new(whole.shape().to_vec(), joined).unwrap();
        prop_assert!(joined.rel_err(&whole).unwrap() <= 1e-10);
    }

    #[test]
    fn deltas_are_translation_invariant(gaps in prop::collection::vec(0u32..100_000, 1..30), shift in -1_000_000i64..1_000_000) {
        let mut t = 1_600_000_000f64;
        let ts: Vec<f64> = gaps.iter().map(|&g| { t += f64::from(g); t }).collect();
        let shifted: Vec<f64> = ts.iter().map(|v| v + shift as f64).collect();
        let a = time_deltas(&TimestampSeq::new(ts)).unwrap();
        let b = time_deltas(&TimestampSeq::new(shifted)).unwrap();
        prop_assert_eq!(a.d, b.d);
    }

    #[test]
    fn gate_shrinks_magnitudes(vals in prop::collection::vec(-5.0f64..5.0, 6), seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tape = Tape::new();
        let v = |s: &[usize], rng: &mut ChaCha8Rng| tape.leaf(Tensor::normal(s, 1.0, rng));
        let p = DeltaPathParams {
            w1: v(&[6, 6], &mut rng),
            b1: v(&[6], &mut rng),
            w2: v(&[6, 6], &mut rng),
            b2: v(&[6], &mut rng),
            kernel: v(&[4, 1], &mut rng),
            conv_bias: v(&[1], &mut rng),
        };
        let d = tape.constant(Tensor::new(vec![1, 6], vals.clone()).unwrap());
        let g = gate_deltas(d, &Tensor::ones(&[1, 6]), &p).unwrap();
        for (out, inp) in g.value().data().iter().zip(&vals) {
            prop_assert!(out.abs() <= inp.abs());
            prop_assert!(out * inp >= 0.0);
        }
    }
}
