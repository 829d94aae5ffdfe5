//! Self-checks bundled for the command line: kernel parity, mask
//! structure, gradients against finite differences, metric oracles.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::eval::{metrics, rank_of_target};
use crate::gradcheck::finite_diff_check;
use crate::ssd::{
    build_mask, chunked_ssd_forward, naive_ssd_forward, ssd, tissd_apply, DecayMode, DecaySequence, KernelConfig,
    SsdPath,
};
use crate::tape::{Tape, Var};
use crate::temporal::{enhance_deltas, gate_deltas, layer_transition, DeltaPathParams};
use crate::tensor::Tensor;
use crate::trainer::{tiny_config, verify_gradients, GRAD_STEP, GRAD_TOLERANCE};

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn from(name: &str, r: Result<(bool, String)>) -> Self {
        match r {
            Ok((passed, detail)) => Check { name: name.into(), passed, detail },
            Err(e) => Check { name: name.into(), passed: false, detail: format!("error: {e}") },
        }
    }
}

type OpFn = for<'t> fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>;

/// Reduce to a scalar through fixed pseudo-random weights, so every output
/// coordinate gets a distinct cotangent.
fn project<'t>(y: Var<'t>) -> Result<Var<'t>> {
    let n = y.value().len();
    let w: Vec<f64> = (0..n).map(|i| ((i * 7919 % 101) as f64 / 50.0) - 1.0).collect();
    let w = y.tape().constant(Tensor::new(y.shape(), w)?);
    Ok(y.mul(w)?.sum())
}

fn valid_mask() -> Tensor {
    Tensor::from_rows(&[[0.0, 1.0, 1.0, 1.0, 1.0], [1.0, 1.0, 1.0, 1.0, 1.0]]).unwrap()
}

/// Every differentiable op with random inputs: `(name, op, input shapes)`.
#[allow(clippy::type_complexity)]
pub fn op_cases() -> Vec<(&'static str, OpFn, Vec<Vec<usize>>)> {
    vec![
        ("add", |_, v| project(v[0].add(v[1])?), vec![vec![3, 4], vec![3, 4]]),
        ("sub", |_, v| project(v[0].sub(v[1])?), vec![vec![3, 4], vec![3, 4]]),
        ("mul", |_, v| project(v[0].mul(v[1])?), vec![vec![3, 4], vec![3, 4]]),
        ("mul_scalar", |_, v| project(v[0].mul_scalar(v[1])?), vec![vec![2, 3], vec![1]]),
        ("add_bias", |_, v| project(v[0].add_bias(v[1])?), vec![vec![2, 3, 4], vec![4]]),
        ("mul_rows", |_, v| project(v[0].mul_rows(v[1])?), vec![vec![2, 3, 4], vec![2, 3]]),
        ("matmul", |_, v| project(v[0].matmul(v[1])?), vec![vec![2, 3, 4], vec![4, 5]]),
        ("matmul_t", |_, v| project(v[0].matmul_t(v[1])?), vec![vec![3, 4], vec![5, 4]]),
        ("layer_norm", |_, v| project(v[0].layer_norm(v[1], v[2], 1e-5)?), vec![vec![3, 5], vec![5], vec![5]]),
        (
            "masked_layer_norm",
            |_, v| project(v[0].masked_layer_norm(&valid_mask(), v[1], v[2], 1e-5)?),
            vec![vec![2, 5], vec![1], vec![1]],
        ),
        ("causal_conv1d", |_, v| project(v[0].causal_conv1d(v[1], v[2])?), vec![vec![2, 6, 3], vec![4, 3], vec![3]]),
        ("sigmoid", |_, v| project(v[0].sigmoid()), vec![vec![3, 4]]),
        ("silu", |_, v| project(v[0].silu()), vec![vec![3, 4]]),
        ("gelu", |_, v| project(v[0].gelu()), vec![vec![3, 4]]),
        ("softplus", |_, v| project(v[0].softplus()), vec![vec![3, 4]]),
        ("exp", |_, v| project(v[0].exp()), vec![vec![3, 4]]),
        ("softmax", |_, v| project(v[0].softmax()), vec![vec![3, 6]]),
        ("cross_entropy", |_, v| v[0].cross_entropy(&[1, 4, 2]), vec![vec![3, 6]]),
        ("neg", |_, v| project(v[0].neg()), vec![vec![3, 4]]),
        ("scale", |_, v| project(v[0].scale(-2.5)), vec![vec![3, 4]]),
        ("sum", |_, v| Ok(v[0].mul(v[0])?.sum()), vec![vec![3, 4]]),
        ("mean", |_, v| Ok(v[0].mul(v[0])?.mean()), vec![vec![3, 4]]),
        ("narrow", |_, v| project(v[0].narrow(1, 2)?), vec![vec![3, 4]]),
        ("reshape", |_, v| project(v[0].reshape(&[4, 3])?), vec![vec![3, 4]]),
        ("take_step", |_, v| project(v[0].take_step(2)?), vec![vec![2, 4, 3]]),
        ("submatrix", |_, v| project(v[0].submatrix(1, 2, 3, 2)?), vec![vec![5, 5]]),
        ("gather_rows", |_, v| project(Var::gather_rows(v[0], &[2, 0, 2, 1], &[2, 2])?), vec![vec![3, 4]]),
        ("head_outer", |_, v| project(v[0].head_outer(v[1])?), vec![vec![2, 5], vec![3]]),
        (
            "ssd_naive",
            |_, v| project(ssd(v[0], v[1], v[2], log_decay(v[3]), DecayMode::ExactExp, SsdPath::Naive)?),
            vec![vec![2, 7, 4], vec![2, 7, 3], vec![2, 7, 3], vec![2, 2, 7]],
        ),
        (
            "ssd_chunked",
            |_, v| project(ssd(v[0], v[1], v[2], log_decay(v[3]), DecayMode::ExactExp, SsdPath::Chunked(3))?),
            vec![vec![2, 7, 4], vec![2, 7, 3], vec![2, 7, 3], vec![2, 2, 7]],
        ),
        (
            "ssd_linear_approx",
            |_, v| {
                let f = v[3].sigmoid().scale(0.9);
                project(ssd(v[0], v[1], v[2], f, DecayMode::LinearApprox, SsdPath::Chunked(2))?)
            },
            vec![vec![1, 6, 2], vec![1, 6, 2], vec![1, 6, 2], vec![1, 1, 6]],
        ),
        (
            "gate_deltas",
            |_, v| {
                let p = delta_params(v);
                project(gate_deltas(v[0], &valid_mask(), &p)?)
            },
            delta_shapes(),
        ),
        (
            "enhance_deltas",
            |_, v| {
                let p = delta_params(v);
                project(enhance_deltas(v[0], &valid_mask(), &p)?)
            },
            delta_shapes(),
        ),
        ("layer_transition", |_, v| project(layer_transition(v[0], v[1], v[2])?), vec![vec![2, 5], vec![2, 5], vec![1]]),
    ]
}

// keeps log decays ≤ 0 so the mask stays in (0, 1]
fn log_decay(raw: Var<'_>) -> Var<'_> {
    raw.softplus().neg()
}

fn delta_shapes() -> Vec<Vec<usize>> {
    // d [2, 5] inside a max length of 6
    vec![vec![2, 5], vec![6, 6], vec![6], vec![6, 6], vec![6], vec![3, 1], vec![1]]
}

fn delta_params<'t>(v: &[Var<'t>]) -> DeltaPathParams<'t> {
    DeltaPathParams {
        w1: v[1],
        b1: v[2],
        w2: v[3],
        b2: v[4],
        kernel: v[5],
        conv_bias: v[6],
    }
}

/// Worst finite-difference error of every op in [`op_cases`].
pub fn op_gradient_errors(seed: u64) -> Result<Vec<(&'static str, f64)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    op_cases()
        .into_iter()
        .map(|(name, f, shapes)| {
            let params: Vec<Tensor> = shapes.iter().map(|s| Tensor::normal(s, 1.0, &mut rng)).collect();
            Ok((name, finite_diff_check(f, &params, GRAD_STEP)?))
        })
        .collect()
}

fn random_case(t: usize, n: usize, h: usize, p: usize, rng: &mut ChaCha8Rng) -> Result<(Tensor, Tensor, Tensor, DecaySequence)> {
    let logs: Vec<f64> = (0..h * t).map(|_| -rng.random::<f64>() * 0.5).collect();
    Ok((
        Tensor::normal(&[t, h * p], 1.0, rng),
        Tensor::normal(&[t, n], 1.0, rng),
        Tensor::normal(&[t, n], 1.0, rng),
        DecaySequence::from_log(Tensor::new(vec![h, t], logs)?)?,
    ))
}

/// `cases` random parity checks of the chunked kernel against the
/// materialized one. Returns the worst relative error.
pub fn kernel_parity(cases: usize, max_t: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..cases {
        let t = rng.random_range(1..=max_t);
        let n = if rng.random::<bool>() { 4 } else { 32 };
        let h = if rng.random::<bool>() { 1 } else { 4 };
        let chunk = rng.random_range(1..=t);
        let (x, b, c, d) = random_case(t, n, h, 2, &mut rng)?;
        let reference = naive_ssd_forward(&x, &b, &c, &build_mask(&d))?;
        let cfg = KernelConfig { heads: h, state_size: n, chunk, mode: DecayMode::ExactExp };
        let (y, _) = chunked_ssd_forward(&x, &b, &c, &d, &cfg)?;
        worst = worst.max(y.rel_err(&reference)?);
    }
    Ok(worst)
}

/// Unit diagonal, zero upper triangle, and the 1-SS recurrence
/// `L[i][j] = L[i][j+1] · a_{j+1}` on random decays. Returns the worst
/// recurrence error, or `None` if a structural property failed exactly.
pub fn mask_structure(cases: usize, max_t: usize, seed: u64) -> Result<Option<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..cases {
        let t = rng.random_range(1..=max_t);
        let logs: Vec<f64> = (0..t).map(|_| -rng.random::<f64>() * 2.0).collect();
        let d = DecaySequence::from_log(Tensor::new(vec![1, t], logs)?)?;
        let m = build_mask(&d);
        for i in 0..t {
            if m.get(0, i, i) != 1.0 || (i + 1..t).any(|j| m.get(0, i, j) != 0.0) {
                return Ok(None);
            }
            for j in 0..i {
                let rec = m.get(0, i, j + 1) * d.factor(0, j + 1);
                worst = worst.max((m.get(0, i, j) - rec).abs());
            }
        }
    }
    Ok(Some(worst))
}

/// Metric values from [`rank_of_target`] against a full sort of random
/// score vectors. Returns the number of mismatches.
pub fn metric_oracle(cases: usize, seed: u64) -> Result<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bad = 0;
    for _ in 0..cases {
        let v = rng.random_range(2..=30);
        // coarse scores so ties occur
        let scores: Vec<f64> = (0..v).map(|_| (rng.random_range(0..12) as f64) / 4.0).collect();
        let target = rng.random_range(1..v);
        let mut order: Vec<usize> = (1..v).collect();
        // ties: other items first (pessimistic), then by id
        order.sort_by(|&a, &b| {
            scores[b]
                .total_cmp(&scores[a])
                .then((a == target).cmp(&(b == target)))
                .then(a.cmp(&b))
        });
        let oracle = order.iter().position(|&i| i == target).unwrap() + 1;
        let rank = rank_of_target(&scores, target)?;
        for k in [10, 20, 50] {
            let m = metrics(&[rank], k)?;
            let hit = oracle <= k;
            let ndcg = if hit { 1.0 / ((oracle + 1) as f64).log2() } else { 0.0 };
            let mrr = if hit { 1.0 / oracle as f64 } else { 0.0 };
            if m.hr != f64::from(u8::from(hit)) || m.ndcg != ndcg || m.mrr != mrr {
                bad += 1;
            }
        }
    }
    Ok(bad)
}

/// `d ≡ 1` reproduces the plain kernel bit for bit.
pub fn ablation_identity(seed: u64) -> Result<bool> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (x, b, c, _) = random_case(40, 4, 2, 3, &mut rng)?;
    let dt = Tensor::uniform(&[40], 1.0, &mut rng).map(f64::abs);
    let cfg = KernelConfig { heads: 2, state_size: 4, chunk: 16, mode: DecayMode::ExactExp };
    let a = [-0.5, -2.0];
    Ok(tissd_apply(&x, &b, &c, &dt, None, &a, &cfg)? == tissd_apply(&x, &b, &c, &dt, Some(&Tensor::ones(&[40])), &a, &cfg)?)
}

/// Runs every check. `quick` keeps sequence lengths at 64 or below.
pub fn run_suite(quick: bool) -> Vec<Check> {
    let max_t = if quick { 64 } else { 512 };
    let cases = if quick { 50 } else { 200 };
    let mut out = Vec::new();
    out.push(Check::from(
        "kernel-parity",
        kernel_parity(cases, max_t, 1).map(|e| (e <= 1e-10, format!("{cases} cases, worst rel err {e:.2e}"))),
    ));
    out.push(Check::from(
        "mask-structure",
        mask_structure(if quick { 200 } else { 1000 }, max_t.min(128), 2).map(|r| match r {
            Some(e) => (e <= 1e-12, format!("worst recurrence err {e:.2e}")),
            None => (false, "diagonal or upper triangle wrong".into()),
        }),
    ));
    out.push(Check::from(
        "ablation-identity",
        ablation_identity(3).map(|ok| (ok, "d = 1 vs no time signal".into())),
    ));
    match op_gradient_errors(4) {
        Ok(errs) => {
            for (name, e) in errs {
                out.push(Check {
                    name: format!("grad-{name}"),
                    passed: e < GRAD_TOLERANCE,
                    detail: format!("max rel err {e:.2e}"),
                });
            }
        }
        Err(e) => out.push(Check::from("grad-ops", Err(e))),
    }
    out.push(Check::from(
        "grad-model",
        verify_gradients(&tiny_config(), 5).map(|r| {
            let (name, e) = r.worst().unwrap_or(("-", 0.0));
            (r.passed(), format!("worst {e:.2e} at {name}"))
        }),
    ));
    out.push(Check::from(
        "metric-oracle",
        metric_oracle(1000, 6).map(|bad| (bad == 0, format!("{bad} mismatches in 1000 vectors"))),
    ));
    out
}
