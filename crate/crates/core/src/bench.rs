//! Forward-only kernel timing.

use std::fmt::Write as _;
use std::hint::black_box;
use std::str::FromStr;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::ssd::{chunked_ssd_forward, naive_ssd_streaming, tissd_apply, DecayMode, DecaySequence, KernelConfig};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Kernel {
    /// Quadratic reference; mask rows generated on the fly so memory stays
    /// linear in `T`.
    Naive,
    Chunked,
    /// Discretization with a time signal followed by the chunked kernel.
    TimeAware,
    /// Same without the time signal.
    Plain,
}

impl Kernel {
    pub fn as_str(self) -> &'static str {
        match self {
            Kernel::Naive => "naive",
            Kernel::Chunked => "chunked",
            Kernel::TimeAware => "time-aware",
            Kernel::Plain => "plain",
        }
    }
}

impl FromStr for Kernel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "naive" => Ok(Kernel::Naive),
            "chunked" => Ok(Kernel::Chunked),
            "time-aware" | "tissd" => Ok(Kernel::TimeAware),
            "plain" => Ok(Kernel::Plain),
            other => Err(Error::Config(format!("unknown kernel {other:?}"))),
        }
    }
}

/// Inputs for one timing case.
pub struct Case {
    pub x: Tensor,
    pub b: Tensor,
    pub c: Tensor,
    pub dt: Tensor,
    pub d: Tensor,
    pub a: Vec<f64>,
    pub decay: DecaySequence,
    pub cfg: KernelConfig,
}

impl Case {
    /// Random case of length `t`, width `dim = heads · head_dim`.
    pub fn random(t: usize, dim: usize, cfg: KernelConfig, seed: u64) -> Result<Self> {
        if dim % cfg.heads != 0 {
            return Err(Error::Config(format!("dim {dim} not divisible by {} heads", cfg.heads)));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = cfg.state_size;
        let dt = Tensor::uniform(&[t], 0.1, &mut rng).map(|v| v.abs() + 0.01);
        let d = Tensor::uniform(&[t], 1.0, &mut rng).map(|v| v.abs() + 0.1);
        let a: Vec<f64> = (1..=cfg.heads).map(|h| -(h as f64)).collect();
        let mut logs = Vec::with_capacity(cfg.heads * t);
        for &ah in &a {
            logs.extend(dt.data().iter().map(|v| v * ah));
        }
        Ok(Case {
            x: Tensor::normal(&[t, dim], 1.0, &mut rng),
            b: Tensor::normal(&[t, n], 1.0, &mut rng),
            c: Tensor::normal(&[t, n], 1.0, &mut rng),
            decay: DecaySequence::new(Tensor::new(vec![cfg.heads, t], logs)?, DecayMode::ExactExp)?,
            dt,
            d,
            a,
            cfg: KernelConfig {
                mode: DecayMode::ExactExp,
                ..cfg
            },
        })
    }

    pub fn run(&self, kernel: Kernel) -> Result<Tensor> {
        match kernel {
            Kernel::Naive => naive_ssd_streaming(&self.x, &self.b, &self.c, &self.decay),
            Kernel::Chunked => Ok(chunked_ssd_forward(&self.x, &self.b, &self.c, &self.decay, &self.cfg)?.0),
            Kernel::TimeAware => tissd_apply(&self.x, &self.b, &self.c, &self.dt, Some(&self.d), &self.a, &self.cfg),
            Kernel::Plain => tissd_apply(&self.x, &self.b, &self.c, &self.dt, None, &self.a, &self.cfg),
        }
    }
}

/// Seconds per call: runs are repeated until one sample covers at least
/// `min_sample` seconds, so short kernels are not timer-bound.
fn sample(case: &Case, kernel: Kernel, inner: usize) -> Result<f64> {
    let start = Instant::now();
    for _ in 0..inner {
        black_box(case.run(kernel)?);
    }
    Ok(start.elapsed().as_secs_f64() / inner as f64)
}

fn calibrate(case: &Case, kernel: Kernel, min_sample: f64) -> Result<usize> {
    let one = sample(case, kernel, 1)?;
    Ok(((min_sample / one.max(1e-9)).ceil() as usize).clamp(1, 100_000))
}

pub fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

pub const MIN_SAMPLE_SECONDS: f64 = 0.02;

/// Median seconds per forward call after one warm-up call.
pub fn time_kernel(case: &Case, kernel: Kernel, repeats: usize) -> Result<f64> {
    let inner = calibrate(case, kernel, MIN_SAMPLE_SECONDS)?;
    let mut s = (0..repeats.max(1))
        .map(|_| sample(case, kernel, inner))
        .collect::<Result<Vec<_>>>()?;
    Ok(median(&mut s))
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub kernel: Kernel,
    pub t: usize,
    pub dim: usize,
    pub median_seconds: f64,
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope(points: &[(f64, f64)]) -> Result<f64> {
    if points.len() < 2 {
        return Err(Error::Contract("slope needs at least two points".into()));
    }
    if points.iter().any(|&(x, y)| !(x > 0.0 && y > 0.0)) {
        return Err(Error::Contract("log-log fit needs positive values".into()));
    }
    let n = points.len() as f64;
    let lx: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ly: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    Ok(sxy / sxx)
}

/// Times every kernel at every length; rows ordered by kernel, then `T`.
pub fn sweep(kernels: &[Kernel], lengths: &[usize], dim: usize, cfg: KernelConfig, repeats: usize) -> Result<Vec<BenchRow>> {
    let mut rows = Vec::new();
    for &k in kernels {
        for &t in lengths {
            let case = Case::random(t, dim, cfg, t as u64)?;
            let s = time_kernel(&case, k, repeats)?;
            log::info!("{} T={t}: {s:.3e}s", k.as_str());
            rows.push(BenchRow {
                kernel: k,
                t,
                dim,
                median_seconds: s,
            });
        }
    }
    Ok(rows)
}

/// Fitted slope per kernel present in `rows`, in first-seen order.
pub fn slopes(rows: &[BenchRow]) -> Result<Vec<(Kernel, f64)>> {
    let mut kinds: Vec<Kernel> = Vec::new();
    for r in rows {
        if !kinds.contains(&r.kernel) {
            kinds.push(r.kernel);
        }
    }
    kinds
        .into_iter()
        .map(|k| {
            let pts: Vec<(f64, f64)> = rows
                .iter()
                .filter(|r| r.kernel == k)
                .map(|r| (r.t as f64, r.median_seconds))
                .collect();
            Ok((k, loglog_slope(&pts)?))
        })
        .collect()
}

/// `kernel,T,dim,median_seconds` rows, then `# slope,<kernel>,<value>`.
pub fn to_csv(rows: &[BenchRow]) -> Result<String> {
    let mut s = String::from("kernel,T,dim,median_seconds\n");
    for r in rows {
        writeln!(s, "{},{},{},{:e}", r.kernel.as_str(), r.t, r.dim, r.median_seconds).unwrap();
    }
    let distinct_t = {
        let mut ts: Vec<usize> = rows.iter().map(|r| r.t).collect();
        ts.sort_unstable();
        ts.dedup();
        ts.len()
    };
    if distinct_t >= 2 {
        for (k, v) in slopes(rows)? {
            writeln!(s, "# slope,{},{v:.4}", k.as_str()).unwrap();
        }
    }
    Ok(s)
}

/// Relative cost of the time signal: `(time-aware − plain) / plain`, from
/// interleaved samples of both.
pub fn time_overhead(t: usize, dim: usize, cfg: KernelConfig, repeats: usize) -> Result<(f64, f64, f64)> {
    let case = Case::random(t, dim, cfg, 11)?;
    let inner = calibrate(&case, Kernel::Plain, MIN_SAMPLE_SECONDS)?;
    black_box(case.run(Kernel::TimeAware)?);
    let (mut plain, mut timed) = (Vec::new(), Vec::new());
    for _ in 0..repeats.max(1) {
        plain.push(sample(&case, Kernel::Plain, inner)?);
        timed.push(sample(&case, Kernel::TimeAware, inner)?);
    }
    let (p, q) = (median(&mut plain), median(&mut timed));
    Ok((p, q, (q - p) / p))
}
