use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use tim4rec::bench::{self, Kernel};
use tim4rec::config::RunConfig;
use tim4rec::data::{prepare, store, synthetic, Format, Split};
use tim4rec::eval::evaluate;
use tim4rec::model::{checkpoint, Model};
use tim4rec::ops::with_corrupted_silu_backward;
use tim4rec::ssd::{DecayMode, KernelConfig};
use tim4rec::trainer::train;
use tim4rec::verify::run_suite;

/// Time-aware state space sequential recommender.
#[derive(Parser)]
#[command(name = "tim4rec", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Raw interaction log to a processed dataset directory.
    PrepareData(PrepareArgs),
    /// Write a synthetic interaction log with gap-dependent transitions.
    Synth(SynthArgs),
    /// Train, keep the best validation checkpoint, report test metrics.
    Train(TrainArgs),
    /// Ranking metrics of a checkpoint on one split.
    Evaluate(EvalArgs),
    /// Forward-pass timing sweep over sequence lengths.
    Bench(BenchArgs),
    /// Kernel parity, gradient and metric self-checks.
    Verify(VerifyArgs),
}

#[derive(Args)]
struct PrepareArgs {
    #[arg(long)]
    input: PathBuf,
    /// movielens (`u::i::r::t`), tsv (`u\ti\tt`) or csv (header, `u,i,t`).
    #[arg(long, default_value = "movielens")]
    format: String,
    /// Zero-based user,item,timestamp columns, overriding the format's.
    #[arg(long, value_delimiter = ',', num_args = 3)]
    columns: Option<Vec<usize>>,
    /// Allowed fraction of malformed rows.
    #[arg(long)]
    max_malformed: Option<f64>,
    #[arg(long, default_value_t = 5)]
    k: usize,
    #[arg(long)]
    output: PathBuf,
}

#[derive(Args)]
struct SynthArgs {
    /// Output file, `user<TAB>item<TAB>timestamp`.
    #[arg(long)]
    output: PathBuf,
    #[arg(long, default_value_t = 500)]
    users: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
}

#[derive(Clone, Copy, ValueEnum)]
enum Ablation {
    NoTime,
    NoFfn,
}

#[derive(Args)]
struct ConfigArgs {
    /// `key = value` file; command-line settings win.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set lr=0.001`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long, value_enum)]
    ablation: Vec<Ablation>,
    /// Full-dataset defaults (batch 2048, max_len 200) before the file.
    #[arg(long)]
    movielens: bool,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    output: Option<PathBuf>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = if self.movielens {
            RunConfig::movielens_preset()
        } else {
            RunConfig::default()
        };
        if let Some(path) = &self.config {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            cfg.apply_text(&text).with_context(|| format!("in {}", path.display()))?;
        }
        for o in &self.overrides {
            let (k, v) = o.split_once('=').with_context(|| format!("--set {o:?}: expected KEY=VALUE"))?;
            cfg.set(k.trim(), v)?;
        }
        for a in &self.ablation {
            match a {
                Ablation::NoTime => cfg.model.no_time = true,
                Ablation::NoFfn => cfg.model.no_ffn = true,
            }
        }
        if let Some(d) = &self.data {
            cfg.data = Some(d.clone());
        }
        if let Some(o) = &self.output {
            cfg.output = o.clone();
        }
        cfg.train.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Print the resolved configuration and exit.
    #[arg(long)]
    print_config: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Valid,
    Test,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
    #[arg(long, default_value_t = 256)]
    batch_size: usize,
    /// Remove already-seen items from the ranking.
    #[arg(long)]
    mask_seen: bool,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, value_delimiter = ',', default_values_t = [256, 512, 1024, 2048, 4096, 8192, 16384])]
    lengths: Vec<usize>,
    /// Value width `heads · head_dim`.
    #[arg(long, default_value_t = 32)]
    dim: usize,
    #[arg(long, default_value_t = 2)]
    heads: usize,
    #[arg(long, default_value_t = 16)]
    state_size: usize,
    #[arg(long, default_value_t = 64)]
    chunk: usize,
    /// naive, chunked, time-aware, plain.
    #[arg(long, value_delimiter = ',', default_value = "naive,chunked")]
    kernels: Vec<String>,
    #[arg(long, default_value_t = 3)]
    repeats: usize,
    /// Also report time-aware vs plain overhead at this length.
    #[arg(long)]
    overhead_at: Option<usize>,
}

#[derive(Args)]
struct VerifyArgs {
    /// Sequence lengths up to 64 only.
    #[arg(long)]
    quick: bool,
    /// Run with a deliberately wrong backward rule (negative control).
    #[arg(long, hide = true)]
    corrupt_silu: bool,
}

fn prepare_data(a: &PrepareArgs) -> Result<()> {
    let mut format: Format = a.format.parse()?;
    if let Some(c) = &a.columns {
        format = format.with_columns(c[0], c[1], c[2]);
    }
    if let Some(m) = a.max_malformed {
        format.max_malformed = m;
    }
    let ds = prepare(&a.input, &format, a.k)?;
    store::save(&ds, &a.output)?;
    info!("wrote {}", a.output.display());
    print!("{}", store::stats_text(&ds.stats()));
    Ok(())
}

fn synth(a: &SynthArgs) -> Result<()> {
    let log = synthetic::generate(&synthetic::SyntheticConfig {
        users: a.users,
        seed: a.seed,
        ..Default::default()
    });
    let mut s = String::new();
    for e in &log.events {
        s.push_str(&format!("{}\t{}\t{}\n", e.user, e.item, e.ts));
    }
    write_file(&a.output, &s)?;
    info!("{} events to {}", log.events.len(), a.output.display());
    Ok(())
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn train_cmd(a: &TrainArgs) -> Result<()> {
    let mut cfg = a.config.resolve()?;
    if a.print_config {
        print!("{}", cfg.to_text());
        return Ok(());
    }
    let Some(data) = cfg.data.clone() else {
        bail!("no dataset: pass --data or set `data` in the config file");
    };
    let ds = store::load(&data)?;
    cfg.model.vocab = ds.vocab();
    cfg.model.validate()?;
    info!(
        "{} users, {} items, {} training examples",
        ds.num_users(),
        ds.num_items(),
        ds.train_examples().len()
    );
    let out = train(Model::new(cfg.model.clone(), cfg.train.seed)?, &ds, &cfg.train)?;
    if let Some(why) = &out.diverged {
        log::warn!("training stopped early: {why}");
    }
    let report = evaluate(&out.model, &ds.eval_examples(Split::Test), cfg.train.eval_batch, cfg.train.mask_seen)?;
    let dir = &cfg.output;
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    checkpoint::save(&out.model, dir.join("checkpoint.bin"))?;
    write_file(&dir.join("history.csv"), &out.history.to_csv())?;
    write_file(&dir.join("metrics.csv"), &report.to_csv())?;
    write_file(&dir.join("config.txt"), &cfg.to_text())?;
    info!("best epoch {}; outputs in {}", out.best_epoch, dir.display());
    eprintln!("{}", report.to_table());
    print!("{}", report.to_csv());
    Ok(())
}

fn evaluate_cmd(a: &EvalArgs) -> Result<()> {
    let model = checkpoint::load(&a.checkpoint)?;
    let ds = store::load(&a.data)?;
    if ds.vocab() != model.config.vocab {
        bail!(
            "checkpoint expects {} item ids but the dataset has {}",
            model.config.vocab,
            ds.vocab()
        );
    }
    let split = match a.split {
        SplitArg::Valid => Split::Valid,
        SplitArg::Test => Split::Test,
    };
    let report = evaluate(&model, &ds.eval_examples(split), a.batch_size, a.mask_seen)?;
    eprintln!("{}", report.to_table());
    print!("{}", report.to_csv());
    Ok(())
}

fn bench_cmd(a: &BenchArgs) -> Result<()> {
    let kernels = a.kernels.iter().map(|k| k.parse()).collect::<tim4rec::Result<Vec<Kernel>>>()?;
    let cfg = KernelConfig {
        heads: a.heads,
        state_size: a.state_size,
        chunk: a.chunk,
        mode: DecayMode::ExactExp,
    };
    cfg.validate()?;
    let rows = bench::sweep(&kernels, &a.lengths, a.dim, cfg, a.repeats)?;
    print!("{}", bench::to_csv(&rows)?);
    if let Some(t) = a.overhead_at {
        let (plain, timed, ratio) = bench::time_overhead(t, a.dim, cfg, a.repeats.max(5))?;
        println!("# overhead,T={t},plain={plain:e},time-aware={timed:e},ratio={ratio:.4}");
    }
    Ok(())
}

fn verify_cmd(a: &VerifyArgs) -> Result<bool> {
    let checks = if a.corrupt_silu {
        with_corrupted_silu_backward(|| run_suite(a.quick))
    } else {
        run_suite(a.quick)
    };
    let mut out = std::io::stdout().lock();
    for c in &checks {
        writeln!(out, "{} {} {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail)?;
    }
    let failed = checks.iter().filter(|c| !c.passed).count();
    writeln!(out, "{} checks, {failed} failed", checks.len())?;
    Ok(failed == 0)
}

fn run(cli: &Cli) -> Result<bool> {
    match &cli.command {
        Command::PrepareData(a) => prepare_data(a)?,
        Command::Synth(a) => synth(a)?,
        Command::Train(a) => train_cmd(a)?,
        Command::Evaluate(a) => evaluate_cmd(a)?,
        Command::Bench(a) => bench_cmd(a)?,
        Command::Verify(a) => return verify_cmd(a),
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Stderr)
        .init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
