//! `matchreg` command line: dataset synthesis, staged training,
//! registration, one-shot adaptation and report aggregation.
//!
//! Exit codes: 0 success, 1 runtime error, 2 usage error.

mod summary;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};

use matchreg::config::RunConfig;
use matchreg::evalsuite::{evaluate_pair, CheckpointMetrics, MetricsReport};
use matchreg::losses::Stage;
use matchreg::synthdata::{make_pair_dataset, read_dataset, write_dataset, write_field, Domain, DomainSpec};
use matchreg::trainer::{file_sha256, load_checkpoint, save_checkpoint, train_stage, write_loss_csv, ModelState};

/// Environment variable naming the default output root.
const OUT_ENV: &str = "MATCHREG_OUT";

#[derive(Parser)]
#[command(name = "matchreg", version, about = "Deformable registration with learned matching criteria")]
struct Cli {
    /// TOML run configuration; missing keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the seed of the command's configuration section.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a labelled pair dataset.
    Synth(SynthArgs),
    /// Train one stage or all three.
    Train(TrainArgs),
    /// Register every pair of a dataset without adaptation.
    Register(RegisterArgs),
    /// One-shot adaptation per pair from a reloaded base checkpoint.
    Adapt(AdaptArgs),
    /// Aggregate report CSVs into mean/std summary tables.
    Evaluate(EvaluateArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum DomainArg {
    #[value(name = "A", alias = "a")]
    A,
    #[value(name = "B", alias = "b")]
    B,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, value_enum)]
    domain: DomainArg,
    #[arg(long)]
    count: Option<usize>,
    /// Cubic edge length (multiple of 16).
    #[arg(long)]
    dims: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write into an existing non-empty directory.
    #[arg(long)]
    force: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum StageArg {
    #[value(name = "1")]
    One,
    #[value(name = "2")]
    Two,
    #[value(name = "3")]
    Three,
    All,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum)]
    stage: StageArg,
    /// Checkpoint to continue from (required after stage 1).
    #[arg(long)]
    init: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RegisterArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AdaptArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Adaptation checkpoints, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "0,5,10,20")]
    iters: Vec<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Report CSVs; each file's stem names its setting.
    #[arg(long, num_args = 1.., required = true)]
    reports: Vec<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

enum Failure {
    Usage(String),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

impl From<matchreg::Error> for Failure {
    fn from(e: matchreg::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("usage error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> CmdResult {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    match cli.command {
        Command::Synth(a) => {
            if let Some(s) = cli.seed {
                cfg.data.seed = s;
            }
            synth(a, &cfg)
        }
        Command::Train(a) => {
            if let Some(s) = cli.seed {
                cfg.train.seed = s;
            }
            train(a, &cfg)
        }
        Command::Register(a) => register(a),
        Command::Adapt(a) => {
            if let Some(s) = cli.seed {
                cfg.train.seed = s;
            }
            adapt(a, &cfg)
        }
        Command::Evaluate(a) => evaluate(a),
    }
}

/// `--out`, else `$MATCHREG_OUT/<default>`, else a usage error.
fn out_dir(out: Option<PathBuf>, default: &str) -> Result<PathBuf, Failure> {
    let dir = match out {
        Some(p) => p,
        None => match std::env::var_os(OUT_ENV) {
            Some(root) => PathBuf::from(root).join(default),
            None => return Err(Failure::Usage(format!("--out is required when {OUT_ENV} is unset"))),
        },
    };
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn is_nonempty_dir(p: &Path) -> bool {
    std::fs::read_dir(p).map(|mut d| d.next().is_some()).unwrap_or(false)
}

fn synth(a: SynthArgs, cfg: &RunConfig) -> CmdResult {
    let domain = match a.domain {
        DomainArg::A => Domain::A,
        DomainArg::B => Domain::B,
    };
    let target = a.out.clone().or_else(|| std::env::var_os(OUT_ENV).map(|r| PathBuf::from(r).join(format!("synth_{}", domain.tag()))));
    if let Some(t) = &target {
        if is_nonempty_dir(t) && !a.force {
            return Err(anyhow!("{} exists and is not empty; pass --force to overwrite", t.display()).into());
        }
    }
    let dir = out_dir(target, "synth")?;
    let edge = a.dims.unwrap_or(cfg.data.dims);
    let count = a.count.unwrap_or(cfg.data.train_pairs);
    let dims = [edge; 3];
    let pairs = make_pair_dataset(&DomainSpec::for_domain(domain), count, dims, &cfg.data.deform, cfg.data.seed)?;
    let manifest = write_dataset(&pairs, dims, &cfg.data.deform, cfg.data.seed, &dir)?;
    println!(
        "wrote {} domain-{} pairs ({edge}³) to {}; mean initial DSC {:.4}",
        manifest.pairs.len(),
        domain.tag(),
        dir.display(),
        manifest.mean_initial_dsc()
    );
    Ok(())
}

fn train(a: TrainArgs, cfg: &RunConfig) -> CmdResult {
    let dir = out_dir(a.out, "train")?;
    let (_, pairs) = read_dataset(&a.data)?;
    let mut state = match &a.init {
        Some(p) => load_checkpoint(p)?,
        None => ModelState::new(cfg.model.clone())?,
    };
    let stages: &[Stage] = match a.stage {
        StageArg::One => &[Stage::One],
        StageArg::Two => &[Stage::Two],
        StageArg::Three => &[Stage::Three],
        StageArg::All => &[Stage::One, Stage::Two, Stage::Three],
    };
    for &stage in stages {
        let n = stage.number();
        let records = train_stage(&mut state, stage, &pairs, &cfg.train, |r| {
            log::debug!("stage {n} epoch {} step {} pair {} loss {:.6}", r.epoch, r.step, r.pair, r.loss);
        })?;
        let ckpt = dir.join(format!("stage{n}.ckpt"));
        save_checkpoint(&state, &ckpt)?;
        write_loss_csv(&records, &dir.join(format!("loss_stage{n}.csv")))?;
        let last = records.last().map(|r| r.loss).unwrap_or(f64::NAN);
        println!("stage {n}: {} steps, final loss {last:.5}, checkpoint {}", records.len(), ckpt.display());
    }
    Ok(())
}

fn write_report(report: &MetricsReport, dir: &Path, stem: &str) -> anyhow::Result<()> {
    report.write_jsonl(&dir.join(format!("{stem}.jsonl")))?;
    report.write_csv(&dir.join(format!("{stem}.csv")))?;
    Ok(())
}

fn print_rows(records: &[CheckpointMetrics]) {
    for r in records {
        let dsc = r.mean_dsc.map_or("-".to_string(), |v| format!("{v:.4}"));
        println!("{:<8} iters {:>3}  DSC {dsc:>6}  negJ {:.5}  {:.2}s", r.pair, r.iters, r.neg_jac_frac, r.seconds);
    }
}

fn register(a: RegisterArgs) -> CmdResult {
    let dir = out_dir(a.out, "register")?;
    let state = load_checkpoint(&a.ckpt)?;
    let (manifest, pairs) = read_dataset(&a.data)?;
    let tag = manifest.domain.tag();
    let mut report = MetricsReport::default();
    for p in &pairs {
        let start = std::time::Instant::now();
        let field = state.infer(&p.moving, &p.fixed)?;
        let secs = start.elapsed().as_secs_f64();
        write_field(&field, &dir.join(format!("{}_field.vol", p.id)))?;
        report.records.push(CheckpointMetrics::measure(&p.id, (tag, tag), 0, &p.moving, &p.fixed, &field, secs)?);
    }
    print_rows(&report.records);
    write_report(&report, &dir, "register")?;
    Ok(())
}

fn adapt(a: AdaptArgs, cfg: &RunConfig) -> CmdResult {
    let dir = out_dir(a.out, "adapt")?;
    let base_hash = file_sha256(&a.ckpt)?;
    let (manifest, pairs) = read_dataset(&a.data)?;
    let tag = manifest.domain.tag();
    let mut report = MetricsReport::default();
    for p in &pairs {
        // Reload the base model for every pair.
        let state = load_checkpoint(&a.ckpt)?;
        let r = evaluate_pair(&p.id, (tag, tag), &p.moving, &p.fixed, &state, &a.iters, &cfg.train)?;
        print_rows(&r.records);
        report.records.extend(r.records);
    }
    write_report(&report, &dir, "adapt")?;
    let after = file_sha256(&a.ckpt)?;
    if after != base_hash {
        return Err(anyhow!("base checkpoint changed during adaptation ({base_hash} -> {after})").into());
    }
    println!("base checkpoint sha256 {base_hash} (unchanged)");
    Ok(())
}

fn evaluate(a: EvaluateArgs) -> CmdResult {
    let dir = out_dir(a.out, "evaluate")?;
    let mut rows = Vec::new();
    for path in &a.reports {
        if !path.is_file() {
            return Err(Failure::Usage(format!("report {} does not exist", path.display())));
        }
        let setting = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        rows.extend(summary::read_report_csv(path, &setting)?);
    }
    let table = summary::summarize(&rows);
    summary::write_summary(&table, &dir.join("summary.csv"))?;
    print!("{}", summary::render(&table));
    Ok(())
}
