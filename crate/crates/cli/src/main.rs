use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use dte_core::ablation::{run_ablation, run_ablation_parallel, AblationGrid, AblationRecord, AblationTable};
use dte_core::checkpoint::load_model;
use dte_core::config::TrainConfig;
use dte_core::data::{export_dataset, load_dataset, synthesize_toy_dataset, write_image};
use dte_core::eval::{evaluate_model, sample_images, tokenize_captions, EvalOptions};
use dte_core::losses::apply_routing_schedule;
use dte_core::trainer::{prepare_data, train};
use dte_core::DteError;

/// Dual text embedding GAN: synthesize data, train, evaluate, sample and
/// run ablations.
#[derive(Parser)]
#[command(name = "dte", version, propagate_version = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Dataset utilities.
    #[command(subcommand)]
    Data(DataCommand),
    /// Train a model from a TOML config; writes a run directory.
    Train(TrainArgs),
    /// Evaluate a checkpoint (R-precision, FID, IS) and write a JSON report.
    Eval(EvalArgs),
    /// Generate one PNG per caption with the EMA weights of a checkpoint.
    Generate(GenerateArgs),
    /// Train and evaluate every variant of an ablation grid over its seeds.
    Ablate(AblateArgs),
    /// Render an ablation CSV as a table.
    Report(ReportArgs),
}

#[derive(Subcommand)]
enum DataCommand {
    /// Write a synthetic shapes dataset (PNG images plus a JSONL manifest).
    Synth(SynthArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Number of items.
    #[arg(long, default_value_t = 512)]
    n: usize,
    /// Image side length in pixels (32, 64, 128 or 256).
    #[arg(long, default_value_t = 64)]
    resolution: usize,
    /// Generator seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory; receives images/ and manifest.jsonl.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// TOML config; every key is optional (see README for the schema).
    #[arg(long)]
    config: PathBuf,
    /// Full-state checkpoint to continue from; must match the config hash.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Run directory [default: runs/<first 12 hex digits of the config hash>].
    #[arg(long)]
    run_dir: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint (full state or EMA).
    #[arg(long)]
    ckpt: PathBuf,
    /// JSONL manifest to evaluate on [default: the held-out split of the
    /// checkpoint's training config].
    #[arg(long)]
    data: Option<PathBuf>,
    /// R-precision candidate pool size.
    #[arg(long, default_value_t = 100)]
    pool_size: usize,
    /// Evaluation seed (latents, R-precision pools, feature extractor).
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Truncation threshold for latents [default: the config's truncation_psi].
    #[arg(long)]
    psi: Option<f64>,
    /// Output JSON report.
    #[arg(long, default_value = "report.json")]
    out: PathBuf,
}

#[derive(Args)]
struct GenerateArgs {
    /// Checkpoint (full state or EMA).
    #[arg(long)]
    ckpt: PathBuf,
    /// Text file with one caption per line.
    #[arg(long)]
    captions: PathBuf,
    /// Truncation threshold for latents [default: the config's truncation_psi].
    #[arg(long)]
    psi: Option<f64>,
    /// Sampling seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory for NNNN.png files.
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct AblateArgs {
    /// Grid TOML: `seeds`, a `[base]` config table and `[[variant]]` tables.
    #[arg(long)]
    grid: PathBuf,
    /// Output CSV with one row per (variant, seed); rewritten after each run.
    #[arg(long, default_value = "table.csv")]
    out: PathBuf,
    /// Run the (variant, seed) pairs concurrently; the CSV is written once at the end.
    #[arg(long)]
    parallel: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum ReportFormat {
    Markdown,
    Csv,
}

#[derive(Args)]
struct ReportArgs {
    /// Ablation CSV written by `dte ablate`.
    #[arg(long = "in")]
    input: PathBuf,
    /// Output format.
    #[arg(long, value_enum, default_value = "markdown")]
    format: ReportFormat,
}

fn data_synth(a: &SynthArgs) -> Result<()> {
    let ds = synthesize_toy_dataset(a.n, a.resolution, a.seed)?;
    let manifest = export_dataset(&ds, &a.out)?;
    println!("{}", manifest.display());
    Ok(())
}

fn run_train(a: &TrainArgs) -> Result<()> {
    let config = TrainConfig::load(&a.config)?;
    let hash = config.hash();
    let run_dir = a.run_dir.clone().unwrap_or_else(|| Path::new("runs").join(&hash[..12]));
    log::info!("run directory {} (config hash {hash})", run_dir.display());
    let out = train(&config, &run_dir, a.resume.as_deref())?;
    println!("{}", out.final_checkpoint.display());
    println!("{}", out.ema_checkpoint.display());
    Ok(())
}

fn run_eval(a: &EvalArgs) -> Result<()> {
    let (config, vocab, model) = load_model(&a.ckpt)?;
    let eval_set = match &a.data {
        Some(m) => load_dataset(m, config.resolution, config.max_len, config.min_freq, Some(&vocab))?,
        None => prepare_data(&config)?.1,
    };
    let flags = apply_routing_schedule(config.epochs, &config.flags());
    let opts = EvalOptions {
        pool_size: a.pool_size,
        seed: a.seed,
        psi: Some(a.psi.unwrap_or(config.truncation_psi)),
        is_classes: 10,
        is_splits: 10.min(eval_set.len()),
    };
    let report = evaluate_model(&model, &flags, &eval_set, &opts, &config.hash())?;
    report.write_json(&a.out)?;
    println!("{}", serde_json::to_string(&report)?);
    Ok(())
}

fn run_generate(a: &GenerateArgs) -> Result<()> {
    let (config, vocab, model) = load_model(&a.ckpt)?;
    let text = fs::read_to_string(&a.captions).with_context(|| format!("reading {}", a.captions.display()))?;
    let captions: Vec<String> = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect();
    if captions.is_empty() {
        bail!(DteError::Invalid(format!(
            "{} contains no captions",
            a.captions.display()
        )));
    }
    let tokens = tokenize_captions(&captions, &vocab, config.max_len)?;
    let flags = apply_routing_schedule(config.epochs, &config.flags());
    let images = sample_images(
        &model,
        &flags,
        &tokens,
        Some(a.psi.unwrap_or(config.truncation_psi)),
        a.seed,
    )?;
    fs::create_dir_all(&a.out_dir).with_context(|| format!("creating {}", a.out_dir.display()))?;
    for (i, img) in images.iter().enumerate() {
        let p = a.out_dir.join(format!("{i:04}.png"));
        write_image(&p, img)?;
        println!("{}\t{}", p.display(), captions[i]);
    }
    Ok(())
}

fn run_ablate(a: &AblateArgs) -> Result<()> {
    let grid = AblationGrid::load(&a.grid)?;
    let log_record = |r: &AblationRecord| match &r.error {
        None => log::info!(
            "{} seed {}: R {:.3} FID {:.3}",
            r.variant,
            r.seed,
            r.r_precision.unwrap_or(f64::NAN),
            r.fid.unwrap_or(f64::NAN)
        ),
        Some(e) => log::warn!("{} seed {} failed: {e}", r.variant, r.seed),
    };
    let table = if a.parallel {
        let t = run_ablation_parallel(&grid, Some(&a.out))?;
        t.records.iter().for_each(log_record);
        t
    } else {
        run_ablation(&grid, Some(&a.out), log_record)?
    };
    print!("{}", table.to_markdown());
    Ok(())
}

fn run_report(a: &ReportArgs) -> Result<()> {
    let table = AblationTable::read_csv(&a.input)?;
    match a.format {
        ReportFormat::Markdown => print!("{}", table.to_markdown()),
        ReportFormat::Csv => print!("{}", fs::read_to_string(&a.input)?),
    }
    Ok(())
}

fn dispatch(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Data(DataCommand::Synth(a)) => data_synth(a),
        Command::Train(a) => run_train(a),
        Command::Eval(a) => run_eval(a),
        Command::Generate(a) => run_generate(a),
        Command::Ablate(a) => run_ablate(a),
        Command::Report(a) => run_report(a),
    }
}

fn category(e: &anyhow::Error) -> &'static str {
    e.chain()
        .find_map(|c| c.downcast_ref::<DteError>().map(DteError::category))
        .or_else(|| e.chain().find_map(|c| c.downcast_ref::<std::io::Error>().map(|_| "io")))
        .unwrap_or("runtime")
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("error[{}]: {msg}", category(&e));
            ExitCode::from(1)
        }
    }
}
