use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use absa_cda::corpus::{dump_jsonl, stats, synthetic_split};
use absa_cda::eval::DEFAULT_SEEDS;
use absa_cda::lexicon::Lexicon;
use absa_cda::pipeline::{
    build_backend, dataset_stats, load_dataset, read_jsonl_records, render_stats, run_ablation, run_augment,
    run_evaluation, AttributionRecord, DatasetFormat, PipelineConfig, PipelineError, RunOptions, Stage,
};

#[derive(Debug, Parser)]
#[command(
    name = "absa-cda",
    version,
    about = "Counterfactual data augmentation for aspect-based sentiment analysis"
)]
struct Cli {
    /// Pipeline config file (TOML, or JSON with a .json extension).
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    /// Log progress to stderr.
    #[arg(long, short, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Per-class counts of the configured dataset, or of --input.
    Stats(StatsArgs),
    /// Train the base classifier and write its checkpoint.
    TrainBase(RunArgs),
    /// Integrated-gradients attributions as JSONL on stdout.
    Attribute(RunArgs),
    /// Run the full augmentation pipeline.
    Augment(AugmentArgs),
    /// Compare original against augmented training on the test split.
    Eval(EvalArgs),
    /// Write a synthetic corpus.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
struct StatsArgs {
    /// Dataset file to count instead of the configured splits.
    #[arg(long, value_name = "PATH")]
    input: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = FormatArg::Jsonl)]
    format: FormatArg,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum FormatArg {
    Jsonl,
    #[value(name = "semeval_xml", alias = "semeval-xml")]
    SemevalXml,
}

impl From<FormatArg> for DatasetFormat {
    fn from(f: FormatArg) -> Self {
        match f {
            FormatArg::Jsonl => DatasetFormat::Jsonl,
            FormatArg::SemevalXml => DatasetFormat::SemevalXml,
        }
    }
}

#[derive(Debug, Args)]
struct RunArgs {
    /// Rerun stages even if the output directory holds a matching run.
    #[arg(long)]
    force: bool,
}

#[derive(Debug, Args)]
struct AugmentArgs {
    #[arg(long)]
    force: bool,
    /// Keep one augmented sample per source (largest probability shift).
    #[arg(long)]
    best_only: bool,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Comma-separated training seeds.
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_SEEDS)]
    seeds: Vec<u64>,
    /// Run all four mask-strategy × prompt-mode configurations.
    #[arg(long)]
    ablation: bool,
}

#[derive(Debug, Args)]
struct SynthArgs {
    /// Training samples.
    #[arg(long, default_value_t = 500)]
    n: usize,
    /// Held-out test samples (0 to skip).
    #[arg(long, default_value_t = 100)]
    test: usize,
    /// Output directory for train.jsonl and test.jsonl.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
}

/// Errors that map to exit code 1 rather than 2.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();

    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let usage = e.downcast_ref::<UsageError>().is_some()
                || e.downcast_ref::<PipelineError>()
                    .is_some_and(PipelineError::is_config_error);
            ExitCode::from(if usage { 1 } else { 2 })
        }
    }
}

fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    let Some(path) = &cli.config else {
        return Err(UsageError("this subcommand requires --config PATH".into()).into());
    };
    let mut config = PipelineConfig::load(path)?;
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    Ok(config)
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Stats(args) => {
            let rows = match &args.input {
                Some(path) => {
                    let ds = load_dataset(path, args.format.into())?;
                    vec![(split_name(path), stats(&ds), ds.skipped_conflict)]
                }
                None => dataset_stats(&load_config(&cli)?)?,
            };
            print!("{}", render_stats(&rows));
        }
        Command::TrainBase(args) => {
            let config = load_config(&cli)?;
            let out = run_augment(
                &config,
                RunOptions {
                    force: args.force,
                    stop_after: Some(Stage::TrainBase),
                },
            )?;
            println!("{}", out.path(Stage::TrainBase).display());
        }
        Command::Attribute(args) => {
            let config = load_config(&cli)?;
            let out = run_augment(
                &config,
                RunOptions {
                    force: args.force,
                    stop_after: Some(Stage::Attribute),
                },
            )?;
            let records: Vec<AttributionRecord> = read_jsonl_records(&out.path(Stage::Attribute))?;
            for r in &records {
                println!("{}", serde_json::to_string(r)?);
            }
        }
        Command::Augment(args) => {
            let mut config = load_config(&cli)?;
            config.output.best_only |= args.best_only;
            let out = run_augment(
                &config,
                RunOptions {
                    force: args.force,
                    stop_after: None,
                },
            )?;
            let c = &out.manifest.counts;
            println!(
                "sources {}  corrupted {}  candidates {}  discards {}  augmented {}  kept_target {}  overridden {}  no_viable {}",
                c.sources, c.corrupted, c.candidates, c.discards, c.augmented, c.kept_target, c.overridden, c.no_viable
            );
            println!("merged corpus: {}", out.path(Stage::Merge).display());
        }
        Command::Eval(args) => {
            let config = load_config(&cli)?;
            if args.seeds.is_empty() {
                bail!(UsageError("--seeds must list at least one seed".into()));
            }
            let backend = build_backend(&config)?;
            let table = if args.ablation {
                run_ablation(&config, backend.as_ref(), &args.seeds)?.table
            } else {
                run_evaluation(&config, backend.as_ref(), &args.seeds)?.table
            };
            print!("{table}");
        }
        Command::Synth(args) => {
            if args.n == 0 {
                bail!(UsageError("--n must be positive".into()));
            }
            let seed = cli.seed.unwrap_or(1);
            let (train, test) = synthetic_split(args.n, args.test, seed, &Lexicon::bundled());
            std::fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
            dump_jsonl(&train, &args.out.join("train.jsonl"))?;
            if args.test > 0 {
                dump_jsonl(&test, &args.out.join("test.jsonl"))?;
            }
            println!(
                "wrote {} train and {} test samples to {}",
                train.len(),
                test.len(),
                args.out.display()
            );
        }
    }
    Ok(())
}

fn split_name(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "input".into())
}
