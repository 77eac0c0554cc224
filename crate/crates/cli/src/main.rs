mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use toml::Value;

use commands::{CompositeArgs, Metric};
use config::Config;
use error::CliError;

#[derive(Parser)]
#[command(
    name = "uncanny",
    version,
    about = "Turn stylized portraits into photo-realistic ones"
)]
struct Cli {
    /// TOML configuration file; flags and --set override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one configuration key, e.g. --set inversion.steps=200. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    /// Worker threads; 0 uses every core.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// More logging (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build and curate the portrait dataset.
    #[command(subcommand)]
    Dataset(DatasetCommand),
    /// Fine-tune a copy of the base generator into the stylized generator.
    Finetune {
        /// Directory of aligned training images.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Base (photo-realistic) generator checkpoint.
        #[arg(long)]
        base: Option<PathBuf>,
        #[arg(long)]
        kimg: Option<f64>,
        #[arg(long)]
        batch: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Steps between checkpoints.
        #[arg(long)]
        checkpoint_every: Option<usize>,
    },
    /// Project one image into the stylized generator's W+ space.
    Invert {
        #[arg(long)]
        target: PathBuf,
        /// Generator pair checkpoint.
        #[arg(long)]
        pair: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        inversion: InversionFlags,
    },
    /// Invert each stylized image and decode it with the realistic generator.
    Realify {
        /// Directory of stylized PNGs.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        pair: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        inversion: InversionFlags,
    },
    /// Blend masked regions of a generated image back into the original.
    Composite {
        #[arg(long)]
        original: PathBuf,
        #[arg(long)]
        generated: PathBuf,
        /// Comma-separated face classes to take from the generated image.
        #[arg(long, default_value = "skin,eyes,lips")]
        mask_classes: String,
        #[arg(long)]
        out: PathBuf,
        /// Directory of per-class segmentation PNGs (fixture parser).
        #[arg(long)]
        masks: Option<PathBuf>,
        /// Face parser: fixture, palette or external.
        #[arg(long)]
        parser: Option<String>,
        /// Use this grayscale mask instead of parsing.
        #[arg(long, conflicts_with_all = ["masks", "parser"])]
        mask: Option<PathBuf>,
        /// Also save the softened mask.
        #[arg(long)]
        mask_out: Option<PathBuf>,
        /// Region of the original the generated crop covers: top,left,height,width.
        #[arg(long)]
        placement: Option<String>,
    },
    /// Compare two image sets.
    Evaluate {
        #[arg(value_enum)]
        metric: Metric,
        #[arg(long)]
        set_a: PathBuf,
        #[arg(long)]
        set_b: PathBuf,
        /// Embedder backend: toy or pretrained.
        #[arg(long)]
        backend: Option<String>,
        /// CSV report path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the built-in acceptance checks.
    Selftest {
        /// Keep intermediate outputs here instead of a temporary directory.
        #[arg(long)]
        work_dir: Option<PathBuf>,
        /// Comma-separated criterion numbers to run.
        #[arg(long, value_delimiter = ',')]
        only: Vec<u8>,
    },
    /// Print the resolved configuration.
    Config,
}

#[derive(Subcommand)]
enum DatasetCommand {
    /// Download the records of a manifest.
    Fetch {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Crop and align faces from downloaded images.
    Align {
        /// Manifest to update; without it every image in --input is aligned.
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        size: Option<usize>,
    },
    /// Mark the ids in a list file as filtered.
    Filter {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        list: PathBuf,
    },
    /// Summarize an image directory.
    Stats {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct InversionFlags {
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lambda_noise: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Dataset(DatasetCommand::Fetch { .. }) => "dataset fetch",
            Command::Dataset(DatasetCommand::Align { .. }) => "dataset align",
            Command::Dataset(DatasetCommand::Filter { .. }) => "dataset filter",
            Command::Dataset(DatasetCommand::Stats { .. }) => "dataset stats",
            Command::Finetune { .. } => "finetune",
            Command::Invert { .. } => "invert",
            Command::Realify { .. } => "realify",
            Command::Composite { .. } => "composite",
            Command::Evaluate { .. } => "evaluate",
            Command::Selftest { .. } => "selftest",
            Command::Config => "config",
        }
    }

    /// Dedicated flags as configuration overrides; they win over --set.
    fn overrides(&self) -> Vec<(String, Value)> {
        let mut o = Vec::new();
        let mut put = |k: &str, v: Option<Value>| {
            if let Some(v) = v {
                o.push((k.to_string(), v));
            }
        };
        let int = |v: Option<usize>| v.map(|v| Value::Integer(v as i64));
        let seed = |v: Option<u64>| v.map(|v| Value::Integer(v as i64));
        match self {
            Command::Dataset(DatasetCommand::Align { size, .. }) => put("align.output_size", int(*size)),
            Command::Finetune {
                kimg,
                batch,
                seed: s,
                checkpoint_every,
                ..
            } => {
                put("finetune.kimg_budget", kimg.map(Value::Float));
                put("finetune.batch_size", int(*batch));
                put("finetune.seed", seed(*s));
                put("finetune.checkpoint_every", int(*checkpoint_every));
            }
            Command::Invert { inversion, .. } | Command::Realify { inversion, .. } => {
                put("inversion.steps", int(inversion.steps));
                put("inversion.lambda_noise", inversion.lambda_noise.map(Value::Float));
                put("inversion.seed", seed(inversion.seed));
            }
            Command::Composite { parser, .. } => put("composite.parser", parser.clone().map(Value::String)),
            Command::Evaluate { backend, .. } => put("evaluate.backend", backend.clone().map(Value::String)),
            _ => {}
        }
        o
    }
}

fn resolve_config(cli: &Cli) -> Result<Config, CliError> {
    let mut overrides = cli
        .set
        .iter()
        .map(|s| config::parse_assignment(s))
        .collect::<Result<Vec<_>, _>>()?;
    if let Some(j) = cli.jobs {
        overrides.push(("jobs".into(), Value::Integer(j as i64)));
    }
    overrides.extend(cli.command.overrides());
    if let Some(path) = &cli.config {
        if !path.exists() {
            return Err(CliError::MissingInput(format!(
                "config file {} does not exist",
                path.display()
            )));
        }
    }
    config::resolve(cli.config.as_deref(), &overrides)
}

fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = resolve_config(&cli)?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers())
        .build_global()
        .map_err(|e| CliError::Config(format!("thread pool: {e}")))?;
    match cli.command {
        Command::Dataset(DatasetCommand::Fetch { manifest, out }) => commands::dataset_fetch(&cfg, &manifest, &out),
        Command::Dataset(DatasetCommand::Align {
            manifest, input, out, ..
        }) => commands::dataset_align(&cfg, manifest.as_deref(), &input, &out),
        Command::Dataset(DatasetCommand::Filter { manifest, list }) => commands::dataset_filter(&cfg, &manifest, &list),
        Command::Dataset(DatasetCommand::Stats { input, out }) => commands::dataset_stats_cmd(&cfg, &input, &out),
        Command::Finetune { data, out, base, .. } => commands::finetune_cmd(&cfg, &data, &out, base.as_deref()),
        Command::Invert { target, pair, out, .. } => commands::invert_cmd(&cfg, &target, &pair, &out),
        Command::Realify { input, pair, out, .. } => commands::realify_cmd(&cfg, &input, &pair, &out),
        Command::Composite {
            original,
            generated,
            mask_classes,
            out,
            masks,
            mask,
            mask_out,
            placement,
            ..
        } => {
            let placement = placement.as_deref().map(commands::parse_placement).transpose()?;
            commands::composite_cmd(
                &cfg,
                &CompositeArgs {
                    original: &original,
                    generated: &generated,
                    classes: &mask_classes,
                    out: &out,
                    masks: masks.as_deref(),
                    mask: mask.as_deref(),
                    mask_out: mask_out.as_deref(),
                    placement,
                },
            )
        }
        Command::Evaluate {
            metric,
            set_a,
            set_b,
            out,
            ..
        } => commands::evaluate_cmd(&cfg, metric, &set_a, &set_b, &out),
        Command::Selftest { work_dir, only } => commands::selftest_cmd(work_dir, only),
        Command::Config => {
            print!("{}", cfg.to_toml());
            Ok(())
        }
    }
}

fn fail(err: &CliError, command: &str) -> ExitCode {
    eprintln!("{}", err.envelope(command));
    ExitCode::from(err.exit_code())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => return fail(&CliError::Usage(e.render().to_string().trim().to_string()), "uncanny"),
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .target(env_logger::Target::Stderr)
        .init();
    let command = cli.command.name();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(&e, command),
    }
}
