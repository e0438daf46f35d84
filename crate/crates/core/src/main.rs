use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use shadow_inpaint::cli::{self, CliError, VisualizeRequest};
use shadow_inpaint::config::ExperimentConfig;
use shadow_inpaint::evaluation::MaskSource;
use shadow_inpaint::networks::Variant;

/// Inpainting-pretrained shadow removal: data synthesis, training, ablations and evaluation.
#[derive(Parser)]
#[command(version, about)]
struct Args {
    /// Config file, or a preset name (`desk-scale`, `paper-scale`).
    #[arg(long, global = true, default_value = "desk-scale")]
    config: String,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Fraction of the shadow training split to fine-tune on.
    #[arg(long, global = true)]
    fraction: Option<f64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic paired shadow dataset.
    Synth {
        #[arg(long)]
        count: usize,
        /// Image side; defaults to the config image size.
        #[arg(long)]
        size: Option<usize>,
        #[arg(long, default_value = "train")]
        split: String,
    },
    /// Inpainting pretraining.
    Pretrain,
    /// Shadow-removal fine-tuning.
    Finetune {
        /// Checkpoint to start from; random initialization when omitted.
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Train and evaluate ablations next to the full model.
    Ablate {
        /// Variant name or `all`; repeatable.
        #[arg(long = "variant", default_value = "all")]
        variants: Vec<String>,
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the test split.
    Eval {
        /// Omit to score the identity restorer.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// `provided` or `otsu`; defaults to the config setting.
        #[arg(long)]
        mask_source: Option<String>,
    },
    /// Fine-tune every periodic pretraining checkpoint and tabulate the results.
    CadenceStudy {
        #[arg(long)]
        cadence: u64,
    },
    /// Write restored image, fusion weight maps and LAB difference maps.
    Visualize {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        mask: PathBuf,
        #[arg(long)]
        gt: Option<PathBuf>,
        /// Skip the LAB difference maps.
        #[arg(long)]
        no_diff: bool,
    },
    /// Print the resolved configuration as TOML.
    ShowConfig,
}

fn resolve_config(args: &Args) -> Result<ExperimentConfig, CliError> {
    let mut cfg = ExperimentConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &args.out {
        cfg.out_dir = out.clone();
    }
    if let Some(f) = args.fraction {
        cfg.fraction = f;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn parse_variants(names: &[String]) -> Result<Vec<Variant>, CliError> {
    if names.iter().any(|n| n == "all") {
        return Ok(Variant::ALL.to_vec());
    }
    names.iter().map(|n| n.parse().map_err(|e: shadow_inpaint::networks::NetworkError| CliError::Usage(e.to_string()))).collect()
}

fn print_json<T: serde::Serialize>(value: &T) {
    println!("{}", serde_json::to_string_pretty(value).expect("serializable"));
}

fn run(args: Args) -> Result<(), CliError> {
    let cfg = resolve_config(&args)?;
    match &args.command {
        Command::Synth { count, size, split } => {
            let seed = args.seed.unwrap_or(cfg.seed);
            let written = cli::cmd_synth(*count, seed, size.unwrap_or(cfg.data.image_size), &cfg.out_dir, split)?;
            println!("wrote {} files under {}", written.len(), cfg.out_dir.join(split).display());
        }
        Command::Pretrain => print_json(&cli::cmd_pretrain(&cfg)?.without_wall_clock()),
        Command::Finetune { init } => print_json(&cli::cmd_finetune(&cfg, init.as_deref())?.without_wall_clock()),
        Command::Ablate { variants, init } => {
            let report = cli::cmd_ablate(&cfg, &parse_variants(variants)?, init.as_deref())?;
            print!("{}", report.to_csv());
        }
        Command::Eval { checkpoint, mask_source } => {
            let source = match mask_source {
                Some(s) => s.parse::<MaskSource>()?,
                None => cfg.eval.mask_source,
            };
            print!("{}", cli::cmd_eval(&cfg, checkpoint.as_deref(), source)?.to_csv());
        }
        Command::CadenceStudy { cadence } => print!("{}", cli::cmd_cadence_study(&cfg, *cadence)?.to_csv()),
        Command::Visualize { checkpoint, image, mask, gt, no_diff } => {
            let written = cli::cmd_visualize(&VisualizeRequest {
                checkpoint,
                image,
                mask,
                ground_truth: gt.as_deref(),
                difference_maps: !no_diff,
                size: cfg.data.image_size,
                out_dir: &cfg.out_dir.join("visualize"),
            })?;
            for p in written {
                println!("{}", p.display());
            }
        }
        Command::ShowConfig => print!("{}", cfg.to_toml()),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let args = match Args::try_parse() {
        Ok(a) => a,
        Err(e) => {
            let code = if e.use_stderr() { cli::EXIT_USAGE } else { cli::EXIT_OK };
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    match run(args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
