use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use emoe_core::cli::commands::{
    cmd_ablate, cmd_experiment, cmd_generate, cmd_gp_probe, cmd_score, cmd_train, ScoreArgs,
};
use emoe_core::cli::{RunConfig, EXIT_ERROR};
use emoe_core::engine::LatentSpace;
use emoe_core::text::ENGLISH;
use emoe_core::Result;

/// Epistemic uncertainty for a toy mixture-of-experts diffusion model.
#[derive(Debug, Parser)]
#[command(name = "emoe", version)]
struct Cli {
    /// JSON run configuration; every field is optional.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config's master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the config's output directory.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Worker threads for scoring and training.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train the backbone and the experts; writes one checkpoint each.
    Train,
    /// Uncertainty of one prompt. Exit code 3 means the threshold halted it.
    Score {
        prompt: String,
        #[arg(long, default_value = ENGLISH)]
        lang: String,
        #[arg(long, default_value_t = LatentSpace::MidPost)]
        space: LatentSpace,
        /// Continue with one aggregate rollout unless halted.
        #[arg(long)]
        fast: bool,
        /// Halt when the reported uncertainty reaches this value.
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Separated rollout of one prompt: one latent per expert path.
    Generate {
        prompt: String,
        #[arg(long, default_value = ENGLISH)]
        lang: String,
        #[arg(long, default_value_t = LatentSpace::MidPost)]
        space: LatentSpace,
    },
    /// Corpus experiment plus ablations.
    Experiment,
    /// Ablation sweeps only.
    Ablate,
    /// Ensemble-to-GP convergence probe.
    GpProbe,
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(dir) = &cli.out_dir {
        cfg.out_dir = dir.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string(value)?);
    Ok(())
}

fn run(cli: &Cli) -> Result<u8> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| emoe_core::EmoeError::Config(e.to_string()))?;
    }
    let cfg = load_config(cli)?;
    match &cli.command {
        Command::Train => {
            let summary = cmd_train(&cfg)?;
            print_json(&summary)?;
        }
        Command::Score {
            prompt,
            lang,
            space,
            fast,
            threshold,
        } => {
            let out = cmd_score(
                &cfg,
                &ScoreArgs {
                    prompt: prompt.clone(),
                    language: lang.clone(),
                    space: *space,
                    fast: *fast,
                    threshold: *threshold,
                },
            )?;
            print_json(&out)?;
            return Ok(out.exit_code() as u8);
        }
        Command::Generate { prompt, lang, space } => {
            let (out, path) = cmd_generate(&cfg, prompt, lang, *space)?;
            print_json(&out.estimate)?;
            println!("wrote {}", path.display());
        }
        Command::Experiment => {
            let (report, dir) = cmd_experiment(&cfg)?;
            print_json(&report.tests)?;
            println!("wrote {}", dir.display());
        }
        Command::Ablate => {
            println!("wrote {}", cmd_ablate(&cfg)?.display());
        }
        Command::GpProbe => {
            let (report, path) = cmd_gp_probe(&cfg)?;
            println!("slope {}", report.mean_error_slope);
            println!("wrote {}", path.display());
        }
    }
    Ok(0)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_ERROR as u8)
        }
    }
}
