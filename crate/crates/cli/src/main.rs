use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ragtrace::mediation::Condition;
use ragtrace::pipeline::{self, PipelineConfig, PipelineError, Variant};

#[derive(Parser)]
#[command(name = "ragtrace", version, about = "Causal tracing of context use in small seq2seq models")]
struct Cli {
    /// TOML config; defaults are used when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed; derives every per-stage seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (0 = all cores, 1 = sequential).
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Output directory, overriding `paths.output`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic facts and templates.
    BuildCorpus,
    /// Train the copier or memorizer model.
    Train {
        #[arg(long)]
        variant: Variant,
        /// Continue from an existing checkpoint and loss curve.
        #[arg(long)]
        resume: bool,
    },
    /// Run the tracing experiments.
    Run {
        /// Only this condition (exp1, exp2-subject, exp2-relation, pse-mlp, pse-attn).
        #[arg(long)]
        experiment: Option<Condition>,
    },
    /// Render heatmaps and a text summary.
    Report {
        /// Grid CSV files; defaults to all grids of the last run.
        inputs: Vec<PathBuf>,
    },
    /// Print the effective config as TOML.
    Config,
}

fn load(cli: &Cli) -> Result<PipelineConfig, PipelineError> {
    let mut config = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.override_seed(seed);
    }
    if let Some(out) = &cli.out {
        config.set_output(out);
    }
    if let Some(w) = cli.workers {
        config.experiment.workers = w;
    }
    config.validate()?;
    Ok(config)
}

fn run(cli: &Cli) -> Result<(), PipelineError> {
    let config = load(cli)?;
    match &cli.command {
        Command::BuildCorpus => {
            pipeline::cmd_build_corpus(&config)?;
            println!("wrote {} and {}", config.facts_path().display(), config.templates_path().display());
        }
        Command::Train { variant, resume } => {
            let s = pipeline::cmd_train(&config, *variant, *resume)?;
            if s.untrained {
                println!("{}: untrained checkpoint written (epochs = 0)", s.variant);
            } else {
                println!(
                    "{}: {} epochs, probe accuracy {:.1}%, final loss {:.4}",
                    s.variant,
                    s.total_epochs,
                    s.probe_accuracy * 100.0,
                    s.final_loss.unwrap_or(f64::NAN)
                );
            }
        }
        Command::Run { experiment } => {
            let s = pipeline::cmd_run(&config, *experiment, None)?;
            for (model, n) in &s.cohorts {
                println!(
                    "{model}: {n} instances, {} parametric, sigma {:.4}",
                    s.parametric[model], s.noise_sigma[model]
                );
            }
        }
        Command::Report { inputs } => {
            let s = pipeline::cmd_report(&config, inputs)?;
            print!("{}", s.text);
            println!("wrote {} figures and {}", s.figures.len(), s.summary_path.display());
        }
        Command::Config => print!("{}", config.to_toml_string()),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
