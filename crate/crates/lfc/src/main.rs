use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use lfc::run::{self, AblateArgs, AdaptArgs, EvalSplit, EvaluateArgs, GenDataArgs, RankArgs, TrainSourceArgs};
use lfc::tables::report_lines;
use lfc::CliError;
use lfc_core::adapt::Ablation;
use lfc_core::synth::BenchmarkSizes;

#[derive(Parser)]
#[command(name = "lfc", version, about = "Curriculum-based source-free domain adaptation for segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Test,
    Train,
    Source,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic source/target benchmark.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        source_spec: Option<PathBuf>,
        #[arg(long)]
        target_spec: Option<PathBuf>,
        #[arg(long, default_value_t = BenchmarkSizes::default().source_train)]
        source_train: usize,
        #[arg(long, default_value_t = BenchmarkSizes::default().target_train)]
        target_train: usize,
        #[arg(long, default_value_t = BenchmarkSizes::default().target_test)]
        target_test: usize,
        #[arg(long)]
        force: bool,
    },
    /// Train the source model with supervised cross-entropy.
    TrainSource {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Adapt a source model to the unlabelled target training split.
    Adapt {
        #[arg(long)]
        source_model: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Overrides `ablation` from the config.
        #[arg(long)]
        ablation: Option<String>,
        /// Overrides `seed` from the config.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        force: bool,
    },
    /// Score a checkpoint on a labelled split.
    Evaluate {
        #[arg(long, required_unless_present = "oracle")]
        model: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        #[arg(long)]
        out: PathBuf,
        /// Score the ground truth against itself.
        #[arg(long)]
        oracle: bool,
    },
    /// Export the difficulty ranking of the target training images.
    Rank {
        #[arg(long)]
        source_model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 2)]
        batch_size: usize,
    },
    /// Run every ablation mode over several seeds.
    AblateSuite {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 3)]
        seeds: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        source_model: Option<PathBuf>,
        #[arg(long)]
        force: bool,
    },
}

fn log(line: &str) {
    eprintln!("{line}");
}

fn execute(command: Command) -> Result<(), CliError> {
    match command {
        Command::GenData {
            out,
            seed,
            source_spec,
            target_spec,
            source_train,
            target_train,
            target_test,
            force,
        } => run::gen_data(&GenDataArgs {
            out,
            seed,
            source_spec,
            target_spec,
            sizes: BenchmarkSizes {
                source_train,
                target_train,
                target_test,
            },
            force,
        }),
        Command::TrainSource { data, config, out, force } => {
            let report = run::train_source(&TrainSourceArgs { data, config, out, force }, log)?;
            report_lines(&report).iter().for_each(|l| println!("{l}"));
            Ok(())
        }
        Command::Adapt {
            source_model,
            data,
            config,
            out,
            ablation,
            seed,
            force,
        } => {
            let ablation = ablation
                .map(|a| a.parse::<Ablation>())
                .transpose()
                .map_err(|e| CliError::Usage(e.to_string()))?;
            let args = AdaptArgs {
                source_model,
                data,
                config,
                out,
                force,
                ablation,
                seed,
            };
            let record = run::adapt(&args, log)?;
            report_lines(&record.report).iter().for_each(|l| println!("{l}"));
            Ok(())
        }
        Command::Evaluate {
            model,
            data,
            split,
            out,
            oracle,
        } => {
            let split = match split {
                SplitArg::Test => EvalSplit::Test,
                SplitArg::Train => EvalSplit::Train,
                SplitArg::Source => EvalSplit::Source,
            };
            let report = run::evaluate(&EvaluateArgs {
                model,
                data,
                split,
                out,
                oracle,
            })?;
            report_lines(&report).iter().for_each(|l| println!("{l}"));
            Ok(())
        }
        Command::Rank {
            source_model,
            data,
            out,
            batch_size,
        } => run::rank(&RankArgs {
            source_model,
            data,
            out,
            batch_size,
        }),
        Command::AblateSuite {
            data,
            config,
            seeds,
            out,
            source_model,
            force,
        } => {
            let suite = run::ablate_suite(
                &AblateArgs {
                    data,
                    config,
                    seeds,
                    out,
                    source_model,
                    force,
                },
                log,
            )?;
            for m in &suite.results {
                let (mean, std) = lfc_core::metrics::mean_std(&m.mean_dice());
                println!("{:<14} {}", m.mode, lfc_core::metrics::format_mean_std(mean, std));
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
