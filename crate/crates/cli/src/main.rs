use clap::{Parser, Subcommand};
use echoatt_cli::commands::{self, Ctx, PlanArgs};
use echoatt_cli::{CliError, CliResult};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "echoatt", version, about = "Cross-layer attention sharing toolkit")]
struct Cli {
    /// Output directory; overrides the config's `out_dir`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads for data-parallel analysis.
    #[arg(long, global = true, default_value_t = 1)]
    workers: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain a dense teacher on the configured corpus.
    TrainTeacher { config: PathBuf },
    /// Measure cross-layer attention similarity of a dense checkpoint.
    Analyze {
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Build a sharing plan from a similarity report or an index list.
    Plan {
        config: PathBuf,
        #[arg(long)]
        report: Option<PathBuf>,
        /// Maximum layers per shared block.
        #[arg(long)]
        k: Option<usize>,
        /// Leading layers kept unshared.
        #[arg(long)]
        b: Option<usize>,
        /// Explicit shared layer indices, e.g. `2,3,4,5,7`.
        #[arg(long, value_delimiter = ',')]
        indices: Option<Vec<usize>>,
    },
    /// Two-stage distillation of a shared-attention student.
    Distill {
        config: PathBuf,
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        plan: PathBuf,
    },
    /// Validation perplexity of a checkpoint.
    Eval {
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Parameter, FLOP and wall-clock comparison of baseline and student.
    Bench {
        config: PathBuf,
        #[arg(long)]
        baseline: PathBuf,
        #[arg(long)]
        student: PathBuf,
    },
    /// Parameter-removal arithmetic for the published sharing ratios.
    Table3 {
        config: PathBuf,
        /// Print the rows as JSON instead of a table.
        #[arg(long)]
        json: bool,
    },
}

fn run(cli: Cli) -> CliResult<()> {
    if cli.workers == 0 {
        return Err(CliError::Usage("--workers must be >= 1".into()));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(cli.workers)
        .build_global()
        .map_err(|e| CliError::Usage(e.to_string()))?;
    let seed = std::env::var("ECHOATT_SEED").ok();
    let ctx = |config: &PathBuf| Ctx::new(config, cli.out.clone(), seed.clone());
    match &cli.command {
        Command::TrainTeacher { config } => commands::train_teacher(&ctx(config)?),
        Command::Analyze { config, checkpoint } => commands::analyze(&ctx(config)?, checkpoint),
        Command::Plan {
            config,
            report,
            k,
            b,
            indices,
        } => commands::plan(
            &ctx(config)?,
            PlanArgs {
                report: report.clone(),
                k: *k,
                b: *b,
                indices: indices.clone(),
            },
        ),
        Command::Distill { config, teacher, plan } => commands::distill(&ctx(config)?, teacher, plan),
        Command::Eval { config, checkpoint } => commands::eval(&ctx(config)?, checkpoint),
        Command::Bench {
            config,
            baseline,
            student,
        } => commands::bench(&ctx(config)?, baseline, student),
        Command::Table3 { config, json } => {
            let rows = commands::table3_rows(&ctx(config)?)?;
            if *json {
                println!("{}", serde_json::to_string_pretty(&rows)?);
            } else {
                commands::print_table3(&rows);
            }
            Ok(())
        }
    }
}

fn fail(e: CliError) -> ExitCode {
    eprintln!("{}", e.to_json());
    ExitCode::from(e.exit_code() as u8)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => return fail(CliError::Usage(e.render().to_string().trim().to_string())),
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(e),
    }
}
