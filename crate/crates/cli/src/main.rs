use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use lap_core::experiment::{merge_tables, run_experiment, ExperimentConfig, ProblemKind, Scale};
use lap_core::models::Regularizer;
use lap_core::solvers::Method;

#[derive(Parser)]
#[command(name = "lap", version, about = "Joint image and rigid-motion reconstruction experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run seeded trials and write per-trial artifacts plus summary.csv.
    Run(RunArgs),
    /// Merge summary.csv files from several run directories into one table.
    Table {
        #[arg(long = "in", required = true, num_args = 1..)]
        dirs: Vec<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ProblemArg {
    Sr2d,
    Sr3d,
    Mri,
}

#[derive(Clone, Copy, ValueEnum)]
enum SolverArg {
    Lap,
    Varpro,
    Bcd,
}

#[derive(Clone, Copy, ValueEnum)]
enum RegArg {
    Grad,
    Identity,
    Hybrid,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScaleArg {
    Desk,
    Paper,
}

#[derive(clap::Args)]
struct RunArgs {
    #[arg(long, value_enum)]
    problem: ProblemArg,
    #[arg(long, value_enum, default_value = "lap")]
    solver: SolverArg,
    #[arg(long, value_enum, default_value = "grad")]
    reg: RegArg,
    #[arg(long, default_value_t = 0.01)]
    alpha: f64,
    #[arg(long, default_value_t = 0.02)]
    noise: f64,
    #[arg(long, default_value_t = 10)]
    trials: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, value_enum, default_value = "desk")]
    scale: ScaleArg,
    #[arg(long)]
    out: PathBuf,
    /// Override the outer iteration cap.
    #[arg(long)]
    max_outer: Option<usize>,
    /// Start at the true image and motion (debugging).
    #[arg(long)]
    start_at_truth: bool,
}

impl RunArgs {
    fn config(&self) -> ExperimentConfig {
        let problem = match self.problem {
            ProblemArg::Sr2d => ProblemKind::Sr2d,
            ProblemArg::Sr3d => ProblemKind::Sr3d,
            ProblemArg::Mri => ProblemKind::Mri,
        };
        let solver = match self.solver {
            SolverArg::Lap => Method::Lap,
            SolverArg::Varpro => Method::VarPro,
            SolverArg::Bcd => Method::Bcd,
        };
        let mut cfg = ExperimentConfig::new(problem, solver, &self.out);
        cfg.regularizer = match self.reg {
            RegArg::Grad => Regularizer::Grad,
            RegArg::Identity => Regularizer::Identity,
            RegArg::Hybrid => Regularizer::Hybrid,
        };
        cfg.scale = match self.scale {
            ScaleArg::Desk => Scale::Desk,
            ScaleArg::Paper => Scale::Paper,
        };
        cfg.alpha = self.alpha;
        cfg.noise = self.noise;
        cfg.trials = self.trials;
        cfg.seed = self.seed;
        cfg.max_outer = self.max_outer;
        cfg.start_at_truth = self.start_at_truth;
        cfg
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match cli.command {
        Command::Run(args) => {
            let cfg = args.config();
            match run_experiment(&cfg) {
                Ok(res) => {
                    let s = &res.summary;
                    println!(
                        "{} {} {}: iters {:.1}, relerr_x {:.3e}, relerr_w {:.3e}, matvecs {:.1}, time {:.2}s",
                        s.problem, s.solver, s.regularizer, s.mean_iters, s.mean_relerr_x, s.mean_relerr_w,
                        s.mean_matvecs, s.mean_time_s
                    );
                    let failures: Vec<_> = res.outcomes.iter().filter_map(|o| o.result.as_ref().err().map(|e| (o.trial, e))).collect();
                    if failures.is_empty() {
                        ExitCode::SUCCESS
                    } else {
                        for (t, e) in failures {
                            eprintln!("trial {t} failed: {e}");
                        }
                        ExitCode::FAILURE
                    }
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    ExitCode::FAILURE
                }
            }
        }
        Command::Table { dirs } => match merge_tables(&dirs) {
            Ok(t) => {
                print!("{t}");
                ExitCode::SUCCESS
            }
            Err(e) => {
                eprintln!("error: {e}");
                ExitCode::FAILURE
            }
        },
    }
}
