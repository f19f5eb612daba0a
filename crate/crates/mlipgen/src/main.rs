use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mlipgen::commands::{self, FitFlags, TrainingFlags};
use mlipgen::config::RunConfig;
use mlipgen::error::{CliError, CliResult, EXIT_CONFIG, EXIT_STAGE};
use mlipgen_core::lattice::DefectKind;
use serde_json::{json, Value};

#[derive(Debug, Parser)]
#[command(name = "mlipgen", version, about = "Defect equilibria under fitted interatomic surrogates")]
struct Cli {
    /// TOML run configuration; the bundled default when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory; overrides `output_dir`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Run the derivative checks and exit.
    #[arg(long)]
    check_derivatives: bool,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write the configured defected lattice as XYZ.
    GenerateLattice,
    /// Relax the configured lattice under the reference potential.
    Equilibrate,
    /// Sample a training set on a defected training cell.
    MakeTrainingSet {
        #[arg(long = "L")]
        size: Option<usize>,
        #[arg(long, value_parser = parse_defect)]
        defect: Option<DefectKind>,
        #[arg(long)]
        n_train: Option<usize>,
        #[arg(long)]
        n_test: Option<usize>,
        #[arg(long)]
        delta: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Fit a surrogate to a training set.
    Fit {
        #[arg(long)]
        training_set: PathBuf,
        #[arg(long)]
        basis_order: Option<usize>,
        #[arg(long)]
        basis_degree: Option<usize>,
        #[arg(long)]
        we: Option<f64>,
        #[arg(long)]
        wf: Option<f64>,
        #[arg(long)]
        rtol: Option<f64>,
    },
    /// Evaluate matching errors of a model on its training domain.
    ReportMatching {
        #[arg(long)]
        training_set: PathBuf,
        #[arg(long)]
        model: PathBuf,
    },
    /// Run the convergence study grid.
    Study,
    /// Compare analytic derivatives with finite differences.
    CheckDerivatives {
        #[arg(long)]
        model: Option<PathBuf>,
    },
}

fn parse_defect(s: &str) -> Result<DefectKind, String> {
    match s {
        "vacancy" => Ok(DefectKind::Vacancy),
        "interstitial" => Ok(DefectKind::Interstitial),
        _ => Err(format!("unknown defect `{s}`; expected vacancy or interstitial")),
    }
}

fn derivative_outcome(cfg: &RunConfig, model: Option<&std::path::Path>) -> CliResult<Value> {
    let report = commands::check_derivatives(cfg, model)?;
    if report.pass {
        Ok(serde_json::to_value(&report).expect("report serializes"))
    } else {
        Err(CliError::Check {
            stage: "check_derivatives",
            message: serde_json::to_string(&report).expect("report serializes"),
        })
    }
}

fn run(cli: Cli) -> CliResult<Value> {
    let cfg = RunConfig::load(cli.config.as_deref())?;
    let out = commands::output_dir(&cfg, cli.out.as_deref());
    if cli.check_derivatives {
        if cli.command.is_some() {
            return Err(CliError::config("--check-derivatives", "cannot be combined with a subcommand"));
        }
        return derivative_outcome(&cfg, None);
    }
    let Some(command) = cli.command else {
        return Err(CliError::config("<command>", "a subcommand or --check-derivatives is required"));
    };
    match command {
        Command::GenerateLattice => commands::generate_lattice(&cfg, &out),
        Command::Equilibrate => commands::equilibrate_lattice(&cfg, &out),
        Command::MakeTrainingSet { size, defect, n_train, n_test, delta, seed } => {
            let flags = TrainingFlags { size, defect, n_train, n_test, delta, seed };
            commands::make_training_set(&cfg, &flags, &out.join("training_set"))
        }
        Command::Fit { training_set, basis_order, basis_degree, we, wf, rtol } => {
            let flags = FitFlags { order: basis_order, degree: basis_degree, we, wf, rtol };
            commands::fit_model(&cfg, &flags, &training_set, &out)
        }
        Command::ReportMatching { training_set, model } => commands::report_matching(&cfg, &training_set, &model, &out),
        Command::Study => commands::study(&cfg, &out),
        Command::CheckDerivatives { model } => derivative_outcome(&cfg, model.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            let body = json!({
                "error": { "kind": "usage", "message": e.kind().to_string(), "detail": e.to_string() },
                "exit_code": EXIT_CONFIG,
            });
            eprintln!("{body}");
            return ExitCode::from(EXIT_CONFIG as u8);
        }
    };
    match run(cli) {
        Ok(v) => {
            println!("{}", serde_json::to_string_pretty(&v).expect("summary serializes"));
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::from(u8::try_from(e.exit_code()).unwrap_or(EXIT_STAGE as u8))
        }
    }
}
