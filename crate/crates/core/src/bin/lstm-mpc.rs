use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use lstm_mpc::harness::{self, certify, run_scenario, write_trace, ModelFile, ModelMeta, Scenario};
use lstm_mpc::observer::{select_gains, ObserverConfig};
use lstm_mpc::plant::PhParams;
use lstm_mpc::sysid::{self, DataConfig, Dataset, Split, TrainConfig};
use lstm_mpc::Error;

#[derive(Parser)]
#[command(name = "lstm-mpc", version, about = "Identify, certify and control the pH benchmark with an LSTM model")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Simulate the plant under multilevel excitation and write a dataset.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Plant parameter overrides (JSON).
        #[arg(long)]
        plant: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a certified LSTM and attach observer gains.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        observer: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Print one JSON line per epoch to stderr.
        #[arg(long)]
        verbose: bool,
    },
    /// Print certificate, observer, tightening schedule and K̄ as JSON.
    Certify {
        #[arg(long)]
        model: PathBuf,
        /// Scenario supplying horizon, weights and observer overrides.
        #[arg(long)]
        scenario: Option<PathBuf>,
        /// Grid density for the K̄ estimate.
        #[arg(long, default_value_t = 25)]
        k_bar_density: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a closed-loop scenario.
    Simulate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        trace: PathBuf,
        #[arg(long)]
        report: PathBuf,
    },
}

fn load_or_default<T: serde::de::DeserializeOwned + Default>(p: &Option<PathBuf>) -> lstm_mpc::Result<T> {
    match p {
        Some(p) => harness::read_json(p),
        None => Ok(T::default()),
    }
}

fn emit(out: &Option<PathBuf>, v: &impl serde::Serialize) -> lstm_mpc::Result<()> {
    match out {
        Some(p) => harness::write_json(p, v),
        None => {
            println!("{}", serde_json::to_string_pretty(v)?);
            Ok(())
        }
    }
}

fn run(cmd: Cmd) -> lstm_mpc::Result<()> {
    match cmd {
        Cmd::GenData { config, plant, out } => {
            let cfg: DataConfig = load_or_default(&config)?;
            let p: PhParams = load_or_default(&plant)?;
            let data = Dataset::generate(&p, &cfg)?;
            data.save(&out)
        }
        Cmd::Train {
            data,
            config,
            observer,
            out,
            verbose,
        } => {
            let cfg: TrainConfig = load_or_default(&config)?;
            let ocfg: ObserverConfig = load_or_default(&observer)?;
            let data = Dataset::load(&data)?;
            let outcome = sysid::train(&data, &cfg, |log| {
                if verbose {
                    eprintln!("{}", serde_json::to_string(log).unwrap_or_default());
                }
            })?;
            let w = outcome.weights;
            let fit = |s| sysid::fit_on(&w, &data.normalized(s), cfg.washout);
            let meta = ModelMeta {
                epochs: outcome.epochs_run,
                fit_test: fit(Split::Test)?,
                fit_val: fit(Split::Val)?,
            };
            let spec = select_gains(&w, &ocfg)?;
            ModelFile {
                weights: w,
                normalizer: data.normalizer,
                observer: Some(spec),
                meta: Some(meta),
            }
            .save(&out)
        }
        Cmd::Certify {
            model,
            scenario,
            k_bar_density,
            out,
        } => {
            let m = ModelFile::load(&model)?;
            let mut sc = match &scenario {
                Some(p) => Scenario::load(p)?,
                None => Scenario::default(),
            };
            sc.k_bar_density = k_bar_density;
            emit(&out, &certify(&m, &sc)?)
        }
        Cmd::Simulate {
            model,
            scenario,
            trace,
            report,
        } => {
            let m = ModelFile::load(&model)?;
            let sc = Scenario::load(&scenario)?;
            let out = run_scenario(&m, &sc)?;
            write_trace(&trace, &out.trace)?;
            harness::write_json(&report, &out.report)
        }
    }
}

fn kind(e: &Error) -> &'static str {
    match e {
        Error::Dimension(_) => "dimension",
        Error::Argument(_) => "argument",
        Error::Unstable { .. } => "unstable",
        Error::Singular => "singular",
        Error::Training(_) => "training",
        Error::UndefinedMetric(_) => "undefined-metric",
        Error::Domain(_) => "domain",
        Error::Physical(_) => "physical",
        Error::Unphysical(_) => "unphysical",
        Error::GainSelection(_) => "gain-selection",
        Error::Assumption(_) => "assumption",
        Error::InfeasibleReference(_) => "infeasible-reference",
        Error::NoConvergence(_) => "no-convergence",
        Error::InfeasibleSetpoint { .. } => "infeasible-setpoint",
        Error::FeasibilityLoss(_) => "feasibility-loss",
        Error::Invariant { .. } => "invariant",
        Error::Config { .. } => "config",
        Error::Io(_) => "io",
        Error::Json(_) => "json",
        Error::Csv(_) => "csv",
    }
}

fn report_error(e: &Error) {
    let mut v = serde_json::json!({ "error": kind(e), "message": e.to_string() });
    match e {
        Error::Config { path, .. } => v["path"] = path.clone().into(),
        Error::Invariant { step, snapshot, .. } => {
            v["step"] = (*step).into();
            v["snapshot"] = serde_json::from_str(snapshot).unwrap_or(serde_json::Value::Null);
        }
        _ => {}
    }
    eprintln!("{v}");
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            report_error(&e);
            // configuration mistakes share clap's usage-error status
            if matches!(e, Error::Config { .. }) {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
