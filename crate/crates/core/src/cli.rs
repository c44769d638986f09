//! Command-line front end: `generate`, `assimilate`, `train`, `evaluate`, `sensitivity`.
//!
//! Every command takes the experiment config (`--config`, defaults when
//! omitted), applies flag overrides, and writes the resolved config next to
//! its outputs. Exit codes: 0 success, 2 usage or configuration error,
//! 3 runtime or numeric failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::bench::experiment::{build_methods, evaluate_methods, iter_variant, sensitivity, train_method, TrainedNet};
use crate::bench::{compute_accounting, summarize, write_accounting_csv, write_metrics_csv, write_sensitivity_csv, Method};
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::io::{sha256_hex, write_f64le};
use crate::neuralnet::{load_checkpoint, save_checkpoint};
use crate::observation::{generate_dataset, load_dataset, save_dataset, Dataset, Split};
use crate::training::{load_targets, save_targets, train_supervised, IterTargets, TrainReport};

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const METRICS_FILE: &str = "metrics.csv";
pub const SENSITIVITY_FILE: &str = "sensitivity.csv";

#[derive(Debug, Parser)]
#[command(name = "hybrid4dvar", version, about = "4DVAR and learned inversion on Lorenz96")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, clap::Args)]
pub struct Common {
    /// Experiment config (JSON); missing fields take defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Variant {
    #[value(name = "4dvar")]
    FourDVar,
    #[value(name = "4dvar-b")]
    FourDVarB,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    E2e,
    Perfect,
    Iter,
    IterB,
}

impl Mode {
    pub fn method(self) -> Method {
        match self {
            Mode::E2e => Method::NnE2e,
            Mode::Perfect => Method::NnPerfect,
            Mode::Iter => Method::NnIter,
            Mode::IterB => Method::NnBIter,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate a dataset of truth trajectories and observations.
    Generate {
        #[command(flatten)]
        common: Common,
        /// Dataset seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run 4DVAR on every sample of a split.
    Assimilate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum)]
        variant: Variant,
        #[arg(long, default_value = "test")]
        split: Split,
    },
    /// Train a network.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum)]
        mode: Mode,
        /// Training seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Reuse targets written by an earlier iterative run.
        #[arg(long)]
        targets: Option<PathBuf>,
    },
    /// Score methods on a split. Specs are `4dvar`, `4dvar-b`, or `<learned-id>=<checkpoint>`.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long = "method", required = true)]
        methods: Vec<String>,
        #[arg(long, default_value = "test")]
        split: Split,
    },
    /// Mean RMSE over the noise and drop-rate grid on fresh samples.
    Sensitivity {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long = "method", required = true)]
        methods: Vec<String>,
        /// Seed of the fresh evaluation samples.
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    match &common.config {
        Some(p) => ExperimentConfig::load(p),
        None => Ok(ExperimentConfig::default()),
    }
}

/// The config used to build a dataset replaces the dataset section of the run config.
fn with_dataset(mut cfg: ExperimentConfig, data: &Dataset) -> Result<ExperimentConfig> {
    cfg.dataset = data.config.clone();
    cfg.validate()?;
    Ok(cfg)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

/// Parses `4dvar`, `4dvar-b` or `<learned-id>=<checkpoint path>`.
pub fn parse_method_spec(spec: &str) -> Result<(Method, Option<PathBuf>)> {
    let (id, path) = match spec.split_once('=') {
        Some((id, path)) => (id, Some(PathBuf::from(path))),
        None => (spec, None),
    };
    let method: Method = id.parse()?;
    match (method.is_learned(), &path) {
        (true, None) => Err(Error::invalid(format!("{method} needs a checkpoint: {method}=<path>"))),
        (false, Some(_)) => Err(Error::invalid(format!("{method} takes no checkpoint"))),
        _ => Ok((method, path)),
    }
}

fn load_methods(specs: &[String]) -> Result<(Vec<Method>, Vec<TrainedNet>)> {
    if specs.is_empty() {
        return Err(Error::invalid("no methods given"));
    }
    let mut methods = Vec::new();
    let mut nets = Vec::new();
    for spec in specs {
        let (method, path) = parse_method_spec(spec)?;
        if let Some(path) = path {
            let checkpoint = load_checkpoint(&path)?;
            nets.push(TrainedNet {
                method,
                report: empty_report(method),
                checkpoint,
            });
        }
        methods.push(method);
    }
    Ok((methods, nets))
}

fn empty_report(method: Method) -> TrainReport {
    TrainReport {
        method: method.id().into(),
        n_train: 0,
        initial_train_loss: None,
        epochs: Vec::new(),
        best_epoch: 0,
        best_val_rmse: f64::NAN,
        n_model_integrations: 0,
        n_diagnostic_integrations: 0,
        n_samples_visited: 0,
        wall_seconds: 0.0,
    }
}

pub fn cmd_generate(cfg: &ExperimentConfig, out: &Path) -> Result<String> {
    cfg.validate()?;
    let dataset = generate_dataset(&cfg.dataset)?;
    let digest = save_dataset(&dataset, out)?;
    cfg.save_resolved(out)?;
    Ok(digest)
}

/// Returns the number of samples that could be assimilated.
pub fn cmd_assimilate(cfg: &ExperimentConfig, data: &Path, variant: Variant, split: Split, out: &Path) -> Result<usize> {
    let dataset = load_dataset(data)?;
    let cfg = with_dataset(cfg.clone(), &dataset)?;
    let method = match variant {
        Variant::FourDVar => Method::FourDVar,
        Variant::FourDVarB => Method::FourDVarB,
    };
    let methods = build_methods(&dataset, &cfg, &[], &[method])?;
    fs::create_dir_all(out)?;
    cfg.save_resolved(out)?;
    let mut estimates = Vec::new();
    for sample in dataset.split(split) {
        let x = methods[0]
            .invert(sample, dataset.climatology_mean)
            .map(|(x, _)| x)
            .unwrap_or_else(|_| vec![f64::NAN; sample.x0().len()]);
        estimates.extend(x);
    }
    fs::write(out.join("x0_hat.bin"), write_f64le(&estimates))?;
    let rows = evaluate_methods(&dataset, &methods, split)?;
    write_metrics_csv(&out.join(METRICS_FILE), &rows)?;
    Ok(rows.iter().filter(|r| r.valid).count())
}

/// Trains one network and returns the SHA-256 of its checkpoint.
pub fn cmd_train(cfg: &ExperimentConfig, data: &Path, mode: Mode, targets_dir: Option<&Path>, out: &Path) -> Result<String> {
    let dataset = load_dataset(data)?;
    let cfg = with_dataset(cfg.clone(), &dataset)?;
    fs::create_dir_all(out)?;
    cfg.save_resolved(out)?;
    let method = mode.method();
    let (mut trained, targets): (TrainedNet, Option<IterTargets>) = match (targets_dir, iter_variant(method)) {
        (Some(dir), Some(variant)) => {
            let targets = load_targets(dir)?;
            if targets.variant != variant || targets.targets.len() != dataset.split(Split::Train).len() {
                return Err(Error::invalid(format!("{} does not hold {method} targets for this dataset", dir.display())));
            }
            let (checkpoint, report) = train_supervised(&dataset, &targets.targets, cfg.architecture()?, &cfg.training, method.id())?;
            let net = TrainedNet {
                method,
                checkpoint,
                report,
            };
            (net, Some(targets))
        }
        (Some(_), None) => return Err(Error::invalid("--targets only applies to iter modes")),
        (None, _) => train_method(&dataset, &cfg, method)?,
    };
    let dataset_digest = crate::observation::dataset_digest(data)?;
    trained.checkpoint.provenance.dataset_digest = Some(dataset_digest);
    if let Some(t) = &targets {
        let dir = out.join("targets");
        save_targets(t, &dir)?;
        let blob = fs::read(dir.join(crate::training::TARGETS_FILE))?;
        trained.checkpoint.provenance.targets_digest = Some(sha256_hex(&blob));
    }
    let digest = save_checkpoint(&trained.checkpoint, &out.join(CHECKPOINT_FILE))?;
    trained.report.write_log(&out.join("train_log.jsonl"))?;
    write_json(&out.join("report.json"), &trained.report)?;
    let iter: Vec<(Method, &IterTargets)> = targets.iter().map(|t| (method, t)).collect();
    let accounting = match method {
        Method::NnE2e => compute_accounting(Some(&trained.report), &[], None),
        Method::NnPerfect => compute_accounting(None, &[], Some(&trained.report)),
        _ => compute_accounting(None, &iter, None),
    };
    write_accounting_csv(&out.join("accounting.csv"), &accounting)?;
    Ok(digest)
}

pub fn cmd_evaluate(cfg: &ExperimentConfig, data: &Path, specs: &[String], split: Split, out: &Path) -> Result<()> {
    let (methods, nets) = load_methods(specs)?;
    let dataset = load_dataset(data)?;
    let cfg = with_dataset(cfg.clone(), &dataset)?;
    let refs: Vec<&TrainedNet> = nets.iter().collect();
    let procs = build_methods(&dataset, &cfg, &refs, &methods)?;
    fs::create_dir_all(out)?;
    cfg.save_resolved(out)?;
    let rows = evaluate_methods(&dataset, &procs, split)?;
    write_metrics_csv(&out.join(METRICS_FILE), &rows)?;
    write_json(&out.join("summary.json"), &summarize(&rows))?;
    Ok(())
}

pub fn cmd_sensitivity(cfg: &ExperimentConfig, data: &Path, specs: &[String], out: &Path) -> Result<()> {
    let (methods, nets) = load_methods(specs)?;
    let dataset = load_dataset(data)?;
    let cfg = with_dataset(cfg.clone(), &dataset)?;
    let refs: Vec<&TrainedNet> = nets.iter().collect();
    let procs = build_methods(&dataset, &cfg, &refs, &methods)?;
    fs::create_dir_all(out)?;
    cfg.save_resolved(out)?;
    let cells = sensitivity(&dataset, &cfg, &procs)?;
    write_sensitivity_csv(&out.join(SENSITIVITY_FILE), &cells)?;
    Ok(())
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate { common, seed } => {
            let mut cfg = load_config(&common)?;
            if let Some(s) = seed {
                cfg.dataset.seed = s;
            }
            let digest = cmd_generate(&cfg, &common.out)?;
            println!("{digest}");
        }
        Command::Assimilate {
            common,
            data,
            variant,
            split,
        } => {
            let cfg = load_config(&common)?;
            let ok = cmd_assimilate(&cfg, &data, variant, split, &common.out)?;
            if ok == 0 {
                return Err(Error::NonFinite { step: 0 });
            }
            println!("{ok} samples assimilated");
        }
        Command::Train {
            common,
            data,
            mode,
            seed,
            targets,
        } => {
            let mut cfg = load_config(&common)?;
            if let Some(s) = seed {
                cfg.training.seed = s;
            }
            let digest = cmd_train(&cfg, &data, mode, targets.as_deref(), &common.out)?;
            println!("{digest}");
        }
        Command::Evaluate {
            common,
            data,
            methods,
            split,
        } => {
            let cfg = load_config(&common)?;
            cmd_evaluate(&cfg, &data, &methods, split, &common.out)?;
        }
        Command::Sensitivity {
            common,
            data,
            methods,
            seed,
        } => {
            let mut cfg = load_config(&common)?;
            if let Some(s) = seed {
                cfg.sensitivity.seed = s;
            }
            cmd_sensitivity(&cfg, &data, &methods, &common.out)?;
        }
    }
    Ok(())
}

/// Exit code for a failed command.
pub fn exit_code(err: &Error) -> u8 {
    match err {
        Error::InvalidConfig(_) | Error::MissingArtifact(_) => 2,
        _ => 3,
    }
}

pub fn run<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn method_specs() {
        assert_eq!(parse_method_spec("4dvar").unwrap(), (Method::FourDVar, None));
        assert_eq!(
            parse_method_spec("nn-perfect=a/b.ckpt").unwrap(),
            (Method::NnPerfect, Some(PathBuf::from("a/b.ckpt")))
        );
        assert!(parse_method_spec("nn-perfect").is_err());
        assert!(parse_method_spec("4dvar=x").is_err());
        assert!(parse_method_spec("3dvar").is_err());
        assert!(load_methods(&[]).is_err());
    }

    #[test]
    fn usage_errors_exit_with_two() {
        let code = |args: &[&str]| run(std::iter::once("hybrid4dvar").chain(args.iter().copied()));
        assert_eq!(code(&["generate"]), ExitCode::from(2));
        assert_eq!(code(&["assimilate", "--out", "x", "--data", "y", "--variant", "5dvar"]), ExitCode::from(2));
        assert_eq!(code(&["bogus"]), ExitCode::from(2));
        assert_eq!(exit_code(&Error::invalid("x")), 2);
        assert_eq!(exit_code(&Error::NonFinite { step: 1 }), 3);
    }
}
