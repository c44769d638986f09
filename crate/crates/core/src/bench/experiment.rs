//! The full comparison in memory: train every learned method, then score all
//! methods on the test split and over the sensitivity grid.

use serde::{Deserialize, Serialize};

use super::{
    compute_accounting, evaluate_method, sensitivity_grid, AccountingRow, Assimilator, InversionMethod, Method, MetricRow,
    Network, SensitivityCell,
};
use crate::config::ExperimentConfig;
use crate::dynamics::Lorenz96;
use crate::error::Result;
use crate::neuralnet::Checkpoint;
use crate::observation::{Dataset, Split};
use crate::training::{build_iter_targets, train_e2e, train_perfect, train_supervised, IterTargets, IterVariant, TrainReport};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedNet {
    pub method: Method,
    pub checkpoint: Checkpoint,
    pub report: TrainReport,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModels {
    pub nets: Vec<TrainedNet>,
    pub targets: Vec<(Method, IterTargets)>,
}

impl TrainedModels {
    pub fn get(&self, method: Method) -> Option<&TrainedNet> {
        self.nets.iter().find(|n| n.method == method)
    }

    pub fn accounting(&self) -> Vec<AccountingRow> {
        let iter: Vec<(Method, &IterTargets)> = self.targets.iter().map(|(m, t)| (*m, t)).collect();
        compute_accounting(
            self.get(Method::NnE2e).map(|n| &n.report),
            &iter,
            self.get(Method::NnPerfect).map(|n| &n.report),
        )
    }
}

/// Which targets feed a supervised method.
pub fn iter_variant(method: Method) -> Option<IterVariant> {
    match method {
        Method::NnIter => Some(IterVariant::Plain),
        Method::NnBIter => Some(IterVariant::Background),
        _ => None,
    }
}

/// Trains one learned method; iterative baselines first build their targets.
pub fn train_method(dataset: &Dataset, cfg: &ExperimentConfig, method: Method) -> Result<(TrainedNet, Option<IterTargets>)> {
    let arch = cfg.architecture()?;
    let (checkpoint, report, targets) = match method {
        Method::NnE2e => {
            let (c, r) = train_e2e(dataset, arch, &cfg.training)?;
            (c, r, None)
        }
        Method::NnPerfect => {
            let (c, r) = train_perfect(dataset, arch, &cfg.training)?;
            (c, r, None)
        }
        Method::NnIter | Method::NnBIter => {
            let variant = iter_variant(method).expect("iterative method");
            let targets = build_iter_targets(dataset, variant, cfg.lambda_b, &cfg.assimilation)?;
            let (c, r) = train_supervised(dataset, &targets.targets, arch, &cfg.training, method.id())?;
            (c, r, Some(targets))
        }
        Method::FourDVar | Method::FourDVarB => {
            return Err(crate::Error::invalid(format!("{method} is not a learned method")));
        }
    };
    Ok((
        TrainedNet {
            method,
            checkpoint,
            report,
        },
        targets,
    ))
}

pub fn train_all(dataset: &Dataset, cfg: &ExperimentConfig) -> Result<TrainedModels> {
    let mut out = TrainedModels {
        nets: Vec::new(),
        targets: Vec::new(),
    };
    for method in Method::ALL.into_iter().filter(|m| m.is_learned()) {
        let (net, targets) = train_method(dataset, cfg, method)?;
        if let Some(t) = targets {
            out.targets.push((method, t));
        }
        out.nets.push(net);
    }
    Ok(out)
}

/// Boxed inversion procedures for the requested methods; learned ones must be in `models`.
pub fn build_methods(
    dataset: &Dataset,
    cfg: &ExperimentConfig,
    models: &[&TrainedNet],
    methods: &[Method],
) -> Result<Vec<Box<dyn InversionMethod>>> {
    let model = Lorenz96::new(dataset.config.dynamics)?;
    methods
        .iter()
        .map(|&m| -> Result<Box<dyn InversionMethod>> {
            Ok(match m {
                Method::FourDVar | Method::FourDVarB => Box::new(Assimilator {
                    model,
                    background_weight: (m == Method::FourDVarB).then_some(cfg.lambda_b),
                    options: cfg.assimilation,
                }),
                learned => {
                    let net = models
                        .iter()
                        .find(|n| n.method == learned)
                        .ok_or_else(|| crate::Error::invalid(format!("no trained network for {learned}")))?;
                    Box::new(Network {
                        id: learned.id().into(),
                        net: net.checkpoint.net.clone(),
                    })
                }
            })
        })
        .collect()
}

/// Rows for every method on `split`, grouped by method in the given order.
pub fn evaluate_methods(dataset: &Dataset, methods: &[Box<dyn InversionMethod>], split: Split) -> Result<Vec<MetricRow>> {
    let first = dataset.indices(split).start;
    let mut rows = Vec::new();
    for m in methods {
        rows.extend(evaluate_method(m.as_ref(), dataset.split(split), first, dataset.climatology_mean)?);
    }
    Ok(rows)
}

pub fn sensitivity(dataset: &Dataset, cfg: &ExperimentConfig, methods: &[Box<dyn InversionMethod>]) -> Result<Vec<SensitivityCell>> {
    let refs: Vec<&dyn InversionMethod> = methods.iter().map(|m| m.as_ref()).collect();
    sensitivity_grid(&refs, &dataset.config, dataset.climatology_mean, &cfg.sensitivity)
}

/// Headline numbers of a finished comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Outcome {
    pub metrics: Vec<MetricRow>,
    pub cells: Vec<SensitivityCell>,
    pub accounting: Vec<AccountingRow>,
}

pub fn run(dataset: &Dataset, cfg: &ExperimentConfig) -> Result<(TrainedModels, Outcome)> {
    let models = train_all(dataset, cfg)?;
    let nets: Vec<&TrainedNet> = models.nets.iter().collect();
    let methods = build_methods(dataset, cfg, &nets, &Method::ALL)?;
    let metrics = evaluate_methods(dataset, &methods, Split::Test)?;
    let cells = sensitivity(dataset, cfg, &methods)?;
    let accounting = models.accounting();
    Ok((
        models,
        Outcome {
            metrics,
            cells,
            accounting,
        },
    ))
}
