//! Training cost in model integrations, measured against the nominal
//! `N x n_epoch` (end-to-end) and `N x n_iter` (iterative baselines) counts.
//! One integration is one forward run or one adjoint sweep, so a gradient
//! costs two.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Method;
use crate::error::Result;
use crate::training::{IterTargets, TrainReport};

/// Integrations per gradient evaluation: one forward run and one adjoint sweep.
pub const GRADIENT_COST: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccountingRow {
    pub method: String,
    pub n_train: usize,
    /// Epochs for end-to-end training, the iteration cap for the iterative baselines.
    pub per_sample: usize,
    /// `n_train * per_sample`.
    pub nominal: usize,
    pub measured: usize,
    /// `measured / nominal`, zero when nothing is nominally spent.
    pub ratio: f64,
    /// End-to-end: `nominal <= measured <= 2 nominal`; iterative: `measured <= 2 nominal`;
    /// supervised on truth: `measured == 0`.
    pub within_bound: bool,
}

fn row(method: Method, n_train: usize, per_sample: usize, measured: usize, ok: impl Fn(usize, usize) -> bool) -> AccountingRow {
    let nominal = n_train * per_sample;
    AccountingRow {
        method: method.id().into(),
        n_train,
        per_sample,
        nominal,
        measured,
        ratio: if nominal > 0 { measured as f64 / nominal as f64 } else { 0.0 },
        within_bound: ok(nominal, measured),
    }
}

pub fn compute_accounting(
    e2e: Option<&TrainReport>,
    iter: &[(Method, &IterTargets)],
    perfect: Option<&TrainReport>,
) -> Vec<AccountingRow> {
    let mut rows = Vec::new();
    if let Some(r) = e2e {
        rows.push(row(Method::NnE2e, r.n_train, r.epochs.len(), r.n_model_integrations, |nom, m| {
            nom <= m && m <= GRADIENT_COST * nom
        }));
    }
    for (method, t) in iter {
        rows.push(row(*method, t.targets.len(), t.options.lbfgs.max_iter, t.n_model_integrations, |nom, m| {
            m <= GRADIENT_COST * nom
        }));
    }
    if let Some(r) = perfect {
        rows.push(row(Method::NnPerfect, r.n_train, r.epochs.len(), r.n_model_integrations, |_, m| m == 0));
    }
    rows
}

pub fn write_accounting_csv(path: &Path, rows: &[AccountingRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::training::EpochLog;

    fn report(n_train: usize, epochs: usize, integrations: usize) -> TrainReport {
        TrainReport {
            method: "x".into(),
            n_train,
            initial_train_loss: None,
            epochs: (1..=epochs)
                .map(|epoch| EpochLog {
                    epoch,
                    train_loss: 1.0,
                    val_rmse: 1.0,
                    skipped_batches: 0,
                    n_batches: 1,
                    n_model_integrations: 0,
                })
                .collect(),
            best_epoch: 1,
            best_val_rmse: 1.0,
            n_model_integrations: integrations,
            n_diagnostic_integrations: 0,
            n_samples_visited: n_train * epochs,
            wall_seconds: 0.0,
        }
    }

    #[test]
    fn bounds() {
        let rows = compute_accounting(Some(&report(250, 50, 25_000)), &[], Some(&report(250, 50, 0)));
        assert_eq!(rows[0].nominal, 12_500);
        assert_eq!(rows[0].ratio, 2.0);
        assert!(rows[0].within_bound);
        assert!(rows[1].within_bound);
        let over = compute_accounting(Some(&report(250, 50, 25_001)), &[], Some(&report(250, 50, 3)));
        assert!(!over[0].within_bound);
        assert!(!over[1].within_bound);
    }
}
