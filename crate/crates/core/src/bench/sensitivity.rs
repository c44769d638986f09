//! Accuracy over a grid of constant noise levels and drop rates. Each cell
//! draws its own trajectories from a cell-derived seed, shared by all methods.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{evaluate_method, InversionMethod};
use crate::error::{Error, Result};
use crate::observation::{generate_samples, DatasetConfig, ObservationConfig};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SensitivityConfig {
    pub sigmas: Vec<f64>,
    pub p_drops: Vec<f64>,
    pub n_samples: usize,
    pub seed: u64,
}

impl Default for SensitivityConfig {
    fn default() -> Self {
        Self {
            sigmas: vec![0.25, 0.5, 1.0, 1.5, 2.0],
            p_drops: vec![0.0, 0.25, 0.5, 0.75, 0.9],
            n_samples: 25,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityCell {
    pub method: String,
    pub sigma: f64,
    pub p_drop: f64,
    pub mean_rmse: f64,
    pub n_valid: usize,
}

/// Mean RMSE of every method in every cell, ordered by method, sigma, then drop rate.
pub fn sensitivity_grid(
    methods: &[&dyn InversionMethod],
    base: &DatasetConfig,
    climatology_mean: f64,
    cfg: &SensitivityConfig,
) -> Result<Vec<SensitivityCell>> {
    if methods.is_empty() {
        return Err(Error::invalid("no methods to evaluate"));
    }
    if cfg.n_samples == 0 || cfg.sigmas.is_empty() || cfg.p_drops.is_empty() {
        return Err(Error::invalid("the sensitivity grid is empty"));
    }
    let mut cells = Vec::with_capacity(methods.len() * cfg.sigmas.len() * cfg.p_drops.len());
    let mut by_cell = Vec::new();
    for (si, &sigma) in cfg.sigmas.iter().enumerate() {
        for (pi, &p_drop) in cfg.p_drops.iter().enumerate() {
            let obs = ObservationConfig::constant(sigma, p_drop);
            let seed = rng::mix(&[cfg.seed, si as u64, pi as u64]);
            let samples = generate_samples(&base.dynamics, &obs, base.window, base.spin_up_steps, seed, 0, cfg.n_samples)?;
            let scores = methods
                .iter()
                .map(|m| {
                    let rows = evaluate_method(*m, &samples, 0, climatology_mean)?;
                    let valid: Vec<f64> = rows.iter().filter(|r| r.valid).map(|r| r.rmse).collect();
                    let mean = if valid.is_empty() {
                        f64::NAN
                    } else {
                        valid.iter().sum::<f64>() / valid.len() as f64
                    };
                    Ok((mean, valid.len()))
                })
                .collect::<Result<Vec<_>>>()?;
            by_cell.push((sigma, p_drop, scores));
        }
    }
    for (k, m) in methods.iter().enumerate() {
        let id = m.id();
        for (sigma, p_drop, scores) in &by_cell {
            cells.push(SensitivityCell {
                method: id.clone(),
                sigma: *sigma,
                p_drop: *p_drop,
                mean_rmse: scores[k].0,
                n_valid: scores[k].1,
            });
        }
    }
    Ok(cells)
}

pub fn write_sensitivity_csv(path: &Path, cells: &[SensitivityCell]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for c in cells {
        w.serialize(c)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_sensitivity_csv(path: &Path) -> Result<Vec<SensitivityCell>> {
    let mut r = csv::Reader::from_path(path).map_err(|_| Error::MissingArtifact(path.to_path_buf()))?;
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}
