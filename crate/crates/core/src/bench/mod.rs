//! Comparing inversion methods on held-out samples.

pub mod accounting;
pub mod experiment;
pub mod metrics;
pub mod sensitivity;

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::Lorenz96;
use crate::error::{Error, Result};
use crate::neuralnet::ConvNet;
use crate::observation::Sample;
use crate::variational::{assimilate, AssimilationOptions};
use metrics::{bias, rmse};

pub use accounting::{compute_accounting, write_accounting_csv, AccountingRow};
pub use sensitivity::{sensitivity_grid, write_sensitivity_csv, SensitivityCell, SensitivityConfig};

/// The compared inversion methods.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "4dvar")]
    FourDVar,
    #[serde(rename = "4dvar-b")]
    FourDVarB,
    #[serde(rename = "nn-4dvar-e2e")]
    NnE2e,
    #[serde(rename = "nn-4dvar-iter")]
    NnIter,
    #[serde(rename = "nn-4dvar-b-iter")]
    NnBIter,
    #[serde(rename = "nn-perfect")]
    NnPerfect,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::FourDVar,
        Method::FourDVarB,
        Method::NnE2e,
        Method::NnIter,
        Method::NnBIter,
        Method::NnPerfect,
    ];

    pub fn id(self) -> &'static str {
        match self {
            Method::FourDVar => "4dvar",
            Method::FourDVarB => "4dvar-b",
            Method::NnE2e => "nn-4dvar-e2e",
            Method::NnIter => "nn-4dvar-iter",
            Method::NnBIter => "nn-4dvar-b-iter",
            Method::NnPerfect => "nn-perfect",
        }
    }

    pub fn is_learned(self) -> bool {
        !matches!(self, Method::FourDVar | Method::FourDVarB)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.id() == s)
            .ok_or_else(|| Error::invalid(format!("unknown method {s:?}")))
    }
}

/// Anything that maps an observation window to an initial-state estimate.
pub trait InversionMethod: Sync {
    fn id(&self) -> String;

    /// Returns the estimate and the number of model integrations it cost.
    fn invert(&self, sample: &Sample, climatology_mean: f64) -> Result<(Vec<f64>, usize)>;
}

/// 4DVAR from the climatology first guess, optionally with the background term.
pub struct Assimilator {
    pub model: Lorenz96,
    pub background_weight: Option<f64>,
    pub options: AssimilationOptions,
}

impl InversionMethod for Assimilator {
    fn id(&self) -> String {
        let m = if self.background_weight.is_some() {
            Method::FourDVarB
        } else {
            Method::FourDVar
        };
        m.id().into()
    }

    fn invert(&self, sample: &Sample, climatology_mean: f64) -> Result<(Vec<f64>, usize)> {
        let res = assimilate(&self.model, &sample.obs, climatology_mean, self.background_weight, &self.options)?;
        Ok((res.x0_hat, res.n_model_integrations))
    }
}

/// A trained network; inference costs no model integration.
pub struct Network {
    pub id: String,
    pub net: ConvNet,
}

impl InversionMethod for Network {
    fn id(&self) -> String {
        self.id.clone()
    }

    fn invert(&self, sample: &Sample, _climatology_mean: f64) -> Result<(Vec<f64>, usize)> {
        Ok((self.net.predict(&sample.obs)?, 0))
    }
}

/// Returns the true initial state.
pub struct Oracle;

impl InversionMethod for Oracle {
    fn id(&self) -> String {
        "oracle".into()
    }

    fn invert(&self, sample: &Sample, _climatology_mean: f64) -> Result<(Vec<f64>, usize)> {
        Ok((sample.x0().to_vec(), 0))
    }
}

/// Returns the first guess without any optimisation.
pub struct FirstGuess;

impl InversionMethod for FirstGuess {
    fn id(&self) -> String {
        "first-guess".into()
    }

    fn invert(&self, sample: &Sample, climatology_mean: f64) -> Result<(Vec<f64>, usize)> {
        Ok((crate::variational::first_guess(&sample.obs, climatology_mean), 0))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub method: String,
    pub sample: usize,
    pub rmse: f64,
    pub bias: f64,
    pub n_integrations: usize,
    pub valid: bool,
}

/// One row per sample; `first_index` is the dataset index of `samples[0]`.
/// Numeric failures become invalid rows rather than errors.
pub fn evaluate_method(
    method: &dyn InversionMethod,
    samples: &[Sample],
    first_index: usize,
    climatology_mean: f64,
) -> Result<Vec<MetricRow>> {
    let id = method.id();
    samples
        .par_iter()
        .enumerate()
        .map(|(k, sample)| {
            let row = |rmse, bias, n_integrations, valid| MetricRow {
                method: id.clone(),
                sample: first_index + k,
                rmse,
                bias,
                n_integrations,
                valid,
            };
            match method.invert(sample, climatology_mean) {
                Ok((x, n)) if x.iter().all(|v| v.is_finite()) => Ok(row(rmse(&x, sample.x0()), bias(&x, sample.x0()), n, true)),
                Ok((_, n)) => Ok(row(f64::NAN, f64::NAN, n, false)),
                Err(e) if e.is_numeric() => Ok(row(f64::NAN, f64::NAN, 0, false)),
                Err(e) => Err(e),
            }
        })
        .collect()
}

/// Boxplot statistics over the valid rows (Tukey whiskers at 1.5 IQR).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxStats {
    pub n_valid: usize,
    pub n_invalid: usize,
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
    pub whisker_low: f64,
    pub whisker_high: f64,
    pub mean: f64,
    pub n_outliers: usize,
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

impl BoxStats {
    /// `None` when no value is finite.
    pub fn from_values(values: &[f64]) -> Option<Self> {
        let mut v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
        if v.is_empty() {
            return None;
        }
        v.sort_by(f64::total_cmp);
        let (q1, median, q3) = (quantile(&v, 0.25), quantile(&v, 0.5), quantile(&v, 0.75));
        let iqr = q3 - q1;
        let (lo_fence, hi_fence) = (q1 - 1.5 * iqr, q3 + 1.5 * iqr);
        let inside: Vec<f64> = v.iter().copied().filter(|x| (lo_fence..=hi_fence).contains(x)).collect();
        Some(Self {
            n_valid: v.len(),
            n_invalid: values.len() - v.len(),
            median,
            q1,
            q3,
            whisker_low: inside.first().copied().unwrap_or(median),
            whisker_high: inside.last().copied().unwrap_or(median),
            mean: v.iter().sum::<f64>() / v.len() as f64,
            n_outliers: v.len() - inside.len(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: String,
    pub rmse: Option<BoxStats>,
    pub bias: Option<BoxStats>,
}

/// Per-method summaries in order of first appearance.
pub fn summarize(rows: &[MetricRow]) -> Vec<MethodSummary> {
    let mut methods: Vec<&str> = Vec::new();
    for r in rows {
        if !methods.contains(&r.method.as_str()) {
            methods.push(&r.method);
        }
    }
    methods
        .into_iter()
        .map(|m| {
            let mine: Vec<&MetricRow> = rows.iter().filter(|r| r.method == m).collect();
            let pick = |f: fn(&MetricRow) -> f64| -> Vec<f64> { mine.iter().map(|r| if r.valid { f(r) } else { f64::NAN }).collect() };
            MethodSummary {
                method: m.to_string(),
                rmse: BoxStats::from_values(&pick(|r| r.rmse)),
                bias: BoxStats::from_values(&pick(|r| r.bias)),
            }
        })
        .collect()
}

pub fn write_metrics_csv(path: &Path, rows: &[MetricRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|_| Error::MissingArtifact(path.to_path_buf()))?;
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::DynamicsConfig;
    use crate::observation::{generate_samples, ObservationConfig};
    use proptest::prelude::*;

    fn samples(n: usize) -> Vec<Sample> {
        generate_samples(&DynamicsConfig::default(), &ObservationConfig::default(), 10, 100, 2, 0, n).unwrap()
    }

    #[test]
    fn method_ids_roundtrip() {
        for m in Method::ALL {
            assert_eq!(m.id().parse::<Method>().unwrap(), m);
            assert_eq!(serde_json::to_string(&m).unwrap(), format!("\"{}\"", m.id()));
        }
        assert!("4dvar-c".parse::<Method>().is_err());
    }

    #[test]
    fn oracle_scores_zero() {
        let s = samples(6);
        let rows = evaluate_method(&Oracle, &s, 10, 2.3).unwrap();
        assert_eq!(rows.len(), 6);
        assert_eq!(rows.iter().map(|r| r.sample).collect::<Vec<_>>(), (10..16).collect::<Vec<_>>());
        assert!(rows.iter().all(|r| r.valid && r.rmse == 0.0 && r.bias == 0.0 && r.n_integrations == 0));
    }

    struct Exploding;

    impl InversionMethod for Exploding {
        fn id(&self) -> String {
            "exploding".into()
        }

        fn invert(&self, sample: &Sample, _: f64) -> Result<(Vec<f64>, usize)> {
            if sample.x0()[0] > 0.0 {
                Err(Error::NonFinite { step: 3 })
            } else {
                Ok((sample.x0().to_vec(), 7))
            }
        }
    }

    #[test]
    fn numeric_failures_are_flagged_and_excluded() {
        let s = samples(12);
        let rows = evaluate_method(&Exploding, &s, 0, 2.3).unwrap();
        let bad = s.iter().filter(|x| x.x0()[0] > 0.0).count();
        assert!(bad > 0 && bad < 12);
        assert_eq!(rows.iter().filter(|r| !r.valid).count(), bad);
        let summary = &summarize(&rows)[0];
        let stats = summary.rmse.as_ref().unwrap();
        assert_eq!(stats.n_invalid, bad);
        assert_eq!(stats.n_valid, 12 - bad);
        assert_eq!(stats.median, 0.0);
    }

    #[test]
    fn assimilation_rows_report_integrations() {
        let s = samples(3);
        let method = Assimilator {
            model: Lorenz96::new(DynamicsConfig::default()).unwrap(),
            background_weight: Some(0.1),
            options: AssimilationOptions::default(),
        };
        assert_eq!(method.id(), "4dvar-b");
        let rows = evaluate_method(&method, &s, 0, 2.3).unwrap();
        for r in &rows {
            assert!(r.valid && r.n_integrations > 0 && r.n_integrations <= 300);
            assert!(r.rmse * r.rmse >= r.bias * r.bias);
        }
        let guess = evaluate_method(&FirstGuess, &s, 0, 2.3).unwrap();
        let total = |rows: &[MetricRow]| rows.iter().map(|r| r.rmse).sum::<f64>();
        assert!(total(&rows) < total(&guess));
    }

    #[test]
    fn box_stats_hand_values() {
        let s = BoxStats::from_values(&[1.0, 2.0, 3.0, 4.0, 100.0, f64::NAN]).unwrap();
        assert_eq!(s.median, 3.0);
        assert_eq!(s.q1, 2.0);
        assert_eq!(s.q3, 4.0);
        assert_eq!(s.whisker_low, 1.0);
        assert_eq!(s.whisker_high, 4.0);
        assert_eq!(s.n_outliers, 1);
        assert_eq!(s.n_invalid, 1);
        assert!(BoxStats::from_values(&[f64::NAN]).is_none());
    }

    #[test]
    fn csv_roundtrip() {
        let rows = vec![
            MetricRow {
                method: "4dvar".into(),
                sample: 300,
                rmse: 0.123456789012345,
                bias: -0.01,
                n_integrations: 300,
                valid: true,
            },
            MetricRow {
                method: "nn-perfect".into(),
                sample: 301,
                rmse: 1.0 / 3.0,
                bias: 2e-17,
                n_integrations: 0,
                valid: true,
            },
        ];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.csv");
        write_metrics_csv(&path, &rows).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("method,sample,rmse,bias,n_integrations,valid\n"));
        assert_eq!(read_metrics_csv(&path).unwrap(), rows);
    }

    proptest! {
        #[test]
        fn summaries_ignore_sample_order(mut values in prop::collection::vec(-50.0..50.0f64, 1..40), seed in any::<u64>()) {
            let a = BoxStats::from_values(&values).unwrap();
            let mut rng = crate::rng::stream(seed, 0);
            rand::seq::SliceRandom::shuffle(values.as_mut_slice(), &mut rng);
            let b = BoxStats::from_values(&values).unwrap();
            prop_assert_eq!(a.median, b.median);
            prop_assert_eq!(a.q1, b.q1);
            prop_assert_eq!(a.q3, b.q3);
            prop_assert_eq!(a.whisker_low, b.whisker_low);
            prop_assert_eq!(a.whisker_high, b.whisker_high);
            prop_assert!((a.mean - b.mean).abs() <= 1e-12 * a.mean.abs().max(1.0));
        }
    }
}
