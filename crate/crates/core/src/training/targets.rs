//! Supervision targets for the iterative baselines: one 4DVAR estimate per
//! training sample. Failed or unconverged assimilations are kept (with their
//! best iterate) and flagged, never dropped.

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bench::metrics::{bias, rmse};
use crate::dynamics::Lorenz96;
use crate::error::{Error, Result};
use crate::io::{read_f64le, sha256_hex, write_f64le};
use crate::observation::{Dataset, Split};
use crate::variational::{assimilate, first_guess, AssimilationOptions, AssimilationRow};

const FORMAT: &str = "hybrid4dvar-targets/1";
pub const TARGETS_FILE: &str = "targets.bin";
pub const TARGETS_MANIFEST: &str = "targets.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IterVariant {
    /// Plain 4DVAR estimates.
    Plain,
    /// 4DVAR with the background term.
    Background,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterTargets {
    pub variant: IterVariant,
    pub lambda_b: Option<f64>,
    pub options: AssimilationOptions,
    /// Dataset indices of the samples, in target order.
    pub samples: Vec<usize>,
    #[serde(skip)]
    pub targets: Vec<Vec<f64>>,
    pub rows: Vec<AssimilationRow>,
    /// Samples whose assimilation could not start; their target is the first guess.
    pub failed: Vec<usize>,
    pub n_model_integrations: usize,
}

pub fn build_iter_targets(
    dataset: &Dataset,
    variant: IterVariant,
    lambda_b: f64,
    opts: &AssimilationOptions,
) -> Result<IterTargets> {
    let model = Lorenz96::new(dataset.config.dynamics)?;
    let weight = (variant == IterVariant::Background).then_some(lambda_b);
    let range = dataset.indices(Split::Train);
    let outcomes: Vec<(Vec<f64>, AssimilationRow, bool)> = range
        .clone()
        .into_par_iter()
        .map(|i| {
            let sample = &dataset.samples[i];
            match assimilate(&model, &sample.obs, dataset.climatology_mean, weight, opts) {
                Ok(res) => {
                    let row = AssimilationRow::new(i, &res, sample.x0());
                    Ok((res.x0_hat, row, false))
                }
                Err(Error::NonFinite { .. }) => {
                    let guess = first_guess(&sample.obs, dataset.climatology_mean);
                    let row = AssimilationRow {
                        sample: i,
                        rmse: rmse(&guess, sample.x0()),
                        bias: bias(&guess, sample.x0()),
                        n_iterations: 0,
                        n_model_integrations: 1,
                        converged: false,
                    };
                    Ok((guess, row, true))
                }
                Err(e) => Err(e),
            }
        })
        .collect::<Result<_>>()?;
    let mut out = IterTargets {
        variant,
        lambda_b: weight,
        options: *opts,
        samples: range.collect(),
        targets: Vec::with_capacity(outcomes.len()),
        rows: Vec::with_capacity(outcomes.len()),
        failed: Vec::new(),
        n_model_integrations: 0,
    };
    for (target, row, failed) in outcomes {
        if failed {
            out.failed.push(row.sample);
        }
        out.n_model_integrations += row.n_model_integrations;
        out.targets.push(target);
        out.rows.push(row);
    }
    Ok(out)
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: String,
    dtype: String,
    n_targets: usize,
    n_space: usize,
    sha256: String,
    #[serde(flatten)]
    meta: IterTargets,
}

/// Writes `targets.bin` (`[sample][space]`, little-endian f64) and its manifest.
pub fn save_targets(targets: &IterTargets, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let n_space = targets.targets.first().map_or(0, Vec::len);
    let flat: Vec<f64> = targets.targets.concat();
    let bytes = write_f64le(&flat);
    fs::write(dir.join(TARGETS_FILE), &bytes)?;
    let manifest = Manifest {
        format: FORMAT.into(),
        dtype: "f64le".into(),
        n_targets: targets.targets.len(),
        n_space,
        sha256: sha256_hex(&bytes),
        meta: targets.clone(),
    };
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    fs::write(dir.join(TARGETS_MANIFEST), text)?;
    Ok(())
}

pub fn load_targets(dir: &Path) -> Result<IterTargets> {
    let path = dir.join(TARGETS_MANIFEST);
    let text = fs::read(&path).map_err(|_| Error::MissingArtifact(path.clone()))?;
    let manifest: Manifest = serde_json::from_slice(&text)?;
    if manifest.format != FORMAT {
        return Err(Error::malformed(&path, "unsupported targets format"));
    }
    let blob_path = dir.join(TARGETS_FILE);
    let bytes = fs::read(&blob_path).map_err(|_| Error::MissingArtifact(blob_path.clone()))?;
    if sha256_hex(&bytes) != manifest.sha256 {
        return Err(Error::malformed(&blob_path, "checksum mismatch"));
    }
    let flat = read_f64le(&bytes).ok_or_else(|| Error::malformed(&blob_path, "length is not a multiple of 8"))?;
    if manifest.n_space == 0 || flat.len() != manifest.n_targets * manifest.n_space {
        return Err(Error::malformed(&blob_path, "size disagrees with the manifest"));
    }
    let mut meta = manifest.meta;
    meta.targets = flat.chunks(manifest.n_space).map(<[f64]>::to_vec).collect();
    Ok(meta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::DynamicsConfig;
    use crate::observation::{generate_dataset, DatasetConfig, ObservationConfig, ObservationSet, SplitSizes};

    fn dataset(obs: ObservationConfig) -> Dataset {
        generate_dataset(&DatasetConfig {
            dynamics: DynamicsConfig::default(),
            observation: obs,
            window: 10,
            spin_up_steps: 200,
            n_samples: 6,
            splits: SplitSizes {
                train: 4,
                val: 1,
                test: 1,
            },
            seed: 3,
        })
        .unwrap()
    }

    #[test]
    fn noiseless_dense_targets_recover_truth() {
        let ds = dataset(ObservationConfig::constant(0.0, 0.0));
        let t = build_iter_targets(&ds, IterVariant::Plain, 0.1, &AssimilationOptions::converge(1000)).unwrap();
        assert_eq!(t.targets.len(), 4);
        assert!(t.failed.is_empty());
        for (target, s) in t.targets.iter().zip(ds.split(Split::Train)) {
            assert!(rmse(target, s.x0()) < 1e-3);
        }
    }

    #[test]
    fn background_targets_on_masked_samples_equal_first_guess() {
        let mut ds = dataset(ObservationConfig::default());
        for s in &mut ds.samples {
            s.obs = ObservationSet::empty(11, 40);
        }
        let t = build_iter_targets(&ds, IterVariant::Background, 0.1, &AssimilationOptions::default()).unwrap();
        for target in &t.targets {
            assert!(target.iter().all(|&v| v == ds.climatology_mean));
        }
    }

    #[test]
    fn targets_roundtrip_and_budget() {
        let ds = dataset(ObservationConfig::default());
        let opts = AssimilationOptions::default();
        let t = build_iter_targets(&ds, IterVariant::Plain, 0.1, &opts).unwrap();
        assert!(t.n_model_integrations <= 4 * opts.lbfgs.max_evals * 2);
        assert_eq!(t.n_model_integrations, t.rows.iter().map(|r| r.n_model_integrations).sum::<usize>());
        let dir = tempfile::tempdir().unwrap();
        save_targets(&t, dir.path()).unwrap();
        assert_eq!(load_targets(dir.path()).unwrap(), t);
        fs::write(dir.path().join(TARGETS_FILE), [0u8; 8]).unwrap();
        assert!(load_targets(dir.path()).is_err());
    }
}
