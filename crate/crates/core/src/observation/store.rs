//! On-disk dataset layout: `manifest.json` plus three flat little-endian
//! float64 arrays (`truth.bin`, `y.bin`, `rinv.bin`), each row-major
//! `[sample][time][space]`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Dataset, DatasetConfig, ObservationSet, Sample, Split};
use crate::dynamics::Trajectory;
use crate::error::{Error, Result};
use crate::io::{read_f64le, sha256_hex, write_f64le};

pub const MANIFEST_FILE: &str = "manifest.json";
const FORMAT: &str = "hybrid4dvar-dataset/1";
const DTYPE: &str = "f64le";

#[derive(Debug, Serialize, Deserialize)]
struct Shape {
    n_samples: usize,
    n_times: usize,
    n_space: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct SplitIndices {
    train: Vec<usize>,
    val: Vec<usize>,
    test: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct FileEntry {
    name: String,
    sha256: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format: String,
    dtype: String,
    layout: String,
    shape: Shape,
    config: DatasetConfig,
    climatology_mean: f64,
    splits: SplitIndices,
    files: Vec<FileEntry>,
}

/// Writes the dataset and returns the SHA-256 of the manifest, which pins every array file.
pub fn save_dataset(dataset: &Dataset, dir: &Path) -> Result<String> {
    fs::create_dir_all(dir)?;
    let cfg = &dataset.config;
    let n_times = cfg.window + 1;
    let n_space = cfg.dynamics.n_space;
    let mut truth = Vec::with_capacity(dataset.samples.len() * n_times * n_space);
    let mut y = Vec::with_capacity(truth.capacity());
    let mut r_inv = Vec::with_capacity(truth.capacity());
    for s in &dataset.samples {
        truth.extend_from_slice(s.truth.as_slice());
        y.extend_from_slice(s.obs.y());
        r_inv.extend_from_slice(s.obs.r_inv());
    }
    let mut files = Vec::new();
    for (name, data) in [("truth.bin", &truth), ("y.bin", &y), ("rinv.bin", &r_inv)] {
        let bytes = write_f64le(data);
        fs::write(dir.join(name), &bytes)?;
        files.push(FileEntry {
            name: name.to_string(),
            sha256: sha256_hex(&bytes),
        });
    }
    let manifest = Manifest {
        format: FORMAT.into(),
        dtype: DTYPE.into(),
        layout: "[sample][time][space] row-major".into(),
        shape: Shape {
            n_samples: dataset.samples.len(),
            n_times,
            n_space,
        },
        config: cfg.clone(),
        climatology_mean: dataset.climatology_mean,
        splits: SplitIndices {
            train: dataset.indices(Split::Train).collect(),
            val: dataset.indices(Split::Val).collect(),
            test: dataset.indices(Split::Test).collect(),
        },
        files,
    };
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    fs::write(dir.join(MANIFEST_FILE), &text)?;
    Ok(sha256_hex(text.as_bytes()))
}

/// SHA-256 of a saved dataset's manifest.
pub fn dataset_digest(dir: &Path) -> Result<String> {
    let path = dir.join(MANIFEST_FILE);
    let bytes = fs::read(&path).map_err(|_| Error::MissingArtifact(path))?;
    Ok(sha256_hex(&bytes))
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest_path = dir.join(MANIFEST_FILE);
    if !manifest_path.exists() {
        return Err(Error::MissingArtifact(manifest_path));
    }
    let manifest: Manifest = serde_json::from_slice(&fs::read(&manifest_path)?)?;
    if manifest.format != FORMAT || manifest.dtype != DTYPE {
        return Err(Error::malformed(&manifest_path, "unsupported format or dtype"));
    }
    manifest.config.validate()?;
    let Shape {
        n_samples,
        n_times,
        n_space,
    } = manifest.shape;
    if n_times != manifest.config.window + 1 || n_space != manifest.config.dynamics.n_space || n_samples != manifest.config.n_samples {
        return Err(Error::malformed(&manifest_path, "shape disagrees with config"));
    }
    let per_sample = n_times * n_space;
    let mut arrays = Vec::new();
    for name in ["truth.bin", "y.bin", "rinv.bin"] {
        let path = dir.join(name);
        let bytes = fs::read(&path).map_err(|_| Error::MissingArtifact(path.clone()))?;
        if let Some(entry) = manifest.files.iter().find(|f| f.name == name) {
            if entry.sha256 != sha256_hex(&bytes) {
                return Err(Error::malformed(&path, "checksum mismatch"));
            }
        }
        let data = read_f64le(&bytes).ok_or_else(|| Error::malformed(&path, "length is not a multiple of 8"))?;
        if data.len() != n_samples * per_sample {
            return Err(Error::malformed(&path, format!("expected {} values, found {}", n_samples * per_sample, data.len())));
        }
        arrays.push(data);
    }
    let dt = manifest.config.dynamics.dt;
    let samples = (0..n_samples)
        .map(|i| {
            let range = i * per_sample..(i + 1) * per_sample;
            Ok(Sample {
                truth: Trajectory::from_states(n_space, dt, arrays[0][range.clone()].to_vec())?,
                obs: ObservationSet::new(n_times, n_space, arrays[1][range.clone()].to_vec(), arrays[2][range].to_vec())?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        config: manifest.config,
        climatology_mean: manifest.climatology_mean,
        samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::observation::{generate_dataset, SplitSizes};

    #[test]
    fn save_load_roundtrip_and_stable_digest() {
        let cfg = DatasetConfig {
            n_samples: 5,
            splits: SplitSizes {
                train: 2,
                val: 1,
                test: 2,
            },
            spin_up_steps: 50,
            seed: 9,
            ..Default::default()
        };
        let ds = generate_dataset(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let d1 = save_dataset(&ds, dir.path()).unwrap();
        let loaded = load_dataset(dir.path()).unwrap();
        assert_eq!(loaded, ds);
        let other = tempfile::tempdir().unwrap();
        let d2 = save_dataset(&generate_dataset(&cfg).unwrap(), other.path()).unwrap();
        assert_eq!(d1, d2);
        assert_eq!(dataset_digest(dir.path()).unwrap(), d1);

        let bytes = fs::read(dir.path().join("y.bin")).unwrap();
        assert_eq!(bytes.len(), 5 * 11 * 40 * 8);
        assert_eq!(&bytes[..8], &ds.samples[0].obs.y()[0].to_le_bytes());
    }

    #[test]
    fn corrupted_array_is_rejected() {
        let cfg = DatasetConfig {
            n_samples: 2,
            splits: SplitSizes {
                train: 1,
                val: 0,
                test: 1,
            },
            spin_up_steps: 10,
            ..Default::default()
        };
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&generate_dataset(&cfg).unwrap(), dir.path()).unwrap();
        fs::write(dir.path().join("rinv.bin"), [0u8; 16]).unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::MalformedArtifact { .. })));
        fs::remove_file(dir.path().join("truth.bin")).unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::MissingArtifact(_))));
    }
}
