//! Simulate a dataset, write it to disk, reload it and print its digest.
//!
//! cargo run --release --example dataset -- [out_dir] [seed]

use std::path::PathBuf;

use anyhow::{ensure, Result};
use hybrid4dvar::observation::{generate_dataset, load_dataset, save_dataset, DatasetConfig, Split};

fn main() -> Result<()> {
    let mut args = std::env::args().skip(1);
    let out = args.next().map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("hybrid4dvar-dataset"));
    let seed: u64 = args.next().map(|s| s.parse()).transpose()?.unwrap_or(0);

    let cfg = DatasetConfig {
        seed,
        ..Default::default()
    };
    let ds = generate_dataset(&cfg)?;
    let digest = save_dataset(&ds, &out)?;
    let back = load_dataset(&out)?;
    ensure!(back == ds, "reloaded dataset differs");

    let n_obs: usize = ds.samples.iter().map(|s| s.obs.n_observed()).sum();
    let total = ds.samples.len() * (cfg.window + 1) * cfg.dynamics.n_space;
    println!("wrote {} samples to {}", ds.samples.len(), out.display());
    for split in [Split::Train, Split::Val, Split::Test] {
        println!("  {split:<5} {:?}", ds.indices(split));
    }
    println!("climatology mean {:.4}", ds.climatology_mean);
    println!("observed fraction {:.3}", n_obs as f64 / total as f64);
    println!("manifest sha256 {digest}");
    Ok(())
}
