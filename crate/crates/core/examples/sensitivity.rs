//! Accuracy of 4DVAR, 4DVAR-B and an end-to-end network over constant noise
//! levels and drop rates, including noise levels above the training range.
//!
//! cargo run --release --example sensitivity -- [epochs] [out_dir]

use std::path::PathBuf;

use anyhow::Result;
use hybrid4dvar::bench::experiment::{build_methods, sensitivity, train_method, TrainedNet};
use hybrid4dvar::bench::{write_sensitivity_csv, Method};
use hybrid4dvar::config::ExperimentConfig;
use hybrid4dvar::observation::generate_dataset;

fn main() -> Result<()> {
    let mut args = std::env::args().skip(1);
    let epochs: usize = args.next().map(|s| s.parse()).transpose()?.unwrap_or(10);
    let out = args.next().map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("hybrid4dvar-sensitivity"));

    let mut cfg = ExperimentConfig::default();
    cfg.training.epochs = epochs;
    let ds = generate_dataset(&cfg.dataset)?;
    let (e2e, _) = train_method(&ds, &cfg, Method::NnE2e)?;
    let nets: Vec<&TrainedNet> = vec![&e2e];
    let methods = build_methods(&ds, &cfg, &nets, &[Method::FourDVar, Method::FourDVarB, Method::NnE2e])?;
    let cells = sensitivity(&ds, &cfg, &methods)?;

    std::fs::create_dir_all(&out)?;
    write_sensitivity_csv(&out.join("sensitivity.csv"), &cells)?;
    for m in [Method::FourDVar, Method::FourDVarB, Method::NnE2e] {
        println!("\n{m}: mean RMSE, rows sigma, columns p_drop");
        print!("{:>6}", "");
        for p in &cfg.sensitivity.p_drops {
            print!("{p:>8.2}");
        }
        println!();
        for s in &cfg.sensitivity.sigmas {
            print!("{s:>6.2}");
            for c in cells.iter().filter(|c| c.method == m.id() && c.sigma == *s) {
                print!("{:>8.3}", c.mean_rmse);
            }
            println!();
        }
    }
    println!("\nwrote {}", out.join("sensitivity.csv").display());
    Ok(())
}
