//! End-to-end training of the inversion network through the dynamics, with
//! the per-epoch log and the resulting checkpoint.
//!
//! cargo run --release --example train_e2e -- [epochs] [out_dir]

use std::path::PathBuf;

use anyhow::Result;
use hybrid4dvar::neuralnet::{load_checkpoint, save_checkpoint, Architecture};
use hybrid4dvar::observation::{generate_dataset, DatasetConfig, Split};
use hybrid4dvar::training::{split_rmse, train_e2e, TrainConfig};

fn main() -> Result<()> {
    let mut args = std::env::args().skip(1);
    let epochs: usize = args.next().map(|s| s.parse()).transpose()?.unwrap_or(10);
    let out = args.next().map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("hybrid4dvar-e2e"));

    let ds = generate_dataset(&DatasetConfig::default())?;
    let arch = Architecture::standard(ds.config.window + 1, ds.config.dynamics.n_space);
    let cfg = TrainConfig {
        epochs,
        ..Default::default()
    };
    let (ckpt, report) = train_e2e(&ds, arch, &cfg)?;

    if let Some(l) = report.initial_train_loss {
        println!("initial loss {l:.2}");
    }
    println!("epoch  train-loss   val-rmse  integrations");
    for e in &report.epochs {
        println!("{:>5}  {:>10.2}  {:>9.4}  {:>12}", e.epoch, e.train_loss, e.val_rmse, e.n_model_integrations);
    }
    std::fs::create_dir_all(&out)?;
    let path = out.join("model.ckpt");
    let digest = save_checkpoint(&ckpt, &path)?;
    report.write_log(&out.join("train_log.jsonl"))?;
    let reloaded = load_checkpoint(&path)?;
    println!(
        "best epoch {} (val rmse {:.4}), test rmse {:.4}",
        report.best_epoch,
        report.best_val_rmse,
        split_rmse(&reloaded.net, &ds, Split::Test)?
    );
    println!("checkpoint {} sha256 {digest}", path.display());
    println!("{} integrations for {} samples x {} epochs", report.n_model_integrations, report.n_train, epochs);
    Ok(())
}
