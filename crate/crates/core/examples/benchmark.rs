//! The full method comparison: build the dataset, train the four learned
//! methods, score all six on the test split, and write metrics.csv,
//! summary.json and accounting.csv.
//!
//! cargo run --release --example benchmark -- [out_dir] [config.json]
//!
//! The default config takes roughly fifteen minutes on one core; pass a
//! config with fewer epochs or samples for a quicker look.

use std::path::PathBuf;

use anyhow::Result;
use hybrid4dvar::bench::experiment::{build_methods, evaluate_methods, train_all, TrainedNet};
use hybrid4dvar::bench::{summarize, write_accounting_csv, write_metrics_csv, Method};
use hybrid4dvar::config::ExperimentConfig;
use hybrid4dvar::neuralnet::save_checkpoint;
use hybrid4dvar::observation::{generate_dataset, Split};

fn main() -> Result<()> {
    let mut args = std::env::args().skip(1);
    let out = args.next().map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("hybrid4dvar-benchmark"));
    let cfg = match args.next() {
        Some(p) => ExperimentConfig::load(p.as_ref())?,
        None => ExperimentConfig::default(),
    };
    cfg.validate()?;
    cfg.save_resolved(&out)?;

    let ds = generate_dataset(&cfg.dataset)?;
    let models = train_all(&ds, &cfg)?;
    for net in &models.nets {
        save_checkpoint(&net.checkpoint, &out.join(format!("{}.ckpt", net.method)))?;
        println!(
            "{:<16} best epoch {:>2}  val rmse {:.3}  {:>6.1}s",
            net.method.id(),
            net.report.best_epoch,
            net.report.best_val_rmse,
            net.report.wall_seconds
        );
    }

    let nets: Vec<&TrainedNet> = models.nets.iter().collect();
    let methods = build_methods(&ds, &cfg, &nets, &Method::ALL)?;
    let rows = evaluate_methods(&ds, &methods, Split::Test)?;
    write_metrics_csv(&out.join("metrics.csv"), &rows)?;
    let summary = summarize(&rows);
    std::fs::write(out.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
    let accounting = models.accounting();
    write_accounting_csv(&out.join("accounting.csv"), &accounting)?;

    println!("\nmethod            median rmse    q1      q3     max   median bias  invalid");
    for s in &summary {
        if let (Some(r), Some(b)) = (&s.rmse, &s.bias) {
            let max = rows
                .iter()
                .filter(|x| x.method == s.method && x.valid)
                .map(|x| x.rmse)
                .fold(0.0, f64::max);
            println!(
                "{:<16} {:>10.3} {:>7.3} {:>7.3} {:>7.3} {:>+12.4} {:>8}",
                s.method, r.median, r.q1, r.q3, max, b.median, r.n_invalid
            );
        }
    }
    println!("\nmethod            nominal  measured  ratio  within bound");
    for a in &accounting {
        println!("{:<16} {:>8} {:>9} {:>6.2}  {}", a.method, a.nominal, a.measured, a.ratio, a.within_bound);
    }
    println!("\noutputs in {}", out.display());
    Ok(())
}
