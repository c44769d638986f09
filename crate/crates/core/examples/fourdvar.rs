//! 4DVAR and 4DVAR-B on a few test samples of the default dataset.
//!
//! cargo run --release --example fourdvar -- [n_samples]

use anyhow::Result;
use hybrid4dvar::bench::metrics::{bias, rmse};
use hybrid4dvar::dynamics::Lorenz96;
use hybrid4dvar::observation::{generate_dataset, DatasetConfig, Split};
use hybrid4dvar::variational::{assimilate, first_guess, AssimilationOptions};

fn main() -> Result<()> {
    let n: usize = std::env::args().nth(1).map(|s| s.parse()).transpose()?.unwrap_or(8);
    let ds = generate_dataset(&DatasetConfig::default())?;
    let model = Lorenz96::new(ds.config.dynamics)?;
    let opts = AssimilationOptions::default();

    println!("sample  first-guess  4dvar (iters, integ)   4dvar-b (iters, integ)   bias 4dvar-b");
    for (k, s) in ds.split(Split::Test).iter().take(n).enumerate() {
        let guess = first_guess(&s.obs, ds.climatology_mean);
        let plain = assimilate(&model, &s.obs, ds.climatology_mean, None, &opts)?;
        let reg = assimilate(&model, &s.obs, ds.climatology_mean, Some(0.1), &opts)?;
        println!(
            "{:>6}  {:>11.3}  {:>6.3} ({:>3}, {:>3})       {:>6.3} ({:>3}, {:>3})        {:>+.3}",
            ds.indices(Split::Test).start + k,
            rmse(&guess, s.x0()),
            rmse(&plain.x0_hat, s.x0()),
            plain.n_iterations,
            plain.n_model_integrations,
            rmse(&reg.x0_hat, s.x0()),
            reg.n_iterations,
            reg.n_model_integrations,
            bias(&reg.x0_hat, s.x0()),
        );
    }
    Ok(())
}
