//! Free run of Lorenz96 from a small kick off the fixed point, plus one
//! linearised step checked against a finite difference.
//!
//! cargo run --release --example lorenz96 -- [n_space] [steps]

use anyhow::Result;
use hybrid4dvar::dynamics::{DiscreteModel, DynamicsConfig, Lorenz96};

fn main() -> Result<()> {
    let mut args = std::env::args().skip(1);
    let n_space: usize = args.next().map(|s| s.parse()).transpose()?.unwrap_or(40);
    let steps: usize = args.next().map(|s| s.parse()).transpose()?.unwrap_or(1000);

    let model = Lorenz96::new(DynamicsConfig {
        n_space,
        ..Default::default()
    })?;
    let forcing = model.config().forcing;
    let mut x0 = vec![forcing; n_space];
    x0[0] += 0.01;
    let traj = model.integrate(&x0, steps)?;

    println!("t      mean      std       x[0]");
    for t in (0..=steps).step_by((steps / 10).max(1)) {
        let x = traj.state(t);
        let mean = x.iter().sum::<f64>() / n_space as f64;
        let std = (x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n_space as f64).sqrt();
        println!("{:<6.1} {mean:>8.4} {std:>9.4} {:>9.4}", t as f64 * traj.dt(), x[0]);
    }

    let x = traj.last();
    let u: Vec<f64> = (0..n_space).map(|i| ((i as f64) * 0.7).sin()).collect();
    let mut tl = vec![0.0; n_space];
    model.tangent_step(x, &u, &mut tl);
    let h = 1e-6;
    let shifted = |s: f64| {
        let xs: Vec<f64> = x.iter().zip(&u).map(|(a, b)| a + s * h * b).collect();
        let mut out = vec![0.0; n_space];
        model.step(&xs, &mut out);
        out
    };
    let (p, m) = (shifted(1.0), shifted(-1.0));
    let err = tl
        .iter()
        .zip(p.iter().zip(&m))
        .map(|(t, (a, b))| (t - (a - b) / (2.0 * h)).abs())
        .fold(0.0, f64::max);
    println!("tangent-linear vs central difference, max abs error: {err:.2e}");
    Ok(())
}
