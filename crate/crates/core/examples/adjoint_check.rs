//! Dot-product test of the adjoint and a finite-difference check of the 4DVAR gradient.
//!
//! cargo run --release --example adjoint_check

use anyhow::Result;
use hybrid4dvar::dynamics::{DiscreteModel, DynamicsConfig, Lorenz96};
use hybrid4dvar::observation::{observe, spun_up_trajectory, ObservationConfig};
use hybrid4dvar::rng::stream;
use hybrid4dvar::variational::{cost_4dvar, grad_4dvar};
use rand::Rng;
use rand_distr::StandardNormal;

fn normal(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn main() -> Result<()> {
    let n = 8;
    let window = 10;
    let model = Lorenz96::new(DynamicsConfig {
        n_space: n,
        ..Default::default()
    })?;
    let mut rng = stream(42, 0);

    let mut worst_step = 0.0f64;
    let mut worst_sweep = 0.0f64;
    for _ in 0..100 {
        let x: Vec<f64> = normal(&mut rng, n).iter().map(|v| 8.0 + 3.0 * v).collect();
        let (u, v) = (normal(&mut rng, n), normal(&mut rng, n));
        let (mut tu, mut av) = (vec![0.0; n], vec![0.0; n]);
        model.tangent_step(&x, &u, &mut tu);
        model.adjoint_step(&x, &v, &mut av);
        let (l, r) = (dot(&tu, &v), dot(&u, &av));
        worst_step = worst_step.max((l - r).abs() / l.abs().max(r.abs()));

        // propagate u through the window with the tangent model, pair with forcings
        let traj = model.integrate(&x, window)?;
        let forcings = normal(&mut rng, n * (window + 1));
        let mut du = u.clone();
        let mut lhs = dot(&du, &forcings[..n]);
        for t in 0..window {
            let mut next = vec![0.0; n];
            model.tangent_step(traj.state(t), &du, &mut next);
            du = next;
            lhs += dot(&du, &forcings[(t + 1) * n..(t + 2) * n]);
        }
        let rhs = dot(&u, &model.adjoint_sweep(&traj, &forcings)?);
        worst_sweep = worst_sweep.max((lhs - rhs).abs() / lhs.abs().max(rhs.abs()));
    }
    println!("<TL u, v> vs <u, ADJ v>, worst relative error over 100 draws");
    println!("  single step:       {worst_step:.2e}");
    println!("  {window}-step sweep:    {worst_sweep:.2e}");

    let truth = spun_up_trajectory(&model, window, 500, &mut rng)?;
    let obs = observe(&truth, &ObservationConfig::default(), &mut rng)?;
    let x0: Vec<f64> = truth.initial().iter().map(|v| v + 0.5).collect();
    let g = grad_4dvar(&model, &x0, &obs)?;
    let h = 1e-5;
    println!("4DVAR gradient vs central difference (h = {h:e})");
    for i in 0..n {
        let mut p = x0.clone();
        let mut m = x0.clone();
        p[i] += h;
        m[i] -= h;
        let fd = (cost_4dvar(&model, &p, &obs)? - cost_4dvar(&model, &m, &obs)?) / (2.0 * h);
        println!("  x0[{i}]: adjoint {:>14.6} fd {fd:>14.6} rel {:.1e}", g[i], (g[i] - fd).abs() / fd.abs());
    }
    Ok(())
}
