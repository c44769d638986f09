//! Strong-constraint 4DVAR.
//!
//! The control variable is the initial state. The observation operator and its
//! transpose are applied implicitly: every misfit is weighted by the diagonal
//! precision, so unobserved points (zero precision) contribute neither cost
//! nor gradient.

pub mod lbfgs;

use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};

use crate::bench::metrics::{bias, rmse};
use crate::dynamics::{DiscreteModel, Trajectory};
use crate::error::{check_len, Error, Result};
use crate::observation::ObservationSet;

pub use lbfgs::{LbfgsOptions, Termination};

/// Counts model integrations (forward runs and adjoint sweeps).
#[derive(Debug, Default)]
pub struct IntegrationCounter {
    forward: AtomicUsize,
    adjoint: AtomicUsize,
}

impl IntegrationCounter {
    pub fn forward(&self) -> usize {
        self.forward.load(Ordering::Relaxed)
    }

    pub fn adjoint(&self) -> usize {
        self.adjoint.load(Ordering::Relaxed)
    }

    pub fn total(&self) -> usize {
        self.forward() + self.adjoint()
    }

    pub(crate) fn add_forward(&self) {
        self.forward.fetch_add(1, Ordering::Relaxed);
    }

    pub(crate) fn add_adjoint(&self) {
        self.adjoint.fetch_add(1, Ordering::Relaxed);
    }
}

/// `J = 1/2 sum r_inv (traj - y)^2` and its partial derivatives with respect to each state.
pub fn observation_misfit(traj: &Trajectory, obs: &ObservationSet) -> Result<(f64, Vec<f64>)> {
    check_len(obs.y().len(), traj.as_slice().len())?;
    let mut cost = 0.0;
    let mut forcings = vec![0.0; obs.y().len()];
    for (((f, &x), &y), &p) in forcings.iter_mut().zip(traj.as_slice()).zip(obs.y()).zip(obs.r_inv()) {
        if p == 0.0 {
            continue;
        }
        let r = x - y;
        cost += 0.5 * p * r * r;
        *f = p * r;
    }
    Ok((cost, forcings))
}

fn check_window<M: DiscreteModel>(model: &M, x0: &[f64], obs: &ObservationSet) -> Result<()> {
    check_len(model.dim(), x0.len())?;
    check_len(model.dim(), obs.n_space())?;
    if obs.n_times() < 2 {
        return Err(Error::invalid("the assimilation window needs at least one model step"));
    }
    Ok(())
}

pub fn cost_4dvar<M: DiscreteModel>(model: &M, x0: &[f64], obs: &ObservationSet) -> Result<f64> {
    check_window(model, x0, obs)?;
    let traj = model.integrate(x0, obs.steps())?;
    Ok(observation_misfit(&traj, obs)?.0)
}

/// Cost and adjoint gradient from one forward run and one adjoint sweep.
pub fn cost_and_grad<M: DiscreteModel>(model: &M, x0: &[f64], obs: &ObservationSet) -> Result<(f64, Vec<f64>)> {
    cost_and_grad_counted(model, x0, obs, None)
}

/// As [`cost_and_grad`], recording both integrations on `counter`.
pub fn cost_and_grad_counted<M: DiscreteModel>(
    model: &M,
    x0: &[f64],
    obs: &ObservationSet,
    counter: Option<&IntegrationCounter>,
) -> Result<(f64, Vec<f64>)> {
    check_window(model, x0, obs)?;
    counter.inspect(|c| c.add_forward());
    let traj = model.integrate(x0, obs.steps())?;
    let (cost, forcings) = observation_misfit(&traj, obs)?;
    counter.inspect(|c| c.add_adjoint());
    let grad = model.adjoint_sweep(&traj, &forcings)?;
    Ok((cost, grad))
}

pub fn grad_4dvar<M: DiscreteModel>(model: &M, x0: &[f64], obs: &ObservationSet) -> Result<Vec<f64>> {
    Ok(cost_and_grad(model, x0, obs)?.1)
}

/// Isotropic quadratic prior `lambda_b / 2 * |x0 - x_b|^2`.
#[derive(Debug, Clone, PartialEq)]
pub struct BackgroundTerm {
    pub x_b: Vec<f64>,
    pub lambda_b: f64,
}

impl BackgroundTerm {
    pub fn new(x_b: Vec<f64>, lambda_b: f64) -> Result<Self> {
        if !(lambda_b >= 0.0 && lambda_b.is_finite()) {
            return Err(Error::invalid(format!("background weight must be >= 0, got {lambda_b}")));
        }
        Ok(Self { x_b, lambda_b })
    }

    fn add_to(&self, x0: &[f64], cost: &mut f64, grad: &mut [f64]) {
        if self.lambda_b == 0.0 {
            return;
        }
        for ((g, &x), &b) in grad.iter_mut().zip(x0).zip(&self.x_b) {
            let d = x - b;
            *cost += 0.5 * self.lambda_b * d * d;
            *g += self.lambda_b * d;
        }
    }
}

pub fn cost_and_grad_with_background<M: DiscreteModel>(
    model: &M,
    x0: &[f64],
    obs: &ObservationSet,
    background: &BackgroundTerm,
) -> Result<(f64, Vec<f64>)> {
    check_len(model.dim(), background.x_b.len())?;
    let (mut cost, mut grad) = cost_and_grad(model, x0, obs)?;
    background.add_to(x0, &mut cost, &mut grad);
    Ok((cost, grad))
}

/// First guess: the observed value at `t = 0` where available, the climatological mean elsewhere.
pub fn first_guess(obs: &ObservationSet, climatology_mean: f64) -> Vec<f64> {
    obs.y_at(0)
        .iter()
        .zip(obs.r_inv_at(0))
        .map(|(&y, &p)| if p > 0.0 { y } else { climatology_mean })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AssimilationOptions {
    pub lbfgs: LbfgsOptions,
}

impl Default for AssimilationOptions {
    fn default() -> Self {
        Self {
            lbfgs: LbfgsOptions {
                max_initial_step: 1.0,
                ..LbfgsOptions::default()
            },
        }
    }
}

impl AssimilationOptions {
    /// Default solver with a larger iteration and evaluation budget.
    pub fn converge(budget: usize) -> Self {
        let mut opts = Self::default();
        opts.lbfgs.max_iter = budget;
        opts.lbfgs.max_evals = budget;
        opts
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AssimilationResult {
    pub x0_hat: Vec<f64>,
    pub cost_trace: Vec<f64>,
    pub grad_norm_trace: Vec<f64>,
    pub n_iterations: usize,
    pub n_model_integrations: usize,
    pub converged: bool,
    pub termination: Termination,
}

/// The 4DVAR objective as seen by the minimiser; overflowing trajectories evaluate to `+inf`.
pub struct FourDVarObjective<'a, M: DiscreteModel> {
    pub model: &'a M,
    pub obs: &'a ObservationSet,
    pub background: Option<&'a BackgroundTerm>,
    pub counter: IntegrationCounter,
}

impl<M: DiscreteModel> lbfgs::Objective for FourDVarObjective<'_, M> {
    fn evaluate(&mut self, x: &[f64], grad: &mut [f64]) -> f64 {
        match cost_and_grad_counted(self.model, x, self.obs, Some(&self.counter)) {
            Ok((mut cost, g)) => {
                grad.copy_from_slice(&g);
                if let Some(bg) = self.background {
                    bg.add_to(x, &mut cost, grad);
                }
                cost
            }
            Err(_) => f64::INFINITY,
        }
    }
}

/// Minimises the 4DVAR cost (plus the background term, if any) from `x_init` with L-BFGS.
pub fn assimilate_from<M: DiscreteModel>(
    model: &M,
    obs: &ObservationSet,
    x_init: &[f64],
    background: Option<&BackgroundTerm>,
    opts: &AssimilationOptions,
) -> Result<AssimilationResult> {
    check_window(model, x_init, obs)?;
    if let Some(bg) = background {
        check_len(model.dim(), bg.x_b.len())?;
    }
    let mut objective = FourDVarObjective {
        model,
        obs,
        background,
        counter: IntegrationCounter::default(),
    };
    let report = lbfgs::minimize(&mut objective, x_init, &opts.lbfgs);
    if report.termination == Termination::InfeasibleStart {
        return Err(Error::NonFinite { step: 0 });
    }
    Ok(AssimilationResult {
        converged: report.converged(),
        x0_hat: report.x,
        cost_trace: report.cost_trace,
        grad_norm_trace: report.grad_norm_trace,
        n_iterations: report.n_iterations,
        n_model_integrations: objective.counter.total(),
        termination: report.termination,
    })
}

/// 4DVAR from the climatology-filled first guess. `background_weight` switches on
/// the background term centred on that same first guess (the 4DVAR-B variant).
pub fn assimilate<M: DiscreteModel>(
    model: &M,
    obs: &ObservationSet,
    climatology_mean: f64,
    background_weight: Option<f64>,
    opts: &AssimilationOptions,
) -> Result<AssimilationResult> {
    let guess = first_guess(obs, climatology_mean);
    let background = background_weight.map(|w| BackgroundTerm::new(guess.clone(), w)).transpose()?;
    assimilate_from(model, obs, &guess, background.as_ref(), opts)
}

/// One row of the assimilation export.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssimilationRow {
    pub sample: usize,
    pub rmse: f64,
    pub bias: f64,
    pub n_iterations: usize,
    pub n_model_integrations: usize,
    pub converged: bool,
}

impl AssimilationRow {
    pub fn new(sample: usize, result: &AssimilationResult, x_true: &[f64]) -> Self {
        Self {
            sample,
            rmse: rmse(&result.x0_hat, x_true),
            bias: bias(&result.x0_hat, x_true),
            n_iterations: result.n_iterations,
            n_model_integrations: result.n_model_integrations,
            converged: result.converged,
        }
    }
}

pub fn write_assimilation_csv(path: &Path, rows: &[AssimilationRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}
