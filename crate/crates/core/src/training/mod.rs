//! Learning the inversion operator.
//!
//! End-to-end training backpropagates the 4DVAR cost of the network's
//! predicted initial state through the dynamics (one forward run and one
//! adjoint sweep per sample), then through the network. The supervised
//! variants regress onto fixed targets: 4DVAR estimates or the true state.

mod targets;

use std::fs;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bench::metrics::rmse;
use crate::dynamics::{rotate, DiscreteModel, Lorenz96};
use crate::error::{check_len, Error, Result};
use crate::neuralnet::{AdamConfig, AdamState, Architecture, Checkpoint, ConvNet, Normalization, Provenance};
use crate::observation::{Dataset, ObservationSet, Split};
use crate::rng;
use crate::variational::{cost_and_grad_counted, cost_4dvar, IntegrationCounter};

pub use targets::{build_iter_targets, load_targets, save_targets, IterTargets, IterVariant, TARGETS_FILE, TARGETS_MANIFEST};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Seeds the weight initialisation and the per-epoch shuffles.
    pub seed: u64,
    /// Abort once more than this fraction of an epoch's batches is non-finite.
    pub max_skip_fraction: f64,
    /// Evaluate the training loss of the initial weights (costs one extra pass).
    pub track_initial_loss: bool,
    /// Present each sample under a random cyclic shift of the space axis every epoch.
    pub augment_shifts: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 16,
            lr: 1e-3,
            seed: 0,
            max_skip_fraction: 0.5,
            track_initial_loss: true,
            augment_shifts: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::invalid("epochs and batch_size must be at least 1"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid("learning rate must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean per-sample loss over the batches that were applied.
    pub train_loss: f64,
    pub val_rmse: f64,
    pub skipped_batches: usize,
    pub n_batches: usize,
    /// Cumulative training integrations at the end of the epoch.
    pub n_model_integrations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub method: String,
    pub n_train: usize,
    pub initial_train_loss: Option<f64>,
    pub epochs: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_val_rmse: f64,
    /// Forward runs plus adjoint sweeps spent on gradient steps.
    pub n_model_integrations: usize,
    /// Forward runs spent only on measuring the initial loss.
    pub n_diagnostic_integrations: usize,
    pub n_samples_visited: usize,
    pub wall_seconds: f64,
}

impl TrainReport {
    /// One JSON object per epoch.
    pub fn write_log(&self, path: &Path) -> Result<()> {
        let mut out = fs::File::create(path)?;
        for log in &self.epochs {
            serde_json::to_writer(&mut out, log)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

/// Network input for every sample, in dataset order.
pub fn network_inputs(norm: &Normalization, samples: &[&ObservationSet]) -> Vec<Vec<f64>> {
    samples.iter().map(|o| norm.input(o)).collect()
}

/// What the network output is scored against.
enum Supervision<'a, M: DiscreteModel> {
    /// The 4DVAR cost of the predicted initial state.
    EndToEnd(&'a M),
    /// Mean squared distance to a fixed target state, one per training sample.
    Targets(&'a [Vec<f64>]),
}

/// One batch member: sample index and cyclic shift applied to its observations (and target).
type Item = (usize, usize);

impl<M: DiscreteModel> Supervision<'_, M> {
    fn loss_and_grad(&self, obs: &ObservationSet, (i, shift): Item, out: &[f64], counter: &IntegrationCounter) -> Result<(f64, Vec<f64>)> {
        match self {
            Supervision::EndToEnd(model) => cost_and_grad_counted(*model, out, obs, Some(counter)),
            Supervision::Targets(targets) => {
                let target = rotate(&targets[i], shift);
                check_len(target.len(), out.len())?;
                let n = out.len() as f64;
                let loss = out.iter().zip(&target).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n;
                let grad = out.iter().zip(&target).map(|(a, b)| 2.0 * (a - b) / n).collect();
                Ok((loss, grad))
            }
        }
    }

    fn loss(&self, obs: &ObservationSet, item: Item, out: &[f64], counter: &IntegrationCounter) -> Result<f64> {
        match self {
            Supervision::EndToEnd(model) => {
                counter.add_forward();
                cost_4dvar(*model, out, obs)
            }
            Supervision::Targets(_) => Ok(self.loss_and_grad(obs, item, out, counter)?.0),
        }
    }
}

/// Summed loss and parameter gradient over `batch`; `inputs` caches the unshifted
/// network input of every observation set. Members are evaluated in parallel and
/// reduced in batch order.
fn batch_loss_and_grad<M: DiscreteModel>(
    net: &ConvNet,
    obs: &[&ObservationSet],
    inputs: &[Vec<f64>],
    sup: &Supervision<'_, M>,
    batch: &[Item],
    counter: &IntegrationCounter,
) -> Result<(f64, Vec<f64>)> {
    let parts: Vec<Result<(f64, Vec<f64>)>> = batch
        .par_iter()
        .map(|&(i, shift)| {
            let (loss, g_out, cache) = if shift == 0 {
                let (out, cache) = net.forward(&inputs[i])?;
                let (loss, g) = sup.loss_and_grad(obs[i], (i, 0), &out, counter)?;
                (loss, g, cache)
            } else {
                let shifted = obs[i].rotate_space(shift);
                let (out, cache) = net.forward(&net.norm.input(&shifted))?;
                let (loss, g) = sup.loss_and_grad(&shifted, (i, shift), &out, counter)?;
                (loss, g, cache)
            };
            Ok((loss, net.backward(&cache, &g_out)?))
        })
        .collect();
    let mut loss = 0.0;
    let mut grad = vec![0.0; net.n_params()];
    for part in parts {
        let (l, g) = part?;
        loss += l;
        for (acc, v) in grad.iter_mut().zip(&g) {
            *acc += v;
        }
    }
    Ok((loss, grad))
}

/// Sum over the batch of the 4DVAR cost at the network's output.
pub fn e2e_loss<M: DiscreteModel>(net: &ConvNet, model: &M, batch: &[&ObservationSet]) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    batch
        .iter()
        .map(|obs| {
            let out = net.predict(obs)?;
            cost_4dvar(model, &out, obs)
        })
        .try_fold(0.0, |acc, l| l.map(|l| acc + l))
}

/// Gradient of [`e2e_loss`] with respect to the network parameters, together with the loss.
pub fn e2e_grad<M: DiscreteModel>(net: &ConvNet, model: &M, batch: &[&ObservationSet]) -> Result<(f64, Vec<f64>)> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let inputs = network_inputs(&net.norm, batch);
    let items: Vec<Item> = (0..batch.len()).map(|i| (i, 0)).collect();
    batch_loss_and_grad(net, batch, &inputs, &Supervision::EndToEnd(model), &items, &IntegrationCounter::default())
}

/// Mean RMSE of the network's initial-state estimate over `split`.
pub fn split_rmse(net: &ConvNet, dataset: &Dataset, split: Split) -> Result<f64> {
    let samples = dataset.split(split);
    if samples.is_empty() {
        return Err(Error::invalid(format!("{split} split is empty")));
    }
    let scores: Vec<f64> = samples
        .par_iter()
        .map(|s| Ok(rmse(&net.predict(&s.obs)?, s.x0())))
        .collect::<Result<_>>()?;
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

fn train<M: DiscreteModel>(
    dataset: &Dataset,
    arch: Architecture,
    cfg: &TrainConfig,
    sup: &Supervision<'_, M>,
    provenance: Provenance,
) -> Result<(Checkpoint, TrainReport)> {
    cfg.validate()?;
    let started = Instant::now();
    let train = dataset.split(Split::Train);
    if train.is_empty() || dataset.split(Split::Val).is_empty() {
        return Err(Error::invalid("training needs non-empty train and val splits"));
    }
    check_len(dataset.config.window + 1, arch.n_times)?;
    check_len(dataset.config.dynamics.n_space, arch.n_space)?;
    let mut net = ConvNet::init(arch, Normalization::default(), cfg.seed)?;
    let obs: Vec<&ObservationSet> = train.iter().map(|s| &s.obs).collect();
    let inputs = network_inputs(&net.norm, &obs);
    let counter = IntegrationCounter::default();

    let initial_train_loss = if cfg.track_initial_loss {
        let diag = IntegrationCounter::default();
        let losses: Vec<Result<f64>> = (0..train.len())
            .into_par_iter()
            .map(|i| sup.loss(obs[i], (i, 0), &net.forward(&inputs[i])?.0, &diag))
            .collect();
        let losses: Vec<f64> = losses.into_iter().filter_map(|l| l.ok()).collect();
        let n_diag = diag.total();
        (!losses.is_empty()).then(|| (losses.iter().sum::<f64>() / losses.len() as f64, n_diag))
    } else {
        None
    };

    let mut adam = AdamState::new(
        net.n_params(),
        AdamConfig {
            lr: cfg.lr,
            ..AdamConfig::default()
        },
    );
    let n_space = dataset.config.dynamics.n_space;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, f64, Vec<f64>)> = None;
    let mut visited = 0;
    for epoch in 1..=cfg.epochs {
        order.sort_unstable();
        let mut epoch_rng = rng::stream(cfg.seed, epoch as u64);
        order.shuffle(&mut epoch_rng);
        let items: Vec<Item> = order
            .iter()
            .map(|&i| (i, if cfg.augment_shifts { epoch_rng.random_range(0..n_space) } else { 0 }))
            .collect();
        let batches: Vec<&[Item]> = items.chunks(cfg.batch_size).collect();
        let mut skipped = 0;
        let mut loss_sum = 0.0;
        let mut loss_count = 0;
        for batch in &batches {
            visited += batch.len();
            match batch_loss_and_grad(&net, &obs, &inputs, sup, batch, &counter) {
                Ok((loss, grad)) if loss.is_finite() && grad.iter().all(|g| g.is_finite()) => {
                    loss_sum += loss;
                    loss_count += batch.len();
                    adam.step(&mut net.params, &grad)?;
                }
                Ok(_) | Err(Error::NonFinite { .. }) => skipped += 1,
                Err(e) => return Err(e),
            }
        }
        if skipped as f64 > cfg.max_skip_fraction * batches.len() as f64 {
            return Err(Error::TrainingDiverged {
                epoch,
                skipped,
                total: batches.len(),
            });
        }
        let val_rmse = split_rmse(&net, dataset, Split::Val)?;
        if best.as_ref().is_none_or(|(_, v, _)| val_rmse < *v) {
            best = Some((epoch, val_rmse, net.params.clone()));
        }
        epochs.push(EpochLog {
            epoch,
            train_loss: if loss_count > 0 { loss_sum / loss_count as f64 } else { f64::NAN },
            val_rmse,
            skipped_batches: skipped,
            n_batches: batches.len(),
            n_model_integrations: counter.total(),
        });
    }
    let (best_epoch, best_val_rmse, params) = best.expect("at least one epoch");
    net.params = params;
    let report = TrainReport {
        method: provenance.method.clone(),
        n_train: train.len(),
        initial_train_loss: initial_train_loss.map(|(l, _)| l),
        epochs,
        best_epoch,
        best_val_rmse,
        n_model_integrations: counter.total(),
        n_diagnostic_integrations: initial_train_loss.map_or(0, |(_, n)| n),
        n_samples_visited: visited,
        wall_seconds: started.elapsed().as_secs_f64(),
    };
    let provenance = Provenance {
        init_seed: cfg.seed,
        train_seed: cfg.seed,
        epochs_run: cfg.epochs,
        best_epoch: Some(best_epoch),
        best_val_rmse: Some(best_val_rmse),
        n_model_integrations: counter.total() as u64,
        ..provenance
    };
    Ok((Checkpoint { net, provenance }, report))
}

/// Trains the network through the dynamics on the 4DVAR cost of its output.
pub fn train_e2e(dataset: &Dataset, arch: Architecture, cfg: &TrainConfig) -> Result<(Checkpoint, TrainReport)> {
    let model = Lorenz96::new(dataset.config.dynamics)?;
    let sup = Supervision::EndToEnd(&model);
    let provenance = Provenance {
        method: "nn-4dvar-e2e".into(),
        ..Provenance::default()
    };
    train(dataset, arch, cfg, &sup, provenance)
}

/// Regresses the network onto one target state per training sample.
pub fn train_supervised(
    dataset: &Dataset,
    targets: &[Vec<f64>],
    arch: Architecture,
    cfg: &TrainConfig,
    method: &str,
) -> Result<(Checkpoint, TrainReport)> {
    check_len(dataset.split(Split::Train).len(), targets.len())?;
    let sup: Supervision<'_, Lorenz96> = Supervision::Targets(targets);
    let provenance = Provenance {
        method: method.into(),
        ..Provenance::default()
    };
    train(dataset, arch, cfg, &sup, provenance)
}

/// Supervised training on the true initial states.
pub fn train_perfect(dataset: &Dataset, arch: Architecture, cfg: &TrainConfig) -> Result<(Checkpoint, TrainReport)> {
    let truth: Vec<Vec<f64>> = dataset.split(Split::Train).iter().map(|s| s.x0().to_vec()).collect();
    train_supervised(dataset, &truth, arch, cfg, "nn-perfect")
}
