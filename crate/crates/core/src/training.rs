//! Denoising score matching on random trajectory windows.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::diffusion::DiffusionSchedule;
use crate::error::{check_len, Error, Result};
use crate::lorenz::{Split, TrajectoryStore};
use crate::rng::{self, Rng};
use crate::scorenet::{adamw_step, AdamWConfig, NetworkConfig, OptimizerState, Parameters};

/// Stream index of the fixed validation draws. Epoch streams use `0..epochs`.
const VALIDATION_STREAM: u64 = 1 << 40;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batches_per_epoch: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub k: usize,
    pub seed: u64,
    /// Windows drawn once from the validation split to score every epoch.
    #[serde(default = "default_validation_windows")]
    pub validation_windows: usize,
}

fn default_validation_windows() -> usize {
    1024
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 256,
            batches_per_epoch: 64,
            batch_size: 256,
            learning_rate: 1e-3,
            weight_decay: 1e-3,
            k: 2,
            seed: 0,
            validation_windows: default_validation_windows(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, len: usize) -> Result<()> {
        if self.epochs == 0 || self.batches_per_epoch == 0 || self.batch_size == 0 {
            return Err(Error::InvalidConfig(
                "epochs, batches_per_epoch and batch_size must be positive".into(),
            ));
        }
        if self.validation_windows == 0 {
            return Err(Error::InvalidConfig("validation_windows must be positive".into()));
        }
        if !(self.learning_rate > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::InvalidConfig(
                "learning rate must be positive and weight decay non-negative".into(),
            ));
        }
        if len < 2 * self.k + 1 {
            return Err(Error::TrajectoryTooShort { len, radius: self.k });
        }
        Ok(())
    }

    pub fn total_steps(&self) -> u64 {
        (self.epochs * self.batches_per_epoch) as u64
    }
}

/// Window `x_{i−k..=i+k}` of a flat `len × dim` trajectory with the centre drawn
/// uniformly among the positions whose window fits.
pub fn sample_segment(
    trajectory: &[f64],
    len: usize,
    dim: usize,
    k: usize,
    rng: &mut Rng,
) -> Result<Vec<f64>> {
    check_len(len * dim, trajectory.len())?;
    if len < 2 * k + 1 {
        return Err(Error::TrajectoryTooShort { len, radius: k });
    }
    let start = rng.random_range(0..=len - 2 * k - 1);
    Ok(trajectory[start * dim..(start + 2 * k + 1) * dim].to_vec())
}

/// `‖ε_φ(μ(t)·x + σ(t)·ε, t) − ε‖²` for one window.
pub fn dsm_loss(params: &Parameters, segment: &[f64], t: f64, eps: &[f64]) -> Result<f64> {
    check_len(segment.len(), eps.len())?;
    let schedule = DiffusionSchedule::vp_cosine();
    let x_t = schedule.perturb(segment, t, eps)?;
    let pred = params.eps_eval(&x_t.value, t)?;
    Ok(pred.iter().zip(eps).map(|(a, b)| (a - b).powi(2)).sum())
}

/// Mean loss over a batch of windows with per-window times.
pub fn dsm_batch_loss(params: &Parameters, windows: &[f64], times: &[f64], eps: &[f64]) -> Result<f64> {
    check_len(windows.len(), eps.len())?;
    let schedule = DiffusionSchedule::vp_cosine();
    let size = params.config().window_size();
    check_len(times.len() * size, windows.len())?;
    let mut perturbed = Vec::with_capacity(windows.len());
    for ((w, e), &t) in windows.chunks(size).zip(eps.chunks(size)).zip(times) {
        perturbed.extend(schedule.perturb(w, t, e)?.value);
    }
    let pred = params.eps_batch(&perturbed, times)?;
    let total: f64 = pred.iter().zip(eps).map(|(a, b)| (a - b).powi(2)).sum();
    Ok(total / times.len() as f64)
}

/// One training batch: windows, times and noise.
#[derive(Clone, Debug)]
pub struct Batch {
    pub windows: Vec<f64>,
    pub times: Vec<f64>,
    pub eps: Vec<f64>,
}

/// Draws `n` windows from the trajectories of `split`, each with its own time and noise.
pub fn draw_batch(
    store: &TrajectoryStore,
    split: Split,
    k: usize,
    n: usize,
    rng: &mut Rng,
) -> Result<Batch> {
    let range = store.split_range(split);
    if range.is_empty() {
        return Err(Error::InvalidConfig(format!("the {split:?} split is empty")));
    }
    let size = (2 * k + 1) * store.dim;
    let mut windows = Vec::with_capacity(n * size);
    let mut times = Vec::with_capacity(n);
    for _ in 0..n {
        let j = rng.random_range(range.clone());
        windows.extend(sample_segment(store.trajectory(j), store.len, store.dim, k, rng)?);
        times.push(rng.random::<f64>());
    }
    let eps = rng::normal_vec(rng, n * size);
    Ok(Batch { windows, times, eps })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_loss: f64,
}

impl EpochRecord {
    pub fn csv_line(&self) -> String {
        format!("{},{},{}", self.epoch, self.train_loss, self.valid_loss)
    }
}

/// Everything needed to continue an interrupted run.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub params: Parameters,
    pub optimizer: OptimizerState,
    pub epochs_completed: usize,
}

impl TrainState {
    pub fn fresh(net: NetworkConfig, config: &TrainConfig) -> Result<Self> {
        let params = Parameters::new(net)?;
        let optimizer = OptimizerState::new(
            AdamWConfig::new(config.learning_rate, config.weight_decay, config.total_steps()),
            params.len(),
        );
        Ok(Self {
            params,
            optimizer,
            epochs_completed: 0,
        })
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: Parameters,
    pub optimizer: OptimizerState,
    /// Records of the epochs run by this call.
    pub log: Vec<EpochRecord>,
    /// Validation loss of the initial parameters, before any update.
    pub initial_valid_loss: f64,
}

fn check_compatible(store: &TrajectoryStore, net: &NetworkConfig, config: &TrainConfig) -> Result<()> {
    config.validate(store.len)?;
    net.validate()?;
    if net.window_radius != config.k {
        return Err(Error::InvalidConfig(format!(
            "network window radius {} differs from training k = {}",
            net.window_radius, config.k
        )));
    }
    if net.state_dim != store.dim {
        return Err(Error::ShapeMismatch {
            expected: net.state_dim,
            got: store.dim,
        });
    }
    if store.split_range(Split::Train).is_empty() {
        return Err(Error::InvalidConfig("the training split is empty".into()));
    }
    Ok(())
}

fn validation_batch(store: &TrajectoryStore, config: &TrainConfig) -> Result<Batch> {
    // small stores may have no validation trajectories: score the training split then
    let split = if store.split_range(Split::Valid).is_empty() {
        Split::Train
    } else {
        Split::Valid
    };
    let mut r = rng::stream(config.seed, VALIDATION_STREAM);
    draw_batch(store, split, config.k, config.validation_windows, &mut r)
}

/// Trains a fresh network.
pub fn train(store: &TrajectoryStore, net: NetworkConfig, config: &TrainConfig) -> Result<TrainOutcome> {
    let state = TrainState::fresh(net, config)?;
    train_from(store, state, config, |_, _, _| Ok(()))
}

/// Runs the remaining epochs of `state`, calling `on_epoch` with the record and
/// the updated parameters and optimizer after each one.
///
/// Epoch `e` draws its batches from stream `e` of the seed, so a resumed run
/// reproduces an uninterrupted one bit for bit.
pub fn train_from<F>(
    store: &TrajectoryStore,
    state: TrainState,
    config: &TrainConfig,
    mut on_epoch: F,
) -> Result<TrainOutcome>
where
    F: FnMut(&EpochRecord, &Parameters, &OptimizerState) -> Result<()>,
{
    let TrainState {
        mut params,
        mut optimizer,
        epochs_completed,
    } = state;
    check_compatible(store, params.config(), config)?;
    let schedule = DiffusionSchedule::vp_cosine();
    let valid = validation_batch(store, config)?;
    let valid_loss = |p: &Parameters| dsm_batch_loss(p, &valid.windows, &valid.times, &valid.eps);
    let initial_valid_loss = valid_loss(&params)?;
    let mut log = Vec::with_capacity(config.epochs.saturating_sub(epochs_completed));
    for epoch in epochs_completed..config.epochs {
        let mut r = rng::stream(config.seed, epoch as u64);
        let mut total = 0.0;
        for b in 0..config.batches_per_epoch {
            let batch = draw_batch(store, Split::Train, config.k, config.batch_size, &mut r)?;
            let (loss, grad) =
                params.dsm_loss_and_grad(&schedule, &batch.windows, &batch.times, &batch.eps)?;
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::NanLoss { epoch, batch: b });
            }
            total += loss;
            adamw_step(params.values_mut(), &grad, &mut optimizer)?;
        }
        let record = EpochRecord {
            epoch,
            train_loss: total / config.batches_per_epoch as f64,
            valid_loss: valid_loss(&params)?,
        };
        if !record.valid_loss.is_finite() {
            return Err(Error::NanLoss {
                epoch,
                batch: config.batches_per_epoch,
            });
        }
        on_epoch(&record, &params, &optimizer)?;
        log.push(record);
    }
    Ok(TrainOutcome {
        params,
        optimizer,
        log,
        initial_valid_loss,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lorenz::SplitCounts;

    fn net(k: usize, dim: usize) -> NetworkConfig {
        NetworkConfig {
            window_radius: k,
            state_dim: dim,
            hidden_features: 16,
            residual_blocks: 1,
            time_embedding_dim: 8,
            seed: 4,
        }
    }

    #[test]
    fn full_length_window_is_whole_trajectory() {
        let traj: Vec<f64> = (0..15).map(f64::from).collect();
        let mut r = rng::stream(0, 0);
        for _ in 0..10 {
            assert_eq!(sample_segment(&traj, 5, 3, 2, &mut r).unwrap(), traj);
        }
        assert!(sample_segment(&traj, 5, 3, 3, &mut r).is_err());
    }

    #[test]
    fn window_centres_are_uniform() {
        let (len, k) = (65, 2);
        let traj: Vec<f64> = (0..len).map(|i| i as f64).collect();
        let mut r = rng::stream(1, 0);
        let n = 100_000;
        let mut counts = vec![0usize; len];
        for _ in 0..n {
            let w = sample_segment(&traj, len, 1, k, &mut r).unwrap();
            counts[w[k] as usize] += 1;
        }
        // centres k..len−k in 0-based positions
        assert!(counts[..k].iter().chain(&counts[len - k..]).all(|c| *c == 0));
        let cells = len - 2 * k;
        let expected = n as f64 / cells as f64;
        let chi2: f64 = counts[k..len - k]
            .iter()
            .map(|c| (*c as f64 - expected).powi(2) / expected)
            .sum();
        // 99th percentile of χ² with 60 degrees of freedom
        assert!(chi2 < 88.38, "{chi2}");
    }

    #[test]
    fn zero_radius_windows_are_single_states() {
        let traj = [1.0, 2.0, 3.0, 4.0];
        let mut r = rng::stream(2, 0);
        let w = sample_segment(&traj, 2, 2, 0, &mut r).unwrap();
        assert!(w == [1.0, 2.0] || w == [3.0, 4.0]);
    }

    #[test]
    fn zero_network_loss_is_window_dimension_on_average() {
        let p = Parameters::new(net(2, 3)).unwrap();
        let mut r = rng::stream(3, 0);
        let segment = vec![0.3; 15];
        let n = 4000;
        let losses: Vec<f64> = (0..n)
            .map(|_| dsm_loss(&p, &segment, 0.5, &rng::normal_vec(&mut r, 15)).unwrap())
            .collect();
        let m = losses.iter().sum::<f64>() / n as f64;
        let sd = (losses.iter().map(|l| (l - m).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
        assert!((m - 15.0).abs() < 3.0 * sd / (n as f64).sqrt(), "{m}");
    }

    #[test]
    fn batch_loss_matches_single_losses() {
        let p = Parameters::new(net(1, 2)).unwrap();
        let mut r = rng::stream(4, 0);
        let windows = rng::normal_vec(&mut r, 3 * 6);
        let eps = rng::normal_vec(&mut r, 3 * 6);
        let times = [0.1, 0.5, 0.9];
        let batch = dsm_batch_loss(&p, &windows, &times, &eps).unwrap();
        let single: f64 = (0..3)
            .map(|b| dsm_loss(&p, &windows[b * 6..(b + 1) * 6], times[b], &eps[b * 6..(b + 1) * 6]).unwrap())
            .sum::<f64>()
            / 3.0;
        assert!((batch - single).abs() < 1e-12);
    }

    fn zero_store(n: usize, len: usize, dim: usize) -> TrajectoryStore {
        TrajectoryStore::new(len, dim, vec![0.0; n * len * dim], SplitCounts::for_total(n)).unwrap()
    }

    fn small_config(epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            batches_per_epoch: 4,
            batch_size: 32,
            learning_rate: 3e-3,
            weight_decay: 0.0,
            k: 1,
            seed: 7,
            validation_windows: 256,
        }
    }

    #[test]
    fn zero_data_validation_loss_decreases() {
        let store = zero_store(10, 8, 1);
        let out = train(&store, net(1, 1), &small_config(50)).unwrap();
        assert_eq!(out.log.len(), 50);
        let smooth: Vec<f64> = out
            .log
            .windows(5)
            .map(|w| w.iter().map(|r| r.valid_loss).sum::<f64>() / 5.0)
            .collect();
        assert!(smooth.last().unwrap() < &(0.8 * smooth[0]), "{smooth:?}");
        assert!(out.log.last().unwrap().valid_loss < out.initial_valid_loss);
    }

    #[test]
    fn training_is_deterministic_and_resumable() {
        let store = zero_store(10, 8, 1);
        let cfg = small_config(4);
        let a = train(&store, net(1, 1), &cfg).unwrap();
        let b = train(&store, net(1, 1), &cfg).unwrap();
        assert_eq!(a.params.values(), b.params.values());

        let mut half = cfg.clone();
        half.epochs = 2;
        // resuming needs the optimizer schedule of the full run
        let mut state = TrainState::fresh(net(1, 1), &cfg).unwrap();
        let first = train_from(&store, state.clone(), &half, |_, _, _| Ok(())).unwrap();
        state = TrainState {
            params: first.params,
            optimizer: first.optimizer,
            epochs_completed: 2,
        };
        let resumed = train_from(&store, state, &cfg, |_, _, _| Ok(())).unwrap();
        assert_eq!(resumed.params.values(), a.params.values());
        assert_eq!(resumed.log, a.log[2..].to_vec());
    }

    #[test]
    fn mismatched_configs_are_rejected() {
        let store = zero_store(10, 8, 1);
        assert!(train(&store, net(2, 1), &small_config(1)).is_err());
        assert!(train(&store, net(1, 2), &small_config(1)).is_err());
        let short = zero_store(10, 2, 1);
        assert!(train(&short, net(1, 1), &small_config(1)).is_err());
    }

    #[test]
    fn log_lines_are_plain_csv() {
        let r = EpochRecord { epoch: 3, train_loss: 0.5, valid_loss: 0.25 };
        assert_eq!(r.csv_line(), "3,0.5,0.25");
    }
}
