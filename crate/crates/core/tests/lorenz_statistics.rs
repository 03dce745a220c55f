use sda_core::lorenz::STATE_DIM;
use sda_core::rng::stream;
use sda_core::{LorenzModel, LorenzParams};

/// Batch means of one channel of a long trajectory, and their standard error.
fn batched_mean(traj: &[f64], channel: usize, batches: usize) -> (f64, f64) {
    let values: Vec<f64> = traj.iter().skip(channel).step_by(STATE_DIM).copied().collect();
    let size = values.len() / batches;
    let means: Vec<f64> = values
        .chunks_exact(size)
        .map(|c| c.iter().sum::<f64>() / size as f64)
        .collect();
    let n = means.len() as f64;
    let m = means.iter().sum::<f64>() / n;
    let var = means.iter().map(|b| (b - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, (var / n).sqrt())
}

#[test]
fn long_run_means_respect_the_attractor_symmetry() {
    let model = LorenzModel::new(LorenzParams::default()).unwrap();
    let traj = model.simulate(100_000, 1024, &mut stream(5, 0)).unwrap();
    for channel in 0..2 {
        let (m, se) = batched_mean(&traj, channel, 100);
        assert!(m.abs() <= 3.0 * se, "channel {channel}: {m} ± {se}");
    }
    // the third channel averages about 23.5
    let (z, _) = batched_mean(&traj, 2, 100);
    assert!((20.0..27.0).contains(&z), "mean of the third channel {z}");
}
