//! Global trajectory scores assembled from local window scores.
//!
//! Windows of `2k+1` consecutive states slide over a trajectory of `L`
//! states. The first `k+1` rows come from the first window, the last `k+1`
//! rows from the last window, and every row in between from the center of
//! the window around it. Each row is written exactly once; overlapping
//! windows are never averaged.

use crate::error::{check_len, Error, Result};
use crate::score::{ScoreFn, ScoreVjp};

/// A score over windows of `2k+1` states of dimension `D`.
pub trait LocalScore: Sync {
    fn radius(&self) -> usize;
    fn state_dim(&self) -> usize;

    /// Scores for a batch of flattened windows. `starts[w]` is the index of the
    /// first state of window `w` in its trajectory; stationary models ignore it.
    fn window_scores(&self, windows: &[f64], starts: &[usize], t: f64) -> Result<Vec<f64>>;

    /// `(∂score/∂window)ᵀ · cotangent`, window by window.
    fn window_vjp(
        &self,
        windows: &[f64],
        starts: &[usize],
        t: f64,
        cotangent: &[f64],
    ) -> Result<Vec<f64>>;
}

/// Which window (and which row inside it) supplies row `i` of a trajectory of `len` states.
fn source(i: usize, len: usize, k: usize) -> (usize, usize) {
    let last = len - 2 * k - 1;
    if i <= k {
        (0, i)
    } else if i + k + 1 >= len {
        (last, i - last)
    } else {
        (i - k, k)
    }
}

fn check_len_radius(len: usize, k: usize) -> Result<()> {
    if len < 2 * k + 1 {
        Err(Error::TrajectoryTooShort { len, radius: k })
    } else {
        Ok(())
    }
}

/// Extracts every window of every trajectory in `x` (`n × len × dim`).
fn gather(x: &[f64], n: usize, len: usize, dim: usize, k: usize) -> (Vec<f64>, Vec<usize>) {
    let n_windows = len - 2 * k;
    let size = (2 * k + 1) * dim;
    let mut windows = Vec::with_capacity(n * n_windows * size);
    let mut starts = Vec::with_capacity(n * n_windows);
    for j in 0..n {
        let traj = &x[j * len * dim..(j + 1) * len * dim];
        for s in 0..n_windows {
            windows.extend_from_slice(&traj[s * dim..s * dim + size]);
            starts.push(s);
        }
    }
    (windows, starts)
}

/// Composed score of a single trajectory `x_t` laid out as `L × D`.
pub fn compose_score<S: LocalScore + ?Sized>(local: &S, x_t: &[f64], t: f64) -> Result<Vec<f64>> {
    let dim = local.state_dim();
    if dim == 0 || !x_t.len().is_multiple_of(dim) {
        return Err(Error::ShapeMismatch {
            expected: dim,
            got: x_t.len(),
        });
    }
    compose_batch(local, x_t, 1, x_t.len() / dim, t)
}

/// Composed score for `n` trajectories of `len` states, all windows evaluated in one batch.
pub fn compose_batch<S: LocalScore + ?Sized>(
    local: &S,
    x: &[f64],
    n: usize,
    len: usize,
    t: f64,
) -> Result<Vec<f64>> {
    let (k, dim) = (local.radius(), local.state_dim());
    check_len_radius(len, k)?;
    check_len(n * len * dim, x.len())?;
    let (windows, starts) = gather(x, n, len, dim, k);
    let scores = local.window_scores(&windows, &starts, t)?;
    check_len(windows.len(), scores.len())?;
    let n_windows = len - 2 * k;
    let size = (2 * k + 1) * dim;
    let mut out = vec![0.0; x.len()];
    for j in 0..n {
        for i in 0..len {
            let (w, row) = source(i, len, k);
            let src = (j * n_windows + w) * size + row * dim;
            out[(j * len + i) * dim..(j * len + i + 1) * dim]
                .copy_from_slice(&scores[src..src + dim]);
        }
    }
    Ok(out)
}

/// Same result as [`compose_score`], evaluating one window at a time in order.
pub fn compose_score_sequential<S: LocalScore + ?Sized>(
    local: &S,
    x_t: &[f64],
    t: f64,
) -> Result<Vec<f64>> {
    let (k, dim) = (local.radius(), local.state_dim());
    let len = x_t.len() / dim.max(1);
    check_len(len * dim, x_t.len())?;
    check_len_radius(len, k)?;
    let size = (2 * k + 1) * dim;
    let mut out = vec![f64::NAN; x_t.len()];
    for w in 0..len - 2 * k {
        let s = local.window_scores(&x_t[w * dim..w * dim + size], &[w], t)?;
        for i in 0..len {
            let (src, row) = source(i, len, k);
            if src == w {
                out[i * dim..(i + 1) * dim].copy_from_slice(&s[row * dim..(row + 1) * dim]);
            }
        }
    }
    Ok(out)
}

/// Vector-Jacobian product of the composed score for `n` trajectories.
pub fn compose_vjp<S: LocalScore + ?Sized>(
    local: &S,
    x: &[f64],
    n: usize,
    len: usize,
    t: f64,
    cotangent: &[f64],
) -> Result<Vec<f64>> {
    let (k, dim) = (local.radius(), local.state_dim());
    check_len_radius(len, k)?;
    check_len(n * len * dim, x.len())?;
    check_len(x.len(), cotangent.len())?;
    let (windows, starts) = gather(x, n, len, dim, k);
    let n_windows = len - 2 * k;
    let size = (2 * k + 1) * dim;
    let mut window_cot = vec![0.0; windows.len()];
    for j in 0..n {
        for i in 0..len {
            let (w, row) = source(i, len, k);
            let dst = (j * n_windows + w) * size + row * dim;
            window_cot[dst..dst + dim]
                .copy_from_slice(&cotangent[(j * len + i) * dim..(j * len + i + 1) * dim]);
        }
    }
    let g = local.window_vjp(&windows, &starts, t, &window_cot)?;
    check_len(windows.len(), g.len())?;
    let mut out = vec![0.0; x.len()];
    for j in 0..n {
        for w in 0..n_windows {
            let src = (j * n_windows + w) * size;
            let dst = (j * len + w) * dim;
            for (o, v) in out[dst..dst + size].iter_mut().zip(&g[src..src + size]) {
                *o += v;
            }
        }
    }
    Ok(out)
}

/// A local score lifted to whole trajectories of a fixed length.
pub struct ComposedScore<S> {
    pub local: S,
    pub len: usize,
}

impl<S: LocalScore> ComposedScore<S> {
    pub fn new(local: S, len: usize) -> Result<Self> {
        check_len_radius(len, local.radius())?;
        Ok(Self { local, len })
    }

    pub fn trajectory_size(&self) -> usize {
        self.len * self.local.state_dim()
    }

    fn count(&self, x: &[f64]) -> Result<usize> {
        let size = self.trajectory_size();
        if !x.len().is_multiple_of(size) {
            return Err(Error::ShapeMismatch {
                expected: size * (x.len() / size + 1),
                got: x.len(),
            });
        }
        Ok(x.len() / size)
    }
}

impl<S: LocalScore> ScoreFn for ComposedScore<S> {
    fn score(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        let n = self.count(x)?;
        compose_batch(&self.local, x, n, self.len, t)
    }
}

impl<S: LocalScore> ScoreVjp for ComposedScore<S> {
    fn vjp(&self, x: &[f64], t: f64, cotangent: &[f64]) -> Result<Vec<f64>> {
        let n = self.count(x)?;
        compose_vjp(&self.local, x, n, self.len, t, cotangent)
    }
}
