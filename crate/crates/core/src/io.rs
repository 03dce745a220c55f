//! Binary file formats, all little-endian.
//!
//! | file | layout |
//! |------|--------|
//! | trajectories | `SDAT`, u32 version, u64 n/L/D, f64 means[D], f64 stds[D], f32 states |
//! | observation | `SDAO`, u64 M, f32 y[M], f32 variances[M], u64 byte length, JSON descriptor |
//! | checkpoint | `SDCK`, u32 version, u64 network fields, u64 count, f32 parameters |
//! | optimizer | `SDOS`, u32 version, u64 step, u64 epochs, u64 count, f64 parameters/m/v |
//!
//! Trajectory states are stored in the coordinates described by the means and
//! stds, which are zero and one for raw data.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::guidance::{ObservationOperator, ObservationProcess};
use crate::lorenz::{SplitCounts, Standardization, TrajectoryStore};
use crate::scorenet::{NetworkConfig, OptimizerState, Parameters};
use crate::training::TrainState;

const TRAJECTORY_MAGIC: &[u8; 4] = b"SDAT";
const OBSERVATION_MAGIC: &[u8; 4] = b"SDAO";
const CHECKPOINT_MAGIC: &[u8; 4] = b"SDCK";
const OPTIMIZER_MAGIC: &[u8; 4] = b"SDOS";
const VERSION: u32 = 1;
/// Refuses headers announcing absurd sizes before allocating.
const MAX_ELEMENTS: u64 = 1 << 34;

struct Writer<W: Write>(W);

impl<W: Write> Writer<W> {
    fn bytes(&mut self, b: &[u8]) -> Result<()> {
        self.0.write_all(b)?;
        Ok(())
    }
    fn u32(&mut self, v: u32) -> Result<()> {
        self.bytes(&v.to_le_bytes())
    }
    fn u64(&mut self, v: u64) -> Result<()> {
        self.bytes(&v.to_le_bytes())
    }
    fn usize(&mut self, v: usize) -> Result<()> {
        self.u64(v as u64)
    }
    fn f64s(&mut self, v: &[f64]) -> Result<()> {
        let mut buf = Vec::with_capacity(v.len() * 8);
        for x in v {
            buf.extend_from_slice(&x.to_le_bytes());
        }
        self.bytes(&buf)
    }
    fn f32s(&mut self, v: &[f64]) -> Result<()> {
        let mut buf = Vec::with_capacity(v.len() * 4);
        for x in v {
            buf.extend_from_slice(&(*x as f32).to_le_bytes());
        }
        self.bytes(&buf)
    }
    fn finish(mut self) -> Result<()> {
        self.0.flush()?;
        Ok(())
    }
}

struct Reader<R: Read>(R);

impl<R: Read> Reader<R> {
    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut b = [0u8; N];
        self.0
            .read_exact(&mut b)
            .map_err(|e| Error::Format(format!("truncated file: {e}")))?;
        Ok(b)
    }
    fn magic(&mut self, expected: &[u8; 4]) -> Result<()> {
        let got = self.array::<4>()?;
        if &got != expected {
            return Err(Error::Format(format!(
                "expected magic {:?}, found {:?}",
                String::from_utf8_lossy(expected),
                String::from_utf8_lossy(&got)
            )));
        }
        Ok(())
    }
    fn version(&mut self) -> Result<()> {
        let v = u32::from_le_bytes(self.array()?);
        if v != VERSION {
            return Err(Error::Format(format!("unsupported format version {v}")));
        }
        Ok(())
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }
    fn count(&mut self) -> Result<usize> {
        let v = self.u64()?;
        if v > MAX_ELEMENTS {
            return Err(Error::Format(format!("implausible count {v}")));
        }
        Ok(v as usize)
    }
    fn raw(&mut self, n: usize) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        self.0
            .read_exact(&mut buf)
            .map_err(|e| Error::Format(format!("truncated file: {e}")))?;
        Ok(buf)
    }
    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        Ok(self
            .raw(n * 8)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
    fn f32s(&mut self, n: usize) -> Result<Vec<f64>> {
        Ok(self
            .raw(n * 4)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect())
    }
    fn end(mut self) -> Result<()> {
        let mut extra = [0u8; 1];
        match self.0.read(&mut extra)? {
            0 => Ok(()),
            _ => Err(Error::Format("trailing bytes after payload".into())),
        }
    }
}

fn create(path: &Path) -> Result<Writer<BufWriter<File>>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    Ok(Writer(BufWriter::new(File::create(path)?)))
}

fn open(path: &Path) -> Result<Reader<BufReader<File>>> {
    Ok(Reader(BufReader::new(File::open(path)?)))
}

fn product(parts: &[usize]) -> Result<usize> {
    parts
        .iter()
        .try_fold(1usize, |acc, p| acc.checked_mul(*p))
        .filter(|n| *n as u64 <= MAX_ELEMENTS)
        .ok_or_else(|| Error::Format("payload size overflows".into()))
}

pub fn write_trajectories(path: &Path, store: &TrajectoryStore) -> Result<()> {
    let mut w = create(path)?;
    w.bytes(TRAJECTORY_MAGIC)?;
    w.u32(VERSION)?;
    w.usize(store.n_traj())?;
    w.usize(store.len)?;
    w.usize(store.dim)?;
    w.f64s(&store.standardization.means)?;
    w.f64s(&store.standardization.stds)?;
    w.f32s(&store.data)?;
    w.finish()
}

/// Reads a trajectory file. Splits are reassigned 80/10/10 in file order.
pub fn read_trajectories(path: &Path) -> Result<TrajectoryStore> {
    let mut r = open(path)?;
    r.magic(TRAJECTORY_MAGIC)?;
    r.version()?;
    let (n, len, dim) = (r.count()?, r.count()?, r.count()?);
    let means = r.f64s(dim)?;
    let stds = r.f64s(dim)?;
    let data = r.f32s(product(&[n, len, dim])?)?;
    r.end()?;
    TrajectoryStore::with_standardization(
        len,
        dim,
        data,
        SplitCounts::for_total(n),
        Standardization { means, stds },
    )
}

#[derive(Serialize, Deserialize)]
struct ObservationDescriptor {
    len: usize,
    dim: usize,
    operator: ObservationOperator,
}

pub fn write_observation(path: &Path, obs: &ObservationProcess) -> Result<()> {
    let descriptor = serde_json::to_vec(&ObservationDescriptor {
        len: obs.len,
        dim: obs.dim,
        operator: obs.operator.clone(),
    })
    .map_err(|e| Error::Format(e.to_string()))?;
    let mut w = create(path)?;
    w.bytes(OBSERVATION_MAGIC)?;
    w.usize(obs.m())?;
    w.f32s(&obs.y)?;
    w.f32s(&obs.noise_var)?;
    w.usize(descriptor.len())?;
    w.bytes(&descriptor)?;
    w.finish()
}

pub fn read_observation(path: &Path) -> Result<ObservationProcess> {
    let mut r = open(path)?;
    r.magic(OBSERVATION_MAGIC)?;
    let m = r.count()?;
    let y = r.f32s(m)?;
    let var = r.f32s(m)?;
    let n = r.count()?;
    let text = r.raw(n)?;
    r.end()?;
    let d: ObservationDescriptor =
        serde_json::from_slice(&text).map_err(|e| Error::Format(format!("operator descriptor: {e}")))?;
    ObservationProcess::new(d.operator, d.len, d.dim, var, y)
}

fn config_fields(c: &NetworkConfig) -> [u64; 6] {
    [
        c.window_radius as u64,
        c.state_dim as u64,
        c.hidden_features as u64,
        c.residual_blocks as u64,
        c.time_embedding_dim as u64,
        c.seed,
    ]
}

pub fn write_checkpoint(path: &Path, params: &Parameters) -> Result<()> {
    let mut w = create(path)?;
    w.bytes(CHECKPOINT_MAGIC)?;
    w.u32(VERSION)?;
    for f in config_fields(params.config()) {
        w.u64(f)?;
    }
    w.usize(params.len())?;
    w.f32s(params.values())?;
    w.finish()
}

pub fn read_checkpoint(path: &Path) -> Result<Parameters> {
    let mut r = open(path)?;
    r.magic(CHECKPOINT_MAGIC)?;
    r.version()?;
    let config = NetworkConfig {
        window_radius: r.count()?,
        state_dim: r.count()?,
        hidden_features: r.count()?,
        residual_blocks: r.count()?,
        time_embedding_dim: r.count()?,
        seed: r.u64()?,
    };
    let n = r.count()?;
    let values = r.f32s(n)?;
    r.end()?;
    Parameters::from_values(config, values)
}

/// Full-precision training state for resuming.
pub fn write_train_state(path: &Path, state: &TrainState) -> Result<()> {
    let mut w = create(path)?;
    w.bytes(OPTIMIZER_MAGIC)?;
    w.u32(VERSION)?;
    for f in config_fields(state.params.config()) {
        w.u64(f)?;
    }
    w.u64(state.optimizer.step)?;
    w.usize(state.epochs_completed)?;
    w.usize(state.params.len())?;
    w.f64s(state.params.values())?;
    w.f64s(&state.optimizer.m)?;
    w.f64s(&state.optimizer.v)?;
    w.finish()
}

/// Reads a training state; the optimizer hyperparameters come from `template`.
pub fn read_train_state(path: &Path, template: &OptimizerState) -> Result<TrainState> {
    let mut r = open(path)?;
    r.magic(OPTIMIZER_MAGIC)?;
    r.version()?;
    let config = NetworkConfig {
        window_radius: r.count()?,
        state_dim: r.count()?,
        hidden_features: r.count()?,
        residual_blocks: r.count()?,
        time_embedding_dim: r.count()?,
        seed: r.u64()?,
    };
    let step = r.u64()?;
    let epochs_completed = r.count()?;
    let n = r.count()?;
    let values = r.f64s(n)?;
    let m = r.f64s(n)?;
    let v = r.f64s(n)?;
    r.end()?;
    let params = Parameters::from_values(config, values)?;
    Ok(TrainState {
        params,
        optimizer: OptimizerState {
            config: template.config.clone(),
            m,
            v,
            step,
        },
        epochs_completed,
    })
}
