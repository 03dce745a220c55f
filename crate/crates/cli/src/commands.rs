use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde_json::{json, Value};

use sda_core::evaluation::{
    expected_log_likelihood, expected_log_prior, wasserstein1_capped, StatsReport, DEFAULT_W1_CAP,
};
use sda_core::guidance::PosteriorScore;
use sda_core::io;
use sda_core::lorenz::{generate_dataset, standardize, Split, SplitCounts};
use sda_core::oracle::{bpf_sample, LorenzSsm, StepLikelihood};
use sda_core::rng::derive_seed;
use sda_core::sampling::sample;
use sda_core::training::{train_from, TrainState};
use sda_core::{
    ComposedScore, Guidance, LorenzModel, NetworkScore, ObservationProcess, Parameters,
    PosteriorEnsemble, Provenance, Standardization, TrajectoryStore,
};

use crate::config::{config_hash, tags, ExperimentConfig};
use crate::error::{CliError, Result};

const LOG_HEADER: &str = "epoch,train_loss,valid_loss";

/// A validated configuration bound to its experiment directory.
pub struct Experiment {
    pub config: ExperimentConfig,
    pub value: Value,
    pub dir: PathBuf,
}

impl Experiment {
    fn path(&self, rel: &Path) -> PathBuf {
        self.dir.join(rel)
    }

    fn hash(&self) -> String {
        config_hash(&self.value)
    }

    /// Writes `<output>.meta.json`: everything needed to reproduce `output`.
    fn write_meta(&self, command: &str, output: &Path, extra: Value) -> Result<()> {
        let mut meta = json!({
            "command": command,
            "config": self.value,
            "config_sha256": self.hash(),
            "seed": self.config.seed,
            "versions": {
                "sda": env!("CARGO_PKG_VERSION"),
                "file_format": 1,
            },
            "output": output.file_name().map(|n| n.to_string_lossy().into_owned()),
        });
        if let (Value::Object(m), Value::Object(e)) = (&mut meta, extra) {
            m.extend(e);
        }
        let text = serde_json::to_string_pretty(&meta).expect("metadata serializes") + "\n";
        write_text(&sidecar(output, "meta.json"), &text)
    }

    /// Wall time is kept out of the metadata so that reruns stay byte-identical.
    fn write_timing(&self, output: &Path, started: Instant) -> Result<()> {
        let text = format!("{{\"wall_seconds\": {:.3}}}\n", started.elapsed().as_secs_f64());
        write_text(&sidecar(output, "timing.json"), &text)
    }
}

fn sidecar(output: &Path, suffix: &str) -> PathBuf {
    let mut name = output.file_name().unwrap_or_default().to_os_string();
    name.push(".");
    name.push(suffix);
    output.with_file_name(name)
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| CliError::File {
            path: parent.to_path_buf(),
            source: e.into(),
        })?;
    }
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    ensure_parent(path)?;
    fs::write(path, text).map_err(|e| CliError::File {
        path: path.to_path_buf(),
        source: e.into(),
    })
}

fn read_store(path: &Path) -> Result<TrajectoryStore> {
    io::read_trajectories(path).map_err(CliError::file(path))
}

fn write_store(path: &Path, store: &TrajectoryStore) -> Result<()> {
    ensure_parent(path)?;
    io::write_trajectories(path, store).map_err(CliError::file(path))
}

fn read_observation(path: &Path) -> Result<ObservationProcess> {
    io::read_observation(path).map_err(CliError::file(path))
}

/// Only the header of a trajectory file is needed for its coordinates, but the
/// format is small enough at desk scale to read whole.
fn dataset_standardization(exp: &Experiment) -> Result<Standardization> {
    Ok(read_store(&exp.path(&exp.config.dataset.path))?.standardization)
}

fn load_network(exp: &Experiment, dim: usize) -> Result<Parameters> {
    let path = exp.path(&exp.config.training.checkpoint);
    let params = io::read_checkpoint(&path).map_err(CliError::file(&path))?;
    let k = params.config().window_radius;
    if k != exp.config.network.window_radius {
        return Err(CliError::Config(format!(
            "checkpoint has window radius {k} but network.window_radius is {}",
            exp.config.network.window_radius
        )));
    }
    if params.config().state_dim != dim {
        return Err(CliError::Config(format!(
            "checkpoint state dimension {} differs from the data dimension {dim}",
            params.config().state_dim
        )));
    }
    Ok(params)
}

fn ensemble_store(len: usize, dim: usize, data: Vec<f64>, s: Standardization) -> Result<TrajectoryStore> {
    let n = data.len() / (len * dim);
    Ok(TrajectoryStore::with_standardization(len, dim, data, SplitCounts::for_total(n), s)?)
}

pub fn generate(exp: &Experiment) -> Result<()> {
    let c = &exp.config;
    let model = LorenzModel::new(c.system)?;
    let raw = generate_dataset(
        &model,
        c.dataset.trajectories,
        c.dataset.length,
        c.dataset.burn_in,
        derive_seed(c.seed, tags::DATASET),
    )?;
    let store = standardize(&raw)?;
    let out = exp.path(&c.dataset.path);
    write_store(&out, &store)?;
    exp.write_meta(
        "generate",
        &out,
        json!({
            "splits": {
                "train": store.splits.train,
                "valid": store.splits.valid,
                "eval": store.splits.eval,
            },
            "standardization": store.standardization,
        }),
    )
}

pub fn train(exp: &Experiment, resume: bool) -> Result<()> {
    let started = Instant::now();
    let c = &exp.config;
    let store = read_store(&exp.path(&c.dataset.path))?;
    let net = c.network_config(store.dim);
    let tc = c.train_config();
    let state_path = exp.path(&c.training.state);
    let log_path = exp.path(&c.training.log);
    let fresh = TrainState::fresh(net.clone(), &tc)?;

    let (state, mut log) = if resume {
        let state = io::read_train_state(&state_path, &fresh.optimizer).map_err(CliError::file(&state_path))?;
        if *state.params.config() != net {
            return Err(CliError::Config("saved training state was made with a different network".into()));
        }
        let previous = fs::read_to_string(&log_path).map_err(|e| CliError::File {
            path: log_path.clone(),
            source: e.into(),
        })?;
        let kept: Vec<String> = previous
            .lines()
            .skip(1)
            .take(state.epochs_completed)
            .map(str::to_string)
            .collect();
        if kept.len() != state.epochs_completed {
            return Err(CliError::Config("training log is shorter than the saved state".into()));
        }
        (state, kept)
    } else {
        (fresh, Vec::new())
    };
    let resumed_from = state.epochs_completed;

    ensure_parent(&state_path)?;
    ensure_parent(&log_path)?;
    let every = c.training.checkpoint_every;
    let write_log = |lines: &[String]| -> sda_core::Result<()> {
        let mut text = String::from(LOG_HEADER);
        text.push('\n');
        for l in lines {
            text.push_str(l);
            text.push('\n');
        }
        fs::write(&log_path, text)?;
        Ok(())
    };
    let outcome = train_from(&store, state, &tc, |record, params, optimizer| {
        log.push(record.csv_line());
        let done = record.epoch + 1;
        if done % every == 0 && done < tc.epochs {
            write_log(&log)?;
            io::write_train_state(
                &state_path,
                &TrainState {
                    params: params.clone(),
                    optimizer: optimizer.clone(),
                    epochs_completed: done,
                },
            )?;
        }
        Ok(())
    })?;
    write_log(&log).map_err(CliError::file(&log_path))?;
    let final_state = TrainState {
        params: outcome.params.clone(),
        optimizer: outcome.optimizer.clone(),
        epochs_completed: tc.epochs,
    };
    io::write_train_state(&state_path, &final_state).map_err(CliError::file(&state_path))?;
    let out = exp.path(&c.training.checkpoint);
    ensure_parent(&out)?;
    io::write_checkpoint(&out, &outcome.params).map_err(CliError::file(&out))?;
    let last = outcome.log.last();
    exp.write_meta(
        "train",
        &out,
        json!({
            "network": net,
            "epochs_completed": tc.epochs,
            "resumed_from_epoch": resumed_from,
            "optimizer_steps": outcome.optimizer.step,
            "initial_valid_loss": outcome.initial_valid_loss,
            "final_train_loss": last.map(|r| r.train_loss),
            "final_valid_loss": last.map(|r| r.valid_loss),
        }),
    )?;
    exp.write_timing(&out, started)
}

pub fn observe(exp: &Experiment) -> Result<()> {
    let c = &exp.config;
    let store = read_store(&exp.path(&c.dataset.path))?;
    let len = c.observation.length;
    if len > store.len {
        return Err(CliError::Config(format!(
            "observation.length = {len} exceeds the stored trajectory length {}",
            store.len
        )));
    }
    let eval = store.split_range(Split::Eval);
    if c.observation.trajectory >= eval.len() {
        return Err(CliError::Config(format!(
            "observation.trajectory = {} but the evaluation split holds {} trajectories",
            c.observation.trajectory,
            eval.len()
        )));
    }
    let j = eval.start + c.observation.trajectory;
    let truth = store.trajectory(j)[..len * store.dim].to_vec();
    let obs = ObservationProcess::simulate(
        c.observation.operator.clone(),
        &truth,
        len,
        store.dim,
        c.observation.noise_std,
        derive_seed(c.seed, tags::OBSERVATION),
    )?;
    let out = exp.path(&c.observation.path);
    ensure_parent(&out)?;
    io::write_observation(&out, &obs).map_err(CliError::file(&out))?;
    let truth_path = exp.path(&c.observation.truth);
    write_store(
        &truth_path,
        &ensemble_store(len, store.dim, truth, store.standardization.clone())?,
    )?;
    exp.write_meta(
        "observe",
        &out,
        json!({ "source_trajectory": j, "observed_values": obs.m(), "provenance": Provenance::Data }),
    )
}

/// Samples with a non-finite entry are kept in the output so the run can be
/// inspected, but flagged on stderr and counted in the metadata.
fn count_diverged(x: &[f64], size: usize, out: &Path) -> usize {
    let n = x.chunks(size).filter(|s| s.iter().any(|v| !v.is_finite())).count();
    if n > 0 {
        eprintln!("sda: warning: {n} samples in {} diverged", out.display());
    }
    n
}

pub fn sample_prior(exp: &Experiment) -> Result<()> {
    let started = Instant::now();
    let c = &exp.config;
    let standardization = dataset_standardization(exp)?;
    let dim = standardization.dim();
    let prior = ComposedScore::new(NetworkScore::new(load_network(exp, dim)?), c.observation.length)?;
    let cfg = c.sampler_config(tags::PRIOR_SAMPLING);
    let x = sample(&prior, &cfg, c.sampler.samples, prior.trajectory_size())?;
    let out = exp.path(&c.sampler.prior_output);
    let diverged = count_diverged(&x, prior.trajectory_size(), &out);
    write_store(&out, &ensemble_store(c.observation.length, dim, x, standardization)?)?;
    exp.write_meta(
        "sample",
        &out,
        json!({ "provenance": Provenance::Prior, "sampler": cfg, "diverged_samples": diverged }),
    )?;
    exp.write_timing(&out, started)
}

pub fn assimilate(exp: &Experiment) -> Result<()> {
    let started = Instant::now();
    let c = &exp.config;
    let obs = read_observation(&exp.path(&c.observation.path))?;
    let standardization = dataset_standardization(exp)?;
    if obs.dim != standardization.dim() {
        return Err(CliError::Config("observation and dataset state dimensions differ".into()));
    }
    let prior = ComposedScore::new(NetworkScore::new(load_network(exp, obs.dim)?), obs.len)?;
    let (len, dim) = (obs.len, obs.dim);
    let posterior = PosteriorScore {
        prior,
        guidance: Guidance::new(obs, c.guidance.likelihood()),
    };
    let cfg = c.sampler_config(tags::POSTERIOR_SAMPLING);
    let x = sample(&posterior, &cfg, c.sampler.samples, len * dim)?;
    let out = exp.path(&c.sampler.output);
    let diverged = count_diverged(&x, len * dim, &out);
    write_store(&out, &ensemble_store(len, dim, x, standardization)?)?;
    exp.write_meta(
        "assimilate",
        &out,
        json!({
            "provenance": Provenance::Sda,
            "sampler": cfg,
            "guidance": posterior.guidance.variant,
            "diverged_samples": diverged,
        }),
    )?;
    exp.write_timing(&out, started)
}

pub fn bpf(exp: &Experiment) -> Result<()> {
    let started = Instant::now();
    let c = &exp.config;
    let obs = read_observation(&exp.path(&c.observation.path))?;
    let standardization = dataset_standardization(exp)?;
    let model = LorenzSsm {
        model: LorenzModel::new(c.system)?,
        burn_in: c.bpf.burn_in,
    };
    let likelihood = StepLikelihood::new(&obs, Some(&standardization))?;
    let seed = derive_seed(c.seed, tags::PARTICLE_FILTER);
    let result = bpf_sample(&model, &likelihood, c.bpf.particles, c.bpf.draws, seed)?;
    let mut data = result.trajectories;
    standardization.to_standard(&mut data);
    let out = exp.path(&c.bpf.output);
    write_store(&out, &ensemble_store(result.len, result.dim, data, standardization)?)?;
    let min_ess = result.ess.iter().copied().fold(f64::INFINITY, f64::min);
    exp.write_meta(
        "bpf",
        &out,
        json!({
            "provenance": Provenance::Bpf,
            "particles": c.bpf.particles,
            "log_evidence": result.log_evidence,
            "min_ess": min_ess,
        }),
    )?;
    exp.write_timing(&out, started)
}

fn provenance_of(path: &Path) -> Provenance {
    fs::read_to_string(sidecar(path, "meta.json"))
        .ok()
        .and_then(|t| serde_json::from_str::<Value>(&t).ok())
        .and_then(|v| serde_json::from_value(v.get("provenance")?.clone()).ok())
        .unwrap_or(Provenance::Data)
}

pub fn evaluate(exp: &Experiment, files: &[PathBuf]) -> Result<()> {
    let c = &exp.config;
    let obs = read_observation(&exp.path(&c.observation.path))?;
    let mut stores = Vec::with_capacity(files.len());
    for f in files {
        stores.push(read_store(f)?);
    }
    let first = &stores[0];
    for (f, s) in files.iter().zip(&stores) {
        if s.len != first.len || s.dim != first.dim {
            return Err(CliError::File {
                path: f.clone(),
                source: sda_core::Error::ShapeMismatch {
                    expected: first.trajectory_size(),
                    got: s.trajectory_size(),
                },
            });
        }
        if s.standardization != first.standardization {
            return Err(CliError::Config(format!(
                "{} uses different coordinates from {}",
                f.display(),
                files[0].display()
            )));
        }
    }
    let model = LorenzSsm {
        model: LorenzModel::new(c.system)?,
        burn_in: c.bpf.burn_in,
    };
    let ensembles: Vec<PosteriorEnsemble> = stores
        .iter()
        .zip(files)
        .map(|(s, f)| PosteriorEnsemble::new(s.len, s.dim, s.data.clone(), provenance_of(f)))
        .collect::<sda_core::Result<_>>()?;

    let mut report = StatsReport::default();
    for (i, e) in ensembles.iter().enumerate() {
        report.push(format!("e{i}.n"), e.n() as f64);
        report.push(
            format!("e{i}.log_prior"),
            expected_log_prior(e, &model, Some(&first.standardization))?,
        );
        report.push(format!("e{i}.log_likelihood"), expected_log_likelihood(e, &obs)?);
    }
    // the same subsampling seed for every ensemble keeps W₁(e, e) at zero
    let seed = derive_seed(c.seed, tags::EVALUATION);
    let pick = |e: &PosteriorEnsemble, n: usize| -> sda_core::Result<PosteriorEnsemble> {
        if e.n() == n {
            Ok(e.clone())
        } else {
            e.subsample(n, seed)
        }
    };
    for i in 0..ensembles.len() {
        for j in i + 1..ensembles.len() {
            let n = c.evaluation.w1_samples.min(ensembles[i].n()).min(ensembles[j].n());
            let w = wasserstein1_capped(&pick(&ensembles[i], n)?, &pick(&ensembles[j], n)?, DEFAULT_W1_CAP)?;
            report.push(format!("w1.e{i}.e{j}"), w);
        }
    }
    let names: Vec<Value> = files
        .iter()
        .zip(&ensembles)
        .enumerate()
        .map(|(i, (f, e))| json!({ "id": format!("e{i}"), "file": f.display().to_string(), "provenance": e.provenance }))
        .collect();
    report.metadata.insert("ensembles".into(), Value::Array(names));
    report.metadata.insert("coordinates".into(), json!("standardized"));
    report.metadata.insert("config_sha256".into(), json!(exp.hash()));
    report.metadata.insert("seed".into(), json!(c.seed));
    report.metadata.insert("sda_version".into(), json!(env!("CARGO_PKG_VERSION")));

    let base = exp.path(&c.evaluation.report);
    write_text(&base.with_extension("csv"), &report.to_csv())?;
    let json_text = serde_json::to_string_pretty(&report.to_json()).expect("report serializes") + "\n";
    write_text(&base.with_extension("json"), &json_text)
}
