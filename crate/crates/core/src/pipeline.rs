//! End-to-end experiment orchestration.
//!
//! One run: generate the synthetic corpus and shard it across devices,
//! sample the device fleet, probe-train at the two probe quantization
//! levels, fit the gap curve, jointly optimize the quantization level and
//! bandwidth split, then validate the prediction by simulating training
//! across a grid of levels under optimal bandwidth. Every artifact is
//! persisted as it is produced, so a failure partway leaves the completed
//! stages on disk.
//!
//! Output files are plain UTF-8 (flat JSON documents and comma-delimited
//! CSVs with header rows), and every byte is a pure function of the
//! configuration, so re-running a seed reproduces the directory exactly.

use crate::channel::DeviceProfile;
use crate::fitting::{fit_gap_model, FitError, GapFit};
use crate::optimizer::{
    allocate_bandwidth, brute_force_sweep, equal_split_deadline, joint_optimize, AllocationPlan,
    OptError, SweepPoint,
};
use crate::quantizer::payload_bits;
use crate::scenario::{sample_scenario, Placement, ScenarioConfig, ScenarioError};
use crate::trainer::{
    generate_synthetic, run_feel, run_feel_until, shard_dataset, Dataset, LossTrace, TrainError,
};
use crate::{derive_seed, stream_rng};
use ndarray::s;
use std::path::{Path, PathBuf};
use std::time::Instant;
use thiserror::Error;

const STREAM_DATA: u64 = 0xda7a;
const STREAM_SHARD: u64 = 0x54a2;
const TAG_PROBE: u64 = 0x1000_0000;
const TAG_SWEEP: u64 = 0x2000_0000;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Fit(#[from] FitError),
    #[error(transparent)]
    Opt(#[from] OptError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl PipelineError {
    /// Process exit code for this failure class: 2 config, 3 infeasible,
    /// 4 fit failure, 5 non-convergence (including diverged training),
    /// 1 anything else.
    pub fn exit_code(&self) -> u8 {
        match self {
            PipelineError::Config(_) | PipelineError::Scenario(_) => 2,
            PipelineError::Opt(OptError::Infeasible(_)) => 3,
            PipelineError::Opt(OptError::Precondition(_)) => 3,
            PipelineError::Fit(_) => 4,
            PipelineError::Opt(OptError::NonConvergence { .. }) => 5,
            PipelineError::Train(TrainError::Diverged { .. }) => 5,
            _ => 1,
        }
    }
}

/// One row of the simulated validation sweep. `rounds` is the number of
/// rounds the simulation took to close the fitted gap, or `None` when the
/// cap was hit first (including the rare diverged run).
#[derive(Debug, Clone, PartialEq)]
pub struct SimPoint {
    pub q: u32,
    pub t_d_s: f64,
    pub rounds: Option<usize>,
    pub total_s: Option<f64>,
}

/// Simulated time-to-target at the chosen level under the optimal versus an
/// equal bandwidth split. Training rounds are bandwidth-independent, so the
/// two times share the round count and differ only in the deadline.
#[derive(Debug, Clone, PartialEq)]
pub struct BandwidthCompare {
    pub q: u32,
    pub rounds: Option<usize>,
    pub t_d_optimal_s: f64,
    pub t_d_equal_s: f64,
    pub time_optimal_s: Option<f64>,
    pub time_equal_s: Option<f64>,
}

/// Everything one run produced.
#[derive(Debug, Clone)]
pub struct RunArtifact {
    pub config: ScenarioConfig,
    pub profiles: Vec<DeviceProfile>,
    pub placements: Vec<Placement>,
    /// Individual probe runs, `fit_seeds` per probe level.
    pub probe_traces: Vec<LossTrace>,
    /// Across-seed mean trace per probe level; the fit consumes these.
    pub mean_traces: Vec<LossTrace>,
    pub fit: GapFit,
    pub plan: AllocationPlan,
    /// Predicted total time per integer level (optimal bandwidth each).
    pub predicted_sweep: Vec<SweepPoint>,
    /// Simulated time-to-target per level in `sweep_qs` (plus the chosen one).
    pub simulated_sweep: Vec<SimPoint>,
    pub bandwidth_compare: BandwidthCompare,
    /// In-memory run metadata; deliberately absent from the emitted files so
    /// re-runs stay byte-identical.
    pub wall_clock_s: f64,
}

/// Generates the corpus and shards the training split across the devices.
/// The validation split is drawn (so the corpus matches the configured
/// sample counts) but not used by training.
pub fn prepare_shards(cfg: &ScenarioConfig) -> Result<Vec<Dataset>, PipelineError> {
    cfg.validate()?;
    let total = cfg.train_samples + cfg.val_samples;
    let (corpus, _truth) = generate_synthetic(
        cfg.model_dim,
        total,
        cfg.delta1,
        cfg.delta2,
        &mut stream_rng(cfg.seed, STREAM_DATA),
    );
    let train = Dataset {
        features: corpus.features.slice(s![..cfg.train_samples, ..]).to_owned(),
        labels: corpus.labels.slice(s![..cfg.train_samples]).to_owned(),
    };
    drop(corpus);
    Ok(shard_dataset(&train, cfg.devices, &mut stream_rng(cfg.seed, STREAM_SHARD)))
}

/// Seed for probe repetition `rep` at probe slot `slot` (0 or 1).
pub fn probe_seed(cfg: &ScenarioConfig, slot: usize, rep: usize) -> u64 {
    derive_seed(cfg.seed, TAG_PROBE + ((slot as u64) << 32) + rep as u64)
}

/// Seed for the simulated sweep run at level `q`.
pub fn sweep_seed(cfg: &ScenarioConfig, q: u32) -> u64 {
    derive_seed(cfg.seed, TAG_SWEEP + u64::from(q))
}

/// Runs `fit_seeds` probe repetitions at each probe level. Returns all
/// individual traces and the per-level means.
pub fn probe_traces(
    cfg: &ScenarioConfig,
    shards: &[Dataset],
) -> Result<(Vec<LossTrace>, Vec<LossTrace>), PipelineError> {
    let schedule = cfg.schedule();
    let mut all = Vec::new();
    let mut means = Vec::new();
    for (slot, q) in [cfg.probe_q1, cfg.probe_q2].into_iter().enumerate() {
        let mut runs = Vec::with_capacity(cfg.fit_seeds);
        for rep in 0..cfg.fit_seeds {
            runs.push(run_feel(
                shards,
                q,
                cfg.pretrain_rounds,
                &schedule,
                cfg.minibatch,
                cfg.lambda,
                probe_seed(cfg, slot, rep),
            )?);
        }
        means.push(LossTrace::mean_of(&runs));
        all.extend(runs);
    }
    Ok((all, means))
}

/// Simulates training at each level in `qs` under its optimal bandwidth
/// split, stopping once the fitted gap target is met. A run that diverges
/// is recorded as not-reached rather than failing the sweep.
pub fn simulated_sweep(
    cfg: &ScenarioConfig,
    shards: &[Dataset],
    profiles: &[DeviceProfile],
    fit: &GapFit,
    qs: &[u32],
) -> Result<Vec<SimPoint>, PipelineError> {
    let net = cfg.network();
    let schedule = cfg.schedule();
    let tol_hz = 1e-6 * net.total_bandwidth_hz;
    let mut points = Vec::with_capacity(qs.len());
    for &q in qs {
        let s = payload_bits(cfg.model_dim, q);
        let (_, deadline) = allocate_bandwidth(profiles, &net, s, tol_hz)?;
        let outcome = run_feel_until(
            shards,
            q,
            cfg.max_sim_rounds,
            &schedule,
            cfg.minibatch,
            cfg.lambda,
            sweep_seed(cfg, q),
            fit.z,
            cfg.epsilon,
        );
        let rounds = match outcome {
            Ok(trace) => {
                let crossed =
                    trace.losses.last().is_some_and(|&l| l - fit.z <= cfg.epsilon);
                crossed.then(|| trace.len())
            }
            Err(TrainError::Diverged { .. }) => None,
            Err(e) => return Err(e.into()),
        };
        points.push(SimPoint {
            q,
            t_d_s: deadline,
            rounds,
            total_s: rounds.map(|r| r as f64 * deadline),
        });
    }
    Ok(points)
}

/// The full experiment. When `out_dir` is given, artifacts are written as
/// each stage completes (config, probe traces, fit, plan, sweeps, summary).
pub fn run_pipeline(
    cfg: &ScenarioConfig,
    out_dir: Option<&Path>,
) -> Result<RunArtifact, PipelineError> {
    let started = Instant::now();
    cfg.validate()?;
    if let Some(dir) = out_dir {
        emit_config(dir, cfg)?;
    }

    let shards = prepare_shards(cfg)?;
    let (profiles, placements) = sample_scenario(cfg)?;

    let (all_traces, means) = probe_traces(cfg, &shards)?;
    if let Some(dir) = out_dir {
        for t in &all_traces {
            emit_trace(dir, t)?;
        }
        for t in &means {
            emit_mean_trace(dir, t)?;
        }
    }

    let fit = fit_gap_model(&means[0], &means[1], cfg.model_dim, cfg.devices, &cfg.z_search())?;
    if let Some(dir) = out_dir {
        emit_fit(dir, &fit)?;
    }

    let net = cfg.network();
    let plan = joint_optimize(&profiles, &net, &fit, cfg.epsilon, 1e-6)?;
    if let Some(dir) = out_dir {
        emit_plan(dir, &plan)?;
    }

    let predicted = brute_force_sweep(&profiles, &net, &fit, cfg.epsilon, 2, 64)?;

    let mut qs = cfg.sweep_qs.clone();
    if !qs.contains(&plan.q) {
        qs.push(plan.q);
    }
    qs.sort_unstable();
    qs.dedup();
    let simulated = simulated_sweep(cfg, &shards, &profiles, &fit, &qs)?;

    let chosen = simulated
        .iter()
        .find(|p| p.q == plan.q)
        .expect("chosen level is in the sweep");
    let t_d_equal = equal_split_deadline(&profiles, &net, payload_bits(cfg.model_dim, plan.q))?;
    let compare = BandwidthCompare {
        q: plan.q,
        rounds: chosen.rounds,
        t_d_optimal_s: chosen.t_d_s,
        t_d_equal_s: t_d_equal,
        time_optimal_s: chosen.rounds.map(|r| r as f64 * chosen.t_d_s),
        time_equal_s: chosen.rounds.map(|r| r as f64 * t_d_equal),
    };

    let artifact = RunArtifact {
        config: cfg.clone(),
        profiles,
        placements,
        probe_traces: all_traces,
        mean_traces: means,
        fit,
        plan,
        predicted_sweep: predicted,
        simulated_sweep: simulated,
        bandwidth_compare: compare,
        wall_clock_s: started.elapsed().as_secs_f64(),
    };
    if let Some(dir) = out_dir {
        emit_predicted_sweep(dir, &artifact.predicted_sweep)?;
        emit_simulated_sweep(dir, &artifact.simulated_sweep)?;
        emit_summary(dir, &artifact)?;
    }
    Ok(artifact)
}

/// Probe training and fitting only (the `fit` stage). Emits config, traces,
/// and the fit document when `out_dir` is given.
pub fn run_fit_stage(
    cfg: &ScenarioConfig,
    out_dir: Option<&Path>,
) -> Result<(Vec<LossTrace>, Vec<LossTrace>, GapFit), PipelineError> {
    cfg.validate()?;
    if let Some(dir) = out_dir {
        emit_config(dir, cfg)?;
    }
    let shards = prepare_shards(cfg)?;
    let (all, means) = probe_traces(cfg, &shards)?;
    if let Some(dir) = out_dir {
        for t in &all {
            emit_trace(dir, t)?;
        }
        for t in &means {
            emit_mean_trace(dir, t)?;
        }
    }
    let fit = fit_gap_model(&means[0], &means[1], cfg.model_dim, cfg.devices, &cfg.z_search())?;
    if let Some(dir) = out_dir {
        emit_fit(dir, &fit)?;
    }
    Ok((all, means, fit))
}

/// Scenario sampling plus joint optimization against an existing fit.
pub fn run_optimize_stage(
    cfg: &ScenarioConfig,
    fit: &GapFit,
    out_dir: Option<&Path>,
) -> Result<AllocationPlan, PipelineError> {
    cfg.validate()?;
    let (profiles, _) = sample_scenario(cfg)?;
    let plan = joint_optimize(&profiles, &cfg.network(), fit, cfg.epsilon, 1e-6)?;
    if let Some(dir) = out_dir {
        emit_config(dir, cfg)?;
        emit_plan(dir, &plan)?;
    }
    Ok(plan)
}

/// Integer brute-force sweep against an existing fit (the `oracle` stage).
pub fn run_oracle_stage(
    cfg: &ScenarioConfig,
    fit: &GapFit,
    out_dir: Option<&Path>,
) -> Result<Vec<SweepPoint>, PipelineError> {
    cfg.validate()?;
    let (profiles, _) = sample_scenario(cfg)?;
    let points = brute_force_sweep(&profiles, &cfg.network(), fit, cfg.epsilon, 2, 64)?;
    if let Some(dir) = out_dir {
        emit_config(dir, cfg)?;
        emit_predicted_sweep(dir, &points)?;
    }
    Ok(points)
}

/// Simulated validation sweep against an existing fit (the `sweep` stage).
pub fn run_sweep_stage(
    cfg: &ScenarioConfig,
    fit: &GapFit,
    out_dir: Option<&Path>,
) -> Result<Vec<SimPoint>, PipelineError> {
    cfg.validate()?;
    let shards = prepare_shards(cfg)?;
    let (profiles, _) = sample_scenario(cfg)?;
    let points = simulated_sweep(cfg, &shards, &profiles, fit, &cfg.sweep_qs)?;
    if let Some(dir) = out_dir {
        emit_config(dir, cfg)?;
        emit_simulated_sweep(dir, &points)?;
    }
    Ok(points)
}

// ---------------------------------------------------------------------------
// Artifact emission
// ---------------------------------------------------------------------------

fn write_file(dir: &Path, name: &str, contents: &str) -> Result<PathBuf, PipelineError> {
    std::fs::create_dir_all(dir)
        .map_err(|source| PipelineError::Io { path: dir.to_path_buf(), source })?;
    let path = dir.join(name);
    std::fs::write(&path, contents)
        .map_err(|source| PipelineError::Io { path: path.clone(), source })?;
    Ok(path)
}

pub fn emit_config(dir: &Path, cfg: &ScenarioConfig) -> Result<PathBuf, PipelineError> {
    let json = serde_json::to_string_pretty(cfg).expect("config serializes");
    write_file(dir, "config.json", &(json + "\n"))
}

pub fn emit_trace(dir: &Path, trace: &LossTrace) -> Result<PathBuf, PipelineError> {
    write_file(dir, &trace.filename(), &trace.to_csv())
}

pub fn emit_mean_trace(dir: &Path, trace: &LossTrace) -> Result<PathBuf, PipelineError> {
    write_file(dir, &format!("trace_q{}_mean.csv", trace.q), &trace.to_csv())
}

pub fn emit_fit(dir: &Path, fit: &GapFit) -> Result<PathBuf, PipelineError> {
    let json = serde_json::to_string_pretty(fit).expect("fit serializes");
    write_file(dir, "fit.json", &(json + "\n"))
}

pub fn emit_plan(dir: &Path, plan: &AllocationPlan) -> Result<PathBuf, PipelineError> {
    let json = serde_json::to_string_pretty(plan).expect("plan serializes");
    write_file(dir, "plan.json", &(json + "\n"))
}

pub fn emit_predicted_sweep(dir: &Path, points: &[SweepPoint]) -> Result<PathBuf, PipelineError> {
    let mut csv = String::from("q,T_d_s,N_eps,T_total_s\n");
    for p in points {
        csv.push_str(&format!("{},{},{},{}\n", p.q, p.t_d_s, p.n_eps, p.t_total_s));
    }
    write_file(dir, "oracle_sweep.csv", &csv)
}

pub fn emit_simulated_sweep(dir: &Path, points: &[SimPoint]) -> Result<PathBuf, PipelineError> {
    let mut csv = String::from("q,T_d_s,rounds,T_total_s\n");
    for p in points {
        let rounds = p.rounds.map_or("NA".to_string(), |r| r.to_string());
        let total = p.total_s.map_or("NA".to_string(), |t| t.to_string());
        csv.push_str(&format!("{},{},{},{}\n", p.q, p.t_d_s, rounds, total));
    }
    write_file(dir, "sim_sweep.csv", &csv)
}

pub fn emit_summary(dir: &Path, artifact: &RunArtifact) -> Result<PathBuf, PipelineError> {
    let mut s = String::new();
    let plan = &artifact.plan;
    let fit = &artifact.fit;
    s.push_str(&format!("seed: {}\n", artifact.config.seed));
    s.push_str(&format!("devices: {}\n", artifact.config.devices));
    s.push_str(&format!("model dimension: {}\n", artifact.config.model_dim));
    s.push_str(&format!("target gap epsilon: {}\n", artifact.config.epsilon));
    s.push('\n');
    s.push_str(&format!(
        "fit: A={} B={} C={} D={} Z={} (probes q1={} q2={}, {} rounds)\n",
        fit.a, fit.b, fit.c, fit.d, fit.z, fit.q1, fit.q2, fit.n_tilde
    ));
    if let Ok(der) = fit.derived(artifact.config.epsilon) {
        s.push_str(&format!("derived: H1={} H2={}\n", der.h1, der.h2));
    }
    s.push('\n');
    s.push_str(&format!("chosen quantization level: {}\n", plan.q));
    s.push_str(&format!("per-round deadline T_d: {} s\n", plan.round_deadline_s));
    s.push_str(&format!("predicted rounds N_eps: {}\n", plan.predicted_rounds));
    s.push_str(&format!("predicted total time: {} s\n", plan.predicted_total_s));
    s.push('\n');
    s.push_str("device  cpu_hz  distance_m  shadowing_db  bandwidth_hz\n");
    for (i, ((p, pl), b)) in artifact
        .profiles
        .iter()
        .zip(&artifact.placements)
        .zip(&plan.bandwidths_hz)
        .enumerate()
    {
        s.push_str(&format!(
            "{}  {}  {}  {}  {}\n",
            i, p.cpu_hz, pl.distance_m, pl.shadowing_db, b
        ));
    }
    s.push('\n');
    let cmp = &artifact.bandwidth_compare;
    s.push_str(&format!(
        "bandwidth comparison at q={}: T_d optimal {} s vs equal {} s\n",
        cmp.q, cmp.t_d_optimal_s, cmp.t_d_equal_s
    ));
    match (cmp.time_optimal_s, cmp.time_equal_s) {
        (Some(a), Some(b)) => {
            s.push_str(&format!(
                "simulated time to target: optimal {} s vs equal {} s ({} rounds)\n",
                a,
                b,
                cmp.rounds.unwrap_or(0)
            ));
        }
        _ => s.push_str("simulated time to target: not reached within the round cap\n"),
    }
    write_file(dir, "summary.txt", &s)
}

/// Writes the complete artifact set for `artifact` into `dir`, returning the
/// paths written. Re-running on the same artifact reproduces every byte.
pub fn emit_report(dir: &Path, artifact: &RunArtifact) -> Result<Vec<PathBuf>, PipelineError> {
    let mut paths = Vec::new();
    paths.push(emit_config(dir, &artifact.config)?);
    for t in &artifact.probe_traces {
        paths.push(emit_trace(dir, t)?);
    }
    for t in &artifact.mean_traces {
        paths.push(emit_mean_trace(dir, t)?);
    }
    paths.push(emit_fit(dir, &artifact.fit)?);
    paths.push(emit_plan(dir, &artifact.plan)?);
    paths.push(emit_predicted_sweep(dir, &artifact.predicted_sweep)?);
    paths.push(emit_simulated_sweep(dir, &artifact.simulated_sweep)?);
    paths.push(emit_summary(dir, artifact)?);
    Ok(paths)
}

/// Loads a fit document previously written by [`emit_fit`].
pub fn load_fit(path: &Path) -> Result<GapFit, PipelineError> {
    let text = std::fs::read_to_string(path)
        .map_err(|source| PipelineError::Io { path: path.to_path_buf(), source })?;
    serde_json::from_str(&text).map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))
}

/// Loads a config document, or the defaults when `path` is `None`.
pub fn load_config(path: Option<&Path>) -> Result<ScenarioConfig, PipelineError> {
    match path {
        None => Ok(ScenarioConfig::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|source| PipelineError::Io { path: p.to_path_buf(), source })?;
            serde_json::from_str(&text)
                .map_err(|e| PipelineError::Config(format!("{}: {e}", p.display())))
        }
    }
}
