//! Experiment configuration and scenario sampling.
//!
//! A [`ScenarioConfig`] is a flat, human-editable JSON document holding
//! every experiment constant. Keys carry their unit as a suffix; dB and dBm
//! values are converted to SI exactly once, at this boundary.
//! [`sample_scenario`] draws the device placements and profiles the rest of
//! the pipeline consumes.

use crate::channel::{self, ChannelError, DeviceProfile, NetworkConfig};
use crate::fitting::ZSearch;
use crate::stream_rng;
use crate::trainer::Schedule;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error(transparent)]
    Channel(#[from] ChannelError),
}

// Placement sampling has its own stream so changing, say, the probe plan
// never reshuffles the devices.
const STREAM_SCENARIO: u64 = 0x5ce0;

/// Radial placement of one device (the propagation model only depends on
/// distance) together with its shadow-fading draw.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Placement {
    pub distance_m: f64,
    pub shadowing_db: f64,
}

/// Every constant of one experiment. Defaults reproduce the small-model
/// benchmark setup: 6 devices on a 100-500 m annulus, 10 kHz uplink, 1 dBm
/// transmitters, a d = 1024 logistic model on 48k synthetic samples, probe
/// levels (4, 6), and a 0.012 target gap.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub seed: u64,
    /// Number of edge devices (K).
    pub devices: usize,
    /// Model dimension (d).
    pub model_dim: usize,
    pub total_bandwidth_hz: f64,
    pub noise_psd_dbm_per_hz: f64,
    pub cell_radius_m: f64,
    pub exclusion_radius_m: f64,
    pub shadowing_std_db: f64,
    pub tx_power_dbm: f64,
    pub cpu_hz_min: f64,
    pub cpu_hz_max: f64,
    pub cycles_per_batch: f64,
    pub train_samples: usize,
    pub val_samples: usize,
    /// Sparsity scale applied to small per-dimension magnitudes.
    pub delta1: f64,
    /// Fraction of dimensions eligible for the sparsity scale.
    pub delta2: f64,
    /// Ridge strength.
    pub lambda: f64,
    /// Minibatch size per device per round.
    pub minibatch: usize,
    /// Learning rate eta_n = lr_scale / (n + lr_shift).
    pub lr_scale: f64,
    pub lr_shift: f64,
    /// The two probe quantization levels the fit runs on.
    pub probe_q1: u32,
    pub probe_q2: u32,
    /// Rounds per probe run (N-tilde).
    pub pretrain_rounds: usize,
    /// Probe repetitions averaged before fitting.
    pub fit_seeds: usize,
    /// Target optimality gap.
    pub epsilon: f64,
    /// Candidate count for the one-dimensional Z search.
    pub z_grid_points: usize,
    /// Quantization levels simulated in the validation sweep.
    pub sweep_qs: Vec<u32>,
    /// Per-sweep-point cap on simulated rounds.
    pub max_sim_rounds: usize,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            seed: 1,
            devices: 6,
            model_dim: 1024,
            total_bandwidth_hz: 1.0e4,
            noise_psd_dbm_per_hz: -174.0,
            cell_radius_m: 500.0,
            exclusion_radius_m: 100.0,
            shadowing_std_db: 8.0,
            tx_power_dbm: 1.0,
            cpu_hz_min: 1.0e8,
            cpu_hz_max: 1.0e9,
            cycles_per_batch: 1.0e8,
            train_samples: 48_000,
            val_samples: 12_000,
            delta1: 0.9,
            delta2: 0.25,
            lambda: 1e-6,
            minibatch: 64,
            lr_scale: 5.0,
            lr_shift: 10.0,
            probe_q1: 4,
            probe_q2: 6,
            pretrain_rounds: 100,
            fit_seeds: 5,
            epsilon: 0.012,
            z_grid_points: 2000,
            sweep_qs: vec![2, 3, 4, 6, 8, 12, 16, 24, 32],
            max_sim_rounds: 800,
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<(), ScenarioError> {
        let positive = [
            ("total_bandwidth_hz", self.total_bandwidth_hz),
            ("cpu_hz_min", self.cpu_hz_min),
            ("cpu_hz_max", self.cpu_hz_max),
            ("cycles_per_batch", self.cycles_per_batch),
            ("lr_scale", self.lr_scale),
            ("lr_shift", self.lr_shift),
            ("epsilon", self.epsilon),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(ScenarioError::Invalid(format!("{name} must be positive, got {v}")));
            }
        }
        if self.lambda < 0.0 {
            return Err(ScenarioError::Invalid(format!(
                "lambda must be nonnegative, got {}",
                self.lambda
            )));
        }
        if self.devices == 0 {
            return Err(ScenarioError::Invalid("need at least one device".into()));
        }
        if self.model_dim == 0 {
            return Err(ScenarioError::Invalid("model dimension must be positive".into()));
        }
        if self.cpu_hz_min > self.cpu_hz_max {
            return Err(ScenarioError::Invalid(format!(
                "cpu_hz_min {} exceeds cpu_hz_max {}",
                self.cpu_hz_min, self.cpu_hz_max
            )));
        }
        if !(self.exclusion_radius_m > 0.0 && self.exclusion_radius_m < self.cell_radius_m) {
            return Err(ScenarioError::Invalid(format!(
                "need 0 < exclusion radius < cell radius, got {} and {}",
                self.exclusion_radius_m, self.cell_radius_m
            )));
        }
        if !(0.0..=1.0).contains(&self.delta1) || !(0.0..=1.0).contains(&self.delta2) {
            return Err(ScenarioError::Invalid(format!(
                "delta1 and delta2 must lie in [0, 1], got {} and {}",
                self.delta1, self.delta2
            )));
        }
        if self.probe_q1 == self.probe_q2 {
            return Err(ScenarioError::Invalid(format!(
                "probe levels must differ, got {} twice",
                self.probe_q1
            )));
        }
        if self.probe_q1 < 2 || self.probe_q2 < 2 {
            return Err(ScenarioError::Invalid("probe levels must be at least 2".into()));
        }
        if self.pretrain_rounds < 3 {
            return Err(ScenarioError::Invalid("need at least 3 pre-training rounds".into()));
        }
        if self.fit_seeds == 0 {
            return Err(ScenarioError::Invalid("need at least one probe repetition".into()));
        }
        if self.minibatch == 0 {
            return Err(ScenarioError::Invalid("minibatch must be at least 1".into()));
        }
        if self.train_samples / self.devices == 0 {
            return Err(ScenarioError::Invalid("not enough training samples per device".into()));
        }
        if self.sweep_qs.iter().any(|&q| q < 2) {
            return Err(ScenarioError::Invalid("sweep levels must be at least 2".into()));
        }
        if self.max_sim_rounds == 0 {
            return Err(ScenarioError::Invalid("max_sim_rounds must be at least 1".into()));
        }
        Ok(())
    }

    /// Network parameters in SI units.
    pub fn network(&self) -> NetworkConfig {
        NetworkConfig {
            total_bandwidth_hz: self.total_bandwidth_hz,
            noise_psd_w_per_hz: channel::dbm_to_watts(self.noise_psd_dbm_per_hz),
            cell_radius_m: self.cell_radius_m,
            exclusion_radius_m: self.exclusion_radius_m,
            shadowing_std_db: self.shadowing_std_db,
        }
    }

    pub fn schedule(&self) -> Schedule {
        Schedule::Decaying { scale: self.lr_scale, shift: self.lr_shift }
    }

    pub fn z_search(&self) -> ZSearch {
        ZSearch::Auto { points: self.z_grid_points }
    }
}

/// Draws the device fleet: positions uniform over the annulus between the
/// exclusion and cell radii, Gaussian shadow fading in dB, and CPU
/// frequencies uniform over the configured range.
pub fn sample_scenario(
    cfg: &ScenarioConfig,
) -> Result<(Vec<DeviceProfile>, Vec<Placement>), ScenarioError> {
    cfg.validate()?;
    let mut rng = stream_rng(cfg.seed, STREAM_SCENARIO);
    let shadow = Normal::new(0.0, cfg.shadowing_std_db)
        .map_err(|e| ScenarioError::Invalid(e.to_string()))?;
    let tx_watts = channel::dbm_to_watts(cfg.tx_power_dbm);

    let r_sq = cfg.cell_radius_m * cfg.cell_radius_m;
    let rh_sq = cfg.exclusion_radius_m * cfg.exclusion_radius_m;

    let mut profiles = Vec::with_capacity(cfg.devices);
    let mut placements = Vec::with_capacity(cfg.devices);
    for _ in 0..cfg.devices {
        // Uniform over the annulus area: r = sqrt(rh^2 + u (r^2 - rh^2)).
        let u: f64 = rng.random();
        let distance_m = (rh_sq + u * (r_sq - rh_sq)).sqrt();
        let shadowing_db = shadow.sample(&mut rng);
        let cpu_hz = cfg.cpu_hz_min + rng.random::<f64>() * (cfg.cpu_hz_max - cfg.cpu_hz_min);

        let gain = channel::large_scale_gain(distance_m, shadowing_db)?;
        profiles.push(DeviceProfile {
            cpu_hz,
            cycles_per_batch: cfg.cycles_per_batch,
            tx_power_watts: tx_watts,
            large_scale_gain: gain,
        });
        placements.push(Placement { distance_m, shadowing_db });
    }
    Ok((profiles, placements))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid_and_round_trips() {
        let cfg = ScenarioConfig::default();
        cfg.validate().unwrap();
        let json = serde_json::to_string_pretty(&cfg).unwrap();
        let back: ScenarioConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn partial_config_fills_defaults() {
        let cfg: ScenarioConfig = serde_json::from_str(r#"{"seed": 9, "devices": 3}"#).unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.devices, 3);
        assert_eq!(cfg.model_dim, ScenarioConfig::default().model_dim);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let r: Result<ScenarioConfig, _> = serde_json::from_str(r#"{"not_a_key": 1}"#);
        assert!(r.is_err());
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = ScenarioConfig::default();
        cfg.probe_q2 = cfg.probe_q1;
        assert!(cfg.validate().is_err());

        let mut cfg = ScenarioConfig::default();
        cfg.exclusion_radius_m = 600.0;
        assert!(cfg.validate().is_err());

        let mut cfg = ScenarioConfig::default();
        cfg.delta2 = 1.5;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn network_converts_units_once() {
        let cfg = ScenarioConfig::default();
        let net = cfg.network();
        assert!((net.noise_psd_w_per_hz - 3.981_071_705_534_97e-21).abs() / net.noise_psd_w_per_hz < 1e-10);
        assert_eq!(net.total_bandwidth_hz, 1e4);
    }

    #[test]
    fn placements_respect_the_annulus() {
        let mut cfg = ScenarioConfig::default();
        cfg.devices = 200;
        let (profiles, placements) = sample_scenario(&cfg).unwrap();
        assert_eq!(profiles.len(), 200);
        for p in &placements {
            assert!(p.distance_m >= 100.0 && p.distance_m <= 500.0, "{}", p.distance_m);
        }
        for p in &profiles {
            assert!(p.cpu_hz >= 1e8 && p.cpu_hz <= 1e9);
            p.validate().unwrap();
        }
    }

    #[test]
    fn placement_is_area_uniform() {
        // Mean squared distance of a uniform draw on the annulus is
        // (r^2 + rh^2) / 2; check over 10^4 draws within 2%.
        let mut cfg = ScenarioConfig::default();
        cfg.devices = 10_000;
        cfg.seed = 3;
        let (_, placements) = sample_scenario(&cfg).unwrap();
        let mean_sq: f64 =
            placements.iter().map(|p| p.distance_m * p.distance_m).sum::<f64>() / 10_000.0;
        let expected = (500.0f64.powi(2) + 100.0f64.powi(2)) / 2.0;
        assert!(
            (mean_sq - expected).abs() / expected < 0.02,
            "mean squared distance {mean_sq}, expected {expected}"
        );
    }

    #[test]
    fn sampling_is_seed_deterministic() {
        let cfg = ScenarioConfig::default();
        let a = sample_scenario(&cfg).unwrap();
        let b = sample_scenario(&cfg).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);

        let mut cfg2 = cfg.clone();
        cfg2.seed = 2;
        let c = sample_scenario(&cfg2).unwrap();
        assert_ne!(a.1, c.1);
    }
}
