//! Wireless link model.
//!
//! Large-scale propagation (path loss plus log-normal shadowing), the
//! ergodic capacity of a fast-Rayleigh-fading uplink in closed form via the
//! exponential integral, its numerical inverse, and per-round latency
//! accounting (compute time plus upload time).
//!
//! All quantities are SI internally: Hz, W, W/Hz, seconds, bits. dB and dBm
//! are converted once at the configuration boundary.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ChannelError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("exponential integral argument must be negative, got {0}")]
    OutOfDomain(f64),
    #[error("bracket [{lo}, {hi}] does not straddle target rate {target}")]
    Bracket { lo: f64, hi: f64, target: f64 },
}

/// Per-device compute and radio parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DeviceProfile {
    /// CPU frequency in cycles per second.
    pub cpu_hz: f64,
    /// Processing cycles needed for one batch of samples.
    pub cycles_per_batch: f64,
    /// Transmit power in watts.
    pub tx_power_watts: f64,
    /// Large-scale channel power gain (linear, dimensionless).
    pub large_scale_gain: f64,
}

impl DeviceProfile {
    pub fn validate(&self) -> Result<(), ChannelError> {
        for (name, v) in [
            ("cpu_hz", self.cpu_hz),
            ("cycles_per_batch", self.cycles_per_batch),
            ("tx_power_watts", self.tx_power_watts),
            ("large_scale_gain", self.large_scale_gain),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(ChannelError::InvalidInput(format!(
                    "device profile field {name} must be strictly positive, got {v}"
                )));
            }
        }
        Ok(())
    }

    /// Inverse mean SNR density `theta = N0 / (p * phi)` in 1/Hz. The ergodic
    /// rate of this device on bandwidth `b` depends on the channel only
    /// through `b * theta`.
    pub fn theta(&self, noise_psd_w_per_hz: f64) -> f64 {
        noise_psd_w_per_hz / (self.tx_power_watts * self.large_scale_gain)
    }
}

/// Shared network parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NetworkConfig {
    /// Total uplink bandwidth B0 in Hz, split across devices.
    pub total_bandwidth_hz: f64,
    /// Noise power spectral density N0 in W/Hz.
    pub noise_psd_w_per_hz: f64,
    /// Cell radius in meters.
    pub cell_radius_m: f64,
    /// Radius of the central exclusion disk in meters.
    pub exclusion_radius_m: f64,
    /// Shadow-fading standard deviation in dB.
    pub shadowing_std_db: f64,
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<(), ChannelError> {
        if !(self.total_bandwidth_hz > 0.0) {
            return Err(ChannelError::InvalidInput(format!(
                "total bandwidth must be positive, got {}",
                self.total_bandwidth_hz
            )));
        }
        if !(self.noise_psd_w_per_hz > 0.0) {
            return Err(ChannelError::InvalidInput(format!(
                "noise PSD must be positive, got {}",
                self.noise_psd_w_per_hz
            )));
        }
        if !(self.exclusion_radius_m > 0.0 && self.exclusion_radius_m < self.cell_radius_m) {
            return Err(ChannelError::InvalidInput(format!(
                "need 0 < exclusion radius < cell radius, got {} and {}",
                self.exclusion_radius_m, self.cell_radius_m
            )));
        }
        if !(self.shadowing_std_db >= 0.0) {
            return Err(ChannelError::InvalidInput(format!(
                "shadowing std must be nonnegative, got {}",
                self.shadowing_std_db
            )));
        }
        Ok(())
    }
}

/// Per-round latency of one device.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LatencyBreakdown {
    pub compute_s: f64,
    pub comm_s: f64,
}

impl LatencyBreakdown {
    pub fn total_s(&self) -> f64 {
        self.compute_s + self.comm_s
    }
}

pub fn db_to_linear(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}

pub fn dbm_to_watts(dbm: f64) -> f64 {
    1e-3 * db_to_linear(dbm)
}

/// Linear large-scale power gain at `distance_m` meters with `shadowing_db`
/// dB of shadow fading: `10^(-(PL_dB + shadow_dB)/10)` with
/// `PL_dB = 128.1 + 37.6 log10(distance in km)`.
pub fn large_scale_gain(distance_m: f64, shadowing_db: f64) -> Result<f64, ChannelError> {
    if !(distance_m > 0.0) || !distance_m.is_finite() {
        return Err(ChannelError::InvalidInput(format!(
            "distance must be positive, got {distance_m}"
        )));
    }
    let dist_km = distance_m / 1000.0;
    let path_loss_db = 128.1 + 37.6 * dist_km.log10();
    Ok(db_to_linear(-(path_loss_db + shadowing_db)))
}

const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;

/// Exponential integral `Ei(x)` for strictly negative arguments.
///
/// Uses `Ei(x) = -E1(-x)`, with a power series on `|x| <= 1` and a
/// continued fraction beyond. Accurate to well past 10 significant digits
/// over the range the rate model touches.
pub fn exp_integral_ei(x: f64) -> Result<f64, ChannelError> {
    if !(x < 0.0) {
        return Err(ChannelError::OutOfDomain(x));
    }
    Ok(-e1(-x))
}

/// `E1(x)` for `x > 0`.
fn e1(x: f64) -> f64 {
    if x <= 1.0 {
        e1_series(x)
    } else {
        (-x).exp() * e1_cf_scaled(x)
    }
}

/// `e^x * E1(x)` for `x > 0`, computed without forming `e^x` when it would
/// overflow. This is the quantity the ergodic-rate closed form needs, since
/// `-e^(b*theta) * Ei(-b*theta) = e^x * E1(x)`.
pub fn exp_scaled_e1(x: f64) -> f64 {
    if x <= 1.0 {
        x.exp() * e1_series(x)
    } else {
        e1_cf_scaled(x)
    }
}

// E1(x) = -gamma - ln x + sum_{k>=1} (-1)^{k+1} x^k / (k * k!), for x <= 1.
fn e1_series(x: f64) -> f64 {
    let mut sum = -EULER_GAMMA - x.ln();
    let mut term = x; // k = 1 term
    let mut k = 1.0;
    loop {
        sum += term;
        let next = term * (-x * k) / ((k + 1.0) * (k + 1.0));
        k += 1.0;
        if next.abs() <= f64::EPSILON * sum.abs().max(f64::MIN_POSITIVE) || k > 200.0 {
            break;
        }
        term = next;
    }
    sum
}

// Continued fraction for e^x * E1(x), x > 1 (modified Lentz).
fn e1_cf_scaled(x: f64) -> f64 {
    const FPMIN: f64 = 1e-300;
    let mut b = x + 1.0;
    let mut c = 1.0 / FPMIN;
    let mut d = 1.0 / b;
    let mut h = d;
    for i in 1..200 {
        let a = -(i as f64) * (i as f64);
        b += 2.0;
        d = 1.0 / (a * d + b);
        c = b + a / c;
        let del = c * d;
        h *= del;
        if (del - 1.0).abs() < 1e-16 {
            break;
        }
    }
    h
}

/// Ergodic capacity in bits/s of a fast-Rayleigh-fading link on bandwidth
/// `b_hz` with inverse mean SNR density `theta` (1/Hz):
/// `R = -(b / ln 2) * e^(b*theta) * Ei(-b*theta)`.
pub fn ergodic_rate(b_hz: f64, theta: f64) -> Result<f64, ChannelError> {
    if !(b_hz > 0.0) || !b_hz.is_finite() {
        return Err(ChannelError::InvalidInput(format!(
            "bandwidth must be positive, got {b_hz}"
        )));
    }
    if !(theta > 0.0) || !theta.is_finite() {
        return Err(ChannelError::InvalidInput(format!(
            "theta must be positive, got {theta}"
        )));
    }
    Ok(b_hz * exp_scaled_e1(b_hz * theta) / std::f64::consts::LN_2)
}

/// Supremum of the ergodic rate as `b -> inf` for fixed `theta`:
/// `1 / (theta * ln 2)`. The rate is power-limited, so no bandwidth can push
/// it past this value.
pub fn rate_limit(theta: f64) -> f64 {
    1.0 / (theta * std::f64::consts::LN_2)
}

/// Solves `ergodic_rate(b, theta) = target_rate` for `b` by bisection on
/// `[b_lo, b_hi]`. `b_lo = 0` is accepted and treated as the rate-0 limit.
/// Converges to relative rate tolerance 1e-9.
pub fn invert_rate(
    target_rate: f64,
    theta: f64,
    b_lo: f64,
    b_hi: f64,
) -> Result<f64, ChannelError> {
    if !(target_rate > 0.0) {
        return Err(ChannelError::InvalidInput(format!(
            "target rate must be positive, got {target_rate}"
        )));
    }
    let rate_at = |b: f64| -> Result<f64, ChannelError> {
        if b == 0.0 {
            Ok(0.0)
        } else {
            ergodic_rate(b, theta)
        }
    };
    let r_lo = rate_at(b_lo)?;
    let r_hi = rate_at(b_hi)?;
    if !(r_lo <= target_rate && target_rate <= r_hi) {
        return Err(ChannelError::Bracket { lo: b_lo, hi: b_hi, target: target_rate });
    }

    let mut lo = b_lo;
    let mut hi = b_hi;
    let mut mid = 0.5 * (lo + hi);
    for _ in 0..200 {
        mid = 0.5 * (lo + hi);
        let r = rate_at(mid)?;
        if (r - target_rate).abs() <= 1e-9 * target_rate {
            return Ok(mid);
        }
        if r < target_rate {
            lo = mid;
        } else {
            hi = mid;
        }
        if (hi - lo) <= f64::EPSILON * hi {
            break;
        }
    }
    Ok(mid)
}

/// Computation time for one local batch: `cycles_per_batch / cpu_hz`.
pub fn compute_time(profile: &DeviceProfile) -> f64 {
    profile.cycles_per_batch / profile.cpu_hz
}

/// Upload time for `s_bits` bits at `rate` bits/s.
pub fn comm_time(s_bits: f64, rate: f64) -> f64 {
    s_bits / rate
}
