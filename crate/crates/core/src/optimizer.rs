//! Training-time minimization.
//!
//! Three layers, matching the decomposition of the joint problem:
//!
//! 1. **Bandwidth allocation** at a fixed quantization level: a two-layer
//!    bisection. The outer layer searches the per-round deadline `T_d`; the
//!    inner layer solves each device's rate equation
//!    `R_k(b_k) = S / (T_d - T_k^comp)` so every device finishes exactly at
//!    the deadline, and the deadline is tuned until the bandwidths sum to
//!    the budget.
//! 2. **Quantization level** at fixed bandwidths: the per-device constraint
//!    `(T_k^comp + T_k^comm(q)) * N(q) <= T` is log-transformed into
//!    `J_k(q) - ln(qK) <= ln T` with `J_k` concave, and successive convex
//!    approximation replaces `J_k` by its tangent at the current iterate.
//!    Each surrogate exponent is convex in `q`, so the surrogate problem is
//!    a one-dimensional convex minimization solved by golden section.
//! 3. **Alternation** between the two, followed by rounding the relaxed
//!    level to the better of the two adjacent integers.

use crate::channel::{self, ChannelError, DeviceProfile, NetworkConfig};
use crate::fitting::{rounds_approx, FitDerived, GapFit};
use crate::quantizer::{payload_bits, payload_bits_continuous};
use serde::{Deserialize, Serialize};
use std::f64::consts::LN_2;
use thiserror::Error;

/// Upper bound for the relaxed quantization level. Past this point the
/// `log2(q + 1)` payload growth makes larger levels strictly worse in every
/// regime the rate model reaches.
pub const Q_MAX: f64 = 4096.0;

const MAX_SCA_ITERS: usize = 200;
const MAX_ALTERNATIONS: usize = 60;

#[derive(Debug, Error)]
pub enum OptError {
    #[error("infeasible instance: {0}")]
    Infeasible(String),
    #[error("did not converge after {iterations} iterations (last q = {last_q})")]
    NonConvergence { iterations: usize, last_q: f64 },
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error(transparent)]
    Channel(#[from] ChannelError),
}

/// Result of the joint optimization: integer quantization level, per-device
/// bandwidths, the common per-round deadline, and the predicted round count
/// and total time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AllocationPlan {
    pub q: u32,
    #[serde(rename = "b_hz")]
    pub bandwidths_hz: Vec<f64>,
    #[serde(rename = "T_d_s")]
    pub round_deadline_s: f64,
    #[serde(rename = "N_eps")]
    pub predicted_rounds: u64,
    #[serde(rename = "T_total_s")]
    pub predicted_total_s: f64,
}

/// One row of the integer brute-force sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub q: u32,
    #[serde(rename = "T_d_s")]
    pub t_d_s: f64,
    #[serde(rename = "N_eps")]
    pub n_eps: u64,
    #[serde(rename = "T_total_s")]
    pub t_total_s: f64,
}

/// State of the SCA iteration on the relaxed quantization level.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScaState {
    pub q: f64,
    pub t_tilde: f64,
    pub iterations: usize,
}

/// Optimal bandwidth split and per-round deadline for payload `s_bits` at a
/// fixed quantization level.
///
/// Every returned device finishes compute plus upload exactly at the
/// returned deadline, and the bandwidths sum to the budget within `tol_hz`.
pub fn allocate_bandwidth(
    profiles: &[DeviceProfile],
    net: &NetworkConfig,
    s_bits: f64,
    tol_hz: f64,
) -> Result<(Vec<f64>, f64), OptError> {
    if profiles.is_empty() {
        return Err(OptError::Precondition("need at least one device".into()));
    }
    if !(s_bits > 0.0) {
        return Err(OptError::Precondition(format!("payload must be positive, got {s_bits}")));
    }
    if !(tol_hz > 0.0) {
        return Err(OptError::Precondition(format!("tolerance must be positive, got {tol_hz}")));
    }
    net.validate()?;
    for p in profiles {
        p.validate()?;
    }

    let b0 = net.total_bandwidth_hz;
    let k = profiles.len();
    let thetas: Vec<f64> = profiles.iter().map(|p| p.theta(net.noise_psd_w_per_hz)).collect();
    let t_comps: Vec<f64> = profiles.iter().map(channel::compute_time).collect();

    // Outer bracket: at the lower end some device has no time to upload at
    // all; at the upper end an equal split already meets the deadline.
    let td_lo = t_comps.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let equal = b0 / k as f64;
    let mut td_hi = td_lo;
    for i in 0..k {
        let rate = channel::ergodic_rate(equal, thetas[i])?;
        td_hi = td_hi.max(t_comps[i] + s_bits / rate);
    }
    if !(td_hi > td_lo) || !td_hi.is_finite() {
        return Err(OptError::Infeasible(format!(
            "deadline bracket collapsed: [{td_lo}, {td_hi}]"
        )));
    }

    let solve_all = |td: f64| -> Option<(Vec<f64>, f64)> {
        let mut bs = Vec::with_capacity(k);
        let mut sum = 0.0;
        for i in 0..k {
            let slack = td - t_comps[i];
            if slack <= 0.0 {
                return None;
            }
            let b = solve_device_bandwidth(thetas[i], s_bits / slack, b0)?;
            sum += b;
            bs.push(b);
        }
        Some((bs, sum))
    };

    let (mut lo, mut hi) = (td_lo, td_hi);
    for _ in 0..300 {
        let td = 0.5 * (lo + hi);
        match solve_all(td) {
            Some((bs, sum)) => {
                if (sum - b0).abs() <= tol_hz {
                    return Ok((bs, td));
                }
                if sum > b0 {
                    lo = td;
                } else {
                    hi = td;
                }
            }
            // Some device cannot reach the needed rate with any bandwidth:
            // the deadline is too tight.
            None => lo = td,
        }
    }
    Err(OptError::Infeasible(
        "deadline bisection did not reach the bandwidth budget tolerance".into(),
    ))
}

// Bandwidth solving R(b) = target for one device, or None when the target
// exceeds the device's power-limited rate supremum.
fn solve_device_bandwidth(theta: f64, target_rate: f64, b_start: f64) -> Option<f64> {
    if !(target_rate > 0.0) || !target_rate.is_finite() {
        return None;
    }
    if target_rate >= channel::rate_limit(theta) * (1.0 - 1e-12) {
        return None;
    }
    let mut hi = b_start;
    for _ in 0..200 {
        if channel::ergodic_rate(hi, theta).ok()? >= target_rate {
            return channel::invert_rate(target_rate, theta, 0.0, hi).ok();
        }
        hi *= 2.0;
    }
    None
}

/// Deadline when the budget is split evenly: `max_k(T_k^comp + S / R_k(B0/K))`.
pub fn equal_split_deadline(
    profiles: &[DeviceProfile],
    net: &NetworkConfig,
    s_bits: f64,
) -> Result<f64, OptError> {
    let equal = net.total_bandwidth_hz / profiles.len() as f64;
    let bs = vec![equal; profiles.len()];
    round_deadline(profiles, net, &bs, s_bits)
}

/// Slowest device's compute-plus-upload time under the given bandwidths.
pub fn round_deadline(
    profiles: &[DeviceProfile],
    net: &NetworkConfig,
    bandwidths: &[f64],
    s_bits: f64,
) -> Result<f64, OptError> {
    if profiles.len() != bandwidths.len() {
        return Err(OptError::Precondition(format!(
            "{} profiles vs {} bandwidths",
            profiles.len(),
            bandwidths.len()
        )));
    }
    let mut worst = f64::NEG_INFINITY;
    for (p, &b) in profiles.iter().zip(bandwidths) {
        let rate = channel::ergodic_rate(b, p.theta(net.noise_psd_w_per_hz))?;
        worst = worst.max(channel::compute_time(p) + channel::comm_time(s_bits, rate));
    }
    Ok(worst)
}

// J_k(q) = ln(T_k^comp + S(q)/R_k) + ln(qK H2 + H1 sqrt(d)): the log of
// (per-device round latency) x (qK x predicted rounds).
fn device_log_objective(
    q: f64,
    t_comp: f64,
    rate: f64,
    derived: &FitDerived,
    dim: usize,
    k: usize,
) -> f64 {
    let s = payload_bits_continuous(dim, q);
    (t_comp + s / rate).ln()
        + (q * k as f64 * derived.h2 + derived.h1 * (dim as f64).sqrt()).ln()
}

fn device_log_objective_derivative(
    q: f64,
    t_comp: f64,
    rate: f64,
    derived: &FitDerived,
    dim: usize,
    k: usize,
) -> f64 {
    let kf = k as f64;
    let sd = (dim as f64).sqrt();
    let first = kf * derived.h2 / (q * kf * derived.h2 + derived.h1 * sd);
    let s = payload_bits_continuous(dim, q);
    let second = dim as f64 / (rate * LN_2 * (1.0 + q)) / (t_comp + s / rate);
    first + second
}

fn golden_min<F: Fn(f64) -> f64>(f: &F, mut a: f64, mut b: f64, tol: f64) -> f64 {
    const INVPHI: f64 = 0.618_033_988_749_894_8;
    const INVPHI2: f64 = 0.381_966_011_250_105_2;
    let mut h = b - a;
    let mut c = a + INVPHI2 * h;
    let mut d = a + INVPHI * h;
    let mut fc = f(c);
    let mut fd = f(d);
    while h > tol {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            h = b - a;
            c = a + INVPHI2 * h;
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            h = b - a;
            d = a + INVPHI * h;
            fd = f(d);
        }
    }
    0.5 * (a + b)
}

/// One SCA iteration from anchor `q_r` with bandwidths (hence rates) fixed.
/// Returns the minimizer of the convex surrogate on `[2, Q_MAX]` and the
/// surrogate objective value there.
pub fn sca_step(
    q_r: f64,
    profiles: &[DeviceProfile],
    net: &NetworkConfig,
    bandwidths: &[f64],
    derived: &FitDerived,
    dim: usize,
) -> Result<(f64, f64), OptError> {
    if !(q_r >= 2.0) {
        return Err(OptError::Precondition(format!("anchor q must be >= 2, got {q_r}")));
    }
    if derived.h1 < 0.0 || derived.h2 < 0.0 || (derived.h1 == 0.0 && derived.h2 == 0.0) {
        return Err(OptError::Precondition(format!(
            "need nonnegative H1, H2 with at least one positive, got {} and {}",
            derived.h1, derived.h2
        )));
    }
    if profiles.len() != bandwidths.len() {
        return Err(OptError::Precondition(format!(
            "{} profiles vs {} bandwidths",
            profiles.len(),
            bandwidths.len()
        )));
    }

    let k = profiles.len();
    let mut anchors = Vec::with_capacity(k);
    for (p, &b) in profiles.iter().zip(bandwidths) {
        let rate = channel::ergodic_rate(b, p.theta(net.noise_psd_w_per_hz))?;
        let t_comp = channel::compute_time(p);
        let value = device_log_objective(q_r, t_comp, rate, derived, dim, k);
        let slope = device_log_objective_derivative(q_r, t_comp, rate, derived, dim, k);
        anchors.push((value, slope));
    }

    let kf = k as f64;
    let surrogate = |q: f64| -> f64 {
        anchors
            .iter()
            .map(|&(value, slope)| value + slope * (q - q_r) - (q * kf).ln())
            .fold(f64::NEG_INFINITY, f64::max)
    };

    let interior = golden_min(&surrogate, 2.0, Q_MAX, 1e-7);
    let q_next = [interior, 2.0, Q_MAX]
        .into_iter()
        .min_by(|&a, &b| surrogate(a).partial_cmp(&surrogate(b)).expect("finite"))
        .expect("nonempty");
    Ok((q_next, surrogate(q_next).exp()))
}

/// SCA on the relaxed quantization level, stopping when the surrogate
/// objective changes by at most `tol` between iterations.
pub fn solve_quantization(
    q0: f64,
    profiles: &[DeviceProfile],
    net: &NetworkConfig,
    bandwidths: &[f64],
    derived: &FitDerived,
    dim: usize,
    tol: f64,
) -> Result<ScaState, OptError> {
    if !(q0 >= 2.0) {
        return Err(OptError::Precondition(format!("initial q must be >= 2, got {q0}")));
    }
    let mut q = q0;
    let mut prev = f64::INFINITY;
    for iteration in 1..=MAX_SCA_ITERS {
        let (q_next, t_tilde) = sca_step(q, profiles, net, bandwidths, derived, dim)?;
        q = q_next;
        if (prev - t_tilde).abs() <= tol {
            return Ok(ScaState { q, t_tilde, iterations: iteration });
        }
        prev = t_tilde;
    }
    Err(OptError::NonConvergence { iterations: MAX_SCA_ITERS, last_q: q })
}

/// Exact (ceiling-free) total-time objective at relaxed level `q` under the
/// given bandwidths: predicted rounds times the slowest device's latency.
pub fn continuous_total_time(
    q: f64,
    profiles: &[DeviceProfile],
    net: &NetworkConfig,
    bandwidths: &[f64],
    derived: &FitDerived,
    dim: usize,
) -> Result<f64, OptError> {
    let s = payload_bits_continuous(dim, q);
    let deadline = round_deadline(profiles, net, bandwidths, s)?;
    Ok(rounds_approx(derived.h1, derived.h2, dim, profiles.len(), q) * deadline)
}

/// Joint quantization and bandwidth optimization by alternation, with the
/// relaxed level rounded to the better of the two adjacent integers at the
/// end. The final plan re-allocates bandwidth at the rounded level so every
/// device again finishes exactly at the deadline.
pub fn joint_optimize(
    profiles: &[DeviceProfile],
    net: &NetworkConfig,
    fit: &GapFit,
    epsilon: f64,
    tol_s: f64,
) -> Result<AllocationPlan, OptError> {
    if profiles.len() != fit.devices {
        return Err(OptError::Precondition(format!(
            "fit was made for {} devices but {} profiles were given",
            fit.devices,
            profiles.len()
        )));
    }
    let derived = fit
        .derived(epsilon)
        .map_err(|e| OptError::Infeasible(e.to_string()))?;
    let dim = fit.dim;
    let tol_hz = 1e-6 * net.total_bandwidth_hz;

    let mut q = 8.0;
    let mut prev_total = f64::INFINITY;
    let mut best_q = q;
    let mut best_total = f64::INFINITY;
    let mut q_before_last = f64::NAN;
    for _ in 0..MAX_ALTERNATIONS {
        let s = payload_bits_continuous(dim, q);
        let (bandwidths, _) = allocate_bandwidth(profiles, net, s, tol_hz)?;
        let state = solve_quantization(q, profiles, net, &bandwidths, &derived, dim, tol_s)?;
        let total = continuous_total_time(state.q, profiles, net, &bandwidths, &derived, dim)?;
        if total < best_total {
            best_total = total;
            best_q = state.q;
        }
        let converged = (prev_total - total).abs() <= tol_s;
        // Period-2 cycling in q means the alternation is orbiting; keep the
        // best iterate seen.
        let cycling = (state.q - q_before_last).abs() < 1e-9 && (state.q - q).abs() > 1e-9;
        q_before_last = q;
        q = state.q;
        prev_total = total;
        if converged || cycling {
            break;
        }
    }

    let ceil = best_q.ceil() as i64;
    let mut candidates: Vec<u32> = Vec::new();
    for c in [ceil - 1, ceil] {
        if c >= 2 && !candidates.contains(&(c as u32)) {
            candidates.push(c as u32);
        }
    }
    if candidates.is_empty() {
        candidates.push(2);
    }

    let mut plan: Option<AllocationPlan> = None;
    for qc in candidates {
        let s = payload_bits(dim, qc);
        let (bandwidths, deadline) = allocate_bandwidth(profiles, net, s, tol_hz)?;
        let rounds = fit.rounds_needed(f64::from(qc), epsilon);
        let total = rounds as f64 * deadline;
        if plan.as_ref().map_or(true, |p| total < p.predicted_total_s) {
            plan = Some(AllocationPlan {
                q: qc,
                bandwidths_hz: bandwidths,
                round_deadline_s: deadline,
                predicted_rounds: rounds,
                predicted_total_s: total,
            });
        }
    }
    Ok(plan.expect("at least one rounding candidate"))
}

/// Evaluates every integer level in `[q_min, q_max]` with its own optimal
/// bandwidth allocation. The exhaustive reference the alternating
/// optimizer is judged against, and the raw data for trade-off plots.
pub fn brute_force_sweep(
    profiles: &[DeviceProfile],
    net: &NetworkConfig,
    fit: &GapFit,
    epsilon: f64,
    q_min: u32,
    q_max: u32,
) -> Result<Vec<SweepPoint>, OptError> {
    if q_min < 2 || q_min > q_max {
        return Err(OptError::Precondition(format!(
            "need 2 <= q_min <= q_max, got [{q_min}, {q_max}]"
        )));
    }
    let tol_hz = 1e-6 * net.total_bandwidth_hz;
    let mut points = Vec::with_capacity((q_max - q_min + 1) as usize);
    for q in q_min..=q_max {
        let s = payload_bits(fit.dim, q);
        let (_, deadline) = allocate_bandwidth(profiles, net, s, tol_hz)?;
        let n_eps = fit.rounds_needed(f64::from(q), epsilon);
        points.push(SweepPoint {
            q,
            t_d_s: deadline,
            n_eps,
            t_total_s: n_eps as f64 * deadline,
        });
    }
    Ok(points)
}

/// Sweep row with the smallest total time (smallest `q` on ties).
pub fn best_sweep_point(points: &[SweepPoint]) -> Option<&SweepPoint> {
    points.iter().min_by(|a, b| {
        a.t_total_s
            .partial_cmp(&b.t_total_s)
            .expect("finite totals")
            .then(a.q.cmp(&b.q))
    })
}
