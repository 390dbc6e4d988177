//! Optimality-gap curve fitting.
//!
//! The training loss of the quantized FedSGD loop decays like
//! `F(w^(n)) - F(w*) ~ (alpha A + D) / (n + alpha B + C)` with
//! `alpha = sqrt(d)/(qK) + 1`. Two probe traces at distinct quantization
//! levels pin down the four constants: for a candidate optimum value `Z`,
//! each trace admits a closed-form least-squares solution for the
//! per-trace numerator `X = alpha A + D` and shift `Y = alpha B + C`; a
//! one-dimensional search over `Z` picks the best candidate, and the two
//! `(X, Y)` pairs then separate into `A, B, C, D`.
//!
//! The fitted curve yields the round count needed for a target gap
//! `epsilon` and the two aggregates the time optimizer consumes:
//! `H1 = A/eps - B` and `H2 = (A+D)/eps - B - C`.

use crate::trainer::LossTrace;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FitError {
    #[error("candidate Z {0} is not below every trace value")]
    InfeasibleZ(f64),
    #[error("degenerate trace: regression denominator vanishes")]
    DegenerateTrace,
    #[error("probe quantization levels must differ, got {0} twice")]
    ProbeLevelsEqual(u32),
    #[error("traces too short or mismatched: {0}")]
    BadTraces(String),
    #[error("fit failed: {0}")]
    FitFailed(String),
    #[error("target gap {epsilon} is infeasible for this fit (H1 = {h1}, H2 = {h2})")]
    InvalidEpsilon { epsilon: f64, h1: f64, h2: f64 },
}

/// Distortion factor `alpha = sqrt(d)/(qK) + 1` for model dimension `d`,
/// `k` devices, and (possibly relaxed) quantization level `q`.
pub fn alpha(dim: usize, devices: usize, q: f64) -> f64 {
    (dim as f64).sqrt() / (q * devices as f64) + 1.0
}

/// Fitted gap-curve parameters together with the probe setup they came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapFit {
    #[serde(rename = "A")]
    pub a: f64,
    #[serde(rename = "B")]
    pub b: f64,
    #[serde(rename = "C")]
    pub c: f64,
    #[serde(rename = "D")]
    pub d: f64,
    /// Estimate of the optimal loss `F(w*)`.
    #[serde(rename = "Z")]
    pub z: f64,
    pub q1: u32,
    pub q2: u32,
    #[serde(rename = "N_tilde")]
    pub n_tilde: usize,
    #[serde(rename = "d")]
    pub dim: usize,
    #[serde(rename = "K")]
    pub devices: usize,
}

/// Aggregates of a [`GapFit`] at a fixed target gap:
/// `H1 = A/eps - B`, `H2 = (A+D)/eps - B - C`, so the predicted round count
/// is `sqrt(d)/(qK) * H1 + H2` before rounding up.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitDerived {
    pub h1: f64,
    pub h2: f64,
    pub epsilon: f64,
}

/// Search strategy for the one-dimensional scan over `Z`.
#[derive(Debug, Clone, PartialEq)]
pub enum ZSearch {
    /// Uniform grid of `points` candidates on `[0, min_n F_n)`, refined once
    /// at 10x resolution around the best candidate.
    Auto { points: usize },
    /// Evaluate exactly these candidates.
    Explicit(Vec<f64>),
}

impl Default for ZSearch {
    fn default() -> Self {
        ZSearch::Auto { points: 2000 }
    }
}

/// Closed-form least-squares `(X, Y)` minimizing
/// `sum_n ((F_n - z)(n + Y) - X)^2` over a trace with rounds `n = 1..=N`.
/// Errors when some `F_n <= z` (the scan skips such `z`) or when the trace
/// is constant and the normal equations degenerate.
pub fn fit_xy_given_z(losses: &[f64], z: f64) -> Result<(f64, f64), FitError> {
    if losses.len() < 3 {
        return Err(FitError::BadTraces(format!(
            "need at least 3 rounds, got {}",
            losses.len()
        )));
    }
    let n = losses.len() as f64;
    let mut s_chi = 0.0;
    let mut s_psi = 0.0;
    let mut s_chi_psi = 0.0;
    let mut s_psi_sq = 0.0;
    for (i, &f) in losses.iter().enumerate() {
        let psi = f - z;
        if psi <= 0.0 {
            return Err(FitError::InfeasibleZ(z));
        }
        let chi = psi * (i + 1) as f64;
        s_chi += chi;
        s_psi += psi;
        s_chi_psi += chi * psi;
        s_psi_sq += psi * psi;
    }
    let denom = n * s_psi_sq - s_psi * s_psi;
    if denom.abs() <= 1e-12 * (n * s_psi_sq).abs() {
        return Err(FitError::DegenerateTrace);
    }
    let x = (s_chi * s_psi_sq - s_chi_psi * s_psi) / denom;
    let y = (s_chi * s_psi - n * s_chi_psi) / denom;
    Ok((x, y))
}

fn objective(losses: &[f64], z: f64, x: f64, y: f64) -> f64 {
    losses
        .iter()
        .enumerate()
        .map(|(i, &f)| {
            let r = (f - z) * ((i + 1) as f64 + y) - x;
            r * r
        })
        .sum()
}

/// Fits the gap curve from two probe traces at distinct quantization levels.
///
/// Scans `Z` per `search`, solves the per-trace regressions in closed form
/// at each candidate, keeps the candidate minimizing the summed objective
/// (smallest `Z` wins ties), and separates `(X_i, Y_i)` into `A, B, C, D`.
/// Slightly negative `C` or `D` from noise are clamped to zero with the
/// partner parameter refitted; nonpositive `A` or `B` fail the fit.
pub fn fit_gap_model(
    trace1: &LossTrace,
    trace2: &LossTrace,
    dim: usize,
    devices: usize,
    search: &ZSearch,
) -> Result<GapFit, FitError> {
    if trace1.q == trace2.q {
        return Err(FitError::ProbeLevelsEqual(trace1.q));
    }
    if trace1.len() != trace2.len() {
        return Err(FitError::BadTraces(format!(
            "trace lengths differ: {} vs {}",
            trace1.len(),
            trace2.len()
        )));
    }
    if trace1.len() < 3 {
        return Err(FitError::BadTraces(format!(
            "need at least 3 rounds, got {}",
            trace1.len()
        )));
    }

    let losses = [&trace1.losses[..], &trace2.losses[..]];
    let evaluate = |z: f64| -> Option<(f64, [(f64, f64); 2])> {
        let mut pairs = [(0.0, 0.0); 2];
        let mut total = 0.0;
        for (slot, l) in pairs.iter_mut().zip(losses.iter()) {
            match fit_xy_given_z(l, z) {
                Ok((x, y)) => {
                    *slot = (x, y);
                    total += objective(l, z, x, y);
                }
                Err(_) => return None,
            }
        }
        Some((total, pairs))
    };

    // (z, objective, per-trace pairs); smallest z wins ties.
    type Best = Option<(f64, f64, [(f64, f64); 2])>;
    let consider = |best: &mut Best, z: f64| {
        if let Some((obj, pairs)) = evaluate(z) {
            let better = match best {
                None => true,
                Some((bz, bobj, _)) => obj < *bobj || (obj == *bobj && z < *bz),
            };
            if better {
                *best = Some((z, obj, pairs));
            }
        }
    };

    let mut best: Best = None;
    match search {
        ZSearch::Explicit(zs) => {
            for &z in zs {
                consider(&mut best, z);
            }
        }
        ZSearch::Auto { points } => {
            let points = (*points).max(2);
            let z_max = losses
                .iter()
                .flat_map(|l| l.iter())
                .fold(f64::INFINITY, |m, &v| m.min(v));
            if !(z_max > 0.0) {
                return Err(FitError::FitFailed(format!(
                    "trace minimum {z_max} leaves no positive Z range"
                )));
            }
            let step = z_max / points as f64;
            for j in 0..points {
                consider(&mut best, j as f64 * step);
            }
            if let Some((z0, _, _)) = best {
                // One 10x refinement pass around the best coarse candidate.
                let fine = step / 10.0;
                for j in -10i64..=10 {
                    let z = z0 + j as f64 * fine;
                    if z >= 0.0 && z < z_max {
                        consider(&mut best, z);
                    }
                }
            }
        }
    }

    let (z, _, [(x1, y1), (x2, y2)]) =
        best.ok_or_else(|| FitError::FitFailed("no feasible Z candidate".into()))?;

    let a1 = alpha(dim, devices, f64::from(trace1.q));
    let a2 = alpha(dim, devices, f64::from(trace2.q));
    let mut a = (x1 - x2) / (a1 - a2);
    let mut b = (y1 - y2) / (a1 - a2);
    let mut c = (a2 * y1 - a1 * y2) / (a2 - a1);
    let mut d = (a2 * x1 - a1 * x2) / (a2 - a1);

    if c < 0.0 {
        c = 0.0;
        b = (a1 * y1 + a2 * y2) / (a1 * a1 + a2 * a2);
    }
    if d < 0.0 {
        d = 0.0;
        a = (a1 * x1 + a2 * x2) / (a1 * a1 + a2 * a2);
    }
    if !(a > 0.0) || !(b > 0.0) {
        return Err(FitError::FitFailed(format!(
            "sign constraints violated: A = {a}, B = {b}"
        )));
    }
    for ai in [a1, a2] {
        if !(ai * a + d > 0.0) || !(ai * b + c > 0.0) {
            return Err(FitError::FitFailed(
                "implied per-probe X or Y is nonpositive".into(),
            ));
        }
    }

    Ok(GapFit {
        a,
        b,
        c,
        d,
        z,
        q1: trace1.q,
        q2: trace2.q,
        n_tilde: trace1.len(),
        dim,
        devices,
    })
}

impl GapFit {
    /// Predicted optimality gap `U(n) = (alpha A + D) / (n + alpha B + C)`
    /// after `n` rounds at (possibly relaxed) level `q`.
    pub fn predict_gap(&self, q: f64, n: f64) -> f64 {
        let al = alpha(self.dim, self.devices, q);
        (al * self.a + self.d) / (n + al * self.b + self.c)
    }

    /// Minimum integer round count with a predicted gap at most `epsilon`:
    /// `ceil(alpha (A/eps - B) + D/eps - C)`, floored at one round when the
    /// target is loose enough to hold immediately.
    pub fn rounds_needed(&self, q: f64, epsilon: f64) -> u64 {
        let al = alpha(self.dim, self.devices, q);
        let interior = al * (self.a / epsilon - self.b) + self.d / epsilon - self.c;
        if interior <= 0.0 {
            1
        } else {
            (interior.ceil() as u64).max(1)
        }
    }

    /// The `H1`/`H2` aggregates at target gap `epsilon`; errors when the
    /// target is too loose for the fitted curve to constrain (nonpositive
    /// aggregates would make the time objective meaningless).
    pub fn derived(&self, epsilon: f64) -> Result<FitDerived, FitError> {
        if !(epsilon > 0.0) {
            return Err(FitError::InvalidEpsilon { epsilon, h1: f64::NAN, h2: f64::NAN });
        }
        let h1 = self.a / epsilon - self.b;
        let h2 = (self.a + self.d) / epsilon - self.b - self.c;
        if !(h1 > 0.0) || !(h2 > 0.0) {
            return Err(FitError::InvalidEpsilon { epsilon, h1, h2 });
        }
        Ok(FitDerived { h1, h2, epsilon })
    }
}

/// Round count from the `H1`/`H2` form before rounding:
/// `sqrt(d)/(qK) * H1 + H2`.
pub fn rounds_approx(h1: f64, h2: f64, dim: usize, devices: usize, q: f64) -> f64 {
    (dim as f64).sqrt() / (q * devices as f64) * h1 + h2
}

/// Integer round count from the `H1`/`H2` form, at least one round.
pub fn rounds_from_h(h1: f64, h2: f64, dim: usize, devices: usize, q: f64) -> u64 {
    let v = rounds_approx(h1, h2, dim, devices, q);
    if v <= 0.0 {
        1
    } else {
        (v.ceil() as u64).max(1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stream_rng;
    use rand::Rng;
    use rand_distr::{Distribution, Normal};

    fn model_trace(x: f64, y: f64, z: f64, len: usize, q: u32) -> LossTrace {
        let losses = (1..=len).map(|n| z + x / (n as f64 + y)).collect();
        LossTrace { losses, q, seed: 0 }
    }

    fn gap_trace(fit: &GapFit, q: u32, len: usize) -> LossTrace {
        let losses = (1..=len)
            .map(|n| fit.z + fit.predict_gap(f64::from(q), n as f64))
            .collect();
        LossTrace { losses, q, seed: 0 }
    }

    #[test]
    fn xy_recovery_is_exact_on_model_data() {
        let (x, y, z) = (50.0, 10.0, 0.25);
        let t = model_trace(x, y, z, 100, 4);
        let (xf, yf) = fit_xy_given_z(&t.losses, z).unwrap();
        assert!(((xf - x) / x).abs() < 1e-8, "X = {xf}");
        assert!(((yf - y) / y).abs() < 1e-8, "Y = {yf}");
    }

    #[test]
    fn constant_trace_is_degenerate() {
        let losses = vec![0.5; 20];
        assert!(matches!(
            fit_xy_given_z(&losses, 0.25),
            Err(FitError::DegenerateTrace)
        ));
    }

    #[test]
    fn z_above_a_loss_is_infeasible() {
        let t = model_trace(50.0, 10.0, 0.25, 20, 4);
        let min = t.losses.iter().cloned().fold(f64::INFINITY, f64::min);
        assert!(matches!(
            fit_xy_given_z(&t.losses, min + 0.01),
            Err(FitError::InfeasibleZ(_))
        ));
    }

    #[test]
    fn xy_recovery_tolerates_noise() {
        let (x, y, z) = (50.0, 10.0, 0.25);
        let mut t = model_trace(x, y, z, 100, 4);
        let noise = Normal::new(0.0, 1e-3).unwrap();
        let mut rng = stream_rng(3, 0);
        for v in &mut t.losses {
            *v += noise.sample(&mut rng);
        }
        let (xf, yf) = fit_xy_given_z(&t.losses, z).unwrap();
        assert!(((xf - x) / x).abs() < 0.05, "X = {xf}");
        assert!(((yf - y) / y).abs() < 0.05, "Y = {yf}");
    }

    #[test]
    fn full_fit_recovers_known_parameters() {
        let truth = GapFit {
            a: 0.35,
            b: 2.0,
            c: 5.0,
            d: 0.12,
            z: 0.25,
            q1: 4,
            q2: 6,
            n_tilde: 100,
            dim: 1024,
            devices: 6,
        };
        let t1 = gap_trace(&truth, 4, 100);
        let t2 = gap_trace(&truth, 6, 100);
        let fit = fit_gap_model(&t1, &t2, 1024, 6, &ZSearch::Explicit(vec![0.1, 0.25, 0.3]))
            .unwrap();
        assert_eq!(fit.z, 0.25);
        for (got, want) in [
            (fit.a, truth.a),
            (fit.b, truth.b),
            (fit.c, truth.c),
            (fit.d, truth.d),
        ] {
            assert!(
                ((got - want) / want).abs() < 1e-6,
                "recovered {got}, wanted {want}"
            );
        }
    }

    #[test]
    fn auto_grid_finds_z_close_to_truth() {
        let truth = GapFit {
            a: 0.5,
            b: 3.0,
            c: 8.0,
            d: 0.05,
            z: 0.247,
            q1: 4,
            q2: 6,
            n_tilde: 80,
            dim: 1024,
            devices: 6,
        };
        let t1 = gap_trace(&truth, 4, 80);
        let t2 = gap_trace(&truth, 6, 80);
        let fit = fit_gap_model(&t1, &t2, 1024, 6, &ZSearch::default()).unwrap();
        // Grid resolution: min loss / 2000, refined 10x.
        assert!((fit.z - truth.z).abs() < 1e-3, "Z = {}", fit.z);
    }

    #[test]
    fn equal_probe_levels_are_rejected() {
        let t = model_trace(50.0, 10.0, 0.25, 10, 4);
        assert!(matches!(
            fit_gap_model(&t, &t, 1024, 6, &ZSearch::default()),
            Err(FitError::ProbeLevelsEqual(4))
        ));
    }

    #[test]
    fn grid_optimality_holds() {
        // Objective at the returned Z is no worse than at every grid point.
        let truth = GapFit {
            a: 0.4,
            b: 2.5,
            c: 6.0,
            d: 0.1,
            z: 0.2,
            q1: 4,
            q2: 8,
            n_tilde: 60,
            dim: 256,
            devices: 4,
        };
        let mut t1 = gap_trace(&truth, 4, 60);
        let mut t2 = gap_trace(&truth, 8, 60);
        let noise = Normal::new(0.0, 5e-4).unwrap();
        let mut rng = stream_rng(5, 0);
        for v in t1.losses.iter_mut().chain(t2.losses.iter_mut()) {
            *v += noise.sample(&mut rng);
        }
        let points = 400;
        let fit = fit_gap_model(&t1, &t2, 256, 4, &ZSearch::Auto { points }).unwrap();

        let obj_at = |z: f64| -> Option<f64> {
            let (x1, y1) = fit_xy_given_z(&t1.losses, z).ok()?;
            let (x2, y2) = fit_xy_given_z(&t2.losses, z).ok()?;
            Some(objective(&t1.losses, z, x1, y1) + objective(&t2.losses, z, x2, y2))
        };
        let best = obj_at(fit.z).unwrap();
        let z_max = t1
            .losses
            .iter()
            .chain(&t2.losses)
            .fold(f64::INFINITY, |m, &v| m.min(v));
        for j in 0..points {
            let z = j as f64 * z_max / points as f64;
            if let Some(o) = obj_at(z) {
                assert!(best <= o + 1e-12, "grid point {z} beats returned Z");
            }
        }
    }

    #[test]
    fn predict_gap_limits() {
        let fit = GapFit {
            a: 0.35,
            b: 2.0,
            c: 5.0,
            d: 0.12,
            z: 0.25,
            q1: 4,
            q2: 6,
            n_tilde: 100,
            dim: 1024,
            devices: 6,
        };
        // 1/N decay.
        assert!(fit.predict_gap(4.0, 1e9) < 1e-6);
        // q -> inf collapses alpha to 1.
        let limit = (fit.a + fit.d) / (100.0 + fit.b + fit.c);
        assert!((fit.predict_gap(1e12, 100.0) - limit).abs() < 1e-9);
        // Decreasing in q at fixed N.
        let mut prev = fit.predict_gap(2.0, 50.0);
        for q in [4.0, 8.0, 16.0, 64.0] {
            let u = fit.predict_gap(q, 50.0);
            assert!(u < prev, "U not decreasing at q = {q}");
            prev = u;
        }
    }

    #[test]
    fn rounds_needed_arithmetic_and_limits() {
        // H-form arithmetic on externally fitted values.
        assert_eq!(rounds_from_h(43.01, 48.79, 1024, 6, 4.0), 107);

        let fit = GapFit {
            a: 0.6,
            b: 7.0,
            c: 10.0,
            d: 0.05,
            z: 0.25,
            q1: 4,
            q2: 6,
            n_tilde: 100,
            dim: 1024,
            devices: 6,
        };
        let eps = 0.012;
        // q -> inf floor.
        let floor = ((fit.a + fit.d) / eps - fit.b - fit.c).ceil() as u64;
        assert_eq!(fit.rounds_needed(1e15, eps), floor);
        // Doubling epsilon never increases the count.
        assert!(fit.rounds_needed(4.0, 2.0 * eps) <= fit.rounds_needed(4.0, eps));
        // Loose target saturates at one round.
        assert_eq!(fit.rounds_needed(4.0, 1e9), 1);
        // The ceiling-rounded count achieves the target.
        for q in [2.0, 4.0, 16.0] {
            let n = fit.rounds_needed(q, eps);
            assert!(fit.predict_gap(q, n as f64) <= eps);
        }
    }

    #[test]
    fn rounds_monotone_in_q_and_devices() {
        let fit = GapFit {
            a: 0.6,
            b: 7.0,
            c: 10.0,
            d: 0.05,
            z: 0.25,
            q1: 4,
            q2: 6,
            n_tilde: 100,
            dim: 1024,
            devices: 6,
        };
        let eps = 0.012;
        let mut prev = u64::MAX;
        for q in [2.0, 3.0, 4.0, 8.0, 16.0, 64.0] {
            let n = fit.rounds_needed(q, eps);
            assert!(n <= prev);
            prev = n;
        }
        let mut prev = u64::MAX;
        for k in [1usize, 2, 4, 8, 16] {
            let f = GapFit { devices: k, ..fit.clone() };
            let n = f.rounds_needed(4.0, eps);
            assert!(n <= prev);
            prev = n;
        }
    }

    #[test]
    fn derived_requires_feasible_epsilon() {
        let fit = GapFit {
            a: 0.6,
            b: 7.0,
            c: 10.0,
            d: 0.05,
            z: 0.25,
            q1: 4,
            q2: 6,
            n_tilde: 100,
            dim: 1024,
            devices: 6,
        };
        let der = fit.derived(0.012).unwrap();
        assert!((der.h1 - (0.6 / 0.012 - 7.0)).abs() < 1e-12);
        assert!((der.h2 - (0.65 / 0.012 - 17.0)).abs() < 1e-12);
        // Huge epsilon drives H1 negative.
        assert!(matches!(fit.derived(1.0), Err(FitError::InvalidEpsilon { .. })));
        assert!(fit.derived(0.0).is_err());
    }

    #[test]
    fn gap_fit_serializes_with_stable_keys() {
        let fit = GapFit {
            a: 0.35,
            b: 2.0,
            c: 5.0,
            d: 0.12,
            z: 0.25,
            q1: 4,
            q2: 6,
            n_tilde: 100,
            dim: 1024,
            devices: 6,
        };
        let json = serde_json::to_string(&fit).unwrap();
        let value: serde_json::Value = serde_json::from_str(&json).unwrap();
        for key in ["A", "B", "C", "D", "Z", "q1", "q2", "N_tilde", "d", "K"] {
            assert!(value.get(key).is_some(), "missing key {key} in {json}");
        }
        let back: GapFit = serde_json::from_str(&json).unwrap();
        assert_eq!(back, fit);
    }

    #[test]
    fn noisy_fit_stays_near_truth_across_draws() {
        // Repeated noisy fits recover the parameters within a loose band.
        let truth = GapFit {
            a: 0.35,
            b: 2.0,
            c: 5.0,
            d: 0.12,
            z: 0.25,
            q1: 4,
            q2: 6,
            n_tilde: 100,
            dim: 1024,
            devices: 6,
        };
        let mut rng = stream_rng(8, 0);
        for _ in 0..5 {
            let mut t1 = gap_trace(&truth, 4, 100);
            let mut t2 = gap_trace(&truth, 6, 100);
            for v in t1.losses.iter_mut().chain(t2.losses.iter_mut()) {
                *v += (rng.random::<f64>() - 0.5) * 2e-4;
            }
            let fit = fit_gap_model(&t1, &t2, 1024, 6, &ZSearch::default()).unwrap();
            assert!((fit.z - truth.z).abs() < 5e-3, "Z = {}", fit.z);
            assert!(fit.a > 0.0 && fit.b > 0.0 && fit.c >= 0.0 && fit.d >= 0.0);
        }
    }
}
