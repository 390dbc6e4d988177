//! Stochastic gradient quantization.
//!
//! Each entry of a gradient vector is reduced to its sign plus an integer
//! level on a uniform grid of `q + 1` points in `[0, 1]`, scaled by the
//! vector norm. Rounding between the two neighboring grid points is
//! randomized with probabilities proportional to the distances, which makes
//! dequantization an unbiased estimator of the input vector.

use rand::Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum QuantizeError {
    #[error("gradient entry {index} is not finite ({value})")]
    NonFinite { index: usize, value: f64 },
    #[error("quantization level must be at least 1, got {0}")]
    LevelTooSmall(u32),
}

/// Wire representation of a quantized gradient: the vector norm, per-entry
/// signs, and per-entry integer levels in `[0, q]`. Entry `i` dequantizes to
/// `norm * signs[i] * levels[i] / q`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedGradient {
    pub norm: f64,
    pub signs: Vec<i8>,
    pub levels: Vec<u32>,
    pub q: u32,
}

impl QuantizedGradient {
    pub fn dim(&self) -> usize {
        self.levels.len()
    }
}

/// Quantizes `g` with `q` uniform levels using randomized rounding.
///
/// For each entry, with `r = |g_i| / ||g||` and `l = floor(r * q)` (clamped
/// to `[0, q - 1]`), the emitted level is `l + 1` with probability
/// `r * q - l` and `l` otherwise. A zero vector maps to norm 0 with all
/// levels 0. Signs of zero entries are stored as `+1` so that round trips
/// are deterministic.
pub fn quantize<R: Rng + ?Sized>(
    g: &[f64],
    q: u32,
    rng: &mut R,
) -> Result<QuantizedGradient, QuantizeError> {
    if q < 1 {
        return Err(QuantizeError::LevelTooSmall(q));
    }
    for (index, &value) in g.iter().enumerate() {
        if !value.is_finite() {
            return Err(QuantizeError::NonFinite { index, value });
        }
    }

    let norm = l2_norm(g);
    if norm == 0.0 {
        return Ok(QuantizedGradient {
            norm: 0.0,
            signs: vec![1; g.len()],
            levels: vec![0; g.len()],
            q,
        });
    }

    let qf = f64::from(q);
    let mut signs = Vec::with_capacity(g.len());
    let mut levels = Vec::with_capacity(g.len());
    for &value in g {
        signs.push(if value < 0.0 { -1 } else { 1 });
        // Clamp the ratio before flooring to absorb rounding slightly above 1,
        // and clamp the interval index so r == 1 lands in the top interval and
        // rounds up with probability 1.
        let ratio = (value.abs() / norm).clamp(0.0, 1.0);
        let scaled = ratio * qf;
        let low = scaled.floor().min(qf - 1.0);
        let p_up = scaled - low;
        let level = if rng.random::<f64>() < p_up { low + 1.0 } else { low };
        levels.push(level as u32);
    }

    Ok(QuantizedGradient { norm, signs, levels, q })
}

/// Reconstructs the real-valued vector represented by `qg`.
pub fn dequantize(qg: &QuantizedGradient) -> Vec<f64> {
    let qf = f64::from(qg.q);
    qg.signs
        .iter()
        .zip(&qg.levels)
        .map(|(&sign, &level)| qg.norm * f64::from(sign) * f64::from(level) / qf)
        .collect()
}

/// Upload size in bits of one quantized gradient: `(1 + log2(q + 1)) * d`.
/// One sign bit per entry plus `log2(q + 1)` bits per level; the scalar norm
/// overhead is neglected. Fractional bit counts are allowed, matching the
/// rate model the latency accounting uses.
pub fn payload_bits(d: usize, q: u32) -> f64 {
    payload_bits_continuous(d, f64::from(q))
}

/// [`payload_bits`] for a relaxed, real-valued quantization level. The
/// optimizer works on the continuous relaxation before rounding.
pub fn payload_bits_continuous(d: usize, q: f64) -> f64 {
    (1.0 + (q + 1.0).log2()) * d as f64
}

fn l2_norm(g: &[f64]) -> f64 {
    g.iter().map(|v| v * v).sum::<f64>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stream_rng;
    use proptest::prelude::*;

    #[test]
    fn zero_vector_quantizes_to_zero() {
        let mut rng = stream_rng(1, 0);
        let qg = quantize(&[0.0, 0.0, 0.0], 4, &mut rng).unwrap();
        assert_eq!(qg.norm, 0.0);
        assert_eq!(qg.levels, vec![0, 0, 0]);
        assert_eq!(qg.signs, vec![1, 1, 1]);
        assert_eq!(dequantize(&qg), vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn boundary_ratios_are_deterministic() {
        // Ratios are exactly 1 and 0, so no stochastic rounding occurs.
        for seed in 0..20 {
            let mut rng = stream_rng(seed, 0);
            let qg = quantize(&[5.0, 0.0], 2, &mut rng).unwrap();
            assert_eq!(qg.norm, 5.0);
            assert_eq!(qg.levels, vec![2, 0]);
            assert_eq!(dequantize(&qg), vec![5.0, 0.0]);
        }
    }

    #[test]
    fn dequantize_reconstructs_boundary_case() {
        let qg = QuantizedGradient {
            norm: 5.0,
            signs: vec![1, 1],
            levels: vec![2, 0],
            q: 2,
        };
        assert_eq!(dequantize(&qg), vec![5.0, 0.0]);

        let zero = QuantizedGradient {
            norm: 0.0,
            signs: vec![1, -1],
            levels: vec![0, 0],
            q: 4,
        };
        assert_eq!(dequantize(&zero), vec![0.0, 0.0]);
    }

    #[test]
    fn non_finite_input_is_rejected() {
        let mut rng = stream_rng(1, 0);
        assert!(matches!(
            quantize(&[1.0, f64::NAN], 4, &mut rng),
            Err(QuantizeError::NonFinite { index: 1, .. })
        ));
        assert!(matches!(
            quantize(&[f64::INFINITY], 4, &mut rng),
            Err(QuantizeError::NonFinite { index: 0, .. })
        ));
        assert!(matches!(quantize(&[1.0], 0, &mut rng), Err(QuantizeError::LevelTooSmall(0))));
    }

    #[test]
    fn monte_carlo_mean_is_unbiased() {
        // E[Q(g)] = g: empirical mean over 1e5 draws stays within 3 standard
        // errors of the input, componentwise.
        let g = [3.0, 4.0];
        let q = 1;
        let draws = 100_000;
        let mut rng = stream_rng(42, 0);
        let mut sum = [0.0f64; 2];
        let mut sum_sq = [0.0f64; 2];
        for _ in 0..draws {
            let qg = quantize(&g, q, &mut rng).unwrap();
            let deq = dequantize(&qg);
            for i in 0..2 {
                sum[i] += deq[i];
                sum_sq[i] += deq[i] * deq[i];
            }
        }
        let n = draws as f64;
        for i in 0..2 {
            let mean = sum[i] / n;
            let var = (sum_sq[i] / n - mean * mean).max(0.0);
            let se = (var / n).sqrt();
            assert!(
                (mean - g[i]).abs() <= 3.0 * se,
                "component {i}: mean {mean} vs {ansatz}, se {se}",
                ansatz = g[i]
            );
        }
    }

    #[test]
    fn empirical_variance_respects_bound() {
        // E||Q(g) - g||^2 <= (sqrt(d)/q) ||g||^2 for d >= q^2, with a 1.05x
        // margin on the Monte Carlo estimate.
        let d = 64;
        let mut rng = stream_rng(7, 0);
        let g: Vec<f64> = (0..d).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
        let norm_sq: f64 = g.iter().map(|v| v * v).sum();
        for q in [2u32, 4, 8] {
            let draws = 4000;
            let mut acc = 0.0;
            for _ in 0..draws {
                let qg = quantize(&g, q, &mut rng).unwrap();
                let deq = dequantize(&qg);
                acc += deq
                    .iter()
                    .zip(&g)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>();
            }
            let mse = acc / draws as f64;
            let bound = (d as f64).sqrt() / f64::from(q) * norm_sq;
            assert!(
                mse <= 1.05 * bound,
                "q={q}: empirical {mse} exceeds bound {bound}"
            );
        }
    }

    #[test]
    fn payload_bits_examples() {
        assert_eq!(payload_bits(1024, 3), 3072.0);
        assert_eq!(payload_bits(1024, 7), 4096.0);
        let got = payload_bits(1, 2);
        assert!((got - (1.0 + 3f64.log2())).abs() < 1e-12, "got {got}");
    }

    #[test]
    fn identical_seed_gives_identical_output() {
        let g: Vec<f64> = (0..128).map(|i| ((i * 37) % 19) as f64 - 9.0).collect();
        let a = quantize(&g, 8, &mut stream_rng(99, 3)).unwrap();
        let b = quantize(&g, 8, &mut stream_rng(99, 3)).unwrap();
        assert_eq!(a, b);
    }

    proptest! {
        #[test]
        fn levels_stay_in_range(
            g in proptest::collection::vec(-1e6f64..1e6, 1..64),
            q in 1u32..64,
            seed in 0u64..1024,
        ) {
            let qg = quantize(&g, q, &mut stream_rng(seed, 0)).unwrap();
            prop_assert!(qg.levels.iter().all(|&l| l <= q));
            prop_assert_eq!(qg.levels.len(), g.len());
            // Dequantized magnitudes never exceed the stored norm.
            for v in dequantize(&qg) {
                prop_assert!(v.abs() <= qg.norm * (1.0 + 1e-12));
            }
        }

        #[test]
        fn zero_entries_keep_positive_sign(
            n in 1usize..32,
            q in 1u32..16,
            seed in 0u64..256,
        ) {
            let mut g = vec![0.0; n + 1];
            g[0] = 1.0;
            let qg = quantize(&g, q, &mut stream_rng(seed, 1)).unwrap();
            prop_assert!(qg.signs[1..].iter().all(|&s| s == 1));
            prop_assert!(qg.levels[1..].iter().all(|&l| l == 0));
        }
    }
}
