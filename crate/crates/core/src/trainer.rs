//! Quantized FedSGD simulation.
//!
//! Synthetic sparse-feature data generation, the l2-regularized logistic
//! loss in base-2 (`log2(1 + exp(-y x'w)) + lambda ||w||^2`) with its
//! analytic gradient, and the round loop where each device uploads a
//! stochastically quantized minibatch gradient and the server averages.
//!
//! Randomness is explicit: every run is keyed by a single seed, from which
//! per-device streams are pre-split (stream `2k` drives device `k`'s
//! minibatch selection, stream `2k + 1` its quantizer), so per-device work
//! could run in parallel and still reproduce the sequential result.

use crate::quantizer::{self, QuantizeError};
use crate::stream_rng;
use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::StandardNormal;
use std::f64::consts::LN_2;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training diverged at round {round}: loss {loss}")]
    Diverged { round: usize, loss: f64 },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid parameter: {0}")]
    InvalidParam(String),
    #[error(transparent)]
    Quantize(#[from] QuantizeError),
}

/// Labeled samples: a row per sample, labels in {-1, +1}.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Array2<f64>,
    pub labels: Array1<f64>,
}

impl Dataset {
    pub fn n_samples(&self) -> usize {
        self.features.nrows()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if self.features.nrows() != self.labels.len() {
            return Err(TrainError::ShapeMismatch(format!(
                "{} feature rows vs {} labels",
                self.features.nrows(),
                self.labels.len()
            )));
        }
        if self.features.iter().any(|v| !v.is_finite()) {
            return Err(TrainError::InvalidParam("non-finite feature".into()));
        }
        if self.labels.iter().any(|&y| y != 1.0 && y != -1.0) {
            return Err(TrainError::InvalidParam("labels must be +1 or -1".into()));
        }
        Ok(())
    }
}

/// Learning-rate rule `n -> eta_n`, with `n` the 0-based round index.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Schedule {
    /// `eta_n = scale / (n + shift)`.
    Decaying { scale: f64, shift: f64 },
    Constant(f64),
}

impl Schedule {
    pub fn eta(&self, round: usize) -> f64 {
        match *self {
            Schedule::Decaying { scale, shift } => scale / (round as f64 + shift),
            Schedule::Constant(eta) => eta,
        }
    }
}

/// Per-round global training loss of one run, `losses[j] = F(w^(j+1))`
/// (the loss after update `j + 1`), so the length equals the number of
/// rounds executed.
#[derive(Debug, Clone, PartialEq)]
pub struct LossTrace {
    pub losses: Vec<f64>,
    pub q: u32,
    pub seed: u64,
}

impl LossTrace {
    pub fn len(&self) -> usize {
        self.losses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.losses.is_empty()
    }

    /// Pointwise mean across runs of the same length (same q, different
    /// seeds). The result carries the first trace's q and seed.
    pub fn mean_of(traces: &[LossTrace]) -> LossTrace {
        assert!(!traces.is_empty(), "cannot average zero traces");
        let n = traces[0].losses.len();
        assert!(
            traces.iter().all(|t| t.losses.len() == n),
            "traces must have equal length"
        );
        let mut losses = vec![0.0; n];
        for t in traces {
            for (acc, v) in losses.iter_mut().zip(&t.losses) {
                *acc += v;
            }
        }
        for v in &mut losses {
            *v /= traces.len() as f64;
        }
        LossTrace { losses, q: traces[0].q, seed: traces[0].seed }
    }

    /// CSV with a header row and 1-based round indices.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("round,loss\n");
        for (i, v) in self.losses.iter().enumerate() {
            out.push_str(&format!("{},{}\n", i + 1, v));
        }
        out
    }

    pub fn filename(&self) -> String {
        format!("trace_q{}_seed{}.csv", self.q, self.seed)
    }
}

/// Generates `n_samples` synthetic points in four steps: dense Gaussian
/// draw, per-dimension magnitude draw (scaled by `delta1` when at most
/// `delta2`), feature rescaling, and labeling by the sign of the projection
/// of the *pre-rescaling* features onto a Gaussian ground-truth model.
/// Returns the dataset and that ground-truth model.
pub fn generate_synthetic<R: Rng + ?Sized>(
    d: usize,
    n_samples: usize,
    delta1: f64,
    delta2: f64,
    rng: &mut R,
) -> (Dataset, Array1<f64>) {
    let mut dense = Array2::<f64>::zeros((n_samples, d));
    for v in dense.iter_mut() {
        *v = rng.sample(StandardNormal);
    }

    let mut magnitude = Array1::<f64>::zeros(d);
    for m in magnitude.iter_mut() {
        let theta: f64 = rng.random();
        *m = if theta <= delta2 { delta1 * theta } else { theta };
    }

    let mut model = Array1::<f64>::zeros(d);
    for v in model.iter_mut() {
        *v = rng.sample(StandardNormal);
    }

    let mut labels = Array1::<f64>::zeros(n_samples);
    for (i, y) in labels.iter_mut().enumerate() {
        let margin = dense.row(i).dot(&model);
        *y = if margin < 0.0 { -1.0 } else { 1.0 };
    }

    let mut features = dense;
    for mut row in features.rows_mut() {
        for (v, m) in row.iter_mut().zip(magnitude.iter()) {
            *v *= m;
        }
    }

    (Dataset { features, labels }, model)
}

/// Splits `data` into `k` equally sized shards after a seeded shuffle.
/// Leftover samples (when `n` is not divisible by `k`) are dropped so shard
/// sizes stay uniform.
pub fn shard_dataset<R: Rng + ?Sized>(data: &Dataset, k: usize, rng: &mut R) -> Vec<Dataset> {
    assert!(k >= 1, "need at least one shard");
    let n = data.n_samples();
    let per = n / k;
    assert!(per >= 1, "not enough samples for {k} shards");
    let mut order: Vec<usize> = (0..n).collect();
    // Fisher-Yates driven by the explicit rng.
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    (0..k)
        .map(|s| {
            let idx = &order[s * per..(s + 1) * per];
            let mut features = Array2::<f64>::zeros((per, data.dim()));
            let mut labels = Array1::<f64>::zeros(per);
            for (row, &src) in idx.iter().enumerate() {
                features.row_mut(row).assign(&data.features.row(src));
                labels[row] = data.labels[src];
            }
            Dataset { features, labels }
        })
        .collect()
}

// log2(1 + e^z) evaluated without overflow.
fn softplus_log2(z: f64) -> f64 {
    if z > 35.0 {
        z / LN_2
    } else {
        z.exp().ln_1p() / LN_2
    }
}

/// Mean base-2 logistic loss over the shard plus `lambda ||w||^2`.
pub fn local_loss(w: &Array1<f64>, shard: &Dataset, lambda: f64) -> f64 {
    let margins = shard.features.dot(w);
    let mut acc = 0.0;
    for (m, &y) in margins.iter().zip(shard.labels.iter()) {
        acc += softplus_log2(-y * m);
    }
    acc / shard.n_samples() as f64 + lambda * w.dot(w)
}

/// Mean gradient of the base-2 logistic loss over the rows `indices` of
/// `shard`, plus `2 lambda w`. The per-sample gradient is
/// `-(1/ln 2) * sigma(-y x'w) * y * x`.
pub fn local_gradient(
    w: &Array1<f64>,
    shard: &Dataset,
    indices: &[usize],
    lambda: f64,
) -> Array1<f64> {
    let mut grad = Array1::<f64>::zeros(w.len());
    for &i in indices {
        let x = shard.features.row(i);
        let y = shard.labels[i];
        let margin = y * x.dot(w);
        // sigma(-margin) = 1 / (1 + e^margin); exp overflow saturates to 0.
        let coeff = -(1.0 / LN_2) * y / (1.0 + margin.exp());
        grad.scaled_add(coeff, &x);
    }
    grad.mapv_inplace(|v| v / indices.len() as f64);
    grad.scaled_add(2.0 * lambda, w);
    grad
}

/// Full-shard gradient (every row used once).
pub fn full_gradient(w: &Array1<f64>, shard: &Dataset, lambda: f64) -> Array1<f64> {
    let all: Vec<usize> = (0..shard.n_samples()).collect();
    local_gradient(w, shard, &all, lambda)
}

/// Global training loss: mean of the local losses over all shards.
pub fn global_loss(w: &Array1<f64>, shards: &[Dataset], lambda: f64) -> f64 {
    shards.iter().map(|s| local_loss(w, s, lambda)).sum::<f64>() / shards.len() as f64
}

/// First index `n` with `trace[n] - f_star <= epsilon`, scanning from the
/// front; `None` when the gap never closes.
pub fn rounds_to_gap(trace: &[f64], f_star: f64, epsilon: f64) -> Option<usize> {
    trace.iter().position(|&f| f - f_star <= epsilon)
}

/// Runs quantized FedSGD for exactly `rounds` rounds from `w = 0` and
/// records the global training loss after every update.
#[allow(clippy::too_many_arguments)]
pub fn run_feel(
    shards: &[Dataset],
    q: u32,
    rounds: usize,
    schedule: &Schedule,
    minibatch: usize,
    lambda: f64,
    seed: u64,
) -> Result<LossTrace, TrainError> {
    run_feel_inner(shards, q, rounds, schedule, minibatch, lambda, seed, None)
}

/// Like [`run_feel`], but stops as soon as the loss reaches
/// `f_star + epsilon`. The returned trace ends at the crossing round (its
/// length is then the number of rounds the threshold took), or at
/// `max_rounds` if the threshold was never met.
#[allow(clippy::too_many_arguments)]
pub fn run_feel_until(
    shards: &[Dataset],
    q: u32,
    max_rounds: usize,
    schedule: &Schedule,
    minibatch: usize,
    lambda: f64,
    seed: u64,
    f_star: f64,
    epsilon: f64,
) -> Result<LossTrace, TrainError> {
    run_feel_inner(
        shards,
        q,
        max_rounds,
        schedule,
        minibatch,
        lambda,
        seed,
        Some(f_star + epsilon),
    )
}

#[allow(clippy::too_many_arguments)]
fn run_feel_inner(
    shards: &[Dataset],
    q: u32,
    rounds: usize,
    schedule: &Schedule,
    minibatch: usize,
    lambda: f64,
    seed: u64,
    stop_at: Option<f64>,
) -> Result<LossTrace, TrainError> {
    if shards.is_empty() {
        return Err(TrainError::InvalidParam("need at least one device".into()));
    }
    if q < 2 {
        return Err(TrainError::InvalidParam(format!("quantization level must be >= 2, got {q}")));
    }
    if rounds < 1 {
        return Err(TrainError::InvalidParam("need at least one round".into()));
    }
    let d = shards[0].dim();
    if shards.iter().any(|s| s.dim() != d) {
        return Err(TrainError::ShapeMismatch("shards disagree on dimension".into()));
    }

    let k = shards.len();
    let mut batch_rngs: Vec<_> = (0..k).map(|i| stream_rng(seed, 2 * i as u64)).collect();
    let mut quant_rngs: Vec<_> = (0..k).map(|i| stream_rng(seed, 2 * i as u64 + 1)).collect();

    let mut w = Array1::<f64>::zeros(d);
    let initial_loss = global_loss(&w, shards, lambda);
    let mut losses = Vec::new();

    for round in 0..rounds {
        let eta = schedule.eta(round);
        let mut aggregate = Array1::<f64>::zeros(d);
        for dev in 0..k {
            let shard = &shards[dev];
            let indices = draw_minibatch(shard.n_samples(), minibatch, &mut batch_rngs[dev]);
            let grad = local_gradient(&w, shard, &indices, lambda);
            let qg = quantizer::quantize(grad.as_slice().expect("contiguous"), q, &mut quant_rngs[dev])?;
            let deq = quantizer::dequantize(&qg);
            for (a, v) in aggregate.iter_mut().zip(&deq) {
                *a += v;
            }
        }
        w.scaled_add(-eta / k as f64, &aggregate);

        let loss = global_loss(&w, shards, lambda);
        if !loss.is_finite() || loss > 1e3 * initial_loss {
            return Err(TrainError::Diverged { round: round + 1, loss });
        }
        losses.push(loss);
        if let Some(threshold) = stop_at {
            if loss <= threshold {
                break;
            }
        }
    }

    Ok(LossTrace { losses, q, seed })
}

fn draw_minibatch<R: Rng + ?Sized>(n: usize, minibatch: usize, rng: &mut R) -> Vec<usize> {
    if minibatch >= n {
        (0..n).collect()
    } else {
        rand::seq::index::sample(rng, n, minibatch).into_vec()
    }
}

/// Baseline estimate of the optimal loss: full-batch unquantized gradient
/// descent run until the relative loss change stalls below `rel_tol`.
/// The step size comes from a power-iteration bound on the smoothness
/// constant. Returns the final model and its global loss.
pub fn reference_optimum(
    shards: &[Dataset],
    lambda: f64,
    rel_tol: f64,
    max_iters: usize,
) -> (Array1<f64>, f64) {
    assert!(!shards.is_empty());
    let d = shards[0].dim();
    let total: usize = shards.iter().map(Dataset::n_samples).sum();

    // sigma_max(X)^2 over the pooled data via power iteration on X'X.
    let mut v = Array1::<f64>::from_elem(d, 1.0 / (d as f64).sqrt());
    let mut sigma_sq = 1.0;
    for _ in 0..60 {
        let mut next = Array1::<f64>::zeros(d);
        for s in shards {
            let xv = s.features.dot(&v);
            next += &s.features.t().dot(&xv);
        }
        sigma_sq = next.dot(&v);
        let norm = next.dot(&next).sqrt();
        if norm == 0.0 {
            break;
        }
        next.mapv_inplace(|x| x / norm);
        v = next;
    }
    // Smoothness of the mean base-2 logistic loss plus the ridge term.
    let lipschitz = sigma_sq / (4.0 * LN_2 * total as f64) + 2.0 * lambda;
    let step = 1.0 / lipschitz;

    let mut w = Array1::<f64>::zeros(d);
    let mut prev = global_loss(&w, shards, lambda);
    for _ in 0..max_iters {
        let mut grad = Array1::<f64>::zeros(d);
        for s in shards {
            grad += &full_gradient(&w, s, lambda);
        }
        grad.mapv_inplace(|g| g / shards.len() as f64);
        w.scaled_add(-step, &grad);
        let loss = global_loss(&w, shards, lambda);
        if (prev - loss).abs() <= rel_tol * prev.abs().max(1e-300) {
            return (w, loss);
        }
        prev = loss;
    }
    (w, prev)
}
