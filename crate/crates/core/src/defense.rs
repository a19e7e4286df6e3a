//! Training-phase gradient defenses (norm clipping, top-k compression,
//! Gaussian-mechanism DP noise) applied through the gradient interceptor,
//! plus the inference-phase embedding L2-norm monitor.

use ndarray::{Array1, Axis};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::engine::GradientTransform;
use crate::error::{Result, VflError};
use crate::nn::Matrix;

fn row_norm(row: ndarray::ArrayView1<f64>) -> f64 {
    row.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Norm-based gradient clipping parameterized by the proportion of rows
/// clipped rather than a fixed norm bound.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ClippingDefense {
    /// Fraction of batch rows clipped, in `[0, 1)`.
    pub clip_rate: f64,
}

/// Rescales rows whose L2 norm exceeds the `(1 - rate)` quantile of the
/// batch's row norms down to that quantile. Rate 0 is an exact identity.
pub fn clip_gradients(grads: &Matrix, rate: f64) -> Matrix {
    assert!((0.0..1.0).contains(&rate));
    let n = grads.nrows();
    if n == 0 || rate == 0.0 {
        return grads.clone();
    }
    let mut norms: Vec<f64> = grads.rows().into_iter().map(row_norm).collect();
    let clipped_count = (rate * n as f64).floor() as usize;
    let mut sorted = norms.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let threshold = sorted[n - 1 - clipped_count];

    let mut out = grads.clone();
    for (i, mut row) in out.rows_mut().into_iter().enumerate() {
        // the relative tolerance keeps repeated clipping a fixed point
        // despite rescaling round-off
        if norms[i] > threshold * (1.0 + 1e-12) {
            let scale = threshold / norms[i];
            row.mapv_inplace(|v| v * scale);
            norms[i] = threshold;
        }
    }
    out
}

/// Magnitude top-k gradient sparsification.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CompressionDefense {
    /// Fraction of entries zeroed per row, in `[0, 1)`.
    pub compression_rate: f64,
}

/// Zeroes the `floor(rate * d)` smallest-magnitude entries of each row,
/// breaking magnitude ties toward the lower index.
pub fn compress_gradients(grads: &Matrix, rate: f64) -> Matrix {
    assert!((0.0..1.0).contains(&rate));
    let d = grads.ncols();
    let dropped = (rate * d as f64).floor() as usize;
    if dropped == 0 {
        return grads.clone();
    }
    let mut out = grads.clone();
    let mut order: Vec<usize> = Vec::with_capacity(d);
    for mut row in out.rows_mut() {
        order.clear();
        order.extend(0..d);
        order.sort_by(|&a, &b| {
            row[a]
                .abs()
                .partial_cmp(&row[b].abs())
                .unwrap()
                .then(a.cmp(&b))
        });
        for &j in &order[..dropped] {
            row[j] = 0.0;
        }
    }
    out
}

/// Per-step Gaussian-mechanism differential privacy on routed gradients.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct DpDefense {
    /// Privacy budget, > 0; lower means stronger privacy (more noise).
    pub epsilon: f64,
    /// Mechanism failure probability, in (0, 1).
    pub delta: f64,
    /// Per-row L2 clipping bound applied before noising.
    pub clip_norm: f64,
}

impl DpDefense {
    /// Gaussian-mechanism noise scale `sqrt(2 ln(1.25/delta)) * C / epsilon`.
    pub fn noise_std(&self) -> f64 {
        (2.0 * (1.25 / self.delta).ln()).sqrt() * self.clip_norm / self.epsilon
    }
}

/// Clips each row to `clip_norm`, then adds i.i.d. `N(0, sigma^2)` noise.
/// Accounting is per-step only; no composition across steps.
pub fn dp_noise(grads: &Matrix, defense: &DpDefense, rng: &mut ChaCha8Rng) -> Matrix {
    assert!(defense.epsilon > 0.0);
    let sigma = defense.noise_std();
    let mut out = grads.clone();
    for mut row in out.rows_mut() {
        let norm = row_norm(row.view());
        if norm > defense.clip_norm {
            let scale = defense.clip_norm / norm;
            row.mapv_inplace(|v| v * scale);
        }
    }
    if sigma >= 1e-12 {
        let noise = Normal::new(0.0, sigma).expect("positive sigma");
        out.mapv_inplace(|v| v + noise.sample(rng));
    }
    out
}

impl GradientTransform for ClippingDefense {
    fn name(&self) -> &'static str {
        "clipping"
    }
    fn apply(&self, grads: &Matrix, _rng: &mut ChaCha8Rng) -> Matrix {
        clip_gradients(grads, self.clip_rate)
    }
}

impl GradientTransform for CompressionDefense {
    fn name(&self) -> &'static str {
        "compression"
    }
    fn apply(&self, grads: &Matrix, _rng: &mut ChaCha8Rng) -> Matrix {
        compress_gradients(grads, self.compression_rate)
    }
}

impl GradientTransform for DpDefense {
    fn name(&self) -> &'static str {
        "dp"
    }
    fn apply(&self, grads: &Matrix, rng: &mut ChaCha8Rng) -> Matrix {
        dp_noise(grads, self, rng)
    }
}

/// What the norm monitor substitutes for a flagged embedding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReplacementPolicy {
    /// The party's mean recorded training embedding.
    TrainingMean,
    Zero,
}

/// Inference-phase defense: flags any incoming embedding whose L2 norm
/// strictly exceeds the per-party maximum observed during training.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NormMonitor {
    /// Per-party max training-embedding norms, taken verbatim from the
    /// trained model's recorded values.
    pub thresholds: Vec<f64>,
    /// Per-party mean training embedding, used by [`ReplacementPolicy::TrainingMean`].
    pub training_means: Vec<Array1<f64>>,
    pub replacement_policy: ReplacementPolicy,
}

impl NormMonitor {
    pub fn from_trained(
        model: &crate::engine::TrainedVflModel,
        replacement_policy: ReplacementPolicy,
    ) -> Self {
        NormMonitor {
            thresholds: model.recorded_max_norms.clone(),
            training_means: model.recorded_mean_embeddings.clone(),
            replacement_policy,
        }
    }
}

/// Sanitizes per-party embeddings: rows with norm strictly above the party's
/// threshold are flagged and replaced; all others pass through bit-exactly.
pub fn monitor_embeddings(
    embeddings: &[Matrix],
    monitor: &NormMonitor,
) -> Result<(Vec<Matrix>, Vec<Vec<bool>>)> {
    if monitor.thresholds.len() < embeddings.len() {
        return Err(VflError::Config(format!(
            "norm monitor has thresholds for {} parties, got embeddings from {}",
            monitor.thresholds.len(),
            embeddings.len()
        )));
    }
    let mut sanitized = Vec::with_capacity(embeddings.len());
    let mut flags = Vec::with_capacity(embeddings.len());
    for (k, emb) in embeddings.iter().enumerate() {
        let threshold = monitor.thresholds[k];
        let mut party_flags = vec![false; emb.nrows()];
        let mut out = emb.clone();
        for (i, mut row) in out.rows_mut().into_iter().enumerate() {
            if row_norm(row.view()) > threshold {
                party_flags[i] = true;
                match monitor.replacement_policy {
                    ReplacementPolicy::TrainingMean => row.assign(&monitor.training_means[k]),
                    ReplacementPolicy::Zero => row.fill(0.0),
                }
            }
        }
        sanitized.push(out);
        flags.push(party_flags);
    }
    Ok((sanitized, flags))
}

#[allow(dead_code)]
fn _axis(_: Axis) {}
