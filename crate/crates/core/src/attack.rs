//! The triggerless backdoor attack: label inference over recorded
//! embeddings, density-center poison generation with amplification and
//! Gaussian perturbation, and dirty-/clean-label execution at inference time.

use ndarray::Array1;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::defense::NormMonitor;
use crate::engine::{infer_batch, TrainedVflModel};
use crate::error::{Result, VflError};
use crate::nn::{forward, Matrix, MlpModel};

/// The attacker's labeled auxiliary data, restricted to its own feature
/// columns. `sets` is the number of instances per class.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AuxiliaryData {
    pub features: Matrix,
    pub labels: Vec<usize>,
    pub sets: usize,
    /// Training-set row indices the auxiliary samples were drawn from.
    pub source_indices: Vec<usize>,
}

impl AuxiliaryData {
    pub fn num_classes(&self) -> usize {
        self.labels.iter().copied().max().map_or(0, |m| m + 1)
    }
}

/// How training labels are inferred from recorded embeddings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ClusteringMode {
    /// k-means seeded at the auxiliary class centers, at most 100 iterations.
    KMeans,
    /// A single nearest-aux-center assignment pass.
    NearestCenter,
}

/// Label-inference output: auxiliary class centers, per-sample inferred
/// labels, and the density centers recomputed from the assignment.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LabelCenters {
    /// Row i: mean auxiliary embedding of class i.
    pub aux_centers: Matrix,
    pub inferred_labels: Vec<usize>,
    /// Row i: mean recorded embedding over samples assigned label i.
    pub density_centers: Matrix,
    /// False for classes whose cluster ended up with no assigned samples;
    /// such rows keep their aux center and must not be attacked.
    pub valid: Vec<bool>,
    /// Per-dimension mean of each class's auxiliary embeddings.
    pub aux_mean: Matrix,
    /// Per-dimension standard deviation of each class's auxiliary embeddings.
    pub aux_std: Matrix,
}

impl LabelCenters {
    pub fn num_classes(&self) -> usize {
        self.density_centers.nrows()
    }
}

/// The malicious embedding collection plus the density centers it was built
/// from.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PoisonSet {
    pub target_label: usize,
    pub eta: f64,
    pub mu_scale: f64,
    pub sigma_scale: f64,
    pub poisons: Matrix,
    pub amplified_center: Array1<f64>,
    pub density_centers: Matrix,
    pub centers_valid: Vec<bool>,
}

/// Attack variant selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AttackMode {
    DirtyLabel,
    CleanLabel,
}

/// Full attack configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttackPlan {
    pub mode: AttackMode,
    /// Required for clean-label attacks; ignored otherwise.
    pub source_label: Option<usize>,
    pub target_label: usize,
    pub eta: f64,
    pub mu_scale: f64,
    pub sigma_scale: f64,
}

impl AttackPlan {
    pub fn validate(&self) -> Result<()> {
        if self.mode == AttackMode::CleanLabel {
            match self.source_label {
                None => {
                    return Err(VflError::Validation(
                        "clean-label attack requires a source label".into(),
                    ))
                }
                Some(s) if s == self.target_label => {
                    return Err(VflError::Validation(
                        "source label must differ from target label".into(),
                    ))
                }
                _ => {}
            }
        }
        if !self.eta.is_finite() || self.eta <= 0.0 {
            return Err(VflError::Validation("eta must be finite and positive".into()));
        }
        Ok(())
    }
}

/// The recommended amplification factor: 1.25 times the benign-to-attacker
/// ratio, floored at 1.
pub fn default_eta(num_passive: usize, num_attackers: usize) -> f64 {
    let attackers = num_attackers.max(1) as f64;
    let eta0 = (num_passive.saturating_sub(num_attackers)) as f64 / attackers;
    (1.25 * eta0).max(1.0)
}

fn class_stats(embeddings: &Matrix, labels: &[usize], num_classes: usize) -> Result<(Matrix, Matrix, Matrix)> {
    let d = embeddings.ncols();
    let mut centers = Matrix::zeros((num_classes, d));
    let mut sq = Matrix::zeros((num_classes, d));
    let mut counts = vec![0usize; num_classes];
    for (row, &label) in embeddings.rows().into_iter().zip(labels) {
        counts[label] += 1;
        for (j, &v) in row.iter().enumerate() {
            centers[(label, j)] += v;
            sq[(label, j)] += v * v;
        }
    }
    if let Some(missing) = counts.iter().position(|&c| c == 0) {
        return Err(VflError::Validation(format!(
            "auxiliary data has no instance of class {missing}"
        )));
    }
    let mut std = Matrix::zeros((num_classes, d));
    for i in 0..num_classes {
        let n = counts[i] as f64;
        for j in 0..d {
            centers[(i, j)] /= n;
            let var = (sq[(i, j)] / n - centers[(i, j)] * centers[(i, j)]).max(0.0);
            std[(i, j)] = var.sqrt();
        }
    }
    let mean = centers.clone();
    Ok((centers, mean, std))
}

fn assign_nearest(points: &Matrix, centers: &Matrix) -> Vec<usize> {
    points
        .rows()
        .into_iter()
        .map(|p| {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (i, c) in centers.rows().into_iter().enumerate() {
                let d: f64 = p.iter().zip(c.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
                if d < best_d {
                    best_d = d;
                    best = i;
                }
            }
            best
        })
        .collect()
}

fn recompute_centers(
    points: &Matrix,
    assignments: &[usize],
    previous: &Matrix,
) -> (Matrix, Vec<bool>) {
    let (k, d) = previous.dim();
    let mut sums = Matrix::zeros((k, d));
    let mut counts = vec![0usize; k];
    for (row, &a) in points.rows().into_iter().zip(assignments) {
        counts[a] += 1;
        sums.row_mut(a).scaled_add(1.0, &row);
    }
    let mut valid = vec![true; k];
    for i in 0..k {
        if counts[i] == 0 {
            // empty cluster keeps its seed center but is marked stale
            sums.row_mut(i).assign(&previous.row(i));
            valid[i] = false;
        } else {
            let n = counts[i] as f64;
            sums.row_mut(i).mapv_inplace(|v| v / n);
        }
    }
    (sums, valid)
}

/// Infers a label for every recorded embedding by clustering seeded at the
/// auxiliary class centers, and recomputes per-label density centers from
/// the assignment.
pub fn infer_labels(
    recorded: &Matrix,
    aux: &AuxiliaryData,
    bottom: &MlpModel,
    mode: ClusteringMode,
) -> Result<LabelCenters> {
    let num_classes = aux.num_classes();
    if num_classes == 0 {
        return Err(VflError::Validation("auxiliary data is empty".into()));
    }
    let (aux_embeddings, _) = forward(bottom, &aux.features)?;
    let (aux_centers, aux_mean, aux_std) = class_stats(&aux_embeddings, &aux.labels, num_classes)?;

    let mut assignments = assign_nearest(recorded, &aux_centers);
    let (mut centers, mut valid) = recompute_centers(recorded, &assignments, &aux_centers);

    if mode == ClusteringMode::KMeans {
        for _ in 1..100 {
            let next = assign_nearest(recorded, &centers);
            if next == assignments {
                break;
            }
            assignments = next;
            let (c, v) = recompute_centers(recorded, &assignments, &centers);
            centers = c;
            valid = v;
        }
    }

    Ok(LabelCenters {
        aux_centers,
        inferred_labels: assignments,
        density_centers: centers,
        valid,
        aux_mean,
        aux_std,
    })
}

/// Builds the poison set: the target's density center amplified by eta, plus
/// per-dimension Gaussian perturbations scaled from the target-class
/// auxiliary statistics.
pub fn generate_poisons(
    centers: &LabelCenters,
    plan: &AttackPlan,
    count: usize,
    rng: &mut ChaCha8Rng,
) -> Result<PoisonSet> {
    plan.validate()?;
    if count == 0 {
        return Err(VflError::Validation("poison count must be >= 1".into()));
    }
    let t = plan.target_label;
    if t >= centers.num_classes() {
        return Err(VflError::Validation(format!(
            "target label {t} out of range for {} classes",
            centers.num_classes()
        )));
    }
    if !centers.valid[t] {
        return Err(VflError::AttackAbort(format!(
            "density center for target label {t} had no assigned samples; refusing to poison from a stale center"
        )));
    }

    let amplified: Array1<f64> = centers.density_centers.row(t).mapv(|v| v * plan.eta);
    let d = amplified.len();
    let mut poisons = Matrix::zeros((count, d));
    for mut row in poisons.rows_mut() {
        for j in 0..d {
            let mean = plan.mu_scale * centers.aux_mean[(t, j)];
            let std = plan.sigma_scale * centers.aux_std[(t, j)];
            let delta = if std > 0.0 {
                Normal::new(mean, std)
                    .map_err(|e| VflError::Validation(format!("perturbation distribution: {e}")))?
                    .sample(rng)
            } else {
                mean
            };
            row[j] = amplified[j] + delta;
        }
    }
    if poisons.iter().any(|v| !v.is_finite()) {
        return Err(VflError::AttackAbort("generated poisons are not finite".into()));
    }

    Ok(PoisonSet {
        target_label: t,
        eta: plan.eta,
        mu_scale: plan.mu_scale,
        sigma_scale: plan.sigma_scale,
        poisons,
        amplified_center: amplified,
        density_centers: centers.density_centers.clone(),
        centers_valid: centers.valid.clone(),
    })
}

fn similarity_label(row: ndarray::ArrayView1<f64>, centers: &Matrix) -> usize {
    let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
    let mut best = 0;
    let mut best_s = f64::NEG_INFINITY;
    for (i, c) in centers.rows().into_iter().enumerate() {
        let dot: f64 = row.iter().zip(c.iter()).map(|(a, b)| a * b).sum();
        let c_norm = c.iter().map(|v| v * v).sum::<f64>().sqrt();
        // zero-norm embeddings make cosine degenerate; fall back to the dot
        // product (all-zero resolves to label 0 by tie-break)
        let s = if norm > 0.0 && c_norm > 0.0 {
            dot / (norm * c_norm)
        } else {
            dot
        };
        if s > best_s {
            best_s = s;
            best = i;
        }
    }
    best
}

/// Marks the samples whose attacker embedding is most similar (cosine) to the
/// source label's density center.
pub fn identify_sources(
    embeddings: &Matrix,
    centers: &LabelCenters,
    source_label: usize,
) -> Result<Vec<bool>> {
    if source_label >= centers.num_classes() {
        return Err(VflError::Validation(format!(
            "source label {source_label} out of range"
        )));
    }
    if centers.valid.iter().any(|v| !v) {
        return Err(VflError::Validation(
            "density centers contain stale (empty-cluster) rows; cannot identify sources".into(),
        ));
    }
    Ok(embeddings
        .rows()
        .into_iter()
        .map(|row| similarity_label(row, &centers.density_centers) == source_label)
        .collect())
}

/// Attack execution output.
#[derive(Debug, Clone)]
pub struct AttackOutcome {
    pub predictions: Vec<usize>,
    pub manipulated: Vec<bool>,
    /// Per-party monitor flags when a norm monitor intercepted inference.
    pub flags: Option<Vec<Vec<bool>>>,
}

/// Runs the backdoor at inference time: substitutes poison rows for the
/// attacker's embeddings (all samples in dirty-label mode, identified source
/// samples in clean-label mode) and returns the active party's predictions
/// together with the manipulation mask. The trained model is never modified.
pub fn execute_attack(
    model: &TrainedVflModel,
    plan: &AttackPlan,
    test_features: &Matrix,
    poison_set: &PoisonSet,
    monitor: Option<&NormMonitor>,
) -> Result<AttackOutcome> {
    plan.validate()?;
    if poison_set.poisons.nrows() == 0 {
        return Err(VflError::Validation("poison set is empty".into()));
    }
    let attacker = model
        .attacker_index()
        .ok_or_else(|| VflError::Validation("model has no attacker party".into()))?;

    let honest = model.attacker_embeddings(test_features)?;
    let manipulated: Vec<bool> = match plan.mode {
        AttackMode::DirtyLabel => vec![true; honest.nrows()],
        AttackMode::CleanLabel => {
            let centers = LabelCenters {
                aux_centers: poison_set.density_centers.clone(),
                inferred_labels: vec![],
                density_centers: poison_set.density_centers.clone(),
                valid: poison_set.centers_valid.clone(),
                aux_mean: Matrix::zeros(poison_set.density_centers.dim()),
                aux_std: Matrix::zeros(poison_set.density_centers.dim()),
            };
            identify_sources(&honest, &centers, plan.source_label.unwrap())?
        }
    };

    let mut substituted = honest;
    let mut cursor = 0;
    for (i, &hit) in manipulated.iter().enumerate() {
        if hit {
            substituted
                .row_mut(i)
                .assign(&poison_set.poisons.row(cursor % poison_set.poisons.nrows()));
            cursor += 1;
        }
    }

    let mut overrides: Vec<Option<Matrix>> = vec![None; model.num_parties()];
    overrides[attacker] = Some(substituted);
    let out = infer_batch(model, test_features, &overrides, monitor)?;

    Ok(AttackOutcome {
        predictions: out.predictions,
        manipulated,
        flags: out.flags,
    })
}
