//! The aggVFL split-model protocol: K passive parties with bottom models,
//! one active party with the top model, per-batch embedding aggregation,
//! embedding-gradient routing, and the attacker's passive recorder.
//!
//! Recording never draws from the random streams or touches parameters, so a
//! run with recording enabled is bit-identical to one without.

use ndarray::{concatenate, Array1, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::defense::{monitor_embeddings, NormMonitor};
use crate::error::{Result, VflError};
use crate::nn::{
    self, backward, forward, sgd_step, softmax_cross_entropy, Activation, Matrix, MlpModel,
};

/// One passive party's configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PartySpec {
    pub party_id: usize,
    /// Global feature-column indices owned by this party.
    pub feature_columns: Vec<usize>,
    /// Output dimension of each bottom-model layer; the last entry is the
    /// embedding dimension. All bottom layers use ReLU.
    pub bottom_layers: Vec<usize>,
    pub learning_rate: f64,
    pub is_attacker: bool,
}

/// The active party's configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ActiveSpec {
    /// Hidden layer dimensions of the top model (ReLU); a final identity
    /// layer to `num_classes` logits is always appended.
    pub top_hidden: Vec<usize>,
    pub learning_rate: f64,
    pub num_classes: usize,
}

/// Everything a finished training run leaves behind.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainedVflModel {
    pub bottoms: Vec<MlpModel>,
    pub top: MlpModel,
    pub parties: Vec<PartySpec>,
    pub num_classes: usize,
    /// The attacker's per-sample embeddings snapshotted at the end of the
    /// recorded epoch (training-set order). Empty when no party is flagged
    /// as attacker.
    pub recorded_embeddings: Matrix,
    /// Per-party maximum training-set embedding L2 norm at the end of the
    /// final epoch.
    pub recorded_max_norms: Vec<f64>,
    /// Per-party mean training-set embedding at the end of the final epoch.
    pub recorded_mean_embeddings: Vec<Array1<f64>>,
}

impl TrainedVflModel {
    pub fn attacker_index(&self) -> Option<usize> {
        self.parties.iter().position(|p| p.is_attacker)
    }

    pub fn num_parties(&self) -> usize {
        self.parties.len()
    }

    pub fn embedding_dim(&self, party: usize) -> usize {
        self.bottoms[party].out_dim()
    }

    /// The attacker's bottom model applied to attacker-column features.
    pub fn attacker_embeddings(&self, features: &Matrix) -> Result<Matrix> {
        let a = self
            .attacker_index()
            .ok_or_else(|| VflError::Validation("no attacker party in this run".into()))?;
        let party_input = features.select(Axis(1), &self.parties[a].feature_columns);
        Ok(forward(&self.bottoms[a], &party_input)?.0)
    }
}

/// A defense transform applied to embedding gradients before they are routed
/// back to a passive party.
pub trait GradientTransform {
    fn name(&self) -> &'static str;
    fn apply(&self, grads: &Matrix, rng: &mut ChaCha8Rng) -> Matrix;
}

/// Ordered chain of gradient transforms; the empty chain is the identity.
#[derive(Default)]
pub struct GradientInterceptor {
    pub transforms: Vec<Box<dyn GradientTransform>>,
}

impl GradientInterceptor {
    pub fn identity() -> Self {
        Self::default()
    }

    pub fn with(transforms: Vec<Box<dyn GradientTransform>>) -> Self {
        GradientInterceptor { transforms }
    }

    pub fn apply(&self, grads: &Matrix, rng: &mut ChaCha8Rng) -> Matrix {
        let mut out = grads.clone();
        for t in &self.transforms {
            let next = t.apply(&out, rng);
            debug_assert_eq!(next.dim(), out.dim(), "transform {} changed shape", t.name());
            out = next;
        }
        out
    }
}

/// Training-run knobs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainSettings {
    pub epochs: usize,
    pub batch_size: usize,
    /// Epoch (0-based) whose embeddings the attacker keeps; `None` means the
    /// final epoch.
    pub record_epoch: Option<usize>,
}

/// Column-wise concatenation of per-party embeddings in party order.
pub fn aggregate(party_embeddings: &[Matrix]) -> Result<Matrix> {
    if party_embeddings.is_empty() {
        return Err(VflError::Protocol("aggregate: no party embeddings".into()));
    }
    let rows = party_embeddings[0].nrows();
    if let Some(bad) = party_embeddings.iter().find(|e| e.nrows() != rows) {
        return Err(VflError::Protocol(format!(
            "aggregate: row count mismatch ({} vs {})",
            rows,
            bad.nrows()
        )));
    }
    let views: Vec<_> = party_embeddings.iter().map(|e| e.view()).collect();
    Ok(concatenate(Axis(1), &views).expect("row counts checked"))
}

fn validate_parties(parties: &[PartySpec], total_features: usize) -> Result<()> {
    if parties.is_empty() {
        return Err(VflError::Validation("at least one passive party required".into()));
    }
    let mut all: Vec<usize> = parties
        .iter()
        .flat_map(|p| p.feature_columns.iter().copied())
        .collect();
    all.sort_unstable();
    if all != (0..total_features).collect::<Vec<_>>() {
        return Err(VflError::Validation(
            "party feature columns must partition the feature space without overlap".into(),
        ));
    }
    if parties.iter().filter(|p| p.is_attacker).count() > 1 {
        return Err(VflError::Validation("at most one attacker per run".into()));
    }
    Ok(())
}

fn bottom_activations(layers: &[usize]) -> Vec<Activation> {
    vec![Activation::ReLU; layers.len()]
}

struct Recorder {
    attacker: Option<usize>,
    attacker_embeddings: Matrix,
    max_norms: Vec<f64>,
    sums: Vec<Array1<f64>>,
    count: usize,
}

impl Recorder {
    fn new(parties: &[PartySpec], n: usize) -> Self {
        let attacker = parties.iter().position(|p| p.is_attacker);
        let attacker_dim = attacker.map_or(0, |a| *parties[a].bottom_layers.last().unwrap());
        Recorder {
            attacker,
            attacker_embeddings: Matrix::zeros((if attacker.is_some() { n } else { 0 }, attacker_dim)),
            max_norms: parties
                .iter()
                .map(|_| 0.0)
                .collect(),
            sums: parties
                .iter()
                .map(|p| Array1::zeros(*p.bottom_layers.last().unwrap()))
                .collect(),
            count: 0,
        }
    }

    fn observe_norms(&mut self, party: usize, embeddings: &Matrix) {
        for row in embeddings.rows() {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > self.max_norms[party] {
                self.max_norms[party] = norm;
            }
        }
        self.sums[party] += &embeddings.sum_axis(Axis(0));
        if party == 0 {
            self.count += embeddings.nrows();
        }
    }

    fn observe_attacker(&mut self, party: usize, batch_indices: &[usize], embeddings: &Matrix) {
        if self.attacker == Some(party) {
            for (row, &global) in batch_indices.iter().enumerate() {
                self.attacker_embeddings
                    .row_mut(global)
                    .assign(&embeddings.row(row));
            }
        }
    }

    fn means(&self) -> Vec<Array1<f64>> {
        let n = self.count.max(1) as f64;
        self.sums.iter().map(|s| s / n).collect()
    }
}

fn record_sweep(
    features: &Matrix,
    parties: &[PartySpec],
    bottoms: &[MlpModel],
    recorder: &mut Recorder,
    embeddings_pass: bool,
    norms_pass: bool,
) -> Result<()> {
    if !embeddings_pass && !norms_pass {
        return Ok(());
    }
    let n = features.nrows();
    for start in (0..n).step_by(4096) {
        let batch: Vec<usize> = (start..(start + 4096).min(n)).collect();
        let batch_features = features.select(Axis(0), &batch);
        for (k, party) in parties.iter().enumerate() {
            let input = batch_features.select(Axis(1), &party.feature_columns);
            let (emb, _) = forward(&bottoms[k], &input)?;
            if embeddings_pass {
                recorder.observe_attacker(k, &batch, &emb);
            }
            if norms_pass {
                recorder.observe_norms(k, &emb);
            }
        }
    }
    Ok(())
}

/// Outcome of a full training run.
pub struct TrainOutcome {
    pub model: TrainedVflModel,
    pub epoch_losses: Vec<f64>,
}

/// Runs the full aggVFL training protocol.
///
/// Per batch: each party computes embeddings over its column slice, the
/// active party aggregates them, computes the loss, updates the top model,
/// and routes each party's embedding-gradient slice (after the interceptor)
/// back for that party's own SGD step at its own learning rate.
pub fn train(
    features: &Matrix,
    labels: &[usize],
    parties: &[PartySpec],
    active: &ActiveSpec,
    settings: &TrainSettings,
    interceptor: &GradientInterceptor,
    seed: u64,
) -> Result<TrainOutcome> {
    validate_parties(parties, features.ncols())?;
    if labels.len() != features.nrows() {
        return Err(VflError::Validation("labels/features length mismatch".into()));
    }
    if settings.batch_size == 0 {
        return Err(VflError::Validation("batch size must be >= 1".into()));
    }

    // Separate deterministic streams: init, shuffling, defense noise.
    let mut init_rng = ChaCha8Rng::seed_from_u64(seed);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(seed);
    shuffle_rng.set_stream(1);
    let mut defense_rng = ChaCha8Rng::seed_from_u64(seed);
    defense_rng.set_stream(2);

    let mut bottoms: Vec<MlpModel> = parties
        .iter()
        .map(|p| {
            MlpModel::init(
                p.feature_columns.len(),
                &p.bottom_layers,
                &bottom_activations(&p.bottom_layers),
                &mut init_rng,
            )
        })
        .collect();
    let agg_dim: usize = parties.iter().map(|p| *p.bottom_layers.last().unwrap()).sum();
    let mut top_dims = active.top_hidden.clone();
    let mut top_acts = vec![Activation::ReLU; active.top_hidden.len()];
    top_dims.push(active.num_classes);
    top_acts.push(Activation::Identity);
    let mut top = MlpModel::init(agg_dim, &top_dims, &top_acts, &mut init_rng);

    let n = features.nrows();
    let record_epoch = settings
        .record_epoch
        .unwrap_or(settings.epochs.saturating_sub(1))
        .min(settings.epochs.saturating_sub(1));
    let final_epoch = settings.epochs.saturating_sub(1);

    let mut recorder = Recorder::new(parties, n);
    let mut epoch_losses = Vec::with_capacity(settings.epochs);
    let mut order: Vec<usize> = (0..n).collect();

    for epoch in 0..settings.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;

        for (batch_no, batch) in order.chunks(settings.batch_size).enumerate() {
            let batch_features = features.select(Axis(0), batch);
            let batch_labels: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();

            // passive parties: forward
            let mut embeddings = Vec::with_capacity(parties.len());
            let mut caches = Vec::with_capacity(parties.len());
            for (k, party) in parties.iter().enumerate() {
                let input = batch_features.select(Axis(1), &party.feature_columns);
                let (emb, cache) = forward(&bottoms[k], &input)?;
                embeddings.push(emb);
                caches.push(cache);
            }

            // active party: aggregate, loss, top update
            let aggregated = aggregate(&embeddings)?;
            let (logits, top_cache) = forward(&top, &aggregated)?;
            let (loss, grad_logits) = softmax_cross_entropy(&logits, &batch_labels)?;
            if !loss.is_finite() {
                return Err(VflError::Divergence {
                    epoch,
                    batch: batch_no,
                });
            }
            epoch_loss += loss * batch.len() as f64;
            let (top_grads, grad_aggregated) = backward(&top, &top_cache, &grad_logits)?;
            sgd_step(&mut top, &top_grads, active.learning_rate);

            // route embedding gradients back through the interceptor
            let mut offset = 0;
            for (k, party) in parties.iter().enumerate() {
                let dim = embeddings[k].ncols();
                let slice = grad_aggregated
                    .slice(ndarray::s![.., offset..offset + dim])
                    .to_owned();
                offset += dim;
                let routed = interceptor.apply(&slice, &mut defense_rng);
                let (grads, _) = backward(&bottoms[k], &caches[k], &routed)?;
                sgd_step(&mut bottoms[k], &grads, party.learning_rate);
            }
        }
        epoch_losses.push(epoch_loss / n as f64);

        // Recording happens in a clean forward pass with the weights as they
        // stand at the end of the epoch, so the attacker's snapshot and any
        // embeddings it derives later share one geometry.
        record_sweep(
            features,
            parties,
            &bottoms,
            &mut recorder,
            epoch == record_epoch,
            epoch == final_epoch,
        )?;
    }

    // With zero epochs there is no trained state, so snapshot the
    // initialized model instead.
    if settings.epochs == 0 {
        record_sweep(features, parties, &bottoms, &mut recorder, true, true)?;
    }

    let recorded_mean_embeddings = recorder.means();
    Ok(TrainOutcome {
        model: TrainedVflModel {
            bottoms,
            top,
            parties: parties.to_vec(),
            num_classes: active.num_classes,
            recorded_embeddings: recorder.attacker_embeddings,
            recorded_max_norms: recorder.max_norms,
            recorded_mean_embeddings,
        },
        epoch_losses,
    })
}

/// Inference output: predictions plus per-party monitor flags when a norm
/// monitor was active.
#[derive(Debug, Clone)]
pub struct InferenceOutput {
    pub predictions: Vec<usize>,
    pub flags: Option<Vec<Vec<bool>>>,
}

fn argmax_rows(logits: &Matrix) -> Vec<usize> {
    logits
        .rows()
        .into_iter()
        .map(|row| {
            let mut best = 0;
            let mut best_v = f64::NEG_INFINITY;
            for (j, &v) in row.iter().enumerate() {
                if v > best_v {
                    best_v = v;
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Runs the inference protocol over a feature batch. `overrides[k]`, when
/// present, substitutes party `k`'s embeddings wholesale (the attack's entry
/// point); the optional monitor sanitizes embeddings before aggregation.
pub fn infer_batch(
    model: &TrainedVflModel,
    features: &Matrix,
    overrides: &[Option<Matrix>],
    monitor: Option<&NormMonitor>,
) -> Result<InferenceOutput> {
    if !overrides.is_empty() && overrides.len() != model.num_parties() {
        return Err(VflError::Protocol(format!(
            "overrides for {} parties, model has {}",
            overrides.len(),
            model.num_parties()
        )));
    }

    let mut embeddings = Vec::with_capacity(model.num_parties());
    for (k, party) in model.parties.iter().enumerate() {
        let override_k = overrides.get(k).and_then(|o| o.as_ref());
        let emb = match override_k {
            Some(sub) => {
                let expected = (features.nrows(), model.embedding_dim(k));
                if sub.dim() != expected {
                    return Err(VflError::Protocol(format!(
                        "override for party {k} has shape {:?}, expected {:?}",
                        sub.dim(),
                        expected
                    )));
                }
                sub.clone()
            }
            None => {
                let input = features.select(Axis(1), &party.feature_columns);
                forward(&model.bottoms[k], &input)?.0
            }
        };
        embeddings.push(emb);
    }

    let (embeddings, flags) = match monitor {
        Some(m) => {
            let (sanitized, flags) = monitor_embeddings(&embeddings, m)?;
            (sanitized, Some(flags))
        }
        None => (embeddings, None),
    };

    let aggregated = aggregate(&embeddings)?;
    let (logits, _) = forward(&model.top, &aggregated)?;
    Ok(InferenceOutput {
        predictions: argmax_rows(&logits),
        flags,
    })
}

/// Main-task accuracy of the benign (unattacked) model over a test set.
pub fn evaluate_mta(model: &TrainedVflModel, features: &Matrix, labels: &[usize]) -> Result<f64> {
    if labels.is_empty() {
        return Err(VflError::Validation("evaluate_mta: empty test set".into()));
    }
    let out = infer_batch(model, features, &[], None)?;
    let correct = out
        .predictions
        .iter()
        .zip(labels)
        .filter(|(p, t)| p == t)
        .count();
    Ok(correct as f64 / labels.len() as f64)
}

/// Evenly sized party specs over a column partition; party 0 is the attacker
/// when `attacker` names it.
pub fn parties_from_partition(
    partition: &crate::data::ColumnPartition,
    bottom_layers: &[usize],
    learning_rate: f64,
    attacker: Option<usize>,
) -> Vec<PartySpec> {
    (0..partition.num_parties())
        .map(|k| PartySpec {
            party_id: k,
            feature_columns: partition.party_columns(k).to_vec(),
            bottom_layers: bottom_layers.to_vec(),
            learning_rate,
            is_attacker: attacker == Some(k),
        })
        .collect()
}

#[allow(dead_code)]
fn _nn_reexport_check() {
    let _ = nn::softmax;
}
