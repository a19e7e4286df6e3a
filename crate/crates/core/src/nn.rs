//! Minimal dense neural-network kernel: matrices, fully connected layers,
//! softmax cross-entropy, exact reverse-mode gradients, and plain SGD.
//!
//! Everything runs in 64-bit floats and is deterministic given a seeded RNG.

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, VflError};

/// Row-major dense matrix of samples; rows are samples, columns features.
pub type Matrix = Array2<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    ReLU,
    Identity,
}

impl Activation {
    fn apply(&self, z: &Matrix) -> Matrix {
        match self {
            Activation::ReLU => z.mapv(|v| v.max(0.0)),
            Activation::Identity => z.clone(),
        }
    }

    /// Elementwise derivative evaluated at the pre-activation.
    fn backward(&self, pre: &Matrix, grad_out: &Matrix) -> Matrix {
        match self {
            Activation::ReLU => {
                let mut g = grad_out.clone();
                g.zip_mut_with(pre, |gv, &zv| {
                    if zv <= 0.0 {
                        *gv = 0.0;
                    }
                });
                g
            }
            Activation::Identity => grad_out.clone(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DenseLayer {
    /// `in_dim x out_dim` weight matrix.
    pub weight: Matrix,
    pub bias: Array1<f64>,
    pub activation: Activation,
}

impl DenseLayer {
    pub fn in_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.ncols()
    }
}

/// A sequential stack of dense layers with chained dimensions.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MlpModel {
    pub layers: Vec<DenseLayer>,
}

impl MlpModel {
    /// Builds a model with the given layer output dimensions and activations.
    /// Weights and biases are drawn uniformly from `+-sqrt(1 / fan_in)`.
    pub fn init<R: Rng>(in_dim: usize, dims: &[usize], activations: &[Activation], rng: &mut R) -> Self {
        assert_eq!(dims.len(), activations.len(), "one activation per layer");
        let mut layers = Vec::with_capacity(dims.len());
        let mut fan_in = in_dim;
        for (&out, &act) in dims.iter().zip(activations) {
            let bound = (1.0 / fan_in as f64).sqrt();
            let weight = Matrix::from_shape_fn((fan_in, out), |_| rng.random_range(-bound..bound));
            let bias = Array1::from_shape_fn(out, |_| rng.random_range(-bound..bound));
            layers.push(DenseLayer {
                weight,
                bias,
                activation: act,
            });
            fan_in = out;
        }
        MlpModel { layers }
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().expect("non-empty model").out_dim()
    }
}

/// Per-layer activation record kept by [`forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// Input to each layer (`inputs[0]` is the model input).
    inputs: Vec<Matrix>,
    /// Pre-activation of each layer.
    pre_activations: Vec<Matrix>,
}

/// Forward pass over all layers; the cache suffices for [`backward`].
pub fn forward(model: &MlpModel, input: &Matrix) -> Result<(Matrix, ForwardCache)> {
    if input.ncols() != model.in_dim() {
        return Err(VflError::Dimension(format!(
            "forward: input has {} columns, model expects {}",
            input.ncols(),
            model.in_dim()
        )));
    }
    let mut inputs = Vec::with_capacity(model.layers.len());
    let mut pre_activations = Vec::with_capacity(model.layers.len());
    let mut current = input.clone();
    for layer in &model.layers {
        let pre = current.dot(&layer.weight) + &layer.bias;
        let out = layer.activation.apply(&pre);
        inputs.push(current);
        pre_activations.push(pre);
        current = out;
    }
    Ok((current, ForwardCache { inputs, pre_activations }))
}

/// Per-layer parameter gradients produced by [`backward`].
#[derive(Debug, Clone)]
pub struct LayerGrads {
    pub weight: Matrix,
    pub bias: Array1<f64>,
}

/// Exact reverse-mode gradients. Returns per-layer parameter gradients and
/// the gradient with respect to the model input, which is what the split
/// protocol routes back to each passive party.
pub fn backward(
    model: &MlpModel,
    cache: &ForwardCache,
    grad_output: &Matrix,
) -> Result<(Vec<LayerGrads>, Matrix)> {
    if cache.inputs.len() != model.layers.len() {
        return Err(VflError::Validation(format!(
            "backward: cache covers {} layers, model has {}",
            cache.inputs.len(),
            model.layers.len()
        )));
    }
    let last = model.layers.len() - 1;
    if grad_output.dim() != cache.pre_activations[last].dim() {
        return Err(VflError::Dimension(format!(
            "backward: grad_output shape {:?} does not match output shape {:?}",
            grad_output.dim(),
            cache.pre_activations[last].dim()
        )));
    }

    let mut grads = vec![None; model.layers.len()];
    let mut grad = grad_output.clone();
    for (idx, layer) in model.layers.iter().enumerate().rev() {
        let grad_pre = layer.activation.backward(&cache.pre_activations[idx], &grad);
        let grad_weight = cache.inputs[idx].t().dot(&grad_pre);
        let grad_bias = grad_pre.sum_axis(Axis(0));
        grad = grad_pre.dot(&layer.weight.t());
        grads[idx] = Some(LayerGrads {
            weight: grad_weight,
            bias: grad_bias,
        });
    }
    let grads = grads.into_iter().map(|g| g.expect("filled")).collect();
    Ok((grads, grad))
}

/// In-place SGD update: every parameter `p <- p - lr * g`.
pub fn sgd_step(model: &mut MlpModel, grads: &[LayerGrads], lr: f64) {
    assert_eq!(grads.len(), model.layers.len(), "one gradient per layer");
    for (layer, g) in model.layers.iter_mut().zip(grads) {
        layer.weight.scaled_add(-lr, &g.weight);
        layer.bias.scaled_add(-lr, &g.bias);
    }
}

/// Row-stochastic softmax with log-sum-exp stabilization.
pub fn softmax(logits: &Matrix) -> Matrix {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

/// Mean softmax cross-entropy over rows and its gradient w.r.t. the logits.
pub fn softmax_cross_entropy(logits: &Matrix, labels: &[usize]) -> Result<(f64, Matrix)> {
    let n = logits.nrows();
    if labels.len() != n {
        return Err(VflError::Validation(format!(
            "softmax_cross_entropy: {} logit rows but {} labels",
            n,
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= logits.ncols()) {
        return Err(VflError::Validation(format!(
            "softmax_cross_entropy: label {} out of range for {} classes",
            bad,
            logits.ncols()
        )));
    }

    let mut loss = 0.0;
    let mut grad = softmax(logits);
    for (i, &label) in labels.iter().enumerate() {
        let row = logits.row(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
        loss += lse - row[label];
        grad[(i, label)] -= 1.0;
    }
    grad.mapv_inplace(|v| v / n as f64);
    Ok((loss / n as f64, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn identity_net(weight: Matrix, activation: Activation) -> MlpModel {
        let out = weight.ncols();
        MlpModel {
            layers: vec![DenseLayer {
                weight,
                bias: Array1::zeros(out),
                activation,
            }],
        }
    }

    /// Straight-line re-implementation of the forward pass used as an
    /// independent oracle for the layered implementation.
    fn forward_oracle(model: &MlpModel, input: &Matrix) -> Matrix {
        let mut x = input.clone();
        for layer in &model.layers {
            let mut z = Matrix::zeros((x.nrows(), layer.out_dim()));
            for i in 0..x.nrows() {
                for j in 0..layer.out_dim() {
                    let mut acc = layer.bias[j];
                    for k in 0..layer.in_dim() {
                        acc += x[(i, k)] * layer.weight[(k, j)];
                    }
                    z[(i, j)] = match layer.activation {
                        Activation::ReLU => acc.max(0.0),
                        Activation::Identity => acc,
                    };
                }
            }
            x = z;
        }
        x
    }

    #[test]
    fn forward_identity_weight_passes_input_through() {
        let model = identity_net(array![[1.0, 0.0], [0.0, 1.0]], Activation::Identity);
        let (out, _) = forward(&model, &array![[1.0, 2.0]]).unwrap();
        assert_eq!(out, array![[1.0, 2.0]]);
    }

    #[test]
    fn forward_relu_clamps_negative() {
        let model = identity_net(array![[1.0], [-1.0]], Activation::ReLU);
        let (out, _) = forward(&model, &array![[3.0, 5.0]]).unwrap();
        assert_eq!(out, array![[0.0]]);
    }

    #[test]
    fn forward_matches_straight_line_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let model = MlpModel::init(5, &[4, 3], &[Activation::ReLU, Activation::Identity], &mut rng);
        let input = Matrix::from_shape_fn((6, 5), |_| rng.random_range(-2.0..2.0));
        let (out, _) = forward(&model, &input).unwrap();
        let expected = forward_oracle(&model, &input);
        for (a, b) in out.iter().zip(expected.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn forward_rejects_shape_mismatch() {
        let model = identity_net(array![[1.0, 0.0], [0.0, 1.0]], Activation::Identity);
        let err = forward(&model, &array![[1.0, 2.0, 3.0]]).unwrap_err();
        assert!(matches!(err, VflError::Dimension(_)));
    }

    #[test]
    fn cross_entropy_uniform_softmax_is_ln2() {
        let (loss, _) = softmax_cross_entropy(&array![[0.0, 0.0]], &[0]).unwrap();
        assert_abs_diff_eq!(loss, 2.0_f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn cross_entropy_saturated_logits_stay_finite() {
        let (loss, grad) = softmax_cross_entropy(&array![[1000.0, 0.0]], &[0]).unwrap();
        assert!(loss.is_finite());
        assert!(loss < 1e-12);
        assert!(grad.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn cross_entropy_rejects_out_of_range_label() {
        let err = softmax_cross_entropy(&array![[0.0, 0.0]], &[2]).unwrap_err();
        assert!(matches!(err, VflError::Validation(_)));
    }

    #[test]
    fn cross_entropy_grad_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let logits = Matrix::from_shape_fn((4, 3), |_| rng.random_range(-2.0..2.0));
        let labels = [0usize, 2, 1, 1];
        let (_, grad) = softmax_cross_entropy(&logits, &labels).unwrap();
        let h = 1e-5;
        for i in 0..4 {
            for j in 0..3 {
                let mut plus = logits.clone();
                plus[(i, j)] += h;
                let mut minus = logits.clone();
                minus[(i, j)] -= h;
                let (lp, _) = softmax_cross_entropy(&plus, &labels).unwrap();
                let (lm, _) = softmax_cross_entropy(&minus, &labels).unwrap();
                assert_abs_diff_eq!(grad[(i, j)], (lp - lm) / (2.0 * h), epsilon = 1e-6);
            }
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let logits = Matrix::from_shape_fn((8, 5), |_| rng.random_range(-10.0..10.0));
        let sm = softmax(&logits);
        for row in sm.rows() {
            assert_abs_diff_eq!(row.sum(), 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn backward_linear_layer_routes_grad_through_weight_transpose() {
        let weight = array![[1.0, 2.0], [3.0, 4.0]];
        let model = identity_net(weight.clone(), Activation::Identity);
        let input = array![[0.5, -1.5]];
        let (_, cache) = forward(&model, &input).unwrap();
        let grad_out = array![[1.0, -2.0]];
        let (_, grad_in) = backward(&model, &cache, &grad_out).unwrap();
        assert_eq!(grad_in, grad_out.dot(&weight.t()));
    }

    #[test]
    fn backward_dead_relu_passes_zero_gradient() {
        let model = identity_net(array![[1.0]], Activation::ReLU);
        let input = array![[-2.0]];
        let (_, cache) = forward(&model, &input).unwrap();
        let (grads, grad_in) = backward(&model, &cache, &array![[1.0]]).unwrap();
        assert_eq!(grad_in[(0, 0)], 0.0);
        assert_eq!(grads[0].weight[(0, 0)], 0.0);
    }

    #[test]
    fn backward_rejects_mismatched_cache() {
        let model = identity_net(array![[1.0]], Activation::Identity);
        let two_layer = MlpModel {
            layers: vec![model.layers[0].clone(), model.layers[0].clone()],
        };
        let (_, cache) = forward(&model, &array![[1.0]]).unwrap();
        let err = backward(&two_layer, &cache, &array![[1.0]]).unwrap_err();
        assert!(matches!(err, VflError::Validation(_)));
    }

    /// Central finite differences of the end-to-end loss with respect to
    /// every model parameter, as an oracle for the analytic gradients.
    #[test]
    fn backward_matches_finite_differences_on_seeded_net() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let model = MlpModel::init(4, &[5, 3], &[Activation::ReLU, Activation::Identity], &mut rng);
        let input = Matrix::from_shape_fn((7, 4), |_| rng.random_range(-1.0..1.0));
        let labels: Vec<usize> = (0..7).map(|_| rng.random_range(0..3)).collect();

        let loss_of = |m: &MlpModel| {
            let (out, _) = forward(m, &input).unwrap();
            softmax_cross_entropy(&out, &labels).unwrap().0
        };

        let (out, cache) = forward(&model, &input).unwrap();
        let (_, grad_logits) = softmax_cross_entropy(&out, &labels).unwrap();
        let (grads, _) = backward(&model, &cache, &grad_logits).unwrap();

        let h = 1e-5;
        for l in 0..model.layers.len() {
            for idx in 0..model.layers[l].weight.len() {
                let (r, c) = (idx / model.layers[l].weight.ncols(), idx % model.layers[l].weight.ncols());
                let mut plus = model.clone();
                plus.layers[l].weight[(r, c)] += h;
                let mut minus = model.clone();
                minus.layers[l].weight[(r, c)] -= h;
                let fd = (loss_of(&plus) - loss_of(&minus)) / (2.0 * h);
                let an = grads[l].weight[(r, c)];
                let denom = an.abs().max(fd.abs()).max(1e-8);
                assert!(
                    ((an - fd) / denom).abs() <= 1e-4,
                    "layer {l} weight ({r},{c}): analytic {an} vs fd {fd}"
                );
            }
            for j in 0..model.layers[l].bias.len() {
                let mut plus = model.clone();
                plus.layers[l].bias[j] += h;
                let mut minus = model.clone();
                minus.layers[l].bias[j] -= h;
                let fd = (loss_of(&plus) - loss_of(&minus)) / (2.0 * h);
                let an = grads[l].bias[j];
                let denom = an.abs().max(fd.abs()).max(1e-8);
                assert!(((an - fd) / denom).abs() <= 1e-4);
            }
        }
    }

    #[test]
    fn sgd_zero_lr_leaves_model_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut model = MlpModel::init(3, &[2], &[Activation::Identity], &mut rng);
        let before = model.clone();
        let grads = vec![LayerGrads {
            weight: Matrix::from_elem((3, 2), 1.0),
            bias: Array1::from_elem(2, 1.0),
        }];
        sgd_step(&mut model, &grads, 0.0);
        assert_eq!(model.layers[0].weight, before.layers[0].weight);
        assert_eq!(model.layers[0].bias, before.layers[0].bias);
    }

    #[test]
    fn sgd_single_weight_update() {
        let mut model = identity_net(array![[1.0]], Activation::Identity);
        let grads = vec![LayerGrads {
            weight: array![[2.0]],
            bias: Array1::zeros(1),
        }];
        sgd_step(&mut model, &grads, 0.5);
        assert_eq!(model.layers[0].weight[(0, 0)], 0.0);
    }

    /// For a linear model two successive steps equal one step with the
    /// summed gradients.
    #[test]
    fn sgd_two_steps_equal_summed_gradient_step_for_linear_model() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let base = MlpModel::init(3, &[2], &[Activation::Identity], &mut rng);
        let g1 = vec![LayerGrads {
            weight: Matrix::from_shape_fn((3, 2), |_| rng.random_range(-1.0..1.0)),
            bias: Array1::from_shape_fn(2, |_| rng.random_range(-1.0..1.0)),
        }];
        let g2 = vec![LayerGrads {
            weight: Matrix::from_shape_fn((3, 2), |_| rng.random_range(-1.0..1.0)),
            bias: Array1::from_shape_fn(2, |_| rng.random_range(-1.0..1.0)),
        }];
        let summed = vec![LayerGrads {
            weight: &g1[0].weight + &g2[0].weight,
            bias: &g1[0].bias + &g2[0].bias,
        }];

        let mut stepwise = base.clone();
        sgd_step(&mut stepwise, &g1, 0.1);
        sgd_step(&mut stepwise, &g2, 0.1);
        let mut once = base;
        sgd_step(&mut once, &summed, 0.1);

        for (a, b) in stepwise.layers[0].weight.iter().zip(once.layers[0].weight.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }
}
