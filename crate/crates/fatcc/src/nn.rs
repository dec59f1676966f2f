//! Dense feedforward classifier with exact analytic gradients.
//!
//! The network is a plain MLP: rectified linear units on every hidden layer,
//! identity on the output layer. The activation feeding the final layer is
//! exposed as the per-sample feature vector so prototype extraction and the
//! feature-contrast loss can reach it. Gradients are computed for both the
//! parameters and the input batch, which lets the same backward pass serve
//! local training and white-box attack crafting.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::objective::{loss_gradients, LossSpec};
use crate::tensor::Tensor;

/// One dense layer: weight matrix `out x in` plus bias vector `out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Layer {
    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }
}

/// The shared model weights: an ordered stack of dense layers.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    layers: Vec<Layer>,
}

impl ModelParams {
    /// Builds params from explicit layers, checking that dimensions chain.
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::invalid("layers", "model needs at least one layer"));
        }
        for (k, layer) in layers.iter().enumerate() {
            if layer.weight.shape().len() != 2 {
                return Err(Error::shape(
                    format!("layer {k} weight"),
                    "rank-2 matrix",
                    format!("rank-{}", layer.weight.shape().len()),
                ));
            }
            if layer.bias.len() != layer.out_dim() {
                return Err(Error::shape(
                    format!("layer {k} bias"),
                    format!("{}", layer.out_dim()),
                    format!("{}", layer.bias.len()),
                ));
            }
            if k > 0 && layers[k - 1].out_dim() != layer.in_dim() {
                return Err(Error::shape(
                    format!("layer {k} input"),
                    format!("{}", layers[k - 1].out_dim()),
                    format!("{}", layer.in_dim()),
                ));
            }
        }
        Ok(ModelParams { layers })
    }

    /// Seeded Glorot-uniform initialization over the width chain
    /// `[input, hidden..., classes]`; biases start at zero.
    pub fn init(widths: &[usize], seed: u64) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::invalid(
                "widths",
                format!("need at least input and output widths, got {widths:?}"),
            ));
        }
        if widths.iter().any(|&w| w == 0) {
            return Err(Error::invalid("widths", format!("zero width in {widths:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::with_capacity(widths.len() - 1);
        for pair in widths.windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let scale = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let data = (0..fan_in * fan_out)
                .map(|_| rng.gen_range(-scale..scale))
                .collect();
            layers.push(Layer {
                weight: Tensor::matrix(fan_out, fan_in, data)?,
                bias: Tensor::zeros(vec![fan_out]),
            });
        }
        ModelParams::new(layers)
    }

    /// Same shapes as `self`, all values zero. Gradient container.
    pub fn zeros_like(&self) -> ModelParams {
        ModelParams {
            layers: self
                .layers
                .iter()
                .map(|l| Layer {
                    weight: Tensor::zeros(l.weight.shape().to_vec()),
                    bias: Tensor::zeros(l.bias.shape().to_vec()),
                })
                .collect(),
        }
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    /// Output width of the final layer, i.e. the class count.
    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    /// Width of the activation feeding the final layer.
    pub fn feature_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].in_dim()
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.is_finite() && l.bias.is_finite())
    }

    /// True when both models have identical layer shapes.
    pub fn same_shape(&self, other: &ModelParams) -> bool {
        self.layers.len() == other.layers.len()
            && self
                .layers
                .iter()
                .zip(&other.layers)
                .all(|(a, b)| a.weight.shape() == b.weight.shape() && a.bias.shape() == b.bias.shape())
    }
}

/// Everything the forward pass computed for one input batch.
///
/// `activations[0]` is the input itself; `activations[k+1]` is layer `k`'s
/// output after its activation function (identity for the final layer).
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pre_activations: Vec<Tensor>,
    activations: Vec<Tensor>,
}

impl ForwardTrace {
    /// Final-layer pre-activation: one row of class logits per sample.
    pub fn logits(&self) -> &Tensor {
        &self.pre_activations[self.pre_activations.len() - 1]
    }

    /// Penultimate activation: the per-sample feature vectors.
    pub fn features(&self) -> &Tensor {
        &self.activations[self.activations.len() - 2]
    }

    pub fn batch_size(&self) -> usize {
        self.activations[0].rows()
    }

    pub(crate) fn pre_activation(&self, layer: usize) -> &Tensor {
        &self.pre_activations[layer]
    }

    pub(crate) fn activation(&self, index: usize) -> &Tensor {
        &self.activations[index]
    }
}

/// Local SGD hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub local_epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.01,
            batch_size: 128,
            local_epochs: 1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        // Zero is allowed so a no-op update stays expressible.
        if self.learning_rate < 0.0 || !self.learning_rate.is_finite() {
            return Err(Error::invalid(
                "learning_rate",
                format!("must be a nonnegative finite number, got {}", self.learning_rate),
            ));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size", "must be at least 1"));
        }
        if self.local_epochs == 0 {
            return Err(Error::invalid("local_epochs", "must be at least 1"));
        }
        Ok(())
    }
}

/// Runs the batch through the network, recording every intermediate tensor.
///
/// Deterministic: identical inputs produce bitwise-identical traces.
pub fn forward(params: &ModelParams, input: &Tensor) -> Result<ForwardTrace> {
    let batch = input.rows();
    let mut activations = Vec::with_capacity(params.num_layers() + 1);
    let mut pre_activations = Vec::with_capacity(params.num_layers());
    activations.push(input.clone());

    for (k, layer) in params.layers().iter().enumerate() {
        let current = &activations[k];
        if current.cols() != layer.in_dim() {
            return Err(Error::shape(
                format!("layer {k} input"),
                format!("{} columns", layer.in_dim()),
                format!("{} columns", current.cols()),
            ));
        }
        let (out_dim, in_dim) = (layer.out_dim(), layer.in_dim());
        let mut pre = Tensor::zeros(vec![batch, out_dim]);
        for b in 0..batch {
            let row = current.row(b);
            let out = pre.row_mut(b);
            for o in 0..out_dim {
                let w = &layer.weight.data()[o * in_dim..(o + 1) * in_dim];
                let mut acc = layer.bias.data()[o];
                for (wi, xi) in w.iter().zip(row) {
                    acc += wi * xi;
                }
                out[o] = acc;
            }
        }
        let last = k + 1 == params.num_layers();
        let act = if last {
            pre.clone()
        } else {
            let mut act = pre.clone();
            for v in act.data_mut() {
                if *v < 0.0 {
                    *v = 0.0;
                }
            }
            act
        };
        pre_activations.push(pre);
        activations.push(act);
    }

    Ok(ForwardTrace {
        pre_activations,
        activations,
    })
}

/// Row-wise softmax probabilities with max-shift for numerical stability.
#[cfg(test)]
pub(crate) fn softmax_rows(logits: &Tensor) -> Tensor {
    let mut out = logits.clone();
    for b in 0..out.rows() {
        let row = out.row_mut(b);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

pub(crate) fn check_labels(labels: &[usize], num_classes: usize) -> Result<()> {
    if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
        return Err(Error::LabelOutOfRange {
            label: bad,
            num_classes,
        });
    }
    Ok(())
}

/// Mean softmax cross-entropy of a logit batch against integer labels.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    let classes = logits.cols();
    if logits.rows() != labels.len() {
        return Err(Error::shape(
            "cross_entropy",
            format!("{} label rows", logits.rows()),
            format!("{}", labels.len()),
        ));
    }
    if labels.is_empty() {
        return Err(Error::invalid("labels", "empty batch"));
    }
    check_labels(labels, classes)?;
    logits.check_finite("cross_entropy logits")?;

    let mut total = 0.0;
    for (b, &label) in labels.iter().enumerate() {
        let row = logits.row(b);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let log_sum: f64 = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        total += max + log_sum - row[label];
    }
    Ok(total / labels.len() as f64)
}

/// Gradients of a loss over one forward pass.
#[derive(Debug, Clone)]
pub struct Backprop {
    pub loss: f64,
    pub param_grads: ModelParams,
    pub input_grads: Tensor,
}

/// Exact analytic gradients of the given loss with respect to every
/// parameter and every input component.
pub fn backprop(
    params: &ModelParams,
    input: &Tensor,
    labels: &[usize],
    loss: &LossSpec,
) -> Result<Backprop> {
    let trace = forward(params, input)?;
    backprop_from_trace(params, &trace, labels, loss)
}

/// Same as [`backprop`], reusing an existing forward trace.
pub fn backprop_from_trace(
    params: &ModelParams,
    trace: &ForwardTrace,
    labels: &[usize],
    loss: &LossSpec,
) -> Result<Backprop> {
    let grads = loss_gradients(loss, trace.logits(), trace.features(), labels)?;
    let (param_grads, input_grads) = backward(
        params,
        trace,
        &grads.wrt_logits,
        grads.wrt_features.as_ref(),
        true,
    );
    Ok(Backprop {
        loss: grads.loss,
        param_grads: param_grads.expect("param grads requested"),
        input_grads,
    })
}

/// Plain cross-entropy loss and its gradient with respect to the input only.
///
/// This is the attacker's view of the model: it skips the parameter-gradient
/// accumulation that dominates the backward pass.
pub fn input_gradient(params: &ModelParams, input: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let trace = forward(params, input)?;
    let grads = loss_gradients(&LossSpec::CrossEntropy, trace.logits(), trace.features(), labels)?;
    let (_, input_grads) = backward(params, &trace, &grads.wrt_logits, None, false);
    Ok((grads.loss, input_grads))
}

/// Reverse pass through the layer stack.
///
/// `wrt_logits` is dL/d(final pre-activation); `wrt_features` is an optional
/// extra dL/d(penultimate activation) term that is added where the feature
/// vector branches off (the contrast loss contributes there).
fn backward(
    params: &ModelParams,
    trace: &ForwardTrace,
    wrt_logits: &Tensor,
    wrt_features: Option<&Tensor>,
    want_param_grads: bool,
) -> (Option<ModelParams>, Tensor) {
    let num_layers = params.num_layers();
    let batch = trace.batch_size();
    let mut param_grads = want_param_grads.then(|| params.zeros_like());

    // delta = dL/d(pre-activation of the current layer)
    let mut delta = wrt_logits.clone();
    let mut upstream: Tensor = Tensor::zeros(vec![0]);

    for k in (0..num_layers).rev() {
        let layer = &params.layers()[k];
        let (out_dim, in_dim) = (layer.out_dim(), layer.in_dim());
        let activation_in = trace.activation(k);

        if let Some(grads) = param_grads.as_mut() {
            let gl = &mut grads.layers_mut()[k];
            for b in 0..batch {
                let d = delta.row(b);
                let a = activation_in.row(b);
                for o in 0..out_dim {
                    let w_row = &mut gl.weight.data_mut()[o * in_dim..(o + 1) * in_dim];
                    let dv = d[o];
                    for (wg, ai) in w_row.iter_mut().zip(a) {
                        *wg += dv * ai;
                    }
                    gl.bias.data_mut()[o] += dv;
                }
            }
        }

        // dL/d(activation feeding layer k)
        let mut da = Tensor::zeros(vec![batch, in_dim]);
        for b in 0..batch {
            let d = delta.row(b);
            let target = da.row_mut(b);
            for o in 0..out_dim {
                let w = &layer.weight.data()[o * in_dim..(o + 1) * in_dim];
                let dv = d[o];
                for (t, wi) in target.iter_mut().zip(w) {
                    *t += dv * wi;
                }
            }
        }
        if k == num_layers - 1 {
            if let Some(extra) = wrt_features {
                for (t, e) in da.data_mut().iter_mut().zip(extra.data()) {
                    *t += e;
                }
            }
        }

        if k == 0 {
            upstream = da;
        } else {
            // Rectifier subgradient: 0 at and below zero.
            let pre = trace.pre_activation(k - 1);
            let mut next_delta = da;
            for (v, &z) in next_delta.data_mut().iter_mut().zip(pre.data()) {
                if z <= 0.0 {
                    *v = 0.0;
                }
            }
            delta = next_delta;
        }
    }

    (param_grads, upstream)
}

/// One plain SGD step: `w' = w - lr * grad`. Pure function of its inputs.
pub fn sgd_step(params: &ModelParams, grads: &ModelParams, learning_rate: f64) -> Result<ModelParams> {
    if !params.same_shape(grads) {
        return Err(Error::shape(
            "sgd_step",
            "gradients with the same layer shapes as params",
            "mismatched shapes",
        ));
    }
    if learning_rate < 0.0 || !learning_rate.is_finite() {
        return Err(Error::invalid(
            "learning_rate",
            format!("must be finite and nonnegative, got {learning_rate}"),
        ));
    }
    let mut out = params.clone();
    for (layer, grad) in out.layers_mut().iter_mut().zip(grads.layers()) {
        for (w, g) in layer.weight.data_mut().iter_mut().zip(grad.weight.data()) {
            *w -= learning_rate * g;
        }
        for (b, g) in layer.bias.data_mut().iter_mut().zip(grad.bias.data()) {
            *b -= learning_rate * g;
        }
    }
    Ok(out)
}
