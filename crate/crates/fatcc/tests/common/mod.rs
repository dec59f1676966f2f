//! Shared oracle helpers for the integration suites.
//!
//! Everything here recomputes quantities through plain, independent code
//! paths (scalar loops, finite differences, brute-force means) so the tests
//! check the library against something other than itself.

#![allow(dead_code)]

use fatcc::{
    calibrated_ce, contrastive_loss, cross_entropy, forward, ClassWeights, ModelParams,
    PrototypeSet, Tensor,
};

/// Loss modes mirrored by the gradient checks.
#[derive(Debug, Clone)]
pub enum LossMode {
    Plain,
    Calibrated(ClassWeights),
    Combined {
        weights: ClassWeights,
        prototypes: PrototypeSet,
        tau: f64,
        lambda: f64,
    },
}

impl LossMode {
    pub fn spec(&self) -> fatcc::LossSpec<'_> {
        match self {
            LossMode::Plain => fatcc::LossSpec::CrossEntropy,
            LossMode::Calibrated(w) => fatcc::LossSpec::CalibratedCrossEntropy { weights: w },
            LossMode::Combined {
                weights,
                prototypes,
                tau,
                lambda,
            } => fatcc::LossSpec::FatCc {
                weights,
                prototypes,
                tau: *tau,
                lambda: *lambda,
            },
        }
    }
}

/// Loss evaluation built on the public value functions only; the gradient
/// path under test never runs here.
pub fn loss_value(params: &ModelParams, input: &Tensor, labels: &[usize], mode: &LossMode) -> f64 {
    let trace = forward(params, input).expect("forward");
    match mode {
        LossMode::Plain => cross_entropy(trace.logits(), labels).expect("ce"),
        LossMode::Calibrated(w) => calibrated_ce(trace.logits(), w, labels).expect("calibrated"),
        LossMode::Combined {
            weights,
            prototypes,
            tau,
            lambda,
        } => {
            let ce = calibrated_ce(trace.logits(), weights, labels).expect("calibrated");
            let cl = contrastive_loss(trace.features(), labels, prototypes, *tau).expect("contrast");
            ce + lambda * cl
        }
    }
}

/// Central finite differences over every parameter.
pub fn fd_param_grads(
    params: &ModelParams,
    input: &Tensor,
    labels: &[usize],
    mode: &LossMode,
    h: f64,
) -> ModelParams {
    let mut grads = params.zeros_like();
    for layer_index in 0..params.num_layers() {
        let weight_len = params.layers()[layer_index].weight.len();
        for i in 0..weight_len {
            let mut plus = params.clone();
            plus.layers_mut()[layer_index].weight.data_mut()[i] += h;
            let mut minus = params.clone();
            minus.layers_mut()[layer_index].weight.data_mut()[i] -= h;
            grads.layers_mut()[layer_index].weight.data_mut()[i] = (loss_value(&plus, input, labels, mode)
                - loss_value(&minus, input, labels, mode))
                / (2.0 * h);
        }
        let bias_len = params.layers()[layer_index].bias.len();
        for i in 0..bias_len {
            let mut plus = params.clone();
            plus.layers_mut()[layer_index].bias.data_mut()[i] += h;
            let mut minus = params.clone();
            minus.layers_mut()[layer_index].bias.data_mut()[i] -= h;
            grads.layers_mut()[layer_index].bias.data_mut()[i] = (loss_value(&plus, input, labels, mode)
                - loss_value(&minus, input, labels, mode))
                / (2.0 * h);
        }
    }
    grads
}

/// Central finite differences over every input component.
pub fn fd_input_grads(
    params: &ModelParams,
    input: &Tensor,
    labels: &[usize],
    mode: &LossMode,
    h: f64,
) -> Tensor {
    let mut grads = Tensor::zeros(input.shape().to_vec());
    for i in 0..input.len() {
        let mut plus = input.clone();
        plus.data_mut()[i] += h;
        let mut minus = input.clone();
        minus.data_mut()[i] -= h;
        grads.data_mut()[i] = (loss_value(params, &plus, labels, mode)
            - loss_value(params, &minus, labels, mode))
            / (2.0 * h);
    }
    grads
}

/// Relative error with the floor the gradient checks use.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Independent scalar-loop forward pass; returns every layer's
/// pre-activation rows (rectifier on hidden layers).
pub fn scalar_forward(params: &ModelParams, input: &Tensor) -> Vec<Vec<Vec<f64>>> {
    let mut per_layer = Vec::new();
    let batch = input.rows();
    let mut current: Vec<Vec<f64>> = (0..batch).map(|b| input.row(b).to_vec()).collect();
    for (k, layer) in params.layers().iter().enumerate() {
        let out_dim = layer.out_dim();
        let in_dim = layer.in_dim();
        let mut pre_rows = Vec::with_capacity(batch);
        let mut next = Vec::with_capacity(batch);
        for row in &current {
            let mut pre = vec![0.0; out_dim];
            for (o, p) in pre.iter_mut().enumerate() {
                let mut acc = layer.bias.data()[o];
                for i in 0..in_dim {
                    acc += layer.weight.data()[o * in_dim + i] * row[i];
                }
                *p = acc;
            }
            let act: Vec<f64> = if k + 1 == params.num_layers() {
                pre.clone()
            } else {
                pre.iter().map(|&v| v.max(0.0)).collect()
            };
            pre_rows.push(pre);
            next.push(act);
        }
        per_layer.push(pre_rows);
        current = next;
    }
    per_layer
}

/// True when every hidden pre-activation sits at least `margin` away from
/// the rectifier kink, which keeps central differences valid.
pub fn kink_free(params: &ModelParams, input: &Tensor, margin: f64) -> bool {
    let pres = scalar_forward(params, input);
    for layer_pres in pres.iter().take(params.num_layers() - 1) {
        for row in layer_pres {
            if row.iter().any(|v| v.abs() < margin) {
                return false;
            }
        }
    }
    true
}

/// Euclidean norms of the penultimate activations (scalar route).
pub fn feature_norms(params: &ModelParams, input: &Tensor) -> Vec<f64> {
    let pres = scalar_forward(params, input);
    let feature_layer = params.num_layers() - 1;
    if feature_layer == 0 {
        return (0..input.rows())
            .map(|b| input.row(b).iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
    }
    pres[feature_layer - 1]
        .iter()
        .map(|row| row.iter().map(|&v| v.max(0.0).powi(2)).sum::<f64>().sqrt())
        .collect()
}
