//! Local training objective: class-frequency logit calibration, per-class
//! feature prototypes, and the global-feature contrastive term.
//!
//! The combined local loss is `ce(w * logits, y) + lambda * contrast(H, G)`,
//! where `w` are per-class modulating weights computed from mini-batch class
//! frequencies and `G` are globally aggregated class prototypes. Each term is
//! independently switchable, which is what the ablation modes run on.

use crate::error::{Error, Result};
use crate::nn::{check_labels, ForwardTrace};
use crate::tensor::Tensor;

/// Guard added to vector norms so cosine similarity stays defined for
/// all-zero (dead) feature vectors.
const NORM_GUARD: f64 = 1e-12;

/// Parameters of the modulating factor `w_j = alpha * (1 - p_j)^beta`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CalibrationConfig {
    pub alpha: f64,
    pub beta: f64,
    pub enabled: bool,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        CalibrationConfig {
            alpha: 10.0,
            beta: 5.0,
            enabled: true,
        }
    }
}

impl CalibrationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0) || !self.alpha.is_finite() {
            return Err(Error::invalid(
                "calib.alpha",
                format!("must be positive and finite, got {}", self.alpha),
            ));
        }
        if self.beta < 0.0 || !self.beta.is_finite() {
            return Err(Error::invalid(
                "calib.beta",
                format!("must be nonnegative and finite, got {}", self.beta),
            ));
        }
        Ok(())
    }
}

/// Parameters of the prototype-contrast term.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContrastConfig {
    pub temperature: f64,
    pub lambda: f64,
    pub enabled: bool,
}

impl Default for ContrastConfig {
    fn default() -> Self {
        ContrastConfig {
            temperature: 0.07,
            lambda: 1.0,
            enabled: true,
        }
    }
}

impl ContrastConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Error::invalid(
                "contrast.tau",
                format!("must be positive and finite, got {}", self.temperature),
            ));
        }
        if self.lambda < 0.0 || !self.lambda.is_finite() {
            return Err(Error::invalid(
                "contrast.lambda",
                format!("must be nonnegative and finite, got {}", self.lambda),
            ));
        }
        Ok(())
    }
}

/// Per-class sample counts and frequencies of one mini-batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchClassStats {
    counts: Vec<usize>,
    batch_size: usize,
}

impl BatchClassStats {
    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    /// `p_j = n_j / B`.
    pub fn frequency(&self, class: usize) -> f64 {
        self.counts[class] as f64 / self.batch_size as f64
    }

    pub fn frequencies(&self) -> Vec<f64> {
        (0..self.counts.len()).map(|c| self.frequency(c)).collect()
    }

    pub fn num_classes(&self) -> usize {
        self.counts.len()
    }
}

/// Counts class occurrences in one mini-batch.
pub fn batch_class_stats(labels: &[usize], num_classes: usize) -> Result<BatchClassStats> {
    if labels.is_empty() {
        return Err(Error::invalid("labels", "empty batch"));
    }
    check_labels(labels, num_classes)?;
    let mut counts = vec![0usize; num_classes];
    for &label in labels {
        counts[label] += 1;
    }
    Ok(BatchClassStats {
        counts,
        batch_size: labels.len(),
    })
}

/// Per-class logit scaling weights.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassWeights {
    values: Vec<f64>,
}

impl ClassWeights {
    /// Identity calibration: every weight exactly 1.
    pub fn ones(num_classes: usize) -> Self {
        ClassWeights {
            values: vec![1.0; num_classes],
        }
    }

    pub fn from_values(values: Vec<f64>) -> Self {
        ClassWeights { values }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// `w_j = alpha * (1 - p_j)^beta`: minority classes get the larger weights.
pub fn modulating_weights(stats: &BatchClassStats, config: &CalibrationConfig) -> ClassWeights {
    let values = (0..stats.num_classes())
        .map(|c| config.alpha * (1.0 - stats.frequency(c)).powf(config.beta))
        .collect();
    ClassWeights { values }
}

fn check_weights(weights: &ClassWeights, num_classes: usize) -> Result<()> {
    if weights.len() != num_classes {
        return Err(Error::shape(
            "class weights",
            format!("{num_classes} entries"),
            format!("{}", weights.len()),
        ));
    }
    Ok(())
}

/// Cross-entropy over element-wise scaled logits `z'_j = w_j * z_j`.
///
/// With unit weights the scaling multiplies by exactly 1.0, so the result is
/// bitwise identical to plain cross-entropy.
pub fn calibrated_ce(logits: &Tensor, weights: &ClassWeights, labels: &[usize]) -> Result<f64> {
    Ok(scaled_ce_with_grads(logits, weights, labels)?.0)
}

fn scaled_ce_with_grads(
    logits: &Tensor,
    weights: &ClassWeights,
    labels: &[usize],
) -> Result<(f64, Tensor)> {
    let classes = logits.cols();
    check_weights(weights, classes)?;
    if logits.rows() != labels.len() {
        return Err(Error::shape(
            "calibrated_ce",
            format!("{} label rows", logits.rows()),
            format!("{}", labels.len()),
        ));
    }
    if labels.is_empty() {
        return Err(Error::invalid("labels", "empty batch"));
    }
    check_labels(labels, classes)?;
    logits.check_finite("calibrated_ce logits")?;

    let batch = labels.len();
    let w = weights.values();
    let mut grad = Tensor::zeros(vec![batch, classes]);
    let mut total = 0.0;
    let mut scaled = vec![0.0; classes];
    for (b, &label) in labels.iter().enumerate() {
        let row = logits.row(b);
        for (s, (z, wj)) in scaled.iter_mut().zip(row.iter().zip(w)) {
            *s = wj * z;
        }
        let max = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = scaled.iter().map(|v| (v - max).exp()).sum();
        total += max + sum.ln() - scaled[label];

        let g = grad.row_mut(b);
        for j in 0..classes {
            let p = (scaled[j] - max).exp() / sum;
            let indicator = if j == label { 1.0 } else { 0.0 };
            g[j] = w[j] * (p - indicator) / batch as f64;
        }
    }
    Ok((total / batch as f64, grad))
}

/// Per-class feature vectors; classes without any contributing sample are
/// simply absent.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeSet {
    protos: Vec<Option<Vec<f64>>>,
    width: usize,
}

impl PrototypeSet {
    pub fn empty(num_classes: usize, width: usize) -> Self {
        PrototypeSet {
            protos: vec![None; num_classes],
            width,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.protos.len()
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn get(&self, class: usize) -> Option<&[f64]> {
        self.protos.get(class).and_then(|p| p.as_deref())
    }

    pub fn set(&mut self, class: usize, vector: Vec<f64>) -> Result<()> {
        if class >= self.protos.len() {
            return Err(Error::LabelOutOfRange {
                label: class,
                num_classes: self.protos.len(),
            });
        }
        if vector.len() != self.width {
            return Err(Error::shape(
                format!("prototype for class {class}"),
                format!("width {}", self.width),
                format!("{}", vector.len()),
            ));
        }
        if vector.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite prototype for class {class}"
            )));
        }
        self.protos[class] = Some(vector);
        Ok(())
    }

    /// Classes that have a prototype, in ascending class order.
    pub fn present(&self) -> impl Iterator<Item = (usize, &[f64])> {
        self.protos
            .iter()
            .enumerate()
            .filter_map(|(c, p)| p.as_deref().map(|v| (c, v)))
    }

    pub fn num_present(&self) -> usize {
        self.protos.iter().filter(|p| p.is_some()).count()
    }
}

/// Running per-class feature mean, accumulated batch by batch over a local
/// training pass.
#[derive(Debug, Clone)]
pub struct PrototypeAccumulator {
    sums: Vec<Vec<f64>>,
    counts: Vec<u64>,
    width: usize,
}

impl PrototypeAccumulator {
    pub fn new(num_classes: usize, width: usize) -> Self {
        PrototypeAccumulator {
            sums: vec![vec![0.0; width]; num_classes],
            counts: vec![0; num_classes],
            width,
        }
    }

    pub fn add_batch(&mut self, features: &Tensor, labels: &[usize]) -> Result<()> {
        if features.rows() != labels.len() {
            return Err(Error::shape(
                "prototype accumulation",
                format!("{} label rows", features.rows()),
                format!("{}", labels.len()),
            ));
        }
        if features.cols() != self.width {
            return Err(Error::shape(
                "prototype accumulation",
                format!("feature width {}", self.width),
                format!("{}", features.cols()),
            ));
        }
        check_labels(labels, self.sums.len())?;
        for (b, &label) in labels.iter().enumerate() {
            let row = features.row(b);
            for (s, v) in self.sums[label].iter_mut().zip(row) {
                *s += v;
            }
            self.counts[label] += 1;
        }
        Ok(())
    }

    pub fn finish(self) -> PrototypeSet {
        let mut set = PrototypeSet::empty(self.sums.len(), self.width);
        for (class, (sum, count)) in self.sums.into_iter().zip(self.counts).enumerate() {
            if count > 0 {
                let mean = sum.into_iter().map(|v| v / count as f64).collect();
                set.protos[class] = Some(mean);
            }
        }
        set
    }
}

/// Per-class arithmetic mean of a single feature batch.
pub fn local_prototypes(features: &Tensor, labels: &[usize], num_classes: usize) -> Result<PrototypeSet> {
    let mut acc = PrototypeAccumulator::new(num_classes, features.cols());
    acc.add_batch(features, labels)?;
    Ok(acc.finish())
}

/// Mean of local prototypes over the clients that contributed each class.
pub fn aggregate_global(sets: &[PrototypeSet]) -> Result<PrototypeSet> {
    let first = sets
        .first()
        .ok_or_else(|| Error::invalid("prototype_sets", "empty list"))?;
    let width = first.width;
    let num_classes = sets.iter().map(|s| s.num_classes()).max().unwrap();
    for (i, set) in sets.iter().enumerate() {
        if set.width != width {
            return Err(Error::shape(
                format!("prototype set {i}"),
                format!("width {width}"),
                format!("{}", set.width),
            ));
        }
    }
    let mut out = PrototypeSet::empty(num_classes, width);
    for class in 0..num_classes {
        let mut sum = vec![0.0; width];
        let mut contributors = 0usize;
        for set in sets {
            if let Some(proto) = set.get(class) {
                for (s, v) in sum.iter_mut().zip(proto) {
                    *s += v;
                }
                contributors += 1;
            }
        }
        if contributors > 0 {
            let mean = sum.into_iter().map(|v| v / contributors as f64).collect();
            out.protos[class] = Some(mean);
        }
    }
    Ok(out)
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Guarded cosine similarity.
fn cosine(a: &[f64], a_norm: f64, b: &[f64], b_norm: f64) -> f64 {
    dot(a, b) / ((a_norm + NORM_GUARD) * (b_norm + NORM_GUARD))
}

fn check_contrast_inputs(
    features: &Tensor,
    labels: &[usize],
    global: &PrototypeSet,
    tau: f64,
) -> Result<()> {
    if features.rows() != labels.len() {
        return Err(Error::shape(
            "contrastive_loss",
            format!("{} label rows", features.rows()),
            format!("{}", labels.len()),
        ));
    }
    if global.num_present() > 0 && features.cols() != global.width() {
        return Err(Error::shape(
            "contrastive_loss",
            format!("feature width {}", global.width()),
            format!("{}", features.cols()),
        ));
    }
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::invalid(
            "tau",
            format!("temperature must be positive, got {tau}"),
        ));
    }
    check_labels(labels, global.num_classes().max(labels.iter().max().map_or(0, |m| m + 1)))?;
    Ok(())
}

/// Per-sample supervised contrastive losses against the global prototypes.
///
/// The positive for a sample is its own class's global prototype; negatives
/// are every other present prototype. Samples whose class has no global
/// prototype contribute 0.
pub fn contrastive_terms(
    features: &Tensor,
    labels: &[usize],
    global: &PrototypeSet,
    tau: f64,
) -> Result<Vec<f64>> {
    check_contrast_inputs(features, labels, global, tau)?;
    let present: Vec<(usize, &[f64], f64)> =
        global.present().map(|(c, p)| (c, p, norm(p))).collect();
    let mut terms = Vec::with_capacity(labels.len());
    for (b, &label) in labels.iter().enumerate() {
        if global.get(label).is_none() || present.len() < 1 {
            terms.push(0.0);
            continue;
        }
        let h = features.row(b);
        let h_norm = norm(h);
        let scores: Vec<(usize, f64)> = present
            .iter()
            .map(|&(c, p, p_norm)| (c, cosine(h, h_norm, p, p_norm) / tau))
            .collect();
        let max = scores.iter().map(|&(_, s)| s).fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = scores.iter().map(|&(_, s)| (s - max).exp()).sum();
        let s_pos = scores.iter().find(|&&(c, _)| c == label).unwrap().1;
        terms.push(max + sum.ln() - s_pos);
    }
    Ok(terms)
}

/// Batch-mean supervised contrastive loss (Eq. 17 form).
pub fn contrastive_loss(
    features: &Tensor,
    labels: &[usize],
    global: &PrototypeSet,
    tau: f64,
) -> Result<f64> {
    let terms = contrastive_terms(features, labels, global, tau)?;
    if terms.is_empty() {
        return Ok(0.0);
    }
    Ok(terms.iter().sum::<f64>() / terms.len() as f64)
}

/// Per-sample negative-to-positive similarity ratios
/// `sum_k psi(H, G_k) / psi(H, G_pos)`; 0 for samples without a positive.
pub fn psi_ratios(
    features: &Tensor,
    labels: &[usize],
    global: &PrototypeSet,
    tau: f64,
) -> Result<Vec<f64>> {
    check_contrast_inputs(features, labels, global, tau)?;
    let present: Vec<(usize, &[f64], f64)> =
        global.present().map(|(c, p)| (c, p, norm(p))).collect();
    let mut ratios = Vec::with_capacity(labels.len());
    for (b, &label) in labels.iter().enumerate() {
        if global.get(label).is_none() {
            ratios.push(0.0);
            continue;
        }
        let h = features.row(b);
        let h_norm = norm(h);
        let cos_pos = present
            .iter()
            .find(|&&(c, _, _)| c == label)
            .map(|&(_, p, p_norm)| cosine(h, h_norm, p, p_norm))
            .unwrap();
        let ratio: f64 = present
            .iter()
            .filter(|&&(c, _, _)| c != label)
            .map(|&(_, p, p_norm)| ((cosine(h, h_norm, p, p_norm) - cos_pos) / tau).exp())
            .sum();
        ratios.push(ratio);
    }
    Ok(ratios)
}

/// Batch-mean negative/positive ratio: a diagnostic mirroring the Taylor
/// rewrite of the contrastive loss, not used in training.
pub fn taylor_ratio_diagnostic(
    features: &Tensor,
    labels: &[usize],
    global: &PrototypeSet,
    tau: f64,
) -> Result<f64> {
    let ratios = psi_ratios(features, labels, global, tau)?;
    if ratios.is_empty() {
        return Ok(0.0);
    }
    Ok(ratios.iter().sum::<f64>() / ratios.len() as f64)
}

/// Contrast loss plus its gradient with respect to the feature batch.
fn contrast_with_grads(
    features: &Tensor,
    labels: &[usize],
    global: &PrototypeSet,
    tau: f64,
) -> Result<(f64, Tensor)> {
    check_contrast_inputs(features, labels, global, tau)?;
    let batch = labels.len();
    let width = features.cols();
    let present: Vec<(usize, &[f64], f64)> =
        global.present().map(|(c, p)| (c, p, norm(p))).collect();
    let mut grad = Tensor::zeros(vec![batch, width]);
    let mut total = 0.0;
    if present.is_empty() || batch == 0 {
        return Ok((0.0, grad));
    }

    for (b, &label) in labels.iter().enumerate() {
        if global.get(label).is_none() {
            continue;
        }
        let h = features.row(b);
        let h_norm = norm(h);
        let cosines: Vec<f64> = present
            .iter()
            .map(|&(_, p, p_norm)| cosine(h, h_norm, p, p_norm))
            .collect();
        let scores: Vec<f64> = cosines.iter().map(|c| c / tau).collect();
        let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = scores.iter().map(|s| (s - max).exp()).sum();
        let pos_index = present.iter().position(|&(c, _, _)| c == label).unwrap();
        total += max + sum.ln() - scores[pos_index];

        let g = grad.row_mut(b);
        for (i, &(_, p, p_norm)) in present.iter().enumerate() {
            let softmax = (scores[i] - max).exp() / sum;
            let upstream = (softmax - if i == pos_index { 1.0 } else { 0.0 }) / tau;
            // d cos / dH = G / ((|H|+g)(|G|+g)) - cos * H / (|H| (|H|+g))
            let denom = (h_norm + NORM_GUARD) * (p_norm + NORM_GUARD);
            let self_coeff = if h_norm > 0.0 {
                cosines[i] / (h_norm * (h_norm + NORM_GUARD))
            } else {
                0.0
            };
            for (k, gk) in g.iter_mut().enumerate() {
                *gk += upstream * (p[k] / denom - self_coeff * h[k]);
            }
        }
    }

    for v in grad.data_mut() {
        *v /= batch as f64;
    }
    Ok((total / batch as f64, grad))
}

/// The combined local objective: calibrated cross-entropy plus the weighted
/// contrastive term. Passing unit weights disables calibration; passing
/// `None` prototypes, a zero lambda, or a disabled config drops the contrast
/// term entirely.
pub fn fatcc_local_loss(
    trace: &ForwardTrace,
    labels: &[usize],
    weights: &ClassWeights,
    global: Option<&PrototypeSet>,
    contrast: &ContrastConfig,
) -> Result<f64> {
    let base = calibrated_ce(trace.logits(), weights, labels)?;
    match global {
        Some(protos) if contrast.enabled && contrast.lambda > 0.0 && protos.num_present() > 0 => {
            let cl = contrastive_loss(trace.features(), labels, protos, contrast.temperature)?;
            Ok(base + contrast.lambda * cl)
        }
        _ => Ok(base),
    }
}

/// Which loss the backward pass differentiates.
#[derive(Debug, Clone)]
pub enum LossSpec<'a> {
    /// Plain mean softmax cross-entropy.
    CrossEntropy,
    /// Cross-entropy over weight-scaled logits.
    CalibratedCrossEntropy { weights: &'a ClassWeights },
    /// Calibrated cross-entropy plus `lambda` times the prototype contrast.
    FatCc {
        weights: &'a ClassWeights,
        prototypes: &'a PrototypeSet,
        tau: f64,
        lambda: f64,
    },
}

pub(crate) struct LossGradients {
    pub loss: f64,
    pub wrt_logits: Tensor,
    pub wrt_features: Option<Tensor>,
}

pub(crate) fn loss_gradients(
    spec: &LossSpec,
    logits: &Tensor,
    features: &Tensor,
    labels: &[usize],
) -> Result<LossGradients> {
    match spec {
        LossSpec::CrossEntropy => {
            let ones = ClassWeights::ones(logits.cols());
            let (loss, wrt_logits) = scaled_ce_with_grads(logits, &ones, labels)?;
            Ok(LossGradients {
                loss,
                wrt_logits,
                wrt_features: None,
            })
        }
        LossSpec::CalibratedCrossEntropy { weights } => {
            let (loss, wrt_logits) = scaled_ce_with_grads(logits, weights, labels)?;
            Ok(LossGradients {
                loss,
                wrt_logits,
                wrt_features: None,
            })
        }
        LossSpec::FatCc {
            weights,
            prototypes,
            tau,
            lambda,
        } => {
            let (ce, wrt_logits) = scaled_ce_with_grads(logits, weights, labels)?;
            if *lambda == 0.0 || prototypes.num_present() == 0 {
                return Ok(LossGradients {
                    loss: ce,
                    wrt_logits,
                    wrt_features: None,
                });
            }
            let (cl, mut wrt_features) = contrast_with_grads(features, labels, prototypes, *tau)?;
            for v in wrt_features.data_mut() {
                *v *= lambda;
            }
            Ok(LossGradients {
                loss: ce + lambda * cl,
                wrt_logits,
                wrt_features: Some(wrt_features),
            })
        }
    }
}
