//! Clean-accuracy and robust-accuracy evaluation.

use rayon::prelude::*;

use crate::attack::{run_attack, AttackConfig, AttackKind};
use crate::data::Dataset;
use crate::error::Result;
use crate::nn::{forward, ModelParams};

const EVAL_BATCH: usize = 256;

/// One named evaluation attack.
#[derive(Debug, Clone)]
pub struct EvalAttack {
    /// Column label in reports, e.g. `pgd40`.
    pub name: String,
    pub kind: AttackKind,
    pub config: AttackConfig,
}

impl EvalAttack {
    /// Evaluation attacks run deterministically: random start off.
    pub fn new(name: impl Into<String>, kind: AttackKind, config: AttackConfig) -> Self {
        EvalAttack {
            name: name.into(),
            kind,
            config: AttackConfig {
                random_start: false,
                ..config
            },
        }
    }
}

/// Per-round metrics.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundReport {
    pub round: usize,
    pub clean_accuracy: f64,
    /// Robust accuracy per evaluation attack, in configured order.
    pub robust_accuracy: Vec<(String, f64)>,
    pub train_loss: f64,
}

/// Index of the row maximum; ties break to the lowest class index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn count_correct(params: &ModelParams, inputs: &crate::tensor::Tensor, labels: &[usize]) -> Result<usize> {
    let trace = forward(params, inputs)?;
    let logits = trace.logits();
    Ok(labels
        .iter()
        .enumerate()
        .filter(|&(b, &label)| argmax(logits.row(b)) == label)
        .count())
}

/// Fraction of correct argmax predictions on clean inputs, plus robust
/// accuracy under each configured attack.
///
/// Batches are processed independently, so scheduling cannot change the
/// counts; evaluation attacks never use a random start.
pub fn evaluate(
    params: &ModelParams,
    test: &Dataset,
    attacks: &[EvalAttack],
) -> Result<(f64, Vec<(String, f64)>)> {
    if test.is_empty() {
        return Err(crate::error::Error::invalid("test", "empty test set"));
    }
    let indices: Vec<usize> = (0..test.len()).collect();
    let chunks: Vec<&[usize]> = indices.chunks(EVAL_BATCH).collect();

    let per_chunk: Vec<Result<(usize, Vec<usize>)>> = chunks
        .par_iter()
        .map(|chunk| {
            let (inputs, labels) = test.batch(chunk);
            let clean = count_correct(params, &inputs, &labels)?;
            let mut robust = Vec::with_capacity(attacks.len());
            for attack in attacks {
                let crafted =
                    run_attack(attack.kind, params, &inputs, &labels, &attack.config, 0)?;
                robust.push(count_correct(params, crafted.perturbed(), &labels)?);
            }
            Ok((clean, robust))
        })
        .collect();

    let mut clean_total = 0usize;
    let mut robust_totals = vec![0usize; attacks.len()];
    for result in per_chunk {
        let (clean, robust) = result?;
        clean_total += clean;
        for (total, count) in robust_totals.iter_mut().zip(robust) {
            *total += count;
        }
    }

    let n = test.len() as f64;
    let robust = attacks
        .iter()
        .zip(robust_totals)
        .map(|(a, count)| (a.name.clone(), count as f64 / n))
        .collect();
    Ok((clean_total as f64 / n, robust))
}
