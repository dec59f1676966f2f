//! White-box adversarial example crafting under an l-infinity budget.
//!
//! PGD is the workhorse: signed-gradient ascent on the plain cross-entropy,
//! clamped to the data range and projected back into the epsilon-ball around
//! the clean input after every step. FGSM is the one-step special case and
//! BIM is PGD without the random start, both implemented by delegation so
//! the definitional equalities hold bitwise.
//!
//! The attacked loss is always uncalibrated cross-entropy: the attacker
//! targets the deployed model, not the defender's training objective.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{input_gradient, ModelParams};
use crate::tensor::Tensor;

/// Attack parameters. `clamp` is the valid data range, `(0, 1)` for pixel
/// inputs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttackConfig {
    pub epsilon: f64,
    pub step_size: f64,
    pub steps: usize,
    pub random_start: bool,
    pub clamp: (f64, f64),
}

impl AttackConfig {
    /// PGD configuration for training-time attacks: random start on.
    pub fn training(epsilon: f64, step_size: f64, steps: usize) -> Self {
        AttackConfig {
            epsilon,
            step_size,
            steps,
            random_start: true,
            clamp: (0.0, 1.0),
        }
    }

    /// Deterministic evaluation-time PGD: 40 steps, step `epsilon / 10`,
    /// no random start.
    pub fn evaluation(epsilon: f64) -> Self {
        AttackConfig {
            epsilon,
            step_size: epsilon / 10.0,
            steps: 40,
            random_start: false,
            clamp: (0.0, 1.0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epsilon < 0.0 || !self.epsilon.is_finite() {
            return Err(Error::invalid(
                "attack.epsilon",
                format!("must be nonnegative and finite, got {}", self.epsilon),
            ));
        }
        if self.step_size < 0.0 || !self.step_size.is_finite() {
            return Err(Error::invalid(
                "attack.step_size",
                format!("must be nonnegative and finite, got {}", self.step_size),
            ));
        }
        if self.steps == 0 {
            return Err(Error::invalid("attack.steps", "must be at least 1"));
        }
        if self.clamp.0 > self.clamp.1 {
            return Err(Error::invalid(
                "attack.clamp",
                format!("empty range [{}, {}]", self.clamp.0, self.clamp.1),
            ));
        }
        Ok(())
    }
}

/// Clean inputs together with their crafted counterparts.
#[derive(Debug, Clone)]
pub struct AdversarialBatch {
    originals: Tensor,
    perturbed: Tensor,
    perturbation: Tensor,
}

impl AdversarialBatch {
    fn new(originals: Tensor, perturbed: Tensor) -> Self {
        let perturbation = Tensor::new(
            perturbed.shape().to_vec(),
            perturbed
                .data()
                .iter()
                .zip(originals.data())
                .map(|(a, o)| a - o)
                .collect(),
        )
        .expect("perturbation shape");
        AdversarialBatch {
            originals,
            perturbed,
            perturbation,
        }
    }

    pub fn originals(&self) -> &Tensor {
        &self.originals
    }

    pub fn perturbed(&self) -> &Tensor {
        &self.perturbed
    }

    /// `delta = perturbed - originals`.
    pub fn perturbation(&self) -> &Tensor {
        &self.perturbation
    }

    pub fn into_perturbed(self) -> Tensor {
        self.perturbed
    }

    /// Largest absolute perturbation component.
    pub fn max_abs_perturbation(&self) -> f64 {
        self.perturbation
            .data()
            .iter()
            .fold(0.0, |acc, v| acc.max(v.abs()))
    }
}

/// Which attack to run; all share [`AttackConfig`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttackKind {
    Fgsm,
    Bim,
    Pgd,
}

impl AttackKind {
    pub fn name(&self) -> &'static str {
        match self {
            AttackKind::Fgsm => "fgsm",
            AttackKind::Bim => "bim",
            AttackKind::Pgd => "pgd",
        }
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Single-step signed-gradient attack at budget `epsilon`.
pub fn fgsm(params: &ModelParams, x: &Tensor, y: &[usize], epsilon: f64) -> Result<AdversarialBatch> {
    let config = AttackConfig {
        epsilon,
        step_size: epsilon,
        steps: 1,
        random_start: false,
        clamp: (0.0, 1.0),
    };
    pgd(params, x, y, &config, 0)
}

/// Iterative signed-gradient attack without random start.
pub fn bim(params: &ModelParams, x: &Tensor, y: &[usize], config: &AttackConfig) -> Result<AdversarialBatch> {
    let config = AttackConfig {
        random_start: false,
        ..*config
    };
    pgd(params, x, y, &config, 0)
}

/// Projected gradient descent on the input.
///
/// Each iteration takes a signed-gradient step, clamps to the data range,
/// then clips the accumulated perturbation back into `[-epsilon, epsilon]`
/// around the clean input. `seed` feeds the optional uniform random start
/// and is ignored otherwise.
pub fn pgd(
    params: &ModelParams,
    x: &Tensor,
    y: &[usize],
    config: &AttackConfig,
    seed: u64,
) -> Result<AdversarialBatch> {
    config.validate()?;
    let (lo, hi) = config.clamp;
    let eps = config.epsilon;

    let mut adv = x.clone();
    if config.random_start && eps > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (a, &orig) in adv.data_mut().iter_mut().zip(x.data()) {
            let noise: f64 = rng.gen_range(-eps..=eps);
            *a = (orig + noise).clamp(lo, hi);
        }
    }

    for _ in 0..config.steps {
        let (_, grad) = input_gradient(params, &adv, y)?;
        for ((a, g), &orig) in adv.data_mut().iter_mut().zip(grad.data()).zip(x.data()) {
            let stepped = (*a + config.step_size * sign(*g)).clamp(lo, hi);
            let delta = (stepped - orig).clamp(-eps, eps);
            *a = orig + delta;
        }
    }

    Ok(AdversarialBatch::new(x.clone(), adv))
}

/// Dispatches on the attack kind with one shared configuration.
pub fn run_attack(
    kind: AttackKind,
    params: &ModelParams,
    x: &Tensor,
    y: &[usize],
    config: &AttackConfig,
    seed: u64,
) -> Result<AdversarialBatch> {
    match kind {
        AttackKind::Fgsm => fgsm(params, x, y, config.epsilon),
        AttackKind::Bim => bim(params, x, y, config),
        AttackKind::Pgd => pgd(params, x, y, config, seed),
    }
}
