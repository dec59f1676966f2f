//! Federated round engine: broadcast, parallel client updates with local
//! adversarial training, size-weighted model aggregation, and global
//! prototype aggregation.
//!
//! Determinism contract: every stochastic site draws from a seed derived as
//! a hash of (master seed, round, client id), so clients may run in any
//! order or in parallel and still produce bitwise-identical results.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::attack::{run_attack, AttackConfig, AttackKind};
use crate::data::{ClientShard, Dataset};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalAttack, RoundReport};
use crate::nn::{backprop_from_trace, forward, sgd_step, ModelParams, TrainConfig};
use crate::objective::{
    aggregate_global, batch_class_stats, modulating_weights, CalibrationConfig, ClassWeights,
    ContrastConfig, LossSpec, PrototypeAccumulator, PrototypeSet,
};

/// Training method selector; decides which loss terms and attacks are live.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    /// Plain federated training: no attack, plain cross-entropy.
    Fst,
    /// Adversarial training on PGD examples with plain cross-entropy.
    FedPgd,
    /// Adversarial training with logit calibration and feature contrast.
    FatCc,
    /// Ablation: contrast only.
    FatCcNoCalib,
    /// Ablation: calibration only.
    FatCcNoContrast,
}

impl Method {
    pub fn uses_attack(&self) -> bool {
        !matches!(self, Method::Fst)
    }

    pub fn uses_calibration(&self) -> bool {
        matches!(self, Method::FatCc | Method::FatCcNoContrast)
    }

    pub fn uses_contrast(&self) -> bool {
        matches!(self, Method::FatCc | Method::FatCcNoCalib)
    }

    pub fn name(&self) -> &'static str {
        match self {
            Method::Fst => "fst",
            Method::FedPgd => "fedpgd",
            Method::FatCc => "fatcc",
            Method::FatCcNoCalib => "fatcc_no_calib",
            Method::FatCcNoContrast => "fatcc_no_contrast",
        }
    }

    pub fn parse(s: &str) -> Option<Method> {
        match s {
            "fst" => Some(Method::Fst),
            "fedpgd" => Some(Method::FedPgd),
            "fatcc" => Some(Method::FatCc),
            "fatcc_no_calib" => Some(Method::FatCcNoCalib),
            "fatcc_no_contrast" => Some(Method::FatCcNoContrast),
            _ => None,
        }
    }

    pub const ALL: [Method; 5] = [
        Method::Fst,
        Method::FedPgd,
        Method::FatCc,
        Method::FatCcNoCalib,
        Method::FatCcNoContrast,
    ];
}

/// Everything a round of local updates needs.
#[derive(Debug, Clone)]
pub struct RoundConfig {
    pub method: Method,
    pub train: TrainConfig,
    pub train_attack: AttackConfig,
    pub train_attack_kind: AttackKind,
    pub calibration: CalibrationConfig,
    pub contrast: ContrastConfig,
    /// Accumulate prototypes from attacked features (the default) or from a
    /// clean forward pass.
    pub adversarial_prototypes: bool,
}

impl RoundConfig {
    pub fn new(method: Method) -> Self {
        RoundConfig {
            method,
            train: TrainConfig::default(),
            train_attack: AttackConfig::training(0.1, 0.025, 10),
            train_attack_kind: AttackKind::Pgd,
            calibration: CalibrationConfig::default(),
            contrast: ContrastConfig::default(),
            adversarial_prototypes: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.train_attack.validate()?;
        self.calibration.validate()?;
        self.contrast.validate()?;
        Ok(())
    }

    fn calibration_active(&self) -> bool {
        self.method.uses_calibration() && self.calibration.enabled
    }

    fn contrast_active(&self) -> bool {
        self.method.uses_contrast() && self.contrast.enabled && self.contrast.lambda > 0.0
    }
}

/// One client's fixed identity within the federation.
#[derive(Debug, Clone)]
pub struct ClientState {
    pub client_id: usize,
    pub shard: ClientShard,
}

/// Server-side state carried across rounds.
#[derive(Debug, Clone)]
pub struct ServerState {
    pub params: ModelParams,
    /// Absent exactly until the end of round 1.
    pub global_prototypes: Option<PrototypeSet>,
    pub round: usize,
}

/// Result of one client's local pass.
#[derive(Debug, Clone)]
pub struct LocalUpdate {
    pub params: ModelParams,
    pub prototypes: PrototypeSet,
    pub mean_loss: f64,
}

const SPLITMIX_GAMMA: u64 = 0x9e37_79b9_7f4a_7c15;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(SPLITMIX_GAMMA);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Stable per-(round, client) seed derivation from the master seed.
pub fn derive_seed(master: u64, round: usize, client_id: usize) -> u64 {
    let mut s = splitmix64(master);
    s = splitmix64(s ^ (round as u64));
    splitmix64(s ^ (client_id as u64))
}

// Client-id slots reserved for non-client randomness.
const SALT_MODEL_INIT: usize = usize::MAX;
pub(crate) const SALT_DATA: usize = usize::MAX - 1;
pub(crate) const SALT_PARTITION: usize = usize::MAX - 2;
pub(crate) const SALT_SUBSAMPLE: usize = usize::MAX - 3;

/// Runs one client's local epochs and returns its updated weights, its
/// accumulated class prototypes, and its mean training loss.
///
/// Per batch: craft the adversarial examples, compute the modulating
/// weights, accumulate feature prototypes, contrast against the global
/// prototypes when they exist, then take one SGD step on the combined loss.
pub fn local_update(
    dataset: &Dataset,
    client: &ClientState,
    broadcast: &ModelParams,
    global_prototypes: Option<&PrototypeSet>,
    config: &RoundConfig,
    seed: u64,
) -> Result<LocalUpdate> {
    if client.shard.is_empty() {
        return Err(Error::invalid("shard", "client has no samples"));
    }
    let num_classes = dataset.num_classes();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = broadcast.clone();
    let mut accumulator = PrototypeAccumulator::new(num_classes, params.feature_dim());
    let mut loss_sum = 0.0;
    let mut batch_count = 0usize;

    let contrast_live = config.contrast_active()
        && global_prototypes.map_or(false, |g| g.num_present() > 0);

    for _epoch in 0..config.train.local_epochs {
        let mut order = client.shard.indices.clone();
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.train.batch_size) {
            let (clean, labels) = dataset.batch(chunk);
            let attack_seed: u64 = rng.gen();
            let train_input = if config.method.uses_attack() {
                run_attack(
                    config.train_attack_kind,
                    &params,
                    &clean,
                    &labels,
                    &config.train_attack,
                    attack_seed,
                )?
                .into_perturbed()
            } else {
                clean.clone()
            };

            let trace = forward(&params, &train_input)?;
            if config.adversarial_prototypes || !config.method.uses_attack() {
                accumulator.add_batch(trace.features(), &labels)?;
            } else {
                let clean_trace = forward(&params, &clean)?;
                accumulator.add_batch(clean_trace.features(), &labels)?;
            }

            let weights = if config.calibration_active() {
                modulating_weights(&batch_class_stats(&labels, num_classes)?, &config.calibration)
            } else {
                ClassWeights::ones(num_classes)
            };
            let spec = if contrast_live {
                LossSpec::FatCc {
                    weights: &weights,
                    prototypes: global_prototypes.unwrap(),
                    tau: config.contrast.temperature,
                    lambda: config.contrast.lambda,
                }
            } else if config.calibration_active() {
                LossSpec::CalibratedCrossEntropy { weights: &weights }
            } else {
                LossSpec::CrossEntropy
            };

            let step = backprop_from_trace(&params, &trace, &labels, &spec)?;
            loss_sum += step.loss;
            batch_count += 1;
            params = sgd_step(&params, &step.param_grads, config.train.learning_rate)?;
        }
    }

    if !params.is_finite() {
        return Err(Error::Numeric(
            "local update produced non-finite parameters".into(),
        ));
    }
    Ok(LocalUpdate {
        params,
        prototypes: accumulator.finish(),
        mean_loss: loss_sum / batch_count as f64,
    })
}

/// Size-weighted elementwise mean of client parameters
/// (weights `D_i / sum D_i`).
pub fn fedavg(params_list: &[ModelParams], sizes: &[usize]) -> Result<ModelParams> {
    if params_list.is_empty() {
        return Err(Error::invalid("params_list", "empty aggregation"));
    }
    if params_list.len() != sizes.len() {
        return Err(Error::invalid(
            "sizes",
            format!("{} sizes for {} models", sizes.len(), params_list.len()),
        ));
    }
    if sizes.iter().any(|&s| s == 0) {
        return Err(Error::invalid("sizes", "client sizes must be positive"));
    }
    let first = &params_list[0];
    for (i, p) in params_list.iter().enumerate() {
        if !p.same_shape(first) {
            return Err(Error::shape(
                format!("fedavg model {i}"),
                "shapes matching the first model",
                "mismatched layer shapes",
            ));
        }
    }

    let total: f64 = sizes.iter().map(|&s| s as f64).sum();
    let mut out = first.zeros_like();
    for (params, &size) in params_list.iter().zip(sizes) {
        let weight = size as f64 / total;
        for (acc, src) in out.layers_mut().iter_mut().zip(params.layers()) {
            for (a, v) in acc.weight.data_mut().iter_mut().zip(src.weight.data()) {
                *a += weight * v;
            }
            for (a, v) in acc.bias.data_mut().iter_mut().zip(src.bias.data()) {
                *a += weight * v;
            }
        }
    }
    Ok(out)
}

/// Full training loop over `rounds` federated rounds.
///
/// Clients with empty shards are skipped and excluded from both
/// aggregations. Prototypes aggregated at the end of round `t` are the
/// global set passed to round `t + 1`; round 1 receives none. The whole run
/// is a pure function of the master seed (`config.train.seed`).
pub fn run_training(
    train: &Dataset,
    test: &Dataset,
    shards: &[ClientShard],
    config: &RoundConfig,
    rounds: usize,
    hidden: &[usize],
    eval_attacks: &[EvalAttack],
    parallel: bool,
) -> Result<(ServerState, Vec<RoundReport>)> {
    config.validate()?;
    if rounds == 0 {
        return Err(Error::invalid("rounds", "must be at least 1"));
    }
    let clients: Vec<ClientState> = shards
        .iter()
        .filter(|s| !s.is_empty())
        .map(|s| ClientState {
            client_id: s.client_id,
            shard: s.clone(),
        })
        .collect();
    if clients.is_empty() {
        return Err(Error::invalid("shards", "every client shard is empty"));
    }

    let master = config.train.seed;
    let mut widths = Vec::with_capacity(hidden.len() + 2);
    widths.push(train.dim());
    widths.extend_from_slice(hidden);
    widths.push(train.num_classes());
    let mut params = ModelParams::init(&widths, derive_seed(master, 0, SALT_MODEL_INIT))?;

    let mut global_prototypes: Option<PrototypeSet> = None;
    let mut reports = Vec::with_capacity(rounds);

    for round in 1..=rounds {
        let run_one = |client: &ClientState| -> Result<LocalUpdate> {
            local_update(
                train,
                client,
                &params,
                global_prototypes.as_ref(),
                config,
                derive_seed(master, round, client.client_id),
            )
            .map_err(|e| Error::ClientFailure {
                round,
                client_id: client.client_id,
                source: Box::new(e),
            })
        };
        let updates: Vec<Result<LocalUpdate>> = if parallel {
            clients.par_iter().map(run_one).collect()
        } else {
            clients.iter().map(run_one).collect()
        };
        let updates: Vec<LocalUpdate> = updates.into_iter().collect::<Result<_>>()?;

        let sizes: Vec<usize> = clients.iter().map(|c| c.shard.len()).collect();
        let models: Vec<ModelParams> = updates.iter().map(|u| u.params.clone()).collect();
        params = fedavg(&models, &sizes)?;
        let prototype_sets: Vec<PrototypeSet> =
            updates.iter().map(|u| u.prototypes.clone()).collect();
        global_prototypes = Some(aggregate_global(&prototype_sets)?);

        let total: f64 = sizes.iter().map(|&s| s as f64).sum();
        let train_loss = updates
            .iter()
            .zip(&sizes)
            .map(|(u, &s)| u.mean_loss * s as f64 / total)
            .sum();

        let (clean_accuracy, robust_accuracy) = evaluate(&params, test, eval_attacks)?;
        reports.push(RoundReport {
            round,
            clean_accuracy,
            robust_accuracy,
            train_loss,
        });
    }

    Ok((
        ServerState {
            params,
            global_prototypes,
            round: rounds,
        },
        reports,
    ))
}
