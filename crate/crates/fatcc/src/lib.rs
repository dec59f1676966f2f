//! Federated adversarial training simulator.
//!
//! Implements the FatCC training method — mini-batch class-frequency logit
//! calibration combined with a supervised contrastive pull toward globally
//! aggregated class prototypes — alongside the FST and FedPGD baselines,
//! white-box FGSM/BIM/PGD attacks, a Dirichlet label non-IID partitioner,
//! and a config-driven experiment runner that emits deterministic CSV
//! reports.

pub mod attack;
pub mod data;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod federation;
pub mod nn;
pub mod objective;
pub mod tensor;

pub use attack::{bim, fgsm, pgd, run_attack, AdversarialBatch, AttackConfig, AttackKind};
pub use data::{
    dirichlet_partition, label_entropy, load_idx, synth_gaussian, synth_train_test, ClientShard,
    Dataset, PartitionConfig,
};
pub use error::{Error, Result};
pub use eval::{argmax, evaluate, EvalAttack, RoundReport};
pub use experiment::{
    compare_reports, run_experiment, summarize, CompareSummary, DatasetSpec, ExperimentConfig,
    ExperimentOutcome, MetricDelta, ParsedReport, PartitionOptions, SummaryRow, OUTPUT_DIR_ENV,
};
pub use federation::{
    derive_seed, fedavg, local_update, run_training, ClientState, LocalUpdate, Method,
    RoundConfig, ServerState,
};
pub use nn::{
    backprop, backprop_from_trace, cross_entropy, forward, input_gradient, sgd_step, Backprop,
    ForwardTrace, Layer, ModelParams, TrainConfig,
};
pub use objective::{
    aggregate_global, batch_class_stats, calibrated_ce, contrastive_loss, contrastive_terms,
    fatcc_local_loss, local_prototypes, modulating_weights, psi_ratios, taylor_ratio_diagnostic,
    BatchClassStats, CalibrationConfig, ClassWeights, ContrastConfig, LossSpec,
    PrototypeAccumulator, PrototypeSet,
};
pub use tensor::Tensor;
