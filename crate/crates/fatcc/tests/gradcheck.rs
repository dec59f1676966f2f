//! Finite-difference verification of every analytic gradient path: plain
//! cross-entropy, calibrated cross-entropy, and the combined objective with
//! the prototype-contrast term, for both parameters and inputs.

mod common;

use common::{fd_input_grads, fd_param_grads, feature_norms, kink_free, rel_err, LossMode};
use fatcc::{
    backprop, contrastive_loss, ClassWeights, Layer, ModelParams, PrototypeSet, Tensor,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const FD_STEP: f64 = 1e-5;
const TOLERANCE: f64 = 1e-4;

struct Fixture {
    params: ModelParams,
    input: Tensor,
    labels: Vec<usize>,
    mode: LossMode,
}

fn build_fixture(seed: u64, mode_index: usize) -> Option<Fixture> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let input_dim = rng.gen_range(3..=6);
    let classes = rng.gen_range(3..=5);
    let mut widths = vec![input_dim];
    for _ in 0..rng.gen_range(1..=2) {
        widths.push(rng.gen_range(4..=8));
    }
    widths.push(classes);
    let params = ModelParams::init(&widths, rng.gen()).unwrap();

    let batch = rng.gen_range(2..=4);
    let input = Tensor::new(
        vec![batch, input_dim],
        (0..batch * input_dim).map(|_| rng.gen_range(0.0..1.0)).collect(),
    )
    .unwrap();
    let labels: Vec<usize> = (0..batch).map(|_| rng.gen_range(0..classes)).collect();

    // Central differences are only valid away from the rectifier kink, and
    // the cosine term needs features that are not vanishingly small.
    if !kink_free(&params, &input, 1e-3) {
        return None;
    }
    if feature_norms(&params, &input)
        .iter()
        .any(|&n| n > 0.0 && n < 1e-2)
    {
        return None;
    }

    let mode = match mode_index % 3 {
        0 => LossMode::Plain,
        1 => {
            let weights =
                ClassWeights::from_values((0..classes).map(|_| rng.gen_range(0.2..2.5)).collect());
            LossMode::Calibrated(weights)
        }
        _ => {
            let weights =
                ClassWeights::from_values((0..classes).map(|_| rng.gen_range(0.2..2.5)).collect());
            let feature_dim = params.feature_dim();
            let mut prototypes = PrototypeSet::empty(classes, feature_dim);
            for class in 0..classes {
                // Keep at least the first label's class present so the
                // contrast term actually fires.
                if class == labels[0] || rng.gen_bool(0.7) {
                    prototypes
                        .set(class, (0..feature_dim).map(|_| rng.gen_range(-1.0..1.0)).collect())
                        .unwrap();
                }
            }
            LossMode::Combined {
                weights,
                prototypes,
                tau: rng.gen_range(0.07..1.5),
                lambda: rng.gen_range(0.3..2.0),
            }
        }
    };
    Some(Fixture {
        params,
        input,
        labels,
        mode,
    })
}

fn fixture(base_seed: u64, mode_index: usize) -> Fixture {
    (0..1000)
        .find_map(|k| build_fixture(base_seed + 1000 * k, mode_index))
        .expect("no kink-free fixture found")
}

fn check_fixture(fx: &Fixture) -> (f64, usize) {
    let result = backprop(&fx.params, &fx.input, &fx.labels, &fx.mode.spec()).unwrap();
    let fd_params = fd_param_grads(&fx.params, &fx.input, &fx.labels, &fx.mode, FD_STEP);
    let fd_inputs = fd_input_grads(&fx.params, &fx.input, &fx.labels, &fx.mode, FD_STEP);

    let mut worst = 0.0f64;
    let mut checked = 0usize;
    for (analytic, numeric) in result.param_grads.layers().iter().zip(fd_params.layers()) {
        for (&a, &n) in analytic
            .weight
            .data()
            .iter()
            .chain(analytic.bias.data())
            .zip(numeric.weight.data().iter().chain(numeric.bias.data()))
        {
            worst = worst.max(rel_err(a, n));
            checked += 1;
        }
    }
    for (&a, &n) in result.input_grads.data().iter().zip(fd_inputs.data()) {
        worst = worst.max(rel_err(a, n));
        checked += 1;
    }
    (worst, checked)
}

#[test]
fn plain_cross_entropy_gradients_match_central_differences() {
    for seed in 0..8u64 {
        let fx = fixture(seed, 0);
        let (worst, checked) = check_fixture(&fx);
        assert!(
            worst < TOLERANCE,
            "seed {seed}: worst relative error {worst:.3e} over {checked} entries"
        );
    }
}

#[test]
fn calibrated_cross_entropy_gradients_match_central_differences() {
    for seed in 100..108u64 {
        let fx = fixture(seed, 1);
        let (worst, checked) = check_fixture(&fx);
        assert!(
            worst < TOLERANCE,
            "seed {seed}: worst relative error {worst:.3e} over {checked} entries"
        );
    }
}

#[test]
fn combined_objective_gradients_match_central_differences() {
    for seed in 200..208u64 {
        let fx = fixture(seed, 2);
        let (worst, checked) = check_fixture(&fx);
        assert!(
            worst < TOLERANCE,
            "seed {seed}: worst relative error {worst:.3e} over {checked} entries"
        );
    }
}

#[test]
fn linear_model_input_gradient_matches_closed_form_oracle() {
    // Independent scalar route: dL/dx = W^T (softmax(z) - onehot(y)) / B.
    let classes = 3;
    let dim = 4;
    let w: Vec<f64> = vec![
        0.4, -0.9, 0.3, 0.7, -0.6, 0.2, 0.8, -0.3, 0.1, 0.5, -0.7, 0.9,
    ];
    let bias = vec![0.05, -0.1, 0.2];
    let params = ModelParams::new(vec![Layer {
        weight: Tensor::matrix(classes, dim, w.clone()).unwrap(),
        bias: Tensor::vector(bias.clone()),
    }])
    .unwrap();
    let input = Tensor::matrix(2, dim, vec![0.3, 0.9, 0.2, 0.6, 0.8, 0.1, 0.5, 0.4]).unwrap();
    let labels = [2usize, 0];

    let result = backprop(&params, &input, &labels, &fatcc::LossSpec::CrossEntropy).unwrap();

    for (b, &label) in labels.iter().enumerate() {
        let x = input.row(b);
        let z: Vec<f64> = (0..classes)
            .map(|o| bias[o] + (0..dim).map(|i| w[o * dim + i] * x[i]).sum::<f64>())
            .collect();
        let denom: f64 = z.iter().map(|v| v.exp()).sum();
        let probs: Vec<f64> = z.iter().map(|v| v.exp() / denom).collect();
        for i in 0..dim {
            let expected: f64 = (0..classes)
                .map(|o| w[o * dim + i] * (probs[o] - if o == label { 1.0 } else { 0.0 }))
                .sum::<f64>()
                / labels.len() as f64;
            let got = result.input_grads.row(b)[i];
            assert!(
                (got - expected).abs() < 1e-12,
                "row {b} dim {i}: {got} vs {expected}"
            );
        }
    }
}

/// Builds a net whose feature vector is exactly the input (identity first
/// layer on positive inputs) and whose logits are constant (zero final
/// layer), so the input gradient is purely the contrast term.
fn contrast_probe_net(dim: usize, classes: usize) -> ModelParams {
    let mut identity = vec![0.0; dim * dim];
    for i in 0..dim {
        identity[i * dim + i] = 1.0;
    }
    ModelParams::new(vec![
        Layer {
            weight: Tensor::matrix(dim, dim, identity).unwrap(),
            bias: Tensor::zeros(vec![dim]),
        },
        Layer {
            weight: Tensor::matrix(classes, dim, vec![0.0; classes * dim]).unwrap(),
            bias: Tensor::zeros(vec![classes]),
        },
    ])
    .unwrap()
}

#[test]
fn contrast_gradient_pulls_toward_positive_prototype() {
    let dim = 2;
    let mut global = PrototypeSet::empty(2, dim);
    global.set(0, vec![1.0, 0.0]).unwrap();
    global.set(1, vec![0.0, 1.0]).unwrap();
    let tau = 0.5;

    // H = (1, 1) is equidistant from both prototypes.
    let h = Tensor::matrix(1, dim, vec![1.0, 1.0]).unwrap();
    let labels = [0usize];
    let params = contrast_probe_net(dim, 2);
    let ones = ClassWeights::ones(2);
    let spec = fatcc::LossSpec::FatCc {
        weights: &ones,
        prototypes: &global,
        tau,
        lambda: 1.0,
    };
    let analytic = backprop(&params, &h, &labels, &spec).unwrap().input_grads;

    // The same gradient by central differences on the standalone loss.
    let cosine = |a: &[f64], b: &[f64]| {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na: f64 = a.iter().map(|v| v * v).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|v| v * v).sum::<f64>().sqrt();
        dot / (na * nb)
    };
    let step = 1e-6;
    for k in 0..dim {
        let mut plus = h.clone();
        plus.data_mut()[k] += step;
        let mut minus = h.clone();
        minus.data_mut()[k] -= step;
        let numeric = (contrastive_loss(&plus, &labels, &global, tau).unwrap()
            - contrastive_loss(&minus, &labels, &global, tau).unwrap())
            / (2.0 * step);
        assert!(
            rel_err(analytic.data()[k], numeric) < 1e-5,
            "component {k}: analytic {} vs numeric {numeric}",
            analytic.data()[k]
        );
    }

    // A descent step must raise the positive cosine and lower the negative.
    let lr = 1e-3;
    let moved: Vec<f64> = h
        .data()
        .iter()
        .zip(analytic.data())
        .map(|(v, g)| v - lr * g)
        .collect();
    let pos_before = cosine(h.row(0), global.get(0).unwrap());
    let neg_before = cosine(h.row(0), global.get(1).unwrap());
    let pos_after = cosine(&moved, global.get(0).unwrap());
    let neg_after = cosine(&moved, global.get(1).unwrap());
    assert!(pos_after > pos_before, "{pos_after} !> {pos_before}");
    assert!(neg_after < neg_before, "{neg_after} !< {neg_before}");
}
