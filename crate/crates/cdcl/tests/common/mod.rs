//! Shared helpers for the integration suites.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use cdcl::autodiff::{NodeId, Tape};
use cdcl::data::{generate_shifted_pair, GeneratedPair, ShiftConfig};
use cdcl::model::{Activation, Domain, EncoderConfig, Mode, Model, TapeBinding};
use cdcl::numerics::{finite_diff_check, GradCheckReport, Matrix};

/// Small two-hidden-layer encoder for gradient checks. Tanh keeps the
/// loss smooth so central differences converge; relu kinks are exercised
/// at the operator level instead.
pub fn grad_cfg(per_domain_bn: bool, bottleneck: bool) -> EncoderConfig {
    EncoderConfig {
        input_dim: 4,
        hidden_dims: vec![6, 5],
        feature_dim: 4,
        activation: Activation::Tanh,
        per_domain_bn,
        bottleneck,
    }
}

pub fn sample_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = Matrix::zeros(rows, cols);
    for r in 0..rows {
        for c in 0..cols {
            // Box-Muller keeps the dev-dependency list short.
            let u1: f64 = rng.gen_range(1e-12..1.0);
            let u2: f64 = rng.gen_range(0.0..1.0);
            m.row_mut(r)[c] =
                (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
        }
    }
    m
}

pub fn sample_labels(n: usize, classes: usize, seed: u64) -> Vec<i32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.gen_range(0..classes) as i32).collect()
}

/// Compare the tape gradient of `build`'s scalar loss against central
/// differences over every trainable parameter of `model`.
pub fn check_model_loss<F>(model: &Model, build: F, h: f64, tol: f64) -> GradCheckReport
where
    F: Fn(&Model, &mut Tape, &TapeBinding) -> NodeId,
{
    let eval = |vals: &[f64]| -> f64 {
        let mut m = model.clone();
        m.set_trainable(vals).unwrap();
        let mut tape = Tape::new();
        let binding = m.bind(&mut tape);
        let loss = build(&m, &mut tape, &binding);
        tape.scalar(loss)
    };
    let mut tape = Tape::new();
    let binding = model.bind(&mut tape);
    let loss = build(model, &mut tape, &binding);
    let grads = tape.backward(loss);
    let analytic = model.grad_vector(&binding, &grads);
    let point = model.flatten_trainable();
    finite_diff_check(eval, &analytic, &point, h, tol)
}

/// Forward a batch in training mode and return the normalized features.
pub fn features_on_tape(
    model: &Model,
    tape: &mut Tape,
    binding: &TapeBinding,
    x: &Matrix,
    domain: Domain,
) -> NodeId {
    model
        .forward(tape, binding, x, domain, Mode::Train)
        .unwrap()
        .z
}

/// The calibrated benchmark: three Gaussian classes on a circle, the
/// target rotated by `rotation` in the class plane and offset in the
/// noise dimensions.
pub fn benchmark_shift(seed: u64, rotation: f64) -> ShiftConfig {
    ShiftConfig {
        classes: 3,
        input_dim: 8,
        per_class_count: 100,
        class_center_radius: 3.0,
        cluster_stddev: 1.0,
        rotation_angle: rotation,
        translation: vec![0.0, 0.0, 0.5, 0.5, 0.5, 0.5, 0.5, 0.5],
        seed,
    }
}

pub fn benchmark_pair(seed: u64, rotation: f64) -> GeneratedPair {
    generate_shifted_pair(&benchmark_shift(seed, rotation)).unwrap()
}

/// Encoder used by the benchmark runs; matches the command-line defaults.
pub fn benchmark_encoder() -> EncoderConfig {
    EncoderConfig {
        input_dim: 8,
        hidden_dims: vec![16],
        feature_dim: 8,
        activation: Activation::Tanh,
        per_domain_bn: false,
        bottleneck: true,
    }
}

pub const GRAD_TAU: f64 = 0.35;
pub const GRAD_LAMBDA: f64 = 1.6;

pub fn ce_loss(model: &Model, tape: &mut Tape, binding: &TapeBinding, seed: u64) -> NodeId {
    let x = sample_matrix(6, 4, seed);
    let labels: Vec<usize> = sample_labels(6, 3, seed ^ 0xC0FFEE)
        .iter()
        .map(|&l| l as usize)
        .collect();
    let pass = model
        .forward(tape, binding, &x, Domain::Source, Mode::Train)
        .unwrap();
    let logits = model.classify_on_tape(tape, binding, pass.raw);
    tape.cross_entropy_mean(logits, labels)
}

pub fn info_nce_loss(model: &Model, tape: &mut Tape, binding: &TapeBinding, seed: u64) -> NodeId {
    let x = sample_matrix(7, 4, seed);
    let z = features_on_tape(model, tape, binding, &x, Domain::Source);
    let anchor = tape.gather_rows(z, vec![0]);
    let others = tape.gather_rows(z, vec![1, 2, 3, 4, 5, 6]);
    let sims = tape.matmul_nt(anchor, others);
    tape.info_nce_pairs(sims, 2, GRAD_TAU)
}

pub fn cdc_loss(
    model: &Model,
    tape: &mut Tape,
    binding: &TapeBinding,
    mode: cdcl::losses::PairMode,
    seed: u64,
) -> NodeId {
    let xs = sample_matrix(6, 4, seed);
    let xt = sample_matrix(5, 4, seed ^ 0xABCD);
    let zs = features_on_tape(model, tape, binding, &xs, Domain::Source);
    let zt = features_on_tape(model, tape, binding, &xt, Domain::Target);
    let s_labels = sample_labels(6, 3, seed ^ 0x51);
    let t_labels = sample_labels(5, 3, seed ^ 0x52);
    // one target sample filtered out to exercise the retention mask
    let mut retained = vec![true; 5];
    retained[seed as usize % 5] = false;
    let selection =
        cdcl::losses::PairSelection::build(mode, &s_labels, &t_labels, &retained).unwrap();
    let (ls, lt) = cdcl::losses::cdc_on_tape(tape, zs, zt, &selection, GRAD_TAU).unwrap();
    tape.add(ls, lt)
}

pub fn total_loss(model: &Model, tape: &mut Tape, binding: &TapeBinding, seed: u64) -> NodeId {
    let ce = ce_loss(model, tape, binding, seed);
    let cdc = cdc_loss(
        model,
        tape,
        binding,
        cdcl::losses::PairMode::CrossDomain,
        seed ^ 0x7777,
    );
    let scaled = tape.scale(cdc, GRAD_LAMBDA);
    tape.add(ce, scaled)
}

pub fn sdf_loss(model: &Model, tape: &mut Tape, binding: &TapeBinding, seed: u64) -> NodeId {
    let x = sample_matrix(6, 4, seed);
    let labels: Vec<usize> = sample_labels(6, 3, seed ^ 0x99)
        .iter()
        .map(|&l| l as usize)
        .collect();
    let z = features_on_tape(model, tape, binding, &x, Domain::Target);
    let logits = model
        .prototype_logits_on_tape(tape, binding, z, GRAD_TAU)
        .unwrap();
    tape.cross_entropy_mean(logits, labels)
}
