//! Backpropagated gradients of the full adaptation objective checked
//! against central differences, one parameter at a time. A batch-norm
//! encoder, cross-entropy on labeled source rows, and the bidirectional
//! contrastive term all sit between the parameters and the loss, so a
//! passing check exercises every derivative rule in the tape.
//!
//!     cargo run --release --example gradient_check

use cdcl::autodiff::{NodeId, Tape};
use cdcl::data::{generate_shifted_pair, GeneratedPair, ShiftConfig};
use cdcl::losses::{cdc_on_tape, PairMode, PairSelection};
use cdcl::model::{Activation, Domain, EncoderConfig, Mode, Model, TapeBinding};
use cdcl::numerics::finite_diff_check;

const TAU: f64 = 0.35;
const LAMBDA: f64 = 1.6;
const H: f64 = 1e-6;
const TOL: f64 = 1e-4;

fn batch(pair: &GeneratedPair) -> (Vec<usize>, Vec<i32>, Vec<bool>) {
    let labels: Vec<usize> = pair.source.labels.iter().map(|&l| l as usize).collect();
    // stand-in pseudo-labels: the hidden truth with one row flipped and
    // one row dropped, the shape a real labeling pass produces
    let mut pseudo = pair.target_truth.clone();
    pseudo[0] = (pseudo[0] + 1) % pair.source.classes as i32;
    let mut retained = vec![true; pseudo.len()];
    retained[3] = false;
    (labels, pseudo, retained)
}

fn objective(
    model: &Model,
    tape: &mut Tape,
    binding: &TapeBinding,
    pair: &GeneratedPair,
    labels: &[usize],
    pseudo: &[i32],
    retained: &[bool],
) -> NodeId {
    let src = model
        .forward(tape, binding, &pair.source.features, Domain::Source, Mode::Train)
        .unwrap();
    let logits = model.classify_on_tape(tape, binding, src.raw);
    let ce = tape.cross_entropy_mean(logits, labels.to_vec());

    let tgt = model
        .forward(tape, binding, &pair.target.features, Domain::Target, Mode::Train)
        .unwrap();
    let sel =
        PairSelection::build(PairMode::CrossDomain, &pair.source.labels, pseudo, retained)
            .unwrap();
    let (ls, lt) = cdc_on_tape(tape, src.z, tgt.z, &sel, TAU).unwrap();
    let cdc = tape.add(ls, lt);
    let scaled = tape.scale(cdc, LAMBDA);
    tape.add(ce, scaled)
}

fn main() {
    let shift = ShiftConfig {
        classes: 3,
        input_dim: 4,
        per_class_count: 4,
        class_center_radius: 3.0,
        cluster_stddev: 1.0,
        rotation_angle: 0.9,
        translation: vec![0.0, 0.0, 0.5, 0.5],
        seed: 42,
    };
    let pair = generate_shifted_pair(&shift).unwrap();
    let (labels, pseudo, retained) = batch(&pair);

    let cfg = EncoderConfig {
        input_dim: 4,
        hidden_dims: vec![6, 5],
        feature_dim: 4,
        activation: Activation::Tanh,
        per_domain_bn: false,
        bottleneck: true,
    };
    let model = Model::init(&cfg, shift.classes, 42).unwrap();

    let mut tape = Tape::new();
    let binding = model.bind(&mut tape);
    let loss = objective(&model, &mut tape, &binding, &pair, &labels, &pseudo, &retained);
    let grads = tape.backward(loss);
    let analytic = model.grad_vector(&binding, &grads);
    let point = model.flatten_trainable();

    println!("objective value       {:.6}", tape.scalar(loss));
    println!("trainable parameters  {}", point.len());

    let eval = |vals: &[f64]| -> f64 {
        let mut m = model.clone();
        m.set_trainable(vals).unwrap();
        let mut t = Tape::new();
        let b = m.bind(&mut t);
        let l = objective(&m, &mut t, &b, &pair, &labels, &pseudo, &retained);
        t.scalar(l)
    };

    // a few coordinates side by side before the full sweep
    println!("\n  index   analytic        central difference");
    let mut x = point.clone();
    for i in (0..point.len()).step_by(point.len() / 6) {
        let orig = x[i];
        x[i] = orig + H;
        let fp = eval(&x);
        x[i] = orig - H;
        let fm = eval(&x);
        x[i] = orig;
        println!("  {:>5}   {:>13.9}   {:>13.9}", i, analytic[i], (fp - fm) / (2.0 * H));
    }

    let report = finite_diff_check(eval, &analytic, &point, H, TOL);
    println!(
        "\nworst coordinate {}  relative error {:.3e}  (tolerance {TOL:.0e})",
        report.worst_index, report.max_rel_error
    );
    println!("{}", if report.passed { "gradients agree" } else { "MISMATCH" });
}
