//! Full adaptation run: pretrain on the labeled source domain, measure
//! how badly the shift hurts, then align the domains with the combined
//! cross-entropy + contrastive objective.
//!
//!     cargo run --release --example standard_uda

use cdcl::data::{generate_shifted_pair, ShiftConfig};
use cdcl::model::{Activation, Domain, EncoderConfig, Model};
use cdcl::trainer::{evaluate, pretrain_source, train_uda, HyperParams};

fn target_accuracy(model: &Model, pair: &cdcl::data::GeneratedPair) -> f64 {
    evaluate(model, &pair.target.features, &pair.target_truth, Domain::Target)
        .unwrap()
        .accuracy
}

fn main() {
    let shift = ShiftConfig {
        classes: 3,
        input_dim: 8,
        per_class_count: 100,
        class_center_radius: 3.0,
        cluster_stddev: 1.0,
        rotation_angle: 0.9,
        translation: vec![0.0, 0.0, 0.5, 0.5, 0.5, 0.5, 0.5, 0.5],
        seed: 1,
    };
    let pair = generate_shifted_pair(&shift).unwrap();

    let encoder = EncoderConfig {
        input_dim: 8,
        hidden_dims: vec![16],
        feature_dim: 8,
        activation: Activation::Tanh,
        per_domain_bn: false,
        bottleneck: true,
    };
    let pretrain = HyperParams {
        epochs: 40,
        seed: 1,
        ..HyperParams::default()
    };
    let (model, report) = pretrain_source(&pair.source, &encoder, &pretrain).unwrap();
    println!(
        "pretrained on {} source samples: best validation accuracy {:.3} at epoch {}",
        pair.source.len(),
        report.best_val_accuracy,
        report.best_epoch
    );
    println!("target accuracy before adaptation: {:.3}", target_accuracy(&model, &pair));

    // tau 0.05, lambda 1.6, 15 epochs of 12 iterations
    let hyper = HyperParams { seed: 1, ..HyperParams::default() };
    let (adapted, train) = train_uda(model, &pair.source, &pair.target, &hyper).unwrap();

    println!("\nepoch  retained  cross-entropy  alignment(source)  alignment(target)");
    for (e, loss) in train.losses.iter().enumerate() {
        println!(
            "{:>5}  {:>8.2}  {:>13.4}  {:>17.2}  {:>17.2}",
            e, train.retained_fraction[e], loss.ce, loss.cdc_source, loss.cdc_target
        );
    }
    println!("\ntarget accuracy after adaptation: {:.3}", target_accuracy(&adapted, &pair));
}
