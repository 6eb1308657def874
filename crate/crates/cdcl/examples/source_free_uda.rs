//! Adaptation when the source data is gone: only the pretrained weights
//! travel. The classifier rows become fixed class prototypes and the
//! encoder is pulled toward them under pseudo-labels.
//!
//!     cargo run --release --example source_free_uda

use cdcl::data::{generate_shifted_pair, ShiftConfig};
use cdcl::model::{Activation, Domain, EncoderConfig, Model};
use cdcl::trainer::{evaluate, pretrain_source, train_sdf, HyperParams};

fn main() {
    let shift = ShiftConfig {
        classes: 3,
        input_dim: 8,
        per_class_count: 100,
        class_center_radius: 3.0,
        cluster_stddev: 1.0,
        rotation_angle: 0.9,
        translation: vec![0.0, 0.0, 0.5, 0.5, 0.5, 0.5, 0.5, 0.5],
        seed: 2,
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

    let pretrain = HyperParams { epochs: 40, seed: 2, ..HyperParams::default() };
    let (model, _) = pretrain_source(&pair.source, &encoder, &pretrain).unwrap();

    let before = evaluate(&model, &pair.target.features, &pair.target_truth, Domain::Target)
        .unwrap()
        .accuracy;
    println!("target accuracy with source-trained weights: {before:.3}");

    // the classifier is frozen from here on; train_sdf never sees source data
    let mut reference = model.clone();
    reference.prepare_source_free().unwrap();

    let hyper = HyperParams { seed: 2, ..HyperParams::default() };
    let (adapted, report) = train_sdf(model, &pair.target, &hyper).unwrap();

    let after = evaluate(&adapted, &pair.target.features, &pair.target_truth, Domain::Target)
        .unwrap()
        .accuracy;
    println!("target accuracy after source-free adaptation: {after:.3}");
    println!(
        "classifier untouched by training: {}",
        adapted.classifier_w == reference.classifier_w
    );
    println!(
        "retained fraction per epoch: {:?}",
        report
            .retained_fraction
            .iter()
            .map(|f| (f * 100.0).round() / 100.0)
            .collect::<Vec<_>>()
    );

    let frozen: Model = adapted;
    let per_class = evaluate(&frozen, &pair.target.features, &pair.target_truth, Domain::Target)
        .unwrap()
        .per_class_accuracy;
    println!("per-class accuracy: {per_class:.3?}");
}
