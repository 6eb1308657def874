//! Which pairs should the contrastive term pull together? Adapts the
//! same pretrained encoder under every pair-formation rule and compares
//! target accuracy. Cross-domain pairs act on both sides of the shift;
//! the single-anchor rules apply half the force, and in-domain pairs
//! never look across the gap at all.
//!
//!     cargo run --release --example pair_formation_ablation

use cdcl::data::{generate_shifted_pair, ShiftConfig};
use cdcl::losses::PairMode;
use cdcl::model::{Activation, Domain, EncoderConfig};
use cdcl::trainer::{evaluate, pretrain_source, train_uda, HyperParams};

const MODES: [(PairMode, &str); 5] = [
    (PairMode::CrossDomain, "cross-domain"),
    (PairMode::CrossSourceAnchorsOnly, "cross-source-anchors"),
    (PairMode::CrossTargetAnchorsOnly, "cross-target-anchors"),
    (PairMode::InDomain, "in-domain"),
    (PairMode::CombinedDomain, "combined-domain"),
];
const SEEDS: [u64; 3] = [1, 2, 3];

fn main() {
    let enc = EncoderConfig {
        input_dim: 8,
        hidden_dims: vec![16],
        feature_dim: 8,
        activation: Activation::Tanh,
        per_domain_bn: false,
        bottleneck: true,
    };

    let mut source_only = Vec::new();
    let mut scores = vec![Vec::new(); MODES.len()];

    for &seed in &SEEDS {
        let shift = ShiftConfig {
            classes: 3,
            input_dim: 8,
            per_class_count: 100,
            class_center_radius: 3.0,
            cluster_stddev: 1.0,
            rotation_angle: 0.9,
            translation: vec![0.0, 0.0, 0.5, 0.5, 0.5, 0.5, 0.5, 0.5],
            seed,
        };
        let pair = generate_shifted_pair(&shift).unwrap();

        let pre = HyperParams { epochs: 40, seed, ..HyperParams::default() };
        let (model, _) = pretrain_source(&pair.source, &enc, &pre).unwrap();
        let base = evaluate(&model, &pair.target.features, &pair.target_truth, Domain::Target)
            .unwrap()
            .accuracy;
        source_only.push(base);

        for (i, &(mode, _)) in MODES.iter().enumerate() {
            let hyper = HyperParams { pair_mode: mode, seed, ..HyperParams::default() };
            let (adapted, _) = train_uda(model.clone(), &pair.source, &pair.target, &hyper).unwrap();
            let acc = evaluate(&adapted, &pair.target.features, &pair.target_truth, Domain::Target)
                .unwrap()
                .accuracy;
            scores[i].push(acc);
        }
        println!("seed {seed} done");
    }

    let mean = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len() as f64;

    println!("\ntarget accuracy by pair formation (seeds {SEEDS:?}):\n");
    println!("  {:<22} {:>7} {:>7} {:>7} {:>7}", "mode", "s1", "s2", "s3", "mean");
    let fmt_row = |name: &str, xs: &[f64]| {
        println!(
            "  {:<22} {:>7.3} {:>7.3} {:>7.3} {:>7.3}",
            name,
            xs[0],
            xs[1],
            xs[2],
            mean(xs)
        );
    };
    fmt_row("source-only baseline", &source_only);
    for (i, &(_, name)) in MODES.iter().enumerate() {
        fmt_row(name, &scores[i]);
    }
}
