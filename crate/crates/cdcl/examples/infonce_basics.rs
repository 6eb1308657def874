//! The two contrastive losses on hand-built unit vectors. The paired
//! form puts each positive against its own copy of the negatives; the
//! anchor form ranks every positive against the full candidate set.
//! They agree when there is a single positive and diverge otherwise.
//!
//!     cargo run --example infonce_basics

use cdcl::losses::{cdc_anchor_loss, info_nce};
use cdcl::numerics::{l2_normalize, Matrix};

fn main() {
    let anchor = l2_normalize(&[1.0, 0.2]).unwrap();
    let close = l2_normalize(&[0.9, 0.3]).unwrap();
    let near = l2_normalize(&[0.7, -0.1]).unwrap();
    let far = l2_normalize(&[-0.8, 0.5]).unwrap();
    let opposite = l2_normalize(&[-1.0, -0.2]).unwrap();

    println!("one positive, three negatives, sweeping temperature:");
    for tau in [1.0, 0.5, 0.1, 0.05] {
        let loss = info_nce(
            &anchor,
            &[close.clone()],
            &[near.clone(), far.clone(), opposite.clone()],
            tau,
        )
        .unwrap();
        println!("  tau {tau:<5}: {loss:.4}");
    }

    // same geometry, both conventions, two positives
    let positives = vec![close.clone(), near.clone()];
    let negatives = vec![far.clone(), opposite.clone()];
    let paired = info_nce(&anchor, &positives, &negatives, 0.5).unwrap();

    let candidates = Matrix::from_rows(&[
        close.clone(),
        near.clone(),
        far.clone(),
        opposite.clone(),
    ]);
    let anchored = cdc_anchor_loss(&anchor, &candidates, &[0, 1], 0.5).unwrap();

    println!("\ntwo positives at tau 0.5:");
    println!("  per-positive denominators: {paired:.6}");
    println!("  all-candidate denominator: {anchored:.6}");

    // an anchor with no positives among the candidates contributes nothing
    let empty = cdc_anchor_loss(&anchor, &candidates, &[], 0.5).unwrap();
    println!("\nno positives: anchor term is {empty}");
}
