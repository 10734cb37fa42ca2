//! The detection metrics on their own: FPR at 95% TPR and rank-sum AUROC,
//! including how the threshold is chosen and how ties are handled.
//!
//! Run with: cargo run --example detection_metrics

use spurious_ood::metrics::{auroc, detector, fpr_at_tpr, Detection};
use spurious_ood::numerics::Rng;

fn main() {
    // two overlapping Gaussian score populations
    let mut rng = Rng::new(42);
    let id: Vec<f64> = (0..2000).map(|_| 1.0 + rng.next_gaussian()).collect();
    let ood: Vec<f64> = (0..1000).map(|_| -0.5 + rng.next_gaussian()).collect();

    let (fpr95, lambda) = fpr_at_tpr(&id, &ood, 0.95).unwrap();
    let a = auroc(&id, &ood).unwrap();
    println!("ID scores:  n = {}, mean ≈ 1.0", id.len());
    println!("OOD scores: n = {}, mean ≈ -0.5", ood.len());
    println!("threshold lambda admitting 95% of ID: {lambda:.4}");
    println!("FPR95 = {fpr95:.4}");
    println!("AUROC = {a:.4}");

    // the detector is a plain threshold, with the boundary counted as "in"
    assert_eq!(detector(lambda, lambda), Detection::In);
    assert_eq!(detector(lambda - 1e-9, lambda), Detection::Out);
    println!("\ndetector(score, lambda): in iff score >= lambda");

    // AUROC is invariant under any strictly increasing transform
    let id_exp: Vec<f64> = id.iter().map(|s| s.exp()).collect();
    let ood_exp: Vec<f64> = ood.iter().map(|s| s.exp()).collect();
    let a_exp = auroc(&id_exp, &ood_exp).unwrap();
    println!("AUROC after exp transform: {a_exp:.4} (unchanged)");
}
