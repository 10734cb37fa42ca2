//! Fit all five post-hoc OOD scores (MSP, ODIN, energy, Mahalanobis, Gram)
//! on a trained model and compare how well each separates in-distribution
//! samples from OOD samples.
//!
//! Run with: cargo run --example score_suite

use spurious_ood::config::OodSet;
use spurious_ood::harness::{prepare_gaussian, rows_of, FittedScorers};
use spurious_ood::metrics::DetectionResult;
use spurious_ood::scores::ScoreFn;
use spurious_ood::train::{train, TrainConfig};

fn main() {
    let data =
        prepare_gaussian(0.4, 0, 300, &[OodSet::Spurious, OodSet::Noise]).unwrap();
    let cfg = TrainConfig {
        hidden: vec![16, 8],
        epochs: 40,
        learning_rate: 0.05,
        seed: 0,
        ..TrainConfig::default()
    };
    let (model, _) = train(&data.train, &cfg).unwrap();
    let fitted = FittedScorers::fit(&model, &data, &ScoreFn::ALL).unwrap();

    let id_rows = rows_of(&data.id_test);
    println!("{:<12} {:>10} {:>8} {:>8}", "score_fn", "ood_set", "fpr95", "auroc");
    for sf in ScoreFn::ALL {
        let id_scores = fitted.score_rows(sf, &id_rows).unwrap();
        for (set, rows) in &data.ood {
            let ood_scores = fitted.score_rows(sf, rows).unwrap();
            let det = DetectionResult::evaluate(id_scores.clone(), ood_scores).unwrap();
            println!(
                "{:<12} {:>10} {:>8.4} {:>8.4}",
                sf.name(),
                set.name(),
                det.fpr95,
                det.auroc
            );
        }
    }
    println!("\n(all scores follow the convention: higher = more in-distribution)");
}
