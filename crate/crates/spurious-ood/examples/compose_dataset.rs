//! Compose a colored-digit dataset with a chosen label-color correlation r
//! and write it to disk (CMN1 binary plus a plain-text manifest).
//!
//! Run with: cargo run --example compose_dataset -- [r] [out_dir]
//! Expects the IDX digit files under data/mnist/.

use spurious_ood::colormnist::{
    compose, ood_splits, write_manifest, CorrelationSpec, IdxImages, Palette,
    TRAIN_ENVS,
};
use spurious_ood::numerics::Rng;
use std::fs;
use std::path::{Path, PathBuf};

fn main() {
    let r: f64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0.45);
    let out: PathBuf =
        std::env::args().nth(2).unwrap_or_else(|| "target/colormnist".into()).into();
    fs::create_dir_all(&out).unwrap();

    let dir = Path::new("data/mnist");
    let idx = IdxImages::load(
        &dir.join("digits-images-idx3-ubyte"),
        &dir.join("digits-labels-idx1-ubyte"),
    )
    .expect("IDX digit files under data/mnist/");

    let palette = Palette::default();
    let spec = CorrelationSpec::new(r).unwrap();
    let mut rng = Rng::new(0);
    let id = compose(&idx, spec, &palette, &mut rng).unwrap();

    // empirical color table per label
    let mut counts = [[0usize; TRAIN_ENVS]; 2];
    for (&y, &e) in id.labels.iter().zip(&id.envs) {
        counts[y as usize][e as usize] += 1;
    }
    println!("composed {} in-distribution samples at r = {r}", id.len());
    for y in 0..2 {
        let total: usize = counts[y].iter().sum();
        let freq: Vec<String> = counts[y]
            .iter()
            .map(|&c| format!("{:.3}", c as f64 / total as f64))
            .collect();
        println!("  digit {y}: P(red, green, purple, pink) = {}", freq.join(", "));
    }

    let suite = ood_splits(&idx, 400, &palette, &mut rng).unwrap();
    println!(
        "OOD suite: {} spurious, {} held-out-color, {} noise",
        suite.spurious.len(),
        suite.nonspurious[0].1.len(),
        suite.nonspurious[1].1.len()
    );

    id.save(&out.join("id.cmn")).unwrap();
    suite.spurious.save(&out.join("ood_spurious.cmn")).unwrap();
    write_manifest(&out.join("manifest.txt"), r, 0, &palette).unwrap();
    println!("wrote CMN1 files and manifest to {}", out.display());
}
