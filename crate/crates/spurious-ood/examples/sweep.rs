//! A miniature end-to-end sweep on the synthetic dataset: parse a config,
//! run every (r, objective, scorer, ood_set, seed) cell, and print the
//! resulting CSV table. The same machinery drives the `spurious-ood run`
//! command.
//!
//! Run with: cargo run --example sweep -- [out_dir]

use spurious_ood::config::parse_config_str;
use spurious_ood::harness::run;
use std::fs;
use std::path::PathBuf;

fn main() {
    let out: PathBuf =
        std::env::args().nth(1).unwrap_or_else(|| "target/sweep".into()).into();
    let plan = parse_config_str(
        "dataset = gaussian\n\
         r = 0.1, 0.4\n\
         seeds = 0, 1\n\
         objectives = erm\n\
         scorers = msp, energy\n\
         ood_sets = spurious, noise\n\
         hidden = 16, 8\n\
         epochs = 20\n\
         learning_rate = 0.05\n\
         ood_samples = 200\n",
    )
    .unwrap();

    let rows = run(&plan, &out).unwrap();
    println!("{} result rows -> {}\n", rows.len(), out.join("results.csv").display());
    print!("{}", fs::read_to_string(out.join("summary.csv")).unwrap());
}
