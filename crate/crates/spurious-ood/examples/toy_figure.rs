//! Emit the 2-D toy-world scatter plus the shortcut and invariant decision
//! boundaries as CSV, ready for plotting.
//!
//! Run with: cargo run --example toy_figure -- [out_dir]

use spurious_ood::gauss_world::{shortcut, toy_figure_data, EnvSpec, GaussWorld, InvSpec};
use spurious_ood::numerics::Rng;
use std::fs::{self, File};
use std::path::PathBuf;

fn main() {
    let out: PathBuf =
        std::env::args().nth(1).unwrap_or_else(|| "target/toy_figure".into()).into();
    fs::create_dir_all(&out).unwrap();

    let world = GaussWorld::new(
        InvSpec { mu_inv: vec![1.0], sigma_inv_sq: 0.5 },
        vec![
            EnvSpec { mu_e: vec![1.2, 0.0], sigma_e_sq: 0.4 },
            EnvSpec { mu_e: vec![0.0, 0.9], sigma_e_sq: 0.3 },
        ],
        0.5,
    );
    let sc = shortcut(&world.envs).unwrap();
    let mut rng = Rng::new(0);
    let fig = toy_figure_data(&world, &sc, 600, &mut rng).unwrap();

    let scatter = out.join("scatter.csv");
    let boundaries = out.join("boundaries.csv");
    fig.write_scatter_csv(File::create(&scatter).unwrap()).unwrap();
    fig.write_boundary_csv(File::create(&boundaries).unwrap()).unwrap();

    let n_ood = fig.rows.iter().filter(|r| r.is_ood).count();
    println!("wrote {} scatter rows ({n_ood} OOD markers) to {}", fig.rows.len(), scatter.display());
    println!("wrote {} boundary lines to {}", fig.boundaries.len(), boundaries.display());
    println!("columns: x = z_inv projected on mu_inv, y = p·z_e");
}
