//! The closed-form theory in one sitting: build a two-environment Gaussian
//! world, derive the shortcut direction, and construct spurious OOD points
//! that the environment-invariant classifier accepts with any confidence
//! you ask for.
//!
//! Run with: cargo run --example theory_shortcut

use spurious_ood::gauss_world::{
    invariant_classifier, posterior, shortcut, shortcut_classifier,
    spurious_ood_point, EnvSpec, GaussWorld, InvSpec,
};
use spurious_ood::numerics::Rng;

fn main() {
    // one invariant dimension, two environments in a 2-D environmental space
    let world = GaussWorld::new(
        InvSpec { mu_inv: vec![1.0, 0.5], sigma_inv_sq: 0.5 },
        vec![
            EnvSpec { mu_e: vec![1.2, 0.0], sigma_e_sq: 0.4 },
            EnvSpec { mu_e: vec![0.3, 0.9], sigma_e_sq: 0.3 },
        ],
        0.5,
    );

    let sc = shortcut(&world.envs).unwrap();
    println!("shortcut direction p = {:?}", sc.p);
    println!("beta = {:.6}", sc.beta);
    for (e, env) in world.envs.iter().enumerate() {
        let ratio: f64 = sc
            .p
            .iter()
            .zip(&env.mu_e)
            .map(|(pi, mi)| pi * mi)
            .sum::<f64>()
            / env.sigma_e_sq;
        println!("  env {e}: p·mu_e / sigma_e^2 = {ratio:.6} (equals beta)");
    }

    // the shortcut classifier uses [z_inv; p·z_e]; the invariant classifier
    // ignores the environmental part entirely
    let sc_cls = shortcut_classifier(&world, &sc).unwrap();
    let inv_cls = invariant_classifier(&world);
    println!("\nshortcut classifier w = {:?}", sc_cls.w);
    println!("invariant classifier w = {:?}", inv_cls.w);

    // spurious OOD points: no invariant signal, any target confidence
    let mut rng = Rng::new(7);
    println!("\ntarget confidence vs achieved posterior:");
    for c in [0.1, 0.5, 0.9, 0.99, 0.999] {
        let pt = spurious_ood_point(&world, &sc, c, 0, &mut rng).unwrap();
        let shortcut_post = posterior(&sc_cls, &pt.phi).unwrap();
        let invariant_post = posterior(&inv_cls, &pt.z_out).unwrap();
        println!(
            "  c = {c:<6} shortcut classifier: {shortcut_post:.9}   \
             invariant classifier: {invariant_post:.3}"
        );
    }
}
