//! A desk-scale laboratory for studying how spurious correlation in training
//! data degrades out-of-distribution (OOD) detection.
//!
//! The crate has three layers:
//!
//! * **Theory** ([`gauss_world`]): a Gaussian invariant/environmental data
//!   model with closed-form Bayes, invariant and shortcut classifiers, and a
//!   constructive demonstration that spurious OOD points can be assigned any
//!   confidence by an environment-invariant classifier. Everything is
//!   cross-validated by Monte-Carlo oracles.
//! * **Experiment** ([`colormnist`], [`train`], [`scores`], [`metrics`]): a
//!   colored-digit dataset with controlled label-color correlation r, an MLP
//!   trainable under ERM / IRMv1 / GroupDRO / REx, five post-hoc OOD scores
//!   (MSP, ODIN, energy, Mahalanobis, Gram), and FPR95/AUROC evaluation.
//! * **Harness** ([`config`], [`harness`]): a deterministic sweep runner that
//!   emits CSV tables, plus a theory-verification report.
//!
//! See the `examples/` directory for one runnable example per capability and
//! the `spurious-ood` binary for the experiment CLI.

pub mod colormnist;
pub mod config;
pub mod gauss_world;
pub mod harness;
pub mod metrics;
pub mod numerics;
pub mod scores;
pub mod train;
