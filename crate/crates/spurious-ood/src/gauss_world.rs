//! The Gaussian invariant/environmental data model and its closed-form
//! classifiers.
//!
//! A world draws a label y ∈ {−1, +1} with prior η, then an invariant latent
//! z_inv ~ N(y·μ_inv, σ²_inv I) shared across environments and an
//! environmental latent z_e ~ N(y·μ_e, σ²_e I) that varies per environment.
//! From the world we can build:
//!
//! * the Bayes-optimal linear classifier for any linear featurization,
//! * the optimal invariant classifier (invariant features only),
//! * the shortcut direction p with pᵀμ_e/σ²_e constant (= β) across
//!   environments, and the environment-invariant classifier it induces,
//! * spurious OOD latents that the shortcut classifier assigns any target
//!   confidence, despite carrying no invariant signal,
//! * Monte-Carlo risk estimates used as oracles for all of the above.

use crate::numerics::{
    dot, gaussian_vector, min_norm_solve, norm2, spd_solve, Matrix, NumericsError,
    Rng,
};
use std::io::Write;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum WorldError {
    #[error("environment index {0} out of range ({1} environments)")]
    BadEnvIndex(usize, usize),
    #[error("confidence must lie strictly in (0,1), got {0}")]
    BadConfidence(f64),
    #[error("{0} environments exceed environmental dimension {1}")]
    TooManyEnvs(usize, usize),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, WorldError>;

/// Invariant feature distribution: z_inv ~ N(y·mu_inv, sigma_inv_sq I).
#[derive(Debug, Clone)]
pub struct InvSpec {
    pub mu_inv: Vec<f64>,
    pub sigma_inv_sq: f64,
}

/// Environmental feature distribution for one environment.
#[derive(Debug, Clone)]
pub struct EnvSpec {
    pub mu_e: Vec<f64>,
    pub sigma_e_sq: f64,
}

#[derive(Debug, Clone)]
pub struct GaussWorld {
    pub inv: InvSpec,
    pub envs: Vec<EnvSpec>,
    /// Label prior η = P(y = +1).
    pub eta: f64,
}

impl GaussWorld {
    pub fn new(inv: InvSpec, envs: Vec<EnvSpec>, eta: f64) -> Self {
        assert!(inv.sigma_inv_sq > 0.0 && !inv.mu_inv.is_empty());
        assert!(!envs.is_empty());
        assert!(eta > 0.0 && eta < 1.0);
        let d_e = envs[0].mu_e.len();
        assert!(envs.iter().all(|e| e.mu_e.len() == d_e && e.sigma_e_sq > 0.0));
        GaussWorld { inv, envs, eta }
    }

    pub fn inv_dim(&self) -> usize {
        self.inv.mu_inv.len()
    }

    pub fn env_dim(&self) -> usize {
        self.envs[0].mu_e.len()
    }

    pub fn bias(&self) -> f64 {
        (self.eta / (1.0 - self.eta)).ln()
    }

    fn env(&self, env_index: usize) -> Result<&EnvSpec> {
        self.envs
            .get(env_index)
            .ok_or(WorldError::BadEnvIndex(env_index, self.envs.len()))
    }
}

/// Linear classifier over some feature vector; predicts sign(w·φ + bias),
/// with P(y=1|φ) = σ(w·φ + bias).
#[derive(Debug, Clone)]
pub struct LinearClassifier {
    pub w: Vec<f64>,
    pub bias: f64,
}

impl LinearClassifier {
    pub fn margin(&self, phi: &[f64]) -> Result<f64> {
        if phi.len() != self.w.len() {
            return Err(WorldError::DimensionMismatch(format!(
                "classifier dim {} vs feature dim {}",
                self.w.len(),
                phi.len()
            )));
        }
        Ok(dot(&self.w, phi) + self.bias)
    }
}

/// P(y = 1 | φ) under a linear classifier: logistic of the margin.
pub fn posterior(c: &LinearClassifier, phi: &[f64]) -> Result<f64> {
    Ok(sigmoid(c.margin(phi)?))
}

pub fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// Unit-norm direction p with pᵀμ_e/σ²_e = β for every environment.
#[derive(Debug, Clone)]
pub struct Shortcut {
    pub p: Vec<f64>,
    pub beta: f64,
}

#[derive(Debug, Clone)]
pub struct LatentSample {
    pub z_inv: Vec<f64>,
    pub z_e: Vec<f64>,
    pub y: i8,
    pub env_index: usize,
}

/// Draw n labelled latent samples from one environment of the world.
pub fn sample(
    world: &GaussWorld,
    env_index: usize,
    n: usize,
    rng: &mut Rng,
) -> Result<Vec<LatentSample>> {
    let env = world.env(env_index)?.clone();
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let y: i8 = if rng.next_f64() < world.eta { 1 } else { -1 };
        let ys = y as f64;
        let mu_i: Vec<f64> = world.inv.mu_inv.iter().map(|m| ys * m).collect();
        let mu_e: Vec<f64> = env.mu_e.iter().map(|m| ys * m).collect();
        let z_inv = gaussian_vector(rng, &mu_i, world.inv.sigma_inv_sq, 1)?
            .pop()
            .unwrap();
        let z_e = gaussian_vector(rng, &mu_e, env.sigma_e_sq, 1)?.pop().unwrap();
        out.push(LatentSample { z_inv, z_e, y, env_index });
    }
    Ok(out)
}

/// Bayes-optimal linear classifier for the featurization
/// Φ(x) = M_inv z_inv + M_e z_e in a given environment:
/// w = 2 Σ_Φ⁻¹ μ_Φ with μ_Φ = M_inv μ_inv + M_e μ_e and
/// Σ_Φ = M_inv M_invᵀ σ²_inv + M_e M_eᵀ σ²_e.
pub fn bayes_classifier(
    world: &GaussWorld,
    env_index: usize,
    m_inv: &Matrix,
    m_e: &Matrix,
) -> Result<LinearClassifier> {
    let env = world.env(env_index)?;
    if m_inv.cols() != world.inv_dim() || m_e.cols() != world.env_dim() {
        return Err(WorldError::DimensionMismatch(
            "projection columns must match latent dimensions".into(),
        ));
    }
    if m_inv.rows() != m_e.rows() {
        return Err(WorldError::DimensionMismatch(
            "projections must share output dimension".into(),
        ));
    }
    let mu_phi: Vec<f64> = m_inv
        .matvec(&world.inv.mu_inv)?
        .iter()
        .zip(m_e.matvec(&env.mu_e)?)
        .map(|(a, b)| a + b)
        .collect();
    let sigma_phi = m_inv
        .matmul(&m_inv.transpose())?
        .scale(world.inv.sigma_inv_sq)
        .add(&m_e.matmul(&m_e.transpose())?.scale(env.sigma_e_sq))?;
    let w: Vec<f64> = spd_solve(&sigma_phi, &mu_phi)?
        .iter()
        .map(|x| 2.0 * x)
        .collect();
    Ok(LinearClassifier { w, bias: world.bias() })
}

/// Optimal invariant classifier, operating on z_inv alone: w = 2μ_inv/σ²_inv.
pub fn invariant_classifier(world: &GaussWorld) -> LinearClassifier {
    let w = world
        .inv
        .mu_inv
        .iter()
        .map(|m| 2.0 * m / world.inv.sigma_inv_sq)
        .collect();
    LinearClassifier { w, bias: world.bias() }
}

/// Find the shortcut direction: solve A p̃ = b (rows μ_eᵀ, entries σ²_e),
/// take the minimum-norm solution and normalize. β = 1/‖p̃‖.
pub fn shortcut(envs: &[EnvSpec]) -> Result<Shortcut> {
    assert!(!envs.is_empty());
    let d_e = envs[0].mu_e.len();
    if envs.len() > d_e {
        return Err(WorldError::TooManyEnvs(envs.len(), d_e));
    }
    let a = Matrix::from_rows(
        &envs.iter().map(|e| e.mu_e.clone()).collect::<Vec<_>>(),
    )?;
    let b: Vec<f64> = envs.iter().map(|e| e.sigma_e_sq).collect();
    let p_tilde = min_norm_solve(&a, &b)?;
    let norm = norm2(&p_tilde);
    let beta = 1.0 / norm;
    let p = p_tilde.iter().map(|x| x * beta).collect();
    Ok(Shortcut { p, beta })
}

/// Environment-invariant classifier over the feature [z_inv; pᵀz_e]:
/// w = [2μ_inv/σ²_inv; 2β].
pub fn shortcut_classifier(world: &GaussWorld, sc: &Shortcut) -> Result<LinearClassifier> {
    if sc.p.len() != world.env_dim() {
        return Err(WorldError::DimensionMismatch(
            "shortcut dimension does not match world".into(),
        ));
    }
    let mut w: Vec<f64> = world
        .inv
        .mu_inv
        .iter()
        .map(|m| 2.0 * m / world.inv.sigma_inv_sq)
        .collect();
    w.push(2.0 * sc.beta);
    Ok(LinearClassifier { w, bias: world.bias() })
}

/// A spurious OOD latent point: z_out carries no invariant signal
/// (z_out ⊥ μ_inv) while z_e places exactly the target confidence on the
/// shortcut classifier.
#[derive(Debug, Clone)]
pub struct SpuriousOodPoint {
    pub z_out: Vec<f64>,
    pub z_e: Vec<f64>,
    /// The feature the shortcut classifier consumes: [z_out; pᵀz_e].
    pub phi: Vec<f64>,
}

/// Construct a spurious OOD point whose shortcut-classifier posterior is
/// exactly `confidence`: pᵀz_e = (1/2β)·log(c(1−η)/(η(1−c))), z_out drawn
/// orthogonal to μ_inv and rescaled to ‖μ_inv‖, the rest of z_e filled with
/// environmental noise.
pub fn spurious_ood_point(
    world: &GaussWorld,
    sc: &Shortcut,
    confidence: f64,
    env_index: usize,
    rng: &mut Rng,
) -> Result<SpuriousOodPoint> {
    if !(confidence > 0.0 && confidence < 1.0) {
        return Err(WorldError::BadConfidence(confidence));
    }
    let env = world.env(env_index)?;
    let eta = world.eta;
    let target =
        (confidence * (1.0 - eta) / (eta * (1.0 - confidence))).ln() / (2.0 * sc.beta);

    // z_out: Gaussian direction projected onto the orthogonal complement of
    // μ_inv, rescaled to ‖μ_inv‖. With s = 1 the complement is {0}.
    let mu = &world.inv.mu_inv;
    let s = mu.len();
    let mut z_out = vec![0.0; s];
    if s > 1 {
        loop {
            let g: Vec<f64> = (0..s).map(|_| rng.next_gaussian()).collect();
            let c = dot(&g, mu) / dot(mu, mu);
            let proj: Vec<f64> =
                g.iter().zip(mu).map(|(gi, mi)| gi - c * mi).collect();
            let n = norm2(&proj);
            if n > 1e-8 {
                let scale = norm2(mu) / n;
                z_out = proj.iter().map(|x| x * scale).collect();
                break;
            }
        }
    }

    // z_e: exact target along p, N(0, σ²_e) in the orthogonal complement.
    let noise = gaussian_vector(rng, &vec![0.0; sc.p.len()], env.sigma_e_sq, 1)?
        .pop()
        .unwrap();
    let along = dot(&noise, &sc.p);
    let z_e: Vec<f64> = noise
        .iter()
        .zip(&sc.p)
        .map(|(n, p)| n + (target - along) * p)
        .collect();

    let mut phi = z_out.clone();
    phi.push(dot(&z_e, &sc.p));
    Ok(SpuriousOodPoint { z_out, z_e, phi })
}

/// Evaluate the two Lemma-4 conditions for a purely environmental predictor
/// to beat the optimal invariant predictor:
/// σ_e β > σ_inv⁻¹‖μ_inv‖ and 2 σ_e β σ_inv⁻¹‖μ_inv‖ ≥ |log η/(1−η)|.
pub fn lemma4_check(
    world: &GaussWorld,
    env_index: usize,
    beta: f64,
) -> Result<(bool, bool)> {
    let env = world.env(env_index)?;
    let sigma_e = env.sigma_e_sq.sqrt();
    let sigma_inv = world.inv.sigma_inv_sq.sqrt();
    let mu_norm = norm2(&world.inv.mu_inv);
    let lhs = sigma_e * beta;
    let rhs = mu_norm / sigma_inv;
    Ok((lhs > rhs, 2.0 * lhs * rhs >= world.bias().abs()))
}

#[derive(Debug, Clone, Copy)]
pub struct RiskEstimate {
    pub risk: f64,
    pub std_err: f64,
}

/// Monte-Carlo 0-1 risk of a classifier under a feature map. Prediction is
/// sign(w·φ + bias) with sign(0) ≡ +1.
pub fn mc_risk<F>(
    c: &LinearClassifier,
    feature_map: F,
    world: &GaussWorld,
    env_index: usize,
    n: usize,
    rng: &mut Rng,
) -> Result<RiskEstimate>
where
    F: Fn(&LatentSample) -> Vec<f64>,
{
    assert!(n >= 1);
    let mut errors = 0usize;
    // sample in chunks to bound memory
    let mut remaining = n;
    while remaining > 0 {
        let chunk = remaining.min(10_000);
        for s in sample(world, env_index, chunk, rng)? {
            let m = c.margin(&feature_map(&s))?;
            let pred: i8 = if m >= 0.0 { 1 } else { -1 };
            if pred != s.y {
                errors += 1;
            }
        }
        remaining -= chunk;
    }
    let risk = errors as f64 / n as f64;
    let std_err = (risk * (1.0 - risk) / n as f64).sqrt();
    Ok(RiskEstimate { risk, std_err })
}

/// Feature map [z_inv; pᵀz_e] used by the shortcut classifier.
pub fn shortcut_feature(sc: &Shortcut) -> impl Fn(&LatentSample) -> Vec<f64> + '_ {
    move |s: &LatentSample| {
        let mut phi = s.z_inv.clone();
        phi.push(dot(&s.z_e, &sc.p));
        phi
    }
}

// ---------------------------------------------------------------------------
// Toy-figure emission
// ---------------------------------------------------------------------------

/// One scatter row of the 2-D toy picture: x = z_invᵀμ_inv/‖μ_inv‖,
/// y = pᵀz_e.
#[derive(Debug, Clone)]
pub struct FigRow {
    pub x: f64,
    pub y: f64,
    pub label: i8,
    pub env: usize,
    pub is_ood: bool,
}

/// Decision boundary in the 2-D projected coordinates: w0·x + w1·y + bias = 0.
#[derive(Debug, Clone)]
pub struct BoundaryLine {
    pub kind: String,
    pub w0: f64,
    pub w1: f64,
    pub bias: f64,
}

#[derive(Debug, Clone)]
pub struct ToyFigure {
    pub rows: Vec<FigRow>,
    pub boundaries: Vec<BoundaryLine>,
}

/// Emit the 2-D scatter and both decision boundaries (shortcut and pure
/// invariant), plus spurious OOD points at a spread of confidences.
pub fn toy_figure_data(
    world: &GaussWorld,
    sc: &Shortcut,
    n: usize,
    rng: &mut Rng,
) -> Result<ToyFigure> {
    let mu = &world.inv.mu_inv;
    let mu_norm = norm2(mu);
    let mut rows = Vec::new();
    let per_env = n / world.envs.len().max(1);
    for e in 0..world.envs.len() {
        for s in sample(world, e, per_env, rng)? {
            rows.push(FigRow {
                x: dot(&s.z_inv, mu) / mu_norm,
                y: dot(&s.z_e, &sc.p),
                label: s.y,
                env: e,
                is_ood: false,
            });
        }
    }
    // spurious OOD markers at high and moderate confidence
    for &c in &[0.75, 0.9, 0.95, 0.99] {
        let pt = spurious_ood_point(world, sc, c, 0, rng)?;
        rows.push(FigRow {
            x: dot(&pt.z_out, mu) / mu_norm,
            y: *pt.phi.last().unwrap(),
            label: 0,
            env: 0,
            is_ood: true,
        });
    }
    // shortcut boundary in (x, y) coordinates: the classifier weight on the
    // projected invariant coordinate is 2‖μ_inv‖/σ²_inv.
    let boundaries = vec![
        BoundaryLine {
            kind: "shortcut".into(),
            w0: 2.0 * mu_norm / world.inv.sigma_inv_sq,
            w1: 2.0 * sc.beta,
            bias: world.bias(),
        },
        BoundaryLine {
            kind: "invariant".into(),
            w0: 2.0 * mu_norm / world.inv.sigma_inv_sq,
            w1: 0.0,
            bias: world.bias(),
        },
    ];
    Ok(ToyFigure { rows, boundaries })
}

impl ToyFigure {
    /// CSV with header `x,y,label,env,is_ood`.
    pub fn write_scatter_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "x,y,label,env,is_ood")?;
        for r in &self.rows {
            writeln!(
                w,
                "{:.6},{:.6},{},{},{}",
                r.x, r.y, r.label, r.env, r.is_ood as u8
            )?;
        }
        Ok(())
    }

    /// Sidecar line file with header `kind,w0,w1,bias`.
    pub fn write_boundary_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "kind,w0,w1,bias")?;
        for b in &self.boundaries {
            writeln!(w, "{},{:.9},{:.9},{:.9}", b.kind, b.w0, b.w1, b.bias)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_world() -> GaussWorld {
        GaussWorld::new(
            InvSpec { mu_inv: vec![1.0, 0.5], sigma_inv_sq: 1.0 },
            vec![
                EnvSpec { mu_e: vec![1.0, 0.0], sigma_e_sq: 1.0 },
                EnvSpec { mu_e: vec![0.0, 2.0], sigma_e_sq: 1.0 },
            ],
            0.5,
        )
    }

    fn random_world(rng: &mut Rng, s_max: usize, de_max: usize) -> GaussWorld {
        let s = 1 + rng.next_below(s_max);
        let d_e = 1 + rng.next_below(de_max);
        let n_env = 1 + rng.next_below(d_e);
        let mu_inv: Vec<f64> =
            (0..s).map(|_| rng.next_gaussian() + 0.5).collect();
        let envs = (0..n_env)
            .map(|_| EnvSpec {
                mu_e: (0..d_e).map(|_| rng.next_gaussian() + 0.3).collect(),
                sigma_e_sq: 0.3 + rng.next_f64(),
            })
            .collect();
        GaussWorld::new(
            InvSpec { mu_inv, sigma_inv_sq: 0.3 + rng.next_f64() },
            envs,
            0.2 + 0.6 * rng.next_f64(),
        )
    }

    #[test]
    fn sample_empty_and_eta_limit() {
        let w = toy_world();
        let mut rng = Rng::new(0);
        assert!(sample(&w, 0, 0, &mut rng).unwrap().is_empty());
        assert!(sample(&w, 5, 1, &mut rng).is_err());

        let mut w1 = toy_world();
        w1.eta = 1.0 - 1e-12;
        let s = sample(&w1, 0, 1000, &mut rng).unwrap();
        assert!(s.iter().all(|x| x.y == 1));
    }

    #[test]
    fn sample_conditional_mean_clt() {
        let w = toy_world();
        let n = 1_000_000;
        let samples = sample(&w, 0, n, &mut Rng::new(8)).unwrap();
        let pos: Vec<_> = samples.iter().filter(|s| s.y == 1).collect();
        let bound = 4.0 * w.inv.sigma_inv_sq.sqrt() / ((0.5 * n as f64).sqrt());
        for c in 0..w.inv_dim() {
            let mean: f64 =
                pos.iter().map(|s| s.z_inv[c]).sum::<f64>() / pos.len() as f64;
            assert!(
                (mean - w.inv.mu_inv[c]).abs() < bound,
                "coord {c}: {mean} vs {}",
                w.inv.mu_inv[c]
            );
        }
    }

    #[test]
    fn bayes_reduces_to_invariant() {
        let w = toy_world();
        let m_inv = Matrix::identity(2);
        let m_e = Matrix::zeros(2, 2);
        let c = bayes_classifier(&w, 0, &m_inv, &m_e).unwrap();
        let inv = invariant_classifier(&w);
        for (a, b) in c.w.iter().zip(&inv.w) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(c.bias, inv.bias);
    }

    #[test]
    fn bayes_scalar_case() {
        // stack [z_inv; z_e]: Σ_Φ = diag(1,4), μ_Φ = (1,2) → w = (2,1)
        let w = GaussWorld::new(
            InvSpec { mu_inv: vec![1.0], sigma_inv_sq: 1.0 },
            vec![EnvSpec { mu_e: vec![2.0], sigma_e_sq: 4.0 }],
            0.5,
        );
        let m_inv = Matrix::from_rows(&[vec![1.0], vec![0.0]]).unwrap();
        let m_e = Matrix::from_rows(&[vec![0.0], vec![1.0]]).unwrap();
        let c = bayes_classifier(&w, 0, &m_inv, &m_e).unwrap();
        assert!((c.w[0] - 2.0).abs() < 1e-12);
        assert!((c.w[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn invariant_classifier_values() {
        let mut w = GaussWorld::new(
            InvSpec { mu_inv: vec![1.0, 1.0], sigma_inv_sq: 2.0 },
            vec![EnvSpec { mu_e: vec![1.0], sigma_e_sq: 1.0 }],
            0.5,
        );
        let c = invariant_classifier(&w);
        assert_eq!(c.w, vec![1.0, 1.0]);
        assert_eq!(c.bias, 0.0);
        w.eta = 0.9;
        assert!((invariant_classifier(&w).bias - 9f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn shortcut_single_env() {
        let sc = shortcut(&[EnvSpec { mu_e: vec![2.0, 0.0], sigma_e_sq: 1.0 }])
            .unwrap();
        assert!((sc.p[0] - 1.0).abs() < 1e-12 && sc.p[1].abs() < 1e-12);
        assert!((sc.beta - 2.0).abs() < 1e-12);
    }

    #[test]
    fn shortcut_two_envs() {
        let envs = [
            EnvSpec { mu_e: vec![1.0, 0.0], sigma_e_sq: 1.0 },
            EnvSpec { mu_e: vec![0.0, 2.0], sigma_e_sq: 1.0 },
        ];
        let sc = shortcut(&envs).unwrap();
        assert!((sc.beta - 1.0 / 1.25f64.sqrt()).abs() < 1e-12);
        assert!((sc.p[0] - 0.894427).abs() < 1e-6);
        assert!((sc.p[1] - 0.447214).abs() < 1e-6);
        for e in &envs {
            let r = dot(&sc.p, &e.mu_e) / e.sigma_e_sq;
            assert!((r - sc.beta).abs() <= 1e-9);
        }
    }

    #[test]
    fn shortcut_too_many_envs() {
        let envs = vec![
            EnvSpec { mu_e: vec![1.0, 0.0], sigma_e_sq: 1.0 };
            3
        ];
        assert!(matches!(shortcut(&envs), Err(WorldError::TooManyEnvs(3, 2))));
    }

    #[test]
    fn shortcut_invariance_random_worlds() {
        let mut rng = Rng::new(77);
        for _ in 0..100 {
            let w = random_world(&mut rng, 4, 8);
            let sc = match shortcut(&w.envs) {
                Ok(sc) => sc,
                Err(_) => continue, // near-dependent means
            };
            assert!((norm2(&sc.p) - 1.0).abs() <= 1e-12);
            assert!(sc.beta > 0.0);
            for e in &w.envs {
                let r = dot(&sc.p, &e.mu_e) / e.sigma_e_sq;
                assert!((r - sc.beta).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn shortcut_classifier_concat() {
        let w = GaussWorld::new(
            InvSpec { mu_inv: vec![1.0], sigma_inv_sq: 1.0 },
            vec![EnvSpec { mu_e: vec![2.0], sigma_e_sq: 1.0 }],
            0.5,
        );
        let sc = shortcut(&w.envs).unwrap();
        let c = shortcut_classifier(&w, &sc).unwrap();
        assert_eq!(c.w, vec![2.0, 4.0]);
    }

    #[test]
    fn shortcut_classifier_is_per_env_bayes() {
        // per-env Bayes on the feature [z_inv; pᵀz_e] must match the
        // shortcut classifier for every environment
        let mut rng = Rng::new(13);
        for _ in 0..20 {
            let w = random_world(&mut rng, 3, 5);
            let sc = match shortcut(&w.envs) {
                Ok(sc) => sc,
                Err(_) => continue,
            };
            let cs = shortcut_classifier(&w, &sc).unwrap();
            let s = w.inv_dim();
            // M_inv = [I; 0], M_e = [0; pᵀ]
            let mut mi = Matrix::zeros(s + 1, s);
            for i in 0..s {
                mi.set(i, i, 1.0);
            }
            let mut me = Matrix::zeros(s + 1, w.env_dim());
            for j in 0..w.env_dim() {
                me.set(s, j, sc.p[j]);
            }
            for e in 0..w.envs.len() {
                let cb = bayes_classifier(&w, e, &mi, &me).unwrap();
                for (a, b) in cb.w.iter().zip(&cs.w) {
                    assert!((a - b).abs() < 1e-9, "env {e}: {:?} vs {:?}", cb.w, cs.w);
                }
            }
        }
    }

    #[test]
    fn posterior_values() {
        let c = LinearClassifier { w: vec![1.0], bias: 0.0 };
        assert!((posterior(&c, &[0.0]).unwrap() - 0.5).abs() < 1e-15);
        assert!((posterior(&c, &[3f64.ln()]).unwrap() - 0.75).abs() < 1e-12);
        assert!(posterior(&c, &[50.0]).unwrap() >= 1.0 - 1e-20);
        assert!(posterior(&c, &[1.0, 2.0]).is_err());
    }

    #[test]
    fn theorem1_trivial_cases() {
        let w = toy_world();
        let sc = shortcut(&w.envs).unwrap();
        let mut rng = Rng::new(2);
        // c=0.5, η=0.5 → pᵀz_e = 0
        let pt = spurious_ood_point(&w, &sc, 0.5, 0, &mut rng).unwrap();
        assert!(pt.phi.last().unwrap().abs() < 1e-12);
        assert!(spurious_ood_point(&w, &sc, 1.0, 0, &mut rng).is_err());
        assert!(spurious_ood_point(&w, &sc, 0.0, 0, &mut rng).is_err());
    }

    #[test]
    fn theorem1_formula_beta_one() {
        // β=1, c=0.9, η=0.5 → pᵀz_e = ln(9)/2
        let w = GaussWorld::new(
            InvSpec { mu_inv: vec![1.0, 0.0], sigma_inv_sq: 1.0 },
            vec![EnvSpec { mu_e: vec![1.0, 0.0], sigma_e_sq: 1.0 }],
            0.5,
        );
        let sc = shortcut(&w.envs).unwrap();
        assert!((sc.beta - 1.0).abs() < 1e-12);
        let pt = spurious_ood_point(&w, &sc, 0.9, 0, &mut Rng::new(4)).unwrap();
        assert!((pt.phi.last().unwrap() - 9f64.ln() / 2.0).abs() < 1e-12);
    }

    #[test]
    fn theorem1_confidence_grid() {
        let mut rng = Rng::new(21);
        for trial in 0..5 {
            let w = random_world(&mut rng, 6, 6);
            let sc = match shortcut(&w.envs) {
                Ok(sc) => sc,
                Err(_) => continue,
            };
            let cls = shortcut_classifier(&w, &sc).unwrap();
            let mut c = 0.01;
            while c < 0.995 {
                let pt = spurious_ood_point(&w, &sc, c, 0, &mut rng).unwrap();
                let post = posterior(&cls, &pt.phi).unwrap();
                assert!((post - c).abs() <= 1e-9, "trial {trial} c={c}: {post}");
                // orthogonality of z_out
                let ip = dot(&pt.z_out, &w.inv.mu_inv).abs();
                assert!(
                    ip <= 1e-10 * norm2(&pt.z_out).max(1.0) * norm2(&w.inv.mu_inv)
                );
                c += 0.07;
            }
        }
    }

    #[test]
    fn lemma4_conditions() {
        let mk = |beta: f64| {
            let w = GaussWorld::new(
                InvSpec { mu_inv: vec![1.0, 0.0], sigma_inv_sq: 1.0 },
                vec![EnvSpec { mu_e: vec![1.0], sigma_e_sq: 4.0 }],
                0.5,
            );
            lemma4_check(&w, 0, beta).unwrap()
        };
        assert_eq!(mk(1.0), (true, true)); // 2 > 1 and 4 ≥ 0
        assert_eq!(mk(0.1), (false, true)); // 0.2 < 1
    }

    #[test]
    fn mc_risk_separable_and_tie_rule() {
        let w = GaussWorld::new(
            InvSpec { mu_inv: vec![1.0], sigma_inv_sq: 1e-6 },
            vec![EnvSpec { mu_e: vec![1.0], sigma_e_sq: 1.0 }],
            0.5,
        );
        let inv = invariant_classifier(&w);
        let r = mc_risk(&inv, |s| s.z_inv.clone(), &w, 0, 100_000, &mut Rng::new(1))
            .unwrap();
        assert!(r.risk <= 0.001);

        // zero classifier predicts +1 everywhere; risk ≈ 1 − η
        let mut w7 = w.clone();
        w7.eta = 0.7;
        let zero = LinearClassifier { w: vec![0.0], bias: 0.0 };
        let r =
            mc_risk(&zero, |s| s.z_inv.clone(), &w7, 0, 200_000, &mut Rng::new(2))
                .unwrap();
        assert!((r.risk - 0.3).abs() <= 3.0 * r.std_err + 1e-3);

        // determinism
        let a = mc_risk(&zero, |s| s.z_inv.clone(), &w7, 0, 1000, &mut Rng::new(9))
            .unwrap();
        let b = mc_risk(&zero, |s| s.z_inv.clone(), &w7, 0, 1000, &mut Rng::new(9))
            .unwrap();
        assert_eq!(a.risk, b.risk);
    }

    #[test]
    fn toy_figure_contracts() {
        let w = toy_world();
        let sc = shortcut(&w.envs).unwrap();
        let fig = toy_figure_data(&w, &sc, 200, &mut Rng::new(5)).unwrap();
        let inv = invariant_classifier(&w);
        let mu_norm = norm2(&w.inv.mu_inv);
        for r in fig.rows.iter().filter(|r| r.is_ood) {
            // OOD rows sit on the pure-invariant boundary: posterior 0.5 at η=0.5
            let margin = 2.0 * mu_norm / w.inv.sigma_inv_sq * r.x + inv.bias;
            assert!(sigmoid(margin) - 0.5 <= 1e-9);
        }
        // boundary representation is consistent: a point on the line has margin 0
        for b in &fig.boundaries {
            if b.w1 != 0.0 {
                let x = 0.37;
                let y = -(b.w0 * x + b.bias) / b.w1;
                assert!((b.w0 * x + b.w1 * y + b.bias).abs() < 1e-9);
            }
        }
        let mut buf = Vec::new();
        fig.write_scatter_csv(&mut buf).unwrap();
        assert!(buf.starts_with(b"x,y,label,env,is_ood\n"));
        let mut buf = Vec::new();
        fig.write_boundary_csv(&mut buf).unwrap();
        assert!(buf.starts_with(b"kind,w0,w1,bias\n"));
    }
}
