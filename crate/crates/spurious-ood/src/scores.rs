//! Post-hoc OOD scoring suite: MSP, ODIN, energy, Mahalanobis and Gram.
//!
//! Every scorer follows the convention **higher score = more in-distribution**,
//! so a single threshold detector (see [`crate::metrics`]) works for all five.

use crate::numerics::{log_sum_exp, spd_cholesky, Matrix, NumericsError};
use crate::train::{MlpModel, TrainError};
use std::fs;
use std::path::Path;
use std::str::FromStr;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ScoreError {
    #[error("logits must be nonempty with at least two classes")]
    EmptyLogits,
    #[error("temperature must be positive, got {0}")]
    NonPositiveTemperature(f64),
    #[error("class {0} has fewer than two samples")]
    ClassTooSmall(usize),
    #[error("empty calibration split")]
    EmptySplit,
    #[error("calibration does not match the feature shape")]
    NotFitted,
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error("bad calibration file: {0}")]
    BadCalibration(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, ScoreError>;

/// The five scoring functions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ScoreFn {
    Msp,
    Odin,
    Energy,
    Mahalanobis,
    Gram,
}

impl ScoreFn {
    pub const ALL: [ScoreFn; 5] = [
        ScoreFn::Msp,
        ScoreFn::Odin,
        ScoreFn::Energy,
        ScoreFn::Mahalanobis,
        ScoreFn::Gram,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            ScoreFn::Msp => "msp",
            ScoreFn::Odin => "odin",
            ScoreFn::Energy => "energy",
            ScoreFn::Mahalanobis => "mahalanobis",
            ScoreFn::Gram => "gram",
        }
    }
}

impl FromStr for ScoreFn {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "msp" => Ok(ScoreFn::Msp),
            "odin" => Ok(ScoreFn::Odin),
            "energy" => Ok(ScoreFn::Energy),
            "mahalanobis" => Ok(ScoreFn::Mahalanobis),
            "gram" => Ok(ScoreFn::Gram),
            other => Err(format!("unknown score function '{other}'")),
        }
    }
}

// ---------------------------------------------------------------------------
// Logit-based scores
// ---------------------------------------------------------------------------

/// Maximum softmax probability, in [1/K, 1).
pub fn msp(logits: &[f64]) -> Result<f64> {
    if logits.len() < 2 {
        return Err(ScoreError::EmptyLogits);
    }
    let lse = log_sum_exp(logits)?;
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    Ok((max - lse).exp())
}

/// Negated energy: T·log Σ_k exp(logit_k / T). Higher for ID.
pub fn energy_score(logits: &[f64], t: f64) -> Result<f64> {
    if logits.len() < 2 {
        return Err(ScoreError::EmptyLogits);
    }
    if t <= 0.0 {
        return Err(ScoreError::NonPositiveTemperature(t));
    }
    let scaled: Vec<f64> = logits.iter().map(|z| z / t).collect();
    Ok(t * log_sum_exp(&scaled)?)
}

#[derive(Debug, Clone, Copy)]
pub struct OdinConfig {
    pub temperature: f64,
    pub epsilon: f64,
}

impl Default for OdinConfig {
    fn default() -> Self {
        OdinConfig { temperature: 1000.0, epsilon: 0.0014 }
    }
}

/// Candidate perturbation magnitudes tried during epsilon selection.
pub const ODIN_EPSILONS: [f64; 4] = [0.0, 0.0014, 0.005, 0.01];

/// Temperature-scaled MSP after a small input perturbation toward higher
/// confidence: x' = x − ε·sign(−∇_x log max-softmax(logits/T)).
pub fn odin(model: &MlpModel, x: &[f64], cfg: &OdinConfig) -> Result<f64> {
    if cfg.temperature <= 0.0 {
        return Err(ScoreError::NonPositiveTemperature(cfg.temperature));
    }
    let t = cfg.temperature;
    let scored_x: Vec<f64>;
    let x_final: &[f64] = if cfg.epsilon == 0.0 {
        x
    } else {
        let (logits, _) = model.apply(x)?;
        let scaled: Vec<f64> = logits.iter().map(|z| z / t).collect();
        let lse = log_sum_exp(&scaled)?;
        let probs: Vec<f64> = scaled.iter().map(|z| (z - lse).exp()).collect();
        let top = probs
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        // d log p_top / d logit_k = (1{k=top} − p_k) / T
        let dlogits: Vec<f64> = probs
            .iter()
            .enumerate()
            .map(|(k, &p)| ((k == top) as u8 as f64 - p) / t)
            .collect();
        let grad = model.input_gradient(x, &dlogits)?;
        scored_x = x
            .iter()
            .zip(&grad)
            .map(|(&xi, &g)| xi + cfg.epsilon * g.signum() * (g != 0.0) as u8 as f64)
            .collect();
        &scored_x
    };
    let (logits, _) = model.apply(x_final)?;
    let scaled: Vec<f64> = logits.iter().map(|z| z / t).collect();
    msp(&scaled)
}

/// Pick the ε from [`ODIN_EPSILONS`] that best separates the validation ID
/// scores from the validation OOD scores (largest mean difference).
pub fn select_odin_epsilon(
    model: &MlpModel,
    id_val: &[Vec<f64>],
    ood_val: &[Vec<f64>],
    temperature: f64,
) -> Result<f64> {
    if id_val.is_empty() || ood_val.is_empty() {
        return Err(ScoreError::EmptySplit);
    }
    let mut best = (f64::NEG_INFINITY, ODIN_EPSILONS[0]);
    for &eps in &ODIN_EPSILONS {
        let cfg = OdinConfig { temperature, epsilon: eps };
        let mean = |xs: &[Vec<f64>]| -> Result<f64> {
            let mut s = 0.0;
            for x in xs {
                s += odin(model, x, &cfg)?;
            }
            Ok(s / xs.len() as f64)
        };
        let gap = mean(id_val)? - mean(ood_val)?;
        if gap > best.0 {
            best = (gap, eps);
        }
    }
    Ok(best.1)
}

// ---------------------------------------------------------------------------
// Mahalanobis
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct MahalanobisCal {
    pub class_means: Vec<Vec<f64>>,
    pub shared_cov: Matrix,
    chol: Matrix,
}

impl MahalanobisCal {
    /// Build from explicit means and an SPD covariance.
    pub fn from_parts(class_means: Vec<Vec<f64>>, shared_cov: Matrix) -> Result<Self> {
        let chol = spd_cholesky(&shared_cov)?;
        Ok(MahalanobisCal { class_means, shared_cov, chol })
    }

    pub fn dim(&self) -> usize {
        self.shared_cov.rows()
    }
}

/// Empirical class means plus pooled within-class covariance with shrinkage
/// `shrinkage_scale`·trace/d·I (default scale 1e-3 via [`mahalanobis_fit`]).
pub fn mahalanobis_fit_with_shrinkage(
    features: &[Vec<f64>],
    labels: &[usize],
    shrinkage_scale: f64,
) -> Result<MahalanobisCal> {
    if features.is_empty() {
        return Err(ScoreError::EmptySplit);
    }
    let d = features[0].len();
    let n_classes = labels.iter().max().unwrap() + 1;
    let mut counts = vec![0usize; n_classes];
    let mut means = vec![vec![0.0; d]; n_classes];
    for (f, &y) in features.iter().zip(labels) {
        counts[y] += 1;
        for (m, &v) in means[y].iter_mut().zip(f) {
            *m += v;
        }
    }
    for (c, count) in counts.iter().enumerate() {
        if *count < 2 {
            return Err(ScoreError::ClassTooSmall(c));
        }
        for m in means[c].iter_mut() {
            *m /= *count as f64;
        }
    }
    let mut cov = Matrix::zeros(d, d);
    for (f, &y) in features.iter().zip(labels) {
        let diff: Vec<f64> = f.iter().zip(&means[y]).map(|(a, b)| a - b).collect();
        for i in 0..d {
            let row = cov.row_mut(i);
            for j in 0..d {
                row[j] += diff[i] * diff[j];
            }
        }
    }
    let scale = 1.0 / features.len() as f64;
    for v in cov.data_mut() {
        *v *= scale;
    }
    let eps = shrinkage_scale * cov.trace() / d as f64;
    // degenerate covariance (e.g. identical points): fall back to a fixed
    // ridge so the matrix is still SPD
    let eps = if eps > 0.0 { eps } else { shrinkage_scale.max(1e-12) };
    for i in 0..d {
        let v = cov.get(i, i) + eps;
        cov.set(i, i, v);
    }
    MahalanobisCal::from_parts(means, cov)
}

pub fn mahalanobis_fit(features: &[Vec<f64>], labels: &[usize]) -> Result<MahalanobisCal> {
    mahalanobis_fit_with_shrinkage(features, labels, 1e-3)
}

/// −min_c (f−μ_c)ᵀ Σ⁻¹ (f−μ_c); ≤ 0, higher = more ID.
pub fn mahalanobis_score(cal: &MahalanobisCal, feature: &[f64]) -> Result<f64> {
    if feature.len() != cal.dim() {
        return Err(ScoreError::NotFitted);
    }
    let mut best = f64::INFINITY;
    for mu in &cal.class_means {
        let diff: Vec<f64> = feature.iter().zip(mu).map(|(a, b)| a - b).collect();
        let q = crate::numerics::chol_quadform(&cal.chol, &diff);
        best = best.min(q);
    }
    Ok(-best)
}

// ---------------------------------------------------------------------------
// Gram
// ---------------------------------------------------------------------------

/// Upper triangle (including diagonal) of the order-p Gram matrix of a
/// nonnegative activation vector: G_ij = (a_i^p · a_j^p)^(1/p).
pub fn gram_entries(a: &[f64], p: u32) -> Vec<f64> {
    let powered: Vec<f64> = a.iter().map(|&v| v.powi(p as i32)).collect();
    let inv_p = 1.0 / p as f64;
    let mut out = Vec::with_capacity(a.len() * (a.len() + 1) / 2);
    for i in 0..a.len() {
        for j in i..a.len() {
            out.push((powered[i] * powered[j]).powf(inv_p));
        }
    }
    out
}

/// Element-wise ranges for one (class, layer): order-major concatenation of
/// the upper-triangle entries for p = 1..=P.
#[derive(Debug, Clone)]
pub struct GramRange {
    pub mins: Vec<f64>,
    pub maxs: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct GramCal {
    pub orders: u32,
    /// ranges[class][layer]
    pub ranges: Vec<Vec<GramRange>>,
    /// expected deviation per layer from a held-out split (floor 1e-12)
    pub normalizers: Vec<f64>,
}

fn gram_all_orders(layer: &[f64], orders: u32) -> Vec<f64> {
    let mut out = Vec::new();
    for p in 1..=orders {
        out.extend(gram_entries(layer, p));
    }
    out
}

/// Deviation of one value against a range: (min−v)/|min| below, (v−max)/|max|
/// above, 0 inside; denominators floored at 1e-12.
fn deviation(v: f64, min: f64, max: f64) -> f64 {
    if v < min {
        (min - v) / min.abs().max(1e-12)
    } else if v > max {
        (v - max) / max.abs().max(1e-12)
    } else {
        0.0
    }
}

fn layer_deviation(entries: &[f64], range: &GramRange) -> f64 {
    entries
        .iter()
        .zip(range.mins.iter().zip(&range.maxs))
        .map(|(&v, (&min, &max))| deviation(v, min, max))
        .sum()
}

/// Fit per-(class, layer, order) element-wise ranges on the fit split and
/// expected per-layer deviations on a held-out split.
pub fn gram_fit(
    fit_features: &[Vec<Vec<f64>>],
    fit_labels: &[usize],
    val_features: &[Vec<Vec<f64>>],
    val_labels: &[usize],
    orders: u32,
) -> Result<GramCal> {
    if fit_features.is_empty() || val_features.is_empty() {
        return Err(ScoreError::EmptySplit);
    }
    assert!(orders >= 1);
    let n_layers = fit_features[0].len();
    let n_classes = fit_labels.iter().chain(val_labels).max().unwrap() + 1;
    let mut ranges: Vec<Vec<Option<GramRange>>> = vec![vec![None; n_layers]; n_classes];
    for (sample, &y) in fit_features.iter().zip(fit_labels) {
        for (l, layer) in sample.iter().enumerate() {
            let entries = gram_all_orders(layer, orders);
            match &mut ranges[y][l] {
                slot @ None => {
                    *slot = Some(GramRange { mins: entries.clone(), maxs: entries });
                }
                Some(r) => {
                    for (k, v) in entries.into_iter().enumerate() {
                        r.mins[k] = r.mins[k].min(v);
                        r.maxs[k] = r.maxs[k].max(v);
                    }
                }
            }
        }
    }
    let ranges: Vec<Vec<GramRange>> = ranges
        .into_iter()
        .map(|per_class| {
            per_class
                .into_iter()
                .enumerate()
                .map(|(l, r)| {
                    r.unwrap_or_else(|| {
                        // class absent from the fit split: empty range that
                        // flags everything, sized from the first sample
                        let n = gram_all_orders(&fit_features[0][l], orders).len();
                        GramRange { mins: vec![f64::INFINITY; n], maxs: vec![f64::NEG_INFINITY; n] }
                    })
                })
                .collect()
        })
        .collect();

    let mut norm_sums = vec![0.0; n_layers];
    for (sample, &y) in val_features.iter().zip(val_labels) {
        for (l, layer) in sample.iter().enumerate() {
            let entries = gram_all_orders(layer, orders);
            norm_sums[l] += layer_deviation(&entries, &ranges[y][l]);
        }
    }
    let normalizers: Vec<f64> = norm_sums
        .iter()
        .map(|s| (s / val_features.len() as f64).max(1e-12))
        .collect();
    Ok(GramCal { orders, ranges, normalizers })
}

/// −Σ_layers deviation(layer)/normalizer(layer); ≤ 0, 0 iff every Gram entry
/// lies inside the fitted range of the predicted class.
pub fn gram_score(
    cal: &GramCal,
    per_layer_features: &[Vec<f64>],
    predicted_class: usize,
) -> Result<f64> {
    if predicted_class >= cal.ranges.len()
        || per_layer_features.len() != cal.normalizers.len()
    {
        return Err(ScoreError::NotFitted);
    }
    let mut total = 0.0;
    for (l, layer) in per_layer_features.iter().enumerate() {
        let entries = gram_all_orders(layer, cal.orders);
        let range = &cal.ranges[predicted_class][l];
        if entries.len() != range.mins.len() {
            return Err(ScoreError::NotFitted);
        }
        total += layer_deviation(&entries, range) / cal.normalizers[l];
    }
    Ok(-total)
}

// ---------------------------------------------------------------------------
// Combined calibration + persistence
// ---------------------------------------------------------------------------

/// Everything the feature-based scorers need, fitted once per trained model.
#[derive(Debug, Clone)]
pub struct ScoreCalibration {
    pub mahalanobis: MahalanobisCal,
    pub gram: GramCal,
    pub odin_epsilon: f64,
    pub odin_temperature: f64,
}

/// Fit the full calibration from a trained model and a calibration split.
/// `fit` fits the ranges and Gaussians, `val` the Gram normalizers and the
/// ODIN ε; `ood_val` is an auxiliary OOD sample for ε selection.
pub fn fit_calibration(
    model: &MlpModel,
    fit_x: &[Vec<f64>],
    fit_y: &[usize],
    val_x: &[Vec<f64>],
    val_y: &[usize],
    ood_val_x: &[Vec<f64>],
    orders: u32,
) -> Result<ScoreCalibration> {
    let feats = |xs: &[Vec<f64>]| -> Result<Vec<Vec<Vec<f64>>>> {
        xs.iter().map(|x| Ok(model.apply(x)?.1)).collect()
    };
    let fit_feats = feats(fit_x)?;
    let val_feats = feats(val_x)?;
    let penultimate: Vec<Vec<f64>> =
        fit_feats.iter().map(|f| f.last().unwrap().clone()).collect();
    let mahalanobis = mahalanobis_fit(&penultimate, fit_y)?;
    let gram = gram_fit(&fit_feats, fit_y, &val_feats, val_y, orders)?;
    let odin_temperature = OdinConfig::default().temperature;
    let odin_epsilon = if ood_val_x.is_empty() {
        OdinConfig::default().epsilon
    } else {
        select_odin_epsilon(model, val_x, ood_val_x, odin_temperature)?
    };
    Ok(ScoreCalibration { mahalanobis, gram, odin_epsilon, odin_temperature })
}

/// Apply one scoring function to a single input.
pub fn score_sample(
    score_fn: ScoreFn,
    model: &MlpModel,
    cal: Option<&ScoreCalibration>,
    x: &[f64],
) -> Result<f64> {
    let need_cal = || cal.ok_or(ScoreError::NotFitted);
    match score_fn {
        ScoreFn::Msp => {
            let (logits, _) = model.apply(x)?;
            msp(&logits)
        }
        ScoreFn::Energy => {
            let (logits, _) = model.apply(x)?;
            energy_score(&logits, 1.0)
        }
        ScoreFn::Odin => {
            let cfg = match cal {
                Some(c) => OdinConfig {
                    temperature: c.odin_temperature,
                    epsilon: c.odin_epsilon,
                },
                None => OdinConfig::default(),
            };
            odin(model, x, &cfg)
        }
        ScoreFn::Mahalanobis => {
            let c = need_cal()?;
            let (_, feats) = model.apply(x)?;
            mahalanobis_score(&c.mahalanobis, feats.last().ok_or(ScoreError::NotFitted)?)
        }
        ScoreFn::Gram => {
            let c = need_cal()?;
            let (logits, feats) = model.apply(x)?;
            let pred = logits
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            gram_score(&c.gram, &feats, pred)
        }
    }
}

fn push_f64s(buf: &mut Vec<u8>, vs: &[f64]) {
    for &v in vs {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

fn push_u32(buf: &mut Vec<u8>, v: usize) {
    buf.extend_from_slice(&(v as u32).to_le_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    off: usize,
}

impl<'a> Reader<'a> {
    fn u32(&mut self) -> Result<usize> {
        if self.bytes.len() < self.off + 4 {
            return Err(ScoreError::BadCalibration("truncated".into()));
        }
        let v = u32::from_le_bytes(self.bytes[self.off..self.off + 4].try_into().unwrap());
        self.off += 4;
        Ok(v as usize)
    }

    fn f64(&mut self) -> Result<f64> {
        if self.bytes.len() < self.off + 8 {
            return Err(ScoreError::BadCalibration("truncated".into()));
        }
        let v = f64::from_le_bytes(self.bytes[self.off..self.off + 8].try_into().unwrap());
        self.off += 8;
        Ok(v)
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        (0..n).map(|_| self.f64()).collect()
    }
}

impl ScoreCalibration {
    /// Persist as `CAL1`: Mahalanobis section, Gram section, ODIN section.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(b"CAL1");
        let m = &self.mahalanobis;
        push_u32(&mut buf, m.class_means.len());
        push_u32(&mut buf, m.dim());
        for mean in &m.class_means {
            push_f64s(&mut buf, mean);
        }
        push_f64s(&mut buf, m.shared_cov.data());
        let g = &self.gram;
        push_u32(&mut buf, g.orders as usize);
        push_u32(&mut buf, g.ranges.len());
        push_u32(&mut buf, g.normalizers.len());
        for per_class in &g.ranges {
            for r in per_class {
                push_u32(&mut buf, r.mins.len());
                push_f64s(&mut buf, &r.mins);
                push_f64s(&mut buf, &r.maxs);
            }
        }
        push_f64s(&mut buf, &g.normalizers);
        push_f64s(&mut buf, &[self.odin_epsilon, self.odin_temperature]);
        fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        if bytes.len() < 4 || &bytes[0..4] != b"CAL1" {
            return Err(ScoreError::BadCalibration("missing CAL1 magic".into()));
        }
        let mut r = Reader { bytes: &bytes, off: 4 };
        let n_classes = r.u32()?;
        let d = r.u32()?;
        let mut class_means = Vec::with_capacity(n_classes);
        for _ in 0..n_classes {
            class_means.push(r.f64s(d)?);
        }
        let cov = Matrix::from_vec(d, d, r.f64s(d * d)?)
            .map_err(ScoreError::Numerics)?;
        let mahalanobis = MahalanobisCal::from_parts(class_means, cov)?;
        let orders = r.u32()? as u32;
        let gram_classes = r.u32()?;
        let n_layers = r.u32()?;
        let mut ranges = Vec::with_capacity(gram_classes);
        for _ in 0..gram_classes {
            let mut per_class = Vec::with_capacity(n_layers);
            for _ in 0..n_layers {
                let n = r.u32()?;
                let mins = r.f64s(n)?;
                let maxs = r.f64s(n)?;
                per_class.push(GramRange { mins, maxs });
            }
            ranges.push(per_class);
        }
        let normalizers = r.f64s(n_layers)?;
        let odin_epsilon = r.f64()?;
        let odin_temperature = r.f64()?;
        Ok(ScoreCalibration {
            mahalanobis,
            gram: GramCal { orders, ranges, normalizers },
            odin_epsilon,
            odin_temperature,
        })
    }
}
