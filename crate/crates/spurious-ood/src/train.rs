//! A small multilayer perceptron with manual backpropagation, trainable
//! under ERM, IRMv1, GroupDRO and REx. Hidden-layer activations are exposed
//! for the feature-based OOD scores.
//!
//! All four objectives share one gradient core ([`objective_grad`]) so the
//! finite-difference checks cover each objective end to end, penalties
//! included.

use crate::colormnist::{ColoredDataset, LABEL_NONE, TRAIN_ENVS};
use crate::numerics::{log_sum_exp, Matrix, NumericsError, Rng};
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("empty batch")]
    EmptyBatch,
    #[error("empty environment {0}")]
    EmptyEnvironment(usize),
    #[error("bad config: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("bad checkpoint: {0}")]
    BadCheckpoint(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, TrainError>;

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

/// Fully connected net d_in → hidden... → K with rectifier hidden layers.
#[derive(Debug, Clone)]
pub struct MlpModel {
    dims: Vec<usize>,
    /// weights[l] has shape dims[l+1] × dims[l]
    pub weights: Vec<Matrix>,
    pub biases: Vec<Vec<f64>>,
}

impl MlpModel {
    /// He-initialized network. `dims` is [d_in, h..., K].
    pub fn new(dims: &[usize], rng: &mut Rng) -> Self {
        assert!(dims.len() >= 2);
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for l in 0..dims.len() - 1 {
            let (fan_in, fan_out) = (dims[l], dims[l + 1]);
            let sd = (2.0 / fan_in as f64).sqrt();
            let mut w = Matrix::zeros(fan_out, fan_in);
            for v in w.data_mut() {
                *v = sd * rng.next_gaussian();
            }
            weights.push(w);
            biases.push(vec![0.0; fan_out]);
        }
        MlpModel { dims: dims.to_vec(), weights, biases }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn num_classes(&self) -> usize {
        *self.dims.last().unwrap()
    }

    pub fn num_layers(&self) -> usize {
        self.weights.len()
    }

    pub fn num_params(&self) -> usize {
        self.weights
            .iter()
            .zip(&self.biases)
            .map(|(w, b)| w.rows() * w.cols() + b.len())
            .sum()
    }

    /// Forward pass for one input: logits plus the post-rectifier hidden
    /// activations, innermost first.
    pub fn apply(&self, x: &[f64]) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
        if x.len() != self.input_dim() {
            return Err(TrainError::DimensionMismatch(format!(
                "input dim {} expected {}",
                x.len(),
                self.input_dim()
            )));
        }
        let mut a = x.to_vec();
        let mut features = Vec::new();
        for l in 0..self.num_layers() {
            let mut z = self.weights[l].matvec(&a)?;
            for (zi, bi) in z.iter_mut().zip(&self.biases[l]) {
                *zi += bi;
            }
            if l + 1 < self.num_layers() {
                for v in z.iter_mut() {
                    *v = v.max(0.0);
                }
                features.push(z.clone());
            }
            a = z;
        }
        Ok((a, features))
    }

    /// Batched forward pass. Returns activations per layer:
    /// acts[0] = input (n × d_in), acts[l] = post-rectifier hidden layer,
    /// acts.last() = logits (n × K).
    pub fn forward_batch(&self, x: &Matrix) -> Result<Vec<Matrix>> {
        if x.cols() != self.input_dim() {
            return Err(TrainError::DimensionMismatch(format!(
                "batch dim {} expected {}",
                x.cols(),
                self.input_dim()
            )));
        }
        let mut acts = vec![x.clone()];
        for l in 0..self.num_layers() {
            let mut z = acts[l].matmul(&self.weights[l].transpose())?;
            let cols = z.cols();
            for i in 0..z.rows() {
                let row = z.row_mut(i);
                for j in 0..cols {
                    row[j] += self.biases[l][j];
                    if l + 1 < self.num_layers() {
                        row[j] = row[j].max(0.0);
                    }
                }
            }
            acts.push(z);
        }
        Ok(acts)
    }

    /// Gradient of a scalar loss with respect to the input, given the loss
    /// gradient at the logits. Used by the ODIN input perturbation.
    pub fn input_gradient(&self, x: &[f64], dlogits: &[f64]) -> Result<Vec<f64>> {
        let (_, features) = self.apply(x)?;
        let mut delta = dlogits.to_vec();
        for l in (0..self.num_layers()).rev() {
            // delta_prev = Wᵀ delta, masked by the rectifier where hidden
            let mut prev = vec![0.0; self.weights[l].cols()];
            for (i, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                for (p, &w) in prev.iter_mut().zip(self.weights[l].row(i)) {
                    *p += w * d;
                }
            }
            if l > 0 {
                for (p, &a) in prev.iter_mut().zip(&features[l - 1]) {
                    if a <= 0.0 {
                        *p = 0.0;
                    }
                }
            }
            delta = prev;
        }
        Ok(delta)
    }

    /// Checkpoint: `MLP1` magic, layer dims, little-endian f64 parameters.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(b"MLP1");
        buf.extend_from_slice(&(self.dims.len() as u32).to_le_bytes());
        for &d in &self.dims {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for l in 0..self.num_layers() {
            for &v in self.weights[l].data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            for &v in &self.biases[l] {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        if bytes.len() < 8 || &bytes[0..4] != b"MLP1" {
            return Err(TrainError::BadCheckpoint("missing MLP1 magic".into()));
        }
        let nd = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let mut off = 8;
        let mut dims = Vec::with_capacity(nd);
        for _ in 0..nd {
            if bytes.len() < off + 4 {
                return Err(TrainError::BadCheckpoint("truncated dims".into()));
            }
            dims.push(
                u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize,
            );
            off += 4;
        }
        let read_f64 = |off: &mut usize| -> Result<f64> {
            if bytes.len() < *off + 8 {
                return Err(TrainError::BadCheckpoint("truncated params".into()));
            }
            let v = f64::from_le_bytes(bytes[*off..*off + 8].try_into().unwrap());
            *off += 8;
            Ok(v)
        };
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for l in 0..nd - 1 {
            let (rows, cols) = (dims[l + 1], dims[l]);
            let mut data = Vec::with_capacity(rows * cols);
            for _ in 0..rows * cols {
                data.push(read_f64(&mut off)?);
            }
            weights.push(Matrix::from_vec(rows, cols, data).unwrap());
            let mut b = Vec::with_capacity(rows);
            for _ in 0..rows {
                b.push(read_f64(&mut off)?);
            }
            biases.push(b);
        }
        Ok(MlpModel { dims, weights, biases })
    }
}

/// Parameter gradients, same shapes as the model.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub weights: Vec<Matrix>,
    pub biases: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn zeros_like(model: &MlpModel) -> Self {
        Gradients {
            weights: model
                .weights
                .iter()
                .map(|w| Matrix::zeros(w.rows(), w.cols()))
                .collect(),
            biases: model.biases.iter().map(|b| vec![0.0; b.len()]).collect(),
        }
    }

    pub fn add_scaled(&mut self, other: &Gradients, c: f64) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                *x += c * y;
            }
        }
        for (a, b) in self.biases.iter_mut().zip(&other.biases) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += c * y;
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Loss core
// ---------------------------------------------------------------------------

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(logits).expect("nonempty logits");
    logits.iter().map(|z| (z - lse).exp()).collect()
}

fn softmax_rows(logits: &Matrix) -> Matrix {
    let mut out = logits.clone();
    for i in 0..out.rows() {
        let p = softmax(logits.row(i));
        out.row_mut(i).copy_from_slice(&p);
    }
    out
}

/// Per-sample cross-entropy −log p_y.
fn ce_rows(logits: &Matrix, y: &[usize]) -> Vec<f64> {
    (0..logits.rows())
        .map(|i| {
            let lse = log_sum_exp(logits.row(i)).unwrap();
            lse - logits.row(i)[y[i]]
        })
        .collect()
}

/// Backpropagate an output-layer delta (n × K, already scaled by whatever
/// weighting the objective uses) through the network.
fn backprop(model: &MlpModel, acts: &[Matrix], delta_out: &Matrix) -> Result<Gradients> {
    let mut grads = Gradients::zeros_like(model);
    let mut delta = delta_out.clone();
    for l in (0..model.num_layers()).rev() {
        grads.weights[l] = delta.transpose().matmul(&acts[l])?;
        for j in 0..delta.cols() {
            grads.biases[l][j] = (0..delta.rows()).map(|i| delta.get(i, j)).sum();
        }
        if l > 0 {
            let mut prev = delta.matmul(&model.weights[l])?;
            // rectifier mask from the post-activation
            for i in 0..prev.rows() {
                let arow = acts[l].row(i);
                let prow = prev.row_mut(i);
                for j in 0..prow.len() {
                    if arow[j] <= 0.0 {
                        prow[j] = 0.0;
                    }
                }
            }
            delta = prev;
        }
    }
    Ok(grads)
}

/// Mean softmax cross-entropy and its exact gradient.
pub fn mlp_grad(model: &MlpModel, x: &Matrix, y: &[usize]) -> Result<(f64, Gradients)> {
    let n = x.rows();
    if n == 0 {
        return Err(TrainError::EmptyBatch);
    }
    if y.len() != n {
        return Err(TrainError::DimensionMismatch("labels vs batch".into()));
    }
    let acts = model.forward_batch(x)?;
    let logits = acts.last().unwrap();
    let loss = ce_rows(logits, y).iter().sum::<f64>() / n as f64;
    let mut delta = softmax_rows(logits);
    for i in 0..n {
        let row = delta.row_mut(i);
        row[y[i]] -= 1.0;
        for v in row.iter_mut() {
            *v /= n as f64;
        }
    }
    Ok((loss, backprop(model, &acts, &delta)?))
}

/// IRMv1 penalty for one environment: squared derivative of the mean
/// cross-entropy with respect to a scalar multiplier on the logits at 1.0.
/// Returns (gradient value g, penalty delta d(g²)/dlogits).
fn irm_env(logits: &Matrix, y: &[usize]) -> (f64, Matrix) {
    let n = logits.rows() as f64;
    let probs = softmax_rows(logits);
    // g = (1/n) Σ_i Σ_k (p_ik − y_ik) z_ik
    let mut g = 0.0;
    for i in 0..logits.rows() {
        for k in 0..logits.cols() {
            let yk = if k == y[i] { 1.0 } else { 0.0 };
            g += (probs.get(i, k) - yk) * logits.get(i, k);
        }
    }
    g /= n;
    // ∂g/∂z_jm = (1/n)[(p_jm − y_jm) + p_jm (z_jm − Σ_k p_jk z_jk)]
    let mut dg = Matrix::zeros(logits.rows(), logits.cols());
    for j in 0..logits.rows() {
        let s: f64 = (0..logits.cols())
            .map(|k| probs.get(j, k) * logits.get(j, k))
            .sum();
        for m in 0..logits.cols() {
            let ym = if m == y[j] { 1.0 } else { 0.0 };
            let v = (probs.get(j, m) - ym)
                + probs.get(j, m) * (logits.get(j, m) - s);
            dg.set(j, m, v / n);
        }
    }
    (g, dg.scale(2.0 * g))
}

/// IRMv1 penalty over environments: Σ_e g_e² with g_e the scalar logit
/// multiplier derivative of the per-environment mean cross-entropy.
pub fn irmv1_penalty(per_env_logits: &[Matrix], per_env_labels: &[Vec<usize>]) -> Result<f64> {
    if per_env_logits.is_empty() {
        return Err(TrainError::EmptyEnvironment(0));
    }
    let mut total = 0.0;
    for (e, (logits, y)) in per_env_logits.iter().zip(per_env_labels).enumerate() {
        if logits.rows() == 0 {
            return Err(TrainError::EmptyEnvironment(e));
        }
        let (g, _) = irm_env(logits, y);
        total += g * g;
    }
    Ok(total)
}

/// Population variance of the per-environment risks.
pub fn rex_penalty(per_env_risks: &[f64]) -> f64 {
    if per_env_risks.is_empty() {
        return 0.0;
    }
    let n = per_env_risks.len() as f64;
    let mean = per_env_risks.iter().sum::<f64>() / n;
    per_env_risks.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n
}

/// Simplex weights over groups g = (y, e).
#[derive(Debug, Clone)]
pub struct GroupWeights {
    pub q: Vec<f64>,
}

impl GroupWeights {
    pub fn uniform(n_groups: usize) -> Self {
        GroupWeights { q: vec![1.0 / n_groups as f64; n_groups] }
    }
}

/// Exponentiated-gradient ascent step: q'_g ∝ q_g·exp(step·loss_g).
pub fn gdro_reweight(q: &GroupWeights, group_losses: &[f64], step: f64) -> GroupWeights {
    assert_eq!(q.q.len(), group_losses.len());
    let mut next: Vec<f64> = q
        .q
        .iter()
        .zip(group_losses)
        .map(|(&qg, &lg)| qg * (step * lg).exp())
        .collect();
    let sum: f64 = next.iter().sum();
    for v in next.iter_mut() {
        *v /= sum;
    }
    GroupWeights { q: next }
}

// ---------------------------------------------------------------------------
// Objectives
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Objective {
    Erm,
    IrmV1,
    Gdro,
    Rex,
}

impl Objective {
    pub fn name(&self) -> &'static str {
        match self {
            Objective::Erm => "erm",
            Objective::IrmV1 => "irmv1",
            Objective::Gdro => "gdro",
            Objective::Rex => "rex",
        }
    }
}

impl FromStr for Objective {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "erm" => Ok(Objective::Erm),
            "irmv1" | "irm" => Ok(Objective::IrmV1),
            "gdro" => Ok(Objective::Gdro),
            "rex" => Ok(Objective::Rex),
            other => Err(format!("unknown objective '{other}'")),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub objective: Objective,
    pub hidden: Vec<usize>,
    pub learning_rate: f64,
    pub l2_penalty: f64,
    /// λ for the IRMv1 / REx penalty term.
    pub penalty_weight: f64,
    /// exponentiated-gradient step for GroupDRO.
    pub gdro_step: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            objective: Objective::Erm,
            hidden: vec![256, 128],
            learning_rate: 0.08,
            l2_penalty: 1e-4,
            penalty_weight: 10.0,
            gdro_step: 0.01,
            epochs: 30,
            batch_size: 128,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 || self.gdro_step <= 0.0 {
            return Err(TrainError::BadConfig("rates must be positive".into()));
        }
        if self.epochs == 0 {
            return Err(TrainError::BadConfig("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(TrainError::BadConfig("batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

/// In-memory training set: rows of features, class labels, environment
/// indices. Groups are (y, env) pairs.
#[derive(Debug, Clone)]
pub struct TrainSet {
    pub x: Matrix,
    pub y: Vec<usize>,
    pub env: Vec<usize>,
    pub n_classes: usize,
    pub n_envs: usize,
}

impl TrainSet {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn n_groups(&self) -> usize {
        self.n_classes * self.n_envs
    }

    pub fn group_of(&self, i: usize) -> usize {
        self.y[i] * self.n_envs + self.env[i]
    }

    /// Pixels centered to [-0.5, 0.5], labels 0/1, the four training colors
    /// as environments.
    pub fn from_colored(ds: &ColoredDataset) -> Self {
        let n = ds.len();
        let d = crate::colormnist::RGB_PIXELS;
        let mut data = Vec::with_capacity(n * d);
        for &b in &ds.images {
            data.push(b as f64 / 255.0 - 0.5);
        }
        let y = ds
            .labels
            .iter()
            .map(|&l| if l == LABEL_NONE { 0 } else { l as usize })
            .collect();
        let env = ds.envs.iter().map(|&e| e as usize).collect();
        TrainSet {
            x: Matrix::from_vec(n, d, data).unwrap(),
            y,
            env,
            n_classes: 2,
            n_envs: TRAIN_ENVS,
        }
    }

    pub fn subset(&self, indices: &[usize]) -> TrainSet {
        let d = self.x.cols();
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            data.extend_from_slice(self.x.row(i));
        }
        TrainSet {
            x: Matrix::from_vec(indices.len(), d, data).unwrap(),
            y: indices.iter().map(|&i| self.y[i]).collect(),
            env: indices.iter().map(|&i| self.env[i]).collect(),
            n_classes: self.n_classes,
            n_envs: self.n_envs,
        }
    }
}

/// One objective evaluation: total loss (including penalty and L2), the
/// bare penalty value, per-group mean losses and exact parameter gradients.
#[derive(Debug)]
pub struct ObjectiveEval {
    pub loss: f64,
    pub penalty: f64,
    pub group_losses: Vec<f64>,
    pub grads: Gradients,
}

/// Evaluate one objective and its analytic gradient on a batch.
///
/// ERM: mean cross-entropy. IRMv1 / REx: mean of per-environment risks plus
/// penalty_weight times the penalty. GDRO: q-weighted group risks (q fixed
/// within the evaluation). All variants add 0.5·l2·‖W‖² weight decay.
pub fn objective_grad(
    model: &MlpModel,
    batch: &TrainSet,
    cfg: &TrainConfig,
    q: Option<&GroupWeights>,
) -> Result<ObjectiveEval> {
    let n = batch.len();
    if n == 0 {
        return Err(TrainError::EmptyBatch);
    }
    let acts = model.forward_batch(&batch.x)?;
    let logits = acts.last().unwrap();
    let probs = softmax_rows(logits);
    let ce = ce_rows(logits, &batch.y);

    // group bookkeeping (reported for logging and used by GDRO)
    let n_groups = batch.n_groups();
    let mut group_sum = vec![0.0; n_groups];
    let mut group_count = vec![0usize; n_groups];
    for i in 0..n {
        let g = batch.group_of(i);
        group_sum[g] += ce[i];
        group_count[g] += 1;
    }
    let group_losses: Vec<f64> = group_sum
        .iter()
        .zip(&group_count)
        .map(|(&s, &c)| if c > 0 { s / c as f64 } else { 0.0 })
        .collect();

    // per-sample weight on the cross-entropy delta
    let mut sample_w = vec![0.0; n];
    let mut loss;
    let mut penalty = 0.0;
    // extra delta at the logits beyond the weighted CE term
    let mut extra_delta: Option<Matrix> = None;

    match cfg.objective {
        Objective::Erm => {
            loss = ce.iter().sum::<f64>() / n as f64;
            sample_w.iter_mut().for_each(|w| *w = 1.0 / n as f64);
        }
        Objective::Gdro => {
            let q = q.expect("GDRO requires group weights");
            loss = 0.0;
            for g in 0..n_groups {
                if group_count[g] > 0 {
                    loss += q.q[g] * group_losses[g];
                }
            }
            for i in 0..n {
                let g = batch.group_of(i);
                sample_w[i] = q.q[g] / group_count[g] as f64;
            }
        }
        Objective::IrmV1 | Objective::Rex => {
            // per-environment index sets
            let mut env_rows: Vec<Vec<usize>> = vec![Vec::new(); batch.n_envs];
            for i in 0..n {
                env_rows[batch.env[i]].push(i);
            }
            let present: Vec<usize> = (0..batch.n_envs)
                .filter(|&e| !env_rows[e].is_empty())
                .collect();
            if present.is_empty() {
                return Err(TrainError::EmptyBatch);
            }
            let n_e = present.len() as f64;
            let risks: Vec<f64> = present
                .iter()
                .map(|&e| {
                    env_rows[e].iter().map(|&i| ce[i]).sum::<f64>()
                        / env_rows[e].len() as f64
                })
                .collect();
            let mean_risk = risks.iter().sum::<f64>() / n_e;
            for (&e, _) in present.iter().zip(&risks) {
                for &i in &env_rows[e] {
                    sample_w[i] = 1.0 / (n_e * env_rows[e].len() as f64);
                }
            }
            match cfg.objective {
                Objective::Rex => {
                    penalty = rex_penalty(&risks);
                    // ∂Var/∂R_e = 2(R_e − R̄)/E flows into each sample's CE
                    for (k, &e) in present.iter().enumerate() {
                        let c = cfg.penalty_weight * 2.0 * (risks[k] - mean_risk)
                            / n_e
                            / env_rows[e].len() as f64;
                        for &i in &env_rows[e] {
                            sample_w[i] += c;
                        }
                    }
                }
                Objective::IrmV1 => {
                    let mut delta = Matrix::zeros(n, logits.cols());
                    for &e in &present {
                        let rows = &env_rows[e];
                        let sub_logits = Matrix::from_rows(
                            &rows.iter().map(|&i| logits.row(i).to_vec()).collect::<Vec<_>>(),
                        )
                        .unwrap();
                        let sub_y: Vec<usize> =
                            rows.iter().map(|&i| batch.y[i]).collect();
                        let (g, pen_delta) = irm_env(&sub_logits, &sub_y);
                        penalty += g * g;
                        for (k, &i) in rows.iter().enumerate() {
                            for j in 0..delta.cols() {
                                delta.set(
                                    i,
                                    j,
                                    cfg.penalty_weight * pen_delta.get(k, j),
                                );
                            }
                        }
                    }
                    extra_delta = Some(delta);
                }
                _ => unreachable!(),
            }
            loss = mean_risk + cfg.penalty_weight * penalty;
            // loss variable currently misses nothing: mean_risk + λ·pen
        }
    }

    // assemble the output delta: weighted CE part plus any penalty part
    let mut delta = Matrix::zeros(n, logits.cols());
    for i in 0..n {
        for k in 0..logits.cols() {
            let yk = if k == batch.y[i] { 1.0 } else { 0.0 };
            delta.set(i, k, sample_w[i] * (probs.get(i, k) - yk));
        }
    }
    if let Some(extra) = extra_delta {
        delta = delta.add(&extra)?;
    }
    let mut grads = backprop(model, &acts, &delta)?;

    // weight decay on the weights only
    if cfg.l2_penalty > 0.0 {
        for (gw, w) in grads.weights.iter_mut().zip(&model.weights) {
            loss += 0.5 * cfg.l2_penalty * w.data().iter().map(|v| v * v).sum::<f64>();
            for (g, &v) in gw.data_mut().iter_mut().zip(w.data()) {
                *g += cfg.l2_penalty * v;
            }
        }
    }

    Ok(ObjectiveEval { loss, penalty, group_losses, grads })
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub penalty: f64,
    pub group_losses: Vec<f64>,
}

/// Training log as CSV `epoch,loss,penalty,group_losses...`.
pub fn write_log_csv<W: Write>(log: &[EpochLog], mut w: W) -> std::io::Result<()> {
    let n_groups = log.first().map_or(0, |l| l.group_losses.len());
    let group_header: Vec<String> =
        (0..n_groups).map(|g| format!("group{g}_loss")).collect();
    writeln!(w, "epoch,loss,penalty,{}", group_header.join(","))?;
    for l in log {
        let groups: Vec<String> =
            l.group_losses.iter().map(|v| format!("{v:.6}")).collect();
        writeln!(w, "{},{:.6},{:.6},{}", l.epoch, l.loss, l.penalty, groups.join(","))?;
    }
    Ok(())
}

/// Train an MLP on the given set. Deterministic per seed. Plain SGD with
/// halve-on-loss-increase learning rate schedule; IRMv1 and REx use
/// environment-stratified mini-batches, GDRO interleaves exponentiated
/// q updates.
pub fn train(data: &TrainSet, cfg: &TrainConfig) -> Result<(MlpModel, Vec<EpochLog>)> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    let mut dims = vec![data.x.cols()];
    dims.extend_from_slice(&cfg.hidden);
    dims.push(data.n_classes);
    let root = Rng::new(cfg.seed);
    let mut model = MlpModel::new(&dims, &mut root.child("init"));
    let mut shuffle_rng = root.child("shuffle");

    let stratified =
        matches!(cfg.objective, Objective::IrmV1 | Objective::Rex);
    let mut q = GroupWeights::uniform(data.n_groups());
    let mut lr = cfg.learning_rate;
    let mut prev_loss = f64::INFINITY;
    let mut log = Vec::with_capacity(cfg.epochs);

    // per-environment index pools for stratified batching
    let env_pools: Vec<Vec<usize>> = (0..data.n_envs)
        .map(|e| (0..data.len()).filter(|&i| data.env[i] == e).collect())
        .collect();

    for epoch in 0..cfg.epochs {
        let batches: Vec<Vec<usize>> = if stratified {
            // balanced partition of batches from each training environment
            let nonempty: Vec<&Vec<usize>> =
                env_pools.iter().filter(|p| !p.is_empty()).collect();
            let per_env = (cfg.batch_size / nonempty.len().max(1)).max(1);
            let shuffled: Vec<Vec<usize>> = nonempty
                .iter()
                .map(|pool| {
                    let perm = shuffle_rng.permutation(pool.len());
                    perm.into_iter().map(|k| pool[k]).collect()
                })
                .collect();
            let steps = shuffled
                .iter()
                .map(|p: &Vec<usize>| p.len().div_ceil(per_env))
                .max()
                .unwrap_or(0);
            (0..steps)
                .map(|s| {
                    let mut b = Vec::with_capacity(per_env * shuffled.len());
                    for pool in &shuffled {
                        for k in 0..per_env {
                            b.push(pool[(s * per_env + k) % pool.len()]);
                        }
                    }
                    b
                })
                .collect()
        } else {
            let perm = shuffle_rng.permutation(data.len());
            perm.chunks(cfg.batch_size).map(|c| c.to_vec()).collect()
        };

        let mut epoch_loss = 0.0;
        let mut epoch_penalty = 0.0;
        let mut group_sum = vec![0.0; data.n_groups()];
        let mut group_batches = vec![0usize; data.n_groups()];
        for batch_idx in &batches {
            let batch = data.subset(batch_idx);
            let eval = objective_grad(
                &model,
                &batch,
                cfg,
                if cfg.objective == Objective::Gdro { Some(&q) } else { None },
            )?;
            if cfg.objective == Objective::Gdro {
                q = gdro_reweight(&q, &eval.group_losses, cfg.gdro_step);
            }
            for l in 0..model.num_layers() {
                for (w, g) in model.weights[l]
                    .data_mut()
                    .iter_mut()
                    .zip(eval.grads.weights[l].data())
                {
                    *w -= lr * g;
                }
                for (b, g) in
                    model.biases[l].iter_mut().zip(&eval.grads.biases[l])
                {
                    *b -= lr * g;
                }
            }
            epoch_loss += eval.loss;
            epoch_penalty += eval.penalty;
            for (g, &v) in eval.group_losses.iter().enumerate() {
                if v > 0.0 {
                    group_sum[g] += v;
                    group_batches[g] += 1;
                }
            }
        }
        let nb = batches.len().max(1) as f64;
        epoch_loss /= nb;
        epoch_penalty /= nb;
        let group_losses: Vec<f64> = group_sum
            .iter()
            .zip(&group_batches)
            .map(|(&s, &c)| if c > 0 { s / c as f64 } else { 0.0 })
            .collect();
        if epoch_loss > prev_loss {
            lr *= 0.5;
        }
        prev_loss = epoch_loss;
        log.push(EpochLog { epoch, loss: epoch_loss, penalty: epoch_penalty, group_losses });
    }
    Ok((model, log))
}

/// Classification accuracy (argmax of logits) on a set.
pub fn accuracy(model: &MlpModel, data: &TrainSet) -> Result<f64> {
    let acts = model.forward_batch(&data.x)?;
    let logits = acts.last().unwrap();
    let mut correct = 0usize;
    for i in 0..data.len() {
        let row = logits.row(i);
        let pred = row
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        if pred == data.y[i] {
            correct += 1;
        }
    }
    Ok(correct as f64 / data.len() as f64)
}
