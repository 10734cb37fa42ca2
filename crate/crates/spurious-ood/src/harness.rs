//! The experiment harness: dataset preparation, per-cell train→score→evaluate
//! pipeline, the sweep runner with deterministic CSV output, the theory
//! verification report and score-histogram emission.

use crate::colormnist::{self, ColoredDataset, DataError, IdxImages, Palette};
use crate::config::{ConfigError, DatasetKind, ExperimentPlan, OodSet};
use crate::gauss_world::{
    self, bayes_classifier, invariant_classifier, lemma4_check, mc_risk, posterior,
    shortcut, shortcut_classifier, shortcut_feature, spurious_ood_point, EnvSpec,
    GaussWorld, InvSpec, LinearClassifier, Shortcut, WorldError,
};
use crate::metrics::{DetectionResult, MetricsError};
use crate::numerics::{dot, spd_solve, Matrix, NumericsError, Rng};
use crate::scores::{
    gram_fit, gram_score, mahalanobis_fit, mahalanobis_score, select_odin_epsilon,
    GramCal, MahalanobisCal, OdinConfig, ScoreError, ScoreFn,
};
use crate::train::{
    accuracy, train, MlpModel, Objective, TrainConfig, TrainError, TrainSet,
};
use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Score(#[from] ScoreError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    World(#[from] WorldError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad score file: {0}")]
    BadScoreFile(String),
}

pub type Result<T> = std::result::Result<T, HarnessError>;

pub const RESULTS_HEADER: &str =
    "dataset,r,objective,score_fn,ood_type,ood_set,seed,fpr95,auroc";

// ---------------------------------------------------------------------------
// Dataset preparation
// ---------------------------------------------------------------------------

/// Everything one experiment cell needs: splits as training sets plus raw
/// feature rows for the OOD evaluations.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub train: TrainSet,
    pub val: TrainSet,
    pub id_test: TrainSet,
    /// OOD test sets, in plan order.
    pub ood: Vec<(OodSet, Vec<Vec<f64>>)>,
    /// Auxiliary OOD rows used only for ODIN ε selection.
    pub ood_val: Vec<Vec<f64>>,
}

pub fn rows_of(set: &TrainSet) -> Vec<Vec<f64>> {
    (0..set.len()).map(|i| set.x.row(i).to_vec()).collect()
}

fn colored_rows(ds: &ColoredDataset) -> Vec<Vec<f64>> {
    let set = TrainSet::from_colored(ds);
    rows_of(&set)
}

/// Compose the colored-digit splits for one (r, seed) cell. The RNG streams
/// are keyed by purpose, so the data depends only on (r, seed), not on which
/// objective or scorer consumes it.
pub fn prepare_colormnist(
    idx: &IdxImages,
    r: f64,
    seed: u64,
    ood_samples: usize,
    ood_sets: &[OodSet],
) -> Result<PreparedData> {
    let palette = Palette::default();
    let spec = colormnist::CorrelationSpec::new(r)?;
    // uniform color table: label and color independent on the ID test split,
    // so the detection threshold is not inflated by the correlation itself
    let balanced = colormnist::CorrelationSpec::new(0.25)?;
    let root = Rng::new(seed);

    let id_pool = idx.indices_of(&[0, 1]);
    let mut split_rng = root.child("split");
    let perm = split_rng.permutation(id_pool.len());
    let pick = |range: &[usize]| -> Vec<usize> {
        range.iter().map(|&k| id_pool[k]).collect()
    };
    let n_test = id_pool.len() * 3 / 20;
    let test_idx = pick(&perm[..n_test]);
    let pool = &perm[n_test..];
    let n_val = pool.len() * 3 / 17;
    let val_idx = pick(&pool[..n_val]);
    let train_idx = pick(&pool[n_val..]);

    let mut compose_rng = root.child("compose");
    let train = TrainSet::from_colored(&colormnist::compose(
        &idx.subset(&train_idx),
        spec,
        &palette,
        &mut compose_rng,
    )?);
    let val = TrainSet::from_colored(&colormnist::compose(
        &idx.subset(&val_idx),
        balanced,
        &palette,
        &mut compose_rng,
    )?);
    let id_test = TrainSet::from_colored(&colormnist::compose(
        &idx.subset(&test_idx),
        balanced,
        &palette,
        &mut root.child("compose-test"),
    )?);

    let suite =
        colormnist::ood_splits(idx, ood_samples, &palette, &mut root.child("ood"))?;
    let mut ood = Vec::new();
    for &set in ood_sets {
        let ds = match set {
            OodSet::Spurious => &suite.spurious,
            OodSet::HeldoutColor => &suite.nonspurious[0].1,
            OodSet::Noise => &suite.nonspurious[1].1,
        };
        ood.push((set, colored_rows(ds)));
    }
    let val_suite = colormnist::ood_splits(
        idx,
        (ood_samples / 2).max(1),
        &palette,
        &mut root.child("oodval"),
    )?;
    let ood_val = colored_rows(&val_suite.spurious);
    Ok(PreparedData { train, val, id_test, ood, ood_val })
}

/// A fast synthetic analog of the colored-digit protocol, used for smoke
/// tests and determinism checks. Inputs are [z_inv; z_e] with the
/// environmental feature agreeing with the label with probability 0.5 + r.
pub fn prepare_gaussian(
    r: f64,
    seed: u64,
    ood_samples: usize,
    ood_sets: &[OodSet],
) -> Result<PreparedData> {
    let mu_inv = [1.0, 0.8];
    let mu_e = [[1.5, 0.0], [0.0, 1.5]];
    let (s_inv, s_e) = (0.5f64, 0.3f64);
    let root = Rng::new(seed);

    let draw = |n: usize, rng: &mut Rng| -> TrainSet {
        let mut data = Vec::with_capacity(n * 4);
        let mut y = Vec::with_capacity(n);
        let mut env = Vec::with_capacity(n);
        for _ in 0..n {
            let label = rng.next_below(2);
            let e = rng.next_below(2);
            let ys = if label == 1 { 1.0 } else { -1.0 };
            let aligned = rng.next_f64() < 0.5 + r;
            let es = if aligned { ys } else { -ys };
            for m in mu_inv {
                data.push(ys * m + s_inv.sqrt() * rng.next_gaussian());
            }
            for m in mu_e[e] {
                data.push(es * m + s_e.sqrt() * rng.next_gaussian());
            }
            y.push(label);
            env.push(e);
        }
        TrainSet {
            x: Matrix::from_vec(n, 4, data).unwrap(),
            y,
            env,
            n_classes: 2,
            n_envs: 2,
        }
    };

    let train = draw(800, &mut root.child("train"));
    let val = draw(200, &mut root.child("val"));
    let id_test = draw(400, &mut root.child("test"));

    let spurious = |n: usize, rng: &mut Rng| -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| {
                let e = rng.next_below(2);
                let es = if rng.next_below(2) == 1 { 1.0 } else { -1.0 };
                let mut x: Vec<f64> =
                    (0..2).map(|_| s_inv.sqrt() * rng.next_gaussian()).collect();
                for m in mu_e[e] {
                    x.push(es * m + s_e.sqrt() * rng.next_gaussian());
                }
                x
            })
            .collect()
    };
    let noise = |n: usize, rng: &mut Rng| -> Vec<Vec<f64>> {
        // low-signal noise near the origin: carries neither feature
        (0..n)
            .map(|_| (0..4).map(|_| 0.3 * rng.next_gaussian()).collect())
            .collect()
    };

    let mut ood_rng = root.child("ood");
    let mut ood = Vec::new();
    for &set in ood_sets {
        let rows = match set {
            OodSet::Spurious => spurious(ood_samples, &mut ood_rng),
            // no held-out colors exist here; both non-spurious sets are noise
            OodSet::HeldoutColor | OodSet::Noise => noise(ood_samples, &mut ood_rng),
        };
        ood.push((set, rows));
    }
    let ood_val = spurious((ood_samples / 2).max(1), &mut root.child("oodval"));
    Ok(PreparedData { train, val, id_test, ood, ood_val })
}

// ---------------------------------------------------------------------------
// Cell evaluation
// ---------------------------------------------------------------------------

/// Scorers fitted for one trained model; only the pieces the requested score
/// functions need are fitted.
pub struct FittedScorers<'a> {
    pub model: &'a MlpModel,
    pub mahalanobis: Option<MahalanobisCal>,
    pub gram: Option<GramCal>,
    pub odin: OdinConfig,
}

pub const GRAM_ORDERS: u32 = 5;

impl<'a> FittedScorers<'a> {
    pub fn fit(
        model: &'a MlpModel,
        data: &PreparedData,
        scorers: &[ScoreFn],
    ) -> Result<Self> {
        let need = |s: ScoreFn| scorers.contains(&s);
        let features = |set: &TrainSet| -> Result<Vec<Vec<Vec<f64>>>> {
            (0..set.len())
                .map(|i| Ok(model.apply(set.x.row(i))?.1))
                .collect()
        };
        let mut mahalanobis = None;
        let mut gram = None;
        if need(ScoreFn::Mahalanobis) || need(ScoreFn::Gram) {
            if need(ScoreFn::Mahalanobis) {
                // Fit the class Gaussians on the held-out validation split
                // (colored with the balanced table) so the estimated
                // covariance reflects label structure rather than the
                // training color/label co-occurrence.
                let val_feats = features(&data.val)?;
                let penult: Vec<Vec<f64>> =
                    val_feats.iter().map(|f| f.last().unwrap().clone()).collect();
                mahalanobis = Some(mahalanobis_fit(&penult, &data.val.y)?);
            }
            if need(ScoreFn::Gram) {
                let fit_feats = features(&data.train)?;
                let val_feats = features(&data.val)?;
                gram = Some(gram_fit(
                    &fit_feats,
                    &data.train.y,
                    &val_feats,
                    &data.val.y,
                    GRAM_ORDERS,
                )?);
            }
        }
        let mut odin = OdinConfig::default();
        if need(ScoreFn::Odin) && !data.ood_val.is_empty() {
            let val_rows = rows_of(&data.val);
            odin.epsilon = select_odin_epsilon(
                model,
                &val_rows,
                &data.ood_val,
                odin.temperature,
            )?;
        }
        Ok(FittedScorers { model, mahalanobis, gram, odin })
    }

    pub fn score(&self, sf: ScoreFn, x: &[f64]) -> Result<f64> {
        match sf {
            ScoreFn::Msp => {
                let (logits, _) = self.model.apply(x)?;
                Ok(crate::scores::msp(&logits)?)
            }
            ScoreFn::Energy => {
                let (logits, _) = self.model.apply(x)?;
                Ok(crate::scores::energy_score(&logits, 1.0)?)
            }
            ScoreFn::Odin => Ok(crate::scores::odin(self.model, x, &self.odin)?),
            ScoreFn::Mahalanobis => {
                let cal =
                    self.mahalanobis.as_ref().ok_or(ScoreError::NotFitted)?;
                let (_, feats) = self.model.apply(x)?;
                Ok(mahalanobis_score(cal, feats.last().unwrap())?)
            }
            ScoreFn::Gram => {
                let cal = self.gram.as_ref().ok_or(ScoreError::NotFitted)?;
                let (logits, feats) = self.model.apply(x)?;
                let pred = logits
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                    .unwrap()
                    .0;
                Ok(gram_score(cal, &feats, pred)?)
            }
        }
    }

    pub fn score_rows(&self, sf: ScoreFn, rows: &[Vec<f64>]) -> Result<Vec<f64>> {
        rows.iter().map(|x| self.score(sf, x)).collect()
    }
}

/// Everything measured for one (data, objective, seed) cell.
#[derive(Debug)]
pub struct CellEval {
    pub id_accuracy: f64,
    pub results: BTreeMap<(ScoreFn, OodSet), DetectionResult>,
}

pub fn make_train_config(
    plan: &ExperimentPlan,
    objective: Objective,
    seed: u64,
) -> TrainConfig {
    TrainConfig {
        objective,
        hidden: plan.hidden.clone(),
        learning_rate: plan.learning_rate,
        penalty_weight: plan.penalty_weight,
        epochs: plan.epochs,
        batch_size: plan.batch_size,
        seed,
        ..TrainConfig::default()
    }
}

/// Train one model and evaluate every requested (scorer, ood_set) pair.
pub fn eval_cell(
    data: &PreparedData,
    cfg: &TrainConfig,
    scorers: &[ScoreFn],
) -> Result<(MlpModel, CellEval)> {
    let (model, _log) = train(&data.train, cfg)?;
    let id_accuracy = accuracy(&model, &data.id_test)?;
    let fitted = FittedScorers::fit(&model, data, scorers)?;
    let id_rows = rows_of(&data.id_test);
    let mut results = BTreeMap::new();
    for &sf in scorers {
        let id_scores = fitted.score_rows(sf, &id_rows)?;
        for (set, rows) in &data.ood {
            let ood_scores = fitted.score_rows(sf, rows)?;
            results.insert(
                (sf, *set),
                DetectionResult::evaluate(id_scores.clone(), ood_scores)?,
            );
        }
    }
    Ok((model, CellEval { id_accuracy, results }))
}

// ---------------------------------------------------------------------------
// Score persistence + histogram
// ---------------------------------------------------------------------------

/// Persist paired ID/OOD score arrays: `SCR1` magic, two u32 counts, f64 LE.
pub fn write_scores(path: &Path, id: &[f64], ood: &[f64]) -> Result<()> {
    let mut buf = Vec::with_capacity(12 + 8 * (id.len() + ood.len()));
    buf.extend_from_slice(b"SCR1");
    buf.extend_from_slice(&(id.len() as u32).to_le_bytes());
    buf.extend_from_slice(&(ood.len() as u32).to_le_bytes());
    for &v in id.iter().chain(ood) {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, buf)?;
    Ok(())
}

pub fn read_scores(path: &Path) -> Result<(Vec<f64>, Vec<f64>)> {
    let bytes = fs::read(path)?;
    if bytes.len() < 12 || &bytes[0..4] != b"SCR1" {
        return Err(HarnessError::BadScoreFile("missing SCR1 magic".into()));
    }
    let n_id = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let n_ood = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    if bytes.len() < 12 + 8 * (n_id + n_ood) {
        return Err(HarnessError::BadScoreFile("truncated".into()));
    }
    let read = |k: usize| {
        f64::from_le_bytes(bytes[12 + 8 * k..20 + 8 * k].try_into().unwrap())
    };
    let id = (0..n_id).map(read).collect();
    let ood = (n_id..n_id + n_ood).map(read).collect();
    Ok((id, ood))
}

pub const HIST_BINS: usize = 50;

/// Bin a persisted score file into 50 uniform bins over the combined range
/// and write CSV `bin_lo,bin_hi,id_count,ood_count`.
pub fn hist(scores_path: &Path, out_csv: &Path) -> Result<()> {
    let (id, ood) = read_scores(scores_path)?;
    let all = id.iter().chain(&ood);
    let lo = all.clone().cloned().fold(f64::INFINITY, f64::min);
    let hi = all.cloned().fold(f64::NEG_INFINITY, f64::max);
    let width = if hi > lo { (hi - lo) / HIST_BINS as f64 } else { 1.0 };
    let bin_of = |v: f64| -> usize {
        (((v - lo) / width) as usize).min(HIST_BINS - 1)
    };
    let mut id_counts = [0usize; HIST_BINS];
    let mut ood_counts = [0usize; HIST_BINS];
    for &v in &id {
        id_counts[bin_of(v)] += 1;
    }
    for &v in &ood {
        ood_counts[bin_of(v)] += 1;
    }
    let mut f = fs::File::create(out_csv)?;
    writeln!(f, "bin_lo,bin_hi,id_count,ood_count")?;
    for b in 0..HIST_BINS {
        writeln!(
            f,
            "{:.6},{:.6},{},{}",
            lo + b as f64 * width,
            lo + (b + 1) as f64 * width,
            id_counts[b],
            ood_counts[b]
        )?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Sweep runner
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct ResultRow {
    pub dataset: String,
    pub r: f64,
    pub objective: Objective,
    pub score_fn: ScoreFn,
    pub ood_type: String,
    pub ood_set: String,
    pub seed: u64,
    pub fpr95: f64,
    pub auroc: f64,
}

impl ResultRow {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{:.6},{:.6}",
            self.dataset,
            self.r,
            self.objective.name(),
            self.score_fn.name(),
            self.ood_type,
            self.ood_set,
            self.seed,
            self.fpr95,
            self.auroc
        )
    }
}

fn write_results_csv(path: &Path, rows: &[ResultRow]) -> Result<()> {
    let mut lines: Vec<String> = rows.iter().map(ResultRow::csv_line).collect();
    lines.sort();
    let mut f = fs::File::create(path)?;
    writeln!(f, "{RESULTS_HEADER}")?;
    for l in lines {
        writeln!(f, "{l}")?;
    }
    Ok(())
}

fn write_summary_csv(path: &Path, rows: &[ResultRow]) -> Result<()> {
    // group over seeds
    let mut groups: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
    for row in rows {
        let key = format!(
            "{},{},{},{},{},{}",
            row.dataset,
            row.r,
            row.objective.name(),
            row.score_fn.name(),
            row.ood_type,
            row.ood_set
        );
        groups.entry(key).or_default().push((row.fpr95, row.auroc));
    }
    let mean_std = |vs: &[f64]| -> (f64, f64) {
        let n = vs.len() as f64;
        let mean = vs.iter().sum::<f64>() / n;
        let std = if vs.len() > 1 {
            (vs.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        (mean, std)
    };
    let mut f = fs::File::create(path)?;
    writeln!(
        f,
        "dataset,r,objective,score_fn,ood_type,ood_set,fpr95_mean,fpr95_std,auroc_mean,auroc_std"
    )?;
    for (key, vals) in groups {
        let fprs: Vec<f64> = vals.iter().map(|v| v.0).collect();
        let aurocs: Vec<f64> = vals.iter().map(|v| v.1).collect();
        let (fm, fs_) = mean_std(&fprs);
        let (am, as_) = mean_std(&aurocs);
        writeln!(f, "{key},{fm:.6},{fs_:.6},{am:.6},{as_:.6}")?;
    }
    Ok(())
}

/// Execute the full sweep and write `results.csv`, `summary.csv`,
/// `accuracy.csv` plus per-cell score dumps and model checkpoints under
/// `out_dir`. Byte-identical across reruns of the same plan.
pub fn run(plan: &ExperimentPlan, out_dir: &Path) -> Result<Vec<ResultRow>> {
    plan.validate()?;
    fs::create_dir_all(out_dir)?;
    let scores_dir = out_dir.join("scores");
    fs::create_dir_all(&scores_dir)?;
    let models_dir = out_dir.join("models");
    fs::create_dir_all(&models_dir)?;

    let idx = match plan.dataset {
        DatasetKind::ColorMnist => {
            let dir = plan.mnist_path.as_ref().unwrap();
            Some(IdxImages::load(
                &dir.join("digits-images-idx3-ubyte"),
                &dir.join("digits-labels-idx1-ubyte"),
            )?)
        }
        DatasetKind::Gaussian => None,
    };

    let mut rows: Vec<ResultRow> = Vec::new();
    let mut acc_lines: Vec<String> = Vec::new();
    for &r in &plan.r_values {
        for &seed in &plan.seeds {
            let data = match plan.dataset {
                DatasetKind::ColorMnist => prepare_colormnist(
                    idx.as_ref().unwrap(),
                    r,
                    seed,
                    plan.ood_samples,
                    &plan.ood_sets,
                )?,
                DatasetKind::Gaussian => {
                    prepare_gaussian(r, seed, plan.ood_samples, &plan.ood_sets)?
                }
            };
            for &objective in &plan.objectives {
                let cfg = make_train_config(plan, objective, seed);
                let (model, eval) = eval_cell(&data, &cfg, &plan.scorers)?;
                let cell = format!(
                    "{}_r{}_{}_seed{}",
                    plan.dataset.name(),
                    r,
                    objective.name(),
                    seed
                );
                model.save(&models_dir.join(format!("{cell}.mlp")))?;
                acc_lines.push(format!(
                    "{},{},{},{},{:.6}",
                    plan.dataset.name(),
                    r,
                    objective.name(),
                    seed,
                    eval.id_accuracy
                ));
                for ((sf, set), det) in &eval.results {
                    write_scores(
                        &scores_dir.join(format!("{cell}_{}_{}.scr", sf.name(), set.name())),
                        &det.id_scores,
                        &det.ood_scores,
                    )?;
                    rows.push(ResultRow {
                        dataset: plan.dataset.name().to_string(),
                        r,
                        objective,
                        score_fn: *sf,
                        ood_type: set.ood_type().to_string(),
                        ood_set: set.name().to_string(),
                        seed,
                        fpr95: det.fpr95,
                        auroc: det.auroc,
                    });
                }
                // flush after every completed cell so partial sweeps are usable
                write_results_csv(&out_dir.join("results.csv"), &rows)?;
            }
        }
    }
    acc_lines.sort();
    let mut f = fs::File::create(out_dir.join("accuracy.csv"))?;
    writeln!(f, "dataset,r,objective,seed,id_accuracy")?;
    for l in &acc_lines {
        writeln!(f, "{l}")?;
    }
    write_summary_csv(&out_dir.join("summary.csv"), &rows)?;
    Ok(rows)
}

// ---------------------------------------------------------------------------
// Theory verification
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct TheoryCheck {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone)]
pub struct TheoryReport {
    pub checks: Vec<TheoryCheck>,
}

impl TheoryReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for c in &self.checks {
            out.push_str(&format!(
                "{} {} ({})\n",
                if c.passed { "PASS" } else { "FAIL" },
                c.name,
                c.detail
            ));
        }
        out
    }
}

/// A random world with s ≤ max_s invariant dims, d_e ≤ max_de environmental
/// dims and E ≤ d_e environments.
pub fn random_world(rng: &mut Rng, max_s: usize, max_de: usize) -> GaussWorld {
    let s = 1 + rng.next_below(max_s);
    let d_e = 1 + rng.next_below(max_de);
    let n_envs = 1 + rng.next_below(d_e);
    let mu_inv: Vec<f64> =
        (0..s).map(|_| 0.5 + rng.next_f64() * 1.5).collect();
    let envs: Vec<EnvSpec> = (0..n_envs)
        .map(|_| EnvSpec {
            mu_e: (0..d_e).map(|_| rng.next_gaussian() * 1.5).collect(),
            sigma_e_sq: 0.3 + rng.next_f64() * 1.2,
        })
        .collect();
    GaussWorld::new(
        InvSpec { mu_inv, sigma_inv_sq: 0.3 + rng.next_f64() },
        envs,
        0.2 + 0.6 * rng.next_f64(),
    )
}

/// A 1+1-dimensional world whose feature means are bounded away from zero,
/// so relative weight comparisons against a sample fit are well conditioned.
pub fn random_world_2d(rng: &mut Rng) -> GaussWorld {
    let sign = if rng.next_below(2) == 1 { 1.0 } else { -1.0 };
    GaussWorld::new(
        InvSpec {
            mu_inv: vec![0.5 + rng.next_f64() * 1.5],
            sigma_inv_sq: 0.3 + rng.next_f64(),
        },
        vec![EnvSpec {
            mu_e: vec![sign * (0.5 + rng.next_f64() * 1.5)],
            sigma_e_sq: 0.3 + rng.next_f64(),
        }],
        0.2 + 0.6 * rng.next_f64(),
    )
}

fn env_only_classifier(world: &GaussWorld, sc: &Shortcut) -> LinearClassifier {
    let mut w = vec![0.0; world.inv_dim()];
    w.push(2.0 * sc.beta);
    LinearClassifier { w, bias: world.bias() }
}

/// Fit logistic regression by Newton's method on latent features [z_inv; z_e]
/// with a free intercept. Returns (weights, intercept).
pub fn fit_logistic(
    xs: &[Vec<f64>],
    ys: &[i8],
    iters: usize,
) -> Result<(Vec<f64>, f64)> {
    let d = xs[0].len();
    let mut w = vec![0.0; d + 1]; // last entry = intercept
    for _ in 0..iters {
        let mut grad = vec![0.0; d + 1];
        let mut hess = Matrix::zeros(d + 1, d + 1);
        for (x, &y) in xs.iter().zip(ys) {
            let m = dot(&w[..d], x) + w[d];
            let p = gauss_world::sigmoid(m);
            let t = if y > 0 { 1.0 } else { 0.0 };
            let coef = p - t;
            let wgt = (p * (1.0 - p)).max(1e-9);
            for i in 0..d {
                grad[i] += coef * x[i];
            }
            grad[d] += coef;
            for i in 0..=d {
                let xi = if i < d { x[i] } else { 1.0 };
                let row = hess.row_mut(i);
                for j in 0..=d {
                    let xj = if j < d { x[j] } else { 1.0 };
                    row[j] += wgt * xi * xj;
                }
            }
        }
        let n = xs.len() as f64;
        for g in grad.iter_mut() {
            *g /= n;
        }
        for v in hess.data_mut() {
            *v /= n;
        }
        // small ridge keeps the Newton system well posed
        for i in 0..=d {
            let v = hess.get(i, i) + 1e-9;
            hess.set(i, i, v);
        }
        let step = spd_solve(&hess, &grad)?;
        let mut delta = 0.0f64;
        for (wi, si) in w.iter_mut().zip(&step) {
            *wi -= si;
            delta = delta.max(si.abs());
        }
        if delta < 1e-10 {
            break;
        }
    }
    let intercept = w[d];
    w.truncate(d);
    Ok((w, intercept))
}

fn mean_log_loss(w: &[f64], b: f64, xs: &[Vec<f64>], ys: &[i8]) -> f64 {
    let mut total = 0.0;
    for (x, &y) in xs.iter().zip(ys) {
        let m = dot(w, x) + b;
        let z = if y > 0 { -m } else { m };
        // log(1 + e^z), stable
        total += if z > 0.0 { z + (-z).exp().ln_1p() } else { z.exp().ln_1p() };
    }
    total / xs.len() as f64
}

/// Options controlling the verification run; `beta_perturbation` is a test
/// hook that corrupts β before the shortcut-invariance check (a negative
/// control: any nonzero value must make that check fail).
#[derive(Debug, Clone, Copy)]
pub struct VerifyOptions {
    pub seed: u64,
    pub beta_perturbation: f64,
    /// Monte-Carlo sample size for the risk-ordering check.
    pub mc_samples: usize,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        VerifyOptions { seed: 0, beta_perturbation: 0.0, mc_samples: 100_000 }
    }
}

/// Run the closed-form theory checks, write the toy-figure CSVs to `out_dir`
/// and return the report.
pub fn verify_theory(opts: &VerifyOptions, out_dir: &Path) -> Result<TheoryReport> {
    fs::create_dir_all(out_dir)?;
    let root = Rng::new(opts.seed);
    let mut checks = Vec::new();

    // 1. Constructed spurious OOD points hit every target confidence exactly.
    {
        let mut rng = root.child("theorem1");
        let mut max_resid = 0.0f64;
        for _ in 0..20 {
            let world = random_world(&mut rng, 8, 8);
            let sc = shortcut(&world.envs)?;
            let cls = shortcut_classifier(&world, &sc)?;
            for k in 1..=99 {
                let c = k as f64 / 100.0;
                let pt = spurious_ood_point(&world, &sc, c, 0, &mut rng)?;
                let post = posterior(&cls, &pt.phi)?;
                max_resid = max_resid.max((post - c).abs());
            }
        }
        checks.push(TheoryCheck {
            name: "spurious-ood-confidence-grid".into(),
            passed: max_resid <= 1e-9,
            detail: format!("max posterior residual {max_resid:.3e}"),
        });
    }

    // 2. The shortcut direction is environment-invariant: pᵀμ_e/σ²_e = β
    //    in every environment, with p unit-norm.
    {
        let mut rng = root.child("shortcut");
        let mut max_resid = 0.0f64;
        let mut max_norm_err = 0.0f64;
        for _ in 0..100 {
            let world = random_world(&mut rng, 4, 8);
            let sc = shortcut(&world.envs)?;
            let beta = sc.beta + opts.beta_perturbation;
            for env in &world.envs {
                let resid = (dot(&sc.p, &env.mu_e) / env.sigma_e_sq - beta).abs();
                max_resid = max_resid.max(resid);
            }
            max_norm_err =
                max_norm_err.max((crate::numerics::norm2(&sc.p) - 1.0).abs());
        }
        checks.push(TheoryCheck {
            name: "shortcut-invariance".into(),
            passed: max_resid <= 1e-9 && max_norm_err <= 1e-12,
            detail: format!(
                "max β residual {max_resid:.3e}, max ‖p‖ error {max_norm_err:.3e}"
            ),
        });
    }

    // 3. Closed-form Bayes classifier beats (matches) fitted logistic
    //    regression: the closed form is optimal, so a sample fit should
    //    recover its weights and risk.
    {
        let mut rng = root.child("bayes");
        let mut max_loss_gap = 0.0f64;
        let mut max_w_err = 0.0f64;
        for _ in 0..3 {
            let world = random_world_2d(&mut rng);
            let m_inv = Matrix::from_vec(2, 1, vec![1.0, 0.0]).unwrap();
            let m_e = Matrix::from_vec(2, 1, vec![0.0, 1.0]).unwrap();
            let bayes = bayes_classifier(&world, 0, &m_inv, &m_e)?;
            let n = 200_000;
            let samples = gauss_world::sample(&world, 0, n, &mut rng)?;
            let xs: Vec<Vec<f64>> = samples
                .iter()
                .map(|s| vec![s.z_inv[0], s.z_e[0]])
                .collect();
            let ys: Vec<i8> = samples.iter().map(|s| s.y).collect();
            let (w, b) = fit_logistic(&xs, &ys, 30)?;
            let test = gauss_world::sample(&world, 0, 50_000, &mut rng)?;
            let txs: Vec<Vec<f64>> =
                test.iter().map(|s| vec![s.z_inv[0], s.z_e[0]]).collect();
            let tys: Vec<i8> = test.iter().map(|s| s.y).collect();
            let fit_loss = mean_log_loss(&w, b, &txs, &tys);
            let bayes_loss = mean_log_loss(&bayes.w, bayes.bias, &txs, &tys);
            max_loss_gap = max_loss_gap.max((fit_loss - bayes_loss).abs());
            for (wf, wb) in w.iter().zip(&bayes.w) {
                max_w_err = max_w_err.max((wf - wb).abs() / wb.abs().max(1e-9));
            }
        }
        checks.push(TheoryCheck {
            name: "bayes-optimality".into(),
            passed: max_loss_gap <= 0.01 && max_w_err <= 0.05,
            detail: format!(
                "max log-loss gap {max_loss_gap:.4}, max weight rel err {max_w_err:.4}"
            ),
        });
    }

    // 4. When both risk-ordering conditions hold, the environment-only
    //    predictor is at least as good as the optimal invariant predictor.
    {
        let mut rng = root.child("ordering");
        let mut worst_margin = f64::NEG_INFINITY;
        let mut found = 0;
        let mut tries = 0;
        while found < 5 && tries < 5000 {
            tries += 1;
            let mut world = random_world(&mut rng, 2, 4);
            world.eta = 0.5; // second condition is then automatic
            let sc = match shortcut(&world.envs) {
                Ok(s) => s,
                Err(_) => continue,
            };
            let (c1, c2) = lemma4_check(&world, 0, sc.beta)?;
            if !(c1 && c2) {
                continue;
            }
            found += 1;
            let env_cls = env_only_classifier(&world, &sc);
            let inv_cls = invariant_classifier(&world);
            let env_risk = mc_risk(
                &env_cls,
                shortcut_feature(&sc),
                &world,
                0,
                opts.mc_samples,
                &mut rng,
            )?;
            let inv_risk = mc_risk(
                &inv_cls,
                |s| s.z_inv.clone(),
                &world,
                0,
                opts.mc_samples,
                &mut rng,
            )?;
            let se = (env_risk.std_err.powi(2) + inv_risk.std_err.powi(2)).sqrt();
            let margin = env_risk.risk - inv_risk.risk - 3.0 * se;
            worst_margin = worst_margin.max(margin);
        }
        checks.push(TheoryCheck {
            name: "risk-ordering".into(),
            passed: found == 5 && worst_margin <= 0.0,
            detail: format!(
                "{found} worlds, worst (env − inv − 3se) = {worst_margin:.5}"
            ),
        });
    }

    // 5. Under the pure invariant classifier the constructed OOD points are
    //    maximally uncertain (posterior exactly 1/2 at η = 1/2).
    {
        let mut rng = root.child("invariant-posterior");
        let mut max_resid = 0.0f64;
        for _ in 0..20 {
            let mut world = random_world(&mut rng, 6, 6);
            world.eta = 0.5;
            let sc = shortcut(&world.envs)?;
            let inv_cls = invariant_classifier(&world);
            for &c in &[0.1, 0.5, 0.9, 0.99] {
                let pt = spurious_ood_point(&world, &sc, c, 0, &mut rng)?;
                let post = posterior(&inv_cls, &pt.z_out)?;
                max_resid = max_resid.max((post - 0.5).abs());
            }
        }
        checks.push(TheoryCheck {
            name: "invariant-posterior-half".into(),
            passed: max_resid <= 1e-9,
            detail: format!("max |posterior − 0.5| = {max_resid:.3e}"),
        });
    }

    // Toy-figure data: a 2-D world (1 invariant + shortcut coordinate).
    {
        let mut rng = root.child("figure");
        let world = GaussWorld::new(
            InvSpec { mu_inv: vec![1.0], sigma_inv_sq: 0.5 },
            vec![
                EnvSpec { mu_e: vec![1.2, 0.0], sigma_e_sq: 0.4 },
                EnvSpec { mu_e: vec![0.0, 0.9], sigma_e_sq: 0.3 },
            ],
            0.5,
        );
        let sc = shortcut(&world.envs)?;
        let fig = gauss_world::toy_figure_data(&world, &sc, 400, &mut rng)?;
        fig.write_scatter_csv(fs::File::create(out_dir.join("toy_scatter.csv"))?)?;
        fig.write_boundary_csv(fs::File::create(out_dir.join("toy_boundaries.csv"))?)?;
    }

    Ok(TheoryReport { checks })
}
