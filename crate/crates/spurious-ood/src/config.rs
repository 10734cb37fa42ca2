//! Experiment configuration: a zero-dependency `key = value` file format
//! with `#` comments and comma-separated lists.

use crate::scores::ScoreFn;
use crate::train::Objective;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("unknown key '{key}' on line {line}")]
    UnknownKey { key: String, line: usize },
    #[error("bad value for '{key}': {reason}")]
    BadValue { key: String, reason: String },
    #[error("missing required key '{0}'")]
    MissingRequired(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, ConfigError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetKind {
    /// Small synthetic latent-feature dataset; fast, fully self-contained.
    Gaussian,
    /// Colored digits composed from an IDX digit file.
    ColorMnist,
}

impl DatasetKind {
    pub fn name(&self) -> &'static str {
        match self {
            DatasetKind::Gaussian => "gaussian",
            DatasetKind::ColorMnist => "colormnist",
        }
    }
}

/// Which OOD test sets to evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum OodSet {
    /// environmental features without invariant features
    Spurious,
    /// held-out background colors never seen in training
    HeldoutColor,
    /// uniform random pixels
    Noise,
}

impl OodSet {
    pub fn name(&self) -> &'static str {
        match self {
            OodSet::Spurious => "spurious",
            OodSet::HeldoutColor => "heldout_color",
            OodSet::Noise => "noise",
        }
    }

    /// "spurious" vs "nonspurious" for the result table's ood_type column.
    pub fn ood_type(&self) -> &'static str {
        match self {
            OodSet::Spurious => "spurious",
            OodSet::HeldoutColor | OodSet::Noise => "nonspurious",
        }
    }
}

impl FromStr for OodSet {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "spurious" => Ok(OodSet::Spurious),
            "heldout_color" => Ok(OodSet::HeldoutColor),
            "noise" => Ok(OodSet::Noise),
            other => Err(format!("unknown ood set '{other}'")),
        }
    }
}

/// The full sweep: every (r, objective, scorer, ood_set, seed) cross-product
/// cell is one experiment.
#[derive(Debug, Clone)]
pub struct ExperimentPlan {
    pub dataset: DatasetKind,
    pub mnist_path: Option<PathBuf>,
    pub r_values: Vec<f64>,
    pub objectives: Vec<Objective>,
    pub scorers: Vec<ScoreFn>,
    pub seeds: Vec<u64>,
    pub ood_sets: Vec<OodSet>,
    /// samples per OOD test set
    pub ood_samples: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub penalty_weight: f64,
    pub batch_size: usize,
    pub hidden: Vec<usize>,
}

impl Default for ExperimentPlan {
    fn default() -> Self {
        ExperimentPlan {
            dataset: DatasetKind::ColorMnist,
            mnist_path: None,
            r_values: vec![0.25, 0.35, 0.45],
            objectives: vec![Objective::Erm],
            scorers: vec![ScoreFn::Msp, ScoreFn::Energy, ScoreFn::Mahalanobis],
            seeds: vec![0, 2, 3, 12],
            ood_sets: vec![OodSet::Spurious, OodSet::HeldoutColor, OodSet::Noise],
            ood_samples: 400,
            epochs: 30,
            learning_rate: 0.08,
            penalty_weight: 10.0,
            batch_size: 128,
            hidden: vec![256, 128],
        }
    }
}

impl ExperimentPlan {
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(ConfigError::BadValue {
                key: "seeds".into(),
                reason: "at least one seed required".into(),
            });
        }
        if self.r_values.is_empty() {
            return Err(ConfigError::BadValue {
                key: "r".into(),
                reason: "at least one r value required".into(),
            });
        }
        if self.dataset == DatasetKind::ColorMnist {
            if self.mnist_path.is_none() {
                return Err(ConfigError::MissingRequired("mnist_path".into()));
            }
            for &r in &self.r_values {
                if !(0.0..=0.5).contains(&r) {
                    return Err(ConfigError::BadValue {
                        key: "r".into(),
                        reason: format!("{r} outside [0, 0.5]"),
                    });
                }
            }
        }
        if self.objectives.is_empty() || self.scorers.is_empty() || self.ood_sets.is_empty()
        {
            return Err(ConfigError::BadValue {
                key: "objectives/scorers/ood_sets".into(),
                reason: "must be nonempty".into(),
            });
        }
        Ok(())
    }
}

fn parse_list<T, E: std::fmt::Display>(
    key: &str,
    value: &str,
    f: impl Fn(&str) -> std::result::Result<T, E>,
) -> Result<Vec<T>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            f(s).map_err(|e| ConfigError::BadValue {
                key: key.into(),
                reason: format!("'{s}': {e}"),
            })
        })
        .collect()
}

/// Parse one config file into a plan, filling documented defaults for every
/// omitted key and rejecting unknown keys.
pub fn parse_config(path: &Path) -> Result<ExperimentPlan> {
    let text = fs::read_to_string(path)?;
    parse_config_str(&text)
}

pub fn parse_config_str(text: &str) -> Result<ExperimentPlan> {
    let mut plan = ExperimentPlan::default();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap().trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| ConfigError::BadValue {
            key: line.to_string(),
            reason: "expected 'key = value'".into(),
        })?;
        let (key, value) = (key.trim(), value.trim());
        match key {
            "dataset" => {
                plan.dataset = match value {
                    "gaussian" => DatasetKind::Gaussian,
                    "colormnist" => DatasetKind::ColorMnist,
                    other => {
                        return Err(ConfigError::BadValue {
                            key: key.into(),
                            reason: format!("unknown dataset '{other}'"),
                        })
                    }
                };
            }
            "mnist_path" => plan.mnist_path = Some(PathBuf::from(value)),
            "r" => plan.r_values = parse_list(key, value, |s| s.parse::<f64>())?,
            "objectives" => {
                plan.objectives = parse_list(key, value, |s| s.parse::<Objective>())?
            }
            "scorers" => plan.scorers = parse_list(key, value, |s| s.parse::<ScoreFn>())?,
            "seeds" => plan.seeds = parse_list(key, value, |s| s.parse::<u64>())?,
            "ood_sets" => plan.ood_sets = parse_list(key, value, |s| s.parse::<OodSet>())?,
            "ood_samples" => {
                plan.ood_samples = value.parse().map_err(|e| ConfigError::BadValue {
                    key: key.into(),
                    reason: format!("{e}"),
                })?
            }
            "epochs" => {
                plan.epochs = value.parse().map_err(|e| ConfigError::BadValue {
                    key: key.into(),
                    reason: format!("{e}"),
                })?
            }
            "learning_rate" => {
                plan.learning_rate = value.parse().map_err(|e| ConfigError::BadValue {
                    key: key.into(),
                    reason: format!("{e}"),
                })?
            }
            "penalty_weight" => {
                plan.penalty_weight = value.parse().map_err(|e| ConfigError::BadValue {
                    key: key.into(),
                    reason: format!("{e}"),
                })?
            }
            "batch_size" => {
                plan.batch_size = value.parse().map_err(|e| ConfigError::BadValue {
                    key: key.into(),
                    reason: format!("{e}"),
                })?
            }
            "hidden" => plan.hidden = parse_list(key, value, |s| s.parse::<usize>())?,
            other => {
                return Err(ConfigError::UnknownKey { key: other.into(), line: lineno + 1 })
            }
        }
    }
    plan.validate()?;
    Ok(plan)
}
