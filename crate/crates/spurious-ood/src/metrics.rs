//! Detection evaluation: the threshold detector, FPR at a target TPR, and
//! rank-sum AUROC. Scores follow the convention higher = more in-distribution.

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("score arrays must be nonempty")]
    EmptyScores,
}

pub type Result<T> = std::result::Result<T, MetricsError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Detection {
    In,
    Out,
}

/// Threshold detector: `In` iff score ≥ λ.
pub fn detector(score: f64, lambda: f64) -> Detection {
    if score >= lambda {
        Detection::In
    } else {
        Detection::Out
    }
}

/// Largest threshold λ admitting at least ⌈tpr·|ID|⌉ ID scores, and the
/// fraction of OOD scores at or above it. Returns (fpr, λ).
pub fn fpr_at_tpr(id_scores: &[f64], ood_scores: &[f64], tpr: f64) -> Result<(f64, f64)> {
    if id_scores.is_empty() || ood_scores.is_empty() {
        return Err(MetricsError::EmptyScores);
    }
    let mut sorted = id_scores.to_vec();
    sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let k = (tpr * id_scores.len() as f64).ceil() as usize;
    let k = k.clamp(1, id_scores.len());
    let lambda = sorted[k - 1];
    let fp = ood_scores.iter().filter(|&&s| s >= lambda).count();
    Ok((fp as f64 / ood_scores.len() as f64, lambda))
}

/// Probability a random ID score exceeds a random OOD score, ties counted
/// half. Computed via the rank-sum formulation in O((n+m) log(n+m)).
pub fn auroc(id_scores: &[f64], ood_scores: &[f64]) -> Result<f64> {
    if id_scores.is_empty() || ood_scores.is_empty() {
        return Err(MetricsError::EmptyScores);
    }
    let n = id_scores.len();
    let m = ood_scores.len();
    let mut all: Vec<(f64, bool)> = id_scores
        .iter()
        .map(|&s| (s, true))
        .chain(ood_scores.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());

    // sum of midranks of ID scores
    let mut rank_sum = 0.0f64;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j < all.len() && all[j].0 == all[i].0 {
            j += 1;
        }
        // 1-based ranks i+1 ..= j, midrank (i+1 + j)/2
        let midrank = (i + 1 + j) as f64 / 2.0;
        for item in &all[i..j] {
            if item.1 {
                rank_sum += midrank;
            }
        }
        i = j;
    }
    let u = rank_sum - (n * (n + 1)) as f64 / 2.0;
    Ok(u / (n as f64 * m as f64))
}

/// Paired score arrays plus their summary for one experiment cell.
#[derive(Debug, Clone)]
pub struct DetectionResult {
    pub id_scores: Vec<f64>,
    pub ood_scores: Vec<f64>,
    pub fpr95: f64,
    pub auroc: f64,
    pub threshold_lambda: f64,
}

impl DetectionResult {
    pub fn evaluate(id_scores: Vec<f64>, ood_scores: Vec<f64>) -> Result<Self> {
        let (fpr95, threshold_lambda) = fpr_at_tpr(&id_scores, &ood_scores, 0.95)?;
        let auroc = auroc(&id_scores, &ood_scores)?;
        Ok(DetectionResult { id_scores, ood_scores, fpr95, auroc, threshold_lambda })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    /// Brute-force pair-counting oracle for AUROC.
    pub fn auroc_brute(id: &[f64], ood: &[f64]) -> f64 {
        let mut total = 0.0;
        for &a in id {
            for &b in ood {
                if a > b {
                    total += 1.0;
                } else if a == b {
                    total += 0.5;
                }
            }
        }
        total / (id.len() * ood.len()) as f64
    }

    /// Sort-based oracle for fpr_at_tpr.
    pub fn fpr_brute(id: &[f64], ood: &[f64], tpr: f64) -> (f64, f64) {
        // try every candidate threshold from the ID scores, keep the largest
        // admitting enough ID
        let need = (tpr * id.len() as f64).ceil() as usize;
        let mut best = f64::NEG_INFINITY;
        for &l in id {
            let admitted = id.iter().filter(|&&s| s >= l).count();
            if admitted >= need && l > best {
                best = l;
            }
        }
        let fp = ood.iter().filter(|&&s| s >= best).count();
        (fp as f64 / ood.len() as f64, best)
    }

    #[test]
    fn detector_boundary() {
        assert_eq!(detector(1.0, 0.5), Detection::In);
        assert_eq!(detector(0.5, 0.5), Detection::In);
        assert_eq!(detector(0.4, 0.5), Detection::Out);
    }

    #[test]
    fn fpr_examples() {
        let id: Vec<f64> = (1..=100).map(|x| x as f64).collect();
        let (fpr, lambda) = fpr_at_tpr(&id, &[5.5], 0.95).unwrap();
        assert_eq!(lambda, 6.0);
        assert_eq!(fpr, 0.0);

        let (fpr, _) = fpr_at_tpr(&[1.0, 2.0], &[3.0, 4.0], 0.95).unwrap();
        assert_eq!(fpr, 1.0);

        assert_eq!(fpr_at_tpr(&[1.0], &[], 0.95), Err(MetricsError::EmptyScores));
    }

    #[test]
    fn auroc_examples() {
        assert_eq!(auroc(&[1.0, 2.0, 3.0], &[0.0]).unwrap(), 1.0);
        assert_eq!(auroc(&[1.0, 3.0], &[2.0]).unwrap(), 0.5);
        assert_eq!(auroc(&[1.0, 1.0], &[1.0, 1.0]).unwrap(), 0.5);
    }

    #[test]
    fn auroc_matches_brute_force() {
        let mut rng = Rng::new(31);
        for _ in 0..200 {
            let n = 1 + rng.next_below(40);
            let m = 1 + rng.next_below(40);
            // quantized values force ties
            let id: Vec<f64> =
                (0..n).map(|_| (rng.next_f64() * 8.0).round()).collect();
            let ood: Vec<f64> =
                (0..m).map(|_| (rng.next_f64() * 8.0).round()).collect();
            let fast = auroc(&id, &ood).unwrap();
            let brute = auroc_brute(&id, &ood);
            assert!((fast - brute).abs() < 1e-12, "{id:?} {ood:?}");
        }
    }

    #[test]
    fn fpr_matches_brute_force() {
        let mut rng = Rng::new(32);
        for _ in 0..200 {
            let n = 1 + rng.next_below(50);
            let m = 1 + rng.next_below(50);
            let id: Vec<f64> =
                (0..n).map(|_| (rng.next_f64() * 10.0).round()).collect();
            let ood: Vec<f64> = (0..m).map(|_| rng.next_f64() * 10.0).collect();
            let (fpr, lambda) = fpr_at_tpr(&id, &ood, 0.95).unwrap();
            let (bf, bl) = fpr_brute(&id, &ood, 0.95);
            assert_eq!(lambda, bl);
            assert_eq!(fpr, bf);
        }
    }

    #[test]
    fn auroc_invariant_under_monotone_transform() {
        let mut rng = Rng::new(33);
        for _ in 0..50 {
            let id: Vec<f64> = (0..20).map(|_| rng.next_gaussian()).collect();
            let ood: Vec<f64> = (0..15).map(|_| rng.next_gaussian()).collect();
            let base = auroc(&id, &ood).unwrap();
            let te: Vec<f64> = id.iter().map(|x| x.exp()).collect();
            let to: Vec<f64> = ood.iter().map(|x| x.exp()).collect();
            assert!((auroc(&te, &to).unwrap() - base).abs() < 1e-12);
            let ta: Vec<f64> = id.iter().map(|x| 3.0 * x + 7.0).collect();
            let tb: Vec<f64> = ood.iter().map(|x| 3.0 * x + 7.0).collect();
            assert!((auroc(&ta, &tb).unwrap() - base).abs() < 1e-12);
        }
    }

    #[test]
    fn fpr_monotone_in_tpr() {
        let mut rng = Rng::new(34);
        let id: Vec<f64> = (0..200).map(|_| rng.next_gaussian()).collect();
        let ood: Vec<f64> = (0..200).map(|_| rng.next_gaussian() - 0.5).collect();
        let mut last = f64::INFINITY;
        for tpr in [0.99, 0.95, 0.9, 0.8, 0.5] {
            let (fpr, _) = fpr_at_tpr(&id, &ood, tpr).unwrap();
            assert!(fpr <= last);
            last = fpr;
        }
    }
}
