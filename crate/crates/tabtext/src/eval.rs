//! ROC-AUC, bootstrap confidence intervals, and model comparison statistics.
//!
//! AUC uses the rank (Mann-Whitney) form: P(score+ > score-) + half the tie
//! probability. Confidence intervals are percentile bootstrap over resamples
//! of (score, label) pairs; each replicate's generator is derived from the
//! master seed by a stream counter, so replicate i is the same no matter how
//! many others run or in what order. Model comparison is a Welch two-sample
//! t-test over the two models' bootstrap replicate lists.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};
use thiserror::Error;

/// Consecutive single-class resamples tolerated before giving up.
const MAX_REDRAWS: usize = 100;

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("no samples")]
    Empty,
    #[error("{scores} scores but {labels} labels")]
    LengthMismatch { scores: usize, labels: usize },
    #[error("label {0} is not 0 or 1")]
    BadLabel(u8),
    #[error("labels contain only one class")]
    SingleClass,
    #[error("score at index {0} is not finite")]
    NonFiniteScore(usize),
    #[error("bootstrap needs at least 100 replicates, got {0}")]
    TooFewReplicates(usize),
    #[error("confidence level {0} outside (0, 1)")]
    BadLevel(f64),
    #[error("resampling produced a single class {MAX_REDRAWS} times in a row")]
    DegenerateResample,
    #[error("each sample needs at least 2 values")]
    TooFewValues,
    #[error("both samples have zero variance")]
    ZeroVariance,
}

/// One model's performance on a test set.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalResult {
    pub auc: f64,
    pub ci: (f64, f64),
    pub level: f64,
    /// (false positive rate, true positive rate) at every distinct threshold.
    pub roc: Vec<(f64, f64)>,
    pub n: usize,
    pub seed: u64,
    /// Bootstrap replicate AUCs, kept for between-model comparison tests.
    pub replicates: Vec<f64>,
}

/// Welch two-sample t-test outcome.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ComparisonResult {
    pub t: f64,
    pub p: f64,
    pub mean_diff: f64,
    pub df: f64,
}

/// Row for the metrics JSON emitted per evaluated model.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsJson {
    pub task: String,
    pub model: String,
    pub dataset_variant: String,
    pub auc: f64,
    pub ci: (f64, f64),
    #[serde(rename = "B")]
    pub b: usize,
    pub seed: u64,
}

fn validate(scores: &[f64], labels: &[u8]) -> Result<(usize, usize), EvalError> {
    if scores.len() != labels.len() {
        return Err(EvalError::LengthMismatch {
            scores: scores.len(),
            labels: labels.len(),
        });
    }
    if scores.is_empty() {
        return Err(EvalError::Empty);
    }
    for (i, &s) in scores.iter().enumerate() {
        if !s.is_finite() {
            return Err(EvalError::NonFiniteScore(i));
        }
    }
    let mut pos = 0usize;
    for &l in labels {
        match l {
            1 => pos += 1,
            0 => {}
            other => return Err(EvalError::BadLabel(other)),
        }
    }
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(EvalError::SingleClass);
    }
    Ok((pos, neg))
}

/// Probability a random positive outscores a random negative, ties counted
/// half, computed from midranks.
pub fn roc_auc(scores: &[f64], labels: &[u8]) -> Result<f64, EvalError> {
    let (pos, neg) = validate(scores, labels)?;
    let n = scores.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j < n && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let mid = (i + 1 + j) as f64 / 2.0;
        for &idx in &order[i..j] {
            ranks[idx] = mid;
        }
        i = j;
    }
    let pos_rank_sum: f64 = labels
        .iter()
        .zip(&ranks)
        .filter(|(&l, _)| l == 1)
        .map(|(_, &r)| r)
        .sum();
    let p = pos as f64;
    Ok((pos_rank_sum - p * (p + 1.0) / 2.0) / (p * neg as f64))
}

/// ROC points from (0,0) to (1,1) with one step per distinct score; the
/// trapezoidal area under them equals [`roc_auc`].
pub fn roc_curve(scores: &[f64], labels: &[u8]) -> Result<Vec<(f64, f64)>, EvalError> {
    let (pos, neg) = validate(scores, labels)?;
    let n = scores.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < n {
        let threshold = scores[order[i]];
        while i < n && scores[order[i]] == threshold {
            if labels[order[i]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push((fp as f64 / neg as f64, tp as f64 / pos as f64));
    }
    Ok(points)
}

/// Area under a piecewise-linear curve by the trapezoid rule.
pub fn trapezoid_area(points: &[(f64, f64)]) -> f64 {
    points
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[0].1 + w[1].1) / 2.0)
        .sum()
}

fn bootstrap_replicate<R: Rng>(
    scores: &[f64],
    labels: &[u8],
    rng: &mut R,
) -> Result<f64, EvalError> {
    let n = scores.len();
    let mut s = vec![0.0; n];
    let mut l = vec![0u8; n];
    for _ in 0..MAX_REDRAWS {
        for i in 0..n {
            let k = rng.random_range(0..n);
            s[i] = scores[k];
            l[i] = labels[k];
        }
        if l.contains(&0) && l.contains(&1) {
            return roc_auc(&s, &l);
        }
    }
    Err(EvalError::DegenerateResample)
}

/// Linear-interpolation empirical quantile of an ascending-sorted slice.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let frac = h - lo as f64;
    if lo + 1 < sorted.len() {
        sorted[lo] + frac * (sorted[lo + 1] - sorted[lo])
    } else {
        sorted[lo]
    }
}

/// Percentile bootstrap interval for AUC. Returns (lo, hi) and the replicate
/// AUCs. Replicate i draws from a generator seeded by (seed, stream = i).
pub fn bootstrap_ci(
    scores: &[f64],
    labels: &[u8],
    b: usize,
    level: f64,
    seed: u64,
) -> Result<((f64, f64), Vec<f64>), EvalError> {
    validate(scores, labels)?;
    if b < 100 {
        return Err(EvalError::TooFewReplicates(b));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(EvalError::BadLevel(level));
    }
    let mut replicates = Vec::with_capacity(b);
    for i in 0..b {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        replicates.push(bootstrap_replicate(scores, labels, &mut rng)?);
    }
    let mut sorted = replicates.clone();
    sorted.sort_by(f64::total_cmp);
    let alpha = (1.0 - level) / 2.0;
    let ci = (quantile(&sorted, alpha), quantile(&sorted, 1.0 - alpha));
    Ok((ci, replicates))
}

/// Point estimate, interval, curve, and replicates in one pass.
pub fn evaluate(
    scores: &[f64],
    labels: &[u8],
    b: usize,
    level: f64,
    seed: u64,
) -> Result<EvalResult, EvalError> {
    let auc = roc_auc(scores, labels)?;
    let roc = roc_curve(scores, labels)?;
    let (ci, replicates) = bootstrap_ci(scores, labels, b, level, seed)?;
    Ok(EvalResult {
        auc,
        ci,
        level,
        roc,
        n: scores.len(),
        seed,
        replicates,
    })
}

fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var)
}

/// Welch two-sample t-test with Welch-Satterthwaite degrees of freedom;
/// two-sided p.
pub fn two_sample_ttest(a: &[f64], b: &[f64]) -> Result<ComparisonResult, EvalError> {
    if a.len() < 2 || b.len() < 2 {
        return Err(EvalError::TooFewValues);
    }
    let (ma, va) = mean_var(a);
    let (mb, vb) = mean_var(b);
    let sea = va / a.len() as f64;
    let seb = vb / b.len() as f64;
    let se2 = sea + seb;
    if se2 == 0.0 {
        return Err(EvalError::ZeroVariance);
    }
    let mean_diff = ma - mb;
    let t = mean_diff / se2.sqrt();
    let df = se2 * se2
        / (sea * sea / (a.len() - 1) as f64 + seb * seb / (b.len() - 1) as f64);
    let dist = StudentsT::new(0.0, 1.0, df).expect("df is positive and finite");
    let p = (2.0 * (1.0 - dist.cdf(t.abs()))).clamp(f64::MIN_POSITIVE, 1.0);
    Ok(ComparisonResult { t, p, mean_diff, df })
}

/// "P<0.001" below the reporting threshold, otherwise "p=0.538" style.
pub fn format_p(p: f64) -> String {
    if p < 0.001 {
        "P<0.001".to_string()
    } else {
        format!("p={p:.3}")
    }
}

/// "0.864 (0.862, 0.866)" style cell for results tables.
pub fn format_auc_ci(auc: f64, ci: (f64, f64)) -> String {
    format!("{:.3} ({:.3}, {:.3})", auc, ci.0, ci.1)
}

/// Left-aligned plain-text table with a dash rule under the header.
pub fn render_aligned_table(headers: &[String], rows: &[Vec<String>]) -> String {
    let cols = headers.len();
    let mut widths: Vec<usize> = headers.iter().map(String::len).collect();
    for row in rows {
        assert_eq!(row.len(), cols, "ragged table row");
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.len());
        }
    }
    let mut out = String::new();
    let emit = |cells: &[String], out: &mut String| {
        for (i, (cell, w)) in cells.iter().zip(&widths).enumerate() {
            if i > 0 {
                out.push_str("  ");
            }
            out.push_str(cell);
            if i + 1 < cols {
                for _ in cell.len()..*w {
                    out.push(' ');
                }
            }
        }
        out.push('\n');
    };
    emit(headers, &mut out);
    let rule: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
    emit(&rule, &mut out);
    for row in rows {
        emit(row, &mut out);
    }
    out
}

/// ROC points as two-column CSV for external plotting.
pub fn write_roc_csv<W: std::io::Write>(
    w: W,
    points: &[(f64, f64)],
) -> Result<(), csv::Error> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["fpr", "tpr"])?;
    for &(fpr, tpr) in points {
        wtr.write_record(&[fpr.to_string(), tpr.to_string()])?;
    }
    wtr.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand_distr::{Distribution, Normal};
    use statrs::distribution::Normal as StatNormal;

    fn brute_force_auc(scores: &[f64], labels: &[u8]) -> f64 {
        let mut wins = 0.0;
        let mut pairs = 0.0;
        for (i, &si) in scores.iter().enumerate() {
            if labels[i] != 1 {
                continue;
            }
            for (j, &sj) in scores.iter().enumerate() {
                if labels[j] != 0 {
                    continue;
                }
                pairs += 1.0;
                if si > sj {
                    wins += 1.0;
                } else if si == sj {
                    wins += 0.5;
                }
            }
        }
        wins / pairs
    }

    #[test]
    fn worked_example_is_three_quarters() {
        let scores = [0.1, 0.4, 0.35, 0.8];
        let labels = [0, 0, 1, 1];
        assert_eq!(brute_force_auc(&scores, &labels), 0.75);
        assert!((roc_auc(&scores, &labels).unwrap() - 0.75).abs() < 1e-15);
    }

    #[test]
    fn separated_scores_give_one_and_ties_give_half() {
        assert_eq!(roc_auc(&[0.1, 0.2, 0.8, 0.9], &[0, 0, 1, 1]).unwrap(), 1.0);
        assert_eq!(roc_auc(&[0.5, 0.5, 0.5], &[0, 1, 0]).unwrap(), 0.5);
    }

    #[test]
    fn input_validation_errors() {
        assert_eq!(roc_auc(&[], &[]), Err(EvalError::Empty));
        assert_eq!(
            roc_auc(&[0.1, 0.2], &[1]),
            Err(EvalError::LengthMismatch { scores: 2, labels: 1 })
        );
        assert_eq!(roc_auc(&[0.1, 0.2], &[1, 1]), Err(EvalError::SingleClass));
        assert_eq!(roc_auc(&[0.1, 0.2], &[0, 2]), Err(EvalError::BadLabel(2)));
        assert_eq!(
            roc_auc(&[0.1, f64::NAN], &[0, 1]),
            Err(EvalError::NonFiniteScore(1))
        );
    }

    #[test]
    fn matches_brute_force_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..1000 {
            let n = rng.random_range(2..30);
            // Scores on a coarse grid so ties are common.
            let scores: Vec<f64> =
                (0..n).map(|_| rng.random_range(0..8) as f64 / 7.0).collect();
            let mut labels: Vec<u8> = (0..n).map(|_| rng.random_range(0..2)).collect();
            labels[0] = 0;
            labels[n - 1] = 1;
            let fast = roc_auc(&scores, &labels).unwrap();
            let slow = brute_force_auc(&scores, &labels);
            assert!((fast - slow).abs() <= 1e-12, "{fast} vs {slow}");
        }
    }

    #[test]
    fn curve_for_two_separated_samples() {
        let points = roc_curve(&[0.2, 0.9], &[0, 1]).unwrap();
        assert_eq!(points, vec![(0.0, 0.0), (0.0, 1.0), (1.0, 1.0)]);
    }

    #[test]
    fn curve_area_matches_auc_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..100 {
            let n = rng.random_range(2..60);
            let scores: Vec<f64> =
                (0..n).map(|_| rng.random_range(0..10) as f64 / 9.0).collect();
            let mut labels: Vec<u8> = (0..n).map(|_| rng.random_range(0..2)).collect();
            labels[0] = 0;
            labels[n - 1] = 1;
            let auc = roc_auc(&scores, &labels).unwrap();
            let area = trapezoid_area(&roc_curve(&scores, &labels).unwrap());
            assert!((auc - area).abs() <= 1e-12, "{auc} vs {area}");
        }
    }

    #[test]
    fn curve_is_monotone_from_origin_to_corner() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let n = rng.random_range(2..40);
            let scores: Vec<f64> = (0..n).map(|_| rng.random()).collect();
            let mut labels: Vec<u8> = (0..n).map(|_| rng.random_range(0..2)).collect();
            labels[0] = 0;
            labels[n - 1] = 1;
            let points = roc_curve(&scores, &labels).unwrap();
            assert_eq!(points[0], (0.0, 0.0));
            assert_eq!(points[points.len() - 1], (1.0, 1.0));
            for w in points.windows(2) {
                assert!(w[1].0 >= w[0].0 && w[1].1 >= w[0].1);
            }
        }
    }

    #[test]
    fn negated_scores_reflect_the_curve() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        // Distinct scores so the pairwise argument is exact.
        let scores: Vec<f64> = (0..20).map(|i| i as f64 + rng.random::<f64>() * 0.5).collect();
        let labels: Vec<u8> = (0..20).map(|i| (i % 3 == 0) as u8).collect();
        let negated: Vec<f64> = scores.iter().map(|s| -s).collect();
        let auc = roc_auc(&scores, &labels).unwrap();
        assert!((roc_auc(&negated, &labels).unwrap() - (1.0 - auc)).abs() < 1e-12);
        let forward = roc_curve(&scores, &labels).unwrap();
        let mut reflected: Vec<(f64, f64)> = roc_curve(&negated, &labels)
            .unwrap()
            .into_iter()
            .map(|(x, y)| (1.0 - x, 1.0 - y))
            .collect();
        reflected.reverse();
        for (a, b) in forward.iter().zip(&reflected) {
            assert!((a.0 - b.0).abs() < 1e-12 && (a.1 - b.1).abs() < 1e-12);
        }
    }

    #[test]
    fn bootstrap_is_deterministic_and_ordered() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let scores: Vec<f64> = (0..60).map(|_| rng.random()).collect();
        let labels: Vec<u8> = (0..60).map(|i| (i % 2) as u8).collect();
        let (ci1, reps1) = bootstrap_ci(&scores, &labels, 200, 0.95, 5).unwrap();
        let (ci2, reps2) = bootstrap_ci(&scores, &labels, 200, 0.95, 5).unwrap();
        assert_eq!(ci1, ci2);
        assert_eq!(reps1, reps2);
        assert_eq!(reps1.len(), 200);
        assert!(ci1.0 <= ci1.1);
        let (ci3, _) = bootstrap_ci(&scores, &labels, 200, 0.95, 6).unwrap();
        assert_ne!(ci1, ci3);
    }

    #[test]
    fn bootstrap_replicates_depend_only_on_their_stream_index() {
        let scores = [0.1, 0.9, 0.4, 0.6, 0.3, 0.7];
        let labels = [0, 1, 0, 1, 0, 1];
        let (_, reps) = bootstrap_ci(&scores, &labels, 150, 0.9, 77).unwrap();
        for i in [0usize, 64, 149] {
            let mut rng = ChaCha8Rng::seed_from_u64(77);
            rng.set_stream(i as u64);
            let alone = bootstrap_replicate(&scores, &labels, &mut rng).unwrap();
            assert_eq!(alone, reps[i]);
        }
    }

    #[test]
    fn degenerate_replicate_distribution_collapses_interval() {
        // Perfectly separated data: every two-class resample has AUC 1.
        let scores = [0.1, 0.2, 0.8, 0.9];
        let labels = [0, 0, 1, 1];
        let (ci, reps) = bootstrap_ci(&scores, &labels, 300, 0.95, 0).unwrap();
        assert!(reps.iter().all(|&r| r == 1.0));
        assert_eq!(ci, (1.0, 1.0));
        assert_eq!(roc_auc(&scores, &labels).unwrap(), 1.0);
    }

    #[test]
    fn single_class_resamples_are_redrawn_not_returned() {
        // n = 2 with one of each class: half of all raw resamples are
        // single-class and must be redrawn.
        let scores = [0.3, 0.8];
        let labels = [0, 1];
        let (_, reps) = bootstrap_ci(&scores, &labels, 400, 0.95, 9).unwrap();
        for r in reps {
            assert!(r == 0.0 || r == 0.5 || r == 1.0);
        }
    }

    #[test]
    fn redraw_gives_up_on_unresamplable_data() {
        let scores = [0.1, 0.5, 0.9];
        let labels = [1, 1, 1];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(
            bootstrap_replicate(&scores, &labels, &mut rng),
            Err(EvalError::DegenerateResample)
        );
    }

    #[test]
    fn bootstrap_parameter_validation() {
        let scores = [0.1, 0.9];
        let labels = [0, 1];
        assert_eq!(
            bootstrap_ci(&scores, &labels, 99, 0.95, 0),
            Err(EvalError::TooFewReplicates(99))
        );
        assert_eq!(
            bootstrap_ci(&scores, &labels, 100, 1.0, 0),
            Err(EvalError::BadLevel(1.0))
        );
    }

    #[test]
    fn bootstrap_coverage_is_near_nominal() {
        // Positives N(mu, 1), negatives N(0, 1): true AUC = Phi(mu / sqrt 2).
        let mu = 1.1902;
        let unit = StatNormal::new(0.0, 1.0).unwrap();
        let true_auc = unit.cdf(mu / 2f64.sqrt());
        let sampler = Normal::new(0.0, 1.0).unwrap();
        let trials = 500;
        let mut covered = 0;
        for trial in 0..trials {
            let mut rng = ChaCha8Rng::seed_from_u64(9000 + trial);
            let mut scores = Vec::with_capacity(200);
            let mut labels = Vec::with_capacity(200);
            for i in 0..200 {
                let pos = i < 100;
                let s: f64 = sampler.sample(&mut rng) + if pos { mu } else { 0.0 };
                scores.push(s);
                labels.push(pos as u8);
            }
            let (ci, _) = bootstrap_ci(&scores, &labels, 200, 0.95, trial).unwrap();
            if ci.0 <= true_auc && true_auc <= ci.1 {
                covered += 1;
            }
        }
        let rate = covered as f64 / trials as f64;
        assert!((0.90..=0.98).contains(&rate), "coverage {rate}");
    }

    #[test]
    fn identical_samples_give_t_zero_p_one() {
        let a = [0.8, 0.81, 0.79, 0.82];
        let r = two_sample_ttest(&a, &a).unwrap();
        assert_eq!(r.t, 0.0);
        assert_eq!(r.p, 1.0);
        assert_eq!(r.mean_diff, 0.0);
    }

    #[test]
    fn swapping_samples_negates_t_and_keeps_p() {
        let a = [0.84, 0.85, 0.86, 0.83];
        let b = [0.80, 0.82, 0.81, 0.79];
        let ab = two_sample_ttest(&a, &b).unwrap();
        let ba = two_sample_ttest(&b, &a).unwrap();
        assert_eq!(ab.t, -ba.t);
        assert_eq!(ab.p, ba.p);
        assert_eq!(ab.mean_diff, -ba.mean_diff);
        assert!(ab.p > 0.0 && ab.p <= 1.0);
    }

    #[test]
    fn welch_statistic_matches_hand_computation() {
        // a: mean 3, var 2.5; b: mean 6, var 10; se^2 = 0.5 + 2 = 2.5;
        // t = -3 / sqrt(2.5); df = 2.5^2 / (0.0625 + 1) = 100/17.
        let a = [1.0, 2.0, 3.0, 4.0, 5.0];
        let b = [2.0, 4.0, 6.0, 8.0, 10.0];
        let r = two_sample_ttest(&a, &b).unwrap();
        assert!((r.t - (-1.8973665961010275)).abs() < 1e-12);
        assert!((r.df - 100.0 / 17.0).abs() < 1e-12);
        assert!((r.p - 0.10753119493062718).abs() < 1e-9);
        assert_eq!(r.mean_diff, -3.0);
    }

    #[test]
    fn well_separated_samples_are_significant() {
        let sigma = 0.01;
        let noise = Normal::new(0.0, sigma).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a: Vec<f64> = (0..1000).map(|_| 0.85 + noise.sample(&mut rng)).collect();
        let b: Vec<f64> = (0..1000)
            .map(|_| 0.85 + 5.0 * sigma + noise.sample(&mut rng))
            .collect();
        let r = two_sample_ttest(&a, &b).unwrap();
        assert!(r.p < 0.001, "p = {}", r.p);
        assert!(r.p > 0.0);
        assert_eq!(format_p(r.p), "P<0.001");
    }

    #[test]
    fn ttest_input_validation() {
        assert_eq!(
            two_sample_ttest(&[1.0], &[1.0, 2.0]),
            Err(EvalError::TooFewValues)
        );
        assert_eq!(
            two_sample_ttest(&[2.0, 2.0], &[3.0, 3.0]),
            Err(EvalError::ZeroVariance)
        );
    }

    #[test]
    fn t_distribution_cdf_matches_cauchy_at_df_one() {
        let dist = StudentsT::new(0.0, 1.0, 1.0).unwrap();
        assert!((dist.cdf(1.0) - 0.75).abs() < 1e-12);
    }

    #[test]
    fn p_value_formatting_matches_reporting_style() {
        assert_eq!(format_p(0.0001), "P<0.001");
        assert_eq!(format_p(0.000999), "P<0.001");
        assert_eq!(format_p(0.538), "p=0.538");
        assert_eq!(format_p(1.0), "p=1.000");
    }

    #[test]
    fn auc_ci_cell_formatting() {
        assert_eq!(
            format_auc_ci(0.8642, (0.8617, 0.8663)),
            "0.864 (0.862, 0.866)"
        );
    }

    #[test]
    fn aligned_table_columns_line_up() {
        let headers = vec!["Task".to_string(), "Dataset".to_string(), "AUC".to_string()];
        let rows = vec![
            vec!["1".into(), "values_only".into(), "0.828 (0.825, 0.83)".into()],
            vec!["2".into(), "original_columns".into(), "0.889".into()],
        ];
        let text = render_aligned_table(&headers, &rows);
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 4);
        let col2 = lines[0].find("Dataset").unwrap();
        assert_eq!(lines[2].find("values_only").unwrap(), col2);
        assert_eq!(lines[3].find("original_columns").unwrap(), col2);
        assert!(lines[1].starts_with("----"));
    }

    #[test]
    fn roc_csv_round_trips() {
        let points = vec![(0.0, 0.0), (0.25, 0.75), (1.0, 1.0)];
        let mut buf = Vec::new();
        write_roc_csv(&mut buf, &points).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("fpr,tpr"));
        assert_eq!(lines.next(), Some("0,0"));
        assert_eq!(lines.next(), Some("0.25,0.75"));
        assert_eq!(lines.next(), Some("1,1"));
    }

    #[test]
    fn evaluate_packs_a_consistent_result() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let scores: Vec<f64> = (0..80).map(|_| rng.random()).collect();
        let labels: Vec<u8> = (0..80).map(|i| (i % 2) as u8).collect();
        let result = evaluate(&scores, &labels, 120, 0.9, 11).unwrap();
        assert_eq!(result.auc, roc_auc(&scores, &labels).unwrap());
        assert_eq!(result.n, 80);
        assert_eq!(result.seed, 11);
        assert_eq!(result.replicates.len(), 120);
        assert!(result.ci.0 <= result.ci.1);
        assert!((trapezoid_area(&result.roc) - result.auc).abs() <= 1e-12);
        let json = serde_json::to_string(&result).unwrap();
        let back: EvalResult = serde_json::from_str(&json).unwrap();
        assert_eq!(back.auc, result.auc);
    }

    #[test]
    fn metrics_json_uses_capital_b() {
        let m = MetricsJson {
            task: "t1".into(),
            model: "encoder".into(),
            dataset_variant: "values_only".into(),
            auc: 0.9,
            ci: (0.88, 0.92),
            b: 1000,
            seed: 3,
        };
        let json = serde_json::to_string(&m).unwrap();
        assert!(json.contains("\"B\":1000"));
    }

    proptest! {
        #[test]
        fn auc_stays_in_unit_interval_and_survives_monotone_maps(
            raw in proptest::collection::vec((0u8..6, 0u8..2), 2..40)
        ) {
            let mut scores: Vec<f64> = raw.iter().map(|&(s, _)| s as f64 / 5.0).collect();
            let mut labels: Vec<u8> = raw.iter().map(|&(_, l)| l).collect();
            let n = labels.len();
            labels[0] = 0;
            labels[n - 1] = 1;
            let auc = roc_auc(&scores, &labels).unwrap();
            prop_assert!((0.0..=1.0).contains(&auc));
            // Strictly increasing transforms preserve the ranking exactly.
            let mapped: Vec<f64> = scores.iter().map(|&s| (3.0 * s + 1.0).exp()).collect();
            prop_assert_eq!(roc_auc(&mapped, &labels).unwrap(), auc);
            scores.reverse();
            labels.reverse();
            prop_assert_eq!(roc_auc(&scores, &labels).unwrap(), auc);
        }
    }
}
