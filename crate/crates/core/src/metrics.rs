//! Classification metrics and the paired t-test used to compare runs.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Averaging {
    #[default]
    Macro,
    Micro,
}

pub fn accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    check_lengths(predictions.len(), labels.len())?;
    let hits = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / labels.len() as f64)
}

fn check_lengths(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::Protocol(format!("metric inputs differ in length ({a} vs {b})")));
    }
    if a == 0 {
        return Err(Error::Protocol("metric inputs are empty".into()));
    }
    Ok(())
}

/// F1 over `n_classes` classes. Macro averaging skips (with a warning) any
/// class absent from both predictions and labels; a class with
/// precision + recall = 0 scores 0. Micro F1 equals accuracy for
/// single-label data.
pub fn f1_score(predictions: &[usize], labels: &[usize], n_classes: usize, averaging: Averaging) -> Result<f64> {
    check_lengths(predictions.len(), labels.len())?;
    if averaging == Averaging::Micro {
        return accuracy(predictions, labels);
    }
    let mut scores = Vec::with_capacity(n_classes);
    for c in 0..n_classes {
        let tp = predictions.iter().zip(labels).filter(|(p, l)| **p == c && **l == c).count() as f64;
        let predicted = predictions.iter().filter(|p| **p == c).count() as f64;
        let actual = labels.iter().filter(|l| **l == c).count() as f64;
        if predicted == 0.0 && actual == 0.0 {
            warn!("f1: class {c} absent from predictions and labels; skipped");
            continue;
        }
        let precision = if predicted > 0.0 { tp / predicted } else { 0.0 };
        let recall = if actual > 0.0 { tp / actual } else { 0.0 };
        scores.push(if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        });
    }
    if scores.is_empty() {
        return Err(Error::Protocol("f1: no class present".into()));
    }
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

pub fn f1_macro(predictions: &[usize], labels: &[usize], n_classes: usize) -> Result<f64> {
    f1_score(predictions, labels, n_classes, Averaging::Macro)
}

/// Rank-based AUC of positives against negatives; ties count one half.
/// `None` when either side is empty.
pub fn binary_auc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let n_pos = positive.iter().filter(|p| **p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    // Walk groups of tied scores; each positive beats every negative below
    // its group and ties half of the negatives inside it.
    let mut wins = 0.0;
    let mut neg_below = 0usize;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let group = &order[i..j];
        let pos_in = group.iter().filter(|&&k| positive[k]).count();
        let neg_in = group.len() - pos_in;
        wins += pos_in as f64 * (neg_below as f64 + 0.5 * neg_in as f64);
        neg_below += neg_in;
        i = j;
    }
    Some(wins / (n_pos as f64 * n_neg as f64))
}

/// One-vs-rest AUC. `scores[i][c]` is sample `i`'s score for class `c`.
/// Macro averaging skips (with a warning) classes lacking positives or
/// negatives; micro averaging pools every (sample, class) pair.
pub fn auc(scores: &[Vec<f64>], labels: &[usize], n_classes: usize, averaging: Averaging) -> Result<f64> {
    check_lengths(scores.len(), labels.len())?;
    if let Some(bad) = scores.iter().position(|s| s.len() != n_classes) {
        return Err(Error::Protocol(format!(
            "auc: sample {bad} has {} scores for {n_classes} classes",
            scores[bad].len()
        )));
    }
    match averaging {
        Averaging::Macro => {
            let mut per_class = Vec::with_capacity(n_classes);
            let mut skipped = Vec::new();
            for c in 0..n_classes {
                let s: Vec<f64> = scores.iter().map(|row| row[c]).collect();
                let pos: Vec<bool> = labels.iter().map(|&l| l == c).collect();
                match binary_auc(&s, &pos) {
                    Some(a) => per_class.push(a),
                    None => {
                        warn!("auc: class {c} lacks positives or negatives; skipped");
                        skipped.push(c);
                    }
                }
            }
            if per_class.is_empty() {
                return Err(Error::Protocol(format!("auc: no evaluable class (skipped {skipped:?})")));
            }
            Ok(per_class.iter().sum::<f64>() / per_class.len() as f64)
        }
        Averaging::Micro => {
            let s: Vec<f64> = scores.iter().flatten().copied().collect();
            let pos: Vec<bool> = labels
                .iter()
                .flat_map(|&l| (0..n_classes).map(move |c| c == l))
                .collect();
            binary_auc(&s, &pos).ok_or_else(|| Error::Protocol("auc: micro pool is one-sided".into()))
        }
    }
}

pub fn auc_macro(scores: &[Vec<f64>], labels: &[usize], n_classes: usize) -> Result<f64> {
    auc(scores, labels, n_classes, Averaging::Macro)
}

/// Mean and sample standard deviation (n − 1 denominator; 0 for one value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    pub t: f64,
    pub df: usize,
    /// Two-sided p-value.
    pub p: f64,
    /// Differences have zero variance but nonzero mean: `t` is infinite and
    /// `p` is reported as 0 (the limit).
    pub degenerate: bool,
}

/// Two-sided paired t-test on `a[i] - b[i]` with `n - 1` degrees of freedom.
///
/// The p-value is `I_{df/(df+t²)}(df/2, 1/2)`, the regularized incomplete
/// beta function evaluated with a modified-Lentz continued fraction.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<TTest> {
    if a.len() != b.len() {
        return Err(Error::Protocol(format!("t-test: lengths differ ({} vs {})", a.len(), b.len())));
    }
    if a.len() < 2 {
        return Err(Error::Protocol("t-test: need at least two pairs".into()));
    }
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let n = diffs.len();
    let df = n - 1;
    let (mean, sd) = mean_std(&diffs);
    if sd == 0.0 {
        return Ok(if mean == 0.0 {
            TTest {
                t: 0.0,
                df,
                p: 1.0,
                degenerate: false,
            }
        } else {
            TTest {
                t: mean.signum() * f64::INFINITY,
                df,
                p: 0.0,
                degenerate: true,
            }
        });
    }
    let t = mean / (sd / (n as f64).sqrt());
    let nu = df as f64;
    let p = regularized_incomplete_beta(nu / (nu + t * t), nu / 2.0, 0.5);
    Ok(TTest {
        t,
        df,
        p: p.clamp(0.0, 1.0),
        degenerate: false,
    })
}

fn ln_gamma(x: f64) -> f64 {
    // Lanczos approximation, g = 7, n = 9.
    const COEF: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = COEF[0];
    let t = x + 7.5;
    for (i, c) in COEF.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

/// `I_x(a, b)`.
pub fn regularized_incomplete_beta(x: f64, a: f64, b: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    let front = ln_front.exp();
    // The continued fraction converges fast for x < (a + 1) / (a + b + 2).
    if x < (a + 1.0) / (a + b + 2.0) {
        front * beta_continued_fraction(x, a, b) / a
    } else {
        1.0 - front * beta_continued_fraction(1.0 - x, b, a) / b
    }
}

fn beta_continued_fraction(x: f64, a: f64, b: f64) -> f64 {
    const TINY: f64 = 1e-300;
    const EPS: f64 = 1e-15;
    let mut c = 1.0;
    let mut d = 1.0 - (a + b) * x / (a + 1.0);
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=300 {
        let m = m as f64;
        let m2 = 2.0 * m;
        let even = m * (b - m) * x / ((a + m2 - 1.0) * (a + m2));
        d = 1.0 + even * d;
        d = if d.abs() < TINY { TINY } else { d };
        c = 1.0 + even / c;
        c = if c.abs() < TINY { TINY } else { c };
        d = 1.0 / d;
        h *= d * c;
        let odd = -(a + m) * (a + b + m) * x / ((a + m2) * (a + m2 + 1.0));
        d = 1.0 + odd * d;
        d = if d.abs() < TINY { TINY } else { d };
        c = 1.0 + odd / c;
        c = if c.abs() < TINY { TINY } else { c };
        d = 1.0 / d;
        let delta = d * c;
        h *= delta;
        if (delta - 1.0).abs() < EPS {
            break;
        }
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use statrs::distribution::{ContinuousCDF, StudentsT};

    fn brute_auc(scores: &[f64], pos: &[bool]) -> f64 {
        let mut wins = 0.0;
        let mut pairs = 0.0;
        for i in 0..scores.len() {
            for j in 0..scores.len() {
                if pos[i] && !pos[j] {
                    pairs += 1.0;
                    wins += if scores[i] > scores[j] {
                        1.0
                    } else if scores[i] == scores[j] {
                        0.5
                    } else {
                        0.0
                    };
                }
            }
        }
        wins / pairs
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax(&[0.2, 1.8]), 1);
        assert_eq!(argmax(&[0.5, 0.5]), 0);
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
    }

    #[test]
    fn auc_examples() {
        let labels = [0, 0, 1, 1];
        let perfect: Vec<Vec<f64>> = [0.1, 0.2, 0.8, 0.9].iter().map(|&s| vec![1.0 - s, s]).collect();
        assert_eq!(auc_macro(&perfect, &labels, 2).unwrap(), 1.0);
        let flat = vec![vec![0.5, 0.5]; 4];
        assert_eq!(auc_macro(&flat, &labels, 2).unwrap(), 0.5);
        let worked: Vec<Vec<f64>> = [0.1, 0.4, 0.35, 0.8].iter().map(|&s| vec![1.0 - s, s]).collect();
        assert_eq!(binary_auc(&[0.1, 0.4, 0.35, 0.8], &[false, false, true, true]), Some(0.75));
        assert_eq!(auc_macro(&worked, &labels, 2).unwrap(), 0.75);
    }

    #[test]
    fn auc_skips_one_sided_class() {
        // class 2 never appears: skipped, the other two are averaged
        let scores = vec![vec![0.9, 0.1, 0.0], vec![0.2, 0.8, 0.0]];
        assert_eq!(auc_macro(&scores, &[0, 1], 3).unwrap(), 1.0);
        let single = vec![vec![1.0]];
        assert!(auc_macro(&single, &[0], 1).is_err());
    }

    #[test]
    fn auc_matches_pairwise_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..1000 {
            let n = rng.random_range(2..40);
            let scores: Vec<f64> = (0..n).map(|_| (rng.random_range(0..8) as f64) / 8.0).collect();
            let mut pos: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
            pos[0] = true;
            pos[1] = false;
            assert_eq!(binary_auc(&scores, &pos).unwrap(), brute_auc(&scores, &pos));
        }
    }

    #[test]
    fn f1_and_accuracy_examples() {
        let labels = [0, 1, 2, 1];
        assert_eq!(accuracy(&labels, &labels).unwrap(), 1.0);
        assert_eq!(f1_macro(&labels, &labels, 3).unwrap(), 1.0);

        let labels = [0, 0, 1, 1];
        let preds = [0, 0, 0, 0];
        assert_eq!(accuracy(&preds, &labels).unwrap(), 0.5);
        assert!((f1_macro(&preds, &labels, 2).unwrap() - 1.0 / 3.0).abs() < 1e-15);

        // class 2 absent from both sides: averaged over classes 0 and 1 only
        assert!((f1_macro(&preds, &labels, 3).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert!(accuracy(&[], &[]).is_err());
        assert!(accuracy(&[0], &[0, 1]).is_err());
        assert_eq!(f1_score(&preds, &labels, 2, Averaging::Micro).unwrap(), 0.5);
    }

    #[test]
    fn f1_matches_confusion_matrix_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..500 {
            let c = rng.random_range(2..5);
            let n = rng.random_range(1..30);
            let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
            let preds: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
            let mut cm = vec![vec![0.0f64; c]; c];
            for (p, l) in preds.iter().zip(&labels) {
                cm[*l][*p] += 1.0;
            }
            let mut f1s = Vec::new();
            for k in 0..c {
                let tp = cm[k][k];
                let fp: f64 = (0..c).filter(|&r| r != k).map(|r| cm[r][k]).sum();
                let fn_: f64 = (0..c).filter(|&q| q != k).map(|q| cm[k][q]).sum();
                if tp + fp + fn_ == 0.0 {
                    continue;
                }
                f1s.push(2.0 * tp / (2.0 * tp + fp + fn_));
            }
            let oracle = f1s.iter().sum::<f64>() / f1s.len() as f64;
            let got = f1_macro(&preds, &labels, c).unwrap();
            assert!((got - oracle).abs() < 1e-12, "{got} vs {oracle}");
            let acc = (0..c).map(|k| cm[k][k]).sum::<f64>() / n as f64;
            assert_eq!(accuracy(&preds, &labels).unwrap(), acc);
        }
    }

    #[test]
    fn t_test_examples() {
        let a = [0.7, 0.8, 0.75];
        let r = paired_t_test(&a, &a).unwrap();
        assert_eq!(r.p, 1.0);
        assert!(!r.degenerate);

        let b = [1.0, 1.0, 1.0, 1.0, 1.0];
        let z = [0.0; 5];
        let r = paired_t_test(&b, &z).unwrap();
        assert!(r.degenerate);
        assert!(r.p < 1e-12);

        // Frozen from scipy.stats.ttest_rel on these differences:
        // t = 1.772810520855837, p = 0.15094405366901748
        let d = [0.5, -0.2, 0.3, 0.1, 0.4];
        let r = paired_t_test(&d, &z).unwrap();
        assert!((r.t - 1.772810520855837).abs() < 1e-12);
        assert!((r.p - 0.15094405366901748).abs() < 1e-3);
        assert!(paired_t_test(&[1.0], &[0.0]).is_err());
        assert!(paired_t_test(&[1.0, 2.0], &[0.0]).is_err());
    }

    #[test]
    fn t_test_agrees_with_students_t_cdf() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..200 {
            let n = rng.random_range(2..12);
            let a: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let b: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let r = paired_t_test(&a, &b).unwrap();
            let dist = StudentsT::new(0.0, 1.0, (n - 1) as f64).unwrap();
            let oracle = 2.0 * (1.0 - dist.cdf(r.t.abs()));
            assert!((r.p - oracle).abs() < 1e-9, "n={n} t={} {} vs {oracle}", r.t, r.p);
        }
    }

    #[test]
    fn mean_std_conventions() {
        assert_eq!(mean_std(&[0.4]), (0.4, 0.0));
        let (m, s) = mean_std(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert!((s - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
    }
}
