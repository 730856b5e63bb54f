//! Binary classification metrics and stratified cross-validation folds.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{param_err, Error, Result};
use crate::types::Label;

pub const DECISION_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub auc: f64,
    pub acc: f64,
    pub sen: f64,
    pub spe: f64,
    pub f1: f64,
}

impl Metrics {
    pub fn as_array(&self) -> [f64; 5] {
        [self.auc, self.acc, self.sen, self.spe, self.f1]
    }

    fn from_array(a: [f64; 5]) -> Self {
        Self {
            auc: a[0],
            acc: a[1],
            sen: a[2],
            spe: a[3],
            f1: a[4],
        }
    }
}

/// Probability that a random positive outranks a random negative, ties
/// counting one half. Computed from mid-ranks in `O(n log n)`.
pub fn auc(scores: &[f64], positive: &[bool]) -> Result<f64> {
    if scores.len() != positive.len() {
        return Err(Error::Metric(format!("{} scores for {} labels", scores.len(), positive.len())));
    }
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Metric("AUC undefined: labels contain a single class".into()));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Metric("non-finite score".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // Ranks are 1-based; a tie group shares the mean rank.
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum_pos += mid * order[i..=j].iter().filter(|&&k| positive[k]).count() as f64;
        i = j + 1;
    }
    let (np, nn) = (n_pos as f64, n_neg as f64);
    Ok((rank_sum_pos - np * (np + 1.0) / 2.0) / (np * nn))
}

/// AUC plus confusion-matrix metrics at `score > threshold`.
pub fn evaluate(scores: &[f64], positive: &[bool]) -> Result<Metrics> {
    let auc = auc(scores, positive)?;
    let (mut tp, mut tn, mut fp, mut fnn) = (0usize, 0usize, 0usize, 0usize);
    for (&s, &p) in scores.iter().zip(positive) {
        match (s > DECISION_THRESHOLD, p) {
            (true, true) => tp += 1,
            (false, false) => tn += 1,
            (true, false) => fp += 1,
            (false, true) => fnn += 1,
        }
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let sen = ratio(tp, tp + fnn);
    let prec = ratio(tp, tp + fp);
    let f1 = if prec + sen == 0.0 { 0.0 } else { 2.0 * prec * sen / (prec + sen) };
    Ok(Metrics {
        auc,
        acc: ratio(tp + tn, scores.len()),
        sen,
        spe: ratio(tn, tn + fp),
        f1,
    })
}

/// Per-fold metrics with their mean and population standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub folds: Vec<Metrics>,
    pub mean: Metrics,
    pub std: Metrics,
}

impl MetricsReport {
    pub fn from_folds(folds: Vec<Metrics>) -> Result<Self> {
        if folds.is_empty() {
            return Err(Error::Metric("no folds to summarise".into()));
        }
        let n = folds.len() as f64;
        let mut mean = [0.0; 5];
        for m in &folds {
            for (acc, v) in mean.iter_mut().zip(m.as_array()) {
                *acc += v / n;
            }
        }
        let mut var = [0.0; 5];
        for m in &folds {
            for ((acc, v), mu) in var.iter_mut().zip(m.as_array()).zip(mean) {
                *acc += (v - mu) * (v - mu) / n;
            }
        }
        Ok(Self {
            folds,
            mean: Metrics::from_array(mean),
            std: Metrics::from_array(var.map(f64::sqrt)),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSplit {
    pub fold_id: usize,
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

/// Stratified k-fold splits. Items are dealt round-robin into `n_folds`
/// buckets per class after a seeded shuffle; fold `f` tests on bucket `f`,
/// validates on bucket `f + 1` and trains on the rest.
pub fn make_folds(items: &[(String, Label)], n_folds: usize, seed: u64) -> Result<Vec<FoldSplit>> {
    if n_folds < 3 {
        return Err(param_err!("need at least 3 folds, got {n_folds}"));
    }
    if items.len() < n_folds {
        return Err(Error::Dataset(format!("{} ids cannot fill {n_folds} folds", items.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut buckets: Vec<Vec<String>> = vec![Vec::new(); n_folds];
    let mut next = 0usize;
    for label in [Label::Positive, Label::Negative] {
        let mut ids: Vec<&String> = items.iter().filter(|(_, l)| *l == label).map(|(id, _)| id).collect();
        ids.shuffle(&mut rng);
        for id in ids {
            buckets[next % n_folds].push(id.clone());
            next += 1;
        }
    }
    Ok((0..n_folds)
        .map(|f| {
            let val_b = (f + 1) % n_folds;
            let train = (0..n_folds)
                .filter(|&b| b != f && b != val_b)
                .flat_map(|b| buckets[b].iter().cloned())
                .collect();
            FoldSplit {
                fold_id: f,
                train,
                val: buckets[val_b].clone(),
                test: buckets[f].clone(),
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;
    use std::collections::BTreeSet;

    fn oracle_auc(scores: &[f64], pos: &[bool]) -> f64 {
        let (mut num, mut den) = (0.0, 0.0);
        for i in 0..scores.len() {
            for j in 0..scores.len() {
                if pos[i] && !pos[j] {
                    den += 1.0;
                    num += if scores[i] > scores[j] {
                        1.0
                    } else if scores[i] == scores[j] {
                        0.5
                    } else {
                        0.0
                    };
                }
            }
        }
        num / den
    }

    #[test]
    fn metric_examples() {
        let m = evaluate(&[0.9, 0.1], &[true, false]).unwrap();
        assert_eq!(m.as_array(), [1.0; 5]);
        assert_eq!(auc(&[0.3; 6], &[true, false, true, false, false, true]).unwrap(), 0.5);
        assert_eq!(auc(&[0.8, 0.4, 0.6, 0.2], &[true, true, false, false]).unwrap(), 0.75);
        assert!(evaluate(&[0.1, 0.2], &[true, true]).is_err());
        assert!(evaluate(&[0.1], &[true, false]).is_err());
    }

    #[test]
    fn evaluate_matches_brute_force_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let n = rng.gen_range(2..40);
            let mut pos: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.5)).collect();
            pos[0] = true;
            pos[1] = false;
            // Coarse grid so ties are common.
            let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(0..11) as f64 / 10.0).collect();
            let m = evaluate(&scores, &pos).unwrap();
            assert!((m.auc - oracle_auc(&scores, &pos)).abs() < 1e-12);
            let pred: Vec<bool> = scores.iter().map(|&s| s > 0.5).collect();
            let count = |p: bool, t: bool| pred.iter().zip(&pos).filter(|(&a, &b)| a == p && b == t).count() as f64;
            let (tp, tn, fp, fnn) = (count(true, true), count(false, false), count(true, false), count(false, true));
            assert!((m.acc - (tp + tn) / n as f64).abs() < 1e-12);
            assert!((m.sen - tp / (tp + fnn)).abs() < 1e-12);
            assert!((m.spe - tn / (tn + fp)).abs() < 1e-12);
            let prec = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
            let sen = tp / (tp + fnn);
            let f1 = if prec + sen > 0.0 { 2.0 * prec * sen / (prec + sen) } else { 0.0 };
            assert!((m.f1 - f1).abs() < 1e-12);
        }
    }

    #[test]
    fn report_mean_and_std() {
        let a = Metrics::from_array([0.8; 5]);
        let b = Metrics::from_array([1.0; 5]);
        let r = MetricsReport::from_folds(vec![a, b]).unwrap();
        assert!((r.mean.auc - 0.9).abs() < 1e-12);
        assert!((r.std.f1 - 0.1).abs() < 1e-12);
    }

    fn ids(n_pos: usize, n_neg: usize) -> Vec<(String, Label)> {
        (0..n_pos)
            .map(|i| (format!("p{i}"), Label::Positive))
            .chain((0..n_neg).map(|i| (format!("n{i}"), Label::Negative)))
            .collect()
    }

    #[test]
    fn folds_sizes_and_stratification() {
        let items = ids(50, 50);
        let folds = make_folds(&items, 5, 0).unwrap();
        assert_eq!(folds.len(), 5);
        let mut tests = BTreeSet::new();
        for f in &folds {
            assert_eq!((f.train.len(), f.val.len(), f.test.len()), (60, 20, 20));
            let pos = f.test.iter().filter(|id| id.starts_with('p')).count();
            assert!((9..=11).contains(&pos));
            for id in &f.test {
                assert!(tests.insert(id.clone()), "{id} tested twice");
            }
        }
        assert_eq!(tests.len(), 100);
        assert_eq!(make_folds(&items, 5, 0).unwrap(), folds);
        assert!(make_folds(&ids(2, 2), 5, 0).is_err());
    }

    proptest! {
        #[test]
        fn folds_partition(n_pos in 0usize..30, n_neg in 0usize..30, seed in 0u64..100) {
            prop_assume!(n_pos + n_neg >= 5);
            let items = ids(n_pos, n_neg);
            let all: BTreeSet<String> = items.iter().map(|(i, _)| i.clone()).collect();
            for f in make_folds(&items, 5, seed).unwrap() {
                let tr: BTreeSet<_> = f.train.iter().cloned().collect();
                let va: BTreeSet<_> = f.val.iter().cloned().collect();
                let te: BTreeSet<_> = f.test.iter().cloned().collect();
                prop_assert!(tr.is_disjoint(&va) && tr.is_disjoint(&te) && va.is_disjoint(&te));
                let union: BTreeSet<_> = tr.union(&va).chain(te.iter()).cloned().collect();
                prop_assert_eq!(&union, &all);
                let n = items.len() as f64;
                prop_assert!((te.len() as f64 - n / 5.0).abs() <= 1.0);
                prop_assert!((va.len() as f64 - n / 5.0).abs() <= 1.0);
            }
        }
    }
}
