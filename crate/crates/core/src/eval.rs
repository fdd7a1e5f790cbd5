//! Downstream utility: train a classifier on synthetic records and score it
//! on real ones.
//!
//! The classifier is multinomial logistic regression fitted from scratch:
//! features standardized with the training mean and standard deviation,
//! zero-initialized weights, mini-batch SGD with batch size 64, learning
//! rate 0.1, L2 penalty 1e-4 and 30 epochs; the batch order is shuffled from
//! the seed.
//!
//! AUROC is the trapezoidal area under the ROC curve over all distinct score
//! thresholds, which gives tied positive/negative pairs half credit. AUPRC is
//! average precision over the same thresholds. For more than two classes
//! both are macro-averaged one-vs-rest.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::TabularDataset;
use crate::error::{param, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Classifier {
    LogisticRegression,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub classifier: Classifier,
    pub auroc: f64,
    pub auprc: f64,
    pub accuracy: f64,
    pub train_size: usize,
    pub test_size: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub l2: f64,
}

impl Default for LrConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.1,
            epochs: 30,
            batch_size: 64,
            l2: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogisticRegression {
    classes: usize,
    mean: Vec<f64>,
    std: Vec<f64>,
    /// `classes × (features + 1)`, bias last.
    weights: Vec<Vec<f64>>,
}

impl LogisticRegression {
    pub fn fit(
        features: &[Vec<f64>],
        labels: &[usize],
        classes: usize,
        config: &LrConfig,
        seed: u64,
    ) -> Result<Self> {
        if features.is_empty() || features.len() != labels.len() {
            return param("training set must be non-empty with one label per row");
        }
        let distinct = {
            let mut seen = vec![false; classes];
            for &l in labels {
                if l >= classes {
                    return param(format!("label {l} outside 0..{classes}"));
                }
                seen[l] = true;
            }
            seen.iter().filter(|&&s| s).count()
        };
        if distinct < 2 {
            return Err(Error::Input("training set contains a single class".into()));
        }
        let dim = features[0].len();
        let n = features.len() as f64;
        let mean: Vec<f64> = (0..dim).map(|c| features.iter().map(|r| r[c]).sum::<f64>() / n).collect();
        let std: Vec<f64> = (0..dim)
            .map(|c| {
                let var = features.iter().map(|r| (r[c] - mean[c]).powi(2)).sum::<f64>() / n;
                if var > 0.0 { var.sqrt() } else { 1.0 }
            })
            .collect();
        let mut model = Self {
            classes,
            mean,
            std,
            weights: vec![vec![0.0; dim + 1]; classes],
        };
        let xs: Vec<Vec<f64>> = features.iter().map(|r| model.standardize(r)).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..xs.len()).collect();
        for _ in 0..config.epochs {
            order.shuffle(&mut rng);
            for chunk in order.chunks(config.batch_size.max(1)) {
                let mut grad = vec![vec![0.0; dim + 1]; classes];
                for &i in chunk {
                    let p = model.softmax(&xs[i]);
                    for k in 0..classes {
                        let err = p[k] - if labels[i] == k { 1.0 } else { 0.0 };
                        for (g, x) in grad[k].iter_mut().zip(&xs[i]) {
                            *g += err * x;
                        }
                        grad[k][dim] += err;
                    }
                }
                let scale = 1.0 / chunk.len() as f64;
                for k in 0..classes {
                    for j in 0..=dim {
                        let reg = if j < dim { config.l2 * model.weights[k][j] } else { 0.0 };
                        model.weights[k][j] -= config.learning_rate * (grad[k][j] * scale + reg);
                    }
                }
            }
        }
        Ok(model)
    }

    fn standardize(&self, row: &[f64]) -> Vec<f64> {
        row.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }

    fn softmax(&self, x: &[f64]) -> Vec<f64> {
        let dim = x.len();
        let logits: Vec<f64> = self
            .weights
            .iter()
            .map(|w| w[..dim].iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + w[dim])
            .collect();
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        exps.iter().map(|e| e / total).collect()
    }

    /// Class probabilities for a raw feature row.
    pub fn predict_proba(&self, row: &[f64]) -> Vec<f64> {
        self.softmax(&self.standardize(row))
    }
}

/// Distinct-score groups in descending order: `(positives, negatives)` per
/// group.
fn threshold_groups(scores: &[f64], positive: &[bool]) -> Vec<(u64, u64)> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut groups: Vec<(u64, u64)> = Vec::new();
    let mut last: Option<f64> = None;
    for i in idx {
        if last != Some(scores[i]) {
            groups.push((0, 0));
            last = Some(scores[i]);
        }
        let g = groups.last_mut().expect("pushed above");
        if positive[i] {
            g.0 += 1;
        } else {
            g.1 += 1;
        }
    }
    groups
}

/// Area under the ROC curve, `None` if either class is absent.
pub fn auroc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let groups = threshold_groups(scores, positive);
    let pos: u64 = groups.iter().map(|g| g.0).sum();
    let neg: u64 = groups.iter().map(|g| g.1).sum();
    if pos == 0 || neg == 0 {
        return None;
    }
    // Twice the trapezoid area in units of (1/pos)·(1/neg).
    let mut tp = 0u128;
    let mut area2 = 0u128;
    for &(p, n) in &groups {
        area2 += n as u128 * (2 * tp + p as u128);
        tp += p as u128;
    }
    Some(area2 as f64 / (2 * pos as u128 * neg as u128) as f64)
}

/// Average precision, `None` if there are no positives.
pub fn auprc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let groups = threshold_groups(scores, positive);
    let pos: u64 = groups.iter().map(|g| g.0).sum();
    if pos == 0 {
        return None;
    }
    let (mut tp, mut fp, mut weighted) = (0u64, 0u64, 0.0);
    for &(p, n) in &groups {
        tp += p;
        fp += n;
        if p > 0 {
            weighted += p as f64 * (tp as f64 / (tp + fp) as f64);
        }
    }
    Some((weighted / pos as f64).min(1.0))
}

fn check_labels(ds: &TabularDataset, what: &str) -> Result<Vec<usize>> {
    if ds.is_empty() {
        return param(format!("{what} dataset is empty"));
    }
    ds.labels()
        .map(<[usize]>::to_vec)
        .ok_or_else(|| Error::Input(format!("{what} dataset has no label column")))
}

/// Fit on `synthetic`, score on `real_test`. Both are compared in raw
/// (unscaled) feature space.
pub fn eval_downstream(
    synthetic: &TabularDataset,
    real_test: &TabularDataset,
    classifier: Classifier,
    seed: u64,
) -> Result<EvalReport> {
    if synthetic.columns() != real_test.columns() {
        return param("synthetic and real datasets have different columns");
    }
    let train_labels = check_labels(synthetic, "synthetic")?;
    let test_labels = check_labels(real_test, "real")?;
    let classes = synthetic.num_classes().max(real_test.num_classes()).max(2);
    let Classifier::LogisticRegression = classifier;
    let model = LogisticRegression::fit(
        &synthetic.raw_features(),
        &train_labels,
        classes,
        &LrConfig::default(),
        seed,
    )?;
    let probs: Vec<Vec<f64>> = real_test.raw_features().iter().map(|r| model.predict_proba(r)).collect();
    let correct = probs
        .iter()
        .zip(&test_labels)
        .filter(|(p, &l)| {
            let best = p
                .iter()
                .enumerate()
                .fold(0, |b, (k, v)| if *v > p[b] { k } else { b });
            best == l
        })
        .count();
    let accuracy = correct as f64 / test_labels.len() as f64;

    let one_vs_rest: Vec<usize> = if classes == 2 { vec![1] } else { (0..classes).collect() };
    let (mut roc_sum, mut pr_sum, mut used) = (0.0, 0.0, 0usize);
    for k in one_vs_rest {
        let scores: Vec<f64> = probs.iter().map(|p| p[k]).collect();
        let positive: Vec<bool> = test_labels.iter().map(|&l| l == k).collect();
        if let (Some(r), Some(p)) = (auroc(&scores, &positive), auprc(&scores, &positive)) {
            roc_sum += r;
            pr_sum += p;
            used += 1;
        }
    }
    if used == 0 {
        return Err(Error::Input("real test set needs both positive and negative examples".into()));
    }
    Ok(EvalReport {
        classifier,
        auroc: roc_sum / used as f64,
        auprc: pr_sum / used as f64,
        accuracy,
        train_size: synthetic.len(),
        test_size: real_test.len(),
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn pairwise_auroc(scores: &[f64], positive: &[bool]) -> f64 {
        let (mut twice, mut pairs) = (0u128, 0u128);
        for i in 0..scores.len() {
            for j in 0..scores.len() {
                if positive[i] && !positive[j] {
                    pairs += 1;
                    twice += if scores[i] > scores[j] {
                        2
                    } else if scores[i] == scores[j] {
                        1
                    } else {
                        0
                    };
                }
            }
        }
        twice as f64 / (2 * pairs) as f64
    }

    #[test]
    fn auroc_matches_pairwise_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..50 {
            // Coarse scores force plenty of ties.
            let scores: Vec<f64> = (0..200).map(|_| rng.random_range(0..20) as f64 / 20.0).collect();
            let positive: Vec<bool> = (0..200).map(|_| rng.random_bool(0.3)).collect();
            assert_eq!(auroc(&scores, &positive).unwrap(), pairwise_auroc(&scores, &positive));
        }
    }

    #[test]
    fn auroc_edge_cases() {
        assert_eq!(auroc(&[0.1, 0.9], &[false, true]), Some(1.0));
        assert_eq!(auroc(&[0.5, 0.5], &[false, true]), Some(0.5));
        assert_eq!(auroc(&[0.5, 0.5], &[true, true]), None);
        assert_eq!(auprc(&[0.1, 0.9], &[false, true]), Some(1.0));
        assert_eq!(auprc(&[0.1], &[false]), None);
    }

    fn dataset(rows: Vec<Vec<f64>>, labels: Vec<usize>) -> TabularDataset {
        TabularDataset::new(vec!["x".into(), "y".into()], rows, Some(labels), Some("label".into())).unwrap()
    }

    #[test]
    fn separable_data_scores_perfectly() {
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for i in 0..50 {
            let t = i as f64 / 50.0;
            rows.push(vec![-1.0 - t, -1.0 + t * 0.5]);
            labels.push(0);
            rows.push(vec![1.0 + t, 1.0 - t * 0.5]);
            labels.push(1);
        }
        let ds = dataset(rows, labels);
        let r = eval_downstream(&ds, &ds, Classifier::LogisticRegression, 0).unwrap();
        assert_eq!(r.auroc, 1.0);
        assert_eq!(r.accuracy, 1.0);
        assert!((0.0..=1.0).contains(&r.auprc));
        assert_eq!(r, eval_downstream(&ds, &ds, Classifier::LogisticRegression, 0).unwrap());
    }

    #[test]
    fn random_labels_give_chance_auroc() {
        for seed in 0..3 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut draw = |n: usize| {
                let rows: Vec<Vec<f64>> = (0..n)
                    .map(|_| vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)])
                    .collect();
                let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..2)).collect();
                dataset(rows, labels)
            };
            let train = draw(5000);
            let test = draw(20000);
            let r = eval_downstream(&train, &test, Classifier::LogisticRegression, seed).unwrap();
            assert!((r.auroc - 0.5).abs() < 0.02, "auroc {}", r.auroc);
        }
    }

    #[test]
    fn single_class_training_set_is_rejected() {
        let ds = dataset(vec![vec![0.0, 1.0], vec![1.0, 0.0]], vec![1, 1]);
        let test = dataset(vec![vec![0.0, 1.0], vec![1.0, 0.0]], vec![0, 1]);
        assert!(eval_downstream(&ds, &test, Classifier::LogisticRegression, 0).is_err());
    }

    #[test]
    fn schema_mismatch_is_rejected() {
        let a = dataset(vec![vec![0.0, 1.0], vec![1.0, 0.0]], vec![0, 1]);
        let b = TabularDataset::new(vec!["x".into(), "z".into()], vec![vec![0.0, 1.0]], Some(vec![0]), None).unwrap();
        assert!(eval_downstream(&a, &b, Classifier::LogisticRegression, 0).is_err());
    }
}
