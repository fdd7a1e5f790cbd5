#![allow(dead_code)]

use pategen::data::TabularDataset;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Cluster centers of the two-class toy set, per class.
pub const TOY_MEANS: [[f64; 2]; 2] = [[-1.0, -1.0], [1.0, 1.0]];
pub const TOY_SD: f64 = 0.5;

/// Two isotropic Gaussian clusters, labels drawn with probability 1/2.
/// Unscaled.
pub fn two_gaussians(n: usize, seed: u64) -> TabularDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let c: usize = rng.random_range(0..2);
        let m = TOY_MEANS[c];
        rows.push(vec![
            m[0] + TOY_SD * rng.sample::<f64, _>(StandardNormal),
            m[1] + TOY_SD * rng.sample::<f64, _>(StandardNormal),
        ]);
        labels.push(c);
    }
    TabularDataset::new(vec!["x1".into(), "x2".into()], rows, Some(labels), Some("label".into())).unwrap()
}

/// Per-class mean of raw features.
pub fn class_means(features: &[Vec<f64>], labels: &[usize], classes: usize) -> Vec<Vec<f64>> {
    (0..classes)
        .map(|c| {
            let rows: Vec<&Vec<f64>> = features.iter().zip(labels).filter(|(_, &l)| l == c).map(|(r, _)| r).collect();
            let n = rows.len().max(1) as f64;
            (0..features[0].len()).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n).collect()
        })
        .collect()
}
