//! Gaussian random projection of perturbation vectors.
//!
//! The forward map is a `k × d` matrix with i.i.d. `N(0, 1/k)` entries, the
//! backward map its transpose. With that variance `E[PᵀP] = I`, so the
//! transpose is an unbiased reconstruction in expectation.
//!
//! Entries are drawn from `rand_distr::StandardNormal` (ziggurat method,
//! rand_distr 0.5) driven by a `ChaCha8Rng` seeded with `seed`, row by row.
//! The matrices are a pure function of `(d, k, seed)` for a given build;
//! other implementations should be compared statistically, not bitwise.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{param, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionPair {
    d: usize,
    k: usize,
    seed: u64,
    /// `k × d`, row-major.
    forward: Vec<f64>,
    /// `d × k`, row-major; the transpose of `forward`.
    backward: Vec<f64>,
}

impl ProjectionPair {
    pub fn d(&self) -> usize {
        self.d
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn forward(&self) -> &[f64] {
        &self.forward
    }

    pub fn backward(&self) -> &[f64] {
        &self.backward
    }

    /// Identity pair with `k = d`. Used by tests and by the unprojected path.
    pub fn identity(d: usize) -> Result<Self> {
        if d == 0 {
            return param("projection dimension must be positive");
        }
        let mut forward = vec![0.0; d * d];
        for i in 0..d {
            forward[i * d + i] = 1.0;
        }
        Self::from_forward(d, d, 0, forward)
    }

    /// Build a pair from an explicit `k × d` forward matrix.
    pub fn from_forward(d: usize, k: usize, seed: u64, forward: Vec<f64>) -> Result<Self> {
        if k == 0 || k > d {
            return param(format!("projection needs 1 <= k <= d, got k={k}, d={d}"));
        }
        if forward.len() != k * d {
            return param(format!(
                "forward matrix has {} entries, expected {}",
                forward.len(),
                k * d
            ));
        }
        let mut backward = vec![0.0; d * k];
        for r in 0..k {
            for c in 0..d {
                backward[c * k + r] = forward[r * d + c];
            }
        }
        Ok(Self {
            d,
            k,
            seed,
            forward,
            backward,
        })
    }

    /// Frobenius norm of the backward map; bounds its operator norm.
    pub fn backward_frobenius(&self) -> f64 {
        self.backward.iter().map(|x| x * x).sum::<f64>().sqrt()
    }
}

/// Draw a fresh `k × d` Gaussian projection from `seed`.
pub fn make_projection(d: usize, k: usize, seed: u64) -> Result<ProjectionPair> {
    if k == 0 || k > d {
        return param(format!("projection needs 1 <= k <= d, got k={k}, d={d}"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = (1.0 / k as f64).sqrt();
    let forward = (0..k * d)
        .map(|_| rng.sample::<f64, _>(StandardNormal) * scale)
        .collect();
    ProjectionPair::from_forward(d, k, seed, forward)
}

fn mat_vec(m: &[f64], rows: usize, cols: usize, v: &[f64]) -> Vec<f64> {
    (0..rows)
        .map(|r| {
            m[r * cols..(r + 1) * cols]
                .iter()
                .zip(v)
                .fold(0.0, |acc, (a, b)| acc + a * b)
        })
        .collect()
}

/// `forward · v`.
pub fn project_down(v: &[f64], p: &ProjectionPair) -> Result<Vec<f64>> {
    if v.len() != p.d {
        return param(format!("expected a length-{} vector, got {}", p.d, v.len()));
    }
    Ok(mat_vec(&p.forward, p.k, p.d, v))
}

/// `backward · u = forwardᵀ · u`.
pub fn project_up(u: &[f64], p: &ProjectionPair) -> Result<Vec<f64>> {
    if u.len() != p.k {
        return param(format!("expected a length-{} vector, got {}", p.k, u.len()));
    }
    Ok(mat_vec(&p.backward, p.d, p.k, u))
}
