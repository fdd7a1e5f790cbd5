//! Private aggregation of teacher perturbations.
//!
//! Each teacher's perturbation vector is projected to `k` dimensions, every
//! component is mapped to one of `B` equal bins over `[-c, c]`, and the
//! teachers vote per dimension. A Confident-GNMax query per dimension either
//! releases the noisy plurality bin or rejects (⊥). Winning bin midpoints
//! (zero for rejected dimensions) are projected back to `d` dimensions.
//!
//! Privacy charging per call: one ledger entry covering the `k` threshold
//! checks, plus one GNMax entry for every dimension that passed.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::accountant::{LedgerEntry, PrivacyLedger, TopCounts};
use crate::error::{param, Error, Result};
use crate::projection::{project_down, project_up, ProjectionPair};

/// `B` equal-width bins over `[-clip, clip]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BinGrid {
    clip: f64,
    num_bins: usize,
}

impl BinGrid {
    pub fn new(clip: f64, num_bins: usize) -> Result<Self> {
        if !(clip > 0.0) || !clip.is_finite() {
            return param(format!("clip bound must be positive, got {clip}"));
        }
        if num_bins < 2 {
            return param(format!("need at least 2 bins, got {num_bins}"));
        }
        Ok(Self { clip, num_bins })
    }

    pub fn clip(&self) -> f64 {
        self.clip
    }

    pub fn num_bins(&self) -> usize {
        self.num_bins
    }

    pub fn width(&self) -> f64 {
        2.0 * self.clip / self.num_bins as f64
    }

    pub fn midpoint(&self, bin: usize) -> f64 {
        -self.clip + (bin as f64 + 0.5) * self.width()
    }

    pub fn midpoints(&self) -> Vec<f64> {
        (0..self.num_bins).map(|j| self.midpoint(j)).collect()
    }

    /// Bin `j` covers `[-c + j·w, -c + (j+1)·w)`; values are clamped to
    /// `[-c, c]` first and `c` itself lands in the top bin.
    pub fn bin_of(&self, value: f64) -> Result<usize> {
        if !value.is_finite() {
            return Err(Error::Input(format!("cannot discretize non-finite value {value}")));
        }
        let v = value.clamp(-self.clip, self.clip);
        let t = (v / self.clip + 1.0) * self.num_bins as f64 / 2.0;
        Ok((t.floor() as usize).min(self.num_bins - 1))
    }
}

pub fn discretize(vector: &[f64], grid: &BinGrid) -> Result<Vec<usize>> {
    vector.iter().map(|&v| grid.bin_of(v)).collect()
}

/// Per-dimension vote histogram, `dims × bins`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VoteTally {
    dims: usize,
    bins: usize,
    voters: u64,
    counts: Vec<u64>,
}

impl VoteTally {
    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn voters(&self) -> u64 {
        self.voters
    }

    pub fn row(&self, dim: usize) -> &[u64] {
        &self.counts[dim * self.bins..(dim + 1) * self.bins]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[u64]> {
        self.counts.chunks(self.bins.max(1))
    }

    /// CSV dump: header `bin_0,…`, one row per dimension.
    pub fn to_csv(&self) -> String {
        let mut out = (0..self.bins)
            .map(|b| format!("bin_{b}"))
            .collect::<Vec<_>>()
            .join(",");
        out.push('\n');
        for row in self.rows().take(self.dims) {
            let line = row.iter().map(u64::to_string).collect::<Vec<_>>().join(",");
            out.push_str(&line);
            out.push('\n');
        }
        out
    }
}

/// Count votes: `votes[t][d]` is teacher `t`'s bin for dimension `d`.
pub fn tally(votes: &[Vec<usize>], dims: usize, bins: usize) -> Result<VoteTally> {
    let mut counts = vec![0u64; dims * bins];
    for (t, teacher) in votes.iter().enumerate() {
        if teacher.len() != dims {
            return Err(Error::Internal(format!(
                "teacher {t} voted on {} dimensions, expected {dims}",
                teacher.len()
            )));
        }
        for (d, &b) in teacher.iter().enumerate() {
            if b >= bins {
                return Err(Error::Internal(format!(
                    "teacher {t} voted for bin {b} of {bins} in dimension {d}"
                )));
            }
            counts[d * bins + b] += 1;
        }
    }
    Ok(VoteTally {
        dims,
        bins,
        voters: votes.len() as u64,
        counts,
    })
}

/// Noise and threshold settings for Confident-GNMax.
///
/// `threshold` is a fraction of the teacher count; the absolute threshold is
/// `⌈threshold · n⌉`. A noise scale of zero disables that noise draw (test
/// path); such queries are charged infinite privacy cost.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GnmaxParams {
    pub threshold: f64,
    pub sigma1: f64,
    pub sigma2: f64,
}

impl GnmaxParams {
    pub fn new(threshold: f64, sigma1: f64, sigma2: f64) -> Result<Self> {
        let p = Self {
            threshold,
            sigma1,
            sigma2,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn noiseless(threshold: f64) -> Result<Self> {
        Self::new(threshold, 0.0, 0.0)
    }

    fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.threshold) {
            return param(format!("threshold fraction must lie in [0, 1], got {}", self.threshold));
        }
        for s in [self.sigma1, self.sigma2] {
            if !(s >= 0.0) || !s.is_finite() {
                return param(format!("noise scale must be finite and >= 0, got {s}"));
            }
        }
        Ok(())
    }

    pub fn threshold_abs(&self, teachers: usize) -> f64 {
        (self.threshold * teachers as f64).ceil()
    }
}

/// Noise-free vote statistics for one dimension.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VoteRecord {
    pub top: TopCounts,
    pub passed: bool,
}

fn gaussian<R: Rng + ?Sized>(rng: &mut R, sigma: f64) -> f64 {
    if sigma == 0.0 {
        0.0
    } else {
        sigma * rng.sample::<f64, _>(StandardNormal)
    }
}

/// Confident-GNMax on one histogram row.
///
/// One draw `N(0, σ1²)` is added to the top count and compared with
/// `threshold_abs`; on success every count gets an independent `N(0, σ2²)`
/// draw and the noisy argmax is returned (ties go to the lowest bin).
/// Returns `None` (⊥) when the check fails.
pub fn confident_gnmax<R: Rng + ?Sized>(
    row: &[u64],
    threshold_abs: f64,
    sigma1: f64,
    sigma2: f64,
    rng: &mut R,
) -> Result<(Option<usize>, VoteRecord)> {
    if !(threshold_abs >= 0.0) {
        return param(format!("threshold must be >= 0, got {threshold_abs}"));
    }
    for s in [sigma1, sigma2] {
        if !(s >= 0.0) || !s.is_finite() {
            return param(format!("noise scale must be finite and >= 0, got {s}"));
        }
    }
    if row.is_empty() {
        return param("vote row must have at least one bin");
    }
    let top = TopCounts::of(row);
    let passed = top.n1 as f64 + gaussian(rng, sigma1) >= threshold_abs;
    if !passed {
        return Ok((None, VoteRecord { top, passed }));
    }
    let mut best = 0;
    let mut best_score = f64::NEG_INFINITY;
    for (j, &c) in row.iter().enumerate() {
        let score = c as f64 + gaussian(rng, sigma2);
        if score > best_score {
            best = j;
            best_score = score;
        }
    }
    Ok((Some(best), VoteRecord { top, passed }))
}

/// Per-dimension result of one aggregation.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregationOutcome {
    /// Winning bin per projected dimension, `None` for ⊥.
    pub winners: Vec<Option<usize>>,
    /// Winning midpoint per projected dimension, `None` for ⊥.
    pub midpoints: Vec<Option<f64>>,
    pub records: Vec<VoteRecord>,
}

impl AggregationOutcome {
    pub fn passed(&self) -> usize {
        self.records.iter().filter(|r| r.passed).count()
    }

    pub fn mean_vote_gap(&self) -> f64 {
        if self.records.is_empty() {
            return 0.0;
        }
        self.records.iter().map(|r| r.top.gap() as f64).sum::<f64>() / self.records.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Aggregated {
    /// Back-projected aggregate, length `d`.
    pub gradient: Vec<f64>,
    pub outcome: AggregationOutcome,
    pub tally: VoteTally,
}

/// Privately aggregate the teachers' perturbations for one record.
///
/// `gradients[t]` is teacher `t`'s length-`d` perturbation. Ledger entries
/// are named `{query_id}/threshold` and `{query_id}/argmax/{dim}`.
pub fn dp_grad_agg<R: Rng + ?Sized>(
    gradients: &[Vec<f64>],
    grid: &BinGrid,
    proj: &ProjectionPair,
    params: &GnmaxParams,
    ledger: &mut PrivacyLedger,
    query_id: &str,
    rng: &mut R,
) -> Result<Aggregated> {
    params.validate()?;
    let votes = gradients
        .iter()
        .map(|g| {
            if g.len() != proj.d() {
                return param(format!(
                    "gradient has {} dimensions but projection expects {}",
                    g.len(),
                    proj.d()
                ));
            }
            discretize(&project_down(g, proj)?, grid)
        })
        .collect::<Result<Vec<_>>>()?;
    let tally = tally(&votes, proj.k(), grid.num_bins())?;
    let threshold_abs = params.threshold_abs(gradients.len());

    let mut winners = Vec::with_capacity(proj.k());
    let mut records = Vec::with_capacity(proj.k());
    for dim in 0..proj.k() {
        let (winner, record) =
            confident_gnmax(tally.row(dim), threshold_abs, params.sigma1, params.sigma2, rng)?;
        winners.push(winner);
        records.push(record);
    }

    ledger.append(LedgerEntry::gaussian_threshold(
        format!("{query_id}/threshold"),
        params.sigma1,
        proj.k() as u32,
    )?);
    for (dim, record) in records.iter().enumerate() {
        if record.passed {
            ledger.append(LedgerEntry::gnmax(
                format!("{query_id}/argmax/{dim}"),
                params.sigma2,
                record.top,
            )?);
        }
    }

    let midpoints: Vec<Option<f64>> = winners.iter().map(|w| w.map(|b| grid.midpoint(b))).collect();
    let projected: Vec<f64> = midpoints.iter().map(|m| m.unwrap_or(0.0)).collect();
    let gradient = project_up(&projected, proj)?;
    Ok(Aggregated {
        gradient,
        outcome: AggregationOutcome {
            winners,
            midpoints,
            records,
        },
        tally,
    })
}
