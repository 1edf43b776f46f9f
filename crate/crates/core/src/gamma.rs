//! γ-vector audit of the eigenvector condition.
//!
//! For a candidate vector `a`, `γ_i = (K̃ a)_i / (N a_i)`. All γ_i are equal
//! exactly when `a` is an eigenvector, so pairwise spreads of γ measure how
//! far `a` is from one. Relative spreads separate true eigenvectors from
//! perturbed ones even when the eigenvalues are tiny.

use ndarray::{Array2, ArrayView1, ArrayView2};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::spectral::{perturb_orthonormalize, Spectrum};

/// Entries with `|a_i| <= floor · ‖a‖_∞` are masked.
pub const DEFAULT_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct GammaStats<T> {
    /// `None` where the entry was masked.
    pub gamma: Vec<Option<T>>,
    /// Mean of `|γ_i − γ_j|` over unordered unmasked pairs.
    pub mean_abs_diff: T,
    /// Population std of the same differences.
    pub std_abs_diff: T,
    /// Mean of `|γ_i − γ_j| / max(|γ_i|, |γ_j|)`, skipping pairs where both are 0.
    pub mean_rel_diff: T,
    pub masked_count: usize,
    pub n_pairs: usize,
}

pub fn gamma_vector<T: Scalar>(
    k_tilde: ArrayView2<T>,
    a: ArrayView1<T>,
    n: usize,
    floor: f64,
) -> Result<GammaStats<T>> {
    let len = a.len();
    if k_tilde.dim() != (len, len) {
        return Err(Error::Shape(format!("K̃ is {:?} but a has {len} entries", k_tilde.dim())));
    }
    if floor.is_nan() || floor <= 0.0 {
        return Err(Error::Validation(format!("mask floor must be > 0, got {floor}")));
    }
    let a_max = a.iter().fold(T::zero(), |m, x| m.max(x.abs()));
    if a_max == T::zero() {
        return Err(Error::Validation("γ needs a nonzero vector".into()));
    }
    let cutoff = T::lit(floor) * a_max;
    let ka = k_tilde.dot(&a);
    let nf = T::from_usize_(n);
    let gamma: Vec<Option<T>> = a
        .iter()
        .zip(ka.iter())
        .map(|(&ai, &kai)| (ai.abs() > cutoff).then(|| kai / (nf * ai)))
        .collect();
    let kept: Vec<T> = gamma.iter().flatten().copied().collect();
    let masked_count = len - kept.len();
    if kept.is_empty() {
        return Err(Error::Degenerate("every entry of a is below the mask floor".into()));
    }

    let mut abs_sum = T::zero();
    let mut abs_sq = T::zero();
    let mut rel_sum = T::zero();
    let mut rel_count = 0usize;
    let mut n_pairs = 0usize;
    for i in 0..kept.len() {
        for j in i + 1..kept.len() {
            let diff = (kept[i] - kept[j]).abs();
            abs_sum += diff;
            abs_sq += diff * diff;
            n_pairs += 1;
            let den = kept[i].abs().max(kept[j].abs());
            if den > T::zero() {
                rel_sum += diff / den;
                rel_count += 1;
            }
        }
    }
    let (mean_abs_diff, std_abs_diff) = if n_pairs == 0 {
        (T::zero(), T::zero())
    } else {
        let p = T::from_usize_(n_pairs);
        let mean = abs_sum / p;
        (mean, (abs_sq / p - mean * mean).max(T::zero()).sqrt())
    };
    let mean_rel_diff = if rel_count == 0 { T::zero() } else { rel_sum / T::from_usize_(rel_count) };
    Ok(GammaStats { gamma, mean_abs_diff, std_abs_diff, mean_rel_diff, masked_count, n_pairs })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum GammaSource {
    True,
    Perturbed,
}

/// One CSV row of the comparison table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GammaRow {
    pub eigen_rank: usize,
    pub eigenvalue: f64,
    pub mean_abs_diff: f64,
    pub std_abs_diff: f64,
    pub mean_rel_diff: f64,
    pub masked_count: usize,
    pub source: GammaSource,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GammaComparison<T> {
    pub true_stats: Vec<GammaStats<T>>,
    pub perturbed_stats: Vec<GammaStats<T>>,
    pub perturbed: Array2<T>,
    pub eigenvalues: Vec<f64>,
}

impl<T: Scalar> GammaComparison<T> {
    /// True rows first, then perturbed rows, each in eigenvalue-rank order.
    /// The perturbed rows carry the eigenvalue of the column they perturb.
    pub fn rows(&self) -> Vec<GammaRow> {
        let mk = |source, stats: &[GammaStats<T>]| {
            stats
                .iter()
                .enumerate()
                .map(|(rank, s)| GammaRow {
                    eigen_rank: rank,
                    eigenvalue: self.eigenvalues[rank],
                    mean_abs_diff: s.mean_abs_diff.to_f64_(),
                    std_abs_diff: s.std_abs_diff.to_f64_(),
                    mean_rel_diff: s.mean_rel_diff.to_f64_(),
                    masked_count: s.masked_count,
                    source,
                })
                .collect::<Vec<_>>()
        };
        let mut rows = mk(GammaSource::True, &self.true_stats);
        rows.extend(mk(GammaSource::Perturbed, &self.perturbed_stats));
        rows
    }
}

/// γ statistics for every column of the true eigenvector matrix and of
/// its `sigma`-perturbed, re-orthonormalized copy.
pub fn gamma_comparison<T: Scalar>(
    k_tilde: ArrayView2<T>,
    spectrum: &Spectrum<T>,
    sigma: f64,
    seed: u64,
    floor: f64,
) -> Result<GammaComparison<T>> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::Validation(format!("sigma must be >= 0, got {sigma}")));
    }
    let n = k_tilde.nrows();
    let a = &spectrum.eigenvectors;
    let perturbed = perturb_orthonormalize(a, sigma, seed);
    let stats_of = |m: &Array2<T>| {
        m.columns()
            .into_iter()
            .enumerate()
            .map(|(d, col)| gamma_vector(k_tilde, col, n, floor).map_err(|e| e.context(format!("eigen rank {d}"))))
            .collect::<Result<Vec<_>>>()
    };
    Ok(GammaComparison {
        true_stats: stats_of(a)?,
        perturbed_stats: stats_of(&perturbed)?,
        eigenvalues: spectrum.eigenvalues.iter().map(|x| x.to_f64_()).collect(),
        perturbed,
    })
}

/// Median of the per-column `mean_rel_diff` values.
pub fn median_rel_diff<T: Scalar>(stats: &[GammaStats<T>]) -> f64 {
    crate::spectral::median(&stats.iter().map(|s| s.mean_rel_diff.to_f64_()).collect::<Vec<_>>())
}
