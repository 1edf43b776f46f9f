//! Symmetric eigendecomposition of the centered Gram matrix, rank-wise
//! eigenvalue statistics over dump sets, and the perturbed-eigenvector
//! control.
//!
//! Eigenvalues are those of `K̃` itself. The covariance eigenvalue of the
//! KPCA derivation is `λ̂ / N`.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;

use crate::container::AttentionDump;
use crate::error::{Error, Result};
use crate::kernel;
use crate::scalar::Scalar;

/// Sweep cap for cyclic Jacobi.
pub const MAX_SWEEPS: usize = 100;

/// Eigenpairs of a symmetric matrix, eigenvalues non-increasing.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum<T> {
    pub eigenvalues: Array1<T>,
    /// Column `d` is the unit eigenvector for `eigenvalues[d]`.
    pub eigenvectors: Array2<T>,
    /// `‖K a_d − λ_d a_d‖ / max(‖K‖_F, ε)`
    pub residuals: Array1<T>,
}

impl<T: Scalar> Spectrum<T> {
    pub fn len(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn is_empty(&self) -> bool {
        self.eigenvalues.is_empty()
    }

    /// `A diag(λ) Aᵀ`
    pub fn reconstruct(&self) -> Array2<T> {
        let scaled = &self.eigenvectors * &self.eigenvalues;
        scaled.dot(&self.eigenvectors.t())
    }
}

pub fn frobenius<T: Scalar>(m: ArrayView2<T>) -> T {
    m.iter().map(|&x| x * x).sum::<T>().sqrt()
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix.
///
/// Each eigenvector is signed so its largest-magnitude entry (first one on
/// ties) is positive; equal eigenvalues keep the solver's column order.
pub fn eigh<T: Scalar>(m: &Array2<T>) -> Result<Spectrum<T>> {
    let (n, cols) = m.dim();
    if n != cols {
        return Err(Error::Shape(format!("eigh needs a square matrix, got {n}x{cols}")));
    }
    if !m.iter().all(|x| x.is_finite()) {
        return Err(Error::NonFinite("matrix passed to eigh is not finite".into()));
    }
    let fro = frobenius(m.view());
    let mut asym = T::zero();
    for i in 0..n {
        for j in i + 1..n {
            asym = asym.max((m[[i, j]] - m[[j, i]]).abs());
        }
    }
    if asym > T::tol(1e-10) * fro {
        return Err(Error::NotSymmetric(asym.to_f64_()));
    }

    // row-major working copies; ndarray indexing is too slow in the inner loop
    let mut a: Vec<T> = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            a.push((m[[i, j]] + m[[j, i]]) * T::lit(0.5));
        }
    }
    let mut v = vec![T::zero(); n * n];
    for i in 0..n {
        v[i * n + i] = T::one();
    }

    let eps = T::epsilon();
    let threshold = eps * fro;
    let skip = threshold / T::from_usize_(n.max(1));
    let mut converged = false;
    let mut off = T::zero();
    for _ in 0..=MAX_SWEEPS {
        off = T::zero();
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    off += a[i * n + j] * a[i * n + j];
                }
            }
        }
        off = off.sqrt();
        if off <= threshold {
            converged = true;
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq.abs() <= skip {
                    continue;
                }
                let theta = (a[q * n + q] - a[p * n + p]) / (apq + apq);
                let t = if theta.abs() > T::lit(1e100).min(T::max_value().sqrt()) {
                    T::one() / (theta + theta)
                } else {
                    theta.signum() / (theta.abs() + (theta * theta + T::one()).sqrt())
                };
                let c = T::one() / (t * t + T::one()).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
                a[p * n + q] = T::zero();
                a[q * n + p] = T::zero();
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    if !converged {
        return Err(Error::NoConvergence { sweeps: MAX_SWEEPS, off_norm: off.to_f64_() });
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&x, &y| a[y * n + y].partial_cmp(&a[x * n + x]).unwrap());

    let mut eigenvalues = Array1::zeros(n);
    let mut eigenvectors = Array2::zeros((n, n));
    for (d, &src) in order.iter().enumerate() {
        eigenvalues[d] = a[src * n + src];
        let mut pivot = 0;
        for k in 1..n {
            if v[k * n + src].abs() > v[pivot * n + src].abs() {
                pivot = k;
            }
        }
        let sign = if v[pivot * n + src] < T::zero() { -T::one() } else { T::one() };
        for k in 0..n {
            eigenvectors[[k, d]] = sign * v[k * n + src];
        }
    }

    let denom = fro.max(T::min_positive_value());
    let kv = m.dot(&eigenvectors);
    let residuals = Array1::from_shape_fn(n, |d| {
        let mut r = T::zero();
        for k in 0..n {
            let e = kv[[k, d]] - eigenvalues[d] * eigenvectors[[k, d]];
            r += e * e;
        }
        r.sqrt() / denom
    });
    Ok(Spectrum { eigenvalues, eigenvectors, residuals })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Population mean and standard deviation.
    pub fn of(values: &[f64]) -> Self {
        if values.is_empty() {
            return MeanStd { mean: 0.0, std: 0.0 };
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        MeanStd { mean, std: var.sqrt() }
    }
}

/// Statistics of the rank-wise averaged |eigenvalue| vector of one sample.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SampleEigStats {
    pub sample_id: String,
    pub rank_means: Vec<f64>,
    pub max: f64,
    pub min: f64,
    pub mean: f64,
    pub median: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EigStatSummary {
    pub max: MeanStd,
    pub min: MeanStd,
    pub mean: MeanStd,
    pub median: MeanStd,
    pub n_samples: usize,
    pub per_sample: Vec<SampleEigStats>,
}

impl EigStatSummary {
    /// Standard deviations in (max, min, mean, median) order.
    pub fn per_stat_std(&self) -> [f64; 4] {
        [self.max.std, self.min.std, self.mean.std, self.median.std]
    }
}

/// Median with the two middle values averaged for even lengths.
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n == 0 {
        0.0
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Rank-wise statistics of a set of |eigenvalue| vectors from one sample.
pub fn rank_stats(sample_id: &str, spectra: &[Vec<f64>]) -> Result<SampleEigStats> {
    let n = spectra.first().map_or(0, Vec::len);
    if n == 0 {
        return Err(Error::Degenerate(format!("sample {sample_id:?} has no eigenvalues")));
    }
    if spectra.iter().any(|s| s.len() != n) {
        return Err(Error::Validation(format!(
            "sample {sample_id:?} mixes token counts; eigenvalue ranks are not alignable"
        )));
    }
    let mut rank_means = vec![0.0; n];
    for s in spectra {
        let mut abs: Vec<f64> = s.iter().map(|x| x.abs()).collect();
        abs.sort_by(|a, b| b.partial_cmp(a).unwrap());
        for (m, x) in rank_means.iter_mut().zip(abs) {
            *m += x;
        }
    }
    let count = spectra.len() as f64;
    rank_means.iter_mut().for_each(|m| *m /= count);
    let max = rank_means.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = rank_means.iter().copied().fold(f64::INFINITY, f64::min);
    let mean = rank_means.iter().sum::<f64>() / n as f64;
    let median = median(&rank_means);
    Ok(SampleEigStats { sample_id: sample_id.to_string(), rank_means, max, min, mean, median })
}

/// Per sample: |eigenvalues| of every (layer, head) Gram spectrum averaged
/// by rank, then max/min/mean/median over ranks; finally mean ± std of
/// those four over samples (in sample-id order).
pub fn eig_rank_stats<T: Scalar>(
    dumps: &[&AttentionDump<T>],
    standardize: bool,
) -> Result<EigStatSummary> {
    let spectra: Vec<Result<Vec<f64>>> = dumps
        .par_iter()
        .map(|d| {
            let bundle = kernel::gram(&d.k, standardize)?;
            let spectrum = eigh(&bundle.k_tilde)?;
            Ok(spectrum.eigenvalues.iter().map(|x| x.to_f64_()).collect())
        })
        .collect();
    let mut by_sample: BTreeMap<&str, Vec<Vec<f64>>> = BTreeMap::new();
    for (d, s) in dumps.iter().zip(spectra) {
        let s = s.map_err(|e| e.context(d.key().to_string()))?;
        by_sample.entry(d.sample_id.as_str()).or_default().push(s);
    }
    summarize(by_sample)
}

pub(crate) fn summarize(by_sample: BTreeMap<&str, Vec<Vec<f64>>>) -> Result<EigStatSummary> {
    if by_sample.is_empty() {
        return Err(Error::Degenerate("no dumps to summarize".into()));
    }
    let per_sample = by_sample
        .iter()
        .map(|(sample, spectra)| rank_stats(sample, spectra))
        .collect::<Result<Vec<_>>>()?;
    let col = |f: fn(&SampleEigStats) -> f64| MeanStd::of(&per_sample.iter().map(f).collect::<Vec<_>>());
    Ok(EigStatSummary {
        max: col(|s| s.max),
        min: col(|s| s.min),
        mean: col(|s| s.mean),
        median: col(|s| s.median),
        n_samples: per_sample.len(),
        per_sample,
    })
}

/// Orthonormal factor of a full-column-rank `N x k` matrix via Householder
/// reflections. Column signs follow the reflector convention.
pub fn householder_q<T: Scalar>(m: &Array2<T>) -> Array2<T> {
    let (n, k) = m.dim();
    let mut r = m.clone();
    let mut reflectors: Vec<Option<Array1<T>>> = Vec::with_capacity(k);
    for j in 0..k.min(n) {
        let mut v: Array1<T> = r.slice(ndarray::s![j.., j]).to_owned();
        let norm = v.dot(&v).sqrt();
        let alpha = if v[0] >= T::zero() { -norm } else { norm };
        v[0] -= alpha;
        let vn = v.dot(&v).sqrt();
        if vn == T::zero() {
            reflectors.push(None);
            continue;
        }
        v /= vn;
        for c in j..k {
            let mut col = r.slice_mut(ndarray::s![j.., c]);
            let dot = v.dot(&col);
            col.scaled_add(-(dot + dot), &v);
        }
        reflectors.push(Some(v));
    }
    let mut q = Array2::eye(n).slice(ndarray::s![.., ..k]).to_owned();
    for (j, v) in reflectors.iter().enumerate().rev() {
        let Some(v) = v else { continue };
        for c in 0..k {
            let mut col = q.slice_mut(ndarray::s![j.., c]);
            let dot = v.dot(&col);
            col.scaled_add(-(dot + dot), v);
        }
    }
    q
}

/// Orthonormal factor of `A + sigma·G` for i.i.d. standard normal `G`
/// drawn from `seed`. Columns are signed so `diag(Aᵀ A_random) >= 0`.
pub fn perturb_orthonormalize<T: Scalar>(a: &Array2<T>, sigma: f64, seed: u64) -> Array2<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sigma_t = T::lit(sigma);
    let noisy = a.mapv(|x| {
        let z: f64 = StandardNormal.sample(&mut rng);
        x + sigma_t * T::lit(z)
    });
    let mut q = householder_q(&noisy);
    for (mut qc, ac) in q.columns_mut().into_iter().zip(a.columns()) {
        if qc.dot(&ac) < T::zero() {
            qc.mapv_inplace(|x| -x);
        }
    }
    q
}
