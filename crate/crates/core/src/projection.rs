//! Projection-loss analysis.
//!
//! The kernel-trick path only yields `‖φ(q_i)‖²` and `‖h_i‖²`, so the
//! per-dump loss is the mean absolute difference of those squared norms.
//! The full reconstruction error with its cross term is available for
//! explicit finite-dimensional features via [`j_full_toy`].

use std::collections::BTreeMap;

use ndarray::{Array1, ArrayView1, ArrayView2};
use serde::Serialize;

use crate::container::AttentionDump;
use crate::error::{Error, Result};
use crate::kernel::{phi_sq_norm, DvScale};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct ProjStats<T> {
    /// `‖φ(q_i)‖²` with the dv scale applied.
    pub phi_sq: Array1<T>,
    /// `‖h_i‖²`
    pub h_sq: Array1<T>,
    /// `mean |phi_sq − h_sq|`
    pub j_mae: T,
    /// `mean (phi_sq − h_sq)`
    pub j_signed: T,
    /// `mean |phi_sq − h_sq| / phi_sq`
    pub rel_err_phi: T,
    /// `mean |phi_sq − h_sq| / h_sq` over rows with nonzero `h_sq`; 0 if none.
    pub rel_err_h: T,
}

fn squared_norms<T: Scalar>(m: ArrayView2<T>) -> Array1<T> {
    m.rows().into_iter().map(|r| r.dot(&r)).collect()
}

pub fn j_mae<T: Scalar>(dump: &AttentionDump<T>, dv_scale: DvScale) -> Result<ProjStats<T>> {
    let scale = dv_scale.resolve::<T>(dump.d_v());
    let phi_sq = dump
        .q
        .rows()
        .into_iter()
        .map(|q| phi_sq_norm(q, dump.k.view(), scale))
        .collect::<Result<Array1<T>>>()
        .map_err(|e| e.context(dump.key().to_string()))?;
    let h_sq = squared_norms(dump.output().view());
    Ok(stats_from_norms(phi_sq, h_sq))
}

/// Loss statistics from precomputed squared-norm vectors.
pub fn stats_from_norms<T: Scalar>(phi_sq: Array1<T>, h_sq: Array1<T>) -> ProjStats<T> {
    let n = T::from_usize_(phi_sq.len());
    let diff: Array1<T> = &phi_sq - &h_sq;
    let abs = diff.mapv(T::abs);
    let j_mae = abs.sum() / n;
    let j_signed = diff.sum() / n;
    let rel_mean = |den: &Array1<T>| {
        let (sum, count) = abs
            .iter()
            .zip(den.iter())
            .filter(|(_, &d)| d > T::zero())
            .fold((T::zero(), 0usize), |(s, c), (&a, &d)| (s + a / d, c + 1));
        if count == 0 {
            T::zero()
        } else {
            sum / T::from_usize_(count)
        }
    };
    let rel_err_phi = rel_mean(&phi_sq);
    let rel_err_h = rel_mean(&h_sq);
    ProjStats { phi_sq, h_sq, j_mae, j_signed, rel_err_phi, rel_err_h }
}

/// Terms of `‖φ − Σ_d h_d u_d‖² = ‖φ‖² − 2 Σ_d h_d u_dᵀφ + Σ_mn u_mᵀu_n h_m h_n`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JFull<T> {
    /// Directly evaluated squared residual norm.
    pub total: T,
    pub phi_sq: T,
    /// `Σ_d h_d u_dᵀφ`
    pub linear: T,
    pub cross: T,
}

impl<T: Scalar> JFull<T> {
    /// `phi_sq − 2·linear + cross`
    pub fn expanded(&self) -> T {
        self.phi_sq - (self.linear + self.linear) + self.cross
    }
}

fn check_toy<T>(h: ArrayView1<T>, u: ArrayView2<T>) -> Result<()> {
    if u.ncols() != h.len() {
        return Err(Error::Shape(format!("U has {} columns but h has {} entries", u.ncols(), h.len())));
    }
    Ok(())
}

/// `Σ_m Σ_n u_mᵀ u_n h_m h_n` for the columns `u_d` of `U`.
pub fn cross_term<T: Scalar>(h: ArrayView1<T>, u: ArrayView2<T>) -> Result<T> {
    check_toy(h, u)?;
    let gram = u.t().dot(&u);
    let mut total = T::zero();
    for m in 0..h.len() {
        for n in 0..h.len() {
            total += gram[[m, n]] * h[m] * h[n];
        }
    }
    Ok(total)
}

/// Full reconstruction error of an explicit feature vector `phi_q`
/// (length m) from coefficients `h` along the columns of `U` (`m x d_v`).
pub fn j_full_toy<T: Scalar>(h: ArrayView1<T>, u: ArrayView2<T>, phi_q: ArrayView1<T>) -> Result<JFull<T>> {
    check_toy(h, u)?;
    if u.nrows() != phi_q.len() {
        return Err(Error::Shape(format!("U has {} rows but φ has {} entries", u.nrows(), phi_q.len())));
    }
    let recon = u.dot(&h);
    let resid = &phi_q - &recon;
    let linear = h.dot(&u.t().dot(&phi_q));
    Ok(JFull { total: resid.dot(&resid), phi_sq: phi_q.dot(&phi_q), linear, cross: cross_term(h, u)? })
}

/// Nearest-rank percentile of ascending `sorted` (`p` in percent).
pub fn nearest_rank(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    let rank = ((p / 100.0) * n as f64).ceil() as usize;
    sorted[rank.clamp(1, n) - 1]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum NormFamily {
    PhiSq,
    HSq,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NormSeriesRow {
    pub layer: u32,
    pub norm_family: NormFamily,
    pub median: f64,
    pub p2_5: f64,
    pub p97_5: f64,
    pub n_values: usize,
}

fn series_row(layer: u32, norm_family: NormFamily, mut values: Vec<f64>) -> NormSeriesRow {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    NormSeriesRow {
        layer,
        norm_family,
        median: nearest_rank(&values, 50.0),
        p2_5: nearest_rank(&values, 2.5),
        p97_5: nearest_rank(&values, 97.5),
        n_values: values.len(),
    }
}

/// Per layer, the median and 2.5/97.5 nearest-rank percentiles of every
/// token's `‖φ(q_i)‖²` and `‖h_i‖²`, pooled over samples and heads.
/// Values are raw (no log transform).
pub fn norm_series<T: Scalar>(dumps: &[&AttentionDump<T>], dv_scale: DvScale) -> Result<Vec<NormSeriesRow>> {
    let stats = dumps.iter().map(|d| j_mae(d, dv_scale)).collect::<Result<Vec<_>>>()?;
    series_from_stats(dumps.iter().map(|d| d.layer).zip(stats.iter()))
}

pub(crate) fn series_from_stats<'a, T: Scalar>(
    per_dump: impl Iterator<Item = (u32, &'a ProjStats<T>)>,
) -> Result<Vec<NormSeriesRow>> {
    let mut by_layer: BTreeMap<u32, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for (layer, s) in per_dump {
        let entry = by_layer.entry(layer).or_default();
        entry.0.extend(s.phi_sq.iter().map(|x| x.to_f64_()));
        entry.1.extend(s.h_sq.iter().map(|x| x.to_f64_()));
    }
    if by_layer.is_empty() {
        return Err(Error::Degenerate("no dumps for the norm series".into()));
    }
    let mut rows = Vec::with_capacity(by_layer.len() * 2);
    for (layer, (phi, h)) in by_layer {
        if phi.is_empty() {
            return Err(Error::Degenerate(format!("layer {layer} has no tokens")));
        }
        rows.push(series_row(layer, NormFamily::PhiSq, phi));
        rows.push(series_row(layer, NormFamily::HSq, h));
    }
    Ok(rows)
}
