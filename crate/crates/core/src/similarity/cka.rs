//! Centered kernel alignment between two representations of the same N
//! samples (rows).

use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::double_center;
use crate::scalar::Scalar;

fn check_rows<T>(x: ArrayView2<T>, y: ArrayView2<T>) -> Result<()> {
    if x.nrows() != y.nrows() {
        return Err(Error::Shape(format!("CKA inputs have {} and {} rows", x.nrows(), y.nrows())));
    }
    if x.nrows() < 2 {
        return Err(Error::Validation("CKA needs at least 2 rows".into()));
    }
    Ok(())
}

/// Column-centered copy, or `None` when the matrix is constant up to rounding.
fn center_columns<T: Scalar>(x: ArrayView2<T>) -> Option<Array2<T>> {
    let scale = x.iter().fold(T::zero(), |m, v| m.max(v.abs()));
    let means = x.mean_axis(Axis(0))?;
    let c = &x - &means;
    let spread = c.iter().fold(T::zero(), |m, v| m.max(v.abs()));
    (spread > T::epsilon() * T::lit(16.0) * scale).then_some(c)
}

fn fro_sq<T: Scalar>(m: &Array2<T>) -> T {
    m.iter().map(|&v| v * v).sum()
}

/// `‖Yᵀ X‖²_F / (‖Xᵀ X‖_F ‖Yᵀ Y‖_F)` on column-centered inputs; 0 when
/// either input is constant.
pub fn linear_cka<T: Scalar>(x: ArrayView2<T>, y: ArrayView2<T>) -> Result<T> {
    check_rows(x, y)?;
    let (Some(xc), Some(yc)) = (center_columns(x), center_columns(y)) else {
        return Ok(T::zero());
    };
    let cross = fro_sq(&yc.t().dot(&xc));
    let xx = fro_sq(&xc.t().dot(&xc)).sqrt();
    let yy = fro_sq(&yc.t().dot(&yc)).sqrt();
    Ok(cross / (xx * yy))
}

/// Gaussian-kernel width selection.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub enum Bandwidth {
    /// Median of the nonzero pairwise row distances, per input.
    #[default]
    Median,
    Fixed(f64),
}

fn sq_distances<T: Scalar>(x: ArrayView2<T>) -> Array2<T> {
    let n = x.nrows();
    let mut d = Array2::zeros((n, n));
    for i in 0..n {
        for j in i + 1..n {
            let diff = &x.row(i) - &x.row(j);
            let s = diff.dot(&diff);
            d[[i, j]] = s;
            d[[j, i]] = s;
        }
    }
    d
}

fn median_nonzero<T: Scalar>(sq: &Array2<T>) -> Option<T> {
    let n = sq.nrows();
    let mut dist: Vec<T> = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            if sq[[i, j]] > T::zero() {
                dist.push(sq[[i, j]].sqrt());
            }
        }
    }
    if dist.is_empty() {
        return None;
    }
    dist.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let m = dist.len();
    Some(if m % 2 == 1 { dist[m / 2] } else { (dist[m / 2 - 1] + dist[m / 2]) * T::lit(0.5) })
}

/// `exp(−‖x_i − x_j‖² / (2σ²))`, or `None` for all-identical rows.
pub fn gaussian_gram<T: Scalar>(x: ArrayView2<T>, bandwidth: Bandwidth) -> Option<Array2<T>> {
    let sq = sq_distances(x);
    let sigma = match bandwidth {
        Bandwidth::Median => median_nonzero(&sq)?,
        Bandwidth::Fixed(s) => T::lit(s),
    };
    if !sq.iter().any(|&d| d > T::zero()) {
        return None;
    }
    let two_sigma_sq = sigma * sigma * T::lit(2.0);
    Some(sq.mapv(|d| (-d / two_sigma_sq).exp()))
}

/// Unnormalized HSIC, `Σ_ij K̃_ij L̃_ij`; the `1/(N−1)²` factor cancels in CKA.
pub fn hsic<T: Scalar>(k: &Array2<T>, l: &Array2<T>) -> T {
    let kc = double_center(k.view());
    let lc = double_center(l.view());
    (&kc * &lc).sum()
}

/// `HSIC(K, L) / sqrt(HSIC(K, K) HSIC(L, L))` with Gaussian kernels.
pub fn kernel_cka<T: Scalar>(x: ArrayView2<T>, y: ArrayView2<T>, bandwidth: Bandwidth) -> Result<T> {
    check_rows(x, y)?;
    if let Bandwidth::Fixed(s) = bandwidth {
        if !(s > 0.0 && s.is_finite()) {
            return Err(Error::Validation(format!("kernel bandwidth must be > 0, got {s}")));
        }
    }
    let (Some(k), Some(l)) = (gaussian_gram(x, bandwidth), gaussian_gram(y, bandwidth)) else {
        return Ok(T::zero());
    };
    let kc = double_center(k.view());
    let lc = double_center(l.view());
    let kl = (&kc * &lc).sum();
    let kk = fro_sq(&kc);
    let ll = fro_sq(&lc);
    if kk == T::zero() || ll == T::zero() {
        return Ok(T::zero());
    }
    Ok(kl / (kk * ll).sqrt())
}

/// Scales every column to unit Euclidean norm; zero columns stay zero.
pub fn normalize_columns<T: Scalar>(m: ArrayView2<T>) -> Array2<T> {
    let norms: Array1<T> = m.map_axis(Axis(0), |c| c.dot(&c).sqrt());
    let mut out = m.to_owned();
    for (mut col, &n) in out.columns_mut().into_iter().zip(norms.iter()) {
        if n > T::zero() {
            col /= n;
        }
    }
    out
}
