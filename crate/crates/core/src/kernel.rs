//! Exponential attention kernel, softmax normalizers and the centered
//! Gram matrix of scaled key features.
//!
//! With `k(x, y) = exp(xᵀy / sqrt(d_q))` and `g(x) = Σ_j k(x, k_j)`, the
//! scaled feature map `φ(x) = φ̂(x) / g(x)` is never formed explicitly:
//! every quantity below goes through the kernel trick.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

const STANDARDIZE_HINT: &str = "; retry with key standardization (--standardize)";

/// `exp(x·y / sqrt(d_q))`. Overflow is an error, never a silent infinity.
pub fn kernel<T: Scalar>(x: ArrayView1<T>, y: ArrayView1<T>, d_q: usize) -> Result<T> {
    if x.len() != y.len() {
        return Err(Error::Shape(format!("kernel arguments have lengths {} and {}", x.len(), y.len())));
    }
    let exponent = x.dot(&y) / T::from_usize_(d_q).sqrt();
    let value = exponent.exp();
    if !value.is_finite() {
        return Err(Error::Range { exponent: exponent.to_f64_(), hint: "" });
    }
    Ok(value)
}

fn check_finite<T: Scalar>(m: ArrayView2<T>, name: &str) -> Result<()> {
    if m.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("{name} not finite")))
    }
}

/// Softmax denominator of one query over all keys, `Σ_j k(q, k_j)`.
pub fn query_g<T: Scalar>(q: ArrayView1<T>, keys: ArrayView2<T>) -> Result<T> {
    let d_q = keys.ncols();
    let mut g = T::zero();
    for k in keys.rows() {
        g += kernel(q, k, d_q)?;
    }
    if !g.is_finite() {
        return Err(Error::Range { exponent: f64::INFINITY, hint: "" });
    }
    Ok(g)
}

/// `g(k_j) = Σ_j' k(k_j, k_j')` for every key.
pub fn scaling_g<T: Scalar>(keys: ArrayView2<T>) -> Result<Array1<T>> {
    check_finite(keys, "K")?;
    keys.rows().into_iter().map(|k| query_g(k, keys)).collect()
}

/// Multiplier applied to `‖φ(q)‖²`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub enum DvScale {
    /// `1 / d_v`, resolved per dump.
    #[default]
    Auto,
    Fixed(f64),
}

impl DvScale {
    pub fn resolve<T: Scalar>(self, d_v: usize) -> T {
        match self {
            DvScale::Auto => T::one() / T::from_usize_(d_v),
            DvScale::Fixed(s) => T::lit(s),
        }
    }
}

impl std::fmt::Display for DvScale {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            DvScale::Auto => f.write_str("auto"),
            DvScale::Fixed(s) => write!(f, "{s}"),
        }
    }
}

impl std::str::FromStr for DvScale {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        if s.eq_ignore_ascii_case("auto") {
            return Ok(DvScale::Auto);
        }
        match s.parse::<f64>() {
            Ok(v) if v > 0.0 && v.is_finite() => Ok(DvScale::Fixed(v)),
            _ => Err(format!("expected a positive number or `auto`, got {s:?}")),
        }
    }
}

/// `scale · k(q, q) / g(q)²`, the squared norm of the scaled query feature.
pub fn phi_sq_norm<T: Scalar>(q: ArrayView1<T>, keys: ArrayView2<T>, scale: T) -> Result<T> {
    let d_q = keys.ncols();
    let self_k = kernel(q, q, d_q).map_err(|e| match e {
        Error::Range { exponent, .. } => Error::Range {
            exponent,
            hint: " in k(q, q) = exp(‖q‖²/sqrt(d_q))",
        },
        other => other,
    })?;
    let g = query_g(q, keys)?;
    Ok(scale * self_k / (g * g))
}

/// Uncentered and centered Gram matrices of the scaled key features.
#[derive(Debug, Clone, PartialEq)]
pub struct GramBundle<T> {
    /// `K_phi[i, j] = k(k_i, k_j) / (g_i g_j)`
    pub k_phi: Array2<T>,
    /// Double-centered `K_phi`.
    pub k_tilde: Array2<T>,
    pub g_keys: Array1<T>,
    pub standardized: bool,
}

/// z-scores every key dimension across tokens (population std). Dimensions
/// with zero spread are centered only.
pub fn standardize_keys<T: Scalar>(keys: ArrayView2<T>) -> Array2<T> {
    let n = T::from_usize_(keys.nrows());
    let mut out = keys.to_owned();
    for mut col in out.columns_mut() {
        let mean = col.sum() / n;
        let scale = col.fold(T::zero(), |m, &x| m.max(x.abs()));
        col.mapv_inplace(|x| x - mean);
        let std = (col.dot(&col) / n).sqrt();
        if std > T::epsilon() * T::lit(16.0) * scale {
            col.mapv_inplace(|x| x / std);
        }
    }
    out
}

/// `C M C` with `C = I - 1_N`, via `M - rowmean - colmean + grandmean`.
/// The input must be symmetric; the output is exactly symmetric.
pub fn double_center<T: Scalar>(m: ArrayView2<T>) -> Array2<T> {
    let n = m.nrows();
    let nf = T::from_usize_(n);
    let means: Array1<T> = m.sum_axis(Axis(1)) / nf;
    let grand = means.sum() / nf;
    let mut out = Array2::zeros((n, n));
    for i in 0..n {
        for j in i..n {
            let v = m[[i, j]] - (means[i] + means[j]) + grand;
            out[[i, j]] = v;
            out[[j, i]] = v;
        }
    }
    out
}

/// Builds the Gram bundle for `keys` (`N x d_q`).
pub fn gram<T: Scalar>(keys: &Array2<T>, standardize: bool) -> Result<GramBundle<T>> {
    let n = keys.nrows();
    if n < 2 {
        return Err(Error::Validation(format!("Gram matrix needs N >= 2 keys, got {n}")));
    }
    check_finite(keys.view(), "K")?;
    let keys = if standardize { standardize_keys(keys.view()) } else { keys.clone() };
    let d_q = keys.ncols();
    let with_hint = |e: Error| match e {
        Error::Range { exponent, .. } if !standardize => Error::Range { exponent, hint: STANDARDIZE_HINT },
        other => other,
    };

    let mut raw = Array2::zeros((n, n));
    for i in 0..n {
        for j in i..n {
            let v = kernel(keys.row(i), keys.row(j), d_q).map_err(with_hint)?;
            raw[[i, j]] = v;
            raw[[j, i]] = v;
        }
    }
    let g_keys: Array1<T> = raw.sum_axis(Axis(1));
    if !g_keys.iter().all(|g| g.is_finite()) {
        return Err(with_hint(Error::Range { exponent: f64::INFINITY, hint: "" }));
    }
    let mut k_phi = raw;
    for i in 0..n {
        for j in 0..n {
            k_phi[[i, j]] /= g_keys[i] * g_keys[j];
        }
    }
    let k_tilde = double_center(k_phi.view());
    Ok(GramBundle { k_phi, k_tilde, g_keys, standardized: standardize })
}
