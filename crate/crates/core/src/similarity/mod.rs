//! Similarity battery between a learned value matrix V and the KPCA value
//! matrix V̇: entrywise tolerance test, direct and assignment-optimal
//! column cosines, linear CKA and Gaussian-kernel CKA.
//!
//! Cosines are taken in absolute value because eigenvector signs are
//! arbitrary. MDC and MOC are the maximum matched cosine over columns.

mod cka;
mod lap;

pub use cka::{gaussian_gram, hsic, kernel_cka, linear_cka, normalize_columns, Bandwidth};
pub use lap::lap_solve;

use ndarray::{Array1, Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::container::AttentionDump;
use crate::error::{Error, Result};
use crate::kernel;
use crate::kpca;
use crate::scalar::Scalar;
use crate::spectral;

/// Absolute tolerance of the entrywise test.
pub const ENTRY_ATOL: f64 = 1e-3;
/// Relative tolerance of the entrywise test, applied to `|V̇|`.
pub const ENTRY_RTOL: f64 = 1e-5;

fn same_shape<T>(a: ArrayView2<T>, b: ArrayView2<T>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!("{:?} vs {:?}", a.dim(), b.dim())));
    }
    Ok(())
}

/// Entry `(i, j)` passes when `|v − v̇| <= 1e-3 + 1e-5 |v̇|`. Returns
/// whether all entries pass and how many fail.
pub fn entrywise_close<T: Scalar>(v: ArrayView2<T>, v_dot: ArrayView2<T>) -> Result<(bool, usize)> {
    same_shape(v, v_dot)?;
    let (atol, rtol) = (T::lit(ENTRY_ATOL), T::lit(ENTRY_RTOL));
    let violations = v
        .iter()
        .zip(v_dot.iter())
        .filter(|(&a, &b)| (a - b).is_nan() || (a - b).abs() > atol + rtol * b.abs())
        .count();
    Ok((violations == 0, violations))
}

/// `|cos|` between every column of `x` and every column of `y`; pairs
/// involving a zero column score 0.
pub fn abs_cosine_matrix<T: Scalar>(x: ArrayView2<T>, y: ArrayView2<T>) -> Result<Array2<T>> {
    if x.nrows() != y.nrows() {
        return Err(Error::Shape(format!("{} vs {} rows", x.nrows(), y.nrows())));
    }
    let xn = normalize_columns(x);
    let yn = normalize_columns(y);
    Ok(xn.t().dot(&yn).mapv(|c| c.abs().min(T::one())))
}

#[derive(Debug, Clone, PartialEq)]
pub struct DirectCosine<T> {
    pub per_column: Array1<T>,
    /// MDC
    pub max: T,
}

/// `|cos|` of same-index columns.
pub fn direct_cosine<T: Scalar>(v: ArrayView2<T>, v_dot: ArrayView2<T>) -> Result<DirectCosine<T>> {
    same_shape(v, v_dot)?;
    let vn = normalize_columns(v);
    let dn = normalize_columns(v_dot);
    let per_column = Array1::from_shape_fn(v.ncols(), |c| vn.column(c).dot(&dn.column(c)).abs().min(T::one()));
    let max = per_column.iter().copied().fold(T::zero(), T::max);
    Ok(DirectCosine { per_column, max })
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimalCosine<T> {
    /// MOC
    pub max: T,
    /// `assignment[i]` is the V̇ column matched to V column `i`.
    pub assignment: Vec<usize>,
    pub matched: Array1<T>,
    /// Sum of `1 − |cos|` over matched pairs.
    pub total_distance: T,
}

/// Column matching that minimizes total cosine distance `1 − |cos|`.
pub fn optimal_cosine<T: Scalar>(v: ArrayView2<T>, v_dot: ArrayView2<T>) -> Result<OptimalCosine<T>> {
    if v.ncols() != v_dot.ncols() {
        return Err(Error::Shape(format!("{} vs {} columns", v.ncols(), v_dot.ncols())));
    }
    let cos = abs_cosine_matrix(v, v_dot)?;
    let cost = cos.mapv(|c| T::one() - c);
    let (assignment, total_distance) = lap_solve(cost.view())?;
    let matched = Array1::from_shape_fn(assignment.len(), |i| cos[[i, assignment[i]]]);
    let max = matched.iter().copied().fold(T::zero(), T::max);
    Ok(OptimalCosine { max, assignment, matched, total_distance })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimilarityScores {
    pub entrywise_pass: bool,
    pub entrywise_violations: usize,
    pub mdc: f64,
    pub moc: f64,
    pub lcka: f64,
    pub kcka: f64,
    pub assignment: Vec<usize>,
    /// Mean direct `|cos|`, reported alongside the max.
    pub mean_direct: f64,
    /// Mean matched `|cos|` under the optimal assignment.
    pub mean_optimal: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct CompareOptions {
    pub standardize: bool,
    pub bandwidth: Bandwidth,
}

/// Scores V against V̇ for two matrices of equal shape. CKA inputs are
/// column-normalized first.
pub fn score<T: Scalar>(v: ArrayView2<T>, v_dot: ArrayView2<T>, bandwidth: Bandwidth) -> Result<SimilarityScores> {
    let (entrywise_pass, entrywise_violations) = entrywise_close(v, v_dot)?;
    let direct = direct_cosine(v, v_dot)?;
    let optimal = optimal_cosine(v, v_dot)?;
    let vn = normalize_columns(v);
    let dn = normalize_columns(v_dot);
    let lcka = linear_cka(vn.view(), dn.view())?;
    let kcka = kernel_cka(vn.view(), dn.view(), bandwidth)?;
    let mean = |a: &Array1<T>| a.mean().map_or(0.0, |m| m.to_f64_());
    Ok(SimilarityScores {
        entrywise_pass,
        entrywise_violations,
        mdc: direct.max.to_f64_(),
        moc: optimal.max.to_f64_(),
        lcka: lcka.to_f64_(),
        kcka: kcka.to_f64_(),
        assignment: optimal.assignment,
        mean_direct: mean(&direct.per_column),
        mean_optimal: mean(&optimal.matched),
    })
}

/// Gram → eigendecomposition → V̇ → full battery for one dump.
pub fn compare<T: Scalar>(dump: &AttentionDump<T>, opts: CompareOptions) -> Result<SimilarityScores> {
    let run = || -> Result<SimilarityScores> {
        let bundle = kernel::gram(&dump.k, opts.standardize)?;
        let spectrum = spectral::eigh(&bundle.k_tilde)?;
        let kpca = kpca::build_vdot(&bundle, &spectrum, dump.d_v())?;
        score(dump.v.view(), kpca.v_dot.view(), opts.bandwidth)
    };
    run().map_err(|e| e.context(dump.key().to_string()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Aggregate {
    #[default]
    Mean,
    Max,
}

impl std::str::FromStr for Aggregate {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "mean" => Ok(Aggregate::Mean),
            "max" => Ok(Aggregate::Max),
            other => Err(format!("expected `mean` or `max`, got {other:?}")),
        }
    }
}

/// One report row per model.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimilarityRow {
    pub model_id: String,
    pub n_dumps: usize,
    #[serde(rename = "MDC")]
    pub mdc: f64,
    #[serde(rename = "MOC")]
    pub moc: f64,
    #[serde(rename = "LCKA")]
    pub lcka: f64,
    #[serde(rename = "KCKA")]
    pub kcka: f64,
    pub entrywise_pass_fraction: f64,
}

pub fn aggregate(model_id: &str, scores: &[SimilarityScores], how: Aggregate) -> SimilarityRow {
    let n = scores.len();
    let reduce = |f: fn(&SimilarityScores) -> f64| -> f64 {
        if n == 0 {
            return 0.0;
        }
        match how {
            Aggregate::Mean => scores.iter().map(f).sum::<f64>() / n as f64,
            Aggregate::Max => scores.iter().map(f).fold(f64::NEG_INFINITY, f64::max),
        }
    };
    let passed = scores.iter().filter(|s| s.entrywise_pass).count();
    SimilarityRow {
        model_id: model_id.to_string(),
        n_dumps: n,
        mdc: reduce(|s| s.mdc),
        moc: reduce(|s| s.moc),
        lcka: reduce(|s| s.lcka),
        kcka: reduce(|s| s.kcka),
        entrywise_pass_fraction: if n == 0 { 0.0 } else { passed as f64 / n as f64 },
    }
}
