//! The KPCA value matrix `V̇ = G A − G 1_N A` built from the top Gram
//! eigenvectors, with `G = diag(1 / g(k_j))` and `1_N` the all-`1/N` matrix.
//!
//! Entrywise this is `v̇_jd = (a_jd − mean_j' a_j'd) / g(k_j)`. Eigenvectors
//! are unit-norm; the inverse map from V back to A is not provided because
//! `I − 1_N` is singular.

use ndarray::{s, Array1, Array2};

use crate::error::{Error, Result};
use crate::kernel::GramBundle;
use crate::scalar::Scalar;
use crate::spectral::Spectrum;

#[derive(Debug, Clone, PartialEq)]
pub struct KpcaResult<T> {
    /// `N x d_v`
    pub v_dot: Array2<T>,
    /// Eigenvectors for the `d_v` largest eigenvalues.
    pub a_top: Array2<T>,
    /// `1 / g(k_j)`
    pub g_diag: Array1<T>,
    pub eigenvalues_used: Array1<T>,
}

pub fn build_vdot<T: Scalar>(
    bundle: &GramBundle<T>,
    spectrum: &Spectrum<T>,
    d_v: usize,
) -> Result<KpcaResult<T>> {
    let n = bundle.g_keys.len();
    if d_v > n {
        return Err(Error::Validation(format!("d_v exceeds n_tokens ({d_v} > {n})")));
    }
    if spectrum.len() != n {
        return Err(Error::Shape(format!(
            "spectrum has {} eigenpairs for a {n}-token Gram matrix",
            spectrum.len()
        )));
    }
    if !bundle.g_keys.iter().all(|g| g.is_finite() && *g > T::zero()) {
        return Err(Error::NonFinite("g(k_j) must be finite and positive".into()));
    }
    let g_diag = bundle.g_keys.mapv(|g| T::one() / g);
    let a_top = spectrum.eigenvectors.slice(s![.., ..d_v]).to_owned();
    let eigenvalues_used = spectrum.eigenvalues.slice(s![..d_v]).to_owned();

    // G (A − 1_N A): subtract column means, then scale row j by 1/g_j
    let means = a_top.mean_axis(ndarray::Axis(0)).expect("n >= 1");
    let mut v_dot = &a_top - &means;
    for (mut row, &gi) in v_dot.rows_mut().into_iter().zip(g_diag.iter()) {
        row *= gi;
    }
    Ok(KpcaResult { v_dot, a_top, g_diag, eigenvalues_used })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::gram;
    use crate::spectral::eigh;
    use ndarray::{array, Array};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn rand_matrix(seed: u64, rows: usize, cols: usize) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array::from_shape_simple_fn((rows, cols), || StandardNormal.sample(&mut rng))
    }

    fn bundle_with_g(k_tilde: Array2<f64>, g: Array1<f64>) -> GramBundle<f64> {
        GramBundle { k_phi: k_tilde.clone(), k_tilde, g_keys: g, standardized: false }
    }

    /// `v̇_jd = a_dj / g_j − (1/N) Σ_j' a_dj' / g_j` term by term.
    fn scalar_form(a: &Array2<f64>, g: &Array1<f64>) -> Array2<f64> {
        let (n, dv) = a.dim();
        Array2::from_shape_fn((n, dv), |(j, d)| {
            let mut mean_term = 0.0;
            for jj in 0..n {
                mean_term += a[[jj, d]] / g[j];
            }
            a[[j, d]] / g[j] - mean_term / n as f64
        })
    }

    #[test]
    fn two_token_case() {
        let kt = array![[0.5, -0.5], [-0.5, 0.5]];
        let b = bundle_with_g(kt.clone(), array![1.0, 1.0]);
        let r = build_vdot(&b, &eigh(&kt).unwrap(), 1).unwrap();
        let h = std::f64::consts::FRAC_1_SQRT_2;
        assert!((&r.v_dot - &array![[h], [-h]]).iter().all(|x| x.abs() < 1e-15));
    }

    #[test]
    fn constant_g_centers_and_scales() {
        let keys = rand_matrix(1, 7, 3);
        let mut b = gram(&keys, false).unwrap();
        b.g_keys.fill(4.0);
        let eig = eigh(&b.k_tilde).unwrap();
        let r = build_vdot(&b, &eig, 3).unwrap();
        let a = eig.eigenvectors.slice(s![.., ..3]).to_owned();
        let expect = (&a - &a.mean_axis(ndarray::Axis(0)).unwrap()) / 4.0;
        for (x, y) in r.v_dot.iter().zip(expect.iter()) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn matrix_form_matches_scalar_form() {
        let keys = rand_matrix(2, 8, 4);
        let b = gram(&keys, false).unwrap();
        let eig = eigh(&b.k_tilde).unwrap();
        let r = build_vdot(&b, &eig, 4).unwrap();
        let oracle = scalar_form(&r.a_top, &b.g_keys);
        for (x, y) in r.v_dot.iter().zip(oracle.iter()) {
            assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn rejects_too_many_columns() {
        let keys = rand_matrix(3, 4, 2);
        let b = gram(&keys, false).unwrap();
        let eig = eigh(&b.k_tilde).unwrap();
        let err = build_vdot(&b, &eig, 5).unwrap_err().to_string();
        assert!(err.contains("d_v exceeds"));
    }

    proptest! {
        #[test]
        fn structural_invariants(seed in 0u64..100_000, n in 3usize..14) {
            let keys = rand_matrix(seed, n, 3);
            let b = gram(&keys, false).unwrap();
            let eig = eigh(&b.k_tilde).unwrap();
            let dv = n / 2;
            let r = build_vdot(&b, &eig, dv).unwrap();
            let ata = r.a_top.t().dot(&r.a_top);
            for ((i, j), x) in ata.indexed_iter() {
                let e = if i == j { 1.0 } else { 0.0 };
                prop_assert!((x - e).abs() <= 1e-8);
            }
            // G⁻¹ V̇ = (I − 1_N) A has zero column means
            for (col, acol) in r.v_dot.columns().into_iter().zip(r.a_top.columns()) {
                let unscaled: Array1<f64> = &col * &b.g_keys;
                let norm = acol.dot(&acol).sqrt();
                prop_assert!(unscaled.mean().unwrap().abs() <= 1e-10 * norm);
            }
            prop_assert!(r.v_dot.iter().all(|x| x.is_finite()));

            let mut flipped = eig.clone();
            flipped.eigenvectors.column_mut(0).mapv_inplace(|x| -x);
            let rf = build_vdot(&b, &flipped, dv).unwrap();
            for j in 0..n {
                prop_assert_eq!(rf.v_dot[[j, 0]], -r.v_dot[[j, 0]]);
            }
        }
    }
}
