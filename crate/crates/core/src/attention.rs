//! Reference single-head attention, synthetic dump generation and the
//! planted KPCA control.

use ndarray::{Array2, ArrayView1, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::container::{AttentionDump, DumpSet};
use crate::error::{Error, Result};
use crate::kernel;
use crate::kpca;
use crate::scalar::Scalar;
use crate::spectral;

/// Projection weights of one attention head.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionWeights<T> {
    /// `d_q x d`
    pub w_q: Array2<T>,
    /// `d_q x d`
    pub w_k: Array2<T>,
    /// `d_v x d`
    pub w_v: Array2<T>,
}

impl<T: Scalar> AttentionWeights<T> {
    /// Embedding dimension.
    pub fn d(&self) -> usize {
        self.w_q.ncols()
    }

    fn check(&self) -> Result<()> {
        let d = self.d();
        if self.w_k.dim() != self.w_q.dim() {
            return Err(Error::Shape(format!(
                "W_K {:?} differs from W_Q {:?}",
                self.w_k.dim(),
                self.w_q.dim()
            )));
        }
        if self.w_v.ncols() != d {
            return Err(Error::Shape(format!("W_V has {} columns, expected {d}", self.w_v.ncols())));
        }
        for (name, m) in [("W_Q", &self.w_q), ("W_K", &self.w_k), ("W_V", &self.w_v)] {
            if !m.iter().all(|x| x.is_finite()) {
                return Err(Error::NonFinite(format!("{name} not finite")));
            }
        }
        Ok(())
    }
}

/// Row-wise softmax of `Q Kᵀ / sqrt(d_q)`.
pub fn attention_weights<T: Scalar>(q: &Array2<T>, k: &Array2<T>) -> Array2<T> {
    let scale = T::from_usize_(q.ncols()).sqrt();
    let mut scores = q.dot(&k.t()) / scale;
    for mut row in scores.rows_mut() {
        let max = row.fold(T::neg_infinity(), |m, &x| m.max(x));
        row.mapv_inplace(|x| (x - max).exp());
        let sum = row.sum();
        row /= sum;
    }
    scores
}

/// `softmax(Q Kᵀ / sqrt(d_q)) V`.
pub fn attend<T: Scalar>(q: &Array2<T>, k: &Array2<T>, v: &Array2<T>) -> Array2<T> {
    attention_weights(q, k).dot(v)
}

/// Runs one head over `x` (`N x d`). The returned dump has empty labels.
pub fn forward<T: Scalar>(x: &Array2<T>, w: &AttentionWeights<T>) -> Result<AttentionDump<T>> {
    w.check()?;
    if x.ncols() != w.d() {
        return Err(Error::Shape(format!(
            "input has {} columns, weights expect d = {}",
            x.ncols(),
            w.d()
        )));
    }
    if !x.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("X not finite".into()));
    }
    let q = x.dot(&w.w_q.t());
    let k = x.dot(&w.w_k.t());
    let v = x.dot(&w.w_v.t());
    let h = attend(&q, &k, &v);
    Ok(AttentionDump {
        model_id: String::new(),
        sample_id: String::new(),
        layer: 0,
        head: 0,
        q,
        k,
        v,
        h: Some(h),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthesisConfig {
    pub model_id: String,
    pub n_tokens: usize,
    /// Embedding dimension.
    pub d: usize,
    pub d_q: usize,
    pub d_v: usize,
    pub layers: u32,
    pub heads: u32,
    pub samples: usize,
    pub seed: u64,
    /// Std of the weight entries; `None` means `1 / sqrt(d)`.
    pub weight_scale: Option<f64>,
    /// Std of the input entries.
    pub input_scale: f64,
}

impl Default for SynthesisConfig {
    fn default() -> Self {
        SynthesisConfig {
            model_id: "synthetic".into(),
            n_tokens: 16,
            d: 32,
            d_q: 8,
            d_v: 8,
            layers: 2,
            heads: 2,
            samples: 1,
            seed: 0,
            weight_scale: None,
            input_scale: 1.0,
        }
    }
}

impl SynthesisConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("n_tokens", self.n_tokens),
            ("d", self.d),
            ("d_q", self.d_q),
            ("d_v", self.d_v),
            ("layers", self.layers as usize),
            ("heads", self.heads as usize),
            ("samples", self.samples),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::Validation(format!("{name} must be >= 1")));
            }
        }
        if self.n_tokens < 2 {
            return Err(Error::Validation("n_tokens must be >= 2".into()));
        }
        if self.d_v > self.n_tokens {
            return Err(Error::Validation(format!(
                "d_v exceeds n_tokens ({} > {})",
                self.d_v, self.n_tokens
            )));
        }
        let weight_scale = self.weight_scale();
        if !(weight_scale > 0.0 && weight_scale.is_finite()) {
            return Err(Error::Validation("weight_scale must be > 0".into()));
        }
        if !(self.input_scale > 0.0 && self.input_scale.is_finite()) {
            return Err(Error::Validation("input_scale must be > 0".into()));
        }
        Ok(())
    }

    pub fn weight_scale(&self) -> f64 {
        self.weight_scale.unwrap_or_else(|| 1.0 / (self.d as f64).sqrt())
    }
}

fn normal_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || {
        let z: f64 = StandardNormal.sample(rng);
        z * scale
    })
}

/// Generates one dump per (sample, layer, head).
///
/// Weights are fixed per (layer, head) and shared across samples; each
/// (sample, layer) draws its own input. Every draw comes from its own
/// ChaCha stream, so output depends only on the config.
pub fn gen_synthetic(cfg: &SynthesisConfig) -> Result<DumpSet> {
    cfg.validate()?;
    let ws = cfg.weight_scale();
    let mut dumps = Vec::with_capacity(cfg.samples * (cfg.layers * cfg.heads) as usize);

    let mut weights = Vec::with_capacity(cfg.layers as usize);
    for layer in 0..cfg.layers {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(1 + layer as u64);
        let heads: Vec<AttentionWeights<f64>> = (0..cfg.heads)
            .map(|_| AttentionWeights {
                w_q: normal_matrix(&mut rng, cfg.d_q, cfg.d, ws),
                w_k: normal_matrix(&mut rng, cfg.d_q, cfg.d, ws),
                w_v: normal_matrix(&mut rng, cfg.d_v, cfg.d, ws),
            })
            .collect();
        weights.push(heads);
    }

    for sample in 0..cfg.samples {
        let sample_id = format!("sample-{sample:03}");
        for layer in 0..cfg.layers {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream((1u64 << 32) + (sample as u64) * cfg.layers as u64 + layer as u64);
            let x = normal_matrix(&mut rng, cfg.n_tokens, cfg.d, cfg.input_scale);
            for head in 0..cfg.heads {
                let mut dump = forward(&x, &weights[layer as usize][head as usize])?;
                dump.model_id = cfg.model_id.clone();
                dump.sample_id = sample_id.clone();
                dump.layer = layer;
                dump.head = head;
                dump.validate()?;
                dumps.push(dump);
            }
        }
    }
    DumpSet::from_dumps(dumps)
}

/// Replaces V with the KPCA value matrix built from the dump's own keys
/// and recomputes H from the new V. Keys are not standardized.
pub fn plant_kpca_control<T: Scalar>(dump: &AttentionDump<T>) -> Result<AttentionDump<T>> {
    let bundle = kernel::gram(&dump.k, false)?;
    let spectrum = spectral::eigh(&bundle.k_tilde)?;
    let kpca = kpca::build_vdot(&bundle, &spectrum, dump.d_v())?;
    let h = attend(&dump.q, &dump.k, &kpca.v_dot);
    Ok(AttentionDump { v: kpca.v_dot, h: Some(h), ..dump.clone() })
}

pub(crate) fn row_norm<T: Scalar>(row: ArrayView1<T>) -> T {
    row.dot(&row).sqrt()
}

/// Largest value-row norm; H rows can never exceed it.
pub fn max_value_norm<T: Scalar>(v: &Array2<T>) -> T {
    v.axis_iter(Axis(0)).map(row_norm).fold(T::zero(), T::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    fn rand_matrix(seed: u64, rows: usize, cols: usize) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        normal_matrix(&mut rng, rows, cols, 1.0)
    }

    fn rand_weights(seed: u64, d: usize, d_q: usize, d_v: usize) -> AttentionWeights<f64> {
        AttentionWeights {
            w_q: rand_matrix(seed, d_q, d) / (d as f64).sqrt(),
            w_k: rand_matrix(seed + 1, d_q, d) / (d as f64).sqrt(),
            w_v: rand_matrix(seed + 2, d_v, d) / (d as f64).sqrt(),
        }
    }

    /// Triple-loop attention with no max subtraction.
    fn naive_attention(q: &Array2<f64>, k: &Array2<f64>, v: &Array2<f64>) -> Array2<f64> {
        let (n, dq) = q.dim();
        let dv = v.ncols();
        let mut h = Array2::zeros((n, dv));
        for i in 0..n {
            let mut w = vec![0.0; n];
            for j in 0..n {
                let mut s = 0.0;
                for c in 0..dq {
                    s += q[[i, c]] * k[[j, c]];
                }
                w[j] = (s / (dq as f64).sqrt()).exp();
            }
            let z: f64 = w.iter().sum();
            for j in 0..n {
                for c in 0..dv {
                    h[[i, c]] += w[j] / z * v[[j, c]];
                }
            }
        }
        h
    }

    #[test]
    fn single_token_attends_to_itself() {
        let x = array![[0.3, -1.2, 0.7]];
        let w = rand_weights(3, 3, 2, 1);
        let dump = forward(&x, &w).unwrap();
        assert_eq!(attention_weights(&dump.q, &dump.k), array![[1.0]]);
        assert_eq!(dump.h.unwrap(), dump.v);
    }

    #[test]
    fn zero_input_gives_uniform_weights() {
        let x = Array2::<f64>::zeros((4, 3));
        let dump = forward(&x, &rand_weights(9, 3, 2, 2)).unwrap();
        assert!(dump.q.iter().chain(dump.h.as_ref().unwrap().iter()).all(|&v| v == 0.0));
        let a = attention_weights(&dump.q, &dump.k);
        assert!(a.iter().all(|&w| w == 0.25));
    }

    #[test]
    fn forward_matches_naive_loop() {
        let x = rand_matrix(42, 5, 8);
        let dump = forward(&x, &rand_weights(42, 8, 4, 3)).unwrap();
        let naive = naive_attention(&dump.q, &dump.k, &dump.v);
        let diff = (&naive - dump.h.as_ref().unwrap()).mapv(f64::abs).fold(0.0, |a: f64, &b| a.max(b));
        assert!(diff <= 1e-12, "max diff {diff}");
    }

    #[test]
    fn forward_rejects_bad_shapes() {
        let x = rand_matrix(1, 5, 7);
        assert!(matches!(forward(&x, &rand_weights(1, 8, 4, 3)), Err(Error::Shape(_))));
        let mut x = rand_matrix(1, 5, 8);
        x[[0, 0]] = f64::INFINITY;
        assert!(matches!(forward(&x, &rand_weights(1, 8, 4, 3)), Err(Error::NonFinite(_))));
    }

    #[test]
    fn gen_is_deterministic_and_counts() {
        let cfg = SynthesisConfig { layers: 2, heads: 3, n_tokens: 6, d: 5, d_q: 3, d_v: 2, ..Default::default() };
        let a = gen_synthetic(&cfg).unwrap();
        let b = gen_synthetic(&cfg).unwrap();
        assert_eq!(a.dumps.len(), 6);
        assert_eq!(a, b);
        let c = gen_synthetic(&SynthesisConfig { seed: 1, ..cfg }).unwrap();
        assert_ne!(a.dumps[0].q, c.dumps[0].q);
    }

    #[test]
    fn gen_output_is_valid_for_many_seeds() {
        for seed in 0..1000 {
            let cfg = SynthesisConfig {
                n_tokens: 4,
                d: 4,
                d_q: 2,
                d_v: 2,
                layers: 1,
                heads: 1,
                seed,
                ..Default::default()
            };
            for d in gen_synthetic(&cfg).unwrap().dumps {
                d.validate().unwrap();
            }
        }
    }

    #[test]
    fn gen_rejects_dv_above_n() {
        let cfg = SynthesisConfig { n_tokens: 4, d_v: 5, ..Default::default() };
        assert!(gen_synthetic(&cfg).unwrap_err().to_string().contains("d_v exceeds"));
    }

    #[test]
    fn planted_single_column_is_the_eigenvector() {
        let mut dump = forward(&rand_matrix(5, 2, 3), &rand_weights(5, 3, 2, 1)).unwrap();
        dump.model_id = "m".into();
        let planted = plant_kpca_control(&dump).unwrap();
        // N = 2: the top eigenvector of the centered Gram is ±[1, -1]/sqrt(2)
        let bundle = kernel::gram(&dump.k, false).unwrap();
        let a = std::f64::consts::FRAC_1_SQRT_2;
        let expect_abs = [a / bundle.g_keys[0], a / bundle.g_keys[1]];
        for (got, want) in planted.v.column(0).iter().zip(expect_abs) {
            assert!((got.abs() - want).abs() < 1e-15);
        }
        assert!(planted.v[[0, 0]] * planted.v[[1, 0]] < 0.0);
    }

    #[test]
    fn planting_is_idempotent() {
        let cfg = SynthesisConfig { n_tokens: 12, d: 8, d_q: 4, d_v: 3, layers: 1, heads: 1, seed: 7, ..Default::default() };
        let dump = gen_synthetic(&cfg).unwrap().dumps.remove(0);
        let once = plant_kpca_control(&dump).unwrap();
        let twice = plant_kpca_control(&once).unwrap();
        for (a, b) in once.v.columns().into_iter().zip(twice.v.columns()) {
            let cos = a.dot(&b) / (a.dot(&a).sqrt() * b.dot(&b).sqrt());
            assert!((cos.abs() - 1.0).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn weights_are_probability_rows(seed in 0u64..10_000, n in 1usize..12) {
            let x = rand_matrix(seed, n, 6) * 3.0;
            let dump = forward(&x, &rand_weights(seed, 6, 4, 2)).unwrap();
            let a = attention_weights(&dump.q, &dump.k);
            for row in a.rows() {
                prop_assert!(row.iter().all(|&w| w >= 0.0));
                prop_assert!((row.sum() - 1.0).abs() <= 1e-12);
            }
            let bound = max_value_norm(&dump.v);
            for row in dump.h.as_ref().unwrap().rows() {
                prop_assert!(row_norm(row) <= bound * (1.0 + 1e-12));
            }
        }

        #[test]
        fn forward_is_permutation_equivariant(seed in 0u64..10_000) {
            let n = 7;
            let x = rand_matrix(seed, n, 5);
            let w = rand_weights(seed, 5, 3, 3);
            let mut perm: Vec<usize> = (0..n).collect();
            perm.rotate_left((seed % n as u64) as usize);
            perm.swap(0, n - 1);
            let xp = x.select(Axis(0), &perm);
            let h = forward(&x, &w).unwrap().h.unwrap();
            let hp = forward(&xp, &w).unwrap().h.unwrap();
            let diff = (&h.select(Axis(0), &perm) - &hp).mapv(f64::abs).fold(0.0, |a: f64, &b| a.max(b));
            prop_assert!(diff <= 1e-12);
        }
    }
}
