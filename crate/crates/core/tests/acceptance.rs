//! Acceptance suite: one PASS/FAIL line per criterion.

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use itertools::Itertools;
use kpca_audit::attention::{gen_synthetic, plant_kpca_control, SynthesisConfig};
use kpca_audit::gamma::{gamma_comparison, median_rel_diff, DEFAULT_FLOOR};
use kpca_audit::kernel::gram;
use kpca_audit::kpca::build_vdot;
use kpca_audit::projection::{cross_term, j_full_toy};
use kpca_audit::similarity::{compare, kernel_cka, lap_solve, linear_cka, Bandwidth, CompareOptions};
use kpca_audit::spectral::{eigh, householder_q};
use ndarray::{array, Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn verdict(id: u32, name: &str, pass: bool, detail: String) {
    println!("criterion {id} [{}] {name}: {detail}", if pass { "PASS" } else { "FAIL" });
    assert!(pass, "criterion {id} ({name}) failed: {detail}");
}

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.sample(StandardNormal))
}

fn elapsed_within(start: Instant, limit: u64) -> (bool, Duration) {
    let e = start.elapsed();
    (e <= Duration::from_secs(limit), e)
}

#[test]
fn criterion_1_planted_control_recovery() {
    let start = Instant::now();
    let cfg = SynthesisConfig {
        n_tokens: 32,
        d: 32,
        d_q: 16,
        d_v: 8,
        layers: 5,
        heads: 5,
        samples: 2,
        seed: 2024,
        ..Default::default()
    };
    let set = gen_synthetic(&cfg).unwrap();
    assert_eq!(set.dumps.len(), 50);
    let mut worst = [f64::INFINITY; 4];
    let mut all_entrywise = true;
    for d in &set.dumps {
        let planted = plant_kpca_control(d).unwrap();
        let s = compare(&planted, CompareOptions::default()).unwrap();
        for (w, x) in worst.iter_mut().zip([s.mdc, s.moc, s.lcka, s.kcka]) {
            *w = w.min(x);
        }
        all_entrywise &= s.entrywise_pass;
    }
    let (fast, t) = elapsed_within(start, 30);
    let pass = worst[0] >= 0.999 && worst[1] >= 0.999 && worst[2] >= 0.999 && worst[3] >= 0.99 && all_entrywise && fast;
    verdict(
        1,
        "planted-control recovery",
        pass,
        format!(
            "min MDC {:.6} MOC {:.6} LCKA {:.6} KCKA {:.6}, entrywise all {all_entrywise}, {t:.2?}",
            worst[0], worst[1], worst[2], worst[3]
        ),
    );
}

#[test]
fn criterion_2_eigen_contract() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut worst_res, mut worst_trace, mut worst_psd) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..200 {
        let n = rng.random_range(2..=64);
        let d_q = rng.random_range(1..=16);
        let scale = rng.random_range(0.1..1.5);
        let keys = gaussian(&mut rng, n, d_q) * scale;
        let bundle = gram(&keys, false).unwrap();
        let k = &bundle.k_tilde;
        let s = eigh(k).unwrap();
        let fro = k.iter().map(|x| x * x).sum::<f64>().sqrt();
        for (d, lam) in s.eigenvalues.iter().enumerate() {
            let a = s.eigenvectors.column(d);
            let r = &k.dot(&a) - &(&a * *lam);
            let res = r.dot(&r).sqrt() / fro.max(f64::MIN_POSITIVE);
            worst_res = worst_res.max(res);
        }
        let trace: f64 = k.diag().sum();
        let sum: f64 = s.eigenvalues.sum();
        worst_trace = worst_trace.max((sum - trace).abs() / trace.abs().max(f64::MIN_POSITIVE));
        let max = s.eigenvalues[0];
        let min = s.eigenvalues[n - 1];
        if max > 0.0 {
            worst_psd = worst_psd.max(-min / max);
        }
    }
    let (fast, t) = elapsed_within(start, 60);
    let pass = worst_res <= 1e-8 && worst_trace <= 1e-10 && worst_psd <= 1e-10 && fast;
    verdict(
        2,
        "eigen contract",
        pass,
        format!("worst residual {worst_res:.2e}·‖K̃‖_F, trace rel err {worst_trace:.2e}, min λ/max λ {:.2e}, {t:.2?}", -worst_psd),
    );
}

#[test]
fn criterion_3_lap_optimality() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut mismatches = 0;
    for _ in 0..500 {
        let cost = Array2::from_shape_simple_fn((7, 7), || rng.random_range(0.0..1.0));
        let (assignment, total) = lap_solve(cost.view()).unwrap();
        let best = (0..7)
            .permutations(7)
            .map(|p| p.iter().enumerate().map(|(r, &c)| cost[[r, c]]).sum::<f64>())
            .fold(f64::INFINITY, f64::min);
        let reported: f64 = assignment.iter().enumerate().map(|(r, &c)| cost[[r, c]]).sum();
        if (total - best).abs() > 1e-12 || (reported - best).abs() > 1e-12 {
            mismatches += 1;
        }
    }
    let (fast, t) = elapsed_within(start, 10);
    verdict(3, "LAP optimality", mismatches == 0 && fast, format!("{mismatches} of 500 differ from exhaustive search, {t:.2?}"));
}

#[test]
fn criterion_4_cross_term_witness() {
    let h = array![1.0, 2.0];
    let u = array![[1.0, -1.0], [1.0, 0.0]];
    let swapped = array![[-1.0, 1.0], [0.0, 1.0]];
    let a = cross_term(h.view(), u.view()).unwrap();
    let b = cross_term(h.view(), swapped.view()).unwrap();
    verdict(4, "cross-term witness", a == 2.0 && b == 5.0, format!("cross terms {a} and {b}"));
}

#[test]
fn criterion_5_orthonormal_reduction() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let m = rng.random_range(1..=12);
        let d_v = rng.random_range(1..=m);
        let u = householder_q(&gaussian(&mut rng, m, d_v));
        let phi: Array1<f64> = gaussian(&mut rng, m, 1).column(0).to_owned();
        let h = u.t().dot(&phi);
        let j = j_full_toy(h.view(), u.view(), phi.view()).unwrap();
        let reduced = phi.dot(&phi) - h.dot(&h);
        worst = worst.max((j.total - reduced).abs());
    }
    verdict(5, "orthonormal reduction", worst <= 1e-10, format!("worst |J − (‖φ‖² − ‖h‖²)| {worst:.2e}"));
}

#[test]
fn criterion_6_gamma_separation() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst_true = 0.0f64;
    let mut worst_ratio = f64::INFINITY;
    for trial in 0..20 {
        let b = gaussian(&mut rng, 32, 32);
        let m = b.dot(&b.t());
        let m = (&m + &m.t()) * 0.5;
        let s = eigh(&m).unwrap();
        let cmp = gamma_comparison(m.view(), &s, 0.1, trial, DEFAULT_FLOOR).unwrap();
        let t = median_rel_diff(&cmp.true_stats);
        let p = median_rel_diff(&cmp.perturbed_stats);
        worst_true = worst_true.max(t);
        worst_ratio = worst_ratio.min(p / t.max(f64::MIN_POSITIVE));
    }
    let pass = worst_true <= 1e-8 && worst_ratio >= 1e3;
    verdict(6, "γ separation", pass, format!("worst true median {worst_true:.2e}, smallest perturbed/true ratio {worst_ratio:.2e}"));
}

fn random_orthogonal(rng: &mut ChaCha8Rng, d: usize) -> Array2<f64> {
    householder_q(&gaussian(rng, d, d))
}

#[test]
fn criterion_7_cka_invariances() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst_inv = 0.0f64;
    for _ in 0..100 {
        let n = rng.random_range(4..=24);
        let d = rng.random_range(1..=8);
        let x = gaussian(&mut rng, n, d);
        let r = random_orthogonal(&mut rng, d);
        let c = rng.random_range(0.01..100.0) * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        let rot = linear_cka(x.view(), x.dot(&r).view()).unwrap();
        let scaled = linear_cka(x.view(), (&x * c).view()).unwrap();
        worst_inv = worst_inv.max((rot - 1.0).abs()).max((scaled - 1.0).abs());
    }
    let mut out_of_range = 0;
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for _ in 0..10_000 {
        let n = rng.random_range(2..=12);
        let (dx, dy) = (rng.random_range(1..=4), rng.random_range(1..=4));
        let x = gaussian(&mut rng, n, dx);
        let y = gaussian(&mut rng, n, dy);
        for v in [
            linear_cka(x.view(), y.view()).unwrap(),
            kernel_cka(x.view(), y.view(), Bandwidth::Median).unwrap(),
        ] {
            lo = lo.min(v);
            hi = hi.max(v);
            if !(-1e-9..=1.0 + 1e-9).contains(&v) {
                out_of_range += 1;
            }
        }
    }
    let pass = worst_inv <= 1e-9 && out_of_range == 0;
    verdict(
        7,
        "CKA invariances",
        pass,
        format!("worst invariance error {worst_inv:.2e}; range [{lo:.3e}, {hi:.6}] with {out_of_range} outside"),
    );
}

/// `V̇[j, d] = a_jd / g_j − (1/N) Σ_j' a_j'd / g_j`, with `g` summed directly.
fn vdot_scalar(keys: &Array2<f64>, a: &Array2<f64>, d_v: usize) -> Array2<f64> {
    let (n, d_q) = keys.dim();
    let g: Vec<f64> = (0..n)
        .map(|j| (0..n).map(|jp| (keys.row(j).dot(&keys.row(jp)) / (d_q as f64).sqrt()).exp()).sum())
        .collect();
    let mut out = Array2::zeros((n, d_v));
    for d in 0..d_v {
        let mean: f64 = (0..n).map(|jp| a[[jp, d]]).sum::<f64>() / n as f64;
        for j in 0..n {
            out[[j, d]] = a[[j, d]] / g[j] - mean / g[j];
        }
    }
    out
}

#[test]
fn criterion_8_matrix_scalar_vdot() {
    let mut worst = 0.0f64;
    let mut count = 0;
    for seed in 0..25u64 {
        let cfg = SynthesisConfig { n_tokens: 8 + (seed as usize % 17), d: 16, d_q: 8, d_v: 4, layers: 2, heads: 2, seed, ..Default::default() };
        for dump in gen_synthetic(&cfg).unwrap().dumps {
            let bundle = gram(&dump.k, false).unwrap();
            let s = eigh(&bundle.k_tilde).unwrap();
            let r = build_vdot(&bundle, &s, dump.d_v()).unwrap();
            let oracle = vdot_scalar(&dump.k, &s.eigenvectors, dump.d_v());
            let err = (&r.v_dot - &oracle).iter().fold(0.0f64, |m, x| m.max(x.abs()));
            worst = worst.max(err);
            count += 1;
        }
    }
    assert_eq!(count, 100);
    verdict(8, "matrix vs scalar V̇", worst <= 1e-12, format!("worst deviation {worst:.2e} over {count} dumps"));
}

fn cli(args: &[&str]) -> (i32, Vec<u8>) {
    let out = Command::new(env!("CARGO_BIN_EXE_kpca-audit")).args(args).output().unwrap();
    (out.status.code().unwrap_or(-1), out.stdout)
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect();
    files.sort();
    files
}

#[test]
fn criterion_9_cli_determinism() {
    let tmp = tempfile::tempdir().unwrap();
    let p = |s: &str| tmp.path().join(s).to_string_lossy().into_owned();
    let gen = |out: &str| {
        cli(&["gen", "--layers", "2", "--heads", "2", "--n", "12", "--d", "16", "--dq", "8", "--dv", "4", "--samples", "3", "--seed", "11", "--out", out])
    };
    let mut diffs = Vec::new();
    let mut codes = Vec::new();

    let (c1, _) = gen(&p("gen_a"));
    let (c2, _) = gen(&p("gen_b"));
    codes.extend([c1, c2]);
    if dir_bytes(Path::new(&p("gen_a"))) != dir_bytes(Path::new(&p("gen_b"))) {
        diffs.push("gen");
    }
    let (c1, _) = cli(&["plant", "--in", &p("gen_a"), "--out", &p("plant_a")]);
    let (c2, _) = cli(&["plant", "--in", &p("gen_a"), "--out", &p("plant_b")]);
    codes.extend([c1, c2]);
    if dir_bytes(Path::new(&p("plant_a"))) != dir_bytes(Path::new(&p("plant_b"))) {
        diffs.push("plant");
    }

    let reports: [(&str, Vec<&str>); 6] = [
        ("similarity", vec!["similarity"]),
        ("similarity_max", vec!["similarity", "--aggregate", "max"]),
        ("spectrum", vec!["spectrum"]),
        ("spectrum_std", vec!["spectrum", "--standardize"]),
        ("projection", vec!["projection", "--dv-scale", "auto"]),
        ("gamma", vec!["gamma", "--sigma", "0.1", "--seed", "3"]),
    ];
    let input = p("plant_a");
    for (name, base) in &reports {
        let mut outputs = Vec::new();
        for run in ["a", "b"] {
            let out = p(&format!("{name}_{run}.csv"));
            let mut args = base.clone();
            args.extend(["--in", &input, "--out", &out]);
            let (code, stdout) = cli(&args);
            codes.push(code);
            let csv = std::fs::read(&out).unwrap();
            let sidecar = std::fs::read(Path::new(&out).with_extension("json")).unwrap();
            outputs.push((stdout, csv, sidecar));
        }
        if outputs[0] != outputs[1] {
            diffs.push(name);
        }
    }
    let (c1, s1) = cli(&["selftest"]);
    let (c2, s2) = cli(&["selftest"]);
    codes.extend([c1, c2]);
    if s1 != s2 {
        diffs.push("selftest");
    }
    let all_zero = codes.iter().all(|&c| c == 0);
    verdict(
        9,
        "CLI determinism",
        diffs.is_empty() && all_zero,
        format!("{} runs, exit codes all 0: {all_zero}, differing commands: {diffs:?}", codes.len()),
    );
}
