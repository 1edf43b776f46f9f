//! Command-line orchestration: generate or plant dump sets, run each
//! analysis over a set, and write CSV reports with a JSON sidecar.
//!
//! Exit codes: 0 on success, 1 on a fatal error, 2 when some dumps were
//! skipped. Every skipped dump produces one JSON error record on stderr.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde_json::json;

use crate::attention::{gen_synthetic, plant_kpca_control, SynthesisConfig};
use crate::container::{AttentionDump, DumpSet};
use crate::error::{Error, Result};
use crate::gamma::{self, gamma_comparison};
use crate::kernel::{self, DvScale};
use crate::projection::{self, j_mae, ProjStats};
use crate::similarity::{self, Aggregate, CompareOptions};
use crate::spectral::{self, eigh, EigStatSummary};

/// Environment variable capping the worker pool size.
pub const THREADS_ENV: &str = "KPCA_AUDIT_THREADS";

pub const SIMILARITY_COLUMNS: [&str; 7] =
    ["model_id", "n_dumps", "MDC", "MOC", "LCKA", "KCKA", "entrywise_pass_fraction"];
pub const SPECTRUM_COLUMNS: [&str; 11] = [
    "model_id", "standardized", "max", "max_std", "min", "min_std", "mean", "mean_std", "median",
    "median_std", "n_samples",
];
pub const NORM_SERIES_COLUMNS: [&str; 7] =
    ["model_id", "layer", "norm_family", "median", "p2_5", "p97_5", "n_values"];
pub const GAMMA_COLUMNS: [&str; 11] = [
    "model_id", "sample_id", "layer", "head", "eigen_rank", "eigenvalue", "mean_abs_diff",
    "std_abs_diff", "mean_rel_diff", "masked_count", "source",
];

#[derive(Debug, Parser)]
#[command(name = "kpca-audit", version, about = "Kernel-PCA audit of self-attention dumps")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// Generate a synthetic dump set.
    Gen(GenArgs),
    /// Replace every dump's V with its KPCA value matrix.
    Plant(IoArgs),
    /// MDC / MOC / LCKA / KCKA / entrywise report per model.
    Similarity {
        #[command(flatten)]
        io: IoArgs,
        #[arg(long, default_value = "mean")]
        aggregate: Aggregate,
    },
    /// Rank-wise Gram eigenvalue statistics per model.
    Spectrum {
        #[command(flatten)]
        io: IoArgs,
        #[arg(long)]
        standardize: bool,
    },
    /// Per-layer distributions of ‖φ(q)‖² and ‖h‖².
    Projection {
        #[command(flatten)]
        io: IoArgs,
        #[arg(long = "dv-scale", default_value = "auto")]
        dv_scale: DvScale,
    },
    /// γ-vector audit of true vs perturbed eigenvectors.
    Gamma {
        #[command(flatten)]
        io: IoArgs,
        #[arg(long, default_value_t = 0.1)]
        sigma: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Built-in oracle checks.
    Selftest,
}

#[derive(Debug, Clone, Args)]
pub struct IoArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long = "out")]
    pub output: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct GenArgs {
    #[arg(long, default_value_t = 2)]
    pub layers: u32,
    #[arg(long, default_value_t = 2)]
    pub heads: u32,
    /// Tokens per sample.
    #[arg(long, default_value_t = 16)]
    pub n: usize,
    /// Embedding dimension.
    #[arg(long, default_value_t = 32)]
    pub d: usize,
    #[arg(long, default_value_t = 8)]
    pub dq: usize,
    #[arg(long, default_value_t = 8)]
    pub dv: usize,
    #[arg(long, default_value_t = 1)]
    pub samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "synthetic")]
    pub model: String,
    #[arg(long)]
    pub out: PathBuf,
}

impl GenArgs {
    pub fn synthesis_config(&self) -> SynthesisConfig {
        SynthesisConfig {
            model_id: self.model.clone(),
            n_tokens: self.n,
            d: self.d,
            d_q: self.dq,
            d_v: self.dv,
            layers: self.layers,
            heads: self.heads,
            samples: self.samples,
            seed: self.seed,
            weight_scale: None,
            input_scale: 1.0,
        }
    }
}

/// Worker count from [`THREADS_ENV`], if set to a positive integer.
pub fn thread_cap() -> Option<usize> {
    std::env::var(THREADS_ENV).ok()?.trim().parse().ok().filter(|&n| n > 0)
}

/// Runs a command, writing human output to `out` and error records to `err`.
pub fn run(cmd: &Command, out: &mut dyn Write, err: &mut dyn Write) -> i32 {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = thread_cap() {
        builder = builder.num_threads(n);
    }
    let pool = match builder.build() {
        Ok(p) => p,
        Err(e) => {
            emit_error(err, "thread_pool", &e.to_string(), None);
            return 1;
        }
    };
    let mut buf = Vec::new();
    let result = pool.install(|| dispatch(cmd, &mut buf));
    let _ = out.write_all(&buf);
    match result {
        Ok(outcome) => {
            for (context, e) in &outcome.skipped {
                emit_error(err, e.kind(), &e.to_string(), Some(context));
            }
            if outcome.failed_checks > 0 {
                1
            } else if outcome.skipped.is_empty() {
                0
            } else {
                2
            }
        }
        Err(e) => {
            emit_error(err, e.kind(), &e.to_string(), None);
            1
        }
    }
}

fn emit_error(err: &mut dyn Write, kind: &str, message: &str, context: Option<&str>) {
    let record = json!({ "error": kind, "message": message, "context": context });
    let _ = writeln!(err, "{record}");
}

/// `(context, error)` for every dump left out of a report.
type Skipped = Vec<(String, Error)>;
type Check = (&'static str, fn() -> std::result::Result<String, String>);

#[derive(Default)]
struct Outcome {
    skipped: Skipped,
    failed_checks: usize,
}

fn dispatch(cmd: &Command, out: &mut dyn Write) -> Result<Outcome> {
    match cmd {
        Command::Gen(args) => {
            let set = gen_synthetic(&args.synthesis_config())?;
            set.save(&args.out)?;
            let _ = writeln!(out, "wrote {} dumps to {}", set.dumps.len(), args.out.display());
            Ok(Outcome::default())
        }
        Command::Plant(io) => plant(io, out),
        Command::Similarity { io, aggregate } => similarity_report(io, *aggregate, out),
        Command::Spectrum { io, standardize } => spectrum_report(io, *standardize, out),
        Command::Projection { io, dv_scale } => projection_report(io, *dv_scale, out),
        Command::Gamma { io, sigma, seed } => gamma_report(io, *sigma, *seed, out),
        Command::Selftest => Ok(Outcome { skipped: Vec::new(), failed_checks: selftest(out) }),
    }
}

/// Loads what it can; unreadable files become skip records.
fn load(dir: &Path) -> Result<(DumpSet, Skipped)> {
    let (dumps, failures) = DumpSet::load_lenient(dir)?;
    let set = DumpSet::with_manifest(dir, dumps)?;
    Ok((set, failures))
}

/// Runs `f` over every dump in parallel, keeping key order and splitting
/// successes from failures.
fn per_dump<R: Send>(
    set: &DumpSet,
    f: impl Fn(&AttentionDump) -> Result<R> + Sync,
) -> (Vec<(&AttentionDump, R)>, Skipped) {
    let results: Vec<Result<R>> = set.dumps.par_iter().map(&f).collect();
    let mut ok = Vec::new();
    let mut failed = Vec::new();
    for (d, r) in set.dumps.iter().zip(results) {
        match r {
            Ok(v) => ok.push((d, v)),
            Err(e) => failed.push((d.key().to_string(), e)),
        }
    }
    (ok, failed)
}

fn fmt(x: f64) -> String {
    format!("{x}")
}

fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for row in rows {
        w.write_record(row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn sidecar_path(out: &Path) -> PathBuf {
    out.with_extension("json")
}

fn write_sidecar(
    out: &Path,
    command: &str,
    config: serde_json::Value,
    n_dumps: usize,
    skipped: &[(String, Error)],
    extra: serde_json::Value,
) -> Result<()> {
    let skipped: Vec<_> = skipped
        .iter()
        .map(|(ctx, e)| json!({ "context": ctx, "error": e.kind(), "message": e.to_string() }))
        .collect();
    let doc = json!({
        "tool": "kpca-audit",
        "version": env!("CARGO_PKG_VERSION"),
        "command": command,
        "config": config,
        "n_dumps": n_dumps,
        "n_skipped": skipped.len(),
        "skipped": skipped,
        "results": extra,
    });
    let path = sidecar_path(out);
    let mut text = serde_json::to_string_pretty(&doc)?;
    text.push('\n');
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

fn plant(io: &IoArgs, out: &mut dyn Write) -> Result<Outcome> {
    let (set, mut skipped) = load(&io.input)?;
    let (planted, failed) = per_dump(&set, plant_kpca_control);
    skipped.extend(failed);
    let planted = DumpSet { dumps: planted.into_iter().map(|(_, d)| d).collect(), manifest: set.manifest };
    planted.save(&io.output)?;
    let _ = writeln!(out, "planted {} dumps into {}", planted.dumps.len(), io.output.display());
    Ok(Outcome { skipped, failed_checks: 0 })
}

fn group_by_model<'a, R>(items: &'a [(&'a AttentionDump, R)]) -> BTreeMap<&'a str, Vec<&'a (&'a AttentionDump, R)>> {
    let mut map: BTreeMap<&str, Vec<_>> = BTreeMap::new();
    for item in items {
        map.entry(item.0.model_id.as_str()).or_default().push(item);
    }
    map
}

fn similarity_report(io: &IoArgs, how: Aggregate, out: &mut dyn Write) -> Result<Outcome> {
    let (set, mut skipped) = load(&io.input)?;
    let opts = CompareOptions::default();
    let (scores, failed) = per_dump(&set, |d| similarity::compare(d, opts));
    skipped.extend(failed);
    let mut rows = Vec::new();
    let mut table = Vec::new();
    for (model, items) in group_by_model(&scores) {
        let s: Vec<_> = items.iter().map(|(_, s)| s.clone()).collect();
        let row = similarity::aggregate(model, &s, how);
        rows.push(vec![
            row.model_id.clone(),
            row.n_dumps.to_string(),
            fmt(row.mdc),
            fmt(row.moc),
            fmt(row.lcka),
            fmt(row.kcka),
            fmt(row.entrywise_pass_fraction),
        ]);
        let _ = writeln!(
            out,
            "{model}: MDC {:.4} MOC {:.4} LCKA {:.4} KCKA {:.4} entrywise {:.3} ({} dumps)",
            row.mdc, row.moc, row.lcka, row.kcka, row.entrywise_pass_fraction, row.n_dumps
        );
        table.push(row);
    }
    write_csv(&io.output, &SIMILARITY_COLUMNS, &rows)?;
    let config = json!({ "input": io.input, "aggregate": how, "standardize": opts.standardize, "bandwidth": "median" });
    write_sidecar(&io.output, "similarity", config, scores.len(), &skipped, json!(table))?;
    Ok(Outcome { skipped, failed_checks: 0 })
}

fn spectrum_report(io: &IoArgs, standardize: bool, out: &mut dyn Write) -> Result<Outcome> {
    let (set, mut skipped) = load(&io.input)?;
    let (spectra, failed) = per_dump(&set, |d| {
        let bundle = kernel::gram(&d.k, standardize)?;
        Ok(eigh(&bundle.k_tilde)?.eigenvalues.to_vec())
    });
    skipped.extend(failed);
    let mut rows = Vec::new();
    let mut summaries: BTreeMap<String, EigStatSummary> = BTreeMap::new();
    for (model, items) in group_by_model(&spectra) {
        let mut by_sample: BTreeMap<&str, Vec<Vec<f64>>> = BTreeMap::new();
        for (d, s) in items {
            by_sample.entry(d.sample_id.as_str()).or_default().push(s.clone());
        }
        let summary = match spectral::summarize(by_sample) {
            Ok(s) => s,
            Err(e) => {
                skipped.push((format!("model={model}"), e));
                continue;
            }
        };
        rows.push(vec![
            model.to_string(),
            standardize.to_string(),
            fmt(summary.max.mean),
            fmt(summary.max.std),
            fmt(summary.min.mean),
            fmt(summary.min.std),
            fmt(summary.mean.mean),
            fmt(summary.mean.std),
            fmt(summary.median.mean),
            fmt(summary.median.std),
            summary.n_samples.to_string(),
        ]);
        let _ = writeln!(
            out,
            "{model}: max {:.4e} ± {:.2e}, min {:.4e}, mean {:.4e}, median {:.4e} over {} samples",
            summary.max.mean, summary.max.std, summary.min.mean, summary.mean.mean, summary.median.mean, summary.n_samples
        );
        summaries.insert(model.to_string(), summary);
    }
    write_csv(&io.output, &SPECTRUM_COLUMNS, &rows)?;
    let config = json!({ "input": io.input, "standardize": standardize });
    write_sidecar(&io.output, "spectrum", config, spectra.len(), &skipped, json!(summaries))?;
    Ok(Outcome { skipped, failed_checks: 0 })
}

fn projection_report(io: &IoArgs, dv_scale: DvScale, out: &mut dyn Write) -> Result<Outcome> {
    let (set, mut skipped) = load(&io.input)?;
    let (stats, failed) = per_dump(&set, |d| j_mae(d, dv_scale));
    skipped.extend(failed);
    let mut rows = Vec::new();
    let mut summary = BTreeMap::new();
    for (model, items) in group_by_model(&stats) {
        let series = projection::series_from_stats(items.iter().map(|(d, s)| (d.layer, s)))?;
        for r in &series {
            let family = serde_json::to_value(r.norm_family)?;
            rows.push(vec![
                model.to_string(),
                r.layer.to_string(),
                family.as_str().unwrap_or_default().to_string(),
                fmt(r.median),
                fmt(r.p2_5),
                fmt(r.p97_5),
                r.n_values.to_string(),
            ]);
        }
        // each dump (head) weighs equally
        let n = items.len() as f64;
        let mean = |f: fn(&ProjStats<f64>) -> f64| items.iter().map(|(_, s)| f(s)).sum::<f64>() / n;
        let (j, signed) = (mean(|s| s.j_mae), mean(|s| s.j_signed));
        let (rel_phi, rel_h) = (mean(|s| s.rel_err_phi), mean(|s| s.rel_err_h));
        let mean_phi = mean(|s| s.phi_sq.mean().unwrap_or(0.0));
        let mean_h = mean(|s| s.h_sq.mean().unwrap_or(0.0));
        let _ = writeln!(
            out,
            "{model}: J_mae {j:.4e}, mean ‖φ(q)‖² {mean_phi:.4e}, mean ‖h‖² {mean_h:.4e}, rel err φ {rel_phi:.3e} / h {rel_h:.3e}"
        );
        summary.insert(
            model.to_string(),
            json!({
                "n_dumps": items.len(),
                "j_mae": j,
                "j_signed": signed,
                "rel_err_phi": rel_phi,
                "rel_err_h": rel_h,
                "mean_phi_sq": mean_phi,
                "mean_h_sq": mean_h,
            }),
        );
    }
    write_csv(&io.output, &NORM_SERIES_COLUMNS, &rows)?;
    let config = json!({ "input": io.input, "dv_scale": dv_scale.to_string() });
    write_sidecar(&io.output, "projection", config, stats.len(), &skipped, json!(summary))?;
    Ok(Outcome { skipped, failed_checks: 0 })
}

fn gamma_report(io: &IoArgs, sigma: f64, seed: u64, out: &mut dyn Write) -> Result<Outcome> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::Validation(format!("sigma must be >= 0, got {sigma}")));
    }
    let (set, mut skipped) = load(&io.input)?;
    let (tables, failed) = per_dump(&set, |d| {
        let bundle = kernel::gram(&d.k, false)?;
        let spectrum = eigh(&bundle.k_tilde)?;
        let cmp = gamma_comparison(bundle.k_tilde.view(), &spectrum, sigma, seed, gamma::DEFAULT_FLOOR)?;
        Ok((cmp.rows(), gamma::median_rel_diff(&cmp.true_stats), gamma::median_rel_diff(&cmp.perturbed_stats)))
    });
    skipped.extend(failed);
    let mut rows = Vec::new();
    let mut medians = Vec::new();
    for (d, (table, true_med, pert_med)) in &tables {
        for r in table {
            let source = serde_json::to_value(r.source)?;
            rows.push(vec![
                d.model_id.clone(),
                d.sample_id.clone(),
                d.layer.to_string(),
                d.head.to_string(),
                r.eigen_rank.to_string(),
                fmt(r.eigenvalue),
                fmt(r.mean_abs_diff),
                fmt(r.std_abs_diff),
                fmt(r.mean_rel_diff),
                r.masked_count.to_string(),
                source.as_str().unwrap_or_default().to_string(),
            ]);
        }
        medians.push(json!({ "dump": d.key().to_string(), "median_rel_diff_true": true_med, "median_rel_diff_perturbed": pert_med }));
    }
    let _ = writeln!(out, "γ audit of {} dumps (sigma {sigma}, seed {seed})", tables.len());
    write_csv(&io.output, &GAMMA_COLUMNS, &rows)?;
    let config = json!({ "input": io.input, "sigma": sigma, "seed": seed, "floor": gamma::DEFAULT_FLOOR });
    write_sidecar(&io.output, "gamma", config, tables.len(), &skipped, json!(medians))?;
    Ok(Outcome { skipped, failed_checks: 0 })
}

/// Fixed oracle suite; returns the number of failed checks.
pub fn selftest(out: &mut dyn Write) -> usize {
    let checks: [Check; 4] = [
        ("lap_brute_force", selftest_lap),
        ("eigh_residuals", selftest_eigh),
        ("cross_term_witness", selftest_witness),
        ("planted_control", selftest_planted),
    ];
    let mut failed = 0;
    for (name, check) in checks {
        match check() {
            Ok(detail) => {
                let _ = writeln!(out, "PASS  {name:<20} {detail}");
            }
            Err(detail) => {
                failed += 1;
                let _ = writeln!(out, "FAIL  {name:<20} {detail}");
            }
        }
    }
    failed
}

fn selftest_lap() -> std::result::Result<String, String> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let trials = 100;
    for t in 0..trials {
        let n = 1 + t % 6;
        let cost = ndarray::Array2::from_shape_simple_fn((n, n), || rng.random_range(0.0..1.0));
        let (_, total) = similarity::lap_solve(cost.view()).map_err(|e| e.to_string())?;
        let best = brute_force_assignment(&cost);
        if (total - best).abs() > 1e-12 {
            return Err(format!("trial {t}: lap {total} vs brute force {best}"));
        }
    }
    Ok(format!("{trials} random instances match exhaustive search"))
}

fn brute_force_assignment(cost: &ndarray::Array2<f64>) -> f64 {
    fn go(cost: &ndarray::Array2<f64>, row: usize, used: &mut Vec<bool>, acc: f64, best: &mut f64) {
        if row == cost.nrows() {
            *best = best.min(acc);
            return;
        }
        for c in 0..cost.ncols() {
            if !used[c] {
                used[c] = true;
                go(cost, row + 1, used, acc + cost[[row, c]], best);
                used[c] = false;
            }
        }
    }
    let mut best = f64::INFINITY;
    go(cost, 0, &mut vec![false; cost.ncols()], 0.0, &mut best);
    best
}

fn selftest_eigh() -> std::result::Result<String, String> {
    let cfg = SynthesisConfig { n_tokens: 24, d: 16, d_q: 8, d_v: 4, layers: 2, heads: 2, seed: 1, ..Default::default() };
    let set = gen_synthetic(&cfg).map_err(|e| e.to_string())?;
    let mut worst = 0.0f64;
    for d in &set.dumps {
        let b = kernel::gram(&d.k, false).map_err(|e| e.to_string())?;
        let s = eigh(&b.k_tilde).map_err(|e| e.to_string())?;
        worst = s.residuals.iter().fold(worst, |m, r| m.max(*r));
    }
    if worst <= 1e-8 {
        Ok(format!("worst relative residual {worst:.2e} over {} Gram matrices", set.dumps.len()))
    } else {
        Err(format!("relative residual {worst:.2e} exceeds 1e-8"))
    }
}

fn selftest_witness() -> std::result::Result<String, String> {
    let h = ndarray::array![1.0, 2.0];
    let a1 = ndarray::array![[1.0, -1.0], [1.0, 0.0]];
    let a2 = ndarray::array![[-1.0, 1.0], [0.0, 1.0]];
    let c1 = projection::cross_term(h.view(), a1.view()).map_err(|e| e.to_string())?;
    let c2 = projection::cross_term(h.view(), a2.view()).map_err(|e| e.to_string())?;
    if c1 == 2.0 && c2 == 5.0 {
        Ok("cross terms 2 and 5 under swapped assignments".into())
    } else {
        Err(format!("cross terms {c1} and {c2}, expected 2 and 5"))
    }
}

fn selftest_planted() -> std::result::Result<String, String> {
    let cfg = SynthesisConfig { n_tokens: 16, d: 16, d_q: 8, d_v: 4, layers: 1, heads: 2, seed: 2, ..Default::default() };
    let set = gen_synthetic(&cfg).map_err(|e| e.to_string())?;
    for d in &set.dumps {
        let p = plant_kpca_control(d).map_err(|e| e.to_string())?;
        let s = similarity::compare(&p, CompareOptions::default()).map_err(|e| e.to_string())?;
        if !(s.entrywise_pass && s.mdc >= 0.999 && s.moc >= 0.999) {
            return Err(format!("planted dump scored {s:?}"));
        }
    }
    Ok(format!("{} planted dumps recovered", set.dumps.len()))
}
