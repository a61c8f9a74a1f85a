//! End-to-end acceptance checks. Each criterion prints one PASS/FAIL line; the test
//! fails if any criterion does.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use tminfer::experiments::{run_sweep, ExperimentReport, SweepConfig};
use tminfer::extraction::{extract_tm, quality_q};
use tminfer::model::{build_random_tm, generate_dataset, Dataset, Dimensions, NoiseSpec, TransmissionMatrix};
use tminfer::optimizer::{fit_all_rows, minimize_row, OptimOptions, Scope};
use tminfer::pseudolikelihood::{row_grad_sites, row_neg_logpl_sites, RowMask, RowParams};
use tminfer::rng::rng_from_seed;
use tminfer::selection::{run_decimation, DecimationOptions};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn dataset(w: usize, density: f64, m: usize, sigma: f64, seed: u64) -> (TransmissionMatrix<f64>, Dataset<f64>) {
    let dims = Dimensions::new(w).unwrap();
    let tm = build_random_tm(dims, density, seed).unwrap();
    let noise = NoiseSpec::homogeneous(sigma, dims.n_half()).unwrap();
    let ds = generate_dataset(&tm, m, &noise, seed.wrapping_mul(7919).wrapping_add(3)).unwrap();
    (tm, ds)
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let scale = b.iter().map(|y| y.abs()).fold(0.0, f64::max);
    diff / scale
}

fn gradient_correctness() -> Outcome {
    let started = Instant::now();
    let mut rng = rng_from_seed(11);
    let mut worst = 0.0f64;
    for draw in 0..100u64 {
        let w = 2 + (draw % 2) as usize;
        let (_, ds) = dataset(w, 0.5, 40, 0.05 + 0.3 * rng.random::<f64>(), 100 + draw);
        let sites = ds.site_matrix();
        let n = ds.dims.n();
        let site = rng.random_range(0..n);
        let mut mask = RowMask::full(site, n);
        for a in mask.active.iter_mut() {
            *a = rng.random::<f64>() < 0.8;
        }
        let mut p = RowParams::neutral(site, n);
        p.a = 0.2 + 5.0 * rng.random::<f64>();
        for k in p.k.iter_mut() {
            *k = rng.random_range(-2.0..2.0);
        }
        p.apply_mask(&mask);
        let g = row_grad_sites(&p, sites.view(), &mask).unwrap();
        let f = |q: &RowParams<f64>| row_neg_logpl_sites(q, sites.view(), &mask);
        let h = 1e-6;
        let mut analytic = vec![g.da];
        let mut numeric = Vec::new();
        let (mut up, mut dn) = (p.clone(), p.clone());
        up.a += h * p.a;
        dn.a -= h * p.a;
        numeric.push((f(&up) - f(&dn)) / (2.0 * h * p.a));
        for j in 0..p.k.len() {
            if !mask.active[j] {
                continue;
            }
            let (mut up, mut dn) = (p.clone(), p.clone());
            up.k[j] += h;
            dn.k[j] -= h;
            analytic.push(g.dk[j]);
            numeric.push((f(&up) - f(&dn)) / (2.0 * h));
        }
        worst = worst.max(rel_err(&analytic, &numeric));
    }
    let secs = started.elapsed().as_secs_f64();
    outcome(
        worst <= 1e-5 && secs < 10.0,
        format!("worst relative error {worst:.2e} over 100 draws, {secs:.2}s"),
    )
}

fn ols_oracle() -> Outcome {
    let (_, ds) = dataset(4, 0.25, 500, 0.1, 21);
    let dims = ds.dims;
    let n = dims.n_half();
    let est = fit_all_rows(&ds, &Scope::Output.default_masks(dims), Scope::Output, &OptimOptions::default()).unwrap();
    let x = DMatrix::from_fn(ds.len(), n, |s, j| ds.samples[s].input[j]);
    let xtx = x.transpose() * &x;
    let chol = xtx.cholesky().expect("inputs have full rank");
    let (mut worst_coef, mut worst_var) = (0.0f64, 0.0f64);
    for gamma in 0..n {
        let y = DVector::from_fn(ds.len(), |s, _| ds.samples[s].output[gamma]);
        let beta = chol.solve(&(x.transpose() * &y));
        let resid = &y - &x * &beta;
        let var = resid.dot(&resid) / ds.len() as f64;
        let row = est.row(dims.output_site(gamma)).unwrap();
        let coef: Vec<f64> = (0..n).map(|j| row.coupling(j) / (2.0 * row.a)).collect();
        worst_coef = worst_coef.max(rel_err(&coef, beta.as_slice()));
        worst_var = worst_var.max(((1.0 / (2.0 * row.a)) - var).abs() / var);
    }
    outcome(
        worst_coef <= 1e-5 && worst_var <= 1e-4,
        format!("coefficients {worst_coef:.2e}, residual variance {worst_var:.2e}"),
    )
}

fn zero_noise_recovery() -> Outcome {
    let started = Instant::now();
    let (tm, ds) = dataset(4, 0.25, 500, 0.0, 31);
    let (_, best) = run_decimation(&ds, Scope::Output, &OptimOptions::default(), &DecimationOptions::default()).unwrap();
    let inferred = extract_tm(&best).unwrap().tm;
    let q = quality_q(tm.entries.view(), inferred.entries.view(), "T").unwrap().q;
    let support_ok = tm.support() == inferred.support();
    let secs = started.elapsed().as_secs_f64();
    outcome(
        q <= 1e-3 && support_ok && secs < 120.0,
        format!("Q = {q:.2e}, support exact: {support_ok}, {secs:.2}s"),
    )
}

fn desk_sweep() -> ExperimentReport {
    let cfg = SweepConfig {
        w: 6,
        density: 0.2,
        m_samples: 2000,
        sigma_grid: vec![0.02, 0.05, 0.1, 0.2, 0.3, 0.4],
        replicates: 3,
        ..Default::default()
    };
    let report = run_sweep(&cfg).unwrap();
    assert!(report.records.iter().all(|r| r.error.is_none()), "sweep had failed points");
    report
}

fn bic_behaviour(r: &ExperimentReport) -> Outcome {
    let sel = |s| r.mean_at(s, |x| x.selected_couplings as f64);
    let truth = |s| r.mean_at(s, |x| x.true_couplings as f64);
    let batch = DecimationOptions::default().batch(truth(0.05).round() as usize) as f64;
    let low_ok = (sel(0.05) - truth(0.05)).abs() <= batch;
    let high_ok = sel(0.4) < truth(0.4);
    outcome(
        low_ok && high_ok,
        format!(
            "sigma 0.05: selected {:.1} vs true {:.1} (batch {batch}); sigma 0.4: selected {:.1} vs true {:.1}",
            sel(0.05),
            truth(0.05),
            sel(0.4),
            truth(0.4)
        ),
    )
}

fn noise_inference(r: &ExperimentReport) -> Outcome {
    let s = r.mean_at(0.1, |x| x.sigma_hat_mean);
    outcome((s - 0.1).abs() <= 0.01, format!("mean sigma_hat {s:.5} at sigma 0.1"))
}

fn inverse_route(r: &ExperimentReport) -> Outcome {
    let grid = [0.1, 0.2, 0.3, 0.4];
    let inv: Vec<f64> = grid.iter().map(|&s| r.mean_at(s, |x| x.q_image_inverse)).collect();
    let pinv: Vec<f64> = grid.iter().map(|&s| r.mean_at(s, |x| x.q_image_pinv)).collect();
    let better = inv.iter().zip(&pinv).all(|(i, p)| i < p);
    let spread = inv.iter().cloned().fold(0.0, f64::max) / inv.iter().cloned().fold(f64::INFINITY, f64::min);
    outcome(
        better && spread < 2.0,
        format!("inverse {inv:.3?}, pseudo-inverse {pinv:.3?}, spread {spread:.2}"),
    )
}

fn focusing(r: &ExperimentReport) -> Outcome {
    let lo = r.mean_at(0.02, |x| x.q_focus);
    let hi = r.mean_at(0.2, |x| x.q_focus);
    let lo_t = r.mean_at(0.02, |x| x.q_focus_target);
    let hi_t = r.mean_at(0.2, |x| x.q_focus_target);
    outcome(
        hi >= 3.0 * lo,
        format!(
            "Q at 0.02 = {lo:.3}, at 0.2 = {hi:.3}, ratio {:.2} (against the raw spot: {lo_t:.3}, {hi_t:.3}, ratio {:.2})",
            hi / lo,
            hi_t / lo_t
        ),
    )
}

fn convexity_and_uniqueness() -> Outcome {
    let mut rng = rng_from_seed(81);
    let (_, ds) = dataset(3, 0.4, 200, 0.15, 82);
    let sites = ds.site_matrix();
    let n = ds.dims.n();
    let mut worst_gap = f64::NEG_INFINITY;
    for _ in 0..500 {
        let site = rng.random_range(0..n);
        let mask = RowMask::full(site, n);
        let draw = |rng: &mut tminfer::rng::Rng| {
            let mut p = RowParams::neutral(site, n);
            p.a = 0.05 + 20.0 * rng.random::<f64>();
            for k in p.k.iter_mut() {
                *k = rng.random_range(-5.0..5.0);
            }
            p
        };
        let (p, q) = (draw(&mut rng), draw(&mut rng));
        let t: f64 = rng.random();
        let mut mid = p.clone();
        mid.a = t * p.a + (1.0 - t) * q.a;
        for (j, m) in mid.k.iter_mut().enumerate() {
            *m = t * p.k[j] + (1.0 - t) * q.k[j];
        }
        let f = |x: &RowParams<f64>| row_neg_logpl_sites(x, sites.view(), &mask);
        let rhs = t * f(&p) + (1.0 - t) * f(&q);
        worst_gap = worst_gap.max((f(&mid) - rhs) / rhs.abs().max(1.0));
    }

    let (_, ds) = dataset(4, 0.25, 400, 0.1, 83);
    let n = ds.dims.n();
    let opts = OptimOptions::default();
    let mut worst_rel = 0.0f64;
    for _ in 0..20 {
        let site = rng.random_range(0..n);
        let mask = RowMask::full(site, n);
        let mut start = RowParams::neutral(site, n);
        start.a = 0.1 + 10.0 * rng.random::<f64>();
        for k in start.k.iter_mut() {
            *k = rng.random_range(-3.0..3.0);
        }
        let a = minimize_row(site, &ds, &mask, None, &opts).unwrap().params;
        let b = minimize_row(site, &ds, &mask, Some(&start), &opts).unwrap().params;
        let va: Vec<f64> = std::iter::once(a.a).chain(a.k).collect();
        let vb: Vec<f64> = std::iter::once(b.a).chain(b.k).collect();
        worst_rel = worst_rel.max(rel_err(&vb, &va));
    }
    outcome(
        worst_gap <= 1e-10 && worst_rel <= 1e-5,
        format!("worst convexity gap {worst_gap:.2e}, two-start disagreement {worst_rel:.2e}"),
    )
}

fn tminfer(dir: &Path, threads: usize, args: &[&str]) {
    let out = Command::new(env!("CARGO_BIN_EXE_tminfer"))
        .args(args)
        .arg("--out")
        .arg(dir)
        .arg("--threads")
        .arg(threads.to_string())
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "tminfer {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap())
        })
        .collect()
}

fn pipeline(root: &Path, name: &str, threads: usize) -> BTreeMap<String, Vec<u8>> {
    let cfg = root.join("run.toml");
    std::fs::write(
        &cfg,
        "w = 4\ndensity = 0.25\nm_samples = 500\nsigma = 0.1\nsigma_grid = [0.0, 0.1, 0.2]\nreplicates = 2\n",
    )
    .unwrap();
    let chain = root.join(name);
    let c = cfg.to_str().unwrap();
    tminfer(&chain, threads, &["generate", "--config", c]);
    for stage in [&["fit"][..], &["select"], &["fit", "--reverse"], &["select", "--reverse"], &["extract"], &["extract", "--reverse"], &["eval"]] {
        tminfer(&chain, threads, stage);
    }
    let sweep = root.join(format!("{name}-sweep"));
    tminfer(&sweep, threads, &["sweep", "--config", c]);
    tminfer(&sweep, threads, &["report"]);
    let mut all = snapshot(&chain);
    all.extend(snapshot(&sweep).into_iter().map(|(k, v)| (format!("sweep/{k}"), v)));
    all
}

fn determinism() -> Outcome {
    let root = tempfile::tempdir().unwrap();
    let runs: Vec<_> = [1, 4, 1]
        .iter()
        .enumerate()
        .map(|(i, &t)| pipeline(root.path(), &format!("run{i}"), t))
        .collect();
    let same = runs.windows(2).all(|w| w[0] == w[1]);
    outcome(same, format!("{} artifacts compared across thread counts 1, 4, 1", runs[0].len()))
}

#[test]
fn acceptance_criteria() {
    let mut results: Vec<(&str, Outcome, Duration)> = Vec::new();
    let mut check = |name, f: &dyn Fn() -> Outcome| {
        let t = Instant::now();
        let o = f();
        results.push((name, o, t.elapsed()));
    };
    check("1 gradient correctness", &gradient_correctness);
    check("2 least-squares oracle", &ols_oracle);
    check("3 zero-noise recovery", &zero_noise_recovery);
    let sweep = desk_sweep();
    check("4 BIC behaviour vs noise", &|| bic_behaviour(&sweep));
    check("5 noise inference", &|| noise_inference(&sweep));
    check("6 inverse route", &|| inverse_route(&sweep));
    check("7 focusing degradation", &|| focusing(&sweep));
    check("8 convexity and uniqueness", &convexity_and_uniqueness);
    check("9 determinism", &determinism);

    for (name, o, t) in &results {
        println!(
            "[{}] criterion {name}: {} ({:.2}s)",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail,
            t.as_secs_f64()
        );
    }
    let failed: Vec<&str> = results.iter().filter(|r| !r.1.pass).map(|r| r.0).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}

/// Large-scale smoke run (w = 12, M = 5000); slow, run with `--ignored`.
#[test]
#[ignore]
fn acceptance_large_scale() {
    let started = Instant::now();
    let (tm, ds) = dataset(12, 0.2, 5000, 0.05, 101);
    let (_, best) = run_decimation(&ds, Scope::Output, &OptimOptions::default(), &DecimationOptions::default()).unwrap();
    let inferred = extract_tm(&best).unwrap().tm;
    let q = quality_q(tm.entries.view(), inferred.entries.view(), "T").unwrap().q;
    let pass = q <= 0.1;
    println!(
        "[{}] criterion 10 large-scale smoke: Q = {q:.4}, {} of {} couplings selected ({:.1}s)",
        if pass { "PASS" } else { "FAIL" },
        best.tm_couplings(),
        tm.nonzero_count(),
        started.elapsed().as_secs_f64()
    );
    assert!(pass, "Q = {q}");
}
