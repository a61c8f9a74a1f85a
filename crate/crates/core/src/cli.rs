//! Command-line verbs. Each stage reads the previous stage's files from the output
//! directory, checks checksums and fingerprints, and writes its own artifacts.

use std::fmt::Write as _;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::experiments::{
    focusing_experiment, gaussian_spot, glyph, image_reconstruction, pseudo_inverse, run_sweep,
    ExperimentReport, SweepRecord,
};
use crate::extraction::{extract_gramian, extract_tm, quality_q};
use crate::io::{self, ArtifactDir, Envelope};
use crate::model::{build_random_tm, generate_dataset, reverse_dataset, Dataset, Role, TransmissionMatrix};
use crate::optimizer::{fit_all_rows, CouplingEstimate, RowFitter, Scope};
use crate::rng::rng_from_seed;
use crate::selection::Decimation;

pub const CONFIG_FILE: &str = "config.json";

#[derive(Debug, Parser)]
#[command(name = "tminfer", version, about = "Infer intensity transmission matrices from input/output samples")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct Common {
    /// TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output (and stage input) directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true, env = "TMINFER_THREADS")]
    pub threads: Option<usize>,
    #[arg(long, global = true, value_enum)]
    pub scope: Option<ScopeArg>,
    /// Packed binary dataset instead of CSV.
    #[arg(long, global = true)]
    pub binary_io: bool,
    /// Work on the reversed dataset, i.e. infer the inverse matrix.
    #[arg(long, global = true)]
    pub reverse: bool,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ScopeArg {
    Output,
    All,
}

impl From<ScopeArg> for Scope {
    fn from(s: ScopeArg) -> Self {
        match s {
            ScopeArg::Output => Scope::Output,
            ScopeArg::All => Scope::All,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Draw a channel and a dataset.
    Generate,
    /// Fit every row with its full support.
    Fit,
    /// Decimate and pick the support size by BIC.
    Select,
    /// Matrix and noise levels from the selected fit.
    Extract {
        /// Also extract the Gramian and the balance criterion (all-sites fits only).
        #[arg(long)]
        gramian: bool,
    },
    /// Matrix quality, focusing and image reconstruction.
    Eval,
    /// Noise sweep over the configured grid.
    Sweep,
    /// Per-noise summary of a sweep report.
    Report,
}

/// Runs a parsed command line on a thread pool of the requested size.
pub fn run(cli: Cli) -> Result<()> {
    let threads = cli.common.threads.unwrap_or(0);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
    pool.install(|| dispatch(&cli))
}

fn dispatch(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Generate => generate(&cli.common),
        Command::Sweep => sweep(&cli.common),
        Command::Fit => fit(&cli.common),
        Command::Select => select(&cli.common),
        Command::Extract { gramian } => extract(&cli.common, *gramian),
        Command::Eval => eval(&cli.common),
        Command::Report => report(&cli.common),
    }
}

/// Configuration for stages that start a run.
fn fresh_config(c: &Common) -> Result<(RunConfig, ArtifactDir)> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = c.seed {
        cfg.seed = seed;
    }
    if let Some(scope) = c.scope {
        cfg.scope = scope.into();
    }
    cfg.validate()?;
    let out = c
        .out
        .clone()
        .or_else(|| cfg.out_dir.clone())
        .ok_or_else(|| Error::Config("no output directory (use --out)".into()))?;
    let dir = ArtifactDir::create(out)?;
    let mut stored = cfg.clone();
    stored.out_dir = None;
    dir.put_json(CONFIG_FILE, &stored)?;
    Ok((cfg, dir))
}

/// Configuration of an existing run; an explicit `--config` must describe the same run.
fn stored_config(c: &Common) -> Result<(RunConfig, ArtifactDir)> {
    let out = c
        .out
        .clone()
        .ok_or_else(|| Error::Config("no run directory (use --out)".into()))?;
    let dir = ArtifactDir::open(out)?;
    let cfg: RunConfig = dir.get_json(CONFIG_FILE)?;
    cfg.validate()?;
    if let Some(p) = &c.config {
        let mut given = RunConfig::load(p)?;
        if let Some(seed) = c.seed {
            given.seed = seed;
        }
        if let Some(scope) = c.scope {
            given.scope = scope.into();
        }
        if given.fingerprint() != cfg.fingerprint() {
            return Err(Error::Fingerprint {
                expected: cfg.fingerprint(),
                found: given.fingerprint(),
            });
        }
    }
    Ok((cfg, dir))
}

fn suffix(c: &Common) -> &'static str {
    if c.reverse {
        "_inv"
    } else {
        ""
    }
}

fn load_run_dataset(c: &Common, cfg: &RunConfig, dir: &ArtifactDir) -> Result<Dataset<f64>> {
    let (ds, header) = io::load_dataset::<f64>(dir)?;
    if header.config_fingerprint != cfg.fingerprint() {
        return Err(Error::Fingerprint {
            expected: cfg.fingerprint(),
            found: header.config_fingerprint,
        });
    }
    if c.reverse {
        reverse_dataset(&ds)
    } else {
        Ok(ds)
    }
}

fn load_estimate(dir: &ArtifactDir, name: &str, cfg: &RunConfig) -> Result<CouplingEstimate<f64>> {
    let env: Envelope<CouplingEstimate<f64>> = dir.get_json(name)?;
    env.check(&cfg.fingerprint())?;
    if env.dataset_fingerprint != env.payload.dataset_fingerprint {
        return Err(Error::Format {
            file: name.to_owned(),
            msg: "envelope and estimate disagree on the dataset".into(),
        });
    }
    Ok(env.payload)
}

fn generate(c: &Common) -> Result<()> {
    let (cfg, dir) = fresh_config(c)?;
    let tm = build_random_tm::<f64>(cfg.dims(), cfg.density, cfg.matrix_seed())?;
    let ds = generate_dataset(&tm, cfg.m_samples, &cfg.noise(), cfg.dataset_seed())?;
    io::save_matrix(&dir, "T_true.csv", &tm.entries)?;
    io::save_dataset(&dir, &ds, c.binary_io, &cfg.fingerprint())?;
    log::info!("generated {} samples, {} nonzero entries", ds.len(), tm.nonzero_count());
    Ok(())
}

fn fit(c: &Common) -> Result<()> {
    let (cfg, dir) = stored_config(c)?;
    let ds = load_run_dataset(c, &cfg, &dir)?;
    let scope = c.scope.map(Scope::from).unwrap_or(cfg.scope);
    if scope == Scope::All && ds.meta.sigma.iter().all(|&s| s == 0.0) {
        log::warn!("noiseless data makes the all-sites fit rank deficient; couplings are not unique");
    }
    let est = fit_all_rows(&ds, &scope.default_masks(ds.dims), scope, &cfg.optim)?;
    if !est.all_converged() {
        log::warn!("{} rows did not converge", est.converged.iter().filter(|c| !**c).count());
    }
    dir.put_json(
        &format!("estimate{}.json", suffix(c)),
        &Envelope::new(&cfg.fingerprint(), &ds.fingerprint(), est),
    )
}

fn select(c: &Common) -> Result<()> {
    let (cfg, dir) = stored_config(c)?;
    let ds = load_run_dataset(c, &cfg, &dir)?;
    let est = load_estimate(&dir, &format!("estimate{}.json", suffix(c)), &cfg)?;
    if est.dataset_fingerprint != ds.fingerprint() {
        return Err(Error::Fingerprint {
            expected: ds.fingerprint(),
            found: est.dataset_fingerprint,
        });
    }
    let fitter = RowFitter::new(&ds);
    let scope = est.scope;
    let (path, best) = Decimation::new(&fitter, scope, cfg.optim, cfg.decimation).run(est)?;
    let sigma = ds.meta.sigma.first().copied().unwrap_or(0.0);
    let mut csv = String::from("k_active,sigma,total_pl,bic,selected\n");
    for (i, r) in path.records.iter().enumerate() {
        writeln!(
            csv,
            "{},{},{},{},{}",
            r.k_active,
            io::fmt_real(sigma),
            io::fmt_real(r.total_pl),
            io::fmt_real(r.bic),
            u8::from(i == path.selected)
        )
        .expect("writing to a string");
    }
    dir.put(&format!("path{}.csv", suffix(c)), csv.as_bytes())?;
    log::info!(
        "selected {} free parameters ({} couplings)",
        path.selected_record().k_active,
        path.selected_record().n_couplings
    );
    dir.put_json(
        &format!("estimate_selected{}.json", suffix(c)),
        &Envelope::new(&cfg.fingerprint(), &ds.fingerprint(), best),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractSummary {
    pub role: Role,
    pub source: String,
    pub flagged_rows: Vec<usize>,
    pub sigma_hat_mean: f64,
    pub beta_hat: Vec<f64>,
    /// Frobenius norm of the output-to-output couplings (all-sites fits).
    pub output_residual_norm: Option<f64>,
    pub balance: Option<f64>,
    pub gramian_beta: Option<f64>,
}

fn extract(c: &Common, gramian: bool) -> Result<()> {
    let (cfg, dir) = stored_config(c)?;
    let sfx = suffix(c);
    let selected = format!("estimate_selected{sfx}.json");
    let source = if dir.exists(&selected) {
        selected
    } else {
        log::warn!("no selected estimate, extracting from the full fit");
        format!("estimate{sfx}.json")
    };
    let est = load_estimate(&dir, &source, &cfg)?;
    // Validate the request before writing anything.
    let gram = if gramian { Some(extract_gramian(&est)?) } else { None };
    let ex = extract_tm(&est)?;
    let name = match ex.tm.role {
        Role::Direct => "T_inf.csv",
        Role::Inverse => "T_inv_inf.csv",
    };
    io::save_matrix(&dir, name, &ex.tm.entries)?;
    dir.put(&format!("noise{sfx}.csv"), io::vector_to_csv(&ex.noise.sigma_hat).as_bytes())?;
    if let Some(g) = &gram {
        io::save_matrix(&dir, &format!("U_inf{sfx}.csv"), &g.u)?;
    }
    let summary = ExtractSummary {
        role: ex.tm.role,
        source,
        flagged_rows: ex.flagged.clone(),
        sigma_hat_mean: ex.noise.mean_sigma(),
        beta_hat: ex.noise.beta_hat.clone(),
        output_residual_norm: ex.output_residual.map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt()),
        balance: gram.as_ref().map(|g| g.balance),
        gramian_beta: gram.as_ref().map(|g| g.beta),
    };
    dir.put_json(
        &format!("extract{sfx}.json"),
        &Envelope::new(&cfg.fingerprint(), &est.dataset_fingerprint, summary),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub q_t: f64,
    pub true_couplings: usize,
    pub inferred_nonzero: usize,
    pub q_focus: f64,
    pub q_focus_target: f64,
    pub focus_peak_to_background: f64,
    pub q_image_pinv: f64,
    pub q_image_exact: f64,
    /// Present once the inverse matrix has been extracted.
    pub q_image_inverse: Option<f64>,
}

fn eval(c: &Common) -> Result<()> {
    let (cfg, dir) = stored_config(c)?;
    let dims = cfg.dims();
    let t_true = TransmissionMatrix::new(dims, io::load_matrix::<f64>(&dir, "T_true.csv")?, Role::Direct)?;
    let t_inf = TransmissionMatrix::new(dims, io::load_matrix::<f64>(&dir, "T_inf.csv")?, Role::Direct)?;
    let inverse = if dir.exists("T_inv_inf.csv") {
        Some(io::load_matrix::<f64>(&dir, "T_inv_inf.csv")?)
    } else {
        None
    };
    let noise = cfg.noise();
    let mut rng = rng_from_seed(cfg.probe_seed());
    let focus = focusing_experiment(&t_true, &t_inf, &gaussian_spot(dims, cfg.spot_width), &noise, &mut rng)?;
    let object = glyph(dims);
    let q_image_pinv = image_reconstruction(&pseudo_inverse(&t_inf.entries), &t_true, &object, &noise, &mut rng)?.1;
    let q_image_exact = image_reconstruction(&pseudo_inverse(&t_true.entries), &t_true, &object, &noise, &mut rng)?.1;
    let q_image_inverse = match &inverse {
        Some(m) => Some(image_reconstruction(m, &t_true, &object, &noise, &mut rng)?.1),
        None => None,
    };
    let summary = EvalSummary {
        q_t: quality_q(t_true.entries.view(), t_inf.entries.view(), "T vs T_inf")?.q,
        true_couplings: t_true.nonzero_count(),
        inferred_nonzero: t_inf.nonzero_count(),
        q_focus: focus.q,
        q_focus_target: focus.q_target,
        focus_peak_to_background: focus.peak_to_background,
        q_image_pinv,
        q_image_exact,
        q_image_inverse,
    };
    let header: io::DatasetHeader = dir.get_json(io::DATASET_META)?;
    dir.put_json("eval.json", &Envelope::new(&cfg.fingerprint(), &header.fingerprint, summary))
}

const REPORT_COLUMNS: &str = "sigma,replicate,seed,true_couplings,selected_couplings,q_t_bic,q_t_true_support,\
sigma_hat_mean,q_focus,q_focus_target,focus_peak_to_background,q_image_inverse,q_image_pinv,q_image_exact,\
q_spot_inverse,q_spot_pinv,inverse_selected_couplings,inverse_density,balance,converged,error";

pub fn report_csv(records: &[SweepRecord]) -> String {
    let mut out = format!("{REPORT_COLUMNS}\n");
    let f = io::fmt_real::<f64>;
    for r in records {
        let fields = [
            f(r.sigma),
            r.replicate.to_string(),
            r.seed.to_string(),
            r.true_couplings.to_string(),
            r.selected_couplings.to_string(),
            f(r.q_t_bic),
            f(r.q_t_true_support),
            f(r.sigma_hat_mean),
            f(r.q_focus),
            f(r.q_focus_target),
            f(r.focus_peak_to_background),
            f(r.q_image_inverse),
            f(r.q_image_pinv),
            f(r.q_image_exact),
            f(r.q_spot_inverse),
            f(r.q_spot_pinv),
            r.inverse_selected_couplings.to_string(),
            f(r.inverse_density),
            r.balance.map(f).unwrap_or_default(),
            r.converged.to_string(),
            r.error.clone().unwrap_or_default().replace([',', '\n'], ";"),
        ];
        out.push_str(&fields.join(","));
        out.push('\n');
    }
    out
}

fn sweep(c: &Common) -> Result<()> {
    let (cfg, dir) = fresh_config(c)?;
    let report = run_sweep(&cfg.to_sweep())?;
    dir.put("report.csv", report_csv(&report.records).as_bytes())?;
    dir.put_json("report.json", &Envelope::new(&cfg.fingerprint(), "", report))
}

/// Per-σ means over replicates.
pub fn summarize(report: &ExperimentReport) -> String {
    let mut out = String::from(
        "sigma,replicates,failed,selected_couplings,true_couplings,q_t_bic,q_t_true_support,q_focus,q_image_inverse,q_image_pinv,inverse_density\n",
    );
    for &s in &report.config.sigma_grid {
        let ok = report.at(s).count();
        let failed = report.records.iter().filter(|r| r.sigma == s && r.error.is_some()).count();
        let m = |g: fn(&SweepRecord) -> f64| format!("{:.6}", report.mean_at(s, g));
        writeln!(
            out,
            "{s},{ok},{failed},{},{},{},{},{},{},{},{}",
            m(|r| r.selected_couplings as f64),
            m(|r| r.true_couplings as f64),
            m(|r| r.q_t_bic),
            m(|r| r.q_t_true_support),
            m(|r| r.q_focus),
            m(|r| r.q_image_inverse),
            m(|r| r.q_image_pinv),
            m(|r| r.inverse_density),
        )
        .expect("writing to a string");
    }
    out
}

fn report(c: &Common) -> Result<()> {
    let (cfg, dir) = stored_config(c)?;
    let env: Envelope<ExperimentReport> = dir.get_json("report.json")?;
    env.check(&cfg.fingerprint())?;
    let table = summarize(&env.payload);
    dir.put("summary.csv", table.as_bytes())?;
    print!("{table}");
    Ok(())
}
