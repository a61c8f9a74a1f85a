//! Evaluation studies: focusing through the inferred direct matrix, image
//! reconstruction through the inferred inverse, and noise sweeps tying the whole
//! pipeline together. Runs in `f64`.

use std::time::Instant;

use nalgebra::DMatrix;
use ndarray::{Array1, Array2};
use rand::Rng as _;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::extraction::{extract_gramian, extract_tm, quality_q};
use crate::model::{
    build_random_tm, generate_dataset, reverse_dataset, Dataset, Dimensions, NoiseSpec, Role,
    TransmissionMatrix,
};
use crate::optimizer::{OptimOptions, RowFitter, Scope};
use crate::pseudolikelihood::RowMask;
use crate::rng::{derive_seed, rng_from_seed, stream, Rng};
use crate::selection::{run_decimation, DecimationOptions};

/// Gaussian spot of peak 1 centred on the frame, `width` in pixels.
pub fn gaussian_spot(dims: Dimensions, width: f64) -> Vec<f64> {
    let w = dims.w();
    let c = (w as f64 - 1.0) / 2.0;
    (0..w * w)
        .map(|p| {
            let (r, col) = ((p / w) as f64, (p % w) as f64);
            (-((r - c).powi(2) + (col - c).powi(2)) / (2.0 * width * width)).exp()
        })
        .collect()
}

/// Binary "L" glyph: a vertical stroke joined to a horizontal one near the bottom.
pub fn glyph(dims: Dimensions) -> Vec<f64> {
    let w = dims.w();
    let col = w / 3;
    let bottom = w.saturating_sub(2).max(1);
    (0..w * w)
        .map(|p| {
            let (r, c) = (p / w, p % w);
            let stem = c == col && r >= 1 && r <= bottom;
            let foot = r == bottom && c >= col && c + 1 < w.max(col + 2);
            if stem || foot {
                1.0
            } else {
                0.0
            }
        })
        .collect()
}

/// `argmin ‖A x − b‖` over the box `[0, 1]ⁿ`, by cyclic coordinate descent on the
/// normal equations.
pub fn box_least_squares(a: &Array2<f64>, b: &[f64]) -> Vec<f64> {
    let n = a.ncols();
    let g = a.t().dot(a);
    let h = a.t().dot(&Array1::from(b.to_vec()));
    let mut x = vec![0.0; n];
    // Gradient of ½‖Ax − b‖², kept in sync with x.
    let mut grad: Vec<f64> = h.iter().map(|v| -v).collect();
    let scale = g.diag().iter().fold(0.0f64, |m, v| m.max(*v)).max(f64::MIN_POSITIVE);
    for _ in 0..50_000 {
        let mut moved = 0.0f64;
        for i in 0..n {
            let gii = g[[i, i]];
            if gii <= 1e-14 * scale {
                continue;
            }
            let xi = (x[i] - grad[i] / gii).clamp(0.0, 1.0);
            let dx = xi - x[i];
            if dx != 0.0 {
                x[i] = xi;
                for (r, gr) in grad.iter_mut().enumerate() {
                    *gr += g[[r, i]] * dx;
                }
                moved = moved.max(dx.abs());
            }
        }
        if moved < 1e-14 {
            break;
        }
    }
    x
}

/// Moore-Penrose pseudo-inverse with the usual `n·ε·s_max` cutoff.
pub fn pseudo_inverse(m: &Array2<f64>) -> Array2<f64> {
    let (r, c) = m.dim();
    let dm = DMatrix::from_fn(r, c, |i, j| m[[i, j]]);
    let svd = dm.svd(true, true);
    let smax = svd.singular_values.iter().fold(0.0f64, |a, &b| a.max(b));
    let tol = r.max(c) as f64 * f64::EPSILON * smax;
    let pinv = svd
        .pseudo_inverse(tol)
        .expect("both singular-vector sets were computed");
    Array2::from_shape_fn((c, r), |(i, j)| pinv[(i, j)])
}

fn transmit_f64(tm: &Array2<f64>, input: &[f64], noise: &NoiseSpec, rng: &mut Rng) -> Vec<f64> {
    let clean = tm.dot(&Array1::from(input.to_vec()));
    clean
        .iter()
        .zip(&noise.sigma)
        .map(|(&v, &s)| {
            let e: f64 = rng.sample(StandardNormal);
            v + s * e
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FocusResult {
    /// SLM pattern computed from the inferred matrix.
    pub input: Vec<f64>,
    pub achieved: Vec<f64>,
    /// Best focus the true channel can produce under the same input constraints.
    pub reference: Vec<f64>,
    /// `Q(reference, achieved)`.
    pub q: f64,
    /// `Q(target, achieved)`, including the part no input pattern can reach.
    pub q_target: f64,
    /// Achieved intensity at the target peak over the mean of the background
    /// (pixels where the target is below half its maximum).
    pub peak_to_background: f64,
}

/// Shapes the input with `t_inf` to focus `target`, sends it through the true
/// channel with noise and scores the result.
pub fn focusing_experiment(
    t_true: &TransmissionMatrix<f64>,
    t_inf: &TransmissionMatrix<f64>,
    target: &[f64],
    noise: &NoiseSpec,
    rng: &mut Rng,
) -> Result<FocusResult> {
    let n = t_true.dims.n_half();
    if t_inf.dims != t_true.dims || target.len() != n || noise.sigma.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: target.len(),
        });
    }
    if target.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::InvalidArgument("focus target must lie in [0, 1]".into()));
    }
    let input = box_least_squares(&t_inf.entries, target);
    let achieved = transmit_f64(&t_true.entries, &input, noise, rng);
    let ideal = box_least_squares(&t_true.entries, target);
    let reference = t_true.entries.dot(&Array1::from(ideal)).to_vec();
    let q = quality_q(
        Array1::from(reference.clone()).view(),
        Array1::from(achieved.clone()).view(),
        "ideal focus vs achieved",
    )?
    .q;
    let q_target = quality_q(
        Array1::from(target.to_vec()).view(),
        Array1::from(achieved.clone()).view(),
        "target vs achieved",
    )?
    .q;
    let tmax = target.iter().fold(f64::MIN, |m, v| m.max(*v));
    let peak = target.iter().position(|v| *v == tmax).unwrap_or(0);
    let bg: Vec<f64> = target
        .iter()
        .zip(&achieved)
        .filter(|(t, _)| **t < 0.5 * tmax)
        .map(|(_, a)| *a)
        .collect();
    let bg_mean = bg.iter().sum::<f64>() / bg.len().max(1) as f64;
    Ok(FocusResult {
        input,
        achieved: achieved.clone(),
        reference,
        q,
        q_target,
        peak_to_background: achieved[peak] / bg_mean,
    })
}

/// Transmits `object` through the true channel and reconstructs it with `t_inv`.
pub fn image_reconstruction(
    t_inv: &Array2<f64>,
    t_true: &TransmissionMatrix<f64>,
    object: &[f64],
    noise: &NoiseSpec,
    rng: &mut Rng,
) -> Result<(Vec<f64>, f64)> {
    let n = t_true.dims.n_half();
    if t_inv.dim() != (n, n) || object.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: object.len(),
        });
    }
    let out = transmit_f64(&t_true.entries, object, noise, rng);
    let rec = t_inv.dot(&Array1::from(out)).to_vec();
    let q = quality_q(
        Array1::from(object.to_vec()).view(),
        Array1::from(rec.clone()).view(),
        "object vs reconstruction",
    )?
    .q;
    Ok((rec, q))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub w: usize,
    pub density: f64,
    pub m_samples: usize,
    pub sigma_grid: Vec<f64>,
    pub replicates: usize,
    pub seed: u64,
    pub scope: Scope,
    /// Also fit all sites to report the Gramian balance.
    pub balance: bool,
    /// Width in pixels of the focusing target and the spot test object.
    pub spot_width: f64,
    pub optim: OptimOptions,
    pub decimation: DecimationOptions,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            w: 6,
            density: 0.2,
            m_samples: 2000,
            sigma_grid: (0..11).map(|i| i as f64 * 0.05).collect(),
            replicates: 3,
            seed: 1,
            scope: Scope::Output,
            balance: false,
            spot_width: 1.0,
            optim: OptimOptions::default(),
            decimation: DecimationOptions::default(),
        }
    }
}

impl SweepConfig {
    pub fn validate(&self) -> Result<()> {
        Dimensions::new(self.w)?;
        if self.sigma_grid.is_empty()
            || self.sigma_grid.iter().any(|s| !(s.is_finite() && *s >= 0.0))
            || self.sigma_grid.windows(2).any(|p| p[1] < p[0])
        {
            return Err(Error::Config("sigma_grid must be nonempty, sorted and nonnegative".into()));
        }
        if self.replicates == 0 || self.m_samples == 0 {
            return Err(Error::Config("replicates and m_samples must be positive".into()));
        }
        if !(self.spot_width > 0.0) {
            return Err(Error::Config("spot_width must be positive".into()));
        }
        if !(self.density > 0.0 && self.density <= 1.0) {
            return Err(Error::Config("density must lie in (0, 1]".into()));
        }
        self.optim.validate()?;
        self.decimation.validate()
    }

    /// Seed of the channel used by replicate `rep` (shared across the grid).
    pub fn matrix_seed(&self, rep: usize) -> u64 {
        derive_seed(self.seed, &[stream::MATRIX, rep as u64])
    }

    /// Seed of the data and probe noise at grid point `k`, replicate `rep`.
    pub fn point_seed(&self, k: usize, rep: usize) -> u64 {
        derive_seed(self.seed, &[stream::DATASET, k as u64, rep as u64])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct SweepRecord {
    pub sigma: f64,
    pub replicate: usize,
    pub seed: u64,
    pub true_couplings: usize,
    /// Couplings in the BIC-selected direct model.
    pub selected_couplings: usize,
    pub q_t_bic: f64,
    pub q_t_true_support: f64,
    pub sigma_hat_mean: f64,
    pub q_focus: f64,
    pub q_focus_target: f64,
    pub focus_peak_to_background: f64,
    /// Glyph reconstruction through the inferred inverse.
    pub q_image_inverse: f64,
    /// Glyph reconstruction through the pseudo-inverse of the inferred direct matrix.
    pub q_image_pinv: f64,
    /// Glyph reconstruction through the exact (pseudo-)inverse of the true matrix.
    pub q_image_exact: f64,
    pub q_spot_inverse: f64,
    pub q_spot_pinv: f64,
    pub inverse_selected_couplings: usize,
    /// Active share of the inverse matrix entries after selection.
    pub inverse_density: f64,
    pub balance: Option<f64>,
    pub converged: bool,
    pub error: Option<String>,
    /// Wall-clock seconds; kept out of serialized artifacts.
    #[serde(skip)]
    pub runtime_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config: SweepConfig,
    /// One record per (σ, replicate), ordered by grid point then replicate.
    pub records: Vec<SweepRecord>,
}

impl ExperimentReport {
    /// Records at grid point `sigma` without failures.
    pub fn at(&self, sigma: f64) -> impl Iterator<Item = &SweepRecord> {
        self.records
            .iter()
            .filter(move |r| r.sigma == sigma && r.error.is_none())
    }

    /// Mean of `field` over the successful replicates at `sigma`.
    pub fn mean_at(&self, sigma: f64, field: impl Fn(&SweepRecord) -> f64) -> f64 {
        let v: Vec<f64> = self.at(sigma).map(field).collect();
        v.iter().sum::<f64>() / v.len().max(1) as f64
    }
}

fn true_support_masks(tm: &TransmissionMatrix<f64>) -> Vec<RowMask> {
    let dims = tm.dims;
    let n = dims.n_half();
    (0..n)
        .map(|gamma| {
            let mut m = RowMask::inputs_only(dims, dims.output_site(gamma));
            for alpha in 0..n {
                m.active[alpha] = tm.entries[[gamma, alpha]] != 0.0;
            }
            m
        })
        .collect()
}

/// One (σ, replicate) job of a sweep.
pub fn run_point(cfg: &SweepConfig, k: usize, rep: usize) -> Result<SweepRecord> {
    let started = Instant::now();
    let sigma = cfg.sigma_grid[k];
    let dims = Dimensions::new(cfg.w)?;
    let n = dims.n_half();
    let tm = build_random_tm::<f64>(dims, cfg.density, cfg.matrix_seed(rep))?;
    let seed = cfg.point_seed(k, rep);
    let noise = NoiseSpec::homogeneous(sigma, n)?;
    let ds: Dataset<f64> = generate_dataset(&tm, cfg.m_samples, &noise, derive_seed(seed, &[stream::DATASET]))?;

    let (_, best) = run_decimation(&ds, cfg.scope, &cfg.optim, &cfg.decimation)?;
    let direct = extract_tm(&best)?;
    let q_t_bic = quality_q(tm.entries.view(), direct.tm.entries.view(), "T vs T_inf")?.q;

    let fitter = RowFitter::new(&ds);
    let truth_fit = fitter.fit(&true_support_masks(&tm), Scope::Output, &cfg.optim, None)?;
    let q_t_true_support = quality_q(
        tm.entries.view(),
        extract_tm(&truth_fit)?.tm.entries.view(),
        "T vs T_inf on the true support",
    )?
    .q;

    let rev = reverse_dataset(&ds)?;
    let (_, inv_best) = run_decimation(&rev, cfg.scope, &cfg.optim, &cfg.decimation)?;
    let inverse = extract_tm(&inv_best)?;
    debug_assert_eq!(inverse.tm.role, Role::Inverse);
    let inv_couplings = inv_best.tm_couplings();

    let mut probe = rng_from_seed(derive_seed(seed, &[stream::PROBE]));
    let target = gaussian_spot(dims, cfg.spot_width);
    let focus = focusing_experiment(&tm, &direct.tm, &target, &noise, &mut probe)?;

    let pinv = pseudo_inverse(&direct.tm.entries);
    let exact = pseudo_inverse(&tm.entries);
    let object = glyph(dims);
    let mut img = |t: &Array2<f64>, obj: &[f64]| -> Result<f64> {
        image_reconstruction(t, &tm, obj, &noise, &mut probe).map(|(_, q)| q)
    };
    let q_image_inverse = img(&inverse.tm.entries, &object)?;
    let q_image_pinv = img(&pinv, &object)?;
    let q_image_exact = img(&exact, &object)?;
    let q_spot_inverse = img(&inverse.tm.entries, &target)?;
    let q_spot_pinv = img(&pinv, &target)?;

    let balance = if cfg.balance {
        let all = fitter.fit(&Scope::All.default_masks(dims), Scope::All, &cfg.optim, None)?;
        Some(extract_gramian(&all)?.balance)
    } else {
        None
    };

    Ok(SweepRecord {
        sigma,
        replicate: rep,
        seed,
        true_couplings: tm.nonzero_count(),
        selected_couplings: best.tm_couplings(),
        q_t_bic,
        q_t_true_support,
        sigma_hat_mean: direct.noise.mean_sigma(),
        q_focus: focus.q,
        q_focus_target: focus.q_target,
        focus_peak_to_background: focus.peak_to_background,
        q_image_inverse,
        q_image_pinv,
        q_image_exact,
        q_spot_inverse,
        q_spot_pinv,
        inverse_selected_couplings: inv_couplings,
        inverse_density: inv_couplings as f64 / (n * n) as f64,
        balance,
        converged: best.all_converged() && inv_best.all_converged() && truth_fit.all_converged(),
        error: None,
        runtime_s: started.elapsed().as_secs_f64(),
    })
}

/// Runs every (σ, replicate) job; failures are recorded and the sweep continues.
pub fn run_sweep(cfg: &SweepConfig) -> Result<ExperimentReport> {
    cfg.validate()?;
    let jobs: Vec<(usize, usize)> = (0..cfg.sigma_grid.len())
        .flat_map(|k| (0..cfg.replicates).map(move |r| (k, r)))
        .collect();
    let records = jobs
        .par_iter()
        .map(|&(k, rep)| {
            run_point(cfg, k, rep).unwrap_or_else(|e| {
                log::error!("sigma {} replicate {rep} failed: {e}", cfg.sigma_grid[k]);
                SweepRecord {
                    sigma: cfg.sigma_grid[k],
                    replicate: rep,
                    seed: cfg.point_seed(k, rep),
                    error: Some(e.to_string()),
                    ..Default::default()
                }
            })
        })
        .collect::<Vec<_>>();
    for r in &records {
        log::info!("sigma {} replicate {}: {:.2}s", r.sigma, r.replicate, r.runtime_s);
    }
    Ok(ExperimentReport {
        config: cfg.clone(),
        records,
    })
}
