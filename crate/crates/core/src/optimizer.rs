//! Row-wise quasi-Newton fitting of the pseudolikelihood.
//!
//! Each fitted site is an independent convex problem in `(a, k_active)`. Rows share a
//! single QR factor of the site matrix and run in parallel on the rayon pool; results
//! are collected by site index, so the outcome does not depend on scheduling.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::factor::{FactoredSites, RowProblem};
use crate::lbfgs::{self, LbfgsOptions, Status};
use crate::model::{Dataset, Dimensions, Direction};
use crate::pseudolikelihood::{coupling_index, RowMask, RowParams};
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimOptions {
    pub max_iters: usize,
    /// Threshold on the stationarity measure: coupling gradients in plain units,
    /// the curvature gradient per unit of `ln a`.
    pub grad_tol: f64,
    pub memory: usize,
    /// Trial points with `a` at or below this value are rejected by the line search.
    pub a_floor: f64,
    /// Lower bound on the residual variance implied by a fit.
    pub noise_floor: f64,
}

impl Default for OptimOptions {
    fn default() -> Self {
        Self {
            max_iters: 500,
            grad_tol: 1e-9,
            memory: 10,
            a_floor: 1e-12,
            noise_floor: 1e-8,
        }
    }
}

impl OptimOptions {
    pub fn validate(&self) -> Result<()> {
        let ok = self.max_iters > 0
            && self.memory > 0
            && self.grad_tol > 0.0
            && self.a_floor > 0.0
            && self.noise_floor >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config("optimizer options must be positive".into()))
        }
    }

    fn lbfgs<S: Real>(&self) -> LbfgsOptions<S> {
        LbfgsOptions {
            max_iters: self.max_iters,
            grad_tol: S::lit(self.grad_tol),
            memory: self.memory,
            ..LbfgsOptions::default()
        }
    }
}

/// Which sites get a conditional model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scope {
    /// Every site; output rows also see the other outputs.
    All,
    /// Output sites only, regressed on the inputs.
    Output,
}

impl Scope {
    pub fn sites(&self, dims: Dimensions) -> std::ops::Range<usize> {
        match self {
            Scope::All => 0..dims.n(),
            Scope::Output => dims.n_half()..dims.n(),
        }
    }

    /// Full-support masks for this scope.
    pub fn default_masks(&self, dims: Dimensions) -> Vec<RowMask> {
        self.sites(dims)
            .map(|site| match self {
                Scope::All => RowMask::full(site, dims.n()),
                Scope::Output => RowMask::inputs_only(dims, site),
            })
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct RowFit<S: Real> {
    pub params: RowParams<S>,
    pub status: Status,
    pub iterations: usize,
    /// Objective values along the accepted iterates.
    pub trace: Vec<S>,
}

impl<S: Real> RowFit<S> {
    pub fn converged(&self) -> bool {
        self.status == Status::Converged
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct CouplingEstimate<S: Real> {
    pub dims: Dimensions,
    pub scope: Scope,
    /// Direction of the fitted dataset; reversed data yields the inverse matrix.
    pub direction: Direction,
    pub rows: Vec<RowParams<S>>,
    pub masks: Vec<RowMask>,
    pub fitted_sites: Vec<usize>,
    pub dataset_fingerprint: String,
    pub n_samples: usize,
    pub converged: Vec<bool>,
    pub iterations: Vec<usize>,
    pub total_pl: S,
}

impl<S: Real> CouplingEstimate<S> {
    pub fn all_converged(&self) -> bool {
        self.converged.iter().all(|&c| c)
    }

    pub fn active_couplings(&self) -> usize {
        self.masks.iter().map(RowMask::active_count).sum()
    }

    /// Active output-to-input couplings, i.e. the nonzero pattern of the extracted matrix.
    pub fn tm_couplings(&self) -> usize {
        let n_half = self.dims.n_half();
        self.masks
            .iter()
            .filter(|m| m.site >= n_half)
            .map(|m| m.active[..n_half].iter().filter(|&&a| a).count())
            .sum()
    }

    pub fn row(&self, site: usize) -> Option<&RowParams<S>> {
        self.fitted_sites
            .iter()
            .position(|&s| s == site)
            .map(|i| &self.rows[i])
    }
}

fn fit_factored<S: Real>(
    factor: &FactoredSites<S>,
    mask: &RowMask,
    init: Option<&RowParams<S>>,
    opts: &OptimOptions,
) -> Result<RowFit<S>> {
    let site = mask.site;
    let n = factor.n_sites();
    if mask.active.len() + 1 != n {
        return Err(Error::DimensionMismatch {
            expected: n - 1,
            got: mask.active.len(),
        });
    }
    let start = match init {
        Some(p) => {
            if !(p.a > S::zero()) {
                return Err(Error::NonPositiveCurvature(p.a.as_f64()));
            }
            if p.site != site || p.k.len() + 1 != n {
                return Err(Error::InvalidArgument("initial parameters do not match the row".into()));
            }
            p.clone()
        }
        None => RowParams::neutral(site, n),
    };
    let active = mask.active_sites();
    let k0: Vec<S> = active.iter().map(|&j| start.k[coupling_index(site, j)]).collect();

    let mut problem = RowProblem::new(factor, site, active.clone(), S::lit(opts.noise_floor))
        .with_a_floor(S::lit(opts.a_floor))
        .whitened();
    let x0 = problem.to_variables(start.a, &k0);
    let min = lbfgs::minimize(&mut problem, &x0, &opts.lbfgs());

    let mut params = RowParams::neutral(site, n);
    params.a = min.x[0];
    for (&j, k) in active.iter().zip(problem.couplings(&min.x)) {
        params.k[coupling_index(site, j)] = k;
    }
    Ok(RowFit {
        params,
        status: min.status,
        iterations: min.iterations,
        trace: min.trace,
    })
}

/// Fits one row from scratch. Batch callers should prefer [`RowFitter`], which
/// factors the data once.
pub fn minimize_row<S: Real>(
    site: usize,
    dataset: &Dataset<S>,
    mask: &RowMask,
    init: Option<&RowParams<S>>,
    opts: &OptimOptions,
) -> Result<RowFit<S>> {
    if mask.site != site {
        return Err(Error::InvalidArgument("mask belongs to another site".into()));
    }
    let factor = FactoredSites::new(dataset.site_matrix().view());
    fit_factored(&factor, mask, init, opts)
}

/// Shared state for repeated fits on one dataset.
pub struct RowFitter<S: Real> {
    factor: FactoredSites<S>,
    dims: Dimensions,
    direction: Direction,
    fingerprint: String,
}

impl<S: Real> RowFitter<S> {
    pub fn new(dataset: &Dataset<S>) -> Self {
        Self {
            factor: FactoredSites::new(dataset.site_matrix().view()),
            dims: dataset.dims,
            direction: dataset.direction,
            fingerprint: dataset.fingerprint(),
        }
    }

    pub fn dims(&self) -> Dimensions {
        self.dims
    }

    pub fn n_samples(&self) -> usize {
        self.factor.n_samples()
    }

    pub fn factor(&self) -> &FactoredSites<S> {
        &self.factor
    }

    /// Total log-pseudolikelihood (sample sum) of the given rows.
    pub fn total_pl(&self, rows: &[RowParams<S>], masks: &[RowMask]) -> S {
        let m = S::from_usize_lossy(self.n_samples());
        rows.iter()
            .zip(masks)
            .fold(S::zero(), |acc, (p, mask)| acc - m * self.factor.row_neg_logpl(p, mask))
    }

    /// Fits every row named by `masks`, optionally warm-started from `warm`
    /// (one entry per mask, same order).
    pub fn fit(
        &self,
        masks: &[RowMask],
        scope: Scope,
        opts: &OptimOptions,
        warm: Option<&[RowParams<S>]>,
    ) -> Result<CouplingEstimate<S>> {
        opts.validate()?;
        if masks.is_empty() {
            return Err(Error::EmptyScope);
        }
        let expected: Vec<usize> = scope.sites(self.dims).collect();
        let fitted_sites: Vec<usize> = masks.iter().map(|m| m.site).collect();
        if fitted_sites != expected {
            return Err(Error::ScopeMismatch(format!(
                "masks cover {} sites, {:?} scope needs {}",
                fitted_sites.len(),
                scope,
                expected.len()
            )));
        }
        if let Some(w) = warm {
            if w.len() != masks.len() {
                return Err(Error::DimensionMismatch {
                    expected: masks.len(),
                    got: w.len(),
                });
            }
        }
        let fits: Vec<RowFit<S>> = masks
            .par_iter()
            .enumerate()
            .map(|(i, mask)| {
                let init = warm.map(|w| {
                    let mut p = w[i].clone();
                    p.apply_mask(mask);
                    p
                });
                fit_factored(&self.factor, mask, init.as_ref(), opts)
            })
            .collect::<Result<_>>()?;

        for (fit, mask) in fits.iter().zip(masks) {
            if !fit.converged() {
                log::debug!(
                    "row {} stopped with {:?} after {} iterations",
                    mask.site,
                    fit.status,
                    fit.iterations
                );
            }
        }
        let converged = fits.iter().map(RowFit::converged).collect();
        let iterations = fits.iter().map(|f| f.iterations).collect();
        let rows: Vec<RowParams<S>> = fits.into_iter().map(|f| f.params).collect();
        let total_pl = self.total_pl(&rows, masks);
        Ok(CouplingEstimate {
            dims: self.dims,
            scope,
            direction: self.direction,
            rows,
            masks: masks.to_vec(),
            fitted_sites,
            dataset_fingerprint: self.fingerprint.clone(),
            n_samples: self.n_samples(),
            converged,
            iterations,
            total_pl,
        })
    }
}

/// Fits all rows of `scope` independently under the given masks.
pub fn fit_all_rows<S: Real>(
    dataset: &Dataset<S>,
    masks: &[RowMask],
    scope: Scope,
    opts: &OptimOptions,
) -> Result<CouplingEstimate<S>> {
    RowFitter::new(dataset).fit(masks, scope, opts, None)
}
