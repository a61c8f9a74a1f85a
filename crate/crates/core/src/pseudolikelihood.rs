//! Per-site Gaussian conditional objective.
//!
//! Fixing every site except `i`, the conditional density of `I_i` is
//!
//! ```text
//! P(I_i | rest) = exp(-a·I_i² + B_i·I_i) / Z_i,    B_i = Σ_{j≠i} K_ij · I_j
//! ln Z_i        = ln 2 + ½·ln(π / 4a) + B_i² / 4a
//! ```
//!
//! with curvature `a = A_i > 0` and coupling fields `K_ij = β_i·J_ij`. Everything in
//! this module evaluates that density directly sample by sample; the optimizer uses
//! an algebraically equivalent factored form (see [`crate::factor`]).

use ndarray::{ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Dataset, Dimensions};
use crate::scalar::Real;

/// Position of site `j` inside the coupling vector of row `site` (which skips `site`).
#[inline]
pub fn coupling_index(site: usize, j: usize) -> usize {
    debug_assert_ne!(site, j);
    if j < site {
        j
    } else {
        j - 1
    }
}

/// Site addressed by position `p` of the coupling vector of row `site`.
#[inline]
pub fn coupling_site(site: usize, p: usize) -> usize {
    if p < site {
        p
    } else {
        p + 1
    }
}

/// Natural parameters of one conditional Gaussian.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct RowParams<S: Real> {
    pub site: usize,
    pub a: S,
    /// Couplings to every other site, length `n - 1`, ordered by site with `site` skipped.
    pub k: Vec<S>,
}

impl<S: Real> RowParams<S> {
    pub fn neutral(site: usize, n: usize) -> Self {
        Self {
            site,
            a: S::one(),
            k: vec![S::zero(); n - 1],
        }
    }

    pub fn coupling(&self, j: usize) -> S {
        if j == self.site {
            S::zero()
        } else {
            self.k[coupling_index(self.site, j)]
        }
    }

    /// Zeroes every masked coupling.
    pub fn apply_mask(&mut self, mask: &RowMask) {
        for (k, &on) in self.k.iter_mut().zip(&mask.active) {
            if !on {
                *k = S::zero();
            }
        }
    }
}

/// Support of one row: which couplings are free.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RowMask {
    pub site: usize,
    pub active: Vec<bool>,
}

impl RowMask {
    pub fn full(site: usize, n: usize) -> Self {
        Self {
            site,
            active: vec![true; n - 1],
        }
    }

    /// Couplings only towards input sites.
    pub fn inputs_only(dims: Dimensions, site: usize) -> Self {
        let active = (0..dims.n() - 1)
            .map(|p| dims.is_input_site(coupling_site(site, p)))
            .collect();
        Self { site, active }
    }

    pub fn is_active(&self, j: usize) -> bool {
        j != self.site && self.active[coupling_index(self.site, j)]
    }

    pub fn active_count(&self) -> usize {
        self.active.iter().filter(|&&b| b).count()
    }

    /// Active sites in increasing order.
    pub fn active_sites(&self) -> Vec<usize> {
        self.active
            .iter()
            .enumerate()
            .filter(|(_, &on)| on)
            .map(|(p, _)| coupling_site(self.site, p))
            .collect()
    }
}

/// `B_i = Σ_{j≠i} K_ij · I_j` for one concatenated site vector.
pub fn field_b<S: Real>(params: &RowParams<S>, sites: &[S]) -> S {
    params
        .k
        .iter()
        .enumerate()
        .fold(S::zero(), |acc, (p, &k)| acc + k * sites[coupling_site(params.site, p)])
}

/// `ln ∫ exp(-a x² + b x) dx` over the whole real line.
pub fn log_partition<S: Real>(a: S, b: S) -> Result<S> {
    if !(a > S::zero()) {
        return Err(Error::NonPositiveCurvature(a.as_f64()));
    }
    let four_a = S::lit(4.0) * a;
    Ok(S::LN_2() + S::half() * (S::PI() / four_a).ln() + b * b / four_a)
}

fn masked_field<S: Real>(params: &RowParams<S>, mask: &RowMask, sites: ArrayView1<S>) -> S {
    params
        .k
        .iter()
        .zip(&mask.active)
        .enumerate()
        .filter(|(_, (_, &on))| on)
        .fold(S::zero(), |acc, (p, (&k, _))| {
            acc + k * sites[coupling_site(params.site, p)]
        })
}

/// Mean negative log-pseudolikelihood of one row over the rows of a site matrix.
/// Returns `+∞` for `a ≤ 0`.
pub fn row_neg_logpl_sites<S: Real>(params: &RowParams<S>, sites: ArrayView2<S>, mask: &RowMask) -> S {
    let a = params.a;
    if !(a > S::zero()) {
        return S::infinity();
    }
    let two_a = S::two() * a;
    let log_norm = S::half() * (S::PI() / a).ln();
    let m = sites.nrows();
    let total = sites.outer_iter().fold(S::zero(), |acc, row| {
        // a·I² − I·B + B²/4a + ½ln(π/a), written as a·r² + ½ln(π/a) with r = I − B/2a.
        let b = masked_field(params, mask, row);
        let r = row[params.site] - b / two_a;
        acc + a * r * r + log_norm
    });
    total / S::from_usize_lossy(m)
}

pub fn row_neg_logpl<S: Real>(params: &RowParams<S>, dataset: &Dataset<S>, mask: &RowMask) -> S {
    row_neg_logpl_sites(params, dataset.site_matrix().view(), mask)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RowGradient<S: Real> {
    pub da: S,
    /// Same layout as [`RowParams::k`]; masked entries are zero.
    pub dk: Vec<S>,
}

impl<S: Real> RowGradient<S> {
    pub fn inf_norm(&self) -> S {
        self.dk.iter().fold(self.da.abs(), |m, v| m.max(v.abs()))
    }
}

pub fn row_grad_sites<S: Real>(
    params: &RowParams<S>,
    sites: ArrayView2<S>,
    mask: &RowMask,
) -> Result<RowGradient<S>> {
    let a = params.a;
    if !(a > S::zero()) {
        return Err(Error::NonPositiveCurvature(a.as_f64()));
    }
    let two_a = S::two() * a;
    let mut da = S::zero();
    let mut dk = vec![S::zero(); params.k.len()];
    for row in sites.outer_iter() {
        let b = masked_field(params, mask, row);
        let x = row[params.site];
        let r = x - b / two_a;
        da += x * x - S::one() / two_a - b * b / (two_a * two_a);
        for (p, d) in dk.iter_mut().enumerate() {
            if mask.active[p] {
                *d -= row[coupling_site(params.site, p)] * r;
            }
        }
    }
    let m = S::from_usize_lossy(sites.nrows());
    Ok(RowGradient {
        da: da / m,
        dk: dk.into_iter().map(|v| v / m).collect(),
    })
}

/// Analytic gradient of [`row_neg_logpl`] with respect to `(a, k)`.
pub fn row_grad<S: Real>(params: &RowParams<S>, dataset: &Dataset<S>, mask: &RowMask) -> Result<RowGradient<S>> {
    row_grad_sites(params, dataset.site_matrix().view(), mask)
}

/// Total log-pseudolikelihood: the sum over samples and fitted sites.
pub fn total_pl<S: Real>(rows: &[RowParams<S>], dataset: &Dataset<S>, masks: &[RowMask]) -> S {
    let sites = dataset.site_matrix();
    let m = S::from_usize_lossy(dataset.len());
    rows.iter()
        .zip(masks)
        .fold(S::zero(), |acc, (p, mask)| acc - m * row_neg_logpl_sites(p, sites.view(), mask))
}
