//! Physical quantities from fitted natural parameters.
//!
//! An output row fitted on forward data has `a_γ = β_γ` and `K_γα = 2 β_γ T_γα`, so
//! `T_γα = K_γα / 2a_γ` and `σ_γ = (2 a_γ)^{-1/2}`. On reversed data the same
//! formulas give the inverse matrix. Input rows of an all-sites fit carry the
//! Gramian: `K_αα' = −2β U_αα'` and `a_α = β U_αα`.

use ndarray::{Array, Array2, ArrayView, Dimension};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Direction, GroundTruthCoupling, Role, TransmissionMatrix};
use crate::optimizer::{CouplingEstimate, Scope};
use crate::pseudolikelihood::{coupling_index, RowMask, RowParams};
use crate::scalar::Real;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct ChannelNoiseEstimate<S: Real> {
    pub sigma_hat: Vec<S>,
    /// `1 / (2 σ̂²)`.
    pub beta_hat: Vec<S>,
}

impl<S: Real> ChannelNoiseEstimate<S> {
    pub fn mean_sigma(&self) -> S {
        self.sigma_hat.iter().fold(S::zero(), |a, &b| a + b) / S::from_usize_lossy(self.sigma_hat.len())
    }

    pub fn mean_beta(&self) -> S {
        self.beta_hat.iter().fold(S::zero(), |a, &b| a + b) / S::from_usize_lossy(self.beta_hat.len())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TmExtraction<S: Real> {
    pub tm: TransmissionMatrix<S>,
    pub noise: ChannelNoiseEstimate<S>,
    /// Output channels whose row fit did not converge.
    pub flagged: Vec<usize>,
    /// Output-to-output couplings `K_γγ' / 2a_γ` of an all-sites fit (zero in the
    /// ideal model), reported as a diagnostic.
    pub output_residual: Option<Array2<S>>,
}

fn output_row<S: Real>(est: &CouplingEstimate<S>, gamma: usize) -> Result<(usize, &RowParams<S>)> {
    let site = est.dims.output_site(gamma);
    let idx = est
        .fitted_sites
        .iter()
        .position(|&s| s == site)
        .ok_or_else(|| Error::ScopeMismatch(format!("output site {site} was not fitted")))?;
    Ok((idx, &est.rows[idx]))
}

pub fn extract_tm<S: Real>(est: &CouplingEstimate<S>) -> Result<TmExtraction<S>> {
    let dims = est.dims;
    let n = dims.n_half();
    let mut t = Array2::zeros((n, n));
    let mut sigma_hat = Vec::with_capacity(n);
    let mut beta_hat = Vec::with_capacity(n);
    let mut flagged = Vec::new();
    let mut residual = (est.scope == Scope::All).then(|| Array2::zeros((n, n)));
    for gamma in 0..n {
        let (idx, row) = output_row(est, gamma)?;
        if !(row.a > S::zero()) {
            return Err(Error::NonPositiveCurvature(row.a.as_f64()));
        }
        if !est.converged[idx] {
            flagged.push(gamma);
        }
        let two_a = S::two() * row.a;
        for alpha in 0..n {
            t[[gamma, alpha]] = row.coupling(alpha) / two_a;
        }
        if let Some(res) = residual.as_mut() {
            for other in 0..n {
                if other != gamma {
                    res[[gamma, other]] = row.coupling(dims.output_site(other)) / two_a;
                }
            }
        }
        sigma_hat.push(two_a.sqrt().recip());
        beta_hat.push(row.a);
    }
    if !flagged.is_empty() {
        log::warn!("{} output rows did not converge: {:?}", flagged.len(), flagged);
    }
    let role = match est.direction {
        Direction::Forward => Role::Direct,
        Direction::Reversed => Role::Inverse,
    };
    Ok(TmExtraction {
        tm: TransmissionMatrix::new(dims, t, role)?,
        noise: ChannelNoiseEstimate { sigma_hat, beta_hat },
        flagged,
        output_residual: residual,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct GramianExtraction<S: Real> {
    pub u: Array2<S>,
    /// `‖U − TᵀT‖_F / ‖TᵀT‖_F` against the extracted `T`.
    pub balance: S,
    /// Shared input-row inverse temperature used to scale `U` (mean output `β`).
    pub beta: S,
}

/// Gramian from the input rows of an all-sites fit, plus the balance criterion.
///
/// `a_α = β U_αα` does not separate `β` from `U_αα`; all input rows share the mean
/// output `β`.
pub fn extract_gramian<S: Real>(est: &CouplingEstimate<S>) -> Result<GramianExtraction<S>> {
    if est.scope != Scope::All {
        return Err(Error::ScopeMismatch(
            "the Gramian needs an all-sites estimate".into(),
        ));
    }
    let tm = extract_tm(est)?;
    let beta = tm.noise.mean_beta();
    let n = est.dims.n_half();
    let mut u = Array2::zeros((n, n));
    for alpha in 0..n {
        let row = est
            .row(alpha)
            .ok_or_else(|| Error::ScopeMismatch(format!("input site {alpha} was not fitted")))?;
        for other in 0..n {
            u[[alpha, other]] = if other == alpha {
                row.a / beta
            } else {
                -row.coupling(other) / (S::two() * beta)
            };
        }
    }
    let t = &tm.tm.entries;
    let tt = t.t().dot(t);
    let balance = frobenius_ratio(u.view(), tt.view())?;
    Ok(GramianExtraction { u, balance, beta })
}

fn frobenius_ratio<S: Real, D: Dimension>(cand: ArrayView<S, D>, reference: ArrayView<S, D>) -> Result<S> {
    if cand.shape() != reference.shape() {
        return Err(Error::DimensionMismatch {
            expected: reference.len(),
            got: cand.len(),
        });
    }
    let (mut num, mut den) = (S::zero(), S::zero());
    for (&c, &r) in cand.iter().zip(reference.iter()) {
        num += (r - c) * (r - c);
        den += r * r;
    }
    if den == S::zero() {
        return Err(Error::ZeroNorm);
    }
    Ok((num / den).sqrt())
}

/// Effective inverse temperature of each fitted row: `a` for output rows, the
/// shared mean output `β` for input rows.
fn row_betas<S: Real>(est: &CouplingEstimate<S>) -> Vec<S> {
    let dims = est.dims;
    let outputs: Vec<S> = est
        .fitted_sites
        .iter()
        .zip(&est.rows)
        .filter(|(s, _)| !dims.is_input_site(**s))
        .map(|(_, r)| r.a)
        .collect();
    let mean = if outputs.is_empty() {
        S::one()
    } else {
        outputs.iter().fold(S::zero(), |a, &b| a + b) / S::from_usize_lossy(outputs.len())
    };
    est.fitted_sites
        .iter()
        .zip(&est.rows)
        .map(|(&s, r)| if dims.is_input_site(s) { mean } else { r.a })
        .collect()
}

/// Ties the two fitted copies of every coupling: each row is moved to `J` units
/// (divided by its `β`), the matrix is replaced by `(J + Jᵀ)/2`, and rows are scaled
/// back. A coupling active in either direction stays active.
pub fn symmetrize<S: Real>(est: &CouplingEstimate<S>) -> Result<CouplingEstimate<S>> {
    if est.scope != Scope::All {
        return Err(Error::ScopeMismatch("symmetrization needs an all-sites estimate".into()));
    }
    let n = est.dims.n();
    let betas = row_betas(est);
    let mut j = Array2::<S>::zeros((n, n));
    for (i, row) in est.rows.iter().enumerate() {
        for other in (0..n).filter(|&o| o != i) {
            j[[i, other]] = row.coupling(other) / betas[i];
        }
    }
    let mut out = est.clone();
    for i in 0..n {
        for other in (0..n).filter(|&o| o != i) {
            let p = coupling_index(i, other);
            let q = coupling_index(other, i);
            let avg = (j[[i, other]] + j[[other, i]]) * S::half();
            out.rows[i].k[p] = avg * betas[i];
            out.masks[i].active[p] = est.masks[i].active[p] || est.masks[other].active[q];
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormKind {
    Frobenius,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QualityReport {
    pub q: f64,
    pub norm_kind: NormKind,
    pub operands: String,
}

/// `Q = (‖ref − cand‖_F / ‖ref‖_F)^{1/2}`; zero means exact recovery.
pub fn quality_q<S: Real, D: Dimension>(
    reference: ArrayView<S, D>,
    candidate: ArrayView<S, D>,
    operands: &str,
) -> Result<QualityReport> {
    let ratio = frobenius_ratio(candidate, reference)?;
    Ok(QualityReport {
        q: ratio.as_f64().sqrt(),
        norm_kind: NormKind::Frobenius,
        operands: operands.to_owned(),
    })
}

/// Output-scope estimate whose rows encode `T` and per-channel `σ` exactly
/// (`a = 1/2σ²`, `K = 2aT`). Inverse of [`extract_tm`].
pub fn parameterize<S: Real>(tm: &TransmissionMatrix<S>, sigma: &[S]) -> Result<CouplingEstimate<S>> {
    let dims = tm.dims;
    let n = dims.n_half();
    if sigma.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: sigma.len(),
        });
    }
    if sigma.iter().any(|s| !(*s > S::zero())) {
        return Err(Error::InvalidArgument("noise levels must be positive".into()));
    }
    let masks = Scope::Output.default_masks(dims);
    let rows: Vec<RowParams<S>> = (0..n)
        .map(|gamma| {
            let site = dims.output_site(gamma);
            let a = S::one() / (S::two() * sigma[gamma] * sigma[gamma]);
            let mut p = RowParams::neutral(site, dims.n());
            p.a = a;
            for alpha in 0..n {
                p.k[coupling_index(site, alpha)] = S::two() * a * tm.entries[[gamma, alpha]];
            }
            p
        })
        .collect();
    Ok(synthetic_estimate(dims, Scope::Output, direction_of(tm.role), rows, masks))
}

/// All-sites estimate built from a ground-truth coupling matrix at a common `β`.
pub fn parameterize_all<S: Real>(truth: &GroundTruthCoupling<S>, beta: S) -> CouplingEstimate<S> {
    let dims = truth.dims;
    let n = dims.n();
    let fields = truth.site_couplings();
    let rows: Vec<RowParams<S>> = (0..n)
        .map(|i| {
            let mut p = RowParams::neutral(i, n);
            p.a = -beta * truth.j[[i, i]];
            for other in (0..n).filter(|&o| o != i) {
                p.k[coupling_index(i, other)] = beta * fields[[i, other]];
            }
            p
        })
        .collect();
    let masks = (0..n)
        .map(|i| RowMask {
            site: i,
            active: rows[i].k.iter().map(|k| !k.is_zero()).collect(),
        })
        .collect();
    synthetic_estimate(dims, Scope::All, Direction::Forward, rows, masks)
}

fn direction_of(role: Role) -> Direction {
    match role {
        Role::Direct => Direction::Forward,
        Role::Inverse => Direction::Reversed,
    }
}

fn synthetic_estimate<S: Real>(
    dims: crate::model::Dimensions,
    scope: Scope,
    direction: Direction,
    rows: Vec<RowParams<S>>,
    masks: Vec<RowMask>,
) -> CouplingEstimate<S> {
    let count = rows.len();
    CouplingEstimate {
        dims,
        scope,
        direction,
        fitted_sites: scope.sites(dims).collect(),
        rows,
        masks,
        dataset_fingerprint: String::new(),
        n_samples: 0,
        converged: vec![true; count],
        iterations: vec![0; count],
        total_pl: S::zero(),
    }
}

/// Convenience for matrices stored as [`Array`]s of any rank.
pub fn quality_of<S: Real, D: Dimension>(reference: &Array<S, D>, candidate: &Array<S, D>) -> Result<f64> {
    quality_q(reference.view(), candidate.view(), "").map(|r| r.q)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{
        assemble_ground_truth_coupling, build_random_tm, generate_dataset, Dimensions, NoiseSpec,
    };
    use crate::optimizer::{fit_all_rows, OptimOptions};
    use ndarray::Array1;
    use proptest::prelude::*;

    fn dims(w: usize) -> Dimensions {
        Dimensions::new(w).unwrap()
    }

    #[test]
    fn quality_axioms() {
        let r = Array2::from_shape_fn((3, 3), |(i, j)| (i * 3 + j) as f64 + 1.0);
        assert_eq!(quality_of(&r, &r).unwrap(), 0.0);
        assert!((quality_of(&r, &Array2::zeros((3, 3))).unwrap() - 1.0).abs() < 1e-15);
        let delta = 0.09;
        let scaled = r.mapv(|v| v * (1.0 + delta));
        assert!((quality_of(&r, &scaled).unwrap() - delta.sqrt()).abs() < 1e-12);
        assert!(matches!(
            quality_of(&Array2::<f64>::zeros((2, 2)), &r.slice(ndarray::s![..2, ..2]).to_owned()),
            Err(Error::ZeroNorm)
        ));
        let v = Array1::from(vec![1.0, 2.0]);
        assert!(quality_of(&v, &Array1::from(vec![1.0, 2.0, 3.0])).is_err());
    }

    #[test]
    fn oracle_row_extracts_exactly() {
        let d = dims(2);
        let tm = build_random_tm::<f64>(d, 0.5, 3).unwrap();
        let sigma = vec![0.25, 0.5, 0.125, 1.0];
        let est = parameterize(&tm, &sigma).unwrap();
        let ex = extract_tm(&est).unwrap();
        assert_eq!(ex.tm.entries, tm.entries);
        assert_eq!(ex.noise.sigma_hat, sigma);
        assert!(ex.flagged.is_empty());
    }

    proptest! {
        #[test]
        fn parameterize_round_trip(
            w in 2usize..4,
            seed in 0u64..1000,
            sig in proptest::collection::vec(0.01f64..2.0, 16),
        ) {
            let d = dims(w);
            let tm = build_random_tm::<f64>(d, 0.6, seed).unwrap();
            let sigma: Vec<f64> = sig[..d.n_half()].to_vec();
            let ex = extract_tm(&parameterize(&tm, &sigma).unwrap()).unwrap();
            for (a, b) in ex.tm.entries.iter().zip(tm.entries.iter()) {
                prop_assert!((a - b).abs() <= 4.0 * f64::EPSILON * b.abs());
            }
            for (a, b) in ex.noise.sigma_hat.iter().zip(&sigma) {
                prop_assert!((a - b).abs() <= 4.0 * f64::EPSILON * b);
            }
            for (b, s) in ex.noise.beta_hat.iter().zip(&sigma) {
                prop_assert!(*b > 0.0);
                prop_assert!((b - 1.0 / (2.0 * s * s)).abs() <= 1e-12 * b);
            }
        }
    }

    #[test]
    fn ground_truth_estimate_is_balanced() {
        let tm = build_random_tm::<f64>(dims(3), 0.4, 8).unwrap();
        let truth = assemble_ground_truth_coupling(&tm).unwrap();
        let est = parameterize_all(&truth, 12.5);
        let g = extract_gramian(&est).unwrap();
        assert!(g.balance < 1e-14, "balance {}", g.balance);
        assert!((g.beta - 12.5).abs() < 1e-12);
        let ex = extract_tm(&est).unwrap();
        for (a, b) in ex.tm.entries.iter().zip(tm.entries.iter()) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!(ex.output_residual.unwrap().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn unrelated_gramian_is_unbalanced() {
        let tm = build_random_tm::<f64>(dims(3), 0.4, 8).unwrap();
        let other = build_random_tm::<f64>(dims(3), 0.4, 99).unwrap();
        let mut est = parameterize_all(&assemble_ground_truth_coupling(&tm).unwrap(), 2.0);
        let wrong = parameterize_all(&assemble_ground_truth_coupling(&other).unwrap(), 2.0);
        let n = tm.dims.n_half();
        est.rows[..n].clone_from_slice(&wrong.rows[..n]);
        let g = extract_gramian(&est).unwrap();
        assert!(g.balance > 0.2, "balance {}", g.balance);
    }

    #[test]
    fn gramian_needs_all_sites() {
        let tm = build_random_tm::<f64>(dims(2), 0.5, 1).unwrap();
        let est = parameterize(&tm, &[0.1; 4]).unwrap();
        assert!(matches!(extract_gramian(&est), Err(Error::ScopeMismatch(_))));
        assert!(matches!(symmetrize(&est), Err(Error::ScopeMismatch(_))));
    }

    #[test]
    fn symmetrize_averages_and_fixes_symmetric_input() {
        let tm = build_random_tm::<f64>(dims(2), 0.5, 4).unwrap();
        let est = parameterize_all(&assemble_ground_truth_coupling(&tm).unwrap(), 3.0);
        let sym = symmetrize(&est).unwrap();
        for (a, b) in sym.rows.iter().zip(&est.rows) {
            for (x, y) in a.k.iter().zip(&b.k) {
                assert!((x - y).abs() < 1e-14);
            }
        }

        // Two output rows with unequal couplings to each other, both at β = 1.
        let mut est = est;
        let (g0, g1) = (tm.dims.output_site(0), tm.dims.output_site(1));
        for r in est.rows.iter_mut().filter(|r| r.site >= tm.dims.n_half()) {
            r.a = 1.0;
        }
        est.rows[g0].k[coupling_index(g0, g1)] = 0.4;
        est.rows[g1].k[coupling_index(g1, g0)] = 0.6;
        est.masks[g0].active[coupling_index(g0, g1)] = true;
        let sym = symmetrize(&est).unwrap();
        assert!((sym.rows[g0].coupling(g1) - 0.5).abs() < 1e-15);
        assert!((sym.rows[g1].coupling(g0) - 0.5).abs() < 1e-15);
        assert!(sym.masks[g1].is_active(g0));
    }

    #[test]
    fn fitted_noise_and_balance_at_low_noise() {
        let d = dims(3);
        let tm = build_random_tm::<f64>(d, 0.4, 31).unwrap();
        let ds = generate_dataset(&tm, 4000, &NoiseSpec::homogeneous(0.01, d.n_half()).unwrap(), 32).unwrap();
        let est = fit_all_rows(&ds, &Scope::All.default_masks(d), Scope::All, &OptimOptions::default()).unwrap();
        let ex = extract_tm(&est).unwrap();
        assert!((ex.noise.mean_sigma() - 0.01).abs() < 0.001);
        let g = extract_gramian(&est).unwrap();
        assert!(g.balance < 0.05, "balance {}", g.balance);
        let sym = extract_tm(&symmetrize(&est).unwrap()).unwrap();
        let q0 = quality_of(&tm.entries, &ex.tm.entries).unwrap();
        let q1 = quality_of(&tm.entries, &sym.tm.entries).unwrap();
        assert!(q1 <= q0 + 1e-3, "{q0} -> {q1}");
    }
}
