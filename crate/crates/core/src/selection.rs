//! Decimation of small couplings and BIC model selection.
//!
//! The path starts from a full-support fit and repeatedly switches off the globally
//! smallest couplings (by `|K|`), refitting with warm starts after every batch.
//! Each refit is scored with `BIC = k ln M − 2 PL`. Since the geometric schedule can
//! step over the best support size, the two batches around the BIC minimum are
//! optionally refined by a bisection over how many of their couplings to drop.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Dataset;
use crate::optimizer::{CouplingEstimate, OptimOptions, RowFitter, Scope};
use crate::pseudolikelihood::{coupling_index, RowMask};
use crate::scalar::Real;

/// Which pseudolikelihood enters the BIC.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum PlScale {
    /// Sum over samples (the log-likelihood convention of BIC).
    #[default]
    Sum,
    /// Per-sample mean.
    Mean,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BicOptions {
    pub pl: PlScale,
    /// Count one curvature parameter per fitted row in `k`.
    pub count_curvatures: bool,
}

impl Default for BicOptions {
    fn default() -> Self {
        Self {
            pl: PlScale::Sum,
            count_curvatures: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecimationOptions {
    /// Share of the remaining couplings removed per step.
    pub fraction: f64,
    pub min_batch: usize,
    /// Bisect inside the batches adjacent to the BIC minimum.
    pub refine: bool,
    pub bic: BicOptions,
}

impl Default for DecimationOptions {
    fn default() -> Self {
        Self {
            fraction: 0.1,
            min_batch: 1,
            refine: true,
            bic: BicOptions::default(),
        }
    }
}

impl DecimationOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.fraction > 0.0 && self.fraction <= 1.0) || self.min_batch == 0 {
            return Err(Error::Config(
                "decimation fraction must lie in (0, 1] and min_batch must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Batch size for `remaining` active couplings.
    pub fn batch(&self, remaining: usize) -> usize {
        ((self.fraction * remaining as f64).floor() as usize)
            .max(self.min_batch)
            .min(remaining)
    }
}

/// `k ln M − 2 PL`.
pub fn bic_score(k_free: usize, m_samples: usize, total_pl: f64) -> f64 {
    k_free as f64 * (m_samples as f64).ln() - 2.0 * total_pl
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecimationRecord {
    /// Free parameters: active couplings plus, by default, one curvature per row.
    pub k_active: usize,
    pub n_couplings: usize,
    /// Sample-sum log-pseudolikelihood at the refit optimum.
    pub total_pl: f64,
    pub bic: f64,
    pub converged: bool,
    pub masks: Vec<RowMask>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecimationPath {
    /// Ordered by strictly decreasing `k_active`.
    pub records: Vec<DecimationRecord>,
    pub selected: usize,
}

impl DecimationPath {
    pub fn selected_record(&self) -> &DecimationRecord {
        &self.records[self.selected]
    }
}

/// Index of the smallest BIC, ties going to the smaller `k_active`.
pub fn select_min_bic(records: &[DecimationRecord]) -> Option<usize> {
    (0..records.len()).min_by(|&i, &j| {
        records[i]
            .bic
            .total_cmp(&records[j].bic)
            .then(records[i].k_active.cmp(&records[j].k_active))
    })
}

/// Active couplings of `estimate` sorted by `|K|` ascending, ties by (site, partner).
fn ranked_couplings<S: Real>(estimate: &CouplingEstimate<S>) -> Vec<(usize, usize)> {
    let mut all: Vec<(S, usize, usize, usize)> = Vec::new();
    for (r, (row, mask)) in estimate.rows.iter().zip(&estimate.masks).enumerate() {
        for j in mask.active_sites() {
            all.push((row.k[coupling_index(mask.site, j)].abs(), mask.site, j, r));
        }
    }
    all.sort_by(|x, y| {
        x.0.partial_cmp(&y.0)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(x.1.cmp(&y.1))
            .then(x.2.cmp(&y.2))
    });
    all.into_iter().map(|(_, _, j, r)| (r, j)).collect()
}

fn drop_smallest(masks: &[RowMask], ranked: &[(usize, usize)], count: usize) -> Vec<RowMask> {
    let mut out = masks.to_vec();
    for &(r, j) in &ranked[..count] {
        let site = out[r].site;
        out[r].active[coupling_index(site, j)] = false;
    }
    out
}

/// Masks with the `batch` globally smallest active couplings switched off.
/// Curvatures are never touched.
pub fn decimate_step<S: Real>(estimate: &CouplingEstimate<S>, batch: usize) -> Result<Vec<RowMask>> {
    let active = estimate.active_couplings();
    if active == 0 {
        return Err(Error::NoActiveCouplings);
    }
    if batch == 0 || batch > active {
        return Err(Error::InvalidArgument(format!(
            "batch must lie in 1..={active}, got {batch}"
        )));
    }
    Ok(drop_smallest(&estimate.masks, &ranked_couplings(estimate), batch))
}

pub struct Decimation<'a, S: Real> {
    fitter: &'a RowFitter<S>,
    scope: Scope,
    optim: OptimOptions,
    opts: DecimationOptions,
}

impl<'a, S: Real> Decimation<'a, S> {
    pub fn new(fitter: &'a RowFitter<S>, scope: Scope, optim: OptimOptions, opts: DecimationOptions) -> Self {
        Self {
            fitter,
            scope,
            optim,
            opts,
        }
    }

    fn refit(&self, masks: &[RowMask], warm: Option<&CouplingEstimate<S>>) -> Result<CouplingEstimate<S>> {
        self.fitter
            .fit(masks, self.scope, &self.optim, warm.map(|w| w.rows.as_slice()))
    }

    pub fn record(&self, est: &CouplingEstimate<S>) -> DecimationRecord {
        let n_couplings = est.active_couplings();
        let curvatures = if self.opts.bic.count_curvatures {
            est.rows.len()
        } else {
            0
        };
        let k_active = n_couplings + curvatures;
        let total_pl = est.total_pl.as_f64();
        let pl = match self.opts.bic.pl {
            PlScale::Sum => total_pl,
            PlScale::Mean => total_pl / est.n_samples as f64,
        };
        DecimationRecord {
            k_active,
            n_couplings,
            total_pl,
            bic: bic_score(k_active, est.n_samples, pl),
            converged: est.all_converged(),
            masks: est.masks.clone(),
        }
    }

    /// Full path from `start` (typically a full-support fit) down to zero couplings.
    pub fn run(&self, start: CouplingEstimate<S>) -> Result<(DecimationPath, CouplingEstimate<S>)> {
        self.opts.validate()?;
        let mut records = vec![self.record(&start)];
        // Fitted estimates along the path, kept for warm starts of the refinement.
        let mut fits = vec![start];
        loop {
            let last = fits.last().expect("path is never empty");
            let remaining = last.active_couplings();
            if remaining == 0 {
                break;
            }
            let masks = decimate_step(last, self.opts.batch(remaining))?;
            let est = self.refit(&masks, Some(last))?;
            log::debug!(
                "decimation: {} couplings, PL {:.6e}",
                est.active_couplings(),
                est.total_pl.as_f64()
            );
            records.push(self.record(&est));
            fits.push(est);
        }

        let mut best = select_min_bic(&records).expect("path is never empty");
        let mut best_est = fits[best].clone();
        if self.opts.refine {
            let mut extra = Vec::new();
            // Between the record before the minimum and the minimum, and between the
            // minimum and the record after it.
            for lo in [best.checked_sub(1), Some(best)].into_iter().flatten() {
                if lo + 1 < fits.len() {
                    extra.extend(self.bisect(&fits[lo], &fits[lo + 1], &records[lo])?);
                }
            }
            for (rec, est) in extra {
                let better = rec.bic < records[best].bic
                    || (rec.bic == records[best].bic && rec.k_active < records[best].k_active);
                records.push(rec);
                fits.push(est);
                if better {
                    best = fits.len() - 1;
                    best_est = fits[best].clone();
                }
            }
            let mut order: Vec<usize> = (0..records.len()).collect();
            order.sort_by(|&i, &j| records[j].k_active.cmp(&records[i].k_active));
            order.dedup_by(|i, j| records[*i].k_active == records[*j].k_active);
            let records_sorted: Vec<DecimationRecord> = order.iter().map(|&i| records[i].clone()).collect();
            records = records_sorted;
            best = select_min_bic(&records).expect("path is never empty");
            if records[best].masks != best_est.masks {
                best_est = fits[order[best]].clone();
            }
        }
        Ok((
            DecimationPath {
                records,
                selected: best,
            },
            best_est,
        ))
    }

    /// Searches the number of couplings `c` to drop from `upper` (ranked by its own
    /// fit) for the smallest BIC, where dropping the whole batch gives `lower`.
    /// Assumes BIC is unimodal in `c` and bisects on its forward difference.
    fn bisect(
        &self,
        upper: &CouplingEstimate<S>,
        lower: &CouplingEstimate<S>,
        upper_rec: &DecimationRecord,
    ) -> Result<Vec<(DecimationRecord, CouplingEstimate<S>)>> {
        let ranked = ranked_couplings(upper);
        let span = upper.active_couplings() - lower.active_couplings();
        let mut evaluated: Vec<(usize, DecimationRecord, CouplingEstimate<S>)> = Vec::new();
        let bic_at = |c: usize, evaluated: &mut Vec<(usize, DecimationRecord, CouplingEstimate<S>)>| -> Result<f64> {
            if c == 0 {
                return Ok(upper_rec.bic);
            }
            if let Some((_, rec, _)) = evaluated.iter().find(|(cc, _, _)| *cc == c) {
                return Ok(rec.bic);
            }
            let masks = drop_smallest(&upper.masks, &ranked, c);
            let est = self.refit(&masks, Some(upper))?;
            let rec = self.record(&est);
            let bic = rec.bic;
            evaluated.push((c, rec, est));
            Ok(bic)
        };
        // Invariant: the minimizer lies in [lo, hi].
        let (mut lo, mut hi) = (0usize, span);
        while hi - lo > 1 {
            let mid = lo + (hi - lo) / 2;
            if bic_at(mid + 1, &mut evaluated)? < bic_at(mid, &mut evaluated)? {
                lo = mid + 1;
            } else {
                hi = mid;
            }
        }
        if lo < hi {
            bic_at(lo, &mut evaluated)?;
            bic_at(hi, &mut evaluated)?;
        }
        // `c == span` reproduces `lower`, which is already on the path.
        Ok(evaluated
            .into_iter()
            .filter(|(c, _, _)| *c < span)
            .map(|(_, rec, est)| (rec, est))
            .collect())
    }
}

/// Fits the full-support model of `scope` and runs the decimation path on it.
pub fn run_decimation<S: Real>(
    dataset: &Dataset<S>,
    scope: Scope,
    optim: &OptimOptions,
    opts: &DecimationOptions,
) -> Result<(DecimationPath, CouplingEstimate<S>)> {
    let fitter = RowFitter::new(dataset);
    let start = fitter.fit(&scope.default_masks(dataset.dims), scope, optim, None)?;
    Decimation::new(&fitter, scope, *optim, *opts).run(start)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_random_tm, generate_dataset, Dimensions, NoiseSpec, TransmissionMatrix};

    fn setup(w: usize, density: f64, m: usize, sigma: f64, seed: u64) -> (TransmissionMatrix<f64>, Dataset<f64>) {
        let dims = Dimensions::new(w).unwrap();
        let tm = build_random_tm(dims, density, seed).unwrap();
        let noise = NoiseSpec::homogeneous(sigma, dims.n_half()).unwrap();
        let ds = generate_dataset(&tm, m, &noise, seed ^ 0x5eed).unwrap();
        (tm, ds)
    }

    fn support_of(est: &CouplingEstimate<f64>) -> Vec<Vec<bool>> {
        let n_half = est.dims.n_half();
        est.masks.iter().map(|m| m.active[..n_half].to_vec()).collect()
    }

    #[test]
    fn bic_substitution() {
        assert_eq!(bic_score(0, 10, 0.0), 0.0);
        let v = bic_score(100, 5000, 1e4);
        assert!((v - (100.0 * 5000f64.ln() - 2e4)).abs() < 1e-9);
    }

    #[test]
    fn batch_schedule() {
        let o = DecimationOptions::default();
        assert_eq!(o.batch(100), 10);
        assert_eq!(o.batch(9), 1);
        assert_eq!(o.batch(1), 1);
        assert_eq!(o.batch(35), 3);
    }

    #[test]
    fn decimate_step_drops_smallest_globally() {
        let (_, ds) = setup(2, 1.0, 50, 0.1, 1);
        let fitter = RowFitter::new(&ds);
        let mut est = fitter
            .fit(&Scope::Output.default_masks(ds.dims), Scope::Output, &OptimOptions::default(), None)
            .unwrap();
        // Three active couplings with prescribed magnitudes.
        for m in est.masks.iter_mut() {
            m.active.iter_mut().for_each(|a| *a = false);
        }
        est.masks[0].active[0] = true;
        est.masks[1].active[1] = true;
        est.masks[2].active[2] = true;
        est.rows[0].k[0] = 0.5;
        est.rows[1].k[1] = -0.001;
        est.rows[2].k[2] = 0.9;
        let masks = decimate_step(&est, 1).unwrap();
        assert!(masks[0].active[0] && !masks[1].active[1] && masks[2].active[2]);

        let all = decimate_step(&est, 3).unwrap();
        assert!(all.iter().all(|m| m.active_count() == 0));
        assert!(decimate_step(&est, 4).is_err());

        let mut empty = est.clone();
        empty.masks = all;
        assert!(matches!(decimate_step(&empty, 1), Err(Error::NoActiveCouplings)));
    }

    #[test]
    fn selection_breaks_ties_toward_fewer_parameters() {
        let rec = |k, bic| DecimationRecord {
            k_active: k,
            n_couplings: k,
            total_pl: 0.0,
            bic,
            converged: true,
            masks: vec![],
        };
        let records = vec![rec(10, 1.0), rec(8, 0.5), rec(5, 0.5), rec(2, 3.0)];
        assert_eq!(select_min_bic(&records), Some(2));
    }

    #[test]
    fn noiseless_ranking_separates_true_support() {
        let (tm, ds) = setup(4, 0.25, 500, 0.0, 21);
        let fitter = RowFitter::new(&ds);
        let est = fitter
            .fit(&Scope::Output.default_masks(ds.dims), Scope::Output, &OptimOptions::default(), None)
            .unwrap();
        let ranked = ranked_couplings(&est);
        let spurious = ranked
            .iter()
            .filter(|&&(r, j)| tm.entries[[r, j]] == 0.0)
            .count();
        assert!(ranked[..spurious].iter().all(|&(r, j)| tm.entries[[r, j]] == 0.0));
    }

    #[test]
    fn noiseless_path_recovers_support_exactly() {
        let (tm, ds) = setup(4, 0.25, 500, 0.0, 22);
        let (path, best) = run_decimation(&ds, Scope::Output, &OptimOptions::default(), &DecimationOptions::default()).unwrap();
        assert!(path.records.windows(2).all(|w| w[1].k_active < w[0].k_active));
        assert_eq!(path.records.last().unwrap().n_couplings, 0);
        let truth: Vec<Vec<bool>> = tm.support().rows().into_iter().map(|r| r.to_vec()).collect();
        assert_eq!(support_of(&best), truth);
        assert_eq!(path.selected_record().masks, best.masks);
    }

    #[test]
    fn nested_masks_have_ordered_likelihoods() {
        let (_, ds) = setup(3, 0.4, 200, 0.1, 23);
        let (path, _) = run_decimation(
            &ds,
            Scope::Output,
            &OptimOptions::default(),
            &DecimationOptions {
                refine: false,
                ..Default::default()
            },
        )
        .unwrap();
        for w in path.records.windows(2) {
            assert!(w[1].total_pl <= w[0].total_pl + 1e-8 * w[0].total_pl.abs().max(1.0));
        }
    }

    #[test]
    fn warm_start_is_no_worse_than_cold() {
        let (_, ds) = setup(3, 0.4, 200, 0.1, 24);
        let fitter = RowFitter::new(&ds);
        let opts = OptimOptions::default();
        let full = fitter.fit(&Scope::Output.default_masks(ds.dims), Scope::Output, &opts, None).unwrap();
        let masks = decimate_step(&full, 10).unwrap();
        let warm = fitter.fit(&masks, Scope::Output, &opts, Some(&full.rows)).unwrap();
        let cold = fitter.fit(&masks, Scope::Output, &opts, None).unwrap();
        assert!(-warm.total_pl <= -cold.total_pl + 1e-9 * cold.total_pl.abs().max(1.0));
    }
}
