//! Compressed sufficient statistics for the row objectives.
//!
//! Every row objective depends on the data only through the second-moment matrix
//! `XᵀX` of the `M × n` site matrix. Rather than forming `XᵀX` (which squares the
//! condition number and cancels catastrophically on noiseless data) we keep the
//! triangular factor `R` of a Householder QR, `XᵀX = RᵀR`, and evaluate residual
//! energies as `‖R v‖²`. Cost per evaluation drops from `O(M·n)` to `O(n²)`.

use ndarray::{Array2, ArrayView2};

use crate::lbfgs::Objective;
use crate::pseudolikelihood::{coupling_index, RowMask, RowParams};
use crate::scalar::Real;

#[derive(Debug, Clone)]
pub struct FactoredSites<S: Real> {
    /// Columns of the upper-triangular factor; column `c` holds `R[0..=c, c]`
    /// (truncated to the number of factor rows).
    cols: Vec<Vec<S>>,
    m: usize,
    n: usize,
}

impl<S: Real> FactoredSites<S> {
    pub fn new(sites: ArrayView2<S>) -> Self {
        let (m, n) = sites.dim();
        let mut work: Vec<Vec<S>> = (0..n).map(|c| sites.column(c).to_vec()).collect();
        let steps = m.min(n);
        for c in 0..steps {
            let (head, tail) = work.split_at_mut(c + 1);
            let col = &mut head[c];
            let norm = col[c..].iter().fold(S::zero(), |acc, &v| acc + v * v).sqrt();
            if norm == S::zero() {
                continue;
            }
            let alpha = if col[c] > S::zero() { -norm } else { norm };
            col[c] -= alpha;
            let vnorm2 = col[c..].iter().fold(S::zero(), |acc, &v| acc + v * v);
            if vnorm2 > S::zero() {
                let scale = S::two() / vnorm2;
                for other in tail.iter_mut() {
                    let dot = col[c..]
                        .iter()
                        .zip(&other[c..])
                        .fold(S::zero(), |acc, (&v, &x)| acc + v * x);
                    let f = dot * scale;
                    for (x, &v) in other[c..].iter_mut().zip(&col[c..]) {
                        *x -= f * v;
                    }
                }
            }
            col[c] = alpha;
        }
        let cols = work
            .into_iter()
            .enumerate()
            .map(|(c, mut col)| {
                col.truncate((c + 1).min(steps));
                col
            })
            .collect();
        Self { cols, m, n }
    }

    pub fn n_samples(&self) -> usize {
        self.m
    }

    pub fn n_sites(&self) -> usize {
        self.n
    }

    /// Dense `R` (rows = `min(M, n)`), mostly for tests.
    pub fn r_matrix(&self) -> Array2<S> {
        let rows = self.m.min(self.n);
        let mut r = Array2::zeros((rows, self.n));
        for (c, col) in self.cols.iter().enumerate() {
            for (p, &v) in col.iter().enumerate() {
                r[[p, c]] = v;
            }
        }
        r
    }

    /// `u = R v` for a vector given by its nonzero entries, written into `u`.
    fn apply(&self, nz: &[(usize, S)], u: &mut [S]) {
        u.iter_mut().for_each(|x| *x = S::zero());
        for &(c, v) in nz {
            for (x, &r) in u.iter_mut().zip(&self.cols[c]) {
                *x += r * v;
            }
        }
    }

    /// `(Rᵀ u)_c`.
    fn apply_t(&self, c: usize, u: &[S]) -> S {
        self.cols[c].iter().zip(u).fold(S::zero(), |acc, (&r, &x)| acc + r * x)
    }

    /// Mean negative log-pseudolikelihood of a row, without any regularization.
    pub fn row_neg_logpl(&self, params: &RowParams<S>, mask: &RowMask) -> S {
        let active = mask.active_sites();
        let mut x = Vec::with_capacity(active.len() + 1);
        x.push(params.a);
        x.extend(active.iter().map(|&j| params.k[coupling_index(params.site, j)]));
        let mut problem = RowProblem::new(self, params.site, active, S::zero());
        problem.value(&x)
    }
}

/// Upper-triangular `W` with `BᵀB = WᵀW` for the active columns `B` of `R`, used as
/// a linear change of variables `z = W k / √M` that whitens the coupling block of
/// the Hessian. Near-zero pivots (collinear sites) are lifted to a small multiple of
/// the largest one, which keeps the map invertible.
#[derive(Debug, Clone)]
struct Whitening<S: Real> {
    /// Column `c` holds `W[0..=c, c]`.
    cols: Vec<Vec<S>>,
    sqrt_m: S,
}

impl<S: Real> Whitening<S> {
    fn new(factor: &FactoredSites<S>, active: &[usize]) -> Self {
        let rows = factor.m.min(factor.n);
        let b = Array2::from_shape_fn((rows, active.len()), |(p, t)| {
            factor.cols[active[t]].get(p).copied().unwrap_or_else(S::zero)
        });
        let inner = FactoredSites::new(b.view());
        let mut cols: Vec<Vec<S>> = inner
            .cols
            .into_iter()
            .enumerate()
            .map(|(c, mut col)| {
                col.resize(c + 1, S::zero());
                col
            })
            .collect();
        let dmax = cols.iter().enumerate().fold(S::zero(), |m, (c, col)| m.max(col[c].abs()));
        let floor = if dmax > S::zero() { dmax * S::lit(1e-8) } else { S::one() };
        for (c, col) in cols.iter_mut().enumerate() {
            if col[c].abs() < floor {
                col[c] = if col[c] < S::zero() { -floor } else { floor };
            }
        }
        Self {
            cols,
            sqrt_m: S::from_usize_lossy(factor.m).sqrt(),
        }
    }

    /// `z = W k / √M`.
    fn to_z(&self, k: &[S], z: &mut [S]) {
        for (p, zp) in z.iter_mut().enumerate() {
            *zp = (p..k.len()).fold(S::zero(), |acc, c| acc + self.cols[c][p] * k[c]) / self.sqrt_m;
        }
    }

    /// `k = √M W⁻¹ z` by back substitution.
    fn to_k(&self, z: &[S], k: &mut [S]) {
        k.copy_from_slice(z);
        for c in (0..k.len()).rev() {
            k[c] /= self.cols[c][c];
            let kc = k[c];
            for p in 0..c {
                k[p] -= self.cols[c][p] * kc;
            }
        }
        k.iter_mut().for_each(|v| *v *= self.sqrt_m);
    }

    /// `∂f/∂z = √M W⁻ᵀ ∂f/∂k` by forward substitution, in place.
    fn grad_to_z(&self, g: &mut [S]) {
        for c in 0..g.len() {
            let acc = (0..c).fold(g[c], |acc, p| acc - self.cols[c][p] * g[p]);
            g[c] = acc / self.cols[c][c];
        }
        g.iter_mut().for_each(|v| *v *= self.sqrt_m);
    }

    /// `∂f/∂k = Wᵀ ∂f/∂z / √M`.
    fn grad_to_k(&self, gz: &[S], gk: &mut [S]) {
        for (c, out) in gk.iter_mut().enumerate() {
            *out = (0..=c).fold(S::zero(), |acc, p| acc + self.cols[c][p] * gz[p]) / self.sqrt_m;
        }
    }
}

/// One row objective restricted to its active couplings, in the variables
/// `x = [a, k_active...]`, or `x = [a, z...]` once [`RowProblem::whitened`].
///
/// The objective is the mean negative log-pseudolikelihood plus `noise_floor · a`,
/// i.e. the residual variance is floored at `noise_floor`. The floor keeps the
/// optimum finite on noiseless data and is negligible otherwise.
pub struct RowProblem<'a, S: Real> {
    factor: &'a FactoredSites<S>,
    site: usize,
    active: Vec<usize>,
    noise_floor: S,
    a_floor: S,
    whitening: Option<Whitening<S>>,
    nz: Vec<(usize, S)>,
    u: Vec<S>,
    k: Vec<S>,
}

impl<'a, S: Real> RowProblem<'a, S> {
    pub fn new(factor: &'a FactoredSites<S>, site: usize, active: Vec<usize>, noise_floor: S) -> Self {
        let rows = factor.m.min(factor.n);
        Self {
            factor,
            site,
            nz: Vec::with_capacity(active.len() + 1),
            k: vec![S::zero(); active.len()],
            active,
            noise_floor,
            a_floor: S::zero(),
            whitening: None,
            u: vec![S::zero(); rows],
        }
    }

    pub fn with_a_floor(mut self, a_floor: S) -> Self {
        self.a_floor = a_floor;
        self
    }

    /// Optimizes over whitened couplings; a linear reparameterization, so the
    /// problem stays convex while correlated sites stop slowing the solver down.
    pub fn whitened(mut self) -> Self {
        self.whitening = Some(Whitening::new(self.factor, &self.active));
        self
    }

    pub fn active(&self) -> &[usize] {
        &self.active
    }

    /// Solver variables for the given curvature and active couplings.
    pub fn to_variables(&self, a: S, k: &[S]) -> Vec<S> {
        let mut x = vec![a; k.len() + 1];
        match &self.whitening {
            Some(w) => w.to_z(k, &mut x[1..]),
            None => x[1..].copy_from_slice(k),
        }
        x
    }

    /// Active couplings for the given solver variables.
    pub fn couplings(&self, x: &[S]) -> Vec<S> {
        let mut k = vec![S::zero(); self.active.len()];
        match &self.whitening {
            Some(w) => w.to_k(&x[1..], &mut k),
            None => k.copy_from_slice(&x[1..]),
        }
        k
    }

    fn load(&mut self, x: &[S]) {
        match &self.whitening {
            Some(w) => w.to_k(&x[1..], &mut self.k),
            None => self.k.copy_from_slice(&x[1..]),
        }
    }

    /// Residual energy `S = ‖X v‖² / M` with `v = e_site − k/2a` for the couplings in
    /// `self.k`; fills `self.u`.
    fn residual_energy(&mut self, a: S) -> S {
        let two_a = S::two() * a;
        self.nz.clear();
        self.nz.push((self.site, S::one()));
        for (&j, &k) in self.active.iter().zip(&self.k) {
            self.nz.push((j, -k / two_a));
        }
        self.factor.apply(&self.nz, &mut self.u);
        let m = S::from_usize_lossy(self.factor.m);
        self.u.iter().fold(S::zero(), |acc, &v| acc + v * v) / m
    }

    fn value(&mut self, x: &[S]) -> S {
        let a = x[0];
        if !(a > self.a_floor) {
            return S::infinity();
        }
        self.load(x);
        let energy = self.residual_energy(a);
        a * (energy + self.noise_floor) + S::half() * (S::PI() / a).ln()
    }
}

impl<S: Real> Objective<S> for RowProblem<'_, S> {
    fn dim(&self) -> usize {
        self.active.len() + 1
    }

    fn eval(&mut self, x: &[S], grad: &mut [S]) -> S {
        let a = x[0];
        if !(a > self.a_floor) {
            return S::infinity();
        }
        self.load(x);
        let energy = self.residual_energy(a);
        let m = S::from_usize_lossy(self.factor.m);
        let w_site = self.factor.apply_t(self.site, &self.u);
        grad[0] = S::two() * w_site / m - energy - S::one() / (S::two() * a) + self.noise_floor;
        for (g, &j) in grad[1..].iter_mut().zip(&self.active) {
            *g = -self.factor.apply_t(j, &self.u) / m;
        }
        if let Some(w) = &self.whitening {
            w.grad_to_z(&mut grad[1..]);
        }
        a * (energy + self.noise_floor) + S::half() * (S::PI() / a).ln()
    }

    /// The curvature is a scale parameter, so its gradient is measured per unit of
    /// `ln a`; couplings use the plain gradient with respect to `k`.
    fn stationarity(&self, x: &[S], grad: &[S]) -> S {
        let ga = (x[0] * grad[0]).abs();
        match &self.whitening {
            Some(w) => {
                let mut gk = vec![S::zero(); grad.len() - 1];
                w.grad_to_k(&grad[1..], &mut gk);
                gk.iter().fold(ga, |m, g| m.max(g.abs()))
            }
            None => grad[1..].iter().fold(ga, |m, g| m.max(g.abs())),
        }
    }
}
