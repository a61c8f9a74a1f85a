//! Limited-memory BFGS with a backtracking (Armijo) line search.
//!
//! Trial points where the objective returns a non-finite value are treated as
//! outside the domain and the step is shortened, which lets objectives enforce
//! open constraints such as `a > 0` as barriers.

use std::collections::VecDeque;

use crate::scalar::Real;

pub trait Objective<S: Real> {
    fn dim(&self) -> usize;

    /// Writes the gradient into `grad` and returns the value; `+∞` marks points
    /// outside the domain (the gradient is then ignored).
    fn eval(&mut self, x: &[S], grad: &mut [S]) -> S;

    /// Convergence measure, compared against the gradient tolerance.
    fn stationarity(&self, _x: &[S], grad: &[S]) -> S {
        grad.iter().fold(S::zero(), |m, g| m.max(g.abs()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LbfgsOptions<S: Real> {
    pub max_iters: usize,
    pub grad_tol: S,
    pub memory: usize,
    /// Sufficient-decrease constant of the Armijo condition.
    pub c1: S,
    pub shrink: S,
    pub max_backtracks: usize,
    /// Relative decrease below which an accepted step counts as stalled; after
    /// `stall_iters` consecutive stalled steps the iterate is at working precision
    /// and is reported as converged.
    pub stall_tol: S,
    pub stall_iters: usize,
}

impl<S: Real> Default for LbfgsOptions<S> {
    fn default() -> Self {
        Self {
            max_iters: 500,
            grad_tol: S::lit(1e-6),
            memory: 10,
            c1: S::lit(1e-4),
            shrink: S::half(),
            max_backtracks: 60,
            stall_tol: S::lit(4.0) * S::epsilon(),
            stall_iters: 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Converged,
    MaxIterations,
    LineSearchFailed,
    InvalidStart,
}

#[derive(Debug, Clone)]
pub struct Minimum<S: Real> {
    pub x: Vec<S>,
    pub value: S,
    pub stationarity: S,
    pub iterations: usize,
    pub status: Status,
    /// Objective value at the start and after every accepted step.
    pub trace: Vec<S>,
}

impl<S: Real> Minimum<S> {
    pub fn converged(&self) -> bool {
        self.status == Status::Converged
    }
}

struct Pair<S> {
    s: Vec<S>,
    y: Vec<S>,
    rho: S,
}

fn dot<S: Real>(a: &[S], b: &[S]) -> S {
    a.iter().zip(b).fold(S::zero(), |acc, (&x, &y)| acc + x * y)
}

/// Two-loop recursion: writes `-H·g` into `d`.
fn direction<S: Real>(history: &VecDeque<Pair<S>>, g: &[S], d: &mut [S], alpha: &mut Vec<S>) {
    d.iter_mut().zip(g).for_each(|(d, &g)| *d = -g);
    alpha.clear();
    for p in history.iter().rev() {
        let a = p.rho * dot(&p.s, d);
        d.iter_mut().zip(&p.y).for_each(|(d, &y)| *d -= a * y);
        alpha.push(a);
    }
    if let Some(last) = history.back() {
        let gamma = dot(&last.s, &last.y) / dot(&last.y, &last.y);
        d.iter_mut().for_each(|d| *d *= gamma);
    }
    for (p, &a) in history.iter().zip(alpha.iter().rev()) {
        let b = p.rho * dot(&p.y, d);
        d.iter_mut().zip(&p.s).for_each(|(d, &s)| *d += (a - b) * s);
    }
}

pub fn minimize<S: Real, F: Objective<S>>(f: &mut F, x0: &[S], opts: &LbfgsOptions<S>) -> Minimum<S> {
    let n = f.dim();
    assert_eq!(x0.len(), n, "start point has wrong dimension");
    let mut x = x0.to_vec();
    let mut g = vec![S::zero(); n];
    let mut fx = f.eval(&x, &mut g);
    let mut trace = vec![fx];
    if !fx.is_finite() {
        return Minimum {
            x,
            value: fx,
            stationarity: S::infinity(),
            iterations: 0,
            status: Status::InvalidStart,
            trace,
        };
    }
    let mut stat = f.stationarity(&x, &g);
    let mut history: VecDeque<Pair<S>> = VecDeque::with_capacity(opts.memory);
    let mut d = vec![S::zero(); n];
    let mut x_new = vec![S::zero(); n];
    let mut g_new = vec![S::zero(); n];
    let mut alpha_buf = Vec::with_capacity(opts.memory);
    let mut iterations = 0;
    let mut status = Status::MaxIterations;
    let mut stalled = 0;

    if stat <= opts.grad_tol {
        status = Status::Converged;
    } else {
        while iterations < opts.max_iters {
            let mut accepted = false;
            // Quasi-Newton direction first; on failure retry once along steepest descent.
            for attempt in 0..2 {
                let steepest = attempt == 1 || history.is_empty();
                if steepest {
                    history.clear();
                }
                direction(&history, &g, &mut d, &mut alpha_buf);
                let mut gtd = dot(&g, &d);
                if !(gtd < S::zero()) {
                    history.clear();
                    direction(&history, &g, &mut d, &mut alpha_buf);
                    gtd = dot(&g, &d);
                }
                let mut step = if history.is_empty() {
                    let gmax = g.iter().fold(S::zero(), |m, v| m.max(v.abs()));
                    S::one().min(S::one() / gmax.max(S::lit(1e-300)))
                } else {
                    S::one()
                };
                for _ in 0..opts.max_backtracks {
                    for ((xn, &xi), &di) in x_new.iter_mut().zip(&x).zip(&d) {
                        *xn = xi + step * di;
                    }
                    let f_new = f.eval(&x_new, &mut g_new);
                    if f_new.is_finite() && f_new <= fx + opts.c1 * step * gtd {
                        let s: Vec<S> = x_new.iter().zip(&x).map(|(&a, &b)| a - b).collect();
                        let y: Vec<S> = g_new.iter().zip(&g).map(|(&a, &b)| a - b).collect();
                        let sy = dot(&s, &y);
                        if sy > S::epsilon() * dot(&y, &y) {
                            if history.len() == opts.memory {
                                history.pop_front();
                            }
                            history.push_back(Pair {
                                s,
                                y,
                                rho: S::one() / sy,
                            });
                        }
                        std::mem::swap(&mut x, &mut x_new);
                        std::mem::swap(&mut g, &mut g_new);
                        if fx - f_new <= opts.stall_tol * fx.abs().max(S::one()) {
                            stalled += 1;
                        } else {
                            stalled = 0;
                        }
                        fx = f_new;
                        accepted = true;
                        break;
                    }
                    step *= opts.shrink;
                }
                if accepted || steepest {
                    break;
                }
            }
            if !accepted {
                status = Status::LineSearchFailed;
                break;
            }
            iterations += 1;
            trace.push(fx);
            stat = f.stationarity(&x, &g);
            if stat <= opts.grad_tol || stalled >= opts.stall_iters {
                status = Status::Converged;
                break;
            }
        }
    }

    Minimum {
        x,
        value: fx,
        stationarity: stat,
        iterations,
        status,
        trace,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Rosenbrock;

    impl Objective<f64> for Rosenbrock {
        fn dim(&self) -> usize {
            2
        }

        fn eval(&mut self, x: &[f64], g: &mut [f64]) -> f64 {
            let (a, b) = (x[0], x[1]);
            g[0] = -2.0 * (1.0 - a) - 400.0 * a * (b - a * a);
            g[1] = 200.0 * (b - a * a);
            (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2)
        }
    }

    struct Quadratic {
        diag: Vec<f64>,
    }

    impl Objective<f64> for Quadratic {
        fn dim(&self) -> usize {
            self.diag.len()
        }

        fn eval(&mut self, x: &[f64], g: &mut [f64]) -> f64 {
            let mut v = 0.0;
            for i in 0..x.len() {
                g[i] = self.diag[i] * (x[i] - 1.0);
                v += 0.5 * self.diag[i] * (x[i] - 1.0).powi(2);
            }
            v
        }
    }

    /// `x - ln x`, defined only for `x > 0`.
    struct LogBarrier;

    impl Objective<f64> for LogBarrier {
        fn dim(&self) -> usize {
            1
        }

        fn eval(&mut self, x: &[f64], g: &mut [f64]) -> f64 {
            if x[0] <= 0.0 {
                return f64::INFINITY;
            }
            g[0] = 1.0 - 1.0 / x[0];
            x[0] - x[0].ln()
        }
    }

    #[test]
    fn solves_rosenbrock() {
        let opts = LbfgsOptions {
            grad_tol: 1e-8,
            ..Default::default()
        };
        let m = minimize(&mut Rosenbrock, &[-1.2, 1.0], &opts);
        assert!(m.converged(), "{:?}", m.status);
        assert!((m.x[0] - 1.0).abs() < 1e-6 && (m.x[1] - 1.0).abs() < 1e-6);
        assert!(m.trace.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn ill_conditioned_quadratic() {
        let mut q = Quadratic {
            diag: (0..20).map(|i| 10f64.powf(i as f64 / 6.0)).collect(),
        };
        let opts = LbfgsOptions {
            grad_tol: 1e-9,
            max_iters: 1000,
            ..Default::default()
        };
        let m = minimize(&mut q, &[0.0; 20], &opts);
        assert!(m.converged(), "{:?} after {} iterations, stationarity {}", m.status, m.iterations, m.stationarity);
        assert!(m.x.iter().all(|v| (v - 1.0).abs() < 1e-6));
    }

    #[test]
    fn stall_at_working_precision_counts_as_converged() {
        // A tolerance far below what double precision can resolve.
        let mut q = Quadratic { diag: vec![1.0, 1e4] };
        let opts = LbfgsOptions {
            grad_tol: 1e-300,
            ..Default::default()
        };
        let m = minimize(&mut q, &[3.0, -2.0], &opts);
        assert!(m.converged());
        assert!(m.iterations < 100);
        assert!(m.x.iter().all(|v| (v - 1.0).abs() < 1e-7));
    }

    #[test]
    fn barrier_keeps_iterates_in_domain() {
        let m = minimize(&mut LogBarrier, &[50.0], &LbfgsOptions::default());
        assert!(m.converged());
        assert!((m.x[0] - 1.0).abs() < 1e-5);
        let bad = minimize(&mut LogBarrier, &[-1.0], &LbfgsOptions::default());
        assert_eq!(bad.status, Status::InvalidStart);
    }

    #[test]
    fn already_optimal_start_stops_immediately() {
        let mut q = Quadratic { diag: vec![1.0, 2.0] };
        let m = minimize(&mut q, &[1.0, 1.0], &LbfgsOptions::default());
        assert_eq!(m.iterations, 0);
        assert!(m.converged());
    }
}
