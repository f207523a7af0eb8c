//! Log-domain barrier solver.
//!
//! Phase I minimizes a shared infeasibility slack (in log form, so the
//! slack variable enters every constraint as an exp(-s) factor); Phase II
//! runs damped Newton centering with an Armijo backtracking line search on
//! a geometric barrier-parameter schedule. Both phases share one barrier
//! core; the Phase-I objective is just a single-term log-sum-exp, whose
//! Hessian contribution vanishes automatically.

use nalgebra::{DMatrix, DVector};

use super::{GpProblem, GpSolution, GpStatus, LogSumExp};
use crate::error::{Error, Result};

const MAX_OUTER: usize = 50;
const MAX_NEWTON: usize = 200;
const MAX_NEWTON_PER_CENTER: usize = 60;
const MU: f64 = 10.0;
const NEWTON_TOL: f64 = 1e-11;
const ARMIJO_C1: f64 = 1e-4;
/// |y| beyond this triggers the unbounded-ray certificate (x ~ e^100).
const DIVERGE_NORM: f64 = 100.0;
/// Largest per-iteration move of any log variable. Rank-deficient
/// Hessians (ridge-regularized) can request astronomically long steps
/// along flat directions; moving any x by more than e^10 per Newton step
/// is never informative.
const STEP_CAP: f64 = 10.0;

impl LogSumExp {
    /// Value and softmax weights at y.
    fn eval_probs(&self, y: &[f64]) -> (f64, Vec<f64>) {
        let acts: Vec<f64> = self
            .terms
            .iter()
            .map(|(row, b)| b + row.iter().map(|&(i, e)| e * y[i]).sum::<f64>())
            .collect();
        let max = acts.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = acts.iter().map(|a| (a - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        let value = max + sum.ln();
        let probs = exps.iter().map(|e| e / sum).collect();
        (value, probs)
    }

    fn grad(&self, probs: &[f64], n: usize) -> DVector<f64> {
        let mut g = DVector::zeros(n);
        for ((row, _), &p) in self.terms.iter().zip(probs) {
            for &(i, e) in row {
                g[i] += p * e;
            }
        }
        g
    }

    /// Add `w * (Σ p_j a_j a_jᵀ − g gᵀ)` to `hess`.
    fn add_scaled_hessian(&self, probs: &[f64], grad: &DVector<f64>, w: f64, hess: &mut DMatrix<f64>) {
        for ((row, _), &p) in self.terms.iter().zip(probs) {
            let wp = w * p;
            for &(i, ei) in row {
                for &(j, ej) in row {
                    hess[(i, j)] += wp * ei * ej;
                }
            }
        }
        hess.ger(-w, grad, grad, 1.0);
    }

    /// Asymptotic slope along direction d: max over terms of a·d.
    fn ray_slope(&self, d: &[f64]) -> f64 {
        self.terms
            .iter()
            .map(|(row, _)| row.iter().map(|&(i, e)| e * d[i]).sum::<f64>())
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Barrier value at y, or None outside the domain.
fn barrier_value(objective: &LogSumExp, constraints: &[LogSumExp], y: &[f64], t: f64) -> Option<f64> {
    let mut phi = t * objective.value(y);
    for c in constraints {
        let g = c.value(y);
        if g >= 0.0 || !g.is_finite() {
            return None;
        }
        phi -= (-g).ln();
    }
    phi.is_finite().then_some(phi)
}

/// All points y + s·d remain feasible and the objective decreases without
/// bound along the ray.
fn certify_unbounded(objective: &LogSumExp, constraints: &[LogSumExp], d: &[f64]) -> bool {
    objective.ray_slope(d) < -1e-10 && constraints.iter().all(|c| c.ray_slope(d) <= 1e-12)
}

struct BarrierOutcome {
    y: Vec<f64>,
    converged: bool,
    early_stopped: bool,
    unbounded: bool,
    t_final: f64,
    newton_steps: usize,
    outer_iterations: usize,
}

fn solve_newton_system(hess: &DMatrix<f64>, grad: &DVector<f64>) -> Result<DVector<f64>> {
    let n = hess.nrows();
    let mut ridge = 0.0;
    let base = 1e-12 * (1.0 + hess.trace().abs() / n as f64);
    for _ in 0..8 {
        let mut h = hess.clone();
        if ridge > 0.0 {
            for i in 0..n {
                h[(i, i)] += ridge;
            }
        }
        if let Some(chol) = h.cholesky() {
            return Ok(chol.solve(&(-grad)));
        }
        ridge = if ridge == 0.0 { base } else { ridge * 100.0 };
    }
    Err(Error::Solver("Newton system not positive definite".into()))
}

fn barrier_minimize(
    n: usize,
    objective: &LogSumExp,
    constraints: &[LogSumExp],
    mut y: Vec<f64>,
    tol: f64,
    early_stop: Option<&dyn Fn(&[f64]) -> bool>,
) -> Result<BarrierOutcome> {
    let m = constraints.len() as f64;
    let mut t = 1.0;
    let mut newton_steps = 0;
    let mut outer_iterations = 0;

    loop {
        outer_iterations += 1;
        // center at the current barrier parameter
        for _ in 0..MAX_NEWTON_PER_CENTER {
            if newton_steps >= MAX_NEWTON {
                return Ok(BarrierOutcome {
                    y,
                    converged: false,
                    early_stopped: false,
                    unbounded: false,
                    t_final: t,
                    newton_steps,
                    outer_iterations,
                });
            }
            let mut grad = DVector::zeros(n);
            let mut hess = DMatrix::zeros(n, n);

            let (_, p0) = objective.eval_probs(&y);
            let g0 = objective.grad(&p0, n);
            grad.axpy(t, &g0, 1.0);
            objective.add_scaled_hessian(&p0, &g0, t, &mut hess);

            for c in constraints {
                let (gv, probs) = c.eval_probs(&y);
                if gv >= 0.0 || !gv.is_finite() {
                    return Err(Error::Solver("barrier left the feasible region".into()));
                }
                let gc = c.grad(&probs, n);
                let w1 = 1.0 / (-gv);
                grad.axpy(w1, &gc, 1.0);
                c.add_scaled_hessian(&probs, &gc, w1, &mut hess);
                hess.ger(1.0 / (gv * gv), &gc, &gc, 1.0);
            }

            let step = solve_newton_system(&hess, &grad)?;
            let decrement_sq = -grad.dot(&step);
            if std::env::var("GP_TRACE").is_ok() {
                eprintln!(
                    "t={t:.1e} y={:?} grad={:?} step={:?} dec2={decrement_sq:.3e}",
                    y, grad.as_slice(), step.as_slice()
                );
            }
            if decrement_sq * 0.5 <= NEWTON_TOL {
                break;
            }

            // divergence towards an unbounded ray
            if y.iter().map(|v| v.abs()).fold(0.0, f64::max) > DIVERGE_NORM {
                let norm = step.norm();
                if norm > 0.0 {
                    let d: Vec<f64> = step.iter().map(|v| v / norm).collect();
                    if certify_unbounded(objective, constraints, &d) {
                        return Ok(BarrierOutcome {
                            y,
                            converged: false,
                            early_stopped: false,
                            unbounded: true,
                            t_final: t,
                            newton_steps,
                            outer_iterations,
                        });
                    }
                }
            }

            // inside the quadratic zone the pure Newton step is safe and a
            // numeric line search would drown in rounding noise at large t
            let mut accepted = false;
            if decrement_sq <= 0.09 {
                let cand: Vec<f64> = y.iter().zip(step.iter()).map(|(a, b)| a + b).collect();
                if barrier_value(objective, constraints, &cand, t).is_some() {
                    y = cand;
                    accepted = true;
                }
            }
            if !accepted {
                let phi0 = barrier_value(objective, constraints, &y, t)
                    .ok_or_else(|| Error::Solver("barrier value not finite at iterate".into()))?;
                let slope = grad.dot(&step);
                let step_inf = step.amax();
                let mut s = if step_inf > STEP_CAP { STEP_CAP / step_inf } else { 1.0 };
                for _ in 0..60 {
                    let cand: Vec<f64> = y.iter().zip(step.iter()).map(|(a, b)| a + s * b).collect();
                    if let Some(phi) = barrier_value(objective, constraints, &cand, t) {
                        if phi <= phi0 + ARMIJO_C1 * s * slope {
                            y = cand;
                            accepted = true;
                            break;
                        }
                    }
                    s *= 0.5;
                }
            }
            newton_steps += 1;
            if !accepted {
                break; // step below float resolution: as centered as we can get
            }
            if let Some(stop) = early_stop {
                if stop(&y) {
                    return Ok(BarrierOutcome {
                        y,
                        converged: false,
                        early_stopped: true,
                        unbounded: false,
                        t_final: t,
                        newton_steps,
                        outer_iterations,
                    });
                }
            }
        }

        if m / t < tol {
            polish(n, objective, constraints, &mut y, t, &mut newton_steps);
            return Ok(BarrierOutcome {
                y,
                converged: true,
                early_stopped: false,
                unbounded: false,
                t_final: t,
                newton_steps,
                outer_iterations,
            });
        }
        if outer_iterations >= MAX_OUTER {
            return Ok(BarrierOutcome {
                y,
                converged: false,
                early_stopped: false,
                unbounded: false,
                t_final: t,
                newton_steps,
                outer_iterations,
            });
        }
        t *= MU;
    }
}

/// Final pure-Newton polish: the λ-based centering stop bounds progress
/// in the Hessian norm, not the stationarity residual itself, which at
/// large t can sit orders of magnitude above it. Near the central path
/// full steps are safe, so drive the residual down directly until it
/// stagnates at the rounding floor.
fn polish(
    n: usize,
    objective: &LogSumExp,
    constraints: &[LogSumExp],
    y: &mut Vec<f64>,
    t: f64,
    newton_steps: &mut usize,
) {
    let mut prev_residual = f64::INFINITY;
    for _ in 0..15 {
        let mut grad = DVector::zeros(n);
        let mut hess = DMatrix::zeros(n, n);
        let (_, p0) = objective.eval_probs(y);
        let g0 = objective.grad(&p0, n);
        grad.axpy(t, &g0, 1.0);
        objective.add_scaled_hessian(&p0, &g0, t, &mut hess);
        for c in constraints {
            let (gv, probs) = c.eval_probs(y);
            if gv >= 0.0 || !gv.is_finite() {
                return;
            }
            let gc = c.grad(&probs, n);
            let w1 = 1.0 / (-gv);
            grad.axpy(w1, &gc, 1.0);
            c.add_scaled_hessian(&probs, &gc, w1, &mut hess);
            hess.ger(1.0 / (gv * gv), &gc, &gc, 1.0);
        }
        let residual = grad.amax() / t;
        if residual <= 1e-9 || residual >= prev_residual * 0.9 {
            return;
        }
        prev_residual = residual;
        let Ok(step) = solve_newton_system(&hess, &grad) else {
            return;
        };
        let decrement_sq = -grad.dot(&step);
        if !(0.0..=0.09).contains(&decrement_sq) {
            return;
        }
        let cand: Vec<f64> = y.iter().zip(step.iter()).map(|(a, b)| a + b).collect();
        if barrier_value(objective, constraints, &cand, t).is_none() {
            return;
        }
        *y = cand;
        *newton_steps += 1;
    }
}

/// Stationarity residual of the log-domain KKT system.
///
/// Barrier multipliers 1/(t·(−Gᵢ)) are kept for slack constraints, where
/// they are tiny and relatively accurate. For near-active constraints
/// −Gᵢ ≈ 1/t is all rounding noise, so their multipliers are recovered by
/// nonnegative least squares instead; any such multipliers certify
/// stationarity.
fn kkt_residual(objective: &LogSumExp, constraints: &[LogSumExp], y: &[f64], t: f64, n: usize) -> f64 {
    let (_, p0) = objective.eval_probs(y);
    let mut r = objective.grad(&p0, n);
    let mut active: Vec<DVector<f64>> = Vec::new();
    for c in constraints {
        let (gv, probs) = c.eval_probs(y);
        if gv >= 0.0 {
            return f64::INFINITY;
        }
        let gc = c.grad(&probs, n);
        if -gv <= 1e-3 {
            active.push(gc);
        } else {
            r.axpy(1.0 / (t * (-gv)), &gc, 1.0);
        }
    }
    if !active.is_empty() {
        let k = active.len();
        let mut ata = DMatrix::zeros(k, k);
        let mut atr = DVector::zeros(k);
        for i in 0..k {
            for j in 0..k {
                ata[(i, j)] = active[i].dot(&active[j]);
            }
            atr[i] = active[i].dot(&r);
            ata[(i, i)] += 1e-12 * (1.0 + ata[(i, i)]);
        }
        if let Some(chol) = ata.cholesky() {
            let mu = chol.solve(&(-atr));
            for (g, &m) in active.iter().zip(mu.iter()) {
                r.axpy(m.max(0.0), g, 1.0);
            }
        }
    }
    r.amax()
}

/// Solve a validated GP to relative duality-gap `tol`.
pub fn solve(problem: &GpProblem, tol: f64) -> Result<GpSolution> {
    solve_with(problem, tol, None)
}

/// Solve with an optional warm-start point (primal x-domain values). The
/// point is only used when it is strictly feasible; otherwise Phase I
/// finds an interior point first.
pub fn solve_with(problem: &GpProblem, tol: f64, warm_start: Option<&[f64]>) -> Result<GpSolution> {
    problem.validate()?;
    if !(tol > 0.0) {
        return Err(Error::Domain("tolerance must be positive".into()));
    }
    let lf = problem.log_form();
    let n = problem.num_vars;

    let mut y0 = vec![0.0; n];
    if let Some(w) = warm_start {
        if w.len() != n {
            return Err(Error::Config("warm start length mismatch".into()));
        }
        if w.iter().all(|&v| v > 0.0 && v.is_finite()) {
            y0 = w.iter().map(|&v| v.ln()).collect();
        }
    }

    let mut newton_steps = 0;
    let mut outer_iterations = 0;
    let mut phase1_slack = None;

    let strictly_feasible = lf.constraints.iter().all(|c| c.value(&y0) < -1e-10);
    let y_interior = if strictly_feasible {
        y0
    } else {
        // Phase I: minimize s over constraints relaxed by exp(-s); in log
        // form every constraint gains the slack variable with exponent -1.
        let slack = n;
        let ext_constraints: Vec<LogSumExp> = lf
            .constraints
            .iter()
            .map(|c| LogSumExp {
                terms: c
                    .terms
                    .iter()
                    .map(|(row, b)| {
                        let mut row = row.clone();
                        row.push((slack, -1.0));
                        (row, *b)
                    })
                    .collect(),
            })
            .collect();
        let ext_objective = LogSumExp {
            terms: vec![(vec![(slack, 1.0)], 0.0)],
        };
        let worst = lf
            .constraints
            .iter()
            .map(|c| c.value(&y0))
            .fold(f64::NEG_INFINITY, f64::max);
        let mut z0 = y0.clone();
        z0.push(worst + 1.0);
        let stop = |z: &[f64]| z[slack] < -0.1;
        let outcome = barrier_minimize(
            n + 1,
            &ext_objective,
            &ext_constraints,
            z0,
            tol.min(1e-9),
            Some(&stop),
        )?;
        newton_steps += outcome.newton_steps;
        outer_iterations += outcome.outer_iterations;
        let s_log = outcome.y[slack];
        phase1_slack = Some(s_log.exp() - 1.0);
        if !outcome.early_stopped && s_log >= 0.0 {
            let x: Vec<f64> = outcome.y[..n].iter().map(|v| v.exp()).collect();
            let objective = problem.objective.eval(&x);
            return Ok(GpSolution {
                values: x,
                objective,
                status: GpStatus::Infeasible,
                kkt_residual: f64::INFINITY,
                phase1_slack,
                outer_iterations,
                newton_steps,
            });
        }
        outcome.y[..n].to_vec()
    };

    let outcome = barrier_minimize(n, &lf.objective, &lf.constraints, y_interior, tol, None)?;
    newton_steps += outcome.newton_steps;
    outer_iterations += outcome.outer_iterations;

    let x: Vec<f64> = outcome.y.iter().map(|v| v.exp()).collect();
    let objective = problem.objective.eval(&x);
    let kkt = kkt_residual(&lf.objective, &lf.constraints, &outcome.y, outcome.t_final, n);
    let status = if outcome.unbounded {
        GpStatus::Unbounded
    } else if outcome.converged && problem.max_violation(&x) <= 1e-8 && kkt <= 1e-6 {
        GpStatus::Optimal
    } else {
        GpStatus::MaxIterations
    };
    Ok(GpSolution {
        values: x,
        objective,
        status,
        kkt_residual: kkt,
        phase1_slack,
        outer_iterations,
        newton_steps,
    })
}
