//! Geometric programming in canonical form.
//!
//! A monomial is c·Πxᵢ^aᵢ with c > 0; a posynomial is a sum of monomials.
//! Problems minimize a posynomial subject to posynomial constraints ≤ 1.
//! Under y = ln x every posynomial becomes log-sum-exp of affine
//! functions, which is what the barrier solver in [`solver`] consumes.

mod solver;

pub use solver::{solve, solve_with};

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};

/// A single positive-coefficient power-law term.
#[derive(Debug, Clone, PartialEq)]
pub struct Monomial {
    pub coefficient: f64,
    /// Sparse exponent map variable-index -> exponent.
    pub exponents: BTreeMap<usize, f64>,
}

impl Monomial {
    pub fn constant(coefficient: f64) -> Self {
        Monomial {
            coefficient,
            exponents: BTreeMap::new(),
        }
    }

    /// Multiply by `var^exp` (exponents on repeated variables accumulate;
    /// exact zeros are dropped).
    pub fn pow(mut self, var: usize, exp: f64) -> Self {
        let e = self.exponents.entry(var).or_insert(0.0);
        *e += exp;
        if *e == 0.0 {
            self.exponents.remove(&var);
        }
        self
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        self.coefficient
            * self
                .exponents
                .iter()
                .map(|(&i, &e)| x[i].powf(e))
                .product::<f64>()
    }
}

/// A nonempty sum of monomials.
#[derive(Debug, Clone, PartialEq)]
pub struct Posynomial {
    pub terms: Vec<Monomial>,
}

impl Posynomial {
    pub fn from_monomial(m: Monomial) -> Self {
        Posynomial { terms: vec![m] }
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        self.terms.iter().map(|t| t.eval(x)).sum()
    }
}

impl From<Monomial> for Posynomial {
    fn from(m: Monomial) -> Self {
        Posynomial::from_monomial(m)
    }
}

/// Canonical GP: minimize `objective` over positive x subject to every
/// constraint posynomial ≤ 1. Maximizing a monomial product is encoded by
/// minimizing its reciprocal.
#[derive(Debug, Clone)]
pub struct GpProblem {
    pub num_vars: usize,
    pub objective: Posynomial,
    pub constraints: Vec<Posynomial>,
}

/// Termination state of a solve.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GpStatus {
    Optimal,
    Infeasible,
    MaxIterations,
    Unbounded,
}

#[derive(Debug, Clone)]
pub struct GpSolution {
    /// Primal values per variable (positive).
    pub values: Vec<f64>,
    /// Objective posynomial at `values`.
    pub objective: f64,
    pub status: GpStatus,
    /// Infinity norm of the log-domain stationarity residual.
    pub kkt_residual: f64,
    /// Phase-I slack: how far from satisfiable the constraints ended up
    /// (negative when an interior point was found; the distance to
    /// feasibility when `status == Infeasible`).
    pub phase1_slack: Option<f64>,
    pub outer_iterations: usize,
    pub newton_steps: usize,
}

/// One posynomial in log coordinates: terms of exp(a·y + b).
#[derive(Debug, Clone)]
pub struct LogSumExp {
    /// Per term: sparse (variable, exponent) rows and the log coefficient.
    pub terms: Vec<(Vec<(usize, f64)>, f64)>,
}

impl LogSumExp {
    fn from_posynomial(p: &Posynomial) -> Self {
        LogSumExp {
            terms: p
                .terms
                .iter()
                .map(|m| {
                    let row: Vec<(usize, f64)> = m.exponents.iter().map(|(&i, &e)| (i, e)).collect();
                    (row, m.coefficient.ln())
                })
                .collect(),
        }
    }

    /// Value at y with max-shift for overflow safety.
    pub fn value(&self, y: &[f64]) -> f64 {
        let acts: Vec<f64> = self
            .terms
            .iter()
            .map(|(row, b)| b + row.iter().map(|&(i, e)| e * y[i]).sum::<f64>())
            .collect();
        let max = acts.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        max + acts.iter().map(|a| (a - max).exp()).sum::<f64>().ln()
    }
}

/// The full problem in log coordinates: affine objective/constraint data
/// for the convex transform. Exposed for tests and debugging.
#[derive(Debug, Clone)]
pub struct LogForm {
    pub num_vars: usize,
    pub objective: LogSumExp,
    pub constraints: Vec<LogSumExp>,
}

impl GpProblem {
    pub fn new(num_vars: usize, objective: impl Into<Posynomial>) -> Self {
        GpProblem {
            num_vars,
            objective: objective.into(),
            constraints: Vec::new(),
        }
    }

    pub fn add_constraint(&mut self, p: impl Into<Posynomial>) {
        self.constraints.push(p.into());
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = vec![false; self.num_vars];
        let mut check = |p: &Posynomial, what: &str| -> Result<()> {
            if p.terms.is_empty() {
                return Err(Error::Config(format!("{what}: empty posynomial")));
            }
            for m in &p.terms {
                if !(m.coefficient > 0.0 && m.coefficient.is_finite()) {
                    return Err(Error::Config(format!(
                        "{what}: coefficient {} must be positive and finite",
                        m.coefficient
                    )));
                }
                for (&i, &e) in &m.exponents {
                    if i >= self.num_vars {
                        return Err(Error::Config(format!("{what}: variable {i} out of range")));
                    }
                    if !e.is_finite() {
                        return Err(Error::Config(format!("{what}: non-finite exponent on x{i}")));
                    }
                    seen[i] = true;
                }
            }
            Ok(())
        };
        check(&self.objective, "objective")?;
        for (i, c) in self.constraints.iter().enumerate() {
            check(c, &format!("constraint {i}"))?;
        }
        if let Some(unused) = seen.iter().position(|&s| !s) {
            return Err(Error::Config(format!(
                "variable {unused} appears in no objective or constraint"
            )));
        }
        Ok(())
    }

    /// Log-domain convex transform.
    pub fn log_form(&self) -> LogForm {
        LogForm {
            num_vars: self.num_vars,
            objective: LogSumExp::from_posynomial(&self.objective),
            constraints: self
                .constraints
                .iter()
                .map(LogSumExp::from_posynomial)
                .collect(),
        }
    }

    /// Largest constraint violation at x (`eval - 1`, clamped to zero).
    pub fn max_violation(&self, x: &[f64]) -> f64 {
        self.constraints
            .iter()
            .map(|c| (c.eval(x) - 1.0).max(0.0))
            .fold(0.0, f64::max)
    }

    /// Plain-text dump: one monomial per line as
    /// `coefficient var:exp var:exp ...`.
    pub fn dump_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "# gp: {} vars, {} constraints", self.num_vars, self.constraints.len());
        let section = |name: &str, p: &Posynomial, out: &mut String| {
            let _ = writeln!(out, "{name}");
            for m in &p.terms {
                let _ = write!(out, "{:.17e}", m.coefficient);
                for (&i, &e) in &m.exponents {
                    let _ = write!(out, " {i}:{e}");
                }
                let _ = writeln!(out);
            }
        };
        section("objective", &self.objective, &mut out);
        for (i, c) in self.constraints.iter().enumerate() {
            section(&format!("constraint {i}"), c, &mut out);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn monomial_log_transform_is_affine() {
        // 2 x0 x1^{-1} <= 1  ->  ln2 + y0 - y1 <= 0
        let m = Monomial::constant(2.0).pow(0, 1.0).pow(1, -1.0);
        let mut p = GpProblem::new(2, Monomial::constant(1.0).pow(0, 1.0).pow(1, 1.0));
        p.add_constraint(m);
        let lf = p.log_form();
        assert_eq!(lf.constraints[0].terms.len(), 1);
        let (row, b) = &lf.constraints[0].terms[0];
        assert_relative_eq!(*b, 2f64.ln());
        assert_eq!(row.as_slice(), &[(0, 1.0), (1, -1.0)]);
        // single-term LSE value is the affine function itself
        let y = [0.3, -0.7];
        assert_relative_eq!(lf.constraints[0].value(&y), 2f64.ln() + 0.3 + 0.7, max_relative = 1e-15);
    }

    #[test]
    fn am_gm_posynomial_has_positive_log_minimum() {
        // x + 1/x >= 2 for positive x, so LSE(y, -y) >= ln 2 > 0 everywhere
        let mut posy = Posynomial::from_monomial(Monomial::constant(1.0).pow(0, 1.0));
        posy.terms.push(Monomial::constant(1.0).pow(0, -1.0));
        let lse = LogSumExp::from_posynomial(&posy);
        for y in [-3.0, -0.5, 0.0, 0.4, 2.0] {
            assert!(lse.value(&[y]) >= 2f64.ln() - 1e-12);
        }
        assert_relative_eq!(lse.value(&[0.0]), 2f64.ln(), max_relative = 1e-15);
    }

    #[test]
    fn validation_catches_malformed_problems() {
        let mut p = GpProblem::new(2, Monomial::constant(1.0).pow(0, 1.0));
        assert!(p.validate().is_err(), "x1 unused");
        p.add_constraint(Monomial::constant(0.5).pow(1, 1.0));
        p.validate().unwrap();
        p.add_constraint(Monomial::constant(-1.0).pow(1, 1.0));
        assert!(p.validate().is_err(), "negative coefficient");
    }

    #[test]
    fn repeated_pow_accumulates_and_cancels() {
        let m = Monomial::constant(3.0).pow(0, 2.0).pow(0, -1.0).pow(1, 1.0).pow(1, -1.0);
        assert_eq!(m.exponents.len(), 1);
        assert_relative_eq!(m.eval(&[4.0, 9.0]), 12.0);
    }

    #[test]
    fn dump_lists_one_monomial_per_line() {
        let mut p = GpProblem::new(1, Monomial::constant(1.0).pow(0, 1.0));
        p.add_constraint(Monomial::constant(2.0).pow(0, -1.0));
        let text = p.dump_text();
        assert!(text.contains("objective"));
        assert!(text.contains("constraint 0"));
        assert!(text.lines().any(|l| l.starts_with("2.0") && l.contains("0:-1")));
    }
}
