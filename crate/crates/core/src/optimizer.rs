//! Weighted sum-rate power allocation.
//!
//! Pilot powers are provably optimal at their caps, so only downlink
//! powers are optimized. Each round linearizes the rate's log and
//! dispersion terms in ln-SINR (tangent bounds that touch at the current
//! iterate), lower-bounds the desired-signal sum by a monomial with the
//! same touching property, and solves the resulting GP; the true-rate
//! objective is then re-evaluated at the new powers. Every surrogate
//! touches at the expansion point, so accepted iterates never decrease
//! the true objective.

use std::collections::BTreeMap;

use nalgebra::DMatrix;

use crate::channel::{estimation_variance, EstimationStats};
use crate::config::{Scheme, SystemConfig};
use crate::error::{Error, Result};
use crate::fbl::{lb_rate, rate_kernel_inv, FblParams};
use crate::gp::{solve_with, GpProblem, GpStatus, Monomial, Posynomial};
use crate::sinr::{effective_gain, interference_weight, sinr_lower_bounds, PowerAllocation};
use crate::sysmodel::{Scenario, ServingSets};

const LN_2: f64 = std::f64::consts::LN_2;
/// Smallest expansion point for the dispersion tangent: (sqrt(17)-3)/4.
pub fn dispersion_tangent_min() -> f64 {
    (17f64.sqrt() - 3.0) / 4.0
}

const GP_TOL: f64 = 1e-9;
const MAX_SCA_ITERATIONS: usize = 50;

/// Globally optimal pilot powers: every device pilots at its cap (the
/// rate bound increases monotonically with estimate quality, which
/// increases with pilot power).
pub fn fix_pilot_power(cfg: &SystemConfig) -> Vec<f64> {
    cfg.pilot_power_max.clone()
}

/// Tangent lower bound of ln(1+x) in ln-x coordinates at `x_hat`:
/// ln(1+x) ≥ rho·ln(x) + delta with equality at x_hat.
pub fn log_tangent(x_hat: f64) -> Result<(f64, f64)> {
    if x_hat <= 0.0 {
        return Err(Error::Domain(format!("expansion point must be positive, got {x_hat}")));
    }
    let rho = x_hat / (1.0 + x_hat);
    let delta = (1.0 + x_hat).ln() - rho * x_hat.ln();
    Ok((rho, delta))
}

/// Tangent upper bound of the dispersion root in ln-x coordinates at
/// `x_hat`: sqrt(1 − (1+x)⁻²) ≤ rho_hat·ln(x) + delta_hat with equality
/// at x_hat. Valid for x_hat at or above `dispersion_tangent_min()`.
pub fn dispersion_tangent(x_hat: f64) -> Result<(f64, f64)> {
    let min = dispersion_tangent_min();
    if x_hat < min {
        return Err(Error::Domain(format!(
            "expansion point {x_hat} below the tangent validity threshold {min}"
        )));
    }
    let s = (x_hat * x_hat + 2.0 * x_hat).sqrt();
    let rho_hat = x_hat / s - x_hat * s / (1.0 + x_hat).powi(2);
    let delta_hat = (1.0 - (1.0 + x_hat).powi(-2)).sqrt() - rho_hat * x_hat.ln();
    Ok((rho_hat, delta_hat))
}

/// Monomial fit of the desired-signal sum at expansion powers `p_hat`:
/// theta_k ≥ c_k·Π_m [(N−t_m)·p_{m,k}·λ_{m,k}]^{a_{m,k}} with equality at
/// p_hat and Σ_m a_{m,k} = 1/2.
#[derive(Debug, Clone)]
pub struct NumeratorFit {
    /// `a[k][j]`: exponent for the j-th serving AP of device k.
    pub a: Vec<Vec<f64>>,
    /// Monomial constants per device.
    pub c: Vec<f64>,
}

pub fn numerator_monomial_fit(
    scheme: Scheme,
    sets: &ServingSets,
    lambda: &DMatrix<f64>,
    p_hat: &DMatrix<f64>,
    n_antennas: usize,
) -> Result<NumeratorFit> {
    let k_devs = sets.serving_aps.len();
    let theta = effective_gain(scheme, sets, lambda, p_hat, n_antennas);
    let mut a = Vec::with_capacity(k_devs);
    let mut c = Vec::with_capacity(k_devs);
    for k in 0..k_devs {
        let aps = &sets.serving_aps[k];
        let mut ak = Vec::with_capacity(aps.len());
        let mut log_prod = 0.0;
        for &m in aps {
            let p = p_hat[(m, k)];
            if p <= 0.0 {
                return Err(Error::Domain(format!(
                    "expansion power must be positive on serving link ({m}, {k})"
                )));
            }
            let dof = scheme.dof_used(k_devs, sets.tau[m]);
            let gain = (n_antennas - dof) as f64 * p * lambda[(m, k)];
            let amk = gain.sqrt() / (2.0 * theta[k]);
            log_prod += amk * gain.ln();
            ak.push(amk);
        }
        c.push((theta[k].ln() - log_prod).exp());
        a.push(ak);
    }
    Ok(NumeratorFit { a, c })
}

/// Per-device SINR floors implied by the rate requirements:
/// the smallest SINR whose rate bound reaches the target.
pub fn sinr_requirements(fbl: &[FblParams], rate_req: &[f64]) -> Result<Vec<f64>> {
    fbl.iter()
        .zip(rate_req)
        .map(|(p, &r)| {
            let target = r * LN_2 / (1.0 - p.eta);
            Ok(1.0 / rate_kernel_inv(target, p)?)
        })
        .collect()
}

/// Variable layout of the GP subproblems: optional auxiliary margin
/// variable, optional per-device SINR block, then one variable per
/// serving link in (AP, device) order.
#[derive(Debug, Clone)]
pub struct GpVars {
    pub phi: Option<usize>,
    pub chi_base: Option<usize>,
    pub num_devices: usize,
    pub links: Vec<(usize, usize)>,
    index: BTreeMap<(usize, usize), usize>,
    pub num_vars: usize,
}

impl GpVars {
    fn layout(sets: &ServingSets, with_phi: bool, with_chi: bool) -> Self {
        let num_devices = sets.serving_aps.len();
        let phi = with_phi.then_some(0);
        let chi_base = with_chi.then_some(if with_phi { 1 } else { 0 });
        let mut next = usize::from(with_phi) + if with_chi { num_devices } else { 0 };
        let mut links = Vec::new();
        let mut index = BTreeMap::new();
        for (m, served) in sets.served_devices.iter().enumerate() {
            for &k in served {
                links.push((m, k));
                index.insert((m, k), next);
                next += 1;
            }
        }
        GpVars {
            phi,
            chi_base,
            num_devices,
            links,
            index,
            num_vars: next,
        }
    }

    pub fn chi(&self, k: usize) -> usize {
        self.chi_base.expect("layout has no SINR block") + k
    }

    pub fn link(&self, m: usize, k: usize) -> usize {
        self.index[&(m, k)]
    }

    /// Downlink power matrix from a solver point.
    pub fn extract_powers(&self, values: &[f64], m_aps: usize) -> DMatrix<f64> {
        let mut p = DMatrix::zeros(m_aps, self.num_devices);
        for &(m, k) in &self.links {
            p[(m, k)] = values[self.index[&(m, k)]];
        }
        p
    }
}

/// Interference posynomial and numerator-monomial data shared by the two
/// GP builders: one constraint per device in the form
/// (chi or margin)·interference / numerator-monomial ≤ 1.
#[allow(clippy::too_many_arguments)]
fn sinr_constraint(
    scheme: Scheme,
    sets: &ServingSets,
    stats: &EstimationStats,
    beta: &DMatrix<f64>,
    fit: &NumeratorFit,
    vars: &GpVars,
    n_antennas: usize,
    k: usize,
    scale: f64,
    head_var: usize,
) -> Posynomial {
    let k_devs = sets.serving_aps.len();
    // log of the numerator monomial's constant part:
    // c_k² · Π ((N−t_m)·λ)^{2a}
    let mut log_denom = 2.0 * fit.c[k].ln();
    for (j, &m) in sets.serving_aps[k].iter().enumerate() {
        let dof = scheme.dof_used(k_devs, sets.tau[m]);
        let gain = (n_antennas - dof) as f64 * stats.lambda[(m, k)];
        log_denom += 2.0 * fit.a[k][j] * gain.ln();
    }
    let divide = |mut mono: Monomial| -> Monomial {
        for (j, &m) in sets.serving_aps[k].iter().enumerate() {
            mono = mono.pow(vars.link(m, k), -2.0 * fit.a[k][j]);
        }
        mono
    };
    let mut posy = Posynomial { terms: Vec::new() };
    for kp in 0..k_devs {
        for &m in &sets.serving_aps[kp] {
            let w = interference_weight(scheme, sets, &stats.lambda, beta, m, k);
            let coef = (w.ln() + scale.ln() - log_denom).exp();
            let mono = Monomial::constant(coef)
                .pow(head_var, 1.0)
                .pow(vars.link(m, kp), 1.0);
            posy.terms.push(divide(mono));
        }
    }
    // unit-variance noise
    let noise = Monomial::constant((scale.ln() - log_denom).exp()).pow(head_var, 1.0);
    posy.terms.push(divide(noise));
    posy
}

fn budget_constraints(sets: &ServingSets, vars: &GpVars, p_max: f64) -> Vec<Posynomial> {
    sets.served_devices
        .iter()
        .enumerate()
        .filter(|(_, served)| !served.is_empty())
        .map(|(m, served)| Posynomial {
            terms: served
                .iter()
                .map(|&k| Monomial::constant(1.0 / p_max).pow(vars.link(m, k), 1.0))
                .collect(),
        })
        .collect()
}

/// GP maximizing the product of weighted SINR slacks at the current
/// surrogate. Devices with nonpositive surrogate weight keep their
/// constraints but drop out of the objective.
#[allow(clippy::too_many_arguments)]
pub fn build_subproblem(
    scenario: &Scenario,
    stats: &EstimationStats,
    fit: &NumeratorFit,
    w_hat: &[f64],
    sinr_req: &[f64],
) -> (GpProblem, GpVars) {
    let sets = &scenario.sets;
    let vars = GpVars::layout(sets, false, true);
    let mut objective = Monomial::constant(1.0);
    for (k, &w) in w_hat.iter().enumerate() {
        if w > 0.0 {
            objective = objective.pow(vars.chi(k), -w);
        }
    }
    let mut gp = GpProblem::new(vars.num_vars, objective);
    for k in 0..vars.num_devices {
        gp.add_constraint(sinr_constraint(
            scenario.cfg.scheme,
            sets,
            stats,
            &scenario.net.beta,
            fit,
            &vars,
            scenario.cfg.antennas_per_ap,
            k,
            1.0,
            vars.chi(k),
        ));
        gp.add_constraint(Monomial::constant(sinr_req[k]).pow(vars.chi(k), -1.0));
    }
    for c in budget_constraints(sets, &vars, scenario.cfg.ap_power_max) {
        gp.add_constraint(c);
    }
    (gp, vars)
}

/// GP maximizing the worst requirement margin: feasible power allocations
/// exist exactly when the optimal margin reaches 1.
pub fn build_feasibility(
    scenario: &Scenario,
    stats: &EstimationStats,
    fit: &NumeratorFit,
    sinr_req: &[f64],
) -> (GpProblem, GpVars) {
    let sets = &scenario.sets;
    let vars = GpVars::layout(sets, true, false);
    let phi = vars.phi.unwrap();
    let mut gp = GpProblem::new(vars.num_vars, Monomial::constant(1.0).pow(phi, -1.0));
    for k in 0..vars.num_devices {
        gp.add_constraint(sinr_constraint(
            scenario.cfg.scheme,
            sets,
            stats,
            &scenario.net.beta,
            fit,
            &vars,
            scenario.cfg.antennas_per_ap,
            k,
            sinr_req[k],
            phi,
        ));
    }
    for c in budget_constraints(sets, &vars, scenario.cfg.ap_power_max) {
        gp.add_constraint(c);
    }
    (gp, vars)
}

/// Equal split of each AP's budget across its served devices.
pub fn equal_power_matrix(sets: &ServingSets, k_devs: usize, p_max: f64) -> DMatrix<f64> {
    let m_aps = sets.served_devices.len();
    let mut p = DMatrix::zeros(m_aps, k_devs);
    for (m, served) in sets.served_devices.iter().enumerate() {
        if served.is_empty() {
            continue;
        }
        let share = p_max / served.len() as f64;
        for &k in served {
            p[(m, k)] = share;
        }
    }
    p
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AllocationStatus {
    Converged,
    InfeasibleRequirements,
    IterationCap,
}

impl std::fmt::Display for AllocationStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            AllocationStatus::Converged => write!(f, "converged"),
            AllocationStatus::InfeasibleRequirements => write!(f, "infeasible_requirements"),
            AllocationStatus::IterationCap => write!(f, "iteration_cap"),
        }
    }
}

/// Coefficients and iterate of one surrogate round.
#[derive(Debug, Clone)]
pub struct ScaState {
    pub iteration: usize,
    pub chi: Vec<f64>,
    pub powers: DMatrix<f64>,
    pub rho: Vec<f64>,
    pub delta: Vec<f64>,
    pub rho_hat: Vec<f64>,
    pub delta_hat: Vec<f64>,
    pub w_hat: Vec<f64>,
    pub fit: NumeratorFit,
    pub objective_history: Vec<f64>,
    /// Expansion points clamped up to the dispersion-tangent threshold.
    pub lemma4_clamped: usize,
    /// Devices dropped from the objective for nonpositive surrogate weight.
    pub objective_drops: usize,
}

#[derive(Debug, Clone)]
pub struct AllocationResult {
    pub powers: PowerAllocation,
    pub sinr: Vec<f64>,
    pub rates: Vec<f64>,
    pub weighted_sum: f64,
    pub iterations: usize,
    pub status: AllocationStatus,
    pub objective_history: Vec<f64>,
    pub requirements_met: bool,
    pub last_state: Option<ScaState>,
}

fn true_rates(chi: &[f64], fbl: &[FblParams]) -> Vec<f64> {
    chi.iter()
        .zip(fbl)
        .map(|(&c, p)| lb_rate(c, p).unwrap_or(0.0))
        .collect()
}

fn weighted_sum(rates: &[f64], weights: &[f64]) -> f64 {
    rates.iter().zip(weights).map(|(r, w)| r * w).sum()
}

fn requirements_met(chi: &[f64], sinr_req: &[f64]) -> bool {
    chi.iter()
        .zip(sinr_req)
        .all(|(&c, &s)| c >= s * (1.0 - 1e-9))
}

/// Warm-start point strictly inside the new subproblem: back the SINR
/// slacks slightly off their touching values and the powers slightly off
/// the budgets.
fn warm_point(vars: &GpVars, chi: &[f64], sinr_req: &[f64], powers: &DMatrix<f64>) -> Vec<f64> {
    let mut x = vec![0.0; vars.num_vars];
    for k in 0..vars.num_devices {
        let relaxed = chi[k] * (1.0 - 1e-4);
        x[vars.chi(k)] = if relaxed > sinr_req[k] {
            relaxed
        } else {
            (sinr_req[k] * chi[k]).sqrt()
        };
    }
    for &(m, k) in &vars.links {
        x[vars.link(m, k)] = powers[(m, k)] * (1.0 - 1e-7);
    }
    x
}

/// Full power-allocation pipeline for one scenario: fix pilots, find a
/// feasible start by margin maximization, then iterate surrogate GPs
/// until the relative objective improvement drops below the configured
/// tolerance. The reported objective history is the true rate-bound
/// weighted sum, never the surrogate.
pub fn maximize_weighted_sum_rate(scenario: &Scenario) -> Result<AllocationResult> {
    let cfg = &scenario.cfg;
    let sets = &scenario.sets;
    let beta = &scenario.net.beta;
    let n = cfg.antennas_per_ap;
    let k_devs = cfg.num_devices;
    scenario.check_antenna_budget()?;

    let fbl = FblParams::per_device(cfg)?;
    let pilot = fix_pilot_power(cfg);
    let stats = estimation_variance(beta, &pilot)?;
    let sinr_req = sinr_requirements(&fbl, &cfg.rate_req)?;

    let alloc = |downlink: DMatrix<f64>| PowerAllocation {
        pilot: pilot.clone(),
        downlink,
    };
    let chi_of = |downlink: &DMatrix<f64>| -> Result<Vec<f64>> {
        let powers = PowerAllocation {
            pilot: pilot.clone(),
            downlink: downlink.clone(),
        };
        Ok(sinr_lower_bounds(cfg.scheme, sets, &stats, beta, &powers, n)?
            .into_iter()
            .map(|b| b.sinr)
            .collect())
    };

    // feasible start: maximize the worst requirement margin
    let p_equal = equal_power_matrix(sets, k_devs, cfg.ap_power_max);
    let fit0 = numerator_monomial_fit(cfg.scheme, sets, &stats.lambda, &p_equal, n)?;
    let (feas_gp, feas_vars) = build_feasibility(scenario, &stats, &fit0, &sinr_req);
    let feas_warm = {
        let mut x = vec![0.0; feas_vars.num_vars];
        for &(m, k) in &feas_vars.links {
            x[feas_vars.link(m, k)] = p_equal[(m, k)] * (1.0 - 1e-3);
        }
        x[feas_vars.phi.unwrap()] = 1.0;
        let worst = feas_gp
            .constraints
            .iter()
            .take(k_devs)
            .map(|c| c.eval(&x))
            .fold(0.0, f64::max);
        x[feas_vars.phi.unwrap()] = 0.5 / worst;
        x
    };
    let feas_sol = solve_with(&feas_gp, GP_TOL, Some(&feas_warm))
        .map_err(|e| Error::Solver(format!("feasibility stage: {e}")))?;
    if feas_sol.status != GpStatus::Optimal {
        return Err(Error::Solver(format!(
            "feasibility stage ended with {:?}",
            feas_sol.status
        )));
    }
    let phi_star = feas_sol.values[feas_vars.phi.unwrap()];
    let p_feas = feas_vars.extract_powers(&feas_sol.values, cfg.num_aps);

    if phi_star < 1.0 {
        let chi = chi_of(&p_feas)?;
        let rates = true_rates(&chi, &fbl);
        let ws = weighted_sum(&rates, &cfg.weights);
        return Ok(AllocationResult {
            powers: alloc(p_feas),
            sinr: chi,
            rates,
            weighted_sum: ws,
            iterations: 0,
            status: AllocationStatus::InfeasibleRequirements,
            objective_history: Vec::new(),
            requirements_met: false,
            last_state: None,
        });
    }

    // start from the better of the margin solution and the equal split
    // (when the split already meets every requirement)
    let mut p_cur = p_feas;
    let mut chi_cur = chi_of(&p_cur)?;
    let mut obj_cur = weighted_sum(&true_rates(&chi_cur, &fbl), &cfg.weights);
    {
        let chi_eq = chi_of(&p_equal)?;
        if requirements_met(&chi_eq, &sinr_req) {
            let obj_eq = weighted_sum(&true_rates(&chi_eq, &fbl), &cfg.weights);
            if obj_eq > obj_cur {
                p_cur = p_equal.clone();
                chi_cur = chi_eq;
                obj_cur = obj_eq;
            }
        }
    }

    let mut history = vec![obj_cur];
    let mut obj_prev = obj_cur * cfg.sca_tolerance;
    let mut status = AllocationStatus::IterationCap;
    let mut state: Option<ScaState> = None;

    for iteration in 1..=MAX_SCA_ITERATIONS {
        if (obj_cur - obj_prev) / obj_prev < cfg.sca_tolerance {
            status = AllocationStatus::Converged;
            break;
        }
        let mut rho = Vec::with_capacity(k_devs);
        let mut delta = Vec::with_capacity(k_devs);
        let mut rho_hat = Vec::with_capacity(k_devs);
        let mut delta_hat = Vec::with_capacity(k_devs);
        let mut w_hat = Vec::with_capacity(k_devs);
        let mut clamped = 0;
        let mut drops = 0;
        for k in 0..k_devs {
            let (r, d) = log_tangent(chi_cur[k])?;
            let x_hat = if chi_cur[k] < dispersion_tangent_min() {
                clamped += 1;
                dispersion_tangent_min()
            } else {
                chi_cur[k]
            };
            let (rh, dh) = dispersion_tangent(x_hat)?;
            let w = cfg.weights[k] * (1.0 - fbl[k].eta) / LN_2 * (r - fbl[k].alpha * rh);
            if w <= 0.0 {
                drops += 1;
            }
            rho.push(r);
            delta.push(d);
            rho_hat.push(rh);
            delta_hat.push(dh);
            w_hat.push(w);

            // the surrogate touches the true objective at the expansion point
            if chi_cur[k] >= dispersion_tangent_min() {
                let surrogate = (1.0 - fbl[k].eta) / LN_2
                    * ((r - fbl[k].alpha * rh) * chi_cur[k].ln() + d - fbl[k].alpha * dh);
                let truth = lb_rate(chi_cur[k], &fbl[k])?;
                debug_assert!(
                    (surrogate - truth).abs() <= 1e-10 * truth.abs().max(1.0),
                    "surrogate {surrogate} != true rate {truth} at expansion"
                );
            }
        }

        let fit = numerator_monomial_fit(cfg.scheme, sets, &stats.lambda, &p_cur, n)?;
        for ak in &fit.a {
            debug_assert!((ak.iter().sum::<f64>() - 0.5).abs() < 1e-9);
        }
        let (gp, vars) = build_subproblem(scenario, &stats, &fit, &w_hat, &sinr_req);

        #[cfg(debug_assertions)]
        {
            // carryover: the expansion iterate satisfies its own subproblem
            let mut x_prev = vec![0.0; vars.num_vars];
            for k in 0..k_devs {
                x_prev[vars.chi(k)] = chi_cur[k];
            }
            for &(m, k) in &vars.links {
                x_prev[vars.link(m, k)] = p_cur[(m, k)];
            }
            debug_assert!(
                gp.max_violation(&x_prev) <= 1e-9,
                "expansion point violates its subproblem by {}",
                gp.max_violation(&x_prev)
            );
        }

        let warm = warm_point(&vars, &chi_cur, &sinr_req, &p_cur);
        let sol = solve_with(&gp, GP_TOL, Some(&warm))
            .map_err(|e| Error::Solver(format!("iteration {iteration}: {e}")))?;
        if sol.status != GpStatus::Optimal {
            return Err(Error::Solver(format!(
                "iteration {iteration}: GP ended with {:?}",
                sol.status
            )));
        }
        let p_next = vars.extract_powers(&sol.values, cfg.num_aps);
        let chi_next = chi_of(&p_next)?;
        let obj_next = weighted_sum(&true_rates(&chi_next, &fbl), &cfg.weights);

        state = Some(ScaState {
            iteration,
            chi: chi_cur.clone(),
            powers: p_cur.clone(),
            rho,
            delta,
            rho_hat,
            delta_hat,
            w_hat,
            fit,
            objective_history: history.clone(),
            lemma4_clamped: clamped,
            objective_drops: drops,
        });

        if obj_next < obj_cur {
            // exact surrogate steps never decrease the objective; a dip at
            // solver tolerance means we are converged
            status = AllocationStatus::Converged;
            break;
        }
        obj_prev = obj_cur;
        obj_cur = obj_next;
        chi_cur = chi_next;
        p_cur = p_next;
        history.push(obj_cur);
    }

    let rates = true_rates(&chi_cur, &fbl);
    let met = requirements_met(&chi_cur, &sinr_req);
    let budget_ok = {
        let sums: Vec<f64> = (0..cfg.num_aps).map(|m| p_cur.row(m).sum()).collect();
        sums.iter().all(|&s| s <= cfg.ap_power_max + 1e-9)
    };
    if status == AllocationStatus::Converged && !(met && budget_ok) {
        return Err(Error::Solver(
            "converged allocation violates requirements or budgets".into(),
        ));
    }
    Ok(AllocationResult {
        powers: alloc(p_cur),
        sinr: chi_cur,
        weighted_sum: weighted_sum(&rates, &cfg.weights),
        rates,
        iterations: history.len(),
        status,
        objective_history: history,
        requirements_met: met,
        last_state: state,
    })
}

/// Split devices into the first `k1` and the rest for time-shared
/// service; each group gets half of the transmission slots.
pub fn round_robin_partition(k: usize, k1: usize) -> Result<(Vec<usize>, Vec<usize>, f64)> {
    if k1 == 0 || k1 >= k {
        return Err(Error::Domain(format!("group size {k1} must lie in [1, {k})")));
    }
    Ok(((0..k1).collect(), (k1..k).collect(), 0.5))
}

/// Equal-power reference allocation: every AP splits its budget evenly
/// across its served devices and pilots stay at their caps. Requirement
/// violations are reported, not fixed.
pub fn baseline_equal_power(scenario: &Scenario) -> Result<AllocationResult> {
    let cfg = &scenario.cfg;
    let fbl = FblParams::per_device(cfg)?;
    let pilot = fix_pilot_power(cfg);
    let stats = estimation_variance(&scenario.net.beta, &pilot)?;
    let sinr_req = sinr_requirements(&fbl, &cfg.rate_req)?;
    let downlink = equal_power_matrix(&scenario.sets, cfg.num_devices, cfg.ap_power_max);
    let powers = PowerAllocation { pilot, downlink };
    let chi: Vec<f64> = sinr_lower_bounds(
        cfg.scheme,
        &scenario.sets,
        &stats,
        &scenario.net.beta,
        &powers,
        cfg.antennas_per_ap,
    )?
    .into_iter()
    .map(|b| b.sinr)
    .collect();
    let rates = true_rates(&chi, &fbl);
    let met = requirements_met(&chi, &sinr_req);
    let ws = weighted_sum(&rates, &cfg.weights);
    Ok(AllocationResult {
        powers,
        sinr: chi,
        weighted_sum: ws,
        rates,
        iterations: 0,
        status: if met {
            AllocationStatus::Converged
        } else {
            AllocationStatus::InfeasibleRequirements
        },
        objective_history: vec![ws],
        requirements_met: met,
        last_state: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sysmodel::Scenario;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn pilot_power_sits_at_the_cap() {
        let cfg = SystemConfig::baseline();
        assert_eq!(fix_pilot_power(&cfg), cfg.pilot_power_max);
    }

    #[test]
    fn higher_pilot_power_raises_the_rate_bound() {
        let mut cfg = SystemConfig::baseline();
        cfg.num_aps = 4;
        cfg.antennas_per_ap = 16;
        let scenario = Scenario::generate_seeded(cfg.clone(), 2).unwrap();
        let fbl = FblParams::per_device(&cfg).unwrap();
        let downlink = equal_power_matrix(&scenario.sets, cfg.num_devices, cfg.ap_power_max);
        let rate_at = |pilot_scale: f64| -> f64 {
            let pilot: Vec<f64> = cfg.pilot_power_max.iter().map(|p| p * pilot_scale).collect();
            let stats = estimation_variance(&scenario.net.beta, &pilot).unwrap();
            let powers = PowerAllocation {
                pilot,
                downlink: downlink.clone(),
            };
            let chi = sinr_lower_bounds(
                cfg.scheme,
                &scenario.sets,
                &stats,
                &scenario.net.beta,
                &powers,
                cfg.antennas_per_ap,
            )
            .unwrap();
            chi.iter()
                .zip(&fbl)
                .map(|(b, p)| lb_rate(b.sinr, p).unwrap_or(f64::NEG_INFINITY))
                .sum()
        };
        assert!(rate_at(1.0) > rate_at(0.5));
    }

    #[test]
    fn log_tangent_values_and_bound() {
        let (rho, delta) = log_tangent(1.0).unwrap();
        assert_relative_eq!(rho, 0.5, max_relative = 1e-15);
        assert_relative_eq!(delta, 2f64.ln(), max_relative = 1e-14);
        assert!(log_tangent(0.0).is_err());

        let mut rng = ChaCha20Rng::seed_from_u64(3);
        for _ in 0..10 {
            let x_hat = rng.gen::<f64>() * 20.0 + 1e-3;
            let (rho, delta) = log_tangent(x_hat).unwrap();
            // touches at the expansion point
            assert!(((1.0 + x_hat).ln() - (rho * x_hat.ln() + delta)).abs() <= 1e-12);
            for _ in 0..1000 {
                let x = rng.gen::<f64>().powi(2) * 1e3 + 1e-6;
                assert!(
                    (1.0 + x).ln() >= rho * x.ln() + delta - 1e-12,
                    "tangent above the curve at x={x}, x_hat={x_hat}"
                );
            }
        }
    }

    #[test]
    fn dispersion_tangent_values_and_bound() {
        let (rho_hat, delta_hat) = dispersion_tangent(1.0).unwrap();
        assert_relative_eq!(rho_hat, 1.0 / 3f64.sqrt() - 3f64.sqrt() / 4.0, max_relative = 1e-13);
        assert_relative_eq!(delta_hat, 3f64.sqrt() / 2.0, max_relative = 1e-14);
        assert!(dispersion_tangent(0.2).is_err());

        let (rh, dh) = dispersion_tangent(0.5).unwrap();
        assert_relative_eq!(rh, 0.19876159799998131, max_relative = 1e-12);
        assert_relative_eq!(dh, 0.88312703375720621, max_relative = 1e-12);

        let min = dispersion_tangent_min();
        assert_relative_eq!(min, 0.28077640640441513, max_relative = 1e-12);
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let g = |x: f64| (1.0 - (1.0 + x).powi(-2)).sqrt();
        for _ in 0..10 {
            let x_hat = min + rng.gen::<f64>() * 30.0;
            let (rh, dh) = dispersion_tangent(x_hat).unwrap();
            assert!((g(x_hat) - (rh * x_hat.ln() + dh)).abs() <= 1e-12);
            for _ in 0..1000 {
                let x = min + rng.gen::<f64>().powi(2) * 1e3;
                assert!(
                    g(x) <= rh * x.ln() + dh + 1e-12,
                    "tangent below the curve at x={x}, x_hat={x_hat}"
                );
            }
        }
    }

    fn small_scenario(scheme: Scheme) -> Scenario {
        let mut cfg = SystemConfig::baseline();
        cfg.num_aps = 4;
        cfg.antennas_per_ap = 16;
        cfg.num_devices = 4;
        cfg.dep = vec![1e-7; 4];
        cfg.rate_req = vec![0.5; 4];
        cfg.weights = vec![0.9, 0.4, 0.7, 1.0];
        cfg.pilot_power_max = vec![0.1; 4];
        cfg.scheme = scheme;
        Scenario::generate_seeded(cfg, 77).unwrap()
    }

    #[test]
    fn numerator_fit_touches_and_bounds() {
        let scenario = small_scenario(Scheme::Lzf);
        let cfg = &scenario.cfg;
        let pilot = fix_pilot_power(cfg);
        let stats = estimation_variance(&scenario.net.beta, &pilot).unwrap();
        let p_hat = equal_power_matrix(&scenario.sets, cfg.num_devices, cfg.ap_power_max);
        let fit = numerator_monomial_fit(
            cfg.scheme,
            &scenario.sets,
            &stats.lambda,
            &p_hat,
            cfg.antennas_per_ap,
        )
        .unwrap();
        let theta = effective_gain(
            cfg.scheme,
            &scenario.sets,
            &stats.lambda,
            &p_hat,
            cfg.antennas_per_ap,
        );
        let mono_at = |k: usize, p: &DMatrix<f64>| -> f64 {
            let mut log_v = fit.c[k].ln();
            for (j, &m) in scenario.sets.serving_aps[k].iter().enumerate() {
                let dof = cfg.scheme.dof_used(cfg.num_devices, scenario.sets.tau[m]);
                let gain = (cfg.antennas_per_ap - dof) as f64 * p[(m, k)] * stats.lambda[(m, k)];
                log_v += fit.a[k][j] * gain.ln();
            }
            log_v.exp()
        };
        let mut rng = ChaCha20Rng::seed_from_u64(9);
        for k in 0..cfg.num_devices {
            assert_relative_eq!(fit.a[k].iter().sum::<f64>(), 0.5, max_relative = 1e-12);
            // equality at the expansion point
            assert_relative_eq!(mono_at(k, &p_hat), theta[k], max_relative = 1e-12);
            // bound direction at random positive powers
            for _ in 0..1000 {
                let mut p = p_hat.clone();
                for &m in &scenario.sets.serving_aps[k] {
                    p[(m, k)] = rng.gen::<f64>() * 2.0 + 1e-4;
                }
                let th = effective_gain(
                    cfg.scheme,
                    &scenario.sets,
                    &stats.lambda,
                    &p,
                    cfg.antennas_per_ap,
                )[k];
                assert!(th >= mono_at(k, &p) * (1.0 - 1e-12));
            }
        }
    }

    #[test]
    fn single_serving_ap_fit_is_exact_everywhere() {
        let beta = DMatrix::from_element(1, 1, 40.0);
        let sets = ServingSets {
            serving_aps: vec![vec![0]],
            served_devices: vec![vec![0]],
            tau: vec![1],
        };
        let stats = estimation_variance(&beta, &[0.1]).unwrap();
        let p_hat = DMatrix::from_element(1, 1, 0.25);
        let fit = numerator_monomial_fit(Scheme::Mrt, &sets, &stats.lambda, &p_hat, 8).unwrap();
        assert_relative_eq!(fit.a[0][0], 0.5, max_relative = 1e-14);
        assert_relative_eq!(fit.c[0], 1.0, max_relative = 1e-12);
        for p in [0.01, 0.25, 3.0] {
            let pm = DMatrix::from_element(1, 1, p);
            let theta = effective_gain(Scheme::Mrt, &sets, &stats.lambda, &pm, 8)[0];
            let mono = fit.c[0] * (8.0 * p * stats.lambda[(0, 0)]).powf(fit.a[0][0]);
            assert_relative_eq!(theta, mono, max_relative = 1e-12);
        }
        let zero = DMatrix::from_element(1, 1, 0.0);
        assert!(numerator_monomial_fit(Scheme::Mrt, &sets, &stats.lambda, &zero, 8).is_err());
    }

    #[test]
    fn single_device_subproblem_rides_power_to_the_budget() {
        let beta = DMatrix::from_element(1, 1, 60.0);
        let sets = ServingSets {
            serving_aps: vec![vec![0]],
            served_devices: vec![vec![0]],
            tau: vec![1],
        };
        let mut cfg = SystemConfig::baseline();
        cfg.num_aps = 1;
        cfg.antennas_per_ap = 8;
        cfg.num_devices = 1;
        cfg.dep = vec![1e-7];
        cfg.rate_req = vec![0.5];
        cfg.weights = vec![1.0];
        cfg.pilot_power_max = vec![0.1];
        cfg.ap_power_max = 0.6;
        let net = crate::sysmodel::NetworkRealization {
            ap_positions: vec![(0.0, 0.0)],
            device_positions: vec![(10.0, 0.0)],
            beta: beta.clone(),
        };
        let scenario = Scenario {
            cfg,
            net,
            sets,
        };
        let cfg = &scenario.cfg;
        let stats = estimation_variance(&beta, &cfg.pilot_power_max).unwrap();
        let fbl = FblParams::per_device(cfg).unwrap();
        let s_req = sinr_requirements(&fbl, &cfg.rate_req).unwrap();
        let p_hat = equal_power_matrix(&scenario.sets, 1, cfg.ap_power_max);
        let fit =
            numerator_monomial_fit(cfg.scheme, &scenario.sets, &stats.lambda, &p_hat, 8).unwrap();
        let (gp, vars) = build_subproblem(&scenario, &stats, &fit, &[1.0], &s_req);
        assert_eq!(gp.num_vars, 2);
        assert_eq!(gp.constraints.len(), 3);
        let sol = crate::gp::solve(&gp, 1e-10).unwrap();
        assert_eq!(sol.status, GpStatus::Optimal);
        // SINR grows with power, so the optimum saturates the budget
        assert_relative_eq!(sol.values[vars.link(0, 0)], 0.6, max_relative = 1e-5);
    }

    #[test]
    fn feasibility_margin_scales_inversely_with_requirements() {
        let scenario = small_scenario(Scheme::Mrt);
        let cfg = &scenario.cfg;
        let stats = estimation_variance(&scenario.net.beta, &cfg.pilot_power_max).unwrap();
        let fbl = FblParams::per_device(cfg).unwrap();
        let s_req = sinr_requirements(&fbl, &cfg.rate_req).unwrap();
        let p_hat = equal_power_matrix(&scenario.sets, cfg.num_devices, cfg.ap_power_max);
        let fit = numerator_monomial_fit(
            cfg.scheme,
            &scenario.sets,
            &stats.lambda,
            &p_hat,
            cfg.antennas_per_ap,
        )
        .unwrap();
        let solve_phi = |req: &[f64]| -> (f64, Vec<f64>) {
            let (gp, vars) = build_feasibility(&scenario, &stats, &fit, req);
            let sol = crate::gp::solve(&gp, 1e-10).unwrap();
            assert_eq!(sol.status, GpStatus::Optimal);
            let powers: Vec<f64> = vars
                .links
                .iter()
                .map(|&(m, k)| sol.values[vars.link(m, k)])
                .collect();
            (sol.values[vars.phi.unwrap()], powers)
        };
        let (phi1, pow1) = solve_phi(&s_req);
        assert!(phi1 > 1.0, "reasonable requirements should be feasible");
        let halved: Vec<f64> = s_req.iter().map(|s| s / 2.0).collect();
        let (phi2, pow2) = solve_phi(&halved);
        assert_relative_eq!(phi2, 2.0 * phi1, max_relative = 1e-4);
        for (a, b) in pow1.iter().zip(&pow2) {
            assert_relative_eq!(a, b, max_relative = 1e-3);
        }
        // requirements far beyond reach flip the margin below one
        let insane: Vec<f64> = s_req.iter().map(|s| s * 1e6).collect();
        let (phi3, _) = solve_phi(&insane);
        assert!(phi3 < 1.0);
    }

    #[test]
    fn optimizer_converges_and_dominates_equal_power() {
        for scheme in [Scheme::Mrt, Scheme::Fzf, Scheme::Lzf] {
            let scenario = small_scenario(scheme);
            let result = maximize_weighted_sum_rate(&scenario).unwrap();
            assert_eq!(result.status, AllocationStatus::Converged, "{scheme}");
            assert!(result.requirements_met);
            for w in result.objective_history.windows(2) {
                assert!(w[1] >= w[0] - 1e-9, "{scheme}: objective decreased");
            }
            let sums = result.powers.per_ap_sums();
            for s in sums {
                assert!(s <= scenario.cfg.ap_power_max + 1e-9);
            }
            let baseline = baseline_equal_power(&scenario).unwrap();
            let baseline_obj = if baseline.requirements_met {
                baseline.weighted_sum
            } else {
                0.0
            };
            assert!(
                result.weighted_sum >= baseline_obj - 1e-9,
                "{scheme}: optimizer {} below baseline {baseline_obj}",
                result.weighted_sum
            );
        }
    }

    #[test]
    fn impossible_requirements_are_reported_not_solved() {
        let mut cfg = SystemConfig::baseline();
        cfg.num_aps = 4;
        cfg.antennas_per_ap = 16;
        cfg.num_devices = 4;
        cfg.dep = vec![1e-7; 4];
        cfg.rate_req = vec![9.5; 4];
        cfg.weights = vec![1.0; 4];
        cfg.pilot_power_max = vec![0.1; 4];
        cfg.ap_power_max = 1e-4;
        let scenario = Scenario::generate_seeded(cfg, 13).unwrap();
        let result = maximize_weighted_sum_rate(&scenario).unwrap();
        assert_eq!(result.status, AllocationStatus::InfeasibleRequirements);
        assert!(!result.requirements_met);
    }

    #[test]
    fn round_robin_partition_splits_by_index() {
        let (a, b, share) = round_robin_partition(16, 8).unwrap();
        assert_eq!(a, (0..8).collect::<Vec<_>>());
        assert_eq!(b, (8..16).collect::<Vec<_>>());
        assert_eq!(share, 0.5);
        let (a, b, _) = round_robin_partition(5, 4).unwrap();
        assert_eq!(a.len(), 4);
        assert_eq!(b, vec![4]);
        assert!(round_robin_partition(5, 0).is_err());
        assert!(round_robin_partition(5, 5).is_err());
    }

    #[test]
    fn baseline_splits_budgets_exactly() {
        let scenario = small_scenario(Scheme::Mrt);
        let baseline = baseline_equal_power(&scenario).unwrap();
        for (m, served) in scenario.sets.served_devices.iter().enumerate() {
            if served.is_empty() {
                continue;
            }
            let sum: f64 = baseline.powers.downlink.row(m).sum();
            assert_relative_eq!(sum, scenario.cfg.ap_power_max, max_relative = 1e-12);
            let share = scenario.cfg.ap_power_max / served.len() as f64;
            for &k in served {
                assert_relative_eq!(baseline.powers.downlink[(m, k)], share, max_relative = 1e-12);
            }
        }
    }
}
