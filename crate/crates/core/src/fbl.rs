//! Finite-blocklength rate functions.
//!
//! Short packets pay a dispersion penalty on top of the Shannon term:
//! the achievable rate at SINR γ, blocklength L and error probability ε
//! is (1-η)·log2(1+γ) − sqrt((1-η)·V(γ)/L)·Q⁻¹(ε)/ln2 with channel
//! dispersion V(γ) = 1 − (1+γ)⁻². This module provides that rate, the
//! Gaussian tail inverse it needs, the kernel f(x) = ln(1+1/x) − α·√V in
//! inverse-SINR coordinates together with its feasibility boundary, and
//! bisection inverses for both.

use crate::error::{Error, Result};

const SQRT_2: f64 = std::f64::consts::SQRT_2;
const LN_2: f64 = std::f64::consts::LN_2;

/// Gaussian tail probability Q(z) = P(Z > z) for Z ~ N(0,1).
pub fn q(z: f64) -> f64 {
    0.5 * libm::erfc(z / SQRT_2)
}

/// Standard normal density.
fn phi(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Rational initial guess for the standard normal quantile (lower tail),
/// accurate to about 1e-9 over (0, 1).
fn norm_quantile_guess(p: f64) -> f64 {
    const A: [f64; 6] = [
        -3.969683028665376e+01,
        2.209460984245205e+02,
        -2.759285104469687e+02,
        1.383577518672690e+02,
        -3.066479806614716e+01,
        2.506628277459239e+00,
    ];
    const B: [f64; 5] = [
        -5.447609879822406e+01,
        1.615858368580409e+02,
        -1.556989798598866e+02,
        6.680131188771972e+01,
        -1.328068155288572e+01,
    ];
    const C: [f64; 6] = [
        -7.784894002430293e-03,
        -3.223964580411365e-01,
        -2.400758277161838e+00,
        -2.549732539343734e+00,
        4.374664141464968e+00,
        2.938163982698783e+00,
    ];
    const D: [f64; 4] = [
        7.784695709041462e-03,
        3.224671290700398e-01,
        2.445134137142996e+00,
        3.754408661907416e+00,
    ];
    const P_LOW: f64 = 0.02425;

    if p < P_LOW {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if p <= 1.0 - P_LOW {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        -norm_quantile_guess(1.0 - p)
    }
}

/// Inverse Gaussian tail: the z with Q(z) = eps.
///
/// Rational initialization refined by Newton steps on ln Q(z), which stays
/// well conditioned deep in the tail; round-trips through `q` to better
/// than 1e-12 relative.
pub fn q_inv(eps: f64) -> Result<f64> {
    if !(eps > 0.0 && eps < 1.0) {
        return Err(Error::Domain(format!("tail probability must lie in (0,1), got {eps}")));
    }
    if eps == 0.5 {
        return Ok(0.0);
    }
    // Q^{-1}(eps) = -Phi^{-1}(eps)
    let mut z = -norm_quantile_guess(eps);
    let ln_eps = eps.ln();
    for _ in 0..4 {
        let qz = q(z);
        let h = qz.ln() - ln_eps;
        if h.abs() < 1e-14 {
            break;
        }
        // d/dz ln Q(z) = -phi(z)/Q(z)
        z += h * qz / phi(z);
    }
    Ok(z)
}

/// Channel dispersion root at SINR `chi`: sqrt((2/χ + 1) / (1/χ + 1)²),
/// which equals sqrt(V(χ)) for V(χ) = 1 − (1+χ)⁻².
pub fn dispersion_root(chi: f64) -> Result<f64> {
    if chi <= 0.0 {
        return Err(Error::Domain(format!("SINR must be positive, got {chi}")));
    }
    Ok(((2.0 / chi + 1.0) / (1.0 / chi + 1.0).powi(2)).sqrt())
}

/// Rate kernel in inverse-SINR coordinates:
/// f(x) = ln(1 + 1/x) − alpha · sqrt((2x+1)/(1+x)²).
pub fn rate_kernel(x: f64, alpha: f64) -> Result<f64> {
    if x <= 0.0 {
        return Err(Error::Domain(format!("inverse SINR must be positive, got {x}")));
    }
    Ok((1.0 + 1.0 / x).ln() - alpha * ((2.0 * x + 1.0).sqrt() / (1.0 + x)))
}

/// Feasibility boundary ratio g(x) = (1+x)·ln(1+1/x)/sqrt(2x+1).
///
/// Strictly decreasing on (0, ∞); the kernel is nonnegative exactly while
/// g(1/γ) stays above the dispersion coefficient alpha.
pub fn feasibility_ratio(x: f64) -> Result<f64> {
    if x <= 0.0 {
        return Err(Error::Domain(format!("inverse SINR must be positive, got {x}")));
    }
    Ok((1.0 + x) * (1.0 + 1.0 / x).ln() / (2.0 * x + 1.0).sqrt())
}

/// Bisection on a strictly decreasing function. `lo`/`hi` must bracket
/// the target; runs until float exhaustion or 200 halvings.
fn bisect_decreasing<F: Fn(f64) -> f64>(f: &F, target: f64, mut lo: f64, mut hi: f64) -> f64 {
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if f(mid) > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Inverse of `feasibility_ratio`: the x with g(x) = target, target > 0.
pub fn feasibility_ratio_inv(target: f64) -> Result<f64> {
    if target <= 0.0 {
        return Err(Error::Domain(format!("boundary target must be positive, got {target}")));
    }
    let g = |x: f64| feasibility_ratio(x).expect("positive x");
    let mut lo = 1.0;
    let mut hi = 1.0;
    let mut expansions = 0;
    while g(lo) <= target {
        lo *= 0.5;
        expansions += 1;
        if expansions > 200 {
            return Err(Error::MaxIterations("bracket expansion for feasibility boundary".into()));
        }
    }
    while g(hi) > target {
        hi *= 2.0;
        expansions += 1;
        if expansions > 200 {
            return Err(Error::MaxIterations("bracket expansion for feasibility boundary".into()));
        }
    }
    Ok(bisect_decreasing(&g, target, lo, hi))
}

/// Per-device finite-blocklength parameters, fixed once per scenario.
#[derive(Debug, Clone)]
pub struct FblParams {
    /// Blocklength in symbols.
    pub blocklength: usize,
    /// Pilot symbols spent on training.
    pub pilot_overhead: usize,
    /// Overhead fraction eta = pilot_overhead / blocklength.
    pub eta: f64,
    /// Decoding error probability target.
    pub dep: f64,
    /// Q⁻¹(dep).
    pub q_inv_dep: f64,
    /// Dispersion coefficient alpha = Q⁻¹(dep)/sqrt(L(1-eta)).
    pub alpha: f64,
    /// Largest inverse SINR with nonnegative kernel: g⁻¹(alpha)
    /// (infinite when alpha = 0).
    pub x_max: f64,
}

impl FblParams {
    pub fn new(blocklength: usize, pilot_overhead: usize, dep: f64) -> Result<Self> {
        if pilot_overhead == 0 || pilot_overhead >= blocklength {
            return Err(Error::Config(format!(
                "pilot overhead {pilot_overhead} must lie in (0, blocklength {blocklength})"
            )));
        }
        if !(dep > 0.0 && dep <= 0.5) {
            return Err(Error::Domain(format!("dep must lie in (0, 0.5], got {dep}")));
        }
        let eta = pilot_overhead as f64 / blocklength as f64;
        let q_inv_dep = q_inv(dep)?;
        let alpha = q_inv_dep / (blocklength as f64 * (1.0 - eta)).sqrt();
        let x_max = if alpha == 0.0 { f64::INFINITY } else { feasibility_ratio_inv(alpha)? };
        Ok(FblParams {
            blocklength,
            pilot_overhead,
            eta,
            dep,
            q_inv_dep,
            alpha,
            x_max,
        })
    }

    /// Parameters for every device of a scenario configuration.
    pub fn per_device(cfg: &crate::config::SystemConfig) -> Result<Vec<FblParams>> {
        cfg.dep
            .iter()
            .map(|&eps| FblParams::new(cfg.blocklength(), cfg.num_devices, eps))
            .collect()
    }
}

/// Finite-blocklength rate at SINR `gamma` in bit/s/Hz. May be negative;
/// clamping is a reporting concern, not a math-layer one.
pub fn rate_fbl(gamma: f64, p: &FblParams) -> Result<f64> {
    if gamma <= 0.0 {
        return Err(Error::Domain(format!("SINR must be positive, got {gamma}")));
    }
    let one_minus_eta = 1.0 - p.eta;
    let dispersion = 1.0 - (1.0 + gamma).powi(-2);
    Ok(one_minus_eta * (1.0 + gamma).log2()
        - (one_minus_eta * dispersion / p.blocklength as f64).sqrt() * p.q_inv_dep / LN_2)
}

/// Inverse of the rate kernel on its decreasing branch: the x in
/// (0, x_max] with f(x, alpha) = target. Targets above the kernel's range
/// (i.e. nonpositive ones) are infeasible rather than domain errors.
pub fn rate_kernel_inv(target: f64, p: &FblParams) -> Result<f64> {
    if target <= 0.0 {
        return Err(Error::Infeasible(format!(
            "kernel target {target} is outside the achievable region"
        )));
    }
    let f = |x: f64| rate_kernel(x, p.alpha).expect("positive x");
    let mut hi = if p.x_max.is_finite() { p.x_max } else { 1.0 };
    let mut lo = hi.min(1.0);
    let mut expansions = 0;
    while f(lo) < target {
        lo *= 0.5;
        expansions += 1;
        if expansions > 200 {
            return Err(Error::MaxIterations("bracket expansion for rate kernel".into()));
        }
    }
    while f(hi) > target {
        hi *= 2.0;
        expansions += 1;
        if expansions > 200 {
            return Err(Error::MaxIterations("bracket expansion for rate kernel".into()));
        }
        if hi > p.x_max {
            hi = p.x_max;
            break;
        }
    }
    let x = bisect_decreasing(&f, target, lo, hi);
    Ok(x.min(p.x_max))
}

/// Closed-form lower bound on the ergodic rate, evaluated at the
/// harmonic-mean SINR `gamma_hat`: (1-eta)/ln2 · f(1/γ̂).
///
/// Outside the kernel's region (1/γ̂ > x_max) the bound is not defined
/// and an `Infeasible` error is returned instead of a silent negative.
pub fn lb_rate(gamma_hat: f64, p: &FblParams) -> Result<f64> {
    if gamma_hat <= 0.0 {
        return Err(Error::Domain(format!("SINR must be positive, got {gamma_hat}")));
    }
    let x = 1.0 / gamma_hat;
    if x > p.x_max * (1.0 + 1e-12) {
        return Err(Error::Infeasible(format!(
            "inverse SINR {x} exceeds the kernel region bound {}",
            p.x_max
        )));
    }
    Ok((1.0 - p.eta) / LN_2 * rate_kernel(x.min(p.x_max), p.alpha)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn table_params() -> FblParams {
        FblParams::new(500, 10, 1e-7).unwrap()
    }

    #[test]
    fn q_inv_at_half_is_zero() {
        assert_eq!(q_inv(0.5).unwrap(), 0.0);
    }

    #[test]
    fn q_inv_matches_high_precision_reference() {
        // frozen from 40-digit evaluation of sqrt(2)*erfinv(1-2eps)
        let cases = [
            (1e-3, 3.0902323061678136),
            (1e-5, 4.2648907939228246),
            (1e-7, 5.1993375821928169),
            (1e-9, 5.9978070150076869),
        ];
        for (eps, z) in cases {
            assert_relative_eq!(q_inv(eps).unwrap(), z, max_relative = 1e-12);
        }
    }

    #[test]
    fn q_inv_round_trips_through_q() {
        for eps in [1e-3, 1e-5, 1e-7, 1e-9, 0.2, 0.7, 0.99] {
            let z = q_inv(eps).unwrap();
            assert_relative_eq!(q(z), eps, max_relative = 1e-10);
        }
        assert!(q_inv(0.7).unwrap() < 0.0);
    }

    #[test]
    fn q_inv_rejects_bad_probabilities() {
        assert!(q_inv(0.0).is_err());
        assert!(q_inv(1.0).is_err());
        assert!(q_inv(-0.1).is_err());
    }

    #[test]
    fn rate_equals_shannon_term_at_dep_half() {
        let p = FblParams::new(500, 10, 0.5).unwrap();
        assert_eq!(p.alpha, 0.0);
        assert!(p.x_max.is_infinite());
        for gamma in [0.1, 1.0, 10.0] {
            assert_relative_eq!(
                rate_fbl(gamma, &p).unwrap(),
                (1.0 - p.eta) * (1.0 + gamma).log2(),
                max_relative = 1e-14
            );
        }
    }

    #[test]
    fn dispersion_dominates_at_vanishing_sinr() {
        let p = table_params();
        assert!(rate_fbl(1e-6, &p).unwrap() < 0.0);
    }

    #[test]
    fn rate_matches_direct_arithmetic_and_kernel_form() {
        let p = table_params();
        // frozen: (0.98)log2(11) - sqrt(0.98*(1-1/121)/500)*Qinv(1e-7)/ln2
        assert_relative_eq!(rate_fbl(10.0, &p).unwrap(), 3.0595320714196106, max_relative = 1e-12);
        for gamma in [0.3, 1.0, 4.0, 10.0, 100.0] {
            let via_kernel = (1.0 - p.eta) / LN_2 * rate_kernel(1.0 / gamma, p.alpha).unwrap();
            assert_relative_eq!(rate_fbl(gamma, &p).unwrap(), via_kernel, max_relative = 1e-12);
        }
    }

    #[test]
    fn kernel_and_boundary_spot_values() {
        // g(1) = 2 ln2 / sqrt3, G(1) = sqrt3/2
        assert_relative_eq!(
            feasibility_ratio(1.0).unwrap(),
            2.0 * LN_2 / 3f64.sqrt(),
            max_relative = 1e-14
        );
        assert_relative_eq!(dispersion_root(1.0).unwrap(), 3f64.sqrt() / 2.0, max_relative = 1e-14);
        // alpha = 0 reduces the kernel to ln(1 + 1/x)
        for x in [0.2, 1.0, 5.0] {
            assert_relative_eq!(
                rate_kernel(x, 0.0).unwrap(),
                (1.0 + 1.0 / x).ln(),
                max_relative = 1e-14
            );
        }
        assert!(rate_kernel(0.0, 0.1).is_err());
        assert!(feasibility_ratio(-1.0).is_err());
        assert!(dispersion_root(0.0).is_err());
    }

    #[test]
    fn dispersion_root_matches_direct_variance_form() {
        for chi in [0.3f64, 1.0, 2.5, 40.0] {
            let direct = (1.0 - (1.0 + chi).powi(-2)).sqrt();
            assert_relative_eq!(dispersion_root(chi).unwrap(), direct, max_relative = 1e-13);
        }
    }

    #[test]
    fn kernel_inverse_analytic_when_alpha_zero() {
        let p = FblParams::new(500, 10, 0.5).unwrap();
        let x = rate_kernel_inv(LN_2, &p).unwrap();
        assert_relative_eq!(x, 1.0, max_relative = 1e-9);
    }

    #[test]
    fn boundary_inverse_round_trips() {
        let g_half = feasibility_ratio(0.5).unwrap();
        assert_relative_eq!(g_half, 1.1652542988181398, max_relative = 1e-12);
        assert_relative_eq!(feasibility_ratio_inv(g_half).unwrap(), 0.5, max_relative = 1e-9);
        for x in [0.01, 0.3, 2.0, 50.0] {
            let t = feasibility_ratio(x).unwrap();
            assert_relative_eq!(feasibility_ratio_inv(t).unwrap(), x, max_relative = 1e-9);
        }
    }

    #[test]
    fn table_case_kernel_inverse_regression() {
        let p = table_params();
        let target = 0.5 * LN_2 / (1.0 - p.eta);
        let x = rate_kernel_inv(target, &p).unwrap();
        assert!((rate_kernel(x, p.alpha).unwrap() - target).abs() <= 1e-10);
        // frozen after first computation, cross-checked against 40-digit bisection
        assert_relative_eq!(x, 1.3800127837924705, max_relative = 1e-10);
        assert_relative_eq!(1.0 / x, 0.7246309684551316, max_relative = 1e-10);
        assert_relative_eq!(p.x_max, 9.5078267324027827, max_relative = 1e-9);
        assert_relative_eq!(p.alpha, 0.23488212976917457, max_relative = 1e-12);
    }

    #[test]
    fn kernel_inverse_rejects_unreachable_targets() {
        let p = table_params();
        assert!(matches!(rate_kernel_inv(0.0, &p), Err(Error::Infeasible(_))));
        assert!(matches!(rate_kernel_inv(-1.0, &p), Err(Error::Infeasible(_))));
    }

    #[test]
    fn lb_rate_limits_and_monotonicity() {
        let p = table_params();
        // alpha = 0: reduces to the Shannon term
        let p0 = FblParams::new(500, 10, 0.5).unwrap();
        for gamma in [0.5, 3.0] {
            assert_relative_eq!(
                lb_rate(gamma, &p0).unwrap(),
                (1.0 - p0.eta) * (1.0 + gamma).log2(),
                max_relative = 1e-13
            );
        }
        // zero at the kernel-region boundary
        let at_boundary = lb_rate(1.0 / p.x_max, &p).unwrap();
        assert!(at_boundary.abs() < 1e-9, "rate at boundary = {at_boundary}");
        // outside the region: tagged infeasible, not silent negative
        assert!(matches!(lb_rate(0.5 / p.x_max, &p), Err(Error::Infeasible(_))));
        // strictly increasing in gamma on a sampled grid
        let mut prev = f64::NEG_INFINITY;
        let mut gamma = 1.05 / p.x_max;
        while gamma < 1e3 {
            let r = lb_rate(gamma, &p).unwrap();
            assert!(r > prev, "lb_rate not increasing at gamma = {gamma}");
            prev = r;
            gamma *= 1.35;
        }
    }

    #[test]
    fn kernel_is_decreasing_and_convex_on_its_region() {
        for dep in [1e-3, 1e-7] {
            for l in [200usize, 500, 1000] {
                let p = FblParams::new(l, 10, dep).unwrap();
                let n = 200;
                let h = p.x_max / (n as f64 + 1.0);
                let f: Vec<f64> = (1..=n)
                    .map(|i| rate_kernel(i as f64 * h, p.alpha).unwrap())
                    .collect();
                for w in f.windows(2) {
                    assert!(w[1] < w[0], "kernel not decreasing (L={l}, dep={dep})");
                }
                for w in f.windows(3) {
                    let second = w[2] - 2.0 * w[1] + w[0];
                    assert!(second >= -1e-8, "kernel not convex (L={l}, dep={dep}): {second}");
                }
            }
        }
    }

    #[test]
    fn boundary_is_strictly_decreasing() {
        let mut prev = f64::INFINITY;
        let mut x = 1e-3;
        while x <= 1e3 {
            let v = feasibility_ratio(x).unwrap();
            assert!(v < prev, "boundary not decreasing at x = {x}");
            prev = v;
            x *= 1.15;
        }
    }

    #[test]
    fn sample_level_jensen_direction() {
        use rand::{Rng, SeedableRng};
        let p = FblParams::new(500, 10, 1e-3).unwrap();
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(21);
        let base: f64 = 5.0;
        let sigma = 0.3;
        let gammas: Vec<f64> = (0..2000)
            .map(|_| {
                // Box-Muller normal for the lognormal perturbation
                let u1: f64 = rng.gen::<f64>().max(1e-12);
                let u2: f64 = rng.gen();
                let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
                base * (sigma * z).exp()
            })
            .collect();
        assert!(gammas.iter().all(|&g| 1.0 / g <= p.x_max));
        let mean_rate: f64 = gammas
            .iter()
            .map(|&g| (1.0 - p.eta) / LN_2 * rate_kernel(1.0 / g, p.alpha).unwrap())
            .sum::<f64>()
            / gammas.len() as f64;
        let harmonic = gammas.len() as f64 / gammas.iter().map(|&g| 1.0 / g).sum::<f64>();
        let bound = lb_rate(harmonic, &p).unwrap();
        assert!(
            mean_rate >= bound - 1e-9,
            "sample mean {mean_rate} fell below bound {bound}"
        );
    }
}
