//! Closed-form SINR lower bounds for the three precoding schemes, the
//! precoders themselves, and a Monte Carlo decomposition of the received
//! signal that verifies the closed forms term by term.
//!
//! The decomposition splits the received sample into the deterministic
//! desired-signal mean (DS), the self-leakage around that mean (LS), one
//! interference term per other device (UI), and unit-variance noise; the
//! effective SINR is |DS|²/(E|LS|² + Σ E|UI|² + 1).

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;

use crate::channel::{draw_channels, estimation_variance, ChannelDraw, EstimationStats};
use crate::config::Scheme;
use crate::error::{Error, Result};
use crate::fbl::{rate_fbl, FblParams};
use crate::sysmodel::ServingSets;

/// Relative condition-number cap for the estimated Gram matrices; a draw
/// beyond it is rejected and resampled.
const GRAM_COND_LIMIT: f64 = 1e12;

/// Pilot and downlink transmit powers in watts. `downlink[(m, k)]` must
/// be zero whenever AP m does not serve device k.
#[derive(Debug, Clone)]
pub struct PowerAllocation {
    pub pilot: Vec<f64>,
    pub downlink: DMatrix<f64>,
}

impl PowerAllocation {
    pub fn validate(&self, sets: &ServingSets) -> Result<()> {
        let (m_aps, k_devs) = self.downlink.shape();
        if self.pilot.len() != k_devs {
            return Err(Error::Config("pilot power count != device count".into()));
        }
        if sets.served_devices.len() != m_aps || sets.serving_aps.len() != k_devs {
            return Err(Error::Config("serving sets / power matrix shape mismatch".into()));
        }
        for m in 0..m_aps {
            for k in 0..k_devs {
                let p = self.downlink[(m, k)];
                if p < 0.0 {
                    return Err(Error::Domain(format!("negative power on link ({m}, {k})")));
                }
                if p > 0.0 && !sets.serves(m, k) {
                    return Err(Error::Config(format!(
                        "power on non-serving link ({m}, {k})"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn per_ap_sums(&self) -> Vec<f64> {
        (0..self.downlink.nrows())
            .map(|m| self.downlink.row(m).sum())
            .collect()
    }
}

/// One device's SINR bound split into its power components. `ui[k']` is
/// the interference attributed to device k' (the device's own index holds
/// zero, so the K−1 interferer terms are the nonself entries).
#[derive(Debug, Clone)]
pub struct SinrBreakdown {
    pub ds: f64,
    pub ls: f64,
    pub ui: Vec<f64>,
    pub noise: f64,
    pub sinr: f64,
}

fn check_antennas(scheme: Scheme, sets: &ServingSets, k_devs: usize, n: usize) -> Result<()> {
    for (m, served) in sets.served_devices.iter().enumerate() {
        if served.is_empty() {
            continue;
        }
        let dof = scheme.dof_used(k_devs, sets.tau[m]);
        if n <= dof {
            return Err(Error::Config(format!(
                "AP {m}: scheme {scheme} needs more than {dof} antennas, has {n}"
            )));
        }
    }
    Ok(())
}

/// Average interference gain device k sees from AP m's transmissions:
/// the full link gain under MRT, the estimation-error variance on links
/// the AP has nulled (all devices for FZF, its own served set for LZF).
pub fn interference_weight(
    scheme: Scheme,
    sets: &ServingSets,
    lambda: &DMatrix<f64>,
    beta: &DMatrix<f64>,
    m: usize,
    k: usize,
) -> f64 {
    match scheme {
        Scheme::Mrt => beta[(m, k)],
        Scheme::Fzf => beta[(m, k)] - lambda[(m, k)],
        Scheme::Lzf => {
            if sets.serves(m, k) {
                beta[(m, k)] - lambda[(m, k)]
            } else {
                beta[(m, k)]
            }
        }
    }
}

/// Deterministic desired-signal amplitude per device:
/// theta_k = Σ_{m serving k} sqrt((N − dof_m)·p_{m,k}·λ_{m,k}).
pub fn effective_gain(
    scheme: Scheme,
    sets: &ServingSets,
    lambda: &DMatrix<f64>,
    downlink: &DMatrix<f64>,
    n_antennas: usize,
) -> Vec<f64> {
    let k_devs = sets.serving_aps.len();
    (0..k_devs)
        .map(|k| {
            sets.serving_aps[k]
                .iter()
                .map(|&m| {
                    let dof = scheme.dof_used(k_devs, sets.tau[m]);
                    ((n_antennas - dof) as f64 * downlink[(m, k)] * lambda[(m, k)]).sqrt()
                })
                .sum()
        })
        .collect()
}

/// Closed-form SINR lower bounds for all devices under `scheme`.
///
/// MRT keeps the full gain of every interfering link; the zero-forcing
/// family replaces it by the estimation-error variance on links the
/// transmitting AP has nulled (all of them for FZF, only its own served
/// devices for LZF).
pub fn sinr_lower_bounds(
    scheme: Scheme,
    sets: &ServingSets,
    stats: &EstimationStats,
    beta: &DMatrix<f64>,
    powers: &PowerAllocation,
    n_antennas: usize,
) -> Result<Vec<SinrBreakdown>> {
    let (m_aps, k_devs) = beta.shape();
    if stats.lambda.shape() != (m_aps, k_devs) {
        return Err(Error::Config("stats / beta shape mismatch".into()));
    }
    powers.validate(sets)?;
    check_antennas(scheme, sets, k_devs, n_antennas)?;

    let theta = effective_gain(scheme, sets, &stats.lambda, &powers.downlink, n_antennas);
    let mut out = Vec::with_capacity(k_devs);
    for k in 0..k_devs {
        let ds = theta[k] * theta[k];
        let mut ui = vec![0.0; k_devs];
        let mut ls = 0.0;
        for (kp, item) in ui.iter_mut().enumerate() {
            let mut acc = 0.0;
            for &m in &sets.serving_aps[kp] {
                let p = powers.downlink[(m, kp)];
                acc += p * interference_weight(scheme, sets, &stats.lambda, beta, m, k);
            }
            if kp == k {
                ls = acc;
            } else {
                *item = acc;
            }
        }
        let interference: f64 = ui.iter().sum();
        let sinr = ds / (ls + interference + 1.0);
        out.push(SinrBreakdown {
            ds,
            ls,
            ui,
            noise: 1.0,
            sinr,
        });
    }
    Ok(out)
}

fn zf_columns(
    est: &DMatrix<Complex64>,
    columns: &[usize],
    ap_index: usize,
) -> Result<DMatrix<Complex64>> {
    let sub = est.select_columns(columns);
    let gram = sub.adjoint() * &sub;
    let chol = gram
        .cholesky()
        .ok_or_else(|| Error::Solver(format!("singular estimated Gram at AP {ap_index}")))?;
    let l = chol.l();
    let diag: Vec<f64> = (0..columns.len()).map(|i| l[(i, i)].re).collect();
    let dmax = diag.iter().cloned().fold(0.0, f64::max);
    let dmin = diag.iter().cloned().fold(f64::INFINITY, f64::min);
    if dmin <= 0.0 || (dmax / dmin).powi(2) > GRAM_COND_LIMIT {
        return Err(Error::Solver(format!(
            "ill-conditioned estimated Gram at AP {ap_index}"
        )));
    }
    let mut inv = DMatrix::identity(columns.len(), columns.len());
    chol.solve_mut(&mut inv);
    Ok(sub * inv)
}

/// Precoding columns for every serving link: `precoders[m]` is N×K with
/// column k the (analytically unit-mean-square) precoder of device k, or
/// zero when AP m does not serve k. Scaling constants come from the
/// estimate variances, never from per-draw norms.
pub fn build_precoders(
    draw: &ChannelDraw,
    scheme: Scheme,
    sets: &ServingSets,
    stats: &EstimationStats,
    n_antennas: usize,
) -> Result<Vec<DMatrix<Complex64>>> {
    let m_aps = draw.est_g.len();
    let k_devs = stats.lambda.ncols();
    check_antennas(scheme, sets, k_devs, n_antennas)?;
    let nf = n_antennas as f64;
    let mut precoders = Vec::with_capacity(m_aps);
    for m in 0..m_aps {
        let served = &sets.served_devices[m];
        let mut a = DMatrix::zeros(n_antennas, k_devs);
        if served.is_empty() {
            precoders.push(a);
            continue;
        }
        for &k in served {
            if stats.lambda[(m, k)] <= 0.0 {
                return Err(Error::Domain(format!(
                    "zero estimate variance on serving link ({m}, {k})"
                )));
            }
        }
        match scheme {
            Scheme::Mrt => {
                for &k in served {
                    let scale = 1.0 / (nf * stats.lambda[(m, k)]).sqrt();
                    let col = draw.est_g[m].column(k) * Complex64::new(scale, 0.0);
                    a.set_column(k, &col);
                }
            }
            Scheme::Fzf => {
                let all: Vec<usize> = (0..k_devs).collect();
                let b = zf_columns(&draw.est_g[m], &all, m)?;
                for &k in served {
                    let scale = ((nf - k_devs as f64) * stats.lambda[(m, k)]).sqrt();
                    let col = b.column(k) * Complex64::new(scale, 0.0);
                    a.set_column(k, &col);
                }
            }
            Scheme::Lzf => {
                let b = zf_columns(&draw.est_g[m], served, m)?;
                let tau = served.len() as f64;
                for (j, &k) in served.iter().enumerate() {
                    let scale = ((nf - tau) * stats.lambda[(m, k)]).sqrt();
                    let col = b.column(j) * Complex64::new(scale, 0.0);
                    a.set_column(k, &col);
                }
            }
        }
        precoders.push(a);
    }
    Ok(precoders)
}

/// Monte Carlo statistics for one device.
#[derive(Debug, Clone)]
pub struct DeviceMcStats {
    /// Mean finite-blocklength rate over draws (negative draws included).
    pub ergodic_rate: f64,
    pub rate_se: f64,
    /// Empirical mean of the effective desired-signal gain.
    pub ds_mean: Complex64,
    pub ds_se: f64,
    /// Empirical E|LS|² around the analytic mean.
    pub ls_power: f64,
    pub ls_se: f64,
    /// Empirical E|UI|² per interferer (own index holds zero).
    pub ui_power: Vec<f64>,
    pub ui_se: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct McReport {
    pub per_device: Vec<DeviceMcStats>,
    pub draws: usize,
    /// Draws rejected for ill-conditioned Gram matrices and redrawn.
    pub resampled: usize,
}

struct ChunkAcc {
    phi_sum: Vec<Complex64>,
    phi_sq: Vec<f64>,
    ls_sum: Vec<f64>,
    ls_sq: Vec<f64>,
    ui_sum: Vec<f64>,
    ui_sq: Vec<f64>,
    rate_sum: Vec<f64>,
    rate_sq: Vec<f64>,
    resampled: usize,
}

impl ChunkAcc {
    fn new(k: usize) -> Self {
        ChunkAcc {
            phi_sum: vec![Complex64::new(0.0, 0.0); k],
            phi_sq: vec![0.0; k],
            ls_sum: vec![0.0; k],
            ls_sq: vec![0.0; k],
            ui_sum: vec![0.0; k * k],
            ui_sq: vec![0.0; k * k],
            rate_sum: vec![0.0; k],
            rate_sq: vec![0.0; k],
            resampled: 0,
        }
    }

    fn merge(&mut self, other: &ChunkAcc) {
        for (a, b) in self.phi_sum.iter_mut().zip(&other.phi_sum) {
            *a += b;
        }
        for (a, b) in self.phi_sq.iter_mut().zip(&other.phi_sq) {
            *a += b;
        }
        for (a, b) in self.ls_sum.iter_mut().zip(&other.ls_sum) {
            *a += b;
        }
        for (a, b) in self.ls_sq.iter_mut().zip(&other.ls_sq) {
            *a += b;
        }
        for (a, b) in self.ui_sum.iter_mut().zip(&other.ui_sum) {
            *a += b;
        }
        for (a, b) in self.ui_sq.iter_mut().zip(&other.ui_sq) {
            *a += b;
        }
        for (a, b) in self.rate_sum.iter_mut().zip(&other.rate_sum) {
            *a += b;
        }
        for (a, b) in self.rate_sq.iter_mut().zip(&other.rate_sq) {
            *a += b;
        }
        self.resampled += other.resampled;
    }
}

const MC_CHUNK: usize = 256;
const MAX_RESAMPLE_ATTEMPTS: u64 = 64;

/// Monte Carlo ergodic rate and signal decomposition.
///
/// Draws are indexed substreams of `seed`, generated in parallel over
/// fixed-size chunks and merged in chunk order, so results do not depend
/// on the worker count. Per-draw rates may be negative and are averaged
/// as-is.
#[allow(clippy::too_many_arguments)]
pub fn mc_ergodic_rate(
    beta: &DMatrix<f64>,
    sets: &ServingSets,
    scheme: Scheme,
    powers: &PowerAllocation,
    fbl: &[FblParams],
    n_antennas: usize,
    n_draws: usize,
    seed: u64,
) -> Result<McReport> {
    let (_, k_devs) = beta.shape();
    if n_draws == 0 {
        return Err(Error::Domain("n_draws must be at least 1".into()));
    }
    if fbl.len() != k_devs {
        return Err(Error::Config("one FblParams per device required".into()));
    }
    powers.validate(sets)?;
    let stats = estimation_variance(beta, &powers.pilot)?;
    check_antennas(scheme, sets, k_devs, n_antennas)?;
    let theta = effective_gain(scheme, sets, &stats.lambda, &powers.downlink, n_antennas);

    let n_chunks = n_draws.div_ceil(MC_CHUNK);
    let partials: Result<Vec<ChunkAcc>> = (0..n_chunks)
        .into_par_iter()
        .map(|chunk| {
            let mut acc = ChunkAcc::new(k_devs);
            let lo = chunk * MC_CHUNK;
            let hi = ((chunk + 1) * MC_CHUNK).min(n_draws);
            for draw_idx in lo..hi {
                let (draw, precoders) = loop_draw(
                    beta,
                    sets,
                    scheme,
                    powers,
                    &stats,
                    n_antennas,
                    seed,
                    draw_idx as u64,
                    n_draws as u64,
                    &mut acc.resampled,
                )?;
                accumulate_draw(
                    &mut acc, &draw, &precoders, sets, powers, &theta, fbl, k_devs,
                )?;
            }
            Ok(acc)
        })
        .collect();
    let partials = partials?;
    let mut total = ChunkAcc::new(k_devs);
    for p in &partials {
        total.merge(p);
    }

    let n = n_draws as f64;
    let se = |sum: f64, sq: f64| -> f64 {
        let var = ((sq - sum * sum / n) / (n - 1.0).max(1.0)).max(0.0);
        (var / n).sqrt()
    };
    let per_device = (0..k_devs)
        .map(|k| {
            let phi_mean = total.phi_sum[k] / Complex64::new(n, 0.0);
            let phi_var = (total.phi_sq[k] / n - phi_mean.norm_sqr()).max(0.0);
            let ui_power: Vec<f64> = (0..k_devs)
                .map(|kp| total.ui_sum[k * k_devs + kp] / n)
                .collect();
            let ui_se: Vec<f64> = (0..k_devs)
                .map(|kp| se(total.ui_sum[k * k_devs + kp], total.ui_sq[k * k_devs + kp]))
                .collect();
            DeviceMcStats {
                ergodic_rate: total.rate_sum[k] / n,
                rate_se: se(total.rate_sum[k], total.rate_sq[k]),
                ds_mean: phi_mean,
                ds_se: (phi_var / n).sqrt(),
                ls_power: total.ls_sum[k] / n,
                ls_se: se(total.ls_sum[k], total.ls_sq[k]),
                ui_power,
                ui_se,
            }
        })
        .collect();
    Ok(McReport {
        per_device,
        draws: n_draws,
        resampled: total.resampled,
    })
}

#[allow(clippy::too_many_arguments)]
fn loop_draw(
    beta: &DMatrix<f64>,
    sets: &ServingSets,
    scheme: Scheme,
    powers: &PowerAllocation,
    stats: &EstimationStats,
    n_antennas: usize,
    seed: u64,
    draw_idx: u64,
    n_draws: u64,
    resampled: &mut usize,
) -> Result<(ChannelDraw, Vec<DMatrix<Complex64>>)> {
    for attempt in 0..MAX_RESAMPLE_ATTEMPTS {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        rng.set_stream(1 + draw_idx + attempt * n_draws);
        let draw = draw_channels(beta, &powers.pilot, n_antennas, &mut rng)?;
        match build_precoders(&draw, scheme, sets, stats, n_antennas) {
            Ok(precoders) => return Ok((draw, precoders)),
            Err(Error::Solver(_)) => {
                *resampled += 1;
                continue;
            }
            Err(e) => return Err(e),
        }
    }
    Err(Error::Solver(format!(
        "draw {draw_idx}: Gram matrices stayed singular after {MAX_RESAMPLE_ATTEMPTS} resamples"
    )))
}

#[allow(clippy::too_many_arguments)]
fn accumulate_draw(
    acc: &mut ChunkAcc,
    draw: &ChannelDraw,
    precoders: &[DMatrix<Complex64>],
    sets: &ServingSets,
    powers: &PowerAllocation,
    theta: &[f64],
    fbl: &[FblParams],
    k_devs: usize,
) -> Result<()> {
    // phi[k][kp]: effective gain from the beam intended for kp as seen by k
    let mut phi = vec![Complex64::new(0.0, 0.0); k_devs * k_devs];
    for (kp, aps) in sets.serving_aps.iter().enumerate() {
        for &m in aps {
            let sqrt_p = powers.downlink[(m, kp)].sqrt();
            let a_col = precoders[m].column(kp);
            for k in 0..k_devs {
                // g^T a* accumulated per antenna
                let g_col = draw.true_g[m].column(k);
                let dot: Complex64 = a_col.dotc(&g_col);
                phi[k * k_devs + kp] += dot * Complex64::new(sqrt_p, 0.0);
            }
        }
    }
    for k in 0..k_devs {
        let own = phi[k * k_devs + k];
        acc.phi_sum[k] += own;
        acc.phi_sq[k] += own.norm_sqr();
        let ls = own - Complex64::new(theta[k], 0.0);
        let ls_pow = ls.norm_sqr();
        acc.ls_sum[k] += ls_pow;
        acc.ls_sq[k] += ls_pow * ls_pow;
        let mut interference = 0.0;
        for kp in 0..k_devs {
            if kp == k {
                continue;
            }
            let u = phi[k * k_devs + kp].norm_sqr();
            acc.ui_sum[k * k_devs + kp] += u;
            acc.ui_sq[k * k_devs + kp] += u * u;
            interference += u;
        }
        let gamma = theta[k] * theta[k] / (ls_pow + interference + 1.0);
        let rate = rate_fbl(gamma, &fbl[k])?;
        acc.rate_sum[k] += rate;
        acc.rate_sq[k] += rate * rate;
    }
    Ok(())
}
