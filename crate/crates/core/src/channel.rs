//! Small-scale channel sampling and MMSE channel estimation.
//!
//! Channels are Rayleigh per antenna with per-link variance beta. Pilots
//! are orthogonal, so de-spreading reduces to observing y = g + n with an
//! equivalent noise variance of 1/(K·p) per antenna; the pilot matrices
//! themselves never need to be materialized. The MMSE estimate scales the
//! observation by K·p·β/(K·p·β + 1) and its per-antenna variance is
//! λ = K·p·β²/(K·p·β + 1).

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// MMSE estimation quality per link: estimate variance `lambda` and
/// error variance `error_var = beta − lambda` (the split is exact by
/// construction).
#[derive(Debug, Clone)]
pub struct EstimationStats {
    pub lambda: DMatrix<f64>,
    pub error_var: DMatrix<f64>,
}

/// Per-link estimate variance for given pilot powers.
/// `pilot_powers[k]` is the k-th device's pilot power in watts; `beta`
/// must be the noise-normalized gain matrix.
pub fn estimation_variance(beta: &DMatrix<f64>, pilot_powers: &[f64]) -> Result<EstimationStats> {
    let (m_aps, k_devs) = beta.shape();
    if pilot_powers.len() != k_devs {
        return Err(Error::Config(format!(
            "expected {k_devs} pilot powers, got {}",
            pilot_powers.len()
        )));
    }
    if pilot_powers.iter().any(|&p| p < 0.0) {
        return Err(Error::Domain("pilot powers must be nonnegative".into()));
    }
    let k = k_devs as f64;
    let mut lambda = DMatrix::zeros(m_aps, k_devs);
    let mut error_var = DMatrix::zeros(m_aps, k_devs);
    for kk in 0..k_devs {
        let p = pilot_powers[kk];
        for m in 0..m_aps {
            let b = beta[(m, kk)];
            let l = k * p * b * b / (k * p * b + 1.0);
            lambda[(m, kk)] = l;
            error_var[(m, kk)] = b - l;
        }
    }
    Ok(EstimationStats { lambda, error_var })
}

/// One joint draw of true channels, estimates and estimation errors;
/// `true_g[m]`, `est_g[m]` and `err_g[m]` are N×K with column k the
/// vector channel between AP m and device k.
#[derive(Debug, Clone)]
pub struct ChannelDraw {
    pub true_g: Vec<DMatrix<Complex64>>,
    pub est_g: Vec<DMatrix<Complex64>>,
    pub err_g: Vec<DMatrix<Complex64>>,
}

fn complex_normal<R: Rng + ?Sized>(rng: &mut R, variance: f64) -> Complex64 {
    let s = (variance * 0.5).sqrt();
    let re: f64 = rng.sample(StandardNormal);
    let im: f64 = rng.sample(StandardNormal);
    Complex64::new(s * re, s * im)
}

/// Sample the true channels: column (m, k) is sqrt(beta[(m,k)]) times a
/// circularly symmetric unit-variance Gaussian per antenna.
pub fn sample_channels<R: Rng + ?Sized>(
    beta: &DMatrix<f64>,
    n_antennas: usize,
    rng: &mut R,
) -> Vec<DMatrix<Complex64>> {
    let (m_aps, k_devs) = beta.shape();
    (0..m_aps)
        .map(|m| {
            DMatrix::from_fn(n_antennas, k_devs, |_, k| complex_normal(rng, beta[(m, k)]))
        })
        .collect()
}

/// Simulate pilot observation and MMSE estimation for a set of true
/// channels. Zero pilot power yields the zero estimate (the MMSE answer
/// with no information).
pub fn estimate_channels<R: Rng + ?Sized>(
    true_g: Vec<DMatrix<Complex64>>,
    beta: &DMatrix<f64>,
    pilot_powers: &[f64],
    rng: &mut R,
) -> Result<ChannelDraw> {
    let (m_aps, k_devs) = beta.shape();
    if true_g.len() != m_aps {
        return Err(Error::Config("channel draw / beta shape mismatch".into()));
    }
    if pilot_powers.len() != k_devs {
        return Err(Error::Config(format!(
            "expected {k_devs} pilot powers, got {}",
            pilot_powers.len()
        )));
    }
    if pilot_powers.iter().any(|&p| p < 0.0) {
        return Err(Error::Domain("pilot powers must be nonnegative".into()));
    }
    let kf = k_devs as f64;
    let n_antennas = true_g[0].nrows();
    let mut est_g = Vec::with_capacity(m_aps);
    let mut err_g = Vec::with_capacity(m_aps);
    for m in 0..m_aps {
        let mut est = DMatrix::zeros(n_antennas, k_devs);
        for k in 0..k_devs {
            let p = pilot_powers[k];
            if p == 0.0 {
                continue;
            }
            let noise_var = 1.0 / (kf * p);
            let b = beta[(m, k)];
            let gain = kf * p * b / (kf * p * b + 1.0);
            for a in 0..n_antennas {
                let obs = true_g[m][(a, k)] + complex_normal(rng, noise_var);
                est[(a, k)] = gain * obs;
            }
        }
        err_g.push(&true_g[m] - &est);
        est_g.push(est);
    }
    Ok(ChannelDraw {
        true_g,
        est_g,
        err_g,
    })
}

/// Convenience: sample and estimate in one call.
pub fn draw_channels<R: Rng + ?Sized>(
    beta: &DMatrix<f64>,
    pilot_powers: &[f64],
    n_antennas: usize,
    rng: &mut R,
) -> Result<ChannelDraw> {
    let true_g = sample_channels(beta, n_antennas, rng);
    estimate_channels(true_g, beta, pilot_powers, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn estimate_variance_spot_values() {
        let beta = DMatrix::from_element(1, 10, 1.0);
        let stats = estimation_variance(&beta, &[1.0; 10]).unwrap();
        assert_relative_eq!(stats.lambda[(0, 0)], 10.0 / 11.0, max_relative = 1e-14);

        // zero power: lambda = 0, error = beta
        let stats0 = estimation_variance(&beta, &[0.0; 10]).unwrap();
        assert_eq!(stats0.lambda[(0, 3)], 0.0);
        assert_eq!(stats0.error_var[(0, 3)], 1.0);

        // strong-pilot asymptote: lambda -> beta once K*p*beta is large
        let strong = estimation_variance(&beta, &[100.0; 10]).unwrap();
        assert!(strong.lambda[(0, 0)] > 0.999 * beta[(0, 0)]);

        assert!(estimation_variance(&beta, &[-1.0; 10]).is_err());
    }

    #[test]
    fn lambda_plus_error_is_exactly_beta() {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        use rand::Rng;
        let beta = DMatrix::from_fn(6, 4, |_, _| rng.gen::<f64>() * 100.0 + 0.01);
        let stats = estimation_variance(&beta, &[0.37, 0.0, 2.0, 14.0]).unwrap();
        for m in 0..6 {
            for k in 0..4 {
                assert_eq!(stats.lambda[(m, k)] + stats.error_var[(m, k)], beta[(m, k)]);
                assert!(stats.lambda[(m, k)] >= 0.0);
                assert!(stats.lambda[(m, k)] < beta[(m, k)]);
            }
        }
    }

    #[test]
    fn lambda_strictly_increases_with_pilot_power() {
        let beta = DMatrix::from_element(1, 3, 2.5);
        let mut prev = -1.0;
        for i in 0..40 {
            let p = 1e-3 * 1.5f64.powi(i);
            let stats = estimation_variance(&beta, &[p; 3]).unwrap();
            let l = stats.lambda[(0, 1)];
            assert!(l > prev, "lambda not increasing at p = {p}");
            prev = l;
        }
    }

    #[test]
    fn sampled_channel_moments_match_beta() {
        let beta = DMatrix::from_row_slice(1, 2, &[0.8, 3.0]);
        let n = 4;
        let draws = 100_000;
        let mut rng = ChaCha20Rng::seed_from_u64(17);
        let mut pow_sum = [0.0f64; 2];
        let mut re_var = [0.0f64; 2];
        let mut im_var = [0.0f64; 2];
        for _ in 0..draws {
            let g = sample_channels(&beta, n, &mut rng);
            for k in 0..2 {
                let col = g[0].column(k);
                pow_sum[k] += col.iter().map(|c| c.norm_sqr()).sum::<f64>() / n as f64;
                re_var[k] += col.iter().map(|c| c.re * c.re).sum::<f64>() / n as f64;
                im_var[k] += col.iter().map(|c| c.im * c.im).sum::<f64>() / n as f64;
            }
        }
        for k in 0..2 {
            let b = beta[(0, k)];
            assert_relative_eq!(pow_sum[k] / draws as f64, b, max_relative = 0.02);
            assert_relative_eq!(re_var[k] / draws as f64, b / 2.0, max_relative = 0.02);
            assert_relative_eq!(im_var[k] / draws as f64, b / 2.0, max_relative = 0.02);
        }
    }

    #[test]
    fn zero_gain_link_yields_zero_channel() {
        let beta = DMatrix::from_element(1, 1, 0.0);
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let g = sample_channels(&beta, 4, &mut rng);
        assert!(g[0].iter().all(|c| c.norm() == 0.0));
    }

    #[test]
    fn noiseless_limit_recovers_true_channel() {
        let beta = DMatrix::from_element(2, 2, 1.0);
        // K*p*beta = 1e4
        let p = 1e4 / 2.0;
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        for _ in 0..50 {
            let draw = draw_channels(&beta, &[p, p], 4, &mut rng).unwrap();
            for m in 0..2 {
                let rel = (&draw.est_g[m] - &draw.true_g[m]).norm() / draw.true_g[m].norm();
                assert!(rel < 0.05, "relative estimation error {rel} too large");
            }
        }
    }

    #[test]
    fn estimate_variance_and_orthogonality_by_monte_carlo() {
        let beta = DMatrix::from_row_slice(1, 2, &[2.0, 0.5]);
        let pilots = [0.7, 1.3];
        let stats = estimation_variance(&beta, &pilots).unwrap();
        let n = 2;
        let draws = 100_000;
        let mut rng = ChaCha20Rng::seed_from_u64(29);
        let mut est_pow = [0.0f64; 2];
        let mut err_pow = [0.0f64; 2];
        let mut cross = [Complex64::new(0.0, 0.0); 2];
        for _ in 0..draws {
            let draw = draw_channels(&beta, &pilots, n, &mut rng).unwrap();
            for k in 0..2 {
                let est = draw.est_g[0].column(k);
                let err = draw.err_g[0].column(k);
                est_pow[k] += est.iter().map(|c| c.norm_sqr()).sum::<f64>() / n as f64;
                err_pow[k] += err.iter().map(|c| c.norm_sqr()).sum::<f64>() / n as f64;
                cross[k] += est.iter().zip(err.iter()).map(|(a, b)| a * b.conj()).sum::<Complex64>() / n as f64;
            }
        }
        for k in 0..2 {
            assert_relative_eq!(est_pow[k] / draws as f64, stats.lambda[(0, k)], max_relative = 0.02);
            assert_relative_eq!(err_pow[k] / draws as f64, stats.error_var[(0, k)], max_relative = 0.02);
            // MMSE estimate and error are uncorrelated
            let c = cross[k] / draws as f64;
            assert!(c.norm() < 0.02 * beta[(0, k)], "estimate/error correlation {c}");
        }
    }

    #[test]
    fn zero_pilot_power_gives_zero_estimate() {
        let beta = DMatrix::from_element(1, 1, 1.0);
        let mut rng = ChaCha20Rng::seed_from_u64(31);
        let draw = draw_channels(&beta, &[0.0], 4, &mut rng).unwrap();
        assert!(draw.est_g[0].iter().all(|c| c.norm() == 0.0));
        assert_eq!(draw.err_g[0], draw.true_g[0]);
    }
}
