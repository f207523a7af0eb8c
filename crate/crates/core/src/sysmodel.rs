//! Scenario construction: AP/device geometry, the three-slope path-loss
//! model, noise normalization, and user-centric AP selection.

use nalgebra::DMatrix;
use rand::Rng;
use rand_chacha::ChaCha20Rng;
use rand::SeedableRng;

use crate::config::SystemConfig;
use crate::error::{Error, Result};

/// Boltzmann constant in J/K.
pub const BOLTZMANN: f64 = 1.381e-23;
/// Reference noise temperature in K.
pub const NOISE_TEMPERATURE: f64 = 290.0;

/// One random drop: positions in meters and the noise-normalized
/// large-scale gain matrix (`beta[(m, k)]` in 1/W, i.e. linear gain
/// divided by the noise power, so that transmit powers stay in watts and
/// the effective noise variance is 1).
#[derive(Debug, Clone)]
pub struct NetworkRealization {
    pub ap_positions: Vec<(f64, f64)>,
    pub device_positions: Vec<(f64, f64)>,
    pub beta: DMatrix<f64>,
}

/// User-centric association between APs and devices.
#[derive(Debug, Clone)]
pub struct ServingSets {
    /// `serving_aps[k]`: APs serving device k, ascending.
    pub serving_aps: Vec<Vec<usize>>,
    /// `served_devices[m]`: devices served by AP m, ascending.
    pub served_devices: Vec<Vec<usize>>,
    /// `tau[m] = served_devices[m].len()`.
    pub tau: Vec<usize>,
}

impl ServingSets {
    pub fn serves(&self, m: usize, k: usize) -> bool {
        self.served_devices[m].binary_search(&k).is_ok()
    }

    /// Largest per-AP served count, the LZF antenna requirement.
    pub fn max_tau(&self) -> usize {
        self.tau.iter().copied().max().unwrap_or(0)
    }
}

/// Constant offset of the path-loss model in dB: depends on the carrier
/// frequency (MHz) and the AP/device antenna heights (m).
pub fn path_loss_offset_db(cfg: &SystemConfig) -> f64 {
    let lf = cfg.carrier_freq.log10();
    46.3 + 33.9 * lf - 13.82 * cfg.ap_height.log10() - (1.1 * lf - 0.7) * cfg.device_height
        + (1.56 * lf - 0.8)
}

/// Three-slope path loss in dB at distance `d` meters.
///
/// 35 dB/decade beyond `d1`, 20 dB/decade between `d0` and `d1`, constant
/// below `d0`; distances enter the slopes in kilometers.
pub fn path_loss_db(d: f64, cfg: &SystemConfig) -> Result<f64> {
    if d <= 0.0 {
        return Err(Error::Domain(format!("distance must be positive, got {d}")));
    }
    let offset = path_loss_offset_db(cfg);
    let d_km = d / 1000.0;
    let d0_km = cfg.d0 / 1000.0;
    let d1_km = cfg.d1 / 1000.0;
    let pl = if d_km > d1_km {
        offset + 35.0 * d_km.log10()
    } else if d_km <= d0_km {
        offset + 15.0 * d1_km.log10() + 20.0 * d0_km.log10()
    } else {
        offset + 15.0 * d1_km.log10() + 20.0 * d_km.log10()
    };
    Ok(pl)
}

/// Thermal noise power in watts: `B * k_B * T_0 * 10^(NF/10)`.
pub fn noise_power_w(cfg: &SystemConfig) -> Result<f64> {
    if cfg.bandwidth <= 0.0 {
        return Err(Error::Domain("bandwidth must be positive".into()));
    }
    Ok(cfg.bandwidth * BOLTZMANN * NOISE_TEMPERATURE * 10f64.powf(cfg.noise_figure / 10.0))
}

/// AP grid positions: a ceil(sqrt(M)) x ceil(sqrt(M)) lattice of cell
/// centers truncated row-major to M points. For square M this is the
/// exact uniform grid.
pub fn ap_grid(num_aps: usize, area_side: f64) -> Vec<(f64, f64)> {
    let side = (num_aps as f64).sqrt().ceil() as usize;
    let step = area_side / side as f64;
    (0..num_aps)
        .map(|i| {
            let row = i / side;
            let col = i % side;
            ((col as f64 + 0.5) * step, (row as f64 + 0.5) * step)
        })
        .collect()
}

/// Deploy APs on the grid and devices i.i.d. uniform over the square,
/// then fill the noise-normalized gain matrix. Deterministic in `seed`.
pub fn deploy(cfg: &SystemConfig, seed: u64) -> Result<NetworkRealization> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let ap_positions = ap_grid(cfg.num_aps, cfg.area_side);
    let device_positions: Vec<(f64, f64)> = (0..cfg.num_devices)
        .map(|_| {
            (
                rng.gen::<f64>() * cfg.area_side,
                rng.gen::<f64>() * cfg.area_side,
            )
        })
        .collect();
    let noise = noise_power_w(cfg)?;
    let mut beta = DMatrix::zeros(cfg.num_aps, cfg.num_devices);
    for (m, &(ax, ay)) in ap_positions.iter().enumerate() {
        for (k, &(dx, dy)) in device_positions.iter().enumerate() {
            let d = ((ax - dx).powi(2) + (ay - dy).powi(2)).sqrt();
            let pl = path_loss_db(d, cfg)?;
            beta[(m, k)] = 10f64.powf(-pl / 10.0) / noise;
        }
    }
    Ok(NetworkRealization {
        ap_positions,
        device_positions,
        beta,
    })
}

/// Select each device's serving APs: sort its column of `beta`
/// descending (ties by lower AP index) and accumulate until the served
/// share of the total gain reaches `threshold`. Derive the per-AP sets by
/// membership.
pub fn select_aps(beta: &DMatrix<f64>, threshold: f64) -> Result<ServingSets> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(Error::Domain(format!("threshold must lie in (0, 1], got {threshold}")));
    }
    let (num_aps, num_devices) = beta.shape();
    if beta.iter().any(|&b| !(b > 0.0)) {
        return Err(Error::Domain("beta entries must be positive".into()));
    }
    let mut serving_aps = vec![Vec::new(); num_devices];
    for k in 0..num_devices {
        let mut order: Vec<usize> = (0..num_aps).collect();
        order.sort_by(|&a, &b| {
            beta[(b, k)]
                .partial_cmp(&beta[(a, k)])
                .unwrap()
                .then(a.cmp(&b))
        });
        let total: f64 = (0..num_aps).map(|m| beta[(m, k)]).sum();
        let mut acc = 0.0;
        let mut chosen = Vec::new();
        for &m in &order {
            chosen.push(m);
            acc += beta[(m, k)];
            if acc / total >= threshold {
                break;
            }
        }
        chosen.sort_unstable();
        serving_aps[k] = chosen;
    }
    let mut served_devices = vec![Vec::new(); num_aps];
    for (k, aps) in serving_aps.iter().enumerate() {
        for &m in aps {
            served_devices[m].push(k);
        }
    }
    let tau = served_devices.iter().map(Vec::len).collect();
    Ok(ServingSets {
        serving_aps,
        served_devices,
        tau,
    })
}

/// A validated scenario: config, drop, and serving sets together.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub cfg: SystemConfig,
    pub net: NetworkRealization,
    pub sets: ServingSets,
}

impl Scenario {
    /// Deploy with `cfg.rng_seed`, derive serving sets, and run the
    /// scheme-specific antenna checks that need them.
    pub fn generate(cfg: SystemConfig) -> Result<Self> {
        let seed = cfg.rng_seed;
        Self::generate_seeded(cfg, seed)
    }

    pub fn generate_seeded(cfg: SystemConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let net = deploy(&cfg, seed)?;
        let sets = select_aps(&net.beta, cfg.selection_threshold)?;
        let scenario = Scenario { cfg, net, sets };
        scenario.check_antenna_budget()?;
        Ok(scenario)
    }

    /// Verify `N > dof` for every AP under the configured scheme.
    pub fn check_antenna_budget(&self) -> Result<()> {
        let n = self.cfg.antennas_per_ap;
        let k = self.cfg.num_devices;
        for m in 0..self.cfg.num_aps {
            let dof = self.cfg.scheme.dof_used(k, self.sets.tau[m]);
            if n <= dof {
                return Err(Error::Config(format!(
                    "AP {m}: scheme {} needs more than {dof} antennas, has {n}",
                    self.cfg.scheme
                )));
            }
        }
        Ok(())
    }

    /// Sub-scenario over a subset of devices (same drop, serving sets
    /// re-derived from the restricted gain matrix). Used by the
    /// round-robin scheduler.
    pub fn restrict(&self, devices: &[usize]) -> Result<Scenario> {
        let mut cfg = self.cfg.clone();
        cfg.num_devices = devices.len();
        cfg.dep = devices.iter().map(|&k| self.cfg.dep[k]).collect();
        cfg.rate_req = devices.iter().map(|&k| self.cfg.rate_req[k]).collect();
        cfg.weights = devices.iter().map(|&k| self.cfg.weights[k]).collect();
        cfg.pilot_power_max = devices.iter().map(|&k| self.cfg.pilot_power_max[k]).collect();
        cfg.validate()?;
        let beta = self.net.beta.select_columns(devices);
        let net = NetworkRealization {
            ap_positions: self.net.ap_positions.clone(),
            device_positions: devices.iter().map(|&k| self.net.device_positions[k]).collect(),
            beta,
        };
        let sets = select_aps(&net.beta, cfg.selection_threshold)?;
        let scenario = Scenario { cfg, net, sets };
        scenario.check_antenna_budget()?;
        Ok(scenario)
    }
}
