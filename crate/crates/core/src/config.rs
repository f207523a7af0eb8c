//! Scenario configuration: every scalar that defines a simulation run,
//! plus the flat key-value scenario file format.

use std::fmt;
use std::path::Path;

use crate::error::{Error, Result};

/// Linear precoding scheme used by the APs.
///
/// `Fzf` nulls the estimated channels of all devices and needs more
/// antennas than devices; `Lzf` nulls only the devices served by the AP
/// and needs more antennas than that AP's served count; `Mrt` does no
/// nulling.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scheme {
    Mrt,
    Fzf,
    Lzf,
}

impl Scheme {
    /// Spatial degrees of freedom consumed at one AP: 0 for MRT, the
    /// total device count for FZF, the AP's served count for LZF. The
    /// effective array gain per link is `N - dof`.
    pub fn dof_used(self, num_devices: usize, served_by_ap: usize) -> usize {
        match self {
            Scheme::Mrt => 0,
            Scheme::Fzf => num_devices,
            Scheme::Lzf => served_by_ap,
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "mrt" => Ok(Scheme::Mrt),
            "fzf" => Ok(Scheme::Fzf),
            "lzf" => Ok(Scheme::Lzf),
            other => Err(Error::Config(format!("unknown scheme '{other}'"))),
        }
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Scheme::Mrt => write!(f, "mrt"),
            Scheme::Fzf => write!(f, "fzf"),
            Scheme::Lzf => write!(f, "lzf"),
        }
    }
}

/// Full description of one simulation scenario.
///
/// Radio constants, geometry, per-device requirements and per-AP budgets.
/// All powers are in watts (the large-scale gains are pre-divided by the
/// noise power so the effective noise variance downstream is exactly 1).
/// `ap_power_max` applies to every AP.
#[derive(Debug, Clone)]
pub struct SystemConfig {
    /// Carrier frequency in MHz.
    pub carrier_freq: f64,
    /// Bandwidth in Hz.
    pub bandwidth: f64,
    /// Frame (transmission) duration in seconds.
    pub frame_duration: f64,
    /// AP antenna height in meters.
    pub ap_height: f64,
    /// Device antenna height in meters.
    pub device_height: f64,
    /// Receiver noise figure in dB.
    pub noise_figure: f64,
    /// Side of the square deployment area in meters.
    pub area_side: f64,
    /// Near path-loss breakpoint in meters.
    pub d0: f64,
    /// Far path-loss breakpoint in meters.
    pub d1: f64,
    /// Number of APs.
    pub num_aps: usize,
    /// Antennas per AP.
    pub antennas_per_ap: usize,
    /// Number of devices.
    pub num_devices: usize,
    /// AP-selection threshold in (0, 1]: smallest cumulative share of a
    /// device's total large-scale gain its serving set must reach.
    pub selection_threshold: f64,
    /// Per-device decoding error probability target.
    pub dep: Vec<f64>,
    /// Per-device rate requirement in bit/s/Hz.
    pub rate_req: Vec<f64>,
    /// Per-device objective weights.
    pub weights: Vec<f64>,
    /// Per-device maximum pilot power in watts.
    pub pilot_power_max: Vec<f64>,
    /// Maximum downlink power per AP in watts (same budget at every AP).
    pub ap_power_max: f64,
    /// Precoding scheme.
    pub scheme: Scheme,
    /// Relative-improvement stopping tolerance of the power optimizer.
    pub sca_tolerance: f64,
    /// Master RNG seed for deployment and channel draws.
    pub rng_seed: u64,
}

impl SystemConfig {
    /// Default smart-factory scenario: 2100 MHz carrier, 10 MHz bandwidth,
    /// 0.05 ms frames (500-symbol blocks), 1 km² area, 10 devices with
    /// 0.5 bit/s/Hz targets at 1e-7 error probability, 100 mW pilots.
    pub fn baseline() -> Self {
        let k = 10;
        SystemConfig {
            carrier_freq: 2100.0,
            bandwidth: 10.0e6,
            frame_duration: 0.05e-3,
            ap_height: 15.0,
            device_height: 1.6,
            noise_figure: 9.0,
            area_side: 1000.0,
            d0: 10.0,
            d1: 50.0,
            num_aps: 4,
            antennas_per_ap: 36,
            num_devices: k,
            selection_threshold: 0.95,
            dep: vec![1e-7; k],
            rate_req: vec![0.5; k],
            weights: vec![1.0; k],
            pilot_power_max: vec![0.1; k],
            ap_power_max: 1.0,
            scheme: Scheme::Mrt,
            sca_tolerance: 0.01,
            rng_seed: 1,
        }
    }

    /// Blocklength in symbols: `round(bandwidth * frame_duration)`.
    pub fn blocklength(&self) -> usize {
        (self.bandwidth * self.frame_duration).round() as usize
    }

    /// Pilot overhead fraction `K / L`.
    pub fn overhead(&self) -> f64 {
        self.num_devices as f64 / self.blocklength() as f64
    }

    /// Check every scalar invariant that does not depend on the AP
    /// selection outcome (the LZF antenna check needs serving sets and is
    /// performed where those exist).
    pub fn validate(&self) -> Result<()> {
        let k = self.num_devices;
        if self.bandwidth <= 0.0 || self.frame_duration <= 0.0 {
            return Err(Error::Config("bandwidth and frame_duration must be positive".into()));
        }
        if self.blocklength() <= k {
            return Err(Error::Config(format!(
                "blocklength {} must exceed the device count {k}",
                self.blocklength()
            )));
        }
        if self.num_aps == 0 || self.antennas_per_ap == 0 || k == 0 {
            return Err(Error::Config("num_aps, antennas_per_ap, num_devices must be positive".into()));
        }
        if !(self.selection_threshold > 0.0 && self.selection_threshold <= 1.0) {
            return Err(Error::Config("selection_threshold must lie in (0, 1]".into()));
        }
        if self.area_side <= 0.0 || self.d0 <= 0.0 || self.d1 <= 0.0 {
            return Err(Error::Config("area_side, d0, d1 must be positive".into()));
        }
        for (name, v) in [
            ("dep", &self.dep),
            ("rate_req", &self.rate_req),
            ("weights", &self.weights),
            ("pilot_power_max", &self.pilot_power_max),
        ] {
            if v.len() != k {
                return Err(Error::Config(format!("{name} must have one entry per device ({k})")));
            }
        }
        if self.dep.iter().any(|&e| !(e > 0.0 && e < 0.5)) {
            return Err(Error::Config("every dep must lie in (0, 0.5)".into()));
        }
        if self.rate_req.iter().any(|&r| r <= 0.0) {
            return Err(Error::Config("every rate_req must be positive".into()));
        }
        if self.weights.iter().any(|&w| w < 0.0) {
            return Err(Error::Config("weights must be nonnegative".into()));
        }
        if self.pilot_power_max.iter().any(|&p| p <= 0.0) || self.ap_power_max <= 0.0 {
            return Err(Error::Config("powers must be positive".into()));
        }
        if self.scheme == Scheme::Fzf && self.antennas_per_ap <= k {
            return Err(Error::Config(format!(
                "FZF needs antennas_per_ap > num_devices, got N={} K={k}",
                self.antennas_per_ap
            )));
        }
        if self.sca_tolerance <= 0.0 {
            return Err(Error::Config("sca_tolerance must be positive".into()));
        }
        Ok(())
    }

    /// Parse a flat `key = value` scenario file. `#` starts a comment;
    /// per-device keys take either one value (applied to all devices) or a
    /// comma-separated list of length `num_devices`.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse_str(&text)
    }

    pub fn parse_str(text: &str) -> Result<Self> {
        let mut cfg = Self::baseline();
        let mut per_device: Vec<(String, String)> = Vec::new();
        let mut seen_k: Option<usize> = None;
        let mut blocklength_key: Option<f64> = None;

        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected 'key = value'", lineno + 1)))?;
            let key = key.trim();
            let value = value.trim();
            let fnum = || -> Result<f64> {
                value
                    .parse::<f64>()
                    .map_err(|_| Error::Config(format!("line {}: '{value}' is not a number", lineno + 1)))
            };
            match key {
                "carrier_freq" => cfg.carrier_freq = fnum()?,
                "bandwidth" => cfg.bandwidth = fnum()?,
                "frame_duration" => cfg.frame_duration = fnum()?,
                "blocklength" => blocklength_key = Some(fnum()?),
                "ap_height" => cfg.ap_height = fnum()?,
                "device_height" => cfg.device_height = fnum()?,
                "noise_figure" => cfg.noise_figure = fnum()?,
                "area_side" => cfg.area_side = fnum()?,
                "d0" => cfg.d0 = fnum()?,
                "d1" => cfg.d1 = fnum()?,
                "num_aps" => cfg.num_aps = fnum()? as usize,
                "antennas_per_ap" => cfg.antennas_per_ap = fnum()? as usize,
                "num_devices" => {
                    cfg.num_devices = fnum()? as usize;
                    seen_k = Some(cfg.num_devices);
                }
                "selection_threshold" => cfg.selection_threshold = fnum()?,
                "dep" | "rate_req" | "weights" | "pilot_power_max" => {
                    per_device.push((key.to_string(), value.to_string()));
                }
                "ap_power_max" => cfg.ap_power_max = fnum()?,
                "scheme" => cfg.scheme = Scheme::parse(value)?,
                "sca_tolerance" => cfg.sca_tolerance = fnum()?,
                "rng_seed" => {
                    cfg.rng_seed = value
                        .parse::<u64>()
                        .map_err(|_| Error::Config(format!("line {}: bad rng_seed", lineno + 1)))?;
                }
                other => return Err(Error::Config(format!("line {}: unknown key '{other}'", lineno + 1))),
            }
        }

        let k = seen_k.unwrap_or(cfg.num_devices);
        cfg.dep = vec![cfg.dep[0]; k];
        cfg.rate_req = vec![cfg.rate_req[0]; k];
        cfg.weights = vec![1.0; k];
        cfg.pilot_power_max = vec![cfg.pilot_power_max[0]; k];
        for (key, value) in per_device {
            let parsed = parse_device_list(&value, k)
                .map_err(|e| Error::Config(format!("{key}: {e}")))?;
            match key.as_str() {
                "dep" => cfg.dep = parsed,
                "rate_req" => cfg.rate_req = parsed,
                "weights" => cfg.weights = parsed,
                "pilot_power_max" => cfg.pilot_power_max = parsed,
                _ => unreachable!(),
            }
        }
        if let Some(l) = blocklength_key {
            let derived = cfg.blocklength() as f64;
            if (l - derived).abs() > 0.5 {
                return Err(Error::Config(format!(
                    "blocklength {l} disagrees with bandwidth*frame_duration = {derived}"
                )));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Compact single-line echo of the scenario, used in run records.
    pub fn echo(&self) -> String {
        format!(
            "M={} N={} K={} L={} D={} T_h={} P_m={} scheme={} seed={}",
            self.num_aps,
            self.antennas_per_ap,
            self.num_devices,
            self.blocklength(),
            self.area_side,
            self.selection_threshold,
            self.ap_power_max,
            self.scheme,
            self.rng_seed
        )
    }
}

fn parse_device_list(value: &str, k: usize) -> std::result::Result<Vec<f64>, String> {
    let parts: Vec<&str> = value.split(',').map(str::trim).filter(|s| !s.is_empty()).collect();
    let nums: Vec<f64> = parts
        .iter()
        .map(|p| p.parse::<f64>().map_err(|_| format!("'{p}' is not a number")))
        .collect::<std::result::Result<_, _>>()?;
    match nums.len() {
        1 => Ok(vec![nums[0]; k]),
        n if n == k => Ok(nums),
        n => Err(format!("expected 1 or {k} values, got {n}")),
    }
}
