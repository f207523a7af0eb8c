//! Cell-free massive MIMO downlink simulator and power-allocation
//! optimizer for short-packet (URLLC) service.
//!
//! Distributed multi-antenna APs jointly serve single-antenna devices
//! over user-centric serving sets. The crate provides:
//!
//! - scenario construction (grid deployment, three-slope path loss,
//!   noise-normalized gains, threshold-based AP selection) in
//!   [`sysmodel`],
//! - Rayleigh channel draws and MMSE estimation in [`channel`],
//! - the finite-blocklength rate kernel and its inverses in [`fbl`],
//! - closed-form SINR lower bounds for MRT/FZF/LZF precoding plus a
//!   Monte Carlo decomposition oracle in [`sinr`],
//! - a geometric-programming barrier solver in [`gp`],
//! - the iterative weighted sum-rate power optimizer and its equal-power
//!   baseline in [`optimizer`].
//!
//! Everything is deterministic under explicit seeds; Monte Carlo draws
//! use indexed substreams so results are independent of thread count.

pub mod channel;
pub mod config;
pub mod error;
pub mod fbl;
pub mod gp;
pub mod optimizer;
pub mod sinr;
pub mod sysmodel;

pub use config::{Scheme, SystemConfig};
pub use error::{Error, Result};
pub use sinr::PowerAllocation;
pub use sysmodel::{NetworkRealization, Scenario, ServingSets};
