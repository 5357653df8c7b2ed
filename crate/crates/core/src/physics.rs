//! Wireless and CPU physics: achievable rate, transmission and computation
//! time, and energy.
//!
//! All functions are pure given an rng handle and safe for concurrent use
//! with independent rng streams.

use rand::Rng;
use rand_distr::{Distribution, Exp};
use thiserror::Error;

use crate::config::SystemConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum PhysicsError {
    /// The device cannot transmit at a nonpositive rate; the caller must
    /// have pruned it.
    #[error("transmission at zero rate")]
    ZeroRate,
}

/// One device's channel realization for a round.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChannelDraw {
    /// Squared channel gain |g|^2.
    pub gain_sq: f64,
    /// Large-scale mean of |g|^2.
    pub beta: f64,
}

/// Realized per-round physics for one transmitting device.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhysicsOutcome {
    /// Uplink rate in bits/s.
    pub rate: f64,
    /// Transmission time in s.
    pub t_tr: f64,
    /// Computation time in s.
    pub t_cmp: f64,
    /// Computation energy in J.
    pub e_cmp: f64,
    /// Transmission energy in J.
    pub e_tr: f64,
}

impl PhysicsOutcome {
    /// Assembles the full outcome for a device computing at `f` and
    /// transmitting on a bandwidth fraction `rho` with power `p_tx` over a
    /// channel with squared gain `gain_sq`.
    pub fn realized(
        f: f64,
        rho: f64,
        p_tx: f64,
        gain_sq: f64,
        cfg: &SystemConfig,
    ) -> Result<Self, PhysicsError> {
        let rate = achievable_rate(rho, p_tx, gain_sq, cfg);
        let (t_tr, e_tr) = transmission(rate, p_tx, cfg)?;
        Ok(Self {
            rate,
            t_tr,
            t_cmp: compute_time(f, cfg),
            e_cmp: compute_energy(f, cfg),
            e_tr,
        })
    }
}

/// Energy in J for one local update computed at CPU frequency `f`.
pub fn compute_energy(f: f64, cfg: &SystemConfig) -> f64 {
    cfg.power_coeff * cfg.cycles_c * f * f
}

/// Time in s for one local update computed at CPU frequency `f`.
pub fn compute_time(f: f64, cfg: &SystemConfig) -> f64 {
    cfg.cycles_c / f
}

/// Achievable uplink rate in bits/s on a bandwidth fraction `rho`.
///
/// Returns 0 when `gain_sq` is 0.
pub fn achievable_rate(rho: f64, p_tx: f64, gain_sq: f64, cfg: &SystemConfig) -> f64 {
    let band = rho * cfg.bandwidth;
    band * (1.0 + p_tx * gain_sq / (band * cfg.noise_density)).log2()
}

/// Transmission time and energy for one model update at the given rate.
pub fn transmission(rate: f64, p_tx: f64, cfg: &SystemConfig) -> Result<(f64, f64), PhysicsError> {
    if rate <= 0.0 {
        return Err(PhysicsError::ZeroRate);
    }
    let t_tr = cfg.update_bits / rate;
    Ok((t_tr, p_tx * t_tr))
}

/// Conservative pre-training rate estimate for a scheduled set of size
/// `n_sched`, using expected channel statistics and the configured margin.
pub fn surrogate_rate(n_sched: usize, cfg: &SystemConfig) -> f64 {
    let n = n_sched as f64;
    let snr = cfg.eff_rx_power_p0 * n / (cfg.bandwidth * cfg.noise_density);
    cfg.rate_margin * cfg.bandwidth / n * (1.0 + snr).log2()
}

/// Transmit power for a device with large-scale fading `beta`, chosen so the
/// expected received SNR is the same for all devices.
pub fn tx_power_for(beta: f64, cfg: &SystemConfig) -> f64 {
    cfg.eff_rx_power_p0 / beta
}

/// Draws a squared channel gain with mean `beta` (Rayleigh fading, so the
/// squared gain is exponential).
pub fn draw_channel<R: Rng + ?Sized>(beta: f64, rng: &mut R) -> f64 {
    debug_assert!(beta > 0.0);
    Exp::new(1.0 / beta).expect("beta must be positive").sample(rng)
}
