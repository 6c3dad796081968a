//! Gated Geiger-mode avalanche photodiode.
//!
//! A gate registers at most once. Photon arrivals and dark counts within a
//! gate are independent Poisson streams, so the gate fires with probability
//! `1 - exp(-(k·m + R_dark·t_gate))`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::sync_scan::SyncConfig;

/// Frame period must exceed dead time by this factor for dead time to be ignored.
pub const DEFAULT_DEAD_TIME_FACTOR: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorParams {
    pub dark_rate_hz: f64,
    pub quantum_efficiency: f64,
    pub dead_time_s: f64,
    pub gate_width_s: f64,
}

impl DetectorParams {
    pub fn new(
        dark_rate_hz: f64,
        quantum_efficiency: f64,
        dead_time_s: f64,
        gate_width_s: f64,
    ) -> Result<Self> {
        let p = Self {
            dark_rate_hz,
            quantum_efficiency,
            dead_time_s,
            gate_width_s,
        };
        p.validate()?;
        Ok(p)
    }

    /// id210-class detector: 40 Hz dark counts, 25 % efficiency, 10 µs dead time, 2 ns gate.
    pub fn id210() -> Self {
        Self {
            dark_rate_hz: 40.0,
            quantum_efficiency: 0.25,
            dead_time_s: 10e-6,
            gate_width_s: 2e-9,
        }
    }

    /// id230-class detector: 50 Hz dark counts, 25 % efficiency, 10 µs dead time, 2 ns gate.
    pub fn id230() -> Self {
        Self {
            dark_rate_hz: 50.0,
            ..Self::id210()
        }
    }

    /// Unit efficiency, no dark counts.
    pub fn ideal() -> Self {
        Self {
            dark_rate_hz: 0.0,
            quantum_efficiency: 1.0,
            dead_time_s: 0.0,
            gate_width_s: 2e-9,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dark_rate_hz.is_finite() && self.dark_rate_hz >= 0.0) {
            return Err(invalid(format!(
                "dark rate must be >= 0, got {}",
                self.dark_rate_hz
            )));
        }
        if !(0.0..=1.0).contains(&self.quantum_efficiency) {
            return Err(invalid(format!(
                "quantum efficiency must lie in [0, 1], got {}",
                self.quantum_efficiency
            )));
        }
        if !(self.dead_time_s.is_finite() && self.dead_time_s >= 0.0) {
            return Err(invalid(format!(
                "dead time must be >= 0, got {}",
                self.dead_time_s
            )));
        }
        if !(self.gate_width_s.is_finite() && self.gate_width_s > 0.0) {
            return Err(invalid(format!(
                "gate width must be > 0, got {}",
                self.gate_width_s
            )));
        }
        Ok(())
    }

    /// Expected dark counts in one gate.
    pub fn dark_mean_per_gate(&self) -> f64 {
        self.dark_rate_hz * self.gate_width_s
    }

    /// Probability that dark counts alone fire a gate.
    pub fn dark_probability(&self) -> f64 {
        -(-self.dark_mean_per_gate()).exp_m1()
    }

    /// Probability that photons alone fire a gate.
    pub fn photon_probability(&self, mean_photons_incident: f64) -> f64 {
        -(-self.quantum_efficiency * mean_photons_incident).exp_m1()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateCause {
    Photon,
    Dark,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GateOutcome {
    pub registered: bool,
    pub cause: GateCause,
}

impl GateOutcome {
    pub const EMPTY: GateOutcome = GateOutcome {
        registered: false,
        cause: GateCause::None,
    };
}

pub fn registration_probability(
    mean_photons_incident: f64,
    params: &DetectorParams,
) -> Result<f64> {
    if !(mean_photons_incident >= 0.0) {
        return Err(invalid(format!(
            "incident mean photon number must be >= 0, got {mean_photons_incident}"
        )));
    }
    let mu = params.quantum_efficiency * mean_photons_incident + params.dark_mean_per_gate();
    Ok(-(-mu).exp_m1())
}

/// Samples one gate. Two uniforms are drawn on every call (photon first,
/// then dark) so runs that differ only in signal level stay aligned.
pub fn sample_gate<R: Rng + ?Sized>(
    mean_photons_incident: f64,
    params: &DetectorParams,
    rng: &mut R,
) -> GateOutcome {
    sample_gate_with(
        params.photon_probability(mean_photons_incident),
        params.dark_probability(),
        rng,
    )
}

/// [`sample_gate`] with the photon and dark firing probabilities precomputed.
#[inline]
pub fn sample_gate_with<R: Rng + ?Sized>(p_photon: f64, p_dark: f64, rng: &mut R) -> GateOutcome {
    let u_photon: f64 = rng.gen();
    let u_dark: f64 = rng.gen();
    if u_photon < p_photon {
        GateOutcome {
            registered: true,
            cause: GateCause::Photon,
        }
    } else if u_dark < p_dark {
        GateOutcome {
            registered: true,
            cause: GateCause::Dark,
        }
    } else {
        GateOutcome::EMPTY
    }
}

pub fn dead_time_ignorable(sync: &SyncConfig, params: &DetectorParams) -> bool {
    dead_time_ignorable_with_factor(sync, params, DEFAULT_DEAD_TIME_FACTOR)
}

/// One interval is polled per frame, so the detector recovers between polls
/// when the frame period is at least `factor` dead times.
pub fn dead_time_ignorable_with_factor(
    sync: &SyncConfig,
    params: &DetectorParams,
    factor: f64,
) -> bool {
    sync.frame_period_s >= factor * params.dead_time_s
}
