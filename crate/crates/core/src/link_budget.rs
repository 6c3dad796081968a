//! Mean photon number of the synchronization pulse after the two-pass
//! round trip, and the attenuation needed to bring it to a target level.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::units::{db_loss_to_fraction, dbm_to_watts, photon_energy, FiberChannel};

/// Lumped loss of the encoding station (attenuators, modulator, Faraday mirror).
pub const DEFAULT_STATION_LOSS_DB: f64 = 47.7;

/// Round-trip splice and connector losses at coil junctions, folded into `extra_db`.
pub const DEFAULT_JUNCTION_LOSS_DB: f64 = 2.0;

/// Pulse duration shared by all calibration stages.
pub const CALIBRATION_PULSE_WIDTH_S: f64 = 1e-9;

/// One calibration stage of the transmitter: average optical power at a
/// fixed repetition rate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageParams {
    pub average_power_dbm: f64,
    pub repetition_rate_hz: f64,
    pub pulse_width_s: f64,
}

impl StageParams {
    pub fn new(
        average_power_dbm: f64,
        repetition_rate_hz: f64,
        pulse_width_s: f64,
    ) -> Result<Self> {
        let stage = Self {
            average_power_dbm,
            repetition_rate_hz,
            pulse_width_s,
        };
        stage.validate()?;
        Ok(stage)
    }

    /// The three measured calibration stages, strongest first.
    pub fn calibration_stages() -> [StageParams; 3] {
        [
            StageParams {
                average_power_dbm: -48.3,
                repetition_rate_hz: 800.0,
                pulse_width_s: CALIBRATION_PULSE_WIDTH_S,
            },
            StageParams {
                average_power_dbm: -55.8,
                repetition_rate_hz: 800.0,
                pulse_width_s: CALIBRATION_PULSE_WIDTH_S,
            },
            StageParams {
                average_power_dbm: -24.2,
                repetition_rate_hz: 5e6,
                pulse_width_s: CALIBRATION_PULSE_WIDTH_S,
            },
        ]
    }

    pub fn validate(&self) -> Result<()> {
        if !self.average_power_dbm.is_finite() {
            return Err(invalid("stage power must be finite"));
        }
        if !(self.repetition_rate_hz.is_finite() && self.repetition_rate_hz > 0.0) {
            return Err(invalid(format!(
                "repetition rate must be > 0, got {}",
                self.repetition_rate_hz
            )));
        }
        if !(self.pulse_width_s.is_finite() && self.pulse_width_s > 0.0) {
            return Err(invalid(format!(
                "pulse width must be > 0, got {}",
                self.pulse_width_s
            )));
        }
        if self.pulse_width_s * self.repetition_rate_hz > 1.0 {
            return Err(invalid("duty cycle exceeds unity"));
        }
        Ok(())
    }

    /// Energy per pulse, J. Power is read as average power.
    pub fn pulse_energy(&self) -> Result<f64> {
        Ok(dbm_to_watts(self.average_power_dbm)? / self.repetition_rate_hz)
    }
}

/// Loss along the two-pass path. The fiber is traversed twice.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathLoss {
    pub station_loss_db: f64,
    pub fiber_one_way_db: f64,
    #[serde(default)]
    pub extra_db: f64,
}

impl PathLoss {
    pub fn new(station_loss_db: f64, fiber_one_way_db: f64, extra_db: f64) -> Result<Self> {
        let loss = Self {
            station_loss_db,
            fiber_one_way_db,
            extra_db,
        };
        loss.validate()?;
        Ok(loss)
    }

    /// Loss for `channel` with its one-way fiber attenuation filled in.
    pub fn for_channel(
        station_loss_db: f64,
        channel: &FiberChannel,
        extra_db: f64,
    ) -> Result<Self> {
        Self::new(station_loss_db, channel.one_way_loss_db(), extra_db)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("station_loss_db", self.station_loss_db),
            ("fiber_one_way_db", self.fiber_one_way_db),
            ("extra_db", self.extra_db),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(invalid(format!("{name} must be >= 0 dB, got {v}")));
            }
        }
        Ok(())
    }

    pub fn total_db(&self) -> f64 {
        self.station_loss_db + 2.0 * self.fiber_one_way_db + self.extra_db
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PulseClass {
    Multiphoton,
    Photon,
    SinglePhoton,
}

impl PulseClass {
    pub fn as_str(&self) -> &'static str {
        match self {
            PulseClass::Multiphoton => "multiphoton",
            PulseClass::Photon => "photon",
            PulseClass::SinglePhoton => "single_photon",
        }
    }
}

/// Mean photons per pulse arriving back at the transmitter's detector.
pub fn mean_photons_per_pulse(
    stage: &StageParams,
    loss: &PathLoss,
    channel: &FiberChannel,
) -> Result<f64> {
    stage.validate()?;
    loss.validate()?;
    channel.validate()?;
    let photons_emitted = stage.pulse_energy()? / photon_energy(channel);
    Ok(photons_emitted * db_loss_to_fraction(loss.total_db())?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub length_m: f64,
    pub mean_photons: f64,
}

/// Mean photon number versus channel length for one stage. Lengths must be
/// strictly ascending; the fiber loss of each point follows `channel_template`.
pub fn photon_curve(
    stage: &StageParams,
    station_loss_db: f64,
    extra_db: f64,
    channel_template: &FiberChannel,
    lengths_m: &[f64],
) -> Result<Vec<CurvePoint>> {
    if lengths_m.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(invalid("lengths must be strictly ascending"));
    }
    lengths_m
        .iter()
        .map(|&length_m| {
            let channel = channel_template.with_length(length_m)?;
            let loss = PathLoss::for_channel(station_loss_db, &channel, extra_db)?;
            Ok(CurvePoint {
                length_m,
                mean_photons: mean_photons_per_pulse(stage, &loss, &channel)?,
            })
        })
        .collect()
}

/// `m < 1` single-photon, `1 <= m < 10` photon, `m >= 10` multiphoton.
pub fn classify_pulse(m: f64) -> Result<PulseClass> {
    if !(m >= 0.0) {
        return Err(invalid(format!("mean photon number must be >= 0, got {m}")));
    }
    Ok(if m < 1.0 {
        PulseClass::SinglePhoton
    } else if m < 10.0 {
        PulseClass::Photon
    } else {
        PulseClass::Multiphoton
    })
}

/// Attenuation, dB, to add to `extra_db` so the pulse arrives with `m_target`.
pub fn solve_attenuation_for_target(
    stage: &StageParams,
    loss: &PathLoss,
    channel: &FiberChannel,
    m_target: f64,
) -> Result<f64> {
    let current = mean_photons_per_pulse(stage, loss, channel)?;
    attenuation_for_ratio(current, m_target)
}

/// `10·log10(current/target)`, rejecting targets above the current level.
pub fn attenuation_for_ratio(current: f64, target: f64) -> Result<f64> {
    if !(target > 0.0) || !target.is_finite() {
        return Err(invalid(format!(
            "target mean photon number must be > 0, got {target}"
        )));
    }
    if target > current {
        return Err(Error::InfeasibleTarget {
            target,
            available: current,
        });
    }
    Ok(10.0 * (current / target).log10())
}
