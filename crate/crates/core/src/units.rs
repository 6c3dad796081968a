//! Physical constants, dB arithmetic and fiber propagation primitives.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Planck constant in J·s, at the precision used for the link model.
pub const PLANCK_CONSTANT: f64 = 6.62e-34;

/// Speed of light in vacuum, m/s.
pub const VACUUM_LIGHT_SPEED: f64 = 299_792_458.0;

/// Group velocity in standard single-mode fiber (n ≈ 1.49).
pub const DEFAULT_GROUP_VELOCITY: f64 = 2.01e8;

/// Attenuation of standard single-mode fiber at 1550 nm.
pub const DEFAULT_ATTENUATION_DB_PER_KM: f64 = 0.2;

pub const DEFAULT_WAVELENGTH_NM: f64 = 1550.0;

/// The quantum channel between the two stations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FiberChannel {
    pub length_m: f64,
    #[serde(default = "default_attenuation")]
    pub attenuation_db_per_km: f64,
    #[serde(default = "default_group_velocity")]
    pub group_velocity_m_per_s: f64,
    #[serde(default = "default_wavelength")]
    pub wavelength_nm: f64,
}

fn default_attenuation() -> f64 {
    DEFAULT_ATTENUATION_DB_PER_KM
}

fn default_group_velocity() -> f64 {
    DEFAULT_GROUP_VELOCITY
}

fn default_wavelength() -> f64 {
    DEFAULT_WAVELENGTH_NM
}

impl FiberChannel {
    pub fn new(
        length_m: f64,
        attenuation_db_per_km: f64,
        group_velocity_m_per_s: f64,
        wavelength_nm: f64,
    ) -> Result<Self> {
        let channel = Self {
            length_m,
            attenuation_db_per_km,
            group_velocity_m_per_s,
            wavelength_nm,
        };
        channel.validate()?;
        Ok(channel)
    }

    /// Standard fiber at 1550 nm with the given length.
    pub fn standard(length_m: f64) -> Result<Self> {
        Self::new(
            length_m,
            DEFAULT_ATTENUATION_DB_PER_KM,
            DEFAULT_GROUP_VELOCITY,
            DEFAULT_WAVELENGTH_NM,
        )
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.length_m.is_finite() && self.length_m >= 0.0) {
            return Err(invalid(format!(
                "fiber length must be >= 0, got {}",
                self.length_m
            )));
        }
        if !(self.attenuation_db_per_km.is_finite() && self.attenuation_db_per_km >= 0.0) {
            return Err(invalid(format!(
                "fiber attenuation must be >= 0 dB/km, got {}",
                self.attenuation_db_per_km
            )));
        }
        let v = self.group_velocity_m_per_s;
        if !(v.is_finite() && v > 0.0 && v < VACUUM_LIGHT_SPEED) {
            return Err(invalid(format!(
                "group velocity must lie in (0, c), got {v} m/s"
            )));
        }
        if !(self.wavelength_nm.is_finite() && self.wavelength_nm > 0.0) {
            return Err(invalid(format!(
                "wavelength must be > 0, got {} nm",
                self.wavelength_nm
            )));
        }
        Ok(())
    }

    /// Same fiber, different length.
    pub fn with_length(&self, length_m: f64) -> Result<Self> {
        let mut out = *self;
        out.length_m = length_m;
        out.validate()?;
        Ok(out)
    }

    /// One-way fiber loss in dB.
    pub fn one_way_loss_db(&self) -> f64 {
        self.length_m / 1000.0 * self.attenuation_db_per_km
    }

    /// Propagation time over `distance_m` of this fiber.
    pub fn transit_time(&self, distance_m: f64) -> f64 {
        distance_m / self.group_velocity_m_per_s
    }
}

pub fn dbm_to_watts(power_dbm: f64) -> Result<f64> {
    if !power_dbm.is_finite() {
        return Err(invalid(format!(
            "power must be finite, got {power_dbm} dBm"
        )));
    }
    Ok(1e-3 * 10f64.powf(power_dbm / 10.0))
}

pub fn watts_to_dbm(power_w: f64) -> Result<f64> {
    if !(power_w.is_finite() && power_w > 0.0) {
        return Err(invalid(format!("power must be positive, got {power_w} W")));
    }
    Ok(10.0 * (power_w / 1e-3).log10())
}

/// Linear transmission of a loss given in dB. Gains are rejected.
pub fn db_loss_to_fraction(loss_db: f64) -> Result<f64> {
    if !loss_db.is_finite() || loss_db < 0.0 {
        return Err(invalid(format!(
            "loss must be finite and >= 0 dB, got {loss_db}"
        )));
    }
    Ok(10f64.powf(-loss_db / 10.0))
}

/// Inverse of [`db_loss_to_fraction`].
pub fn fraction_to_db_loss(fraction: f64) -> Result<f64> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(invalid(format!(
            "transmission must lie in (0, 1], got {fraction}"
        )));
    }
    Ok(-10.0 * fraction.log10())
}

/// Photon energy `h·v/λ` evaluated with the in-fiber group velocity.
pub fn photon_energy(channel: &FiberChannel) -> f64 {
    PLANCK_CONSTANT * channel.group_velocity_m_per_s / (channel.wavelength_nm * 1e-9)
}

/// Time for a pulse to reach the far station and return: `2L/v`.
pub fn round_trip_period(channel: &FiberChannel) -> f64 {
    2.0 * channel.length_m / channel.group_velocity_m_per_s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rel(a: f64, b: f64) -> f64 {
        ((a - b) / b).abs()
    }

    #[test]
    fn dbm_examples() {
        assert!(rel(dbm_to_watts(0.0).unwrap(), 1.0e-3) < 1e-15);
        assert!(rel(dbm_to_watts(-30.0).unwrap(), 1.0e-6) < 1e-15);
        // 1e-3 * 10^(-4.83) by hand: 1.4791e-8
        assert!(rel(dbm_to_watts(-48.3).unwrap(), 1.479_108_388e-8) < 1e-9);
        assert!(dbm_to_watts(f64::NAN).is_err());
        assert!(dbm_to_watts(f64::INFINITY).is_err());
    }

    #[test]
    fn loss_examples() {
        assert_eq!(db_loss_to_fraction(0.0).unwrap(), 1.0);
        assert!(rel(db_loss_to_fraction(3.0).unwrap(), 0.501_187_233_6) < 1e-9);
        assert!(rel(db_loss_to_fraction(47.7).unwrap(), 1.698_243_652e-5) < 1e-9);
        assert!(db_loss_to_fraction(-0.1).is_err());
    }

    #[test]
    fn photon_energy_examples() {
        let ch = FiberChannel::standard(0.0).unwrap();
        // 6.62e-34 * 2.01e8 / 1550e-9
        assert!(rel(photon_energy(&ch), 8.584_645_161e-20) < 1e-9);
        let half = FiberChannel::new(0.0, 0.2, 2.01e8, 775.0).unwrap();
        assert!(rel(photon_energy(&half), 1.716_929_032e-19) < 1e-9);
        let doubled = FiberChannel::new(0.0, 0.2, 2.01e8, 3100.0).unwrap();
        assert!(rel(photon_energy(&doubled), photon_energy(&ch) / 2.0) < 1e-15);
    }

    #[test]
    fn round_trip_examples() {
        let ch = FiberChannel::new(100e3, 0.2, 2.0e8, 1550.0).unwrap();
        assert_eq!(round_trip_period(&ch), 1.0e-3);
        assert_eq!(round_trip_period(&ch.with_length(0.0).unwrap()), 0.0);
        let paper = FiberChannel::standard(25_732.0).unwrap();
        assert!(rel(round_trip_period(&paper), 2.560_398e-4) < 1e-6);
    }

    #[test]
    fn channel_validation() {
        assert!(FiberChannel::new(-1.0, 0.2, 2e8, 1550.0).is_err());
        assert!(FiberChannel::new(1.0, -0.2, 2e8, 1550.0).is_err());
        assert!(FiberChannel::new(1.0, 0.2, VACUUM_LIGHT_SPEED, 1550.0).is_err());
        assert!(FiberChannel::new(1.0, 0.2, 0.0, 1550.0).is_err());
        assert!(FiberChannel::new(1.0, 0.2, 2e8, 0.0).is_err());
    }

    mod props {
        use super::super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn dbm_round_trip(dbm in -120.0f64..30.0) {
                let back = watts_to_dbm(dbm_to_watts(dbm).unwrap()).unwrap();
                prop_assert!((back - dbm).abs() <= 1e-12 * dbm.abs().max(1.0));
            }

            #[test]
            fn losses_add_in_db(a in 0.0f64..80.0, b in 0.0f64..80.0) {
                let joint = db_loss_to_fraction(a + b).unwrap();
                let split = db_loss_to_fraction(a).unwrap() * db_loss_to_fraction(b).unwrap();
                prop_assert!(((joint - split) / joint).abs() <= 1e-12);
            }

            #[test]
            fn energy_homogeneity(scale in 0.1f64..10.0, lambda in 400.0f64..2000.0) {
                let base = FiberChannel::new(0.0, 0.2, 1.5e8, lambda).unwrap();
                let e0 = photon_energy(&base);
                let longer = FiberChannel { wavelength_nm: lambda * scale, ..base };
                prop_assert!((photon_energy(&longer) * scale / e0 - 1.0).abs() < 1e-12);
                let faster = FiberChannel { group_velocity_m_per_s: 1.5e8 * scale.min(1.99), ..base };
                prop_assert!((photon_energy(&faster) / (e0 * scale.min(1.99)) - 1.0).abs() < 1e-12);
            }
        }
    }
}
