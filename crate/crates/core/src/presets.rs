//! Named configurations carrying the published hardware constants.

use serde::{Deserialize, Serialize};

use crate::attack::ScenarioConfig;
use crate::detector::DetectorParams;
use crate::error::{config, Result};
use crate::sync_scan::{SignalPlacement, SyncConfig};

pub const DETECTOR_PRESETS: &[&str] = &["id210", "id230", "ideal"];
pub const SCAN_PRESETS: &[&str] = &["clavis2-defaults", "id210", "id230", "saturated"];
pub const SCENARIO_PRESETS: &[&str] = &["clean", "paper", "countermeasure"];

pub fn detector(name: &str) -> Result<DetectorParams> {
    match name {
        "id210" => Ok(DetectorParams::id210()),
        "id230" => Ok(DetectorParams::id230()),
        "ideal" => Ok(DetectorParams::ideal()),
        other => Err(unknown("detector", other, DETECTOR_PRESETS)),
    }
}

/// Inputs of one Monte-Carlo scan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScanSetup {
    pub sync: SyncConfig,
    pub detector: DetectorParams,
    /// Mean photons per sync pulse at the detector.
    pub mean_photons: f64,
    /// Interval holding the pulse, centred; ignored when `onset_s` is set.
    #[serde(default)]
    pub signal_interval: Option<u32>,
    /// Pulse start within the frame, seconds.
    #[serde(default)]
    pub onset_s: Option<f64>,
}

impl ScanSetup {
    pub fn placement(&self) -> SignalPlacement {
        match self.onset_s {
            Some(onset_s) => SignalPlacement {
                onset_s,
                mean_photoelectrons: self.mean_photons,
            },
            None => {
                let idx = self.signal_interval.unwrap_or(self.sync.n_intervals / 2);
                SignalPlacement::centred(&self.sync, idx, self.mean_photons)
            }
        }
    }
}

pub fn scan(name: &str) -> Result<ScanSetup> {
    let sync = SyncConfig::clavis2_defaults();
    let setup = |detector: DetectorParams, mean_photons: f64| ScanSetup {
        sync,
        detector,
        mean_photons,
        signal_interval: None,
        onset_s: None,
    };
    match name {
        "clavis2-defaults" | "id230" => Ok(setup(DetectorParams::id230(), 0.1)),
        "id210" => Ok(setup(DetectorParams::id210(), 0.1)),
        "saturated" => Ok(setup(DetectorParams::id230(), 1e3)),
        other => Err(unknown("scan", other, SCAN_PRESETS)),
    }
}

pub fn scenario(name: &str) -> Result<ScenarioConfig> {
    match name {
        "clean" => Ok(ScenarioConfig::clean()),
        "paper" => Ok(ScenarioConfig::tapped()),
        "countermeasure" => Ok(ScenarioConfig::countermeasure(0.3)),
        other => Err(unknown("scenario", other, SCENARIO_PRESETS)),
    }
}

fn unknown(kind: &str, name: &str, known: &[&str]) -> crate::Error {
    config(format!(
        "unknown {kind} preset '{name}' (known: {})",
        known.join(", ")
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_listed_preset_resolves() {
        for n in DETECTOR_PRESETS {
            detector(n).unwrap().validate().unwrap();
        }
        for n in SCAN_PRESETS {
            let s = scan(n).unwrap();
            s.placement().validate(&s.sync).unwrap();
        }
        for n in SCENARIO_PRESETS {
            scenario(n).unwrap().validate().unwrap();
        }
        assert!(scan("nope").is_err());
    }

    #[test]
    fn published_constants() {
        let d = detector("id230").unwrap();
        assert_eq!((d.dark_rate_hz, d.quantum_efficiency), (50.0, 0.25));
        assert_eq!(detector("id210").unwrap().dark_rate_hz, 40.0);
        let s = scan("clavis2-defaults").unwrap();
        assert_eq!(s.sync.selection_size, 800);
        assert_eq!(s.sync.interval_width_s, 2e-9);
        assert_eq!(s.sync.pulse_width_s, 1e-9);
    }
}
