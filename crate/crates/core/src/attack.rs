//! In-line fiber couplers, attacker timing and interference scenarios.
//!
//! Two passive couplers near the transmitter tap a fraction of every pulse in
//! both directions. Forward pulses are bright; the attacker needs the
//! reflected pulse to time the round trip and infer the channel length.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution};
use serde::{Deserialize, Serialize};

use crate::analytics::{pd_full, DimensionlessParams};
use crate::detector::{registration_probability, DetectorParams};
use crate::error::{config, invalid, Error, Result};
use crate::link_budget::{
    attenuation_for_ratio, mean_photons_per_pulse, PathLoss, StageParams, DEFAULT_JUNCTION_LOSS_DB,
    DEFAULT_STATION_LOSS_DB,
};
use crate::stats::trial_rng;
use crate::sync_scan::{Decision, Scanner, SignalPlacement, SyncConfig};
use crate::units::{db_loss_to_fraction, photon_energy, round_trip_period, FiberChannel};

/// QBER above which key distillation aborts.
pub const QBER_THRESHOLD: f64 = 0.11;

pub const DEFAULT_TIMING_RESOLUTION_S: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CouplerSpec {
    pub through_fraction: f64,
    pub tap_fraction: f64,
    #[serde(default)]
    pub excess_loss_db: f64,
    pub position_m: f64,
}

impl CouplerSpec {
    pub fn new(
        through_fraction: f64,
        tap_fraction: f64,
        excess_loss_db: f64,
        position_m: f64,
    ) -> Result<Self> {
        let c = Self {
            through_fraction,
            tap_fraction,
            excess_loss_db,
            position_m,
        };
        c.validate()?;
        Ok(c)
    }

    /// 70/30 splitter.
    pub fn kc1(position_m: f64) -> Self {
        Self {
            through_fraction: 0.7,
            tap_fraction: 0.3,
            excess_loss_db: 0.0,
            position_m,
        }
    }

    /// 90/10 splitter.
    pub fn kc2(position_m: f64) -> Self {
        Self {
            through_fraction: 0.9,
            tap_fraction: 0.1,
            excess_loss_db: 0.0,
            position_m,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.through_fraction > 0.0 && self.through_fraction <= 1.0) {
            return Err(invalid(format!(
                "through fraction must lie in (0, 1], got {}",
                self.through_fraction
            )));
        }
        if !(self.tap_fraction >= 0.0 && self.tap_fraction < 1.0) {
            return Err(invalid(format!(
                "tap fraction must lie in [0, 1), got {}",
                self.tap_fraction
            )));
        }
        if self.through_fraction + self.tap_fraction > 1.0 + 1e-12 {
            return Err(invalid("through + tap fractions exceed 1"));
        }
        if !(self.excess_loss_db.is_finite() && self.excess_loss_db >= 0.0) {
            return Err(invalid("excess loss must be >= 0 dB"));
        }
        if !(self.position_m.is_finite() && self.position_m >= 0.0) {
            return Err(invalid("coupler position must be >= 0"));
        }
        Ok(())
    }

    fn excess_transmission(&self) -> f64 {
        10f64.powf(-self.excess_loss_db / 10.0)
    }
}

pub fn validate_couplers(couplers: &[CouplerSpec]) -> Result<()> {
    for c in couplers {
        c.validate()?;
    }
    if couplers
        .windows(2)
        .any(|w| !(w[0].position_m < w[1].position_m))
    {
        return Err(invalid("coupler positions must be strictly increasing"));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Forward,
    Reflected,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TapPass {
    pub m_through: f64,
    /// Tap means in the order the pulse meets the couplers.
    pub taps: Vec<f64>,
}

/// Passes a pulse of mean `m_in` through the couplers, in position order for
/// forward travel and reversed for the reflected pulse.
pub fn propagate_through_taps(
    m_in: f64,
    couplers: &[CouplerSpec],
    direction: Direction,
) -> Result<TapPass> {
    validate_couplers(couplers)?;
    if !(m_in.is_finite() && m_in >= 0.0) {
        return Err(invalid("input mean must be >= 0"));
    }
    let mut m = m_in;
    let mut taps = Vec::with_capacity(couplers.len());
    let step = |m: &mut f64, taps: &mut Vec<f64>, c: &CouplerSpec| {
        let excess = c.excess_transmission();
        taps.push(*m * c.tap_fraction * excess);
        *m *= c.through_fraction * excess;
    };
    match direction {
        Direction::Forward => couplers.iter().for_each(|c| step(&mut m, &mut taps, c)),
        Direction::Reflected => couplers
            .iter()
            .rev()
            .for_each(|c| step(&mut m, &mut taps, c)),
    }
    Ok(TapPass { m_through: m, taps })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TapObservation {
    pub arrival_time_s: f64,
    pub direction: Direction,
    pub mean_photons: f64,
    pub registered: bool,
}

/// Channel length from the forward and reflected passage times at one tap:
/// `tap + v·Δt/2`. `None` when either pulse went unregistered or the order is wrong.
pub fn attacker_estimate_length(
    forward: &TapObservation,
    reflected: &TapObservation,
    tap_position_m: f64,
    channel: &FiberChannel,
) -> Option<f64> {
    estimate_length_two_taps(forward, reflected, tap_position_m, tap_position_m, channel)
}

/// As [`attacker_estimate_length`] with the forward and reflected pulses
/// observed at different taps: `(p_f + p_r)/2 + v·Δt/2`.
pub fn estimate_length_two_taps(
    forward: &TapObservation,
    reflected: &TapObservation,
    forward_tap_m: f64,
    reflected_tap_m: f64,
    channel: &FiberChannel,
) -> Option<f64> {
    if !(forward.registered && reflected.registered) {
        return None;
    }
    if forward.direction != Direction::Forward || reflected.direction != Direction::Reflected {
        return None;
    }
    let dt = reflected.arrival_time_s - forward.arrival_time_s;
    if dt < 0.0 {
        return None;
    }
    Some(0.5 * (forward_tap_m + reflected_tap_m) + channel.group_velocity_m_per_s * dt / 2.0)
}

/// Timestamp as read by a time-to-digital converter of the given resolution.
pub fn quantize_time(t: f64, resolution_s: f64) -> f64 {
    if resolution_s <= 0.0 {
        return t;
    }
    (t / resolution_s).floor() * resolution_s
}

/// Probability that the attacker's own interval scan locks onto the tapped
/// pulse after accumulating `frames` frames.
pub fn attacker_detection_probability(
    m_at_tap: f64,
    attacker: &DetectorParams,
    frames: u32,
    n_intervals: u64,
) -> Result<f64> {
    attacker.validate()?;
    if !(m_at_tap.is_finite() && m_at_tap >= 0.0) {
        return Err(invalid("tap mean must be >= 0"));
    }
    let f = frames as f64;
    let noise_mean = f * attacker.dark_mean_per_gate();
    let p = DimensionlessParams::new(
        noise_mean,
        noise_mean + f * attacker.quantum_efficiency * m_at_tap,
        n_intervals,
    )?;
    Ok(pd_full(&p))
}

/// Probability that the tapped pulse yields at least one photoelectron in
/// `frames` frames, before any competition with noise.
pub fn signal_mass(m_at_tap: f64, attacker: &DetectorParams, frames: u32) -> f64 {
    -(-(frames as f64) * attacker.quantum_efficiency * m_at_tap).exp_m1()
}

/// Interference source injected at the second coupler's tap port toward the transmitter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InterferenceSpec {
    #[serde(default = "default_interference_width")]
    pub pulse_width_s: f64,
    pub rate_hz: f64,
    /// Seconds after the first lock.
    pub start_s: f64,
    pub duration_s: f64,
    /// Mean photons per interference pulse reaching the legitimate detector.
    #[serde(default = "default_interference_photons")]
    pub mean_photons: f64,
}

fn default_interference_width() -> f64 {
    1e-9
}

fn default_interference_photons() -> f64 {
    1e3
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Countermeasure {
    pub on: bool,
    /// Mean photons per sync pulse the encoding station aims for at the detector.
    #[serde(default = "default_target_m")]
    pub target_m: f64,
}

fn default_target_m() -> f64 {
    0.3
}

impl Default for Countermeasure {
    fn default() -> Self {
        Self {
            on: false,
            target_m: default_target_m(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub channel: FiberChannel,
    pub sync: SyncConfig,
    pub stage: StageParams,
    pub legit_detector: DetectorParams,
    pub attacker_detector: DetectorParams,
    #[serde(default)]
    pub couplers: Vec<CouplerSpec>,
    #[serde(default)]
    pub interference: Option<InterferenceSpec>,
    #[serde(default)]
    pub countermeasure: Countermeasure,
    #[serde(default = "default_station_loss")]
    pub station_loss_db: f64,
    #[serde(default = "default_extra_loss")]
    pub extra_db: f64,
    #[serde(default = "default_timing_resolution")]
    pub timing_resolution_s: f64,
    /// Sliding window of the resync monitor; defaults to the selection size.
    #[serde(default)]
    pub resync_window_frames: Option<u32>,
    #[serde(default = "default_monitor_duration")]
    pub monitor_duration_s: f64,
    #[serde(default = "default_attacker_frames")]
    pub attacker_frames: u32,
    /// QBER observed on the key exchange; only compared against the threshold.
    #[serde(default)]
    pub scenario_qber: f64,
    #[serde(default = "default_scan_attempts")]
    pub max_scan_attempts: u32,
    #[serde(default = "default_max_resyncs")]
    pub max_resyncs: u32,
}

fn default_station_loss() -> f64 {
    DEFAULT_STATION_LOSS_DB
}
fn default_extra_loss() -> f64 {
    DEFAULT_JUNCTION_LOSS_DB
}
fn default_timing_resolution() -> f64 {
    DEFAULT_TIMING_RESOLUTION_S
}
fn default_monitor_duration() -> f64 {
    20.0
}
fn default_attacker_frames() -> u32 {
    1
}
fn default_scan_attempts() -> u32 {
    3
}
fn default_max_resyncs() -> u32 {
    4
}

/// Channel length of the tapped experiment.
pub const PAPER_CHANNEL_LENGTH_M: f64 = 25_732.0;

impl ScenarioConfig {
    /// Untapped 25.7 km channel with the sync pulse attenuated to m = 0.3.
    pub fn clean() -> Self {
        let [stage, ..] = StageParams::calibration_stages();
        Self {
            channel: FiberChannel::standard(PAPER_CHANNEL_LENGTH_M).expect("valid channel"),
            sync: SyncConfig::clavis2_defaults(),
            stage,
            legit_detector: DetectorParams::id230(),
            attacker_detector: DetectorParams::id230(),
            couplers: Vec::new(),
            interference: None,
            countermeasure: Countermeasure {
                on: true,
                target_m: default_target_m(),
            },
            station_loss_db: DEFAULT_STATION_LOSS_DB,
            extra_db: DEFAULT_JUNCTION_LOSS_DB,
            timing_resolution_s: DEFAULT_TIMING_RESOLUTION_S,
            resync_window_frames: None,
            monitor_duration_s: default_monitor_duration(),
            attacker_frames: 1,
            scenario_qber: 0.0,
            max_scan_attempts: default_scan_attempts(),
            max_resyncs: default_max_resyncs(),
        }
    }

    /// 70/30 and 90/10 couplers at 100 m and 200 m, multiphoton calibration.
    pub fn tapped() -> Self {
        Self {
            couplers: vec![CouplerSpec::kc1(100.0), CouplerSpec::kc2(200.0)],
            countermeasure: Countermeasure::default(),
            ..Self::clean()
        }
    }

    /// Tapped channel with the sync pulse attenuated to `target_m`.
    pub fn countermeasure(target_m: f64) -> Self {
        Self {
            countermeasure: Countermeasure { on: true, target_m },
            ..Self::tapped()
        }
    }

    pub fn validate(&self) -> Result<Vec<String>> {
        self.channel.validate()?;
        let warnings = self.sync.validate()?;
        self.stage.validate()?;
        self.legit_detector.validate()?;
        self.attacker_detector.validate()?;
        validate_couplers(&self.couplers)?;
        if let Some(last) = self.couplers.last() {
            if last.position_m > self.channel.length_m {
                return Err(config("coupler lies beyond the end of the channel"));
            }
        }
        PathLoss::new(self.station_loss_db, 0.0, self.extra_db)?;
        if let Some(i) = &self.interference {
            if !(i.rate_hz > 0.0 && i.rate_hz.is_finite()) {
                return Err(config("interference rate must be > 0"));
            }
            if !(i.pulse_width_s > 0.0
                && i.mean_photons >= 0.0
                && i.start_s >= 0.0
                && i.duration_s >= 0.0)
            {
                return Err(config("interference timing and power must be non-negative"));
            }
            if i.start_s + i.duration_s > self.monitor_duration_s {
                return Err(config(
                    "interference window extends past the monitoring horizon",
                ));
            }
        }
        if self.countermeasure.on && !(self.countermeasure.target_m > 0.0) {
            return Err(config("countermeasure target must be > 0"));
        }
        if !(self.timing_resolution_s >= 0.0) {
            return Err(config("timing resolution must be >= 0"));
        }
        if !(0.0..=1.0).contains(&self.scenario_qber) {
            return Err(config("scenario QBER must lie in [0, 1]"));
        }
        if self.attacker_frames == 0 || self.max_scan_attempts == 0 {
            return Err(config("attacker_frames and max_scan_attempts must be >= 1"));
        }
        if self.resync_window_frames == Some(0) {
            return Err(config("resync window must be >= 1 frame"));
        }
        Ok(warnings)
    }

    pub fn resync_window(&self) -> u32 {
        self.resync_window_frames
            .unwrap_or(self.sync.selection_size)
    }
}

/// Mean photon numbers along the tapped two-pass path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathBudget {
    pub emitted: f64,
    /// Attenuation inserted at the encoding station, dB.
    pub inserted_attenuation_db: f64,
    pub forward_taps: Vec<f64>,
    pub reflected_taps: Vec<f64>,
    /// Mean photons per pulse at the legitimate detector.
    pub at_detector: f64,
    /// Same without any couplers in the line.
    pub at_detector_untapped: f64,
}

/// Propagates one sync pulse through the scenario geometry. The station
/// calibrates its attenuator against the untapped channel.
pub fn path_budget(cfg: &ScenarioConfig) -> Result<PathBudget> {
    let ch = &cfg.channel;
    let emitted = cfg.stage.pulse_energy()? / photon_energy(ch);
    let nominal_loss = PathLoss::for_channel(cfg.station_loss_db, ch, cfg.extra_db)?;
    let untapped = mean_photons_per_pulse(&cfg.stage, &nominal_loss, ch)?;
    let inserted_attenuation_db = if cfg.countermeasure.on {
        attenuation_for_ratio(untapped, cfg.countermeasure.target_m).map_err(|e| match e {
            Error::InfeasibleTarget { .. } => config(e.to_string()),
            other => other,
        })?
    } else {
        0.0
    };
    let fiber = |distance: f64| 10f64.powf(-ch.attenuation_db_per_km * distance / 1000.0 / 10.0);
    let station =
        db_loss_to_fraction(cfg.station_loss_db + cfg.extra_db + inserted_attenuation_db)?;

    let forward = propagate_through_taps(emitted, &cfg.couplers, Direction::Forward)?;
    let forward_taps: Vec<f64> = forward
        .taps
        .iter()
        .zip(&cfg.couplers)
        .map(|(m, c)| m * fiber(c.position_m))
        .collect();
    let returning = forward.m_through * fiber(ch.length_m) * station;
    let reflected = propagate_through_taps(returning, &cfg.couplers, Direction::Reflected)?;
    let reflected_taps: Vec<f64> = reflected
        .taps
        .iter()
        .zip(cfg.couplers.iter().rev())
        .map(|(m, c)| m * fiber(ch.length_m - c.position_m))
        .collect();
    let at_detector = reflected.m_through * fiber(ch.length_m);
    let at_detector_untapped = untapped * db_loss_to_fraction(inserted_attenuation_db)?;
    Ok(PathBudget {
        emitted,
        inserted_attenuation_db,
        forward_taps,
        reflected_taps,
        at_detector,
        at_detector_untapped,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LegitOutcome {
    Detected,
    Ambiguous,
    ResyncTriggered,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioReport {
    pub legit_sync_outcome: LegitOutcome,
    pub resync_count: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub attacker_length_estimate_m: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub attacker_length_error_m: Option<f64>,
    pub attacker_pd: f64,
    pub qber_gate_pass: bool,
    /// Whether the final lock sits on the pulse.
    pub legit_lock_correct: bool,
    pub legit_mean_photons: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub attacker_tap_mean_photons: Option<f64>,
    pub inserted_attenuation_db: f64,
    pub scan_attempts: u32,
    pub notes: Vec<String>,
}

const STREAM_SCANS: u64 = 0;
const STREAM_MONITOR: u64 = 1;
const STREAM_ATTACKER: u64 = 2;

/// Frames (counted from the first lock) that carry an interference pulse,
/// and the interval it lands in. Pulses keep a fixed frame phase during one
/// activation.
struct InterferencePlan {
    interval: u32,
    frames: Vec<u64>,
    p_register: f64,
}

impl InterferencePlan {
    fn new(
        spec: &InterferenceSpec,
        sync: &SyncConfig,
        det: &DetectorParams,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let phase: f64 = rng.gen_range(0.0..sync.frame_period_s);
        let interval = ((phase / sync.interval_width_s) as u32).min(sync.n_intervals - 1);
        let mut frames = Vec::new();
        let period = 1.0 / spec.rate_hz;
        let mut k = 0u64;
        loop {
            let t = spec.start_s + k as f64 * period;
            if t >= spec.start_s + spec.duration_s {
                break;
            }
            let frame = (t / sync.frame_period_s).floor() as u64;
            if frames.last() != Some(&frame) {
                frames.push(frame);
            }
            k += 1;
        }
        Ok(Self {
            interval,
            frames,
            p_register: registration_probability(spec.mean_photons, det)?,
        })
    }

    fn fires_in(&self, frame: u64) -> bool {
        self.frames.binary_search(&frame).is_ok()
    }

    fn pulses_between(&self, from: u64, to: u64) -> u64 {
        let lo = self.frames.partition_point(|&f| f < from);
        let hi = self.frames.partition_point(|&f| f < to);
        (hi - lo) as u64
    }
}

/// Runs a full scan, adding interference registrations for the frames in
/// which the interference interval is polled.
fn scan_once(
    scanner: &Scanner,
    interference: Option<&InterferencePlan>,
    start_frame: i64,
    rng: &mut ChaCha8Rng,
) -> Decision {
    let mut counts = scanner.sample(rng);
    if let Some(plan) = interference {
        let n = scanner.sync().selection_size as i64;
        let from = start_frame + plan.interval as i64 * n;
        let to = from + n;
        if to > 0 {
            let pulses = plan.pulses_between(from.max(0) as u64, to as u64);
            if pulses > 0 {
                let hits = (0..pulses)
                    .filter(|_| rng.gen::<f64>() < plan.p_register)
                    .count() as u32;
                if hits > 0 {
                    counts.extra.push((plan.interval, hits));
                }
            }
        }
    }
    counts.decide()
}

pub fn run_scenario(cfg: &ScenarioConfig, seed: u64) -> Result<ScenarioReport> {
    let mut notes = cfg.validate()?;
    let budget = path_budget(cfg)?;
    let sync = &cfg.sync;
    let ch = &cfg.channel;

    let onset = round_trip_period(ch) % sync.frame_period_s;
    let placement = SignalPlacement {
        onset_s: onset.min(sync.frame_period_s * (1.0 - 1e-15)),
        mean_photoelectrons: budget.at_detector,
    };
    let scanner = Scanner::new(sync, &placement, &cfg.legit_detector).map_err(|e| match e {
        Error::InvalidArgument(m) => config(m),
        other => other,
    })?;
    notes.extend(scanner.warnings().iter().cloned());

    let mut scan_rng = trial_rng(seed, STREAM_SCANS);
    let mut monitor_rng = trial_rng(seed, STREAM_MONITOR);
    let mut attacker_rng = trial_rng(seed, STREAM_ATTACKER);

    let interference = match &cfg.interference {
        Some(spec) => Some(InterferencePlan::new(
            spec,
            sync,
            &cfg.legit_detector,
            &mut monitor_rng,
        )?),
        None => None,
    };

    let scan_frames = sync.n_intervals as i64 * sync.selection_size as i64;
    // Initial lock completes at monitor frame 0.
    let (mut lock, mut attempts) = acquire(
        &scanner,
        None,
        -scan_frames,
        cfg.max_scan_attempts,
        &mut scan_rng,
        scan_frames,
    );

    let mut resync_count = 0u32;
    let mut outcome = if lock.is_some() {
        LegitOutcome::Detected
    } else {
        LegitOutcome::Ambiguous
    };

    let horizon = (cfg.monitor_duration_s / sync.frame_period_s).round() as u64;
    let window = cfg.resync_window() as usize;
    let p_dark = cfg.legit_detector.dark_probability();
    let dark = if p_dark > 0.0 {
        Some(Binomial::new(sync.n_intervals as u64, p_dark).map_err(|e| invalid(e.to_string()))?)
    } else {
        None
    };
    let split = *scanner.split();
    let p_first = cfg
        .legit_detector
        .photon_probability(split.first_share * placement.mean_photoelectrons);
    let p_second = cfg
        .legit_detector
        .photon_probability(split.second_share * placement.mean_photoelectrons);

    let mut frame = 0u64;
    'monitor: while let Some(locked) = lock {
        let mut ring: Vec<Vec<u32>> = vec![Vec::new(); window];
        let mut counts: HashMap<u32, u32> = HashMap::new();
        let mut filled = 0usize;
        while frame < horizon {
            let slot = filled % window;
            for j in ring[slot].drain(..) {
                if let Some(c) = counts.get_mut(&j) {
                    *c -= 1;
                }
            }
            let mut events = Vec::new();
            if monitor_rng.gen::<f64>() < p_first {
                events.push(split.first);
            }
            if split.second_share > 0.0 && monitor_rng.gen::<f64>() < p_second {
                events.push(split.second);
            }
            if let Some(b) = &dark {
                let k = b.sample(&mut monitor_rng);
                for _ in 0..k {
                    events.push(monitor_rng.gen_range(0..sync.n_intervals));
                }
            }
            if let Some(plan) = &interference {
                if plan.fires_in(frame) && monitor_rng.gen::<f64>() < plan.p_register {
                    events.push(plan.interval);
                }
            }
            // Gated detector: at most one registration per interval per frame.
            events.sort_unstable();
            events.dedup();
            for &j in &events {
                *counts.entry(j).or_insert(0) += 1;
            }
            ring[slot] = events;
            filled += 1;
            frame += 1;

            if filled >= window {
                let lock_count = counts.get(&locked).copied().unwrap_or(0);
                let intruder = counts.iter().any(|(&j, &c)| j != locked && c > lock_count);
                if intruder {
                    resync_count += 1;
                    if resync_count > cfg.max_resyncs {
                        outcome = LegitOutcome::ResyncTriggered;
                        lock = None;
                        break 'monitor;
                    }
                    let start = frame as i64;
                    let (relock, used) = acquire(
                        &scanner,
                        interference.as_ref(),
                        start,
                        cfg.max_scan_attempts,
                        &mut scan_rng,
                        scan_frames,
                    );
                    lock = relock;
                    attempts += used;
                    outcome = if lock.is_some() {
                        LegitOutcome::Detected
                    } else {
                        LegitOutcome::Ambiguous
                    };
                    frame = frame.saturating_add(scan_frames as u64 * used as u64);
                    continue 'monitor;
                }
            }
        }
        break;
    }

    let legit_lock_correct = lock.is_some_and(|j| split.is_accepted(j));

    // Attacker: forward timing from the strongest forward tap, reflected
    // timing from the strongest reflected tap.
    let mut attacker_pd = 0.0;
    let mut estimate = None;
    let mut attacker_tap = None;
    if !cfg.couplers.is_empty() {
        let (fwd_idx, _) = argmax(&budget.forward_taps);
        let (ref_rev_idx, m_reflected) = argmax(&budget.reflected_taps);
        let ref_idx = cfg.couplers.len() - 1 - ref_rev_idx;
        attacker_tap = Some(m_reflected);
        attacker_pd = attacker_detection_probability(
            m_reflected,
            &cfg.attacker_detector,
            cfg.attacker_frames,
            sync.n_intervals as u64,
        )?;
        let p_fwd = registration_probability(budget.forward_taps[fwd_idx], &cfg.attacker_detector)?;
        let p_ref = registration_probability(m_reflected, &cfg.attacker_detector)?;
        let mut observed = None;
        for f in 0..cfg.attacker_frames {
            let fwd_hit = attacker_rng.gen::<f64>() < p_fwd;
            let ref_hit = attacker_rng.gen::<f64>() < p_ref;
            if fwd_hit && ref_hit {
                observed = Some(f);
                break;
            }
        }
        if let Some(f) = observed {
            let p_f = cfg.couplers[fwd_idx].position_m;
            let p_r = cfg.couplers[ref_idx].position_m;
            let res = cfg.timing_resolution_s;
            let t0 = f as f64 * sync.frame_period_s + attacker_rng.gen::<f64>() * res.max(1e-15);
            let forward = TapObservation {
                arrival_time_s: quantize_time(t0 + ch.transit_time(p_f), res),
                direction: Direction::Forward,
                mean_photons: budget.forward_taps[fwd_idx],
                registered: true,
            };
            let reflected = TapObservation {
                arrival_time_s: quantize_time(t0 + ch.transit_time(2.0 * ch.length_m - p_r), res),
                direction: Direction::Reflected,
                mean_photons: m_reflected,
                registered: true,
            };
            estimate = estimate_length_two_taps(&forward, &reflected, p_f, p_r, ch);
        }
    }

    notes.push(format!(
        "resync rule: a non-locked interval exceeding the locked interval's count over a {window}-frame window triggers a rescan (stand-in for vendor monitoring)"
    ));
    if cfg.interference.is_some() {
        notes.push("interference pulses keep a random but fixed frame phase per activation".into());
    }

    Ok(ScenarioReport {
        legit_sync_outcome: outcome,
        resync_count,
        attacker_length_estimate_m: estimate,
        attacker_length_error_m: estimate.map(|l| (l - ch.length_m).abs()),
        attacker_pd,
        qber_gate_pass: cfg.scenario_qber <= QBER_THRESHOLD,
        legit_lock_correct,
        legit_mean_photons: budget.at_detector,
        attacker_tap_mean_photons: attacker_tap,
        inserted_attenuation_db: budget.inserted_attenuation_db,
        scan_attempts: attempts,
        notes,
    })
}

/// Scans until an interval is detected or the attempt budget runs out.
fn acquire(
    scanner: &Scanner,
    interference: Option<&InterferencePlan>,
    mut start_frame: i64,
    max_attempts: u32,
    rng: &mut ChaCha8Rng,
    scan_frames: i64,
) -> (Option<u32>, u32) {
    for attempt in 1..=max_attempts {
        if let Decision::Detected(j) = scan_once(scanner, interference, start_frame, rng) {
            return (Some(j), attempt);
        }
        start_frame += scan_frames;
    }
    (None, max_attempts)
}

fn argmax(values: &[f64]) -> (usize, f64) {
    values
        .iter()
        .copied()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, v)| {
            if v > best.1 {
                (i, v)
            } else {
                best
            }
        })
}

/// Attacker figures for the multiphoton and single-photon modes of one tapped setup.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CountermeasureComparison {
    pub frames: u32,
    pub m_tap_multiphoton: f64,
    pub m_tap_single_photon: f64,
    /// Attacker lock probability, multiphoton mode, one frame.
    pub pd_multiphoton: f64,
    /// Attacker lock probability, single-photon mode, `frames` frames.
    pub pd_single_photon: f64,
    pub mass_multiphoton: f64,
    pub mass_single_photon: f64,
    /// `k·(m_multi − F·m_single)`: log of the predicted ratio of
    /// single-photon to multiphoton miss probabilities.
    pub predicted_ln_miss_ratio: f64,
    /// Whether `F·m_single < m_multi`, the condition under which the
    /// single-photon mode must leave the attacker worse off.
    pub ordering_applies: bool,
}

/// Compares what the attacker collects with the sync pulse left bright and
/// with it attenuated to `target_m`.
pub fn compare_countermeasure(
    base: &ScenarioConfig,
    target_m: f64,
    frames: u32,
) -> Result<CountermeasureComparison> {
    let multi = ScenarioConfig {
        countermeasure: Countermeasure {
            on: false,
            target_m,
        },
        ..base.clone()
    };
    let single = ScenarioConfig {
        countermeasure: Countermeasure { on: true, target_m },
        ..base.clone()
    };
    let tap = |cfg: &ScenarioConfig| -> Result<f64> {
        let b = path_budget(cfg)?;
        if b.reflected_taps.is_empty() {
            return Err(config("comparison needs at least one coupler"));
        }
        Ok(argmax(&b.reflected_taps).1)
    };
    let (m_multi, m_single) = (tap(&multi)?, tap(&single)?);
    let det = &base.attacker_detector;
    let n = base.sync.n_intervals as u64;
    let mass_multi = signal_mass(m_multi, det, 1);
    let mass_single = signal_mass(m_single, det, frames);
    let k = det.quantum_efficiency;
    Ok(CountermeasureComparison {
        frames,
        m_tap_multiphoton: m_multi,
        m_tap_single_photon: m_single,
        pd_multiphoton: attacker_detection_probability(m_multi, det, 1, n)?,
        pd_single_photon: attacker_detection_probability(m_single, det, frames, n)?,
        mass_multiphoton: mass_multi,
        mass_single_photon: mass_single,
        predicted_ln_miss_ratio: k * (m_multi - frames as f64 * m_single),
        ordering_applies: frames as f64 * m_single < m_multi,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub length_m: f64,
    pub target_m: f64,
    pub attacker_detector: String,
    pub comparison: CountermeasureComparison,
}

impl GridPoint {
    /// Single-photon attacker lock probability stays below the multiphoton one.
    pub fn ordering_holds(&self) -> bool {
        let c = &self.comparison;
        !c.ordering_applies || c.pd_single_photon < c.pd_multiphoton
    }
}

/// Tapped-channel comparisons over channel lengths of 1, 25.732 and 50 km,
/// targets 0.1/0.3/0.5, three attacker detectors and 1 to 300 frames.
pub fn countermeasure_grid() -> Result<Vec<GridPoint>> {
    let mut out = Vec::new();
    for length_m in [1_000.0, PAPER_CHANNEL_LENGTH_M, 50_000.0] {
        for target_m in [0.1, 0.3, 0.5] {
            for (name, det) in [
                ("ideal", DetectorParams::ideal()),
                ("id210", DetectorParams::id210()),
                ("id230", DetectorParams::id230()),
            ] {
                let base = ScenarioConfig {
                    channel: FiberChannel::standard(length_m)?,
                    attacker_detector: det,
                    ..ScenarioConfig::tapped()
                };
                for frames in [1, 10, 100, 300] {
                    out.push(GridPoint {
                        length_m,
                        target_m,
                        attacker_detector: name.to_string(),
                        comparison: compare_countermeasure(&base, target_m, frames)?,
                    });
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn no_couplers_is_identity() {
        let pass = propagate_through_taps(1.7, &[], Direction::Forward).unwrap();
        assert_eq!(pass.m_through, 1.7);
        assert!(pass.taps.is_empty());
    }

    #[test]
    fn paper_couplers_forward_and_back() {
        let couplers = [CouplerSpec::kc1(100.0), CouplerSpec::kc2(200.0)];
        let fwd = propagate_through_taps(1.0, &couplers, Direction::Forward).unwrap();
        assert!((fwd.taps[0] - 0.30).abs() < 1e-15);
        assert!((fwd.taps[1] - 0.07).abs() < 1e-15);
        assert!((fwd.m_through - 0.63).abs() < 1e-15);
        let back = propagate_through_taps(fwd.m_through, &couplers, Direction::Reflected).unwrap();
        assert!((back.m_through - 0.3969).abs() < 1e-15);
        // Reflected pulse meets kC2 first.
        assert!((back.taps[0] - 0.063).abs() < 1e-15);
    }

    #[test]
    fn coupler_validation() {
        assert!(CouplerSpec::new(0.8, 0.3, 0.0, 0.0).is_err());
        assert!(CouplerSpec::new(0.0, 0.3, 0.0, 0.0).is_err());
        assert!(CouplerSpec::new(0.7, 1.0, 0.0, 0.0).is_err());
        assert!(validate_couplers(&[CouplerSpec::kc1(200.0), CouplerSpec::kc2(100.0)]).is_err());
        assert!(validate_couplers(&[CouplerSpec::kc1(100.0), CouplerSpec::kc2(100.0)]).is_err());
    }

    fn obs(t: f64, direction: Direction) -> TapObservation {
        TapObservation {
            arrival_time_s: t,
            direction,
            mean_photons: 1.0,
            registered: true,
        }
    }

    #[test]
    fn length_inversion() {
        let ch = FiberChannel::standard(PAPER_CHANNEL_LENGTH_M).unwrap();
        let dt = round_trip_period(&ch);
        let l = attacker_estimate_length(
            &obs(0.0, Direction::Forward),
            &obs(dt, Direction::Reflected),
            0.0,
            &ch,
        )
        .unwrap();
        assert!((l - PAPER_CHANNEL_LENGTH_M).abs() < 1e-9);

        let at_tap = attacker_estimate_length(
            &obs(1e-6, Direction::Forward),
            &obs(1e-6, Direction::Reflected),
            150.0,
            &ch,
        );
        assert_eq!(at_tap, Some(150.0));

        let mut missing = obs(dt, Direction::Reflected);
        missing.registered = false;
        assert!(
            attacker_estimate_length(&obs(0.0, Direction::Forward), &missing, 0.0, &ch).is_none()
        );
        assert!(attacker_estimate_length(
            &obs(dt, Direction::Forward),
            &obs(0.0, Direction::Reflected),
            0.0,
            &ch
        )
        .is_none());
    }

    #[test]
    fn quantized_timing_bound() {
        let ch = FiberChannel::standard(PAPER_CHANNEL_LENGTH_M).unwrap();
        let bound = ch.group_velocity_m_per_s * 1e-9 / 2.0;
        assert!((bound - 0.1005).abs() < 1e-12);
        for i in 0..1000 {
            let t0 = i as f64 * 0.37e-9;
            let tf = quantize_time(t0 + ch.transit_time(100.0), 1e-9);
            let tr = quantize_time(t0 + ch.transit_time(2.0 * ch.length_m - 100.0), 1e-9);
            let l = attacker_estimate_length(
                &obs(tf, Direction::Forward),
                &obs(tr, Direction::Reflected),
                100.0,
                &ch,
            )
            .unwrap();
            assert!((l - ch.length_m).abs() <= bound + 1e-9);
        }
    }

    #[test]
    fn attacker_probability_examples() {
        let ideal = DetectorParams::ideal();
        let sat = attacker_detection_probability(52.0, &ideal, 1, 500_000).unwrap();
        assert!(sat >= -(-52f64).exp_m1() - 1e-15);
        let single = attacker_detection_probability(0.01, &ideal, 1, 500_000).unwrap();
        assert!(single <= 0.00995 + 1e-5);
        assert!((single - (-(-0.01f64).exp_m1())).abs() < 1e-12);
        let accumulated = attacker_detection_probability(0.01, &ideal, 300, 500_000).unwrap();
        assert!((accumulated - 0.950_212_931_6).abs() < 1e-9);
    }

    #[test]
    fn budget_conserves_energy_at_taps() {
        let cfg = ScenarioConfig::tapped();
        let b = path_budget(&cfg).unwrap();
        assert_eq!(b.forward_taps.len(), 2);
        let ratio = b.at_detector / b.at_detector_untapped;
        assert!((ratio - 0.3969).abs() < 1e-12, "{ratio}");
    }

    #[test]
    fn countermeasure_calibrates_to_target() {
        let cfg = ScenarioConfig {
            couplers: Vec::new(),
            ..ScenarioConfig::countermeasure(0.3)
        };
        let b = path_budget(&cfg).unwrap();
        assert!((b.at_detector - 0.3).abs() < 1e-12);
        assert!(b.inserted_attenuation_db > 20.0);
    }

    #[test]
    fn infeasible_target_is_config_error() {
        let mut cfg = ScenarioConfig::countermeasure(1e12);
        cfg.couplers.clear();
        assert!(matches!(path_budget(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn scenario_validation() {
        let mut cfg = ScenarioConfig::tapped();
        cfg.couplers[1].position_m = 1e9;
        assert!(run_scenario(&cfg, 1).is_err());
        let mut cfg = ScenarioConfig::tapped();
        cfg.interference = Some(InterferenceSpec {
            pulse_width_s: 1e-9,
            rate_hz: 0.0,
            start_s: 1.0,
            duration_s: 1.0,
            mean_photons: 1e3,
        });
        assert!(run_scenario(&cfg, 1).is_err());
    }

    #[test]
    fn interference_plan_frames() {
        let sync = SyncConfig::clavis2_defaults();
        let spec = InterferenceSpec {
            pulse_width_s: 1e-9,
            rate_hz: 270.0,
            start_s: 1.0,
            duration_s: 1.0,
            mean_photons: 1e3,
        };
        let mut rng = trial_rng(5, 0);
        let plan = InterferencePlan::new(&spec, &sync, &DetectorParams::id230(), &mut rng).unwrap();
        assert_eq!(plan.frames.len(), 270);
        assert!(plan.frames.iter().all(|&f| (1000..2000).contains(&f)));
        assert_eq!(
            plan.pulses_between(0, 1500),
            plan.frames.iter().filter(|&&f| f < 1500).count() as u64
        );
    }
}
