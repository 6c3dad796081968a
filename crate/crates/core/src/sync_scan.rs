//! Monte-Carlo simulation of the sequential interval scan.
//!
//! The frame period is split into `N_w` intervals of width `τ_w`. Each frame
//! polls exactly one interval with one detector gate, and every interval is
//! polled `N` times in turn. After the scan the interval with the unique
//! largest count is taken as the signal interval; ties are ambiguous.
//!
//! Noise-only intervals are sampled sparsely: with `M` noise gates of dark
//! probability `p`, the number of firing gates is `Binomial(M, p)` and their
//! positions are a uniform subset of the `M` gates. That is the exact joint
//! law of independent Bernoulli gates, at a cost proportional to the number
//! of dark registrations rather than `N·N_w`.

use rand::Rng;
use rand_distr::{Binomial, Distribution};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::detector::{dead_time_ignorable, sample_gate_with, DetectorParams};
use crate::error::{config, invalid, Result};
use crate::link_budget::{classify_pulse, PulseClass};
use crate::stats::{trial_rng, wilson_interval, Z_95};

/// Relative tolerance on `T_s = N_w·τ_w`.
const FRAME_TOLERANCE: f64 = 1e-9;

/// Scan schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyncConfig {
    pub frame_period_s: f64,
    pub n_intervals: u32,
    pub interval_width_s: f64,
    pub selection_size: u32,
    pub pulse_width_s: f64,
}

impl SyncConfig {
    /// Builds a schedule whose interval count is `frame_period / interval_width`.
    pub fn from_frame(
        frame_period_s: f64,
        interval_width_s: f64,
        selection_size: u32,
        pulse_width_s: f64,
    ) -> Result<Self> {
        if !(interval_width_s > 0.0 && frame_period_s > 0.0) {
            return Err(config("frame period and interval width must be > 0"));
        }
        let n = (frame_period_s / interval_width_s).round();
        if !(1.0..=u32::MAX as f64).contains(&n) {
            return Err(config(format!("interval count {n} out of range")));
        }
        let cfg = Self {
            frame_period_s,
            n_intervals: n as u32,
            interval_width_s,
            selection_size,
            pulse_width_s,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// 1 ms frame, 2 ns intervals, 1 ns pulses, 800 polls per interval.
    pub fn clavis2_defaults() -> Self {
        Self {
            frame_period_s: 1e-3,
            n_intervals: 500_000,
            interval_width_s: 2e-9,
            selection_size: 800,
            pulse_width_s: 1e-9,
        }
    }

    /// Checks hard invariants and returns soft warnings.
    pub fn validate(&self) -> Result<Vec<String>> {
        if self.n_intervals < 1 {
            return Err(config("n_intervals must be >= 1"));
        }
        if self.selection_size < 1 {
            return Err(config("selection_size must be >= 1"));
        }
        for (name, v) in [
            ("frame_period_s", self.frame_period_s),
            ("interval_width_s", self.interval_width_s),
            ("pulse_width_s", self.pulse_width_s),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(config(format!("{name} must be > 0, got {v}")));
            }
        }
        let implied = self.n_intervals as f64 * self.interval_width_s;
        if ((implied - self.frame_period_s) / self.frame_period_s).abs() > FRAME_TOLERANCE {
            return Err(config(format!(
                "frame period {} s differs from n_intervals * interval_width = {implied} s",
                self.frame_period_s
            )));
        }
        // A pulse must straddle at most two intervals.
        if self.pulse_width_s > self.interval_width_s {
            return Err(config(format!(
                "pulse width {} s exceeds interval width {} s",
                self.pulse_width_s, self.interval_width_s
            )));
        }
        let mut warnings = Vec::new();
        let ratio = self.interval_width_s / self.pulse_width_s;
        if !(2.0 * (1.0 - 1e-12)..=4.0 * (1.0 + 1e-12)).contains(&ratio) {
            warnings.push(format!(
                "interval width is {ratio:.3} pulse widths, outside the recommended 2..4"
            ));
        }
        Ok(warnings)
    }

    /// Time for a full scan: every interval polled `N` times, one poll per frame.
    pub fn scan_duration_s(&self) -> f64 {
        self.n_intervals as f64 * self.selection_size as f64 * self.frame_period_s
    }
}

/// Where the returning pulse sits within the frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SignalPlacement {
    pub onset_s: f64,
    /// Mean photons reaching the detector per pulse; quantum efficiency is
    /// applied by the detector.
    pub mean_photoelectrons: f64,
}

impl SignalPlacement {
    pub fn validate(&self, sync: &SyncConfig) -> Result<()> {
        if !(self.onset_s >= 0.0 && self.onset_s < sync.frame_period_s) {
            return Err(invalid(format!(
                "onset {} s must lie in [0, {}) s",
                self.onset_s, sync.frame_period_s
            )));
        }
        if !(self.mean_photoelectrons.is_finite() && self.mean_photoelectrons >= 0.0) {
            return Err(invalid("mean photoelectrons must be finite and >= 0"));
        }
        Ok(())
    }

    /// Onset at the centre of interval `index`.
    pub fn centred(sync: &SyncConfig, index: u32, mean_photoelectrons: f64) -> Self {
        Self {
            onset_s: (index as f64 + 0.5) * sync.interval_width_s - 0.5 * sync.pulse_width_s,
            mean_photoelectrons,
        }
    }
}

/// Shares of the pulse falling in the interval containing the onset and in
/// the next one (wrapping at the frame end).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SignalSplit {
    pub first: u32,
    pub first_share: f64,
    pub second: u32,
    pub second_share: f64,
}

/// Slack on the half-pulse acceptance rule so an exactly centred straddle
/// accepts both intervals despite rounding.
const SHARE_TOLERANCE: f64 = 1e-9;

impl SignalSplit {
    /// Intervals that count as a correct lock: those holding at least half the pulse.
    pub fn accepted(&self) -> Vec<u32> {
        let mut out = Vec::with_capacity(2);
        if self.first_share >= 0.5 - SHARE_TOLERANCE {
            out.push(self.first);
        }
        if self.second_share >= 0.5 - SHARE_TOLERANCE && self.second != self.first {
            out.push(self.second);
        }
        out
    }

    pub fn is_accepted(&self, index: u32) -> bool {
        (index == self.first && self.first_share >= 0.5 - SHARE_TOLERANCE)
            || (index == self.second && self.second_share >= 0.5 - SHARE_TOLERANCE)
    }
}

pub fn split_signal(placement: &SignalPlacement, sync: &SyncConfig) -> SignalSplit {
    let width = sync.interval_width_s;
    let n = sync.n_intervals;
    let first = ((placement.onset_s / width).floor() as u32).min(n - 1);
    let boundary = (first as f64 + 1.0) * width;
    let end = placement.onset_s + sync.pulse_width_s;
    let first_share = if end <= boundary {
        1.0
    } else {
        ((boundary - placement.onset_s) / sync.pulse_width_s).clamp(0.0, 1.0)
    };
    SignalSplit {
        first,
        first_share,
        second: (first + 1) % n,
        second_share: 1.0 - first_share,
    }
}

/// Per-interval registration counts, `counts[j] <= N`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CountArray(pub Vec<u32>);

impl CountArray {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[u32] {
        &self.0
    }

    pub fn decide(&self) -> Decision {
        decide_unique_max(
            self.0
                .iter()
                .copied()
                .enumerate()
                .map(|(j, c)| (j as u32, c)),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    Detected(u32),
    Ambiguous,
}

/// Unique argmax over `(interval, count)` pairs; an all-zero array is ambiguous.
fn decide_unique_max(items: impl IntoIterator<Item = (u32, u32)>) -> Decision {
    let mut best = 0u32;
    let mut at = None;
    let mut ties = 0usize;
    for (j, c) in items {
        if c > best {
            best = c;
            at = Some(j);
            ties = 1;
        } else if c == best && c > 0 {
            ties += 1;
        }
    }
    match at {
        Some(j) if ties == 1 => Decision::Detected(j),
        _ => Decision::Ambiguous,
    }
}

/// One scan's counts in sparse form: the signal intervals explicitly and the
/// noise intervals as a list of registrations.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseCounts {
    pub n_intervals: u32,
    /// `(interval, count)` for the intervals touched by the pulse.
    pub signal: Vec<(u32, u32)>,
    /// Interval index of every dark registration in noise intervals.
    pub noise_hits: Vec<u32>,
    /// Extra registrations injected from outside (interference).
    pub extra: Vec<(u32, u32)>,
}

impl SparseCounts {
    fn merged(&self) -> Vec<(u32, u32)> {
        let mut hits = self.noise_hits.clone();
        hits.sort_unstable();
        let mut out: Vec<(u32, u32)> =
            Vec::with_capacity(hits.len() + self.signal.len() + self.extra.len());
        for j in hits {
            match out.last_mut() {
                Some((last, c)) if *last == j => *c += 1,
                _ => out.push((j, 1)),
            }
        }
        out.extend(self.signal.iter().copied());
        out.extend(self.extra.iter().copied());
        out.sort_unstable_by_key(|&(j, _)| j);
        // Collapse duplicates from `signal`/`extra` overlapping noise entries.
        let mut collapsed: Vec<(u32, u32)> = Vec::with_capacity(out.len());
        for (j, c) in out {
            match collapsed.last_mut() {
                Some((last, acc)) if *last == j => *acc += c,
                _ => collapsed.push((j, c)),
            }
        }
        collapsed
    }

    pub fn count(&self, interval: u32) -> u32 {
        let noise = self.noise_hits.iter().filter(|&&j| j == interval).count() as u32;
        let signal: u32 = self
            .signal
            .iter()
            .filter(|(j, _)| *j == interval)
            .map(|(_, c)| c)
            .sum();
        let extra: u32 = self
            .extra
            .iter()
            .filter(|(j, _)| *j == interval)
            .map(|(_, c)| c)
            .sum();
        noise + signal + extra
    }

    pub fn decide(&self) -> Decision {
        decide_unique_max(self.merged())
    }

    pub fn to_dense(&self) -> CountArray {
        let mut counts = vec![0u32; self.n_intervals as usize];
        for (j, c) in self.merged() {
            counts[j as usize] += c;
        }
        CountArray(counts)
    }
}

/// Precomputed gate probabilities for repeated scans of one configuration.
#[derive(Debug, Clone)]
pub struct Scanner {
    sync: SyncConfig,
    split: SignalSplit,
    /// `(interval, photon probability)` for the one or two signal intervals, ascending.
    signal: Vec<(u32, f64)>,
    p_dark: f64,
    noise_binomial: Option<Binomial>,
    noise_gates: u64,
    warnings: Vec<String>,
}

impl Scanner {
    pub fn new(
        sync: &SyncConfig,
        placement: &SignalPlacement,
        det: &DetectorParams,
    ) -> Result<Self> {
        let mut warnings = sync.validate()?;
        placement.validate(sync)?;
        det.validate()?;
        if !dead_time_ignorable(sync, det) {
            return Err(config(format!(
                "frame period {} s is not much longer than dead time {} s",
                sync.frame_period_s, det.dead_time_s
            )));
        }
        if classify_pulse(placement.mean_photoelectrons)? != PulseClass::SinglePhoton {
            warnings.push(format!(
                "signal mean {} photons is not in the single-photon regime",
                placement.mean_photoelectrons
            ));
        }
        let split = split_signal(placement, sync);
        let mut signal = vec![(
            split.first,
            det.photon_probability(split.first_share * placement.mean_photoelectrons),
        )];
        if split.second_share > 0.0 && split.second != split.first {
            signal.push((
                split.second,
                det.photon_probability(split.second_share * placement.mean_photoelectrons),
            ));
        }
        signal.sort_by_key(|&(j, _)| j);
        let p_dark = det.dark_probability();
        let noise_intervals = sync.n_intervals as u64 - signal.len() as u64;
        let noise_gates = noise_intervals * sync.selection_size as u64;
        let noise_binomial = if p_dark > 0.0 && noise_gates > 0 {
            Some(Binomial::new(noise_gates, p_dark).map_err(|e| invalid(e.to_string()))?)
        } else {
            None
        };
        Ok(Self {
            sync: *sync,
            split,
            signal,
            p_dark,
            noise_binomial,
            noise_gates,
            warnings,
        })
    }

    pub fn split(&self) -> &SignalSplit {
        &self.split
    }

    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    pub fn sync(&self) -> &SyncConfig {
        &self.sync
    }

    /// Samples one full scan.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> SparseCounts {
        let n = self.sync.selection_size;
        let signal = self
            .signal
            .iter()
            .map(|&(j, p_photon)| {
                let count = (0..n)
                    .filter(|_| sample_gate_with(p_photon, self.p_dark, rng).registered)
                    .count() as u32;
                (j, count)
            })
            .collect();

        let noise_hits = match &self.noise_binomial {
            None => Vec::new(),
            Some(binomial) => {
                let fired = binomial.sample(rng) as usize;
                let signal_sorted: Vec<u32> = self.signal.iter().map(|&(j, _)| j).collect();
                rand::seq::index::sample(rng, self.noise_gates as usize, fired)
                    .into_iter()
                    .map(|gate| {
                        let mut j = (gate / n as usize) as u32;
                        for &s in &signal_sorted {
                            if j >= s {
                                j += 1;
                            }
                        }
                        j
                    })
                    .collect()
            }
        };
        SparseCounts {
            n_intervals: self.sync.n_intervals,
            signal,
            noise_hits,
            extra: Vec::new(),
        }
    }

    /// Whether `decision` locks onto the pulse.
    pub fn is_correct(&self, decision: Decision) -> bool {
        matches!(decision, Decision::Detected(j) if self.split.is_accepted(j))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanResult {
    pub counts: CountArray,
    pub decision: Decision,
    pub scan_duration_s: f64,
    /// Intervals that count as a correct lock.
    pub accepted_intervals: Vec<u32>,
    pub warnings: Vec<String>,
}

/// A scan result with the inputs that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanReport {
    pub seed: u64,
    pub sync: SyncConfig,
    pub placement: SignalPlacement,
    pub detector: DetectorParams,
    #[serde(flatten)]
    pub result: ScanResult,
}

pub fn run_scan(
    sync: &SyncConfig,
    placement: &SignalPlacement,
    det: &DetectorParams,
    seed: u64,
) -> Result<ScanResult> {
    let scanner = Scanner::new(sync, placement, det)?;
    let mut rng = trial_rng(seed, 0);
    let sparse = scanner.sample(&mut rng);
    Ok(ScanResult {
        decision: sparse.decide(),
        counts: sparse.to_dense(),
        scan_duration_s: sync.scan_duration_s(),
        accepted_intervals: scanner.split().accepted(),
        warnings: scanner.warnings().to_vec(),
    })
}

pub const MIN_TRIALS: u64 = 100;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PdEstimate {
    pub trials: u64,
    pub successes: u64,
    pub p_hat: f64,
    /// 95 % Wilson interval.
    pub ci_low: f64,
    pub ci_high: f64,
}

impl PdEstimate {
    fn from_counts(successes: u64, trials: u64) -> Self {
        let (ci_low, ci_high) = wilson_interval(successes, trials, Z_95);
        Self {
            trials,
            successes,
            p_hat: successes as f64 / trials as f64,
            ci_low,
            ci_high,
        }
    }

    /// Wilson interval at another normal quantile.
    pub fn interval(&self, z: f64) -> (f64, f64) {
        wilson_interval(self.successes, self.trials, z)
    }
}

/// Monte-Carlo probability of locking onto the pulse. Trial `i` uses stream
/// `i` of `seed`, so the result is the same for any thread count.
pub fn estimate_pd(
    sync: &SyncConfig,
    placement: &SignalPlacement,
    det: &DetectorParams,
    trials: u64,
    seed: u64,
) -> Result<PdEstimate> {
    if trials < MIN_TRIALS {
        return Err(invalid(format!(
            "at least {MIN_TRIALS} trials required, got {trials}"
        )));
    }
    let scanner = Scanner::new(sync, placement, det)?;
    let successes = (0..trials)
        .into_par_iter()
        .filter(|&t| {
            let mut rng = trial_rng(seed, t);
            scanner.is_correct(scanner.sample(&mut rng).decide())
        })
        .count() as u64;
    Ok(PdEstimate::from_counts(successes, trials))
}
