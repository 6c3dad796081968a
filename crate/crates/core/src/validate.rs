//! End-to-end self checks. `Quick` stays within a few seconds; `Full` adds
//! the Monte-Carlo comparisons and the figure discrepancy report.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::analytics::{
    default_audit_grid, divergence_audit, map_physical, p_ambiguous, pd_bernoulli_gates, pd_full,
    pd_simplified, pe_false, DimensionlessParams, DIVERGENCE_LIMIT,
};
use crate::attack::{
    countermeasure_grid, path_budget, quantize_time, ScenarioConfig, PAPER_CHANNEL_LENGTH_M,
};
use crate::detector::DetectorParams;
use crate::link_budget::{
    photon_curve, StageParams, DEFAULT_JUNCTION_LOSS_DB, DEFAULT_STATION_LOSS_DB,
};
use crate::stats::{trial_rng, Z_99};
use crate::sync_scan::{estimate_pd, SignalPlacement, SyncConfig};
use crate::units::{photon_energy, round_trip_period, FiberChannel};
use crate::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Level {
    Quick,
    Full,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

impl Check {
    fn new(name: &str, pass: bool, detail: impl Into<String>) -> Self {
        Self {
            name: name.to_string(),
            pass,
            detail: detail.into(),
        }
    }
}

pub fn run(level: Level) -> Result<Vec<Check>> {
    let mut checks = vec![
        photon_energy_check()?,
        round_trip_check()?,
        zero_noise_identity(),
        partition_check()?,
        divergence_check()?,
        stage_ordering()?,
        tap_budget_check()?,
        timing_bound_check()?,
        countermeasure_ordering()?,
    ];
    if level == Level::Full {
        checks.push(monte_carlo_check()?);
        checks.push(figure_discrepancy()?);
    }
    Ok(checks)
}

fn photon_energy_check() -> Result<Check> {
    let e = photon_energy(&FiberChannel::standard(0.0)?);
    let rel = (e / 8.585e-20 - 1.0).abs();
    Ok(Check::new(
        "photon energy",
        rel <= 5e-3,
        format!("E = {e:.4e} J, relative offset {rel:.2e}"),
    ))
}

fn round_trip_check() -> Result<Check> {
    let ch = FiberChannel::new(100_000.0, 0.2, 2.0e8, 1550.0)?;
    let t = round_trip_period(&ch);
    Ok(Check::new(
        "round-trip period",
        t == 1e-3,
        format!("T_s = {t:e} s at 100 km"),
    ))
}

fn zero_noise_identity() -> Check {
    let mut rng = trial_rng(0x2e60, 0);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let w: f64 = rng.gen_range(0.0..20.0);
        let n: u64 = rng.gen_range(2..1_000_000);
        let p = DimensionlessParams {
            noise_mean: 0.0,
            signal_mean: w,
            n_intervals: n,
            selection_size: None,
        };
        let exact = -(-w).exp_m1();
        worst = worst
            .max((pd_full(&p) - exact).abs())
            .max((pd_simplified(&p) - exact).abs());
    }
    Check::new(
        "zero-noise identity",
        worst <= 1e-12,
        format!("max |error| = {worst:.2e} over 1000 draws"),
    )
}

fn partition_check() -> Result<Check> {
    let mut worst: f64 = 0.0;
    for &(d, w, n) in &[
        (1e-4, 0.5, 1000u64),
        (0.01, 2.0, 100),
        (0.2, 1.5, 50),
        (1e-6, 6.0, 1_000_000),
    ] {
        let p = DimensionlessParams::new(d, w, n)?;
        worst = worst.max((pd_full(&p) + pe_false(&p) + p_ambiguous(&p) - 1.0).abs());
    }
    Ok(Check::new(
        "outcome partition",
        worst <= 1e-10,
        format!("max |P_D + P_false + P_amb - 1| = {worst:.2e}"),
    ))
}

fn divergence_check() -> Result<Check> {
    let audit = divergence_audit(&default_audit_grid())?;
    let at = audit
        .argmax
        .map(|p| {
            format!(
                " at N_w = {}, noise = {:.1e}, signal = {}",
                p.n_intervals, p.noise_mean, p.signal_mean
            )
        })
        .unwrap_or_default();
    Ok(Check::new(
        "divergence audit",
        audit.pass,
        format!(
            "max relative divergence {:.3e} (limit {DIVERGENCE_LIMIT:e}){at}; {} of {} points over the limit, {} refused",
            audit.max_divergence,
            audit.exceedances,
            audit.rows.len(),
            audit.refused.len()
        ),
    ))
}

fn stage_ordering() -> Result<Check> {
    let lengths: Vec<f64> = (0..=100).map(|i| i as f64 * 1000.0).collect();
    let template = FiberChannel::standard(0.0)?;
    let curves = StageParams::calibration_stages()
        .iter()
        .map(|s| {
            photon_curve(
                s,
                DEFAULT_STATION_LOSS_DB,
                DEFAULT_JUNCTION_LOSS_DB,
                &template,
                &lengths,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let dominates = (0..lengths.len()).all(|i| {
        curves[0][i].mean_photons > curves[1][i].mean_photons
            && curves[0][i].mean_photons > curves[2][i].mean_photons
    });
    Ok(Check::new(
        "stage ordering",
        dominates,
        "stage 1 above stages 2 and 3 on 0..100 km",
    ))
}

fn tap_budget_check() -> Result<Check> {
    let tapped = path_budget(&ScenarioConfig::tapped())?;
    let ratio = tapped.at_detector / tapped.at_detector_untapped;
    Ok(Check::new(
        "coupler insertion loss",
        (ratio - 0.3969).abs() < 1e-12,
        format!("two-pass transmission {ratio:.6} (0.63^2 = 0.3969)"),
    ))
}

fn timing_bound_check() -> Result<Check> {
    let ch = FiberChannel::standard(PAPER_CHANNEL_LENGTH_M)?;
    let bound = ch.group_velocity_m_per_s * 1e-9 / 2.0;
    let mut rng = trial_rng(0x71e, 0);
    let mut worst: f64 = 0.0;
    for _ in 0..10_000 {
        let t0: f64 = rng.gen_range(0.0..1e-3);
        let tf = quantize_time(t0 + ch.transit_time(100.0), 1e-9);
        let tr = quantize_time(t0 + ch.transit_time(2.0 * ch.length_m - 100.0), 1e-9);
        let l = 100.0 + ch.group_velocity_m_per_s * (tr - tf) / 2.0;
        worst = worst.max((l - ch.length_m).abs());
    }
    Ok(Check::new(
        "attacker timing bound",
        worst <= bound + 1e-9,
        format!("max length error {worst:.4} m, bound {bound:.4} m"),
    ))
}

fn countermeasure_ordering() -> Result<Check> {
    let grid = countermeasure_grid()?;
    let applicable = grid
        .iter()
        .filter(|g| g.comparison.ordering_applies)
        .count();
    let violations = grid.iter().filter(|g| !g.ordering_holds()).count();
    Ok(Check::new(
        "countermeasure ordering",
        violations == 0 && applicable > 0,
        format!(
            "{applicable} of {} grid points in scope, {violations} violations",
            grid.len()
        ),
    ))
}

/// Small-interval setups where the scan is fast; compared against the exact
/// Bernoulli-gate model.
fn monte_carlo_check() -> Result<Check> {
    let trials = 20_000;
    let mut worst_z: f64 = 0.0;
    let mut pass = true;
    for (i, &(n_intervals, selection, m, dark)) in [
        (50u32, 20u32, 0.2, 2e6),
        (200, 50, 0.1, 5e5),
        (1000, 100, 0.05, 1e5),
    ]
    .iter()
    .enumerate()
    {
        let sync = SyncConfig {
            frame_period_s: n_intervals as f64 * 2e-9,
            n_intervals,
            interval_width_s: 2e-9,
            selection_size: selection,
            pulse_width_s: 1e-9,
        };
        let det = DetectorParams::new(dark, 0.25, 0.0, 2e-9)?;
        let placement = SignalPlacement::centred(&sync, n_intervals / 3, m);
        let est = estimate_pd(&sync, &placement, &det, trials, 900 + i as u64)?;
        let p_signal = 1.0 - (-(det.quantum_efficiency * m + det.dark_mean_per_gate())).exp();
        let exact = pd_bernoulli_gates(
            selection,
            p_signal,
            det.dark_probability(),
            n_intervals as u64,
        )?;
        let (lo, hi) = est.interval(Z_99);
        pass &= (lo..=hi).contains(&exact);
        let se = (exact * (1.0 - exact) / trials as f64).sqrt().max(1e-12);
        worst_z = worst_z.max((est.p_hat - exact).abs() / se);
    }
    Ok(Check::new(
        "Monte-Carlo vs exact gate model",
        pass,
        format!("three setups, {trials} trials each, worst |z| = {worst_z:.2}"),
    ))
}

/// Dark-count sensitivity implied by the published P_D figures versus the
/// 2 ns gate; informational, passes when the gap is reported.
fn figure_discrepancy() -> Result<Check> {
    let sync = SyncConfig {
        selection_size: 1024,
        ..SyncConfig::clavis2_defaults()
    };
    let lo = map_physical(
        &sync,
        &DetectorParams {
            dark_rate_hz: 25.0,
            ..DetectorParams::id230()
        },
        0.1,
    )?;
    let hi = map_physical(
        &sync,
        &DetectorParams {
            dark_rate_hz: 400.0,
            ..DetectorParams::id230()
        },
        0.1,
    )?;
    let delta = (pd_full(&lo) - pd_full(&hi)).abs();
    Ok(Check::new(
        "figure discrepancy report",
        true,
        format!(
            "N = 1024, DCP 25 -> 400 Hz moves P_D by {delta:.2e} with a 2 ns gate (noise mean <= {:.1e}); the published curves need a much wider effective noise window",
            hi.noise_mean
        ),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quick_checks_run() {
        let checks = run(Level::Quick).unwrap();
        assert_eq!(checks.len(), 9);
        for c in &checks {
            if c.name != "divergence audit" {
                assert!(c.pass, "{}: {}", c.name, c.detail);
            }
        }
    }
}
