use qkdsync::analytics::{map_physical, pd_full};
use qkdsync::attack::{
    compare_countermeasure, path_budget, run_scenario, InterferenceSpec, LegitOutcome,
    ScenarioConfig,
};
use qkdsync::Error;

#[test]
fn clean_channel_has_no_attacker() {
    let expected = ScenarioConfig {
        couplers: Vec::new(),
        ..ScenarioConfig::countermeasure(0.3)
    };
    assert_eq!(ScenarioConfig::clean(), expected);
    let report = run_scenario(&ScenarioConfig::clean(), 1).unwrap();
    assert_eq!(report.legit_sync_outcome, LegitOutcome::Detected);
    assert!(report.legit_lock_correct);
    assert_eq!(report.resync_count, 0);
    assert!(report.attacker_length_estimate_m.is_none());
    assert!(report.attacker_length_error_m.is_none());
    assert_eq!(report.attacker_pd, 0.0);
    assert!((report.legit_mean_photons - 0.3).abs() < 1e-12);

    let json = serde_json::to_value(&report).unwrap();
    assert!(json.get("attacker_length_estimate_m").is_none());
    assert!(json.get("attacker_length_error_m").is_none());
    assert_eq!(json["legit_sync_outcome"], "detected");
}

#[test]
fn tapped_multiphoton_channel_leaks_length() {
    let report = run_scenario(&ScenarioConfig::tapped(), 7).unwrap();
    assert_eq!(report.legit_sync_outcome, LegitOutcome::Detected);
    assert!(report.legit_lock_correct);
    assert_eq!(report.resync_count, 0);
    assert!(report.attacker_pd > 0.999, "{}", report.attacker_pd);
    let err = report.attacker_length_error_m.expect("estimate present");
    assert!(err <= 0.11, "{err}");
    assert!(report.attacker_length_estimate_m.is_some());
}

#[test]
fn interference_forces_resync_then_relock() {
    let mut cfg = ScenarioConfig::countermeasure(0.3);
    cfg.interference = Some(InterferenceSpec {
        pulse_width_s: 1e-9,
        rate_hz: 270.0,
        start_s: 2.0,
        duration_s: 5.0,
        mean_photons: 1e3,
    });
    let report = run_scenario(&cfg, 3).unwrap();
    assert!(report.resync_count >= 1);
    assert_eq!(report.legit_sync_outcome, LegitOutcome::Detected);
    assert!(report.legit_lock_correct);
}

#[test]
fn quiet_interference_does_not_disturb_bright_sync() {
    let mut cfg = ScenarioConfig::tapped();
    cfg.interference = Some(InterferenceSpec {
        pulse_width_s: 1e-9,
        rate_hz: 270.0,
        start_s: 2.0,
        duration_s: 5.0,
        mean_photons: 1e3,
    });
    let report = run_scenario(&cfg, 3).unwrap();
    assert_eq!(report.resync_count, 0);
    assert_eq!(report.legit_sync_outcome, LegitOutcome::Detected);
}

#[test]
fn reports_repeat_for_equal_seeds() {
    let mut cfg = ScenarioConfig::countermeasure(0.3);
    cfg.attacker_frames = 50;
    let a = serde_json::to_string(&run_scenario(&cfg, 11).unwrap()).unwrap();
    let b = serde_json::to_string(&run_scenario(&cfg, 11).unwrap()).unwrap();
    assert_eq!(a, b);
}

#[test]
fn countermeasure_lowers_attacker_pd_by_predicted_factor() {
    let multi = run_scenario(&ScenarioConfig::tapped(), 5).unwrap();
    let single = run_scenario(&ScenarioConfig::countermeasure(0.3), 5).unwrap();
    assert!(single.attacker_pd < multi.attacker_pd);
    let c = compare_countermeasure(&ScenarioConfig::tapped(), 0.3, 1).unwrap();
    assert!(c.ordering_applies);
    let observed = (1.0 - c.mass_single_photon).ln() - (1.0 - c.mass_multiphoton).ln();
    assert!((observed - c.predicted_ln_miss_ratio).abs() < 1e-9 * c.predicted_ln_miss_ratio);
}

#[test]
fn couplers_cost_the_legit_station_only_their_insertion_loss() {
    let tapped = ScenarioConfig::countermeasure(0.3);
    let clean = ScenarioConfig::clean();
    let m_tapped = path_budget(&tapped).unwrap().at_detector;
    let m_clean = path_budget(&clean).unwrap().at_detector;
    let db = 10.0 * (m_clean / m_tapped).log10();
    assert!((db - 2.0 * 10.0 * (1.0f64 / 0.63).log10()).abs() < 1e-9);
    assert!((db / 2.0 - 2.006).abs() < 1e-3);

    let pd = |m: f64| pd_full(&map_physical(&tapped.sync, &tapped.legit_detector, m).unwrap());
    let predicted = pd(m_clean * 10f64.powf(-db / 10.0));
    assert!((pd(m_tapped) - predicted).abs() < 1e-12);
    assert!(pd(m_clean) - pd(m_tapped) < 0.01);
}

#[test]
fn coupler_beyond_channel_is_config_error() {
    let mut cfg = ScenarioConfig::tapped();
    cfg.channel.length_m = 150.0;
    assert!(matches!(run_scenario(&cfg, 1), Err(Error::Config(_))));
}

/// A saturating Geiger detector fills both straddled intervals with a bright
/// pulse, and the unique-argmax rule cannot pick one.
#[test]
fn bright_straddled_pulse_ties() {
    let cfg = ScenarioConfig {
        countermeasure: Default::default(),
        ..ScenarioConfig::clean()
    };
    let report = run_scenario(&cfg, 1).unwrap();
    assert_eq!(report.legit_sync_outcome, LegitOutcome::Ambiguous);
    assert_eq!(report.scan_attempts, cfg.max_scan_attempts);
}
