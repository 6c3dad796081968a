use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use qkdsync::analytics::{
    map_physical, pd_full, pd_simplified, pe_false_with, regime_violation, relative_divergence,
    DimensionlessParams, FalseDetection,
};
use qkdsync::attack::{run_scenario, ScenarioConfig, ScenarioReport};
use qkdsync::link_budget::{
    classify_pulse, photon_curve, StageParams, DEFAULT_JUNCTION_LOSS_DB, DEFAULT_STATION_LOSS_DB,
};
use qkdsync::presets::{self, ScanSetup};
use qkdsync::sync_scan::{estimate_pd, Scanner};
use qkdsync::units::{
    FiberChannel, DEFAULT_ATTENUATION_DB_PER_KM, DEFAULT_GROUP_VELOCITY, DEFAULT_WAVELENGTH_NM,
};
use qkdsync::validate::{self, Level};

mod config;
mod manifest;

use manifest::{sidecar_path, RunManifest};

#[derive(Debug)]
pub enum CliError {
    /// Bad flags, configs or parameters: exit code 2.
    Usage(String),
    /// Anything that went wrong while running: exit code 1.
    Runtime(String),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Runtime(m) => f.write_str(m),
        }
    }
}

impl From<qkdsync::Error> for CliError {
    fn from(e: qkdsync::Error) -> Self {
        CliError::Usage(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

type CliResult<T> = Result<T, CliError>;

/// Synchronization-phase simulator for two-pass QKD links.
#[derive(Parser)]
#[command(name = "qkdsync", version, about, long_about = None)]
#[command(
    after_help = "Relative config paths are also looked up in $QKDSYNC_CONFIG_DIR.\n\
Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Mean photons per sync pulse versus fiber length for the three calibration stages.
    Budget(BudgetArgs),
    /// Analytic detection probabilities over a grid of selection sizes and dark-count rates.
    Pd(PdArgs),
    /// Monte-Carlo estimate of the scan's correct-lock probability.
    Scan(ScanArgs),
    /// Run a coupler / interference scenario.
    Attack(AttackArgs),
    /// Run the self-check suite.
    Validate(ValidateArgs),
}

#[derive(Args)]
#[command(
    after_help = "Pulse classes: m < 1 single-photon, 1 <= m < 10 photon, m >= 10 multiphoton."
)]
struct BudgetArgs {
    /// TOML file with station_loss_db, extra_db, [fiber] and three [[stages]].
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0.0)]
    length_min: f64,
    #[arg(long, default_value_t = 100_000.0)]
    length_max: f64,
    #[arg(long, default_value_t = 1_000.0)]
    step: f64,
    /// Write CSV here (with a .manifest.json sidecar) instead of stdout.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FiberSettings {
    #[serde(default = "default_attenuation")]
    attenuation_db_per_km: f64,
    #[serde(default = "default_velocity")]
    group_velocity_m_per_s: f64,
    #[serde(default = "default_wavelength")]
    wavelength_nm: f64,
}

fn default_attenuation() -> f64 {
    DEFAULT_ATTENUATION_DB_PER_KM
}
fn default_velocity() -> f64 {
    DEFAULT_GROUP_VELOCITY
}
fn default_wavelength() -> f64 {
    DEFAULT_WAVELENGTH_NM
}

impl Default for FiberSettings {
    fn default() -> Self {
        Self {
            attenuation_db_per_km: DEFAULT_ATTENUATION_DB_PER_KM,
            group_velocity_m_per_s: DEFAULT_GROUP_VELOCITY,
            wavelength_nm: DEFAULT_WAVELENGTH_NM,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BudgetConfig {
    #[serde(default = "default_station_loss")]
    station_loss_db: f64,
    #[serde(default = "default_extra_loss")]
    extra_db: f64,
    #[serde(default)]
    fiber: FiberSettings,
    #[serde(default = "StageParams::calibration_stages")]
    stages: [StageParams; 3],
}

fn default_station_loss() -> f64 {
    DEFAULT_STATION_LOSS_DB
}
fn default_extra_loss() -> f64 {
    DEFAULT_JUNCTION_LOSS_DB
}

impl Default for BudgetConfig {
    fn default() -> Self {
        Self {
            station_loss_db: DEFAULT_STATION_LOSS_DB,
            extra_db: DEFAULT_JUNCTION_LOSS_DB,
            fiber: FiberSettings::default(),
            stages: StageParams::calibration_stages(),
        }
    }
}

#[derive(Serialize)]
struct BudgetRow {
    length_m: f64,
    m_stage1: f64,
    m_stage2: f64,
    m_stage3: f64,
    class_stage1: &'static str,
    class_stage2: &'static str,
    class_stage3: &'static str,
}

#[derive(Serialize)]
struct BudgetParams<'a> {
    config: &'a BudgetConfig,
    length_min: f64,
    length_max: f64,
    step: f64,
}

fn length_grid(min: f64, max: f64, step: f64) -> CliResult<Vec<f64>> {
    if !(min.is_finite() && max.is_finite() && min >= 0.0 && max >= min) {
        return Err(CliError::Usage(format!(
            "length range [{min}, {max}] is invalid"
        )));
    }
    if !(step > 0.0 && step.is_finite()) {
        return Err(CliError::Usage(format!("step must be > 0, got {step}")));
    }
    let count = ((max - min) / step + 1e-9).floor() as usize + 1;
    Ok((0..count).map(|i| min + i as f64 * step).collect())
}

fn cmd_budget(args: &BudgetArgs) -> CliResult<()> {
    let cfg: BudgetConfig = match &args.config {
        Some(path) => config::load(path)?,
        None => BudgetConfig::default(),
    };
    let lengths = length_grid(args.length_min, args.length_max, args.step)?;
    let template = FiberChannel::new(
        0.0,
        cfg.fiber.attenuation_db_per_km,
        cfg.fiber.group_velocity_m_per_s,
        cfg.fiber.wavelength_nm,
    )?;
    let curves = cfg
        .stages
        .iter()
        .map(|s| photon_curve(s, cfg.station_loss_db, cfg.extra_db, &template, &lengths))
        .collect::<qkdsync::Result<Vec<_>>>()?;

    let mut out = csv::Writer::from_writer(Vec::new());
    for (i, &length_m) in lengths.iter().enumerate() {
        let m = [
            curves[0][i].mean_photons,
            curves[1][i].mean_photons,
            curves[2][i].mean_photons,
        ];
        out.serialize(BudgetRow {
            length_m,
            m_stage1: m[0],
            m_stage2: m[1],
            m_stage3: m[2],
            class_stage1: classify_pulse(m[0])?.as_str(),
            class_stage2: classify_pulse(m[1])?.as_str(),
            class_stage3: classify_pulse(m[2])?.as_str(),
        })
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    }
    let bytes = out
        .into_inner()
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    let params = BudgetParams {
        config: &cfg,
        length_min: args.length_min,
        length_max: args.length_max,
        step: args.step,
    };
    emit_csv("budget", None, &params, &bytes, args.output.as_deref())
}

#[derive(Clone, Copy, ValueEnum)]
enum DetectorPreset {
    Id210,
    Id230,
    Ideal,
}

impl DetectorPreset {
    fn name(self) -> &'static str {
        match self {
            DetectorPreset::Id210 => "id210",
            DetectorPreset::Id230 => "id230",
            DetectorPreset::Ideal => "ideal",
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum FalseDetectionArg {
    /// A noise interval holds the unique largest count.
    UniqueNoiseArgmax,
    /// Some noise interval reaches the signal count.
    NoiseAtLeastSignal,
}

impl From<FalseDetectionArg> for FalseDetection {
    fn from(a: FalseDetectionArg) -> Self {
        match a {
            FalseDetectionArg::UniqueNoiseArgmax => FalseDetection::UniqueNoiseArgmax,
            FalseDetectionArg::NoiseAtLeastSignal => FalseDetection::NoiseAtLeastSignal,
        }
    }
}

const DEFAULT_SELECTION_SIZES: &str = "10,30,100,150,300,800,1024";
const DEFAULT_DARK_RATES: &str = "25,40,50,100,200,400";

#[derive(Args)]
#[command(after_help = "Lists are comma-separated values or start:stop:step ranges (inclusive).")]
struct PdArgs {
    /// Take dark-count rate and efficiency from a detector preset.
    #[arg(long, value_enum)]
    preset: Option<DetectorPreset>,
    /// Selection sizes N.
    #[arg(long = "n", default_value = DEFAULT_SELECTION_SIZES)]
    selection_sizes: String,
    /// Dark-count rates in Hz; defaults to the preset's rate, else a 25..400 Hz sweep.
    #[arg(long)]
    dcp: Option<String>,
    /// Mean photons per sync pulse at the detector.
    #[arg(long, default_value_t = 0.1)]
    m: f64,
    /// Quantum efficiency; defaults to the preset's, else 0.25.
    #[arg(long)]
    k: Option<f64>,
    /// Number of intervals per frame.
    #[arg(long = "n-w", default_value_t = 500_000)]
    n_w: u64,
    /// Noise accumulation window per poll, seconds.
    #[arg(long, default_value_t = 2e-9)]
    gate: f64,
    #[arg(long, value_enum, default_value_t = FalseDetectionArg::UniqueNoiseArgmax)]
    false_detection: FalseDetectionArg,
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Serialize)]
struct PdRow {
    #[serde(rename = "N")]
    n: u32,
    #[serde(rename = "DCP_hz")]
    dcp_hz: f64,
    m: f64,
    k: f64,
    #[serde(rename = "N_w")]
    n_w: u64,
    noise_mean: f64,
    signal_mean: f64,
    pd_full: f64,
    pd_simplified: f64,
    pe_false: f64,
    divergence: f64,
    warning: String,
}

#[derive(Serialize)]
struct PdParams<'a> {
    preset: Option<&'static str>,
    selection_sizes: &'a [u32],
    dcp_hz: &'a [f64],
    m: f64,
    k: f64,
    n_w: u64,
    gate_s: f64,
    false_detection: FalseDetection,
}

fn parse_list(text: &str, what: &str) -> CliResult<Vec<f64>> {
    let bad = || CliError::Usage(format!("cannot parse {what} list '{text}'"));
    let mut out = Vec::new();
    for item in text.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let parts: Vec<&str> = item.split(':').collect();
        match parts.as_slice() {
            [v] => out.push(v.parse::<f64>().map_err(|_| bad())?),
            [a, b, s] => {
                let (a, b, s) = (
                    a.parse::<f64>().map_err(|_| bad())?,
                    b.parse::<f64>().map_err(|_| bad())?,
                    s.parse::<f64>().map_err(|_| bad())?,
                );
                out.extend(length_grid(a, b, s).map_err(|_| bad())?);
            }
            _ => return Err(bad()),
        }
    }
    if out.is_empty() {
        return Err(CliError::Usage(format!("{what} list is empty")));
    }
    if out.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(CliError::Usage(format!(
            "{what} values must be finite and >= 0"
        )));
    }
    out.sort_by(f64::total_cmp);
    out.dedup();
    Ok(out)
}

fn cmd_pd(args: &PdArgs) -> CliResult<()> {
    let detector = args
        .preset
        .map(|p| presets::detector(p.name()))
        .transpose()?;
    let sizes: Vec<u32> = parse_list(&args.selection_sizes, "N")?
        .into_iter()
        .map(|v| {
            if v.fract() == 0.0 && v >= 1.0 && v <= u32::MAX as f64 {
                Ok(v as u32)
            } else {
                Err(CliError::Usage(format!(
                    "selection size {v} is not a positive integer"
                )))
            }
        })
        .collect::<CliResult<_>>()?;
    let dcps = match (&args.dcp, detector) {
        (Some(list), _) => parse_list(list, "DCP")?,
        (None, Some(d)) => vec![d.dark_rate_hz],
        (None, None) => parse_list(DEFAULT_DARK_RATES, "DCP")?,
    };
    let k = args
        .k
        .or(detector.map(|d| d.quantum_efficiency))
        .unwrap_or(0.25);
    if !(0.0..=1.0).contains(&k) {
        return Err(CliError::Usage(format!("k must lie in [0, 1], got {k}")));
    }
    if !(args.m.is_finite() && args.m >= 0.0 && args.gate > 0.0) {
        return Err(CliError::Usage("m must be >= 0 and gate > 0".into()));
    }
    let definition: FalseDetection = args.false_detection.into();

    let mut out = csv::Writer::from_writer(Vec::new());
    for &n in &sizes {
        for &dcp in &dcps {
            let noise_mean = n as f64 * dcp * args.gate;
            let p = DimensionlessParams {
                noise_mean,
                signal_mean: noise_mean + n as f64 * k * args.m,
                n_intervals: args.n_w,
                selection_size: Some(n),
            };
            p.validate()?;
            out.serialize(PdRow {
                n,
                dcp_hz: dcp,
                m: args.m,
                k,
                n_w: args.n_w,
                noise_mean: p.noise_mean,
                signal_mean: p.signal_mean,
                pd_full: pd_full(&p),
                pd_simplified: pd_simplified(&p),
                pe_false: pe_false_with(&p, definition),
                divergence: relative_divergence(&p),
                warning: regime_violation(&p).unwrap_or_default(),
            })
            .map_err(|e| CliError::Runtime(e.to_string()))?;
        }
    }
    let bytes = out
        .into_inner()
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    let params = PdParams {
        preset: args.preset.map(DetectorPreset::name),
        selection_sizes: &sizes,
        dcp_hz: &dcps,
        m: args.m,
        k,
        n_w: args.n_w,
        gate_s: args.gate,
        false_detection: definition,
    };
    emit_csv("pd", None, &params, &bytes, args.output.as_deref())
}

#[derive(Args)]
struct ScanArgs {
    /// TOML scan setup ([sync], [detector], mean_photons, optional signal_interval or onset_s).
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// clavis2-defaults, id210, id230 or saturated.
    #[arg(long)]
    preset: Option<String>,
    #[arg(long, default_value_t = 100_000)]
    trials: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Serialize)]
struct ScanParams<'a> {
    setup: &'a ScanSetup,
    trials: u64,
}

#[derive(Serialize)]
struct ScanOutput<'a> {
    manifest: RunManifest,
    setup: &'a ScanSetup,
    seed: u64,
    trials: u64,
    successes: u64,
    p_hat: f64,
    ci_level: f64,
    ci_low: f64,
    ci_high: f64,
    pd_full: f64,
    difference: f64,
    within_ci: bool,
    warnings: Vec<String>,
}

fn cmd_scan(args: &ScanArgs) -> CliResult<()> {
    let setup: ScanSetup = match (&args.config, &args.preset) {
        (Some(path), _) => config::load(path)?,
        (None, Some(name)) => presets::scan(name)?,
        (None, None) => presets::scan("clavis2-defaults")?,
    };
    let placement = setup.placement();
    let scanner = Scanner::new(&setup.sync, &placement, &setup.detector)?;
    let estimate = estimate_pd(
        &setup.sync,
        &placement,
        &setup.detector,
        args.trials,
        args.seed,
    )?;
    let analytic = pd_full(&map_physical(
        &setup.sync,
        &setup.detector,
        setup.mean_photons,
    )?);
    let mut warnings = scanner.warnings().to_vec();
    let split = scanner.split();
    if split.second_share > 0.0 {
        warnings.push(format!(
            "pulse straddles intervals {} and {}; pd_full assumes a contained pulse",
            split.first, split.second
        ));
    }
    let manifest = RunManifest::new(
        "scan",
        Some(args.seed),
        &ScanParams {
            setup: &setup,
            trials: args.trials,
        },
        args.output.as_deref(),
    );
    let report = ScanOutput {
        manifest,
        setup: &setup,
        seed: args.seed,
        trials: estimate.trials,
        successes: estimate.successes,
        p_hat: estimate.p_hat,
        ci_level: 0.95,
        ci_low: estimate.ci_low,
        ci_high: estimate.ci_high,
        pd_full: analytic,
        difference: estimate.p_hat - analytic,
        within_ci: (estimate.ci_low..=estimate.ci_high).contains(&analytic),
        warnings,
    };
    emit_json(&report, args.output.as_deref())
}

#[derive(Args)]
struct AttackArgs {
    /// TOML scenario ([channel], [sync], [stage], [legit_detector], [attacker_detector], [[couplers]], ...).
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// clean, paper or countermeasure.
    #[arg(long)]
    preset: Option<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Serialize)]
struct AttackOutput {
    #[serde(flatten)]
    report: ScenarioReport,
    manifest: RunManifest,
}

fn cmd_attack(args: &AttackArgs) -> CliResult<()> {
    let cfg: ScenarioConfig = match (&args.config, &args.preset) {
        (Some(path), _) => config::load(path)?,
        (None, Some(name)) => presets::scenario(name)?,
        (None, None) => presets::scenario("paper")?,
    };
    let report = run_scenario(&cfg, args.seed)?;
    let manifest = RunManifest::new("attack", Some(args.seed), &cfg, args.output.as_deref());
    emit_json(&AttackOutput { report, manifest }, args.output.as_deref())
}

#[derive(Args)]
struct ValidateArgs {
    /// Fast checks only (default).
    #[arg(long, conflicts_with = "full")]
    quick: bool,
    /// Add the Monte-Carlo comparisons and the figure discrepancy report.
    #[arg(long)]
    full: bool,
}

fn cmd_validate(args: &ValidateArgs) -> CliResult<bool> {
    let level = if args.full { Level::Full } else { Level::Quick };
    let checks = validate::run(level)?;
    let width = checks.iter().map(|c| c.name.len()).max().unwrap_or(0);
    let mut stdout = std::io::stdout().lock();
    for c in &checks {
        writeln!(
            stdout,
            "{}  {:<width$}  {}",
            if c.pass { "PASS" } else { "FAIL" },
            c.name,
            c.detail
        )?;
    }
    let failed = checks.iter().filter(|c| !c.pass).count();
    writeln!(
        stdout,
        "{} of {} checks passed",
        checks.len() - failed,
        checks.len()
    )?;
    Ok(failed == 0)
}

fn write_output(bytes: &[u8], output: Option<&Path>) -> CliResult<()> {
    match output {
        Some(path) => std::fs::write(path, bytes)
            .map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display()))),
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout.write_all(bytes)?;
            stdout.flush()?;
            Ok(())
        }
    }
}

fn emit_json(value: &impl Serialize, output: Option<&Path>) -> CliResult<()> {
    let mut text =
        serde_json::to_string_pretty(value).map_err(|e| CliError::Runtime(e.to_string()))?;
    text.push('\n');
    write_output(text.as_bytes(), output)
}

/// CSV cannot embed a manifest, so it goes to a sidecar next to the file.
/// On stdout the manifest is omitted to keep the stream plain CSV.
fn emit_csv(
    command: &str,
    seed: Option<u64>,
    params: &impl Serialize,
    bytes: &[u8],
    output: Option<&Path>,
) -> CliResult<()> {
    write_output(bytes, output)?;
    if let Some(path) = output {
        let manifest = RunManifest::new(command, seed, params, Some(path));
        emit_json(&manifest, Some(&sidecar_path(path)))?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Budget(a) => cmd_budget(a).map(|_| true),
        Command::Pd(a) => cmd_pd(a).map(|_| true),
        Command::Scan(a) => cmd_scan(a).map(|_| true),
        Command::Attack(a) => cmd_attack(a).map(|_| true),
        Command::Validate(a) => cmd_validate(a),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                CliError::Usage(_) => 2,
                CliError::Runtime(_) => 1,
            })
        }
    }
}
