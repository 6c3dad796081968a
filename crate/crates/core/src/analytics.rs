//! Closed-form detection probabilities for the interval scan.
//!
//! With Poisson counts of mean `λ_w` in the signal interval and `λ_d` in each
//! of the `N_w − 1` noise intervals, the scan locks correctly when the signal
//! count strictly exceeds every noise count:
//!
//! ```text
//! P_D = Σ_{s≥1} Pois(s; λ_w) · F_d(s−1)^(N_w−1)
//! ```
//!
//! where `F_d` is the noise CDF. The simplified form keeps only the 0 and 1
//! terms of `F_d`, which leaves a relative error of roughly
//! `(N_w − 1)·λ_d²/2` (see [`divergence_audit`]).

use serde::{Deserialize, Serialize};

use crate::detector::DetectorParams;
use crate::error::{invalid, Result};
use crate::stats::CompensatedSum;
use crate::sync_scan::SyncConfig;

/// Tail mass below which infinite sums are cut.
pub const TAIL_EPSILON: f64 = 1e-15;

/// Largest relative divergence between the full and simplified forms that the audit accepts.
pub const DIVERGENCE_LIMIT: f64 = 2e-4;

/// Largest noise mean the audit evaluates.
pub const REGIME_MAX_NOISE_MEAN: f64 = 0.01;

/// Largest per-gate signal mean the audit evaluates when the selection size is known.
pub const REGIME_MAX_PER_GATE_SIGNAL: f64 = 0.1;

/// Inputs of the probability engine.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DimensionlessParams {
    /// Expected noise registrations per interval over the whole selection.
    pub noise_mean: f64,
    /// Expected registrations in the signal interval, noise included.
    pub signal_mean: f64,
    pub n_intervals: u64,
    /// Selection size, when the parameters came from a physical setup.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub selection_size: Option<u32>,
}

impl DimensionlessParams {
    pub fn new(noise_mean: f64, signal_mean: f64, n_intervals: u64) -> Result<Self> {
        let p = Self {
            noise_mean,
            signal_mean,
            n_intervals,
            selection_size: None,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.noise_mean.is_finite() && self.noise_mean >= 0.0) {
            return Err(invalid(format!(
                "noise mean must be >= 0, got {}",
                self.noise_mean
            )));
        }
        if !(self.signal_mean.is_finite() && self.signal_mean >= self.noise_mean) {
            return Err(invalid(format!(
                "signal mean {} must be >= noise mean {}",
                self.signal_mean, self.noise_mean
            )));
        }
        if self.n_intervals < 2 {
            return Err(invalid("at least two intervals are required"));
        }
        Ok(())
    }

    /// Signal registrations per gate, when the selection size is known.
    pub fn per_gate_signal(&self) -> Option<f64> {
        self.selection_size
            .map(|n| (self.signal_mean - self.noise_mean) / n as f64)
    }
}

/// Physical setup to dimensionless parameters: `λ_d = N·R·t_gate`,
/// `λ_w = λ_d + N·k·m`.
pub fn map_physical(
    sync: &SyncConfig,
    det: &DetectorParams,
    m: f64,
) -> Result<DimensionlessParams> {
    if !(m.is_finite() && m >= 0.0) {
        return Err(invalid(format!("mean photon number must be >= 0, got {m}")));
    }
    let n = sync.selection_size as f64;
    let noise_mean = n * det.dark_rate_hz * det.gate_width_s;
    let p = DimensionlessParams {
        noise_mean,
        signal_mean: noise_mean + n * det.quantum_efficiency * m,
        n_intervals: sync.n_intervals as u64,
        selection_size: Some(sync.selection_size),
    };
    p.validate()?;
    Ok(p)
}

/// Poisson probabilities with forward CDF and backward-summed upper tails.
#[derive(Debug, Clone)]
struct PoissonTable {
    pmf: Vec<f64>,
    cdf: Vec<f64>,
    /// `tail[t] = P(X > t)`
    tail: Vec<f64>,
}

impl PoissonTable {
    /// Table covering at least `0..min_len`, extended until the remaining mass is negligible.
    fn new(lambda: f64, min_len: usize) -> Self {
        let mut pmf = Vec::with_capacity(min_len.max(16));
        if lambda == 0.0 {
            pmf.push(1.0);
            pmf.resize(min_len.max(1), 0.0);
        } else {
            let ln_lambda = lambda.ln();
            let mut ln_p = -lambda;
            let mut k = 0usize;
            loop {
                let p = ln_p.exp();
                pmf.push(p);
                if k + 1 >= min_len && (k as f64) > lambda && p < 1e-40 {
                    break;
                }
                k += 1;
                ln_p += ln_lambda - (k as f64).ln();
            }
        }
        let len = pmf.len();
        let mut cdf = Vec::with_capacity(len);
        let mut acc = CompensatedSum::new();
        for &p in &pmf {
            acc.add(p);
            cdf.push(acc.value().min(1.0));
        }
        let mut tail = vec![0.0; len];
        let mut acc = CompensatedSum::new();
        for t in (0..len.saturating_sub(1)).rev() {
            acc.add(pmf[t + 1]);
            tail[t] = acc.value();
        }
        Self { pmf, cdf, tail }
    }

    fn pmf(&self, k: usize) -> f64 {
        self.pmf.get(k).copied().unwrap_or(0.0)
    }

    fn cdf(&self, t: usize) -> f64 {
        self.cdf.get(t).copied().unwrap_or(1.0)
    }

    fn tail(&self, t: usize) -> f64 {
        self.tail.get(t).copied().unwrap_or(0.0)
    }

    /// `ln P(X <= t)`, accurate when the CDF is close to one.
    fn ln_cdf(&self, t: usize) -> f64 {
        let tail = self.tail(t);
        if tail < 0.5 {
            (-tail).ln_1p()
        } else {
            self.cdf(t).ln()
        }
    }

    /// `P(X <= t)^power` for a possibly huge power.
    fn cdf_pow(&self, t: usize, power: f64) -> f64 {
        if power == 0.0 {
            return 1.0;
        }
        (power * self.ln_cdf(t)).exp()
    }
}

/// First index `s` past the mode where the Poisson tail beyond `s` is below `eps`.
fn truncation_point(lambda: f64, eps: f64) -> usize {
    if lambda == 0.0 {
        return 1;
    }
    let ln_lambda = lambda.ln();
    let mut ln_p = -lambda;
    let mut s = 0usize;
    loop {
        let next = (s + 1) as f64;
        if next > lambda {
            // Tail past s is bounded by a geometric series with ratio λ/(s+2).
            let ln_next = ln_p + ln_lambda - next.ln();
            let ratio = lambda / (next + 1.0);
            if ln_next.exp() / (1.0 - ratio) < eps {
                return s;
            }
        }
        s += 1;
        ln_p += ln_lambda - (s as f64).ln();
    }
}

/// `F_d(s)^(N_w − 1)`: probability that every noise interval holds at most `s`.
pub fn noise_cdf_power(p: &DimensionlessParams, threshold: u64) -> f64 {
    let table = PoissonTable::new(p.noise_mean, threshold as usize + 2);
    table.cdf_pow(threshold as usize, (p.n_intervals - 1) as f64)
}

/// Probability that the signal interval holds the unique largest count.
pub fn pd_full(p: &DimensionlessParams) -> f64 {
    if p.signal_mean == 0.0 {
        return 0.0;
    }
    let s_max = truncation_point(p.signal_mean, TAIL_EPSILON).max(1);
    let signal = PoissonTable::new(p.signal_mean, s_max + 1);
    let noise = PoissonTable::new(p.noise_mean, s_max + 1);
    let power = (p.n_intervals - 1) as f64;
    let mut acc = CompensatedSum::new();
    for s in 1..=s_max {
        acc.add(signal.pmf(s) * noise.cdf_pow(s - 1, power));
    }
    acc.value().clamp(0.0, 1.0)
}

/// Two-term truncation of the noise CDF applied to [`pd_full`].
pub fn pd_simplified(p: &DimensionlessParams) -> f64 {
    let w = p.signal_mean;
    let d = p.noise_mean;
    let power = (p.n_intervals - 1) as f64;
    let e_w = (-w).exp();
    let one_count = w * e_w;
    let two_or_more = (-(-w).exp_m1() - one_count).max(0.0);
    let all_noise_zero = (-power * d).exp();
    // e^{-(N_w-1)λ_d}·(1+λ_d)^{N_w-1}
    let noise_at_most_one = (power * (d.ln_1p() - d)).exp();
    (all_noise_zero * one_count + two_or_more * noise_at_most_one).clamp(0.0, 1.0)
}

/// What counts as an erroneous lock.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FalseDetection {
    /// A noise interval holds the unique largest count.
    #[default]
    UniqueNoiseArgmax,
    /// Some noise interval reaches at least the signal count.
    NoiseAtLeastSignal,
}

/// Probability that the scan locks onto a noise interval.
pub fn pe_false(p: &DimensionlessParams) -> f64 {
    pe_false_with(p, FalseDetection::UniqueNoiseArgmax)
}

pub fn pe_false_with(p: &DimensionlessParams, definition: FalseDetection) -> f64 {
    match definition {
        FalseDetection::NoiseAtLeastSignal => 1.0 - pd_full(p),
        FalseDetection::UniqueNoiseArgmax => {
            if p.noise_mean == 0.0 {
                return 0.0;
            }
            let others = (p.n_intervals - 1) as f64;
            let t_max = truncation_point(p.noise_mean, TAIL_EPSILON / others).max(1);
            let noise = PoissonTable::new(p.noise_mean, t_max + 1);
            let signal = PoissonTable::new(p.signal_mean, t_max + 1);
            let mut acc = CompensatedSum::new();
            for t in 1..=t_max {
                acc.add(
                    others * noise.pmf(t) * noise.cdf_pow(t - 1, others - 1.0) * signal.cdf(t - 1),
                );
            }
            acc.value().clamp(0.0, 1.0)
        }
    }
}

/// Probability that the largest count is shared (including the all-zero scan).
pub fn p_ambiguous(p: &DimensionlessParams) -> f64 {
    let others = (p.n_intervals - 1) as f64;
    let t_max = truncation_point(p.signal_mean, TAIL_EPSILON)
        .max(truncation_point(p.noise_mean, TAIL_EPSILON / others))
        .max(1);
    let signal = PoissonTable::new(p.signal_mean, t_max + 1);
    let noise = PoissonTable::new(p.noise_mean, t_max + 1);
    let max_at_most = |t: usize| signal.cdf(t) * noise.cdf_pow(t, others);
    let mut acc = CompensatedSum::new();
    let mut prev = 0.0;
    for t in 0..=t_max {
        let upto = max_at_most(t);
        let max_is_t = upto - prev;
        prev = upto;
        let unique = if t == 0 {
            0.0
        } else {
            signal.pmf(t) * noise.cdf_pow(t - 1, others)
                + others * noise.pmf(t) * noise.cdf_pow(t - 1, others - 1.0) * signal.cdf(t - 1)
        };
        acc.add(max_is_t - unique);
    }
    acc.value().clamp(0.0, 1.0)
}

/// Exact probability of a correct lock when each gate is Bernoulli:
/// `Binomial(N, p_signal)` in the signal interval and `Binomial(N, p_noise)`
/// in each noise interval. This is what the Monte-Carlo scan samples.
pub fn pd_bernoulli_gates(
    selection_size: u32,
    p_signal: f64,
    p_noise: f64,
    n_intervals: u64,
) -> Result<f64> {
    for (name, v) in [("p_signal", p_signal), ("p_noise", p_noise)] {
        if !(0.0..=1.0).contains(&v) {
            return Err(invalid(format!("{name} must lie in [0, 1], got {v}")));
        }
    }
    if n_intervals < 2 {
        return Err(invalid("at least two intervals are required"));
    }
    let n = selection_size as usize;
    let signal = binomial_pmf(n, p_signal);
    let noise = binomial_pmf(n, p_noise);
    // ln P(noise <= t) via backward tails.
    let mut tail = vec![0.0; n + 1];
    let mut acc = CompensatedSum::new();
    for t in (0..n).rev() {
        acc.add(noise[t + 1]);
        tail[t] = acc.value();
    }
    let power = (n_intervals - 1) as f64;
    let mut total = CompensatedSum::new();
    for s in 1..=n {
        let below = tail[s - 1];
        let ln_cdf = if below < 0.5 {
            (-below).ln_1p()
        } else {
            noise[..s].iter().sum::<f64>().ln()
        };
        total.add(signal[s] * (power * ln_cdf).exp());
    }
    Ok(total.value().clamp(0.0, 1.0))
}

fn binomial_pmf(n: usize, p: f64) -> Vec<f64> {
    let mut out = vec![0.0; n + 1];
    if p == 0.0 {
        out[0] = 1.0;
        return out;
    }
    if p == 1.0 {
        out[n] = 1.0;
        return out;
    }
    let (ln_p, ln_q) = (p.ln(), (-p).ln_1p());
    let mut ln_choose = 0.0;
    for (k, slot) in out.iter_mut().enumerate() {
        if k > 0 {
            ln_choose += ((n - k + 1) as f64).ln() - (k as f64).ln();
        }
        *slot = (ln_choose + k as f64 * ln_p + (n - k) as f64 * ln_q).exp();
    }
    out
}

/// `|pd_full − pd_simplified| / pd_full`, zero when both vanish.
pub fn relative_divergence(p: &DimensionlessParams) -> f64 {
    let full = pd_full(p);
    let simplified = pd_simplified(p);
    if full == 0.0 {
        if simplified == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        (full - simplified).abs() / full
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditRow {
    pub params: DimensionlessParams,
    pub pd_full: f64,
    pub pd_simplified: f64,
    pub divergence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefusedPoint {
    pub params: DimensionlessParams,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DivergenceAudit {
    pub rows: Vec<AuditRow>,
    pub refused: Vec<RefusedPoint>,
    pub max_divergence: f64,
    pub argmax: Option<DimensionlessParams>,
    /// Evaluated points above [`DIVERGENCE_LIMIT`].
    pub exceedances: usize,
    pub pass: bool,
}

/// Why `p` lies outside the regime where the simplified form is meant to apply.
pub fn regime_violation(p: &DimensionlessParams) -> Option<String> {
    if p.noise_mean > REGIME_MAX_NOISE_MEAN {
        return Some(format!(
            "noise mean {} exceeds {}",
            p.noise_mean, REGIME_MAX_NOISE_MEAN
        ));
    }
    match p.per_gate_signal() {
        Some(g) if g > REGIME_MAX_PER_GATE_SIGNAL => Some(format!(
            "per-gate signal mean {g} exceeds {REGIME_MAX_PER_GATE_SIGNAL}"
        )),
        _ => None,
    }
}

/// Compares [`pd_full`] and [`pd_simplified`] over `grid`. Points outside the
/// validity regime are refused rather than evaluated.
pub fn divergence_audit(grid: &[DimensionlessParams]) -> Result<DivergenceAudit> {
    if grid.is_empty() {
        return Err(invalid("audit grid is empty"));
    }
    let mut rows = Vec::new();
    let mut refused = Vec::new();
    for p in grid {
        p.validate()?;
        if let Some(reason) = regime_violation(p) {
            refused.push(RefusedPoint { params: *p, reason });
            continue;
        }
        rows.push(AuditRow {
            params: *p,
            pd_full: pd_full(p),
            pd_simplified: pd_simplified(p),
            divergence: relative_divergence(p),
        });
    }
    let worst = rows
        .iter()
        .max_by(|a, b| a.divergence.total_cmp(&b.divergence));
    let max_divergence = worst.map_or(0.0, |r| r.divergence);
    let argmax = worst.map(|r| r.params);
    let exceedances = rows
        .iter()
        .filter(|r| !(r.divergence <= DIVERGENCE_LIMIT))
        .count();
    Ok(DivergenceAudit {
        pass: !rows.is_empty() && exceedances == 0,
        rows,
        refused,
        max_divergence,
        argmax,
        exceedances,
    })
}

/// Interval counts 1e2..1e6, noise means 1e-6..1e-2 (nine log-spaced
/// values), signal means 0.1..6.
pub fn default_audit_grid() -> Vec<DimensionlessParams> {
    let intervals = [100u64, 1_000, 10_000, 100_000, 1_000_000];
    let noise: Vec<f64> = (0..9).map(|i| 10f64.powf(-6.0 + 0.5 * i as f64)).collect();
    let signal: [f64; 6] = [0.1, 0.5, 1.0, 2.0, 4.0, 6.0];
    let mut grid = Vec::with_capacity(intervals.len() * noise.len() * signal.len());
    for &n_intervals in &intervals {
        for &noise_mean in &noise {
            for &signal_mean in &signal {
                grid.push(DimensionlessParams {
                    noise_mean,
                    signal_mean: signal_mean.max(noise_mean),
                    n_intervals,
                    selection_size: None,
                });
            }
        }
    }
    grid
}
