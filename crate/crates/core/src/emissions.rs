//! Energy and CO2-equivalent estimates for training and inference.
//!
//! Power is sampled at a fixed interval while the tracked work runs. Each
//! sample's wattage holds until the next sample (or the end of the task), so
//! `energy_kwh = Σ watts_i · Δt_i / 3.6e6` and `emissions = energy · intensity`.
//! When live telemetry is unavailable the configured rated wattage is used
//! and the report is flagged.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::{mpsc, Mutex, OnceLock};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

pub const DEFAULT_CARBON_INTENSITY: f64 = 0.475;
pub const CARBON_INTENSITY_ENV: &str = "TDSUITE_CARBON_INTENSITY";
const JOULES_PER_KWH: f64 = 3.6e6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Training,
    Inference,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerProfile {
    pub device_power_watts: BTreeMap<String, f64>,
    pub sampling_interval_seconds: f64,
}

impl Default for PowerProfile {
    fn default() -> Self {
        Self {
            device_power_watts: BTreeMap::from([("cpu".to_string(), 65.0)]),
            sampling_interval_seconds: 5.0,
        }
    }
}

impl PowerProfile {
    pub fn rated_total(&self) -> f64 {
        self.device_power_watts.values().map(|w| w.max(0.0)).sum()
    }
}

/// Source of live power readings. `None` means telemetry is unavailable.
pub trait PowerMeter: Send + Sync {
    fn read_watts(&self) -> Option<f64>;
}

/// Always reports a fixed wattage.
#[derive(Debug, Clone, Copy)]
pub struct ConstantMeter(pub f64);

impl PowerMeter for ConstantMeter {
    fn read_watts(&self) -> Option<f64> {
        Some(self.0)
    }
}

/// Never has telemetry; forces the rated-wattage fallback.
#[derive(Debug, Clone, Copy)]
pub struct NoTelemetry;

impl PowerMeter for NoTelemetry {
    fn read_watts(&self) -> Option<f64> {
        None
    }
}

/// Linux RAPL package-energy counters under `/sys/class/powercap`.
/// Power is the counter delta over wall time since the previous reading.
pub struct RaplMeter {
    counters: Vec<PathBuf>,
    last: Mutex<Option<(Instant, u64)>>,
}

impl RaplMeter {
    pub fn detect() -> Option<Self> {
        Self::detect_in(Path::new("/sys/class/powercap"))
    }

    fn detect_in(root: &Path) -> Option<Self> {
        let mut counters: Vec<PathBuf> = std::fs::read_dir(root)
            .ok()?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| {
                p.file_name()
                    .and_then(|n| n.to_str())
                    .is_some_and(|n| n.starts_with("intel-rapl:") && n.matches(':').count() == 1)
            })
            .map(|p| p.join("energy_uj"))
            .filter(|p| std::fs::read_to_string(p).is_ok())
            .collect();
        counters.sort();
        if counters.is_empty() {
            return None;
        }
        let meter = Self {
            counters,
            last: Mutex::new(None),
        };
        let primed = meter.total_microjoules()?;
        *meter.last.lock().ok()? = Some((Instant::now(), primed));
        Some(meter)
    }

    fn total_microjoules(&self) -> Option<u64> {
        self.counters.iter().try_fold(0u64, |acc, p| {
            let v: u64 = std::fs::read_to_string(p).ok()?.trim().parse().ok()?;
            Some(acc + v)
        })
    }
}

impl PowerMeter for RaplMeter {
    fn read_watts(&self) -> Option<f64> {
        let now = Instant::now();
        let energy = self.total_microjoules()?;
        let mut last = self.last.lock().ok()?;
        let watts = match *last {
            Some((t, e)) if energy >= e => {
                let dt = now.duration_since(t).as_secs_f64();
                (dt > 0.0).then(|| (energy - e) as f64 / 1e6 / dt)
            }
            _ => None,
        };
        *last = Some((now, energy));
        watts
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmissionsReport {
    pub phase: Phase,
    pub duration_seconds: f64,
    pub energy_kwh: f64,
    pub emissions_kgco2e: f64,
    pub carbon_intensity_kgco2e_per_kwh: f64,
    #[serde(default)]
    pub telemetry_fallback: bool,
}

impl EmissionsReport {
    pub fn zero(phase: Phase, intensity: f64) -> Self {
        Self {
            phase,
            duration_seconds: 0.0,
            energy_kwh: 0.0,
            emissions_kgco2e: 0.0,
            carbon_intensity_kgco2e_per_kwh: intensity,
            telemetry_fallback: false,
        }
    }

    /// Integrates `(elapsed_seconds, watts)` samples over `duration`. Each
    /// sample holds until the next one; samples at or past `duration` are
    /// ignored.
    pub fn from_samples(
        phase: Phase,
        samples: &[(f64, f64)],
        duration_seconds: f64,
        intensity: f64,
        telemetry_fallback: bool,
    ) -> Self {
        let duration = duration_seconds.max(0.0);
        let mut joules = 0.0;
        for (i, &(t, watts)) in samples.iter().enumerate() {
            if t >= duration {
                break;
            }
            let end = samples.get(i + 1).map_or(duration, |s| s.0.min(duration));
            joules += watts.max(0.0) * (end - t).max(0.0);
        }
        let energy_kwh = joules / JOULES_PER_KWH;
        Self {
            phase,
            duration_seconds: duration,
            energy_kwh,
            emissions_kgco2e: energy_kwh * intensity.max(0.0),
            carbon_intensity_kgco2e_per_kwh: intensity.max(0.0),
            telemetry_fallback,
        }
    }

    /// Sums two reports of the same phase; the intensity of `self` is kept.
    pub fn combine(&self, other: &EmissionsReport) -> Self {
        Self {
            phase: self.phase,
            duration_seconds: self.duration_seconds + other.duration_seconds,
            energy_kwh: self.energy_kwh + other.energy_kwh,
            emissions_kgco2e: self.emissions_kgco2e + other.emissions_kgco2e,
            carbon_intensity_kgco2e_per_kwh: self.carbon_intensity_kgco2e_per_kwh,
            telemetry_fallback: self.telemetry_fallback || other.telemetry_fallback,
        }
    }
}

/// Where readings come from and how energy turns into emissions.
#[derive(Clone)]
pub struct EmissionsConfig {
    pub profile: PowerProfile,
    pub intensity: f64,
    pub meter: std::sync::Arc<dyn PowerMeter>,
}

impl std::fmt::Debug for EmissionsConfig {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("EmissionsConfig")
            .field("profile", &self.profile)
            .field("intensity", &self.intensity)
            .finish_non_exhaustive()
    }
}

impl Default for EmissionsConfig {
    fn default() -> Self {
        let meter: std::sync::Arc<dyn PowerMeter> = match RaplMeter::detect() {
            Some(m) => std::sync::Arc::new(m),
            None => std::sync::Arc::new(NoTelemetry),
        };
        Self {
            profile: PowerProfile::default(),
            intensity: DEFAULT_CARBON_INTENSITY,
            meter,
        }
    }
}

impl EmissionsConfig {
    pub fn with_meter(meter: std::sync::Arc<dyn PowerMeter>) -> Self {
        Self {
            profile: PowerProfile::default(),
            intensity: DEFAULT_CARBON_INTENSITY,
            meter,
        }
    }

    /// Default config with the intensity taken from `TDSUITE_CARBON_INTENSITY`
    /// when set to a non-negative number.
    pub fn from_env() -> Self {
        let mut config = Self::default();
        if let Some(v) = std::env::var(CARBON_INTENSITY_ENV)
            .ok()
            .and_then(|v| v.trim().parse::<f64>().ok())
            .filter(|v| *v >= 0.0 && v.is_finite())
        {
            config.intensity = v;
        }
        config
    }

    pub fn track<T>(&self, phase: Phase, work: impl FnOnce() -> T) -> (T, EmissionsReport) {
        track(phase, &self.profile, self.intensity, self.meter.as_ref(), work)
    }
}

/// Runs `work` while a sampler thread reads `meter` every
/// `profile.sampling_interval_seconds`.
pub fn track<T>(
    phase: Phase,
    profile: &PowerProfile,
    intensity: f64,
    meter: &dyn PowerMeter,
    work: impl FnOnce() -> T,
) -> (T, EmissionsReport) {
    let interval = Duration::from_secs_f64(profile.sampling_interval_seconds.max(1e-3));
    let rated = profile.rated_total();
    let start = Instant::now();
    let (stop_tx, stop_rx) = mpsc::channel::<()>();
    let (result, samples, fallback) = std::thread::scope(|scope| {
        let sampler = scope.spawn(move || {
            let mut samples = Vec::new();
            let mut fallback = false;
            loop {
                let t = start.elapsed().as_secs_f64();
                let watts = match meter.read_watts() {
                    Some(w) if w.is_finite() && w >= 0.0 => w,
                    _ => {
                        fallback = true;
                        rated
                    }
                };
                samples.push((t, watts));
                match stop_rx.recv_timeout(interval) {
                    Err(mpsc::RecvTimeoutError::Timeout) => continue,
                    _ => break,
                }
            }
            (samples, fallback)
        });
        let result = work();
        let _ = stop_tx.send(());
        let (samples, fallback) = sampler.join().expect("sampler thread panicked");
        (result, samples, fallback)
    });
    let duration = start.elapsed().as_secs_f64();
    if fallback {
        static WARNED: std::sync::Once = std::sync::Once::new();
        WARNED.call_once(|| log::warn!("power telemetry unavailable; using rated {rated} W"));
    }
    let mut samples = samples;
    if samples.first().is_some_and(|s| s.0 > 0.0) {
        samples[0].0 = 0.0;
    }
    let report = EmissionsReport::from_samples(phase, &samples, duration, intensity, fallback);
    (result, report)
}

/// Thread-safe running totals per phase.
#[derive(Debug, Default)]
pub struct EmissionsAggregator {
    totals: Mutex<BTreeMap<String, EmissionsReport>>,
}

impl EmissionsAggregator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&self, report: &EmissionsReport) {
        let key = format!("{:?}", report.phase);
        let mut totals = self.totals.lock().expect("aggregator poisoned");
        totals
            .entry(key)
            .and_modify(|t| *t = t.combine(report))
            .or_insert_with(|| report.clone());
    }

    pub fn total(&self, phase: Phase) -> Option<EmissionsReport> {
        let totals = self.totals.lock().expect("aggregator poisoned");
        totals.get(&format!("{phase:?}")).cloned()
    }
}

/// Process-wide aggregator.
pub fn global_aggregator() -> &'static EmissionsAggregator {
    static GLOBAL: OnceLock<EmissionsAggregator> = OnceLock::new();
    GLOBAL.get_or_init(EmissionsAggregator::new)
}

/// Two-row table (emissions, duration) with one column per named report.
pub fn emissions_table(columns: &[(&str, &EmissionsReport)]) -> String {
    let label_width = 18;
    let widths: Vec<usize> = columns.iter().map(|(n, _)| n.len().max(10)).collect();
    let mut out = String::new();
    let _ = write!(out, "{:<label_width$}", "Parameter");
    for ((name, _), w) in columns.iter().zip(&widths) {
        let _ = write!(out, "  {name:>w$}");
    }
    out.push('\n');
    let _ = write!(out, "{:<label_width$}", "Emissions (kgCO2e)");
    for ((_, r), w) in columns.iter().zip(&widths) {
        let _ = write!(out, "  {:>w$.5}", r.emissions_kgco2e);
    }
    out.push('\n');
    let _ = write!(out, "{:<label_width$}", "Duration (s)");
    for ((_, r), w) in columns.iter().zip(&widths) {
        let _ = write!(out, "  {:>w$.2}", r.duration_seconds);
    }
    out.push('\n');
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn constant(watts: f64, seconds: u32, interval: u32) -> Vec<(f64, f64)> {
        (0..seconds).step_by(interval as usize).map(|t| (t as f64, watts)).collect()
    }

    #[test]
    fn hundred_watts_for_an_hour() {
        let r = EmissionsReport::from_samples(Phase::Training, &constant(100.0, 3600, 5), 3600.0, 0.5, false);
        assert_eq!(r.energy_kwh, 0.1);
        assert_eq!(r.emissions_kgco2e, 0.05);
    }

    #[test]
    fn zero_duration_is_all_zero() {
        let r = EmissionsReport::from_samples(Phase::Inference, &[(0.0, 100.0)], 0.0, 0.5, false);
        assert_eq!((r.duration_seconds, r.energy_kwh, r.emissions_kgco2e), (0.0, 0.0, 0.0));
    }

    #[test]
    fn zero_intensity_zero_emissions() {
        let r = EmissionsReport::from_samples(Phase::Training, &constant(300.0, 60, 5), 60.0, 0.0, false);
        assert!(r.energy_kwh > 0.0);
        assert_eq!(r.emissions_kgco2e, 0.0);
    }

    #[test]
    fn partial_last_interval_is_truncated() {
        let r = EmissionsReport::from_samples(Phase::Training, &[(0.0, 10.0), (5.0, 20.0)], 7.0, 1.0, false);
        assert!((r.energy_kwh * JOULES_PER_KWH - (50.0 + 40.0)).abs() < 1e-9);
    }

    #[test]
    fn live_tracking_falls_back_to_rated_power() {
        let profile = PowerProfile {
            device_power_watts: BTreeMap::from([("cpu".into(), 40.0), ("gpu".into(), 60.0)]),
            sampling_interval_seconds: 0.01,
        };
        let (value, report) = track(Phase::Training, &profile, 0.475, &NoTelemetry, || {
            std::thread::sleep(Duration::from_millis(30));
            7
        });
        assert_eq!(value, 7);
        assert!(report.telemetry_fallback);
        let expected = 100.0 * report.duration_seconds / JOULES_PER_KWH;
        assert!((report.energy_kwh - expected).abs() < 1e-12);
    }

    #[test]
    fn live_tracking_uses_meter() {
        let profile = PowerProfile {
            sampling_interval_seconds: 0.005,
            ..PowerProfile::default()
        };
        let (_, report) = track(Phase::Inference, &profile, 1.0, &ConstantMeter(250.0), || {
            std::thread::sleep(Duration::from_millis(20));
        });
        assert!(!report.telemetry_fallback);
        let expected = 250.0 * report.duration_seconds / JOULES_PER_KWH;
        assert!((report.energy_kwh - expected).abs() < 1e-12);
        assert_eq!(report.emissions_kgco2e, report.energy_kwh);
    }

    #[test]
    fn aggregator_sums_per_phase() {
        let agg = EmissionsAggregator::new();
        let a = EmissionsReport::from_samples(Phase::Training, &constant(100.0, 10, 5), 10.0, 1.0, false);
        std::thread::scope(|s| {
            for _ in 0..4 {
                s.spawn(|| agg.add(&a));
            }
        });
        let total = agg.total(Phase::Training).unwrap();
        assert!((total.energy_kwh - 4.0 * a.energy_kwh).abs() < 1e-15);
        assert!(agg.total(Phase::Inference).is_none());
    }

    #[test]
    fn table_has_two_data_rows() {
        let r = EmissionsReport::from_samples(Phase::Training, &constant(100.0, 10, 5), 10.0, 1.0, false);
        let t = emissions_table(&[("model", &r)]);
        let lines: Vec<_> = t.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[1].starts_with("Emissions (kgCO2e)"));
        assert!(lines[2].starts_with("Duration (s)"));
    }

    #[test]
    fn rapl_detection_on_fake_tree() {
        let dir = tempfile::tempdir().unwrap();
        let pkg = dir.path().join("intel-rapl:0");
        std::fs::create_dir_all(&pkg).unwrap();
        std::fs::write(pkg.join("energy_uj"), "1000000\n").unwrap();
        std::fs::create_dir_all(dir.path().join("intel-rapl:0:0")).unwrap();
        let meter = RaplMeter::detect_in(dir.path()).unwrap();
        assert_eq!(meter.counters.len(), 1);
        std::thread::sleep(Duration::from_millis(10));
        std::fs::write(pkg.join("energy_uj"), "2000000\n").unwrap();
        let w = meter.read_watts().unwrap();
        assert!(w > 0.0);
        assert!(RaplMeter::detect_in(&dir.path().join("missing")).is_none());
    }
}
