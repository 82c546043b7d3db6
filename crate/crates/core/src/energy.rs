//! Per-device power sampling, trapezoidal energy integration and per-mille
//! device shares.
//!
//! Samplers are pluggable. Tests use [`SyntheticSampler`] on a virtual
//! clock; [`HostSampler`] reads RAPL counters and `nvidia-smi` when present
//! and reports missing devices as unavailable.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::str::FromStr;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::numeric::{percent_change, round_dp};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Device {
    Cpu,
    Gpu,
    Ram,
}

impl Device {
    pub const ALL: [Device; 3] = [Device::Cpu, Device::Gpu, Device::Ram];
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum Phase {
    Training,
    Inference,
    InferenceRag,
    Custom(String),
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Phase::Training => f.write_str("training"),
            Phase::Inference => f.write_str("inference"),
            Phase::InferenceRag => f.write_str("inference_rag"),
            Phase::Custom(s) => f.write_str(s),
        }
    }
}

impl FromStr for Phase {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Ok(match s {
            "training" => Phase::Training,
            "inference" => Phase::Inference,
            "inference_rag" => Phase::InferenceRag,
            "" => return Err("empty phase name".into()),
            other => Phase::Custom(other.to_string()),
        })
    }
}

impl From<Phase> for String {
    fn from(p: Phase) -> String {
        p.to_string()
    }
}

impl TryFrom<String> for Phase {
    type Error = String;
    fn try_from(s: String) -> Result<Self, String> {
        s.parse()
    }
}

/// One reading. `None` marks a device the sampler cannot measure.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerSample {
    /// Seconds since the phase started.
    pub t_s: f64,
    pub cpu_w: Option<f64>,
    pub gpu_w: Option<f64>,
    pub ram_w: Option<f64>,
}

impl PowerSample {
    pub fn new(t_s: f64, cpu_w: f64, gpu_w: f64, ram_w: f64) -> Self {
        PowerSample { t_s, cpu_w: Some(cpu_w), gpu_w: Some(gpu_w), ram_w: Some(ram_w) }
    }

    pub fn get(&self, d: Device) -> Option<f64> {
        match d {
            Device::Cpu => self.cpu_w,
            Device::Gpu => self.gpu_w,
            Device::Ram => self.ram_w,
        }
    }

    pub fn scaled(&self, c: f64) -> Self {
        PowerSample {
            t_s: self.t_s,
            cpu_w: self.cpu_w.map(|w| w * c),
            gpu_w: self.gpu_w.map(|w| w * c),
            ram_w: self.ram_w.map(|w| w * c),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct DeviceWh {
    pub cpu: f64,
    pub gpu: f64,
    pub ram: f64,
}

impl DeviceWh {
    pub fn total(&self) -> f64 {
        self.cpu + self.gpu + self.ram
    }

    pub fn get(&self, d: Device) -> f64 {
        match d {
            Device::Cpu => self.cpu,
            Device::Gpu => self.gpu,
            Device::Ram => self.ram,
        }
    }

    fn slot(&mut self, d: Device) -> &mut f64 {
        match d {
            Device::Cpu => &mut self.cpu,
            Device::Gpu => &mut self.gpu,
            Device::Ram => &mut self.ram,
        }
    }
}

/// Device shares of the total, scaled to 1000 and rounded to one decimal.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerMille {
    pub cpu: f64,
    pub gpu: f64,
    pub ram: f64,
}

impl PerMille {
    pub fn sum(&self) -> f64 {
        self.cpu + self.gpu + self.ram
    }
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum EnergyError {
    #[error("need at least 2 samples to integrate, got {0}")]
    TooFewSamples(usize),
    #[error("timestamps must strictly increase (sample {index})")]
    NonMonotonic { index: usize },
    #[error("invalid power value at sample {index}")]
    InvalidPower { index: usize },
    #[error("total energy is zero")]
    ZeroTotal,
    #[error("baseline energy must be positive")]
    NonPositiveBaseline,
    #[error("sampling interval must be positive")]
    ZeroInterval,
    #[error("sampler failed: {0}")]
    Sampler(String),
}

/// Trapezoidal integral of each device's power, in watt-hours. Devices
/// missing from every sample integrate to `None`; a device missing from
/// some samples contributes only over intervals where both ends are known.
pub fn integrate_trace(samples: &[PowerSample]) -> Result<[Option<f64>; 3], EnergyError> {
    if samples.len() < 2 {
        return Err(EnergyError::TooFewSamples(samples.len()));
    }
    for (i, s) in samples.iter().enumerate() {
        if !s.t_s.is_finite() || (i > 0 && s.t_s <= samples[i - 1].t_s) {
            return Err(EnergyError::NonMonotonic { index: i });
        }
        if Device::ALL.iter().any(|d| s.get(*d).is_some_and(|w| !w.is_finite() || w < 0.0)) {
            return Err(EnergyError::InvalidPower { index: i });
        }
    }
    Ok(Device::ALL.map(|d| {
        let mut seen = false;
        let mut joules = 0.0;
        for w in samples.windows(2) {
            if let (Some(a), Some(b)) = (w[0].get(d), w[1].get(d)) {
                seen = true;
                joules += 0.5 * (a + b) * (w[1].t_s - w[0].t_s);
            }
        }
        seen.then_some(joules / 3600.0)
    }))
}

pub fn per_mille_shares(wh: &DeviceWh) -> Result<PerMille, EnergyError> {
    let total = wh.total();
    if total <= 0.0 || !total.is_finite() {
        return Err(EnergyError::ZeroTotal);
    }
    let share = |x: f64| round_dp(1000.0 * x / total, 1);
    Ok(PerMille { cpu: share(wh.cpu), gpu: share(wh.gpu), ram: share(wh.ram) })
}

/// Relative change of `b` over baseline `a`, percent at 2 decimals.
pub fn phase_overhead(a_total_wh: f64, b_total_wh: f64) -> Result<f64, EnergyError> {
    if a_total_wh <= 0.0 || a_total_wh.is_nan() {
        return Err(EnergyError::NonPositiveBaseline);
    }
    Ok(round_dp(percent_change(a_total_wh, b_total_wh), 2))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyReport {
    pub phase: Phase,
    pub duration_s: f64,
    pub samples: usize,
    pub total_wh: f64,
    pub per_device_wh: DeviceWh,
    /// `None` when nothing measurable was recorded.
    pub per_mille: Option<PerMille>,
    pub unavailable: Vec<Device>,
    pub partial: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub partial_reason: Option<String>,
}

impl EnergyReport {
    pub fn from_trace(phase: Phase, samples: &[PowerSample]) -> Result<Self, EnergyError> {
        let integrated = integrate_trace(samples)?;
        let mut per_device_wh = DeviceWh::default();
        let mut unavailable = Vec::new();
        for (d, wh) in Device::ALL.into_iter().zip(integrated) {
            match wh {
                Some(v) => *per_device_wh.slot(d) = v,
                None => unavailable.push(d),
            }
        }
        Ok(EnergyReport {
            phase,
            duration_s: samples[samples.len() - 1].t_s - samples[0].t_s,
            samples: samples.len(),
            total_wh: per_device_wh.total(),
            per_mille: per_mille_shares(&per_device_wh).ok(),
            per_device_wh,
            unavailable,
            partial: false,
            partial_reason: None,
        })
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PowerReading {
    pub cpu_w: Option<f64>,
    pub gpu_w: Option<f64>,
    pub ram_w: Option<f64>,
}

pub trait PowerSampler: Send {
    /// Reads instantaneous power; `t_s` is the tracker's clock.
    fn sample(&mut self, t_s: f64) -> Result<PowerReading, String>;
}

/// Deterministic sampler computing power from the clock.
pub struct SyntheticSampler<F>(pub F);

impl<F> PowerSampler for SyntheticSampler<F>
where
    F: FnMut(f64) -> Result<PowerReading, String> + Send,
{
    fn sample(&mut self, t_s: f64) -> Result<PowerReading, String> {
        (self.0)(t_s)
    }
}

/// Constant power on every device.
pub fn constant_sampler(cpu_w: f64, gpu_w: f64, ram_w: f64) -> impl PowerSampler {
    SyntheticSampler(move |_| Ok(PowerReading { cpu_w: Some(cpu_w), gpu_w: Some(gpu_w), ram_w: Some(ram_w) }))
}

fn to_sample(t_s: f64, r: PowerReading) -> PowerSample {
    PowerSample { t_s, cpu_w: r.cpu_w, gpu_w: r.gpu_w, ram_w: r.ram_w }
}

/// Samples on a virtual clock at `0, interval, 2*interval, ...` up to and
/// including `duration_s`. A sampler error ends the trace and flags the
/// report as partial.
pub fn simulate_phase(
    phase: Phase,
    sampler: &mut dyn PowerSampler,
    interval_s: f64,
    duration_s: f64,
) -> Result<(EnergyReport, Vec<PowerSample>), EnergyError> {
    if interval_s <= 0.0 || interval_s.is_nan() {
        return Err(EnergyError::ZeroInterval);
    }
    let steps = (duration_s / interval_s).round().max(0.0) as usize;
    let mut samples = Vec::with_capacity(steps + 1);
    let mut failure = None;
    for i in 0..=steps {
        let t = (i as f64 * interval_s).min(duration_s);
        match sampler.sample(t) {
            Ok(r) => samples.push(to_sample(t, r)),
            Err(e) => {
                failure = Some(e);
                break;
            }
        }
    }
    finish(phase, samples, failure)
}

fn finish(
    phase: Phase,
    samples: Vec<PowerSample>,
    failure: Option<String>,
) -> Result<(EnergyReport, Vec<PowerSample>), EnergyError> {
    match EnergyReport::from_trace(phase, &samples) {
        Ok(mut report) => {
            if let Some(e) = failure {
                log::warn!("sampler failed mid-phase, report is partial: {e}");
                report.partial = true;
                report.partial_reason = Some(e);
            }
            Ok((report, samples))
        }
        Err(EnergyError::TooFewSamples(n)) if failure.is_some() => {
            Err(EnergyError::Sampler(format!("{} (after {n} samples)", failure.unwrap_or_default())))
        }
        Err(e) => Err(e),
    }
}

/// Samples a sampler on a background thread in wall-clock time.
pub struct PhaseTracker {
    phase: Phase,
    stop: Arc<AtomicBool>,
    handle: JoinHandle<(Vec<PowerSample>, Option<String>)>,
}

impl PhaseTracker {
    pub fn start(phase: Phase, mut sampler: Box<dyn PowerSampler>, interval: Duration) -> Result<Self, EnergyError> {
        if interval.is_zero() {
            return Err(EnergyError::ZeroInterval);
        }
        let stop = Arc::new(AtomicBool::new(false));
        let flag = Arc::clone(&stop);
        let handle = thread::spawn(move || {
            let t0 = Instant::now();
            let mut samples = Vec::new();
            loop {
                let done = flag.load(Ordering::SeqCst);
                let t = t0.elapsed().as_secs_f64();
                match sampler.sample(t) {
                    Ok(r) => {
                        if samples.last().is_none_or(|s: &PowerSample| t > s.t_s) {
                            samples.push(to_sample(t, r));
                        }
                    }
                    Err(e) => return (samples, Some(e)),
                }
                if done {
                    return (samples, None);
                }
                let deadline = Instant::now() + interval;
                while Instant::now() < deadline && !flag.load(Ordering::SeqCst) {
                    thread::sleep(interval.min(Duration::from_millis(10)));
                }
            }
        });
        Ok(PhaseTracker { phase, stop, handle })
    }

    /// Stops sampling (taking one last sample) and builds the report.
    pub fn stop(self) -> TrackedPhase {
        self.stop.store(true, Ordering::SeqCst);
        let (samples, failure) =
            self.handle.join().map_err(|_| EnergyError::Sampler("sampler thread panicked".into()))?;
        finish(self.phase, samples, failure)
    }
}

pub type TrackedPhase = Result<(EnergyReport, Vec<PowerSample>), EnergyError>;

/// Runs `work` while a [`PhaseTracker`] samples in the background.
pub fn track_phase<R>(
    phase: Phase,
    sampler: Box<dyn PowerSampler>,
    interval: Duration,
    work: impl FnOnce() -> R,
) -> Result<(R, TrackedPhase), EnergyError> {
    let tracker = PhaseTracker::start(phase, sampler, interval)?;
    let out = work();
    Ok((out, tracker.stop()))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct Capabilities {
    pub cpu: bool,
    pub gpu: bool,
    pub ram: bool,
}

impl Capabilities {
    pub fn any(&self) -> bool {
        self.cpu || self.gpu || self.ram
    }
}

struct RaplDomain {
    energy_path: PathBuf,
    max_uj: u64,
    last_uj: u64,
    last_t: f64,
    device: Device,
}

/// Host power readers: Linux RAPL energy counters for CPU packages and
/// DRAM, and `nvidia-smi` for GPUs.
pub struct HostSampler {
    rapl: Vec<RaplDomain>,
    nvidia: bool,
}

impl HostSampler {
    pub fn probe() -> Self {
        HostSampler::probe_at(Path::new("/sys/class/powercap"), nvidia_power().is_some())
    }

    fn probe_at(powercap: &Path, nvidia: bool) -> Self {
        let mut rapl = Vec::new();
        let mut dirs: Vec<PathBuf> = walk_rapl(powercap);
        dirs.sort();
        for dir in dirs {
            let name = fs::read_to_string(dir.join("name")).unwrap_or_default();
            let device = if name.trim().starts_with("package") {
                Device::Cpu
            } else if name.trim() == "dram" {
                Device::Ram
            } else {
                continue;
            };
            let energy_path = dir.join("energy_uj");
            let Some(e) = read_u64(&energy_path) else { continue };
            let max_uj = read_u64(&dir.join("max_energy_range_uj")).unwrap_or(u64::MAX);
            rapl.push(RaplDomain { energy_path, max_uj, last_uj: e, last_t: 0.0, device });
        }
        HostSampler { rapl, nvidia }
    }

    pub fn capabilities(&self) -> Capabilities {
        Capabilities {
            cpu: self.rapl.iter().any(|d| d.device == Device::Cpu),
            gpu: self.nvidia,
            ram: self.rapl.iter().any(|d| d.device == Device::Ram),
        }
    }
}

fn walk_rapl(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let Ok(entries) = fs::read_dir(root) else { return out };
    for e in entries.flatten() {
        let p = e.path();
        let is_rapl = p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.starts_with("intel-rapl:"));
        if is_rapl && p.is_dir() {
            out.extend(walk_rapl(&p));
            out.push(p);
        }
    }
    out
}

fn read_u64(path: &Path) -> Option<u64> {
    fs::read_to_string(path).ok()?.trim().parse().ok()
}

fn nvidia_power() -> Option<f64> {
    let out =
        Command::new("nvidia-smi").args(["--query-gpu=power.draw", "--format=csv,noheader,nounits"]).output().ok()?;
    if !out.status.success() {
        return None;
    }
    let text = String::from_utf8_lossy(&out.stdout);
    let watts: Vec<f64> = text.lines().filter_map(|l| l.trim().parse().ok()).collect();
    (!watts.is_empty()).then(|| watts.iter().sum())
}

impl PowerSampler for HostSampler {
    fn sample(&mut self, t_s: f64) -> Result<PowerReading, String> {
        let mut reading = PowerReading::default();
        for d in &mut self.rapl {
            let now = read_u64(&d.energy_path).ok_or_else(|| format!("cannot read {}", d.energy_path.display()))?;
            let dt = t_s - d.last_t;
            let delta = if now >= d.last_uj { now - d.last_uj } else { d.max_uj - d.last_uj + now };
            let watts = if dt > 0.0 { delta as f64 / 1e6 / dt } else { 0.0 };
            d.last_uj = now;
            d.last_t = t_s;
            let slot = match d.device {
                Device::Cpu => &mut reading.cpu_w,
                Device::Ram => &mut reading.ram_w,
                Device::Gpu => &mut reading.gpu_w,
            };
            *slot = Some(slot.unwrap_or(0.0) + watts);
        }
        if self.nvidia {
            reading.gpu_w = Some(nvidia_power().ok_or("nvidia-smi stopped responding")?);
        }
        Ok(reading)
    }
}
