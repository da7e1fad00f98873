//! Utilization sampling, tumbling-window throughput, and energy accounting
//! for transfers whose transport cannot model energy itself.
//!
//! Throughput windows are pure arithmetic over (timestamp, bytes) progress
//! events: non-overlapping, aligned to the transfer start, one decision per
//! window. Utilization flows from a [`MetricsProvider`] — the OS-backed
//! reader for real runs, a synthetic one for tests — through a one-second
//! sampler into the power model. Missing metrics degrade gracefully: lost
//! disk/NIC/memory readings fall back to zeros with a warning, a lost CPU
//! reading disables energy accounting entirely rather than fabricating
//! numbers.

use crate::power::{predict_power, PowerModel, UtilizationSample};
use crate::transport::{FailedFile, Transport, TransferEvent, TransportError};
use crate::planner::Dataset;
use crate::sla::TransferPlan;
use std::io::{BufRead, Read, Write};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};
use thiserror::Error;

/// One tumbling measurement window.
#[derive(Debug, Clone, PartialEq)]
pub struct Window {
    /// Seconds since transfer start, inclusive.
    pub start: f64,
    /// Exclusive: an event exactly here belongs to the next window.
    pub end: f64,
    pub bytes_moved: u64,
    /// Utilization samples whose timestamps fall inside the window.
    pub samples: Vec<UtilizationSample>,
}

impl Window {
    /// Mean bits per second over the window's nominal length.
    pub fn throughput_bps(&self) -> f64 {
        let len = self.end - self.start;
        if len > 0.0 {
            self.bytes_moved as f64 * 8.0 / len
        } else {
            0.0
        }
    }

    /// Per-field mean utilization; zeros when the window holds no samples.
    pub fn mean_utilization(&self) -> [f64; 4] {
        if self.samples.is_empty() {
            return [0.0; 4];
        }
        let mut acc = [0.0; 4];
        for s in &self.samples {
            acc[0] += s.cpu;
            acc[1] += s.mem;
            acc[2] += s.disk;
            acc[3] += s.nic;
        }
        let n = self.samples.len() as f64;
        acc.map(|v| v / n)
    }
}

/// Fold byte-progress events into tumbling windows of `window_length`
/// seconds aligned to time zero. Every window in [0, max(duration, last
/// event)) is emitted, including empty ones; an event exactly on a boundary
/// counts toward the later window.
pub fn window_throughput(
    events: &[(f64, u64)],
    window_length: f64,
    duration: f64,
) -> Vec<Window> {
    assert!(window_length > 0.0, "window length must be positive");
    // Enough windows to cover the duration, plus the later-window rule for
    // any event sitting exactly on (or past) the last boundary.
    let mut count = (duration.max(0.0) / window_length).ceil() as usize;
    for &(t, _) in events {
        debug_assert!(t >= 0.0, "event before transfer start");
        count = count.max((t / window_length).floor() as usize + 1);
    }
    let count = count.max(1);
    let mut windows: Vec<Window> = (0..count)
        .map(|k| Window {
            start: k as f64 * window_length,
            end: (k + 1) as f64 * window_length,
            bytes_moved: 0,
            samples: Vec::new(),
        })
        .collect();
    for &(t, bytes) in events {
        let idx = ((t / window_length).floor() as usize).min(count - 1);
        windows[idx].bytes_moved += bytes;
    }
    windows
}

/// Distribute utilization samples into the windows they fall in (same
/// boundary convention as the byte events); samples past the final window
/// attach to it.
pub fn attach_samples(windows: &mut [Window], samples: &[UtilizationSample]) {
    if windows.is_empty() {
        return;
    }
    let window_length = windows[0].end - windows[0].start;
    let last = windows.len() - 1;
    for s in samples {
        let idx = ((s.timestamp / window_length).floor() as usize).min(last);
        windows[idx].samples.push(s.clone());
    }
}

/// Delta of a monotone counter between reads; a wrap or reset clamps the
/// delta to zero and reports it.
pub fn counter_delta(previous: u64, current: u64) -> (u64, bool) {
    if current >= previous {
        (current - previous, false)
    } else {
        (0, true)
    }
}

/// One read of the host metrics; `None` marks a field the provider could
/// not obtain this time.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsReading {
    pub cpu: Option<f64>,
    pub mem: Option<f64>,
    pub disk: Option<f64>,
    pub nic: Option<f64>,
    /// Human-readable notes (counter wraps and the like).
    pub anomalies: Vec<String>,
}

/// Source of utilization readings.
pub trait MetricsProvider: Send {
    fn read(&mut self) -> MetricsReading;
}

/// Scripted provider for tests and dry runs: replays a fixed sequence,
/// repeating the last reading forever.
#[derive(Debug, Clone)]
pub struct SyntheticMetrics {
    script: Vec<MetricsReading>,
    cursor: usize,
}

impl SyntheticMetrics {
    pub fn new(script: Vec<MetricsReading>) -> Self {
        assert!(!script.is_empty(), "synthetic metrics need at least one reading");
        SyntheticMetrics { script, cursor: 0 }
    }

    /// The same utilization forever.
    pub fn constant(cpu: f64, mem: f64, disk: f64, nic: f64) -> Self {
        SyntheticMetrics::new(vec![MetricsReading {
            cpu: Some(cpu),
            mem: Some(mem),
            disk: Some(disk),
            nic: Some(nic),
            anomalies: Vec::new(),
        }])
    }
}

impl MetricsProvider for SyntheticMetrics {
    fn read(&mut self) -> MetricsReading {
        let reading = self.script[self.cursor.min(self.script.len() - 1)].clone();
        if self.cursor < self.script.len() {
            self.cursor += 1;
        }
        reading
    }
}

/// Degradation state of the telemetry pipeline.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TelemetryHealth {
    /// Some non-CPU metric went missing; its input is zeroed.
    pub degraded: bool,
    /// CPU went missing; energy accounting is off for the rest of the run.
    pub disabled: bool,
    pub warnings: Vec<String>,
}

impl TelemetryHealth {
    fn warn_once(&mut self, message: &str) {
        if !self.warnings.iter().any(|w| w == message) {
            self.warnings.push(message.to_string());
        }
    }

    /// Turn a reading into a sample, tracking degradation. `None` once the
    /// pipeline is disabled.
    pub fn absorb(
        &mut self,
        reading: MetricsReading,
        timestamp: f64,
    ) -> Option<UtilizationSample> {
        for note in &reading.anomalies {
            self.warn_once(note);
        }
        if self.disabled {
            return None;
        }
        let Some(cpu) = reading.cpu else {
            self.disabled = true;
            self.warn_once(
                "telemetry disabled: cpu utilization unavailable; energy will not be reported",
            );
            return None;
        };
        if reading.mem.is_none() || reading.disk.is_none() || reading.nic.is_none() {
            self.degraded = true;
            self.warn_once(
                "telemetry degraded: memory/disk/nic utilization unavailable, using zeros",
            );
        }
        let clamp = |v: f64| v.clamp(0.0, 1.0);
        Some(UtilizationSample::new(
            timestamp,
            clamp(cpu),
            clamp(reading.mem.unwrap_or(0.0)),
            clamp(reading.disk.unwrap_or(0.0)),
            clamp(reading.nic.unwrap_or(0.0)),
        ))
    }
}

/// Joules over a sample timeline under `model`; zero when the run was too
/// short to bracket even one sampling interval, `None` when prediction is
/// impossible.
pub fn energy_from_samples(model: &PowerModel, samples: &[UtilizationSample]) -> Option<f64> {
    if samples.len() < 2 {
        return Some(0.0);
    }
    let mut energy = 0.0;
    let mut prev: Option<(f64, f64)> = None;
    for s in samples {
        let watts = predict_power(model, s).ok()?;
        if let Some((t0, p0)) = prev {
            energy += 0.5 * (p0 + watts) * (s.timestamp - t0);
        }
        prev = Some((s.timestamp, watts));
    }
    Some(energy)
}

struct SamplerShared {
    samples: Vec<UtilizationSample>,
    health: TelemetryHealth,
}

/// Background utilization sampler: one reading per period, timestamps in
/// seconds since spawn. Stops when dropped.
pub struct Sampler {
    shared: Arc<Mutex<SamplerShared>>,
    stop: Arc<AtomicBool>,
    handle: Option<JoinHandle<()>>,
}

impl Sampler {
    pub fn spawn(mut provider: Box<dyn MetricsProvider>, period: Duration) -> Sampler {
        let shared = Arc::new(Mutex::new(SamplerShared {
            samples: Vec::new(),
            health: TelemetryHealth::default(),
        }));
        let stop = Arc::new(AtomicBool::new(false));
        let shared_in = Arc::clone(&shared);
        let stop_in = Arc::clone(&stop);
        let handle = std::thread::spawn(move || {
            let started = Instant::now();
            while !stop_in.load(Ordering::Relaxed) {
                let reading = provider.read();
                let timestamp = started.elapsed().as_secs_f64();
                {
                    let mut guard = shared_in.lock().expect("sampler lock");
                    if let Some(sample) = guard.health.absorb(reading, timestamp) {
                        guard.samples.push(sample);
                    }
                }
                std::thread::sleep(period);
            }
        });
        Sampler { shared, stop, handle: Some(handle) }
    }

    /// Copy of everything collected so far.
    pub fn snapshot(&self) -> (Vec<UtilizationSample>, TelemetryHealth) {
        let guard = self.shared.lock().expect("sampler lock");
        (guard.samples.clone(), guard.health.clone())
    }

    pub fn stop(&mut self) {
        self.stop.store(true, Ordering::Relaxed);
        if let Some(handle) = self.handle.take() {
            let _ = handle.join();
        }
    }
}

impl Drop for Sampler {
    fn drop(&mut self) {
        self.stop();
    }
}

/// Wraps a transport that cannot account energy (the real HTTP engine) and
/// supplies it from sampled utilization under a power model, so the
/// scheduling loop sees the same interface the simulator offers.
pub struct MeteredTransport<T: Transport> {
    inner: T,
    model: PowerModel,
    provider: Option<Box<dyn MetricsProvider>>,
    period: Duration,
    sampler: Option<Sampler>,
}

impl<T: Transport> MeteredTransport<T> {
    pub fn new(inner: T, model: PowerModel, provider: Box<dyn MetricsProvider>) -> Self {
        MeteredTransport {
            inner,
            model,
            provider: Some(provider),
            period: Duration::from_secs(1),
            sampler: None,
        }
    }

    pub fn with_period(mut self, period: Duration) -> Self {
        self.period = period;
        self
    }

    /// Samples collected so far (for logging after the run).
    pub fn telemetry(&self) -> (Vec<UtilizationSample>, TelemetryHealth) {
        match &self.sampler {
            Some(s) => s.snapshot(),
            None => (Vec::new(), TelemetryHealth::default()),
        }
    }
}

impl<T: Transport> Transport for MeteredTransport<T> {
    fn start(&mut self, plan: &TransferPlan, dataset: &Dataset) -> Result<(), TransportError> {
        self.inner.start(plan, dataset)?;
        let provider = self.provider.take().expect("metered transport started twice");
        self.sampler = Some(Sampler::spawn(provider, self.period));
        Ok(())
    }

    fn set_allocation(&mut self, plan: &TransferPlan) -> Result<(), TransportError> {
        self.inner.set_allocation(plan)
    }

    fn next_event(&mut self, deadline: f64) -> Option<TransferEvent> {
        self.inner.next_event(deadline)
    }

    fn now(&self) -> f64 {
        self.inner.now()
    }

    fn progress_snapshot(&self) -> u64 {
        self.inner.progress_snapshot()
    }

    fn energy_snapshot(&self) -> Option<f64> {
        let sampler = self.sampler.as_ref()?;
        let (samples, health) = sampler.snapshot();
        if health.disabled {
            return None;
        }
        energy_from_samples(&self.model, &samples)
    }

    fn is_finished(&self) -> bool {
        self.inner.is_finished()
    }

    fn failures(&self) -> Vec<FailedFile> {
        self.inner.failures()
    }

    fn warnings(&self) -> Vec<String> {
        let mut warnings = self.inner.warnings();
        if let Some(sampler) = &self.sampler {
            warnings.extend(sampler.snapshot().1.warnings);
        }
        warnings
    }
}

/// OS-backed metrics from the /proc filesystem. CPU and memory come out as
/// direct fractions; disk and NIC byte rates are normalized by the
/// calibrated maxima passed at construction.
pub struct ProcfsMetrics {
    disk_max_bps: f64,
    nic_max_bps: f64,
    last_read: Option<Instant>,
    prev_cpu: Option<(u64, u64)>, // (busy, total) jiffies
    prev_disk: Option<u64>,       // bytes
    prev_nic: Option<u64>,        // bytes
}

impl ProcfsMetrics {
    pub fn new(disk_max_bps: f64, nic_max_bps: f64) -> Self {
        ProcfsMetrics {
            disk_max_bps: disk_max_bps.max(1.0),
            nic_max_bps: nic_max_bps.max(1.0),
            last_read: None,
            prev_cpu: None,
            prev_disk: None,
            prev_nic: None,
        }
    }

    fn read_cpu_counters() -> Option<(u64, u64)> {
        let text = std::fs::read_to_string("/proc/stat").ok()?;
        let line = text.lines().next()?;
        let mut fields = line.split_whitespace();
        if fields.next()? != "cpu" {
            return None;
        }
        let values: Vec<u64> = fields.filter_map(|f| f.parse().ok()).collect();
        if values.len() < 4 {
            return None;
        }
        let total: u64 = values.iter().sum();
        let idle = values[3] + values.get(4).copied().unwrap_or(0); // idle + iowait
        Some((total - idle, total))
    }

    fn read_mem_fraction() -> Option<f64> {
        let file = std::fs::File::open("/proc/meminfo").ok()?;
        let mut total = None;
        let mut available = None;
        for line in std::io::BufReader::new(file).lines() {
            let line = line.ok()?;
            let mut parts = line.split_whitespace();
            match parts.next()? {
                "MemTotal:" => total = parts.next()?.parse::<f64>().ok(),
                "MemAvailable:" => available = parts.next()?.parse::<f64>().ok(),
                _ => {}
            }
            if total.is_some() && available.is_some() {
                break;
            }
        }
        let (t, a) = (total?, available?);
        if t <= 0.0 {
            return None;
        }
        Some((1.0 - a / t).clamp(0.0, 1.0))
    }

    fn read_disk_bytes() -> Option<u64> {
        let text = std::fs::read_to_string("/proc/diskstats").ok()?;
        let mut sectors = 0u64;
        for line in text.lines() {
            let fields: Vec<&str> = line.split_whitespace().collect();
            // name, sectors-read and sectors-written columns; partitions
            // (names ending in a digit after letters) are counted too —
            // double counting only inflates utilization, never energy sign.
            if fields.len() < 10 {
                continue;
            }
            let read: u64 = fields[5].parse().unwrap_or(0);
            let written: u64 = fields[9].parse().unwrap_or(0);
            sectors = sectors.saturating_add(read).saturating_add(written);
        }
        Some(sectors.saturating_mul(512))
    }

    fn read_nic_bytes() -> Option<u64> {
        let text = std::fs::read_to_string("/proc/net/dev").ok()?;
        let mut bytes = 0u64;
        for line in text.lines().skip(2) {
            let Some((name, rest)) = line.split_once(':') else { continue };
            if name.trim() == "lo" {
                continue;
            }
            let fields: Vec<&str> = rest.split_whitespace().collect();
            if fields.len() < 9 {
                continue;
            }
            let rx: u64 = fields[0].parse().unwrap_or(0);
            let tx: u64 = fields[8].parse().unwrap_or(0);
            bytes = bytes.saturating_add(rx).saturating_add(tx);
        }
        Some(bytes)
    }
}

impl MetricsProvider for ProcfsMetrics {
    fn read(&mut self) -> MetricsReading {
        let now = Instant::now();
        let elapsed = self
            .last_read
            .map(|t| now.duration_since(t).as_secs_f64())
            .unwrap_or(0.0);
        self.last_read = Some(now);
        let mut reading = MetricsReading::default();

        match Self::read_cpu_counters() {
            Some((busy, total)) => {
                if let Some((pb, pt)) = self.prev_cpu {
                    let (db, wrapped_b) = counter_delta(pb, busy);
                    let (dt, wrapped_t) = counter_delta(pt, total);
                    if wrapped_b || wrapped_t {
                        reading.anomalies.push("cpu counter reset; sample clamped".into());
                    }
                    reading.cpu = Some(if dt > 0 { db as f64 / dt as f64 } else { 0.0 });
                } else {
                    reading.cpu = Some(0.0);
                }
                self.prev_cpu = Some((busy, total));
            }
            None => reading.cpu = None,
        }

        reading.mem = Self::read_mem_fraction();

        match Self::read_disk_bytes() {
            Some(bytes) => {
                if let Some(prev) = self.prev_disk {
                    let (delta, wrapped) = counter_delta(prev, bytes);
                    if wrapped {
                        reading.anomalies.push("disk byte counter reset; delta clamped to 0".into());
                    }
                    let rate = if elapsed > 0.0 { delta as f64 / elapsed } else { 0.0 };
                    reading.disk = Some((rate / self.disk_max_bps).clamp(0.0, 1.0));
                } else {
                    reading.disk = Some(0.0);
                }
                self.prev_disk = Some(bytes);
            }
            None => reading.disk = None,
        }

        match Self::read_nic_bytes() {
            Some(bytes) => {
                if let Some(prev) = self.prev_nic {
                    let (delta, wrapped) = counter_delta(prev, bytes);
                    if wrapped {
                        reading.anomalies.push("nic byte counter reset; delta clamped to 0".into());
                    }
                    let rate = if elapsed > 0.0 { delta as f64 / elapsed } else { 0.0 };
                    reading.nic = Some((rate / self.nic_max_bps).clamp(0.0, 1.0));
                } else {
                    reading.nic = Some(0.0);
                }
                self.prev_nic = Some(bytes);
            }
            None => reading.nic = None,
        }

        reading
    }
}

/// One row of the telemetry log: a window's mean utilization and bytes.
#[derive(Debug, Clone, PartialEq)]
pub struct TelemetryRow {
    pub timestamp: f64,
    pub cpu: f64,
    pub mem: f64,
    pub disk: f64,
    pub nic: f64,
    pub bytes_window: u64,
}

#[derive(Debug, Error)]
pub enum TelemetryCsvError {
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("telemetry log is missing the `{0}` column")]
    MissingColumn(&'static str),
    #[error("telemetry log row {row}: {problem}")]
    BadRow { row: usize, problem: String },
}

const TELEMETRY_COLUMNS: [&str; 6] = ["timestamp", "cpu", "mem", "disk", "nic", "bytes_window"];

/// Write one row per window: window start, mean utilizations, bytes moved.
pub fn write_telemetry_csv<W: Write>(writer: W, windows: &[Window]) -> Result<(), csv::Error> {
    let mut out = csv::Writer::from_writer(writer);
    out.write_record(TELEMETRY_COLUMNS)?;
    for w in windows {
        let [cpu, mem, disk, nic] = w.mean_utilization();
        out.write_record([
            format!("{}", w.start),
            format!("{cpu}"),
            format!("{mem}"),
            format!("{disk}"),
            format!("{nic}"),
            format!("{}", w.bytes_moved),
        ])?;
    }
    out.flush().map_err(csv::Error::from)
}

pub fn read_telemetry_csv<R: Read>(reader: R) -> Result<Vec<TelemetryRow>, TelemetryCsvError> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    let mut indices = [0usize; 6];
    for (slot, name) in TELEMETRY_COLUMNS.iter().enumerate() {
        indices[slot] = headers
            .iter()
            .position(|h| h == *name)
            .ok_or(TelemetryCsvError::MissingColumn(TELEMETRY_COLUMNS[slot]))?;
    }
    let mut rows = Vec::new();
    for (i, record) in rdr.records().enumerate() {
        let record = record?;
        let row = i + 2;
        let field = |slot: usize| -> Result<&str, TelemetryCsvError> {
            record.get(indices[slot]).ok_or(TelemetryCsvError::BadRow {
                row,
                problem: format!("missing `{}` field", TELEMETRY_COLUMNS[slot]),
            })
        };
        let num = |slot: usize| -> Result<f64, TelemetryCsvError> {
            field(slot)?.parse::<f64>().map_err(|_| TelemetryCsvError::BadRow {
                row,
                problem: format!("`{}` is not a number", TELEMETRY_COLUMNS[slot]),
            })
        };
        rows.push(TelemetryRow {
            timestamp: num(0)?,
            cpu: num(1)?,
            mem: num(2)?,
            disk: num(3)?,
            nic: num(4)?,
            bytes_window: field(5)?.parse::<u64>().map_err(|_| TelemetryCsvError::BadRow {
                row,
                problem: "`bytes_window` is not a non-negative integer".into(),
            })?,
        });
    }
    Ok(rows)
}
