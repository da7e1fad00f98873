//! Regression-based end-system power models and energy integration.
//!
//! A one-time calibration fits an ordinary-least-squares line from OS
//! utilization metrics to measured wall power. The fine-grained model uses
//! CPU, memory, disk and NIC utilization; the CPU-only variant is the
//! fallback when only CPU metrics are readable. Energy over a transfer is
//! the trapezoidal integral of predicted power across the sampled timeline.

use serde::{Deserialize, Serialize};
use std::io::Read;
use thiserror::Error;

/// Normalized utilization of the four modeled components at one instant.
/// Disk and NIC are fractions of a calibrated maximum throughput so every
/// regressor lives in [0, 1].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UtilizationSample {
    /// Seconds since transfer start.
    pub timestamp: f64,
    pub cpu: f64,
    pub mem: f64,
    pub disk: f64,
    pub nic: f64,
}

impl UtilizationSample {
    pub fn new(timestamp: f64, cpu: f64, mem: f64, disk: f64, nic: f64) -> Self {
        UtilizationSample { timestamp, cpu, mem, disk, nic }
    }

    fn fields(&self) -> [(&'static str, f64); 4] {
        [("cpu", self.cpu), ("mem", self.mem), ("disk", self.disk), ("nic", self.nic)]
    }
}

/// Which regressors the model carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    /// Intercept plus CPU, memory, disk and NIC slopes.
    FineGrained,
    /// Intercept plus a CPU slope only.
    CpuOnly,
}

impl ModelKind {
    /// Number of fitted coefficients, intercept included.
    pub fn coefficient_count(self) -> usize {
        match self {
            ModelKind::FineGrained => 5,
            ModelKind::CpuOnly => 2,
        }
    }
}

/// Fitted linear power model: watts = intercept + Σ coeff·utilization.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerModel {
    pub kind: ModelKind,
    pub intercept: f64,
    pub coeff_cpu: f64,
    pub coeff_mem: f64,
    pub coeff_disk: f64,
    pub coeff_nic: f64,
}

impl PowerModel {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("power model serializes")
    }

    pub fn from_json(text: &str) -> Result<PowerModel, serde_json::Error> {
        serde_json::from_str(text)
    }
}

/// One calibration observation: utilization paired with measured watts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CalibrationRow {
    pub sample: UtilizationSample,
    pub power_watts: f64,
}

/// The measurements a model is fitted from.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CalibrationSet {
    pub rows: Vec<CalibrationRow>,
}

impl CalibrationSet {
    pub fn new(rows: Vec<CalibrationRow>) -> Self {
        CalibrationSet { rows }
    }

    pub fn push(&mut self, sample: UtilizationSample, power_watts: f64) {
        self.rows.push(CalibrationRow { sample, power_watts });
    }
}

/// Predicted power integrated over a timeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyReport {
    /// Joules over the whole timeline.
    pub total_energy: f64,
    /// Mean watts: total energy over duration.
    pub avg_power: f64,
    /// Seconds between the first and last sample.
    pub duration: f64,
    /// (timestamp, predicted watts) per input sample.
    pub samples: Vec<(f64, f64)>,
}

#[derive(Debug, Error, PartialEq)]
pub enum PowerError {
    #[error("calibration has {rows} rows but the fit needs at least {needed}")]
    UnderDetermined { rows: usize, needed: usize },
    #[error("regressor `{column}` never varies across the calibration set")]
    DegenerateDesign { column: &'static str },
    #[error("calibration row {row}: measured power must be positive")]
    NonPositivePower { row: usize },
    #[error("utilization field `{field}` = {value} outside [0, 1]")]
    OutOfRangeSample { field: &'static str, value: f64 },
    #[error("timeline goes backwards at index {index}")]
    UnsortedTimeline { index: usize },
    #[error("energy integration needs at least two samples")]
    TooFewSamples,
}

/// Fit a power model by ordinary least squares over the calibration rows.
/// The CPU-only kind ignores the mem/disk/nic columns entirely.
pub fn fit_model(calib: &CalibrationSet, kind: ModelKind) -> Result<PowerModel, PowerError> {
    let needed = kind.coefficient_count() + 1;
    if calib.rows.len() < needed {
        return Err(PowerError::UnderDetermined { rows: calib.rows.len(), needed });
    }
    for (i, row) in calib.rows.iter().enumerate() {
        for (field, value) in row.sample.fields() {
            if !(0.0..=1.0).contains(&value) {
                return Err(PowerError::OutOfRangeSample { field, value });
            }
        }
        if row.power_watts <= 0.0 {
            return Err(PowerError::NonPositivePower { row: i });
        }
    }

    let columns: &[&'static str] = match kind {
        ModelKind::FineGrained => &["cpu", "mem", "disk", "nic"],
        ModelKind::CpuOnly => &["cpu"],
    };
    let regressor = |row: &CalibrationRow, name: &str| -> f64 {
        match name {
            "cpu" => row.sample.cpu,
            "mem" => row.sample.mem,
            "disk" => row.sample.disk,
            "nic" => row.sample.nic,
            _ => unreachable!("unknown regressor"),
        }
    };
    for &column in columns {
        let first = regressor(&calib.rows[0], column);
        if calib.rows.iter().all(|r| regressor(r, column) == first) {
            return Err(PowerError::DegenerateDesign { column });
        }
    }

    // Normal equations: (XᵀX) beta = Xᵀy with an intercept column of ones.
    let k = columns.len() + 1;
    let mut xtx = vec![vec![0.0f64; k]; k];
    let mut xty = vec![0.0f64; k];
    for row in &calib.rows {
        let mut x = Vec::with_capacity(k);
        x.push(1.0);
        for &column in columns {
            x.push(regressor(row, column));
        }
        for i in 0..k {
            for j in 0..k {
                xtx[i][j] += x[i] * x[j];
            }
            xty[i] += x[i] * row.power_watts;
        }
    }
    let beta = solve_linear_system(&mut xtx, &mut xty)
        .ok_or(PowerError::DegenerateDesign { column: "collinear" })?;

    let mut model = PowerModel {
        kind,
        intercept: beta[0],
        coeff_cpu: 0.0,
        coeff_mem: 0.0,
        coeff_disk: 0.0,
        coeff_nic: 0.0,
    };
    for (i, &column) in columns.iter().enumerate() {
        let value = beta[i + 1];
        match column {
            "cpu" => model.coeff_cpu = value,
            "mem" => model.coeff_mem = value,
            "disk" => model.coeff_disk = value,
            "nic" => model.coeff_nic = value,
            _ => unreachable!(),
        }
    }
    Ok(model)
}

/// Gaussian elimination with partial pivoting; `None` when singular.
fn solve_linear_system(a: &mut [Vec<f64>], b: &mut [f64]) -> Option<Vec<f64>> {
    let n = b.len();
    let scale = a
        .iter()
        .flat_map(|row| row.iter().map(|v| v.abs()))
        .fold(0.0f64, f64::max)
        .max(1.0);
    for col in 0..n {
        let pivot = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[pivot][col].abs() < 1e-12 * scale {
            return None;
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in col + 1..n {
            let factor = a[row][col] / a[col][col];
            for j in col..n {
                a[row][j] -= factor * a[col][j];
            }
            b[row] -= factor * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for col in (0..n).rev() {
        let mut acc = b[col];
        for j in col + 1..n {
            acc -= a[col][j] * x[j];
        }
        x[col] = acc / a[col][col];
    }
    Some(x)
}

/// Predicted watts for one sample: the linear form, floored at zero so a
/// negative fitted coefficient can never produce negative power.
pub fn predict_power(model: &PowerModel, s: &UtilizationSample) -> Result<f64, PowerError> {
    for (field, value) in s.fields() {
        if !(0.0..=1.0).contains(&value) {
            return Err(PowerError::OutOfRangeSample { field, value });
        }
    }
    let raw = model.intercept
        + model.coeff_cpu * s.cpu
        + model.coeff_mem * s.mem
        + model.coeff_disk * s.disk
        + model.coeff_nic * s.nic;
    Ok(raw.max(0.0))
}

/// Trapezoidal integral of predicted power across a sorted timeline.
pub fn integrate_energy(
    model: &PowerModel,
    timeline: &[UtilizationSample],
) -> Result<EnergyReport, PowerError> {
    if timeline.len() < 2 {
        return Err(PowerError::TooFewSamples);
    }
    for (i, pair) in timeline.windows(2).enumerate() {
        if pair[1].timestamp < pair[0].timestamp {
            return Err(PowerError::UnsortedTimeline { index: i + 1 });
        }
    }
    let mut samples = Vec::with_capacity(timeline.len());
    for s in timeline {
        samples.push((s.timestamp, predict_power(model, s)?));
    }
    let mut total_energy = 0.0;
    for pair in samples.windows(2) {
        let (t0, p0) = pair[0];
        let (t1, p1) = pair[1];
        total_energy += 0.5 * (p0 + p1) * (t1 - t0);
    }
    let duration = samples.last().unwrap().0 - samples[0].0;
    let avg_power = if duration > 0.0 { total_energy / duration } else { samples[0].1 };
    Ok(EnergyReport { total_energy, avg_power, duration, samples })
}

#[derive(Debug, Error)]
pub enum CalibrationIoError {
    #[error("calibration CSV: {0}")]
    Csv(#[from] csv::Error),
    #[error("calibration CSV is missing the `{0}` column")]
    MissingColumn(&'static str),
    #[error("calibration CSV row {row}: {problem}")]
    BadRow { row: usize, problem: String },
}

const CALIBRATION_COLUMNS: [&str; 6] = ["timestamp", "cpu", "mem", "disk", "nic", "power_watts"];

/// Read a calibration CSV with header `timestamp,cpu,mem,disk,nic,power_watts`.
pub fn read_calibration_csv<R: Read>(reader: R) -> Result<CalibrationSet, CalibrationIoError> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    let mut indices = [0usize; 6];
    for (slot, name) in CALIBRATION_COLUMNS.iter().enumerate() {
        indices[slot] = headers
            .iter()
            .position(|h| h == *name)
            .ok_or(CalibrationIoError::MissingColumn(CALIBRATION_COLUMNS[slot]))?;
    }
    let mut set = CalibrationSet::default();
    for (i, record) in rdr.records().enumerate() {
        let record = record?;
        let row = i + 2; // 1-based, after the header line
        let parse = |slot: usize| -> Result<f64, CalibrationIoError> {
            let raw = record.get(indices[slot]).ok_or(CalibrationIoError::BadRow {
                row,
                problem: format!("missing `{}` field", CALIBRATION_COLUMNS[slot]),
            })?;
            raw.parse::<f64>().map_err(|_| CalibrationIoError::BadRow {
                row,
                problem: format!("`{raw}` is not a number in `{}`", CALIBRATION_COLUMNS[slot]),
            })
        };
        let timestamp = parse(0)?;
        let cpu = parse(1)?;
        let mem = parse(2)?;
        let disk = parse(3)?;
        let nic = parse(4)?;
        let power = parse(5)?;
        set.push(UtilizationSample::new(timestamp, cpu, mem, disk, nic), power);
    }
    Ok(set)
}

/// Write a calibration set in the same CSV schema `read_calibration_csv` expects.
pub fn write_calibration_csv(set: &CalibrationSet) -> String {
    let mut out = String::from("timestamp,cpu,mem,disk,nic,power_watts\n");
    for row in &set.rows {
        let s = row.sample;
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            s.timestamp, s.cpu, s.mem, s.disk, s.nic, row.power_watts
        ));
    }
    out
}
