//! Command-line surface and config-file resolution.
//!
//! Every flag can also come from a JSON config file named by the
//! `HTTPWATT_CONFIG` environment variable; explicit flags win.

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;
use std::path::PathBuf;

#[derive(Parser)]
#[command(
    name = "httpwatt",
    version,
    about = "Energy-aware HTTP data transfer engine",
    after_help = "Exit codes: 0 success, 2 usage error, 3 network failure, \
                  4 one or more files failed, 5 throughput target unreachable."
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Fit a power model from a calibration CSV
    Calibrate(CalibrateArgs),
    /// Download a manifest of URLs under an SLA policy
    Transfer(TransferArgs),
    /// Run SLA policies or brute-force sweeps on the deterministic simulator
    Simulate(SimulateArgs),
    /// Summarize transfer outcomes into a comparison CSV
    Report(ReportArgs),
}

#[derive(Args)]
pub struct CalibrateArgs {
    /// Calibration CSV: timestamp,cpu,mem,disk,nic,power_watts
    pub csv: PathBuf,
    /// Model shape: fine-grained (cpu+mem+disk+nic) or cpu-only
    #[arg(long, default_value = "fine-grained")]
    pub kind: String,
    /// Where to write the fitted model JSON
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Default)]
pub struct TransferArgs {
    /// Network profile JSON (bandwidth, rtt, tcp_buffer)
    #[arg(long)]
    pub profile: Option<PathBuf>,
    /// Manifest file: one `<url> [size_bytes]` per line
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Output root; files land at their URL paths beneath it
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Policy: min-energy | max-throughput | energy-efficiency | flexible
    #[arg(long)]
    pub sla: Option<String>,
    /// Channel budget (min-energy, max-throughput)
    #[arg(long)]
    pub channels: Option<u32>,
    /// Channel ceiling (energy-efficiency, flexible)
    #[arg(long)]
    pub max_channels: Option<u32>,
    /// Flexible target as a percentage of the reference throughput
    #[arg(long)]
    pub target_pct: Option<f64>,
    /// Reference throughput in bits/s for --target-pct
    #[arg(long)]
    pub reference: Option<f64>,
    /// Power model JSON; enables energy accounting from system telemetry
    #[arg(long)]
    pub power_model: Option<PathBuf>,
    /// Measurement window in seconds
    #[arg(long)]
    pub window_secs: Option<f64>,
    /// Upper bound on per-connection pipelining
    #[arg(long)]
    pub pp_cap: Option<u32>,
    /// Write a .sha256 sidecar next to each completed file
    #[arg(long)]
    pub verify: bool,
}

#[derive(Args, Default)]
pub struct SimulateArgs {
    /// Simulation profile JSON (network plus power/overhead knobs)
    #[arg(long)]
    pub profile: Option<PathBuf>,
    /// Manifest file: one `<url> <size_bytes>` per line (sizes required)
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Synthetic dataset: number of files (with --size)
    #[arg(long)]
    pub count: Option<usize>,
    /// Synthetic dataset: bytes per file (with --count)
    #[arg(long)]
    pub size: Option<u64>,
    /// Policy to run: min-energy | max-throughput | energy-efficiency | flexible
    #[arg(long, visible_alias = "algo")]
    pub sla: Option<String>,
    #[arg(long)]
    pub channels: Option<u32>,
    #[arg(long)]
    pub max_channels: Option<u32>,
    #[arg(long)]
    pub target_pct: Option<f64>,
    #[arg(long)]
    pub reference: Option<f64>,
    /// Brute-force concurrency sweep, e.g. `1..32` (inclusive) or `8`
    #[arg(long)]
    pub sweep: Option<String>,
    /// Fix pipelining for every sweep point instead of the planner's choice
    #[arg(long)]
    pub sweep_pp: Option<u32>,
    /// Fix parallelism for every sweep point instead of the planner's choice
    #[arg(long)]
    pub sweep_p: Option<u32>,
    /// Where to write the sweep/probe CSV or outcome JSON
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub window_secs: Option<f64>,
    #[arg(long)]
    pub pp_cap: Option<u32>,
    /// Override the profile's jitter seed
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args)]
pub struct ReportArgs {
    /// Transfer outcome JSON files, one row each
    #[arg(required = true)]
    pub outcomes: Vec<PathBuf>,
    /// Telemetry CSV from another host; its integrated energy is added to
    /// every row (requires --power-model)
    #[arg(long)]
    pub telemetry: Option<PathBuf>,
    /// Power model JSON used to integrate --telemetry into joules
    #[arg(long)]
    pub power_model: Option<PathBuf>,
    /// Where to write the summary CSV (stdout when omitted)
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Defaults loaded from the file named by `HTTPWATT_CONFIG`.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub profile: Option<PathBuf>,
    pub manifest: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub sla: Option<String>,
    pub channels: Option<u32>,
    pub max_channels: Option<u32>,
    pub target_pct: Option<f64>,
    pub reference: Option<f64>,
    pub power_model: Option<PathBuf>,
    pub window_secs: Option<f64>,
    pub pp_cap: Option<u32>,
    pub verify: Option<bool>,
    pub seed: Option<u64>,
}

impl ConfigFile {
    pub fn load() -> Result<ConfigFile, String> {
        let Some(path) = std::env::var_os("HTTPWATT_CONFIG") else {
            return Ok(ConfigFile::default());
        };
        let text = std::fs::read_to_string(&path)
            .map_err(|e| format!("HTTPWATT_CONFIG {}: {e}", path.to_string_lossy()))?;
        serde_json::from_str(&text)
            .map_err(|e| format!("HTTPWATT_CONFIG {}: {e}", path.to_string_lossy()))
    }
}

impl TransferArgs {
    /// Fill unset flags from the config file.
    pub fn merged(mut self, cfg: &ConfigFile) -> TransferArgs {
        self.profile = self.profile.or_else(|| cfg.profile.clone());
        self.manifest = self.manifest.or_else(|| cfg.manifest.clone());
        self.out = self.out.or_else(|| cfg.out.clone());
        self.sla = self.sla.or_else(|| cfg.sla.clone());
        self.channels = self.channels.or(cfg.channels);
        self.max_channels = self.max_channels.or(cfg.max_channels);
        self.target_pct = self.target_pct.or(cfg.target_pct);
        self.reference = self.reference.or(cfg.reference);
        self.power_model = self.power_model.or_else(|| cfg.power_model.clone());
        self.window_secs = self.window_secs.or(cfg.window_secs);
        self.pp_cap = self.pp_cap.or(cfg.pp_cap);
        self.verify = self.verify || cfg.verify.unwrap_or(false);
        self
    }
}

impl SimulateArgs {
    pub fn merged(mut self, cfg: &ConfigFile) -> SimulateArgs {
        self.profile = self.profile.or_else(|| cfg.profile.clone());
        self.manifest = self.manifest.or_else(|| cfg.manifest.clone());
        self.sla = self.sla.or_else(|| cfg.sla.clone());
        self.channels = self.channels.or(cfg.channels);
        self.max_channels = self.max_channels.or(cfg.max_channels);
        self.target_pct = self.target_pct.or(cfg.target_pct);
        self.reference = self.reference.or(cfg.reference);
        self.out = self.out.or_else(|| cfg.out.clone());
        self.window_secs = self.window_secs.or(cfg.window_secs);
        self.pp_cap = self.pp_cap.or(cfg.pp_cap);
        self.seed = self.seed.or(cfg.seed);
        self
    }
}
