//! The four subcommands: calibrate, transfer, simulate, report.

use crate::args::{CalibrateArgs, ReportArgs, SimulateArgs, TransferArgs};
use httpwatt_core::planner::{
    parse_manifest, Dataset, FileEntry, NetworkProfile, PlannerConfig,
};
use httpwatt_core::power::{
    fit_model, integrate_energy, read_calibration_csv, ModelKind, PowerModel, UtilizationSample,
};
use httpwatt_core::simulator::{throughput_energy_sweep, SimProfile, SimTransport};
use httpwatt_core::sla::engine::{run_transfer, EngineConfig};
use httpwatt_core::sla::{EfficiencySample, SlaError, SlaRequest, TransferOutcome};
use httpwatt_core::telemetry::{read_telemetry_csv, MeteredTransport, ProcfsMetrics};
use httpwatt_core::transport::http::{probe_capabilities, HttpConfig, HttpTransport};
use httpwatt_core::transport::TransportError;
use std::collections::HashSet;
use std::fmt;
use std::path::Path;
use std::time::Duration;

const CONNECT_TIMEOUT: Duration = Duration::from_secs(5);
const READ_TIMEOUT: Duration = Duration::from_secs(30);
/// Assumed disk ceiling (bits/s) for normalizing /proc disk throughput.
const DISK_MAX_BPS: f64 = 6e9;

/// Failure modes mapped to exit codes 2..5 (1 for everything else).
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Network(String),
    FileFailures(usize),
    TargetUnreachable,
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Network(_) => 3,
            CliError::FileFailures(_) => 4,
            CliError::TargetUnreachable => 5,
            CliError::Runtime(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(msg) => write!(f, "{msg}"),
            CliError::Network(msg) => write!(f, "network: {msg}"),
            CliError::FileFailures(n) => {
                write!(f, "{n} file(s) failed permanently; see the outcome artifacts")
            }
            CliError::TargetUnreachable => {
                write!(f, "throughput target unreachable at the channel ceiling")
            }
            CliError::Runtime(msg) => write!(f, "{msg}"),
        }
    }
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn read_file(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|e| usage(format!("{}: {e}", path.display())))
}

fn map_sla_error(err: SlaError) -> CliError {
    match err {
        SlaError::EmptyDataset | SlaError::InvalidRequest(_) => usage(err.to_string()),
        SlaError::Transport(TransportError::Unreachable { .. })
        | SlaError::Transport(TransportError::InvalidUrl { .. }) => {
            CliError::Network(err.to_string())
        }
        other => CliError::Runtime(other.to_string()),
    }
}

/// Assemble the SLA request from mode name + parameters, shared by
/// `transfer` and `simulate`.
fn build_request(
    sla: &str,
    channels: Option<u32>,
    max_channels: Option<u32>,
    target_pct: Option<f64>,
    reference: Option<f64>,
) -> Result<SlaRequest, CliError> {
    let need = |flag: &str, mode: &str| usage(format!("--sla {mode} requires {flag}"));
    let request = match sla {
        "min-energy" => SlaRequest::MinEnergy {
            channels: channels.ok_or_else(|| need("--channels", "min-energy"))?,
        },
        "max-throughput" => SlaRequest::MaxThroughput {
            channels: channels.ok_or_else(|| need("--channels", "max-throughput"))?,
        },
        "energy-efficiency" | "ee" => SlaRequest::EnergyEfficiency {
            max_channels: max_channels
                .ok_or_else(|| need("--max-channels", "energy-efficiency"))?,
        },
        "flexible" => SlaRequest::FlexibleThroughput {
            target_fraction: target_pct.ok_or_else(|| need("--target-pct", "flexible"))? / 100.0,
            reference_throughput: reference.ok_or_else(|| need("--reference", "flexible"))?,
            max_channels: max_channels.ok_or_else(|| need("--max-channels", "flexible"))?,
        },
        other => {
            return Err(usage(format!(
                "unknown SLA `{other}`; expected min-energy, max-throughput, \
                 energy-efficiency or flexible"
            )))
        }
    };
    request.validate().map_err(map_sla_error)?;
    Ok(request)
}

/// Write a comment-headed CSV to `path` or stdout. Values are plain numbers,
/// so no quoting is ever needed; data rows carry no timestamps, keeping the
/// output bit-identical across runs.
fn write_csv(
    path: Option<&Path>,
    comments: &[String],
    header: &str,
    rows: &[String],
) -> Result<(), CliError> {
    let mut text = String::new();
    for comment in comments {
        text.push_str("# ");
        text.push_str(comment);
        text.push('\n');
    }
    text.push_str(header);
    text.push('\n');
    for row in rows {
        text.push_str(row);
        text.push('\n');
    }
    match path {
        Some(p) => std::fs::write(p, text)
            .map_err(|e| CliError::Runtime(format!("writing {}: {e}", p.display()))),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn fmt_bps(bps: f64) -> String {
    if bps >= 1e9 {
        format!("{:.2} Gbit/s", bps / 1e9)
    } else if bps >= 1e6 {
        format!("{:.2} Mbit/s", bps / 1e6)
    } else if bps >= 1e3 {
        format!("{:.2} kbit/s", bps / 1e3)
    } else {
        format!("{bps:.0} bit/s")
    }
}

fn print_outcome_summary(outcome: &TransferOutcome) {
    let mode = outcome.mode.map(|m| m.to_string()).unwrap_or_else(|| "static".to_string());
    let completed: usize = outcome.per_class.iter().map(|c| c.files_completed).sum();
    println!("mode: {mode}");
    println!(
        "files: {completed} complete, {} failed ({} bytes)",
        outcome.failed_files.len(),
        outcome.total_bytes
    );
    println!("duration: {:.3} s", outcome.duration);
    println!("throughput: {}", fmt_bps(outcome.achieved_throughput));
    match outcome.energy {
        Some(joules) if joules > 0.0 => println!(
            "energy: {:.3} J (ratio {})",
            joules,
            fmt_bps(outcome.total_bytes as f64 * 8.0 / joules).replace("/s", "/J")
        ),
        Some(joules) => println!("energy: {joules:.3} J"),
        None => println!("energy: not measured (run with --power-model to enable telemetry)"),
    }
    if let Some(level) = outcome.chosen_concurrency {
        println!("chosen concurrency: {level}");
        if outcome.dataset_exhausted_during_search {
            println!("note: the dataset finished before the probe schedule did");
        }
    }
    if outcome.target_unreachable {
        println!("target: UNREACHABLE at the channel ceiling");
    }
    for warning in &outcome.warnings {
        eprintln!("warning: {warning}");
    }
    for failure in &outcome.failed_files {
        eprintln!("failed: {} ({})", failure.id, failure.reason);
    }
}

// ---------------------------------------------------------------- calibrate

pub fn cmd_calibrate(args: CalibrateArgs) -> Result<(), CliError> {
    let kind = match args.kind.as_str() {
        "fine-grained" => ModelKind::FineGrained,
        "cpu-only" => ModelKind::CpuOnly,
        other => {
            return Err(usage(format!(
                "unknown model kind `{other}`; expected fine-grained or cpu-only"
            )))
        }
    };
    let text = read_file(&args.csv)?;
    let set = read_calibration_csv(text.as_bytes())
        .map_err(|e| usage(format!("{}: {e}", args.csv.display())))?;
    let model =
        fit_model(&set, kind).map_err(|e| usage(format!("{}: {e}", args.csv.display())))?;
    std::fs::write(&args.out, model.to_json())
        .map_err(|e| CliError::Runtime(format!("writing {}: {e}", args.out.display())))?;
    println!("fitted {} model from {} rows", args.kind, set.rows.len());
    println!("intercept: {:.6} W", model.intercept);
    println!("cpu: {:.6} W/unit", model.coeff_cpu);
    if matches!(kind, ModelKind::FineGrained) {
        println!("mem: {:.6} W/unit", model.coeff_mem);
        println!("disk: {:.6} W/unit", model.coeff_disk);
        println!("nic: {:.6} W/unit", model.coeff_nic);
    }
    println!("wrote {}", args.out.display());
    Ok(())
}

// ----------------------------------------------------------------- transfer

/// Accept either a bare network profile or a simulation profile that embeds
/// one, so a single profile file can serve both commands.
fn load_network_profile(path: &Path) -> Result<NetworkProfile, CliError> {
    let text = read_file(path)?;
    if let Ok(sim) = SimProfile::from_json(&text) {
        return Ok(sim.network);
    }
    serde_json::from_str(&text).map_err(|e| usage(format!("{}: {e}", path.display())))
}

pub fn cmd_transfer(args: TransferArgs) -> Result<(), CliError> {
    let profile_path =
        args.profile.as_ref().ok_or_else(|| usage("transfer requires --profile"))?;
    let manifest_path =
        args.manifest.as_ref().ok_or_else(|| usage("transfer requires --manifest"))?;
    let out_dir = args.out.as_ref().ok_or_else(|| usage("transfer requires --out"))?;
    let sla = args.sla.as_deref().ok_or_else(|| usage("transfer requires --sla"))?;

    let network = load_network_profile(profile_path)?;
    let request =
        build_request(sla, args.channels, args.max_channels, args.target_pct, args.reference)?;
    let entries = parse_manifest(&read_file(manifest_path)?)
        .map_err(|e| usage(format!("{}: {e}", manifest_path.display())))?;

    // One probe establishes reachability and whether HEAD works at all.
    let lead_caps = probe_capabilities(&entries[0].url, CONNECT_TIMEOUT, READ_TIMEOUT)
        .map_err(|e| CliError::Network(e.to_string()))?;

    // Backfill missing sizes over HEAD; leftovers become unknown-size files
    // nominally classified as Medium.
    let placeholder = (network.bdp() / 2.0).max(1.0) as u64;
    let mut unknown_size = HashSet::new();
    let mut files = Vec::with_capacity(entries.len());
    for (idx, entry) in entries.iter().enumerate() {
        let size = match entry.size {
            Some(size) => size,
            None => {
                let probed = if lead_caps.head_allowed {
                    probe_capabilities(&entry.url, CONNECT_TIMEOUT, READ_TIMEOUT)
                        .ok()
                        .and_then(|c| c.content_length)
                } else {
                    None
                };
                match probed {
                    Some(size) if size > 0 => size,
                    _ => {
                        eprintln!(
                            "warning: size of {} is unknown; treating it as a medium, \
                             single-stream file",
                            entry.url
                        );
                        unknown_size.insert(idx);
                        placeholder
                    }
                }
            }
        };
        files.push(FileEntry::new(entry.url.clone(), size));
    }
    let dataset = Dataset::new(files);

    let engine_cfg = EngineConfig {
        window_secs: args.window_secs.unwrap_or(5.0),
        planner: PlannerConfig {
            pipelining_cap: args.pp_cap.unwrap_or(32),
            ..PlannerConfig::default()
        },
    };
    let mut http_cfg = HttpConfig::new(network, out_dir.clone());
    http_cfg.verify = args.verify;
    http_cfg.unknown_size = unknown_size;
    http_cfg.connect_timeout = CONNECT_TIMEOUT;
    http_cfg.read_timeout = READ_TIMEOUT;

    let outcome = match &args.power_model {
        Some(model_path) => {
            let model = PowerModel::from_json(&read_file(model_path)?)
                .map_err(|e| usage(format!("{}: {e}", model_path.display())))?;
            let provider = Box::new(ProcfsMetrics::new(DISK_MAX_BPS, network.bandwidth));
            let mut transport =
                MeteredTransport::new(HttpTransport::new(http_cfg), model, provider);
            run_transfer(&request, &dataset, &network, &mut transport, &engine_cfg)
        }
        None => {
            let mut transport = HttpTransport::new(http_cfg);
            run_transfer(&request, &dataset, &network, &mut transport, &engine_cfg)
        }
    }
    .map_err(map_sla_error)?;

    std::fs::create_dir_all(out_dir)
        .map_err(|e| CliError::Runtime(format!("creating {}: {e}", out_dir.display())))?;
    let outcome_path = out_dir.join("outcome.json");
    let outcome_json =
        serde_json::to_string_pretty(&outcome).expect("outcome serializes") + "\n";
    std::fs::write(&outcome_path, outcome_json)
        .map_err(|e| CliError::Runtime(format!("writing {}: {e}", outcome_path.display())))?;
    let history_path = out_dir.join("history.jsonl");
    let mut history_text = String::new();
    for entry in &outcome.history {
        history_text.push_str(&serde_json::to_string(entry).expect("history serializes"));
        history_text.push('\n');
    }
    std::fs::write(&history_path, history_text)
        .map_err(|e| CliError::Runtime(format!("writing {}: {e}", history_path.display())))?;

    print_outcome_summary(&outcome);
    println!("wrote {} and {}", outcome_path.display(), history_path.display());

    // File loss outranks a missed throughput target.
    if !outcome.failed_files.is_empty() {
        return Err(CliError::FileFailures(outcome.failed_files.len()));
    }
    if outcome.target_unreachable {
        return Err(CliError::TargetUnreachable);
    }
    Ok(())
}

// ----------------------------------------------------------------- simulate

/// `A..B` or `A-B` (inclusive) or a single `N`.
fn parse_sweep(spec: &str) -> Result<Vec<u32>, CliError> {
    let bad = || usage(format!("bad sweep `{spec}`; expected `LO..HI` or a single level"));
    let (lo, hi) = if let Some((a, b)) = spec.split_once("..") {
        (a, b)
    } else if let Some((a, b)) = spec.split_once('-') {
        (a, b)
    } else {
        (spec, spec)
    };
    let lo: u32 = lo.trim().parse().map_err(|_| bad())?;
    let hi: u32 = hi.trim().parse().map_err(|_| bad())?;
    if lo == 0 || hi < lo {
        return Err(usage(format!("empty sweep range `{spec}`; levels start at 1")));
    }
    Ok((lo..=hi).collect())
}

fn simulate_dataset(args: &SimulateArgs) -> Result<Dataset, CliError> {
    match (&args.manifest, args.count, args.size) {
        (Some(path), None, None) => {
            let entries = parse_manifest(&read_file(path)?)
                .map_err(|e| usage(format!("{}: {e}", path.display())))?;
            let mut files = Vec::with_capacity(entries.len());
            for entry in entries {
                let size = entry.size.ok_or_else(|| {
                    usage(format!(
                        "{}: `{}` has no size; the simulator cannot probe one",
                        path.display(),
                        entry.url
                    ))
                })?;
                files.push(FileEntry::new(entry.url, size));
            }
            Ok(Dataset::new(files))
        }
        (None, Some(count), Some(size)) => Ok(Dataset::uniform("sim://file", count, size)),
        (None, None, None) => {
            Err(usage("simulate needs a dataset: --manifest, or --count with --size"))
        }
        _ => Err(usage("pass either --manifest or both --count and --size, not a mixture")),
    }
}

fn sample_rows(samples: &[EfficiencySample]) -> Vec<String> {
    samples
        .iter()
        .map(|s| {
            format!("{},{},{},{}", s.concurrency, s.window_throughput, s.window_energy, s.ratio)
        })
        .collect()
}

pub fn cmd_simulate(args: SimulateArgs) -> Result<(), CliError> {
    let mut profile = match &args.profile {
        Some(path) => SimProfile::from_json(&read_file(path)?)
            .map_err(|e| usage(format!("{}: {e}", path.display())))?,
        None => SimProfile::defaults(NetworkProfile::new(1e9, 0.05, 262_144)),
    };
    if let Some(seed) = args.seed {
        profile.seed = seed;
    }
    let dataset = simulate_dataset(&args)?;
    let planner_cfg = PlannerConfig {
        pipelining_cap: args.pp_cap.unwrap_or(32),
        ..PlannerConfig::default()
    };
    if args.sweep.is_none() && args.sla.is_none() {
        return Err(usage("nothing to do: pass --sweep and/or --sla (alias --algo)"));
    }

    let mut out_taken = false;
    if let Some(spec) = &args.sweep {
        let levels = parse_sweep(spec)?;
        let samples = throughput_energy_sweep(
            &dataset,
            &profile,
            levels.iter().copied(),
            args.sweep_pp,
            args.sweep_p,
            &planner_cfg,
        )
        .map_err(map_sla_error)?;
        let comments = vec![
            format!(
                "httpwatt simulate sweep: files={} bytes={} levels={}..{}",
                dataset.len(),
                dataset.total_bytes(),
                levels.first().expect("nonempty"),
                levels.last().expect("nonempty"),
            ),
            format!(
                "profile: bandwidth={} rtt={} tcp_buffer={} seed={} pp={} p={}",
                profile.network.bandwidth,
                profile.network.rtt,
                profile.network.tcp_buffer,
                profile.seed,
                args.sweep_pp.map_or("auto".to_string(), |v| v.to_string()),
                args.sweep_p.map_or("auto".to_string(), |v| v.to_string()),
            ),
        ];
        write_csv(
            args.out.as_deref(),
            &comments,
            "concurrency,throughput_bps,energy_j,ratio",
            &sample_rows(&samples),
        )?;
        out_taken = args.out.is_some();
        if let Some(path) = &args.out {
            println!("wrote {} sweep rows to {}", samples.len(), path.display());
        }
    }

    if let Some(sla) = &args.sla {
        let request = build_request(
            sla,
            args.channels,
            args.max_channels,
            args.target_pct,
            args.reference,
        )?;
        let engine_cfg =
            EngineConfig { window_secs: args.window_secs.unwrap_or(5.0), planner: planner_cfg };
        let mut transport = SimTransport::new(profile);
        let outcome = run_transfer(&request, &dataset, &profile.network, &mut transport, &engine_cfg)
            .map_err(map_sla_error)?;
        print_outcome_summary(&outcome);
        if let (Some(path), false) = (&args.out, out_taken) {
            if path.extension().is_some_and(|e| e == "csv") {
                let comments = vec![format!(
                    "httpwatt simulate {}: files={} bytes={} probes below",
                    sla,
                    dataset.len(),
                    dataset.total_bytes()
                )];
                write_csv(
                    Some(path),
                    &comments,
                    "concurrency,throughput_bps,energy_j,ratio",
                    &sample_rows(&outcome.probes),
                )?;
            } else {
                let json =
                    serde_json::to_string_pretty(&outcome).expect("outcome serializes") + "\n";
                std::fs::write(path, json)
                    .map_err(|e| CliError::Runtime(format!("writing {}: {e}", path.display())))?;
            }
            println!("wrote {}", path.display());
        }
        if outcome.target_unreachable {
            return Err(CliError::TargetUnreachable);
        }
    }
    Ok(())
}

// ------------------------------------------------------------------- report

/// The run's final channel count: the latest per-class concurrency summed.
fn final_channels(outcome: &TransferOutcome) -> u32 {
    let mut per_class = [0u32; 3];
    for entry in &outcome.history {
        per_class[entry.class.index()] = entry.concurrency;
    }
    per_class.iter().sum()
}

pub fn cmd_report(args: ReportArgs) -> Result<(), CliError> {
    let mut extra_energy = 0.0f64;
    let mut telemetry_note = "none".to_string();
    if let Some(telemetry_path) = &args.telemetry {
        let model_path = args
            .power_model
            .as_ref()
            .ok_or_else(|| usage("--telemetry requires --power-model to integrate joules"))?;
        let model = PowerModel::from_json(&read_file(model_path)?)
            .map_err(|e| usage(format!("{}: {e}", model_path.display())))?;
        let rows = read_telemetry_csv(read_file(telemetry_path)?.as_bytes())
            .map_err(|e| usage(format!("{}: {e}", telemetry_path.display())))?;
        let samples: Vec<UtilizationSample> = rows
            .iter()
            .map(|r| UtilizationSample::new(r.timestamp, r.cpu, r.mem, r.disk, r.nic))
            .collect();
        let report = integrate_energy(&model, &samples)
            .map_err(|e| usage(format!("{}: {e}", telemetry_path.display())))?;
        extra_energy = report.total_energy;
        telemetry_note = telemetry_path.display().to_string();
    }

    let mut rows = Vec::with_capacity(args.outcomes.len());
    let mut inputs = Vec::with_capacity(args.outcomes.len());
    for path in &args.outcomes {
        let outcome: TransferOutcome = serde_json::from_str(&read_file(path)?)
            .map_err(|e| usage(format!("schema mismatch in {}: {e}", path.display())))?;
        let mode = outcome.mode.map(|m| m.to_string()).unwrap_or_else(|| "static".to_string());
        let energy = match (outcome.energy, args.telemetry.is_some()) {
            (Some(joules), _) => Some(joules + extra_energy),
            (None, true) => Some(extra_energy),
            (None, false) => None,
        };
        let ratio = energy
            .filter(|j| *j > 0.0)
            .map(|j| outcome.total_bytes as f64 * 8.0 / j);
        rows.push(format!(
            "{mode},{},{},{},{}",
            final_channels(&outcome),
            outcome.achieved_throughput,
            energy.map_or(String::new(), |j| j.to_string()),
            ratio.map_or(String::new(), |r| r.to_string()),
        ));
        inputs.push(path.display().to_string());
    }

    let comments = vec![
        format!("httpwatt report: inputs={}", inputs.join(";")),
        format!("telemetry: {telemetry_note}"),
    ];
    write_csv(
        args.out.as_deref(),
        &comments,
        "mode,channels,throughput_bps,energy_j,ratio",
        &rows,
    )
}
