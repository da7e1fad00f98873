//! The windowed control loop that drives a transport under one of the four
//! policies.
//!
//! One logical decision-maker owns the plan: it drains transport events up
//! to each window boundary, reacts to subgroup completions immediately, and
//! lets the active policy adjust channel allocations at the boundaries.
//! Minimum-energy and maximum-throughput plans are static apart from
//! completion handling; the efficiency search probes concurrency levels one
//! window each before settling; flexible throughput ramps concurrency until
//! its target holds. Every scheduling event re-checks the channel-bound
//! invariant on the ledger.

use super::{
    plan_min_energy, plan_max_throughput, proportional_split, redistribute_on_completion,
    tuned_plan, EfficiencySample, HistoryEntry, SlaError, SlaRequest, TransferOutcome,
    TransferPlan, ENERGY_ORDER,
};
use crate::planner::{
    blended_proportions, group_files, min_energy_concurrency, Dataset, Grouping, NetworkProfile,
    PlannerConfig, SizeClass,
};
use crate::sla::ClassStats;
use crate::transport::{EventKind, Transport};

/// Loop constants; the window length is the cadence of every measurement
/// and adaptation decision.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EngineConfig {
    /// Measurement window in seconds.
    pub window_secs: f64,
    pub planner: PlannerConfig,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig { window_secs: 5.0, planner: PlannerConfig::default() }
    }
}

/// Concurrency levels the efficiency search visits: 1, then multiples of
/// four, with the bound itself always probed last.
pub fn probe_schedule(max_channels: u32) -> Vec<u32> {
    let mut levels = Vec::new();
    let mut level = 1;
    while level < max_channels {
        levels.push(level);
        level = if level == 1 { 4 } else { level + 4 };
    }
    levels.push(max_channels);
    levels
}

/// Highest-ratio sample; ties go to the lower concurrency (equal efficiency
/// at lower instantaneous power).
fn best_sample(samples: &[EfficiencySample]) -> Option<u32> {
    let mut best: Option<(f64, u32)> = None;
    for s in samples {
        best = match best {
            None => Some((s.ratio, s.concurrency)),
            Some((r, c)) if s.ratio > r || (s.ratio == r && s.concurrency < c) => {
                Some((s.ratio, s.concurrency))
            }
            keep => keep,
        };
    }
    best.map(|(_, c)| c)
}

/// Per-policy mutable state.
enum Ctl {
    MinEnergy,
    MaxThroughput,
    Efficiency {
        weights: [f64; 3],
        schedule: Vec<u32>,
        /// Index into `schedule` of the probe currently running.
        probe_idx: usize,
        current_level: u32,
        samples: Vec<EfficiencySample>,
        chosen: Option<u32>,
    },
    Flexible {
        target: f64,
        level: u32,
        max: u32,
        /// The first adjustment is a ratio jump; later ones add one.
        adjusted: bool,
        unreachable: bool,
    },
}

/// Channel targets for the flexible policy: the energy-first pass smallest
/// class first, then any leftover budget dealt round-robin in the same
/// order, so exactly `level` channels are requested whenever any subgroup
/// is still alive.
fn flexible_allocation(
    grouping: &Grouping,
    network: &NetworkProfile,
    alive: &[bool; 3],
    level: u32,
) -> [u32; 3] {
    let mut counts = [0u32; 3];
    if !alive.iter().any(|&a| a) {
        return counts;
    }
    let mut remaining = level;
    for class in ENERGY_ORDER {
        if remaining == 0 {
            break;
        }
        if !alive[class.index()] {
            continue;
        }
        let want = min_energy_concurrency(grouping.group(class), network, remaining);
        counts[class.index()] += want;
        remaining -= want;
    }
    while remaining > 0 {
        for class in ENERGY_ORDER {
            if remaining == 0 {
                break;
            }
            if alive[class.index()] {
                counts[class.index()] += 1;
                remaining -= 1;
            }
        }
    }
    counts
}

fn masked_weights(weights: &[f64; 3], alive: &[bool; 3]) -> [f64; 3] {
    let mut w = *weights;
    for i in 0..3 {
        if !alive[i] {
            w[i] = 0.0;
        }
    }
    w
}

/// Move the plan to exactly `targets` channels per class (revokes before
/// grants so the budget is never transiently exceeded), record a history
/// entry per changed class, and push the new plan to the transport.
fn apply_allocation(
    plan: &mut TransferPlan,
    targets: [u32; 3],
    transport: &mut dyn Transport,
    history: &mut Vec<HistoryEntry>,
    timestamp: f64,
    window_throughput: Option<f64>,
    window_energy: Option<f64>,
) -> Result<(), SlaError> {
    let mut changed = Vec::new();
    for class in SizeClass::ALL {
        let current = plan.concurrency(class);
        let target = targets[class.index()];
        if target < current {
            plan.revoke_channels(class, current - target);
            changed.push(class);
        }
    }
    for class in SizeClass::ALL {
        let current = plan.concurrency(class);
        let target = targets[class.index()];
        if target > current {
            let granted = plan.grant_channels(class, target - current);
            debug_assert_eq!(granted, target - current, "budget exhausted mid-grant");
            changed.push(class);
        }
    }
    if changed.is_empty() {
        return Ok(());
    }
    plan.assert_consistent();
    assert!(
        plan.granted_total() <= plan.channel_bound(),
        "granted channels exceed the request bound"
    );
    for class in changed {
        let p = plan.params(class);
        history.push(HistoryEntry {
            timestamp,
            class,
            pipelining: p.pipelining,
            parallelism: p.parallelism,
            concurrency: p.concurrency,
            window_throughput,
            window_energy,
        });
    }
    transport.set_allocation(plan)?;
    Ok(())
}

/// Execute `dataset` over `transport` under the policy in `request`,
/// returning the finished transfer's accounting.
///
/// The loop is transport-agnostic: real engines block until wall-clock
/// window boundaries, the simulator advances virtual time to the same
/// boundaries, and the policy logic cannot tell the difference.
pub fn run_transfer(
    request: &SlaRequest,
    dataset: &Dataset,
    network: &NetworkProfile,
    transport: &mut dyn Transport,
    cfg: &EngineConfig,
) -> Result<TransferOutcome, SlaError> {
    request.validate()?;
    if !(cfg.window_secs > 0.0) {
        return Err(SlaError::InvalidRequest("window length must be positive".into()));
    }
    let grouping = group_files(&dataset.files, network)?;
    let bound = request.channel_bound();

    let mut alive = [false; 3];
    for class in SizeClass::ALL {
        alive[class.index()] = !grouping.group(class).is_empty();
    }

    let (mut plan, mut ctl) = match *request {
        SlaRequest::MinEnergy { channels } => {
            (plan_min_energy(&grouping, network, &cfg.planner, channels)?, Ctl::MinEnergy)
        }
        SlaRequest::MaxThroughput { channels } => (
            plan_max_throughput(&grouping, network, &cfg.planner, channels)?,
            Ctl::MaxThroughput,
        ),
        SlaRequest::EnergyEfficiency { max_channels } => {
            let weights = blended_proportions(&grouping, cfg.planner.proportion_blend)?;
            let schedule = probe_schedule(max_channels);
            let mut plan = tuned_plan(&grouping, network, &cfg.planner, max_channels);
            let first = schedule[0];
            let targets = proportional_split(&weights, first);
            for class in SizeClass::ALL {
                plan.grant_channels(class, targets[class.index()]);
            }
            (
                plan,
                Ctl::Efficiency {
                    weights,
                    current_level: first,
                    schedule,
                    probe_idx: 0,
                    samples: Vec::new(),
                    chosen: None,
                },
            )
        }
        SlaRequest::FlexibleThroughput { target_fraction, reference_throughput, max_channels } => {
            let mut plan = tuned_plan(&grouping, network, &cfg.planner, max_channels);
            let targets = flexible_allocation(&grouping, network, &alive, 1);
            for class in SizeClass::ALL {
                plan.grant_channels(class, targets[class.index()]);
            }
            (
                plan,
                Ctl::Flexible {
                    target: target_fraction * reference_throughput,
                    level: 1,
                    max: max_channels,
                    adjusted: false,
                    unreachable: false,
                },
            )
        }
    };
    plan.assert_consistent();
    assert!(plan.granted_total() <= bound, "granted channels exceed the request bound");

    transport.start(&plan, dataset)?;

    let mut history = Vec::new();
    for class in SizeClass::ALL {
        if plan.concurrency(class) > 0 {
            let p = plan.params(class);
            history.push(HistoryEntry {
                timestamp: 0.0,
                class,
                pipelining: p.pipelining,
                parallelism: p.parallelism,
                concurrency: p.concurrency,
                window_throughput: None,
                window_energy: None,
            });
        }
    }

    let mut per_class = [ClassStats::default(); 3];
    for class in SizeClass::ALL {
        per_class[class.index()].files_total = grouping.group(class).file_count();
    }

    let mut win_start_time = 0.0;
    let mut win_start_bytes = 0u64;
    let mut win_start_energy = transport.energy_snapshot();
    let mut boundary_idx = 1u64;

    loop {
        let boundary = boundary_idx as f64 * cfg.window_secs;
        while let Some(ev) = transport.next_event(boundary) {
            match ev.kind {
                EventKind::BytesProgress { class, bytes, .. } => {
                    per_class[class.index()].bytes_completed += bytes;
                }
                EventKind::FileComplete { class, .. } => {
                    per_class[class.index()].files_completed += 1;
                }
                EventKind::SubgroupComplete { class } => {
                    alive[class.index()] = false;
                    if !alive.iter().any(|&a| a) {
                        continue; // Nothing left to schedule for.
                    }
                    match &mut ctl {
                        Ctl::MinEnergy => {
                            let mut freed = plan.release_class(class);
                            for c in ENERGY_ORDER {
                                if freed == 0 {
                                    break;
                                }
                                if !alive[c.index()] || plan.concurrency(c) > 0 {
                                    continue;
                                }
                                let want =
                                    min_energy_concurrency(grouping.group(c), network, freed);
                                let granted = plan.grant_channels(c, want);
                                freed -= granted;
                                if granted > 0 {
                                    let p = plan.params(c);
                                    history.push(HistoryEntry {
                                        timestamp: ev.timestamp,
                                        class: c,
                                        pipelining: p.pipelining,
                                        parallelism: p.parallelism,
                                        concurrency: p.concurrency,
                                        window_throughput: None,
                                        window_energy: None,
                                    });
                                }
                            }
                            plan.assert_consistent();
                            assert!(plan.granted_total() <= bound);
                            transport.set_allocation(&plan)?;
                        }
                        Ctl::MaxThroughput => {
                            let active: Vec<SizeClass> = SizeClass::ALL
                                .into_iter()
                                .filter(|c| alive[c.index()])
                                .collect();
                            let gains = redistribute_on_completion(&mut plan, class, &active)?;
                            assert!(plan.granted_total() <= bound);
                            for (c, _) in gains {
                                let p = plan.params(c);
                                history.push(HistoryEntry {
                                    timestamp: ev.timestamp,
                                    class: c,
                                    pipelining: p.pipelining,
                                    parallelism: p.parallelism,
                                    concurrency: p.concurrency,
                                    window_throughput: None,
                                    window_energy: None,
                                });
                            }
                            transport.set_allocation(&plan)?;
                        }
                        Ctl::Efficiency { weights, current_level, .. } => {
                            let targets = proportional_split(
                                &masked_weights(weights, &alive),
                                *current_level,
                            );
                            apply_allocation(
                                &mut plan,
                                targets,
                                transport,
                                &mut history,
                                ev.timestamp,
                                None,
                                None,
                            )?;
                        }
                        Ctl::Flexible { level, .. } => {
                            let targets = flexible_allocation(&grouping, network, &alive, *level);
                            apply_allocation(
                                &mut plan,
                                targets,
                                transport,
                                &mut history,
                                ev.timestamp,
                                None,
                                None,
                            )?;
                        }
                    }
                }
                EventKind::ChannelError { .. } => {}
            }
        }
        if transport.is_finished() {
            break;
        }

        let now = transport.now();
        let bytes = transport.progress_snapshot();
        let energy = transport.energy_snapshot();
        let elapsed = now - win_start_time;
        debug_assert!(elapsed > 0.0, "window boundary did not advance the clock");
        let window_throughput = (bytes - win_start_bytes) as f64 * 8.0 / elapsed;
        let window_energy = match (energy, win_start_energy) {
            (Some(e), Some(s)) => Some(e - s),
            _ => None,
        };

        match &mut ctl {
            Ctl::MinEnergy | Ctl::MaxThroughput => {}
            Ctl::Efficiency {
                weights,
                schedule,
                probe_idx,
                current_level,
                samples,
                chosen,
            } => {
                if chosen.is_none() {
                    let Some(we) = window_energy else {
                        return Err(SlaError::InvalidRequest(
                            "the efficiency search needs energy accounting; \
                             wire a power model or use the simulator"
                                .into(),
                        ));
                    };
                    let bits = window_throughput * elapsed;
                    samples.push(EfficiencySample {
                        concurrency: *current_level,
                        window_throughput,
                        window_energy: we,
                        ratio: if we > 0.0 { bits / we } else { 0.0 },
                    });
                    *probe_idx += 1;
                    let next_level = if *probe_idx < schedule.len() {
                        schedule[*probe_idx]
                    } else {
                        let best = best_sample(samples).expect("samples is non-empty");
                        *chosen = Some(best);
                        best
                    };
                    *current_level = next_level;
                    let targets =
                        proportional_split(&masked_weights(weights, &alive), next_level);
                    apply_allocation(
                        &mut plan,
                        targets,
                        transport,
                        &mut history,
                        now,
                        Some(window_throughput),
                        Some(we),
                    )?;
                }
            }
            Ctl::Flexible { target, level, max, adjusted, unreachable } => {
                if window_throughput < *target {
                    let next = if !*adjusted {
                        ((*target / window_throughput).ceil() as u32).clamp(*level, *max)
                    } else {
                        (*level + 1).min(*max)
                    };
                    if next == *level && *level == *max {
                        *unreachable = true;
                    }
                    if next != *level {
                        *level = next;
                        let targets = flexible_allocation(&grouping, network, &alive, next);
                        apply_allocation(
                            &mut plan,
                            targets,
                            transport,
                            &mut history,
                            now,
                            Some(window_throughput),
                            window_energy,
                        )?;
                    }
                }
                *adjusted = true;
            }
        }

        win_start_time = now;
        win_start_bytes = bytes;
        win_start_energy = energy;
        boundary_idx += 1;
    }

    let duration = transport.now();
    let total_bytes = transport.progress_snapshot();
    let target_unreachable = matches!(ctl, Ctl::Flexible { unreachable: true, .. });
    let (probes, chosen_concurrency, dataset_exhausted_during_search) = match ctl {
        Ctl::Efficiency { samples, chosen, .. } => {
            let exhausted = chosen.is_none();
            let reported = chosen.or_else(|| best_sample(&samples));
            (samples, reported, exhausted)
        }
        _ => (Vec::new(), None, false),
    };

    Ok(TransferOutcome {
        mode: Some(request.mode()),
        achieved_throughput: if duration > 0.0 {
            total_bytes as f64 * 8.0 / duration
        } else {
            0.0
        },
        energy: transport.energy_snapshot(),
        duration,
        total_bytes,
        per_class,
        history,
        probes,
        chosen_concurrency,
        dataset_exhausted_during_search,
        target_unreachable,
        failed_files: transport.failures(),
        warnings: transport.warnings(),
    })
}
