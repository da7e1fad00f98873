//! Service-level policies: who gets channels, and when that changes.
//!
//! Two of the four policies are static plans computed up front (minimum
//! energy, maximum throughput); the other two adapt at five-second window
//! boundaries (energy efficiency probing, flexible throughput ramping) and
//! live in [`engine`]. This module owns the plan/ledger types shared by all
//! four and the static planning rules.

use crate::planner::{
    self, Grouping, NetworkProfile, PlannerConfig, SizeClass, TransferParams,
};
use crate::transport::FailedFile;
use serde::{Deserialize, Serialize};
use std::fmt;
use thiserror::Error;

pub mod engine;

/// Which policy drives the transfer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SlaMode {
    MinEnergy,
    MaxThroughput,
    EnergyEfficiency,
    FlexibleThroughput,
}

impl fmt::Display for SlaMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SlaMode::MinEnergy => write!(f, "min-energy"),
            SlaMode::MaxThroughput => write!(f, "max-throughput"),
            SlaMode::EnergyEfficiency => write!(f, "energy-efficiency"),
            SlaMode::FlexibleThroughput => write!(f, "flexible"),
        }
    }
}

/// User intent: the policy plus the parameters that policy needs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum SlaRequest {
    /// Spend at most `channels` channels, placed where they cost the least
    /// energy; never adapt.
    MinEnergy { channels: u32 },
    /// Spend every one of `channels` channels for maximum throughput.
    MaxThroughput { channels: u32 },
    /// Probe concurrency levels and settle on the best throughput/energy
    /// ratio, never exceeding `max_channels`.
    EnergyEfficiency { max_channels: u32 },
    /// Ramp concurrency until `target_fraction` of `reference_throughput`
    /// (bits/s) is met, never exceeding `max_channels`.
    FlexibleThroughput {
        target_fraction: f64,
        reference_throughput: f64,
        max_channels: u32,
    },
}

impl SlaRequest {
    pub fn mode(&self) -> SlaMode {
        match self {
            SlaRequest::MinEnergy { .. } => SlaMode::MinEnergy,
            SlaRequest::MaxThroughput { .. } => SlaMode::MaxThroughput,
            SlaRequest::EnergyEfficiency { .. } => SlaMode::EnergyEfficiency,
            SlaRequest::FlexibleThroughput { .. } => SlaMode::FlexibleThroughput,
        }
    }

    /// The hard upper bound on simultaneously granted channels.
    pub fn channel_bound(&self) -> u32 {
        match *self {
            SlaRequest::MinEnergy { channels } | SlaRequest::MaxThroughput { channels } => channels,
            SlaRequest::EnergyEfficiency { max_channels }
            | SlaRequest::FlexibleThroughput { max_channels, .. } => max_channels,
        }
    }

    pub fn validate(&self) -> Result<(), SlaError> {
        if self.channel_bound() == 0 {
            return Err(SlaError::InvalidRequest("channel bound must be at least 1".into()));
        }
        if let SlaRequest::FlexibleThroughput { target_fraction, reference_throughput, .. } = *self
        {
            if !(target_fraction > 0.0 && target_fraction <= 1.0) {
                return Err(SlaError::InvalidRequest(
                    "target fraction must be in (0, 1]".into(),
                ));
            }
            if reference_throughput <= 0.0 {
                return Err(SlaError::InvalidRequest(
                    "reference throughput must be positive".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Which subgroup owns each channel id; `None` slots are ungranted budget.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelLedger {
    slots: Vec<Option<SizeClass>>,
}

impl ChannelLedger {
    pub fn new(bound: u32) -> Self {
        ChannelLedger { slots: vec![None; bound as usize] }
    }

    /// Total channels the request allows, granted or not.
    pub fn bound(&self) -> u32 {
        self.slots.len() as u32
    }

    pub fn granted_total(&self) -> u32 {
        self.slots.iter().filter(|s| s.is_some()).count() as u32
    }

    pub fn granted(&self, class: SizeClass) -> u32 {
        self.slots.iter().filter(|s| **s == Some(class)).count() as u32
    }

    /// Grant one free channel to `class`; `None` when the budget is spent.
    pub fn grant(&mut self, class: SizeClass) -> Option<u32> {
        let id = self.slots.iter().position(|s| s.is_none())?;
        self.slots[id] = Some(class);
        Some(id as u32)
    }

    /// Release every channel of `class` back to the free pool.
    pub fn release_all(&mut self, class: SizeClass) -> u32 {
        let mut freed = 0;
        for slot in &mut self.slots {
            if *slot == Some(class) {
                *slot = None;
                freed += 1;
            }
        }
        freed
    }

    /// Release `count` channels of `class` (highest ids first).
    pub fn release(&mut self, class: SizeClass, count: u32) -> u32 {
        let mut freed = 0;
        for slot in self.slots.iter_mut().rev() {
            if freed == count {
                break;
            }
            if *slot == Some(class) {
                *slot = None;
                freed += 1;
            }
        }
        freed
    }

    pub fn owner(&self, id: u32) -> Option<SizeClass> {
        self.slots.get(id as usize).copied().flatten()
    }
}

/// Parameters per subgroup plus the channel ledger that backs them.
///
/// The `concurrency` field of each class's params always equals the number
/// of ledger slots granted to that class; all mutation goes through methods
/// that maintain this.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferPlan {
    params: [TransferParams; 3],
    ledger: ChannelLedger,
}

impl TransferPlan {
    pub fn new(bound: u32) -> Self {
        TransferPlan {
            params: [TransferParams::new(1, 1, 0); 3],
            ledger: ChannelLedger::new(bound),
        }
    }

    pub fn params(&self, class: SizeClass) -> TransferParams {
        self.params[class.index()]
    }

    pub fn ledger(&self) -> &ChannelLedger {
        &self.ledger
    }

    pub fn channel_bound(&self) -> u32 {
        self.ledger.bound()
    }

    pub fn granted_total(&self) -> u32 {
        self.ledger.granted_total()
    }

    pub fn concurrency(&self, class: SizeClass) -> u32 {
        self.params[class.index()].concurrency
    }

    pub fn set_tuning(&mut self, class: SizeClass, pipelining: u32, parallelism: u32) {
        let p = &mut self.params[class.index()];
        p.pipelining = pipelining.max(1);
        p.parallelism = parallelism.max(1);
    }

    /// Grant up to `count` channels to `class`; returns how many were free.
    pub fn grant_channels(&mut self, class: SizeClass, count: u32) -> u32 {
        let mut granted = 0;
        for _ in 0..count {
            if self.ledger.grant(class).is_none() {
                break;
            }
            granted += 1;
        }
        self.params[class.index()].concurrency += granted;
        granted
    }

    /// Take `count` channels away from `class`; returns how many it held.
    pub fn revoke_channels(&mut self, class: SizeClass, count: u32) -> u32 {
        let freed = self.ledger.release(class, count);
        self.params[class.index()].concurrency -= freed;
        freed
    }

    /// Release everything `class` holds (it finished its files).
    pub fn release_class(&mut self, class: SizeClass) -> u32 {
        let freed = self.ledger.release_all(class);
        self.params[class.index()].concurrency = 0;
        freed
    }

    /// Debug-check the params/ledger consistency invariant.
    pub fn assert_consistent(&self) {
        for class in SizeClass::ALL {
            debug_assert_eq!(
                self.params[class.index()].concurrency,
                self.ledger.granted(class),
                "params/ledger drift for {class}"
            );
        }
        debug_assert!(self.granted_total() <= self.channel_bound());
    }
}

/// One probe (or sweep point): the ratio the efficiency search optimizes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EfficiencySample {
    pub concurrency: u32,
    /// Mean bits/s over the measured window (or whole run for sweeps).
    pub window_throughput: f64,
    /// Joules over the same span.
    pub window_energy: f64,
    /// Bits moved per joule: throughput × seconds / energy.
    pub ratio: f64,
}

/// Completion accounting for one subgroup.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassStats {
    pub files_total: usize,
    pub files_completed: usize,
    pub bytes_completed: u64,
}

/// One parameter-history record: a subgroup's tuning at the moment its
/// channel count first became nonzero or changed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub timestamp: f64,
    pub class: SizeClass,
    pub pipelining: u32,
    pub parallelism: u32,
    pub concurrency: u32,
    /// Bits/s over the window that triggered the change, when one exists.
    pub window_throughput: Option<f64>,
    /// Joules over that window, when energy accounting is available.
    pub window_energy: Option<f64>,
}

/// Everything a finished transfer reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferOutcome {
    /// The policy that drove the run; `None` for plain static executions
    /// such as sweep points.
    pub mode: Option<SlaMode>,
    /// Total bits moved over total duration.
    pub achieved_throughput: f64,
    /// Joules, when the transport or telemetry could account for them.
    pub energy: Option<f64>,
    pub duration: f64,
    pub total_bytes: u64,
    pub per_class: [ClassStats; 3],
    pub history: Vec<HistoryEntry>,
    /// Efficiency probes taken during the search phase (energy-efficiency
    /// mode only).
    pub probes: Vec<EfficiencySample>,
    /// The concurrency the search settled on (energy-efficiency mode only).
    pub chosen_concurrency: Option<u32>,
    /// The dataset ran out before the probe schedule finished.
    pub dataset_exhausted_during_search: bool,
    /// Flexible throughput hit the channel bound without reaching target.
    pub target_unreachable: bool,
    pub failed_files: Vec<FailedFile>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Error)]
pub enum SlaError {
    #[error("dataset contains no files")]
    EmptyDataset,
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("no active subgroups remain to receive channels")]
    NoActiveGroups,
    #[error(transparent)]
    Transport(#[from] crate::transport::TransportError),
    #[error(transparent)]
    Planner(#[from] planner::PlannerError),
}

/// Round-robin order for throughput-first channel grants: largest files
/// first, so the long-running work starts as early as possible.
const THROUGHPUT_ROTATION: [SizeClass; 3] = [SizeClass::Large, SizeClass::Medium, SizeClass::Small];

/// Grant order for the energy-first planner: small files first, so the
/// per-file overhead-heavy work gets the concurrency it needs.
const ENERGY_ORDER: [SizeClass; 3] = [SizeClass::Small, SizeClass::Medium, SizeClass::Large];

fn tuned_plan(grouping: &Grouping, profile: &NetworkProfile, cfg: &PlannerConfig, bound: u32) -> TransferPlan {
    let mut plan = TransferPlan::new(bound);
    for class in SizeClass::ALL {
        let group = grouping.group(class);
        if group.is_empty() {
            continue;
        }
        let pp = planner::optimal_pipelining(group, profile, cfg.pipelining_cap);
        let p = planner::optimal_parallelism(group, profile);
        plan.set_tuning(class, pp, p);
    }
    plan
}

/// Build the energy-first static plan: walk subgroups smallest class first,
/// granting each the concurrency rule's share of the shrinking budget.
/// Subgroups left at zero are deferred, not dropped — they run when a
/// completing subgroup frees channels. Leftover budget stays unspent.
pub fn plan_min_energy(
    grouping: &Grouping,
    profile: &NetworkProfile,
    cfg: &PlannerConfig,
    channels: u32,
) -> Result<TransferPlan, SlaError> {
    if channels == 0 {
        return Err(SlaError::InvalidRequest("channel count must be at least 1".into()));
    }
    if grouping.total_files() == 0 {
        return Err(SlaError::EmptyDataset);
    }
    let mut plan = tuned_plan(grouping, profile, cfg, channels);
    let mut remaining = channels;
    for class in ENERGY_ORDER {
        let group = grouping.group(class);
        if group.is_empty() {
            continue;
        }
        let cc = planner::min_energy_concurrency(group, profile, remaining);
        let granted = plan.grant_channels(class, cc);
        debug_assert_eq!(granted, cc);
        remaining -= granted;
    }
    plan.assert_consistent();
    Ok(plan)
}

/// Build the throughput-first static plan: every channel granted, dealt
/// round-robin Large→Medium→Small with empty classes skipped.
pub fn plan_max_throughput(
    grouping: &Grouping,
    profile: &NetworkProfile,
    cfg: &PlannerConfig,
    channels: u32,
) -> Result<TransferPlan, SlaError> {
    if channels == 0 {
        return Err(SlaError::InvalidRequest("channel count must be at least 1".into()));
    }
    if grouping.total_files() == 0 {
        return Err(SlaError::EmptyDataset);
    }
    let mut plan = tuned_plan(grouping, profile, cfg, channels);
    let rotation: Vec<SizeClass> = THROUGHPUT_ROTATION
        .iter()
        .copied()
        .filter(|c| !grouping.group(*c).is_empty())
        .collect();
    for i in 0..channels {
        let class = rotation[i as usize % rotation.len()];
        plan.grant_channels(class, 1);
    }
    plan.assert_consistent();
    Ok(plan)
}

/// Split `total` channels across the three classes proportionally to
/// `weights` (largest-remainder rounding, ties to the smaller class), so the
/// counts sum to `total` exactly. Zero-weight classes get nothing.
pub fn proportional_split(weights: &[f64; 3], total: u32) -> [u32; 3] {
    let sum: f64 = weights.iter().sum();
    if sum <= 0.0 || total == 0 {
        return [0; 3];
    }
    let mut counts = [0u32; 3];
    let mut fracs = [(0.0f64, 0usize); 3];
    let mut assigned = 0;
    for i in 0..3 {
        let exact = weights[i] / sum * total as f64;
        counts[i] = exact.floor() as u32;
        assigned += counts[i];
        fracs[i] = (exact - exact.floor(), i);
    }
    // Hand out the remainder to the largest fractional parts, but never to
    // a zero-weight class.
    fracs.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut left = total - assigned;
    while left > 0 {
        for &(_, idx) in &fracs {
            if left == 0 {
                break;
            }
            if weights[idx] > 0.0 {
                counts[idx] += 1;
                left -= 1;
            }
        }
    }
    counts
}

/// Move a finished subgroup's channels to the survivors, one at a time in
/// the Large→Medium→Small rotation. Returns (class, channels gained) pairs
/// for history accounting.
pub fn redistribute_on_completion(
    plan: &mut TransferPlan,
    finished: SizeClass,
    active: &[SizeClass],
) -> Result<Vec<(SizeClass, u32)>, SlaError> {
    if active.is_empty() {
        return Err(SlaError::NoActiveGroups);
    }
    let freed = plan.release_class(finished);
    let rotation: Vec<SizeClass> =
        THROUGHPUT_ROTATION.iter().copied().filter(|c| active.contains(c)).collect();
    let mut gains = [0u32; 3];
    for i in 0..freed {
        let class = rotation[i as usize % rotation.len()];
        plan.grant_channels(class, 1);
        gains[class.index()] += 1;
    }
    plan.assert_consistent();
    Ok(SizeClass::ALL
        .into_iter()
        .filter(|c| gains[c.index()] > 0)
        .map(|c| (c, gains[c.index()]))
        .collect())
}
