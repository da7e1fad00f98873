//! Deterministic virtual-time execution of transfer plans.
//!
//! The simulated link is a processor-sharing pipe: every streaming response
//! gets an equal share of the bandwidth, except that a response larger than
//! one TCP buffer is clocked down to `buffer × 8 / rtt` bits/s — the window
//! limit that makes splitting big files into parallel ranges worthwhile and
//! does nothing for files that fit in a single buffer. A channel issues its
//! batch of up to `pipelining` requests back-to-back; between batches it
//! pays one round trip unless the previous batch was at least one
//! bandwidth-delay product long (a saturated pipe has no idle gap to
//! refill), and every request costs a flat service overhead. Instantaneous
//! power is affine in the granted channels and their extra parallel
//! streams, and a granted channel keeps drawing power until its subgroup
//! finishes, so over-provisioning concurrency costs energy even when the
//! extra channels find no work. All constants are synthetic, chosen so the
//! qualitative throughput/energy phenomena of real transfers appear at desk
//! scale; every one is configurable.

use crate::planner::{
    classify, subgroup_proportions, Dataset, NetworkProfile, PlannerConfig, SizeClass,
};
use crate::sla::{
    proportional_split, EfficiencySample, HistoryEntry, SlaError, TransferOutcome, TransferPlan,
};
use crate::transport::{
    split_ranges, EventKind, FailedFile, TransferEvent, Transport, TransportError,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::VecDeque;

/// Constants of the simulated end system and link.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimProfile {
    pub network: NetworkProfile,
    /// Flat per-request service cost in seconds (disk seeks, header
    /// parsing); the small-file penalty knob.
    #[serde(default = "default_overhead")]
    pub per_request_overhead: f64,
    /// Watts drawn with zero transfer activity.
    #[serde(default = "default_idle_power")]
    pub idle_power: f64,
    /// Watts per granted channel.
    #[serde(default = "default_channel_power")]
    pub per_channel_power: f64,
    /// Watts per parallel stream beyond a channel's first.
    #[serde(default = "default_parallel_power")]
    pub per_parallel_power: f64,
    /// Relative jitter applied to each request's overhead, 0 disables.
    #[serde(default)]
    pub overhead_jitter: f64,
    /// Seed for the jitter stream; unused while jitter is 0.
    #[serde(default)]
    pub seed: u64,
}

fn default_overhead() -> f64 {
    1e-3
}

fn default_idle_power() -> f64 {
    10.0
}

fn default_channel_power() -> f64 {
    0.5
}

fn default_parallel_power() -> f64 {
    0.5
}

impl SimProfile {
    /// Default constants over the given link.
    pub fn defaults(network: NetworkProfile) -> Self {
        SimProfile {
            network,
            per_request_overhead: default_overhead(),
            idle_power: default_idle_power(),
            per_channel_power: default_channel_power(),
            per_parallel_power: default_parallel_power(),
            overhead_jitter: 0.0,
            seed: 0,
        }
    }

    pub fn from_json(text: &str) -> Result<SimProfile, serde_json::Error> {
        serde_json::from_str(text)
    }
}

/// Completion-time tolerance: half a bit. No range is smaller than a byte,
/// and float error on remaining-bit counters stays far below this.
const EPS_BITS: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq)]
enum Phase {
    /// No range assigned (or batch finished on this slot).
    Idle,
    /// Paying turnaround latency and request overheads until `until`.
    Dead { until: f64 },
    /// Head of the queue is receiving bytes.
    Streaming,
}

#[derive(Debug, Clone)]
struct SlotRange {
    file: usize,
    remaining_bits: f64,
    bytes: u64,
}

/// One persistent connection within a channel.
#[derive(Debug, Clone)]
struct Slot {
    /// No request has ever been sent on this connection.
    cold: bool,
    phase: Phase,
    queue: VecDeque<SlotRange>,
    /// Bytes this slot carried in its current batch (for the turnaround
    /// rule of the next one).
    batch_bytes: u64,
    last_batch_bytes: u64,
}

impl Slot {
    fn new() -> Self {
        Slot { cold: true, phase: Phase::Idle, queue: VecDeque::new(), batch_bytes: 0, last_batch_bytes: 0 }
    }
}

#[derive(Debug, Clone)]
struct SimChannel {
    class: SizeClass,
    slots: Vec<Slot>,
    in_batch: bool,
    /// Revoked by the scheduler; finishes its batch, then disappears.
    draining: bool,
}

/// Deterministic [`Transport`] over a virtual clock.
pub struct SimTransport {
    profile: SimProfile,
    bdp_bytes: f64,
    started: bool,
    now: f64,
    finished: bool,
    files: Vec<(u64, SizeClass)>,
    class_queues: [VecDeque<usize>; 3],
    class_files_left: [usize; 3],
    params: [crate::planner::TransferParams; 3],
    channels: Vec<SimChannel>,
    /// Ranges not yet delivered, per file; populated at dispatch.
    ranges_left: Vec<u32>,
    total_bits: f64,
    queued_bits: f64,
    energy: f64,
    out: VecDeque<TransferEvent>,
    jitter_rng: ChaCha8Rng,
}

impl SimTransport {
    pub fn new(profile: SimProfile) -> Self {
        let seed = profile.seed;
        SimTransport {
            profile,
            bdp_bytes: 0.0,
            started: false,
            now: 0.0,
            finished: false,
            files: Vec::new(),
            class_queues: [VecDeque::new(), VecDeque::new(), VecDeque::new()],
            class_files_left: [0; 3],
            params: [crate::planner::TransferParams::new(1, 1, 0); 3],
            channels: Vec::new(),
            ranges_left: Vec::new(),
            total_bits: 0.0,
            queued_bits: 0.0,
            energy: 0.0,
            out: VecDeque::new(),
            jitter_rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn profile(&self) -> &SimProfile {
        &self.profile
    }

    fn request_overhead(&mut self) -> f64 {
        let base = self.profile.per_request_overhead;
        if self.profile.overhead_jitter == 0.0 {
            return base;
        }
        let u: f64 = self.jitter_rng.gen();
        (base * (1.0 + self.profile.overhead_jitter * (2.0 * u - 1.0))).max(0.0)
    }

    fn class_incomplete(&self, class: SizeClass) -> bool {
        self.class_files_left[class.index()] > 0
    }

    fn current_power(&self) -> f64 {
        let mut power = self.profile.idle_power;
        for ch in &self.channels {
            if self.class_incomplete(ch.class) {
                power += self.profile.per_channel_power
                    + self.profile.per_parallel_power * (ch.slots.len().saturating_sub(1)) as f64;
            }
        }
        power
    }

    /// Water-filling bandwidth shares for every streaming slot, capped at
    /// the window limit for over-buffer responses.
    fn compute_rates(&self) -> Vec<(usize, usize, f64)> {
        let window_cap = self.profile.network.tcp_buffer as f64 * 8.0 / self.profile.network.rtt;
        let mut items: Vec<(f64, usize, usize)> = Vec::new();
        for (ci, ch) in self.channels.iter().enumerate() {
            for (si, slot) in ch.slots.iter().enumerate() {
                if slot.phase == Phase::Streaming {
                    if let Some(head) = slot.queue.front() {
                        let cap = if head.bytes > self.profile.network.tcp_buffer {
                            window_cap
                        } else {
                            f64::INFINITY
                        };
                        items.push((cap, ci, si));
                    }
                }
            }
        }
        items.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let mut rates = Vec::with_capacity(items.len());
        let mut bw = self.profile.network.bandwidth;
        let mut left = items.len();
        for (cap, ci, si) in items {
            let share = (bw / left as f64).min(cap);
            rates.push((ci, si, share));
            bw -= share;
            left -= 1;
        }
        rates
    }

    fn pick_batch(&mut self, ci: usize) {
        let class = self.channels[ci].class;
        let params = self.params[class.index()];
        let pp = params.pipelining.max(1) as usize;
        let p = params.parallelism.max(1) as usize;

        let mut batch = Vec::with_capacity(pp);
        while batch.len() < pp {
            match self.class_queues[class.index()].pop_front() {
                Some(idx) => batch.push(idx),
                None => break,
            }
        }
        if batch.is_empty() {
            return; // Out of work; the channel idles until its class completes.
        }

        // Resize connection slots to the current parallelism; new ones cold.
        let ch = &mut self.channels[ci];
        ch.slots.resize_with(p, Slot::new);
        for slot in &mut ch.slots {
            slot.queue.clear();
            slot.batch_bytes = 0;
        }
        for &idx in &batch {
            let (size, _) = self.files[idx];
            let entry = crate::planner::FileEntry::new(String::new(), size);
            let ranges = split_ranges(&entry, p as u32);
            self.ranges_left[idx] = ranges.len() as u32;
            for (r, range) in ranges.into_iter().enumerate() {
                let slot = &mut self.channels[ci].slots[r];
                slot.queue.push_back(SlotRange {
                    file: idx,
                    remaining_bits: range.length as f64 * 8.0,
                    bytes: range.length,
                });
                slot.batch_bytes += range.length;
            }
            self.queued_bits -= size as f64 * 8.0;
        }

        let rtt = self.profile.network.rtt;
        let bdp = self.bdp_bytes;
        let now = self.now;
        for si in 0..self.channels[ci].slots.len() {
            let (requests, cold, last_bytes, empty) = {
                let slot = &self.channels[ci].slots[si];
                (slot.queue.len(), slot.cold, slot.last_batch_bytes, slot.queue.is_empty())
            };
            if empty {
                self.channels[ci].slots[si].phase = Phase::Idle;
                continue;
            }
            // Cold connections always pay a round trip before the first
            // byte; warm ones only when the previous batch was too short to
            // keep the pipe busy across the request boundary.
            let turnaround = if cold || (last_bytes as f64) < bdp { rtt } else { 0.0 };
            let mut dead = turnaround;
            for _ in 0..requests {
                dead += self.request_overhead();
            }
            let slot = &mut self.channels[ci].slots[si];
            slot.cold = false;
            slot.phase = Phase::Dead { until: now + dead };
        }
        self.channels[ci].in_batch = true;
    }

    /// Apply every state change due at the current instant, repeating until
    /// none fire (completions can cascade into new batches of zero width).
    fn fire_transitions(&mut self) {
        loop {
            let mut changed = false;
            for ci in 0..self.channels.len() {
                for si in 0..self.channels[ci].slots.len() {
                    let phase = self.channels[ci].slots[si].phase;
                    match phase {
                        Phase::Dead { until } if until <= self.now => {
                            self.channels[ci].slots[si].phase =
                                if self.channels[ci].slots[si].queue.is_empty() {
                                    Phase::Idle
                                } else {
                                    Phase::Streaming
                                };
                            changed = true;
                        }
                        Phase::Streaming => {
                            let done = self.channels[ci].slots[si]
                                .queue
                                .front()
                                .map(|r| r.remaining_bits <= EPS_BITS)
                                .unwrap_or(false);
                            if done {
                                self.complete_head_range(ci, si);
                                changed = true;
                            }
                        }
                        _ => {}
                    }
                }

                let ch = &self.channels[ci];
                let batch_done = ch.in_batch
                    && ch.slots.iter().all(|s| s.phase == Phase::Idle && s.queue.is_empty());
                if batch_done {
                    for slot in &mut self.channels[ci].slots {
                        slot.last_batch_bytes = slot.batch_bytes;
                        slot.batch_bytes = 0;
                    }
                    self.channels[ci].in_batch = false;
                    changed = true;
                }
                if !self.channels[ci].in_batch && !self.channels[ci].draining {
                    let before = self.channels[ci].in_batch;
                    self.pick_batch(ci);
                    if self.channels[ci].in_batch != before {
                        changed = true;
                    }
                }
            }
            // Drained channels disappear once their last batch is done.
            let before = self.channels.len();
            self.channels.retain(|ch| !(ch.draining && !ch.in_batch));
            if self.channels.len() != before {
                changed = true;
            }
            if !changed {
                break;
            }
        }
    }

    fn complete_head_range(&mut self, ci: usize, si: usize) {
        let (file, bytes) = {
            let slot = &mut self.channels[ci].slots[si];
            let head = slot.queue.pop_front().expect("streaming slot has a head range");
            if slot.queue.is_empty() {
                slot.phase = Phase::Idle;
            }
            (head.file, head.bytes)
        };
        let class = self.files[file].1;
        self.out.push_back(TransferEvent {
            timestamp: self.now,
            kind: EventKind::BytesProgress { class, file, bytes },
        });
        self.ranges_left[file] -= 1;
        if self.ranges_left[file] == 0 {
            self.out.push_back(TransferEvent {
                timestamp: self.now,
                kind: EventKind::FileComplete { class, file },
            });
            let left = &mut self.class_files_left[class.index()];
            *left -= 1;
            if *left == 0 {
                self.out.push_back(TransferEvent {
                    timestamp: self.now,
                    kind: EventKind::SubgroupComplete { class },
                });
            }
            if self.class_files_left.iter().all(|&n| n == 0) {
                self.finished = true;
            }
        }
    }

    /// Advance one segment: accrue bytes and energy up to the next state
    /// change or `limit`, whichever is earlier, then fire what is due.
    fn step_segment(&mut self, limit: f64) {
        let rates = self.compute_rates();
        let mut target = limit;
        for &(ci, si, rate) in &rates {
            if rate > 0.0 {
                let remaining = self.channels[ci].slots[si].queue[0].remaining_bits;
                target = target.min(self.now + remaining / rate);
            }
        }
        for ch in &self.channels {
            for slot in &ch.slots {
                if let Phase::Dead { until } = slot.phase {
                    target = target.min(until);
                }
            }
        }
        let dt = (target - self.now).max(0.0);
        if dt > 0.0 {
            self.energy += self.current_power() * dt;
            for &(ci, si, rate) in &rates {
                self.channels[ci].slots[si].queue[0].remaining_bits -= rate * dt;
            }
            self.now = target;
        }
        self.fire_transitions();
    }

    /// Total joules consumed so far.
    pub fn energy_joules(&self) -> f64 {
        self.energy
    }
}

impl Transport for SimTransport {
    fn start(&mut self, plan: &TransferPlan, dataset: &Dataset) -> Result<(), TransportError> {
        self.bdp_bytes = self.profile.network.bdp();
        self.files = dataset
            .files
            .iter()
            .map(|f| (f.size, classify(f.size, self.bdp_bytes)))
            .collect();
        self.ranges_left = vec![0; self.files.len()];
        for (idx, (_, class)) in self.files.iter().enumerate() {
            self.class_queues[class.index()].push_back(idx);
        }
        for class in SizeClass::ALL {
            self.class_files_left[class.index()] = self.class_queues[class.index()].len();
            self.params[class.index()] = plan.params(class);
        }
        self.total_bits = self.files.iter().map(|(s, _)| *s as f64 * 8.0).sum();
        self.queued_bits = self.total_bits;
        self.finished = self.files.is_empty();
        self.started = true;
        for id in 0..plan.channel_bound() {
            if let Some(class) = plan.ledger().owner(id) {
                self.channels.push(SimChannel {
                    class,
                    slots: Vec::new(),
                    in_batch: false,
                    draining: false,
                });
            }
        }
        self.fire_transitions();
        Ok(())
    }

    fn set_allocation(&mut self, plan: &TransferPlan) -> Result<(), TransportError> {
        if !self.started {
            return Err(TransportError::NotStarted);
        }
        for class in SizeClass::ALL {
            self.params[class.index()] = plan.params(class);
            let desired = plan.concurrency(class);
            let live = self
                .channels
                .iter()
                .filter(|c| c.class == class && !c.draining)
                .count() as u32;
            if desired > live {
                for _ in 0..(desired - live) {
                    self.channels.push(SimChannel {
                        class,
                        slots: Vec::new(),
                        in_batch: false,
                        draining: false,
                    });
                }
            } else if desired < live {
                // Revoke the youngest channels first.
                let mut to_drain = live - desired;
                for ch in self.channels.iter_mut().rev() {
                    if to_drain == 0 {
                        break;
                    }
                    if ch.class == class && !ch.draining {
                        ch.draining = true;
                        to_drain -= 1;
                    }
                }
            }
        }
        self.fire_transitions();
        Ok(())
    }

    fn next_event(&mut self, deadline: f64) -> Option<TransferEvent> {
        if !self.started {
            return None;
        }
        loop {
            if let Some(ev) = self.out.pop_front() {
                return Some(ev);
            }
            if self.finished || self.now >= deadline {
                return None;
            }
            self.step_segment(deadline);
        }
    }

    fn now(&self) -> f64 {
        self.now
    }

    fn progress_snapshot(&self) -> u64 {
        let mut in_flight = 0.0;
        for ch in &self.channels {
            for slot in &ch.slots {
                for r in &slot.queue {
                    in_flight += r.remaining_bits;
                }
            }
        }
        (((self.total_bits - self.queued_bits - in_flight) / 8.0).round()).max(0.0) as u64
    }

    fn energy_snapshot(&self) -> Option<f64> {
        Some(self.energy)
    }

    fn is_finished(&self) -> bool {
        self.finished
    }

    fn failures(&self) -> Vec<FailedFile> {
        Vec::new()
    }

    fn warnings(&self) -> Vec<String> {
        Vec::new()
    }
}

/// Run a static plan to completion on the simulator.
///
/// The plan is not adapted, with one termination guarantee: when a subgroup
/// completes while another non-empty subgroup still holds zero channels (a
/// deferred grant), the freed channels are offered to the deferred
/// subgroups smallest class first, each taking what the energy-first
/// concurrency rule allows. Subgroups that already hold channels never gain
/// more, so the parameter history keeps exactly one entry per subgroup.
pub fn simulate_transfer(
    plan: &TransferPlan,
    dataset: &Dataset,
    profile: &SimProfile,
) -> Result<TransferOutcome, SlaError> {
    let grouping = crate::planner::group_files(&dataset.files, &profile.network)?;
    if plan.granted_total() == 0 {
        return Err(SlaError::InvalidRequest(
            "plan grants no channels; nothing would ever transfer".into(),
        ));
    }
    let mut plan = plan.clone();
    let mut transport = SimTransport::new(*profile);
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

    let mut per_class = [crate::sla::ClassStats::default(); 3];
    for class in SizeClass::ALL {
        per_class[class.index()].files_total = grouping.group(class).file_count();
    }
    let mut completed = [false; 3];

    while let Some(ev) = transport.next_event(f64::INFINITY) {
        match ev.kind {
            EventKind::BytesProgress { class, bytes, .. } => {
                per_class[class.index()].bytes_completed += bytes;
            }
            EventKind::FileComplete { class, .. } => {
                per_class[class.index()].files_completed += 1;
            }
            EventKind::SubgroupComplete { class } => {
                completed[class.index()] = true;
                let deferred: Vec<SizeClass> = SizeClass::ALL
                    .into_iter()
                    .filter(|c| {
                        !completed[c.index()]
                            && !grouping.group(*c).is_empty()
                            && plan.concurrency(*c) == 0
                    })
                    .collect();
                if deferred.is_empty() {
                    continue;
                }
                let mut freed = plan.release_class(class);
                for c in deferred {
                    if freed == 0 {
                        break;
                    }
                    let cc = crate::planner::min_energy_concurrency(
                        grouping.group(c),
                        &profile.network,
                        freed,
                    );
                    let granted = plan.grant_channels(c, cc);
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
                transport.set_allocation(&plan)?;
            }
            EventKind::ChannelError { .. } => {}
        }
    }

    let duration = transport.now();
    let total_bytes = transport.progress_snapshot();
    let achieved_throughput =
        if duration > 0.0 { total_bytes as f64 * 8.0 / duration } else { 0.0 };
    Ok(TransferOutcome {
        mode: None,
        achieved_throughput,
        energy: transport.energy_snapshot(),
        duration,
        total_bytes,
        per_class,
        history,
        probes: Vec::new(),
        chosen_concurrency: None,
        dataset_exhausted_during_search: false,
        target_unreachable: false,
        failed_files: Vec::new(),
        warnings: Vec::new(),
    })
}

/// One full simulation per concurrency level: the brute-force oracle the
/// efficiency search is judged against. `pp`/`p` override the planner's
/// per-class tuning when given; channels are split across non-empty classes
/// by the blended size/count proportions.
pub fn throughput_energy_sweep(
    dataset: &Dataset,
    profile: &SimProfile,
    cc_range: impl IntoIterator<Item = u32>,
    pp: Option<u32>,
    p: Option<u32>,
    cfg: &PlannerConfig,
) -> Result<Vec<EfficiencySample>, SlaError> {
    let grouping = crate::planner::group_files(&dataset.files, &profile.network)?;
    let weights = subgroup_proportions(&grouping)?;
    let mut samples = Vec::new();
    for cc in cc_range {
        if cc == 0 {
            return Err(SlaError::InvalidRequest("sweep concurrency levels start at 1".into()));
        }
        let mut plan = TransferPlan::new(cc);
        for class in SizeClass::ALL {
            let group = grouping.group(class);
            if group.is_empty() {
                continue;
            }
            let opt_pp = crate::planner::optimal_pipelining(group, &profile.network, cfg.pipelining_cap);
            let opt_p = crate::planner::optimal_parallelism(group, &profile.network);
            plan.set_tuning(class, pp.unwrap_or(opt_pp), p.unwrap_or(opt_p));
        }
        let counts = proportional_split(&weights, cc);
        for class in SizeClass::ALL {
            plan.grant_channels(class, counts[class.index()]);
        }
        let outcome = simulate_transfer(&plan, dataset, profile)?;
        let energy = outcome.energy.expect("simulator accounts energy");
        let bits = outcome.total_bytes as f64 * 8.0;
        samples.push(EfficiencySample {
            concurrency: cc,
            window_throughput: outcome.achieved_throughput,
            window_energy: energy,
            ratio: if energy > 0.0 { bits / energy } else { 0.0 },
        });
    }
    samples.sort_by_key(|s| s.concurrency);
    Ok(samples)
}
