//! The transport contract: how a plan is executed and how progress flows
//! back to the scheduler.
//!
//! Two implementations satisfy [`Transport`]: the real HTTP/1.1 engine in
//! [`http`] and the deterministic virtual-time engine in
//! [`crate::simulator`]. The scheduler drives either one identically — it
//! starts a plan, adjusts channel allocations at window boundaries, and
//! consumes a single ordered event stream.

use crate::planner::{Dataset, FileEntry, SizeClass};
use crate::sla::TransferPlan;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub mod http;

/// Lifecycle of one channel (one persistent connection group).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChannelState {
    Idle,
    Connecting,
    Busy,
    Closed,
}

/// Bookkeeping for one channel of a running transfer.
#[derive(Debug, Clone)]
pub struct Channel {
    pub id: u32,
    pub subgroup: SizeClass,
    pub state: ChannelState,
    /// Requests sent but not yet fully answered; never exceeds the
    /// subgroup's pipelining depth.
    pub outstanding_requests: u32,
}

/// One byte range of a file assigned to a channel stream.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RangeTask {
    pub file: FileEntry,
    pub offset: u64,
    pub length: u64,
    /// Stream slot within the channel; filled in at dispatch.
    pub channel: u32,
}

/// Split a file into `parallelism` contiguous, disjoint ranges covering
/// [0, size). Files of at least `parallelism` bytes yield exactly that many
/// chunks (the first `size % p` chunks carry one extra byte); smaller files
/// yield one single-byte chunk per byte.
pub fn split_ranges(file: &FileEntry, parallelism: u32) -> Vec<RangeTask> {
    let p = u64::from(parallelism.max(1)).min(file.size.max(1));
    let base = file.size / p;
    let extra = file.size % p;
    let mut tasks = Vec::with_capacity(p as usize);
    let mut offset = 0u64;
    for i in 0..p {
        let length = base + u64::from(i < extra);
        tasks.push(RangeTask { file: file.clone(), offset, length, channel: 0 });
        offset += length;
    }
    tasks
}

/// What happened, stamped with seconds since transfer start.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferEvent {
    pub timestamp: f64,
    pub kind: EventKind,
}

/// Event payloads. Files are referenced by their index into the dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum EventKind {
    BytesProgress { class: SizeClass, file: usize, bytes: u64 },
    FileComplete { class: SizeClass, file: usize },
    SubgroupComplete { class: SizeClass },
    ChannelError { channel: u32, detail: String },
}

/// A file the engine gave up on after exhausting its retry budget.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailedFile {
    pub file: usize,
    pub id: String,
    pub reason: String,
}

#[derive(Debug, Error)]
pub enum TransportError {
    #[error("cannot reach `{url}`: {detail}")]
    Unreachable { url: String, detail: String },
    #[error("invalid url `{url}`: {detail}")]
    InvalidUrl { url: String, detail: String },
    #[error("transfer not started")]
    NotStarted,
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

/// A running executor of transfer plans, real or simulated.
///
/// The scheduler owns the plan; the transport owns execution. Mid-transfer
/// allocation changes take effect at file boundaries per channel — a file
/// in flight is never re-chunked.
pub trait Transport {
    /// Begin executing `plan` over `dataset` at time zero.
    fn start(&mut self, plan: &TransferPlan, dataset: &Dataset) -> Result<(), TransportError>;

    /// Apply a revised plan (channel grants and parameters may differ).
    fn set_allocation(&mut self, plan: &TransferPlan) -> Result<(), TransportError>;

    /// Block (or advance virtual time) until the next event, or until
    /// `deadline` seconds since start, whichever is first. `None` means the
    /// deadline passed without an event; [`Transport::now`] then reports a
    /// time at or past the deadline.
    fn next_event(&mut self, deadline: f64) -> Option<TransferEvent>;

    /// Seconds since the transfer started.
    fn now(&self) -> f64;

    /// Total bytes delivered so far, exact at the instant of the call.
    fn progress_snapshot(&self) -> u64;

    /// Joules consumed so far when the transport models energy itself
    /// (the simulator does); `None` means energy must come from telemetry.
    fn energy_snapshot(&self) -> Option<f64>;

    /// True once every file has completed or permanently failed.
    fn is_finished(&self) -> bool;

    /// Files abandoned after the retry budget, in dataset order.
    fn failures(&self) -> Vec<FailedFile>;

    /// Human-readable anomalies (capability downgrades and the like).
    fn warnings(&self) -> Vec<String>;
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn file(size: u64) -> FileEntry {
        FileEntry::new("f", size)
    }

    #[test]
    fn even_split_examples() {
        let tasks = split_ranges(&file(100), 4);
        assert_eq!(tasks.len(), 4);
        for (i, t) in tasks.iter().enumerate() {
            assert_eq!(t.offset, 25 * i as u64);
            assert_eq!(t.length, 25);
        }
    }

    #[test]
    fn single_stream_is_identity() {
        let tasks = split_ranges(&file(12345), 1);
        assert_eq!(tasks.len(), 1);
        assert_eq!((tasks[0].offset, tasks[0].length), (0, 12345));
    }

    #[test]
    fn tiny_files_cap_at_one_chunk_per_byte() {
        let tasks = split_ranges(&file(3), 8);
        assert_eq!(tasks.len(), 3);
        for (i, t) in tasks.iter().enumerate() {
            assert_eq!((t.offset, t.length), (i as u64, 1));
        }
    }

    #[test]
    fn uneven_split_still_yields_exactly_p_chunks() {
        let tasks = split_ranges(&file(5), 4);
        assert_eq!(tasks.len(), 4);
        let lengths: Vec<u64> = tasks.iter().map(|t| t.length).collect();
        assert_eq!(lengths, vec![2, 1, 1, 1]);
    }

    proptest! {
        #[test]
        fn ranges_are_disjoint_and_cover_the_file(
            size in 1u64..10_000_000,
            p in 1u32..64,
        ) {
            let tasks = split_ranges(&file(size), p);
            if size >= u64::from(p) {
                prop_assert_eq!(tasks.len(), p as usize);
            } else {
                prop_assert_eq!(tasks.len(), size as usize);
            }
            let mut next = 0u64;
            for t in &tasks {
                prop_assert_eq!(t.offset, next);
                prop_assert!(t.length > 0);
                next += t.length;
            }
            prop_assert_eq!(next, size);
            // No chunk is more than one byte longer than another.
            let min = tasks.iter().map(|t| t.length).min().unwrap();
            let max = tasks.iter().map(|t| t.length).max().unwrap();
            prop_assert!(max - min <= 1);
        }
    }
}
