//! Dataset grouping and per-subgroup parameter selection.
//!
//! Files are partitioned into Small/Medium/Large classes relative to the
//! link's bandwidth-delay product (BDP), and each class gets a
//! (pipelining, parallelism, concurrency) triple computed from closed-form
//! ceiling rules: pipelining packs enough requests to fill the pipe when
//! files are smaller than the BDP, parallelism splits files that overflow
//! the TCP buffer, and concurrency spends a bounded channel budget where it
//! buys the most.

use serde::{Deserialize, Serialize};
use std::fmt;
use thiserror::Error;

/// One file to transfer: an opaque identifier (usually a URL) plus its size.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileEntry {
    pub id: String,
    /// Size in bytes; must be positive.
    pub size: u64,
}

impl FileEntry {
    pub fn new(id: impl Into<String>, size: u64) -> Self {
        FileEntry { id: id.into(), size }
    }
}

/// The set of files a transfer moves.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dataset {
    pub files: Vec<FileEntry>,
}

impl Dataset {
    pub fn new(files: Vec<FileEntry>) -> Self {
        Dataset { files }
    }

    /// A dataset of `count` equally sized files, handy for tests and sweeps.
    pub fn uniform(prefix: &str, count: usize, size: u64) -> Self {
        let files = (0..count)
            .map(|i| FileEntry::new(format!("{prefix}/{i}"), size))
            .collect();
        Dataset { files }
    }

    pub fn total_bytes(&self) -> u64 {
        self.files.iter().map(|f| f.size).sum()
    }

    pub fn len(&self) -> usize {
        self.files.len()
    }

    pub fn is_empty(&self) -> bool {
        self.files.is_empty()
    }
}

/// Static description of the link: capacity, round-trip time and the TCP
/// buffer available to each stream.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NetworkProfile {
    /// Link capacity in bits per second.
    pub bandwidth: f64,
    /// Round-trip time in seconds.
    pub rtt: f64,
    /// Configured TCP buffer per stream, in bytes.
    pub tcp_buffer: u64,
}

impl NetworkProfile {
    pub fn new(bandwidth: f64, rtt: f64, tcp_buffer: u64) -> Self {
        NetworkProfile { bandwidth, rtt, tcp_buffer }
    }

    /// Bandwidth-delay product in bytes: the volume of data that keeps the
    /// pipe full for one round trip.
    pub fn bdp(&self) -> f64 {
        self.bandwidth * self.rtt / 8.0
    }
}

/// Size class of a file relative to the BDP.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SizeClass {
    Small,
    Medium,
    Large,
}

impl SizeClass {
    pub const ALL: [SizeClass; 3] = [SizeClass::Small, SizeClass::Medium, SizeClass::Large];

    pub fn index(self) -> usize {
        match self {
            SizeClass::Small => 0,
            SizeClass::Medium => 1,
            SizeClass::Large => 2,
        }
    }
}

impl fmt::Display for SizeClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SizeClass::Small => write!(f, "small"),
            SizeClass::Medium => write!(f, "medium"),
            SizeClass::Large => write!(f, "large"),
        }
    }
}

/// A class's slice of the dataset, with the aggregates the parameter rules
/// consume.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubGroup {
    pub class: SizeClass,
    pub files: Vec<FileEntry>,
    /// Arithmetic mean file size in bytes; 0 for an empty group.
    pub avg_file_size: f64,
    pub total_bytes: u64,
}

impl SubGroup {
    fn from_files(class: SizeClass, files: Vec<FileEntry>) -> Self {
        let total_bytes: u64 = files.iter().map(|f| f.size).sum();
        let avg_file_size = if files.is_empty() {
            0.0
        } else {
            total_bytes as f64 / files.len() as f64
        };
        SubGroup { class, files, avg_file_size, total_bytes }
    }

    pub fn is_empty(&self) -> bool {
        self.files.is_empty()
    }

    pub fn file_count(&self) -> usize {
        self.files.len()
    }
}

/// All three subgroups of a dataset, indexed by [`SizeClass`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grouping {
    pub groups: [SubGroup; 3],
}

impl Grouping {
    pub fn group(&self, class: SizeClass) -> &SubGroup {
        &self.groups[class.index()]
    }

    pub fn non_empty(&self) -> impl Iterator<Item = &SubGroup> {
        self.groups.iter().filter(|g| !g.is_empty())
    }

    pub fn total_bytes(&self) -> u64 {
        self.groups.iter().map(|g| g.total_bytes).sum()
    }

    pub fn total_files(&self) -> usize {
        self.groups.iter().map(|g| g.file_count()).sum()
    }
}

/// The tuning triple applied to one subgroup.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransferParams {
    /// Requests kept in flight back-to-back on one connection; >= 1.
    pub pipelining: u32,
    /// Byte-range streams per file; >= 1.
    pub parallelism: u32,
    /// Channels granted to the subgroup; 0 means awaiting a grant.
    pub concurrency: u32,
}

impl TransferParams {
    pub fn new(pipelining: u32, parallelism: u32, concurrency: u32) -> Self {
        TransferParams { pipelining, parallelism, concurrency }
    }
}

/// Knobs with defaults matching the tested envelope.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlannerConfig {
    /// Upper bound on the pipelining depth (uncapped values for tiny files
    /// can reach the hundreds, far past anything validated).
    #[serde(default = "default_pipelining_cap")]
    pub pipelining_cap: u32,
    /// Weight of the byte share (vs. file-count share) when blending
    /// subgroup proportions; 0.5 weighs both equally.
    #[serde(default = "default_proportion_blend")]
    pub proportion_blend: f64,
}

fn default_pipelining_cap() -> u32 {
    32
}

fn default_proportion_blend() -> f64 {
    0.5
}

impl Default for PlannerConfig {
    fn default() -> Self {
        PlannerConfig {
            pipelining_cap: default_pipelining_cap(),
            proportion_blend: default_proportion_blend(),
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum PlannerError {
    #[error("dataset contains no files")]
    EmptyDataset,
}

/// Partition files into Small/Medium/Large by size against the BDP:
/// Small below a tenth of the BDP, Large at or above the BDP, Medium in
/// between. The partition is total and disjoint; empty classes are legal.
pub fn group_files(files: &[FileEntry], profile: &NetworkProfile) -> Result<Grouping, PlannerError> {
    if files.is_empty() {
        return Err(PlannerError::EmptyDataset);
    }
    let bdp = profile.bdp();
    let mut buckets: [Vec<FileEntry>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    for file in files {
        buckets[classify(file.size, bdp).index()].push(file.clone());
    }
    let [small, medium, large] = buckets;
    Ok(Grouping {
        groups: [
            SubGroup::from_files(SizeClass::Small, small),
            SubGroup::from_files(SizeClass::Medium, medium),
            SubGroup::from_files(SizeClass::Large, large),
        ],
    })
}

/// Class of a single size under the grouping thresholds.
pub fn classify(size: u64, bdp: f64) -> SizeClass {
    let s = size as f64;
    if s < 0.1 * bdp {
        SizeClass::Small
    } else if s < bdp {
        SizeClass::Medium
    } else {
        SizeClass::Large
    }
}

/// Pipelining depth for a subgroup: ceil(BDP / average file size), floored
/// at 1 and capped. Files at or past the BDP already fill the pipe alone,
/// so they land on the floor.
pub fn optimal_pipelining(group: &SubGroup, profile: &NetworkProfile, cap: u32) -> u32 {
    if group.is_empty() {
        return 1;
    }
    let raw = ceil_ratio(profile.bdp(), group.avg_file_size);
    raw.max(1).min(cap.max(1))
}

/// Range streams per file: min(ceil(BDP / buffer), ceil(avg size / buffer)),
/// floored at 1. Splitting never helps a file that fits in one buffer, and
/// more streams than it takes to cover the BDP waste connections.
pub fn optimal_parallelism(group: &SubGroup, profile: &NetworkProfile) -> u32 {
    if group.is_empty() {
        return 1;
    }
    let buf = profile.tcp_buffer as f64;
    let by_pipe = ceil_ratio(profile.bdp(), buf);
    let by_file = ceil_ratio(group.avg_file_size, buf);
    by_pipe.min(by_file).max(1)
}

/// Channels granted to a subgroup out of `remaining`: the smaller of
/// ceil(BDP / average size) — past that, extra channels only split files
/// that already fill the pipe — and ceil((remaining + 1) / 2), which spends
/// about half the remaining budget and leaves the rest for later classes.
pub fn min_energy_concurrency(group: &SubGroup, profile: &NetworkProfile, remaining: u32) -> u32 {
    if remaining == 0 || group.is_empty() {
        return 0;
    }
    let by_size = ceil_ratio(profile.bdp(), group.avg_file_size).max(1);
    let half_budget = (remaining + 1).div_ceil(2);
    by_size.min(half_budget).min(remaining)
}

/// Per-class weights blending byte share and file-count share, summing to 1.
/// Empty classes weigh 0.
pub fn subgroup_proportions(grouping: &Grouping) -> Result<[f64; 3], PlannerError> {
    blended_proportions(grouping, default_proportion_blend())
}

/// [`subgroup_proportions`] with an explicit byte-share weight in [0, 1].
pub fn blended_proportions(grouping: &Grouping, byte_weight: f64) -> Result<[f64; 3], PlannerError> {
    let total_bytes = grouping.total_bytes();
    let total_files = grouping.total_files();
    if total_files == 0 {
        return Err(PlannerError::EmptyDataset);
    }
    let mut weights = [0.0; 3];
    for (i, g) in grouping.groups.iter().enumerate() {
        if g.is_empty() {
            continue;
        }
        let byte_share = if total_bytes == 0 {
            0.0
        } else {
            g.total_bytes as f64 / total_bytes as f64
        };
        let count_share = g.file_count() as f64 / total_files as f64;
        weights[i] = byte_weight * byte_share + (1.0 - byte_weight) * count_share;
    }
    Ok(weights)
}

fn ceil_ratio(num: f64, den: f64) -> u32 {
    if den <= 0.0 {
        return 1;
    }
    let v = (num / den).ceil();
    if v >= u32::MAX as f64 {
        u32::MAX
    } else if v < 1.0 {
        1
    } else {
        v as u32
    }
}

/// One line of a dataset manifest: a URL and, when known, the size.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub url: String,
    /// Absent when the manifest omits the size; discovered via HEAD later.
    pub size: Option<u64>,
}

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("manifest line {line}: expected `<url> [size_bytes]`, got `{content}`")]
    BadLine { line: usize, content: String },
    #[error("manifest line {line}: size `{value}` is not a positive integer")]
    BadSize { line: usize, value: String },
    #[error("manifest contains no entries")]
    Empty,
}

/// Parse a manifest: one `<url> <size_bytes>` pair per line, the size
/// optional. Blank lines and `#` comments are skipped.
pub fn parse_manifest(text: &str) -> Result<Vec<ManifestEntry>, ManifestError> {
    let mut entries = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let mut parts = trimmed.split_whitespace();
        let url = parts.next().expect("non-empty line has a first token").to_string();
        let size = match parts.next() {
            None => None,
            Some(tok) => match tok.parse::<u64>() {
                Ok(0) | Err(_) => {
                    return Err(ManifestError::BadSize { line, value: tok.to_string() })
                }
                Ok(n) => Some(n),
            },
        };
        if parts.next().is_some() {
            return Err(ManifestError::BadLine { line, content: trimmed.to_string() });
        }
        entries.push(ManifestEntry { url, size });
    }
    if entries.is_empty() {
        return Err(ManifestError::Empty);
    }
    Ok(entries)
}
