//! Real HTTP/1.1 execution of transfer plans over persistent connections.
//!
//! One channel is one worker thread owning `parallelism` persistent
//! connections ("slots"). Each batch takes up to `pipelining` files from the
//! channel's class queue; slot *r* pipelines the *r*-th byte range of every
//! batch file on its connection and consumes responses strictly in request
//! order. Ranges land at their offsets in preallocated destination files, so
//! every (pipelining, parallelism, concurrency) combination reassembles
//! bit-identical output.
//!
//! Degradations are survived and reported as warnings rather than failures:
//! a server that closes after the first pipelined response downgrades that
//! channel to sequential requests; a server that answers a ranged GET with
//! `200 OK` has the full body accepted once and the host is marked
//! range-less (single-stream from then on); a stale keep-alive connection is
//! re-established without charging the retry budget. Genuine failures get
//! one reconnect and one retry per request before the file is marked failed
//! and the transfer moves on.

use crate::planner::{classify, Dataset, FileEntry, NetworkProfile, SizeClass, TransferParams};
use crate::sla::TransferPlan;
use crate::transport::{
    split_ranges, EventKind, FailedFile, TransferEvent, Transport, TransportError,
};
use sha2::{Digest, Sha256};
use std::collections::{HashSet, VecDeque};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, ErrorKind, Read, Write};
use std::net::{TcpStream, ToSocketAddrs};
use std::path::{Component, Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicU32, AtomicU64, AtomicUsize, Ordering};
use std::sync::mpsc::{self, Receiver, Sender, TryRecvError};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

/// Times a request may be sent: the original plus one retry.
const MAX_SEND_ATTEMPTS: u32 = 2;
const CHUNK: usize = 64 * 1024;

/// Configuration for the HTTP engine.
#[derive(Debug, Clone)]
pub struct HttpConfig {
    /// Profile whose bandwidth-delay product classifies files by size; must
    /// match the profile the plan was built with.
    pub network: NetworkProfile,
    /// Destination root; each file lands under it at its URL path.
    pub dest_root: PathBuf,
    /// Write a `.sha256` sidecar next to each completed file.
    pub verify: bool,
    /// Dataset indices whose manifest size is a placeholder: fetched as one
    /// EOF-delimited stream, never ranged, never pipelined with other files.
    pub unknown_size: HashSet<usize>,
    pub connect_timeout: Duration,
    pub read_timeout: Duration,
}

impl HttpConfig {
    pub fn new(network: NetworkProfile, dest_root: impl Into<PathBuf>) -> Self {
        HttpConfig {
            network,
            dest_root: dest_root.into(),
            verify: false,
            unknown_size: HashSet::new(),
            connect_timeout: Duration::from_secs(5),
            read_timeout: Duration::from_secs(30),
        }
    }
}

/// What a HEAD probe of one URL revealed about the server.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ServerCapabilities {
    /// `None` when the server refused HEAD; range support is then learned
    /// from the first GET.
    pub range_supported: Option<bool>,
    pub head_allowed: bool,
    /// Size of the probed resource, when reported.
    pub content_length: Option<u64>,
}

/// Probe a URL with a HEAD request: range support, HEAD support, and size.
pub fn probe_capabilities(
    url: &str,
    connect_timeout: Duration,
    read_timeout: Duration,
) -> Result<ServerCapabilities, TransportError> {
    let target = UrlParts::parse(url)?;
    let mut conn = connect(&target.authority, connect_timeout, read_timeout).map_err(|e| {
        TransportError::Unreachable { url: url.to_string(), detail: e.to_string() }
    })?;
    let request = format!(
        "HEAD {} HTTP/1.1\r\nHost: {}\r\nConnection: close\r\n\r\n",
        target.path, target.host_header
    );
    conn.writer
        .write_all(request.as_bytes())
        .and_then(|_| conn.writer.flush())
        .map_err(|e| TransportError::Unreachable { url: url.to_string(), detail: e.to_string() })?;
    let head = match read_response_head(&mut conn.reader) {
        Ok(Some(h)) => h,
        Ok(None) => {
            return Err(TransportError::Unreachable {
                url: url.to_string(),
                detail: "connection closed before the probe was answered".to_string(),
            })
        }
        Err(e) => {
            return Err(TransportError::Unreachable { url: url.to_string(), detail: e.to_string() })
        }
    };
    match head.status {
        405 => Ok(ServerCapabilities { range_supported: None, head_allowed: false, content_length: None }),
        200 => Ok(ServerCapabilities {
            range_supported: Some(head.accept_ranges),
            head_allowed: true,
            content_length: head.content_length,
        }),
        s => Err(TransportError::Unreachable {
            url: url.to_string(),
            detail: format!("probe answered with status {s}"),
        }),
    }
}

/// URL decomposed into what the engine needs to speak HTTP/1.1.
#[derive(Debug)]
struct UrlParts {
    authority: String,
    host_header: String,
    path: String,
}

impl UrlParts {
    fn parse(raw: &str) -> Result<UrlParts, TransportError> {
        let url = url::Url::parse(raw).map_err(|e| TransportError::InvalidUrl {
            url: raw.to_string(),
            detail: e.to_string(),
        })?;
        if url.scheme() != "http" {
            return Err(TransportError::InvalidUrl {
                url: raw.to_string(),
                detail: format!("unsupported scheme `{}`", url.scheme()),
            });
        }
        let host = url.host_str().ok_or_else(|| TransportError::InvalidUrl {
            url: raw.to_string(),
            detail: "missing host".to_string(),
        })?;
        let port = url.port().unwrap_or(80);
        let authority = format!("{host}:{port}");
        let host_header = if port == 80 { host.to_string() } else { authority.clone() };
        let path = if url.path().is_empty() { "/".to_string() } else { url.path().to_string() };
        Ok(UrlParts { authority, host_header, path })
    }
}

/// Map a URL path to a destination under `root`, mirroring the path.
fn destination_for(root: &Path, raw_url: &str, path: &str) -> Result<PathBuf, TransportError> {
    let rel = path.trim_start_matches('/');
    let rel = if rel.is_empty() { "index" } else { rel };
    let mut dest = root.to_path_buf();
    for component in Path::new(rel).components() {
        match component {
            Component::Normal(part) => dest.push(part),
            _ => {
                return Err(TransportError::InvalidUrl {
                    url: raw_url.to_string(),
                    detail: "path would escape the output root".to_string(),
                })
            }
        }
    }
    Ok(dest)
}

struct FileMeta {
    url: String,
    authority: String,
    host_header: String,
    path: String,
    dest: PathBuf,
    size: u64,
    class: SizeClass,
    unknown_size: bool,
    /// Ranges still outstanding for the current dispatch; 1 -> 0 completes
    /// the file.
    ranges_left: AtomicU32,
    /// Claimed by the slot that accepts a full body from a range-less server.
    full_claim: AtomicBool,
    /// Set exactly once, by completion or by permanent failure.
    settled: AtomicBool,
}

struct Shared {
    started_at: Instant,
    files: Vec<FileMeta>,
    bytes_done: AtomicU64,
    class_left: [AtomicUsize; 3],
    finished_files: AtomicUsize,
    total_files: usize,
    failures: Mutex<Vec<FailedFile>>,
    warnings: Mutex<Vec<String>>,
    warned: Mutex<HashSet<String>>,
    no_range_hosts: Mutex<HashSet<String>>,
    events: Sender<TransferEvent>,
    verify: bool,
    connect_timeout: Duration,
    read_timeout: Duration,
}

impl Shared {
    fn now(&self) -> f64 {
        self.started_at.elapsed().as_secs_f64()
    }

    fn emit(&self, kind: EventKind) {
        let _ = self.events.send(TransferEvent { timestamp: self.now(), kind });
    }

    fn warn_once(&self, message: String) {
        let mut warned = self.warned.lock().unwrap();
        if warned.insert(message.clone()) {
            self.warnings.lock().unwrap().push(message);
        }
    }

    fn host_supports_ranges(&self, authority: &str) -> bool {
        !self.no_range_hosts.lock().unwrap().contains(authority)
    }

    fn mark_no_range(&self, authority: &str) {
        if self.no_range_hosts.lock().unwrap().insert(authority.to_string()) {
            self.warn_once(format!(
                "server {authority} ignores byte ranges; its files are downgraded to a single stream"
            ));
        }
    }

    /// One range of `file` fully delivered; completes the file on the last.
    fn complete_range(&self, file: usize) {
        let decremented = self.files[file]
            .ranges_left
            .fetch_update(Ordering::SeqCst, Ordering::SeqCst, |v| v.checked_sub(1));
        if decremented == Ok(1) {
            self.file_done(file);
        }
    }

    fn file_done(&self, file: usize) {
        let meta = &self.files[file];
        if meta.settled.compare_exchange(false, true, Ordering::SeqCst, Ordering::SeqCst).is_err() {
            return;
        }
        if self.verify {
            if let Err(e) = write_checksum_sidecar(&meta.dest) {
                self.warn_once(format!("checksum sidecar for {}: {e}", meta.dest.display()));
            }
        }
        self.emit(EventKind::FileComplete { class: meta.class, file });
        self.finish_one(meta.class);
    }

    fn fail_file(&self, file: usize, reason: String) {
        let meta = &self.files[file];
        if meta.settled.compare_exchange(false, true, Ordering::SeqCst, Ordering::SeqCst).is_err() {
            return;
        }
        self.failures.lock().unwrap().push(FailedFile { file, id: meta.url.clone(), reason });
        self.finish_one(meta.class);
    }

    fn finish_one(&self, class: SizeClass) {
        if self.class_left[class.index()].fetch_sub(1, Ordering::SeqCst) == 1 {
            self.emit(EventKind::SubgroupComplete { class });
        }
        self.finished_files.fetch_add(1, Ordering::SeqCst);
    }

    fn finished(&self) -> bool {
        self.finished_files.load(Ordering::SeqCst) >= self.total_files
    }
}

fn write_checksum_sidecar(dest: &Path) -> std::io::Result<()> {
    let mut file = File::open(dest)?;
    let mut hasher = Sha256::new();
    std::io::copy(&mut file, &mut hasher)?;
    let hex: String = hasher.finalize().iter().map(|b| format!("{b:02x}")).collect();
    let name = dest.file_name().and_then(|n| n.to_str()).unwrap_or("file");
    let mut sidecar = dest.as_os_str().to_owned();
    sidecar.push(".sha256");
    std::fs::write(sidecar, format!("{hex}  {name}\n"))
}

#[cfg(unix)]
fn write_at(file: &File, buf: &[u8], offset: u64) -> std::io::Result<()> {
    use std::os::unix::fs::FileExt;
    file.write_all_at(buf, offset)
}

#[cfg(not(unix))]
fn write_at(mut file: &File, buf: &[u8], offset: u64) -> std::io::Result<()> {
    use std::io::{Seek, SeekFrom};
    file.seek(SeekFrom::Start(offset))?;
    file.write_all(buf)
}

struct Connection {
    reader: BufReader<TcpStream>,
    writer: TcpStream,
    authority: String,
    /// Responses fully consumed over this connection's lifetime; a reused
    /// connection that dies before answering is treated as stale, not as a
    /// failure.
    served: u64,
}

fn connect(
    authority: &str,
    connect_timeout: Duration,
    read_timeout: Duration,
) -> std::io::Result<Connection> {
    let mut last_err = None;
    for addr in authority.to_socket_addrs()? {
        match TcpStream::connect_timeout(&addr, connect_timeout) {
            Ok(stream) => {
                stream.set_read_timeout(Some(read_timeout))?;
                stream.set_nodelay(true)?;
                let writer = stream.try_clone()?;
                return Ok(Connection {
                    reader: BufReader::new(stream),
                    writer,
                    authority: authority.to_string(),
                    served: 0,
                });
            }
            Err(e) => last_err = Some(e),
        }
    }
    Err(last_err.unwrap_or_else(|| ErrorKind::AddrNotAvailable.into()))
}

struct ResponseHead {
    status: u16,
    content_length: Option<u64>,
    connection_close: bool,
    accept_ranges: bool,
}

/// Parse one response head. `Ok(None)` is a clean close before any byte.
fn read_response_head(reader: &mut BufReader<TcpStream>) -> std::io::Result<Option<ResponseHead>> {
    let mut line = String::new();
    if reader.read_line(&mut line)? == 0 {
        return Ok(None);
    }
    let status: u16 = line
        .split_whitespace()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| {
            std::io::Error::new(ErrorKind::InvalidData, format!("bad status line {line:?}"))
        })?;
    let mut head = ResponseHead {
        status,
        content_length: None,
        connection_close: false,
        accept_ranges: false,
    };
    loop {
        let mut raw = String::new();
        if reader.read_line(&mut raw)? == 0 {
            return Err(ErrorKind::UnexpectedEof.into());
        }
        let trimmed = raw.trim_end();
        if trimmed.is_empty() {
            break;
        }
        if let Some((name, value)) = trimmed.split_once(':') {
            let value = value.trim();
            match name.trim().to_ascii_lowercase().as_str() {
                "content-length" => head.content_length = value.parse().ok(),
                "connection" if value.eq_ignore_ascii_case("close") => {
                    head.connection_close = true;
                }
                "accept-ranges" if value.to_ascii_lowercase().contains("bytes") => {
                    head.accept_ranges = true;
                }
                _ => {}
            }
        }
    }
    Ok(Some(head))
}

#[derive(Clone)]
struct RangeReq {
    file: usize,
    offset: u64,
    length: u64,
    /// No `Range` header: single-range files and unknown-size streams.
    whole_file: bool,
    /// Times this request has been sent.
    attempts: u32,
    /// Bytes already written (and counted) for the in-flight response;
    /// uncounted again if the response dies mid-body and must be retried.
    delivered: u64,
}

enum RespError {
    /// Connection closed cleanly before the response head.
    CleanClose,
    Io(std::io::Error),
}

enum Disposition {
    Delivered,
    PermanentFail(u16),
    RetryableFail(u16),
}

struct Resolution {
    /// The connection cannot serve further responses.
    close: bool,
    disposition: Disposition,
}

fn discard_body(conn: &mut Connection, expected: Option<u64>) -> std::io::Result<()> {
    let mut buf = [0u8; CHUNK];
    let mut total = 0u64;
    loop {
        let want = match expected {
            Some(e) if total == e => break,
            Some(e) => ((e - total).min(CHUNK as u64)) as usize,
            None => CHUNK,
        };
        let n = conn.reader.read(&mut buf[..want])?;
        if n == 0 {
            if expected.is_some() {
                return Err(ErrorKind::UnexpectedEof.into());
            }
            break;
        }
        total += n as u64;
    }
    Ok(())
}

/// Stream a response body into the destination file at `write_offset`,
/// counting progress as chunks land.
fn deliver_body(
    shared: &Shared,
    conn: &mut Connection,
    req: &mut RangeReq,
    dest: &Path,
    expected: Option<u64>,
    write_offset: u64,
) -> std::io::Result<u64> {
    let out = OpenOptions::new().write(true).create(true).open(dest)?;
    let mut buf = vec![0u8; CHUNK];
    let mut total = 0u64;
    loop {
        let want = match expected {
            Some(e) if total == e => break,
            Some(e) => ((e - total).min(CHUNK as u64)) as usize,
            None => CHUNK,
        };
        let n = conn.reader.read(&mut buf[..want])?;
        if n == 0 {
            if expected.is_some() {
                return Err(std::io::Error::new(
                    ErrorKind::UnexpectedEof,
                    "connection closed mid-body",
                ));
            }
            break;
        }
        write_at(&out, &buf[..n], write_offset + total)?;
        total += n as u64;
        req.delivered += n as u64;
        shared.bytes_done.fetch_add(n as u64, Ordering::SeqCst);
    }
    Ok(total)
}

fn read_one_response(
    shared: &Shared,
    conn: &mut Connection,
    req: &mut RangeReq,
) -> Result<Resolution, RespError> {
    let head = match read_response_head(&mut conn.reader) {
        Ok(Some(h)) => h,
        Ok(None) => return Err(RespError::CleanClose),
        Err(e) => return Err(RespError::Io(e)),
    };
    let close = head.connection_close || head.content_length.is_none();
    match head.status {
        200 | 206 => {}
        s if s >= 500 => {
            discard_body(conn, head.content_length).map_err(RespError::Io)?;
            return Ok(Resolution { close, disposition: Disposition::RetryableFail(s) });
        }
        s => {
            discard_body(conn, head.content_length).map_err(RespError::Io)?;
            return Ok(Resolution { close, disposition: Disposition::PermanentFail(s) });
        }
    }

    let meta = &shared.files[req.file];
    if head.status == 200 && !req.whole_file {
        // The server ignored our Range header and is sending the full file.
        shared.mark_no_range(&conn.authority);
        let claimed = !meta.settled.load(Ordering::SeqCst)
            && meta
                .full_claim
                .compare_exchange(false, true, Ordering::SeqCst, Ordering::SeqCst)
                .is_ok();
        if claimed {
            let written = deliver_body(shared, conn, req, &meta.dest, head.content_length, 0)
                .map_err(RespError::Io)?;
            if meta.ranges_left.swap(0, Ordering::SeqCst) > 0 {
                shared.emit(EventKind::BytesProgress {
                    class: meta.class,
                    file: req.file,
                    bytes: written,
                });
                shared.file_done(req.file);
            }
        } else {
            discard_body(conn, head.content_length).map_err(RespError::Io)?;
        }
        return Ok(Resolution { close, disposition: Disposition::Delivered });
    }

    if meta.settled.load(Ordering::SeqCst) {
        // Failed or fully claimed elsewhere; drain to keep the pipeline in sync.
        discard_body(conn, head.content_length).map_err(RespError::Io)?;
        return Ok(Resolution { close, disposition: Disposition::Delivered });
    }

    let expected = if req.whole_file && meta.unknown_size {
        head.content_length
    } else {
        head.content_length.or(Some(req.length))
    };
    let written = deliver_body(shared, conn, req, &meta.dest, expected, req.offset)
        .map_err(RespError::Io)?;
    shared.emit(EventKind::BytesProgress { class: meta.class, file: req.file, bytes: written });
    shared.complete_range(req.file);
    Ok(Resolution { close, disposition: Disposition::Delivered })
}

struct SlotOutcome {
    pipeline_broken: bool,
}

/// Charge one failed send against the first `count` queued requests,
/// dropping (and failing) the ones that exhausted their budget.
fn charge_requests(
    shared: &Shared,
    chan_id: u32,
    queue: &mut VecDeque<RangeReq>,
    count: usize,
    detail: &str,
) {
    shared.emit(EventKind::ChannelError { channel: chan_id, detail: detail.to_string() });
    let mut kept = VecDeque::with_capacity(count);
    for _ in 0..count.min(queue.len()) {
        let mut req = queue.pop_front().expect("counted");
        if req.delivered > 0 {
            shared.bytes_done.fetch_sub(req.delivered, Ordering::SeqCst);
            req.delivered = 0;
        }
        req.attempts += 1;
        if req.attempts >= MAX_SEND_ATTEMPTS {
            shared.fail_file(req.file, format!("retry budget exhausted: {detail}"));
        } else {
            kept.push_back(req);
        }
    }
    while let Some(req) = kept.pop_back() {
        queue.push_front(req);
    }
}

/// Execute one slot's share of a batch: pipeline the queued requests on one
/// persistent connection, surviving closes and retrying within budget.
fn run_slot(
    shared: &Shared,
    chan_id: u32,
    conn: &mut Option<Connection>,
    mut queue: VecDeque<RangeReq>,
    sequential: bool,
) -> SlotOutcome {
    let mut outcome = SlotOutcome { pipeline_broken: false };
    loop {
        while queue.front().map_or(false, |r| shared.files[r.file].settled.load(Ordering::SeqCst))
        {
            queue.pop_front();
        }
        let Some(front) = queue.front() else { break };
        let authority = shared.files[front.file].authority.clone();
        if conn.as_ref().map_or(false, |c| c.authority != authority) {
            *conn = None;
        }
        if conn.is_none() {
            match connect(&authority, shared.connect_timeout, shared.read_timeout) {
                Ok(c) => *conn = Some(c),
                Err(e) => {
                    let n = queue.len();
                    charge_requests(
                        shared,
                        chan_id,
                        &mut queue,
                        n,
                        &format!("connect {authority}: {e}"),
                    );
                    continue;
                }
            }
        }

        let window = if sequential || outcome.pipeline_broken { 1 } else { queue.len() };
        let to_send = window.min(queue.len());
        let mut block = String::new();
        for req in queue.iter().take(to_send) {
            let meta = &shared.files[req.file];
            block.push_str(&format!(
                "GET {} HTTP/1.1\r\nHost: {}\r\n",
                meta.path, meta.host_header
            ));
            if !req.whole_file {
                block.push_str(&format!(
                    "Range: bytes={}-{}\r\n",
                    req.offset,
                    req.offset + req.length - 1
                ));
            }
            block.push_str("\r\n");
        }

        let connection = conn.as_mut().expect("ensured above");
        let reused = connection.served > 0;
        if let Err(e) = connection
            .writer
            .write_all(block.as_bytes())
            .and_then(|_| connection.writer.flush())
        {
            *conn = None;
            if !reused {
                charge_requests(shared, chan_id, &mut queue, to_send, &format!("send: {e}"));
            }
            continue; // stale keep-alive: reconnect without charging
        }

        let mut answered = 0usize;
        while answered < to_send {
            let req = queue.front_mut().expect("in-flight request");
            let connection = conn.as_mut().expect("open while reading");
            match read_one_response(shared, connection, req) {
                Ok(resolution) => {
                    connection.served += 1;
                    let mut finished_req = queue.pop_front().expect("in-flight request");
                    answered += 1;
                    match resolution.disposition {
                        Disposition::Delivered => {}
                        Disposition::PermanentFail(status) => {
                            shared.fail_file(finished_req.file, format!("http status {status}"));
                        }
                        Disposition::RetryableFail(status) => {
                            finished_req.attempts += 1;
                            finished_req.delivered = 0;
                            if finished_req.attempts >= MAX_SEND_ATTEMPTS {
                                shared.fail_file(
                                    finished_req.file,
                                    format!("http status {status} after retry"),
                                );
                            } else {
                                queue.push_back(finished_req);
                            }
                        }
                    }
                    if resolution.close {
                        // The server is done with this connection; unanswered
                        // pipelined requests are re-sent on a fresh one,
                        // uncharged (the close was protocol-clean).
                        *conn = None;
                        break;
                    }
                }
                Err(RespError::CleanClose) => {
                    *conn = None;
                    if answered == 0 && reused {
                        // Stale keep-alive connection: reconnect, no charge.
                    } else if answered == 1 && to_send > 1 {
                        // Answered exactly one pipelined request, then closed:
                        // the server does not support pipelining.
                        outcome.pipeline_broken = true;
                    } else {
                        charge_requests(
                            shared,
                            chan_id,
                            &mut queue,
                            to_send - answered,
                            "connection closed mid-pipeline",
                        );
                    }
                    break;
                }
                Err(RespError::Io(e)) => {
                    *conn = None;
                    charge_requests(
                        shared,
                        chan_id,
                        &mut queue,
                        to_send - answered,
                        &format!("read: {e}"),
                    );
                    break;
                }
            }
        }
    }
    outcome
}

fn preallocate(meta: &FileMeta) -> std::io::Result<()> {
    if let Some(parent) = meta.dest.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let file = OpenOptions::new().write(true).create(true).open(&meta.dest)?;
    if !meta.unknown_size {
        file.set_len(meta.size)?;
    }
    Ok(())
}

/// One channel: pull batches of up to `pipelining` same-host files from the
/// class queue and fan each file's ranges out over `parallelism` slots.
fn channel_worker(
    chan_id: u32,
    class: SizeClass,
    shared: Arc<Shared>,
    queue: Arc<Mutex<VecDeque<usize>>>,
    params: Arc<Mutex<[TransferParams; 3]>>,
    stop: Arc<AtomicBool>,
) {
    let mut conns: Vec<Option<Connection>> = Vec::new();
    let mut sequential = false;
    loop {
        if stop.load(Ordering::SeqCst) {
            break;
        }
        let (pp, p) = {
            let tuning = params.lock().unwrap()[class.index()];
            (tuning.pipelining.max(1), tuning.parallelism.max(1))
        };

        let mut batch: Vec<usize> = Vec::new();
        {
            let mut q = queue.lock().unwrap();
            while batch.len() < pp as usize {
                let Some(&front) = q.front() else { break };
                let meta = &shared.files[front];
                if meta.unknown_size {
                    if batch.is_empty() {
                        q.pop_front();
                        batch.push(front);
                    }
                    break; // unknown-size files travel alone
                }
                if let Some(&first) = batch.first() {
                    if shared.files[first].authority != meta.authority {
                        break; // batches never span hosts
                    }
                }
                q.pop_front();
                batch.push(front);
            }
        }
        if batch.is_empty() {
            break; // class queue exhausted
        }

        for &idx in &batch {
            let meta = &shared.files[idx];
            if let Err(e) = preallocate(meta) {
                shared.fail_file(idx, format!("prepare {}: {e}", meta.dest.display()));
            }
        }
        batch.retain(|&idx| !shared.files[idx].settled.load(Ordering::SeqCst));
        if batch.is_empty() {
            continue;
        }

        let lead = &shared.files[batch[0]];
        let ranged_ok = shared.host_supports_ranges(&lead.authority);
        let p_eff = if lead.unknown_size || !ranged_ok { 1 } else { p };

        let mut slot_queues: Vec<VecDeque<RangeReq>> = vec![VecDeque::new(); p_eff as usize];
        for &idx in &batch {
            let meta = &shared.files[idx];
            if meta.unknown_size {
                meta.ranges_left.store(1, Ordering::SeqCst);
                slot_queues[0].push_back(RangeReq {
                    file: idx,
                    offset: 0,
                    length: 0,
                    whole_file: true,
                    attempts: 0,
                    delivered: 0,
                });
                continue;
            }
            let ranges = split_ranges(&FileEntry::new(meta.url.clone(), meta.size), p_eff);
            meta.ranges_left.store(ranges.len() as u32, Ordering::SeqCst);
            meta.full_claim.store(false, Ordering::SeqCst);
            let whole = ranges.len() == 1;
            for (slot, task) in ranges.iter().enumerate() {
                slot_queues[slot].push_back(RangeReq {
                    file: idx,
                    offset: task.offset,
                    length: task.length,
                    whole_file: whole,
                    attempts: 0,
                    delivered: 0,
                });
            }
        }

        if conns.len() < p_eff as usize {
            conns.resize_with(p_eff as usize, || None);
        }
        let shared_ref: &Shared = &shared;
        let seq = sequential;
        let broke = std::thread::scope(|scope| {
            let mut handles = Vec::with_capacity(slot_queues.len());
            for (slot_queue, conn) in slot_queues.into_iter().zip(conns.iter_mut()) {
                handles.push(
                    scope.spawn(move || run_slot(shared_ref, chan_id, conn, slot_queue, seq)),
                );
            }
            handles
                .into_iter()
                .map(|h| h.join().map_or(false, |o| o.pipeline_broken))
                .fold(false, |a, b| a | b)
        });
        if broke && !sequential {
            sequential = true;
            shared.warn_once(format!(
                "channel {chan_id}: server closed a pipelined connection after one response; \
                 downgrading this channel to sequential requests"
            ));
        }
    }
}

struct ChannelHandle {
    stop: Arc<AtomicBool>,
    handle: JoinHandle<()>,
}

struct Running {
    shared: Arc<Shared>,
    queues: [Arc<Mutex<VecDeque<usize>>>; 3],
    params: Arc<Mutex<[TransferParams; 3]>>,
    channels: [Vec<ChannelHandle>; 3],
    graveyard: Vec<JoinHandle<()>>,
    events_rx: Receiver<TransferEvent>,
    next_channel_id: u32,
}

impl Running {
    fn spawn_channel(&mut self, class: SizeClass) {
        let stop = Arc::new(AtomicBool::new(false));
        let handle = {
            let shared = Arc::clone(&self.shared);
            let queue = Arc::clone(&self.queues[class.index()]);
            let params = Arc::clone(&self.params);
            let stop = Arc::clone(&stop);
            let id = self.next_channel_id;
            std::thread::spawn(move || channel_worker(id, class, shared, queue, params, stop))
        };
        self.next_channel_id += 1;
        self.channels[class.index()].push(ChannelHandle { stop, handle });
    }
}

impl Drop for Running {
    fn drop(&mut self) {
        for list in &mut self.channels {
            for handle in list.drain(..) {
                handle.stop.store(true, Ordering::SeqCst);
                self.graveyard.push(handle.handle);
            }
        }
        for handle in self.graveyard.drain(..) {
            let _ = handle.join();
        }
    }
}

/// The real engine: executes plans with HTTP/1.1 pipelining, byte-range
/// parallelism, and per-class channel concurrency.
pub struct HttpTransport {
    config: HttpConfig,
    inner: Option<Running>,
}

impl HttpTransport {
    pub fn new(config: HttpConfig) -> Self {
        HttpTransport { config, inner: None }
    }

    pub fn config(&self) -> &HttpConfig {
        &self.config
    }
}

impl Transport for HttpTransport {
    fn start(&mut self, plan: &TransferPlan, dataset: &Dataset) -> Result<(), TransportError> {
        let bdp = self.config.network.bdp();
        let mut files = Vec::with_capacity(dataset.len());
        for (idx, entry) in dataset.files.iter().enumerate() {
            let parts = UrlParts::parse(&entry.id)?;
            let dest = destination_for(&self.config.dest_root, &entry.id, &parts.path)?;
            files.push(FileMeta {
                url: entry.id.clone(),
                authority: parts.authority,
                host_header: parts.host_header,
                path: parts.path,
                dest,
                size: entry.size,
                class: classify(entry.size, bdp),
                unknown_size: self.config.unknown_size.contains(&idx),
                ranges_left: AtomicU32::new(0),
                full_claim: AtomicBool::new(false),
                settled: AtomicBool::new(false),
            });
        }
        std::fs::create_dir_all(&self.config.dest_root)?;

        let queues: [Arc<Mutex<VecDeque<usize>>>; 3] = Default::default();
        let mut class_counts = [0usize; 3];
        for (idx, meta) in files.iter().enumerate() {
            queues[meta.class.index()].lock().unwrap().push_back(idx);
            class_counts[meta.class.index()] += 1;
        }

        let (events_tx, events_rx) = mpsc::channel();
        let shared = Arc::new(Shared {
            started_at: Instant::now(),
            total_files: files.len(),
            files,
            bytes_done: AtomicU64::new(0),
            class_left: [
                AtomicUsize::new(class_counts[0]),
                AtomicUsize::new(class_counts[1]),
                AtomicUsize::new(class_counts[2]),
            ],
            finished_files: AtomicUsize::new(0),
            failures: Mutex::new(Vec::new()),
            warnings: Mutex::new(Vec::new()),
            warned: Mutex::new(HashSet::new()),
            no_range_hosts: Mutex::new(HashSet::new()),
            events: events_tx,
            verify: self.config.verify,
            connect_timeout: self.config.connect_timeout,
            read_timeout: self.config.read_timeout,
        });
        let params = Arc::new(Mutex::new([
            plan.params(SizeClass::Small),
            plan.params(SizeClass::Medium),
            plan.params(SizeClass::Large),
        ]));

        let mut running = Running {
            shared,
            queues,
            params,
            channels: [Vec::new(), Vec::new(), Vec::new()],
            graveyard: Vec::new(),
            events_rx,
            next_channel_id: 0,
        };
        for class in SizeClass::ALL {
            for _ in 0..plan.concurrency(class) {
                running.spawn_channel(class);
            }
        }
        self.inner = Some(running);
        Ok(())
    }

    fn set_allocation(&mut self, plan: &TransferPlan) -> Result<(), TransportError> {
        let running = self.inner.as_mut().ok_or(TransportError::NotStarted)?;
        {
            let mut params = running.params.lock().unwrap();
            for class in SizeClass::ALL {
                params[class.index()] = plan.params(class);
            }
        }
        for class in SizeClass::ALL {
            let desired = plan.concurrency(class) as usize;
            // Retire finished workers first so grants spawn live channels.
            let mut alive = Vec::new();
            for handle in running.channels[class.index()].drain(..) {
                if handle.handle.is_finished() {
                    running.graveyard.push(handle.handle);
                } else {
                    alive.push(handle);
                }
            }
            running.channels[class.index()] = alive;
            while running.channels[class.index()].len() > desired {
                let handle = running.channels[class.index()].pop().expect("nonempty");
                handle.stop.store(true, Ordering::SeqCst);
                running.graveyard.push(handle.handle);
            }
            let missing = desired.saturating_sub(running.channels[class.index()].len());
            for _ in 0..missing {
                running.spawn_channel(class);
            }
        }
        Ok(())
    }

    fn next_event(&mut self, deadline: f64) -> Option<TransferEvent> {
        let running = self.inner.as_mut()?;
        loop {
            match running.events_rx.try_recv() {
                Ok(event) => return Some(event),
                Err(TryRecvError::Disconnected) => return None,
                Err(TryRecvError::Empty) => {}
            }
            if running.shared.finished() {
                return None;
            }
            let now = running.shared.now();
            if now >= deadline {
                return None;
            }
            let wait = Duration::from_secs_f64((deadline - now).min(0.05).max(0.001));
            if let Ok(event) = running.events_rx.recv_timeout(wait) {
                return Some(event);
            }
        }
    }

    fn now(&self) -> f64 {
        self.inner.as_ref().map_or(0.0, |r| r.shared.now())
    }

    fn progress_snapshot(&self) -> u64 {
        self.inner.as_ref().map_or(0, |r| r.shared.bytes_done.load(Ordering::SeqCst))
    }

    fn energy_snapshot(&self) -> Option<f64> {
        None // energy comes from telemetry, not the wire
    }

    fn is_finished(&self) -> bool {
        self.inner.as_ref().map_or(false, |r| r.shared.finished())
    }

    fn failures(&self) -> Vec<FailedFile> {
        let mut failures = self
            .inner
            .as_ref()
            .map_or_else(Vec::new, |r| r.shared.failures.lock().unwrap().clone());
        failures.sort_by_key(|f| f.file);
        failures
    }

    fn warnings(&self) -> Vec<String> {
        self.inner
            .as_ref()
            .map_or_else(Vec::new, |r| r.shared.warnings.lock().unwrap().clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn url_parts_and_destination_mapping() {
        let parts = UrlParts::parse("http://127.0.0.1:8080/data/set1/file.bin").unwrap();
        assert_eq!(parts.authority, "127.0.0.1:8080");
        assert_eq!(parts.host_header, "127.0.0.1:8080");
        assert_eq!(parts.path, "/data/set1/file.bin");

        let dest = destination_for(Path::new("/out"), "http://h/data/set1/file.bin", "/data/set1/file.bin")
            .unwrap();
        assert_eq!(dest, PathBuf::from("/out/data/set1/file.bin"));
    }

    #[test]
    fn default_port_keeps_bare_host_header() {
        let parts = UrlParts::parse("http://example.test/a").unwrap();
        assert_eq!(parts.authority, "example.test:80");
        assert_eq!(parts.host_header, "example.test");
    }

    #[test]
    fn hostile_paths_cannot_escape_the_root() {
        let err = destination_for(Path::new("/out"), "http://h/../secret", "/../secret");
        assert!(err.is_err());
        let err = destination_for(Path::new("/out"), "http://h/a/../../b", "/a/../../b");
        assert!(err.is_err());
    }

    #[test]
    fn non_http_schemes_are_rejected() {
        let err = UrlParts::parse("ftp://example.test/a").unwrap_err();
        assert!(matches!(err, TransportError::InvalidUrl { .. }));
    }

    #[test]
    fn empty_path_maps_to_index() {
        let parts = UrlParts::parse("http://example.test").unwrap();
        let dest = destination_for(Path::new("/out"), "http://example.test", &parts.path).unwrap();
        assert_eq!(dest, PathBuf::from("/out/index"));
    }
}
