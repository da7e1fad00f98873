//! A minimal loopback HTTP/1.1 server for exercising the transfer engine.
//!
//! Serves an in-memory route map with keep-alive, HEAD, and byte-range
//! support, each independently degradable to test the engine's fallback
//! paths: ranges can be refused, HEAD can return 405, Content-Length can be
//! omitted (close-delimited bodies), connections can be closed after the
//! first response (pipelining-hostile) or killed after N responses
//! (fault injection). Server-side accounting exposes the maximum number of
//! pipelined unanswered requests ever observed, so tests can assert the
//! client's outstanding-request bound from the outside.
//!
//! Test scaffolding only: no TLS, no chunked encoding, no request bodies.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, ErrorKind, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicU32, AtomicU64, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

/// Behavior toggles; the default is a fully capable, well-behaved server.
#[derive(Debug, Clone)]
pub struct ServerConfig {
    /// `false`: HEAD answers 405 with an `Allow: GET` header.
    pub head_enabled: bool,
    /// `false`: no `Accept-Ranges` advertised and `Range` headers are
    /// ignored — every GET returns the full body with status 200.
    pub range_enabled: bool,
    /// `false`: `Connection: close` after every response.
    pub keep_alive: bool,
    /// Close the connection after its first response even when further
    /// pipelined requests are already buffered.
    pub close_after_first_response: bool,
    /// Paths served without `Content-Length`; the body is delimited by
    /// closing the connection.
    pub omit_content_length: Vec<String>,
    /// Kill each connection (mid-pipeline) after this many responses.
    pub kill_after_responses: Option<u64>,
    /// Pause before writing each response body, to widen pipelining races
    /// and stretch transfers across measurement windows.
    pub response_delay: Duration,
}

impl Default for ServerConfig {
    fn default() -> Self {
        ServerConfig {
            head_enabled: true,
            range_enabled: true,
            keep_alive: true,
            close_after_first_response: false,
            omit_content_length: Vec::new(),
            kill_after_responses: None,
            response_delay: Duration::ZERO,
        }
    }
}

/// Counters accumulated across all connections.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct StatsSnapshot {
    /// Highest number of parsed-but-unanswered requests observed on any
    /// single connection (a lower bound on the client's pipeline depth).
    pub max_outstanding: u32,
    pub total_requests: u64,
    pub total_connections: u64,
    pub range_requests: u64,
    pub head_requests: u64,
}

#[derive(Default)]
struct Stats {
    max_outstanding: AtomicU32,
    total_requests: AtomicU64,
    total_connections: AtomicU64,
    range_requests: AtomicU64,
    head_requests: AtomicU64,
}

impl Stats {
    fn snapshot(&self) -> StatsSnapshot {
        StatsSnapshot {
            max_outstanding: self.max_outstanding.load(Ordering::Relaxed),
            total_requests: self.total_requests.load(Ordering::Relaxed),
            total_connections: self.total_connections.load(Ordering::Relaxed),
            range_requests: self.range_requests.load(Ordering::Relaxed),
            head_requests: self.head_requests.load(Ordering::Relaxed),
        }
    }
}

/// A running loopback server; shuts down on drop.
pub struct LoopbackServer {
    addr: SocketAddr,
    stats: Arc<Stats>,
    shutdown: Arc<AtomicBool>,
    accept_thread: Option<JoinHandle<()>>,
}

impl LoopbackServer {
    /// Bind an ephemeral loopback port and serve `routes` until dropped.
    pub fn start(
        routes: HashMap<String, Vec<u8>>,
        config: ServerConfig,
    ) -> std::io::Result<LoopbackServer> {
        let listener = TcpListener::bind(("127.0.0.1", 0))?;
        let addr = listener.local_addr()?;
        let stats = Arc::new(Stats::default());
        let shutdown = Arc::new(AtomicBool::new(false));
        let routes = Arc::new(routes);
        let config = Arc::new(config);

        let stats_in = Arc::clone(&stats);
        let shutdown_in = Arc::clone(&shutdown);
        let accept_thread = std::thread::spawn(move || {
            for stream in listener.incoming() {
                if shutdown_in.load(Ordering::Relaxed) {
                    break;
                }
                let Ok(stream) = stream else { continue };
                stats_in.total_connections.fetch_add(1, Ordering::Relaxed);
                let routes = Arc::clone(&routes);
                let config = Arc::clone(&config);
                let stats = Arc::clone(&stats_in);
                std::thread::spawn(move || {
                    let _ = serve_connection(stream, &routes, &config, &stats);
                });
            }
        });

        Ok(LoopbackServer { addr, stats, shutdown, accept_thread: Some(accept_thread) })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    /// Absolute URL for a path on this server.
    pub fn url(&self, path: &str) -> String {
        let path = path.strip_prefix('/').unwrap_or(path);
        format!("http://{}/{}", self.addr, path)
    }

    pub fn stats(&self) -> StatsSnapshot {
        self.stats.snapshot()
    }
}

impl Drop for LoopbackServer {
    fn drop(&mut self) {
        self.shutdown.store(true, Ordering::Relaxed);
        // Wake the accept loop so it notices the flag.
        let _ = TcpStream::connect(self.addr);
        if let Some(handle) = self.accept_thread.take() {
            let _ = handle.join();
        }
    }
}

struct Request {
    method: String,
    path: String,
    range: Option<(u64, Option<u64>)>,
    close_requested: bool,
}

/// Parse one request head from the buffered stream. `Ok(None)` on a clean
/// end of stream before any bytes of a request.
fn parse_request(reader: &mut BufReader<TcpStream>) -> std::io::Result<Option<Request>> {
    let mut line = String::new();
    if reader.read_line(&mut line)? == 0 {
        return Ok(None);
    }
    let mut parts = line.split_whitespace();
    let method = parts.next().unwrap_or_default().to_string();
    let path = parts.next().unwrap_or_default().to_string();
    if method.is_empty() || path.is_empty() {
        return Err(std::io::Error::new(ErrorKind::InvalidData, "malformed request line"));
    }
    let mut range = None;
    let mut close_requested = false;
    loop {
        let mut header = String::new();
        if reader.read_line(&mut header)? == 0 {
            return Err(ErrorKind::UnexpectedEof.into());
        }
        let header = header.trim_end();
        if header.is_empty() {
            break;
        }
        let Some((name, value)) = header.split_once(':') else { continue };
        let name = name.trim().to_ascii_lowercase();
        let value = value.trim();
        if name == "range" {
            range = parse_range(value);
        } else if name == "connection" && value.eq_ignore_ascii_case("close") {
            close_requested = true;
        }
    }
    Ok(Some(Request { method, path, range, close_requested }))
}

/// `bytes=a-b` (inclusive) or `bytes=a-`.
fn parse_range(value: &str) -> Option<(u64, Option<u64>)> {
    let spec = value.strip_prefix("bytes=")?;
    let (start, end) = spec.split_once('-')?;
    let start: u64 = start.trim().parse().ok()?;
    let end = end.trim();
    if end.is_empty() {
        Some((start, None))
    } else {
        Some((start, end.parse().ok()))
    }
}

/// Drain every request already buffered on the wire without blocking, so
/// the outstanding-request count reflects what the client truly pipelined.
fn drain_buffered_requests(
    reader: &mut BufReader<TcpStream>,
    queue: &mut Vec<Request>,
) -> std::io::Result<()> {
    loop {
        // Anything still in the BufReader is guaranteed parseable without
        // touching the socket only if a full head is buffered; switching the
        // socket to non-blocking covers the partial-head case.
        reader.get_ref().set_nonblocking(true)?;
        let result = parse_request(reader);
        reader.get_ref().set_nonblocking(false)?;
        match result {
            Ok(Some(req)) => queue.push(req),
            Ok(None) => return Ok(()),
            Err(e) if e.kind() == ErrorKind::WouldBlock => return Ok(()),
            Err(e) => return Err(e),
        }
    }
}

fn serve_connection(
    stream: TcpStream,
    routes: &HashMap<String, Vec<u8>>,
    config: &ServerConfig,
    stats: &Stats,
) -> std::io::Result<()> {
    stream.set_read_timeout(Some(Duration::from_secs(10)))?;
    stream.set_nodelay(true)?;
    let mut writer = stream.try_clone()?;
    let mut reader = BufReader::new(stream);
    let mut responses_sent = 0u64;
    let mut queue: Vec<Request> = Vec::new();

    loop {
        if queue.is_empty() {
            match parse_request(&mut reader) {
                Ok(Some(req)) => queue.push(req),
                Ok(None) => return Ok(()),
                Err(e) if e.kind() == ErrorKind::WouldBlock => return Ok(()),
                Err(_) => return Ok(()),
            }
        }
        drain_buffered_requests(&mut reader, &mut queue)?;
        stats.max_outstanding.fetch_max(queue.len() as u32, Ordering::Relaxed);

        let req = queue.remove(0);
        stats.total_requests.fetch_add(1, Ordering::Relaxed);
        if !config.response_delay.is_zero() {
            std::thread::sleep(config.response_delay);
        }
        let close_for_protocol =
            respond(&mut writer, &req, routes, config, stats, &mut responses_sent)?;

        if let Some(limit) = config.kill_after_responses {
            if responses_sent >= limit {
                return Ok(()); // drop the socket, pending queue and all
            }
        }
        if config.close_after_first_response
            || close_for_protocol
            || req.close_requested
            || !config.keep_alive
        {
            return Ok(());
        }
    }
}

/// Write one response; `Ok(true)` means the connection must close (the
/// body's end is the close, or policy demands it).
fn respond(
    writer: &mut TcpStream,
    req: &Request,
    routes: &HashMap<String, Vec<u8>>,
    config: &ServerConfig,
    stats: &Stats,
    responses_sent: &mut u64,
) -> std::io::Result<bool> {
    let is_head = req.method.eq_ignore_ascii_case("HEAD");
    if is_head {
        stats.head_requests.fetch_add(1, Ordering::Relaxed);
    }
    if req.range.is_some() {
        stats.range_requests.fetch_add(1, Ordering::Relaxed);
    }

    if is_head && !config.head_enabled {
        write!(writer, "HTTP/1.1 405 Method Not Allowed\r\nAllow: GET\r\nContent-Length: 0\r\n\r\n")?;
        *responses_sent += 1;
        return Ok(false);
    }
    if !is_head && !req.method.eq_ignore_ascii_case("GET") {
        write!(writer, "HTTP/1.1 405 Method Not Allowed\r\nAllow: GET, HEAD\r\nContent-Length: 0\r\n\r\n")?;
        *responses_sent += 1;
        return Ok(false);
    }

    let Some(body) = routes.get(&req.path) else {
        write!(writer, "HTTP/1.1 404 Not Found\r\nContent-Length: 0\r\n\r\n")?;
        *responses_sent += 1;
        return Ok(false);
    };

    let total = body.len() as u64;
    let ranged = config.range_enabled && !is_head;
    let (status, slice, content_range) = match (ranged, req.range) {
        (true, Some((start, end))) => {
            let end = end.unwrap_or(total.saturating_sub(1)).min(total.saturating_sub(1));
            if start > end || start >= total {
                write!(
                    writer,
                    "HTTP/1.1 416 Range Not Satisfiable\r\nContent-Range: bytes */{total}\r\nContent-Length: 0\r\n\r\n"
                )?;
                *responses_sent += 1;
                return Ok(false);
            }
            (
                "206 Partial Content",
                &body[start as usize..=end as usize],
                Some(format!("bytes {start}-{end}/{total}")),
            )
        }
        _ => ("200 OK", &body[..], None),
    };

    let omit_length = config.omit_content_length.iter().any(|p| p == &req.path);
    let mut head = format!("HTTP/1.1 {status}\r\n");
    if config.range_enabled {
        head.push_str("Accept-Ranges: bytes\r\n");
    }
    if let Some(cr) = content_range {
        head.push_str(&format!("Content-Range: {cr}\r\n"));
    }
    if omit_length {
        head.push_str("Connection: close\r\n\r\n");
    } else {
        head.push_str(&format!("Content-Length: {}\r\n\r\n", slice.len()));
    }
    writer.write_all(head.as_bytes())?;
    if !is_head {
        writer.write_all(slice)?;
    }
    writer.flush()?;
    *responses_sent += 1;
    Ok(omit_length)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Read;

    fn get(addr: SocketAddr, request: &str) -> String {
        let mut stream = TcpStream::connect(addr).unwrap();
        stream.write_all(request.as_bytes()).unwrap();
        let mut out = String::new();
        stream.read_to_string(&mut out).unwrap();
        out
    }

    fn server_with(config: ServerConfig) -> LoopbackServer {
        let mut routes = HashMap::new();
        routes.insert("/data/a".to_string(), b"hello world".to_vec());
        routes.insert("/data/b".to_string(), (0u8..=255).collect());
        LoopbackServer::start(routes, config).unwrap()
    }

    #[test]
    fn serves_full_bodies_with_length_and_ranges() {
        let server = server_with(ServerConfig::default());
        let response = get(
            server.addr(),
            "GET /data/a HTTP/1.1\r\nHost: x\r\nConnection: close\r\n\r\n",
        );
        assert!(response.starts_with("HTTP/1.1 200 OK"), "{response}");
        assert!(response.contains("Content-Length: 11"));
        assert!(response.contains("Accept-Ranges: bytes"));
        assert!(response.ends_with("hello world"));

        let ranged = get(
            server.addr(),
            "GET /data/a HTTP/1.1\r\nHost: x\r\nRange: bytes=6-10\r\nConnection: close\r\n\r\n",
        );
        assert!(ranged.starts_with("HTTP/1.1 206"), "{ranged}");
        assert!(ranged.contains("Content-Range: bytes 6-10/11"));
        assert!(ranged.ends_with("world"));

        let missing = get(
            server.addr(),
            "GET /nope HTTP/1.1\r\nHost: x\r\nConnection: close\r\n\r\n",
        );
        assert!(missing.starts_with("HTTP/1.1 404"), "{missing}");

        let stats = server.stats();
        assert_eq!(stats.total_requests, 3);
        assert_eq!(stats.range_requests, 1);
    }

    #[test]
    fn range_disabled_returns_full_body_without_advertisement() {
        let config = ServerConfig { range_enabled: false, ..ServerConfig::default() };
        let server = server_with(config);
        let response = get(
            server.addr(),
            "GET /data/a HTTP/1.1\r\nHost: x\r\nRange: bytes=0-4\r\nConnection: close\r\n\r\n",
        );
        assert!(response.starts_with("HTTP/1.1 200 OK"), "{response}");
        assert!(!response.contains("Accept-Ranges"));
        assert!(response.ends_with("hello world"), "full body expected: {response}");
    }

    #[test]
    fn head_toggle_and_size_reporting() {
        let server = server_with(ServerConfig::default());
        let ok = get(server.addr(), "HEAD /data/b HTTP/1.1\r\nHost: x\r\nConnection: close\r\n\r\n");
        assert!(ok.starts_with("HTTP/1.1 200 OK"));
        assert!(ok.contains("Content-Length: 256"));
        assert!(!ok.contains('\u{0}'), "no body on HEAD");

        let disabled = server_with(ServerConfig { head_enabled: false, ..ServerConfig::default() });
        let no = get(disabled.addr(), "HEAD /data/a HTTP/1.1\r\nHost: x\r\nConnection: close\r\n\r\n");
        assert!(no.starts_with("HTTP/1.1 405"), "{no}");
        assert!(no.contains("Allow: GET"));
    }

    #[test]
    fn pipelined_requests_are_counted_and_answered_in_order() {
        let server = server_with(ServerConfig {
            response_delay: Duration::from_millis(20),
            ..ServerConfig::default()
        });
        let mut stream = TcpStream::connect(server.addr()).unwrap();
        let one = "GET /data/a HTTP/1.1\r\nHost: x\r\n\r\n";
        let two = "GET /data/b HTTP/1.1\r\nHost: x\r\n\r\n";
        let three = "GET /data/a HTTP/1.1\r\nHost: x\r\nConnection: close\r\n\r\n";
        stream.write_all(format!("{one}{two}{three}").as_bytes()).unwrap();
        let mut all = Vec::new();
        stream.read_to_end(&mut all).unwrap();
        let text = String::from_utf8_lossy(&all);
        let order: Vec<usize> = ["Content-Length: 11", "Content-Length: 256"]
            .iter()
            .map(|n| text.find(n).unwrap())
            .collect();
        assert!(order[0] < order[1], "responses out of request order");
        assert_eq!(text.matches("HTTP/1.1 200 OK").count(), 3);
        assert!(server.stats().max_outstanding >= 2, "{:?}", server.stats());
    }

    #[test]
    fn close_after_first_response_drops_pipelined_remainder() {
        let server = server_with(ServerConfig {
            close_after_first_response: true,
            response_delay: Duration::from_millis(10),
            ..ServerConfig::default()
        });
        let mut stream = TcpStream::connect(server.addr()).unwrap();
        let req = "GET /data/a HTTP/1.1\r\nHost: x\r\n\r\n";
        stream.write_all(format!("{req}{req}{req}").as_bytes()).unwrap();
        let mut all = Vec::new();
        stream.read_to_end(&mut all).unwrap();
        let text = String::from_utf8_lossy(&all);
        assert_eq!(text.matches("HTTP/1.1 200 OK").count(), 1, "{text}");
    }

    #[test]
    fn kill_after_n_responses_cuts_the_connection() {
        let server = server_with(ServerConfig {
            kill_after_responses: Some(2),
            response_delay: Duration::from_millis(10),
            ..ServerConfig::default()
        });
        let mut stream = TcpStream::connect(server.addr()).unwrap();
        let req = "GET /data/a HTTP/1.1\r\nHost: x\r\n\r\n";
        stream.write_all(req.repeat(4).as_bytes()).unwrap();
        let mut all = Vec::new();
        stream.read_to_end(&mut all).unwrap();
        let text = String::from_utf8_lossy(&all);
        assert_eq!(text.matches("HTTP/1.1 200 OK").count(), 2, "{text}");
    }

    #[test]
    fn omitted_content_length_is_close_delimited() {
        let mut routes = HashMap::new();
        routes.insert("/mystery".to_string(), vec![7u8; 5000]);
        let server = LoopbackServer::start(
            routes,
            ServerConfig {
                omit_content_length: vec!["/mystery".to_string()],
                ..ServerConfig::default()
            },
        )
        .unwrap();
        let mut stream = TcpStream::connect(server.addr()).unwrap();
        stream
            .write_all(b"GET /mystery HTTP/1.1\r\nHost: x\r\n\r\n")
            .unwrap();
        let mut all = Vec::new();
        stream.read_to_end(&mut all).unwrap();
        let text = String::from_utf8_lossy(&all);
        assert!(!text.contains("Content-Length"), "{text}");
        let body_start = all.windows(4).position(|w| w == b"\r\n\r\n").unwrap() + 4;
        assert_eq!(all.len() - body_start, 5000);
    }
}
