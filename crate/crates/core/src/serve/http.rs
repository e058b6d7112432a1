//! Minimal HTTP/1.1 front end over the snapshot index.
//!
//! Endpoints:
//!   GET  /recommendations/{item_id}?count=K  -> `item_id<TAB>score` lines
//!   GET  /healthz                            -> current snapshot id
//!   POST /admin/reload?dir=<path>            -> 204, atomic snapshot swap
//!
//! Requests each clone the current snapshot Arc, so in-flight queries
//! finish on the snapshot they started with while a reload swaps the
//! handle.

use std::io::{BufRead, BufReader, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, RwLock};
use std::thread::JoinHandle;

use crate::error::{Error, Result};
use crate::serve::{recommend, Snapshot, DEFAULT_K};

struct ServerState {
    snapshot: RwLock<Arc<Snapshot>>,
}

impl ServerState {
    fn current(&self) -> Arc<Snapshot> {
        self.snapshot.read().unwrap().clone()
    }

    fn swap(&self, next: Snapshot) {
        *self.snapshot.write().unwrap() = Arc::new(next);
    }
}

/// A running recommendation server; dropping the handle without calling
/// [`ServerHandle::stop`] leaves the listener thread running for the rest
/// of the process.
pub struct ServerHandle {
    pub addr: SocketAddr,
    state: Arc<ServerState>,
    stop: Arc<AtomicBool>,
    join: Option<JoinHandle<()>>,
}

impl ServerHandle {
    pub fn snapshot_id(&self) -> String {
        self.state.current().id().to_owned()
    }

    pub fn stop(mut self) {
        self.stop.store(true, Ordering::SeqCst);
        // nudge the blocking accept loop
        let _ = TcpStream::connect(("127.0.0.1", self.addr.port()));
        if let Some(join) = self.join.take() {
            let _ = join.join();
        }
    }
}

/// Loads the snapshot and serves it on `port` (0 picks an ephemeral
/// port; the bound address is on the returned handle).
pub fn serve_http(snapshot_dir: &Path, port: u16) -> Result<ServerHandle> {
    let snapshot = Snapshot::load(snapshot_dir)?;
    let listener = TcpListener::bind(("0.0.0.0", port))
        .map_err(|e| Error::Server(format!("bind port {port}: {e}")))?;
    let addr = listener
        .local_addr()
        .map_err(|e| Error::Server(e.to_string()))?;
    let state = Arc::new(ServerState {
        snapshot: RwLock::new(Arc::new(snapshot)),
    });
    let stop = Arc::new(AtomicBool::new(false));

    let accept_state = state.clone();
    let accept_stop = stop.clone();
    let join = std::thread::spawn(move || {
        for stream in listener.incoming() {
            if accept_stop.load(Ordering::SeqCst) {
                break;
            }
            let Ok(stream) = stream else { continue };
            let state = accept_state.clone();
            std::thread::spawn(move || {
                let _ = handle_connection(stream, &state);
            });
        }
    });

    Ok(ServerHandle {
        addr,
        state,
        stop,
        join: Some(join),
    })
}

fn percent_decode(s: &str) -> String {
    let bytes = s.as_bytes();
    let mut out = Vec::with_capacity(bytes.len());
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] == b'%' && i + 2 < bytes.len() + 1 && i + 2 <= bytes.len() - 1 {
            let hex = std::str::from_utf8(&bytes[i + 1..i + 3]).ok();
            if let Some(v) = hex.and_then(|h| u8::from_str_radix(h, 16).ok()) {
                out.push(v);
                i += 3;
                continue;
            }
        }
        out.push(bytes[i]);
        i += 1;
    }
    String::from_utf8_lossy(&out).into_owned()
}

fn query_param<'a>(query: &'a str, key: &str) -> Option<String> {
    query.split('&').find_map(|kv| {
        let (k, v) = kv.split_once('=')?;
        (k == key).then(|| percent_decode(v))
    })
}

fn handle_connection(stream: TcpStream, state: &ServerState) -> std::io::Result<()> {
    let mut reader = BufReader::new(stream.try_clone()?);
    let mut request_line = String::new();
    reader.read_line(&mut request_line)?;
    // drain headers; the interface is bodyless
    let mut line = String::new();
    loop {
        line.clear();
        let n = reader.read_line(&mut line)?;
        if n == 0 || line == "\r\n" || line == "\n" {
            break;
        }
    }

    let mut parts = request_line.split_whitespace();
    let (method, target) = match (parts.next(), parts.next()) {
        (Some(m), Some(t)) => (m, t),
        _ => return respond(stream, 400, "bad request\n"),
    };
    let (path, query) = match target.split_once('?') {
        Some((p, q)) => (p, q),
        None => (target, ""),
    };

    match (method, path) {
        ("GET", "/healthz") => {
            let snap = state.current();
            respond(stream, 200, &format!("{}\n", snap.id()))
        }
        ("GET", p) if p.starts_with("/recommendations/") => {
            let item = percent_decode(&p["/recommendations/".len()..]);
            if item.is_empty() {
                return respond(stream, 404, "not found\n");
            }
            let k = match query_param(query, "count") {
                None => DEFAULT_K,
                Some(v) => match v.parse::<usize>() {
                    Ok(k) if k >= 1 => k,
                    _ => return respond(stream, 400, "bad count\n"),
                },
            };
            let snap = state.current();
            match recommend(&snap, &item, k) {
                Ok(results) => {
                    let mut body = String::new();
                    for (id, score) in results {
                        body.push_str(&format!("{id}\t{score:.6}\n"));
                    }
                    respond(stream, 200, &body)
                }
                Err(Error::NotFound(_)) => respond(stream, 404, "not found\n"),
                Err(e) => respond(stream, 500, &format!("{e}\n")),
            }
        }
        ("POST", "/admin/reload") => {
            let Some(dir) = query_param(query, "dir") else {
                return respond(stream, 400, "missing dir\n");
            };
            match Snapshot::load(Path::new(&dir)) {
                Ok(next) => {
                    state.swap(next);
                    respond(stream, 204, "")
                }
                Err(e) => respond(stream, 400, &format!("{e}\n")),
            }
        }
        _ => respond(stream, 404, "not found\n"),
    }
}

fn respond(mut stream: TcpStream, status: u16, body: &str) -> std::io::Result<()> {
    let reason = match status {
        200 => "OK",
        204 => "No Content",
        400 => "Bad Request",
        404 => "Not Found",
        _ => "Internal Server Error",
    };
    let header = format!(
        "HTTP/1.1 {status} {reason}\r\nContent-Type: text/plain; charset=utf-8\r\nContent-Length: {}\r\nConnection: close\r\n\r\n",
        body.len()
    );
    stream.write_all(header.as_bytes())?;
    stream.write_all(body.as_bytes())?;
    stream.flush()
}
