use std::collections::HashMap;
use std::io::{self, BufReader, BufWriter, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use log::{debug, warn};

use super::protocol::{Request, Response, Status};
use crate::error::{MwError, Result};

#[derive(Default)]
struct State {
    map: HashMap<Vec<u8>, Vec<u8>>,
}

struct Shared {
    state: Mutex<State>,
    changed: Condvar,
    stop: AtomicBool,
    conns: Mutex<HashMap<u64, TcpStream>>,
    next_conn: AtomicU64,
}

/// A running store server. Dropping it (or calling [`StoreServer::shutdown`])
/// stops accepting and severs every client connection.
pub struct StoreServer {
    addr: SocketAddr,
    shared: Arc<Shared>,
    accept: Option<JoinHandle<()>>,
}

impl StoreServer {
    /// Binds `listen_addr` and starts serving in background threads.
    pub fn bind(listen_addr: &str) -> Result<StoreServer> {
        let listener = TcpListener::bind(listen_addr)
            .map_err(|e| MwError::protocol(format!("cannot bind store on {listen_addr}: {e}")))?;
        let addr = listener
            .local_addr()
            .map_err(|e| MwError::from_io(&e, "local_addr"))?;
        listener
            .set_nonblocking(true)
            .map_err(|e| MwError::from_io(&e, "set_nonblocking"))?;
        let shared = Arc::new(Shared {
            state: Mutex::new(State::default()),
            changed: Condvar::new(),
            stop: AtomicBool::new(false),
            conns: Mutex::new(HashMap::new()),
            next_conn: AtomicU64::new(0),
        });
        let s = Arc::clone(&shared);
        let accept = thread::Builder::new()
            .name("mw-store-accept".into())
            .spawn(move || accept_loop(listener, s))
            .expect("spawn store accept thread");
        debug!("store listening on {addr}");
        Ok(StoreServer {
            addr,
            shared,
            accept: Some(accept),
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    /// Number of keys currently stored.
    pub fn key_count(&self) -> usize {
        self.shared.state.lock().unwrap().map.len()
    }

    pub fn shutdown(&mut self) {
        if self.shared.stop.swap(true, Ordering::SeqCst) {
            return;
        }
        for (_, c) in self.shared.conns.lock().unwrap().drain() {
            let _ = c.shutdown(Shutdown::Both);
        }
        self.shared.changed.notify_all();
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
    }

    /// Blocks the calling thread until the server is shut down from another
    /// thread.
    pub fn join(mut self) {
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
    }
}

impl Drop for StoreServer {
    fn drop(&mut self) {
        self.shutdown();
    }
}

fn accept_loop(listener: TcpListener, shared: Arc<Shared>) {
    while !shared.stop.load(Ordering::SeqCst) {
        match listener.accept() {
            Ok((stream, peer)) => {
                let _ = stream.set_nonblocking(false);
                let _ = stream.set_nodelay(true);
                let id = shared.next_conn.fetch_add(1, Ordering::Relaxed);
                if let Ok(c) = stream.try_clone() {
                    shared.conns.lock().unwrap().insert(id, c);
                }
                let s = Arc::clone(&shared);
                let spawned =
                    thread::Builder::new()
                        .name("mw-store-conn".into())
                        .spawn(move || {
                            if let Err(e) = serve_connection(stream, &s) {
                                debug!("store connection {peer} closed: {e}");
                            }
                            s.conns.lock().unwrap().remove(&id);
                        });
                if let Err(e) = spawned {
                    warn!("cannot spawn store connection thread: {e}");
                    shared.conns.lock().unwrap().remove(&id);
                }
            }
            Err(e) if e.kind() == io::ErrorKind::WouldBlock => {
                thread::sleep(Duration::from_millis(2));
            }
            Err(e) => {
                warn!("store accept failed: {e}");
                thread::sleep(Duration::from_millis(10));
            }
        }
    }
}

fn serve_connection(stream: TcpStream, shared: &Shared) -> io::Result<()> {
    let mut reader = BufReader::new(stream.try_clone()?);
    let mut writer = BufWriter::new(stream);
    loop {
        let req = match Request::read_from(&mut reader) {
            Ok(Some(r)) => r,
            Ok(None) => return Ok(()),
            Err(e) if e.kind() == io::ErrorKind::InvalidData => {
                // Malformed framing: report and drop this connection only.
                let resp = Response {
                    status: Status::ProtoErr,
                    value: e.to_string().into_bytes(),
                };
                let _ = resp.write_to(&mut writer);
                let _ = writer.flush();
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        let resp = execute(shared, req);
        resp.write_to(&mut writer)?;
        writer.flush()?;
    }
}

fn execute(shared: &Shared, req: Request) -> Response {
    let mut st = shared.state.lock().unwrap();
    match req {
        Request::Set { key, value } => {
            st.map.insert(key, value);
            shared.changed.notify_all();
            Response::empty(Status::Ok)
        }
        Request::Get { key } => match st.map.get(&key) {
            Some(v) => Response::ok(v.clone()),
            None => Response::empty(Status::NotFound),
        },
        Request::Add { key, delta } => {
            let current = match st.map.get(&key) {
                None => 0i64,
                Some(v) if v.len() == 8 => i64::from_le_bytes(v[..].try_into().unwrap()),
                Some(v) => {
                    return Response {
                        status: Status::ProtoErr,
                        value: format!("ADD on a {}-byte value", v.len()).into_bytes(),
                    }
                }
            };
            let next = current.wrapping_add(delta);
            st.map.insert(key, next.to_le_bytes().to_vec());
            shared.changed.notify_all();
            Response::ok(next.to_le_bytes().to_vec())
        }
        Request::Wait { key, timeout_ms } => {
            let now = Instant::now();
            let deadline = now
                .checked_add(Duration::from_millis(timeout_ms))
                .unwrap_or(now + Duration::from_secs(86_400 * 365));
            loop {
                if let Some(v) = st.map.get(&key) {
                    return Response::ok(v.clone());
                }
                let now = Instant::now();
                if now >= deadline || shared.stop.load(Ordering::SeqCst) {
                    return Response::empty(Status::Timeout);
                }
                st = shared.changed.wait_timeout(st, deadline - now).unwrap().0;
            }
        }
        Request::Delete { key } => {
            st.map.remove(&key);
            Response::empty(Status::Ok)
        }
        Request::DeletePrefix { prefix } => {
            let before = st.map.len();
            st.map.retain(|k, _| !k.starts_with(&prefix));
            let removed = (before - st.map.len()) as u64;
            Response::ok(removed.to_le_bytes().to_vec())
        }
    }
}
