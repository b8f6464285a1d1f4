use std::io::{BufReader, Write};
use std::net::TcpStream;
use std::time::Duration;

use super::protocol::{Request, Response, Status, MAX_KEY_LEN, MAX_VALUE_LEN};
use crate::error::{MwError, Result};
use crate::types::resolve;

/// Default bound on how long the client waits for any server reply.
pub const DEFAULT_CLIENT_TIMEOUT: Duration = Duration::from_secs(5);

/// Environment variable naming the default store endpoint.
pub const STORE_ADDR_ENV: &str = "MW_STORE_ADDR";

/// The store address from `MW_STORE_ADDR`, if set.
pub fn store_addr_from_env() -> Option<String> {
    std::env::var(STORE_ADDR_ENV).ok().filter(|s| !s.is_empty())
}

/// One connection to a store server.
///
/// A client is `Send` but not shared: give each thread its own client. After
/// a transport error or timeout the connection is dropped and re-established
/// on the next call, so a stale reply can never be mistaken for a fresh one.
pub struct StoreClient {
    addr: String,
    timeout: Duration,
    conn: Option<Conn>,
}

struct Conn {
    reader: BufReader<TcpStream>,
    writer: TcpStream,
}

impl StoreClient {
    pub fn connect(addr: &str) -> Result<StoreClient> {
        Self::connect_with_timeout(addr, DEFAULT_CLIENT_TIMEOUT)
    }

    pub fn connect_with_timeout(addr: &str, timeout: Duration) -> Result<StoreClient> {
        let mut c = StoreClient {
            addr: addr.to_string(),
            timeout,
            conn: None,
        };
        c.ensure_connected()?;
        Ok(c)
    }

    pub fn addr(&self) -> &str {
        &self.addr
    }

    fn ensure_connected(&mut self) -> Result<&mut Conn> {
        if self.conn.is_none() {
            let sa = resolve(&self.addr)?;
            let stream = TcpStream::connect_timeout(&sa, self.timeout)
                .map_err(|e| MwError::from_io(&e, &format!("connect to store {}", self.addr)))?;
            stream.set_nodelay(true).ok();
            let writer = stream
                .try_clone()
                .map_err(|e| MwError::from_io(&e, "clone store socket"))?;
            self.conn = Some(Conn {
                reader: BufReader::new(stream),
                writer,
            });
        }
        Ok(self.conn.as_mut().unwrap())
    }

    fn call(&mut self, req: &Request, reply_timeout: Duration) -> Result<Response> {
        req.check_limits().map_err(MwError::protocol)?;
        let conn = self.ensure_connected()?;
        let res = (|| {
            conn.writer.set_read_timeout(Some(reply_timeout))?;
            conn.writer.set_write_timeout(Some(reply_timeout))?;
            conn.writer.write_all(&req.encode())?;
            Response::read_from(&mut conn.reader)
        })();
        match res {
            Ok(resp) => Ok(resp),
            Err(e) => {
                self.conn = None;
                Err(MwError::from_io(&e, "store request"))
            }
        }
    }

    fn expect_ok(resp: Response) -> Result<Vec<u8>> {
        match resp.status {
            Status::Ok => Ok(resp.value),
            Status::NotFound => Err(MwError::protocol("unexpected NOT_FOUND")),
            Status::Timeout => Err(MwError::timeout("store reported timeout")),
            Status::ProtoErr => Err(MwError::protocol(String::from_utf8_lossy(&resp.value))),
        }
    }

    pub fn set(&mut self, key: &str, value: &[u8]) -> Result<()> {
        let req = Request::Set {
            key: key.as_bytes().to_vec(),
            value: value.to_vec(),
        };
        let resp = self.call(&req, self.timeout)?;
        Self::expect_ok(resp).map(|_| ())
    }

    /// Current value, or `None` if the key is absent. Never blocks on
    /// absence.
    pub fn get(&mut self, key: &str) -> Result<Option<Vec<u8>>> {
        let req = Request::Get {
            key: key.as_bytes().to_vec(),
        };
        let resp = self.call(&req, self.timeout)?;
        match resp.status {
            Status::NotFound => Ok(None),
            _ => Self::expect_ok(resp).map(Some),
        }
    }

    /// Atomically adds `delta` to the 8-byte counter at `key` (absent = 0)
    /// and returns the new value.
    pub fn add(&mut self, key: &str, delta: i64) -> Result<i64> {
        let req = Request::Add {
            key: key.as_bytes().to_vec(),
            delta,
        };
        let resp = self.call(&req, self.timeout)?;
        let v = Self::expect_ok(resp)?;
        let bytes: [u8; 8] = v
            .as_slice()
            .try_into()
            .map_err(|_| MwError::protocol("ADD reply is not 8 bytes"))?;
        Ok(i64::from_le_bytes(bytes))
    }

    /// Reads a counter written by [`StoreClient::add`]. Absent reads as 0.
    pub fn get_counter(&mut self, key: &str) -> Result<i64> {
        match self.get(key)? {
            None => Ok(0),
            Some(v) => {
                let bytes: [u8; 8] = v
                    .as_slice()
                    .try_into()
                    .map_err(|_| MwError::protocol(format!("{key} is not a counter")))?;
                Ok(i64::from_le_bytes(bytes))
            }
        }
    }

    /// Blocks until `key` exists and returns its value, or fails with
    /// `Timeout` once `timeout` has elapsed.
    pub fn wait(&mut self, key: &str, timeout: Duration) -> Result<Vec<u8>> {
        let req = Request::Wait {
            key: key.as_bytes().to_vec(),
            timeout_ms: timeout.as_millis() as u64,
        };
        let resp = self.call(&req, timeout + self.timeout)?;
        match resp.status {
            Status::Timeout => Err(MwError::timeout(format!("wait for {key:?} timed out"))),
            _ => Self::expect_ok(resp),
        }
    }

    /// Removes `key`; removing an absent key is not an error.
    pub fn delete(&mut self, key: &str) -> Result<()> {
        let req = Request::Delete {
            key: key.as_bytes().to_vec(),
        };
        let resp = self.call(&req, self.timeout)?;
        Self::expect_ok(resp).map(|_| ())
    }

    /// Removes every key starting with `prefix`; returns how many went away.
    pub fn delete_prefix(&mut self, prefix: &str) -> Result<u64> {
        let req = Request::DeletePrefix {
            prefix: prefix.as_bytes().to_vec(),
        };
        let resp = self.call(&req, self.timeout)?;
        let v = Self::expect_ok(resp)?;
        Ok(v.as_slice().try_into().map(u64::from_le_bytes).unwrap_or(0))
    }
}

/// Validates a key against the store's limits without contacting it.
pub fn check_key(key: &str) -> Result<()> {
    if key.is_empty() || key.len() > MAX_KEY_LEN {
        return Err(MwError::protocol(format!("bad key length {}", key.len())));
    }
    Ok(())
}

/// Validates a value against the store's limits without contacting it.
pub fn check_value(value: &[u8]) -> Result<()> {
    if value.len() > MAX_VALUE_LEN {
        return Err(MwError::protocol(format!(
            "value of {} bytes too large",
            value.len()
        )));
    }
    Ok(())
}
