//! Binary request/response framing for the rendezvous store.
//!
//! Request: `u8 opcode · u32 key_len · key · body`, where body is
//! `u32 val_len · val` for SET, `i64 delta` for ADD, `u64 timeout_ms` for
//! WAIT and empty otherwise. Response: `u8 status · u32 val_len · val`.
//! All integers little-endian.

use std::io::{self, Read, Write};

/// Longest accepted key, in bytes.
pub const MAX_KEY_LEN: usize = 512;
/// Longest accepted value, in bytes.
pub const MAX_VALUE_LEN: usize = 64 * 1024;

pub const OP_SET: u8 = 1;
pub const OP_GET: u8 = 2;
pub const OP_ADD: u8 = 3;
pub const OP_WAIT: u8 = 4;
pub const OP_DELETE: u8 = 5;
pub const OP_DELETE_PREFIX: u8 = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Ok = 0,
    NotFound = 1,
    Timeout = 2,
    ProtoErr = 3,
}

impl Status {
    pub fn from_u8(b: u8) -> Option<Status> {
        match b {
            0 => Some(Status::Ok),
            1 => Some(Status::NotFound),
            2 => Some(Status::Timeout),
            3 => Some(Status::ProtoErr),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Request {
    Set { key: Vec<u8>, value: Vec<u8> },
    Get { key: Vec<u8> },
    Add { key: Vec<u8>, delta: i64 },
    Wait { key: Vec<u8>, timeout_ms: u64 },
    Delete { key: Vec<u8> },
    DeletePrefix { prefix: Vec<u8> },
}

impl Request {
    pub fn opcode(&self) -> u8 {
        match self {
            Request::Set { .. } => OP_SET,
            Request::Get { .. } => OP_GET,
            Request::Add { .. } => OP_ADD,
            Request::Wait { .. } => OP_WAIT,
            Request::Delete { .. } => OP_DELETE,
            Request::DeletePrefix { .. } => OP_DELETE_PREFIX,
        }
    }

    pub fn key(&self) -> &[u8] {
        match self {
            Request::Set { key, .. }
            | Request::Get { key }
            | Request::Add { key, .. }
            | Request::Wait { key, .. }
            | Request::Delete { key } => key,
            Request::DeletePrefix { prefix } => prefix,
        }
    }

    /// Checks the size limits that the server enforces.
    pub fn check_limits(&self) -> Result<(), String> {
        let key = self.key();
        if key.is_empty() || key.len() > MAX_KEY_LEN {
            return Err(format!(
                "key length {} outside 1..={MAX_KEY_LEN}",
                key.len()
            ));
        }
        if let Request::Set { value, .. } = self {
            if value.len() > MAX_VALUE_LEN {
                return Err(format!(
                    "value length {} exceeds {MAX_VALUE_LEN}",
                    value.len()
                ));
            }
        }
        Ok(())
    }

    pub fn encode(&self) -> Vec<u8> {
        let key = self.key();
        let mut out = Vec::with_capacity(1 + 4 + key.len() + 12);
        out.push(self.opcode());
        out.extend_from_slice(&(key.len() as u32).to_le_bytes());
        out.extend_from_slice(key);
        match self {
            Request::Set { value, .. } => {
                out.extend_from_slice(&(value.len() as u32).to_le_bytes());
                out.extend_from_slice(value);
            }
            Request::Add { delta, .. } => out.extend_from_slice(&delta.to_le_bytes()),
            Request::Wait { timeout_ms, .. } => out.extend_from_slice(&timeout_ms.to_le_bytes()),
            _ => {}
        }
        out
    }

    /// Reads one request. `Ok(None)` means the peer closed cleanly between
    /// requests; `InvalidData` errors mean the stream is malformed.
    pub fn read_from<R: Read>(r: &mut R) -> io::Result<Option<Request>> {
        let mut op = [0u8; 1];
        if r.read(&mut op)? == 0 {
            return Ok(None);
        }
        let op = op[0];
        if !(OP_SET..=OP_DELETE_PREFIX).contains(&op) {
            return Err(invalid(format!("unknown opcode 0x{op:02X}")));
        }
        let key_len = read_u32(r)? as usize;
        if key_len == 0 || key_len > MAX_KEY_LEN {
            return Err(invalid(format!(
                "key length {key_len} outside 1..={MAX_KEY_LEN}"
            )));
        }
        let key = read_exact_vec(r, key_len)?;
        let req = match op {
            OP_SET => {
                let val_len = read_u32(r)? as usize;
                if val_len > MAX_VALUE_LEN {
                    return Err(invalid(format!(
                        "value length {val_len} exceeds {MAX_VALUE_LEN}"
                    )));
                }
                let value = read_exact_vec(r, val_len)?;
                Request::Set { key, value }
            }
            OP_GET => Request::Get { key },
            OP_ADD => {
                let mut b = [0u8; 8];
                r.read_exact(&mut b)?;
                Request::Add {
                    key,
                    delta: i64::from_le_bytes(b),
                }
            }
            OP_WAIT => {
                let mut b = [0u8; 8];
                r.read_exact(&mut b)?;
                Request::Wait {
                    key,
                    timeout_ms: u64::from_le_bytes(b),
                }
            }
            OP_DELETE => Request::Delete { key },
            _ => Request::DeletePrefix { prefix: key },
        };
        Ok(Some(req))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Response {
    pub status: Status,
    pub value: Vec<u8>,
}

impl Response {
    pub fn ok(value: Vec<u8>) -> Self {
        Response {
            status: Status::Ok,
            value,
        }
    }

    pub fn empty(status: Status) -> Self {
        Response {
            status,
            value: Vec::new(),
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(5 + self.value.len());
        out.push(self.status as u8);
        out.extend_from_slice(&(self.value.len() as u32).to_le_bytes());
        out.extend_from_slice(&self.value);
        out
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> io::Result<()> {
        w.write_all(&self.encode())
    }

    pub fn read_from<R: Read>(r: &mut R) -> io::Result<Response> {
        let mut s = [0u8; 1];
        r.read_exact(&mut s)?;
        let status = Status::from_u8(s[0])
            .ok_or_else(|| invalid(format!("unknown status 0x{:02X}", s[0])))?;
        let len = read_u32(r)? as usize;
        // PROTO_ERR carries a diagnostic message; cap it like a value.
        if len > MAX_VALUE_LEN {
            return Err(invalid(format!("response value length {len} too large")));
        }
        let value = read_exact_vec(r, len)?;
        Ok(Response { status, value })
    }
}

fn invalid(msg: String) -> io::Error {
    io::Error::new(io::ErrorKind::InvalidData, msg)
}

fn read_u32<R: Read>(r: &mut R) -> io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_exact_vec<R: Read>(r: &mut R, n: usize) -> io::Result<Vec<u8>> {
    let mut v = vec![0u8; n];
    r.read_exact(&mut v)?;
    Ok(v)
}
