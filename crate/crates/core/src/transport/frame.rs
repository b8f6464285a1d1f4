//! Peer frame layout (little-endian):
//!
//! ```text
//! u32 magic = 0x4D574C44 · u8 version = 1 · u8 msg_type · u16 world_name_len
//! world_name · u64 op_seq · u8 dtype · u64 elem_count · payload
//! ```
//!
//! HELLO carries the sender's rank in `op_seq`; HELLO and BYE have no payload.

use std::io::{self, IoSlice, Read, Write};

use bytes::Bytes;

use crate::error::{MwError, Result};
use crate::types::{is_valid_world_name, Buffer, DType};

pub const MAGIC: u32 = 0x4D57_4C44;
pub const VERSION: u8 = 1;
/// Bytes before the world name.
const FIXED_LEN: usize = 8;
/// Bytes after the world name: op_seq, dtype, elem_count.
const TAIL_LEN: usize = 17;
/// Largest payload a decoder will allocate for.
pub const MAX_PAYLOAD: u64 = 1 << 30;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MsgType {
    Data = 1,
    Hello = 2,
    Bye = 3,
}

impl MsgType {
    fn from_u8(b: u8) -> Option<MsgType> {
        match b {
            1 => Some(MsgType::Data),
            2 => Some(MsgType::Hello),
            3 => Some(MsgType::Bye),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub msg_type: MsgType,
    pub world: String,
    pub op_seq: u64,
    /// Wire dtype code; 0 when there is no payload.
    pub dtype: u8,
    pub elem_count: u64,
    pub payload: Bytes,
}

impl Frame {
    /// A DATA frame carrying `buf`. `op_seq` is assigned when sent.
    pub fn data(world: &str, buf: &Buffer) -> Frame {
        Frame {
            msg_type: MsgType::Data,
            world: world.to_string(),
            op_seq: 0,
            dtype: buf.dtype().code(),
            elem_count: buf.len() as u64,
            payload: buf.bytes().clone(),
        }
    }

    pub fn hello(world: &str, rank: u32) -> Frame {
        Frame {
            msg_type: MsgType::Hello,
            world: world.to_string(),
            op_seq: rank as u64,
            dtype: 0,
            elem_count: 0,
            payload: Bytes::new(),
        }
    }

    pub fn bye(world: &str) -> Frame {
        Frame {
            msg_type: MsgType::Bye,
            world: world.to_string(),
            op_seq: 0,
            dtype: 0,
            elem_count: 0,
            payload: Bytes::new(),
        }
    }

    /// Verifies the frame invariants: valid world name, known dtype and
    /// `payload.len() == elem_count * width` for DATA, empty control frames.
    pub fn check(&self) -> Result<()> {
        if !is_valid_world_name(&self.world) {
            return Err(MwError::protocol(format!(
                "invalid world name {:?} in frame",
                self.world
            )));
        }
        match self.msg_type {
            MsgType::Data => {
                let dtype = DType::from_code(self.dtype).ok_or_else(|| {
                    MwError::protocol(format!("unknown dtype code {}", self.dtype))
                })?;
                let expect = self.elem_count.checked_mul(dtype.width() as u64);
                if expect != Some(self.payload.len() as u64) {
                    return Err(MwError::protocol(format!(
                        "payload of {} bytes does not hold {} {dtype} elements",
                        self.payload.len(),
                        self.elem_count
                    )));
                }
            }
            MsgType::Hello | MsgType::Bye => {
                if self.elem_count != 0 || !self.payload.is_empty() {
                    return Err(MwError::protocol("control frame with payload"));
                }
            }
        }
        Ok(())
    }

    pub fn encode_header(&self) -> Vec<u8> {
        let name = self.world.as_bytes();
        let mut out = Vec::with_capacity(FIXED_LEN + name.len() + TAIL_LEN);
        out.extend_from_slice(&MAGIC.to_le_bytes());
        out.push(VERSION);
        out.push(self.msg_type as u8);
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name);
        out.extend_from_slice(&self.op_seq.to_le_bytes());
        out.push(self.dtype);
        out.extend_from_slice(&self.elem_count.to_le_bytes());
        out
    }

    /// Full wire encoding: header followed by payload.
    pub fn encode(&self) -> Vec<u8> {
        let mut out = self.encode_header();
        out.extend_from_slice(&self.payload);
        out
    }

    pub fn into_buffer(self) -> Result<Buffer> {
        let dtype = DType::from_code(self.dtype)
            .ok_or_else(|| MwError::protocol(format!("unknown dtype code {}", self.dtype)))?;
        Buffer::from_bytes(dtype, self.payload)
    }
}

/// Parsed header fields, everything but the payload.
#[derive(Debug)]
struct Header {
    msg_type: MsgType,
    world: String,
    op_seq: u64,
    dtype: u8,
    elem_count: u64,
    payload_len: usize,
}

fn invalid(msg: impl Into<String>) -> io::Error {
    io::Error::new(io::ErrorKind::InvalidData, msg.into())
}

/// Tries to parse a header at the front of `buf`. Returns the header and
/// its encoded length, or `None` if more bytes are needed.
fn parse_header(buf: &[u8]) -> io::Result<Option<(Header, usize)>> {
    if buf.len() < FIXED_LEN {
        return Ok(None);
    }
    let magic = u32::from_le_bytes(buf[0..4].try_into().unwrap());
    if magic != MAGIC {
        return Err(invalid(format!("bad magic 0x{magic:08X}")));
    }
    if buf[4] != VERSION {
        return Err(invalid(format!("unsupported version {}", buf[4])));
    }
    let msg_type =
        MsgType::from_u8(buf[5]).ok_or_else(|| invalid(format!("unknown msg_type {}", buf[5])))?;
    let name_len = u16::from_le_bytes(buf[6..8].try_into().unwrap()) as usize;
    let total = FIXED_LEN + name_len + TAIL_LEN;
    if buf.len() < total {
        return Ok(None);
    }
    let world = std::str::from_utf8(&buf[FIXED_LEN..FIXED_LEN + name_len])
        .map_err(|_| invalid("world name is not UTF-8"))?
        .to_string();
    let t = FIXED_LEN + name_len;
    let op_seq = u64::from_le_bytes(buf[t..t + 8].try_into().unwrap());
    let dtype = buf[t + 8];
    let elem_count = u64::from_le_bytes(buf[t + 9..t + 17].try_into().unwrap());
    let payload_len = match msg_type {
        MsgType::Data => {
            let d = DType::from_code(dtype)
                .ok_or_else(|| invalid(format!("unknown dtype code {dtype}")))?;
            let n = elem_count
                .checked_mul(d.width() as u64)
                .filter(|n| *n <= MAX_PAYLOAD)
                .ok_or_else(|| invalid(format!("payload of {elem_count} elements too large")))?;
            n as usize
        }
        _ => {
            if elem_count != 0 {
                return Err(invalid("control frame with payload"));
            }
            0
        }
    };
    Ok(Some((
        Header {
            msg_type,
            world,
            op_seq,
            dtype,
            elem_count,
            payload_len,
        },
        total,
    )))
}

/// A payload being read into spare capacity, so it is never zero-filled.
struct PendingPayload {
    header: Header,
    data: Vec<u8>,
    len: usize,
}

/// Incremental frame reader that works on blocking and non-blocking
/// streams alike: `WouldBlock` returns `Ok(None)` and keeps partial state.
pub struct FrameDecoder {
    rbuf: Box<[u8]>,
    rpos: usize,
    rlen: usize,
    pending: Option<PendingPayload>,
}

const READ_AHEAD: usize = 64 * 1024;

impl Default for FrameDecoder {
    fn default() -> Self {
        Self::new()
    }
}

impl FrameDecoder {
    pub fn new() -> Self {
        FrameDecoder {
            rbuf: vec![0u8; READ_AHEAD].into_boxed_slice(),
            rpos: 0,
            rlen: 0,
            pending: None,
        }
    }

    /// True if no partial frame is buffered.
    pub fn is_idle(&self) -> bool {
        self.pending.is_none() && self.rpos == self.rlen
    }

    /// Reads until one frame is complete (`Ok(Some)`), the stream would
    /// block (`Ok(None)`), or an error occurs. A clean or mid-frame EOF is
    /// reported as `UnexpectedEof`; malformed headers as `InvalidData`.
    pub fn poll_frame<R: Read>(&mut self, r: &mut R) -> io::Result<Option<Frame>> {
        loop {
            if let Some(p) = self.pending.as_mut() {
                let avail = self.rlen - self.rpos;
                let n = avail.min(p.len - p.data.len());
                if n > 0 {
                    p.data
                        .extend_from_slice(&self.rbuf[self.rpos..self.rpos + n]);
                    self.rpos += n;
                }
                while p.data.len() < p.len {
                    let need = (p.len - p.data.len()) as u64;
                    match r.by_ref().take(need).read_to_end(&mut p.data) {
                        Ok(0) => {
                            return Err(io::Error::new(
                                io::ErrorKind::UnexpectedEof,
                                "peer closed mid-payload",
                            ))
                        }
                        Ok(_) => {}
                        Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
                        Err(e) if is_would_block(&e) => return Ok(None),
                        Err(e) => return Err(e),
                    }
                }
                let p = self.pending.take().unwrap();
                let h = p.header;
                return Ok(Some(Frame {
                    msg_type: h.msg_type,
                    world: h.world,
                    op_seq: h.op_seq,
                    dtype: h.dtype,
                    elem_count: h.elem_count,
                    payload: Bytes::from(p.data),
                }));
            }

            if let Some((header, used)) = parse_header(&self.rbuf[self.rpos..self.rlen])? {
                self.rpos += used;
                self.pending = Some(PendingPayload {
                    data: Vec::with_capacity(header.payload_len),
                    len: header.payload_len,
                    header,
                });
                continue;
            }

            if self.rpos > 0 {
                self.rbuf.copy_within(self.rpos..self.rlen, 0);
                self.rlen -= self.rpos;
                self.rpos = 0;
            }
            match r.read(&mut self.rbuf[self.rlen..]) {
                Ok(0) => {
                    let msg = if self.rlen == 0 {
                        "peer closed the connection"
                    } else {
                        "peer closed mid-header"
                    };
                    return Err(io::Error::new(io::ErrorKind::UnexpectedEof, msg));
                }
                Ok(n) => self.rlen += n,
                Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
                Err(e) if is_would_block(&e) => return Ok(None),
                Err(e) => return Err(e),
            }
        }
    }
}

pub(crate) fn is_would_block(e: &io::Error) -> bool {
    matches!(
        e.kind(),
        io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut
    )
}

/// A frame being written, possibly across several non-blocking attempts.
/// Header and payload go out through one vectored write when possible.
pub struct FrameWriter {
    header: Vec<u8>,
    payload: Bytes,
    off: usize,
}

impl FrameWriter {
    pub fn new(frame: &Frame) -> Self {
        FrameWriter {
            header: frame.encode_header(),
            payload: frame.payload.clone(),
            off: 0,
        }
    }

    pub fn total_len(&self) -> usize {
        self.header.len() + self.payload.len()
    }

    pub fn written(&self) -> usize {
        self.off
    }

    /// Writes as much as the stream accepts. `Ok(true)` once complete,
    /// `Ok(false)` if the stream would block.
    pub fn poll_write<W: Write>(&mut self, w: &mut W) -> io::Result<bool> {
        let hlen = self.header.len();
        let total = self.total_len();
        while self.off < total {
            let res = if self.off < hlen {
                let bufs = [
                    IoSlice::new(&self.header[self.off..]),
                    IoSlice::new(&self.payload),
                ];
                w.write_vectored(&bufs)
            } else {
                w.write(&self.payload[self.off - hlen..])
            };
            match res {
                Ok(0) => {
                    return Err(io::Error::new(
                        io::ErrorKind::WriteZero,
                        "socket accepted no bytes",
                    ))
                }
                Ok(n) => self.off += n,
                Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
                Err(e) if is_would_block(&e) => return Ok(false),
                Err(e) => return Err(e),
            }
        }
        Ok(true)
    }
}
