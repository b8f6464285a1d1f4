use std::io;
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::{Duration, Instant};

use super::frame::{is_would_block, Frame, FrameDecoder, FrameWriter, MsgType};
use crate::error::{ErrorKind, MwError, Result};
use crate::types::{resolve, Buffer, Rank};

/// How long either side waits for the peer's HELLO.
pub const HANDSHAKE_TIMEOUT: Duration = Duration::from_secs(5);

static NEXT_CONN_ID: AtomicU64 = AtomicU64::new(1);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConnState {
    Open,
    /// A transport or framing error occurred; every further call fails.
    Poisoned,
    Closed,
}

/// An established, HELLO-verified connection between two members of one
/// world. Sends and receives are sequence-checked per direction.
pub struct Connection {
    id: u64,
    stream: TcpStream,
    peer: SocketAddr,
    world: String,
    peer_rank: Rank,
    state: ConnState,
    next_send_seq: u64,
    next_recv_seq: u64,
    decoder: FrameDecoder,
}

impl std::fmt::Debug for Connection {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Connection")
            .field("id", &self.id)
            .field("peer", &self.peer)
            .field("world", &self.world)
            .field("peer_rank", &self.peer_rank)
            .field("state", &self.state)
            .finish()
    }
}

fn write_frame_blocking(stream: &mut TcpStream, frame: &Frame) -> io::Result<()> {
    let mut w = FrameWriter::new(frame);
    if w.poll_write(stream)? {
        Ok(())
    } else {
        // Only reachable if the socket has a write timeout configured.
        Err(io::ErrorKind::TimedOut.into())
    }
}

fn read_hello(stream: &mut TcpStream, decoder: &mut FrameDecoder) -> Result<Frame> {
    let deadline = Instant::now() + HANDSHAKE_TIMEOUT;
    loop {
        let left = deadline.saturating_duration_since(Instant::now());
        if left.is_zero() {
            return Err(MwError::timeout("no HELLO from peer"));
        }
        stream
            .set_read_timeout(Some(left))
            .map_err(|e| MwError::from_io(&e, "set_read_timeout"))?;
        match decoder.poll_frame(stream) {
            Ok(Some(f)) if f.msg_type == MsgType::Hello => return Ok(f),
            Ok(Some(f)) => {
                return Err(MwError::protocol(format!(
                    "expected HELLO, got {:?}",
                    f.msg_type
                )))
            }
            Ok(None) => continue,
            Err(e) => return Err(MwError::from_io(&e, "handshake")),
        }
    }
}

impl Connection {
    fn from_parts(
        stream: TcpStream,
        world: &str,
        peer_rank: Rank,
        decoder: FrameDecoder,
    ) -> Result<Self> {
        let peer = stream
            .peer_addr()
            .map_err(|e| MwError::from_io(&e, "peer_addr"))?;
        stream
            .set_read_timeout(None)
            .map_err(|e| MwError::from_io(&e, "set_read_timeout"))?;
        Ok(Connection {
            id: NEXT_CONN_ID.fetch_add(1, Ordering::Relaxed),
            stream,
            peer,
            world: world.to_string(),
            peer_rank,
            state: ConnState::Open,
            next_send_seq: 0,
            next_recv_seq: 0,
            decoder,
        })
    }

    /// Dials `addr`, exchanges HELLOs and returns an open connection. The
    /// peer must answer with the same world name.
    pub fn connect(
        addr: &str,
        world: &str,
        my_rank: Rank,
        timeout: Duration,
    ) -> Result<Connection> {
        let sa = resolve(addr)?;
        let mut stream = TcpStream::connect_timeout(&sa, timeout)
            .map_err(|e| MwError::from_io(&e, &format!("connect {addr}")).in_world(world))?;
        stream.set_nodelay(true).ok();
        write_frame_blocking(&mut stream, &Frame::hello(world, my_rank))
            .map_err(|e| MwError::from_io(&e, "send HELLO").in_world(world))?;
        let mut decoder = FrameDecoder::new();
        let hello = read_hello(&mut stream, &mut decoder).map_err(|e| e.in_world(world))?;
        if hello.world != world {
            let _ = stream.shutdown(Shutdown::Both);
            return Err(MwError::protocol(format!(
                "peer answered for world {:?}, expected {world:?}",
                hello.world
            )));
        }
        let peer_rank =
            u32::try_from(hello.op_seq).map_err(|_| MwError::protocol("peer rank out of range"))?;
        Connection::from_parts(stream, world, peer_rank, decoder)
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn peer(&self) -> SocketAddr {
        self.peer
    }

    pub fn peer_rank(&self) -> Rank {
        self.peer_rank
    }

    pub fn world(&self) -> &str {
        &self.world
    }

    pub fn state(&self) -> ConnState {
        self.state
    }

    pub fn next_send_seq(&self) -> u64 {
        self.next_send_seq
    }

    pub fn next_recv_seq(&self) -> u64 {
        self.next_recv_seq
    }

    fn ensure_open(&self) -> Result<()> {
        match self.state {
            ConnState::Open => Ok(()),
            ConnState::Poisoned => {
                Err(MwError::remote("connection is poisoned").in_world(&self.world))
            }
            ConnState::Closed => Err(MwError::remote("connection is closed").in_world(&self.world)),
        }
    }

    fn fail(&mut self, err: MwError) -> MwError {
        if err.kind() != ErrorKind::Timeout {
            self.state = ConnState::Poisoned;
            let _ = self.stream.shutdown(Shutdown::Both);
        }
        err.in_world(&self.world)
    }

    /// Validates `frame` and assigns the next send sequence number to DATA
    /// frames. Returns the frame ready for the wire.
    pub(crate) fn prepare_send(&mut self, mut frame: Frame) -> Result<Frame> {
        self.ensure_open()?;
        frame.check()?;
        if frame.world != self.world {
            return Err(MwError::protocol(format!(
                "frame for world {:?} on a {:?} connection",
                frame.world, self.world
            )));
        }
        if frame.msg_type == MsgType::Data {
            frame.op_seq = self.next_send_seq;
            self.next_send_seq += 1;
        }
        Ok(frame)
    }

    /// Writes one frame completely (blocking). DATA frames get the next
    /// `op_seq`, which is returned.
    pub fn send_frame(&mut self, frame: Frame) -> Result<u64> {
        let frame = self.prepare_send(frame)?;
        let seq = frame.op_seq;
        if let Err(e) = write_frame_blocking(&mut self.stream, &frame) {
            return Err(self.fail(MwError::from_io(&e, "send")));
        }
        if frame.msg_type == MsgType::Bye {
            self.state = ConnState::Closed;
        }
        Ok(seq)
    }

    pub fn send_data(&mut self, buf: &Buffer) -> Result<u64> {
        let f = Frame::data(&self.world, buf);
        self.send_frame(f)
    }

    /// Checks a received frame against the connection state.
    pub(crate) fn accept_frame(&mut self, frame: Frame) -> Result<Frame> {
        if frame.world != self.world {
            return Err(self.fail(MwError::protocol(format!(
                "frame for world {:?} on a {:?} connection",
                frame.world, self.world
            ))));
        }
        match frame.msg_type {
            MsgType::Data => {
                if frame.op_seq != self.next_recv_seq {
                    let e = MwError::protocol(format!(
                        "sequence gap: expected {}, got {}",
                        self.next_recv_seq, frame.op_seq
                    ));
                    return Err(self.fail(e));
                }
                self.next_recv_seq += 1;
            }
            MsgType::Hello => return Err(self.fail(MwError::protocol("unexpected HELLO"))),
            MsgType::Bye => {
                self.state = ConnState::Closed;
            }
        }
        Ok(frame)
    }

    /// Receives the next frame. With a deadline, `Timeout` leaves the
    /// connection open and any partially read frame buffered.
    pub fn recv_frame(&mut self, deadline: Option<Duration>) -> Result<Frame> {
        self.ensure_open()?;
        let until = deadline.map(|d| Instant::now() + d);
        loop {
            let timeout = match until {
                None => None,
                Some(t) => {
                    let left = t.saturating_duration_since(Instant::now());
                    if left.is_zero() {
                        return Err(MwError::timeout("recv deadline passed").in_world(&self.world));
                    }
                    Some(left)
                }
            };
            if let Err(e) = self.stream.set_read_timeout(timeout) {
                return Err(self.fail(MwError::from_io(&e, "set_read_timeout")));
            }
            match self.decoder.poll_frame(&mut self.stream) {
                Ok(Some(f)) => return self.accept_frame(f),
                Ok(None) => continue,
                Err(e) if is_would_block(&e) => continue,
                Err(e) => {
                    let err = MwError::from_io(&e, "recv");
                    return Err(self.fail(err));
                }
            }
        }
    }

    /// Receives the next DATA frame as a buffer; a BYE becomes
    /// `RemoteWorker`.
    pub fn recv_data(&mut self, deadline: Option<Duration>) -> Result<Buffer> {
        let f = self.recv_frame(deadline)?;
        match f.msg_type {
            MsgType::Data => f.into_buffer(),
            _ => Err(MwError::remote("peer left the world").in_world(&self.world)),
        }
    }

    /// Best-effort BYE followed by closing the socket.
    pub fn close(&mut self) {
        if self.state == ConnState::Open {
            let _ = self.stream.set_nonblocking(true);
            let bye = Frame::bye(&self.world);
            let mut w = FrameWriter::new(&bye);
            let _ = w.poll_write(&mut self.stream);
        }
        self.state = ConnState::Closed;
        let _ = self.stream.shutdown(Shutdown::Both);
    }

    pub(crate) fn set_nonblocking(&self, on: bool) -> Result<()> {
        self.stream
            .set_nonblocking(on)
            .map_err(|e| MwError::from_io(&e, "set_nonblocking"))
    }

    /// Non-blocking receive step used by the poller.
    pub(crate) fn poll_recv(&mut self) -> Result<Option<Frame>> {
        self.ensure_open()?;
        match self.decoder.poll_frame(&mut self.stream) {
            Ok(Some(f)) => self.accept_frame(f).map(Some),
            Ok(None) => Ok(None),
            Err(e) => {
                let err = MwError::from_io(&e, "recv");
                Err(self.fail(err))
            }
        }
    }

    /// Non-blocking write step used by the poller.
    pub(crate) fn poll_write(&mut self, w: &mut FrameWriter) -> Result<bool> {
        self.ensure_open()?;
        match w.poll_write(&mut self.stream) {
            Ok(done) => Ok(done),
            Err(e) => {
                let err = MwError::from_io(&e, "send");
                Err(self.fail(err))
            }
        }
    }

    /// Marks the connection failed without a BYE (crash semantics).
    pub(crate) fn abandon(&mut self) {
        self.state = ConnState::Closed;
        let _ = self.stream.shutdown(Shutdown::Both);
    }
}

/// Accepts connections for one world and performs the HELLO exchange.
pub struct Listener {
    inner: TcpListener,
    world: String,
    my_rank: Rank,
    local: SocketAddr,
}

impl Listener {
    pub fn bind(addr: &str, world: &str, my_rank: Rank) -> Result<Listener> {
        let inner = TcpListener::bind(addr).map_err(|e| {
            MwError::protocol(format!("cannot listen on {addr}: {e}")).in_world(world)
        })?;
        let local = inner
            .local_addr()
            .map_err(|e| MwError::from_io(&e, "local_addr"))?;
        Ok(Listener {
            inner,
            world: world.to_string(),
            my_rank,
            local,
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.local
    }

    pub fn world(&self) -> &str {
        &self.world
    }

    /// Blocks for one incoming connection. A HELLO for another world fails
    /// with `Protocol` and the socket is closed.
    pub fn accept(&self) -> Result<Connection> {
        self.inner
            .set_nonblocking(false)
            .map_err(|e| MwError::from_io(&e, "set_nonblocking"))?;
        let (stream, _) = self
            .inner
            .accept()
            .map_err(|e| MwError::from_io(&e, "accept").in_world(&self.world))?;
        self.handshake(stream)
    }

    /// Non-blocking variant: `Ok(None)` when nobody is waiting.
    pub fn try_accept(&self) -> Result<Option<Connection>> {
        self.inner
            .set_nonblocking(true)
            .map_err(|e| MwError::from_io(&e, "set_nonblocking"))?;
        match self.inner.accept() {
            Ok((stream, _)) => {
                stream
                    .set_nonblocking(false)
                    .map_err(|e| MwError::from_io(&e, "set_nonblocking"))?;
                self.handshake(stream).map(Some)
            }
            Err(e) if e.kind() == io::ErrorKind::WouldBlock => Ok(None),
            Err(e) => Err(MwError::from_io(&e, "accept").in_world(&self.world)),
        }
    }

    fn handshake(&self, mut stream: TcpStream) -> Result<Connection> {
        stream.set_nodelay(true).ok();
        let mut decoder = FrameDecoder::new();
        let hello = match read_hello(&mut stream, &mut decoder) {
            Ok(h) => h,
            Err(e) => {
                let _ = stream.shutdown(Shutdown::Both);
                return Err(e.in_world(&self.world));
            }
        };
        if hello.world != self.world {
            let _ = stream.shutdown(Shutdown::Both);
            return Err(MwError::protocol(format!(
                "HELLO for world {:?} on a listener for {:?}",
                hello.world, self.world
            ))
            .in_world(&self.world));
        }
        let peer_rank =
            u32::try_from(hello.op_seq).map_err(|_| MwError::protocol("peer rank out of range"))?;
        write_frame_blocking(&mut stream, &Frame::hello(&self.world, self.my_rank))
            .map_err(|e| MwError::from_io(&e, "send HELLO").in_world(&self.world))?;
        Connection::from_parts(stream, &self.world, peer_rank, decoder)
    }
}
