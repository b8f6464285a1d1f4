//! The single busy-wait progress engine.
//!
//! Every in-flight operation of every world is advanced here with
//! non-blocking socket steps. Each (world, peer) pair has one ordered lane:
//! operations register the frames they expect and the frames they will send
//! on each lane when they start, in submission order, and inbound DATA
//! frames are matched to expected frames first-in first-out.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::mpsc::{Receiver, Sender, TryRecvError};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use log::{debug, warn};

use super::handle::WorkHandle;
use crate::collectives::{CollectiveKind, Kernel, Plan};
use crate::config::PollerMode;
use crate::error::{ErrorKind, MwError};
use crate::transport::{Connection, Frame, FrameWriter, MsgType};
use crate::types::{Buffer, Rank};
use crate::watchdog::{Suspicion, SuspicionReason};

/// Frames read from one link per iteration before moving on.
const READS_PER_VISIT: usize = 16;
/// Payload bytes read from one link per iteration before moving on, so
/// freshly filled buffers are handed over while still in cache.
const READ_BYTES_PER_VISIT: usize = 256 << 10;
/// Inbound bytes buffered for operations not yet submitted before a link
/// stops being read.
const UNMATCHED_CAP: usize = 64 << 20;
/// How long a dialer keeps retrying a refused connection.
const DIAL_WINDOW: Duration = Duration::from_secs(2);
/// Idle iterations before the yielding poller starts napping.
const YIELD_STREAK: u32 = 256;
const NAP: Duration = Duration::from_micros(50);

pub(crate) enum Command {
    AddWorld {
        name: String,
        epoch: u64,
        my_rank: Rank,
        size: u32,
        peers: Vec<String>,
    },
    NewLink {
        name: String,
        epoch: u64,
        conn: Connection,
    },
    DialFailed {
        name: String,
        epoch: u64,
        rank: Rank,
        err: MwError,
    },
    Submit {
        name: String,
        epoch: u64,
        kernel: Kernel,
        plan: Plan,
        handle: WorkHandle,
    },
    /// Fails every pending operation with `err` and closes the links.
    Abort {
        name: String,
        epoch: u64,
        err: MwError,
    },
    Remove {
        name: String,
        epoch: u64,
    },
    /// Drops every socket without a BYE, as a killed process would.
    Crash,
    Shutdown,
}

/// Counters the poller publishes for observers.
#[derive(Default)]
pub(crate) struct PollerShared {
    pub iterations: AtomicU64,
    pub cpu_ns: AtomicU64,
    /// world name -> peer rank -> connection id
    pub links: Mutex<HashMap<String, BTreeMap<Rank, u64>>>,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct PollerConfig {
    pub mode: PollerMode,
    pub op_timeout: Option<Duration>,
}

struct SendSlot {
    op: u64,
    payload: Option<Buffer>,
    writer: Option<FrameWriter>,
}

#[derive(Default)]
struct Lane {
    conn: Option<Connection>,
    dialing: bool,
    /// Set once the peer said BYE; operations needing the lane fail.
    gone: Option<MwError>,
    recvq: VecDeque<u64>,
    sendq: VecDeque<SendSlot>,
    unmatched: VecDeque<Frame>,
    unmatched_bytes: usize,
}

impl Lane {
    fn busy(&self) -> bool {
        !self.recvq.is_empty() || !self.sendq.is_empty()
    }

    fn touches(&self, op: u64) -> bool {
        self.recvq.contains(&op) || self.sendq.iter().any(|s| s.op == op)
    }

    /// Drops the operation's queued slots. A frame already being written
    /// stays queued so the stream remains well framed.
    fn cancel(&mut self, op: u64) {
        self.recvq.retain(|id| *id != op);
        self.sendq.retain(|s| s.op != op || s.writer.is_some());
    }
}

struct Op {
    handle: WorkHandle,
    kernel: Kernel,
    recvs_left: usize,
    sends_left: usize,
    deadline: Option<Instant>,
}

struct World {
    name: String,
    epoch: u64,
    my_rank: Rank,
    peers: Vec<String>,
    lanes: BTreeMap<Rank, Lane>,
    ops: BTreeMap<u64, Op>,
    dead: Option<MwError>,
}

/// What went wrong on one world during an iteration.
struct WorldFailure {
    cause: MwError,
    lane: Option<Rank>,
    victim: Option<(u64, MwError)>,
}

pub(crate) struct Poller {
    rx: Receiver<Command>,
    tx: Sender<Command>,
    shared: Arc<PollerShared>,
    config: PollerConfig,
    suspicions: Sender<Suspicion>,
    worlds: HashMap<String, World>,
    early: Vec<(String, u64, Connection)>,
    iteration: u64,
    crashed: bool,
}

fn thread_cpu_ns() -> u64 {
    let mut ts = libc::timespec {
        tv_sec: 0,
        tv_nsec: 0,
    };
    // SAFETY: `ts` is a valid, writable timespec.
    let rc = unsafe { libc::clock_gettime(libc::CLOCK_THREAD_CPUTIME_ID, &mut ts) };
    if rc != 0 {
        return 0;
    }
    ts.tv_sec as u64 * 1_000_000_000 + ts.tv_nsec as u64
}

impl Poller {
    pub(crate) fn new(
        rx: Receiver<Command>,
        tx: Sender<Command>,
        shared: Arc<PollerShared>,
        config: PollerConfig,
        suspicions: Sender<Suspicion>,
    ) -> Poller {
        Poller {
            rx,
            tx,
            shared,
            config,
            suspicions,
            worlds: HashMap::new(),
            early: Vec::new(),
            iteration: 0,
            crashed: false,
        }
    }

    pub(crate) fn run(mut self) {
        let mut idle: u32 = 0;
        loop {
            self.iteration += 1;
            self.shared
                .iterations
                .store(self.iteration, Ordering::Relaxed);
            if self.iteration.is_multiple_of(256) {
                self.shared.cpu_ns.store(thread_cpu_ns(), Ordering::Relaxed);
            }
            let mut progress = false;
            loop {
                match self.rx.try_recv() {
                    Ok(Command::Shutdown) | Err(TryRecvError::Disconnected) => {
                        self.shutdown();
                        return;
                    }
                    Ok(cmd) => {
                        progress = true;
                        self.handle(cmd);
                    }
                    Err(TryRecvError::Empty) => break,
                }
            }
            let mut failures = Vec::new();
            for w in self.worlds.values_mut() {
                if w.dead.is_some() {
                    continue;
                }
                let (p, failure) = w.step(self.iteration, &self.tx);
                progress |= p;
                if let Some(f) = failure {
                    failures.push((w.name.clone(), f));
                }
            }
            for (name, f) in failures {
                self.fail_world(&name, f);
            }
            if self.config.op_timeout.is_some() {
                self.check_deadlines();
            }
            if progress {
                idle = 0;
                continue;
            }
            idle = idle.saturating_add(1);
            match self.config.mode {
                PollerMode::Spin => std::hint::spin_loop(),
                PollerMode::Yield => {
                    if idle > YIELD_STREAK {
                        thread::sleep(NAP);
                    } else {
                        thread::yield_now();
                    }
                }
            }
        }
    }

    fn handle(&mut self, cmd: Command) {
        match cmd {
            Command::AddWorld {
                name,
                epoch,
                my_rank,
                size,
                peers,
            } => {
                debug_assert_eq!(peers.len(), size as usize);
                let mut world = World {
                    name: name.clone(),
                    epoch,
                    my_rank,
                    peers,
                    lanes: BTreeMap::new(),
                    ops: BTreeMap::new(),
                    dead: None,
                };
                let early = std::mem::take(&mut self.early);
                for (n, e, conn) in early {
                    if n == name && e == epoch {
                        world.install(conn, &self.shared);
                    } else if n != name || e > epoch {
                        self.early.push((n, e, conn));
                    }
                }
                self.worlds.insert(name, world);
            }
            Command::NewLink { name, epoch, conn } => match self.worlds.get_mut(&name) {
                Some(w) if w.epoch == epoch => {
                    if w.dead.is_none() {
                        w.install(conn, &self.shared);
                    }
                }
                Some(w) if w.epoch > epoch => {}
                _ if self.crashed => {}
                _ => self.early.push((name, epoch, conn)),
            },
            Command::DialFailed {
                name,
                epoch,
                rank,
                err,
            } => {
                let alive = matches!(self.worlds.get(&name), Some(w) if w.epoch == epoch && w.dead.is_none());
                if alive {
                    if let Some(l) = self.worlds.get_mut(&name).unwrap().lanes.get_mut(&rank) {
                        l.dialing = false;
                    }
                    self.fail_world(
                        &name,
                        WorldFailure {
                            cause: err,
                            lane: Some(rank),
                            victim: None,
                        },
                    );
                }
            }
            Command::Submit {
                name,
                epoch,
                kernel,
                plan,
                handle,
            } => self.submit(name, epoch, kernel, plan, handle),
            Command::Abort { name, epoch, err } => {
                if let Some(w) = self.worlds.get_mut(&name) {
                    if w.epoch == epoch && w.dead.is_none() {
                        w.abort_all(&err, self.iteration);
                        w.close_links(true, &self.shared);
                        w.dead = Some(err);
                    }
                }
            }
            Command::Remove { name, epoch } => {
                if matches!(self.worlds.get(&name), Some(w) if w.epoch == epoch) {
                    let mut w = self.worlds.remove(&name).unwrap();
                    let err = MwError::aborted(&name, "world removed");
                    w.abort_all(&err, self.iteration);
                    w.close_links(true, &self.shared);
                    self.shared.links.lock().unwrap().remove(&name);
                }
                self.early.retain(|(n, e, _)| !(n == &name && *e <= epoch));
            }
            Command::Crash => {
                self.crashed = true;
                for (_, mut w) in self.worlds.drain() {
                    let err = MwError::aborted(&w.name, "member crashed");
                    w.abort_all(&err, self.iteration);
                    w.close_links(false, &self.shared);
                }
                self.early.clear();
                self.shared.links.lock().unwrap().clear();
            }
            Command::Shutdown => unreachable!("handled by the run loop"),
        }
    }

    fn shutdown(&mut self) {
        for (_, mut w) in self.worlds.drain() {
            let err = MwError::aborted(&w.name, "communicator shut down");
            w.abort_all(&err, self.iteration);
            w.close_links(true, &self.shared);
        }
        self.shared.links.lock().unwrap().clear();
    }

    fn submit(&mut self, name: String, epoch: u64, kernel: Kernel, plan: Plan, handle: WorkHandle) {
        let it = self.iteration;
        let world = match self.worlds.get_mut(&name) {
            Some(w) if w.epoch == epoch => w,
            _ => {
                handle.complete(
                    Err(MwError::aborted(&name, "world is no longer registered")),
                    it,
                );
                return;
            }
        };
        if let Some(err) = &world.dead {
            handle.complete(Err(err.clone()), it);
            return;
        }
        let id = handle.id();
        let touched = plan
            .recv_from
            .iter()
            .chain(plan.sends.iter().map(|(r, _)| r));
        for r in touched {
            if let Some(err) = world.lanes.get(r).and_then(|l| l.gone.clone()) {
                handle.complete(Err(err), it);
                return;
            }
        }
        let deadline = self.config.op_timeout.map(|t| Instant::now() + t);
        world.ops.insert(
            id,
            Op {
                handle,
                kernel,
                recvs_left: plan.recv_from.len(),
                sends_left: plan.sends.len(),
                deadline,
            },
        );
        for r in plan.recv_from {
            world.lanes.entry(r).or_default().recvq.push_back(id);
        }
        for (r, payload) in plan.sends {
            world.lanes.entry(r).or_default().sendq.push_back(SendSlot {
                op: id,
                payload,
                writer: None,
            });
        }
    }

    fn check_deadlines(&mut self) {
        let now = Instant::now();
        let mut expired = Vec::new();
        for w in self.worlds.values() {
            if w.dead.is_some() {
                continue;
            }
            if let Some((id, op)) = w
                .ops
                .iter()
                .find(|(_, op)| op.deadline.is_some_and(|d| now >= d))
            {
                let err = MwError::timeout(format!(
                    "{} did not complete within the operation timeout",
                    op.handle.kind().name()
                ))
                .in_world(&w.name);
                expired.push((w.name.clone(), *id, err));
            }
        }
        for (name, id, err) in expired {
            self.fail_world(
                &name,
                WorldFailure {
                    cause: err.clone(),
                    lane: None,
                    victim: Some((id, err)),
                },
            );
        }
    }

    /// Breaks one world locally: its operations fail, its links close and
    /// the manager is told.
    fn fail_world(&mut self, name: &str, f: WorldFailure) {
        let it = self.iteration;
        let Some(world) = self.worlds.get_mut(name) else {
            return;
        };
        debug!("world {name} failed locally: {}", f.cause);
        let broken = MwError::broken(name, f.cause.to_string());
        let blamed: Vec<u64> = match f.lane.and_then(|r| world.lanes.get(&r)) {
            Some(l) => world
                .ops
                .keys()
                .copied()
                .filter(|id| l.touches(*id))
                .collect(),
            None => Vec::new(),
        };
        for (id, op) in std::mem::take(&mut world.ops) {
            let err = match &f.victim {
                Some((v, e)) if *v == id => e.clone(),
                _ if blamed.contains(&id) => {
                    if f.cause.kind() == ErrorKind::RemoteWorker {
                        f.cause.clone()
                    } else {
                        MwError::remote(f.cause.detail()).in_world(name)
                    }
                }
                _ => broken.clone(),
            };
            op.handle.complete(Err(err), it);
        }
        if let Some(r) = f.lane {
            if let Some(l) = world.lanes.get_mut(&r) {
                if let Some(c) = l.conn.as_mut() {
                    c.abandon();
                }
            }
        }
        world.close_links(true, &self.shared);
        world.dead = Some(broken);
        let reason = SuspicionReason::Transport(f.cause);
        let _ = self.suspicions.send(Suspicion {
            world: name.to_string(),
            epoch: world.epoch,
            rank: f.lane,
            reason,
        });
    }
}

impl World {
    fn install(&mut self, conn: Connection, shared: &PollerShared) {
        let r = conn.peer_rank();
        if r as usize >= self.peers.len() || r == self.my_rank {
            warn!("world {}: dropping link claiming rank {r}", self.name);
            return;
        }
        let lane = self.lanes.entry(r).or_default();
        if lane.conn.is_some() || lane.gone.is_some() {
            return;
        }
        if let Err(e) = conn.set_nonblocking(true) {
            warn!("world {}: cannot use link to rank {r}: {e}", self.name);
            return;
        }
        shared
            .links
            .lock()
            .unwrap()
            .entry(self.name.clone())
            .or_default()
            .insert(r, conn.id());
        lane.dialing = false;
        lane.conn = Some(conn);
    }

    fn close_links(&mut self, bye: bool, shared: &PollerShared) {
        for lane in self.lanes.values_mut() {
            if let Some(c) = lane.conn.as_mut() {
                if bye {
                    c.close();
                } else {
                    c.abandon();
                }
            }
            lane.conn = None;
            lane.recvq.clear();
            lane.sendq.clear();
            lane.unmatched.clear();
            lane.unmatched_bytes = 0;
        }
        shared.links.lock().unwrap().remove(&self.name);
    }

    fn abort_all(&mut self, err: &MwError, it: u64) {
        for (_, op) in std::mem::take(&mut self.ops) {
            op.handle.complete(Err(err.clone()), it);
        }
    }

    fn dial(&mut self, r: Rank, tx: &Sender<Command>) {
        let lane = self.lanes.get_mut(&r).unwrap();
        lane.dialing = true;
        let addr = self.peers[r as usize].clone();
        let (name, epoch, me) = (self.name.clone(), self.epoch, self.my_rank);
        let tx = tx.clone();
        let spawned = thread::Builder::new()
            .name("mw-dial".into())
            .spawn(move || {
                let until = Instant::now() + DIAL_WINDOW;
                loop {
                    match Connection::connect(&addr, &name, me, DIAL_WINDOW) {
                        Ok(conn) => {
                            let _ = tx.send(Command::NewLink { name, epoch, conn });
                            return;
                        }
                        Err(e) if Instant::now() < until && e.kind() != ErrorKind::Protocol => {
                            thread::sleep(Duration::from_millis(20));
                        }
                        Err(err) => {
                            let _ = tx.send(Command::DialFailed {
                                name,
                                epoch,
                                rank: r,
                                err,
                            });
                            return;
                        }
                    }
                }
            });
        if let Err(e) = spawned {
            warn!("cannot spawn dialer: {e}");
            self.lanes.get_mut(&r).unwrap().dialing = false;
        }
    }

    /// One visit: read every link, match frames, write what is ready and
    /// finish completed operations.
    fn step(&mut self, it: u64, tx: &Sender<Command>) -> (bool, Option<WorldFailure>) {
        let mut progress = false;
        let ranks: Vec<Rank> = self.lanes.keys().copied().collect();

        let mut inbound: Vec<(Rank, Frame)> = Vec::new();
        let mut departed: Vec<Rank> = Vec::new();
        for &r in &ranks {
            let lane = self.lanes.get_mut(&r).unwrap();
            if lane.gone.is_some() {
                continue;
            }
            let Some(conn) = lane.conn.as_mut() else {
                if lane.busy() && !lane.dialing && self.my_rank < r {
                    self.dial(r, tx);
                }
                continue;
            };
            let mut pending_bytes = lane.unmatched_bytes;
            let mut visit_bytes = 0;
            for _ in 0..READS_PER_VISIT {
                if visit_bytes >= READ_BYTES_PER_VISIT {
                    break;
                }
                if pending_bytes > UNMATCHED_CAP && lane.recvq.is_empty() {
                    break;
                }
                match conn.poll_recv() {
                    Ok(None) => break,
                    Ok(Some(f)) if f.msg_type == MsgType::Bye => {
                        departed.push(r);
                        break;
                    }
                    Ok(Some(f)) => {
                        pending_bytes += f.payload.len();
                        visit_bytes += f.payload.len();
                        inbound.push((r, f));
                    }
                    Err(e) => {
                        return (
                            true,
                            Some(WorldFailure {
                                cause: e,
                                lane: Some(r),
                                victim: None,
                            }),
                        )
                    }
                }
            }
        }

        for (r, frame) in inbound {
            progress = true;
            let lane = self.lanes.get_mut(&r).unwrap();
            lane.unmatched_bytes += frame.payload.len();
            lane.unmatched.push_back(frame);
        }
        if let Some(f) = self.match_frames(it) {
            return (true, Some(f));
        }
        for r in departed {
            progress = true;
            self.peer_departed(r, it);
        }

        for &r in &ranks {
            let name = &self.name;
            let lane = self.lanes.get_mut(&r).unwrap();
            let Some(conn) = lane.conn.as_mut() else {
                continue;
            };
            if lane.gone.is_some() {
                continue;
            }
            while let Some(slot) = lane.sendq.front_mut() {
                if slot.writer.is_none() {
                    let Some(payload) = slot.payload.take() else {
                        break;
                    };
                    let frame = match conn.prepare_send(Frame::data(name, &payload)) {
                        Ok(f) => f,
                        Err(e) => {
                            return (
                                true,
                                Some(WorldFailure {
                                    cause: e,
                                    lane: Some(r),
                                    victim: None,
                                }),
                            )
                        }
                    };
                    slot.writer = Some(FrameWriter::new(&frame));
                }
                let w = slot.writer.as_mut().unwrap();
                let before = w.written();
                match conn.poll_write(w) {
                    Ok(true) => {
                        progress = true;
                        let done = lane.sendq.pop_front().unwrap();
                        if let Some(op) = self.ops.get_mut(&done.op) {
                            op.sends_left -= 1;
                            op.handle.note_progress(it);
                        }
                    }
                    Ok(false) => {
                        progress |= w.written() > before;
                        break;
                    }
                    Err(e) => {
                        return (
                            true,
                            Some(WorldFailure {
                                cause: e,
                                lane: Some(r),
                                victim: None,
                            }),
                        )
                    }
                }
            }
        }

        let finished: Vec<u64> = self
            .ops
            .iter()
            .filter(|(_, op)| op.recvs_left == 0 && op.sends_left == 0)
            .map(|(id, _)| *id)
            .collect();
        for id in finished {
            progress = true;
            let op = self.ops.remove(&id).unwrap();
            op.handle.complete(Ok(op.kernel.finish()), it);
        }
        (progress, None)
    }

    /// Pairs buffered inbound frames with the operations expecting them.
    fn match_frames(&mut self, it: u64) -> Option<WorldFailure> {
        let ranks: Vec<Rank> = self.lanes.keys().copied().collect();
        for r in ranks {
            loop {
                let lane = self.lanes.get_mut(&r).unwrap();
                if lane.recvq.is_empty() || lane.unmatched.is_empty() {
                    break;
                }
                let id = lane.recvq.pop_front().unwrap();
                let frame = lane.unmatched.pop_front().unwrap();
                lane.unmatched_bytes -= frame.payload.len();
                if let Some(f) = self.deliver(id, r, frame, it) {
                    return Some(f);
                }
            }
        }
        None
    }

    fn deliver(&mut self, id: u64, from: Rank, frame: Frame, it: u64) -> Option<WorldFailure> {
        let op = self.ops.get_mut(&id)?;
        op.handle.note_progress(it);
        let outcome = frame.into_buffer().and_then(|b| op.kernel.on_recv(from, b));
        match outcome {
            Ok(fills) => {
                op.recvs_left -= 1;
                for (peer, buf) in fills {
                    if let Some(slot) = self.lanes.get_mut(&peer).and_then(|l| {
                        l.sendq
                            .iter_mut()
                            .find(|s| s.op == id && s.payload.is_none() && s.writer.is_none())
                    }) {
                        slot.payload = Some(buf);
                    }
                }
                None
            }
            Err(e) => {
                let e = e.in_world(&self.name);
                if op.handle.kind() == CollectiveKind::Recv {
                    let op = self.ops.remove(&id).unwrap();
                    op.handle.complete(Err(e), it);
                    None
                } else {
                    Some(WorldFailure {
                        cause: e.clone(),
                        lane: None,
                        victim: Some((id, e)),
                    })
                }
            }
        }
    }

    /// The peer left the world cleanly. Operations that need it fail; the
    /// world itself stays up until the watchdog confirms.
    fn peer_departed(&mut self, r: Rank, it: u64) {
        let err = MwError::remote(format!("rank {r} left the world")).in_world(&self.name);
        let victims: Vec<u64> = {
            let lane = self.lanes.get(&r).unwrap();
            self.ops
                .keys()
                .copied()
                .filter(|id| lane.touches(*id))
                .collect()
        };
        let lane = self.lanes.get_mut(&r).unwrap();
        lane.gone = Some(err.clone());
        if let Some(c) = lane.conn.as_mut() {
            c.abandon();
        }
        lane.conn = None;
        lane.recvq.clear();
        lane.sendq.clear();
        lane.unmatched.clear();
        lane.unmatched_bytes = 0;
        for id in victims {
            for l in self.lanes.values_mut() {
                l.cancel(id);
            }
            if let Some(op) = self.ops.remove(&id) {
                op.handle.complete(Err(err.clone()), it);
            }
        }
    }
}
