//! World lifecycle: rendezvous, registry, quarantine and cleanup.

use std::collections::HashMap;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use log::{debug, info, warn};

use crate::communicator::poller::Command;
use crate::communicator::Communicator;
use crate::config::Config;
use crate::error::{ErrorKind, MwError, Result};
use crate::store::{keys, StoreClient, DEFAULT_CLIENT_TIMEOUT};
use crate::transport::Listener;
use crate::types::{validate_descriptor, Rank, WorldDescriptor};
use crate::watchdog::{Suspicion, SuspicionReason, Watchdog, WatchedWorld};

/// Idle polling starts at the first delay and doubles up to the second.
const JOIN_POLL: (Duration, Duration) = (Duration::from_millis(1), Duration::from_millis(50));
const ACCEPT_POLL: (Duration, Duration) = (Duration::from_millis(1), Duration::from_millis(50));

fn backoff(nap: &mut Duration, max: Duration) {
    thread::sleep(*nap);
    *nap = (*nap * 2).min(max);
}
const CLEANUP_TIMEOUT: Duration = Duration::from_secs(2);

/// Lifecycle state of one world at this member.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum WorldStatus {
    Initializing,
    Ready,
    Broken,
    Removed,
}

impl WorldStatus {
    pub fn can_become(self, next: WorldStatus) -> bool {
        use WorldStatus::*;
        matches!(
            (self, next),
            (Initializing, Ready)
                | (Initializing, Broken)
                | (Ready, Broken)
                | (Ready, Removed)
                | (Broken, Removed)
        )
    }

    pub fn name(self) -> &'static str {
        match self {
            WorldStatus::Initializing => "Initializing",
            WorldStatus::Ready => "Ready",
            WorldStatus::Broken => "Broken",
            WorldStatus::Removed => "Removed",
        }
    }
}

/// One status change, as delivered to subscribers.
#[derive(Debug, Clone)]
pub struct StatusEvent {
    pub world: String,
    pub epoch: u64,
    pub from: Option<WorldStatus>,
    pub to: WorldStatus,
    pub at: Instant,
    pub cause: Option<String>,
}

struct WorldEntry {
    descriptor: WorldDescriptor,
    status: WorldStatus,
    epoch: Option<u64>,
    cause: Option<MwError>,
    cancel: Arc<AtomicBool>,
    acceptor: Option<Arc<AtomicBool>>,
}

/// What the communicator needs to start an operation.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Target {
    pub epoch: u64,
    pub my_rank: Rank,
    pub size: u32,
}

/// The per-world state table, keyed by world name.
#[derive(Default)]
pub(crate) struct Registry {
    worlds: Mutex<HashMap<String, WorldEntry>>,
    subscribers: Mutex<Vec<Sender<StatusEvent>>>,
}

impl Registry {
    pub(crate) fn target(&self, name: &str) -> Result<Target> {
        let worlds = self.worlds.lock().unwrap();
        let e = worlds
            .get(name)
            .ok_or_else(|| MwError::unknown_world(name))?;
        match e.status {
            WorldStatus::Ready => Ok(Target {
                epoch: e.epoch.unwrap_or(0),
                my_rank: e.descriptor.my_rank,
                size: e.descriptor.size,
            }),
            WorldStatus::Broken => Err(MwError::broken(
                name,
                e.cause
                    .as_ref()
                    .map(|c| c.to_string())
                    .unwrap_or_else(|| "world is broken".into()),
            )),
            WorldStatus::Initializing => Err(MwError::new(
                ErrorKind::UnknownWorld,
                "world is still initializing",
            )
            .in_world(name)),
            WorldStatus::Removed => {
                Err(MwError::new(ErrorKind::UnknownWorld, "world was removed").in_world(name))
            }
        }
    }

    fn emit(&self, ev: StatusEvent) {
        self.subscribers
            .lock()
            .unwrap()
            .retain(|s| s.send(ev.clone()).is_ok());
    }

    /// Applies a legal transition for the entry of `name` at `epoch` (any
    /// epoch if `None`). Returns the previous status, or `None` if the
    /// transition was not applicable.
    fn transition(
        &self,
        name: &str,
        epoch: Option<u64>,
        to: WorldStatus,
        cause: Option<&MwError>,
    ) -> Option<WorldStatus> {
        let ev = {
            let mut worlds = self.worlds.lock().unwrap();
            let e = worlds.get_mut(name)?;
            if epoch.is_some() && e.epoch != epoch {
                return None;
            }
            if !e.status.can_become(to) {
                return None;
            }
            let from = e.status;
            e.status = to;
            if let Some(c) = cause {
                e.cause.get_or_insert_with(|| c.clone());
            }
            StatusEvent {
                world: name.to_string(),
                epoch: e.epoch.unwrap_or(0),
                from: Some(from),
                to,
                at: Instant::now(),
                cause: cause.map(|c| c.to_string()),
            }
        };
        let from = ev.from;
        self.emit(ev);
        from
    }
}

/// Waits for a background initialization.
pub struct InitTicket {
    world: String,
    thread: Option<JoinHandle<Result<()>>>,
}

impl InitTicket {
    pub fn world(&self) -> &str {
        &self.world
    }

    pub fn is_finished(&self) -> bool {
        self.thread.as_ref().is_none_or(|t| t.is_finished())
    }

    pub fn wait(mut self) -> Result<()> {
        match self.thread.take() {
            Some(t) => t.join().unwrap_or_else(|_| {
                Err(MwError::protocol("initialization thread panicked").in_world(&self.world))
            }),
            None => Ok(()),
        }
    }
}

struct Inner {
    config: Config,
    registry: Arc<Registry>,
    comm: Communicator,
    watchdog: Watchdog,
    stop: Arc<AtomicBool>,
    supervisor: Mutex<Option<JoinHandle<()>>>,
    closed: AtomicBool,
}

/// Creates, tracks and tears down the worlds this process belongs to.
/// Clones share the same registry, communicator and watchdog.
#[derive(Clone)]
pub struct WorldManager {
    inner: Arc<Inner>,
}

fn epoch_key(name: &str) -> String {
    format!("world/{name}/epoch")
}

fn host_of(addr: &str) -> &str {
    addr.rsplit_once(':').map(|(h, _)| h).unwrap_or(addr)
}

fn cause_of(s: &Suspicion) -> MwError {
    match &s.reason {
        SuspicionReason::Transport(e) => e.clone(),
        SuspicionReason::Stale { .. } => MwError::remote(s.describe()).in_world(&s.world),
        SuspicionReason::StoreUnreachable { .. } => {
            MwError::timeout(s.describe()).in_world(&s.world)
        }
    }
}

impl WorldManager {
    pub fn new(config: Config) -> Result<WorldManager> {
        config.watchdog.validate()?;
        let registry = Arc::new(Registry::default());
        let (sus_tx, sus_rx) = mpsc::channel::<Suspicion>();
        let comm = Communicator::start(Arc::clone(&registry), &config, sus_tx.clone())?;
        let watchdog = Watchdog::start(config.watchdog, sus_tx)?;
        let inner = Arc::new(Inner {
            config,
            registry,
            comm,
            watchdog,
            stop: Arc::new(AtomicBool::new(false)),
            supervisor: Mutex::new(None),
            closed: AtomicBool::new(false),
        });
        let weak = Arc::downgrade(&inner);
        let stop = Arc::clone(&inner.stop);
        let sup = thread::Builder::new()
            .name("mw-supervisor".into())
            .spawn(move || supervise(sus_rx, weak, stop))
            .map_err(|e| MwError::protocol(format!("cannot spawn supervisor: {e}")))?;
        *inner.supervisor.lock().unwrap() = Some(sup);
        Ok(WorldManager { inner })
    }

    /// A manager configured from the `MW_*` environment variables.
    pub fn from_env() -> Result<WorldManager> {
        Self::new(Config::from_env()?)
    }

    pub fn config(&self) -> &Config {
        &self.inner.config
    }

    /// The communicator bound to this manager. Every call returns the same
    /// logical communicator.
    pub fn communicator(&self) -> Communicator {
        self.inner.comm.clone()
    }

    /// Receives every status change from now on.
    pub fn subscribe(&self) -> Receiver<StatusEvent> {
        let (tx, rx) = mpsc::channel();
        self.inner.registry.subscribers.lock().unwrap().push(tx);
        rx
    }

    pub fn world_status(&self, name: &str) -> Result<WorldStatus> {
        let worlds = self.inner.registry.worlds.lock().unwrap();
        worlds
            .get(name)
            .map(|e| e.status)
            .ok_or_else(|| MwError::unknown_world(name))
    }

    pub fn world_epoch(&self, name: &str) -> Result<u64> {
        let worlds = self.inner.registry.worlds.lock().unwrap();
        let e = worlds
            .get(name)
            .ok_or_else(|| MwError::unknown_world(name))?;
        Ok(e.epoch.unwrap_or(0))
    }

    /// The cause recorded when the world broke, if it did.
    pub fn broken_cause(&self, name: &str) -> Result<Option<MwError>> {
        let worlds = self.inner.registry.worlds.lock().unwrap();
        let e = worlds
            .get(name)
            .ok_or_else(|| MwError::unknown_world(name))?;
        Ok(e.cause.clone())
    }

    /// Names of every world not yet removed, with their status.
    pub fn worlds(&self) -> Vec<(String, WorldStatus)> {
        let worlds = self.inner.registry.worlds.lock().unwrap();
        let mut v: Vec<_> = worlds
            .iter()
            .filter(|(_, e)| e.status != WorldStatus::Removed)
            .map(|(n, e)| (n.clone(), e.status))
            .collect();
        v.sort();
        v
    }

    /// (peer rank, connection id) for every established link of a world.
    /// Broken worlds expose none.
    pub fn connection_ids(&self, name: &str) -> Result<Vec<(Rank, u64)>> {
        match self.world_status(name)? {
            WorldStatus::Ready => Ok(self.inner.comm.link_ids(name)),
            _ => Ok(Vec::new()),
        }
    }

    /// Joins (or creates) a world and blocks until every member has
    /// arrived. The rendezvous runs on its own thread, so other worlds'
    /// traffic keeps flowing meanwhile.
    pub fn initialize_world(&self, d: WorldDescriptor, timeout: Option<Duration>) -> Result<()> {
        self.initialize_world_async(d, timeout)?.wait()
    }

    /// Starts the rendezvous in the background and returns at once.
    pub fn initialize_world_async(
        &self,
        d: WorldDescriptor,
        timeout: Option<Duration>,
    ) -> Result<InitTicket> {
        validate_descriptor(&d)?;
        if self.inner.closed.load(Ordering::SeqCst) {
            return Err(MwError::aborted(&d.name, "manager is shut down"));
        }
        let cancel = Arc::new(AtomicBool::new(false));
        {
            let mut worlds = self.inner.registry.worlds.lock().unwrap();
            if let Some(e) = worlds.get(&d.name) {
                if e.status != WorldStatus::Removed {
                    return Err(MwError::new(
                        ErrorKind::WorldExists,
                        format!("world is {} here", e.status.name()),
                    )
                    .in_world(&d.name));
                }
            }
            worlds.insert(
                d.name.clone(),
                WorldEntry {
                    descriptor: d.clone(),
                    status: WorldStatus::Initializing,
                    epoch: None,
                    cause: None,
                    cancel: Arc::clone(&cancel),
                    acceptor: None,
                },
            );
        }
        let timeout = timeout.unwrap_or(self.inner.config.init_timeout);
        let inner = Arc::clone(&self.inner);
        let name = d.name.clone();
        let thread = thread::Builder::new()
            .name(format!("mw-init-{name}"))
            .spawn(move || rendezvous(&inner, d, timeout, cancel))
            .map_err(|e| MwError::protocol(format!("cannot spawn initializer: {e}")))?;
        Ok(InitTicket {
            world: name,
            thread: Some(thread),
        })
    }

    /// Leaves a world: pending operations end with `Aborted`, links close
    /// with a BYE and the world's store keys are deleted. Repeating it is a
    /// no-op.
    pub fn remove_world(&self, name: &str) -> Result<()> {
        let (status, epoch, store_addr, acceptor, cancel) = {
            let worlds = self.inner.registry.worlds.lock().unwrap();
            let e = worlds
                .get(name)
                .ok_or_else(|| MwError::unknown_world(name))?;
            (
                e.status,
                e.epoch,
                e.descriptor.store_addr.clone(),
                e.acceptor.clone(),
                Arc::clone(&e.cancel),
            )
        };
        let reg = &self.inner.registry;
        match status {
            WorldStatus::Removed => return Ok(()),
            WorldStatus::Initializing => {
                cancel.store(true, Ordering::SeqCst);
                let why = MwError::aborted(name, "removed during initialization");
                reg.transition(name, epoch, WorldStatus::Broken, Some(&why));
                reg.transition(name, epoch, WorldStatus::Removed, None);
            }
            _ => {
                if reg
                    .transition(name, epoch, WorldStatus::Removed, None)
                    .is_none()
                {
                    // Raced with another transition; retry from the new state.
                    return self.remove_world(name);
                }
            }
        }
        info!("removing world {name}");
        if let Some(a) = acceptor {
            a.store(true, Ordering::SeqCst);
        }
        if let Some(epoch) = epoch {
            self.inner.comm.command(Command::Remove {
                name: name.to_string(),
                epoch,
            });
            self.inner.watchdog.unwatch(name, epoch);
            if let Err(e) = cleanup_store(&store_addr, name, epoch) {
                debug!("store cleanup for {name} failed: {e}");
            }
        }
        Ok(())
    }

    /// Quarantines a world: pending operations fail with `BrokenWorld`
    /// carrying `cause`, and new submissions are refused. Other worlds are
    /// untouched. Marking an already broken or removed world does nothing.
    pub fn mark_broken(&self, name: &str, cause: MwError) -> Result<()> {
        mark_broken(&self.inner, name, None, cause)
    }

    /// Simulates this process dying: heartbeats stop and every socket is
    /// dropped without a BYE. The manager is unusable afterwards.
    pub fn crash(&self) {
        self.inner.closed.store(true, Ordering::SeqCst);
        self.inner.watchdog.stop();
        self.inner.comm.command(Command::Crash);
        for e in self.inner.registry.worlds.lock().unwrap().values() {
            e.cancel.store(true, Ordering::SeqCst);
            if let Some(a) = &e.acceptor {
                a.store(true, Ordering::SeqCst);
            }
        }
    }

    /// Removes every world and stops the background threads.
    pub fn shutdown(&self) {
        if self.inner.closed.swap(true, Ordering::SeqCst) {
            return;
        }
        let names: Vec<String> = self
            .inner
            .registry
            .worlds
            .lock()
            .unwrap()
            .keys()
            .cloned()
            .collect();
        for n in names {
            let _ = self.remove_world(&n);
        }
        self.inner.watchdog.stop();
    }
}

impl Drop for Inner {
    fn drop(&mut self) {
        self.closed.store(true, Ordering::SeqCst);
        self.stop.store(true, Ordering::SeqCst);
        self.watchdog.stop();
        for e in self.registry.worlds.lock().unwrap().values() {
            e.cancel.store(true, Ordering::SeqCst);
            if let Some(a) = &e.acceptor {
                a.store(true, Ordering::SeqCst);
            }
        }
        self.comm.shutdown();
        if let Some(h) = self.supervisor.lock().unwrap().take() {
            if h.thread().id() != thread::current().id() {
                let _ = h.join();
            }
        }
    }
}

fn mark_broken(inner: &Inner, name: &str, epoch: Option<u64>, cause: MwError) -> Result<()> {
    let (epoch, cancel) = {
        let worlds = inner.registry.worlds.lock().unwrap();
        let e = worlds
            .get(name)
            .ok_or_else(|| MwError::unknown_world(name))?;
        if epoch.is_some() && e.epoch != epoch {
            return Ok(());
        }
        (e.epoch, Arc::clone(&e.cancel))
    };
    if inner
        .registry
        .transition(name, epoch, WorldStatus::Broken, Some(&cause))
        .is_none()
    {
        return Ok(());
    }
    warn!("world {name} is broken: {cause}");
    cancel.store(true, Ordering::SeqCst);
    if let Some(epoch) = epoch {
        inner.comm.command(Command::Abort {
            name: name.to_string(),
            epoch,
            err: MwError::broken(name, cause.to_string()),
        });
        inner.watchdog.unwatch(name, epoch);
    }
    Ok(())
}

fn supervise(rx: Receiver<Suspicion>, inner: std::sync::Weak<Inner>, stop: Arc<AtomicBool>) {
    while !stop.load(Ordering::SeqCst) {
        match rx.recv_timeout(Duration::from_millis(100)) {
            Ok(s) => {
                let Some(inner) = inner.upgrade() else {
                    return;
                };
                debug!(
                    "suspicion for {} epoch {}: {}",
                    s.world,
                    s.epoch,
                    s.describe()
                );
                let _ = mark_broken(&inner, &s.world, Some(s.epoch), cause_of(&s));
            }
            Err(RecvTimeoutError::Timeout) => {}
            Err(RecvTimeoutError::Disconnected) => return,
        }
    }
}

fn cleanup_store(addr: &str, name: &str, epoch: u64) -> Result<()> {
    let mut c = StoreClient::connect_with_timeout(addr, CLEANUP_TIMEOUT)?;
    c.delete_prefix(&keys::world_prefix(name, epoch))?;
    c.delete_prefix(&keys::heartbeat_prefix(name, epoch))?;
    let current = c.get_counter(&epoch_key(name))?;
    if current <= epoch as i64 {
        c.set(&epoch_key(name), &(epoch as i64 + 1).to_le_bytes())?;
    }
    Ok(())
}

fn spawn_acceptor(
    listener: Listener,
    epoch: u64,
    tx: Sender<Command>,
    stop: Arc<AtomicBool>,
) -> Result<()> {
    let name = listener.world().to_string();
    thread::Builder::new()
        .name(format!("mw-accept-{name}"))
        .spawn(move || {
            let mut nap = ACCEPT_POLL.0;
            while !stop.load(Ordering::SeqCst) {
                match listener.try_accept() {
                    Ok(Some(conn)) => {
                        nap = ACCEPT_POLL.0;
                        if tx
                            .send(Command::NewLink {
                                name: name.clone(),
                                epoch,
                                conn,
                            })
                            .is_err()
                        {
                            return;
                        }
                    }
                    Ok(None) => backoff(&mut nap, ACCEPT_POLL.1),
                    Err(e) => {
                        debug!("world {name}: rejected incoming link: {e}");
                        backoff(&mut nap, ACCEPT_POLL.1);
                    }
                }
            }
        })
        .map(|_| ())
        .map_err(|e| MwError::protocol(format!("cannot spawn acceptor: {e}")))
}

/// Rendezvous bookkeeping so a failed attempt can undo its own keys.
#[derive(Default)]
struct Undo {
    claimed: bool,
    addr_set: bool,
    joined: bool,
}

fn rendezvous(
    inner: &Inner,
    d: WorldDescriptor,
    timeout: Duration,
    cancel: Arc<AtomicBool>,
) -> Result<()> {
    let started = Instant::now();
    let deadline = started + timeout;
    let name = d.name.clone();
    let fail = |err: MwError, epoch: Option<u64>| -> Result<()> {
        let err = err.in_world(&name);
        if let Some(a) = inner
            .registry
            .worlds
            .lock()
            .unwrap()
            .get(&name)
            .and_then(|e| e.acceptor.clone())
        {
            a.store(true, Ordering::SeqCst);
        }
        inner
            .registry
            .transition(&name, epoch, WorldStatus::Broken, Some(&err));
        Err(err)
    };

    let client_timeout = timeout
        .min(DEFAULT_CLIENT_TIMEOUT)
        .max(Duration::from_millis(100));
    let mut store = match StoreClient::connect_with_timeout(&d.store_addr, client_timeout) {
        Ok(s) => s,
        Err(e) => return fail(e, None),
    };
    let epoch = match store.get_counter(&epoch_key(&name)) {
        Ok(v) => v.max(0) as u64,
        Err(e) => return fail(e, None),
    };
    {
        let mut worlds = inner.registry.worlds.lock().unwrap();
        match worlds.get_mut(&name) {
            Some(e) if Arc::ptr_eq(&e.cancel, &cancel) && e.status == WorldStatus::Initializing => {
                e.epoch = Some(epoch);
            }
            _ => return Err(MwError::aborted(&name, "initialization cancelled")),
        }
    }
    inner.registry.emit(StatusEvent {
        world: name.clone(),
        epoch,
        from: None,
        to: WorldStatus::Initializing,
        at: started,
        cause: None,
    });

    let listener = match Listener::bind(&d.my_listen_addr, &name, d.my_rank) {
        Ok(l) => l,
        Err(e) => return fail(e, Some(epoch)),
    };
    let published = format!(
        "{}:{}",
        host_of(&d.my_listen_addr),
        listener.local_addr().port()
    );
    let acceptor_stop = Arc::new(AtomicBool::new(false));
    if let Some(e) = inner.registry.worlds.lock().unwrap().get_mut(&name) {
        e.acceptor = Some(Arc::clone(&acceptor_stop));
    }
    if let Err(e) = spawn_acceptor(
        listener,
        epoch,
        inner.comm.command_sender(),
        Arc::clone(&acceptor_stop),
    ) {
        return fail(e, Some(epoch));
    }

    let mut undo = Undo::default();
    let res = join_barrier(
        &mut store, &d, epoch, &published, deadline, &cancel, &mut undo,
    );
    let peers = match res {
        Ok(p) => p,
        Err(e) => {
            acceptor_stop.store(true, Ordering::SeqCst);
            undo_keys(&mut store, &d, epoch, &undo);
            return fail(e, Some(epoch));
        }
    };

    inner.comm.command(Command::AddWorld {
        name: name.clone(),
        epoch,
        my_rank: d.my_rank,
        size: d.size,
        peers,
    });
    if inner
        .registry
        .transition(&name, Some(epoch), WorldStatus::Ready, None)
        .is_none()
    {
        acceptor_stop.store(true, Ordering::SeqCst);
        inner.comm.command(Command::Remove {
            name: name.clone(),
            epoch,
        });
        return Err(MwError::aborted(
            &name,
            "world changed state during initialization",
        ));
    }
    inner.watchdog.watch(WatchedWorld {
        name: name.clone(),
        epoch,
        my_rank: d.my_rank,
        size: d.size,
        store_addr: d.store_addr.clone(),
    });
    info!(
        "world {name} epoch {epoch} ready as rank {}/{} after {:?}",
        d.my_rank,
        d.size,
        started.elapsed()
    );
    Ok(())
}

fn join_barrier(
    store: &mut StoreClient,
    d: &WorldDescriptor,
    epoch: u64,
    published: &str,
    deadline: Instant,
    cancel: &AtomicBool,
    undo: &mut Undo,
) -> Result<Vec<String>> {
    let name = &d.name;
    let size_key = keys::size(name, epoch);
    let size_text = d.size.to_string();
    let check_size = |v: &[u8]| -> Result<()> {
        if v != size_text.as_bytes() {
            return Err(MwError::new(
                ErrorKind::SizeMismatch,
                format!(
                    "world size is {}, this member expects {}",
                    String::from_utf8_lossy(v),
                    d.size
                ),
            ));
        }
        Ok(())
    };
    match store.get(&size_key)? {
        Some(v) => check_size(&v)?,
        None => store.set(&size_key, size_text.as_bytes())?,
    }

    let claim = store.add(&keys::rank_claim(name, epoch, d.my_rank), 1)?;
    undo.claimed = true;
    let addr_key = keys::rank_addr(name, epoch, d.my_rank);
    if claim > 1 {
        let existing = store.get(&addr_key)?;
        if existing.as_deref() != Some(published.as_bytes()) {
            return Err(MwError::new(
                ErrorKind::RankConflict,
                format!(
                    "rank {} already claimed by {}",
                    d.my_rank,
                    existing
                        .map(|v| String::from_utf8_lossy(&v).into_owned())
                        .unwrap_or_else(|| "another member".into())
                ),
            ));
        }
    }
    store.set(&addr_key, published.as_bytes())?;
    undo.addr_set = true;
    store.add(&keys::joined(name, epoch), 1)?;
    undo.joined = true;

    let joined_key = keys::joined(name, epoch);
    let mut nap = JOIN_POLL.0;
    loop {
        if cancel.load(Ordering::SeqCst) {
            return Err(MwError::aborted(name, "initialization cancelled"));
        }
        let joined = store.get_counter(&joined_key)?;
        if joined >= d.size as i64 {
            break;
        }
        if Instant::now() >= deadline {
            return Err(MwError::timeout(format!(
                "only {joined} of {} members arrived",
                d.size
            )));
        }
        backoff(&mut nap, JOIN_POLL.1);
    }

    let mut peers = Vec::with_capacity(d.size as usize);
    for r in 0..d.size {
        let left = deadline.saturating_duration_since(Instant::now());
        if left.is_zero() {
            return Err(MwError::timeout(format!(
                "address of rank {r} never appeared"
            )));
        }
        let v = store.wait(&keys::rank_addr(name, epoch, r), left)?;
        let addr = String::from_utf8(v)
            .map_err(|_| MwError::protocol(format!("rank {r} published a non-UTF-8 address")))?;
        peers.push(addr);
    }
    if let Some(v) = store.get(&size_key)? {
        check_size(&v)?;
    }
    Ok(peers)
}

fn undo_keys(store: &mut StoreClient, d: &WorldDescriptor, epoch: u64, undo: &Undo) {
    let name = &d.name;
    let res = (|| -> Result<()> {
        if undo.joined {
            store.add(&keys::joined(name, epoch), -1)?;
        }
        if undo.addr_set {
            store.delete(&keys::rank_addr(name, epoch, d.my_rank))?;
        }
        if undo.claimed {
            store.add(&keys::rank_claim(name, epoch, d.my_rank), -1)?;
        }
        Ok(())
    })();
    if let Err(e) = res {
        debug!("could not undo rendezvous keys of {name}: {e}");
    }
}
