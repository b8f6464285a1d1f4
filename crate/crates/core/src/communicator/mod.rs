//! The non-blocking user surface.
//!
//! `submit` validates a call against the registry, assigns it a call
//! sequence number and hands it to the poller thread; the returned
//! [`WorkHandle`] can be polled or waited on. The blocking helpers are thin
//! wrappers that submit and wait.

mod handle;
pub(crate) mod poller;

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::mpsc::{self, Sender};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

pub use handle::{WorkHandle, WorkStatus};

use crate::collectives::{CollectiveCall, Kernel, OpClass, WorkResult};
use crate::config::Config;
use crate::error::{MwError, Result};
use crate::manager::Registry;
use crate::types::{Buffer, DType, Rank, ReduceOp};
use crate::watchdog::Suspicion;
use handle::Notifier;
use poller::{Command, Poller, PollerConfig, PollerShared};

struct Inner {
    registry: Arc<Registry>,
    tx: Sender<Command>,
    /// Call sequence per (world, epoch, class). Held while enqueueing so
    /// that enqueue order matches sequence order.
    order: Mutex<HashMap<(String, u64, OpClass), u64>>,
    next_id: AtomicU64,
    notifier: Arc<Notifier>,
    shared: Arc<PollerShared>,
    thread: Mutex<Option<JoinHandle<()>>>,
}

/// Handle to the world communicator. Clones share one poller.
#[derive(Clone)]
pub struct Communicator {
    inner: Arc<Inner>,
}

impl std::fmt::Debug for Communicator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Communicator")
            .field("poller_iterations", &self.poller_iterations())
            .finish()
    }
}

impl Communicator {
    pub(crate) fn start(
        registry: Arc<Registry>,
        config: &Config,
        suspicions: Sender<Suspicion>,
    ) -> Result<Communicator> {
        let (tx, rx) = mpsc::channel();
        let shared = Arc::new(PollerShared::default());
        let poller = Poller::new(
            rx,
            tx.clone(),
            Arc::clone(&shared),
            PollerConfig {
                mode: config.poller,
                op_timeout: config.op_timeout,
            },
            suspicions,
        );
        let thread = thread::Builder::new()
            .name("mw-poller".into())
            .spawn(move || poller.run())
            .map_err(|e| MwError::protocol(format!("cannot spawn poller: {e}")))?;
        Ok(Communicator {
            inner: Arc::new(Inner {
                registry,
                tx,
                order: Mutex::new(HashMap::new()),
                next_id: AtomicU64::new(1),
                notifier: Arc::new(Notifier::default()),
                shared,
                thread: Mutex::new(Some(thread)),
            }),
        })
    }

    /// True if both handles refer to the same communicator.
    pub fn same_as(&self, other: &Communicator) -> bool {
        Arc::ptr_eq(&self.inner, &other.inner)
    }

    pub(crate) fn command(&self, cmd: Command) {
        let _ = self.inner.tx.send(cmd);
    }

    pub(crate) fn command_sender(&self) -> Sender<Command> {
        self.inner.tx.clone()
    }

    pub(crate) fn link_ids(&self, world: &str) -> Vec<(Rank, u64)> {
        self.inner
            .shared
            .links
            .lock()
            .unwrap()
            .get(world)
            .map(|m| m.iter().map(|(r, id)| (*r, *id)).collect())
            .unwrap_or_default()
    }

    pub(crate) fn shutdown(&self) {
        let _ = self.inner.tx.send(Command::Shutdown);
        let h = self.inner.thread.lock().unwrap().take();
        if let Some(h) = h {
            let _ = h.join();
        }
    }

    /// Number of poller iterations so far.
    pub fn poller_iterations(&self) -> u64 {
        self.inner.shared.iterations.load(Ordering::Relaxed)
    }

    /// CPU time consumed by the poller thread (sampled every few hundred
    /// iterations).
    pub fn poller_cpu_time(&self) -> Duration {
        Duration::from_nanos(self.inner.shared.cpu_ns.load(Ordering::Relaxed))
    }

    /// Queues `call` for the poller and returns immediately.
    ///
    /// Fails with `UnknownWorld` if the world is not registered and ready,
    /// `BrokenWorld` if it is broken, and `Protocol` for invalid arguments.
    pub fn submit(&self, call: CollectiveCall) -> Result<WorkHandle> {
        let world = call.world().to_string();
        let kind = call.kind();
        let target = self.inner.registry.target(&world)?;
        let (kernel, plan) =
            Kernel::start(call, target.my_rank, target.size).map_err(|e| e.in_world(&world))?;
        let id = self.inner.next_id.fetch_add(1, Ordering::Relaxed);
        let mut order = self.inner.order.lock().unwrap();
        let seq = order
            .entry((world.clone(), target.epoch, kind.class()))
            .or_insert(0);
        let handle = WorkHandle::new(id, &world, kind, *seq, Arc::clone(&self.inner.notifier));
        *seq += 1;
        self.inner
            .tx
            .send(Command::Submit {
                name: world.clone(),
                epoch: target.epoch,
                kernel,
                plan,
                handle: handle.clone(),
            })
            .map_err(|_| MwError::aborted(&world, "communicator is shut down"))?;
        Ok(handle)
    }

    /// Waits until at least one of `handles` is terminal and returns its
    /// index. `Timeout` if none finishes in time.
    pub fn wait_any(&self, handles: &[WorkHandle], timeout: Option<Duration>) -> Result<usize> {
        if handles.is_empty() {
            return Err(MwError::protocol("wait_any on an empty set"));
        }
        if handles
            .iter()
            .any(|h| !h.same_notifier(&self.inner.notifier))
        {
            return Err(MwError::protocol(
                "handle was issued by another communicator",
            ));
        }
        let until = timeout.map(|t| Instant::now() + t);
        loop {
            let seen = self.inner.notifier.generation();
            if let Some(i) = handles.iter().position(|h| h.is_done()) {
                return Ok(i);
            }
            if until.is_some_and(|t| Instant::now() >= t) {
                return Err(MwError::timeout("no handle finished in time"));
            }
            self.inner.notifier.wait_change(seen, until);
        }
    }

    pub fn isend(&self, world: &str, dst: Rank, buf: Buffer) -> Result<WorkHandle> {
        self.submit(CollectiveCall::Send {
            world: world.into(),
            dst,
            buf,
        })
    }

    pub fn irecv(&self, world: &str, src: Rank, dtype: DType, len: usize) -> Result<WorkHandle> {
        self.submit(CollectiveCall::Recv {
            world: world.into(),
            src,
            dtype,
            len,
        })
    }

    pub fn ibroadcast(&self, world: &str, root: Rank, buf: Buffer) -> Result<WorkHandle> {
        self.submit(CollectiveCall::Broadcast {
            world: world.into(),
            root,
            buf,
        })
    }

    pub fn iall_reduce(&self, world: &str, buf: Buffer, op: ReduceOp) -> Result<WorkHandle> {
        self.submit(CollectiveCall::AllReduce {
            world: world.into(),
            buf,
            op,
        })
    }

    pub fn ireduce(
        &self,
        world: &str,
        root: Rank,
        buf: Buffer,
        op: ReduceOp,
    ) -> Result<WorkHandle> {
        self.submit(CollectiveCall::Reduce {
            world: world.into(),
            root,
            buf,
            op,
        })
    }

    pub fn iall_gather(&self, world: &str, buf: Buffer) -> Result<WorkHandle> {
        self.submit(CollectiveCall::AllGather {
            world: world.into(),
            buf,
        })
    }

    pub fn igather(&self, world: &str, root: Rank, buf: Buffer) -> Result<WorkHandle> {
        self.submit(CollectiveCall::Gather {
            world: world.into(),
            root,
            buf,
        })
    }

    pub fn iscatter(
        &self,
        world: &str,
        root: Rank,
        parts: Vec<Buffer>,
        dtype: DType,
        len: usize,
    ) -> Result<WorkHandle> {
        self.submit(CollectiveCall::Scatter {
            world: world.into(),
            root,
            parts,
            dtype,
            len,
        })
    }

    pub fn send(&self, world: &str, dst: Rank, buf: Buffer) -> Result<()> {
        self.isend(world, dst, buf)?.wait(None).map(|_| ())
    }

    pub fn recv(&self, world: &str, src: Rank, dtype: DType, len: usize) -> Result<Buffer> {
        let r = self.irecv(world, src, dtype, len)?.wait(None)?;
        expect_buffer(r)
    }

    pub fn broadcast(&self, world: &str, root: Rank, buf: Buffer) -> Result<Buffer> {
        let r = self.ibroadcast(world, root, buf)?.wait(None)?;
        expect_buffer(r)
    }

    pub fn all_reduce(&self, world: &str, buf: Buffer, op: ReduceOp) -> Result<Buffer> {
        let r = self.iall_reduce(world, buf, op)?.wait(None)?;
        expect_buffer(r)
    }

    /// The reduction at the root, `None` elsewhere.
    pub fn reduce(
        &self,
        world: &str,
        root: Rank,
        buf: Buffer,
        op: ReduceOp,
    ) -> Result<Option<Buffer>> {
        Ok(self.ireduce(world, root, buf, op)?.wait(None)?.buffer())
    }

    pub fn all_gather(&self, world: &str, buf: Buffer) -> Result<Vec<Buffer>> {
        let r = self.iall_gather(world, buf)?.wait(None)?;
        r.buffers()
            .ok_or_else(|| MwError::protocol("all_gather produced no list"))
    }

    /// Every rank's buffer at the root, `None` elsewhere.
    pub fn gather(&self, world: &str, root: Rank, buf: Buffer) -> Result<Option<Vec<Buffer>>> {
        Ok(self.igather(world, root, buf)?.wait(None)?.buffers())
    }

    pub fn scatter(
        &self,
        world: &str,
        root: Rank,
        parts: Vec<Buffer>,
        dtype: DType,
        len: usize,
    ) -> Result<Buffer> {
        let r = self.iscatter(world, root, parts, dtype, len)?.wait(None)?;
        expect_buffer(r)
    }
}

fn expect_buffer(r: WorkResult) -> Result<Buffer> {
    r.buffer()
        .ok_or_else(|| MwError::protocol("operation produced no buffer"))
}
