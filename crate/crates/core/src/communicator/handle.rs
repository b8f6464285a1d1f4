use std::sync::atomic::{AtomicU32, AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

use crate::collectives::{CollectiveKind, WorkResult};
use crate::error::{MwError, Result};

/// Snapshot of a handle's state.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum WorkStatus {
    Pending,
    Done,
    Failed(MwError),
}

impl WorkStatus {
    pub fn is_terminal(&self) -> bool {
        !matches!(self, WorkStatus::Pending)
    }
}

enum Slot {
    Pending,
    Done(WorkResult),
    Failed(MwError),
}

/// Wakes `wait_any` callers whenever some handle of a communicator
/// completes.
#[derive(Default)]
pub(crate) struct Notifier {
    generation: Mutex<u64>,
    cv: Condvar,
}

impl Notifier {
    fn bump(&self) {
        *self.generation.lock().unwrap() += 1;
        self.cv.notify_all();
    }

    pub(crate) fn generation(&self) -> u64 {
        *self.generation.lock().unwrap()
    }

    /// Waits until the generation differs from `seen` or `until` passes.
    pub(crate) fn wait_change(&self, seen: u64, until: Option<Instant>) {
        let mut g = self.generation.lock().unwrap();
        while *g == seen {
            match until {
                None => g = self.cv.wait(g).unwrap(),
                Some(t) => {
                    let now = Instant::now();
                    if now >= t {
                        return;
                    }
                    g = self.cv.wait_timeout(g, t - now).unwrap().0;
                }
            }
        }
    }
}

struct Inner {
    id: u64,
    world: String,
    kind: CollectiveKind,
    call_seq: u64,
    slot: Mutex<Slot>,
    cv: Condvar,
    notifier: Arc<Notifier>,
    completions: AtomicU32,
    done_iteration: AtomicU64,
    progress_iteration: AtomicU64,
}

/// A pollable token for one submitted operation. Clones refer to the same
/// operation.
#[derive(Clone)]
pub struct WorkHandle {
    inner: Arc<Inner>,
}

impl std::fmt::Debug for WorkHandle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("WorkHandle")
            .field("id", &self.inner.id)
            .field("world", &self.inner.world)
            .field("kind", &self.inner.kind)
            .field("status", &self.poll())
            .finish()
    }
}

impl WorkHandle {
    pub(crate) fn new(
        id: u64,
        world: &str,
        kind: CollectiveKind,
        call_seq: u64,
        notifier: Arc<Notifier>,
    ) -> WorkHandle {
        WorkHandle {
            inner: Arc::new(Inner {
                id,
                world: world.to_string(),
                kind,
                call_seq,
                slot: Mutex::new(Slot::Pending),
                cv: Condvar::new(),
                notifier,
                completions: AtomicU32::new(0),
                done_iteration: AtomicU64::new(0),
                progress_iteration: AtomicU64::new(0),
            }),
        }
    }

    pub fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn world(&self) -> &str {
        &self.inner.world
    }

    pub fn kind(&self) -> CollectiveKind {
        self.inner.kind
    }

    /// Position of this operation among the ones of its class submitted to
    /// the same world.
    pub fn call_seq(&self) -> u64 {
        self.inner.call_seq
    }

    /// Non-blocking status snapshot.
    pub fn poll(&self) -> WorkStatus {
        match &*self.inner.slot.lock().unwrap() {
            Slot::Pending => WorkStatus::Pending,
            Slot::Done(_) => WorkStatus::Done,
            Slot::Failed(e) => WorkStatus::Failed(e.clone()),
        }
    }

    pub fn is_done(&self) -> bool {
        self.poll().is_terminal()
    }

    /// Blocks until the operation finishes or `timeout` passes. A timeout
    /// only ends the observation: the operation stays pending and can be
    /// waited on again.
    pub fn wait(&self, timeout: Option<Duration>) -> Result<WorkResult> {
        let until = timeout.map(|t| Instant::now() + t);
        let mut slot = self.inner.slot.lock().unwrap();
        loop {
            match &*slot {
                Slot::Done(r) => return Ok(r.clone()),
                Slot::Failed(e) => return Err(e.clone()),
                Slot::Pending => {}
            }
            match until {
                None => slot = self.inner.cv.wait(slot).unwrap(),
                Some(t) => {
                    let now = Instant::now();
                    if now >= t {
                        return Err(MwError::timeout(format!(
                            "{} #{} still pending",
                            self.inner.kind.name(),
                            self.inner.id
                        ))
                        .in_world(&self.inner.world));
                    }
                    slot = self.inner.cv.wait_timeout(slot, t - now).unwrap().0;
                }
            }
        }
    }

    /// How many terminal transitions this handle has seen (0 or 1).
    pub fn completion_count(&self) -> u32 {
        self.inner.completions.load(Ordering::SeqCst)
    }

    /// Poller iteration in which the handle completed (0 while pending).
    pub fn done_iteration(&self) -> u64 {
        self.inner.done_iteration.load(Ordering::SeqCst)
    }

    /// Poller iteration in which the last frame of this operation was
    /// read or written.
    pub fn progress_iteration(&self) -> u64 {
        self.inner.progress_iteration.load(Ordering::SeqCst)
    }

    pub(crate) fn note_progress(&self, iteration: u64) {
        self.inner
            .progress_iteration
            .store(iteration, Ordering::SeqCst);
    }

    /// Moves the handle to its terminal state. Returns false (and changes
    /// nothing) if it already finished.
    pub(crate) fn complete(&self, outcome: Result<WorkResult>, iteration: u64) -> bool {
        {
            let mut slot = self.inner.slot.lock().unwrap();
            if !matches!(*slot, Slot::Pending) {
                return false;
            }
            *slot = match outcome {
                Ok(r) => Slot::Done(r),
                Err(e) => Slot::Failed(e),
            };
            self.inner.done_iteration.store(iteration, Ordering::SeqCst);
            self.inner.completions.fetch_add(1, Ordering::SeqCst);
        }
        self.inner.cv.notify_all();
        self.inner.notifier.bump();
        true
    }

    pub(crate) fn same_notifier(&self, n: &Arc<Notifier>) -> bool {
        Arc::ptr_eq(&self.inner.notifier, n)
    }
}
