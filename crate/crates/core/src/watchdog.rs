//! Heartbeat-based liveness monitor.
//!
//! For every watched world the watchdog bumps this member's counter at
//! `heartbeat/<name>/<epoch>/<rank>` once per heartbeat interval and, once
//! per scan interval, reads every peer's counter. Staleness is measured
//! with the local monotonic clock from the last observed increase, so peer
//! clocks never matter. A world is reported at most once per epoch.

use std::collections::HashMap;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::Sender;
use std::sync::{Arc, Condvar, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use log::{debug, info};

use crate::config::{env_millis, HEARTBEAT_ENV, LIVENESS_ENV, SCAN_ENV};
use crate::error::{MwError, Result};
use crate::store::{keys, StoreClient};
use crate::types::Rank;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WatchdogConfig {
    pub heartbeat_interval: Duration,
    pub liveness_timeout: Duration,
    pub scan_interval: Duration,
}

impl Default for WatchdogConfig {
    fn default() -> Self {
        WatchdogConfig {
            heartbeat_interval: Duration::from_millis(1000),
            liveness_timeout: Duration::from_millis(3000),
            scan_interval: Duration::from_millis(500),
        }
    }
}

impl WatchdogConfig {
    pub fn new(
        heartbeat_interval: Duration,
        liveness_timeout: Duration,
        scan_interval: Duration,
    ) -> Result<Self> {
        let c = WatchdogConfig {
            heartbeat_interval,
            liveness_timeout,
            scan_interval,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if self.heartbeat_interval.is_zero() || self.scan_interval.is_zero() {
            return Err(MwError::protocol("watchdog intervals must be positive"));
        }
        if self.liveness_timeout < self.heartbeat_interval * 2 {
            return Err(MwError::protocol(format!(
                "liveness timeout {:?} is shorter than two heartbeat intervals ({:?})",
                self.liveness_timeout, self.heartbeat_interval
            )));
        }
        Ok(())
    }

    /// Defaults overridden by `MW_HEARTBEAT_INTERVAL_MS`,
    /// `MW_LIVENESS_TIMEOUT_MS` and `MW_SCAN_INTERVAL_MS`.
    pub fn from_env() -> Result<Self> {
        let d = WatchdogConfig::default();
        let c = WatchdogConfig {
            heartbeat_interval: env_millis(HEARTBEAT_ENV)?.unwrap_or(d.heartbeat_interval),
            liveness_timeout: env_millis(LIVENESS_ENV)?.unwrap_or(d.liveness_timeout),
            scan_interval: env_millis(SCAN_ENV)?.unwrap_or(d.scan_interval),
        };
        c.validate()?;
        Ok(c)
    }

    /// Worst-case time from a member's death to its report.
    pub fn detection_bound(&self) -> Duration {
        self.liveness_timeout + self.scan_interval
    }
}

/// Monotonic time source, as an offset from an arbitrary origin.
pub trait Clock: Send + Sync + 'static {
    fn now(&self) -> Duration;
}

pub struct MonotonicClock {
    origin: Instant,
}

impl MonotonicClock {
    pub fn new() -> Self {
        MonotonicClock {
            origin: Instant::now(),
        }
    }
}

impl Default for MonotonicClock {
    fn default() -> Self {
        Self::new()
    }
}

impl Clock for MonotonicClock {
    fn now(&self) -> Duration {
        self.origin.elapsed()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SuspicionReason {
    /// A peer's heartbeat stopped advancing.
    Stale { silent_for: Duration },
    /// This member could not reach the store for a whole liveness window.
    StoreUnreachable { for_at_least: Duration },
    /// The transport lost a link or saw a protocol violation.
    Transport(MwError),
}

/// A report that a world should be considered broken.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Suspicion {
    pub world: String,
    pub epoch: u64,
    /// The suspected peer, if one is known.
    pub rank: Option<Rank>,
    pub reason: SuspicionReason,
}

impl Suspicion {
    pub fn describe(&self) -> String {
        match (&self.reason, self.rank) {
            (SuspicionReason::Stale { silent_for }, Some(r)) => {
                format!(
                    "rank {r} heartbeat silent for {} ms",
                    silent_for.as_millis()
                )
            }
            (SuspicionReason::Stale { silent_for }, None) => {
                format!("heartbeat silent for {} ms", silent_for.as_millis())
            }
            (SuspicionReason::StoreUnreachable { for_at_least }, _) => {
                format!("store unreachable for {} ms", for_at_least.as_millis())
            }
            (SuspicionReason::Transport(e), Some(r)) => format!("link to rank {r}: {e}"),
            (SuspicionReason::Transport(e), None) => e.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WatchedWorld {
    pub name: String,
    pub epoch: u64,
    pub my_rank: Rank,
    pub size: u32,
    pub store_addr: String,
}

struct Shared {
    config: WatchdogConfig,
    clock: Arc<dyn Clock>,
    tx: Mutex<Sender<Suspicion>>,
    worlds: Mutex<Vec<WatchedWorld>>,
    stop: AtomicBool,
    wake: Mutex<bool>,
    wake_cv: Condvar,
}

/// A running watchdog thread.
pub struct Watchdog {
    shared: Arc<Shared>,
    thread: Mutex<Option<JoinHandle<()>>>,
}

impl Watchdog {
    pub fn start(config: WatchdogConfig, tx: Sender<Suspicion>) -> Result<Watchdog> {
        Self::start_with_clock(config, tx, Arc::new(MonotonicClock::new()))
    }

    pub fn start_with_clock(
        config: WatchdogConfig,
        tx: Sender<Suspicion>,
        clock: Arc<dyn Clock>,
    ) -> Result<Watchdog> {
        config.validate()?;
        let shared = Arc::new(Shared {
            config,
            clock,
            tx: Mutex::new(tx),
            worlds: Mutex::new(Vec::new()),
            stop: AtomicBool::new(false),
            wake: Mutex::new(false),
            wake_cv: Condvar::new(),
        });
        let s = Arc::clone(&shared);
        let thread = thread::Builder::new()
            .name("mw-watchdog".into())
            .spawn(move || Runner::new(s).run())
            .map_err(|e| MwError::protocol(format!("cannot spawn watchdog: {e}")))?;
        Ok(Watchdog {
            shared,
            thread: Mutex::new(Some(thread)),
        })
    }

    pub fn config(&self) -> WatchdogConfig {
        self.shared.config
    }

    /// Starts heartbeating and scanning `w`. Watching the same (name,
    /// epoch) twice is a no-op.
    pub fn watch(&self, w: WatchedWorld) {
        {
            let mut worlds = self.shared.worlds.lock().unwrap();
            if worlds
                .iter()
                .any(|x| x.name == w.name && x.epoch == w.epoch)
            {
                return;
            }
            worlds.push(w);
        }
        self.poke();
    }

    pub fn unwatch(&self, name: &str, epoch: u64) {
        self.shared
            .worlds
            .lock()
            .unwrap()
            .retain(|x| !(x.name == name && x.epoch == epoch));
        self.poke();
    }

    pub fn watched(&self) -> Vec<WatchedWorld> {
        self.shared.worlds.lock().unwrap().clone()
    }

    fn poke(&self) {
        *self.shared.wake.lock().unwrap() = true;
        self.shared.wake_cv.notify_all();
    }

    /// Stops publishing and scanning. Heartbeat keys stay in the store, so
    /// to peers this looks exactly like a crash.
    pub fn stop(&self) {
        self.shared.stop.store(true, Ordering::SeqCst);
        self.poke();
        if let Some(h) = self.thread.lock().unwrap().take() {
            let _ = h.join();
        }
    }

    pub fn is_running(&self) -> bool {
        !self.shared.stop.load(Ordering::SeqCst)
    }
}

impl Drop for Watchdog {
    fn drop(&mut self) {
        self.stop();
    }
}

struct PeerTrack {
    counter: i64,
    last_change: Duration,
}

struct Track {
    world: WatchedWorld,
    peers: HashMap<Rank, PeerTrack>,
    prev_scan: Duration,
    /// A scan failed since the last successful one.
    blind: bool,
    reported: bool,
}

struct StoreConn {
    client: Option<StoreClient>,
    failing_since: Option<Duration>,
}

struct Runner {
    shared: Arc<Shared>,
    tracks: HashMap<(String, u64), Track>,
    stores: HashMap<String, StoreConn>,
}

impl Runner {
    fn new(shared: Arc<Shared>) -> Runner {
        Runner {
            shared,
            tracks: HashMap::new(),
            stores: HashMap::new(),
        }
    }

    fn now(&self) -> Duration {
        self.shared.clock.now()
    }

    fn run(mut self) {
        let cfg = self.shared.config;
        let start = self.now();
        let mut next_beat = start + cfg.heartbeat_interval;
        let mut next_scan = start + cfg.scan_interval;
        while !self.shared.stop.load(Ordering::SeqCst) {
            let fresh = self.sync_worlds();
            let now = self.now();
            for key in fresh {
                self.beat_one(&key, now);
            }
            if now >= next_beat {
                self.beat_all(now);
                while next_beat <= now {
                    next_beat += cfg.heartbeat_interval;
                }
            }
            if now >= next_scan {
                self.scan_all(now);
                while next_scan <= now {
                    next_scan += cfg.scan_interval;
                }
            }
            self.check_store_outage();
            let wake_at = next_beat.min(next_scan);
            let left = wake_at.saturating_sub(self.now());
            let mut woken = self.shared.wake.lock().unwrap();
            if !*woken && !left.is_zero() {
                woken = self.shared.wake_cv.wait_timeout(woken, left).unwrap().0;
            }
            *woken = false;
        }
        debug!("watchdog stopped");
    }

    /// Mirrors the watched set; returns worlds that were just added.
    fn sync_worlds(&mut self) -> Vec<(String, u64)> {
        let worlds = self.shared.worlds.lock().unwrap().clone();
        self.tracks
            .retain(|(n, e), _| worlds.iter().any(|w| &w.name == n && w.epoch == *e));
        let now = self.now();
        let mut fresh = Vec::new();
        for w in worlds {
            let key = (w.name.clone(), w.epoch);
            if self.tracks.contains_key(&key) {
                continue;
            }
            let peers = (0..w.size)
                .filter(|r| *r != w.my_rank)
                .map(|r| {
                    (
                        r,
                        PeerTrack {
                            counter: i64::MIN,
                            last_change: now,
                        },
                    )
                })
                .collect();
            self.tracks.insert(
                key.clone(),
                Track {
                    world: w,
                    peers,
                    prev_scan: now,
                    blind: false,
                    reported: false,
                },
            );
            fresh.push(key);
        }
        fresh
    }

    fn client_timeout(&self) -> Duration {
        (self.shared.config.liveness_timeout / 2).clamp(
            Duration::from_millis(100),
            crate::store::DEFAULT_CLIENT_TIMEOUT,
        )
    }

    /// Runs `f` against the store at `addr`, keeping outage bookkeeping.
    fn with_store<T>(
        &mut self,
        addr: &str,
        now: Duration,
        f: impl FnOnce(&mut StoreClient) -> Result<T>,
    ) -> Result<T> {
        let timeout = self.client_timeout();
        let sc = self.stores.entry(addr.to_string()).or_insert(StoreConn {
            client: None,
            failing_since: None,
        });
        if sc.client.is_none() {
            match StoreClient::connect_with_timeout(addr, timeout) {
                Ok(c) => sc.client = Some(c),
                Err(e) => {
                    sc.failing_since.get_or_insert(now);
                    return Err(e);
                }
            }
        }
        let res = f(sc.client.as_mut().unwrap());
        match &res {
            Ok(_) => sc.failing_since = None,
            Err(_) => {
                sc.failing_since.get_or_insert(now);
            }
        }
        res
    }

    fn beat_one(&mut self, key: &(String, u64), now: Duration) {
        let Some(t) = self.tracks.get(key) else {
            return;
        };
        let w = t.world.clone();
        let k = keys::heartbeat(&w.name, w.epoch, w.my_rank);
        if let Err(e) = self.with_store(&w.store_addr, now, |c| c.add(&k, 1)) {
            debug!("heartbeat for {} failed: {e}", w.name);
        }
    }

    fn beat_all(&mut self, now: Duration) {
        let keys: Vec<(String, u64)> = self.tracks.keys().cloned().collect();
        for key in keys {
            self.beat_one(&key, now);
        }
    }

    fn scan_all(&mut self, now: Duration) {
        let cfg = self.shared.config;
        let keys: Vec<(String, u64)> = self.tracks.keys().cloned().collect();
        for key in keys {
            let (w, ranks) = {
                let t = &self.tracks[&key];
                if t.reported || t.peers.is_empty() {
                    continue;
                }
                let mut ranks: Vec<Rank> = t.peers.keys().copied().collect();
                ranks.sort_unstable();
                (t.world.clone(), ranks)
            };
            let read = self.with_store(&w.store_addr, now, |c| {
                ranks
                    .iter()
                    .map(|r| {
                        c.get_counter(&keys::heartbeat(&w.name, w.epoch, *r))
                            .map(|v| (*r, v))
                    })
                    .collect::<Result<Vec<_>>>()
            });
            let t = self.tracks.get_mut(&key).unwrap();
            let counters = match read {
                Ok(c) => c,
                Err(e) => {
                    debug!("scan of {} failed: {e}", w.name);
                    t.blind = true;
                    continue;
                }
            };
            let recovered = std::mem::take(&mut t.blind);
            let window = now.saturating_sub(t.prev_scan).min(cfg.scan_interval);
            let mut stale: Option<(Rank, Duration)> = None;
            for (r, c) in counters {
                let p = t.peers.get_mut(&r).unwrap();
                if recovered {
                    p.last_change = now;
                }
                if c > p.counter {
                    if p.counter != i64::MIN {
                        p.last_change = now.saturating_sub(window).max(p.last_change);
                    }
                    p.counter = c;
                }
                let silent = now.saturating_sub(p.last_change);
                if silent >= cfg.liveness_timeout && stale.is_none() {
                    stale = Some((r, silent));
                }
            }
            t.prev_scan = now;
            if let Some((r, silent)) = stale {
                t.reported = true;
                info!(
                    "world {} epoch {}: rank {r} silent for {silent:?}",
                    w.name, w.epoch
                );
                let _ = self.shared.tx.lock().unwrap().send(Suspicion {
                    world: w.name.clone(),
                    epoch: w.epoch,
                    rank: Some(r),
                    reason: SuspicionReason::Stale { silent_for: silent },
                });
            }
        }
    }

    /// After a whole liveness window without a successful store call, every
    /// world on that store is reported against this member itself.
    fn check_store_outage(&mut self) {
        let now = self.now();
        let live = self.shared.config.liveness_timeout;
        for (addr, sc) in &self.stores {
            let Some(since) = sc.failing_since else {
                continue;
            };
            let down = now.saturating_sub(since);
            if down < live {
                continue;
            }
            for t in self.tracks.values_mut() {
                if t.world.store_addr != *addr || t.reported {
                    continue;
                }
                t.reported = true;
                info!(
                    "world {}: store {addr} unreachable for {down:?}",
                    t.world.name
                );
                let _ = self.shared.tx.lock().unwrap().send(Suspicion {
                    world: t.world.name.clone(),
                    epoch: t.world.epoch,
                    rank: None,
                    reason: SuspicionReason::StoreUnreachable { for_at_least: down },
                });
            }
        }
    }
}
