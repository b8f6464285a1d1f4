//! Loopback throughput: single-world direct loop against the communicator
//! path, and fan-in from several single-sender worlds.

use std::collections::VecDeque;
use std::thread;
use std::time::{Duration, Instant};

use clap::Args;
use multiworld::transport::{Connection, Listener};
use multiworld::{Buffer, DType, StoreServer, WorkHandle, WorldDescriptor, WorldManager};
use serde_json::json;

use crate::emit::Emitter;
use crate::member;
use crate::{BenchMode, Common, Failure, Outcome};

/// Operations kept in flight per sender and receiver: about 1 MiB, at
/// least 4.
fn window(size: usize) -> usize {
    ((1 << 20) / size.max(1)).clamp(4, 256)
}
const BUDGET_BYTES: usize = 256 << 20;

#[derive(Args, Debug)]
pub struct BenchArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, value_enum, default_value = "p2p")]
    pub mode: BenchMode,
    /// Message sizes in bytes, comma separated.
    #[arg(long, value_delimiter = ',', default_values_t = [4096usize, 40960, 409600, 4194304])]
    pub size: Vec<usize>,
    /// Messages per run per sender; 0 picks a count worth about 256 MiB.
    #[arg(long, default_value_t = 0)]
    pub count: usize,
    /// Runs per configuration; medians are reported.
    #[arg(long, default_value_t = 10)]
    pub runs: usize,
    /// Largest number of fan-in senders; every count from 1 up is measured.
    #[arg(long, default_value_t = 3)]
    pub senders: usize,
    /// Messages per throughput sample.
    #[arg(long, default_value_t = 5000)]
    pub interval: usize,
}

/// Arrival-time samples over one timed run. Interval boundaries sit on
/// message arrivals, so the samples tile the run exactly.
struct Meter {
    size: usize,
    interval: usize,
    start: Instant,
    mark: Instant,
    n: usize,
    samples: Vec<(u64, f64)>,
}

impl Meter {
    fn new(size: usize, interval: usize) -> Meter {
        let now = Instant::now();
        Meter {
            size,
            interval: interval.max(1),
            start: now,
            mark: now,
            n: 0,
            samples: Vec::new(),
        }
    }

    fn tick(&mut self) {
        self.n += 1;
        if self.n == self.interval {
            self.cut();
        }
    }

    fn cut(&mut self) {
        if self.n == 0 {
            return;
        }
        let now = Instant::now();
        self.samples
            .push(((self.n * self.size) as u64, (now - self.mark).as_secs_f64()));
        self.mark = now;
        self.n = 0;
    }

    fn finish(mut self) -> Run {
        self.cut();
        let elapsed = (self.mark - self.start).as_secs_f64();
        Run {
            samples: self.samples,
            elapsed,
        }
    }
}

pub struct Run {
    pub samples: Vec<(u64, f64)>,
    pub elapsed: f64,
}

impl Run {
    pub fn bytes(&self) -> u64 {
        self.samples.iter().map(|s| s.0).sum()
    }

    /// Total bytes over total sampled time.
    pub fn mean(&self) -> f64 {
        let dur: f64 = self.samples.iter().map(|s| s.1).sum();
        self.bytes() as f64 / dur
    }
}

fn message(size: usize) -> Buffer {
    Buffer::zeros(DType::U8, size)
}

/// Plain blocking send/recv over one world's connection.
pub fn single_world(size: usize, count: usize, interval: usize) -> Result<Run, Failure> {
    let listener = Listener::bind("127.0.0.1:0", "bench", 0).map_err(Failure::env)?;
    let addr = listener.local_addr().to_string();
    let sender = thread::spawn(move || -> multiworld::Result<()> {
        let mut c = Connection::connect(&addr, "bench", 1, Duration::from_secs(5))?;
        let buf = message(size);
        for _ in 0..=count {
            c.send_data(&buf)?;
        }
        Ok(())
    });
    let mut c = listener.accept().map_err(Failure::env)?;
    c.recv_data(None).map_err(Failure::env)?;
    let mut meter = Meter::new(size, interval);
    for _ in 0..count {
        let b = c.recv_data(None).map_err(Failure::env)?;
        debug_assert_eq!(b.byte_len(), size);
        meter.tick();
    }
    let run = meter.finish();
    sender
        .join()
        .map_err(|_| Failure::Env("sender panicked".into()))?
        .map_err(Failure::env)?;
    Ok(run)
}

fn pair(
    store: &StoreServer,
    world: &str,
    n_senders: usize,
) -> Result<(WorldManager, Vec<WorldManager>), Failure> {
    let rx = member::manager()?;
    let txs: Vec<WorldManager> = (0..n_senders)
        .map(|_| member::manager())
        .collect::<Result<_, _>>()?;
    let addr = store.local_addr().to_string();
    let mut tickets = Vec::new();
    for (i, tx) in txs.iter().enumerate() {
        let w = format!("{world}-{i}");
        tickets.push(
            rx.initialize_world_async(WorldDescriptor::new(&w, 2, 0, &addr, "127.0.0.1:0"), None)
                .map_err(Failure::env)?,
        );
        tickets.push(
            tx.initialize_world_async(WorldDescriptor::new(&w, 2, 1, &addr, "127.0.0.1:0"), None)
                .map_err(Failure::env)?,
        );
    }
    for t in tickets {
        t.wait().map_err(Failure::env)?;
    }
    Ok((rx, txs))
}

fn stream(
    tx: WorldManager,
    world: String,
    size: usize,
    count: usize,
) -> thread::JoinHandle<multiworld::Result<()>> {
    thread::spawn(move || {
        let comm = tx.communicator();
        let buf = message(size);
        let mut inflight = VecDeque::new();
        for _ in 0..=count {
            if inflight.len() >= window(size) {
                let h: WorkHandle = inflight.pop_front().unwrap();
                h.wait(None)?;
            }
            inflight.push_back(comm.isend(&world, 0, buf.clone())?);
        }
        for h in inflight {
            h.wait(None)?;
        }
        Ok(())
    })
}

/// Receives `count` messages from each sender world, keeping a window of
/// receives posted on each. Returns the aggregate run and one per sender.
fn receive(
    rx: &WorldManager,
    worlds: &[String],
    size: usize,
    count: usize,
    interval: usize,
) -> Result<(Run, Vec<Run>), Failure> {
    let comm = rx.communicator();
    let post = |w: &str| comm.irecv(w, 1, DType::U8, size).map_err(Failure::env);
    let mut queues: Vec<VecDeque<WorkHandle>> = Vec::new();
    for w in worlds {
        let first = post(w)?;
        first.wait(None).map_err(Failure::env)?;
        let mut q = VecDeque::new();
        for _ in 0..window(size).min(count) {
            q.push_back(post(w)?);
        }
        queues.push(q);
    }
    let mut left = vec![count; worlds.len()];
    let mut posted = vec![window(size).min(count); worlds.len()];
    let mut total = Meter::new(size, interval);
    let mut each: Vec<Meter> = worlds.iter().map(|_| Meter::new(size, interval)).collect();
    while left.iter().any(|&n| n > 0) {
        let fronts: Vec<(usize, WorkHandle)> = queues
            .iter()
            .enumerate()
            .filter_map(|(i, q)| q.front().map(|h| (i, h.clone())))
            .collect();
        let i = if fronts.len() == 1 {
            fronts[0].1.wait(None).map_err(Failure::env)?;
            fronts[0].0
        } else {
            let hs: Vec<WorkHandle> = fronts.iter().map(|f| f.1.clone()).collect();
            fronts[comm.wait_any(&hs, None).map_err(Failure::env)?].0
        };
        let h = queues[i].pop_front().unwrap();
        h.wait(None).map_err(Failure::env)?;
        left[i] -= 1;
        total.tick();
        each[i].tick();
        if posted[i] < count {
            queues[i].push_back(post(&worlds[i])?);
            posted[i] += 1;
        }
    }
    Ok((
        total.finish(),
        each.into_iter().map(Meter::finish).collect(),
    ))
}

/// The same stream as [`single_world`], through two world managers.
pub fn multi_world(
    store: &StoreServer,
    tag: &str,
    size: usize,
    count: usize,
    interval: usize,
) -> Result<Run, Failure> {
    Ok(fan_in(store, tag, 1, size, count, interval)?.0)
}

pub fn fan_in(
    store: &StoreServer,
    tag: &str,
    senders: usize,
    size: usize,
    count: usize,
    interval: usize,
) -> Result<(Run, Vec<Run>), Failure> {
    let (rx, txs) = pair(store, tag, senders)?;
    let worlds: Vec<String> = (0..senders).map(|i| format!("{tag}-{i}")).collect();
    let threads: Vec<_> = txs
        .iter()
        .zip(&worlds)
        .map(|(tx, w)| stream(tx.clone(), w.clone(), size, count))
        .collect();
    let runs = receive(&rx, &worlds, size, count, interval);
    for t in threads {
        t.join()
            .map_err(|_| Failure::Env("sender panicked".into()))?
            .map_err(Failure::env)?;
    }
    for m in txs.iter().chain(std::iter::once(&rx)) {
        m.shutdown();
    }
    runs
}

pub fn auto_count(size: usize) -> usize {
    (BUDGET_BYTES / size.max(1)).clamp(64, 20_000)
}

pub fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

fn emit_run(out: &Emitter, path: &str, size: usize, senders: usize, run_no: usize, r: &Run) {
    for (bytes, dur) in &r.samples {
        out.emit(
            "interval",
            json!({ "path": path, "size": size, "senders": senders, "run": run_no,
                    "bytes": bytes, "dur_s": dur, "bytes_per_s": *bytes as f64 / dur }),
        );
    }
    out.emit(
        "run",
        json!({ "path": path, "size": size, "senders": senders, "run": run_no,
                "bytes": r.bytes(), "elapsed_s": r.elapsed, "mean_bytes_per_s": r.mean() }),
    );
}

pub fn run(a: BenchArgs) -> Outcome {
    let out = Emitter::new(a.common.out.as_deref())?;
    let store = StoreServer::bind("127.0.0.1:0").map_err(Failure::env)?;
    let mut seq = 0;
    for &size in &a.size {
        if size == 0 {
            return Err(Failure::Env("message size must be positive".into()));
        }
        let count = if a.count == 0 {
            auto_count(size)
        } else {
            a.count
        };
        match a.mode {
            BenchMode::P2p => {
                let (mut sw, mut mw) = (Vec::new(), Vec::new());
                for r in 0..a.runs {
                    let s = single_world(size, count, a.interval)?;
                    emit_run(&out, "single", size, 1, r, &s);
                    sw.push(s.mean());
                    seq += 1;
                    let m = multi_world(&store, &format!("p2p{seq}"), size, count, a.interval)?;
                    emit_run(&out, "multi", size, 1, r, &m);
                    mw.push(m.mean());
                }
                let (s, m) = (median(sw), median(mw));
                out.emit(
                    "summary",
                    json!({ "mode": "p2p", "size": size, "count": count, "runs": a.runs,
                            "single_median_bytes_per_s": s, "multi_median_bytes_per_s": m,
                            "ratio": m / s, "overhead": 1.0 - m / s }),
                );
            }
            BenchMode::Fanin => {
                for n in 1..=a.senders.max(1) {
                    let mut agg = Vec::new();
                    let mut per: Vec<Vec<f64>> = vec![Vec::new(); n];
                    for r in 0..a.runs {
                        seq += 1;
                        let (total, each) =
                            fan_in(&store, &format!("fan{seq}"), n, size, count, a.interval)?;
                        emit_run(&out, "fanin", size, n, r, &total);
                        agg.push(total.mean());
                        for (i, e) in each.iter().enumerate() {
                            per[i].push(e.bytes() as f64 / e.elapsed);
                        }
                    }
                    out.emit(
                        "summary",
                        json!({ "mode": "fanin", "size": size, "senders": n, "count": count, "runs": a.runs,
                                "aggregate_median_bytes_per_s": median(agg),
                                "per_sender_median_bytes_per_s": per.into_iter().map(median).collect::<Vec<_>>() }),
                    );
                }
            }
        }
    }
    Ok(())
}
