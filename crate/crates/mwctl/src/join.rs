//! Online instantiation: a leader streams from workerA over w1 while it
//! waits for workerB to join w2.

use std::collections::VecDeque;
use std::thread;
use std::time::{Duration, Instant};

use clap::Args;
use multiworld::{DType, InitTicket, StoreServer, WorkHandle, WorldDescriptor, WorldManager};
use serde_json::{json, Value};

use crate::emit::Emitter;
use crate::fleet::Fleet;
use crate::member::{self, FLAG_DATA};
use crate::{Common, Failure, Outcome};

const WINDOW: usize = 2;
const W2_TIMEOUT: Duration = Duration::from_secs(30);

#[derive(Args, Debug)]
pub struct JoinArgs {
    #[command(flatten)]
    pub common: Common,
    /// leader, workerA, workerB, or `all`.
    #[arg(long, default_value = "all")]
    pub role: String,
    /// Message size in bytes.
    #[arg(long, default_value_t = 4 << 20)]
    pub size: usize,
    /// Seconds after start at which the leader begins initializing w2.
    #[arg(long, default_value_t = 10.0)]
    pub init_at: f64,
    /// Seconds after start at which workerB joins w2.
    #[arg(long, default_value_t = 20.0)]
    pub join_at: f64,
    /// Total run length in seconds.
    #[arg(long, default_value_t = 30.0)]
    pub duration: f64,
    /// Messages per throughput sample.
    #[arg(long, default_value_t = 5000)]
    pub interval: u64,
}

pub fn run(a: JoinArgs) -> Outcome {
    let out = Emitter::new(a.common.out.as_deref())?;
    match a.role.as_str() {
        "all" => drive(&a, &out),
        "leader" => leader(&a, &member::store_addr(&a.common.store)?, &out),
        "workerA" | "workerB" => worker(&a, &member::store_addr(&a.common.store)?, &out),
        r => Err(Failure::Env(format!("unknown join role {r}"))),
    }
}

fn secs(s: f64) -> Duration {
    Duration::from_secs_f64(s.max(0.0))
}

/// Streams to rank 0 of its world until the run ends or the leader leaves.
fn worker(a: &JoinArgs, store: &str, out: &Emitter) -> Outcome {
    let m = member::manager()?;
    member::report_status(&m, out);
    let world = if a.role == "workerA" { "w1" } else { "w2" };
    let start = Instant::now();
    if world == "w2" {
        thread::sleep(secs(a.join_at));
    }
    let called = Instant::now();
    member::join_all(&m, store, &[(world, 2, 1)], W2_TIMEOUT)?;
    let latency = called.elapsed();
    out.emit(
        "joined",
        json!({ "role": a.role, "world": world, "latency_ms": latency.as_secs_f64() * 1e3 }),
    );
    let comm = m.communicator();
    let end = start + secs(a.duration) + Duration::from_secs(1);
    let mut inflight: VecDeque<WorkHandle> = VecDeque::new();
    let mut sent = 0u64;
    let mut error = None;
    while Instant::now() < end {
        if inflight.len() >= WINDOW {
            let h = inflight.pop_front().unwrap();
            if let Err(e) = h.wait(Some(Duration::from_secs(10))) {
                error = Some(e.to_string());
                break;
            }
        }
        match comm.isend(world, 0, member::message(sent as i64, FLAG_DATA, a.size)) {
            Ok(h) => inflight.push_back(h),
            Err(e) => {
                error = Some(e.to_string());
                break;
            }
        }
        sent += 1;
    }
    out.emit(
        "done",
        json!({ "role": a.role, "sent": sent, "error": error }),
    );
    m.shutdown();
    Ok(())
}

/// One throughput sample.
struct Sample {
    end_s: f64,
    bytes: u64,
    dur_s: f64,
}

impl Sample {
    fn json(&self) -> Value {
        json!({
            "end_s": self.end_s,
            "bytes": self.bytes,
            "dur_s": self.dur_s,
            "bytes_per_s": self.bytes as f64 / self.dur_s,
        })
    }
}

struct Stream {
    world: &'static str,
    queue: VecDeque<WorkHandle>,
    count: u64,
    in_interval: u64,
    interval_start: Option<Instant>,
    last: Option<Instant>,
    samples: Vec<Sample>,
    /// Longest inter-arrival gap, and when it ended.
    gaps: Vec<(f64, f64)>,
    error: Option<String>,
}

impl Stream {
    fn new(world: &'static str) -> Stream {
        Stream {
            world,
            queue: VecDeque::new(),
            count: 0,
            in_interval: 0,
            interval_start: None,
            last: None,
            samples: Vec::new(),
            gaps: Vec::new(),
            error: None,
        }
    }

    fn refill(&mut self, m: &WorldManager, len: usize) {
        while self.error.is_none() && self.queue.len() < WINDOW {
            match m.communicator().irecv(self.world, 1, DType::I64, len) {
                Ok(h) => self.queue.push_back(h),
                Err(e) => self.error = Some(e.to_string()),
            }
        }
    }

    fn arrived(&mut self, t0: Instant, now: Instant, size: usize, interval: u64) {
        if let Some(prev) = self.last {
            self.gaps
                .push(((now - prev).as_secs_f64() * 1e3, (now - t0).as_secs_f64()));
        }
        self.last = Some(now);
        self.count += 1;
        match self.interval_start {
            None => self.interval_start = Some(now),
            Some(s) => {
                self.in_interval += 1;
                if self.in_interval == interval {
                    self.samples.push(Sample {
                        end_s: (now - t0).as_secs_f64(),
                        bytes: self.in_interval * size as u64,
                        dur_s: (now - s).as_secs_f64(),
                    });
                    self.in_interval = 0;
                    self.interval_start = Some(now);
                }
            }
        }
    }
}

fn leader(a: &JoinArgs, store: &str, out: &Emitter) -> Outcome {
    let m = member::manager()?;
    member::report_status(&m, out);
    member::join_all(&m, store, &[("w1", 2, 0)], W2_TIMEOUT)?;
    out.emit("ready", json!({ "role": "leader" }));
    let t0 = Instant::now();
    let len = member::message_len(a.size);
    let bytes = len * DType::I64.width();
    let comm = m.communicator();
    let mut streams = vec![Stream::new("w1")];
    streams[0].refill(&m, len);
    let mut ticket: Option<InitTicket> = None;
    let mut init_started: Option<f64> = None;
    let mut w2_ready: Option<f64> = None;
    let mut w2_error: Option<String> = None;
    let end = t0 + secs(a.duration);

    while Instant::now() < end {
        if init_started.is_none() && t0.elapsed() >= secs(a.init_at) {
            let d = WorldDescriptor::new("w2", 2, 0, store, "127.0.0.1:0");
            match m.initialize_world_async(d, Some(W2_TIMEOUT)) {
                Ok(t) => ticket = Some(t),
                Err(e) => w2_error = Some(e.to_string()),
            }
            init_started = Some(t0.elapsed().as_secs_f64());
            out.emit("w2_init_started", json!({ "at_s": init_started }));
        }
        if ticket.as_ref().is_some_and(|t| t.is_finished()) {
            match ticket.take().unwrap().wait() {
                Ok(()) => {
                    w2_ready = Some(t0.elapsed().as_secs_f64());
                    out.emit("w2_ready", json!({ "at_s": w2_ready }));
                    let mut s = Stream::new("w2");
                    s.refill(&m, len);
                    streams.push(s);
                }
                Err(e) => {
                    w2_error = Some(e.to_string());
                    out.emit("w2_failed", json!({ "error": e.to_string() }));
                }
            }
        }
        let fronts: Vec<(usize, WorkHandle)> = streams
            .iter()
            .enumerate()
            .filter_map(|(i, s)| s.queue.front().map(|h| (i, h.clone())))
            .collect();
        if fronts.is_empty() {
            thread::sleep(Duration::from_millis(5));
            continue;
        }
        let hs: Vec<WorkHandle> = fronts.iter().map(|(_, h)| h.clone()).collect();
        let Ok(k) = comm.wait_any(&hs, Some(Duration::from_millis(20))) else {
            continue;
        };
        let i = fronts[k].0;
        let s = &mut streams[i];
        let h = s.queue.pop_front().unwrap();
        match h.wait(Some(Duration::ZERO)) {
            Ok(_) => s.arrived(t0, Instant::now(), bytes, a.interval),
            Err(e) => {
                s.error = Some(e.to_string());
                s.queue.clear();
            }
        }
        s.refill(&m, len);
    }

    for s in &streams {
        for x in &s.samples {
            let mut rec = x.json();
            rec["world"] = s.world.into();
            out.emit("interval", rec);
        }
    }
    let report = |s: &Stream| {
        let total_bytes: u64 = s.samples.iter().map(|x| x.bytes).sum();
        let total_dur: f64 = s.samples.iter().map(|x| x.dur_s).sum();
        json!({
            "messages": s.count,
            "samples": s.samples.len(),
            "mean_bytes_per_s": if total_dur > 0.0 { total_bytes as f64 / total_dur } else { 0.0 },
            "gaps": s.gaps.iter().map(|(g, at)| json!([g, at])).collect::<Vec<_>>(),
            "error": s.error,
        })
    };
    out.emit(
        "report",
        json!({
            "role": "leader",
            "message_bytes": bytes,
            "init_started_s": init_started,
            "w2_ready_s": w2_ready,
            "w2_error": w2_error,
            "w1": report(&streams[0]),
            "w2": streams.get(1).map(report),
            "w1_samples": streams[0].samples.iter().map(Sample::json).collect::<Vec<_>>(),
        }),
    );
    m.shutdown();
    Ok(())
}

/// Findings over the leader's report. The ratio and gap cover w1 while w2
/// was waiting for its late member.
#[derive(Debug, Default)]
pub struct Verdict {
    pub problems: Vec<String>,
    pub lowest_ratio: Option<f64>,
    pub worst_gap_ms: Option<f64>,
}

pub fn verdict(report: &Value, joined_latency_ms: Option<f64>) -> Verdict {
    let mut v = Verdict::default();
    let (Some(init), Some(ready)) = (
        report["init_started_s"].as_f64(),
        report["w2_ready_s"].as_f64(),
    ) else {
        v.problems
            .push(format!("w2 never became ready: {}", report["w2_error"]));
        return v;
    };
    let samples: Vec<(f64, f64)> = report["w1_samples"]
        .as_array()
        .map(|v| {
            v.iter()
                .filter_map(|s| Some((s["end_s"].as_f64()?, s["bytes_per_s"].as_f64()?)))
                .collect()
        })
        .unwrap_or_default();
    let before: Vec<f64> = samples
        .iter()
        .filter(|(t, _)| *t < init)
        .map(|(_, r)| *r)
        .collect();
    let during: Vec<f64> = samples
        .iter()
        .filter(|(t, _)| *t >= init && *t <= ready)
        .map(|(_, r)| *r)
        .collect();
    if before.len() < 3 || during.len() < 3 {
        v.problems.push(format!(
            "too few w1 samples: {} before the wait, {} during",
            before.len(),
            during.len()
        ));
        return v;
    }
    let mean = before.iter().sum::<f64>() / before.len() as f64;
    let low = during.iter().cloned().fold(f64::INFINITY, f64::min);
    v.lowest_ratio = Some(low / mean);
    if low < 0.8 * mean {
        v.problems.push(format!(
            "w1 interval at {:.0}% of the pre-wait mean",
            100.0 * low / mean
        ));
    }
    let worst_gap = report["w1"]["gaps"]
        .as_array()
        .map(|v| {
            v.iter()
                .filter_map(|g| Some((g[0].as_f64()?, g[1].as_f64()?)))
                .filter(|(_, at)| *at >= init && *at <= ready)
                .map(|(g, _)| g)
                .fold(0.0, f64::max)
        })
        .unwrap_or(f64::INFINITY);
    v.worst_gap_ms = Some(worst_gap);
    if worst_gap > 100.0 {
        v.problems.push(format!(
            "w1 gap of {worst_gap:.1} ms while w2 was initializing"
        ));
    }
    let w1_after = report["w1"]["gaps"]
        .as_array()
        .map(|v| {
            v.iter()
                .filter(|g| g[1].as_f64().is_some_and(|t| t > ready))
                .count()
        })
        .unwrap_or(0);
    let w2_msgs = report["w2"]["messages"].as_u64().unwrap_or(0);
    if w1_after == 0 || w2_msgs == 0 {
        v.problems.push(format!(
            "after the join w1 got {w1_after} and w2 got {w2_msgs} messages"
        ));
    }
    match joined_latency_ms {
        Some(l) if l < 1000.0 => {}
        Some(l) => v.problems.push(format!("join latency {l:.1} ms")),
        None => v.problems.push("workerB never joined".into()),
    }
    v
}

fn drive(a: &JoinArgs, out: &Emitter) -> Outcome {
    let _server;
    let store = match &a.common.store {
        Some(s) => s.clone(),
        None => {
            let s = StoreServer::bind("127.0.0.1:0").map_err(Failure::env)?;
            let addr = s.local_addr().to_string();
            _server = s;
            addr
        }
    };
    let args = |role: &str, join_at: f64, duration: f64| -> Vec<String> {
        vec![
            "join".into(),
            "--role".into(),
            role.into(),
            "--store".into(),
            store.clone(),
            "--size".into(),
            a.size.to_string(),
            "--init-at".into(),
            a.init_at.to_string(),
            "--join-at".into(),
            join_at.to_string(),
            "--duration".into(),
            duration.to_string(),
            "--interval".into(),
            a.interval.to_string(),
        ]
    };
    let mut fleet = Fleet::new(out.clone());
    fleet.spawn("leader", &args("leader", a.join_at, a.duration))?;
    fleet.spawn("workerA", &args("workerA", a.join_at, a.duration))?;
    if fleet
        .wait_for(Duration::from_secs(30), |e| e.is("leader", "ready"))
        .is_none()
    {
        fleet.finish(Duration::from_secs(1));
        return Err(Failure::Env("leader never became ready".into()));
    }
    let t0 = Instant::now();
    thread::sleep(secs(a.join_at).saturating_sub(t0.elapsed()));
    fleet.spawn("workerB", &args("workerB", 0.0, a.duration - a.join_at))?;
    let report = fleet
        .wait_for(secs(a.duration) + Duration::from_secs(40), |e| {
            e.is("leader", "report")
        })
        .map(|e| e.rec)
        .unwrap_or(Value::Null);
    let latency = fleet
        .wait_for(Duration::from_secs(1), |e| e.is("workerB", "joined"))
        .and_then(|e| e.rec["latency_ms"].as_f64());
    fleet.finish(Duration::from_secs(10));
    let v = if report.is_null() {
        Verdict {
            problems: vec!["leader produced no report".to_string()],
            ..Verdict::default()
        }
    } else {
        verdict(&report, latency)
    };
    let pass = v.problems.is_empty();
    out.emit(
        "summary",
        json!({
            "scenario": "join",
            "join_latency_ms": latency,
            "init_started_s": report["init_started_s"],
            "w2_ready_s": report["w2_ready_s"],
            "w1_mean_bytes_per_s": report["w1"]["mean_bytes_per_s"],
            "w2_messages": report["w2"]["messages"],
            "lowest_interval_ratio": v.lowest_ratio,
            "worst_gap_ms": v.worst_gap_ms,
            "problems": &v.problems,
            "pass": pass,
        }),
    );
    if pass {
        Ok(())
    } else {
        Err(Failure::Scenario(v.problems.join("; ")))
    }
}
