//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails.

#[path = "../../core/tests/common/chaos.rs"]
mod chaos;
#[path = "../../core/tests/common/mod.rs"]
mod common;
#[path = "../../core/tests/common/golden.rs"]
mod golden;
#[path = "../../core/tests/common/linearize.rs"]
mod linearize;
#[path = "../../core/tests/common/oracle.rs"]
mod oracle;

use std::collections::BTreeSet;
use std::panic::{self, AssertUnwindSafe};
use std::process::{Child, Command, Output, Stdio};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::mpsc::{self, Receiver};
use std::sync::{Arc, Barrier};
use std::thread;
use std::time::{Duration, Instant};

use multiworld::watchdog::{Clock, MonotonicClock, Suspicion, WatchedWorld};
use multiworld::{
    Buffer, CollectiveKind, Communicator, DType, ReduceOp, StoreClient, StoreServer, Watchdog,
    WatchdogConfig, WorkStatus, WorldManager, WorldStatus,
};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use serde_json::Value;

type Verdict = Result<String, String>;
type Criterion = (&'static str, fn() -> Verdict);

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(started: Instant, limit: Duration, what: &str) -> Result<(), String> {
    let took = started.elapsed();
    ensure(took < limit, || {
        format!(
            "{what} took {:.1} s, limit {:.0} s",
            took.as_secs_f64(),
            limit.as_secs_f64()
        )
    })
}

fn mwctl(args: &[&str]) -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_mwctl"));
    c.args(args)
        .stdin(Stdio::null())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped());
    c
}

fn spawn(args: &[&str]) -> Result<Child, String> {
    mwctl(args)
        .spawn()
        .map_err(|e| format!("spawning mwctl {}: {e}", args.join(" ")))
}

fn records(out: &Output) -> Vec<Value> {
    String::from_utf8_lossy(&out.stdout)
        .lines()
        .filter_map(|l| serde_json::from_str(l).ok())
        .collect()
}

fn summaries(recs: &[Value]) -> Vec<&Value> {
    recs.iter().filter(|r| r["event"] == "summary").collect()
}

/// The scenario's summary record, or an error with the tail of stderr.
fn scenario(out: &Output) -> Result<Value, String> {
    let recs = records(out);
    let summary = summaries(&recs).last().map(|v| (*v).clone());
    match (out.status.code(), summary) {
        (Some(0), Some(s)) => Ok(s),
        (code, s) => {
            let err = String::from_utf8_lossy(&out.stderr);
            let tail: Vec<&str> = err.lines().rev().take(3).collect();
            Err(format!(
                "exit {code:?}, problems {}, stderr {:?}",
                s.map(|s| s["problems"].to_string())
                    .unwrap_or_else(|| "none reported".into()),
                tail
            ))
        }
    }
}

// 1

fn collective_correctness() -> Verdict {
    let started = Instant::now();
    let mut rng = StdRng::seed_from_u64(0xacce97);
    let mut cases = 0;
    for size in 2..=5 {
        let s = common::store();
        let ms: Vec<WorldManager> = (0..size).map(|_| common::manager()).collect();
        let name = format!("c{size}");
        common::form(&name, &ms.iter().collect::<Vec<_>>(), &s);
        let comms: Vec<Communicator> = ms.iter().map(|m| m.communicator()).collect();
        for kind in CollectiveKind::ALL {
            for i in 0..200 {
                let mut c = oracle::Case::random(&mut rng, kind, size, 48);
                c.dtype = DType::ALL[i % DType::ALL.len()];
                c.inputs = (0..size)
                    .map(|_| oracle::Vals::random(&mut rng, c.dtype, c.len))
                    .collect();
                oracle::check(&c, &name, &comms)
                    .map_err(|e| format!("size {size} {kind:?} case {i}: {e}"))?;
                cases += 1;
            }
        }
    }
    within(started, Duration::from_secs(300), "oracle sweep")?;
    Ok(format!(
        "{cases} cases bitwise equal in {:.1} s",
        started.elapsed().as_secs_f64()
    ))
}

// 2

fn fault_domains() -> Verdict {
    let started = Instant::now();
    let mut notes = Vec::new();
    for victim in ["P1", "P2", "P3", "P4"] {
        let out = mwctl(&["rhombus", "--kill", victim])
            .output()
            .map_err(|e| e.to_string())?;
        let s = scenario(&out).map_err(|e| format!("{victim}: {e}"))?;
        ensure(s["pass"] == true, || format!("{victim}: {s}"))?;
        let broken: BTreeSet<&str> = s["expected_broken"]
            .as_object()
            .map(|m| {
                m.values()
                    .flat_map(|v| v.as_array().into_iter().flatten())
                    .filter_map(Value::as_str)
                    .collect()
            })
            .unwrap_or_default();
        notes.push(format!(
            "{victim} broke {}",
            broken.into_iter().collect::<Vec<_>>().join("+")
        ));
    }
    within(started, Duration::from_secs(120), "four rhombus runs")?;
    Ok(notes.join(", "))
}

// 3

fn fault_tolerance() -> Verdict {
    let multi = spawn(&["fault"])?;
    let single = spawn(&["fault", "--single-world"])?;
    let multi = multi.wait_with_output().map_err(|e| e.to_string())?;
    let single = single.wait_with_output().map_err(|e| e.to_string())?;
    let m = scenario(&multi).map_err(|e| format!("multi-world: {e}"))?;
    let s = scenario(&single).map_err(|e| format!("single-world: {e}"))?;
    let leader = &m["leader"];
    let after = leader["a_after_failure"].as_u64().unwrap_or(0);
    let gap = leader["max_gap_ms"].as_f64().unwrap_or(f64::INFINITY);
    let detect = m["detect_ms"].as_f64().unwrap_or(f64::INFINITY);
    ensure(after >= 20, || {
        format!("{after} messages after the failure")
    })?;
    ensure((0.0..=3500.0).contains(&detect), || {
        format!("detection {detect:.0} ms")
    })?;
    ensure(gap <= 10_000.0, || format!("stall of {gap:.0} ms"))?;
    ensure(s["leader"]["halted"] == true, || {
        "single-world leader did not halt".into()
    })?;
    Ok(format!(
        "{after} messages after the failure, detection {detect:.0} ms, longest gap {gap:.0} ms, single-world halted"
    ))
}

// 4

fn online_instantiation() -> Verdict {
    let out = mwctl(&["join", "--interval", "50"])
        .output()
        .map_err(|e| e.to_string())?;
    let s = scenario(&out)?;
    let latency = s["join_latency_ms"].as_f64().unwrap_or(f64::INFINITY);
    ensure(latency < 1000.0, || format!("join latency {latency:.0} ms"))?;
    Ok(format!(
        "w1 steady while w2 waited, lowest interval {:.0}% of the pre-wait mean, join latency {latency:.1} ms",
        100.0 * s["lowest_interval_ratio"].as_f64().unwrap_or(f64::NAN)
    ))
}

// 5

fn overhead() -> Verdict {
    let started = Instant::now();
    let out = mwctl(&[
        "bench",
        "--mode",
        "p2p",
        "--runs",
        "10",
        "--size",
        "409600,4194304",
        "--interval",
        "50",
    ])
    .output()
    .map_err(|e| e.to_string())?;
    ensure(out.status.success(), || {
        format!("bench exited {:?}", out.status.code())
    })?;
    within(started, Duration::from_secs(300), "bench")?;
    let recs = records(&out);
    let mut notes = Vec::new();
    let mut short = Vec::new();
    for s in summaries(&recs) {
        let size = s["size"].as_u64().unwrap_or(0);
        let ratio = s["ratio"].as_f64().unwrap_or(0.0);
        notes.push(format!("{size} B at {:.1}%", 100.0 * ratio));
        if ratio < 0.9 {
            short.push(size);
        }
    }
    ensure(notes.len() == 2, || {
        format!("expected two summaries, got {}", notes.len())
    })?;
    let line = format!(
        "multi-world over single-world throughput: {}",
        notes.join(", ")
    );
    ensure(short.is_empty(), || line.clone())?;
    Ok(line)
}

// 6

fn watched(name: &str, rank: u32, size: u32, store: &StoreServer) -> WatchedWorld {
    WatchedWorld {
        name: name.into(),
        epoch: 0,
        my_rank: rank,
        size,
        store_addr: store.local_addr().to_string(),
    }
}

/// Four members in three overlapping worlds.
const LAYOUT: [(&str, &[usize]); 3] = [("a", &[0, 1, 2]), ("b", &[1, 2, 3]), ("c", &[3, 0])];

fn soak(length: Duration) -> Result<String, String> {
    let s = common::store();
    let ms: Vec<WorldManager> = (0..4).map(|_| common::manager()).collect();
    for (name, members) in LAYOUT {
        common::form(
            name,
            &members.iter().map(|&i| &ms[i]).collect::<Vec<_>>(),
            &s,
        );
    }
    let events: Vec<_> = ms.iter().map(|m| m.subscribe()).collect();
    let until = Instant::now() + length;
    let rounds = Arc::new(AtomicU64::new(0));
    let mut threads = Vec::new();
    for (name, members) in LAYOUT {
        for (rank, &i) in members.iter().enumerate() {
            let (comm, rounds) = (ms[i].communicator(), rounds.clone());
            threads.push(thread::spawn(move || -> Result<(), String> {
                // rank 0 raises the stop flag; max-reduction stops everyone on the same round
                let mut data = vec![0f32; 8192];
                loop {
                    data[0] = if rank == 0 && Instant::now() >= until {
                        1.0
                    } else {
                        0.0
                    };
                    let r = comm
                        .all_reduce(name, Buffer::from_slice(&data), ReduceOp::Max)
                        .map_err(|e| format!("{name}: {e}"))?;
                    if rank == 0 {
                        rounds.fetch_add(1, Ordering::Relaxed);
                    }
                    if r.to_vec::<f32>().map_err(|e| e.to_string())?[0] > 0.0 {
                        return Ok(());
                    }
                }
            }));
        }
    }
    for t in threads {
        t.join()
            .map_err(|_| "traffic thread panicked".to_string())??;
    }
    thread::sleep(Duration::from_secs(1));
    for (i, (m, rx)) in ms.iter().zip(&events).enumerate() {
        if let Some(e) = rx.try_iter().find(|e| e.to == WorldStatus::Broken) {
            return Err(format!(
                "member {i} reported {} broken: {:?}",
                e.world, e.cause
            ));
        }
        for (name, members) in LAYOUT {
            if members.contains(&i) {
                let st = m.world_status(name).map_err(|e| e.to_string())?;
                ensure(st == WorldStatus::Ready, || {
                    format!("member {i} sees {name} {st:?}")
                })?;
            }
        }
    }
    Ok(format!(
        "{} rounds, 0 false positives",
        rounds.load(Ordering::Relaxed)
    ))
}

struct Skewed {
    base: MonotonicClock,
    offset_s: i64,
}

impl Clock for Skewed {
    fn now(&self) -> Duration {
        // keep the shifted reading positive for negative offsets
        let base = self.base.now() + Duration::from_secs(7200);
        if self.offset_s >= 0 {
            base + Duration::from_secs(self.offset_s as u64)
        } else {
            base - Duration::from_secs(self.offset_s.unsigned_abs())
        }
    }
}

struct Member {
    dog: Watchdog,
    rx: Receiver<Suspicion>,
}

/// Starts four watchdogs over [`LAYOUT`] with the given clock offsets.
fn watch_layout(store: &StoreServer, offsets: [i64; 4]) -> Result<Vec<Member>, String> {
    let cfg = WatchdogConfig::default();
    let members: Vec<Member> = offsets
        .iter()
        .map(|&o| {
            let (tx, rx) = mpsc::channel();
            let clock = Arc::new(Skewed {
                base: MonotonicClock::new(),
                offset_s: o,
            });
            Watchdog::start_with_clock(cfg, tx, clock)
                .map(|dog| Member { dog, rx })
                .map_err(|e| e.to_string())
        })
        .collect::<Result<_, _>>()?;
    for (name, ids) in LAYOUT {
        for (rank, &i) in ids.iter().enumerate() {
            members[i]
                .dog
                .watch(watched(name, rank as u32, ids.len() as u32, store));
        }
    }
    Ok(members)
}

/// Stops `victim` and returns the slowest detection among the survivors
/// that share a world with it.
fn kill_and_detect(members: &[Member], victim: usize) -> Result<Duration, String> {
    for (i, m) in members.iter().enumerate() {
        if let Ok(s) = m.rx.try_recv() {
            return Err(format!("member {i} suspected {s:?} before the kill"));
        }
    }
    let mut expected: BTreeSet<(usize, &str, u32)> = BTreeSet::new();
    for (name, ids) in LAYOUT {
        if let Some(vr) = ids.iter().position(|&i| i == victim) {
            for &i in ids.iter().filter(|&&i| i != victim) {
                expected.insert((i, name, vr as u32));
            }
        }
    }
    let bound = WatchdogConfig::default().detection_bound();
    let t = Instant::now();
    members[victim].dog.stop();
    let mut slowest = Duration::ZERO;
    let deadline = t + bound + Duration::from_secs(1);
    while !expected.is_empty() && Instant::now() < deadline {
        for (i, m) in members.iter().enumerate() {
            while let Ok(s) = m.rx.try_recv() {
                let key = LAYOUT
                    .iter()
                    .find(|(n, _)| *n == s.world)
                    .map(|(n, _)| *n)
                    .unwrap_or("");
                let hit = expected
                    .iter()
                    .find(|e| e.0 == i && e.1 == key && Some(e.2) == s.rank)
                    .copied();
                match hit {
                    Some(e) => {
                        expected.remove(&e);
                        slowest = slowest.max(t.elapsed());
                    }
                    None => return Err(format!("member {i} raised an unexpected {s:?}")),
                }
            }
        }
        thread::sleep(Duration::from_millis(2));
    }
    ensure(expected.is_empty(), || {
        format!("undetected after {:?}: {expected:?}", t.elapsed())
    })?;
    ensure(slowest <= bound, || format!("detection took {slowest:?}"))?;
    Ok(slowest)
}

fn randomized_kills(n: usize) -> Result<String, String> {
    let mut rng = StdRng::seed_from_u64(0xdead);
    let plan: Vec<(usize, u64)> = (0..n)
        .map(|_| (rng.gen_range(0..4), rng.gen_range(1500..3000)))
        .collect();
    let mut worst = Duration::ZERO;
    for batch in plan.chunks(4) {
        let results: Vec<Result<Duration, String>> = thread::scope(|sc| {
            let hs: Vec<_> = batch
                .iter()
                .map(|&(victim, delay_ms)| {
                    sc.spawn(move || {
                        let s = common::store();
                        let members = watch_layout(&s, [0; 4])?;
                        thread::sleep(Duration::from_millis(delay_ms));
                        let d = kill_and_detect(&members, victim);
                        for m in &members {
                            m.dog.stop();
                        }
                        d
                    })
                })
                .collect();
            hs.into_iter()
                .map(|h| h.join().unwrap_or_else(|_| Err("panicked".into())))
                .collect()
        });
        for r in results {
            worst = worst.max(r?);
        }
    }
    Ok(format!(
        "{n}/{n} kills detected, slowest {:.2} s",
        worst.as_secs_f64()
    ))
}

fn skew() -> Result<String, String> {
    let cfg = WatchdogConfig::default();
    let floor = cfg
        .liveness_timeout
        .saturating_sub(cfg.heartbeat_interval + cfg.scan_interval);
    let mut seen = Vec::new();
    for offset in [-3600i64, 0, 3600] {
        let s = common::store();
        let members = watch_layout(&s, [offset, -offset, 0, offset])?;
        thread::sleep(Duration::from_millis(2500));
        let d = kill_and_detect(&members, 1);
        for m in &members {
            m.dog.stop();
        }
        let d = d.map_err(|e| format!("offset {offset} s: {e}"))?;
        ensure(d >= floor, || {
            format!("offset {offset} s: detected after only {d:?}")
        })?;
        seen.push(format!("{offset:+} s: {:.2} s", d.as_secs_f64()));
    }
    Ok(seen.join(", "))
}

fn watchdog_properties() -> Verdict {
    let started = Instant::now();
    let soak = soak(Duration::from_secs(60)).map_err(|e| format!("soak: {e}"))?;
    let kills = randomized_kills(20).map_err(|e| format!("kills: {e}"))?;
    let skew = skew().map_err(|e| format!("skew: {e}"))?;
    Ok(format!(
        "soak {soak}; {kills}; detection under skew {skew}; {:.0} s",
        started.elapsed().as_secs_f64()
    ))
}

// 7

fn store_properties() -> Verdict {
    let started = Instant::now();
    let s = common::store();
    let addr = s.local_addr().to_string();
    for n in 1..=8usize {
        for k in 1..=8usize {
            let key = format!("ctr/{n}/{k}");
            let gate = Arc::new(Barrier::new(n));
            let hs: Vec<_> = (0..n)
                .map(|_| {
                    let (addr, gate, key) = (addr.clone(), gate.clone(), key.clone());
                    thread::spawn(move || -> multiworld::Result<()> {
                        let mut c = StoreClient::connect(&addr)?;
                        gate.wait();
                        for _ in 0..k {
                            c.add(&key, 1)?;
                        }
                        Ok(())
                    })
                })
                .collect();
            for h in hs {
                h.join()
                    .map_err(|_| "adder panicked".to_string())?
                    .map_err(|e| e.to_string())?;
            }
            let got = StoreClient::connect(&addr)
                .and_then(|mut c| c.get_counter(&key))
                .map_err(|e| e.to_string())?;
            ensure(got == (n * k) as i64, || {
                format!("{n} clients x {k} adds gave {got}")
            })?;
        }
    }
    let mut rng = StdRng::seed_from_u64(7);
    for i in 0..100 {
        let key = format!("race/{i}");
        let delay = Duration::from_micros(rng.gen_range(0..3000));
        let (a, k) = (addr.clone(), key.clone());
        let setter = thread::spawn(move || {
            thread::sleep(delay);
            StoreClient::connect(&a).and_then(|mut c| c.set(&k, b"v"))
        });
        let got = StoreClient::connect(&addr)
            .and_then(|mut c| c.wait(&key, Duration::from_secs(5)))
            .map_err(|e| format!("wait/set race {i}: {e}"))?;
        ensure(got == b"v", || {
            format!("wait/set race {i} returned {got:?}")
        })?;
        setter
            .join()
            .map_err(|_| "setter panicked".to_string())?
            .map_err(|e| e.to_string())?;
    }
    let histories = 200;
    for seed in 0..histories {
        let h = linearize::record(&addr, &format!("lin/{seed}"), seed);
        ensure(linearize::linearizable(&h, None), || {
            format!("history {seed} not linearizable: {h:?}")
        })?;
    }
    within(started, Duration::from_secs(60), "store checks")?;
    Ok(format!(
        "64 counter grids exact, 100 wait/set races, {histories} histories linearizable"
    ))
}

// 8

fn cross_world_recvs(w2_first: bool) -> Result<(), String> {
    let s = common::store();
    let (leader, p2, p3) = (common::manager(), common::manager(), common::manager());
    common::form("w1", &[&leader, &p2], &s);
    common::form("w2", &[&leader, &p3], &s);
    let c = leader.communicator();
    let e = |e: multiworld::MwError| e.to_string();
    let h1 = c.irecv("w1", 1, DType::F32, 2).map_err(e)?;
    let h2 = c.irecv("w2", 1, DType::F32, 2).map_err(e)?;
    let (first, fw, hf, later, lw, hl) = if w2_first {
        (&p3, "w2", &h2, &p2, "w1", &h1)
    } else {
        (&p2, "w1", &h1, &p3, "w2", &h2)
    };
    let t = Duration::from_secs(5);
    first
        .communicator()
        .send(fw, 0, Buffer::from_slice(&[1.0f32, 1.0]))
        .map_err(e)?;
    hf.wait(Some(t)).map_err(e)?;
    ensure(hl.poll() == WorkStatus::Pending, || {
        "second receive finished early".into()
    })?;
    later
        .communicator()
        .send(lw, 0, Buffer::from_slice(&[2.0f32, 2.0]))
        .map_err(e)?;
    let got = hl.wait(Some(t)).map_err(e)?;
    let v = got.buffer().and_then(|b| b.to_vec::<f32>().ok());
    ensure(v == Some(vec![2.0, 2.0]), || {
        format!("second receive got {v:?}")
    })
}

fn non_blocking_surface() -> Verdict {
    let started = Instant::now();
    cross_world_recvs(true).map_err(|e| format!("w2 first: {e}"))?;
    cross_world_recvs(false).map_err(|e| format!("w1 first: {e}"))?;
    let bound = common::fast_watchdog().liveness_timeout + Duration::from_secs(1);
    let mut handles = 0;
    for seed in 0..50 {
        let t = chaos::exactly_once_trial(seed, &common::fast_manager, bound)
            .map_err(|e| format!("schedule {seed}: {e}"))?;
        ensure(t.settle <= bound, || format!("schedule {seed}: {t:?}"))?;
        handles += t.handles;
    }
    within(started, Duration::from_secs(120), "non-blocking checks")?;
    Ok(format!(
        "both satisfaction orders complete, {handles} handles exactly once over 50 kill schedules"
    ))
}

// 9

fn golden_files() -> Verdict {
    let results = golden::check_all();
    let bad: Vec<String> = results
        .iter()
        .filter_map(|(n, r)| r.as_ref().err().map(|e| format!("{n}: {e}")))
        .collect();
    ensure(bad.is_empty(), || bad.join("; "))?;
    let payload = Buffer::from_slice(&[1.0f32, 2.0]);
    ensure(
        payload.as_bytes() == [0x00, 0x00, 0x80, 0x3F, 0x00, 0x00, 0x00, 0x40],
        || format!("F32 [1.0, 2.0] encodes as {:02X?}", payload.as_bytes()),
    )?;
    Ok(format!("{} fixtures byte-exact", results.len()))
}

fn main() {
    // children inherit this; one core is not enough for several spinning pollers
    std::env::set_var("MW_POLLER_YIELD", "1");
    let only: Vec<usize> = std::env::args()
        .skip(1)
        .filter_map(|a| a.parse().ok())
        .collect();
    let criteria: [Criterion; 9] = [
        ("collective correctness", collective_correctness),
        ("fault-domain isolation", fault_domains),
        ("fault tolerance", fault_tolerance),
        ("online instantiation", online_instantiation),
        ("multi-world overhead", overhead),
        ("watchdog", watchdog_properties),
        ("store", store_properties),
        ("non-blocking surface", non_blocking_surface),
        ("wire format", golden_files),
    ];
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let n = i + 1;
        if !only.is_empty() && !only.contains(&n) {
            continue;
        }
        let started = Instant::now();
        let verdict = panic::catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let secs = started.elapsed().as_secs_f64();
        match verdict {
            Ok(detail) => println!("[PASS] {n} {name} ({secs:.0} s): {detail}"),
            Err(why) => {
                failed += 1;
                println!("[FAIL] {n} {name} ({secs:.0} s): {why}");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
