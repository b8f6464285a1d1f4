//! A leader fed by two workers, one of which dies after a fixed number of
//! messages.

use std::thread;
use std::time::{Duration, Instant};

use clap::Args;
use multiworld::{DType, StoreServer, WorkHandle, WorldManager};
use serde_json::{json, Value};

use crate::emit::Emitter;
use crate::fleet::Fleet;
use crate::member::{self, FLAG_DATA};
use crate::{Common, Failure, Outcome};

const JOIN_TIMEOUT: Duration = Duration::from_secs(30);
const STALL_LIMIT: Duration = Duration::from_secs(10);

#[derive(Args, Debug)]
pub struct FaultArgs {
    #[command(flatten)]
    pub common: Common,
    /// leader, workerA, workerB, or `all` to drive the three.
    #[arg(long, default_value = "all")]
    pub role: String,
    /// Message size in bytes.
    #[arg(long, default_value_t = 4096)]
    pub size: usize,
    /// Messages workerA sends.
    #[arg(long, default_value_t = 45)]
    pub count: u64,
    /// workerA's messages per second; workerB sends at half this rate.
    #[arg(long, default_value_t = 1.0)]
    pub rate: f64,
    /// workerB exits right after sending this many messages.
    #[arg(long, default_value_t = 10)]
    pub kill_after: u64,
    /// Put all three processes in one world instead of one world per worker.
    #[arg(long)]
    pub single_world: bool,
}

/// Where each worker sits: (world, size, worker rank).
fn placement(single: bool, worker: &str) -> (&'static str, u32, u32) {
    match (single, worker) {
        (true, "workerA") => ("w1", 3, 1),
        (true, _) => ("w1", 3, 2),
        (false, "workerA") => ("w1", 2, 1),
        (false, _) => ("w2", 2, 1),
    }
}

pub fn run(a: FaultArgs) -> Outcome {
    let out = Emitter::new(a.common.out.as_deref())?;
    match a.role.as_str() {
        "all" => drive(&a, &out),
        "leader" => leader(&a, &member::store_addr(&a.common.store)?, &out),
        "workerA" | "workerB" => worker(&a, &member::store_addr(&a.common.store)?, &out),
        r => Err(Failure::Env(format!("unknown fault role {r}"))),
    }
}

fn worker(a: &FaultArgs, store: &str, out: &Emitter) -> Outcome {
    let m = member::manager()?;
    member::report_status(&m, out);
    let (world, size, rank) = placement(a.single_world, &a.role);
    member::join_all(&m, store, &[(world, size, rank)], JOIN_TIMEOUT)?;
    out.emit(
        "ready",
        json!({ "role": a.role, "world": world, "rank": rank }),
    );
    let is_b = a.role == "workerB";
    let rate = if is_b { a.rate / 2.0 } else { a.rate };
    let period = Duration::from_secs_f64(1.0 / rate.max(1e-3));
    let comm = m.communicator();
    let start = Instant::now();
    let mut sent = 0u64;
    loop {
        if is_b && sent == a.kill_after {
            out.emit("dying", json!({ "sent": sent }));
            std::process::exit(0);
        }
        if !is_b && sent == a.count {
            break;
        }
        let due = start + period.mul_f64(sent as f64);
        thread::sleep(due.saturating_duration_since(Instant::now()));
        let res = comm
            .isend(world, 0, member::message(sent as i64, FLAG_DATA, a.size))
            .and_then(|h| h.wait(Some(Duration::from_secs(30))));
        if let Err(e) = res {
            out.emit("stopped", json!({ "sent": sent, "error": e.to_string() }));
            m.shutdown();
            return Ok(());
        }
        sent += 1;
    }
    out.emit("done", json!({ "sent": sent }));
    thread::sleep(Duration::from_secs(1));
    m.shutdown();
    Ok(())
}

struct Source {
    who: &'static str,
    world: &'static str,
    rank: u32,
    pending: Option<WorkHandle>,
    received: u64,
    error: Option<String>,
}

fn leader(a: &FaultArgs, store: &str, out: &Emitter) -> Outcome {
    let m = member::manager()?;
    member::report_status(&m, out);
    let plan: Vec<(&str, u32, u32)> = if a.single_world {
        vec![("w1", 3, 0)]
    } else {
        vec![("w1", 2, 0), ("w2", 2, 0)]
    };
    member::join_all(&m, store, &plan, JOIN_TIMEOUT)?;
    out.emit(
        "ready",
        json!({ "role": "leader", "single_world": a.single_world }),
    );

    let mut sources: Vec<Source> = ["workerA", "workerB"]
        .into_iter()
        .map(|who| {
            let (world, _, rank) = placement(a.single_world, who);
            Source {
                who,
                world,
                rank,
                pending: None,
                received: 0,
                error: None,
            }
        })
        .collect();
    let len = member::message_len(a.size);
    let post = |m: &WorldManager, s: &mut Source| match m.communicator().irecv(
        s.world,
        s.rank,
        DType::I64,
        len,
    ) {
        Ok(h) => s.pending = Some(h),
        Err(e) => s.error = Some(e.to_string()),
    };
    for s in &mut sources {
        post(&m, s);
    }

    let comm = m.communicator();
    let mut last = Instant::now();
    let mut max_gap = Duration::ZERO;
    let mut a_after_failure = 0u64;
    let mut first_failure: Option<Instant> = None;
    let mut halted = false;
    while sources[0].received < a.count {
        let live: Vec<usize> = (0..sources.len())
            .filter(|&i| sources[i].pending.is_some())
            .collect();
        if live.is_empty() {
            halted = true;
            break;
        }
        let hs: Vec<WorkHandle> = live
            .iter()
            .map(|&i| sources[i].pending.clone().unwrap())
            .collect();
        let Ok(k) = comm.wait_any(&hs, Some(Duration::from_millis(100))) else {
            if last.elapsed() > STALL_LIMIT * 3 {
                break;
            }
            continue;
        };
        let i = live[k];
        let h = sources[i].pending.take().unwrap();
        match h.wait(Some(Duration::ZERO)) {
            Ok(_) => {
                let now = Instant::now();
                max_gap = max_gap.max(now - last);
                last = now;
                let s = &mut sources[i];
                s.received += 1;
                out.emit(
                    "received",
                    json!({ "from": s.who, "world": s.world, "n": s.received }),
                );
                if i == 0 && first_failure.is_some() {
                    a_after_failure += 1;
                }
                post(&m, &mut sources[i]);
            }
            Err(e) => {
                first_failure.get_or_insert_with(Instant::now);
                out.emit("recv_failed", json!({ "from": sources[i].who, "world": sources[i].world, "error": e.to_string() }));
                sources[i].error = Some(e.to_string());
                if a.single_world {
                    halted = true;
                    break;
                }
            }
        }
    }
    for s in sources.iter().filter(|s| s.error.is_some()) {
        let until = Instant::now() + Duration::from_secs(5);
        while member::is_ready(&m, s.world) && Instant::now() < until {
            thread::sleep(Duration::from_millis(5));
        }
    }
    let broken: Vec<String> = m
        .worlds()
        .into_iter()
        .filter(|(_, s)| *s == multiworld::WorldStatus::Broken)
        .map(|(w, _)| w)
        .collect();
    out.emit(
        "report",
        json!({
            "role": "leader",
            "single_world": a.single_world,
            "received_a": sources[0].received,
            "received_b": sources[1].received,
            "a_after_failure": a_after_failure,
            "max_gap_ms": max_gap.as_secs_f64() * 1e3,
            "halted": halted,
            "broken": broken,
            "errors": sources.iter().map(|s| (s.who, s.error.clone())).collect::<std::collections::BTreeMap<_, _>>(),
        }),
    );
    m.shutdown();
    Ok(())
}

fn drive(a: &FaultArgs, out: &Emitter) -> Outcome {
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
    let mut fleet = Fleet::new(out.clone());
    for role in ["leader", "workerA", "workerB"] {
        let mut args: Vec<String> = vec![
            "fault".into(),
            "--role".into(),
            role.into(),
            "--store".into(),
            store.clone(),
            "--size".into(),
            a.size.to_string(),
            "--count".into(),
            a.count.to_string(),
            "--rate".into(),
            a.rate.to_string(),
            "--kill-after".into(),
            a.kill_after.to_string(),
        ];
        if a.single_world {
            args.push("--single-world".into());
        }
        fleet.spawn(role, &args)?;
    }
    for role in ["leader", "workerA", "workerB"] {
        if fleet
            .wait_for(JOIN_TIMEOUT, |e| e.is(role, "ready"))
            .is_none()
        {
            fleet.finish(Duration::from_secs(1));
            return Err(Failure::Env(format!("{role} never became ready")));
        }
    }
    let mut problems = Vec::new();
    let b_time = Duration::from_secs_f64(a.kill_after as f64 * 2.0 / a.rate.max(1e-3))
        + Duration::from_secs(30);
    let death = fleet
        .wait_for(b_time, |e| e.is("workerB", "dying"))
        .map(|e| e.at);
    let lost = if a.single_world { "w1" } else { "w2" };
    let mut detect_ms = None;
    match death {
        None => problems.push("workerB never exited".to_string()),
        Some(t) => {
            let hit = fleet.wait_for(Duration::from_secs(15), |e| {
                e.is("leader", "status") && e.rec["world"] == lost && e.rec["to"] == "Broken"
            });
            match hit {
                Some(e) => detect_ms = Some(e.at.saturating_duration_since(t).as_secs_f64() * 1e3),
                None => problems.push(format!("leader never reported {lost} broken")),
            }
        }
    }
    let a_time =
        Duration::from_secs_f64(a.count as f64 / a.rate.max(1e-3)) + Duration::from_secs(30);
    let report = fleet
        .wait_for(a_time, |e| e.is("leader", "report"))
        .map(|e| e.rec);
    let exits = fleet.finish(Duration::from_secs(10));

    let report = report.unwrap_or(Value::Null);
    if report.is_null() {
        problems.push("leader produced no report".into());
    } else if a.single_world {
        if report["halted"] != true {
            problems.push("single-world leader kept running after the failure".into());
        }
    } else {
        let after = report["a_after_failure"].as_u64().unwrap_or(0);
        if after < 20 {
            problems.push(format!(
                "only {after} messages from workerA after the failure"
            ));
        }
        let gap = report["max_gap_ms"].as_f64().unwrap_or(f64::INFINITY);
        if gap > STALL_LIMIT.as_secs_f64() * 1e3 {
            problems.push(format!("leader stalled for {gap:.0} ms"));
        }
        if report["broken"] != json!(["w2"]) {
            problems.push(format!(
                "broken worlds {} instead of [w2]",
                report["broken"]
            ));
        }
        if report["halted"] == true {
            problems.push("multi-world leader halted".into());
        }
    }
    if let Some(ms) = detect_ms {
        if !(0.0..=3500.0).contains(&ms) {
            problems.push(format!("detection took {ms:.0} ms"));
        }
    }
    if exits.iter().any(|(r, c)| r == "leader" && *c != Some(0)) {
        problems.push("leader exited abnormally".into());
    }
    let pass = problems.is_empty();
    out.emit(
        "summary",
        json!({
            "scenario": "fault",
            "single_world": a.single_world,
            "detect_ms": detect_ms,
            "leader": report,
            "problems": problems,
            "pass": pass,
        }),
    );
    if pass {
        Ok(())
    } else {
        Err(Failure::Scenario(problems.join("; ")))
    }
}
