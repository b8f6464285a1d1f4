//! Two-path pipeline P1 -> {P2, P3} -> P4, with an optional replacement P5.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::mpsc::Receiver;
use std::thread;
use std::time::{Duration, Instant};

use clap::Args;
use multiworld::{
    Buffer, DType, InitTicket, ReduceOp, StoreServer, WorkHandle, WorldDescriptor, WorldManager,
    WorldStatus,
};
use serde_json::{json, Value};

use crate::emit::Emitter;
use crate::fleet::Fleet;
use crate::member::{self, FLAG_DATA, FLAG_STOP};
use crate::{Common, Failure, Outcome};

const MEMBERS: [&str; 4] = ["P1", "P2", "P3", "P4"];
const JOIN_TIMEOUT: Duration = Duration::from_secs(30);
const SEND_WAIT: Duration = Duration::from_secs(10);

#[derive(Args, Debug)]
pub struct RhombusArgs {
    #[command(flatten)]
    pub common: Common,
    /// P1..P5 for one member, or `all` to drive the whole pipeline.
    #[arg(long, default_value = "all")]
    pub role: String,
    /// Message size in bytes.
    #[arg(long, default_value_t = 4096)]
    pub size: usize,
    /// Messages per second emitted by P1.
    #[arg(long, default_value_t = 100.0)]
    pub rate: f64,
    /// Messages P1 sends when nobody is killed.
    #[arg(long, default_value_t = 200)]
    pub count: u64,
    /// Member to kill.
    #[arg(long)]
    pub kill: Option<String>,
    /// Kill once P4 has received this many messages.
    #[arg(long, default_value_t = 20)]
    pub kill_at: u64,
    /// After the kill, bring up P5 with worlds w6 (P1, P5) and w7 (P5, P4).
    #[arg(long)]
    pub recover: bool,
}

/// Worlds a member receives on and sends on.
fn edges(role: &str) -> Option<(Vec<&'static str>, Vec<&'static str>)> {
    Some(match role {
        "P1" => (vec![], vec!["w1", "w2"]),
        "P2" => (vec!["w1"], vec!["w3"]),
        "P3" => (vec!["w2"], vec!["w4"]),
        "P4" => (vec!["w3", "w4"], vec![]),
        "P5" => (vec!["w6"], vec!["w7"]),
        _ => return None,
    })
}

fn worlds_of(role: &str) -> Vec<&'static str> {
    edges(role)
        .map(|(i, o)| i.into_iter().chain(o).collect())
        .unwrap_or_default()
}

pub fn run(a: RhombusArgs) -> Outcome {
    let out = Emitter::new(a.common.out.as_deref())?;
    if a.role == "all" {
        return drive(&a, &out);
    }
    if edges(&a.role).is_none() {
        return Err(Failure::Env(format!("unknown rhombus role {}", a.role)));
    }
    let store = member::store_addr(&a.common.store)?;
    Node::start(&a, &store, out)?.run()
}

struct InEdge {
    world: String,
    pending: Option<WorkHandle>,
    done: bool,
    failed: bool,
    received: u64,
}

struct OutEdge {
    world: String,
    dead: bool,
    stopped: bool,
    sent: u64,
}

struct Node {
    role: String,
    size: usize,
    store: String,
    m: WorldManager,
    out: Emitter,
    cmds: Receiver<String>,
    ins: Vec<InEdge>,
    outs: Vec<OutEdge>,
    joining: Vec<(InitTicket, bool)>,
    /// P1 only: messages left to emit, `None` for unbounded.
    budget: Option<u64>,
    rate: f64,
    next_out: usize,
}

impl Node {
    fn start(a: &RhombusArgs, store: &str, out: Emitter) -> Result<Node, Failure> {
        let (ins, outs) = edges(&a.role).unwrap();
        let m = member::manager()?;
        member::report_status(&m, &out);
        let plan: Vec<(&str, u32, u32)> = ins
            .iter()
            .map(|w| (*w, 2, 1))
            .chain(outs.iter().map(|w| (*w, 2, 0)))
            .collect();
        member::join_all(&m, store, &plan, JOIN_TIMEOUT)?;
        out.emit("ready", json!({ "role": a.role }));
        let mut node = Node {
            role: a.role.clone(),
            size: a.size,
            store: store.to_string(),
            m,
            out,
            cmds: member::commands(),
            ins: Vec::new(),
            outs: outs.iter().map(|w| OutEdge::new(w)).collect(),
            joining: Vec::new(),
            budget: (a.kill.is_none() && a.role == "P1").then_some(a.count),
            rate: a.rate,
            next_out: 0,
        };
        for w in ins {
            node.add_in(w)?;
        }
        Ok(node)
    }

    fn is_source(&self) -> bool {
        self.role == "P1"
    }

    fn add_in(&mut self, world: &str) -> Result<(), Failure> {
        let mut e = InEdge {
            world: world.to_string(),
            pending: None,
            done: false,
            failed: false,
            received: 0,
        };
        self.post(&mut e);
        self.ins.push(e);
        Ok(())
    }

    fn post(&self, e: &mut InEdge) {
        match self
            .m
            .communicator()
            .irecv(&e.world, 0, DType::I64, member::message_len(self.size))
        {
            Ok(h) => e.pending = Some(h),
            Err(_) => {
                e.pending = None;
                e.done = true;
                e.failed = true;
            }
        }
    }

    /// Blocking send on one out edge; a failure retires the edge.
    fn send(&mut self, i: usize, flag: i64) {
        let o = &mut self.outs[i];
        if o.dead || o.stopped {
            return;
        }
        let msg = member::message(o.sent as i64, flag, self.size);
        let res = self
            .m
            .communicator()
            .isend(&o.world, 1, msg)
            .and_then(|h| h.wait(Some(SEND_WAIT)));
        match res {
            Ok(_) if flag == FLAG_STOP => o.stopped = true,
            Ok(_) => o.sent += 1,
            Err(_) => o.dead = true,
        }
    }

    /// Next live out edge in round-robin order.
    fn pick_out(&mut self) -> Option<usize> {
        let n = self.outs.len();
        for k in 0..n {
            let i = (self.next_out + k) % n;
            let o = &self.outs[i];
            if !o.dead && !o.stopped && member::is_ready(&self.m, &o.world) {
                self.next_out = (i + 1) % n;
                return Some(i);
            }
        }
        None
    }

    fn stop_outs(&mut self) {
        for i in 0..self.outs.len() {
            self.send(i, FLAG_STOP);
        }
    }

    fn recover(&mut self) -> Result<(), Failure> {
        let (world, rank) = match self.role.as_str() {
            "P1" => ("w6", 0),
            "P4" => ("w7", 1),
            _ => return Ok(()),
        };
        let d = WorldDescriptor::new(world, 2, rank, &self.store, "127.0.0.1:0");
        let t = self
            .m
            .initialize_world_async(d, Some(JOIN_TIMEOUT))
            .map_err(Failure::env)?;
        self.joining.push((t, rank == 1));
        Ok(())
    }

    fn settle_joins(&mut self) -> Result<(), Failure> {
        let mut i = 0;
        while i < self.joining.len() {
            if !self.joining[i].0.is_finished() {
                i += 1;
                continue;
            }
            let (t, inbound) = self.joining.remove(i);
            let world = t.world().to_string();
            match t.wait() {
                Ok(()) if inbound => self.add_in(&world)?,
                Ok(()) => self.outs.push(OutEdge::new(&world)),
                Err(e) => self.out.emit(
                    "join_failed",
                    json!({ "world": world, "error": e.to_string() }),
                ),
            }
        }
        Ok(())
    }

    fn progress(&self) {
        let per: BTreeMap<_, _> = self
            .ins
            .iter()
            .map(|e| (e.world.clone(), e.received))
            .collect();
        let total: u64 = per.values().sum();
        self.out
            .emit("progress", json!({ "received": total, "per_world": per }));
    }

    fn run(mut self) -> Outcome {
        let period = Duration::from_secs_f64(1.0 / self.rate.max(1e-3));
        let mut next_send = Instant::now();
        let mut stop_source = self.budget == Some(0);
        let mut forwarded = 0u64;
        loop {
            while let Ok(c) = self.cmds.try_recv() {
                match c.as_str() {
                    "round" => stop_source = true,
                    "recover" => self.recover()?,
                    _ => {}
                }
            }
            self.settle_joins()?;

            if self.is_source() {
                if stop_source {
                    if self.joining.is_empty() {
                        self.stop_outs();
                        break;
                    }
                } else if Instant::now() >= next_send {
                    if let Some(i) = self.pick_out() {
                        self.send(i, FLAG_DATA);
                        if let Some(b) = self.budget.as_mut() {
                            *b -= 1;
                            stop_source = *b == 0;
                        }
                    }
                    next_send += period;
                }
            }

            let live: Vec<usize> = (0..self.ins.len())
                .filter(|&i| self.ins[i].pending.is_some())
                .collect();
            if live.is_empty() {
                if !self.is_source() && self.joining.is_empty() {
                    self.stop_outs();
                    break;
                }
                thread::sleep(Duration::from_millis(2));
                continue;
            }
            let handles: Vec<WorkHandle> = live
                .iter()
                .map(|&i| self.ins[i].pending.clone().unwrap())
                .collect();
            let wait = if self.is_source() {
                next_send
                    .saturating_duration_since(Instant::now())
                    .min(Duration::from_millis(10))
            } else {
                Duration::from_millis(10)
            };
            let Ok(k) = self.m.communicator().wait_any(&handles, Some(wait)) else {
                continue;
            };
            let i = live[k];
            let h = self.ins[i].pending.take().unwrap();
            match h.wait(Some(Duration::ZERO)).map(|r| r.buffer()) {
                Ok(Some(buf)) => {
                    let (_, flag) = member::header(&buf);
                    if flag == FLAG_STOP {
                        self.ins[i].done = true;
                    } else {
                        self.ins[i].received += 1;
                        if let Some(o) = self.pick_out() {
                            self.send(o, FLAG_DATA);
                            forwarded += 1;
                        }
                        let mut e = std::mem::replace(&mut self.ins[i], InEdge::placeholder());
                        self.post(&mut e);
                        self.ins[i] = e;
                        if self.outs.is_empty()
                            && self.ins.iter().map(|e| e.received).sum::<u64>() % 10 == 0
                        {
                            self.progress();
                        }
                    }
                }
                _ => {
                    self.ins[i].done = true;
                    self.ins[i].failed = true;
                }
            }
        }
        self.progress();
        self.finish_round(forwarded)
    }

    /// One all-reduce on every world still Ready, then the final report.
    fn finish_round(self, forwarded: u64) -> Outcome {
        let comm = self.m.communicator();
        let mut mine: Vec<String> = self.ins.iter().map(|e| e.world.clone()).collect();
        mine.extend(self.outs.iter().map(|o| o.world.clone()));
        mine.sort();
        // a failed handle can precede the world's transition to Broken
        let seen_failing = self
            .ins
            .iter()
            .filter(|e| e.failed)
            .map(|e| &e.world)
            .chain(self.outs.iter().filter(|o| o.dead).map(|o| &o.world));
        for w in seen_failing {
            let until = Instant::now() + Duration::from_secs(5);
            while member::is_ready(&self.m, w) && Instant::now() < until {
                thread::sleep(Duration::from_millis(5));
            }
        }
        let statuses: BTreeMap<String, WorldStatus> = self.m.worlds().into_iter().collect();
        let broken: Vec<&String> = mine
            .iter()
            .filter(|w| statuses.get(*w) == Some(&WorldStatus::Broken))
            .collect();
        let started: Vec<(String, Result<WorkHandle, String>)> = mine
            .iter()
            .filter(|w| statuses.get(*w) == Some(&WorldStatus::Ready))
            .map(|w| {
                let h = comm.iall_reduce(w, Buffer::from_slice(&[1i64]), ReduceOp::Sum);
                (w.clone(), h.map_err(|e| e.to_string()))
            })
            .collect();
        let mut ok = Vec::new();
        let mut failed = BTreeMap::new();
        for (w, h) in started {
            let res = h.and_then(|h| {
                h.wait(Some(Duration::from_secs(15)))
                    .map_err(|e| e.to_string())
            });
            match res.map(|r| r.buffer().and_then(|b| b.to_vec::<i64>().ok())) {
                Ok(Some(v)) if v == [2] => ok.push(w),
                Ok(other) => {
                    failed.insert(w, format!("unexpected result {other:?}"));
                }
                Err(e) => {
                    failed.insert(w, e);
                }
            }
        }
        let received: BTreeMap<_, _> = self
            .ins
            .iter()
            .map(|e| (e.world.clone(), e.received))
            .collect();
        let sent: BTreeMap<_, _> = self
            .outs
            .iter()
            .map(|o| (o.world.clone(), o.sent))
            .collect();
        self.out.emit(
            "report",
            json!({
                "role": self.role,
                "broken": broken,
                "round_ok": ok,
                "round_failed": failed,
                "received": received,
                "sent": sent,
                "forwarded": forwarded,
            }),
        );
        self.m.shutdown();
        Ok(())
    }
}

impl OutEdge {
    fn new(world: &str) -> OutEdge {
        OutEdge {
            world: world.to_string(),
            dead: false,
            stopped: false,
            sent: 0,
        }
    }
}

impl InEdge {
    fn placeholder() -> InEdge {
        InEdge {
            world: String::new(),
            pending: None,
            done: true,
            failed: false,
            received: 0,
        }
    }
}

fn strings(v: &Value) -> BTreeSet<String> {
    v.as_array()
        .map(|a| {
            a.iter()
                .filter_map(|x| x.as_str().map(String::from))
                .collect()
        })
        .unwrap_or_default()
}

/// Runs P1..P4 (and P5 when recovering) as child processes and checks the
/// broken-world sets and the post-kill round.
fn drive(a: &RhombusArgs, out: &Emitter) -> Outcome {
    if let Some(v) = &a.kill {
        if !MEMBERS.contains(&v.as_str()) {
            return Err(Failure::Env(format!(
                "--kill must name one of P1..P4, got {v}"
            )));
        }
    }
    if a.recover && a.kill.as_deref() != Some("P3") {
        return Err(Failure::Env(
            "--recover replaces P3 and needs --kill P3".into(),
        ));
    }
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
    let args = |role: &str| -> Vec<String> {
        let mut v: Vec<String> = vec![
            "rhombus".into(),
            "--role".into(),
            role.into(),
            "--store".into(),
            store.clone(),
            "--size".into(),
            a.size.to_string(),
            "--rate".into(),
            a.rate.to_string(),
            "--count".into(),
            a.count.to_string(),
        ];
        if let Some(k) = &a.kill {
            v.extend(["--kill".into(), k.clone()]);
        }
        v
    };
    let mut fleet = Fleet::new(out.clone());
    for p in MEMBERS {
        fleet.spawn(p, &args(p))?;
    }
    for p in MEMBERS {
        if fleet.wait_for(JOIN_TIMEOUT, |e| e.is(p, "ready")).is_none() {
            fleet.finish(Duration::from_secs(1));
            return Err(Failure::Env(format!("{p} never became ready")));
        }
    }

    let mut survivors: Vec<&str> = MEMBERS.to_vec();
    let mut expected: BTreeMap<&str, BTreeSet<String>> =
        MEMBERS.iter().map(|p| (*p, BTreeSet::new())).collect();
    let mut detect_ms: BTreeMap<String, f64> = BTreeMap::new();
    let mut problems: Vec<String> = Vec::new();

    if let Some(victim) = a.kill.clone() {
        let reached = fleet.wait_for(Duration::from_secs(60), |e| {
            e.is("P4", "progress") && e.rec["received"].as_u64().unwrap_or(0) >= a.kill_at
        });
        if reached.is_none() {
            problems.push(format!("P4 never reached {} messages", a.kill_at));
        }
        let killed = fleet.kill(&victim);
        survivors.retain(|p| *p != victim);
        let doomed: BTreeSet<&str> = worlds_of(&victim).into_iter().collect();
        for p in &survivors {
            let set = worlds_of(p)
                .into_iter()
                .filter(|w| doomed.contains(w))
                .map(String::from)
                .collect();
            expected.insert(p, set);
        }
        let bound = Duration::from_secs(10);
        for p in survivors.clone() {
            for w in expected[p].clone() {
                let hit = fleet.wait_for(bound, |e| {
                    e.is(p, "status") && e.rec["world"] == w.as_str() && e.rec["to"] == "Broken"
                });
                match hit {
                    Some(e) => {
                        let ms = e.at.saturating_duration_since(killed).as_secs_f64() * 1e3;
                        detect_ms.insert(format!("{p}/{w}"), ms);
                    }
                    None => problems.push(format!("{p} did not report {w} broken")),
                }
            }
        }
        if a.recover {
            fleet.spawn("P5", &args("P5"))?;
            fleet.command("P1", "recover");
            fleet.command("P4", "recover");
            let flowed = fleet.wait_for(Duration::from_secs(60), |e| {
                e.is("P4", "progress") && e.rec["per_world"]["w7"].as_u64().unwrap_or(0) >= 5
            });
            if flowed.is_none() {
                problems.push("no messages reached P4 through P5".into());
            }
            survivors.push("P5");
            expected.insert("P5", BTreeSet::new());
        }
        fleet.command("P1", "round");
    }

    let mut reports: BTreeMap<String, Value> = BTreeMap::new();
    for p in survivors.clone() {
        match fleet.wait_for(Duration::from_secs(60), |e| e.is(p, "report")) {
            Some(e) => {
                reports.insert(p.to_string(), e.rec.clone());
            }
            None => problems.push(format!("{p} produced no report")),
        }
    }
    let exits = fleet.finish(Duration::from_secs(10));

    for (p, r) in &reports {
        let want = &expected[p.as_str()];
        let broken = strings(&r["broken"]);
        if &broken != want {
            problems.push(format!("{p}: broken {broken:?}, expected {want:?}"));
        }
        let mine: BTreeSet<String> = worlds_of(p)
            .into_iter()
            .map(String::from)
            .chain(match (p.as_str(), a.recover) {
                ("P1", true) => Some("w6".to_string()),
                ("P4", true) => Some("w7".to_string()),
                _ => None,
            })
            .collect();
        let should_round: BTreeSet<String> = mine.difference(want).cloned().collect();
        let rounded = strings(&r["round_ok"]);
        if rounded != should_round {
            problems.push(format!(
                "{p}: round completed on {rounded:?}, expected {should_round:?}; failures {}",
                r["round_failed"]
            ));
        }
    }
    if a.kill.is_none() {
        let got: u64 = reports
            .get("P4")
            .and_then(|r| r["received"].as_object())
            .map(|m| m.values().filter_map(|v| v.as_u64()).sum())
            .unwrap_or(0);
        if got != a.count {
            problems.push(format!("P4 received {got} of {} messages", a.count));
        }
    }
    for (p, code) in &exits {
        if survivors.contains(&p.as_str()) && *code != Some(0) {
            problems.push(format!("{p} exited with {code:?}"));
        }
    }

    let pass = problems.is_empty();
    out.emit(
        "summary",
        json!({
            "scenario": "rhombus",
            "victim": a.kill,
            "recover": a.recover,
            "expected_broken": expected,
            "detect_ms": detect_ms,
            "reports": reports,
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
