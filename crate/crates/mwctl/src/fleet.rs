use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, Command, ExitStatus, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::thread;
use std::time::{Duration, Instant};

use serde_json::{json, Value};

use crate::emit::Emitter;
use crate::Failure;

/// A record read from a child's stdout.
#[derive(Debug, Clone)]
pub struct Event {
    pub from: String,
    pub at: Instant,
    pub rec: Value,
}

impl Event {
    pub fn kind(&self) -> &str {
        self.rec["event"].as_str().unwrap_or("")
    }

    pub fn is(&self, from: &str, kind: &str) -> bool {
        self.from == from && self.kind() == kind
    }
}

struct Member {
    name: String,
    child: Child,
    stdin: Option<ChildStdin>,
    exit: Option<ExitStatus>,
}

/// Child processes of one scenario run, driven over stdin and observed
/// through their JSON-lines stdout.
pub struct Fleet {
    members: Vec<Member>,
    tx: Sender<Event>,
    rx: Receiver<Event>,
    pub log: Vec<Event>,
    pub start: Instant,
    out: Emitter,
}

impl Fleet {
    pub fn new(out: Emitter) -> Fleet {
        let (tx, rx) = mpsc::channel();
        Fleet {
            members: Vec::new(),
            tx,
            rx,
            log: Vec::new(),
            start: Instant::now(),
            out,
        }
    }

    /// Launches this executable with `args` as member `name`.
    pub fn spawn(&mut self, name: &str, args: &[String]) -> Result<(), Failure> {
        let exe = std::env::current_exe().map_err(Failure::env)?;
        let mut child = Command::new(exe)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| Failure::Env(format!("cannot launch {name}: {e}")))?;
        let stdout = child.stdout.take().expect("piped stdout");
        let tx = self.tx.clone();
        let from = name.to_string();
        thread::spawn(move || {
            for line in BufReader::new(stdout).lines() {
                let Ok(line) = line else { break };
                let rec = serde_json::from_str::<Value>(&line)
                    .unwrap_or_else(|_| json!({ "event": "text", "line": line }));
                let ev = Event {
                    from: from.clone(),
                    at: Instant::now(),
                    rec,
                };
                if tx.send(ev).is_err() {
                    return;
                }
            }
            let _ = tx.send(Event {
                from,
                at: Instant::now(),
                rec: json!({ "event": "eof" }),
            });
        });
        self.members.push(Member {
            name: name.to_string(),
            stdin: child.stdin.take(),
            child,
            exit: None,
        });
        Ok(())
    }

    /// Writes one command line to a member's stdin.
    pub fn command(&mut self, name: &str, cmd: &str) {
        if let Some(m) = self.members.iter_mut().find(|m| m.name == name) {
            if let Some(s) = m.stdin.as_mut() {
                let _ = writeln!(s, "{cmd}");
                let _ = s.flush();
            }
        }
    }

    /// SIGKILLs a member and returns when it happened.
    pub fn kill(&mut self, name: &str) -> Instant {
        let at = Instant::now();
        if let Some(m) = self.members.iter_mut().find(|m| m.name == name) {
            let _ = m.child.kill();
            m.exit = m.child.wait().ok();
        }
        self.out.emit("killed", json!({ "member": name }));
        at
    }

    fn record(&mut self, ev: Event) {
        let mut rec = ev.rec.clone();
        if let Value::Object(m) = &mut rec {
            m.insert("from".into(), ev.from.clone().into());
            m.insert(
                "driver_ms".into(),
                (ev.at.saturating_duration_since(self.start).as_secs_f64() * 1e3).into(),
            );
        }
        self.out.raw(&rec);
        self.log.push(ev);
    }

    /// Returns the first logged or future event satisfying `pred`.
    pub fn wait_for(
        &mut self,
        timeout: Duration,
        mut pred: impl FnMut(&Event) -> bool,
    ) -> Option<Event> {
        if let Some(e) = self.log.iter().find(|e| pred(e)) {
            return Some(e.clone());
        }
        let deadline = Instant::now() + timeout;
        loop {
            let left = deadline.saturating_duration_since(Instant::now());
            match self.rx.recv_timeout(left) {
                Ok(ev) => {
                    let hit = pred(&ev);
                    self.record(ev.clone());
                    if hit {
                        return Some(ev);
                    }
                }
                Err(RecvTimeoutError::Timeout) | Err(RecvTimeoutError::Disconnected) => {
                    return None
                }
            }
        }
    }

    /// Absorbs whatever has arrived so far.
    pub fn drain(&mut self) {
        while let Ok(ev) = self.rx.try_recv() {
            self.record(ev);
        }
    }

    /// Waits for every member to exit, killing stragglers at the deadline.
    pub fn finish(&mut self, timeout: Duration) -> Vec<(String, Option<i32>)> {
        let deadline = Instant::now() + timeout;
        for m in &mut self.members {
            m.stdin.take();
        }
        loop {
            let mut running = false;
            for m in &mut self.members {
                if m.exit.is_none() {
                    m.exit = m.child.try_wait().ok().flatten();
                    running |= m.exit.is_none();
                }
            }
            if !running || Instant::now() >= deadline {
                break;
            }
            if let Ok(ev) = self.rx.recv_timeout(Duration::from_millis(20)) {
                self.record(ev);
            }
        }
        for m in &mut self.members {
            if m.exit.is_none() {
                let _ = m.child.kill();
                m.exit = m.child.wait().ok();
            }
        }
        thread::sleep(Duration::from_millis(20));
        self.drain();
        self.members
            .iter()
            .map(|m| (m.name.clone(), m.exit.and_then(|s| s.code())))
            .collect()
    }
}

impl Drop for Fleet {
    fn drop(&mut self) {
        for m in &mut self.members {
            if m.exit.is_none() {
                let _ = m.child.kill();
                let _ = m.child.wait();
            }
        }
    }
}
