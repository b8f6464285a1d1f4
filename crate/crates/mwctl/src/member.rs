//! Helpers for processes that hold world ranks.

use std::io::BufRead;
use std::sync::mpsc::{self, Receiver};
use std::thread;
use std::time::Duration;

use multiworld::{Buffer, DType, WorldDescriptor, WorldManager, WorldStatus};
use serde_json::json;

use crate::emit::Emitter;
use crate::Failure;

pub const FLAG_DATA: i64 = 0;
pub const FLAG_STOP: i64 = 1;

pub fn manager() -> Result<WorldManager, Failure> {
    WorldManager::from_env().map_err(Failure::env)
}

pub fn store_addr(store: &Option<String>) -> Result<String, Failure> {
    store
        .clone()
        .ok_or_else(|| Failure::Env("no store address: pass --store or set MW_STORE_ADDR".into()))
}

/// Forwards status changes of `m` as `status` records.
pub fn report_status(m: &WorldManager, out: &Emitter) {
    let rx = m.subscribe();
    let out = out.clone();
    thread::spawn(move || {
        for ev in rx {
            out.emit(
                "status",
                json!({
                    "world": ev.world,
                    "epoch": ev.epoch,
                    "to": ev.to.name(),
                    "cause": ev.cause,
                }),
            );
        }
    });
}

/// Lines arriving on stdin.
pub fn commands() -> Receiver<String> {
    let (tx, rx) = mpsc::channel();
    thread::spawn(move || {
        for line in std::io::stdin().lock().lines() {
            let Ok(line) = line else { break };
            if tx.send(line.trim().to_string()).is_err() {
                break;
            }
        }
    });
    rx
}

/// Joins every `(world, size, rank)` concurrently.
pub fn join_all(
    m: &WorldManager,
    store: &str,
    worlds: &[(&str, u32, u32)],
    timeout: Duration,
) -> Result<(), Failure> {
    let tickets = worlds
        .iter()
        .map(|&(w, size, rank)| {
            m.initialize_world_async(
                WorldDescriptor::new(w, size, rank, store, "127.0.0.1:0"),
                Some(timeout),
            )
        })
        .collect::<Result<Vec<_>, _>>()
        .map_err(Failure::env)?;
    for t in tickets {
        let w = t.world().to_string();
        t.wait()
            .map_err(|e| Failure::Env(format!("joining {w}: {e}")))?;
    }
    Ok(())
}

pub fn is_ready(m: &WorldManager, world: &str) -> bool {
    matches!(m.world_status(world), Ok(WorldStatus::Ready))
}

/// A message of `bytes` bytes (at least two i64 slots) carrying a sequence
/// number and a flag.
pub fn message(seq: i64, flag: i64, bytes: usize) -> Buffer {
    let mut v = vec![0i64; message_len(bytes)];
    v[0] = seq;
    v[1] = flag;
    Buffer::from_slice(&v)
}

pub fn message_len(bytes: usize) -> usize {
    (bytes / DType::I64.width()).max(2)
}

/// `(seq, flag)` of a received message.
pub fn header(b: &Buffer) -> (i64, i64) {
    let raw = b.as_bytes();
    let word = |i: usize| i64::from_le_bytes(raw[i * 8..i * 8 + 8].try_into().unwrap());
    (word(0), word(1))
}
