//! Brute-force linearizability check for single-key register/counter
//! histories.
#![allow(dead_code)]

use std::sync::{Arc, Barrier};
use std::thread;
use std::time::Instant;

use multiworld::StoreClient;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Op {
    Set(i64),
    Add(i64),
    Get,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Ret {
    Unit,
    Value(i64),
    Missing,
}

#[derive(Debug, Clone)]
pub struct Event {
    pub start: Instant,
    pub end: Instant,
    pub op: Op,
    pub ret: Ret,
}

fn apply(state: Option<i64>, op: Op) -> (Option<i64>, Ret) {
    match op {
        Op::Set(v) => (Some(v), Ret::Unit),
        Op::Add(d) => {
            let n = state.unwrap_or(0).wrapping_add(d);
            (Some(n), Ret::Value(n))
        }
        Op::Get => (state, state.map_or(Ret::Missing, Ret::Value)),
    }
}

/// True if some total order respecting real time explains every result.
pub fn linearizable(history: &[Event], initial: Option<i64>) -> bool {
    let mut used = vec![false; history.len()];
    search(history, &mut used, initial, 0)
}

fn search(h: &[Event], used: &mut [bool], state: Option<i64>, done: usize) -> bool {
    if done == h.len() {
        return true;
    }
    for i in 0..h.len() {
        if used[i] {
            continue;
        }
        // i may go next only if no other pending op finished before i began
        let blocked = (0..h.len()).any(|j| j != i && !used[j] && h[j].end < h[i].start);
        if blocked {
            continue;
        }
        let (next, ret) = apply(state, h[i].op);
        if ret != h[i].ret {
            continue;
        }
        used[i] = true;
        if search(h, used, next, done + 1) {
            return true;
        }
        used[i] = false;
    }
    false
}

/// Three clients each run two random operations on `key` at once.
pub fn record(addr: &str, key: &str, seed: u64) -> Vec<Event> {
    let addr = addr.to_string();
    let gate = Arc::new(Barrier::new(3));
    let hs: Vec<_> = (0..3u64)
        .map(|t| {
            let (addr, gate, key) = (addr.clone(), gate.clone(), key.to_string());
            thread::spawn(move || {
                let mut rng = StdRng::seed_from_u64(seed * 7 + t);
                let mut c = StoreClient::connect(&addr).unwrap();
                gate.wait();
                let mut out = Vec::new();
                for _ in 0..2 {
                    let op = match rng.gen_range(0..3) {
                        0 => Op::Set(rng.gen_range(0..100)),
                        1 => Op::Add(rng.gen_range(1..10)),
                        _ => Op::Get,
                    };
                    let start = Instant::now();
                    let ret = match op {
                        Op::Set(v) => {
                            c.set(&key, &v.to_le_bytes()).unwrap();
                            Ret::Unit
                        }
                        Op::Add(d) => Ret::Value(c.add(&key, d).unwrap()),
                        Op::Get => match c.get(&key).unwrap() {
                            None => Ret::Missing,
                            Some(b) => Ret::Value(i64::from_le_bytes(b.try_into().unwrap())),
                        },
                    };
                    out.push(Event {
                        start,
                        end: Instant::now(),
                        op,
                        ret,
                    });
                }
                out
            })
        })
        .collect();
    hs.into_iter().flat_map(|h| h.join().unwrap()).collect()
}
