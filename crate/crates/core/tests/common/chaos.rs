//! Randomized kill schedules over in-flight operations.
#![allow(dead_code)]

use std::thread;
use std::time::{Duration, Instant};

use multiworld::{Buffer, DType, ReduceOp, StoreServer, WorkHandle, WorldDescriptor, WorldManager};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

#[derive(Debug)]
pub struct Trial {
    pub handles: usize,
    pub failed: usize,
    /// Time from the kill until the last survivor handle became terminal.
    pub settle: Duration,
}

fn form(name: &str, ms: &[&WorldManager], store: &StoreServer) -> Result<(), String> {
    let addr = store.local_addr().to_string();
    let tickets: Vec<_> = ms
        .iter()
        .enumerate()
        .map(|(r, m)| {
            let d = WorldDescriptor::new(name, ms.len() as u32, r as u32, &addr, "127.0.0.1:0");
            m.initialize_world_async(d, Some(Duration::from_secs(20)))
        })
        .collect::<Result<_, _>>()
        .map_err(|e| e.to_string())?;
    for t in tickets {
        t.wait().map_err(|e| e.to_string())?;
    }
    Ok(())
}

/// Three members share world "x"; members 0 and 1 also share "y". A random
/// mix of matched operations is submitted, then a random member crashes
/// after a random delay. Every handle must reach exactly one terminal state,
/// survivors within `bound` of the crash.
pub fn exactly_once_trial(
    seed: u64,
    make: &dyn Fn() -> WorldManager,
    bound: Duration,
) -> Result<Trial, String> {
    let mut rng = StdRng::seed_from_u64(seed);
    let store = StoreServer::bind("127.0.0.1:0").map_err(|e| e.to_string())?;
    let ms: Vec<WorldManager> = (0..3).map(|_| make()).collect();
    form("x", &[&ms[0], &ms[1], &ms[2]], &store)?;
    form("y", &[&ms[0], &ms[1]], &store)?;
    let comms: Vec<_> = ms.iter().map(|m| m.communicator()).collect();

    let mut handles: Vec<(usize, WorkHandle)> = Vec::new();
    let rounds = rng.gen_range(1..12);
    let sub = |e: multiworld::MwError| e.to_string();
    for _ in 0..rounds {
        let len = rng.gen_range(0..20_000);
        match rng.gen_range(0..4) {
            0 => {
                for (r, c) in comms.iter().enumerate() {
                    let h = c
                        .iall_reduce("x", Buffer::zeros(DType::F32, len), ReduceOp::Sum)
                        .map_err(sub)?;
                    handles.push((r, h));
                }
            }
            1 => {
                let (src, dst) = [(0, 1), (1, 2), (2, 0), (1, 0)][rng.gen_range(0..4)];
                handles.push((
                    dst,
                    comms[dst]
                        .irecv("x", src as u32, DType::U8, len)
                        .map_err(sub)?,
                ));
                handles.push((
                    src,
                    comms[src]
                        .isend("x", dst as u32, Buffer::zeros(DType::U8, len))
                        .map_err(sub)?,
                ));
            }
            2 => {
                handles.push((1, comms[1].irecv("y", 0, DType::I64, len).map_err(sub)?));
                handles.push((
                    0,
                    comms[0]
                        .isend("y", 1, Buffer::zeros(DType::I64, len))
                        .map_err(sub)?,
                ));
            }
            _ => {
                let root = rng.gen_range(0..3u32);
                for (r, c) in comms.iter().enumerate() {
                    let h = c
                        .ibroadcast("x", root, Buffer::zeros(DType::F64, len))
                        .map_err(sub)?;
                    handles.push((r, h));
                }
            }
        }
    }
    // an op that can only end through the failure path
    handles.push((0, comms[0].irecv("x", 2, DType::U8, 1).map_err(sub)?));

    thread::sleep(Duration::from_micros(rng.gen_range(0..30_000)));
    let victim = rng.gen_range(0..3);
    let killed = Instant::now();
    ms[victim].crash();

    let mut settle = Duration::ZERO;
    for (r, h) in &handles {
        let left = bound.saturating_sub(killed.elapsed());
        match h.wait(Some(left)) {
            Err(e) if e.kind() == multiworld::ErrorKind::Timeout && !h.is_done() => {
                return Err(format!(
                    "seed {seed}: {:?} on rank {r} still pending {:?} after killing {victim}",
                    h.kind(),
                    killed.elapsed()
                ));
            }
            _ => {}
        }
        if *r != victim {
            settle = settle.max(killed.elapsed());
        }
    }
    // give stray completions a chance to show up
    thread::sleep(Duration::from_millis(50));
    let mut failed = 0;
    for (r, h) in &handles {
        if h.completion_count() != 1 {
            return Err(format!(
                "seed {seed}: rank {r} handle completed {} times",
                h.completion_count()
            ));
        }
        if matches!(h.poll(), multiworld::WorkStatus::Failed(_)) {
            failed += 1;
        }
    }
    Ok(Trial {
        handles: handles.len(),
        failed,
        settle,
    })
}
