mod common;

use std::collections::HashMap;
use std::sync::{Arc, Barrier};
use std::thread;
use std::time::{Duration, Instant};

use common::{desc, form, manager, store};
use multiworld::{Buffer, DType, ErrorKind, MwError, StoreClient, WorldManager, WorldStatus};
use rand::{Rng, SeedableRng};

fn pair(name: &str) -> (WorldManager, WorldManager, multiworld::StoreServer) {
    let s = store();
    let (a, b) = (manager(), manager());
    form(name, &[&a, &b], &s);
    (a, b, s)
}

fn ping(a: &WorldManager, b: &WorldManager, world: &str) {
    let h = b.communicator().irecv(world, 0, DType::I32, 1).unwrap();
    a.communicator()
        .send(world, 1, Buffer::from_slice(&[42i32]))
        .unwrap();
    assert_eq!(
        h.wait(Some(Duration::from_secs(10)))
            .unwrap()
            .buffer()
            .unwrap()
            .to_vec::<i32>()
            .unwrap(),
        vec![42]
    );
}

#[test]
fn lifecycle_and_idempotent_removal() {
    let (a, b, s) = pair("life");
    assert_eq!(a.world_status("life").unwrap(), WorldStatus::Ready);
    assert_eq!(a.worlds(), vec![("life".to_string(), WorldStatus::Ready)]);
    ping(&a, &b, "life");
    a.remove_world("life").unwrap();
    b.remove_world("life").unwrap();
    assert_eq!(a.world_status("life").unwrap(), WorldStatus::Removed);
    a.remove_world("life").unwrap();
    assert!(a.worlds().is_empty());
    let mut c = StoreClient::connect(&s.local_addr().to_string()).unwrap();
    assert_eq!(c.get("world/life/0/size").unwrap(), None);
    assert_eq!(c.get("world/life/0/rank/0/addr").unwrap(), None);
    assert_eq!(
        a.remove_world("never").unwrap_err().kind(),
        ErrorKind::UnknownWorld
    );
    assert_eq!(
        a.world_status("never").unwrap_err().kind(),
        ErrorKind::UnknownWorld
    );
}

#[test]
fn store_keys_follow_the_schema() {
    let (a, _b, s) = pair("schema");
    let mut c = StoreClient::connect(&s.local_addr().to_string()).unwrap();
    assert_eq!(c.get("world/schema/0/size").unwrap().unwrap(), b"2");
    assert_eq!(c.get_counter("world/schema/0/joined").unwrap(), 2);
    for r in 0..2 {
        let addr = String::from_utf8(
            c.get(&format!("world/schema/0/rank/{r}/addr"))
                .unwrap()
                .unwrap(),
        )
        .unwrap();
        assert!(addr.starts_with("127.0.0.1:"), "{addr}");
    }
    let deadline = Instant::now() + Duration::from_secs(5);
    while c.get_counter("heartbeat/schema/0/1").unwrap() < 2 {
        assert!(Instant::now() < deadline, "no heartbeats");
        thread::sleep(Duration::from_millis(50));
    }
    drop(a);
}

#[test]
fn remove_aborts_pending_recv() {
    let (_a, b, _s) = pair("abort");
    let h = b.communicator().irecv("abort", 0, DType::F32, 4).unwrap();
    thread::sleep(Duration::from_millis(50));
    assert!(!h.is_done());
    b.remove_world("abort").unwrap();
    let err = h.wait(Some(Duration::from_secs(5))).unwrap_err();
    assert_eq!(err.kind(), ErrorKind::Aborted);
    assert_eq!(
        b.communicator()
            .irecv("abort", 0, DType::F32, 4)
            .unwrap_err()
            .kind(),
        ErrorKind::UnknownWorld
    );
}

#[test]
fn lonely_init_times_out_broken_and_cleans_its_keys() {
    let s = store();
    let m = manager();
    let t = Instant::now();
    let err = m
        .initialize_world(desc("alone", 2, 0, &s), Some(Duration::from_secs(1)))
        .unwrap_err();
    assert_eq!(err.kind(), ErrorKind::Timeout);
    assert!(t.elapsed() < Duration::from_secs(3));
    assert_eq!(m.world_status("alone").unwrap(), WorldStatus::Broken);
    let mut c = StoreClient::connect(&s.local_addr().to_string()).unwrap();
    assert_eq!(c.get("world/alone/0/rank/0/addr").unwrap(), None);
    assert_eq!(c.get_counter("world/alone/0/joined").unwrap(), 0);
    // a broken name can be reused only after removal
    assert_eq!(
        m.initialize_world(desc("alone", 2, 0, &s), None)
            .unwrap_err()
            .kind(),
        ErrorKind::WorldExists
    );
    m.remove_world("alone").unwrap();
    let other = manager();
    form("alone", &[&m, &other], &s);
    assert_eq!(m.world_epoch("alone").unwrap(), 1);
    ping(&m, &other, "alone");
}

#[test]
fn status_is_initializing_during_rendezvous() {
    let s = store();
    let (a, b) = (manager(), manager());
    let t = a
        .initialize_world_async(desc("slow", 2, 0, &s), Some(Duration::from_secs(10)))
        .unwrap();
    thread::sleep(Duration::from_millis(100));
    assert_eq!(a.world_status("slow").unwrap(), WorldStatus::Initializing);
    assert_eq!(
        a.communicator()
            .isend("slow", 1, Buffer::from_slice(&[1u8]))
            .unwrap_err()
            .kind(),
        ErrorKind::UnknownWorld
    );
    assert!(!t.is_finished());
    b.initialize_world(desc("slow", 2, 1, &s), Some(Duration::from_secs(10)))
        .unwrap();
    t.wait().unwrap();
    assert_eq!(a.world_status("slow").unwrap(), WorldStatus::Ready);
}

#[test]
fn duplicate_init_is_world_exists() {
    let s = store();
    let m = manager();
    let gate = Arc::new(Barrier::new(4));
    let hs: Vec<_> = (0..4)
        .map(|_| {
            let (m, gate) = (m.clone(), gate.clone());
            let d = desc("dup", 2, 0, &s);
            thread::spawn(move || {
                gate.wait();
                m.initialize_world_async(d, Some(Duration::from_millis(300)))
                    .map(|t| t.wait())
            })
        })
        .collect();
    let results: Vec<_> = hs.into_iter().map(|h| h.join().unwrap()).collect();
    let won = results.iter().filter(|r| r.is_ok()).count();
    assert_eq!(won, 1);
    for r in results {
        match r {
            Ok(inner) => assert_eq!(inner.unwrap_err().kind(), ErrorKind::Timeout),
            Err(e) => assert_eq!(e.kind(), ErrorKind::WorldExists),
        }
    }
}

#[test]
fn rank_and_size_conflicts() {
    let s = store();
    let (a, b, c) = (manager(), manager(), manager());
    let t = a
        .initialize_world_async(desc("clash", 2, 0, &s), Some(Duration::from_secs(2)))
        .unwrap();
    thread::sleep(Duration::from_millis(100));
    let err = b
        .initialize_world(desc("clash", 2, 0, &s), Some(Duration::from_secs(1)))
        .unwrap_err();
    assert_eq!(err.kind(), ErrorKind::RankConflict);
    assert_eq!(b.world_status("clash").unwrap(), WorldStatus::Broken);
    let err = c
        .initialize_world(desc("clash", 3, 1, &s), Some(Duration::from_secs(1)))
        .unwrap_err();
    assert_eq!(err.kind(), ErrorKind::SizeMismatch);
    // the first member is unaffected and can still complete with a real peer
    let d = manager();
    d.initialize_world(desc("clash", 2, 1, &s), Some(Duration::from_secs(2)))
        .unwrap();
    t.wait().unwrap();
    ping(&a, &d, "clash");
}

#[test]
fn mark_broken_fails_pending_ops_once() {
    let s = store();
    let (a, b) = (manager(), manager());
    form("w1", &[&a, &b], &s);
    form("w2", &[&a, &b], &s);
    let events = b.subscribe();
    let comm = b.communicator();
    let r = comm.irecv("w2", 0, DType::U8, 1).unwrap();
    let big = comm
        .isend("w2", 0, Buffer::zeros(DType::U8, 64 << 20))
        .unwrap();
    let cause = MwError::remote("rank 0 went quiet");
    b.mark_broken("w2", cause.clone()).unwrap();
    b.mark_broken("w2", cause).unwrap();
    for h in [r, big] {
        let e = h.wait(Some(Duration::from_secs(5))).unwrap_err();
        assert_eq!(e.kind(), ErrorKind::BrokenWorld);
        assert!(e.to_string().contains("went quiet"), "{e}");
        assert_eq!(h.completion_count(), 1);
    }
    assert_eq!(b.world_status("w2").unwrap(), WorldStatus::Broken);
    assert!(b.connection_ids("w2").unwrap().is_empty());
    assert_eq!(
        comm.isend("w2", 0, Buffer::zeros(DType::U8, 1))
            .unwrap_err()
            .kind(),
        ErrorKind::BrokenWorld
    );
    thread::sleep(Duration::from_millis(100));
    let broken: Vec<_> = events
        .try_iter()
        .filter(|e| e.to == WorldStatus::Broken)
        .collect();
    assert_eq!(broken.len(), 1);
    assert_eq!(broken[0].world, "w2");
    // w1 is untouched
    assert_eq!(b.world_status("w1").unwrap(), WorldStatus::Ready);
    ping(&a, &b, "w1");
}

#[test]
fn communicator_is_a_singleton() {
    let m = manager();
    assert!(m.communicator().same_as(&m.communicator()));
    assert!(m.clone().communicator().same_as(&m.communicator()));
    assert!(!m.communicator().same_as(&manager().communicator()));
    let e = m.communicator().iall_reduce(
        "none",
        Buffer::zeros(DType::F32, 1),
        multiworld::ReduceOp::Sum,
    );
    assert_eq!(e.unwrap_err().kind(), ErrorKind::UnknownWorld);
}

#[test]
fn online_instantiation_leaves_existing_worlds_alone() {
    let s = store();
    let (a, b, c) = (manager(), manager(), manager());
    form("w1", &[&a, &b], &s);
    ping(&a, &b, "w1");
    let epoch = a.world_epoch("w1").unwrap();
    let ids_a = a.connection_ids("w1").unwrap();
    let ids_b = b.connection_ids("w1").unwrap();
    assert_eq!(ids_a.len(), 1);
    assert_eq!(ids_b.len(), 1);

    // keep w1 busy while w2 is formed
    let (a2, b2) = (a.clone(), b.clone());
    let traffic = thread::spawn(move || {
        for _ in 0..200 {
            ping(&a2, &b2, "w1");
        }
    });
    form("w2", &[&a, &c], &s);
    ping(&a, &c, "w2");
    traffic.join().unwrap();

    assert_eq!(a.world_epoch("w1").unwrap(), epoch);
    assert_eq!(a.connection_ids("w1").unwrap(), ids_a);
    assert_eq!(b.connection_ids("w1").unwrap(), ids_b);
    assert_eq!(a.world_status("w2").unwrap(), WorldStatus::Ready);
}

#[test]
fn submit_cost_does_not_grow_with_world_count() {
    let s = store();
    let (a, b) = (manager(), manager());
    form("hot", &[&a, &b], &s);
    ping(&a, &b, "hot");

    let measure = || -> Duration {
        let comm = a.communicator();
        let mut best = Duration::MAX;
        for _ in 0..5 {
            let n = 400;
            let recvs: Vec<_> = (0..n)
                .map(|_| b.communicator().irecv("hot", 0, DType::U8, 8).unwrap())
                .collect();
            let mut times = Vec::with_capacity(n);
            let mut sends = Vec::with_capacity(n);
            for _ in 0..n {
                let t = Instant::now();
                sends.push(comm.isend("hot", 1, Buffer::zeros(DType::U8, 8)).unwrap());
                times.push(t.elapsed());
            }
            for h in sends.into_iter().chain(recvs) {
                h.wait(Some(Duration::from_secs(10))).unwrap();
            }
            times.sort();
            best = best.min(times[n / 2]);
        }
        best
    };
    let alone = measure();
    for i in 0..16 {
        form(&format!("idle{i}"), &[&a, &b], &s);
    }
    let crowded = measure();
    let slack = Duration::from_micros(5);
    assert!(
        crowded <= alone.mul_f64(1.2) + slack,
        "submit median {alone:?} alone, {crowded:?} with 16 other worlds"
    );
}

#[test]
fn random_lifecycle_stress_only_legal_transitions() {
    let s = store();
    let ms: Vec<WorldManager> = (0..3).map(|_| manager()).collect();
    let subs: Vec<_> = ms.iter().map(|m| m.subscribe()).collect();
    let hs: Vec<_> = (0..3)
        .map(|r| {
            let m = ms[r].clone();
            let addr = s.local_addr().to_string();
            thread::spawn(move || {
                let mut rng = rand::rngs::StdRng::seed_from_u64(r as u64);
                for round in 0..30 {
                    let name = format!("s{}", rng.gen_range(0..4));
                    match rng.gen_range(0..4) {
                        0 | 1 => {
                            let d = multiworld::WorldDescriptor::new(
                                &name,
                                2,
                                (r % 2) as u32,
                                &addr,
                                "127.0.0.1:0",
                            );
                            if let Ok(t) =
                                m.initialize_world_async(d, Some(Duration::from_millis(150)))
                            {
                                if round % 3 == 0 {
                                    let _ = t.wait();
                                }
                            }
                        }
                        2 => {
                            let _ = m.remove_world(&name);
                        }
                        _ => {
                            let _ = m.mark_broken(&name, MwError::remote("stress"));
                        }
                    }
                    thread::sleep(Duration::from_millis(rng.gen_range(0..20)));
                }
            })
        })
        .collect();
    for h in hs {
        h.join().unwrap();
    }
    thread::sleep(Duration::from_millis(400));
    for rx in subs {
        let mut last: HashMap<(String, u64), WorldStatus> = HashMap::new();
        for ev in rx.try_iter() {
            let key = (ev.world.clone(), ev.epoch);
            match ev.from {
                None => assert_eq!(ev.to, WorldStatus::Initializing),
                Some(from) => {
                    assert!(from.can_become(ev.to), "illegal {from:?} -> {:?}", ev.to);
                    if let Some(prev) = last.get(&key) {
                        assert_eq!(*prev, from, "event chain broken for {key:?}");
                    }
                }
            }
            last.insert(key, ev.to);
        }
    }
}
