#![allow(dead_code)]

use std::thread;
use std::time::Duration;

use multiworld::{Config, PollerMode, StoreServer, WatchdogConfig, WorldDescriptor, WorldManager};

pub fn store() -> StoreServer {
    StoreServer::bind("127.0.0.1:0").expect("bind store")
}

pub fn fast_watchdog() -> WatchdogConfig {
    WatchdogConfig::new(
        Duration::from_millis(100),
        Duration::from_millis(400),
        Duration::from_millis(50),
    )
    .unwrap()
}

pub fn config() -> Config {
    Config::default().with_poller(PollerMode::Yield)
}

pub fn manager() -> WorldManager {
    WorldManager::new(config()).unwrap()
}

pub fn fast_manager() -> WorldManager {
    WorldManager::new(config().with_watchdog(fast_watchdog())).unwrap()
}

pub fn desc(name: &str, size: u32, rank: u32, store: &StoreServer) -> WorldDescriptor {
    WorldDescriptor::new(
        name,
        size,
        rank,
        store.local_addr().to_string(),
        "127.0.0.1:0",
    )
}

/// Brings up world `name` with `members[i]` as rank i.
pub fn form(name: &str, members: &[&WorldManager], store: &StoreServer) {
    let size = members.len() as u32;
    let tickets: Vec<_> = members
        .iter()
        .enumerate()
        .map(|(r, m)| {
            m.initialize_world_async(
                desc(name, size, r as u32, store),
                Some(Duration::from_secs(20)),
            )
            .unwrap()
        })
        .collect();
    for t in tickets {
        t.wait().expect("world init");
    }
}

/// Runs `f(rank)` on one thread per rank and collects the results in rank
/// order.
pub fn per_rank<T: Send + 'static>(
    n: usize,
    f: impl Fn(usize) -> T + Send + Sync + 'static,
) -> Vec<T> {
    let f = std::sync::Arc::new(f);
    let hs: Vec<_> = (0..n)
        .map(|r| {
            let f = f.clone();
            thread::spawn(move || f(r))
        })
        .collect();
    hs.into_iter().map(|h| h.join().unwrap()).collect()
}
