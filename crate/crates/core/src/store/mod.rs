//! Rendezvous key-value store: a small TCP server plus a blocking client.
//!
//! One server is shared by every world; each world lives under its own key
//! prefix (`world/<name>/<epoch>/...`, `heartbeat/<name>/<epoch>/...`), so
//! removing a world is a prefix delete.

mod client;
pub mod protocol;
mod server;

pub use client::{
    check_key, check_value, store_addr_from_env, StoreClient, DEFAULT_CLIENT_TIMEOUT,
    STORE_ADDR_ENV,
};
pub use server::StoreServer;

/// Key schema shared by the world manager and the watchdog.
pub mod keys {
    pub fn world_prefix(name: &str, epoch: u64) -> String {
        format!("world/{name}/{epoch}/")
    }

    pub fn size(name: &str, epoch: u64) -> String {
        format!("world/{name}/{epoch}/size")
    }

    pub fn joined(name: &str, epoch: u64) -> String {
        format!("world/{name}/{epoch}/joined")
    }

    pub fn rank_addr(name: &str, epoch: u64, rank: u32) -> String {
        format!("world/{name}/{epoch}/rank/{rank}/addr")
    }

    /// Per-rank claim counter used to detect two members taking one rank.
    pub fn rank_claim(name: &str, epoch: u64, rank: u32) -> String {
        format!("world/{name}/{epoch}/rank/{rank}/claim")
    }

    pub fn heartbeat_prefix(name: &str, epoch: u64) -> String {
        format!("heartbeat/{name}/{epoch}/")
    }

    pub fn heartbeat(name: &str, epoch: u64, rank: u32) -> String {
        format!("heartbeat/{name}/{epoch}/{rank}")
    }
}
