//! Elastic collective communication over TCP.
//!
//! A process can belong to several independently managed process groups
//! ("worlds"), each with its own ranks, links and lifecycle. A member
//! failure breaks only the worlds that contain it, and new worlds can be
//! created while others keep running.
//!
//! The pieces:
//! - [`store`]: a TCP key-value store used for rendezvous and heartbeats.
//! - [`transport`]: framed per-world TCP links.
//! - [`collectives`]: the eight operations as step-driven kernels.
//! - [`WorldManager`]: world creation, quarantine and removal.
//! - [`Communicator`]: the non-blocking submission surface and its poller.
//! - [`watchdog`]: heartbeat publishing and staleness detection.

pub mod collectives;
pub mod communicator;
pub mod config;
pub mod error;
pub mod manager;
pub mod store;
pub mod transport;
pub mod types;
pub mod watchdog;

pub use collectives::{CollectiveCall, CollectiveKind, OpClass, WorkResult};
pub use communicator::{Communicator, WorkHandle, WorkStatus};
pub use config::{Config, PollerMode};
pub use error::{ErrorKind, MwError, Result};
pub use manager::{InitTicket, StatusEvent, WorldManager, WorldStatus};
pub use store::{StoreClient, StoreServer};
pub use types::{
    fold_buffers, is_valid_world_name, validate_descriptor, Buffer, DType, Element, Rank, ReduceOp,
    WorldDescriptor, WorldName,
};
pub use watchdog::{Watchdog, WatchdogConfig};
