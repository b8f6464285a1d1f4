//! Framed point-to-point TCP transport between members of one world.
//!
//! Each (world, peer pair) gets a dedicated connection that starts with a
//! HELLO exchange. DATA frames carry a per-direction sequence number, so any
//! gap or duplicate is caught. Resets and EOF surface as `RemoteWorker`.

mod conn;
pub mod frame;

pub use conn::{ConnState, Connection, Listener, HANDSHAKE_TIMEOUT};
pub use frame::{Frame, FrameDecoder, FrameWriter, MsgType, MAGIC, VERSION};
