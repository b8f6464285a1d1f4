//! Error taxonomy shared by every layer of the library.

use std::fmt;
use std::io;

/// Classification of every failure the library can surface.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ErrorKind {
    /// The world has been declared broken; carries the world name.
    BrokenWorld,
    /// A peer connection reset, closed, or otherwise disappeared.
    RemoteWorker,
    Timeout,
    UnknownWorld,
    WorldExists,
    RankConflict,
    SizeMismatch,
    /// Malformed input, bad frame, or a violated call contract.
    Protocol,
    /// The world was removed while the operation was pending.
    Aborted,
}

impl ErrorKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ErrorKind::BrokenWorld => "BrokenWorld",
            ErrorKind::RemoteWorker => "RemoteWorker",
            ErrorKind::Timeout => "Timeout",
            ErrorKind::UnknownWorld => "UnknownWorld",
            ErrorKind::WorldExists => "WorldExists",
            ErrorKind::RankConflict => "RankConflict",
            ErrorKind::SizeMismatch => "SizeMismatch",
            ErrorKind::Protocol => "Protocol",
            ErrorKind::Aborted => "Aborted",
        }
    }
}

impl fmt::Display for ErrorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A library error: a kind, the world it concerns (when known) and a
/// human-readable detail string.
///
/// `BrokenWorld` and `Aborted` are only constructed through [`MwError::broken`]
/// and [`MwError::aborted`], which require a world name.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("{kind}{}: {detail}", world_tag(.world))]
pub struct MwError {
    kind: ErrorKind,
    world: Option<String>,
    detail: String,
}

fn world_tag(world: &Option<String>) -> String {
    match world {
        Some(w) => format!(" [world {w}]"),
        None => String::new(),
    }
}

pub type Result<T> = std::result::Result<T, MwError>;

impl MwError {
    /// Builds an error of any kind except `BrokenWorld`/`Aborted`, which need a
    /// world name; for those use [`MwError::broken`] or [`MwError::aborted`].
    pub fn new(kind: ErrorKind, detail: impl Into<String>) -> Self {
        debug_assert!(
            !matches!(kind, ErrorKind::BrokenWorld | ErrorKind::Aborted),
            "{kind} requires a world name"
        );
        MwError {
            kind,
            world: None,
            detail: detail.into(),
        }
    }

    pub fn broken(world: impl Into<String>, detail: impl Into<String>) -> Self {
        MwError {
            kind: ErrorKind::BrokenWorld,
            world: Some(world.into()),
            detail: detail.into(),
        }
    }

    pub fn aborted(world: impl Into<String>, detail: impl Into<String>) -> Self {
        MwError {
            kind: ErrorKind::Aborted,
            world: Some(world.into()),
            detail: detail.into(),
        }
    }

    pub fn protocol(detail: impl Into<String>) -> Self {
        Self::new(ErrorKind::Protocol, detail)
    }

    pub fn timeout(detail: impl Into<String>) -> Self {
        Self::new(ErrorKind::Timeout, detail)
    }

    pub fn remote(detail: impl Into<String>) -> Self {
        Self::new(ErrorKind::RemoteWorker, detail)
    }

    pub fn unknown_world(world: impl Into<String>) -> Self {
        let world = world.into();
        MwError {
            kind: ErrorKind::UnknownWorld,
            detail: format!("no world named {world:?}"),
            world: Some(world),
        }
    }

    /// Attaches a world name if none is set yet.
    pub fn in_world(mut self, world: impl Into<String>) -> Self {
        if self.world.is_none() {
            self.world = Some(world.into());
        }
        self
    }

    pub fn kind(&self) -> ErrorKind {
        self.kind
    }

    pub fn world(&self) -> Option<&str> {
        self.world.as_deref()
    }

    pub fn detail(&self) -> &str {
        &self.detail
    }

    /// Converts a socket error into the library taxonomy. Resets, broken
    /// pipes and EOF become `RemoteWorker`; read/write timeouts become
    /// `Timeout`.
    pub fn from_io(err: &io::Error, context: &str) -> Self {
        use io::ErrorKind as K;
        match err.kind() {
            K::WouldBlock | K::TimedOut => Self::timeout(format!("{context}: {err}")),
            K::InvalidData | K::InvalidInput => Self::protocol(format!("{context}: {err}")),
            _ => Self::remote(format!("{context}: {err}")),
        }
    }
}
