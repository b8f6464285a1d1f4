//! Runtime configuration read from the environment.

use std::time::Duration;

use crate::error::{MwError, Result};
use crate::watchdog::WatchdogConfig;

pub const POLLER_YIELD_ENV: &str = "MW_POLLER_YIELD";
pub const OP_TIMEOUT_ENV: &str = "MW_OP_DEFAULT_TIMEOUT_MS";
pub const HEARTBEAT_ENV: &str = "MW_HEARTBEAT_INTERVAL_MS";
pub const LIVENESS_ENV: &str = "MW_LIVENESS_TIMEOUT_MS";
pub const SCAN_ENV: &str = "MW_SCAN_INTERVAL_MS";

/// Default bound on world initialization.
pub const DEFAULT_INIT_TIMEOUT: Duration = Duration::from_secs(30);

/// How the poller behaves when an iteration makes no progress.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PollerMode {
    /// Pure busy-wait.
    Spin,
    /// Yield the core, and nap briefly after a long idle streak.
    Yield,
}

#[derive(Debug, Clone)]
pub struct Config {
    pub poller: PollerMode,
    /// Per-operation timeout; `None` waits forever.
    pub op_timeout: Option<Duration>,
    pub watchdog: WatchdogConfig,
    pub init_timeout: Duration,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            poller: PollerMode::Spin,
            op_timeout: None,
            watchdog: WatchdogConfig::default(),
            init_timeout: DEFAULT_INIT_TIMEOUT,
        }
    }
}

fn env_u64(var: &str) -> Result<Option<u64>> {
    match std::env::var(var) {
        Ok(v) if !v.trim().is_empty() => {
            v.trim().parse::<u64>().map(Some).map_err(|_| {
                MwError::protocol(format!("{var}={v:?} is not a non-negative integer"))
            })
        }
        _ => Ok(None),
    }
}

pub(crate) fn env_millis(var: &str) -> Result<Option<Duration>> {
    Ok(env_u64(var)?.map(Duration::from_millis))
}

impl Config {
    /// Defaults overridden by the `MW_*` environment variables.
    pub fn from_env() -> Result<Config> {
        let poller = match env_u64(POLLER_YIELD_ENV)? {
            None | Some(0) => PollerMode::Spin,
            Some(1) => PollerMode::Yield,
            Some(v) => {
                return Err(MwError::protocol(format!(
                    "{POLLER_YIELD_ENV} must be 0 or 1, got {v}"
                )))
            }
        };
        let op_timeout = env_millis(OP_TIMEOUT_ENV)?.filter(|d| !d.is_zero());
        Ok(Config {
            poller,
            op_timeout,
            watchdog: WatchdogConfig::from_env()?,
            init_timeout: DEFAULT_INIT_TIMEOUT,
        })
    }

    pub fn with_poller(mut self, mode: PollerMode) -> Self {
        self.poller = mode;
        self
    }

    pub fn with_watchdog(mut self, wd: WatchdogConfig) -> Self {
        self.watchdog = wd;
        self
    }

    pub fn with_op_timeout(mut self, t: Option<Duration>) -> Self {
        self.op_timeout = t;
        self
    }
}
