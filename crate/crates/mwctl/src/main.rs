//! `mwctl`: rendezvous store, demo scenarios and benchmarks.

mod bench;
mod emit;
mod fault;
mod fleet;
mod join;
mod member;
mod rhombus;

use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::mpsc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use multiworld::StoreServer;

use crate::emit::Emitter;

#[derive(Parser)]
#[command(
    name = "mwctl",
    version,
    about = "Multi-world store, scenarios and benchmarks"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone, Debug)]
pub struct Common {
    /// Store address; an in-process store is started when omitted under `--role all`.
    #[arg(long, env = "MW_STORE_ADDR", global = true)]
    pub store: Option<String>,
    /// Write JSON-lines records here as well as to stdout.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the rendezvous store until interrupted.
    Store {
        #[arg(long, default_value = "127.0.0.1:29500")]
        listen: String,
    },
    /// Two workers stream to a leader; one of them dies mid-run.
    Fault(fault::FaultArgs),
    /// A worker joins a new world while an existing one carries traffic.
    Join(join::JoinArgs),
    /// Single-world versus multi-world throughput.
    Bench(bench::BenchArgs),
    /// Four-stage pipeline with a replicated middle stage.
    Rhombus(rhombus::RhombusArgs),
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum BenchMode {
    P2p,
    Fanin,
}

/// How a scenario ended.
#[derive(Debug)]
pub enum Failure {
    /// The scenario ran but its checks did not hold.
    Scenario(String),
    /// The environment prevented the scenario from running.
    Env(String),
}

impl Failure {
    pub fn env(e: impl std::fmt::Display) -> Failure {
        Failure::Env(e.to_string())
    }

    pub fn scenario(e: impl std::fmt::Display) -> Failure {
        Failure::Scenario(e.to_string())
    }
}

pub type Outcome = Result<(), Failure>;

fn serve_store(listen: &str, out: &Emitter) -> Outcome {
    let mut server = StoreServer::bind(listen).map_err(Failure::env)?;
    let (tx, rx) = mpsc::channel();
    ctrlc::set_handler(move || {
        let _ = tx.send(());
    })
    .map_err(Failure::env)?;
    out.emit(
        "listening",
        serde_json::json!({ "addr": server.local_addr().to_string() }),
    );
    let _ = rx.recv();
    server.shutdown();
    out.emit("stopped", serde_json::json!({}));
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::Store { listen } => match Emitter::new(None) {
            Ok(out) => serve_store(&listen, &out),
            Err(e) => Err(e),
        },
        Cmd::Fault(a) => fault::run(a),
        Cmd::Join(a) => join::run(a),
        Cmd::Bench(a) => bench::run(a),
        Cmd::Rhombus(a) => rhombus::run(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Scenario(m)) => {
            eprintln!("mwctl: scenario failed: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Env(m)) => {
            eprintln!("mwctl: {m}");
            ExitCode::from(2)
        }
    }
}
