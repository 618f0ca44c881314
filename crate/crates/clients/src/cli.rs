//! Shared CLI surface and run harness for the physics clients.
//!
//! Every client accepts the same transport and output flags and runs either
//! over the in-process world (`--ranks <n>`) or over TCP
//! (`--tcp <hostlist-file> --tcp-rank <r>`, one host:port line per rank).

use std::path::PathBuf;

use clap::Parser;
use pmfw::error::Error;
use pmfw::transport::{world_spawn, TcpConfig, World};
use pmfw::Result;

#[derive(Parser, Clone, Debug)]
pub struct CommonOpts {
    /// JSON configuration file (mirrors the client's config type).
    #[arg(long)]
    pub config: Option<PathBuf>,

    /// Number of in-process ranks.
    #[arg(long, default_value_t = 1)]
    pub ranks: usize,

    /// TCP rendezvous: file with one host:port per rank.
    #[arg(long)]
    pub tcp: Option<PathBuf>,

    /// This process's rank when running over TCP.
    #[arg(long)]
    pub tcp_rank: Option<usize>,

    /// Override the configured step count.
    #[arg(long)]
    pub steps: Option<usize>,

    /// Output directory.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,

    /// Save a checkpoint every N steps.
    #[arg(long)]
    pub checkpoint_every: Option<usize>,

    /// Restart from a checkpoint file.
    #[arg(long)]
    pub restart: Option<PathBuf>,

    /// Emit VTK output every N steps.
    #[arg(long)]
    pub vtk_every: Option<usize>,

    /// Dynamic load balancing.
    #[arg(long, value_parser = ["on", "off"], default_value = "off")]
    pub dlb: String,

    /// Append a per-step ledger trace (CSV) at this path.
    #[arg(long)]
    pub trace: Option<PathBuf>,
}

/// Per-run options handed to the client run functions.
#[derive(Clone, Debug)]
pub struct RunOpts {
    pub out: PathBuf,
    pub checkpoint_every: Option<usize>,
    pub restart: Option<PathBuf>,
    pub vtk_every: Option<usize>,
    pub dlb: bool,
    pub trace: Option<PathBuf>,
    /// Gather the full final field/state into the report (test harnesses).
    pub collect_state: bool,
}

impl RunOpts {
    pub fn from_cli(opts: &CommonOpts) -> RunOpts {
        RunOpts {
            out: opts.out.clone(),
            checkpoint_every: opts.checkpoint_every,
            restart: opts.restart.clone(),
            vtk_every: opts.vtk_every,
            dlb: opts.dlb == "on",
            trace: opts.trace.clone(),
            collect_state: false,
        }
    }

    pub fn bare() -> RunOpts {
        RunOpts {
            out: PathBuf::from("out"),
            checkpoint_every: None,
            restart: None,
            vtk_every: None,
            dlb: false,
            trace: None,
            collect_state: false,
        }
    }
}

/// Run the client body on the selected transport. In-process mode returns
/// one report per rank; TCP mode returns this process's report.
pub fn run_on_world<R, F>(opts: &CommonOpts, f: F) -> Result<Vec<R>>
where
    R: Send + 'static,
    F: Fn(&mut World) -> Result<R> + Send + Sync + 'static,
{
    match (&opts.tcp, opts.tcp_rank) {
        (Some(hostfile), Some(rank)) => {
            let text = std::fs::read_to_string(hostfile)?;
            let addrs: Vec<String> =
                text.lines().map(|l| l.trim().to_string()).filter(|l| !l.is_empty()).collect();
            if addrs.is_empty() {
                return Err(Error::Usage("empty host list".into()));
            }
            let mut world = World::connect_tcp(TcpConfig::new(addrs, rank))?;
            Ok(vec![f(&mut world)?])
        }
        (Some(_), None) => Err(Error::Usage("--tcp requires --tcp-rank".into())),
        (None, _) => world_spawn(opts.ranks, f),
    }
}

/// Report an error as a machine-readable line on stderr and return the
/// process exit code.
pub fn exit_code_for(result: &Result<()>) -> i32 {
    match result {
        Ok(()) => 0,
        Err(e) => {
            let msg = serde_json::json!({
                "category": e.category(),
                "message": e.to_string(),
            });
            eprintln!("error: {msg}");
            1
        }
    }
}
