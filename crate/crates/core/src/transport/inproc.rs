//! In-process multi-rank backend: every logical rank runs on its own thread
//! and envelopes travel over channels. Used by tests, the acceptance
//! harness, and the `--ranks <n>` CLI mode.

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;

use crossbeam_channel::{unbounded, Receiver, Sender};

use super::{Backend, Envelope, World, DEFAULT_TIMEOUT};
use crate::error::{usage, Error, Result};

const ABORT_MSG: &str = "world aborted by another rank's failure";

/// Randomized per-message send delays, for shaking out protocol races.
#[derive(Clone, Copy, Debug)]
pub struct DelaySpec {
    pub seed: u64,
    pub max_delay_us: u64,
}

#[derive(Clone, Copy, Debug)]
pub struct InProcConfig {
    pub delay: Option<DelaySpec>,
    pub timeout: Duration,
}

impl Default for InProcConfig {
    fn default() -> Self {
        InProcConfig { delay: None, timeout: DEFAULT_TIMEOUT }
    }
}

struct InProcBackend {
    senders: Vec<Sender<Envelope>>,
    rx: Receiver<Envelope>,
    aborted: Arc<AtomicBool>,
    rng_state: u64,
    max_delay_us: u64,
}

impl InProcBackend {
    fn next_rand(&mut self) -> u64 {
        // splitmix64; good enough for delay jitter without a crate dep
        self.rng_state = self.rng_state.wrapping_add(0x9e3779b97f4a7c15);
        let mut z = self.rng_state;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
        z ^ (z >> 31)
    }
}

impl Backend for InProcBackend {
    fn send(&mut self, env: Envelope) -> Result<()> {
        if self.aborted.load(Ordering::SeqCst) {
            return Err(Error::Transport(ABORT_MSG.into()));
        }
        if self.max_delay_us > 0 {
            let us = self.next_rand() % (self.max_delay_us + 1);
            if us > 2 {
                std::thread::sleep(Duration::from_micros(us));
            }
        }
        let dest = env.dest as usize;
        self.senders[dest]
            .send(env)
            .map_err(|_| Error::Transport(format!("rank {dest} is gone")))
    }

    fn recv_tick(&mut self, tick: Duration) -> Result<Option<Envelope>> {
        if self.aborted.load(Ordering::SeqCst) {
            return Err(Error::Transport(ABORT_MSG.into()));
        }
        match self.rx.recv_timeout(tick) {
            Ok(env) => Ok(Some(env)),
            Err(crossbeam_channel::RecvTimeoutError::Timeout) => Ok(None),
            Err(crossbeam_channel::RecvTimeoutError::Disconnected) => {
                Err(Error::Transport("all peers disconnected".into()))
            }
        }
    }
}

/// Run `n` logical ranks to completion over the in-process backend and
/// return their results in rank order. Any rank's failure aborts the world
/// with that rank's error.
pub fn world_spawn<R, F>(n: usize, f: F) -> Result<Vec<R>>
where
    R: Send + 'static,
    F: Fn(&mut World) -> Result<R> + Send + Sync + 'static,
{
    world_spawn_cfg(n, InProcConfig::default(), f)
}

pub fn world_spawn_cfg<R, F>(n: usize, cfg: InProcConfig, f: F) -> Result<Vec<R>>
where
    R: Send + 'static,
    F: Fn(&mut World) -> Result<R> + Send + Sync + 'static,
{
    if n == 0 {
        return Err(usage("world size must be >= 1"));
    }
    let mut senders = Vec::with_capacity(n);
    let mut receivers = Vec::with_capacity(n);
    for _ in 0..n {
        let (tx, rx) = unbounded();
        senders.push(tx);
        receivers.push(rx);
    }
    let aborted = Arc::new(AtomicBool::new(false));
    let f = Arc::new(f);
    let mut handles = Vec::with_capacity(n);
    for (rank, rx) in receivers.into_iter().enumerate() {
        let senders = senders.clone();
        let aborted = aborted.clone();
        let f = f.clone();
        let handle = std::thread::Builder::new()
            .name(format!("rank{rank}"))
            .spawn(move || {
                let backend = InProcBackend {
                    senders,
                    rx,
                    aborted: aborted.clone(),
                    rng_state: cfg
                        .delay
                        .map(|d| d.seed ^ (rank as u64).wrapping_mul(0xa076_1d64_78bd_642f))
                        .unwrap_or(0),
                    max_delay_us: cfg.delay.map(|d| d.max_delay_us).unwrap_or(0),
                };
                let mut world = World::new(n as u32, rank as u32, cfg.timeout, Box::new(backend));
                let out = f(&mut world);
                if out.is_err() {
                    aborted.store(true, Ordering::SeqCst);
                }
                out
            })
            .expect("failed to spawn rank thread");
        handles.push(handle);
    }
    let mut results = Vec::with_capacity(n);
    let mut first_error: Option<Error> = None;
    let mut abort_error: Option<Error> = None;
    for (rank, handle) in handles.into_iter().enumerate() {
        match handle.join() {
            Ok(Ok(r)) => results.push(r),
            Ok(Err(e)) => {
                // Prefer the root cause over abort-induced transport errors.
                let induced = matches!(&e, Error::Transport(m) if m == ABORT_MSG);
                if induced {
                    abort_error.get_or_insert(e);
                } else if first_error.is_none() {
                    first_error = Some(e);
                }
            }
            Err(panic) => {
                aborted.store(true, Ordering::SeqCst);
                if first_error.is_none() {
                    let msg = panic
                        .downcast_ref::<&str>()
                        .map(|s| s.to_string())
                        .or_else(|| panic.downcast_ref::<String>().cloned())
                        .unwrap_or_else(|| "unknown panic".into());
                    first_error = Some(Error::Transport(format!("rank {rank} panicked: {msg}")));
                }
            }
        }
    }
    if let Some(e) = first_error.or(abort_error) {
        return Err(e);
    }
    Ok(results)
}
