//! Rank-addressed message passing with collectives and the NBX dynamic
//! sparse data exchange, over two interchangeable backends: an in-process
//! multi-rank harness and TCP sockets.
//!
//! A [`World`] endpoint is confined to its rank's thread of control. All
//! user-visible calls block with progress (incoming traffic is serviced
//! while waiting) and must not be invoked concurrently on one endpoint.
//! Pairwise FIFO per (source, dest, tag) is guaranteed; cross-pair ordering
//! is not. Collectives are matched across ranks by a per-call epoch tag, so
//! mismatched participation surfaces as a protocol error instead of a
//! silent deadlock.

mod inproc;
mod tcp;

pub use inproc::{world_spawn, world_spawn_cfg, DelaySpec, InProcConfig};
pub use tcp::{tcp_spawn_local, TcpConfig};

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use crate::error::{usage, Error, Result};

pub(crate) const KIND_DATA: u8 = 0;
pub(crate) const KIND_NBX_DATA: u8 = 1;
pub(crate) const KIND_NBX_ACK: u8 = 2;
pub(crate) const KIND_TOKEN: u8 = 3;
pub(crate) const KIND_GATHER: u8 = 4;

pub(crate) const DEFAULT_TIMEOUT: Duration = Duration::from_secs(60);

/// One addressed message.
#[derive(Clone, Debug)]
pub(crate) struct Envelope {
    pub src: u32,
    pub dest: u32,
    pub kind: u8,
    pub tag: u32,
    pub epoch: u64,
    pub payload: Vec<u8>,
}

pub(crate) trait Backend: Send {
    fn send(&mut self, env: Envelope) -> Result<()>;
    /// Blocking pull with a short tick; `None` means "nothing yet".
    fn recv_tick(&mut self, tick: Duration) -> Result<Option<Envelope>>;
}

/// Rank-addressed transport endpoint.
pub struct World {
    size: u32,
    rank: u32,
    epoch: u64,
    timeout: Duration,
    pending: Vec<Envelope>,
    backend: Box<dyn Backend>,
}

impl World {
    pub(crate) fn new(size: u32, rank: u32, timeout: Duration, backend: Box<dyn Backend>) -> Self {
        World { size, rank, epoch: 0, timeout, pending: Vec::new(), backend }
    }

    pub fn size(&self) -> usize {
        self.size as usize
    }

    pub fn rank(&self) -> usize {
        self.rank as usize
    }

    /// Point-to-point send. FIFO relative to other sends to the same
    /// destination with the same tag.
    pub fn send(&mut self, dest: usize, tag: u32, payload: &[u8]) -> Result<()> {
        self.check_rank(dest)?;
        self.backend.send(Envelope {
            src: self.rank,
            dest: dest as u32,
            kind: KIND_DATA,
            tag,
            epoch: 0,
            payload: payload.to_vec(),
        })
    }

    /// Blocking receive of the next point-to-point message from `src` with `tag`.
    pub fn recv(&mut self, src: usize, tag: u32) -> Result<Vec<u8>> {
        self.check_rank(src)?;
        let env = self.pull(None, |e| {
            e.kind == KIND_DATA && e.src == src as u32 && e.tag == tag
        })?;
        Ok(env.payload)
    }

    /// Returns only after every rank has entered.
    pub fn barrier(&mut self) -> Result<()> {
        if self.size == 1 {
            return Ok(());
        }
        self.epoch += 1;
        let epoch = self.epoch;
        let rounds = dissemination_rounds(self.size);
        for k in 0..rounds {
            let dist = 1u32 << k;
            let dest = (self.rank + dist) % self.size;
            let src = (self.rank + self.size - dist) % self.size;
            self.backend.send(Envelope {
                src: self.rank,
                dest,
                kind: KIND_TOKEN,
                tag: k,
                epoch,
                payload: Vec::new(),
            })?;
            self.pull(Some((epoch, KIND_TOKEN)), |e| {
                e.kind == KIND_TOKEN && e.epoch == epoch && e.tag == k && e.src == src as u32
            })?;
        }
        Ok(())
    }

    /// Every rank receives all contributions in rank order.
    pub fn allgather(&mut self, local: &[u8]) -> Result<Vec<Vec<u8>>> {
        self.epoch += 1;
        let epoch = self.epoch;
        for dest in 0..self.size {
            if dest != self.rank {
                self.backend.send(Envelope {
                    src: self.rank,
                    dest,
                    kind: KIND_GATHER,
                    tag: 0,
                    epoch,
                    payload: local.to_vec(),
                })?;
            }
        }
        let mut out: Vec<Option<Vec<u8>>> = vec![None; self.size as usize];
        out[self.rank as usize] = Some(local.to_vec());
        let mut missing = self.size as usize - 1;
        while missing > 0 {
            let env =
                self.pull(Some((epoch, KIND_GATHER)), |e| e.kind == KIND_GATHER && e.epoch == epoch)?;
            let slot = &mut out[env.src as usize];
            if slot.is_some() {
                return Err(Error::Protocol(format!(
                    "duplicate allgather contribution from rank {}",
                    env.src
                )));
            }
            *slot = Some(env.payload);
            missing -= 1;
        }
        Ok(out.into_iter().map(|o| o.unwrap()).collect())
    }

    /// Dynamic sparse data exchange via the non-blocking consensus protocol.
    ///
    /// Every payload is delivered to its destination exactly once and the
    /// call returns on all ranks without any rank knowing the global
    /// communication pattern. Each rank issues its sends with delivery
    /// acknowledgment tracking, services incoming messages while waiting,
    /// enters a non-blocking consensus once all its own sends are
    /// acknowledged, and keeps receiving until the consensus completes.
    pub fn nbx_exchange(
        &mut self,
        outgoing: &BTreeMap<usize, Vec<u8>>,
    ) -> Result<BTreeMap<usize, Vec<u8>>> {
        for &dest in outgoing.keys() {
            self.check_rank(dest)?;
        }
        self.epoch += 1;
        let epoch = self.epoch;
        for (&dest, payload) in outgoing {
            self.backend.send(Envelope {
                src: self.rank,
                dest: dest as u32,
                kind: KIND_NBX_DATA,
                tag: 0,
                epoch,
                payload: payload.clone(),
            })?;
        }
        let mut received: BTreeMap<usize, Vec<u8>> = BTreeMap::new();
        let mut acks_outstanding = outgoing.len();
        let rounds = dissemination_rounds(self.size);
        let mut token_arrived = vec![false; rounds as usize];
        let mut entered = false;
        let mut cur_round = 0u32;
        let deadline = Instant::now() + self.timeout;

        loop {
            if !entered && acks_outstanding == 0 {
                entered = true;
                if rounds == 0 {
                    break; // single rank: consensus is trivial
                }
                self.send_token(0, epoch)?;
            }
            if entered {
                while cur_round < rounds && token_arrived[cur_round as usize] {
                    cur_round += 1;
                    if cur_round < rounds {
                        self.send_token(cur_round, epoch)?;
                    }
                }
                if cur_round == rounds {
                    break;
                }
            }
            let env = self.pull_nbx(epoch, deadline)?;
            match env.kind {
                KIND_NBX_DATA => {
                    let src = env.src;
                    if received.insert(src as usize, env.payload).is_some() {
                        return Err(Error::Protocol(format!(
                            "duplicate nbx payload from rank {src}"
                        )));
                    }
                    self.backend.send(Envelope {
                        src: self.rank,
                        dest: src,
                        kind: KIND_NBX_ACK,
                        tag: 0,
                        epoch,
                        payload: Vec::new(),
                    })?;
                }
                KIND_NBX_ACK => {
                    if acks_outstanding == 0 {
                        return Err(Error::Protocol("unexpected nbx ack".into()));
                    }
                    acks_outstanding -= 1;
                }
                KIND_TOKEN => {
                    token_arrived[env.tag as usize] = true;
                }
                _ => unreachable!(),
            }
        }
        Ok(received)
    }

    fn send_token(&mut self, round: u32, epoch: u64) -> Result<()> {
        let dest = (self.rank + (1u32 << round)) % self.size;
        self.backend.send(Envelope {
            src: self.rank,
            dest,
            kind: KIND_TOKEN,
            tag: round,
            epoch,
            payload: Vec::new(),
        })
    }

    /// Pull the next envelope relevant to the nbx call at `epoch`.
    fn pull_nbx(&mut self, epoch: u64, deadline: Instant) -> Result<Envelope> {
        if let Some(i) = self.pending.iter().position(|e| {
            e.epoch == epoch
                && matches!(e.kind, KIND_NBX_DATA | KIND_NBX_ACK | KIND_TOKEN)
        }) {
            return Ok(self.pending.remove(i));
        }
        loop {
            if Instant::now() > deadline {
                return Err(Error::Transport(format!(
                    "rank {} timed out in nbx_exchange (epoch {epoch})",
                    self.rank
                )));
            }
            if let Some(env) = self.backend.recv_tick(Duration::from_millis(20))? {
                if env.epoch == epoch {
                    match env.kind {
                        KIND_NBX_DATA | KIND_NBX_ACK | KIND_TOKEN => return Ok(env),
                        _ => {
                            return Err(Error::Protocol(format!(
                                "rank {} received {} during nbx at epoch {epoch}",
                                self.rank,
                                kind_name(env.kind)
                            )))
                        }
                    }
                }
                // different epoch: same-epoch mismatches were handled above
                self.stash(env, None)?;
            }
        }
    }

    /// Pull the next envelope matched by `pred`, stashing everything else.
    /// `collective` (epoch, expected kind) enables participation-mismatch
    /// detection.
    fn pull(
        &mut self,
        collective: Option<(u64, u8)>,
        pred: impl Fn(&Envelope) -> bool,
    ) -> Result<Envelope> {
        if let Some(i) = self.pending.iter().position(|e| pred(e)) {
            return Ok(self.pending.remove(i));
        }
        let deadline = Instant::now() + self.timeout;
        loop {
            if Instant::now() > deadline {
                return Err(Error::Transport(format!(
                    "rank {} timed out waiting for a message",
                    self.rank
                )));
            }
            if let Some(env) = self.backend.recv_tick(Duration::from_millis(20))? {
                if pred(&env) {
                    return Ok(env);
                }
                self.stash(env, collective)?;
            }
        }
    }

    /// Keep an unmatched envelope for later. A same-epoch envelope of a
    /// different collective kind means the ranks disagree on what they are
    /// executing (mismatched participation).
    fn stash(&mut self, env: Envelope, collective: Option<(u64, u8)>) -> Result<()> {
        if let Some((epoch, kind)) = collective {
            if env.kind != KIND_DATA && env.epoch == epoch && env.kind != kind {
                return Err(Error::Protocol(format!(
                    "rank {} received {} while executing a different collective at epoch {epoch}",
                    self.rank,
                    kind_name(env.kind)
                )));
            }
        }
        self.pending.push(env);
        Ok(())
    }

    fn check_rank(&self, r: usize) -> Result<()> {
        if r >= self.size as usize {
            return Err(usage(format!("rank {r} out of range for world size {}", self.size)));
        }
        Ok(())
    }
}

fn kind_name(kind: u8) -> &'static str {
    match kind {
        KIND_DATA => "point-to-point data",
        KIND_NBX_DATA => "nbx data",
        KIND_NBX_ACK => "nbx ack",
        KIND_TOKEN => "consensus token",
        KIND_GATHER => "allgather data",
        _ => "unknown",
    }
}

fn dissemination_rounds(size: u32) -> u32 {
    if size <= 1 {
        0
    } else {
        32 - (size - 1).leading_zeros()
    }
}
