//! TCP socket backend. Wire format: each connection starts with the 8-byte
//! magic `PMXWIRE1`, followed by frames
//! `[u64 length][u32 source][u32 dest][u32 tag][payload]`, all little-endian.
//! Rendezvous is via a host:port list, one entry per rank.
//!
//! The frame payload carries a 17-byte protocol header (kind, epoch, chunk
//! index/count) ahead of the message body; messages larger than the maximum
//! frame size are split into consecutive chunked frames and reassembled on
//! receipt.

use std::io::{Read, Write};
use std::net::{Shutdown, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use crossbeam_channel::{unbounded, Receiver, Sender};

use super::{Backend, Envelope, World, DEFAULT_TIMEOUT};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"PMXWIRE1";
/// Messages above this size are split into chunked frames.
pub const DEFAULT_MAX_FRAME: usize = 64 * 1024 * 1024;

#[derive(Clone, Debug)]
pub struct TcpConfig {
    /// host:port per rank, index = rank.
    pub addrs: Vec<String>,
    pub rank: usize,
    pub timeout: Duration,
    pub max_frame: usize,
}

impl TcpConfig {
    pub fn new(addrs: Vec<String>, rank: usize) -> Self {
        TcpConfig { addrs, rank, timeout: DEFAULT_TIMEOUT, max_frame: DEFAULT_MAX_FRAME }
    }
}

struct TcpBackend {
    writers: Vec<Option<Arc<Mutex<TcpStream>>>>,
    self_tx: Sender<Envelope>,
    rx: Receiver<Envelope>,
    closed: Arc<AtomicBool>,
    max_frame: usize,
}

impl Backend for TcpBackend {
    fn send(&mut self, env: Envelope) -> Result<()> {
        let dest = env.dest as usize;
        if self.writers.len() <= dest {
            return Err(Error::Transport(format!("no route to rank {dest}")));
        }
        match &self.writers[dest] {
            None => {
                // loopback
                self.self_tx
                    .send(env)
                    .map_err(|_| Error::Transport("endpoint closed".into()))
            }
            Some(stream) => {
                let mut guard = stream.lock().unwrap();
                write_message(&mut guard, &env, self.max_frame)
                    .map_err(|e| Error::Transport(format!("send to rank {dest}: {e}")))
            }
        }
    }

    fn recv_tick(&mut self, tick: Duration) -> Result<Option<Envelope>> {
        match self.rx.recv_timeout(tick) {
            Ok(env) => Ok(Some(env)),
            Err(crossbeam_channel::RecvTimeoutError::Timeout) => Ok(None),
            Err(crossbeam_channel::RecvTimeoutError::Disconnected) => {
                Err(Error::Transport("all reader connections closed".into()))
            }
        }
    }
}

impl Drop for TcpBackend {
    fn drop(&mut self) {
        self.closed.store(true, Ordering::SeqCst);
        for w in self.writers.iter().flatten() {
            let _ = w.lock().unwrap().shutdown(Shutdown::Both);
        }
    }
}

fn write_message(stream: &mut TcpStream, env: &Envelope, max_frame: usize) -> std::io::Result<()> {
    let chunks: Vec<&[u8]> = if env.payload.is_empty() {
        vec![&[][..]]
    } else {
        env.payload.chunks(max_frame).collect()
    };
    let total = chunks.len() as u32;
    for (i, chunk) in chunks.iter().enumerate() {
        let payload_len = 17 + chunk.len();
        let mut buf = Vec::with_capacity(20 + payload_len);
        buf.extend_from_slice(&(payload_len as u64).to_le_bytes());
        buf.extend_from_slice(&env.src.to_le_bytes());
        buf.extend_from_slice(&env.dest.to_le_bytes());
        buf.extend_from_slice(&env.tag.to_le_bytes());
        buf.push(env.kind);
        buf.extend_from_slice(&env.epoch.to_le_bytes());
        buf.extend_from_slice(&(i as u32).to_le_bytes());
        buf.extend_from_slice(&total.to_le_bytes());
        buf.extend_from_slice(chunk);
        stream.write_all(&buf)?;
    }
    stream.flush()
}

fn read_exact_or_eof(stream: &mut TcpStream, buf: &mut [u8]) -> std::io::Result<bool> {
    let mut filled = 0;
    while filled < buf.len() {
        match stream.read(&mut buf[filled..]) {
            Ok(0) => return Ok(false),
            Ok(n) => filled += n,
            Err(e) if e.kind() == std::io::ErrorKind::Interrupted => continue,
            Err(e) => return Err(e),
        }
    }
    Ok(true)
}

/// Reader loop for one peer connection; pushes reassembled envelopes.
fn reader_loop(mut stream: TcpStream, tx: Sender<Envelope>, closed: Arc<AtomicBool>) {
    let mut assembling: Option<Envelope> = None;
    loop {
        let mut header = [0u8; 20];
        match read_exact_or_eof(&mut stream, &mut header) {
            Ok(true) => {}
            _ => return, // peer closed or endpoint shut down
        }
        let len = u64::from_le_bytes(header[0..8].try_into().unwrap()) as usize;
        let src = u32::from_le_bytes(header[8..12].try_into().unwrap());
        let dest = u32::from_le_bytes(header[12..16].try_into().unwrap());
        let tag = u32::from_le_bytes(header[16..20].try_into().unwrap());
        if len < 17 {
            return; // malformed frame
        }
        let mut payload = vec![0u8; len];
        match read_exact_or_eof(&mut stream, &mut payload) {
            Ok(true) => {}
            _ => return,
        }
        let kind = payload[0];
        let epoch = u64::from_le_bytes(payload[1..9].try_into().unwrap());
        let chunk_idx = u32::from_le_bytes(payload[9..13].try_into().unwrap());
        let chunk_total = u32::from_le_bytes(payload[13..17].try_into().unwrap());
        let body = &payload[17..];
        let complete = if chunk_total <= 1 {
            Some(Envelope { src, dest, kind, tag, epoch, payload: body.to_vec() })
        } else if chunk_idx == 0 {
            let mut env = Envelope { src, dest, kind, tag, epoch, payload: Vec::new() };
            env.payload.extend_from_slice(body);
            assembling = Some(env);
            None
        } else {
            match assembling.as_mut() {
                Some(env) => {
                    env.payload.extend_from_slice(body);
                    if chunk_idx + 1 == chunk_total {
                        assembling.take()
                    } else {
                        None
                    }
                }
                None => return, // chunk without a head frame
            }
        };
        if let Some(env) = complete {
            if tx.send(env).is_err() || closed.load(Ordering::SeqCst) {
                return;
            }
        }
    }
}

fn handshake_out(stream: &mut TcpStream, rank: u32) -> std::io::Result<()> {
    stream.write_all(MAGIC)?;
    stream.write_all(&rank.to_le_bytes())?;
    stream.flush()
}

fn handshake_in(stream: &mut TcpStream) -> Result<u32> {
    let mut magic = [0u8; 8];
    stream
        .read_exact(&mut magic)
        .map_err(|e| Error::Transport(format!("handshake read: {e}")))?;
    if &magic != MAGIC {
        return Err(Error::Transport("bad wire magic".into()));
    }
    let mut r = [0u8; 4];
    stream
        .read_exact(&mut r)
        .map_err(|e| Error::Transport(format!("handshake read: {e}")))?;
    Ok(u32::from_le_bytes(r))
}

fn build_backend(listener: TcpListener, cfg: &TcpConfig) -> Result<TcpBackend> {
    let size = cfg.addrs.len();
    let rank = cfg.rank;
    let (tx, rx) = unbounded();
    let closed = Arc::new(AtomicBool::new(false));
    let mut streams: Vec<Option<TcpStream>> = (0..size).map(|_| None).collect();

    // Connect to lower ranks, accept from higher ranks.
    for peer in 0..rank {
        let deadline = Instant::now() + cfg.timeout;
        let stream = loop {
            match TcpStream::connect(&cfg.addrs[peer]) {
                Ok(s) => break s,
                Err(e) => {
                    if Instant::now() > deadline {
                        return Err(Error::Transport(format!(
                            "rank {rank} cannot reach rank {peer} at {}: {e}",
                            cfg.addrs[peer]
                        )));
                    }
                    std::thread::sleep(Duration::from_millis(10));
                }
            }
        };
        stream.set_nodelay(true).ok();
        let mut stream = stream;
        handshake_out(&mut stream, rank as u32)
            .map_err(|e| Error::Transport(format!("handshake to rank {peer}: {e}")))?;
        streams[peer] = Some(stream);
    }
    for _ in rank + 1..size {
        let (mut stream, _) = listener
            .accept()
            .map_err(|e| Error::Transport(format!("accept: {e}")))?;
        stream.set_nodelay(true).ok();
        let peer = handshake_in(&mut stream)? as usize;
        if peer >= size || streams[peer].is_some() {
            return Err(Error::Transport(format!("unexpected peer rank {peer}")));
        }
        streams[peer] = Some(stream);
    }

    let mut writers = Vec::with_capacity(size);
    for (peer, slot) in streams.into_iter().enumerate() {
        match slot {
            Some(stream) => {
                let reader = stream
                    .try_clone()
                    .map_err(|e| Error::Transport(format!("clone stream: {e}")))?;
                let tx = tx.clone();
                let closed = closed.clone();
                std::thread::Builder::new()
                    .name(format!("tcp-read-{rank}-{peer}"))
                    .spawn(move || reader_loop(reader, tx, closed))
                    .expect("failed to spawn reader thread");
                writers.push(Some(Arc::new(Mutex::new(stream))));
            }
            None => writers.push(None),
        }
    }
    Ok(TcpBackend { writers, self_tx: tx, rx, closed, max_frame: cfg.max_frame })
}

impl World {
    /// Join a TCP world. Binds the listener named by `cfg.addrs[cfg.rank]`
    /// and establishes the full connection mesh before returning.
    pub fn connect_tcp(cfg: TcpConfig) -> Result<World> {
        if cfg.rank >= cfg.addrs.len() {
            return Err(crate::error::usage(format!(
                "rank {} out of range for {} hosts",
                cfg.rank,
                cfg.addrs.len()
            )));
        }
        let listener = TcpListener::bind(&cfg.addrs[cfg.rank])
            .map_err(|e| Error::Transport(format!("bind {}: {e}", cfg.addrs[cfg.rank])))?;
        let size = cfg.addrs.len() as u32;
        let rank = cfg.rank as u32;
        let timeout = cfg.timeout;
        let backend = build_backend(listener, &cfg)?;
        Ok(World::new(size, rank, timeout, Box::new(backend)))
    }
}

/// Run `n` ranks over real TCP sockets on loopback, one thread per rank.
/// Ports are ephemeral; used by tests and the backend-equivalence checks.
pub fn tcp_spawn_local<R, F>(n: usize, f: F) -> Result<Vec<R>>
where
    R: Send + 'static,
    F: Fn(&mut World) -> Result<R> + Send + Sync + 'static,
{
    let mut listeners = Vec::with_capacity(n);
    let mut addrs = Vec::with_capacity(n);
    for _ in 0..n {
        let l = TcpListener::bind("127.0.0.1:0").map_err(Error::Io)?;
        addrs.push(l.local_addr().map_err(Error::Io)?.to_string());
        listeners.push(l);
    }
    let f = Arc::new(f);
    let mut handles = Vec::with_capacity(n);
    for (rank, listener) in listeners.into_iter().enumerate() {
        let addrs = addrs.clone();
        let f = f.clone();
        handles.push(
            std::thread::Builder::new()
                .name(format!("tcprank{rank}"))
                .spawn(move || -> Result<R> {
                    let cfg = TcpConfig::new(addrs, rank);
                    let backend = build_backend(listener, &cfg)?;
                    let mut world =
                        World::new(cfg.addrs.len() as u32, rank as u32, cfg.timeout, Box::new(backend));
                    f(&mut world)
                })
                .expect("failed to spawn rank thread"),
        );
    }
    let mut out = Vec::with_capacity(n);
    for (rank, h) in handles.into_iter().enumerate() {
        match h.join() {
            Ok(Ok(r)) => out.push(r),
            Ok(Err(e)) => return Err(e),
            Err(_) => return Err(Error::Transport(format!("tcp rank {rank} panicked"))),
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    #[test]
    fn tcp_pairwise_and_collectives() {
        let out = tcp_spawn_local(3, |w| {
            let all = w.allgather(&[w.rank() as u8])?;
            w.barrier()?;
            let mut outgoing = BTreeMap::new();
            outgoing.insert((w.rank() + 1) % w.size(), vec![w.rank() as u8; 3]);
            let got = w.nbx_exchange(&outgoing)?;
            Ok((all, got))
        })
        .unwrap();
        for (rank, (all, got)) in out.iter().enumerate() {
            assert_eq!(all, &vec![vec![0u8], vec![1], vec![2]]);
            let prev = (rank + 2) % 3;
            assert_eq!(got.get(&prev).unwrap(), &vec![prev as u8; 3]);
        }
    }

    #[test]
    fn tcp_chunked_large_message() {
        // Force chunking with a tiny max_frame by sending through a custom
        // local world.
        let mut listeners = Vec::new();
        let mut addrs = Vec::new();
        for _ in 0..2 {
            let l = TcpListener::bind("127.0.0.1:0").unwrap();
            addrs.push(l.local_addr().unwrap().to_string());
            listeners.push(l);
        }
        let payload: Vec<u8> = (0..100_000u32).map(|i| (i % 251) as u8).collect();
        let expect = payload.clone();
        let mut handles = Vec::new();
        for (rank, listener) in listeners.into_iter().enumerate() {
            let addrs = addrs.clone();
            let payload = payload.clone();
            let expect = expect.clone();
            handles.push(std::thread::spawn(move || {
                let mut cfg = TcpConfig::new(addrs, rank);
                cfg.max_frame = 4096;
                let backend = build_backend(listener, &cfg).unwrap();
                let mut world = World::new(2, rank as u32, cfg.timeout, Box::new(backend));
                if rank == 0 {
                    world.send(1, 5, &payload).unwrap();
                    world.barrier().unwrap();
                } else {
                    let got = world.recv(0, 5).unwrap();
                    assert_eq!(got, expect);
                    world.barrier().unwrap();
                }
            }));
        }
        for h in handles {
            h.join().unwrap();
        }
    }
}
