//! One process per rank over TCP. Rank `r` listens on `roster[r]`, dials
//! every lower rank and accepts every higher one.

use std::io::{BufWriter, Read, Write};
use std::net::{Shutdown, TcpListener, TcpStream};
use std::path::Path;
use std::thread;
use std::time::{Duration, Instant};

use crossbeam_channel::{bounded, Receiver, Sender};

use super::{Endpoint, Envelope, Incoming, TransportError, ENVELOPE_HEADER_LEN};
use crate::ids::Rank;

const HELLO: [u8; 4] = *b"ASIM";
const ENDIAN_PROBE: u32 = 0x0102_0304;
const QUEUE_ENVELOPES: usize = 1024;

/// Roster file: JSON list of `host:port`, indexed by rank.
pub fn load_roster(path: &Path) -> Result<Vec<String>, TransportError> {
    let text = std::fs::read_to_string(path).map_err(|e| TransportError::TransportDown(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| TransportError::TransportDown(format!("{}: {e}", path.display())))
}

fn down(e: impl std::fmt::Display) -> TransportError {
    TransportError::TransportDown(e.to_string())
}

fn hello(rank: Rank) -> [u8; 12] {
    let mut h = [0u8; 12];
    h[..4].copy_from_slice(&HELLO);
    h[4..8].copy_from_slice(&rank.to_le_bytes());
    h[8..].copy_from_slice(&ENDIAN_PROBE.to_ne_bytes());
    h
}

fn read_hello(s: &mut TcpStream, size: usize) -> Result<Rank, TransportError> {
    let mut h = [0u8; 12];
    s.read_exact(&mut h).map_err(down)?;
    if h[..4] != HELLO {
        return Err(down("bad handshake"));
    }
    if u32::from_le_bytes(h[8..].try_into().unwrap()) != ENDIAN_PROBE {
        return Err(down("peer byte order differs"));
    }
    let r = u32::from_le_bytes(h[4..8].try_into().unwrap());
    if r as usize >= size {
        return Err(TransportError::NoSuchPeer(r));
    }
    Ok(r)
}

pub fn connect(roster: &[String], rank: Rank, batch_bytes: usize, timeout: Duration) -> Result<Endpoint, TransportError> {
    let size = roster.len();
    let me = rank as usize;
    if me >= size {
        return Err(TransportError::NoSuchPeer(rank));
    }
    let listener = TcpListener::bind(&roster[me]).map_err(|e| down(format!("bind {}: {e}", roster[me])))?;
    let deadline = Instant::now() + timeout;
    let mut streams: Vec<Option<TcpStream>> = (0..size).map(|_| None).collect();
    for (peer, addr) in roster.iter().enumerate().take(me) {
        let mut s = loop {
            match TcpStream::connect(addr) {
                Ok(s) => break s,
                Err(e) if Instant::now() > deadline => return Err(down(format!("connect {addr}: {e}"))),
                Err(_) => thread::sleep(Duration::from_millis(20)),
            }
        };
        s.write_all(&hello(rank)).map_err(down)?;
        streams[peer] = Some(s);
    }
    listener.set_nonblocking(true).map_err(down)?;
    let mut waiting = size - me - 1;
    while waiting > 0 {
        match listener.accept() {
            Ok((mut s, _)) => {
                s.set_nonblocking(false).map_err(down)?;
                let peer = read_hello(&mut s, size)?;
                if peer as usize <= me || streams[peer as usize].is_some() {
                    return Err(down(format!("unexpected connection from rank {peer}")));
                }
                streams[peer as usize] = Some(s);
                waiting -= 1;
            }
            Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                if Instant::now() > deadline {
                    return Err(down("timed out waiting for peers"));
                }
                thread::sleep(Duration::from_millis(10));
            }
            Err(e) => return Err(down(e)),
        }
    }

    let (inbox_tx, inbox_rx) = bounded(QUEUE_ENVELOPES * size.max(1));
    let mut outlets = Vec::with_capacity(size);
    for (peer, s) in streams.into_iter().enumerate() {
        match s {
            None => outlets.push(inbox_tx.clone()),
            Some(s) => {
                s.set_nodelay(true).map_err(down)?;
                let rs = s.try_clone().map_err(down)?;
                let tx = inbox_tx.clone();
                thread::spawn(move || reader(rs, peer as Rank, tx));
                let (wtx, wrx) = bounded(QUEUE_ENVELOPES);
                thread::spawn(move || writer(s, wrx));
                outlets.push(wtx);
            }
        }
    }
    drop(inbox_tx);
    Ok(Endpoint::from_parts(rank, outlets, inbox_rx, batch_bytes))
}

fn reader(mut s: TcpStream, peer: Rank, tx: Sender<Incoming>) {
    let mut h = [0u8; ENVELOPE_HEADER_LEN];
    loop {
        match s.read_exact(&mut h) {
            Ok(()) => {}
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => {
                let _ = tx.send(Incoming::Closed(peer));
                return;
            }
            Err(e) => {
                let _ = tx.send(Incoming::Failed(peer, e.to_string()));
                return;
            }
        }
        let (mut env, len) = match Envelope::parse_header(&h) {
            Ok(x) => x,
            Err(e) => {
                let _ = tx.send(Incoming::Failed(peer, e.to_string()));
                return;
            }
        };
        env.payload = vec![0; len as usize];
        if let Err(e) = s.read_exact(&mut env.payload) {
            let _ = tx.send(Incoming::Failed(peer, e.to_string()));
            return;
        }
        if tx.send(Incoming::Envelope(env)).is_err() {
            return;
        }
    }
}

fn writer(s: TcpStream, rx: Receiver<Incoming>) {
    let mut w = BufWriter::with_capacity(1 << 16, &s);
    while let Ok(inc) = rx.recv() {
        match inc {
            Incoming::Envelope(e) => {
                if w.write_all(&e.header()).and_then(|_| w.write_all(&e.payload)).is_err() {
                    return;
                }
                if rx.is_empty() && w.flush().is_err() {
                    return;
                }
            }
            Incoming::Closed(_) | Incoming::Failed(..) => break,
        }
    }
    let _ = w.flush();
    drop(w);
    let _ = s.shutdown(Shutdown::Write);
}
