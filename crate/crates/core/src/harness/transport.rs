//! Reliable, ordered, per-pair message delivery between numbered endpoints.
//!
//! [`MemoryNetwork`] uses in-process channels. [`TcpNetwork`] gives every
//! endpoint a localhost listener; frames are `[from u32][len u32][bytes]`,
//! little-endian, one connection per ordered pair.

use std::collections::HashMap;
use std::io::{self, BufReader, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use crossbeam_channel::{unbounded, Receiver, RecvTimeoutError, Sender};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TransportError {
    #[error("timed out waiting for a message")]
    Timeout,
    #[error("unknown endpoint {0}")]
    UnknownEndpoint(u32),
    #[error("endpoint {0} is closed")]
    Closed(u32),
    #[error("i/o error: {0}")]
    Io(String),
}

impl From<io::Error> for TransportError {
    fn from(e: io::Error) -> Self {
        TransportError::Io(e.to_string())
    }
}

/// One party's view of the network.
pub trait Endpoint: Send {
    fn id(&self) -> u32;
    fn send(&mut self, to: u32, bytes: Vec<u8>) -> Result<(), TransportError>;
    /// Next message from anyone, as `(sender, bytes)`.
    fn recv_timeout(&mut self, timeout: Duration) -> Result<(u32, Vec<u8>), TransportError>;
}

/// Builds fully connected endpoints for a set of ids.
pub trait Network: Send + Sync {
    fn name(&self) -> &'static str;
    fn connect(&self, ids: &[u32]) -> Result<Vec<Box<dyn Endpoint>>, TransportError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransportKind {
    /// Protocol steps run as direct calls, no message passing.
    #[default]
    InProcess,
    Memory,
    Tcp,
}

impl TransportKind {
    pub fn network(self) -> Option<Box<dyn Network>> {
        match self {
            TransportKind::InProcess => None,
            TransportKind::Memory => Some(Box::new(MemoryNetwork)),
            TransportKind::Tcp => Some(Box::new(TcpNetwork)),
        }
    }
}

type Inbox = (Sender<(u32, Vec<u8>)>, Receiver<(u32, Vec<u8>)>);

#[derive(Debug, Clone, Copy, Default)]
pub struct MemoryNetwork;

struct MemoryEndpoint {
    id: u32,
    inbox: Receiver<(u32, Vec<u8>)>,
    peers: HashMap<u32, Sender<(u32, Vec<u8>)>>,
}

impl Network for MemoryNetwork {
    fn name(&self) -> &'static str {
        "memory"
    }

    fn connect(&self, ids: &[u32]) -> Result<Vec<Box<dyn Endpoint>>, TransportError> {
        let inboxes: Vec<Inbox> = ids.iter().map(|_| unbounded()).collect();
        let senders: HashMap<u32, Sender<(u32, Vec<u8>)>> =
            ids.iter().zip(&inboxes).map(|(&id, (tx, _))| (id, tx.clone())).collect();
        Ok(ids
            .iter()
            .zip(inboxes)
            .map(|(&id, (_, rx))| {
                Box::new(MemoryEndpoint {
                    id,
                    inbox: rx,
                    peers: senders.clone(),
                }) as Box<dyn Endpoint>
            })
            .collect())
    }
}

impl Endpoint for MemoryEndpoint {
    fn id(&self) -> u32 {
        self.id
    }

    fn send(&mut self, to: u32, bytes: Vec<u8>) -> Result<(), TransportError> {
        self.peers
            .get(&to)
            .ok_or(TransportError::UnknownEndpoint(to))?
            .send((self.id, bytes))
            .map_err(|_| TransportError::Closed(to))
    }

    fn recv_timeout(&mut self, timeout: Duration) -> Result<(u32, Vec<u8>), TransportError> {
        self.inbox.recv_timeout(timeout).map_err(|e| match e {
            RecvTimeoutError::Timeout => TransportError::Timeout,
            RecvTimeoutError::Disconnected => TransportError::Closed(self.id),
        })
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct TcpNetwork;

struct TcpEndpoint {
    id: u32,
    inbox: Receiver<(u32, Vec<u8>)>,
    addresses: HashMap<u32, SocketAddr>,
    streams: HashMap<u32, TcpStream>,
    stop: Arc<AtomicBool>,
}

const ACCEPT_POLL: Duration = Duration::from_millis(2);

fn read_frame(reader: &mut impl Read) -> io::Result<Option<(u32, Vec<u8>)>> {
    let mut header = [0u8; 8];
    match reader.read_exact(&mut header) {
        Ok(()) => {}
        Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e),
    }
    let from = u32::from_le_bytes(header[..4].try_into().unwrap());
    let len = u32::from_le_bytes(header[4..].try_into().unwrap()) as usize;
    let mut body = vec![0u8; len];
    reader.read_exact(&mut body)?;
    Ok(Some((from, body)))
}

fn spawn_acceptor(listener: TcpListener, tx: Sender<(u32, Vec<u8>)>, stop: Arc<AtomicBool>) -> io::Result<()> {
    listener.set_nonblocking(true)?;
    thread::Builder::new().name("tcp-accept".into()).spawn(move || {
        while !stop.load(Ordering::Relaxed) {
            match listener.accept() {
                Ok((stream, _)) => {
                    let tx = tx.clone();
                    let _ = stream.set_nonblocking(false);
                    let _ = stream.set_nodelay(true);
                    thread::spawn(move || {
                        let mut reader = BufReader::new(stream);
                        while let Ok(Some(frame)) = read_frame(&mut reader) {
                            if tx.send(frame).is_err() {
                                break;
                            }
                        }
                    });
                }
                Err(e) if e.kind() == io::ErrorKind::WouldBlock => thread::sleep(ACCEPT_POLL),
                Err(_) => thread::sleep(ACCEPT_POLL),
            }
        }
    })?;
    Ok(())
}

impl Network for TcpNetwork {
    fn name(&self) -> &'static str {
        "tcp"
    }

    fn connect(&self, ids: &[u32]) -> Result<Vec<Box<dyn Endpoint>>, TransportError> {
        let mut listeners = Vec::with_capacity(ids.len());
        let mut addresses = HashMap::new();
        for &id in ids {
            let listener = TcpListener::bind("127.0.0.1:0")?;
            addresses.insert(id, listener.local_addr()?);
            listeners.push(listener);
        }
        let mut endpoints: Vec<Box<dyn Endpoint>> = Vec::with_capacity(ids.len());
        for (&id, listener) in ids.iter().zip(listeners) {
            let (tx, rx) = unbounded();
            let stop = Arc::new(AtomicBool::new(false));
            spawn_acceptor(listener, tx, stop.clone())?;
            endpoints.push(Box::new(TcpEndpoint {
                id,
                inbox: rx,
                addresses: addresses.clone(),
                streams: HashMap::new(),
                stop,
            }));
        }
        Ok(endpoints)
    }
}

impl Endpoint for TcpEndpoint {
    fn id(&self) -> u32 {
        self.id
    }

    fn send(&mut self, to: u32, bytes: Vec<u8>) -> Result<(), TransportError> {
        if !self.streams.contains_key(&to) {
            let addr = *self.addresses.get(&to).ok_or(TransportError::UnknownEndpoint(to))?;
            let stream = TcpStream::connect(addr)?;
            stream.set_nodelay(true)?;
            self.streams.insert(to, stream);
        }
        let stream = self.streams.get_mut(&to).expect("just inserted");
        let len = u32::try_from(bytes.len()).map_err(|_| TransportError::Io("frame too large".into()))?;
        let mut frame = Vec::with_capacity(8 + bytes.len());
        frame.extend_from_slice(&self.id.to_le_bytes());
        frame.extend_from_slice(&len.to_le_bytes());
        frame.extend_from_slice(&bytes);
        stream.write_all(&frame)?;
        Ok(())
    }

    fn recv_timeout(&mut self, timeout: Duration) -> Result<(u32, Vec<u8>), TransportError> {
        self.inbox.recv_timeout(timeout).map_err(|e| match e {
            RecvTimeoutError::Timeout => TransportError::Timeout,
            RecvTimeoutError::Disconnected => TransportError::Closed(self.id),
        })
    }
}

impl Drop for TcpEndpoint {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::Relaxed);
    }
}
