//! Framed messages between server and clients, an in-process loopback
//! backend, a TCP backend, and the traffic ledger both of them feed.
//!
//! Frame layout, integers little-endian:
//!
//! ```text
//! "FFMS" | u32 payload length | u8 kind | u32 round | u32 sender | payload
//! ```

use std::collections::BTreeMap;
use std::io::{BufReader, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::path::Path;
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::thread;
use std::time::{Duration, Instant};

use fedfreeze_core::codec::payload_tensor_bytes;
use serde::Serialize;

use crate::{Error, Result};

pub const FRAME_MAGIC: [u8; 4] = *b"FFMS";
pub const FRAME_HEADER_LEN: usize = 17;
/// Sender id used by the server.
pub const SERVER_ID: u32 = u32::MAX;
/// Largest payload a frame may announce.
pub const MAX_PAYLOAD: usize = 1 << 30;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
#[repr(u8)]
pub enum MessageKind {
    /// Serialized full model, server to client.
    GlobalModel = 1,
    /// Encoded partial update, client to server.
    PartialUpdate = 2,
    /// Server announces a round. Round 0 is the handshake and carries the
    /// assigned client id.
    RoundStart = 3,
    /// Server confirms aggregation; a client's round-0 ack opens a TCP session.
    RoundAck = 4,
    /// UTF-8 description of a failure, either direction.
    Error = 5,
    /// Server ends the session.
    Shutdown = 6,
}

impl TryFrom<u8> for MessageKind {
    type Error = Error;

    fn try_from(b: u8) -> Result<Self> {
        Ok(match b {
            1 => MessageKind::GlobalModel,
            2 => MessageKind::PartialUpdate,
            3 => MessageKind::RoundStart,
            4 => MessageKind::RoundAck,
            5 => MessageKind::Error,
            6 => MessageKind::Shutdown,
            _ => return Err(Error::Transport(format!("unknown message kind {}", b))),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Message {
    pub kind: MessageKind,
    pub round: u32,
    pub sender: u32,
    pub payload: Vec<u8>,
}

impl Message {
    pub fn new(kind: MessageKind, round: u32, sender: u32, payload: Vec<u8>) -> Self {
        Self { kind, round, sender, payload }
    }

    pub fn control(kind: MessageKind, round: u32, sender: u32) -> Self {
        Self::new(kind, round, sender, Vec::new())
    }

    pub fn error(round: u32, sender: u32, text: &str) -> Self {
        Self::new(MessageKind::Error, round, sender, text.as_bytes().to_vec())
    }

    pub fn payload_byte_count(&self) -> usize {
        self.payload.len()
    }

    pub fn wire_len(&self) -> u64 {
        (FRAME_HEADER_LEN + self.payload.len()) as u64
    }

    /// Raw parameter bytes carried by a model or update payload; zero for
    /// control messages.
    pub fn tensor_bytes(&self) -> Result<u64> {
        Ok(match self.kind {
            MessageKind::GlobalModel => payload_tensor_bytes(&self.payload, false)?,
            MessageKind::PartialUpdate => payload_tensor_bytes(&self.payload, true)?,
            _ => 0,
        })
    }

    pub fn text(&self) -> String {
        String::from_utf8_lossy(&self.payload).into_owned()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(FRAME_HEADER_LEN + self.payload.len());
        out.extend_from_slice(&FRAME_MAGIC);
        out.extend_from_slice(&(self.payload.len() as u32).to_le_bytes());
        out.push(self.kind as u8);
        out.extend_from_slice(&self.round.to_le_bytes());
        out.extend_from_slice(&self.sender.to_le_bytes());
        out.extend_from_slice(&self.payload);
        out
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut head = [0u8; FRAME_HEADER_LEN];
        r.read_exact(&mut head)?;
        if head[..4] != FRAME_MAGIC {
            return Err(Error::Transport("bad frame magic".into()));
        }
        let word = |i: usize| u32::from_le_bytes(head[i..i + 4].try_into().expect("4 bytes"));
        let len = word(4) as usize;
        if len > MAX_PAYLOAD {
            return Err(Error::Transport(format!("frame announces {} bytes", len)));
        }
        let kind = MessageKind::try_from(head[8])?;
        let mut payload = vec![0u8; len];
        r.read_exact(&mut payload)?;
        Ok(Message { kind, round: word(9), sender: word(13), payload })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Uplink,
    Downlink,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct Tally {
    /// Raw parameter bytes.
    pub bytes: u64,
    /// Framing, codec headers and control messages.
    pub header_bytes: u64,
    pub messages: u64,
}

impl Tally {
    fn add(&mut self, other: &Tally) {
        self.bytes += other.bytes;
        self.header_bytes += other.header_bytes;
        self.messages += other.messages;
    }
}

/// Byte totals per (round, client, direction), filled from delivered messages.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrafficLedger {
    cells: BTreeMap<(u32, u32, Direction), Tally>,
}

impl TrafficLedger {
    pub fn new() -> Self {
        Self::default()
    }

    /// Malformed payloads still cost bandwidth; they count as overhead.
    pub fn record(&mut self, round: u32, client: u32, direction: Direction, msg: &Message) -> Tally {
        let bytes = msg.tensor_bytes().unwrap_or(0);
        let tally = Tally { bytes, header_bytes: msg.wire_len() - bytes, messages: 1 };
        self.cells.entry((round, client, direction)).or_default().add(&tally);
        tally
    }

    pub fn get(&self, round: u32, client: u32, direction: Direction) -> Tally {
        self.cells.get(&(round, client, direction)).copied().unwrap_or_default()
    }

    pub fn round_total(&self, round: u32, direction: Direction) -> Tally {
        let mut t = Tally::default();
        for (_, tally) in self.cells.iter().filter(|((r, _, d), _)| *r == round && *d == direction) {
            t.add(tally);
        }
        t
    }

    pub fn total(&self, direction: Direction) -> Tally {
        let mut t = Tally::default();
        for (_, tally) in self.cells.iter().filter(|((_, _, d), _)| *d == direction) {
            t.add(tally);
        }
        t
    }

    pub fn iter(&self) -> impl Iterator<Item = (u32, u32, Direction, Tally)> + '_ {
        self.cells.iter().map(|(&(r, c, d), &t)| (r, c, d, t))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["round", "client", "direction", "bytes", "header_bytes", "messages"])?;
        for (round, client, dir, t) in self.iter() {
            let dir = match dir {
                Direction::Uplink => "uplink",
                Direction::Downlink => "downlink",
            };
            w.write_record([
                round.to_string(),
                client.to_string(),
                dir.to_string(),
                t.bytes.to_string(),
                t.header_bytes.to_string(),
                t.messages.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// What the server's inbox yields.
#[derive(Debug)]
pub enum Event {
    Message(Message),
    /// The connection to this client is gone.
    Disconnected(u32),
}

pub trait ServerLink {
    fn clients(&self) -> usize;
    fn send(&mut self, client: u32, msg: &Message) -> Result<()>;
    /// `None` once `timeout` passes without an event.
    fn recv_timeout(&mut self, timeout: Duration) -> Result<Option<Event>>;
}

pub trait ClientLink {
    fn id(&self) -> u32;
    fn send(&mut self, msg: Message) -> Result<()>;
    fn recv(&mut self) -> Result<Message>;
}

fn inbox_event(rx: &Receiver<Event>, timeout: Duration) -> Result<Option<Event>> {
    match rx.recv_timeout(timeout) {
        Ok(e) => Ok(Some(e)),
        Err(RecvTimeoutError::Timeout) => Ok(None),
        Err(RecvTimeoutError::Disconnected) => Err(Error::Transport("every client link is closed".into())),
    }
}

pub struct LoopbackServer {
    outboxes: Vec<Sender<Message>>,
    inbox: Receiver<Event>,
}

pub struct LoopbackClient {
    id: u32,
    inbox: Receiver<Message>,
    server: Sender<Event>,
}

/// Connected in-process endpoints for `n` clients.
pub fn loopback(n: usize) -> (LoopbackServer, Vec<LoopbackClient>) {
    let (to_server, inbox) = mpsc::channel();
    let mut outboxes = Vec::with_capacity(n);
    let mut clients = Vec::with_capacity(n);
    for id in 0..n as u32 {
        let (tx, rx) = mpsc::channel();
        outboxes.push(tx);
        clients.push(LoopbackClient { id, inbox: rx, server: to_server.clone() });
    }
    (LoopbackServer { outboxes, inbox }, clients)
}

impl ServerLink for LoopbackServer {
    fn clients(&self) -> usize {
        self.outboxes.len()
    }

    fn send(&mut self, client: u32, msg: &Message) -> Result<()> {
        let tx = self
            .outboxes
            .get(client as usize)
            .ok_or_else(|| Error::Transport(format!("no client {}", client)))?;
        tx.send(msg.clone()).map_err(|_| Error::Transport(format!("client {} has gone away", client)))
    }

    fn recv_timeout(&mut self, timeout: Duration) -> Result<Option<Event>> {
        inbox_event(&self.inbox, timeout)
    }
}

impl ClientLink for LoopbackClient {
    fn id(&self) -> u32 {
        self.id
    }

    fn send(&mut self, msg: Message) -> Result<()> {
        self.server.send(Event::Message(msg)).map_err(|_| Error::Transport("server has gone away".into()))
    }

    fn recv(&mut self) -> Result<Message> {
        self.inbox.recv().map_err(|_| Error::Transport("server has gone away".into()))
    }
}

impl Drop for LoopbackClient {
    fn drop(&mut self) {
        let _ = self.server.send(Event::Disconnected(self.id));
    }
}

/// Listening socket that hands out client ids in accept order.
pub struct TcpHub {
    listener: TcpListener,
}

impl TcpHub {
    pub fn bind(addr: &str) -> Result<Self> {
        let listener =
            TcpListener::bind(addr).map_err(|e| Error::Transport(format!("cannot listen on {}: {}", addr, e)))?;
        Ok(Self { listener })
    }

    pub fn local_addr(&self) -> Result<SocketAddr> {
        Ok(self.listener.local_addr()?)
    }

    /// Waits for `n` clients to connect and complete the handshake.
    pub fn accept(self, n: usize, timeout: Duration) -> Result<TcpServer> {
        let deadline = Instant::now() + timeout;
        self.listener.set_nonblocking(true)?;
        let (tx, inbox) = mpsc::channel();
        let mut writers = Vec::with_capacity(n);
        while writers.len() < n {
            match self.listener.accept() {
                Ok((stream, peer)) => {
                    stream.set_nonblocking(false)?;
                    stream.set_nodelay(true)?;
                    let id = writers.len() as u32;
                    let mut reader = BufReader::new(stream.try_clone()?);
                    stream.set_read_timeout(Some(deadline.saturating_duration_since(Instant::now()).max(Duration::from_millis(1))))?;
                    let hello = Message::read_from(&mut reader)?;
                    stream.set_read_timeout(None)?;
                    if hello.kind != MessageKind::RoundAck || hello.round != 0 {
                        return Err(Error::Transport(format!("{} opened with {:?} instead of a handshake", peer, hello.kind)));
                    }
                    let mut writer = stream;
                    writer.write_all(&Message::new(MessageKind::RoundStart, 0, SERVER_ID, id.to_le_bytes().to_vec()).encode())?;
                    log::debug!("client {} connected from {}", id, peer);
                    let tx = tx.clone();
                    thread::spawn(move || loop {
                        match Message::read_from(&mut reader) {
                            Ok(msg) => {
                                if tx.send(Event::Message(msg)).is_err() {
                                    break;
                                }
                            }
                            Err(_) => {
                                let _ = tx.send(Event::Disconnected(id));
                                break;
                            }
                        }
                    });
                    writers.push(Some(writer));
                }
                Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                    if Instant::now() >= deadline {
                        return Err(Error::Transport(format!("only {} of {} clients connected", writers.len(), n)));
                    }
                    thread::sleep(Duration::from_millis(5));
                }
                Err(e) => return Err(e.into()),
            }
        }
        Ok(TcpServer { writers, inbox })
    }
}

pub struct TcpServer {
    writers: Vec<Option<TcpStream>>,
    inbox: Receiver<Event>,
}

impl ServerLink for TcpServer {
    fn clients(&self) -> usize {
        self.writers.len()
    }

    fn send(&mut self, client: u32, msg: &Message) -> Result<()> {
        let slot = self
            .writers
            .get_mut(client as usize)
            .ok_or_else(|| Error::Transport(format!("no client {}", client)))?;
        let stream = slot.as_mut().ok_or_else(|| Error::Transport(format!("client {} is disconnected", client)))?;
        if let Err(e) = stream.write_all(&msg.encode()) {
            *slot = None;
            return Err(Error::Transport(format!("client {}: {}", client, e)));
        }
        Ok(())
    }

    fn recv_timeout(&mut self, timeout: Duration) -> Result<Option<Event>> {
        inbox_event(&self.inbox, timeout)
    }
}

pub struct TcpClient {
    id: u32,
    reader: BufReader<TcpStream>,
    writer: TcpStream,
}

impl TcpClient {
    /// Connects, retrying until `timeout`, and performs the handshake.
    pub fn connect(addr: &str, timeout: Duration) -> Result<Self> {
        let deadline = Instant::now() + timeout;
        let target = addr
            .to_socket_addrs()
            .map_err(|e| Error::Transport(format!("{}: {}", addr, e)))?
            .next()
            .ok_or_else(|| Error::Transport(format!("{} resolves to nothing", addr)))?;
        let stream = loop {
            match TcpStream::connect(target) {
                Ok(s) => break s,
                Err(e) if Instant::now() < deadline => {
                    log::debug!("connect {}: {}; retrying", addr, e);
                    thread::sleep(Duration::from_millis(20));
                }
                Err(e) => return Err(Error::Transport(format!("cannot connect to {}: {}", addr, e))),
            }
        };
        stream.set_nodelay(true)?;
        let mut writer = stream.try_clone()?;
        let mut reader = BufReader::new(stream);
        writer.write_all(&Message::control(MessageKind::RoundAck, 0, SERVER_ID).encode())?;
        let welcome = Message::read_from(&mut reader)?;
        if welcome.kind != MessageKind::RoundStart || welcome.round != 0 || welcome.payload.len() != 4 {
            return Err(Error::Transport(format!("unexpected handshake reply {:?}", welcome.kind)));
        }
        let id = u32::from_le_bytes(welcome.payload[..].try_into().expect("4 bytes"));
        Ok(Self { id, reader, writer })
    }
}

impl ClientLink for TcpClient {
    fn id(&self) -> u32 {
        self.id
    }

    fn send(&mut self, msg: Message) -> Result<()> {
        Ok(self.writer.write_all(&msg.encode())?)
    }

    fn recv(&mut self) -> Result<Message> {
        Message::read_from(&mut self.reader)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frame_round_trip() {
        let msg = Message::new(MessageKind::PartialUpdate, 7, 3, vec![1, 2, 3, 255]);
        let bytes = msg.encode();
        assert_eq!(bytes.len() as u64, msg.wire_len());
        assert_eq!(Message::read_from(&mut bytes.as_slice()).unwrap(), msg);
        let mut bad = bytes.clone();
        bad[8] = 42;
        assert!(Message::read_from(&mut bad.as_slice()).is_err());
        assert!(Message::read_from(&mut &bytes[..10]).is_err());
    }

    #[test]
    fn control_messages_are_all_header() {
        let mut ledger = TrafficLedger::new();
        let t = ledger.record(1, 0, Direction::Downlink, &Message::control(MessageKind::RoundStart, 1, SERVER_ID));
        assert_eq!(t, Tally { bytes: 0, header_bytes: FRAME_HEADER_LEN as u64, messages: 1 });
    }
}
