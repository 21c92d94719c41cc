//! Pluggable message transport with tappable links.
//!
//! Two backends share one framing (4-byte big-endian length prefix per
//! message): an in-process network keyed by string addresses, used by the
//! test and attack harnesses because it is deterministic and every link
//! can be tapped, and TCP loopback for the multi-process CLI demo.
//! Addresses carry their scheme: `inproc:name` or `tcp:host:port`.
//!
//! A [`TapLog`] attached to a listener records every message crossing the
//! accepted connections, in order, with direction and timestamp. Taps
//! observe copies and never alter delivered bytes.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::mpsc::{Receiver, Sender, SyncSender};
use std::sync::{mpsc, Arc, Mutex};
use std::time::Instant;

use thiserror::Error;

/// Most messages are small control frames; model payloads stay well under
/// this.
pub const MAX_MESSAGE_LEN: usize = 64 << 20;

#[derive(Debug, Error)]
pub enum NetError {
    #[error("bind failed for '{addr}': {reason}")]
    BindFailed { addr: String, reason: String },
    #[error("connect failed for '{addr}': {reason}")]
    ConnectFailed { addr: String, reason: String },
    #[error("connection closed by peer")]
    Closed,
    #[error("malformed frame: {0}")]
    Malformed(String),
    #[error("address '{0}' is not of the form inproc:<name> or tcp:<host>:<port>")]
    BadAddress(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// One bidirectional message connection.
pub trait Conn: Send {
    fn send_msg(&mut self, bytes: &[u8]) -> Result<(), NetError>;
    fn recv_msg(&mut self) -> Result<Vec<u8>, NetError>;
}

pub trait Listener: Send {
    fn accept(&mut self) -> Result<Box<dyn Conn>, NetError>;
    /// The address peers should dial, including the scheme.
    fn local_addr(&self) -> String;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    ToServer,
    ToClient,
}

impl Direction {
    pub fn as_str(&self) -> &'static str {
        match self {
            Direction::ToServer => "to-server",
            Direction::ToClient => "to-client",
        }
    }
}

#[derive(Debug, Clone)]
pub struct TapEntry {
    pub direction: Direction,
    pub elapsed_nanos: u128,
    pub bytes: Vec<u8>,
}

/// Append-only log of every message crossing a tapped link.
pub struct TapLog {
    started: Instant,
    entries: Mutex<Vec<TapEntry>>,
}

impl TapLog {
    pub fn new() -> Arc<Self> {
        Arc::new(TapLog {
            started: Instant::now(),
            entries: Mutex::new(Vec::new()),
        })
    }

    fn record(&self, direction: Direction, bytes: &[u8]) {
        self.entries.lock().unwrap().push(TapEntry {
            direction,
            elapsed_nanos: self.started.elapsed().as_nanos(),
            bytes: bytes.to_vec(),
        });
    }

    pub fn entries(&self) -> Vec<TapEntry> {
        self.entries.lock().unwrap().clone()
    }

    /// All observed bytes, both directions, in arrival order.
    pub fn all_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for e in self.entries.lock().unwrap().iter() {
            out.extend_from_slice(&e.bytes);
        }
        out
    }

    pub fn len(&self) -> usize {
        self.entries.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Scan for `needle` occurring as a contiguous substring of `haystack`.
pub fn contains_window(haystack: &[u8], needle: &[u8]) -> bool {
    if needle.is_empty() || haystack.len() < needle.len() {
        return false;
    }
    haystack.windows(needle.len()).any(|w| w == needle)
}

// ---------------------------------------------------------------------------
// In-process network
// ---------------------------------------------------------------------------

type InProcPayload = Vec<u8>;

struct InProcListenerState {
    pending: SyncSender<InProcConnHalf>,
    tap: Option<Arc<TapLog>>,
}

#[derive(Default)]
struct InProcState {
    listeners: Mutex<HashMap<String, InProcListenerState>>,
}

/// Transport handle. Clone freely; clones share the same in-process
/// address space (or the host TCP stack).
#[derive(Clone)]
pub struct Network {
    kind: NetworkKind,
}

#[derive(Clone)]
enum NetworkKind {
    InProc(Arc<InProcState>),
    Tcp,
}

impl Network {
    pub fn in_process() -> Self {
        Network {
            kind: NetworkKind::InProc(Arc::new(InProcState::default())),
        }
    }

    pub fn tcp() -> Self {
        Network {
            kind: NetworkKind::Tcp,
        }
    }

    pub fn listen(&self, addr: &str) -> Result<Box<dyn Listener>, NetError> {
        self.listen_tapped(addr, None)
    }

    /// Bind a listener whose accepted connections are recorded in `tap`.
    pub fn listen_tapped(
        &self,
        addr: &str,
        tap: Option<Arc<TapLog>>,
    ) -> Result<Box<dyn Listener>, NetError> {
        match (&self.kind, parse_addr(addr)?) {
            (NetworkKind::InProc(state), Addr::InProc(name)) => {
                let (tx, rx) = mpsc::sync_channel(64);
                let mut listeners = state.listeners.lock().unwrap();
                if listeners.contains_key(&name) {
                    return Err(NetError::BindFailed {
                        addr: addr.into(),
                        reason: "address already bound".into(),
                    });
                }
                listeners.insert(name.clone(), InProcListenerState { pending: tx, tap });
                Ok(Box::new(InProcListener {
                    name,
                    incoming: rx,
                }))
            }
            (NetworkKind::Tcp, Addr::Tcp(hostport)) => {
                let listener = TcpListener::bind(&hostport).map_err(|e| NetError::BindFailed {
                    addr: addr.into(),
                    reason: e.to_string(),
                })?;
                let local = listener.local_addr()?;
                Ok(Box::new(TcpListenerWrap {
                    listener,
                    addr: format!("tcp:{local}"),
                    tap,
                }))
            }
            _ => Err(NetError::BadAddress(format!(
                "{addr} (scheme does not match this transport)"
            ))),
        }
    }

    pub fn connect(&self, addr: &str) -> Result<Box<dyn Conn>, NetError> {
        match (&self.kind, parse_addr(addr)?) {
            (NetworkKind::InProc(state), Addr::InProc(name)) => {
                let listeners = state.listeners.lock().unwrap();
                let entry = listeners.get(&name).ok_or_else(|| NetError::ConnectFailed {
                    addr: addr.into(),
                    reason: "no listener at address".into(),
                })?;
                let (c2s_tx, c2s_rx) = mpsc::channel::<InProcPayload>();
                let (s2c_tx, s2c_rx) = mpsc::channel::<InProcPayload>();
                let client = InProcConnHalf {
                    tx: c2s_tx,
                    rx: s2c_rx,
                    tap: entry.tap.clone(),
                    send_dir: Direction::ToServer,
                };
                let server = InProcConnHalf {
                    tx: s2c_tx,
                    rx: c2s_rx,
                    tap: entry.tap.clone(),
                    send_dir: Direction::ToClient,
                };
                entry
                    .pending
                    .send(server)
                    .map_err(|_| NetError::ConnectFailed {
                        addr: addr.into(),
                        reason: "listener dropped".into(),
                    })?;
                Ok(Box::new(client))
            }
            (NetworkKind::Tcp, Addr::Tcp(hostport)) => {
                let stream = TcpStream::connect(&hostport).map_err(|e| NetError::ConnectFailed {
                    addr: addr.into(),
                    reason: e.to_string(),
                })?;
                Ok(Box::new(TcpConn { stream, tap: None, send_dir: Direction::ToServer }))
            }
            _ => Err(NetError::BadAddress(format!(
                "{addr} (scheme does not match this transport)"
            ))),
        }
    }

    /// Pick a fresh service address for this transport. `hint` names the
    /// service in in-process addresses.
    pub fn ephemeral_addr(&self, hint: &str) -> String {
        use std::sync::atomic::{AtomicU64, Ordering};
        static COUNTER: AtomicU64 = AtomicU64::new(0);
        match self.kind {
            NetworkKind::InProc(_) => format!(
                "inproc:{hint}-{}",
                COUNTER.fetch_add(1, Ordering::Relaxed)
            ),
            NetworkKind::Tcp => "tcp:127.0.0.1:0".to_string(),
        }
    }
}

enum Addr {
    InProc(String),
    Tcp(String),
}

fn parse_addr(addr: &str) -> Result<Addr, NetError> {
    if let Some(name) = addr.strip_prefix("inproc:") {
        if name.is_empty() {
            return Err(NetError::BadAddress(addr.into()));
        }
        Ok(Addr::InProc(name.to_string()))
    } else if let Some(hostport) = addr.strip_prefix("tcp:") {
        Ok(Addr::Tcp(hostport.to_string()))
    } else {
        Err(NetError::BadAddress(addr.into()))
    }
}

struct InProcConnHalf {
    tx: Sender<InProcPayload>,
    rx: Receiver<InProcPayload>,
    tap: Option<Arc<TapLog>>,
    send_dir: Direction,
}

impl Conn for InProcConnHalf {
    fn send_msg(&mut self, bytes: &[u8]) -> Result<(), NetError> {
        if let Some(tap) = &self.tap {
            tap.record(self.send_dir, bytes);
        }
        self.tx.send(bytes.to_vec()).map_err(|_| NetError::Closed)
    }

    fn recv_msg(&mut self) -> Result<Vec<u8>, NetError> {
        self.rx.recv().map_err(|_| NetError::Closed)
    }
}

struct InProcListener {
    name: String,
    incoming: Receiver<InProcConnHalf>,
}

impl Listener for InProcListener {
    fn accept(&mut self) -> Result<Box<dyn Conn>, NetError> {
        let server_half = self.incoming.recv().map_err(|_| NetError::Closed)?;
        Ok(Box::new(server_half))
    }

    fn local_addr(&self) -> String {
        format!("inproc:{}", self.name)
    }
}

// ---------------------------------------------------------------------------
// TCP transport
// ---------------------------------------------------------------------------

struct TcpListenerWrap {
    listener: TcpListener,
    addr: String,
    tap: Option<Arc<TapLog>>,
}

impl Listener for TcpListenerWrap {
    fn accept(&mut self) -> Result<Box<dyn Conn>, NetError> {
        let (stream, _) = self.listener.accept()?;
        stream.set_nodelay(true).ok();
        Ok(Box::new(TcpConn {
            stream,
            tap: self.tap.clone(),
            send_dir: Direction::ToClient,
        }))
    }

    fn local_addr(&self) -> String {
        self.addr.clone()
    }
}

struct TcpConn {
    stream: TcpStream,
    tap: Option<Arc<TapLog>>,
    send_dir: Direction,
}

impl Conn for TcpConn {
    fn send_msg(&mut self, bytes: &[u8]) -> Result<(), NetError> {
        if bytes.len() > MAX_MESSAGE_LEN {
            return Err(NetError::Malformed("message too large".into()));
        }
        if let Some(tap) = &self.tap {
            tap.record(self.send_dir, bytes);
        }
        self.stream.write_all(&(bytes.len() as u32).to_be_bytes())?;
        self.stream.write_all(bytes)?;
        self.stream.flush()?;
        Ok(())
    }

    fn recv_msg(&mut self) -> Result<Vec<u8>, NetError> {
        let mut len_buf = [0u8; 4];
        if let Err(e) = self.stream.read_exact(&mut len_buf) {
            return Err(if e.kind() == std::io::ErrorKind::UnexpectedEof {
                NetError::Closed
            } else {
                e.into()
            });
        }
        let len = u32::from_be_bytes(len_buf) as usize;
        if len > MAX_MESSAGE_LEN {
            return Err(NetError::Malformed(format!("frame length {len} too large")));
        }
        let mut buf = vec![0u8; len];
        self.stream.read_exact(&mut buf).map_err(|e| {
            if e.kind() == std::io::ErrorKind::UnexpectedEof {
                NetError::Closed
            } else {
                NetError::Io(e)
            }
        })?;
        if let Some(tap) = &self.tap {
            tap.record(
                match self.send_dir {
                    Direction::ToClient => Direction::ToServer,
                    Direction::ToServer => Direction::ToClient,
                },
                &buf,
            );
        }
        Ok(buf)
    }
}

// ---------------------------------------------------------------------------
// Wire encoding helpers
// ---------------------------------------------------------------------------

/// Byte-buffer primitives shared by every wire format in the crate:
/// u8 / u32-BE / u64-BE scalars, and length-prefixed byte strings.
pub mod wire {
    use super::NetError;

    pub fn put_u8(buf: &mut Vec<u8>, v: u8) {
        buf.push(v);
    }

    pub fn put_u32(buf: &mut Vec<u8>, v: u32) {
        buf.extend_from_slice(&v.to_be_bytes());
    }

    pub fn put_u64(buf: &mut Vec<u8>, v: u64) {
        buf.extend_from_slice(&v.to_be_bytes());
    }

    pub fn put_bytes(buf: &mut Vec<u8>, v: &[u8]) {
        put_u32(buf, v.len() as u32);
        buf.extend_from_slice(v);
    }

    pub fn put_str(buf: &mut Vec<u8>, v: &str) {
        put_bytes(buf, v.as_bytes());
    }

    pub struct Reader<'a> {
        buf: &'a [u8],
        pos: usize,
    }

    impl<'a> Reader<'a> {
        pub fn new(buf: &'a [u8]) -> Self {
            Reader { buf, pos: 0 }
        }

        fn take(&mut self, n: usize) -> Result<&'a [u8], NetError> {
            if self.pos + n > self.buf.len() {
                return Err(NetError::Malformed("truncated message".into()));
            }
            let out = &self.buf[self.pos..self.pos + n];
            self.pos += n;
            Ok(out)
        }

        pub fn u8(&mut self) -> Result<u8, NetError> {
            Ok(self.take(1)?[0])
        }

        pub fn u32(&mut self) -> Result<u32, NetError> {
            Ok(u32::from_be_bytes(self.take(4)?.try_into().unwrap()))
        }

        pub fn u64(&mut self) -> Result<u64, NetError> {
            Ok(u64::from_be_bytes(self.take(8)?.try_into().unwrap()))
        }

        pub fn bytes(&mut self) -> Result<&'a [u8], NetError> {
            let len = self.u32()? as usize;
            self.take(len)
        }

        pub fn str(&mut self) -> Result<String, NetError> {
            let raw = self.bytes()?;
            String::from_utf8(raw.to_vec())
                .map_err(|_| NetError::Malformed("invalid utf-8".into()))
        }

        pub fn array<const N: usize>(&mut self) -> Result<[u8; N], NetError> {
            Ok(self.take(N)?.try_into().unwrap())
        }

        pub fn rest(&mut self) -> &'a [u8] {
            let out = &self.buf[self.pos..];
            self.pos = self.buf.len();
            out
        }

        pub fn done(&self) -> Result<(), NetError> {
            if self.pos != self.buf.len() {
                return Err(NetError::Malformed("trailing bytes".into()));
            }
            Ok(())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::thread;

    fn echo_server(listener: &mut dyn Listener, sessions: usize) {
        for _ in 0..sessions {
            let mut conn = listener.accept().unwrap();
            thread::spawn(move || {
                while let Ok(msg) = conn.recv_msg() {
                    let mut reply = b"echo:".to_vec();
                    reply.extend_from_slice(&msg);
                    if conn.send_msg(&reply).is_err() {
                        break;
                    }
                }
            });
        }
    }

    #[test]
    fn inproc_round_trip() {
        let net = Network::in_process();
        let mut listener = net.listen("inproc:echo").unwrap();
        thread::spawn(move || echo_server(listener.as_mut(), 1));

        let mut conn = net.connect("inproc:echo").unwrap();
        conn.send_msg(b"hello").unwrap();
        assert_eq!(conn.recv_msg().unwrap(), b"echo:hello");
    }

    #[test]
    fn tcp_round_trip() {
        let net = Network::tcp();
        let mut listener = net.listen("tcp:127.0.0.1:0").unwrap();
        let addr = listener.local_addr();
        thread::spawn(move || echo_server(listener.as_mut(), 1));

        let mut conn = net.connect(&addr).unwrap();
        conn.send_msg(b"over tcp").unwrap();
        assert_eq!(conn.recv_msg().unwrap(), b"echo:over tcp");
    }

    #[test]
    fn double_bind_fails() {
        let net = Network::in_process();
        let _first = net.listen("inproc:svc").unwrap();
        assert!(matches!(
            net.listen("inproc:svc"),
            Err(NetError::BindFailed { .. })
        ));
    }

    #[test]
    fn connect_to_unbound_address_fails() {
        let net = Network::in_process();
        assert!(matches!(
            net.connect("inproc:nowhere"),
            Err(NetError::ConnectFailed { .. })
        ));
    }

    #[test]
    fn bad_addresses_are_rejected() {
        let net = Network::in_process();
        assert!(matches!(net.connect("bogus"), Err(NetError::BadAddress(_))));
        assert!(matches!(
            net.listen("tcp:127.0.0.1:0"),
            Err(NetError::BadAddress(_))
        ));
    }

    #[test]
    fn tap_records_both_directions_without_altering_bytes() {
        let net = Network::in_process();
        let tap = TapLog::new();
        let mut listener = net
            .listen_tapped("inproc:tapped", Some(Arc::clone(&tap)))
            .unwrap();
        thread::spawn(move || echo_server(listener.as_mut(), 1));

        let mut conn = net.connect("inproc:tapped").unwrap();
        conn.send_msg(b"payload-1").unwrap();
        assert_eq!(conn.recv_msg().unwrap(), b"echo:payload-1");

        let entries = tap.entries();
        assert_eq!(entries.len(), 2);
        assert_eq!(entries[0].direction, Direction::ToServer);
        assert_eq!(entries[0].bytes, b"payload-1");
        assert_eq!(entries[1].direction, Direction::ToClient);
        assert_eq!(entries[1].bytes, b"echo:payload-1");
        assert!(entries[1].elapsed_nanos >= entries[0].elapsed_nanos);
    }

    #[test]
    fn window_scan_finds_contiguous_substrings() {
        assert!(contains_window(b"abcdef", b"cde"));
        assert!(!contains_window(b"abcdef", b"ce"));
        assert!(!contains_window(b"ab", b"abc"));
        assert!(!contains_window(b"abc", b""));
    }

    #[test]
    fn wire_round_trip() {
        let mut buf = Vec::new();
        wire::put_u8(&mut buf, 7);
        wire::put_u32(&mut buf, 0xdead);
        wire::put_u64(&mut buf, 0xbeef_0001);
        wire::put_str(&mut buf, "name");
        wire::put_bytes(&mut buf, &[1, 2, 3]);

        let mut r = wire::Reader::new(&buf);
        assert_eq!(r.u8().unwrap(), 7);
        assert_eq!(r.u32().unwrap(), 0xdead);
        assert_eq!(r.u64().unwrap(), 0xbeef_0001);
        assert_eq!(r.str().unwrap(), "name");
        assert_eq!(r.bytes().unwrap(), &[1, 2, 3]);
        r.done().unwrap();
    }

    #[test]
    fn truncated_wire_data_is_malformed() {
        let mut buf = Vec::new();
        wire::put_u32(&mut buf, 100); // claims 100 bytes follow
        buf.extend_from_slice(b"short");
        let mut r = wire::Reader::new(&buf);
        assert!(matches!(r.bytes(), Err(NetError::Malformed(_))));
    }
}
