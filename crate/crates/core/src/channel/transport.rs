//! Real duplex transport: wire-format frames with a `u32` little-endian
//! length prefix over TCP, plus an optional artificial delay applied on the
//! receive side.

use std::collections::VecDeque;
use std::io::{self, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::mpsc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use super::wire::{self, Message, FRAME_LEN};
use super::{tick_hz_from_env, TransportError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Listener,
    Dialer,
}

#[derive(Debug, Clone, Copy)]
pub struct TransportOptions {
    /// Bounds both dialing and waiting for a peer to connect.
    pub connect_timeout: Duration,
    /// Held back on the receive side before a frame becomes visible to `poll`.
    pub artificial_delay: Duration,
    pub tick_hz: f64,
}

impl Default for TransportOptions {
    fn default() -> Self {
        Self {
            connect_timeout: Duration::from_secs(5),
            artificial_delay: Duration::ZERO,
            tick_hz: tick_hz_from_env(1000.0),
        }
    }
}

fn resolve(address: &str) -> Result<SocketAddr, TransportError> {
    address
        .to_socket_addrs()
        .map_err(|e| TransportError::Address {
            address: address.to_string(),
            msg: e.to_string(),
        })?
        .next()
        .ok_or_else(|| TransportError::Address {
            address: address.to_string(),
            msg: "no addresses resolved".into(),
        })
}

/// Bound listening socket awaiting a single peer.
pub struct TransportListener {
    listener: TcpListener,
    address: String,
}

impl TransportListener {
    pub fn bind(address: &str) -> Result<Self, TransportError> {
        let listener = TcpListener::bind(address).map_err(|e| TransportError::Bind {
            address: address.to_string(),
            source: e,
        })?;
        Ok(Self {
            listener,
            address: address.to_string(),
        })
    }

    pub fn local_addr(&self) -> io::Result<SocketAddr> {
        self.listener.local_addr()
    }

    pub fn accept(self, opts: TransportOptions) -> Result<Endpoint, TransportError> {
        self.listener
            .set_nonblocking(true)
            .map_err(|e| TransportError::Io(e.to_string()))?;
        let deadline = Instant::now() + opts.connect_timeout;
        loop {
            match self.listener.accept() {
                Ok((stream, _)) => {
                    stream
                        .set_nonblocking(false)
                        .map_err(|e| TransportError::Io(e.to_string()))?;
                    return Endpoint::from_stream(stream, opts);
                }
                Err(e) if e.kind() == io::ErrorKind::WouldBlock => {
                    if Instant::now() >= deadline {
                        return Err(TransportError::Timeout {
                            address: self.address.clone(),
                        });
                    }
                    thread::sleep(Duration::from_millis(2));
                }
                Err(e) => {
                    return Err(TransportError::Io(format!("accept on {}: {e}", self.address)))
                }
            }
        }
    }
}

pub fn dial(address: &str, opts: TransportOptions) -> Result<Endpoint, TransportError> {
    let addr = resolve(address)?;
    let stream = TcpStream::connect_timeout(&addr, opts.connect_timeout).map_err(|e| {
        if e.kind() == io::ErrorKind::TimedOut {
            TransportError::Timeout {
                address: address.to_string(),
            }
        } else {
            TransportError::Connect {
                address: address.to_string(),
                source: e,
            }
        }
    })?;
    Endpoint::from_stream(stream, opts)
}

/// Opens one end of a duplex link. A listener blocks until its single peer
/// connects or the connect timeout elapses.
pub fn open_transport(
    role: Role,
    address: &str,
    opts: TransportOptions,
) -> Result<Endpoint, TransportError> {
    match role {
        Role::Listener => TransportListener::bind(address)?.accept(opts),
        Role::Dialer => dial(address, opts),
    }
}

pub struct Endpoint {
    sender: EndpointSender,
    receiver: EndpointReceiver,
}

impl Endpoint {
    fn from_stream(stream: TcpStream, opts: TransportOptions) -> Result<Self, TransportError> {
        stream
            .set_nodelay(true)
            .map_err(|e| TransportError::Io(e.to_string()))?;
        let peer = stream
            .peer_addr()
            .map_err(|e| TransportError::Io(e.to_string()))?;
        let read_half = stream
            .try_clone()
            .map_err(|e| TransportError::Io(e.to_string()))?;
        let epoch = Instant::now();
        let (tx, rx) = mpsc::channel();
        let reader = thread::Builder::new()
            .name(format!("teleop-rx-{peer}"))
            .spawn(move || read_frames(read_half, tx))
            .map_err(|e| TransportError::Io(e.to_string()))?;
        Ok(Self {
            sender: EndpointSender {
                stream,
                peer,
                scratch: Vec::with_capacity(FRAME_LEN + 4),
            },
            receiver: EndpointReceiver {
                rx,
                pending: VecDeque::new(),
                delay: opts.artificial_delay,
                epoch,
                tick_hz: opts.tick_hz,
                reader: Some(reader),
                finished: false,
            },
        })
    }

    pub fn peer_addr(&self) -> SocketAddr {
        self.sender.peer
    }

    pub fn send(&mut self, msg: &Message) -> Result<(), TransportError> {
        self.sender.send(msg)
    }

    pub fn poll(&mut self) -> Result<Vec<Message>, TransportError> {
        self.receiver.poll()
    }

    pub fn now_tick(&self) -> u64 {
        self.receiver.now_tick()
    }

    /// Separates the two directions so they can be driven from two threads.
    pub fn split(self) -> (EndpointSender, EndpointReceiver) {
        (self.sender, self.receiver)
    }
}

pub struct EndpointSender {
    stream: TcpStream,
    peer: SocketAddr,
    scratch: Vec<u8>,
}

impl EndpointSender {
    pub fn send(&mut self, msg: &Message) -> Result<(), TransportError> {
        self.scratch.clear();
        self.scratch
            .extend_from_slice(&(FRAME_LEN as u32).to_le_bytes());
        wire::encode_into(msg, &mut self.scratch);
        self.stream
            .write_all(&self.scratch)
            .map_err(|e| TransportError::Io(format!("send to {}: {e}", self.peer)))
    }

    pub fn shutdown(&self) {
        let _ = self.stream.shutdown(std::net::Shutdown::Write);
    }
}

type Arrival = Result<(Instant, Message), TransportError>;

pub struct EndpointReceiver {
    rx: mpsc::Receiver<Arrival>,
    pending: VecDeque<(Instant, Message)>,
    delay: Duration,
    epoch: Instant,
    tick_hz: f64,
    reader: Option<JoinHandle<()>>,
    finished: bool,
}

impl EndpointReceiver {
    pub fn now_tick(&self) -> u64 {
        (self.epoch.elapsed().as_secs_f64() * self.tick_hz) as u64
    }

    /// Returns frames whose arrival time plus the artificial delay has passed.
    /// Once the peer has closed and everything is drained, returns `Closed`.
    pub fn poll(&mut self) -> Result<Vec<Message>, TransportError> {
        let mut failure = None;
        loop {
            match self.rx.try_recv() {
                Ok(Ok((at, msg))) => self.pending.push_back((at + self.delay, msg)),
                Ok(Err(e)) => {
                    failure = Some(e);
                    break;
                }
                Err(mpsc::TryRecvError::Empty) => break,
                Err(mpsc::TryRecvError::Disconnected) => {
                    self.finished = true;
                    break;
                }
            }
        }
        let now = Instant::now();
        let mut out = Vec::new();
        while let Some((due, _)) = self.pending.front() {
            if *due > now {
                break;
            }
            out.push(self.pending.pop_front().expect("front").1);
        }
        if let Some(e) = failure {
            if out.is_empty() {
                return Err(e);
            }
            log::warn!("transport error after {} frames: {e}", out.len());
        }
        if out.is_empty() && self.finished && self.pending.is_empty() {
            return Err(TransportError::Closed);
        }
        Ok(out)
    }

    /// Blocks until at least one message is deliverable or `timeout` passes.
    pub fn poll_timeout(&mut self, timeout: Duration) -> Result<Vec<Message>, TransportError> {
        let deadline = Instant::now() + timeout;
        loop {
            let got = self.poll()?;
            if !got.is_empty() || Instant::now() >= deadline {
                return Ok(got);
            }
            thread::sleep(Duration::from_micros(200));
        }
    }
}

impl Drop for EndpointReceiver {
    fn drop(&mut self) {
        // The reader exits on its own once the socket closes; don't block on it.
        self.reader.take();
    }
}

fn read_full(stream: &mut TcpStream, buf: &mut [u8]) -> io::Result<usize> {
    let mut filled = 0;
    while filled < buf.len() {
        match stream.read(&mut buf[filled..]) {
            Ok(0) => break,
            Ok(n) => filled += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e),
        }
    }
    Ok(filled)
}

fn read_frames(mut stream: TcpStream, tx: mpsc::Sender<Arrival>) {
    let mut header = [0u8; 4];
    let mut body = vec![0u8; FRAME_LEN];
    loop {
        let got = match read_full(&mut stream, &mut header) {
            Ok(n) => n,
            Err(e) => {
                let _ = tx.send(Err(TransportError::Io(e.to_string())));
                return;
            }
        };
        if got == 0 {
            return;
        }
        if got < 4 {
            let _ = tx.send(Err(TransportError::Framing {
                expected: 4,
                got,
            }));
            return;
        }
        let len = u32::from_le_bytes(header) as usize;
        if len != FRAME_LEN {
            let _ = tx.send(Err(TransportError::Framing {
                expected: FRAME_LEN,
                got: len,
            }));
            return;
        }
        match read_full(&mut stream, &mut body) {
            Ok(n) if n == FRAME_LEN => {}
            Ok(n) => {
                let _ = tx.send(Err(TransportError::Framing {
                    expected: FRAME_LEN,
                    got: n,
                }));
                return;
            }
            Err(e) => {
                let _ = tx.send(Err(TransportError::Io(e.to_string())));
                return;
            }
        }
        let arrival = Instant::now();
        let item = wire::deserialize(&body)
            .map(|m| (arrival, m))
            .map_err(TransportError::Decode);
        if tx.send(item).is_err() {
            return;
        }
    }
}
