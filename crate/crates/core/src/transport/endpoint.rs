use std::collections::HashMap;
use std::io::{self, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use bytes::Bytes;
use serde::Serialize;

use super::frame::{read_frame, write_frame, FrameHeader, Hello, PartHeader, RawFrame, FRAME_OVERHEAD};
use super::{penalize, serialize_with, BackendSpec, Buffering, ByteLedger, LedgerGuard, Receipt, TransportError};
use crate::message::{join, Envelope, FlMessage, ParticipantId};
use crate::netem::{ShapedWriter, Shaper};
use crate::store::{KeyCache, ObjectKey, PutOutcome, StoreClient, DEFAULT_CACHE_CAPACITY};

/// Per-endpoint settings.
#[derive(Debug, Clone)]
pub struct EndpointConfig {
    pub bind_addr: SocketAddr,
    /// Required for the hybrid backend, on senders and receivers alike.
    pub store: Option<StoreClient>,
    pub cache_capacity: usize,
    /// Upper bound on a single blocking socket write.
    pub send_timeout: Option<Duration>,
}

impl Default for EndpointConfig {
    fn default() -> Self {
        Self {
            bind_addr: SocketAddr::from(([127, 0, 0, 1], 0)),
            store: None,
            cache_capacity: DEFAULT_CACHE_CAPACITY,
            send_timeout: None,
        }
    }
}

impl EndpointConfig {
    pub fn with_store(store: StoreClient) -> Self {
        Self {
            store: Some(store),
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum BroadcastMode {
    /// One peer at a time, each send finishing before the next starts.
    Sequential,
    /// All sends in flight together.
    Concurrent,
}

#[derive(Debug)]
pub struct PeerOutcome {
    pub peer: ParticipantId,
    pub result: Result<Receipt, TransportError>,
}

#[derive(Debug)]
pub struct BroadcastReport {
    pub mode: BroadcastMode,
    pub outcomes: Vec<PeerOutcome>,
    pub wall: Duration,
    /// Time the dispatching thread spent serializing.
    pub t_serialize: Duration,
    /// Store upload time, zero when inline or already stored.
    pub t_upload: Duration,
    /// Ledger peak over the broadcast.
    pub ledger_peak: u64,
    pub store_put: bool,
}

impl BroadcastReport {
    pub fn failed_peers(&self) -> Vec<ParticipantId> {
        self.outcomes
            .iter()
            .filter(|o| o.result.is_err())
            .map(|o| o.peer)
            .collect()
    }

    pub fn receipts(&self) -> impl Iterator<Item = &Receipt> {
        self.outcomes.iter().filter_map(|o| o.result.as_ref().ok())
    }

    pub fn all_ok(&self) -> bool {
        self.outcomes.iter().all(|o| o.result.is_ok())
    }
}

/// A received message with its timing.
#[derive(Debug)]
pub struct Delivery {
    pub message: FlMessage,
    pub from: ParticipantId,
    /// When `recv` was called.
    pub called_at: Instant,
    /// When the first frame of the message arrived.
    pub first_byte_at: Instant,
    /// When the payload bytes were complete, including any store fetch.
    pub completed_at: Instant,
    /// When `recv` returned.
    pub delivered_at: Instant,
    pub t_deserialize: Duration,
    /// Failed store fetch attempts before the successful one.
    pub fetch_retries: u32,
    pub bytes_on_wire: u64,
    pub via_store: bool,
}

impl Delivery {
    /// Time inside `recv` before the first byte arrived.
    pub fn waited(&self) -> Duration {
        self.first_byte_at.saturating_duration_since(self.called_at)
    }

    /// Transfer time inside `recv`.
    pub fn t_comm(&self) -> Duration {
        let from = self.first_byte_at.max(self.called_at);
        self.completed_at.saturating_duration_since(from)
    }

    /// Full one-way time from first byte to a usable payload.
    pub fn transfer_time(&self) -> Duration {
        self.delivered_at.saturating_duration_since(self.first_byte_at)
    }
}

/// An outgoing connection set to one peer.
pub struct Link {
    peer: ParticipantId,
    addr: SocketAddr,
    shaper: Shaper,
    inner: Mutex<LinkInner>,
}

struct LinkInner {
    conns: Vec<ShapedWriter<TcpStream>>,
    next_seq: u64,
    broken: bool,
}

impl Link {
    pub fn peer(&self) -> ParticipantId {
        self.peer
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn shaper(&self) -> &Shaper {
        &self.shaper
    }

    pub fn connections(&self) -> usize {
        self.inner.lock().unwrap().conns.len()
    }

    /// Closes the connections; the peer sees end of stream.
    pub fn shutdown(&self) {
        let inner = self.inner.lock().unwrap();
        for c in &inner.conns {
            let _ = c.get_ref().shutdown(Shutdown::Both);
        }
    }
}

impl std::fmt::Debug for Link {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Link")
            .field("peer", &self.peer)
            .field("addr", &self.addr)
            .field("profile", &self.shaper.profile().name())
            .finish()
    }
}

struct Shared {
    id: ParticipantId,
    spec: BackendSpec,
    ledger: Arc<ByteLedger>,
    store: Option<StoreClient>,
    cache: KeyCache,
    send_timeout: Option<Duration>,
    closing: AtomicBool,
    streams: Mutex<Vec<TcpStream>>,
    readers: Mutex<Vec<JoinHandle<()>>>,
    partial: Mutex<HashMap<(u32, u64, u64), Partial>>,
    tx: Mutex<Option<Sender<Arrival>>>,
}

struct Partial {
    count: u32,
    received: u32,
    first_byte_at: Instant,
    wire: u64,
    envelope: Option<Vec<u8>>,
    buf: Vec<u8>,
    guard: LedgerGuard,
}

struct Complete {
    envelope: Vec<u8>,
    body: Vec<u8>,
    first_byte_at: Instant,
    wire: u64,
    guard: LedgerGuard,
}

struct Arrival {
    from: ParticipantId,
    first_byte_at: Instant,
    completed_at: Instant,
    wire: u64,
    result: Result<(Envelope, Option<Bytes>, u32), TransportError>,
    _guard: Option<LedgerGuard>,
}

/// A participant's transport: a listening socket for inbound messages and
/// the sending side for outbound links.
///
/// Lifecycle: [`bind`](Self::bind) starts serving immediately;
/// [`drain`](Self::drain) waits for partly received messages;
/// [`close`](Self::close) (or drop) stops all threads.
pub struct Endpoint {
    shared: Arc<Shared>,
    addr: SocketAddr,
    inbox: Mutex<Receiver<Arrival>>,
    acceptor: Mutex<Option<JoinHandle<()>>>,
}

impl std::fmt::Debug for Endpoint {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Endpoint")
            .field("id", &self.shared.id)
            .field("addr", &self.addr)
            .field("backend", &self.shared.spec.name)
            .finish()
    }
}

fn io_to_send_error(peer: ParticipantId, e: io::Error) -> TransportError {
    match e.kind() {
        io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut => TransportError::SendTimeout { peer },
        _ => TransportError::PeerUnreachable { peer, source: e },
    }
}

/// What a send puts on the wire besides framing.
enum Body {
    Inline(Bytes),
    Stored(ObjectKey),
}

struct Prepared {
    body: Body,
    t_serialize: Duration,
    _guard: Option<LedgerGuard>,
}

impl Endpoint {
    pub fn bind(id: ParticipantId, spec: BackendSpec, config: EndpointConfig) -> Result<Self, TransportError> {
        spec.validate()?;
        if spec.hybrid && config.store.is_none() {
            return Err(TransportError::NoStore);
        }
        let listener = TcpListener::bind(config.bind_addr)?;
        let addr = listener.local_addr()?;
        let (tx, rx) = mpsc::channel();
        let shared = Arc::new(Shared {
            id,
            spec,
            ledger: ByteLedger::new(),
            store: config.store,
            cache: KeyCache::new(config.cache_capacity),
            send_timeout: config.send_timeout,
            closing: AtomicBool::new(false),
            streams: Mutex::default(),
            readers: Mutex::default(),
            partial: Mutex::default(),
            tx: Mutex::new(Some(tx)),
        });
        let acceptor = {
            let shared = Arc::clone(&shared);
            thread::Builder::new()
                .name(format!("accept-{id}"))
                .spawn(move || accept_loop(shared, listener))?
        };
        Ok(Self {
            shared,
            addr,
            inbox: Mutex::new(rx),
            acceptor: Mutex::new(Some(acceptor)),
        })
    }

    pub fn id(&self) -> ParticipantId {
        self.shared.id
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn spec(&self) -> &BackendSpec {
        &self.shared.spec
    }

    pub fn ledger(&self) -> &Arc<ByteLedger> {
        &self.shared.ledger
    }

    pub fn store(&self) -> Option<&StoreClient> {
        self.shared.store.as_ref()
    }

    pub fn key_cache(&self) -> &KeyCache {
        &self.shared.cache
    }

    /// Opens the backend's connections to `peer` at `addr`, shaped by
    /// `shaper`.
    pub fn connect(&self, peer: ParticipantId, addr: SocketAddr, shaper: &Shaper) -> Result<Link, TransportError> {
        let count = self.shared.spec.connections_per_peer;
        let group = rand::random::<u64>();
        let mut conns = Vec::with_capacity(count as usize);
        for i in 0..count {
            let unreachable = |e| TransportError::PeerUnreachable { peer, source: e };
            let stream = TcpStream::connect(addr).map_err(unreachable)?;
            stream.set_nodelay(true)?;
            stream.set_write_timeout(self.shared.send_timeout)?;
            let hello = FrameHeader::Hello(Hello {
                sender: self.shared.id.0,
                group,
                conn_index: i,
                conn_count: count,
            });
            let mut w = ShapedWriter::new(stream, shaper.pacer());
            let mut buf = Vec::new();
            write_frame(&mut buf, &hello.encode(), &[])?;
            w.write_unshaped(&buf).map_err(unreachable)?;
            conns.push(w);
        }
        Ok(Link {
            peer,
            addr,
            shaper: shaper.clone(),
            inner: Mutex::new(LinkInner {
                conns,
                next_seq: 0,
                broken: false,
            }),
        })
    }

    /// Sends `m` to the link's peer.
    pub fn send(&self, link: &Link, m: &FlMessage) -> Result<Receipt, TransportError> {
        let mut report = self.dispatch(std::slice::from_ref(link), m, BroadcastMode::Sequential)?;
        report.outcomes.pop().expect("one outcome per link").result
    }

    /// Sends `m` to every link's peer. A failing peer does not stop the
    /// others; failures are listed in the report.
    pub fn broadcast(
        &self,
        links: &[Link],
        m: &FlMessage,
        mode: BroadcastMode,
    ) -> Result<BroadcastReport, TransportError> {
        self.shared.ledger.reset_peak();
        self.dispatch(links, m, mode)
    }

    fn dispatch(&self, links: &[Link], m: &FlMessage, mode: BroadcastMode) -> Result<BroadcastReport, TransportError> {
        if links.is_empty() {
            return Err(TransportError::Protocol("broadcast needs at least one peer".into()));
        }
        let t0 = Instant::now();
        let spec = &self.shared.spec;
        let via_store = spec.routes_to_store(m.payload().serialized_len());
        let inline_spec = spec.inline_path();
        let mut t_upload = Duration::ZERO;
        let mut uploaded = false;
        let shared: Option<Arc<Prepared>> = if via_store {
            let (p, up, t) = self.prepare_stored(m)?;
            uploaded = up;
            t_upload = t;
            Some(Arc::new(p))
        } else if inline_spec.buffering == Buffering::SharedBuffer {
            Some(Arc::new(self.prepare_inline(&inline_spec, m)))
        } else {
            None
        };
        let mut t_serialize = shared.as_ref().map_or(Duration::ZERO, |p| p.t_serialize);

        let receipt = |link: &Link, prepared: &Prepared, first: bool| -> Result<Receipt, TransportError> {
            let header = *m.readdressed(link.peer).header();
            let envelope = match &prepared.body {
                Body::Inline(bytes) => Envelope::inline(&header, bytes.clone()),
                Body::Stored(key) => Envelope::stored(&header, key.clone()),
            };
            let t = Instant::now();
            let wire = self.transmit(link, &envelope)?;
            let mut t_comm = t.elapsed();
            let did_upload = first && uploaded;
            if did_upload {
                t_comm += t_upload;
            }
            Ok(Receipt {
                peer: link.peer,
                bytes_on_wire: wire,
                t_serialize: prepared.t_serialize,
                t_comm,
                store_put: via_store,
                uploaded: did_upload,
            })
        };

        let mut outcomes = Vec::with_capacity(links.len());
        match mode {
            BroadcastMode::Sequential => {
                for (i, link) in links.iter().enumerate() {
                    let result = match &shared {
                        Some(p) => receipt(link, p, i == 0),
                        None => {
                            let p = self.prepare_inline(&inline_spec, m);
                            t_serialize += p.t_serialize;
                            receipt(link, &p, i == 0)
                        }
                    };
                    outcomes.push(PeerOutcome {
                        peer: link.peer,
                        result,
                    });
                }
            }
            BroadcastMode::Concurrent => thread::scope(|s| {
                let mut handles = Vec::with_capacity(links.len());
                for (i, link) in links.iter().enumerate() {
                    // Preparation stays on this thread, one copy at a time.
                    let prepared = match &shared {
                        Some(p) => Arc::clone(p),
                        None => {
                            let p = self.prepare_inline(&inline_spec, m);
                            t_serialize += p.t_serialize;
                            Arc::new(p)
                        }
                    };
                    let receipt = &receipt;
                    handles.push((link.peer, s.spawn(move || receipt(link, &prepared, i == 0))));
                }
                for (peer, h) in handles {
                    let result = h
                        .join()
                        .unwrap_or_else(|_| Err(TransportError::Protocol("send thread panicked".into())));
                    outcomes.push(PeerOutcome { peer, result });
                }
            }),
        }
        Ok(BroadcastReport {
            mode,
            outcomes,
            wall: t0.elapsed(),
            t_serialize,
            t_upload,
            ledger_peak: self.shared.ledger.peak(),
            store_put: via_store,
        })
    }

    fn prepare_inline(&self, spec: &BackendSpec, m: &FlMessage) -> Prepared {
        let (bytes, t_serialize) = serialize_with(spec, m.payload());
        let guard = self.shared.ledger.alloc(bytes.len() as u64);
        Prepared {
            body: Body::Inline(Bytes::from(bytes)),
            t_serialize,
            _guard: Some(guard),
        }
    }

    /// Uploads the payload unless its digest is cached. Returns whether an
    /// upload happened and how long the store took.
    fn prepare_stored(&self, m: &FlMessage) -> Result<(Prepared, bool, Duration), TransportError> {
        let store = self.shared.store.as_ref().ok_or(TransportError::NoStore)?;
        let t = Instant::now();
        let digest = m.payload().version();
        if let Some(key) = self.shared.cache.get(&digest) {
            let p = Prepared {
                body: Body::Stored(key),
                t_serialize: t.elapsed(),
                _guard: None,
            };
            return Ok((p, false, Duration::ZERO));
        }
        let (bytes, _) = serialize_with(&self.shared.spec, m.payload());
        let guard = self.shared.ledger.alloc(bytes.len() as u64);
        let t_serialize = t.elapsed();
        let key = store.key_for(m.payload(), &format!("round-{}", m.header().round));
        let t_up = Instant::now();
        let outcome = store.put_if_absent(&key, Bytes::from(bytes))?;
        let t_upload = t_up.elapsed();
        drop(guard);
        self.shared.cache.insert(digest, key.clone());
        let p = Prepared {
            body: Body::Stored(key),
            t_serialize,
            _guard: None,
        };
        Ok((p, outcome == PutOutcome::Uploaded, t_upload))
    }

    /// Writes one envelope over the link, splitting an inline body across
    /// the link's connections. Returns the bytes written.
    fn transmit(&self, link: &Link, envelope: &Envelope) -> Result<u64, TransportError> {
        let peer = link.peer;
        let mut inner = link.inner.lock().unwrap();
        if inner.broken {
            return Err(TransportError::PeerUnreachable {
                peer,
                source: io::Error::new(io::ErrorKind::BrokenPipe, "link failed earlier"),
            });
        }
        let seq = inner.next_seq;
        inner.next_seq += 1;
        let env_header = envelope.encode_header();
        let body = envelope.body();
        let count = inner.conns.len();
        let total = body.len();
        let chunk = total.div_ceil(count).max(1);
        let frame_header = |index: usize| {
            let offset = (index * chunk).min(total);
            let end = ((index + 1) * chunk).min(total);
            let h = FrameHeader::Part(PartHeader {
                seq,
                index: index as u32,
                count: count as u32,
                offset: offset as u64,
                total: total as u64,
                envelope: if index == 0 { env_header.clone() } else { Vec::new() },
            })
            .encode();
            (h, offset..end)
        };
        let write_part = |w: &mut ShapedWriter<TcpStream>, index: usize| -> io::Result<u64> {
            let (h, range) = frame_header(index);
            let _g = self.shared.ledger.alloc(h.len() as u64 + FRAME_OVERHEAD);
            let n = write_frame(w, &h, &body[range])?;
            w.flush()?;
            Ok(n)
        };
        let result: io::Result<u64> = if count == 1 {
            write_part(&mut inner.conns[0], 0)
        } else {
            thread::scope(|s| {
                let handles: Vec<_> = inner
                    .conns
                    .iter_mut()
                    .enumerate()
                    .map(|(i, w)| {
                        let write_part = &write_part;
                        s.spawn(move || write_part(w, i))
                    })
                    .collect();
                handles
                    .into_iter()
                    .map(|h| h.join().unwrap_or_else(|_| Err(io::Error::other("writer panicked"))))
                    .sum()
            })
        };
        result.map_err(|e| {
            inner.broken = true;
            io_to_send_error(peer, e)
        })
    }

    /// Blocks until a message is complete and returns it.
    pub fn recv(&self) -> Result<Delivery, TransportError> {
        self.recv_inner(None)
    }

    pub fn recv_timeout(&self, timeout: Duration) -> Result<Delivery, TransportError> {
        self.recv_inner(Some(timeout))
    }

    fn recv_inner(&self, timeout: Option<Duration>) -> Result<Delivery, TransportError> {
        let called_at = Instant::now();
        let rx = self.inbox.lock().unwrap();
        let a = match timeout {
            None => rx.recv().map_err(|_| TransportError::Closed)?,
            Some(d) => rx.recv_timeout(d).map_err(|e| match e {
                RecvTimeoutError::Timeout => TransportError::RecvTimeout(d),
                RecvTimeoutError::Disconnected => TransportError::Closed,
            })?,
        };
        drop(rx);
        let (envelope, blob, fetch_retries) = a.result?;
        let via_store = blob.is_some();
        let len = envelope.payload_bytes as usize;
        let t = Instant::now();
        let message = join(envelope, blob)?;
        // Store payloads are raw buffers; inline ones use the inline path's
        // serializer.
        if !via_store {
            penalize(&self.shared.spec.inline_path(), len, t);
        }
        let delivered_at = Instant::now();
        Ok(Delivery {
            message,
            from: a.from,
            called_at,
            first_byte_at: a.first_byte_at,
            completed_at: a.completed_at,
            delivered_at,
            t_deserialize: delivered_at - t,
            fetch_retries,
            bytes_on_wire: a.wire,
            via_store,
        })
    }

    /// Waits until no message is partly received.
    pub fn drain(&self, timeout: Duration) -> Result<(), TransportError> {
        let deadline = Instant::now() + timeout;
        while !self.shared.partial.lock().unwrap().is_empty() {
            if Instant::now() >= deadline {
                return Err(TransportError::RecvTimeout(timeout));
            }
            thread::sleep(Duration::from_millis(1));
        }
        Ok(())
    }

    /// Stops accepting, closes inbound connections and joins all threads.
    /// Messages already complete stay receivable.
    pub fn close(&self) {
        if self.shared.closing.swap(true, Ordering::SeqCst) {
            return;
        }
        // Wake the acceptor.
        let _ = TcpStream::connect(self.addr);
        if let Some(h) = self.acceptor.lock().unwrap().take() {
            let _ = h.join();
        }
        for s in self.shared.streams.lock().unwrap().drain(..) {
            let _ = s.shutdown(Shutdown::Both);
        }
        let readers: Vec<_> = self.shared.readers.lock().unwrap().drain(..).collect();
        for h in readers {
            let _ = h.join();
        }
        self.shared.tx.lock().unwrap().take();
    }
}

impl Drop for Endpoint {
    fn drop(&mut self) {
        self.close();
    }
}

fn accept_loop(shared: Arc<Shared>, listener: TcpListener) {
    for stream in listener.incoming() {
        if shared.closing.load(Ordering::SeqCst) {
            break;
        }
        let Ok(stream) = stream else { continue };
        let _ = stream.set_nodelay(true);
        match stream.try_clone() {
            Ok(c) => shared.streams.lock().unwrap().push(c),
            Err(_) => continue,
        }
        let s = Arc::clone(&shared);
        let h = thread::Builder::new()
            .name(format!("read-{}", shared.id))
            .spawn(move || read_loop(s, stream));
        if let Ok(h) = h {
            shared.readers.lock().unwrap().push(h);
        }
    }
}

fn read_loop(shared: Arc<Shared>, mut stream: TcpStream) {
    let hello = match read_frame(&mut stream).map(|f| f.map(|f| FrameHeader::decode(&f.header))) {
        Ok(Some(Ok(FrameHeader::Hello(h)))) => h,
        _ => return,
    };
    loop {
        let frame = match read_frame(&mut stream) {
            Ok(Some(f)) => f,
            Ok(None) => return,
            Err(e) => {
                if !shared.closing.load(Ordering::SeqCst) {
                    log::debug!("connection from {} ended: {e}", ParticipantId(hello.sender));
                }
                return;
            }
        };
        let part = match FrameHeader::decode(&frame.header) {
            Ok(FrameHeader::Part(p)) => p,
            _ => {
                log::warn!("unexpected frame from {}", ParticipantId(hello.sender));
                return;
            }
        };
        if let Some(done) = shared.assemble(&hello, part, frame) {
            shared.deliver(ParticipantId(hello.sender), done);
        }
    }
}

impl Shared {
    fn assemble(&self, hello: &Hello, part: PartHeader, frame: RawFrame) -> Option<Complete> {
        let wire = frame.wire_len();
        if part.count == 1 {
            return Some(Complete {
                guard: self.ledger.alloc(frame.body.len() as u64),
                envelope: part.envelope,
                body: frame.body,
                first_byte_at: frame.arrived,
                wire,
            });
        }
        let key = (hello.sender, hello.group, part.seq);
        let mut map = self.partial.lock().unwrap();
        let entry = map.entry(key).or_insert_with(|| Partial {
            count: part.count,
            received: 0,
            first_byte_at: frame.arrived,
            wire: 0,
            envelope: None,
            buf: vec![0; part.total as usize],
            guard: self.ledger.alloc(part.total),
        });
        let start = part.offset as usize;
        let end = start + frame.body.len();
        if end > entry.buf.len() || part.count != entry.count {
            log::warn!("dropping malformed part {} of message {}", part.index, part.seq);
            map.remove(&key);
            return None;
        }
        entry.buf[start..end].copy_from_slice(&frame.body);
        entry.first_byte_at = entry.first_byte_at.min(frame.arrived);
        entry.wire += wire;
        entry.received += 1;
        if part.index == 0 {
            entry.envelope = Some(part.envelope);
        }
        if entry.received < entry.count {
            return None;
        }
        let p = map.remove(&key).unwrap();
        Some(Complete {
            envelope: p.envelope.unwrap_or_default(),
            body: p.buf,
            first_byte_at: p.first_byte_at,
            wire: p.wire,
            guard: p.guard,
        })
    }

    fn deliver(&self, from: ParticipantId, c: Complete) {
        let mut guard = Some(c.guard);
        let result = Envelope::decode(&c.envelope, Bytes::from(c.body))
            .map_err(TransportError::from)
            .and_then(|env| match env.store_key() {
                None => Ok((env, None, 0)),
                Some(key) => {
                    let store = self.store.as_ref().ok_or(TransportError::NoStore)?;
                    let fetched = store.get(key)?;
                    guard = Some(self.ledger.alloc(fetched.bytes.len() as u64));
                    Ok((env.clone(), Some(fetched.bytes), fetched.retries))
                }
            });
        let arrival = Arrival {
            from,
            first_byte_at: c.first_byte_at,
            completed_at: Instant::now(),
            wire: c.wire,
            result,
            _guard: guard,
        };
        if let Some(tx) = self.tx.lock().unwrap().as_ref() {
            let _ = tx.send(arrival);
        }
    }
}
