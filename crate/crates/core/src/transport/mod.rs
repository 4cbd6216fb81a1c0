//! Communication backends.
//!
//! Real gRPC, MPI or TensorPipe stacks are not linked. Each backend is a
//! [`BackendSpec`] reproducing the traits that decide its performance:
//! how many connections carry one message, how expensive serialization is,
//! and whether every receiver gets its own serialized copy. The hybrid
//! backend parks large payloads in object storage and sends only a small
//! envelope; below its threshold it behaves exactly like `grpc_like`.
//!
//! Transport-owned payload copies are tracked in a [`ByteLedger`] so that
//! broadcast memory can be checked exactly.

use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::Serialize;
use thiserror::Error;

use crate::message::{self, MessageError, ParticipantId, Payload};
use crate::netem::{sleep_precise, MB};
use crate::store::StoreError;

mod endpoint;
pub mod frame;

pub use crate::message::{route, Route};
pub use endpoint::{BroadcastMode, BroadcastReport, Delivery, Endpoint, EndpointConfig, Link, PeerOutcome};

/// Hybrid fallback threshold: payloads above this go through the store.
pub const DEFAULT_THRESHOLD: u64 = 10_000_000;
pub const DEFAULT_TORCH_CONNECTIONS: u32 = 8;
pub const GRPC_SERIALIZE_MBPS: f64 = 300.0;
pub const MPI_GENERIC_SERIALIZE_MBPS: f64 = 500.0;

pub const PRESET_NAMES: [&str; 5] = [
    "grpc_like",
    "mpi_generic_like",
    "mpi_membuff_like",
    "torch_rpc_like",
    "hybrid",
];

#[derive(Debug, Error)]
pub enum TransportError {
    #[error("unknown backend {name:?}; valid backends: {}", PRESET_NAMES.join(", "))]
    UnknownBackend { name: String },
    #[error("invalid backend: {0}")]
    InvalidSpec(String),
    #[error("peer {peer} unreachable: {source}")]
    PeerUnreachable {
        peer: ParticipantId,
        #[source]
        source: std::io::Error,
    },
    #[error("send to {peer} timed out")]
    SendTimeout { peer: ParticipantId },
    #[error("no message within {0:?}")]
    RecvTimeout(Duration),
    #[error("the hybrid backend needs an object store")]
    NoStore,
    #[error("endpoint closed")]
    Closed,
    #[error("protocol violation: {0}")]
    Protocol(String),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Message(#[from] MessageError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum Serialization {
    /// A general-purpose serializer limited to `mbps` MB/s.
    Generic { mbps: f64 },
    /// A raw memory copy.
    RawBuffer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Buffering {
    /// Every send serializes its own copy.
    CopyPerSend,
    /// One serialized buffer is shared by all sends of a message.
    SharedBuffer,
}

/// A backend archetype.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BackendSpec {
    pub name: String,
    pub connections_per_peer: u32,
    pub serialization: Serialization,
    pub buffering: Buffering,
    pub hybrid: bool,
    /// Store-route threshold in bytes, already scaled.
    pub fallback_threshold: u64,
    /// Scale applied to serialization throughput and threshold.
    pub scale: f64,
}

impl BackendSpec {
    pub fn grpc_like() -> Self {
        Self::plain(
            "grpc_like",
            1,
            Serialization::Generic {
                mbps: GRPC_SERIALIZE_MBPS,
            },
            Buffering::CopyPerSend,
        )
    }

    pub fn mpi_generic_like() -> Self {
        Self::plain(
            "mpi_generic_like",
            1,
            Serialization::Generic {
                mbps: MPI_GENERIC_SERIALIZE_MBPS,
            },
            Buffering::CopyPerSend,
        )
    }

    pub fn mpi_membuff_like() -> Self {
        Self::plain("mpi_membuff_like", 1, Serialization::RawBuffer, Buffering::SharedBuffer)
    }

    pub fn torch_rpc_like() -> Self {
        Self::torch_rpc_with(DEFAULT_TORCH_CONNECTIONS)
    }

    pub fn torch_rpc_with(connections: u32) -> Self {
        Self::plain(
            "torch_rpc_like",
            connections,
            Serialization::RawBuffer,
            Buffering::SharedBuffer,
        )
    }

    pub fn hybrid() -> Self {
        Self {
            hybrid: true,
            ..Self::plain("hybrid", 1, Serialization::RawBuffer, Buffering::SharedBuffer)
        }
    }

    fn plain(name: &str, conns: u32, serialization: Serialization, buffering: Buffering) -> Self {
        Self {
            name: name.to_owned(),
            connections_per_peer: conns,
            serialization,
            buffering,
            hybrid: false,
            fallback_threshold: DEFAULT_THRESHOLD,
            scale: 1.0,
        }
    }

    pub fn preset(name: &str) -> Result<Self, TransportError> {
        Ok(match name {
            "grpc_like" | "grpc" => Self::grpc_like(),
            "mpi_generic_like" => Self::mpi_generic_like(),
            "mpi_membuff_like" => Self::mpi_membuff_like(),
            "torch_rpc_like" => Self::torch_rpc_like(),
            "hybrid" | "grpc_s3" => Self::hybrid(),
            _ => return Err(TransportError::UnknownBackend { name: name.to_owned() }),
        })
    }

    pub fn all_presets() -> Vec<Self> {
        PRESET_NAMES.iter().map(|n| Self::preset(n).unwrap()).collect()
    }

    /// Scales serialization throughput and the threshold with payload
    /// sizes, so that times are unchanged.
    pub fn with_scale(&self, scale: f64) -> Self {
        let threshold = (self.fallback_threshold as f64 / self.scale * scale).round() as u64;
        Self {
            scale,
            fallback_threshold: threshold,
            ..self.clone()
        }
    }

    /// Threshold given in unscaled bytes.
    pub fn with_threshold(&self, unscaled_bytes: u64) -> Self {
        Self {
            fallback_threshold: (unscaled_bytes as f64 * self.scale).round() as u64,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<(), TransportError> {
        if self.connections_per_peer == 0 {
            return Err(TransportError::InvalidSpec(
                "connections_per_peer must be at least 1".into(),
            ));
        }
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(TransportError::InvalidSpec(format!(
                "scale must be positive, got {}",
                self.scale
            )));
        }
        if let Serialization::Generic { mbps } = self.serialization {
            if !(mbps > 0.0) {
                return Err(TransportError::InvalidSpec(format!(
                    "serialization throughput must be positive, got {mbps}"
                )));
            }
        }
        Ok(())
    }

    /// Serialization throughput in bytes/s after scaling; `None` for raw
    /// copies.
    pub fn serialize_rate(&self) -> Option<f64> {
        match self.serialization {
            Serialization::Generic { mbps } => Some(mbps * MB * self.scale),
            Serialization::RawBuffer => None,
        }
    }

    /// The backend spec governing messages that travel inline. For the hybrid
    /// backend that is the pure gRPC path it falls back to.
    pub fn inline_path(&self) -> Self {
        if self.hybrid {
            Self {
                name: format!("{}:inline", self.name),
                ..Self::grpc_like().with_scale(self.scale)
            }
        } else {
            self.clone()
        }
    }

    /// Whether a message of `bytes` serialized bytes takes the store route.
    pub fn routes_to_store(&self, bytes: u64) -> bool {
        self.hybrid && route(bytes, self.fallback_threshold) == Route::Store
    }
}

impl fmt::Display for BackendSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name)
    }
}

/// Serializes `p`, holding the result for at least `size / rate` when the
/// spec's serializer is throughput-limited.
pub fn serialize_with(spec: &BackendSpec, p: &Payload) -> (Vec<u8>, Duration) {
    let t = Instant::now();
    let v = message::serialize(p);
    penalize(spec, v.len(), t);
    (v, t.elapsed())
}

/// Deserializes `b` under the backend's serializer cost.
pub fn deserialize_with(spec: &BackendSpec, b: &[u8]) -> (Result<Payload, MessageError>, Duration) {
    let t = Instant::now();
    let p = message::deserialize(b);
    penalize(spec, b.len(), t);
    (p, t.elapsed())
}

pub(crate) fn penalize(spec: &BackendSpec, len: usize, since: Instant) {
    if let Some(rate) = spec.serialize_rate() {
        let target = Duration::from_secs_f64(len as f64 / rate);
        sleep_precise(target.saturating_sub(since.elapsed()));
    }
}

/// Bytes held in transport-owned buffers.
#[derive(Debug, Default)]
pub struct ByteLedger {
    current: AtomicU64,
    peak: AtomicU64,
}

impl ByteLedger {
    pub fn new() -> Arc<Self> {
        Arc::default()
    }

    pub fn current(&self) -> u64 {
        self.current.load(Ordering::SeqCst)
    }

    pub fn peak(&self) -> u64 {
        self.peak.load(Ordering::SeqCst)
    }

    /// Restarts peak tracking from the current level.
    pub fn reset_peak(&self) {
        self.peak.store(self.current(), Ordering::SeqCst);
    }

    /// Records an allocation of `n` bytes, released when the guard drops.
    pub fn alloc(self: &Arc<Self>, n: u64) -> LedgerGuard {
        let now = self.current.fetch_add(n, Ordering::SeqCst) + n;
        self.peak.fetch_max(now, Ordering::SeqCst);
        LedgerGuard {
            ledger: Arc::clone(self),
            bytes: n,
        }
    }
}

#[derive(Debug)]
pub struct LedgerGuard {
    ledger: Arc<ByteLedger>,
    bytes: u64,
}

impl LedgerGuard {
    pub fn bytes(&self) -> u64 {
        self.bytes
    }
}

impl Drop for LedgerGuard {
    fn drop(&mut self) {
        self.ledger.current.fetch_sub(self.bytes, Ordering::SeqCst);
    }
}

/// Outcome of one successful send.
#[derive(Debug, Clone, Serialize)]
pub struct Receipt {
    pub peer: ParticipantId,
    /// Frame bytes written to the peer, over all connections.
    pub bytes_on_wire: u64,
    pub t_serialize: Duration,
    /// Time on the wire, plus the store upload if this send performed it.
    pub t_comm: Duration,
    /// The payload went through the store.
    pub store_put: bool,
    /// This send performed the store upload (no cache hit, not present).
    pub uploaded: bool,
}
