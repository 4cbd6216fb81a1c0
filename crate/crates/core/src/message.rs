//! FL messages and the split/join procedure.
//!
//! A federated-learning message is a small metadata header (round, type,
//! sender, receiver) plus a flat parameter vector. The hybrid backend sends
//! the header as an [`Envelope`] over the control channel and parks the
//! serialized parameters in object storage; [`split`] and [`join`] are the
//! two halves of that procedure.
//!
//! # Payload layout
//!
//! ```text
//! +--------+-----------+----------+-------------+--------------------------+
//! | "FLP1" | version   | reserved | param_count | params                   |
//! | 4 B    | u16 LE    | u16 LE   | u64 LE      | f32 LE x param_count     |
//! +--------+-----------+----------+-------------+--------------------------+
//! ```

use std::fmt;
use std::str::FromStr;
use std::sync::{Arc, OnceLock};

use bytes::Bytes;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest as _, Sha256};
use thiserror::Error;

use crate::codec::{put_short_str, Reader};
use crate::store::ObjectKey;

pub const PAYLOAD_MAGIC: [u8; 4] = *b"FLP1";
pub const PAYLOAD_FORMAT_VERSION: u16 = 1;
pub const PAYLOAD_HEADER_LEN: usize = 16;

/// Name of the content digest used for payload versions and object keys.
pub const DIGEST_ALGORITHM: &str = "sha256";

const ENVELOPE_VERSION: u8 = 1;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MessageError {
    #[error("malformed payload at byte {offset}: {reason}")]
    MalformedPayload { offset: u64, reason: String },
    #[error("malformed envelope at byte {offset}: {reason}")]
    MalformedEnvelope { offset: u64, reason: String },
    #[error("inline envelope joined with a separate payload blob")]
    UnexpectedBlob,
    #[error("store-key envelope joined without its payload blob")]
    Incomplete,
    #[error("payload size mismatch: envelope declares {expected} bytes, blob has {actual}")]
    Integrity { expected: u64, actual: u64 },
}

/// The four model-size tiers used throughout the benchmarks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PayloadTier {
    /// ResNet56-sized.
    Small,
    /// MobileNetV3-sized.
    Medium,
    /// DistilBERT-sized.
    Big,
    /// ViT-Large-sized.
    Large,
}

impl PayloadTier {
    pub const ALL: [PayloadTier; 4] = [Self::Small, Self::Medium, Self::Big, Self::Large];

    pub const fn param_count(self) -> u64 {
        match self {
            Self::Small => 591_322,
            Self::Medium => 5_152_518,
            Self::Big => 66_362_880,
            Self::Large => 307_432_234,
        }
    }

    /// Raw parameter bytes at 32 bits per parameter.
    pub const fn nominal_bytes(self) -> u64 {
        self.param_count() * 4
    }

    /// Parameter count after desk-scale reduction. Never zero.
    pub fn scaled_param_count(self, scale: f64) -> u64 {
        ((self.param_count() as f64 * scale).round() as u64).max(1)
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Small => "small",
            Self::Medium => "medium",
            Self::Big => "big",
            Self::Large => "large",
        }
    }
}

impl fmt::Display for PayloadTier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PayloadTier {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "small" => Ok(Self::Small),
            "medium" => Ok(Self::Medium),
            "big" => Ok(Self::Big),
            "large" => Ok(Self::Large),
            other => Err(format!("unknown tier `{other}` (expected small, medium, big or large)")),
        }
    }
}

/// SHA-256 content digest.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Digest(pub [u8; 32]);

impl Digest {
    pub fn of(bytes: &[u8]) -> Self {
        Self(Sha256::digest(bytes).into())
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(s: &str) -> Option<Self> {
        let mut out = [0u8; 32];
        hex::decode_to_slice(s, &mut out).ok()?;
        Some(Self(out))
    }
}

impl fmt::Debug for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Digest({})", &self.to_hex()[..16])
    }
}

impl fmt::Display for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl Serialize for Digest {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_hex())
    }
}

/// A flat vector of 32-bit parameters.
///
/// Cloning is cheap: the parameters are shared. The version digest is
/// computed on first use over the serialized form.
#[derive(Clone)]
pub struct Payload {
    inner: Arc<PayloadInner>,
}

struct PayloadInner {
    params: Vec<f32>,
    version: OnceLock<Digest>,
}

impl Payload {
    pub fn new(params: Vec<f32>) -> Self {
        Self {
            inner: Arc::new(PayloadInner {
                params,
                version: OnceLock::new(),
            }),
        }
    }

    pub fn params(&self) -> &[f32] {
        &self.inner.params
    }

    pub fn len(&self) -> usize {
        self.inner.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inner.params.is_empty()
    }

    pub fn serialized_len(&self) -> u64 {
        serialized_len_for(self.len() as u64)
    }

    /// Digest of [`serialize`]`(self)`, without materializing the bytes.
    pub fn version(&self) -> Digest {
        *self.inner.version.get_or_init(|| {
            let mut hasher = Sha256::new();
            hasher.update(header_bytes(self.len() as u64));
            if cfg!(target_endian = "little") {
                hasher.update(bytemuck::cast_slice::<f32, u8>(self.params()));
            } else {
                for chunk in self.params().chunks(16 * 1024) {
                    let buf: Vec<u8> = chunk.iter().flat_map(|p| p.to_le_bytes()).collect();
                    hasher.update(&buf);
                }
            }
            Digest(hasher.finalize().into())
        })
    }

    pub fn shares_storage(&self, other: &Payload) -> bool {
        Arc::ptr_eq(&self.inner, &other.inner)
    }
}

/// Bitwise equality; NaNs with equal bit patterns compare equal.
impl PartialEq for Payload {
    fn eq(&self, other: &Self) -> bool {
        self.shares_storage(other)
            || (self.len() == other.len()
                && self
                    .params()
                    .iter()
                    .zip(other.params())
                    .all(|(a, b)| a.to_bits() == b.to_bits()))
    }
}

impl Eq for Payload {}

impl fmt::Debug for Payload {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Payload")
            .field("params", &self.len())
            .finish_non_exhaustive()
    }
}

pub const fn serialized_len_for(param_count: u64) -> u64 {
    PAYLOAD_HEADER_LEN as u64 + 4 * param_count
}

fn header_bytes(param_count: u64) -> [u8; PAYLOAD_HEADER_LEN] {
    let mut h = [0u8; PAYLOAD_HEADER_LEN];
    h[0..4].copy_from_slice(&PAYLOAD_MAGIC);
    h[4..6].copy_from_slice(&PAYLOAD_FORMAT_VERSION.to_le_bytes());
    // bytes 6..8 reserved, zero
    h[8..16].copy_from_slice(&param_count.to_le_bytes());
    h
}

/// Deterministic pseudo-random payload of `param_count` values in [-1, 1).
pub fn make_payload(param_count: u64, seed: u64) -> Payload {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = (0..param_count).map(|_| rng.random_range(-1.0f32..1.0)).collect();
    Payload::new(params)
}

pub fn make_tier_payload(tier: PayloadTier, seed: u64) -> Payload {
    make_scaled_tier_payload(tier, 1.0, seed)
}

/// Tier payload with its parameter count multiplied by `scale`.
pub fn make_scaled_tier_payload(tier: PayloadTier, scale: f64, seed: u64) -> Payload {
    let tag = tier as u64 + 1;
    make_payload(
        tier.scaled_param_count(scale),
        seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15),
    )
}

pub fn serialize(p: &Payload) -> Vec<u8> {
    let mut out = Vec::with_capacity(p.serialized_len() as usize);
    serialize_into(p, &mut out);
    out
}

pub fn serialize_into(p: &Payload, out: &mut Vec<u8>) {
    out.reserve(p.serialized_len() as usize);
    out.extend_from_slice(&header_bytes(p.len() as u64));
    if cfg!(target_endian = "little") {
        out.extend_from_slice(bytemuck::cast_slice::<f32, u8>(p.params()));
    } else {
        for v in p.params() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
}

pub fn deserialize(b: &[u8]) -> Result<Payload, MessageError> {
    let malformed = |offset: usize, reason: String| MessageError::MalformedPayload {
        offset: offset as u64,
        reason,
    };
    if b.len() < PAYLOAD_HEADER_LEN {
        return Err(malformed(
            b.len(),
            format!("truncated header ({} of {PAYLOAD_HEADER_LEN} bytes)", b.len()),
        ));
    }
    if b[0..4] != PAYLOAD_MAGIC {
        return Err(malformed(0, "bad magic".into()));
    }
    let version = u16::from_le_bytes([b[4], b[5]]);
    if version != PAYLOAD_FORMAT_VERSION {
        return Err(malformed(4, format!("unsupported format version {version}")));
    }
    let count = u64::from_le_bytes(b[8..16].try_into().unwrap());
    let body = &b[PAYLOAD_HEADER_LEN..];
    let expected = count
        .checked_mul(4)
        .ok_or_else(|| malformed(8, format!("parameter count {count} overflows")))?;
    if (body.len() as u64) < expected {
        return Err(malformed(
            b.len(),
            format!(
                "truncated parameters: header declares {count}, found {} bytes",
                body.len()
            ),
        ));
    }
    if body.len() as u64 > expected {
        return Err(malformed(
            PAYLOAD_HEADER_LEN + expected as usize,
            "trailing bytes after parameters".into(),
        ));
    }
    let params = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok(Payload::new(params))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParticipantId(pub u32);

impl ParticipantId {
    pub const SERVER: ParticipantId = ParticipantId(0);
}

impl fmt::Display for ParticipantId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "p{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MsgType {
    GlobalModel,
    LocalUpdate,
    Control,
}

impl MsgType {
    fn to_u8(self) -> u8 {
        match self {
            Self::GlobalModel => 0,
            Self::LocalUpdate => 1,
            Self::Control => 2,
        }
    }

    fn from_u8(v: u8) -> Option<Self> {
        match v {
            0 => Some(Self::GlobalModel),
            1 => Some(Self::LocalUpdate),
            2 => Some(Self::Control),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub struct MessageHeader {
    pub round: u32,
    pub msg_type: MsgType,
    pub sender: ParticipantId,
    pub receiver: ParticipantId,
    /// Serialized payload length; kept consistent by [`FlMessage::new`].
    pub payload_bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FlMessage {
    header: MessageHeader,
    payload: Payload,
}

impl FlMessage {
    pub fn new(
        round: u32,
        msg_type: MsgType,
        sender: ParticipantId,
        receiver: ParticipantId,
        payload: Payload,
    ) -> Self {
        Self {
            header: MessageHeader {
                round,
                msg_type,
                sender,
                receiver,
                payload_bytes: payload.serialized_len(),
            },
            payload,
        }
    }

    pub fn header(&self) -> &MessageHeader {
        &self.header
    }

    pub fn payload(&self) -> &Payload {
        &self.payload
    }

    pub fn into_payload(self) -> Payload {
        self.payload
    }

    /// Same message addressed to another participant; shares the payload.
    pub fn readdressed(&self, receiver: ParticipantId) -> Self {
        let mut out = self.clone();
        out.header.receiver = receiver;
        out
    }
}

/// Where an envelope's payload lives.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Locator {
    Inline(Bytes),
    StoreKey(ObjectKey),
}

/// The control record: message metadata plus a payload locator.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Envelope {
    pub round: u32,
    pub msg_type: MsgType,
    pub sender: ParticipantId,
    pub receiver: ParticipantId,
    pub locator: Locator,
    pub payload_bytes: u64,
}

impl Envelope {
    pub fn inline(header: &MessageHeader, bytes: Bytes) -> Self {
        Self::with_locator(header, Locator::Inline(bytes))
    }

    pub fn stored(header: &MessageHeader, key: ObjectKey) -> Self {
        Self::with_locator(header, Locator::StoreKey(key))
    }

    fn with_locator(h: &MessageHeader, locator: Locator) -> Self {
        Self {
            round: h.round,
            msg_type: h.msg_type,
            sender: h.sender,
            receiver: h.receiver,
            locator,
            payload_bytes: h.payload_bytes,
        }
    }

    pub fn header(&self) -> MessageHeader {
        MessageHeader {
            round: self.round,
            msg_type: self.msg_type,
            sender: self.sender,
            receiver: self.receiver,
            payload_bytes: self.payload_bytes,
        }
    }

    pub fn store_key(&self) -> Option<&ObjectKey> {
        match &self.locator {
            Locator::StoreKey(k) => Some(k),
            Locator::Inline(_) => None,
        }
    }

    /// Inline payload bytes, or empty for store-key envelopes.
    pub fn body(&self) -> Bytes {
        match &self.locator {
            Locator::Inline(b) => b.clone(),
            Locator::StoreKey(_) => Bytes::new(),
        }
    }

    /// Everything except the inline payload bytes.
    pub fn encode_header(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(64);
        out.push(ENVELOPE_VERSION);
        out.extend_from_slice(&self.round.to_le_bytes());
        out.push(self.msg_type.to_u8());
        out.extend_from_slice(&self.sender.0.to_le_bytes());
        out.extend_from_slice(&self.receiver.0.to_le_bytes());
        out.extend_from_slice(&self.payload_bytes.to_le_bytes());
        match &self.locator {
            Locator::Inline(_) => out.push(0),
            Locator::StoreKey(k) => {
                out.push(1);
                put_short_str(&mut out, &k.bucket);
                put_short_str(&mut out, &k.key);
            }
        }
        out
    }

    /// Rebuilds an envelope from [`encode_header`](Self::encode_header)
    /// output and the body carried alongside it.
    pub fn decode(header: &[u8], body: Bytes) -> Result<Self, MessageError> {
        let bad = |offset: usize, reason: &str| MessageError::MalformedEnvelope {
            offset: offset as u64,
            reason: reason.to_string(),
        };
        let short = |s: crate::codec::Short| bad(s.offset, &format!("truncated, wanted {} more bytes", s.wanted));
        let mut r = Reader::new(header);
        let version = r.u8().map_err(short)?;
        if version != ENVELOPE_VERSION {
            return Err(bad(0, &format!("unsupported envelope version {version}")));
        }
        let round = r.u32().map_err(short)?;
        let at = r.offset();
        let msg_type = MsgType::from_u8(r.u8().map_err(short)?).ok_or_else(|| bad(at, "unknown message type"))?;
        let sender = ParticipantId(r.u32().map_err(short)?);
        let receiver = ParticipantId(r.u32().map_err(short)?);
        let payload_bytes = r.u64().map_err(short)?;
        let at = r.offset();
        let locator = match r.u8().map_err(short)? {
            0 => Locator::Inline(body),
            1 => {
                let bucket = r
                    .short_str()
                    .map_err(short)?
                    .map_err(|o| bad(o, "bucket is not UTF-8"))?;
                let key = r.short_str().map_err(short)?.map_err(|o| bad(o, "key is not UTF-8"))?;
                if !body.is_empty() {
                    return Err(bad(header.len(), "store-key envelope carries a body"));
                }
                Locator::StoreKey(ObjectKey::new(bucket, key))
            }
            _ => return Err(bad(at, "unknown locator tag")),
        };
        if r.remaining() != 0 {
            return Err(bad(r.offset(), "trailing bytes"));
        }
        Ok(Self {
            round,
            msg_type,
            sender,
            receiver,
            locator,
            payload_bytes,
        })
    }
}

/// Routing decision for the hybrid backend.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Route {
    Inline,
    Store,
}

/// `Store` iff `payload_bytes > threshold`.
pub fn route(payload_bytes: u64, threshold: u64) -> Route {
    if payload_bytes > threshold {
        Route::Store
    } else {
        Route::Inline
    }
}

/// Separates metadata from the serialized payload.
///
/// Above `threshold` the envelope gets an unassigned store-key slot (the
/// transport fills it after upload) and the blob is returned separately;
/// otherwise the bytes travel inline.
pub fn split(m: &FlMessage, threshold: u64) -> (Envelope, Option<Bytes>) {
    let bytes = Bytes::from(serialize(m.payload()));
    match route(bytes.len() as u64, threshold) {
        Route::Inline => (Envelope::inline(m.header(), bytes), None),
        Route::Store => (Envelope::stored(m.header(), ObjectKey::pending()), Some(bytes)),
    }
}

pub fn join(e: Envelope, blob: Option<Bytes>) -> Result<FlMessage, MessageError> {
    let header = e.header();
    let bytes = match (e.locator, blob) {
        (Locator::Inline(_), Some(_)) => return Err(MessageError::UnexpectedBlob),
        (Locator::StoreKey(_), None) => return Err(MessageError::Incomplete),
        (Locator::Inline(b), None) => b,
        (Locator::StoreKey(_), Some(b)) => b,
    };
    if bytes.len() as u64 != header.payload_bytes {
        return Err(MessageError::Integrity {
            expected: header.payload_bytes,
            actual: bytes.len() as u64,
        });
    }
    let payload = deserialize(&bytes)?;
    Ok(FlMessage { header, payload })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn msg(p: Payload) -> FlMessage {
        FlMessage::new(3, MsgType::GlobalModel, ParticipantId(0), ParticipantId(5), p)
    }

    #[test]
    fn tier_counts_and_bytes() {
        assert_eq!(PayloadTier::Small.param_count(), 591_322);
        assert_eq!(PayloadTier::Medium.param_count(), 5_152_518);
        assert_eq!(PayloadTier::Big.param_count(), 66_362_880);
        assert_eq!(PayloadTier::Large.param_count(), 307_432_234);
        for t in PayloadTier::ALL {
            assert_eq!(t.nominal_bytes(), t.param_count() * 4);
        }
    }

    #[test]
    fn small_tier_payload_size() {
        let p = make_tier_payload(PayloadTier::Small, 7);
        assert_eq!(p.len(), 591_322);
        assert_eq!(p.len() * 4, 2_365_288);
        assert_eq!(serialize(&p).len(), 2_365_288 + PAYLOAD_HEADER_LEN);
    }

    #[test]
    fn tier_payload_is_deterministic() {
        let a = make_tier_payload(PayloadTier::Small, 7);
        let b = make_tier_payload(PayloadTier::Small, 7);
        assert_eq!(a.version(), b.version());
        assert_eq!(a, b);
    }

    #[test]
    fn big_payloads_with_different_seeds_differ() {
        let a = make_tier_payload(PayloadTier::Big, 1);
        let b = make_tier_payload(PayloadTier::Big, 2);
        assert_ne!(a.version(), b.version());
        // 66,362,880 params x 4 bytes plus the fixed header.
        assert_eq!(a.serialized_len(), 265_451_520 + PAYLOAD_HEADER_LEN as u64);
    }

    #[test]
    fn version_matches_digest_of_serialized_bytes() {
        let p = make_payload(10_001, 3);
        assert_eq!(p.version(), Digest::of(&serialize(&p)));
    }

    #[test]
    fn empty_payload_is_header_only() {
        let p = Payload::new(vec![]);
        let b = serialize(&p);
        assert_eq!(b.len(), PAYLOAD_HEADER_LEN);
        assert_eq!(&b[0..4], b"FLP1");
        assert!(deserialize(&b).unwrap().is_empty());
    }

    #[test]
    fn serialized_layout_is_bit_exact() {
        let p = Payload::new(vec![1.0, -2.5]);
        let b = serialize(&p);
        let mut expect = b"FLP1".to_vec();
        expect.extend_from_slice(&1u16.to_le_bytes());
        expect.extend_from_slice(&0u16.to_le_bytes());
        expect.extend_from_slice(&2u64.to_le_bytes());
        expect.extend_from_slice(&1.0f32.to_le_bytes());
        expect.extend_from_slice(&(-2.5f32).to_le_bytes());
        assert_eq!(b, expect);
    }

    #[test]
    fn small_round_trip() {
        let p = make_tier_payload(PayloadTier::Small, 7);
        let b = serialize(&p);
        let q = deserialize(&b).unwrap();
        assert_eq!(serialize(&q), b);
    }

    #[test]
    fn deserialize_reports_offsets() {
        let b = serialize(&make_payload(8, 1));
        match deserialize(&b[..10]) {
            Err(MessageError::MalformedPayload { offset, .. }) => assert_eq!(offset, 10),
            other => panic!("{other:?}"),
        }
        match deserialize(&b[..b.len() - 3]) {
            Err(MessageError::MalformedPayload { offset, .. }) => {
                assert_eq!(offset, b.len() as u64 - 3)
            }
            other => panic!("{other:?}"),
        }
        let mut bad = b.clone();
        bad[0] = b'X';
        assert!(matches!(
            deserialize(&bad),
            Err(MessageError::MalformedPayload { offset: 0, .. })
        ));
        let mut bad = b.clone();
        bad[4] = 9;
        assert!(matches!(
            deserialize(&bad),
            Err(MessageError::MalformedPayload { offset: 4, .. })
        ));
        let mut long = b.clone();
        long.push(0);
        assert!(matches!(
            deserialize(&long),
            Err(MessageError::MalformedPayload { offset, .. }) if offset == b.len() as u64
        ));
    }

    #[test]
    fn split_routes_small_payload_inline() {
        let m = msg(make_tier_payload(PayloadTier::Small, 1));
        let (e, blob) = split(&m, 10_000_000);
        assert!(matches!(e.locator, Locator::Inline(_)));
        assert!(blob.is_none());
    }

    #[test]
    fn split_routes_big_payload_to_store() {
        // A 253 MB-class payload without generating 66M parameters: the
        // decision depends on size only.
        let m = msg(make_payload(63_250_000, 1));
        let (e, blob) = split(&m, 10_000_000);
        assert!(matches!(e.locator, Locator::StoreKey(ref k) if k.is_pending()));
        assert_eq!(blob.unwrap().len() as u64, m.header().payload_bytes);
    }

    #[test]
    fn zero_threshold_always_stores() {
        let m = msg(Payload::new(vec![]));
        let (e, blob) = split(&m, 0);
        assert!(e.store_key().is_some());
        assert!(blob.is_some());
    }

    #[test]
    fn medium_split_join_round_trip() {
        let m = msg(make_tier_payload(PayloadTier::Medium, 11));
        let (e, blob) = split(&m, 1_000);
        assert_eq!(join(e, blob).unwrap(), m);
    }

    #[test]
    fn join_rejects_spurious_blob() {
        let m = msg(make_payload(4, 1));
        let (e, _) = split(&m, u64::MAX);
        assert_eq!(
            join(e, Some(Bytes::from_static(b"x"))),
            Err(MessageError::UnexpectedBlob)
        );
    }

    #[test]
    fn join_rejects_missing_blob() {
        let m = msg(make_payload(4, 1));
        let (e, _) = split(&m, 0);
        assert_eq!(join(e, None), Err(MessageError::Incomplete));
    }

    #[test]
    fn join_rejects_wrong_length_blob() {
        let m = msg(make_payload(4, 1));
        let (e, blob) = split(&m, 0);
        let mut b = blob.unwrap().to_vec();
        b.truncate(b.len() - 4);
        assert!(matches!(
            join(e, Some(b.into())),
            Err(MessageError::Integrity {
                expected: 32,
                actual: 28
            })
        ));
    }

    #[test]
    fn store_key_envelopes_stay_small() {
        for tier in PayloadTier::ALL {
            let header = MessageHeader {
                round: u32::MAX,
                msg_type: MsgType::LocalUpdate,
                sender: ParticipantId(u32::MAX),
                receiver: ParticipantId(1),
                payload_bytes: serialized_len_for(tier.param_count()),
            };
            let key = ObjectKey::new("silocomm", &format!("round-4294967295/{}", "f".repeat(64)));
            let e = Envelope::stored(&header, key);
            assert!(e.encode_header().len() <= 1024);
        }
    }

    #[test]
    fn envelope_decode_rejects_garbage() {
        let e = Envelope::stored(&msg(make_payload(2, 1)).header().clone(), ObjectKey::new("b", "k"));
        let h = e.encode_header();
        assert_eq!(Envelope::decode(&h, Bytes::new()).unwrap(), e);
        assert!(Envelope::decode(&h[..h.len() - 1], Bytes::new()).is_err());
        assert!(Envelope::decode(&h, Bytes::from_static(b"zz")).is_err());
        let mut bad = h.clone();
        bad[5] = 77;
        assert!(matches!(
            Envelope::decode(&bad, Bytes::new()),
            Err(MessageError::MalformedEnvelope { offset: 5, .. })
        ));
    }

    #[test]
    fn route_boundary_is_strict() {
        assert_eq!(route(2_365_288, 10_000_000), Route::Inline);
        assert_eq!(route(265_451_520, 10_000_000), Route::Store);
        assert_eq!(route(10_000_000, 10_000_000), Route::Inline);
        assert_eq!(route(0, 0), Route::Inline);
        assert_eq!(route(1, 0), Route::Store);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn join_split_is_identity(
            count in 0u64..5_000,
            seed in any::<u64>(),
            threshold in 0u64..25_000,
            round in any::<u32>(),
        ) {
            let m = FlMessage::new(round, MsgType::LocalUpdate, ParticipantId(2), ParticipantId(0), make_payload(count, seed));
            let (e, blob) = split(&m, threshold);
            // Through the wire encoding as well.
            let e = Envelope::decode(&e.encode_header(), e.body()).unwrap();
            prop_assert_eq!(join(e, blob).unwrap(), m);
        }

        #[test]
        fn version_depends_only_on_bytes(params in proptest::collection::vec(any::<f32>(), 0..256)) {
            let a = Payload::new(params.clone());
            let b = deserialize(&serialize(&a)).unwrap();
            prop_assert_eq!(a.version(), b.version());
        }
    }
}
