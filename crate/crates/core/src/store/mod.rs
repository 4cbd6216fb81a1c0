//! Object storage for large payloads.
//!
//! Three backends share the [`ObjectStore`] interface: an in-memory map,
//! a directory tree, and an S3-compatible HTTP client. Participants talk to
//! a store through a [`StoreClient`], which adds the participant's shaped
//! link, retries with backoff, digest verification and optional fault
//! injection. Counters are kept per [`Store`], so every client of one store
//! contributes to the same [`StoreStats`].

use std::collections::HashMap;
use std::fmt;
use std::sync::atomic::{AtomicU32, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use bytes::Bytes;
use serde::Serialize;
use thiserror::Error;

use crate::message::{Digest, Payload};
use crate::netem::{sleep_precise, LinkProfile, Shaper};

mod fs;
mod memory;
#[cfg(feature = "s3")]
mod s3;

pub use fs::FsStore;
pub use memory::MemoryStore;
#[cfg(feature = "s3")]
pub use s3::{S3Config, S3Store};

/// Bucket used when none is configured.
pub const DEFAULT_BUCKET: &str = "silocomm";
pub const DEFAULT_CACHE_CAPACITY: usize = 64;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("store unreachable: {0}")]
    Unreachable(String),
    #[error("store capacity exceeded: {needed} bytes needed, {available} of {capacity} available")]
    CapacityExceeded { needed: u64, available: u64, capacity: u64 },
    #[error("object {0} not found")]
    NotFound(ObjectKey),
    #[error("object {key} missing after {attempts} attempts")]
    MissingObject { key: ObjectKey, attempts: u32 },
    #[error("object {key} is corrupt: expected digest {expected}, got {actual}")]
    Corrupt {
        key: ObjectKey,
        expected: Digest,
        actual: Digest,
    },
    #[error("transfer of {key} aborted after {received} of {total} bytes")]
    Aborted { key: ObjectKey, received: u64, total: u64 },
    #[error("refusing to store an empty object")]
    EmptyBlob,
    #[error("invalid object key {0:?}")]
    InvalidKey(String),
    #[error("store configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl StoreError {
    /// Whether another attempt could succeed.
    pub fn is_retryable(&self) -> bool {
        matches!(
            self,
            StoreError::Unreachable(_)
                | StoreError::NotFound(_)
                | StoreError::Corrupt { .. }
                | StoreError::Aborted { .. }
        )
    }
}

/// Location of one object.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub struct ObjectKey {
    pub bucket: String,
    pub key: String,
}

impl ObjectKey {
    pub fn new(bucket: impl Into<String>, key: impl Into<String>) -> Self {
        Self {
            bucket: bucket.into(),
            key: key.into(),
        }
    }

    /// Placeholder for a key not yet assigned.
    pub fn pending() -> Self {
        Self::new("", "")
    }

    pub fn is_pending(&self) -> bool {
        self.key.is_empty()
    }

    /// The content digest encoded in the key's last segment, if any.
    pub fn digest(&self) -> Option<Digest> {
        Digest::from_hex(self.key.rsplit('/').next()?)
    }

    /// Checks that every character is URL-safe and no segment escapes the
    /// bucket.
    pub fn validate(&self) -> Result<(), StoreError> {
        let ok_bucket = !self.bucket.is_empty() && self.bucket.chars().all(url_safe) && !self.bucket.starts_with('.');
        let ok_key = !self.key.is_empty()
            && self
                .key
                .split('/')
                .all(|seg| !seg.is_empty() && seg != "." && seg != ".." && seg.chars().all(url_safe));
        if ok_bucket && ok_key {
            Ok(())
        } else {
            Err(StoreError::InvalidKey(self.to_string()))
        }
    }
}

impl fmt::Display for ObjectKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.bucket, self.key)
    }
}

fn url_safe(c: char) -> bool {
    c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.')
}

fn sanitize(namespace: &str) -> String {
    let s: String = namespace.chars().map(|c| if url_safe(c) { c } else { '-' }).collect();
    let s = s.trim_start_matches('.');
    if s.is_empty() {
        "default".to_owned()
    } else {
        s.to_owned()
    }
}

/// Key for a payload under `namespace` in the default bucket.
///
/// The key is `<namespace>/<sha256 hex>`, with characters outside
/// `[A-Za-z0-9._-]` in the namespace replaced by `-`.
pub fn key_for(p: &Payload, namespace: &str) -> ObjectKey {
    key_for_digest(DEFAULT_BUCKET, p.version(), namespace)
}

pub fn key_for_digest(bucket: &str, digest: Digest, namespace: &str) -> ObjectKey {
    ObjectKey::new(bucket, format!("{}/{}", sanitize(namespace), digest.to_hex()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum PutOutcome {
    Uploaded,
    AlreadyPresent,
}

/// A bare object store. Implementations must be safe for concurrent use.
pub trait ObjectStore: Send + Sync + fmt::Debug {
    /// Short backend name for reports.
    fn kind(&self) -> &'static str;

    /// The bucket new keys should be placed in.
    fn bucket(&self) -> &str {
        DEFAULT_BUCKET
    }

    /// Stores `blob` unless `key` already exists. Atomic: of several
    /// concurrent calls for one key, exactly one reports `Uploaded`.
    fn put_if_absent(&self, key: &ObjectKey, blob: Bytes) -> Result<PutOutcome, StoreError>;

    /// One fetch attempt. A missing object is [`StoreError::NotFound`].
    fn get(&self, key: &ObjectKey) -> Result<Bytes, StoreError>;

    fn contains(&self, key: &ObjectKey) -> Result<bool, StoreError>;

    fn delete(&self, key: &ObjectKey) -> Result<(), StoreError>;
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct StoreStats {
    pub put_count: u64,
    pub get_count: u64,
    pub bytes_uploaded: u64,
    pub bytes_downloaded: u64,
    pub retry_count: u64,
}

#[derive(Debug, Default)]
struct Counters {
    put_count: AtomicU64,
    get_count: AtomicU64,
    bytes_uploaded: AtomicU64,
    bytes_downloaded: AtomicU64,
    retry_count: AtomicU64,
}

impl Counters {
    fn snapshot(&self) -> StoreStats {
        StoreStats {
            put_count: self.put_count.load(Ordering::SeqCst),
            get_count: self.get_count.load(Ordering::SeqCst),
            bytes_uploaded: self.bytes_uploaded.load(Ordering::SeqCst),
            bytes_downloaded: self.bytes_downloaded.load(Ordering::SeqCst),
            retry_count: self.retry_count.load(Ordering::SeqCst),
        }
    }
}

/// A shared store handle with run-wide counters.
#[derive(Clone, Debug)]
pub struct Store {
    backend: Arc<dyn ObjectStore>,
    counters: Arc<Counters>,
}

impl Store {
    pub fn new(backend: impl ObjectStore + 'static) -> Self {
        Self::from_arc(Arc::new(backend))
    }

    pub fn from_arc(backend: Arc<dyn ObjectStore>) -> Self {
        Self {
            backend,
            counters: Arc::default(),
        }
    }

    pub fn memory() -> Self {
        Self::new(MemoryStore::new())
    }

    pub fn backend(&self) -> &dyn ObjectStore {
        &*self.backend
    }

    pub fn stats(&self) -> StoreStats {
        self.counters.snapshot()
    }

    /// A client reaching this store over `link`.
    pub fn client(&self, link: LinkProfile) -> StoreClient {
        StoreClient {
            store: self.clone(),
            shaper: Shaper::new(link),
            retry: RetryPolicy::default(),
            faults: Arc::default(),
        }
    }
}

/// Exponential backoff between fetch attempts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    /// Total attempts including the first; at least 1.
    pub max_attempts: u32,
    pub initial_backoff: Duration,
    pub max_backoff: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 4,
            initial_backoff: Duration::from_millis(10),
            max_backoff: Duration::from_secs(1),
        }
    }
}

impl RetryPolicy {
    /// Delay before retry number `retry` (0-based).
    pub fn backoff(&self, retry: u32) -> Duration {
        let factor = 2u32.saturating_pow(retry.min(30));
        self.initial_backoff.saturating_mul(factor).min(self.max_backoff)
    }
}

/// Armed failures, consumed one per affected operation.
#[derive(Debug)]
pub struct FaultInjector {
    abort_gets: AtomicU32,
    corrupt_gets: AtomicU32,
    fail_puts: AtomicU32,
    /// Fraction of the object delivered before an aborted get breaks,
    /// in thousandths.
    abort_point: AtomicU32,
}

impl Default for FaultInjector {
    fn default() -> Self {
        Self {
            abort_gets: AtomicU32::new(0),
            corrupt_gets: AtomicU32::new(0),
            fail_puts: AtomicU32::new(0),
            abort_point: AtomicU32::new(500),
        }
    }
}

fn consume(c: &AtomicU32) -> bool {
    c.fetch_update(Ordering::SeqCst, Ordering::SeqCst, |v| v.checked_sub(1))
        .is_ok()
}

impl FaultInjector {
    /// The next `n` gets break off mid-stream.
    pub fn abort_next_gets(&self, n: u32) {
        self.abort_gets.fetch_add(n, Ordering::SeqCst);
    }

    /// Where aborted gets break off, as a fraction of the object.
    pub fn set_abort_point(&self, fraction: f64) {
        let v = (fraction.clamp(0.0, 1.0) * 1000.0).round() as u32;
        self.abort_point.store(v, Ordering::SeqCst);
    }

    /// The next `n` gets deliver a flipped bit.
    pub fn corrupt_next_gets(&self, n: u32) {
        self.corrupt_gets.fetch_add(n, Ordering::SeqCst);
    }

    /// The next `n` puts fail as if the store were down.
    pub fn fail_next_puts(&self, n: u32) {
        self.fail_puts.fetch_add(n, Ordering::SeqCst);
    }
}

/// A successful fetch.
#[derive(Debug, Clone)]
pub struct Fetched {
    pub bytes: Bytes,
    /// Attempts that failed before this one.
    pub retries: u32,
}

/// One participant's view of a [`Store`].
#[derive(Clone, Debug)]
pub struct StoreClient {
    store: Store,
    shaper: Shaper,
    retry: RetryPolicy,
    faults: Arc<FaultInjector>,
}

impl StoreClient {
    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn store(&self) -> &Store {
        &self.store
    }

    pub fn link(&self) -> &LinkProfile {
        self.shaper.profile()
    }

    pub fn retry_policy(&self) -> RetryPolicy {
        self.retry
    }

    pub fn faults(&self) -> &FaultInjector {
        &self.faults
    }

    pub fn key_for(&self, p: &Payload, namespace: &str) -> ObjectKey {
        key_for_digest(self.store.backend.bucket(), p.version(), namespace)
    }

    /// Uploads `blob` under `key` unless it is already stored.
    ///
    /// An existing object costs one round trip; an upload costs the link's
    /// transfer time for the blob. Unreachable-store failures are retried.
    pub fn put_if_absent(&self, key: &ObjectKey, blob: Bytes) -> Result<PutOutcome, StoreError> {
        if blob.is_empty() {
            return Err(StoreError::EmptyBlob);
        }
        key.validate()?;
        self.with_retries(|| {
            let pacer = self.shaper.pacer();
            if consume(&self.faults.fail_puts) {
                pacer.delay_first_byte();
                return Err(StoreError::Unreachable(format!("injected put failure for {key}")));
            }
            if self.store.backend.contains(key)? {
                pacer.delay_first_byte();
                return Ok(PutOutcome::AlreadyPresent);
            }
            pacer.simulate(blob.len(), None);
            let outcome = self.store.backend.put_if_absent(key, blob.clone())?;
            if outcome == PutOutcome::Uploaded {
                let c = &self.store.counters;
                c.put_count.fetch_add(1, Ordering::SeqCst);
                c.bytes_uploaded.fetch_add(blob.len() as u64, Ordering::SeqCst);
            }
            Ok(outcome)
        })
        .map(|(outcome, _)| outcome)
        .map_err(|(e, _)| e)
    }

    /// Fetches `key`, retrying transient failures with backoff and checking
    /// the bytes against the digest in the key.
    pub fn get(&self, key: &ObjectKey) -> Result<Fetched, StoreError> {
        key.validate()?;
        let expected = key.digest();
        let result = self.with_retries(|| {
            let pacer = self.shaper.pacer();
            let bytes = match self.store.backend.get(key) {
                Ok(b) => b,
                Err(e) => {
                    pacer.delay_first_byte();
                    return Err(e);
                }
            };
            let total = bytes.len();
            let c = &self.store.counters;
            if consume(&self.faults.abort_gets) {
                let permille = self.faults.abort_point.load(Ordering::SeqCst) as usize;
                let cut = total * permille / 1000;
                pacer.simulate(total, Some(cut));
                c.bytes_downloaded.fetch_add(cut as u64, Ordering::SeqCst);
                return Err(StoreError::Aborted {
                    key: key.clone(),
                    received: cut as u64,
                    total: total as u64,
                });
            }
            pacer.simulate(total, None);
            c.bytes_downloaded.fetch_add(total as u64, Ordering::SeqCst);
            let bytes = if consume(&self.faults.corrupt_gets) && total > 0 {
                let mut v = bytes.to_vec();
                v[total / 2] ^= 0x01;
                Bytes::from(v)
            } else {
                bytes
            };
            if let Some(expected) = expected {
                let actual = Digest::of(&bytes);
                if actual != expected {
                    return Err(StoreError::Corrupt {
                        key: key.clone(),
                        expected,
                        actual,
                    });
                }
            }
            c.get_count.fetch_add(1, Ordering::SeqCst);
            Ok(bytes)
        });
        match result {
            Ok((bytes, retries)) => Ok(Fetched { bytes, retries }),
            Err((StoreError::NotFound(key), attempts)) => Err(StoreError::MissingObject { key, attempts }),
            Err((e, _)) => Err(e),
        }
    }

    fn with_retries<T>(
        &self,
        mut attempt: impl FnMut() -> Result<T, StoreError>,
    ) -> Result<(T, u32), (StoreError, u32)> {
        let max = self.retry.max_attempts.max(1);
        let mut n = 0;
        loop {
            n += 1;
            match attempt() {
                Ok(v) => return Ok((v, n - 1)),
                Err(e) if e.is_retryable() && n < max => {
                    log::debug!("store attempt {n}/{max} failed: {e}");
                    self.store.counters.retry_count.fetch_add(1, Ordering::SeqCst);
                    sleep_precise(self.retry.backoff(n - 1));
                }
                Err(e) => return Err((e, n)),
            }
        }
    }
}

/// Sender-side map from payload digest to the key it was uploaded under.
///
/// Least-recently-used entries are evicted once `capacity` is reached.
#[derive(Debug)]
pub struct KeyCache {
    capacity: usize,
    inner: Mutex<CacheInner>,
}

#[derive(Debug, Default)]
struct CacheInner {
    tick: u64,
    entries: HashMap<Digest, (ObjectKey, u64)>,
}

impl Default for KeyCache {
    fn default() -> Self {
        Self::new(DEFAULT_CACHE_CAPACITY)
    }
}

impl KeyCache {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            inner: Mutex::default(),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.inner.lock().unwrap().entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Looks up `digest`, marking it most recently used.
    pub fn get(&self, digest: &Digest) -> Option<ObjectKey> {
        let mut g = self.inner.lock().unwrap();
        g.tick += 1;
        let tick = g.tick;
        g.entries.get_mut(digest).map(|(key, used)| {
            *used = tick;
            key.clone()
        })
    }

    pub fn insert(&self, digest: Digest, key: ObjectKey) {
        if self.capacity == 0 {
            return;
        }
        let mut g = self.inner.lock().unwrap();
        g.tick += 1;
        let tick = g.tick;
        if !g.entries.contains_key(&digest) && g.entries.len() >= self.capacity {
            if let Some(oldest) = g.entries.iter().min_by_key(|(_, (_, used))| *used).map(|(d, _)| *d) {
                g.entries.remove(&oldest);
            }
        }
        g.entries.insert(digest, (key, tick));
    }

    /// Returns the cached key for `digest`, or runs `upload` and caches its
    /// key. The lock is not held during `upload`.
    pub fn get_or_try_insert<E>(
        &self,
        digest: Digest,
        upload: impl FnOnce() -> Result<ObjectKey, E>,
    ) -> Result<(ObjectKey, bool), E> {
        if let Some(k) = self.get(&digest) {
            return Ok((k, true));
        }
        let key = upload()?;
        self.insert(digest, key.clone());
        Ok((key, false))
    }

    pub fn clear(&self) {
        self.inner.lock().unwrap().entries.clear();
    }
}
