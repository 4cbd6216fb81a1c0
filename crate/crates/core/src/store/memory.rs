use std::collections::HashMap;
use std::sync::Mutex;

use bytes::Bytes;

use super::{ObjectKey, ObjectStore, PutOutcome, StoreError};

/// In-process store, optionally bounded in total bytes.
#[derive(Debug, Default)]
pub struct MemoryStore {
    capacity: Option<u64>,
    inner: Mutex<Inner>,
}

#[derive(Debug, Default)]
struct Inner {
    used: u64,
    objects: HashMap<ObjectKey, Bytes>,
}

impl MemoryStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_capacity(bytes: u64) -> Self {
        Self {
            capacity: Some(bytes),
            ..Self::default()
        }
    }

    pub fn used_bytes(&self) -> u64 {
        self.inner.lock().unwrap().used
    }

    pub fn len(&self) -> usize {
        self.inner.lock().unwrap().objects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl ObjectStore for MemoryStore {
    fn kind(&self) -> &'static str {
        "memory"
    }

    fn put_if_absent(&self, key: &ObjectKey, blob: Bytes) -> Result<PutOutcome, StoreError> {
        let mut g = self.inner.lock().unwrap();
        if g.objects.contains_key(key) {
            return Ok(PutOutcome::AlreadyPresent);
        }
        let needed = blob.len() as u64;
        if let Some(capacity) = self.capacity {
            let available = capacity.saturating_sub(g.used);
            if needed > available {
                return Err(StoreError::CapacityExceeded {
                    needed,
                    available,
                    capacity,
                });
            }
        }
        g.used += needed;
        g.objects.insert(key.clone(), blob);
        Ok(PutOutcome::Uploaded)
    }

    fn get(&self, key: &ObjectKey) -> Result<Bytes, StoreError> {
        let g = self.inner.lock().unwrap();
        g.objects
            .get(key)
            .cloned()
            .ok_or_else(|| StoreError::NotFound(key.clone()))
    }

    fn contains(&self, key: &ObjectKey) -> Result<bool, StoreError> {
        Ok(self.inner.lock().unwrap().objects.contains_key(key))
    }

    fn delete(&self, key: &ObjectKey) -> Result<(), StoreError> {
        let mut g = self.inner.lock().unwrap();
        if let Some(b) = g.objects.remove(key) {
            g.used -= b.len() as u64;
        }
        Ok(())
    }
}
