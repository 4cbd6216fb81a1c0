use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;

use bytes::Bytes;

use super::{ObjectKey, ObjectStore, PutOutcome, StoreError, DEFAULT_BUCKET};

/// Objects as files under `<root>/<bucket>/<key>`, bytes verbatim.
///
/// Writes go to a temporary file that is renamed into place, so readers
/// never observe a partial object.
#[derive(Debug)]
pub struct FsStore {
    root: PathBuf,
    bucket: String,
    put_lock: Mutex<()>,
    tmp_seq: AtomicU64,
}

impl FsStore {
    pub fn new(root: impl Into<PathBuf>) -> Result<Self, StoreError> {
        Self::with_bucket(root, DEFAULT_BUCKET)
    }

    pub fn with_bucket(root: impl Into<PathBuf>, bucket: &str) -> Result<Self, StoreError> {
        let root = root.into();
        fs::create_dir_all(&root)?;
        Ok(Self {
            root,
            bucket: bucket.to_owned(),
            put_lock: Mutex::new(()),
            tmp_seq: AtomicU64::new(0),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path_of(&self, key: &ObjectKey) -> Result<PathBuf, StoreError> {
        key.validate()?;
        let mut p = self.root.join(&key.bucket);
        p.extend(key.key.split('/'));
        Ok(p)
    }
}

impl ObjectStore for FsStore {
    fn kind(&self) -> &'static str {
        "fs"
    }

    fn bucket(&self) -> &str {
        &self.bucket
    }

    fn put_if_absent(&self, key: &ObjectKey, blob: Bytes) -> Result<PutOutcome, StoreError> {
        let path = self.path_of(key)?;
        let _g = self.put_lock.lock().unwrap();
        if path.exists() {
            return Ok(PutOutcome::AlreadyPresent);
        }
        let dir = path.parent().expect("object path has a parent");
        fs::create_dir_all(dir)?;
        let tmp = dir.join(format!(
            ".tmp-{}-{}",
            std::process::id(),
            self.tmp_seq.fetch_add(1, Ordering::Relaxed)
        ));
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&blob)?;
        f.sync_all()?;
        fs::rename(&tmp, &path)?;
        Ok(PutOutcome::Uploaded)
    }

    fn get(&self, key: &ObjectKey) -> Result<Bytes, StoreError> {
        match fs::read(self.path_of(key)?) {
            Ok(v) => Ok(Bytes::from(v)),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Err(StoreError::NotFound(key.clone())),
            Err(e) => Err(e.into()),
        }
    }

    fn contains(&self, key: &ObjectKey) -> Result<bool, StoreError> {
        Ok(self.path_of(key)?.exists())
    }

    fn delete(&self, key: &ObjectKey) -> Result<(), StoreError> {
        match fs::remove_file(self.path_of(key)?) {
            Err(e) if e.kind() != io::ErrorKind::NotFound => Err(e.into()),
            _ => Ok(()),
        }
    }
}
