//! Concurrent in-memory keyspace: a hash table of ordered trees.
//!
//! Keys are hashed with a seeded 64-bit function into a fixed, power-of-two
//! number of buckets; each bucket is a `BTreeMap` behind its own mutex. Two
//! operations contend only when their keys land in the same bucket, so with
//! the default 65,536 buckets and tens of thousands of keys, lock contention
//! is effectively noise. Per-key operations are linearizable: the bucket lock
//! makes every get/put/delete atomic, and a get returns the latest completed
//! put for that key.
//!
//! Values are size-capped (configurable) to bound worst-case memory per
//! operation; keys are capped at [`MAX_KEY_LEN`] to match the wire format's
//! 16-bit key length field.

use std::collections::BTreeMap;
use std::sync::Mutex;

/// Hard key cap; mirrors the 16-bit key length field on the wire.
pub const MAX_KEY_LEN: usize = 65_535;

/// Default number of buckets. Must be a power of two.
pub const DEFAULT_BUCKET_COUNT: usize = 65_536;

/// Default per-value size cap (4 MiB).
pub const DEFAULT_VALUE_CAP: usize = 4 * 1024 * 1024;

/// Default hash seed (an arbitrary odd 64-bit constant).
pub const DEFAULT_HASH_SEED: u64 = 0x9e37_79b9_7f4a_7c15;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StoreConfig {
    /// Bucket count; must be a power of two and nonzero.
    pub bucket_count: usize,
    /// Largest accepted value, in bytes.
    pub value_cap: usize,
    /// Seed for the key hash. Same seed + same key = same bucket, always.
    pub hash_seed: u64,
}

impl Default for StoreConfig {
    fn default() -> Self {
        StoreConfig {
            bucket_count: DEFAULT_BUCKET_COUNT,
            value_cap: DEFAULT_VALUE_CAP,
            hash_seed: DEFAULT_HASH_SEED,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum StoreError {
    #[error("key must not be empty")]
    EmptyKey,
    #[error("key length {0} exceeds {MAX_KEY_LEN} bytes")]
    KeyTooLong(usize),
    #[error("value length {len} exceeds the configured cap of {cap} bytes")]
    ValueTooLarge { len: usize, cap: usize },
    #[error("bucket count {0} is not a nonzero power of two")]
    BadBucketCount(usize),
}

/// Whether a put created the key or overwrote it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PutOutcome {
    Inserted,
    Replaced,
}

/// Whether a delete removed anything.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DeleteOutcome {
    Deleted,
    NotFound,
}

/// Point-in-time occupancy numbers, computed by walking every bucket.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StoreStats {
    pub record_count: usize,
    pub bucket_count: usize,
    pub max_bucket_len: usize,
}

/// Seeded FNV-1a with a 64-bit avalanche finisher.
///
/// FNV alone mixes low bits poorly, and bucket selection masks the low bits,
/// so the finisher (the murmur3 fmix64 constants) matters for distribution.
pub fn hash_key(seed: u64, key: &[u8]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64 ^ seed;
    for &b in key {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h ^= h >> 33;
    h = h.wrapping_mul(0xff51_afd7_ed55_8ccd);
    h ^= h >> 33;
    h = h.wrapping_mul(0xc4ce_b9fe_1a85_ec53);
    h ^ (h >> 33)
}

type Bucket = BTreeMap<Box<[u8]>, Box<[u8]>>;

pub struct Store {
    buckets: Box<[Mutex<Bucket>]>,
    mask: u64,
    value_cap: usize,
    hash_seed: u64,
}

impl Store {
    pub fn new(config: StoreConfig) -> Result<Store, StoreError> {
        if config.bucket_count == 0 || !config.bucket_count.is_power_of_two() {
            return Err(StoreError::BadBucketCount(config.bucket_count));
        }
        let buckets: Box<[Mutex<Bucket>]> = (0..config.bucket_count)
            .map(|_| Mutex::new(BTreeMap::new()))
            .collect();
        Ok(Store {
            buckets,
            mask: (config.bucket_count - 1) as u64,
            value_cap: config.value_cap,
            hash_seed: config.hash_seed,
        })
    }

    pub fn with_defaults() -> Store {
        Store::new(StoreConfig::default()).expect("default config is valid")
    }

    pub fn value_cap(&self) -> usize {
        self.value_cap
    }

    pub fn bucket_count(&self) -> usize {
        self.buckets.len()
    }

    /// Bucket index for a key. Stable for the lifetime of the store.
    pub fn bucket_of(&self, key: &[u8]) -> usize {
        (hash_key(self.hash_seed, key) & self.mask) as usize
    }

    fn check_key(key: &[u8]) -> Result<(), StoreError> {
        if key.is_empty() {
            return Err(StoreError::EmptyKey);
        }
        if key.len() > MAX_KEY_LEN {
            return Err(StoreError::KeyTooLong(key.len()));
        }
        Ok(())
    }

    /// Insert or overwrite. The store keeps its own copy of key and value.
    pub fn put(&self, key: &[u8], value: &[u8]) -> Result<PutOutcome, StoreError> {
        Self::check_key(key)?;
        if value.len() > self.value_cap {
            return Err(StoreError::ValueTooLarge {
                len: value.len(),
                cap: self.value_cap,
            });
        }
        let mut bucket = self.buckets[self.bucket_of(key)].lock().unwrap();
        match bucket.insert(key.into(), value.into()) {
            Some(_) => Ok(PutOutcome::Replaced),
            None => Ok(PutOutcome::Inserted),
        }
    }

    /// Latest stored value for the key, or None. Empty values round-trip as
    /// empty, distinct from absent.
    pub fn get(&self, key: &[u8]) -> Result<Option<Vec<u8>>, StoreError> {
        Self::check_key(key)?;
        let bucket = self.buckets[self.bucket_of(key)].lock().unwrap();
        Ok(bucket.get(key).map(|v| v.to_vec()))
    }

    pub fn delete(&self, key: &[u8]) -> Result<DeleteOutcome, StoreError> {
        Self::check_key(key)?;
        let mut bucket = self.buckets[self.bucket_of(key)].lock().unwrap();
        match bucket.remove(key) {
            Some(_) => Ok(DeleteOutcome::Deleted),
            None => Ok(DeleteOutcome::NotFound),
        }
    }

    pub fn len(&self) -> usize {
        self.buckets.iter().map(|b| b.lock().unwrap().len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.buckets.iter().all(|b| b.lock().unwrap().is_empty())
    }

    pub fn stats(&self) -> StoreStats {
        let mut record_count = 0;
        let mut max_bucket_len = 0;
        for b in self.buckets.iter() {
            let len = b.lock().unwrap().len();
            record_count += len;
            max_bucket_len = max_bucket_len.max(len);
        }
        StoreStats {
            record_count,
            bucket_count: self.buckets.len(),
            max_bucket_len,
        }
    }

    /// Test hook: hold a bucket's lock while probing other buckets.
    #[cfg(test)]
    fn lock_bucket(&self, index: usize) -> std::sync::MutexGuard<'_, Bucket> {
        self.buckets[index].lock().unwrap()
    }
}
