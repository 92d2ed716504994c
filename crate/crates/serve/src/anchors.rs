use std::num::NonZeroUsize;
use std::sync::{Arc, Mutex};
use std::time::SystemTime;

use lru::LruCache;
use sha2::{Digest, Sha256};

pub const DEFAULT_CAPACITY: usize = 1024;

/// A sentence embedding the client can refer to by id.
#[derive(Debug, Clone)]
pub struct AnchorHandle {
    pub id: String,
    pub embedding: Vec<f64>,
    pub created: SystemTime,
}

/// Content-addressed id: equal embeddings share an id, distinct ones never do
/// in practice.
pub fn anchor_id(embedding: &[f64]) -> String {
    let mut h = Sha256::new();
    for v in embedding {
        h.update(v.to_le_bytes());
    }
    let digest = h.finalize();
    let hex: String = digest.iter().take(12).map(|b| format!("{b:02x}")).collect();
    format!("a-{hex}")
}

/// Bounded least-recently-used map from anchor id to embedding, safe to
/// share between request handlers.
pub struct AnchorCache {
    inner: Mutex<LruCache<String, Arc<AnchorHandle>>>,
}

impl AnchorCache {
    pub fn new(capacity: usize) -> Self {
        let cap = NonZeroUsize::new(capacity.max(1)).expect("capacity is positive");
        Self { inner: Mutex::new(LruCache::new(cap)) }
    }

    /// Registers `embedding` and returns its id; re-registering refreshes it.
    pub fn insert(&self, embedding: Vec<f64>) -> String {
        let id = anchor_id(&embedding);
        let mut cache = self.inner.lock().expect("anchor cache lock poisoned");
        if cache.get(&id).is_none() {
            let handle = AnchorHandle { id: id.clone(), embedding, created: SystemTime::now() };
            cache.put(id.clone(), Arc::new(handle));
        }
        id
    }

    pub fn get(&self, id: &str) -> Option<Arc<AnchorHandle>> {
        self.inner.lock().expect("anchor cache lock poisoned").get(id).cloned()
    }

    pub fn len(&self) -> usize {
        self.inner.lock().expect("anchor cache lock poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn capacity(&self) -> usize {
        self.inner.lock().expect("anchor cache lock poisoned").cap().get()
    }
}

impl Default for AnchorCache {
    fn default() -> Self {
        Self::new(DEFAULT_CAPACITY)
    }
}
