//! Per-component memoization keyed by demixing-row content.
//!
//! A source component `s_i = x w_i^T` depends only on the row `w_i`, so
//! anything derived from it (entropies, Cholesky factors) is keyed by the
//! exact bit pattern of the row. Perturbing one row of `W` therefore only
//! misses on that row and on pairs involving it.

use std::collections::HashMap;
use std::hash::Hash;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use crate::error::Result;

/// Exact bit pattern of a demixing row.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct RowKey(Box<[u64]>);

impl RowKey {
    pub fn new(row: &[f64]) -> Self {
        // normalize -0.0 so that equal rows share a key
        RowKey(row.iter().map(|v| (v + 0.0).to_bits()).collect())
    }
}

/// Concurrent memo table with generation-based eviction.
pub(crate) struct Memo<K, V> {
    map: Mutex<HashMap<K, (u64, Arc<V>)>>,
    generation: AtomicU64,
}

impl<K: Eq + Hash + Clone, V> Memo<K, V> {
    pub(crate) fn new() -> Self {
        Self {
            map: Mutex::new(HashMap::new()),
            generation: AtomicU64::new(0),
        }
    }

    pub(crate) fn get(&self, key: &K) -> Option<Arc<V>> {
        let gen = self.generation.load(Ordering::Relaxed);
        let mut map = self.map.lock().unwrap();
        map.get_mut(key).map(|entry| {
            entry.0 = gen;
            Arc::clone(&entry.1)
        })
    }

    /// Inserting an existing key keeps the first value.
    pub(crate) fn insert(&self, key: K, value: V) -> Arc<V> {
        let gen = self.generation.load(Ordering::Relaxed);
        let mut map = self.map.lock().unwrap();
        let entry = map.entry(key).or_insert_with(|| (gen, Arc::new(value)));
        entry.0 = gen;
        Arc::clone(&entry.1)
    }

    pub(crate) fn get_or_try_insert(&self, key: &K, f: impl FnOnce() -> Result<V>) -> Result<Arc<V>> {
        if let Some(v) = self.get(key) {
            return Ok(v);
        }
        let value = f()?;
        Ok(self.insert(key.clone(), value))
    }

    /// Drops entries not touched during the current or previous generation,
    /// then starts a new generation.
    pub(crate) fn advance(&self) {
        let gen = self.generation.fetch_add(1, Ordering::Relaxed);
        let mut map = self.map.lock().unwrap();
        map.retain(|_, (g, _)| *g + 1 >= gen);
    }

    #[cfg(test)]
    pub(crate) fn len(&self) -> usize {
        self.map.lock().unwrap().len()
    }
}
