//! Pre-caching of per-(user, category) long-term behavior subsequences.
//!
//! Offline, each user's long-term sequence is partitioned by category. While
//! retrieval runs, every subsequence of the requesting user is parsed into an
//! LRU cache; pre-ranking then indexes the cache by candidate category
//! instead of parsing on the critical path.

use std::collections::{BTreeMap, HashMap};
use std::hash::Hash;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use parking_lot::Mutex;

use crate::clock::VirtualDuration;
use crate::config::StageCostConfig;
use crate::features::{BehaviorEvent, UserState};

pub type Subsequence = Arc<Vec<BehaviorEvent>>;

/// `(user_id, category_id) → subsequence`, timestamp ordered.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SimHardStore {
    entries: BTreeMap<(u64, u64), Subsequence>,
}

impl SimHardStore {
    pub fn build<'a>(users: impl IntoIterator<Item = &'a UserState>) -> Self {
        let mut parts: BTreeMap<(u64, u64), Vec<BehaviorEvent>> = BTreeMap::new();
        for u in users {
            for e in &u.long_term_sequence {
                parts.entry((u.user_id, e.category_id)).or_default().push(*e);
            }
        }
        let entries = parts
            .into_iter()
            .map(|(k, mut v)| {
                v.sort_by_key(|e| e.timestamp);
                (k, Arc::new(v))
            })
            .collect();
        Self { entries }
    }

    pub fn get(&self, user_id: u64, category_id: u64) -> Option<&Subsequence> {
        self.entries.get(&(user_id, category_id))
    }

    /// Categories present in `user_id`'s history, ascending.
    pub fn categories(&self, user_id: u64) -> Vec<u64> {
        self.entries
            .range((user_id, 0)..=(user_id, u64::MAX))
            .map(|(&(_, c), _)| c)
            .collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// One step of cache activity, for trace comparison.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LruEvent<K> {
    Hit(K),
    Miss(K),
    Insert(K),
    Evict(K),
}

/// Exact LRU: a key map plus a recency index ordered by access stamp.
#[derive(Debug, Clone)]
pub struct LruCache<K, V> {
    capacity: usize,
    map: HashMap<K, (V, u64)>,
    recency: BTreeMap<u64, K>,
    clock: u64,
    trace: Option<Vec<LruEvent<K>>>,
}

impl<K: Clone + Eq + Hash, V: Clone> LruCache<K, V> {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "LRU capacity must be positive");
        Self {
            capacity,
            map: HashMap::new(),
            recency: BTreeMap::new(),
            clock: 0,
            trace: None,
        }
    }

    /// Same as [`LruCache::new`] but records every hit, miss, insert and
    /// eviction.
    pub fn with_trace(capacity: usize) -> Self {
        let mut c = Self::new(capacity);
        c.trace = Some(Vec::new());
        c
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn contains(&self, key: &K) -> bool {
        self.map.contains_key(key)
    }

    fn record(&mut self, e: LruEvent<K>) {
        if let Some(t) = &mut self.trace {
            t.push(e);
        }
    }

    fn touch(&mut self, key: &K) {
        self.clock += 1;
        let stamp = self.clock;
        if let Some((_, s)) = self.map.get_mut(key) {
            self.recency.remove(s);
            *s = stamp;
            self.recency.insert(stamp, key.clone());
        }
    }

    /// Looks up `key`, refreshing its recency on a hit.
    pub fn get(&mut self, key: &K) -> Option<V> {
        if self.map.contains_key(key) {
            self.touch(key);
            self.record(LruEvent::Hit(key.clone()));
            self.map.get(key).map(|(v, _)| v.clone())
        } else {
            self.record(LruEvent::Miss(key.clone()));
            None
        }
    }

    /// Reads without touching recency or the trace.
    pub fn peek(&self, key: &K) -> Option<&V> {
        self.map.get(key).map(|(v, _)| v)
    }

    /// Inserts or replaces `key` as most recent. Returns evicted keys.
    pub fn insert(&mut self, key: K, value: V) -> Vec<K> {
        self.record(LruEvent::Insert(key.clone()));
        if let Some(slot) = self.map.get_mut(&key) {
            slot.0 = value;
            self.touch(&key);
            return Vec::new();
        }
        let mut evicted = Vec::new();
        while self.map.len() >= self.capacity {
            let (_, victim) = self.recency.pop_first().expect("non-empty when full");
            self.map.remove(&victim);
            self.record(LruEvent::Evict(victim.clone()));
            evicted.push(victim);
        }
        self.clock += 1;
        self.recency.insert(self.clock, key.clone());
        self.map.insert(key, (value, self.clock));
        evicted
    }

    /// Keys from least to most recently used.
    pub fn keys_by_recency(&self) -> Vec<K> {
        self.recency.values().cloned().collect()
    }

    pub fn trace(&self) -> &[LruEvent<K>] {
        self.trace.as_deref().unwrap_or(&[])
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PrecacheStats {
    pub hits: u64,
    pub misses: u64,
    pub evictions: u64,
    pub inserts: u64,
}

/// Result of one subsequence lookup.
#[derive(Debug, Clone, PartialEq)]
pub struct SubsequenceLookup {
    pub events: Subsequence,
    pub hit: bool,
    /// Virtual parse delay charged by this lookup.
    pub parse_cost: VirtualDuration,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PrefetchOutcome {
    pub inserted: usize,
    pub parse_cost: VirtualDuration,
}

type Key = (u64, u64);

/// Thread-safe LRU of parsed subsequences with per-key single-flight loads.
pub struct SubsequenceCache {
    lru: Mutex<LruCache<Key, Subsequence>>,
    loading: Mutex<HashMap<Key, Arc<Mutex<()>>>>,
    hits: AtomicU64,
    misses: AtomicU64,
    evictions: AtomicU64,
    inserts: AtomicU64,
}

fn empty() -> Subsequence {
    Arc::new(Vec::new())
}

impl SubsequenceCache {
    pub fn new(capacity: usize) -> Self {
        Self::from_lru(LruCache::new(capacity))
    }

    /// A cache that records its LRU trace, for oracle comparison.
    pub fn traced(capacity: usize) -> Self {
        Self::from_lru(LruCache::with_trace(capacity))
    }

    fn from_lru(lru: LruCache<Key, Subsequence>) -> Self {
        Self {
            lru: Mutex::new(lru),
            loading: Mutex::new(HashMap::new()),
            hits: AtomicU64::new(0),
            misses: AtomicU64::new(0),
            evictions: AtomicU64::new(0),
            inserts: AtomicU64::new(0),
        }
    }

    pub fn stats(&self) -> PrecacheStats {
        PrecacheStats {
            hits: self.hits.load(Ordering::Relaxed),
            misses: self.misses.load(Ordering::Relaxed),
            evictions: self.evictions.load(Ordering::Relaxed),
            inserts: self.inserts.load(Ordering::Relaxed),
        }
    }

    pub fn len(&self) -> usize {
        self.lru.lock().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn contains(&self, user_id: u64, category_id: u64) -> bool {
        self.lru.lock().contains(&(user_id, category_id))
    }

    pub fn keys_by_recency(&self) -> Vec<Key> {
        self.lru.lock().keys_by_recency()
    }

    pub fn trace(&self) -> Vec<LruEvent<Key>> {
        self.lru.lock().trace().to_vec()
    }

    fn insert(&self, key: Key, value: Subsequence) {
        let evicted = self.lru.lock().insert(key, value);
        self.inserts.fetch_add(1, Ordering::Relaxed);
        self.evictions.fetch_add(evicted.len() as u64, Ordering::Relaxed);
    }

    /// Parses and caches every subsequence of `user_id`, in ascending
    /// category order. Entries of other users may be evicted.
    pub fn prefetch_user(&self, store: &SimHardStore, user_id: u64, costs: &StageCostConfig) -> PrefetchOutcome {
        let mut out = PrefetchOutcome::default();
        for c in store.categories(user_id) {
            let seq = Arc::clone(store.get(user_id, c).expect("listed category"));
            out.parse_cost += costs.parse_cost(seq.len());
            self.insert((user_id, c), seq);
            out.inserted += 1;
        }
        out
    }

    /// Cache lookup. A miss parses from `store` (charging the parse delay)
    /// and inserts; a pair absent from the store returns an empty miss with no
    /// cost and no insertion.
    pub fn lookup(&self, store: &SimHardStore, user_id: u64, category_id: u64, costs: &StageCostConfig) -> SubsequenceLookup {
        let key = (user_id, category_id);
        if let Some(events) = self.lru.lock().get(&key) {
            self.hits.fetch_add(1, Ordering::Relaxed);
            return SubsequenceLookup {
                events,
                hit: true,
                parse_cost: VirtualDuration::ZERO,
            };
        }
        self.misses.fetch_add(1, Ordering::Relaxed);
        let Some(source) = store.get(user_id, category_id) else {
            return SubsequenceLookup {
                events: empty(),
                hit: false,
                parse_cost: VirtualDuration::ZERO,
            };
        };
        let gate = Arc::clone(self.loading.lock().entry(key).or_default());
        let _loading = gate.lock();
        // another caller may have finished the same load while we waited
        if let Some(events) = self.lru.lock().peek(&key).cloned() {
            return SubsequenceLookup {
                events,
                hit: false,
                parse_cost: VirtualDuration::ZERO,
            };
        }
        let events = Arc::clone(source);
        self.insert(key, Arc::clone(&events));
        self.loading.lock().remove(&key);
        SubsequenceLookup {
            parse_cost: costs.parse_cost(events.len()),
            events,
            hit: false,
        }
    }
}

/// Uncached access: every call parses.
pub fn parse_direct(store: &SimHardStore, user_id: u64, category_id: u64, costs: &StageCostConfig) -> SubsequenceLookup {
    match store.get(user_id, category_id) {
        Some(seq) => SubsequenceLookup {
            parse_cost: costs.parse_cost(seq.len()),
            events: Arc::clone(seq),
            hit: false,
        },
        None => SubsequenceLookup {
            events: empty(),
            hit: false,
            parse_cost: VirtualDuration::ZERO,
        },
    }
}
