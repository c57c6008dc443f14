use std::collections::BTreeMap;
use std::sync::Arc;

use parking_lot::{Mutex, RwLock};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::embedding::EmbeddingTable;
use crate::config::AifConfig;
use crate::error::{AifError, Result};
use crate::math::DenseMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BehaviorEvent {
    pub item_id: u64,
    pub category_id: u64,
    pub timestamp: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UserState {
    pub user_id: u64,
    pub nickname: String,
    pub profile_features: Vec<u64>,
    /// Most recent `l` behaviors, oldest first.
    pub behavior_sequence: Vec<BehaviorEvent>,
    /// Full long-term history, oldest first.
    pub long_term_sequence: Vec<BehaviorEvent>,
}

impl UserState {
    pub fn validate(&self) -> Result<()> {
        for (name, seq) in [
            ("behavior", &self.behavior_sequence),
            ("long-term", &self.long_term_sequence),
        ] {
            if seq.windows(2).any(|w| w[0].timestamp > w[1].timestamp) {
                return Err(AifError::Precondition(format!(
                    "user {} {name} timestamps decrease",
                    self.user_id
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ItemRecord {
    pub item_id: u64,
    pub category_id: u64,
    pub attribute_features: Vec<u64>,
    /// Unit-norm multi-modal embedding.
    pub mm_embedding: Vec<f32>,
    pub version: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemUpdateEvent {
    pub item_id: u64,
    pub new_attribute_features: Vec<u64>,
    #[serde(default)]
    pub new_mm_embedding: Option<Vec<f32>>,
    /// Only consulted when the event introduces a new item.
    #[serde(default)]
    pub category_id: Option<u64>,
    pub event_seq: u64,
}

/// Embedding tables backing every raw feature.
#[derive(Debug, Clone)]
pub struct FeatureTables {
    pub profile: EmbeddingTable,
    pub behavior_item: EmbeddingTable,
    pub behavior_category: EmbeddingTable,
    pub item_attr: EmbeddingTable,
}

impl FeatureTables {
    pub fn new(cfg: &AifConfig) -> Self {
        let half = cfg.user_dim() / 2;
        Self {
            profile: EmbeddingTable::new(cfg.bucket_count, cfg.user_feature_dim, cfg.seed ^ 0x5052_4f46),
            behavior_item: EmbeddingTable::new(cfg.bucket_count, half, cfg.seed ^ 0x4249_5445),
            behavior_category: EmbeddingTable::new(cfg.bucket_count, half, cfg.seed ^ 0x4243_4154),
            item_attr: EmbeddingTable::new(cfg.bucket_count, cfg.item_feature_dim, cfg.seed ^ 0x4154_5452),
        }
    }

    /// Width of one behavior row, `d_user`.
    pub fn behavior_dim(&self) -> usize {
        self.behavior_item.dim() + self.behavior_category.dim()
    }

    /// Behavior rows: `[item embedding || category embedding]` per event.
    pub fn behavior_rows(&self, events: &[BehaviorEvent]) -> DenseMatrix {
        let mut data = Vec::with_capacity(events.len() * self.behavior_dim());
        for e in events {
            data.extend_from_slice(self.behavior_item.row(e.item_id));
            data.extend_from_slice(self.behavior_category.row(e.category_id));
        }
        DenseMatrix::from_raw(events.len(), self.behavior_dim(), data)
    }

    /// Concatenated attribute embeddings `I` of an item.
    pub fn item_embedding(&self, attribute_features: &[u64]) -> DenseMatrix {
        let mut data = Vec::with_capacity(attribute_features.len() * self.item_attr.dim());
        for &f in attribute_features {
            data.extend_from_slice(self.item_attr.row(f));
        }
        DenseMatrix::from_raw(1, data.len(), data)
    }
}

/// `(U_profile, U_seq)` for a user: the profile row is the concatenation of
/// per-feature lookups, and each sequence row is one behavior event.
pub fn materialize_user(
    state: &UserState,
    tables: &FeatureTables,
) -> Result<(DenseMatrix, DenseMatrix)> {
    if state.profile_features.is_empty() {
        return Err(AifError::Precondition(format!(
            "user {} has no profile features",
            state.user_id
        )));
    }
    let mut profile = Vec::with_capacity(state.profile_features.len() * tables.profile.dim());
    for &f in &state.profile_features {
        profile.extend_from_slice(tables.profile.row(f));
    }
    let u_profile = DenseMatrix::from_raw(1, profile.len(), profile);
    Ok((u_profile, tables.behavior_rows(&state.behavior_sequence)))
}

#[derive(Default)]
struct WriterState {
    last_event_seq: u64,
    replay_log: Vec<ItemUpdateEvent>,
}

/// Items and users with atomic per-record replacement.
///
/// Readers clone an `Arc<ItemRecord>`, so they always see one complete
/// version of a record. Updates are serialized through a single writer lock.
pub struct FeatureStore {
    cfg: AifConfig,
    tables: Arc<FeatureTables>,
    items: RwLock<BTreeMap<u64, Arc<ItemRecord>>>,
    users: BTreeMap<u64, Arc<UserState>>,
    writer: Mutex<WriterState>,
}

impl std::fmt::Debug for FeatureStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FeatureStore")
            .field("items", &self.items.read().len())
            .field("users", &self.users.len())
            .finish()
    }
}

fn unit_vector(rng: &mut ChaCha8Rng, center: Option<&[f32]>, dim: usize, noise: f32) -> Vec<f32> {
    let mut v: Vec<f32> = (0..dim)
        .map(|i| {
            let n: f32 = rng.sample(StandardNormal);
            center.map_or(n, |c| c[i] + noise * n)
        })
        .collect();
    normalize(&mut v);
    v
}

/// Unit-normalizes a multi-modal embedding the way the store does on ingest.
/// A zero vector is returned unchanged.
pub fn normalize_embedding(v: &[f32]) -> Vec<f32> {
    let mut out = v.to_vec();
    normalize(&mut out);
    out
}

fn normalize(v: &mut [f32]) {
    let norm = v.iter().map(|&x| f64::from(x) * f64::from(x)).sum::<f64>().sqrt();
    if norm > 0.0 {
        for x in v.iter_mut() {
            *x = (f64::from(*x) / norm) as f32;
        }
    }
}

impl FeatureStore {
    /// Builds an empty store (no items, no users).
    pub fn empty(cfg: &AifConfig) -> Self {
        Self::from_parts(cfg, Vec::new(), Vec::new(), 0)
    }

    pub fn from_parts(
        cfg: &AifConfig,
        items: Vec<ItemRecord>,
        users: Vec<UserState>,
        last_event_seq: u64,
    ) -> Self {
        Self {
            cfg: cfg.clone(),
            tables: Arc::new(FeatureTables::new(cfg)),
            items: RwLock::new(items.into_iter().map(|r| (r.item_id, Arc::new(r))).collect()),
            users: users.into_iter().map(|u| (u.user_id, Arc::new(u))).collect(),
            writer: Mutex::new(WriterState {
                last_event_seq,
                replay_log: Vec::new(),
            }),
        }
    }

    /// Generates the synthetic universe described by `cfg`. Multi-modal
    /// embeddings cluster around per-category centers so that behavior
    /// similarity carries signal.
    pub fn generate(cfg: &AifConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let centers: Vec<Vec<f32>> = (0..cfg.num_categories)
            .map(|_| unit_vector(&mut rng, None, cfg.mm_dim, 0.0))
            .collect();

        let mut items = Vec::with_capacity(cfg.num_items);
        let mut by_category: Vec<Vec<u64>> = vec![Vec::new(); cfg.num_categories as usize];
        for item_id in 0..cfg.num_items as u64 {
            let category_id = rng.random_range(0..cfg.num_categories);
            let attribute_features = (0..cfg.item_attr_features as u64)
                .map(|slot| slot * cfg.attr_vocab + rng.random_range(0..cfg.attr_vocab))
                .collect();
            let mm_embedding =
                unit_vector(&mut rng, Some(&centers[category_id as usize]), cfg.mm_dim, 0.35);
            by_category[category_id as usize].push(item_id);
            items.push(ItemRecord {
                item_id,
                category_id,
                attribute_features,
                mm_embedding,
                version: 0,
            });
        }
        let populated: Vec<u64> = (0..cfg.num_categories)
            .filter(|&c| !by_category[c as usize].is_empty())
            .collect();

        let mut users = Vec::with_capacity(cfg.num_users);
        for user_id in 0..cfg.num_users as u64 {
            let profile_features = (0..cfg.profile_features as u64)
                .map(|slot| slot * cfg.profile_vocab + rng.random_range(0..cfg.profile_vocab))
                .collect();
            let favorites: Vec<u64> = populated
                .choose_multiple(&mut rng, populated.len().min(6))
                .copied()
                .collect();
            let mut ts = 1_000_000u64;
            let mut long_term = Vec::with_capacity(cfg.long_seq_len);
            for _ in 0..cfg.long_seq_len {
                ts += rng.random_range(1..=600);
                let category_id = if rng.random_bool(0.7) {
                    *favorites.choose(&mut rng).expect("non-empty catalog")
                } else {
                    *populated.choose(&mut rng).expect("non-empty catalog")
                };
                let item_id = *by_category[category_id as usize]
                    .choose(&mut rng)
                    .expect("populated category");
                long_term.push(BehaviorEvent {
                    item_id,
                    category_id,
                    timestamp: ts,
                });
            }
            let recent = long_term.len().saturating_sub(cfg.seq_len);
            users.push(UserState {
                user_id,
                nickname: format!("user-{user_id:05}"),
                profile_features,
                behavior_sequence: long_term[recent..].to_vec(),
                long_term_sequence: long_term,
            });
        }
        Ok(Self::from_parts(cfg, items, users, 0))
    }

    pub fn config(&self) -> &AifConfig {
        &self.cfg
    }

    pub fn tables(&self) -> &FeatureTables {
        &self.tables
    }

    pub fn item(&self, item_id: u64) -> Option<Arc<ItemRecord>> {
        self.items.read().get(&item_id).cloned()
    }

    /// Consistent snapshot of all item records, ordered by id.
    pub fn items(&self) -> Vec<Arc<ItemRecord>> {
        self.items.read().values().cloned().collect()
    }

    pub fn item_ids(&self) -> Vec<u64> {
        self.items.read().keys().copied().collect()
    }

    pub fn item_count(&self) -> usize {
        self.items.read().len()
    }

    pub fn user(&self, user_id: u64) -> Option<Arc<UserState>> {
        self.users.get(&user_id).cloned()
    }

    pub fn users(&self) -> impl Iterator<Item = &Arc<UserState>> {
        self.users.values()
    }

    pub fn user_count(&self) -> usize {
        self.users.len()
    }

    pub fn last_event_seq(&self) -> u64 {
        self.writer.lock().last_event_seq
    }

    pub fn replay_log(&self) -> Vec<ItemUpdateEvent> {
        self.writer.lock().replay_log.clone()
    }

    /// Multi-modal embedding for an item introduced without one.
    fn default_mm_embedding(&self, item_id: u64) -> Vec<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed ^ 0x4d4d_0000);
        rng.set_stream(item_id);
        unit_vector(&mut rng, None, self.cfg.mm_dim, 0.0)
    }

    /// Applies one update. The record is swapped in whole, its version goes
    /// up by one, and the event joins the replay log.
    pub fn apply_item_update(&self, event: &ItemUpdateEvent) -> Result<Arc<ItemRecord>> {
        let mut writer = self.writer.lock();
        if event.event_seq <= writer.last_event_seq {
            return Err(AifError::Ordering {
                got: event.event_seq,
                last: writer.last_event_seq,
            });
        }
        if let Some(mm) = &event.new_mm_embedding {
            if mm.len() != self.cfg.mm_dim {
                return Err(AifError::shape(
                    "apply_item_update",
                    format!("mm embedding of {} for d_mm {}", mm.len(), self.cfg.mm_dim),
                ));
            }
        }
        let previous = self.item(event.item_id);
        let record = match previous {
            Some(old) => ItemRecord {
                item_id: old.item_id,
                category_id: old.category_id,
                attribute_features: event.new_attribute_features.clone(),
                mm_embedding: match &event.new_mm_embedding {
                    Some(mm) => {
                        let mut v = mm.clone();
                        normalize(&mut v);
                        v
                    }
                    None => old.mm_embedding.clone(),
                },
                version: old.version + 1,
            },
            None => ItemRecord {
                item_id: event.item_id,
                category_id: event.category_id.unwrap_or(0),
                attribute_features: event.new_attribute_features.clone(),
                mm_embedding: match &event.new_mm_embedding {
                    Some(mm) => {
                        let mut v = mm.clone();
                        normalize(&mut v);
                        v
                    }
                    None => self.default_mm_embedding(event.item_id),
                },
                version: 1,
            },
        };
        let record = Arc::new(record);
        self.items.write().insert(record.item_id, Arc::clone(&record));
        writer.last_event_seq = event.event_seq;
        writer.replay_log.push(event.clone());
        Ok(record)
    }
}

/// Produces a reproducible, strictly ordered stream of update events.
///
/// About one event in ten introduces a brand-new item; roughly a third of
/// updates to existing items also replace the multi-modal embedding.
pub fn random_update_events(store: &FeatureStore, count: usize, seed: u64) -> Vec<ItemUpdateEvent> {
    let cfg = store.config();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ids = store.item_ids();
    let mut next_new = ids.last().map_or(0, |m| m + 1);
    let mut seq = store.last_event_seq();
    let mut events = Vec::with_capacity(count);
    for _ in 0..count {
        seq += 1;
        let fresh = ids.is_empty() || rng.random_bool(0.1);
        let item_id = if fresh {
            next_new += 1;
            ids.push(next_new - 1);
            next_new - 1
        } else {
            *ids.choose(&mut rng).expect("non-empty")
        };
        let new_attribute_features = (0..cfg.item_attr_features as u64)
            .map(|slot| slot * cfg.attr_vocab + rng.random_range(0..cfg.attr_vocab))
            .collect();
        let new_mm_embedding = if fresh || rng.random_bool(0.33) {
            Some(unit_vector(&mut rng, None, cfg.mm_dim, 0.0))
        } else {
            None
        };
        events.push(ItemUpdateEvent {
            item_id,
            new_attribute_features,
            new_mm_embedding,
            category_id: fresh.then(|| rng.random_range(0..cfg.num_categories)),
            event_seq: seq,
        });
    }
    events
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicBool, Ordering};

    fn small_config() -> AifConfig {
        AifConfig::small()
    }

    #[test]
    fn generation_is_reproducible() {
        let cfg = small_config();
        let a = FeatureStore::generate(&cfg).unwrap();
        let b = FeatureStore::generate(&cfg).unwrap();
        assert_eq!(
            a.items().iter().map(|r| (**r).clone()).collect::<Vec<_>>(),
            b.items().iter().map(|r| (**r).clone()).collect::<Vec<_>>()
        );
        for (ua, ub) in a.users().zip(b.users()) {
            assert_eq!(ua, ub);
            ua.validate().unwrap();
            assert_eq!(ua.behavior_sequence.len(), cfg.seq_len);
            assert_eq!(ua.long_term_sequence.len(), cfg.long_seq_len);
        }
        for r in a.items() {
            let n: f64 = r.mm_embedding.iter().map(|&x| f64::from(x).powi(2)).sum();
            assert!((n - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn materialize_matches_concat_oracle() {
        let cfg = small_config();
        let store = FeatureStore::generate(&cfg).unwrap();
        let user = store.user(2).unwrap();
        let (p, s) = materialize_user(&user, store.tables()).unwrap();
        assert_eq!(p.shape(), (1, cfg.user_dim()));
        assert_eq!(s.shape(), (cfg.seq_len, cfg.user_dim()));

        let t = store.tables();
        let expect_p: Vec<f32> = user
            .profile_features
            .iter()
            .flat_map(|&f| t.profile.lookup(f).into_data())
            .collect();
        assert_eq!(p.data(), &expect_p[..]);
        for (i, e) in user.behavior_sequence.iter().enumerate() {
            let mut row = t.behavior_item.lookup(e.item_id).into_data();
            row.extend(t.behavior_category.lookup(e.category_id).into_data());
            assert_eq!(s.row(i), &row[..]);
        }
    }

    #[test]
    fn materialize_edge_cases() {
        let store = FeatureStore::generate(&small_config()).unwrap();
        let mut user = (*store.user(0).unwrap()).clone();
        user.behavior_sequence.truncate(1);
        let (_, s) = materialize_user(&user, store.tables()).unwrap();
        assert_eq!(s.rows(), 1);
        user.profile_features.clear();
        assert!(matches!(
            materialize_user(&user, store.tables()),
            Err(AifError::Precondition(_))
        ));
    }

    #[test]
    fn update_visible_and_stale_rejected() {
        let store = FeatureStore::generate(&small_config()).unwrap();
        let ev = ItemUpdateEvent {
            item_id: 3,
            new_attribute_features: vec![1, 2, 3, 4],
            new_mm_embedding: None,
            category_id: None,
            event_seq: 1,
        };
        let rec = store.apply_item_update(&ev).unwrap();
        assert_eq!(rec.version, 1);
        assert_eq!(store.item(3).unwrap().attribute_features, vec![1, 2, 3, 4]);
        let err = store.apply_item_update(&ev).unwrap_err();
        assert!(matches!(err, AifError::Ordering { got: 1, last: 1 }));
        assert_eq!(store.replay_log().len(), 1);
    }

    #[test]
    fn version_counts_applied_events() {
        let store = FeatureStore::generate(&small_config()).unwrap();
        let events = random_update_events(&store, 60, 5);
        for e in &events {
            store.apply_item_update(e).unwrap();
        }
        for r in store.items() {
            let applied = events.iter().filter(|e| e.item_id == r.item_id).count() as u64;
            assert_eq!(r.version, applied);
        }
    }

    #[test]
    fn concurrent_readers_never_see_mixed_records() {
        // Each update writes attributes [v, v, v, v] where v is the new version,
        // so a torn read would break the attribute/version correspondence.
        let store = FeatureStore::generate(&small_config()).unwrap();
        store
            .apply_item_update(&ItemUpdateEvent {
                item_id: 7,
                new_attribute_features: vec![1; 4],
                new_mm_embedding: None,
                category_id: None,
                event_seq: 1,
            })
            .unwrap();
        let done = AtomicBool::new(false);
        std::thread::scope(|s| {
            for _ in 0..4 {
                s.spawn(|| {
                    let mut reads = 0;
                    while reads < 100 || !done.load(Ordering::Acquire) {
                        let r = store.item(7).unwrap();
                        assert!(r.attribute_features.iter().all(|&a| a == r.version));
                        reads += 1;
                        std::thread::yield_now();
                    }
                });
            }
            for v in 2..=11u64 {
                store
                    .apply_item_update(&ItemUpdateEvent {
                        item_id: 7,
                        new_attribute_features: vec![v; 4],
                        new_mm_embedding: None,
                        category_id: None,
                        event_seq: v,
                    })
                    .unwrap();
                std::thread::yield_now();
            }
            done.store(true, Ordering::Release);
        });
        assert_eq!(store.item(7).unwrap().version, 11);
    }
}
