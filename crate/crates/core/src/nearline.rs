//! Nearline item-side inference and the N2O index table.
//!
//! Every item's attribute embedding is reduced by the item MLP and its BEA
//! bridge weights are computed ahead of time. Tables are immutable once
//! built; [`N2OIndex`] publishes a new one with a single pointer swap, so a
//! reader holding an `Arc` always sees one consistent epoch.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use parking_lot::RwLock;

use crate::bea::bea_item_phase;
use crate::codec::{ByteReader, ByteWriter};
use crate::error::{AifError, Result};
use crate::features::{FeatureStore, ItemUpdateEvent};
use crate::math::{mlp_forward, DenseMatrix, Layer};
use crate::model::ModelParams;

/// `Î = MLP(I)`.
pub fn reduce_item(item_embedding: &DenseMatrix, mlp: &[Layer]) -> Result<DenseMatrix> {
    mlp_forward(item_embedding, mlp)
}

#[derive(Debug, Clone, PartialEq)]
pub struct N2OEntry {
    /// `1 × d`
    pub vector: Vec<f32>,
    /// `1 × n`
    pub bea_weights: Vec<f32>,
    pub version: u64,
}

impl N2OEntry {
    fn bit_eq(&self, other: &Self) -> bool {
        self.version == other.version
            && bits_eq(&self.vector, &other.vector)
            && bits_eq(&self.bea_weights, &other.bea_weights)
    }
}

fn bits_eq(a: &[f32], b: &[f32]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
}

#[derive(Debug, Clone, PartialEq)]
pub struct N2OIndexTable {
    pub entries: BTreeMap<u64, N2OEntry>,
    pub table_epoch: u64,
    pub model_version: u64,
    dim: usize,
    bridges: usize,
}

/// Rows gathered for one batch of candidates, in request order.
#[derive(Debug, Clone, PartialEq)]
pub struct N2OLookup {
    pub vectors: DenseMatrix,
    pub bea_weights: DenseMatrix,
    pub versions: Vec<u64>,
}

pub const N2O_MAGIC: &[u8; 4] = b"N2O1";
pub const N2O_FORMAT_VERSION: u32 = 1;

/// Computes one item's entry from its attribute features.
pub fn build_entry(store: &FeatureStore, attrs: &[u64], version: u64, model: &ModelParams) -> Result<N2OEntry> {
    let embedding = store.tables().item_embedding(attrs);
    let vector = reduce_item(&embedding, &model.item_mlp)?;
    let weights = bea_item_phase(&model.bridges, &vector)?;
    Ok(N2OEntry {
        vector: vector.into_data(),
        bea_weights: weights.into_data(),
        version,
    })
}

impl N2OIndexTable {
    pub fn empty(dim: usize, bridges: usize, model_version: u64) -> Self {
        Self {
            entries: BTreeMap::new(),
            table_epoch: 0,
            model_version,
            dim,
            bridges,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn bridges(&self) -> usize {
        self.bridges
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, item_id: u64) -> Option<&N2OEntry> {
        self.entries.get(&item_id)
    }

    /// Recomputes every item in the store. The result carries `epoch + 1`.
    pub fn rebuild_full(store: &FeatureStore, model: &ModelParams, previous_epoch: u64) -> Result<Self> {
        let mut table = Self::empty(model.model_dim(), model.bridges.count(), model.version);
        table.table_epoch = previous_epoch + 1;
        for item in store.items() {
            let entry = build_entry(store, &item.attribute_features, item.version, model)?;
            table.entries.insert(item.item_id, entry);
        }
        Ok(table)
    }

    /// Recomputes only the items touched by `events`, reading their current
    /// record from `store` (which must already reflect the events). An id the
    /// store does not know is built straight from the event as a new item.
    /// An empty batch returns an identical table with the same epoch.
    pub fn apply_incremental(&self, events: &[ItemUpdateEvent], store: &FeatureStore, model: &ModelParams) -> Result<Self> {
        if events.is_empty() {
            return Ok(self.clone());
        }
        if model.version != self.model_version {
            return Err(AifError::Consistency(format!(
                "incremental update with model v{} on a v{} table",
                model.version, self.model_version
            )));
        }
        if let Some(w) = events.windows(2).find(|w| w[1].event_seq <= w[0].event_seq) {
            return Err(AifError::Ordering {
                got: w[1].event_seq,
                last: w[0].event_seq,
            });
        }
        let touched: BTreeSet<u64> = events.iter().map(|e| e.item_id).collect();
        let mut next = self.clone();
        next.table_epoch += 1;
        for id in touched {
            let entry = match store.item(id) {
                Some(rec) => build_entry(store, &rec.attribute_features, rec.version, model)?,
                None => {
                    let last = events.iter().rev().find(|e| e.item_id == id).expect("touched id has an event");
                    build_entry(store, &last.new_attribute_features, 1, model)?
                }
            };
            next.entries.insert(id, entry);
        }
        Ok(next)
    }

    /// Batch lookup; any absent id is reported as a miss.
    pub fn lookup(&self, item_ids: &[u64]) -> Result<N2OLookup> {
        let mut vectors = Vec::with_capacity(item_ids.len() * self.dim);
        let mut weights = Vec::with_capacity(item_ids.len() * self.bridges);
        let mut versions = Vec::with_capacity(item_ids.len());
        for &id in item_ids {
            let e = self.entries.get(&id).ok_or(AifError::Miss(id))?;
            vectors.extend_from_slice(&e.vector);
            weights.extend_from_slice(&e.bea_weights);
            versions.push(e.version);
        }
        Ok(N2OLookup {
            vectors: DenseMatrix::from_raw(item_ids.len(), self.dim, vectors),
            bea_weights: DenseMatrix::from_raw(item_ids.len(), self.bridges, weights),
            versions,
        })
    }

    /// Entry-wise bitwise equality, ignoring the epoch.
    pub fn same_entries(&self, other: &Self) -> bool {
        self.model_version == other.model_version
            && self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|((ka, a), (kb, b))| ka == kb && a.bit_eq(b))
    }

    /// Ids whose entries differ between two tables, including ids present in
    /// only one of them.
    pub fn diff_ids(&self, other: &Self) -> Vec<u64> {
        let keys: BTreeSet<u64> = self.entries.keys().chain(other.entries.keys()).copied().collect();
        keys.into_iter()
            .filter(|k| match (self.entries.get(k), other.entries.get(k)) {
                (Some(a), Some(b)) => !a.bit_eq(b),
                _ => true,
            })
            .collect()
    }

    /// Binary layout, little-endian:
    ///
    /// ```text
    /// "N2O1", u32 format version, u32 d, u32 n, u64 count,
    /// then per record sorted by id: u64 item_id, u64 version, d f32, n f32
    /// ```
    ///
    /// The epoch and model version are runtime state and are not stored.
    pub fn encode(&self) -> Vec<u8> {
        let mut w = ByteWriter::new();
        w.bytes(N2O_MAGIC)
            .u32(N2O_FORMAT_VERSION)
            .u32(self.dim as u32)
            .u32(self.bridges as u32)
            .u64(self.entries.len() as u64);
        for (&id, e) in &self.entries {
            w.u64(id).u64(e.version).f32s(&e.vector).f32s(&e.bea_weights);
        }
        w.finish()
    }

    pub fn decode(bytes: &[u8], table_epoch: u64, model_version: u64) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        r.magic(N2O_MAGIC)?;
        let version = r.u32()?;
        if version != N2O_FORMAT_VERSION {
            return Err(AifError::Format(format!("unsupported N2O format version {version}")));
        }
        let dim = r.u32()? as usize;
        let bridges = r.u32()? as usize;
        let count = r.u64()?;
        let mut table = Self::empty(dim, bridges, model_version);
        table.table_epoch = table_epoch;
        for _ in 0..count {
            let at = r.position();
            let id = r.u64()?;
            let version = r.u64()?;
            let vector = r.f32s(dim)?;
            let bea_weights = r.f32s(bridges)?;
            if !vector.iter().chain(&bea_weights).all(|x| x.is_finite()) {
                return Err(AifError::Decode {
                    offset: at,
                    reason: format!("non-finite value in entry {id}"),
                });
            }
            table.entries.insert(
                id,
                N2OEntry {
                    vector,
                    bea_weights,
                    version,
                },
            );
        }
        r.finish()?;
        Ok(table)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.encode())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>, table_epoch: u64, model_version: u64) -> Result<Self> {
        Self::decode(&std::fs::read(path)?, table_epoch, model_version)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct NearlineStats {
    pub full_rebuilds: u64,
    pub incremental_batches: u64,
    /// Item-side forward passes executed nearline.
    pub item_forwards: u64,
    pub publications: u64,
}

/// The published N2O table. Readers take a snapshot `Arc`; the single
/// writer swaps in a new table after building it off to the side.
pub struct N2OIndex {
    current: RwLock<Arc<N2OIndexTable>>,
    full_rebuilds: AtomicU64,
    incremental_batches: AtomicU64,
    item_forwards: AtomicU64,
    publications: AtomicU64,
}

impl N2OIndex {
    pub fn new(initial: N2OIndexTable) -> Self {
        Self {
            current: RwLock::new(Arc::new(initial)),
            full_rebuilds: AtomicU64::new(0),
            incremental_batches: AtomicU64::new(0),
            item_forwards: AtomicU64::new(0),
            publications: AtomicU64::new(0),
        }
    }

    /// Builds and publishes the first table for `store`.
    pub fn build(store: &FeatureStore, model: &ModelParams) -> Result<Self> {
        let index = Self::new(N2OIndexTable::empty(model.model_dim(), model.bridges.count(), model.version));
        index.rebuild_full(store, model)?;
        Ok(index)
    }

    pub fn snapshot(&self) -> Arc<N2OIndexTable> {
        Arc::clone(&self.current.read())
    }

    fn publish(&self, table: N2OIndexTable) -> Arc<N2OIndexTable> {
        let table = Arc::new(table);
        *self.current.write() = Arc::clone(&table);
        self.publications.fetch_add(1, Ordering::Relaxed);
        table
    }

    pub fn rebuild_full(&self, store: &FeatureStore, model: &ModelParams) -> Result<Arc<N2OIndexTable>> {
        let epoch = self.snapshot().table_epoch;
        let table = N2OIndexTable::rebuild_full(store, model, epoch)?;
        self.full_rebuilds.fetch_add(1, Ordering::Relaxed);
        self.item_forwards.fetch_add(table.len() as u64, Ordering::Relaxed);
        Ok(self.publish(table))
    }

    pub fn apply_incremental(
        &self,
        events: &[ItemUpdateEvent],
        store: &FeatureStore,
        model: &ModelParams,
    ) -> Result<Arc<N2OIndexTable>> {
        let current = self.snapshot();
        if events.is_empty() {
            return Ok(current);
        }
        let next = current.apply_incremental(events, store, model)?;
        let touched: BTreeSet<u64> = events.iter().map(|e| e.item_id).collect();
        self.incremental_batches.fetch_add(1, Ordering::Relaxed);
        self.item_forwards.fetch_add(touched.len() as u64, Ordering::Relaxed);
        Ok(self.publish(next))
    }

    pub fn stats(&self) -> NearlineStats {
        NearlineStats {
            full_rebuilds: self.full_rebuilds.load(Ordering::Relaxed),
            incremental_batches: self.incremental_batches.load(Ordering::Relaxed),
            item_forwards: self.item_forwards.load(Ordering::Relaxed),
            publications: self.publications.load(Ordering::Relaxed),
        }
    }

    /// Clears the forward counter without touching the table.
    pub fn reset_counters(&self) {
        self.item_forwards.store(0, Ordering::Relaxed);
        self.full_rebuilds.store(0, Ordering::Relaxed);
        self.incremental_batches.store(0, Ordering::Relaxed);
        self.publications.store(0, Ordering::Relaxed);
    }
}
