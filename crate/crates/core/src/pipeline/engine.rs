use std::collections::{BTreeMap, BTreeSet};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use parking_lot::{Mutex, RwLock};

use super::scoring::{build_category_behavior, build_category_behavior_inline, prerank_score, BehaviorInputs, ItemInputs};
use super::{bid_for, rank_candidates, retrieval_stub, LatencyBreakdown, Request, ScoredCandidate};
use crate::bea::bea_item_phase;
use crate::clock::VirtualDuration;
use crate::config::AifConfig;
use crate::error::{AifError, Result};
use crate::features::{FeatureStore, ItemUpdateEvent};
use crate::lsh::{lsh_hash, pack, HashPlane, PopcountLut, SignatureTable};
use crate::math::DenseMatrix;
use crate::model::ModelParams;
use crate::nearline::{build_entry, reduce_item, N2OIndex, NearlineStats};
use crate::precache::{parse_direct, PrecacheStats, SimHardStore, SubsequenceCache, SubsequenceLookup};
use crate::user_async::{compute_user_vector, AsyncUserVector, CacheKey, CacheStats, UserVectorCache};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PipelineKind {
    Sequential,
    Aif,
}

impl std::str::FromStr for PipelineKind {
    type Err = AifError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sequential" => Ok(Self::Sequential),
            "aif" => Ok(Self::Aif),
            other => Err(AifError::Precondition(format!("unknown pipeline {other:?}"))),
        }
    }
}

impl std::fmt::Display for PipelineKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Sequential => "sequential",
            Self::Aif => "aif",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineOutput {
    pub request_id: u64,
    pub kind: PipelineKind,
    /// Scores in candidate (retrieval) order.
    pub scored: Vec<ScoredCandidate>,
    pub latency: LatencyBreakdown,
    pub n2o_misses: usize,
    /// Item vectors older than the store for at least one candidate.
    pub stale_items: usize,
}

impl PipelineOutput {
    pub fn ranked(&self) -> Vec<ScoredCandidate> {
        let mut v = self.scored.clone();
        rank_candidates(&mut v);
        v
    }
}

#[derive(Debug, Default)]
struct Counters {
    seq_requests: AtomicU64,
    aif_requests: AtomicU64,
    seq_user_forwards: AtomicU64,
    seq_item_forwards: AtomicU64,
    aif_fallback_item_forwards: AtomicU64,
    n2o_misses: AtomicU64,
    updates_ingested: AtomicU64,
    updates_drained: AtomicU64,
}

/// Point-in-time copy of every engine counter.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CounterSnapshot {
    pub seq_requests: u64,
    pub aif_requests: u64,
    /// User-side forward passes run by the sequential pipeline.
    pub seq_user_forwards: u64,
    /// User-side forward passes run by the asynchronous pipeline.
    pub aif_user_forwards: u64,
    pub seq_item_forwards: u64,
    /// Nearline item forwards plus synchronous fallbacks.
    pub aif_item_forwards: u64,
    pub n2o_misses: u64,
    pub updates_ingested: u64,
    pub updates_drained: u64,
    pub user_cache: CacheStats,
    pub sim_cache: PrecacheStats,
    pub nearline: NearlineStats,
}

impl CounterSnapshot {
    /// `(name, value)` pairs in report order.
    pub fn pairs(&self) -> Vec<(&'static str, u64)> {
        vec![
            ("seq_requests", self.seq_requests),
            ("aif_requests", self.aif_requests),
            ("seq_user_forwards", self.seq_user_forwards),
            ("aif_user_forwards", self.aif_user_forwards),
            ("seq_item_forwards", self.seq_item_forwards),
            ("aif_item_forwards", self.aif_item_forwards),
            ("n2o_misses", self.n2o_misses),
            ("updates_ingested", self.updates_ingested),
            ("updates_drained", self.updates_drained),
            ("user_cache_hits", self.user_cache.hits),
            ("user_cache_misses", self.user_cache.misses),
            ("user_cache_evictions", self.user_cache.evictions),
            ("user_cache_recomputes", self.user_cache.computes),
            ("sim_cache_hits", self.sim_cache.hits),
            ("sim_cache_misses", self.sim_cache.misses),
            ("sim_cache_evictions", self.sim_cache.evictions),
            ("nearline_full_rebuilds", self.nearline.full_rebuilds),
            ("nearline_incremental_batches", self.nearline.incremental_batches),
        ]
    }
}

/// Everything the asynchronous pipeline prepares next to retrieval.
struct UserPhase {
    vector: Arc<AsyncUserVector>,
    behavior: BehaviorInputs,
    prefetch_parse: VirtualDuration,
}

/// The Merger: owns the feature store, the published model and indexes, and
/// the caches, and runs either pipeline over a request.
pub struct Engine {
    cfg: AifConfig,
    store: Arc<FeatureStore>,
    model: RwLock<Arc<ModelParams>>,
    plane: HashPlane,
    lut: PopcountLut,
    signatures: RwLock<Arc<SignatureTable>>,
    sim: SimHardStore,
    n2o: N2OIndex,
    user_cache: RwLock<Arc<UserVectorCache>>,
    sim_cache: RwLock<Option<Arc<SubsequenceCache>>>,
    pending: Mutex<Vec<ItemUpdateEvent>>,
    counters: Counters,
}

impl Engine {
    /// Generates the synthetic universe for `cfg` and builds every index.
    pub fn new(cfg: &AifConfig) -> Result<Self> {
        Self::with_store(cfg, FeatureStore::generate(cfg)?)
    }

    pub fn with_store(cfg: &AifConfig, store: FeatureStore) -> Result<Self> {
        cfg.validate()?;
        let model = ModelParams::init(cfg, 1);
        let plane = HashPlane::new(cfg.lsh_bits, cfg.mm_dim, cfg.hash_seed)?;
        let signatures = SignatureTable::build(&store, &plane)?;
        let sim = SimHardStore::build(store.users().map(|u| u.as_ref()));
        let n2o = N2OIndex::build(&store, &model)?;
        n2o.reset_counters();
        let sim_cache = cfg.sim_precache.then(|| Arc::new(SubsequenceCache::new(cfg.sim_cache_capacity)));
        Ok(Self {
            cfg: cfg.clone(),
            store: Arc::new(store),
            model: RwLock::new(Arc::new(model)),
            plane,
            lut: PopcountLut::new(),
            signatures: RwLock::new(Arc::new(signatures)),
            sim,
            n2o,
            user_cache: RwLock::new(Arc::new(UserVectorCache::new(cfg.user_cache_capacity))),
            sim_cache: RwLock::new(sim_cache),
            pending: Mutex::new(Vec::new()),
            counters: Counters::default(),
        })
    }

    pub fn config(&self) -> &AifConfig {
        &self.cfg
    }

    pub fn store(&self) -> &FeatureStore {
        &self.store
    }

    pub fn model(&self) -> Arc<ModelParams> {
        Arc::clone(&self.model.read())
    }

    pub fn n2o(&self) -> &N2OIndex {
        &self.n2o
    }

    pub fn signatures(&self) -> Arc<SignatureTable> {
        Arc::clone(&self.signatures.read())
    }

    pub fn plane(&self) -> &HashPlane {
        &self.plane
    }

    pub fn sim_store(&self) -> &SimHardStore {
        &self.sim
    }

    pub fn user_cache(&self) -> Arc<UserVectorCache> {
        Arc::clone(&self.user_cache.read())
    }

    pub fn sim_cache(&self) -> Option<Arc<SubsequenceCache>> {
        self.sim_cache.read().clone()
    }

    /// Turns subsequence pre-caching on (with an empty cache) or off.
    pub fn set_sim_precache(&self, enabled: bool) {
        *self.sim_cache.write() = enabled.then(|| Arc::new(SubsequenceCache::new(self.cfg.sim_cache_capacity)));
    }

    /// Candidate ids for `request`.
    pub fn retrieve(&self, request: &Request) -> Vec<u64> {
        retrieval_stub(&self.store.item_ids(), request.candidate_seed, self.cfg.candidates)
    }

    /// Applies an item update to the store and queues it for the nearline
    /// indexes. Until [`Engine::drain_nearline`] runs, the N2O table and the
    /// signature table lag the store for that item.
    pub fn ingest_update(&self, event: &ItemUpdateEvent) -> Result<()> {
        self.store.apply_item_update(event)?;
        self.pending.lock().push(event.clone());
        self.counters.updates_ingested.fetch_add(1, Ordering::Relaxed);
        Ok(())
    }

    pub fn pending_updates(&self) -> usize {
        self.pending.lock().len()
    }

    /// Brings the N2O and signature tables up to date with the store.
    /// Returns the number of events processed.
    pub fn drain_nearline(&self) -> Result<usize> {
        let events = std::mem::take(&mut *self.pending.lock());
        if events.is_empty() {
            return Ok(0);
        }
        let model = self.model();
        self.n2o.apply_incremental(&events, &self.store, &model)?;
        self.refresh_signatures(&events)?;
        self.counters.updates_drained.fetch_add(events.len() as u64, Ordering::Relaxed);
        Ok(events.len())
    }

    fn refresh_signatures(&self, events: &[ItemUpdateEvent]) -> Result<()> {
        let mut table = (*self.signatures()).clone();
        for e in events {
            if !table.signature_update(e, &self.plane)? && !table.contains(e.item_id) {
                // a new item that arrived without an embedding
                if let Some(rec) = self.store.item(e.item_id) {
                    table.insert(e.item_id, &rec.mm_embedding, &self.plane)?;
                }
            }
        }
        *self.signatures.write() = Arc::new(table);
        Ok(())
    }

    /// Publishes model `version`: full N2O rebuild, pending updates folded
    /// in, and the user-vector cache reset.
    pub fn swap_model(&self, version: u64) -> Result<()> {
        let model = Arc::new(ModelParams::init(&self.cfg, version));
        let events = std::mem::take(&mut *self.pending.lock());
        self.refresh_signatures(&events)?;
        self.n2o.rebuild_full(&self.store, &model)?;
        *self.model.write() = model;
        *self.user_cache.write() = Arc::new(UserVectorCache::new(self.cfg.user_cache_capacity));
        Ok(())
    }

    pub fn counters(&self) -> CounterSnapshot {
        let c = &self.counters;
        let user_cache = self.user_cache().stats();
        let nearline = self.n2o.stats();
        let fallback = c.aif_fallback_item_forwards.load(Ordering::Relaxed);
        CounterSnapshot {
            seq_requests: c.seq_requests.load(Ordering::Relaxed),
            aif_requests: c.aif_requests.load(Ordering::Relaxed),
            seq_user_forwards: c.seq_user_forwards.load(Ordering::Relaxed),
            aif_user_forwards: user_cache.computes,
            seq_item_forwards: c.seq_item_forwards.load(Ordering::Relaxed),
            aif_item_forwards: nearline.item_forwards + fallback,
            n2o_misses: c.n2o_misses.load(Ordering::Relaxed),
            updates_ingested: c.updates_ingested.load(Ordering::Relaxed),
            updates_drained: c.updates_drained.load(Ordering::Relaxed),
            user_cache,
            sim_cache: self.sim_cache().map(|s| s.stats()).unwrap_or_default(),
            nearline,
        }
    }

    /// Zeroes all counters and empties both caches.
    pub fn reset_counters(&self) {
        let c = &self.counters;
        for a in [
            &c.seq_requests,
            &c.aif_requests,
            &c.seq_user_forwards,
            &c.seq_item_forwards,
            &c.aif_fallback_item_forwards,
            &c.n2o_misses,
            &c.updates_ingested,
            &c.updates_drained,
        ] {
            a.store(0, Ordering::Relaxed);
        }
        self.n2o.reset_counters();
        *self.user_cache.write() = Arc::new(UserVectorCache::new(self.cfg.user_cache_capacity));
        let enabled = self.sim_cache().is_some();
        self.set_sim_precache(enabled);
    }

    fn user(&self, user_id: u64) -> Result<Arc<crate::features::UserState>> {
        self.store
            .user(user_id)
            .ok_or_else(|| AifError::Precondition(format!("unknown user {user_id}")))
    }

    fn finish(ids: &[u64], scores: Vec<f32>) -> Vec<ScoredCandidate> {
        ids.iter()
            .zip(scores)
            .map(|(&item_id, score)| ScoredCandidate {
                item_id,
                score,
                bid: bid_for(item_id),
            })
            .collect()
    }

    /// Item inputs computed inline from the store, as the baseline does.
    fn inline_items(&self, ids: &[u64], model: &ModelParams) -> Result<ItemInputs> {
        let recs = ids
            .iter()
            .map(|&id| self.store.item(id).ok_or(AifError::Miss(id)))
            .collect::<Result<Vec<_>>>()?;
        let tables = self.store.tables();
        let raw = stack(recs.iter().map(|r| tables.item_embedding(&r.attribute_features)), self.cfg.item_dim())?;
        let reduced = reduce_item(&raw, &model.item_mlp)?;
        let bea_weights = bea_item_phase(&model.bridges, &reduced)?;
        let signatures = recs
            .iter()
            .map(|r| pack(&lsh_hash(&r.mm_embedding, &self.plane)?))
            .collect::<Result<Vec<_>>>()?;
        Ok(ItemInputs {
            item_ids: ids.to_vec(),
            categories: recs.iter().map(|r| r.category_id).collect(),
            raw,
            reduced,
            bea_weights,
            signatures,
            model_version: model.version,
        })
    }

    /// The sequential baseline: retrieval, then for every mini-batch a full
    /// user fetch and forward, item fetch and forward, subsequence parsing
    /// for the categories in the batch, and the score head.
    pub fn run_sequential(&self, request: &Request) -> Result<PipelineOutput> {
        let costs = &self.cfg.costs;
        let model = self.model();
        let user = self.user(request.user_id)?;
        let ids = self.retrieve(request);
        let mut lat = LatencyBreakdown {
            retrieval: costs.retrieval(),
            user_path: costs.user_feature_fetch() + costs.user_forward(),
            ..Default::default()
        };
        let created = VirtualDuration::from_ms(request.arrival_ms);
        let mut scores = Vec::with_capacity(ids.len());
        for batch in ids.chunks(costs.mini_batch_size) {
            lat.mini_batches += 1;
            let key = CacheKey::new(request.request_id, &user.nickname);
            let uv = compute_user_vector(&user, self.store.tables(), &model, key, created)?;
            self.counters.seq_user_forwards.fetch_add(1, Ordering::Relaxed);
            lat.user_feature_fetch += costs.user_feature_fetch();
            lat.user_forward += costs.user_forward();

            let items = self.inline_items(batch, &model)?;
            self.counters.seq_item_forwards.fetch_add(batch.len() as u64, Ordering::Relaxed);
            lat.item_feature_fetch += costs.item_feature_fetch();
            lat.item_forward += costs.item_forward();

            let mut behavior = BehaviorInputs::new();
            for &c in items.categories.iter().collect::<BTreeSet<_>>() {
                let parsed = parse_direct(&self.sim, user.user_id, c, costs);
                lat.parse += parsed.parse_cost;
                if !parsed.events.is_empty() {
                    behavior.insert(
                        c,
                        build_category_behavior_inline(&parsed.events, self.store.tables(), &model, &self.store, &self.plane)?,
                    );
                }
            }
            scores.extend(prerank_score(&model, &uv, &items, &behavior, &self.lut, self.cfg.tiers)?);
            lat.prerank_forward += costs.prerank_forward();
        }
        lat.total = lat.retrieval
            + lat.user_feature_fetch
            + lat.user_forward
            + lat.item_feature_fetch
            + lat.item_forward
            + lat.parse
            + lat.prerank_forward;
        self.counters.seq_requests.fetch_add(1, Ordering::Relaxed);
        Ok(PipelineOutput {
            request_id: request.request_id,
            kind: PipelineKind::Sequential,
            scored: Self::finish(&ids, scores),
            latency: lat,
            n2o_misses: 0,
            stale_items: 0,
        })
    }

    /// User-side work that overlaps retrieval: the cached user vector and,
    /// with pre-caching on, every subsequence of the user parsed and
    /// projected.
    fn user_phase(&self, request: &Request, model: &ModelParams, signatures: &SignatureTable) -> Result<UserPhase> {
        let user = self.user(request.user_id)?;
        let created = VirtualDuration::from_ms(request.arrival_ms);
        let vector = self
            .user_cache()
            .compute_and_cache(&user, request.request_id, self.store.tables(), model, created)?;
        let mut behavior = BehaviorInputs::new();
        let mut prefetch_parse = VirtualDuration::ZERO;
        if let Some(cache) = self.sim_cache() {
            prefetch_parse = cache.prefetch_user(&self.sim, user.user_id, &self.cfg.costs).parse_cost;
            for c in self.sim.categories(user.user_id) {
                let events = self.sim.get(user.user_id, c).expect("listed category");
                behavior.insert(c, build_category_behavior(events, self.store.tables(), model, signatures)?);
            }
        }
        Ok(UserPhase {
            vector,
            behavior,
            prefetch_parse,
        })
    }

    /// Item inputs from the published N2O table, with synchronous fallback
    /// for ids the table lacks. Returns the inputs, the miss count and the
    /// number of rows older than the store.
    fn indexed_items(&self, ids: &[u64], model: &ModelParams, signatures: &SignatureTable) -> Result<(ItemInputs, usize, usize)> {
        let table = self.n2o.snapshot();
        if table.model_version != model.version {
            return Err(AifError::Consistency(format!(
                "N2O table v{} does not match model v{}",
                table.model_version, model.version
            )));
        }
        let tables = self.store.tables();
        let (d, n) = (model.model_dim(), model.bridges.count());
        let mut reduced = Vec::with_capacity(ids.len() * d);
        let mut weights = Vec::with_capacity(ids.len() * n);
        let mut categories = Vec::with_capacity(ids.len());
        let mut sigs = Vec::with_capacity(ids.len());
        let mut raw_rows = Vec::with_capacity(ids.len());
        let (mut misses, mut stale) = (0, 0);
        for &id in ids {
            let rec = self.store.item(id).ok_or(AifError::Miss(id))?;
            match table.get(id) {
                Some(e) => {
                    if e.version != rec.version {
                        stale += 1;
                    }
                    reduced.extend_from_slice(&e.vector);
                    weights.extend_from_slice(&e.bea_weights);
                }
                None => {
                    misses += 1;
                    let e = build_entry(&self.store, &rec.attribute_features, rec.version, model)?;
                    reduced.extend_from_slice(&e.vector);
                    weights.extend_from_slice(&e.bea_weights);
                }
            }
            let sig = match signatures.get(id) {
                Some(s) => s.clone(),
                None => pack(&lsh_hash(&rec.mm_embedding, &self.plane)?)?,
            };
            sigs.push(sig);
            categories.push(rec.category_id);
            raw_rows.push(tables.item_embedding(&rec.attribute_features));
        }
        let items = ItemInputs {
            item_ids: ids.to_vec(),
            categories,
            raw: stack(raw_rows.into_iter(), self.cfg.item_dim())?,
            reduced: DenseMatrix::from_vec(ids.len(), d, reduced)?,
            bea_weights: DenseMatrix::from_vec(ids.len(), n, weights)?,
            signatures: sigs,
            model_version: model.version,
        };
        Ok((items, misses, stale))
    }

    /// One mini-batch of the asynchronous pipeline. Returns scores and the
    /// batch's critical-path costs `(item_forward, parse)` plus miss and
    /// staleness counts.
    fn aif_batch(
        &self,
        request: &Request,
        batch: &[u64],
        phase: &UserPhase,
        model: &ModelParams,
        signatures: &SignatureTable,
    ) -> Result<(Vec<f32>, VirtualDuration, VirtualDuration, usize, usize)> {
        let costs = &self.cfg.costs;
        let (items, misses, stale) = self.indexed_items(batch, model, signatures)?;
        let cache = self.sim_cache();
        let mut parse = VirtualDuration::ZERO;
        let mut extra = BehaviorInputs::new();
        for &c in items.categories.iter().collect::<BTreeSet<_>>() {
            let looked: SubsequenceLookup = match &cache {
                Some(cache) => cache.lookup(&self.sim, request.user_id, c, costs),
                None => parse_direct(&self.sim, request.user_id, c, costs),
            };
            parse += looked.parse_cost;
            if !looked.events.is_empty() && !phase.behavior.contains_key(&c) {
                extra.insert(c, build_category_behavior(&looked.events, self.store.tables(), model, signatures)?);
            }
        }
        let behavior: BehaviorInputs = if extra.is_empty() {
            phase.behavior.clone()
        } else {
            let mut all = phase.behavior.clone();
            all.extend(extra);
            all
        };
        let scores = prerank_score(model, &phase.vector, &items, &behavior, &self.lut, self.cfg.tiers)?;
        let item_forward = if misses > 0 { costs.item_forward() } else { VirtualDuration::ZERO };
        Ok((scores, item_forward, parse, misses, stale))
    }

    /// The asynchronous pipeline, single-threaded.
    pub fn run_aif(&self, request: &Request) -> Result<PipelineOutput> {
        self.aif(request, false)
    }

    /// The asynchronous pipeline with real concurrency: retrieval and the user
    /// phase run on separate threads, and mini-batches are scored in
    /// parallel. Scores and virtual latency equal [`Engine::run_aif`].
    pub fn run_aif_concurrent(&self, request: &Request) -> Result<PipelineOutput> {
        self.aif(request, true)
    }

    fn aif(&self, request: &Request, concurrent: bool) -> Result<PipelineOutput> {
        let costs = &self.cfg.costs;
        let model = self.model();
        let signatures = self.signatures();
        let (ids, phase) = if concurrent {
            std::thread::scope(|s| {
                let retrieval = s.spawn(|| self.retrieve(request));
                let phase = self.user_phase(request, &model, &signatures);
                (retrieval.join().expect("retrieval task"), phase)
            })
        } else {
            (self.retrieve(request), self.user_phase(request, &model, &signatures))
        };
        let phase = phase?;
        let batches: Vec<&[u64]> = ids.chunks(costs.mini_batch_size).collect();
        let results = if concurrent {
            std::thread::scope(|s| {
                let handles: Vec<_> = batches
                    .iter()
                    .map(|b| s.spawn(|| self.aif_batch(request, b, &phase, &model, &signatures)))
                    .collect();
                handles.into_iter().map(|h| h.join().expect("batch task")).collect::<Vec<_>>()
            })
        } else {
            batches
                .iter()
                .map(|b| self.aif_batch(request, b, &phase, &model, &signatures))
                .collect()
        };

        let mut lat = LatencyBreakdown {
            retrieval: costs.retrieval(),
            user_feature_fetch: costs.user_feature_fetch(),
            user_forward: costs.user_forward(),
            prefetch_parse: phase.prefetch_parse,
            ..Default::default()
        };
        lat.user_path = lat.user_feature_fetch + lat.user_forward + lat.prefetch_parse;
        let mut scores = Vec::with_capacity(ids.len());
        let (mut misses, mut stale) = (0, 0);
        for r in results {
            let (s, item_forward, parse, m, st) = r?;
            scores.extend(s);
            lat.mini_batches += 1;
            lat.item_feature_fetch += costs.item_feature_fetch();
            lat.item_forward += item_forward;
            lat.parse += parse;
            lat.prerank_forward += costs.prerank_forward();
            misses += m;
            stale += st;
        }
        lat.total = lat.retrieval.max(lat.user_path) + lat.item_feature_fetch + lat.item_forward + lat.parse + lat.prerank_forward;
        self.counters.aif_requests.fetch_add(1, Ordering::Relaxed);
        self.counters.n2o_misses.fetch_add(misses as u64, Ordering::Relaxed);
        self.counters.aif_fallback_item_forwards.fetch_add(misses as u64, Ordering::Relaxed);
        Ok(PipelineOutput {
            request_id: request.request_id,
            kind: PipelineKind::Aif,
            scored: Self::finish(&ids, scores),
            latency: lat,
            n2o_misses: misses,
            stale_items: stale,
        })
    }

    pub fn run(&self, kind: PipelineKind, request: &Request) -> Result<PipelineOutput> {
        match kind {
            PipelineKind::Sequential => self.run_sequential(request),
            PipelineKind::Aif => self.run_aif(request),
        }
    }

    /// Lengths of the user's subsequences, by category.
    pub fn subsequence_lengths(&self, user_id: u64) -> BTreeMap<u64, usize> {
        self.sim
            .categories(user_id)
            .into_iter()
            .map(|c| (c, self.sim.get(user_id, c).map_or(0, |s| s.len())))
            .collect()
    }
}

fn stack(rows: impl Iterator<Item = DenseMatrix>, cols: usize) -> Result<DenseMatrix> {
    let mut data = Vec::new();
    let mut n = 0;
    for r in rows {
        data.extend_from_slice(r.data());
        n += 1;
    }
    DenseMatrix::from_vec(n, cols, data)
}
