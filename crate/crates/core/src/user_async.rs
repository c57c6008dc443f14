//! Online asynchronous user-side inference.
//!
//! While retrieval runs, the user's profile and short behavior sequence are
//! projected, passed through self-attention and profile cross-attention, and
//! the BEA user phase produces `n` bridge vectors. The result is cached under
//! a per-request key and later shipped to the scoring call as base-64 text.

use std::collections::{BTreeSet, HashMap};
use std::hash::{Hash, Hasher};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use base64::engine::general_purpose::STANDARD;
use base64::Engine as _;
use parking_lot::Mutex;

use crate::bea::bea_user_phase;
use crate::clock::VirtualDuration;
use crate::codec::{ByteReader, ByteWriter};
use crate::error::{AifError, Result};
use crate::features::{materialize_user, FeatureTables, UserState};
use crate::math::{matmul, mean_pool_rows, mlp_forward, scaled_attention, DenseMatrix, Layer};
use crate::model::ModelParams;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes.iter().fold(FNV_OFFSET, |h, &b| (h ^ u64::from(b)).wrapping_mul(FNV_PRIME))
}

/// Consistent-hash key of one request's user computation. The digest is
/// 64-bit FNV-1a over the UTF-8 text `"{request_id}|{nickname}"`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CacheKey {
    pub request_id: u64,
    pub user_nickname: String,
    pub digest: u64,
}

impl CacheKey {
    pub fn new(request_id: u64, user_nickname: &str) -> Self {
        let digest = fnv1a64(format!("{request_id}|{user_nickname}").as_bytes());
        Self {
            request_id,
            user_nickname: user_nickname.to_owned(),
            digest,
        }
    }
}

impl Hash for CacheKey {
    fn hash<H: Hasher>(&self, state: &mut H) {
        state.write_u64(self.digest);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AsyncUserVector {
    pub key: CacheKey,
    pub u_self: DenseMatrix,
    pub u_profile_attn: DenseMatrix,
    /// BEA user vectors `V`, `n × d'`.
    pub bea_vectors: DenseMatrix,
    pub created_at: VirtualDuration,
    pub model_version: u64,
}

impl AsyncUserVector {
    /// `[u_self || u_profile_attn]`, the user part of the score-head input.
    pub fn combined(&self) -> DenseMatrix {
        DenseMatrix::concat_cols(&[&self.u_self, &self.u_profile_attn]).expect("both 1 x d")
    }

    /// Bitwise equality of every float (distinguishes `-0.0` from `0.0`).
    pub fn bit_eq(&self, other: &Self) -> bool {
        fn same(a: &DenseMatrix, b: &DenseMatrix) -> bool {
            a.shape() == b.shape()
                && a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits())
        }
        self.key == other.key
            && self.created_at == other.created_at
            && self.model_version == other.model_version
            && same(&self.u_self, &other.u_self)
            && same(&self.u_profile_attn, &other.u_profile_attn)
            && same(&self.bea_vectors, &other.bea_vectors)
    }
}

/// `Û_profile = U_profile·W_profileᵀ`, `Û_seq = U_seq·W_seqᵀ`.
pub fn project_user(
    u_profile: &DenseMatrix,
    u_seq: &DenseMatrix,
    w_profile: &DenseMatrix,
    w_seq: &DenseMatrix,
) -> Result<(DenseMatrix, DenseMatrix)> {
    Ok((matmul(u_profile, w_profile, true)?, matmul(u_seq, w_seq, true)?))
}

/// Self-attention output before the FFN, exposed for hull checks.
pub fn self_attention_pre_ffn(u_seq_hat: &DenseMatrix) -> Result<DenseMatrix> {
    if u_seq_hat.rows() == 0 {
        return Err(AifError::Precondition("self-attention needs l >= 1".into()));
    }
    let scale = (u_seq_hat.cols() as f32).sqrt();
    scaled_attention(u_seq_hat, u_seq_hat, u_seq_hat, scale)
}

/// `Pooling(FFN(softmax(Û_seq·Û_seqᵀ/√d)·Û_seq))` with mean pooling.
pub fn self_attention_user(u_seq_hat: &DenseMatrix, ffn: &[Layer]) -> Result<DenseMatrix> {
    let attended = self_attention_pre_ffn(u_seq_hat)?;
    mean_pool_rows(&mlp_forward(&attended, ffn)?)
}

/// `softmax(Û_profile·Û_seqᵀ/√d)·Û_seq`.
pub fn profile_cross_attention(u_profile_hat: &DenseMatrix, u_seq_hat: &DenseMatrix) -> Result<DenseMatrix> {
    if u_seq_hat.rows() == 0 {
        return Err(AifError::Precondition("cross-attention needs l >= 1".into()));
    }
    let scale = (u_seq_hat.cols() as f32).sqrt();
    scaled_attention(u_profile_hat, u_seq_hat, u_seq_hat, scale)
}

/// Runs the whole user-side network without touching any cache. Both
/// pipelines call this; the asynchronous one just caches the result.
pub fn compute_user_vector(
    user: &UserState,
    tables: &FeatureTables,
    model: &ModelParams,
    key: CacheKey,
    created_at: VirtualDuration,
) -> Result<AsyncUserVector> {
    let (u_profile, u_seq) = materialize_user(user, tables)?;
    let (p_hat, s_hat) = project_user(&u_profile, &u_seq, &model.w_profile, &model.w_seq)?;
    let u_self = self_attention_user(&s_hat, &model.user_ffn)?;
    let u_profile_attn = profile_cross_attention(&p_hat, &s_hat)?;
    let bea_vectors = bea_user_phase(&model.bridges, &s_hat, &model.bea_f)?;
    Ok(AsyncUserVector {
        key,
        u_self,
        u_profile_attn,
        bea_vectors,
        created_at,
        model_version: model.version,
    })
}

#[derive(Debug, Default)]
pub struct CacheCounters {
    pub hits: AtomicU64,
    pub misses: AtomicU64,
    pub evictions: AtomicU64,
    pub computes: AtomicU64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CacheStats {
    pub hits: u64,
    pub misses: u64,
    pub evictions: u64,
    pub computes: u64,
}

impl CacheCounters {
    pub fn snapshot(&self) -> CacheStats {
        CacheStats {
            hits: self.hits.load(Ordering::Relaxed),
            misses: self.misses.load(Ordering::Relaxed),
            evictions: self.evictions.load(Ordering::Relaxed),
            computes: self.computes.load(Ordering::Relaxed),
        }
    }
}

type Slot = Arc<Mutex<Option<Arc<AsyncUserVector>>>>;

struct CacheState {
    slots: HashMap<CacheKey, (Slot, (VirtualDuration, u64))>,
    order: BTreeSet<(VirtualDuration, u64, u64)>,
    next_seq: u64,
}

/// Bounded per-request cache of user vectors with single-flight computation.
///
/// The map lock is held only to find or create a key's slot; computation
/// happens under that key's slot lock, so concurrent callers for one key
/// run the network once and callers for other keys are not blocked. When
/// full, the entry with the oldest `created_at` is evicted.
pub struct UserVectorCache {
    capacity: usize,
    state: Mutex<CacheState>,
    counters: CacheCounters,
}

impl UserVectorCache {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity: capacity.max(1),
            state: Mutex::new(CacheState {
                slots: HashMap::new(),
                order: BTreeSet::new(),
                next_seq: 0,
            }),
            counters: CacheCounters::default(),
        }
    }

    pub fn len(&self) -> usize {
        self.state.lock().slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn stats(&self) -> CacheStats {
        self.counters.snapshot()
    }

    pub fn get(&self, key: &CacheKey) -> Option<Arc<AsyncUserVector>> {
        let slot = self.state.lock().slots.get(key).map(|(s, _)| Arc::clone(s))?;
        let v = slot.lock().clone();
        v
    }

    fn slot_for(&self, key: &CacheKey, created_at: VirtualDuration) -> Slot {
        let mut st = self.state.lock();
        if let Some((slot, _)) = st.slots.get(key) {
            return Arc::clone(slot);
        }
        while st.slots.len() >= self.capacity {
            let Some(oldest) = st.order.pop_first() else { break };
            let victim = st
                .slots
                .keys()
                .find(|k| st.slots[*k].1 == (oldest.0, oldest.1) && k.digest == oldest.2)
                .cloned();
            if let Some(v) = victim {
                st.slots.remove(&v);
                self.counters.evictions.fetch_add(1, Ordering::Relaxed);
            }
        }
        let seq = st.next_seq;
        st.next_seq += 1;
        let slot: Slot = Arc::new(Mutex::new(None));
        st.slots.insert(key.clone(), (Arc::clone(&slot), (created_at, seq)));
        st.order.insert((created_at, seq, key.digest));
        slot
    }

    /// Returns the cached vector for `(request_id, nickname)`, computing it at
    /// most once per key.
    pub fn compute_and_cache(
        &self,
        user: &UserState,
        request_id: u64,
        tables: &FeatureTables,
        model: &ModelParams,
        created_at: VirtualDuration,
    ) -> Result<Arc<AsyncUserVector>> {
        let key = CacheKey::new(request_id, &user.nickname);
        let slot = self.slot_for(&key, created_at);
        let mut guard = slot.lock();
        if let Some(v) = guard.as_ref() {
            self.counters.hits.fetch_add(1, Ordering::Relaxed);
            return Ok(Arc::clone(v));
        }
        self.counters.misses.fetch_add(1, Ordering::Relaxed);
        self.counters.computes.fetch_add(1, Ordering::Relaxed);
        let v = Arc::new(compute_user_vector(user, tables, model, key, created_at)?);
        *guard = Some(Arc::clone(&v));
        Ok(v)
    }
}

/// Encodes a user vector as standard padded base-64 over this byte layout
/// (little-endian):
///
/// ```text
/// u64 request_id, u32 len + UTF-8 nickname, u64 digest,
/// u64 created_at (ns), u64 model_version,
/// u32 d, u32 n, u32 d',
/// d f32 u_self, d f32 u_profile_attn, n*d' f32 bea_vectors (row-major)
/// ```
pub fn encode_transport(v: &AsyncUserVector) -> String {
    let mut w = ByteWriter::new();
    w.u64(v.key.request_id);
    w.u32(v.key.user_nickname.len() as u32)
        .bytes(v.key.user_nickname.as_bytes())
        .u64(v.key.digest)
        .u64(v.created_at.as_nanos())
        .u64(v.model_version)
        .u32(v.u_self.cols() as u32)
        .u32(v.bea_vectors.rows() as u32)
        .u32(v.bea_vectors.cols() as u32)
        .f32s(v.u_self.data())
        .f32s(v.u_profile_attn.data())
        .f32s(v.bea_vectors.data());
    STANDARD.encode(w.finish())
}

/// Inverse of [`encode_transport`]. Text errors report the offending character
/// offset; layout errors report the offset into the decoded bytes.
pub fn decode_transport(text: &str) -> Result<AsyncUserVector> {
    let bytes = STANDARD.decode(text.trim_end()).map_err(|e| {
        use base64::DecodeError::*;
        let offset = match e {
            InvalidByte(o, _) | InvalidLastSymbol(o, _) => o,
            InvalidLength(n) => n,
            InvalidPadding => text.len(),
        };
        AifError::Decode {
            offset,
            reason: e.to_string(),
        }
    })?;
    let mut r = ByteReader::new(&bytes);
    let request_id = r.u64()?;
    let name_len = r.u32()? as usize;
    let at = r.position();
    let nickname = std::str::from_utf8(r.take(name_len)?)
        .map_err(|e| AifError::Decode {
            offset: at,
            reason: e.to_string(),
        })?
        .to_owned();
    let at = r.position();
    let digest = r.u64()?;
    let key = CacheKey::new(request_id, &nickname);
    if key.digest != digest {
        return Err(AifError::Decode {
            offset: at,
            reason: format!("digest {digest:#x} does not match key ({:#x})", key.digest),
        });
    }
    let created_at = VirtualDuration::from_nanos(r.u64()?);
    let model_version = r.u64()?;
    let d = r.u32()? as usize;
    let n = r.u32()? as usize;
    let d_out = r.u32()? as usize;
    let at = r.position();
    let matrix = |rows, cols, data| {
        DenseMatrix::from_vec(rows, cols, data).map_err(|e| AifError::Decode {
            offset: at,
            reason: e.to_string(),
        })
    };
    let u_self = matrix(1, d, r.f32s(d)?)?;
    let u_profile_attn = matrix(1, d, r.f32s(d)?)?;
    let bea_vectors = matrix(n, d_out, r.f32s(n * d_out)?)?;
    r.finish()?;
    Ok(AsyncUserVector {
        key,
        u_self,
        u_profile_attn,
        bea_vectors,
        created_at,
        model_version,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::AifConfig;
    use crate::features::FeatureStore;
    use crate::math::testutil::{assert_close, random};
    use crate::math::Activation;
    use proptest::prelude::*;

    fn ffn(d: usize) -> Vec<Layer> {
        vec![
            Layer::new(random(d, d, 90), random(1, d, 91).into_data(), Activation::Relu).unwrap(),
            Layer::new(random(d, d, 92), random(1, d, 93).into_data(), Activation::Identity).unwrap(),
        ]
    }

    #[test]
    fn fnv_reference_values() {
        // published FNV-1a 64 test vectors
        assert_eq!(fnv1a64(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a64(b"a"), 0xaf63dc4c8601ec8c);
        assert_eq!(fnv1a64(b"foobar"), 0x85944171f73967e8);
        assert_eq!(CacheKey::new(42, "alice").digest, fnv1a64(b"42|alice"));
    }

    #[test]
    fn projection_examples() {
        let up = random(1, 4, 1);
        let us = random(3, 4, 2);
        let id = DenseMatrix::identity(4);
        let (p, s) = project_user(&up, &us, &id, &id).unwrap();
        assert_eq!((p, s), (up.clone(), us.clone()));
        let z = DenseMatrix::zeros(2, 4);
        let (p, s) = project_user(&up, &us, &z, &z).unwrap();
        assert!(p.data().iter().chain(s.data()).all(|&x| x == 0.0));

        let w = random(2, 4, 3);
        let (p, _) = project_user(&up, &us, &w, &w).unwrap();
        let expect: Vec<f64> = (0..2)
            .map(|j| (0..4).map(|k| f64::from(up.get(0, k)) * f64::from(w.get(j, k))).sum())
            .collect();
        assert_close(&p, &expect, 1e-6);
    }

    #[test]
    fn self_attention_examples() {
        let f = ffn(4);
        let r = random(1, 4, 4);
        let one = self_attention_user(&r, &f).unwrap();
        assert_eq!(one, mlp_forward(&r, &f).unwrap());

        let same = DenseMatrix::concat_rows(&[&r, &r, &r]).unwrap();
        let out = self_attention_user(&same, &f).unwrap();
        let expect: Vec<f64> = mlp_forward(&r, &f).unwrap().data().iter().map(|&x| f64::from(x)).collect();
        assert_close(&out, &expect, 1e-6);
    }

    #[test]
    fn self_attention_matches_composition_oracle() {
        let f = ffn(4);
        let s = random(3, 4, 5);
        let scale = 2.0f64;
        let mut attended = vec![0.0f64; 12];
        for i in 0..3 {
            let logits: Vec<f64> = (0..3)
                .map(|j| (0..4).map(|c| f64::from(s.get(i, c)) * f64::from(s.get(j, c))).sum::<f64>() / scale)
                .collect();
            let z: f64 = logits.iter().map(|l| l.exp()).sum();
            for c in 0..4 {
                attended[i * 4 + c] = (0..3).map(|j| logits[j].exp() / z * f64::from(s.get(j, c))).sum();
            }
        }
        let mut pooled = [0.0f64; 4];
        for i in 0..3 {
            let x = &attended[i * 4..i * 4 + 4];
            let h: Vec<f64> = (0..4)
                .map(|o| {
                    ((0..4).map(|k| x[k] * f64::from(f[0].weights.get(o, k))).sum::<f64>() + f64::from(f[0].bias[o]))
                        .max(0.0)
                })
                .collect();
            for o in 0..4 {
                pooled[o] += ((0..4).map(|k| h[k] * f64::from(f[1].weights.get(o, k))).sum::<f64>()
                    + f64::from(f[1].bias[o]))
                    / 3.0;
            }
        }
        assert_close(&self_attention_user(&s, &f).unwrap(), &pooled, 1e-6);
    }

    #[test]
    fn cross_attention_examples() {
        let s = random(1, 4, 6);
        assert_eq!(profile_cross_attention(&random(1, 4, 7), &s).unwrap(), s);

        let s = random(4, 4, 8);
        let out = profile_cross_attention(&DenseMatrix::zeros(1, 4), &s).unwrap();
        let mean: Vec<f64> = (0..4).map(|c| (0..4).map(|r| f64::from(s.get(r, c))).sum::<f64>() / 4.0).collect();
        assert_close(&out, &mean, 1e-6);

        let p = random(1, 4, 9);
        let logits: Vec<f64> = (0..4)
            .map(|j| (0..4).map(|c| f64::from(p.get(0, c)) * f64::from(s.get(j, c))).sum::<f64>() / 2.0)
            .collect();
        let z: f64 = logits.iter().map(|l| l.exp()).sum();
        let expect: Vec<f64> = (0..4)
            .map(|c| (0..4).map(|j| logits[j].exp() / z * f64::from(s.get(j, c))).sum())
            .collect();
        assert_close(&profile_cross_attention(&p, &s).unwrap(), &expect, 1e-6);
        assert!(profile_cross_attention(&random(1, 3, 1), &s).is_err());
    }

    fn fixture() -> (FeatureStore, ModelParams) {
        let cfg = AifConfig::small();
        (FeatureStore::generate(&cfg).unwrap(), ModelParams::init(&cfg, 1))
    }

    #[test]
    fn cache_is_idempotent_per_key() {
        let (store, model) = fixture();
        let cache = UserVectorCache::new(16);
        let user = store.user(1).unwrap();
        let t = VirtualDuration::ZERO;
        let a = cache.compute_and_cache(&user, 9, store.tables(), &model, t).unwrap();
        let b = cache.compute_and_cache(&user, 9, store.tables(), &model, t).unwrap();
        assert!(Arc::ptr_eq(&a, &b));
        assert_eq!(cache.stats(), CacheStats { hits: 1, misses: 1, evictions: 0, computes: 1 });

        let c = cache.compute_and_cache(&user, 10, store.tables(), &model, t).unwrap();
        assert_ne!(a.key, c.key);
        assert_eq!(cache.len(), 2);

        let direct = compute_user_vector(&user, store.tables(), &model, CacheKey::new(9, &user.nickname), t).unwrap();
        assert!(direct.bit_eq(&a));
    }

    #[test]
    fn evicts_oldest_created() {
        let (store, model) = fixture();
        let cache = UserVectorCache::new(2);
        let user = store.user(0).unwrap();
        for (rid, t) in [(1, 5.0), (2, 1.0), (3, 9.0)] {
            cache
                .compute_and_cache(&user, rid, store.tables(), &model, VirtualDuration::from_ms(t))
                .unwrap();
        }
        assert_eq!(cache.stats().evictions, 1);
        assert!(cache.get(&CacheKey::new(2, &user.nickname)).is_none());
        assert!(cache.get(&CacheKey::new(1, &user.nickname)).is_some());
    }

    #[test]
    fn concurrent_callers_compute_once() {
        let (store, model) = fixture();
        let cache = UserVectorCache::new(16);
        let user = store.user(3).unwrap();
        let results: Vec<Arc<AsyncUserVector>> = std::thread::scope(|s| {
            let handles: Vec<_> = (0..8)
                .map(|_| {
                    s.spawn(|| {
                        cache
                            .compute_and_cache(&user, 77, store.tables(), &model, VirtualDuration::ZERO)
                            .unwrap()
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().unwrap()).collect()
        });
        assert_eq!(cache.stats().computes, 1);
        assert!(results.iter().all(|r| Arc::ptr_eq(r, &results[0])));
    }

    #[test]
    fn attention_outputs_in_hull_of_projected_sequence() {
        let (store, model) = fixture();
        let user = store.user(2).unwrap();
        let (p, s) = materialize_user(&user, store.tables()).unwrap();
        let (p_hat, s_hat) = project_user(&p, &s, &model.w_profile, &model.w_seq).unwrap();
        for out in [self_attention_pre_ffn(&s_hat).unwrap(), profile_cross_attention(&p_hat, &s_hat).unwrap()] {
            for c in 0..s_hat.cols() {
                let lo = (0..s_hat.rows()).map(|r| s_hat.get(r, c)).fold(f32::INFINITY, f32::min);
                let hi = (0..s_hat.rows()).map(|r| s_hat.get(r, c)).fold(f32::NEG_INFINITY, f32::max);
                for r in 0..out.rows() {
                    assert!(out.get(r, c) >= lo - 1e-6 && out.get(r, c) <= hi + 1e-6);
                }
            }
        }
    }

    fn vector_with(bea: DenseMatrix, u_self: Vec<f32>) -> AsyncUserVector {
        AsyncUserVector {
            key: CacheKey::new(5, "bob"),
            u_self: DenseMatrix::from_vec(1, u_self.len(), u_self.clone()).unwrap(),
            u_profile_attn: DenseMatrix::from_vec(1, u_self.len(), u_self).unwrap(),
            bea_vectors: bea,
            created_at: VirtualDuration::from_nanos(123),
            model_version: 4,
        }
    }

    #[test]
    fn transport_edge_cases() {
        let v = vector_with(DenseMatrix::zeros(0, 3), vec![1.0, 2.0]);
        assert!(decode_transport(&encode_transport(&v)).unwrap().bit_eq(&v));

        let special = vec![-0.0, f32::from_bits(1), f32::MIN_POSITIVE / 2.0, -f32::from_bits(7)];
        let v = vector_with(DenseMatrix::from_vec(1, 4, special.clone()).unwrap(), special);
        let back = decode_transport(&encode_transport(&v)).unwrap();
        assert!(back.bit_eq(&v));
        assert_eq!(back.u_self.data()[0].to_bits(), (-0.0f32).to_bits());
    }

    #[test]
    fn transport_reports_malformed_offsets() {
        let v = vector_with(DenseMatrix::zeros(1, 2), vec![1.0, 2.0]);
        let mut text = encode_transport(&v);
        text.replace_range(6..7, "*");
        match decode_transport(&text) {
            Err(AifError::Decode { offset, .. }) => assert_eq!(offset, 6),
            other => panic!("expected decode error, got {other:?}"),
        }
        let short = STANDARD.encode(&STANDARD.decode(encode_transport(&v)).unwrap()[..20]);
        assert!(matches!(decode_transport(&short), Err(AifError::Decode { .. })));
    }

    proptest! {
        #[test]
        fn transport_round_trips_bits(bits in proptest::collection::vec(any::<u32>(), 12), rid in any::<u64>()) {
            let vals: Vec<f32> = bits.iter().map(|&b| {
                let f = f32::from_bits(b);
                if f.is_finite() { f } else { 0.5 }
            }).collect();
            let v = AsyncUserVector {
                key: CacheKey::new(rid, "user-00001"),
                u_self: DenseMatrix::from_vec(1, 2, vals[0..2].to_vec()).unwrap(),
                u_profile_attn: DenseMatrix::from_vec(1, 2, vals[2..4].to_vec()).unwrap(),
                bea_vectors: DenseMatrix::from_vec(4, 2, vals[4..12].to_vec()).unwrap(),
                created_at: VirtualDuration::from_nanos(rid / 3),
                model_version: rid % 17,
            };
            prop_assert!(decode_transport(&encode_transport(&v)).unwrap().bit_eq(&v));
        }
    }
}
