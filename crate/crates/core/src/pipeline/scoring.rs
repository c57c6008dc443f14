//! The pre-ranking score head and its inputs.

use std::collections::BTreeMap;

use crate::bea::bea_serve;
use crate::error::{AifError, Result};
use crate::features::{BehaviorEvent, FeatureStore, FeatureTables};
use crate::lsh::{lsh_hash, pack, similarity_matrix, simtier, HashPlane, PackedSignature, PopcountLut, SignatureTable};
use crate::math::{matmul, mlp_forward, DenseMatrix};
use crate::model::ModelParams;
use crate::user_async::AsyncUserVector;

/// Item-side inputs for one mini-batch, rows in candidate order.
#[derive(Debug, Clone, PartialEq)]
pub struct ItemInputs {
    pub item_ids: Vec<u64>,
    pub categories: Vec<u64>,
    /// Raw attribute embeddings, `b × d_item`.
    pub raw: DenseMatrix,
    /// Reduced item vectors, `b × d`.
    pub reduced: DenseMatrix,
    /// BEA bridge weights, `b × n`.
    pub bea_weights: DenseMatrix,
    pub signatures: Vec<PackedSignature>,
    /// Model version the reduced vectors and weights were computed with.
    pub model_version: u64,
}

/// One category's long-term subsequence, ready for scoring.
#[derive(Debug, Clone, PartialEq)]
pub struct CategoryBehavior {
    /// `U_sub · W_seqᵀ`, `L_c × d`.
    pub projected: DenseMatrix,
    pub signatures: Vec<PackedSignature>,
}

impl CategoryBehavior {
    pub fn len(&self) -> usize {
        self.signatures.len()
    }

    pub fn is_empty(&self) -> bool {
        self.signatures.is_empty()
    }
}

/// Category → behavior. Categories without an entry have an empty history.
pub type BehaviorInputs = BTreeMap<u64, CategoryBehavior>;

/// Projects a subsequence and gathers its item signatures from `signatures`.
pub fn build_category_behavior(
    events: &[BehaviorEvent],
    tables: &FeatureTables,
    model: &ModelParams,
    signatures: &SignatureTable,
) -> Result<CategoryBehavior> {
    behavior_with(events, tables, model, |id| signatures.get(id).cloned().ok_or(AifError::Miss(id)))
}

/// Like [`build_category_behavior`], hashing each item's current
/// multi-modal embedding from the store instead of reading a table.
pub fn build_category_behavior_inline(
    events: &[BehaviorEvent],
    tables: &FeatureTables,
    model: &ModelParams,
    store: &FeatureStore,
    plane: &HashPlane,
) -> Result<CategoryBehavior> {
    behavior_with(events, tables, model, |id| {
        let rec = store.item(id).ok_or(AifError::Miss(id))?;
        pack(&lsh_hash(&rec.mm_embedding, plane)?)
    })
}

fn behavior_with(
    events: &[BehaviorEvent],
    tables: &FeatureTables,
    model: &ModelParams,
    signature: impl Fn(u64) -> Result<PackedSignature>,
) -> Result<CategoryBehavior> {
    let rows = tables.behavior_rows(events);
    let projected = matmul(&rows, &model.w_seq, true)?;
    let signatures = events.iter().map(|e| signature(e.item_id)).collect::<Result<Vec<_>>>()?;
    Ok(CategoryBehavior { projected, signatures })
}

pub fn sigmoid(x: f32) -> f32 {
    (1.0 / (1.0 + (-f64::from(x)).exp())) as f32
}

fn scaled(x: f32, len: usize) -> f32 {
    (f64::from(x) / len as f64) as f32
}

/// Scores one mini-batch. Head input per candidate, in column order:
///
/// ```text
/// [ u_self | u_profile_attn | reduced item | BEA v̂ |
///   LSH-DIN / L_c | SimTier counts / L_c | raw item embedding ]
/// ```
///
/// where `L_c` is the length of the candidate category's subsequence (both
/// blocks are zero when it is empty). Every output row depends only on its
/// own candidate, so batching does not change any score.
pub fn prerank_score(
    model: &ModelParams,
    user: &AsyncUserVector,
    items: &ItemInputs,
    behavior: &BehaviorInputs,
    lut: &PopcountLut,
    tiers: usize,
) -> Result<Vec<f32>> {
    if user.model_version != model.version || items.model_version != model.version {
        return Err(AifError::Consistency(format!(
            "user vector v{}, item inputs v{}, scoring model v{}",
            user.model_version, items.model_version, model.version
        )));
    }
    let b = items.item_ids.len();
    if items.categories.len() != b
        || items.signatures.len() != b
        || items.raw.rows() != b
        || items.reduced.rows() != b
        || items.bea_weights.rows() != b
    {
        return Err(AifError::shape("prerank_score", "item inputs disagree on batch size"));
    }
    let d = model.model_dim();
    let v_hat = bea_serve(&items.bea_weights, &user.bea_vectors)?;

    let mut din = DenseMatrix::zeros(b, d);
    let mut tier_frac = DenseMatrix::zeros(b, tiers);
    let mut groups: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
    for (i, &c) in items.categories.iter().enumerate() {
        groups.entry(c).or_default().push(i);
    }
    for (c, rows) in &groups {
        let Some(hist) = behavior.get(c).filter(|h| !h.is_empty()) else {
            continue;
        };
        let sigs: Vec<PackedSignature> = rows.iter().map(|&i| items.signatures[i].clone()).collect();
        let m_sim = similarity_matrix(&sigs, &hist.signatures, lut)?;
        let weighted = matmul(&m_sim, &hist.projected, false)?;
        for (k, &i) in rows.iter().enumerate() {
            for j in 0..d {
                din.set(i, j, scaled(weighted.get(k, j), hist.len()));
            }
            for (t, &n) in simtier(m_sim.row(k), tiers)?.iter().enumerate() {
                tier_frac.set(i, t, scaled(n as f32, hist.len()));
            }
        }
    }

    let user_part = DenseMatrix::concat_cols(&[&user.u_self, &user.u_profile_attn])?;
    let user_rows = DenseMatrix::from_rows(user_part.cols(), std::iter::repeat_n(user_part.row(0), b))?;
    let input = DenseMatrix::concat_cols(&[&user_rows, &items.reduced, &v_hat, &din, &tier_frac, &items.raw])?;
    let logits = mlp_forward(&input, &model.head)?;
    Ok(logits.data().iter().map(|&x| sigmoid(x)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::VirtualDuration;
    use crate::config::AifConfig;
    use crate::math::{Activation, Layer};
    use crate::nearline::N2OIndexTable;
    use crate::precache::SimHardStore;
    use crate::user_async::{compute_user_vector, CacheKey};

    struct Fixture {
        store: FeatureStore,
        model: ModelParams,
        sigs: SignatureTable,
        sim: SimHardStore,
        cfg: AifConfig,
    }

    fn fixture() -> Fixture {
        let cfg = AifConfig::small();
        let store = FeatureStore::generate(&cfg).unwrap();
        let model = ModelParams::init(&cfg, 1);
        let plane = HashPlane::new(cfg.lsh_bits, cfg.mm_dim, cfg.hash_seed).unwrap();
        let sigs = SignatureTable::build(&store, &plane).unwrap();
        let sim = SimHardStore::build(store.users().map(|u| u.as_ref()));
        Fixture { store, model, sigs, sim, cfg }
    }

    fn inputs(f: &Fixture, ids: &[u64]) -> (AsyncUserVector, ItemInputs, BehaviorInputs) {
        let user = f.store.user(0).unwrap();
        let uv = compute_user_vector(&user, f.store.tables(), &f.model, CacheKey::new(1, &user.nickname), VirtualDuration::ZERO).unwrap();
        let table = N2OIndexTable::rebuild_full(&f.store, &f.model, 0).unwrap();
        let l = table.lookup(ids).unwrap();
        let recs: Vec<_> = ids.iter().map(|&id| f.store.item(id).unwrap()).collect();
        let raw_rows: Vec<DenseMatrix> = recs.iter().map(|r| f.store.tables().item_embedding(&r.attribute_features)).collect();
        let raw = DenseMatrix::concat_rows(&raw_rows.iter().collect::<Vec<_>>()).unwrap();
        let items = ItemInputs {
            item_ids: ids.to_vec(),
            categories: recs.iter().map(|r| r.category_id).collect(),
            raw,
            reduced: l.vectors,
            bea_weights: l.bea_weights,
            signatures: ids.iter().map(|id| f.sigs.get(*id).unwrap().clone()).collect(),
            model_version: f.model.version,
        };
        let mut behavior = BehaviorInputs::new();
        for c in f.sim.categories(0) {
            let events = f.sim.get(0, c).unwrap();
            behavior.insert(c, build_category_behavior(events, f.store.tables(), &f.model, &f.sigs).unwrap());
        }
        (uv, items, behavior)
    }

    #[test]
    fn identical_items_score_identically() {
        let f = fixture();
        let (uv, items, beh) = inputs(&f, &[7, 7, 12]);
        let s = prerank_score(&f.model, &uv, &items, &beh, &PopcountLut::new(), f.cfg.tiers).unwrap();
        assert_eq!(s[0].to_bits(), s[1].to_bits());
        assert!(s.iter().all(|x| (0.0..=1.0).contains(x)));
    }

    #[test]
    fn zero_head_gives_bias_score() {
        let f = fixture();
        let mut model = f.model.clone();
        let hidden = model.head[0].output_dim();
        model.head = vec![
            Layer::new(DenseMatrix::zeros(hidden, model.head[0].input_dim()), vec![0.0; hidden], Activation::Relu).unwrap(),
            Layer::new(DenseMatrix::zeros(1, hidden), vec![0.3], Activation::Identity).unwrap(),
        ];
        let (uv, items, beh) = inputs(&f, &[1, 2, 3]);
        let s = prerank_score(&model, &uv, &items, &beh, &PopcountLut::new(), f.cfg.tiers).unwrap();
        assert!(s.iter().all(|&x| x == sigmoid(0.3)));
    }

    #[test]
    fn batch_equals_single_item_loop() {
        let f = fixture();
        let ids: Vec<u64> = (0..40).map(|i| i * 5 % 256).collect();
        let (uv, items, beh) = inputs(&f, &ids);
        let lut = PopcountLut::new();
        let batch = prerank_score(&f.model, &uv, &items, &beh, &lut, f.cfg.tiers).unwrap();
        for (k, &id) in ids.iter().enumerate() {
            let (_, one, _) = inputs(&f, &[id]);
            let s = prerank_score(&f.model, &uv, &one, &beh, &lut, f.cfg.tiers).unwrap();
            assert_eq!(s[0].to_bits(), batch[k].to_bits());
        }
    }

    #[test]
    fn behavior_block_matches_direct_formula() {
        let f = fixture();
        let id = 21;
        let (_, items, beh) = inputs(&f, &[id]);
        let c = items.categories[0];
        let hist = &beh[&c];
        let lut = PopcountLut::new();
        let plane = HashPlane::new(f.cfg.lsh_bits, f.cfg.mm_dim, f.cfg.hash_seed).unwrap();
        let sig = pack(&lsh_hash(&f.store.item(id).unwrap().mm_embedding, &plane).unwrap()).unwrap();
        assert_eq!(&sig, &items.signatures[0]);
        let sims = similarity_matrix(&[sig], &hist.signatures, &lut).unwrap();
        let counts = simtier(sims.row(0), f.cfg.tiers).unwrap();
        assert_eq!(counts.iter().sum::<u32>() as usize, hist.len());
    }

    #[test]
    fn version_mismatch_is_a_consistency_error() {
        let f = fixture();
        let (uv, mut items, beh) = inputs(&f, &[1]);
        items.model_version = 2;
        let err = prerank_score(&f.model, &uv, &items, &beh, &PopcountLut::new(), f.cfg.tiers).unwrap_err();
        assert!(matches!(err, AifError::Consistency(_)));
    }
}
