//! Request orchestration: the sequential baseline, the asynchronous pipeline,
//! cross-pipeline equivalence checks, and the rank-alignment loss with a toy
//! trainer.

mod copr;
mod engine;
mod equivalence;
mod scoring;
mod train;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::clock::VirtualDuration;

pub use copr::{copr_loss, copr_loss_values, copr_loss_with_grad, delta_ndcg, Relevance};
pub use engine::{CounterSnapshot, Engine, PipelineKind, PipelineOutput};
pub use equivalence::{compare_outputs, equivalence_check, EquivalenceReport, RequestComparison, TraceEntry};
pub use scoring::{build_category_behavior, build_category_behavior_inline, prerank_score, sigmoid, BehaviorInputs, CategoryBehavior, ItemInputs};
pub use train::{
    finite_difference_gradient, toy_train, CoprToyModel, Objective, QuadraticObjective, TrainReport,
};

/// One pre-ranking request.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Request {
    pub request_id: u64,
    pub user_id: u64,
    pub arrival_ms: f64,
    pub candidate_seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredCandidate {
    pub item_id: u64,
    pub score: f32,
    pub bid: f64,
}

/// Virtual time spent per stage for one request. Stage entries are totals
/// over all mini-batches; `user_path` is the user-side chain that runs next
/// to retrieval in the asynchronous pipeline.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct LatencyBreakdown {
    pub retrieval: VirtualDuration,
    pub user_feature_fetch: VirtualDuration,
    pub user_forward: VirtualDuration,
    pub item_feature_fetch: VirtualDuration,
    pub item_forward: VirtualDuration,
    /// Subsequence parsing on the critical path.
    pub parse: VirtualDuration,
    /// Subsequence parsing done while retrieval runs.
    pub prefetch_parse: VirtualDuration,
    pub prerank_forward: VirtualDuration,
    pub user_path: VirtualDuration,
    pub total: VirtualDuration,
    pub mini_batches: usize,
}

impl LatencyBreakdown {
    /// `(name, value)` pairs in report order.
    pub fn stages(&self) -> [(&'static str, VirtualDuration); 9] {
        [
            ("retrieval", self.retrieval),
            ("user_feature_fetch", self.user_feature_fetch),
            ("user_forward", self.user_forward),
            ("item_feature_fetch", self.item_feature_fetch),
            ("item_forward", self.item_forward),
            ("parse", self.parse),
            ("prefetch_parse", self.prefetch_parse),
            ("prerank_forward", self.prerank_forward),
            ("user_path", self.user_path),
        ]
    }
}

/// Deterministic candidate sample of size `min(b, catalog)` drawn without
/// replacement from `catalog` using `candidate_seed`.
pub fn retrieval_stub(catalog: &[u64], candidate_seed: u64, b: usize) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(candidate_seed);
    rand::seq::index::sample(&mut rng, catalog.len(), b.min(catalog.len()))
        .into_iter()
        .map(|i| catalog[i])
        .collect()
}

/// Positive bid attached to an item, a fixed function of its id in `[0.5, 2.5)`.
pub fn bid_for(item_id: u64) -> f64 {
    let mut z = item_id.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^= z >> 31;
    0.5 + 2.0 * (z >> 11) as f64 / (1u64 << 53) as f64
}

/// Sorts by score descending, ties broken by ascending item id.
pub fn rank_candidates(scored: &mut [ScoredCandidate]) {
    scored.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.item_id.cmp(&b.item_id)));
}
