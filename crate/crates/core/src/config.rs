//! Engine configuration.
//!
//! The on-disk format is flat `key = value` text (a TOML subset). Every key is
//! optional; missing keys take the defaults below.
//!
//! ```text
//! # dimensions
//! user_feature_dim = 16      # per profile feature
//! profile_features = 8       # d_user = 16 * 8 = 128
//! item_feature_dim = 16      # per attribute feature
//! item_attr_features = 4     # d_item = 16 * 4 = 64
//! model_dim = 32             # d
//! bea_out_dim = 16           # d'
//! mm_dim = 64                # d_mm
//! lsh_bits = 32              # d_lsh, multiple of 8
//! bridges = 8                # n
//! tiers = 16                 # N
//! candidates = 1024          # b
//! seq_len = 64               # l
//! long_seq_len = 4096        # L
//! # stage costs, virtual milliseconds
//! retrieval_ms = 30.0
//! mini_batch_size = 1000
//! ```
//!
//! See [`AifConfig`] for the full key list.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::clock::VirtualDuration;
use crate::error::{AifError, Result};

/// Virtual per-stage delays. Fetch and forward delays are charged once per
/// mini-batch; parsing a long-term subsequence costs
/// `parse_base_ms + parse_per_event_ms * len`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StageCostConfig {
    pub retrieval_ms: f64,
    pub user_feature_fetch_ms: f64,
    pub user_forward_ms: f64,
    pub item_feature_fetch_ms: f64,
    pub item_forward_ms: f64,
    pub parse_base_ms: f64,
    pub parse_per_event_ms: f64,
    pub prerank_forward_ms: f64,
    pub mini_batch_size: usize,
}

impl Default for StageCostConfig {
    fn default() -> Self {
        Self {
            retrieval_ms: 30.0,
            user_feature_fetch_ms: 4.0,
            user_forward_ms: 4.0,
            item_feature_fetch_ms: 6.0,
            item_forward_ms: 4.0,
            parse_base_ms: 0.2,
            parse_per_event_ms: 0.0005,
            prerank_forward_ms: 5.0,
            mini_batch_size: 1000,
        }
    }
}

impl StageCostConfig {
    pub fn retrieval(&self) -> VirtualDuration {
        VirtualDuration::from_ms(self.retrieval_ms)
    }
    pub fn user_feature_fetch(&self) -> VirtualDuration {
        VirtualDuration::from_ms(self.user_feature_fetch_ms)
    }
    pub fn user_forward(&self) -> VirtualDuration {
        VirtualDuration::from_ms(self.user_forward_ms)
    }
    pub fn item_feature_fetch(&self) -> VirtualDuration {
        VirtualDuration::from_ms(self.item_feature_fetch_ms)
    }
    pub fn item_forward(&self) -> VirtualDuration {
        VirtualDuration::from_ms(self.item_forward_ms)
    }
    pub fn prerank_forward(&self) -> VirtualDuration {
        VirtualDuration::from_ms(self.prerank_forward_ms)
    }

    /// Virtual cost of parsing one subsequence of `len` events.
    pub fn parse_cost(&self, len: usize) -> VirtualDuration {
        VirtualDuration::from_ms(self.parse_base_ms)
            + VirtualDuration::from_ms(self.parse_per_event_ms) * len as u64
    }

    pub fn mini_batches(&self, candidates: usize) -> usize {
        candidates.div_ceil(self.mini_batch_size)
    }

    fn validate(&self) -> Result<()> {
        let delays = [
            ("retrieval_ms", self.retrieval_ms),
            ("user_feature_fetch_ms", self.user_feature_fetch_ms),
            ("user_forward_ms", self.user_forward_ms),
            ("item_feature_fetch_ms", self.item_feature_fetch_ms),
            ("item_forward_ms", self.item_forward_ms),
            ("parse_base_ms", self.parse_base_ms),
            ("parse_per_event_ms", self.parse_per_event_ms),
            ("prerank_forward_ms", self.prerank_forward_ms),
        ];
        for (name, v) in delays {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(AifError::Precondition(format!("{name} must be >= 0, got {v}")));
            }
        }
        if self.mini_batch_size == 0 {
            return Err(AifError::Precondition("mini_batch_size must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AifConfig {
    pub seed: u64,
    pub model_seed: u64,
    pub hash_seed: u64,

    pub user_feature_dim: usize,
    pub profile_features: usize,
    pub profile_vocab: u64,
    pub item_feature_dim: usize,
    pub item_attr_features: usize,
    pub attr_vocab: u64,
    pub model_dim: usize,
    pub item_hidden_dim: usize,
    pub head_hidden_dim: usize,
    pub bea_out_dim: usize,
    pub mm_dim: usize,
    pub lsh_bits: usize,
    pub bridges: usize,
    pub tiers: usize,
    pub candidates: usize,
    pub seq_len: usize,
    pub long_seq_len: usize,

    pub num_items: usize,
    pub num_categories: u64,
    pub num_users: usize,
    pub bucket_count: u64,

    pub user_cache_capacity: usize,
    pub sim_cache_capacity: usize,
    pub sim_precache: bool,

    pub sla_p99_ms: f64,
    pub arrival_rate_qps: f64,
    pub workers: usize,

    #[serde(flatten)]
    pub costs: StageCostConfig,
}

impl Default for AifConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            model_seed: 11,
            hash_seed: 13,
            user_feature_dim: 16,
            profile_features: 8,
            profile_vocab: 1000,
            item_feature_dim: 16,
            item_attr_features: 4,
            attr_vocab: 5000,
            model_dim: 32,
            item_hidden_dim: 48,
            head_hidden_dim: 32,
            bea_out_dim: 16,
            mm_dim: 64,
            lsh_bits: 32,
            bridges: 8,
            tiers: 16,
            candidates: 1024,
            seq_len: 64,
            long_seq_len: 4096,
            num_items: 4096,
            num_categories: 32,
            num_users: 64,
            bucket_count: 1 << 14,
            user_cache_capacity: 100_000,
            // 3 x (one in-flight user x 32 categories)
            sim_cache_capacity: 96,
            sim_precache: true,
            sla_p99_ms: 100.0,
            arrival_rate_qps: 100.0,
            workers: 8,
            costs: StageCostConfig::default(),
        }
    }
}

impl AifConfig {
    /// A reduced universe for fast tests and examples. Dimensions match the
    /// defaults; only catalog, history and candidate sizes shrink.
    pub fn small() -> Self {
        Self {
            num_items: 256,
            num_users: 8,
            num_categories: 8,
            long_seq_len: 512,
            seq_len: 16,
            candidates: 128,
            bucket_count: 1024,
            sim_cache_capacity: 24,
            costs: StageCostConfig {
                mini_batch_size: 64,
                ..StageCostConfig::default()
            },
            ..Self::default()
        }
    }

    /// Concatenated profile width `d_user`.
    pub fn user_dim(&self) -> usize {
        self.user_feature_dim * self.profile_features
    }

    /// Concatenated item attribute width `d_item`.
    pub fn item_dim(&self) -> usize {
        self.item_feature_dim * self.item_attr_features
    }

    pub fn parse(text: &str) -> Result<Self> {
        let table: toml::Table =
            toml::from_str(text).map_err(|e| AifError::Format(format!("config: {e}")))?;
        // serde cannot deny unknown keys through a flattened struct
        let known: toml::Table = toml::from_str(&AifConfig::default().to_text())
            .expect("default config parses");
        if let Some(key) = table.keys().find(|k| !known.contains_key(*k)) {
            return Err(AifError::Format(format!("config: unknown key `{key}`")));
        }
        let cfg: AifConfig = table
            .try_into()
            .map_err(|e| AifError::Format(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn to_text(&self) -> String {
        toml::to_string(self).expect("flat config always serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.costs.validate()?;
        let positive = [
            ("user_feature_dim", self.user_feature_dim),
            ("profile_features", self.profile_features),
            ("item_feature_dim", self.item_feature_dim),
            ("item_attr_features", self.item_attr_features),
            ("model_dim", self.model_dim),
            ("item_hidden_dim", self.item_hidden_dim),
            ("head_hidden_dim", self.head_hidden_dim),
            ("bea_out_dim", self.bea_out_dim),
            ("mm_dim", self.mm_dim),
            ("lsh_bits", self.lsh_bits),
            ("bridges", self.bridges),
            ("tiers", self.tiers),
            ("candidates", self.candidates),
            ("seq_len", self.seq_len),
            ("num_items", self.num_items),
            ("num_users", self.num_users),
            ("workers", self.workers),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(AifError::Precondition(format!("{name} must be positive")));
            }
        }
        if self.user_dim() % 2 != 0 {
            return Err(AifError::Precondition(
                "user_feature_dim * profile_features must be even".into(),
            ));
        }
        if self.lsh_bits % 8 != 0 {
            return Err(AifError::Precondition(format!(
                "lsh_bits must be a multiple of 8, got {}",
                self.lsh_bits
            )));
        }
        if self.candidates > self.num_items {
            return Err(AifError::Precondition(format!(
                "candidates ({}) exceed catalog size ({})",
                self.candidates, self.num_items
            )));
        }
        if self.num_categories == 0 || self.bucket_count == 0 {
            return Err(AifError::Precondition(
                "num_categories and bucket_count must be positive".into(),
            ));
        }
        if !(self.sla_p99_ms > 0.0) || !(self.arrival_rate_qps > 0.0) {
            return Err(AifError::Precondition(
                "sla_p99_ms and arrival_rate_qps must be positive".into(),
            ));
        }
        Ok(())
    }
}
