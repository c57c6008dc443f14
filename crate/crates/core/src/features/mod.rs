//! Deterministic synthetic feature universe.

mod embedding;
mod snapshot;
mod store;

pub use embedding::EmbeddingTable;
pub use snapshot::{decode_store, encode_store, load_store, save_store, STORE_FORMAT_VERSION, STORE_MAGIC};
pub use store::{
    materialize_user, normalize_embedding, random_update_events, BehaviorEvent, FeatureStore, FeatureTables,
    ItemRecord, ItemUpdateEvent, UserState,
};
