//! Store snapshot file.
//!
//! ```text
//! "AIFS"                      magic
//! u32  format version (1)
//! u64  last applied event_seq
//! u64  item count, then per item:
//!      u64 item_id, u64 category_id, u64 version,
//!      u32 n_attr, n_attr x u64 attribute ids,
//!      u32 d_mm,   d_mm x f32 multi-modal embedding
//! u64  user count, then per user:
//!      u64 user_id, u32 nickname byte length, UTF-8 nickname,
//!      u32 n_profile, n_profile x u64 profile ids,
//!      u32 l, l x (u64 item_id, u64 category_id, u64 timestamp),
//!      u32 L, L x (u64 item_id, u64 category_id, u64 timestamp)
//! ```
//!
//! All integers and floats are little-endian. Embedding tables are not stored;
//! they are regenerated from the config seed on load.

use std::path::Path;

use super::store::{BehaviorEvent, FeatureStore, ItemRecord, UserState};
use crate::codec::{ByteReader, ByteWriter};
use crate::config::AifConfig;
use crate::error::{AifError, Result};

pub const STORE_MAGIC: &[u8; 4] = b"AIFS";
pub const STORE_FORMAT_VERSION: u32 = 1;

fn write_events(w: &mut ByteWriter, events: &[BehaviorEvent]) -> Result<()> {
    w.len_u32(events.len())?;
    for e in events {
        w.u64(e.item_id).u64(e.category_id).u64(e.timestamp);
    }
    Ok(())
}

fn read_events(r: &mut ByteReader<'_>) -> Result<Vec<BehaviorEvent>> {
    let n = r.u32()? as usize;
    (0..n)
        .map(|_| {
            Ok(BehaviorEvent {
                item_id: r.u64()?,
                category_id: r.u64()?,
                timestamp: r.u64()?,
            })
        })
        .collect()
}

pub fn encode_store(store: &FeatureStore) -> Result<Vec<u8>> {
    let mut w = ByteWriter::new();
    w.bytes(STORE_MAGIC)
        .u32(STORE_FORMAT_VERSION)
        .u64(store.last_event_seq());
    let items = store.items();
    w.u64(items.len() as u64);
    for it in &items {
        w.u64(it.item_id).u64(it.category_id).u64(it.version);
        w.len_u32(it.attribute_features.len())?;
        for &a in &it.attribute_features {
            w.u64(a);
        }
        w.len_u32(it.mm_embedding.len())?;
        w.f32s(&it.mm_embedding);
    }
    w.u64(store.user_count() as u64);
    for u in store.users() {
        w.u64(u.user_id);
        w.len_u32(u.nickname.len())?;
        w.bytes(u.nickname.as_bytes());
        w.len_u32(u.profile_features.len())?;
        for &p in &u.profile_features {
            w.u64(p);
        }
        write_events(&mut w, &u.behavior_sequence)?;
        write_events(&mut w, &u.long_term_sequence)?;
    }
    Ok(w.finish())
}

pub fn decode_store(bytes: &[u8], cfg: &AifConfig) -> Result<FeatureStore> {
    let mut r = ByteReader::new(bytes);
    r.magic(STORE_MAGIC)?;
    let version = r.u32()?;
    if version != STORE_FORMAT_VERSION {
        return Err(AifError::Format(format!("unsupported store version {version}")));
    }
    let last_seq = r.u64()?;
    let n_items = r.u64()?;
    let mut items = Vec::new();
    for _ in 0..n_items {
        let item_id = r.u64()?;
        let category_id = r.u64()?;
        let version = r.u64()?;
        let n_attr = r.u32()? as usize;
        let attribute_features = r.u64s(n_attr)?;
        let d_mm = r.u32()? as usize;
        let mm_embedding = r.f32s(d_mm)?;
        items.push(ItemRecord {
            item_id,
            category_id,
            attribute_features,
            mm_embedding,
            version,
        });
    }
    let n_users = r.u64()?;
    let mut users = Vec::new();
    for _ in 0..n_users {
        let user_id = r.u64()?;
        let name_len = r.u32()? as usize;
        let at = r.position();
        let nickname = String::from_utf8(r.take(name_len)?.to_vec()).map_err(|e| {
            AifError::Decode {
                offset: at,
                reason: e.to_string(),
            }
        })?;
        let n_profile = r.u32()? as usize;
        let profile_features = r.u64s(n_profile)?;
        let behavior_sequence = read_events(&mut r)?;
        let long_term_sequence = read_events(&mut r)?;
        users.push(UserState {
            user_id,
            nickname,
            profile_features,
            behavior_sequence,
            long_term_sequence,
        });
    }
    r.finish()?;
    Ok(FeatureStore::from_parts(cfg, items, users, last_seq))
}

pub fn save_store(store: &FeatureStore, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, encode_store(store)?)?;
    Ok(())
}

pub fn load_store(path: impl AsRef<Path>, cfg: &AifConfig) -> Result<FeatureStore> {
    decode_store(&std::fs::read(path)?, cfg)
}
