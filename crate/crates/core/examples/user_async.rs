//! Compute a user vector once per request, reuse it from the cache, and ship
//! it through the base-64 transport format.

use aif::clock::VirtualDuration;
use aif::config::AifConfig;
use aif::features::FeatureStore;
use aif::model::ModelParams;
use aif::user_async::{decode_transport, encode_transport, UserVectorCache};

fn main() -> aif::error::Result<()> {
    let cfg = AifConfig::small();
    let store = FeatureStore::generate(&cfg)?;
    let model = ModelParams::init(&cfg, 1);
    let cache = UserVectorCache::new(4);

    for request_id in [1, 1, 2, 3, 4, 5, 1] {
        let user = store.user(request_id % 3).expect("user exists");
        let v = cache.compute_and_cache(&user, request_id, store.tables(), &model, VirtualDuration::from_ms(request_id as f64))?;
        println!("request {request_id} user {:<10} digest {:016x}", user.nickname, v.key.digest);
    }
    let s = cache.stats();
    println!("hits {} misses {} evictions {} computes {}", s.hits, s.misses, s.evictions, s.computes);

    let user = store.user(0).expect("user exists");
    let v = cache.compute_and_cache(&user, 9, store.tables(), &model, VirtualDuration::ZERO)?;
    let text = encode_transport(&v);
    println!("\ntransport: {} chars, starts {}", text.len(), &text[..32]);
    assert!(decode_transport(&text)?.bit_eq(&v));
    println!("decoded bit-exactly");
    Ok(())
}
