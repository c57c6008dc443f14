//! Prefetch a user's long-term subsequences while retrieval runs, then serve
//! per-category lookups from the cache.

use aif::config::AifConfig;
use aif::features::FeatureStore;
use aif::precache::{parse_direct, SimHardStore, SubsequenceCache};

fn main() -> aif::error::Result<()> {
    let cfg = AifConfig::small();
    let store = FeatureStore::generate(&cfg)?;
    let sim = SimHardStore::build(store.users().map(|u| u.as_ref()));
    let cache = SubsequenceCache::new(cfg.sim_cache_capacity);

    for user in 0..4 {
        let pre = cache.prefetch_user(&sim, user, &cfg.costs);
        let mut critical = 0.0;
        let mut direct = 0.0;
        for c in sim.categories(user) {
            critical += cache.lookup(&sim, user, c, &cfg.costs).parse_cost.as_ms();
            direct += parse_direct(&sim, user, c, &cfg.costs).parse_cost.as_ms();
        }
        println!(
            "user {user}: prefetched {} categories ({:.3} ms off the critical path); \
             critical-path parse {critical:.3} ms vs {direct:.3} ms without the cache",
            pre.inserted,
            pre.parse_cost.as_ms()
        );
    }
    let s = cache.stats();
    println!("hits {} misses {} evictions {}", s.hits, s.misses, s.evictions);
    Ok(())
}
