//! Keep the N2O item table current with incremental updates and check it
//! against a full rebuild.

use aif::config::AifConfig;
use aif::features::{random_update_events, FeatureStore};
use aif::model::ModelParams;
use aif::nearline::{N2OIndex, N2OIndexTable};

fn main() -> aif::error::Result<()> {
    let cfg = AifConfig::small();
    let store = FeatureStore::generate(&cfg)?;
    let model = ModelParams::init(&cfg, 1);
    let index = N2OIndex::build(&store, &model)?;
    println!("initial table: {} items", index.snapshot().len());

    for round in 0..3 {
        let events = random_update_events(&store, 10, round);
        for e in &events {
            store.apply_item_update(e)?;
        }
        let table = index.apply_incremental(&events, &store, &model)?;
        let full = N2OIndexTable::rebuild_full(&store, &model, 0)?;
        println!(
            "round {round}: {} events, table {} items, matches full rebuild: {}",
            events.len(),
            table.len(),
            table.same_entries(&full)
        );
    }
    let s = index.stats();
    println!("item forwards {}, publications {}", s.item_forwards, s.publications);
    Ok(())
}
