//! Run the sequential baseline and the asynchronous pipeline side by side
//! and show that they rank identically while the latter is faster.

use aif::config::AifConfig;
use aif::features::random_update_events;
use aif::pipeline::{compare_outputs, equivalence_check, Engine, TraceEntry};

fn main() -> aif::error::Result<()> {
    let cfg = AifConfig::small();
    let engine = Engine::new(&cfg)?;
    let requests = aif::bench::generate_workload(cfg.num_users, 8, 50.0, 1)?;

    for r in &requests[..3] {
        let seq = engine.run_sequential(r)?;
        let aif = engine.run_aif(r)?;
        let (diff, agree) = compare_outputs(&seq, &aif)?;
        println!(
            "request {}: max |diff| {diff:e}, rank agreement {agree}, latency {} -> {}",
            r.request_id, seq.latency.total, aif.latency.total
        );
        let top: Vec<u64> = aif.ranked().iter().take(5).map(|c| c.item_id).collect();
        println!("  top 5: {top:?}");
    }

    // updates that the nearline path has not absorbed yet
    let mut trace: Vec<TraceEntry> = requests.into_iter().map(TraceEntry::Request).collect();
    let updates = random_update_events(engine.store(), 4, 2);
    trace.splice(4..4, updates.into_iter().map(TraceEntry::Update));
    let report = equivalence_check(&engine, &trace, false)?;
    print!("\n{}", report.to_csv());
    println!("passed: {}", report.passed(1e-6));

    let c = engine.counters();
    for (k, v) in c.pairs() {
        println!("{k:<30} {v}");
    }
    Ok(())
}
