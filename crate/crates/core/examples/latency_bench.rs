//! Virtual-time benchmark of both pipelines, with and without subsequence
//! pre-caching.

use aif::bench::{generate_workload, run_benchmark, BenchMode};
use aif::config::AifConfig;
use aif::pipeline::{Engine, PipelineKind, TraceEntry};

fn main() -> aif::error::Result<()> {
    let cfg = AifConfig::small();
    let trace: Vec<TraceEntry> = generate_workload(cfg.num_users, 50, cfg.arrival_rate_qps, 4)?
        .into_iter()
        .map(TraceEntry::Request)
        .collect();

    let runs = [
        ("sequential", PipelineKind::Sequential, true),
        ("aif", PipelineKind::Aif, true),
        ("aif, no pre-cache", PipelineKind::Aif, false),
    ];
    println!("{:<20} {:>10} {:>10} {:>10}", "pipeline", "avgRT ms", "p99RT ms", "maxQPS");
    for (name, kind, precache) in runs {
        let engine = Engine::new(&AifConfig { sim_precache: precache, ..cfg.clone() })?;
        let r = run_benchmark(&engine, &trace, kind, BenchMode::Virtual)?;
        println!("{name:<20} {:>10.3} {:>10.3} {:>10.1}", r.avg_rt_ms, r.p99_rt_ms, r.max_qps);
    }

    let engine = Engine::new(&cfg)?;
    let report = run_benchmark(&engine, &trace, PipelineKind::Aif, BenchMode::Wall)?;
    println!("\nwall clock, {} workers:", cfg.workers);
    print!("{}", report.to_text());
    Ok(())
}
