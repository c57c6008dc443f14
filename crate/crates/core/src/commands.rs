//! Command-line front end. The binary only parses arguments and calls
//! [`execute`].

use std::fs::File;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::bench::{emit_report, generate_workload, run_benchmark, BenchMode};
use crate::config::AifConfig;
use crate::error::{AifError, Result};
use crate::features::{load_store, save_store, FeatureStore, ItemUpdateEvent};
use crate::lsh::calibrate;
use crate::model::ModelParams;
use crate::nearline::N2OIndexTable;
use crate::pipeline::{equivalence_check, Engine, PipelineKind, TraceEntry};

#[derive(Debug, Parser)]
#[command(name = "aif", version, about = "Asynchronous pre-ranking engine")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Replay a trace through one pipeline and write a latency report.
    Bench {
        #[arg(long, default_value = "aif")]
        pipeline: PipelineKind,
        #[arg(long)]
        trace: PathBuf,
        #[arg(long, default_value = "virtual")]
        mode: BenchMode,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Feature store snapshot; generated from the config when absent.
        #[arg(long)]
        store: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Check that both pipelines score every request in a trace identically.
    Verify {
        #[arg(long)]
        trace: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        store: Option<PathBuf>,
        /// Per-request comparison CSV.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 1e-6)]
        tolerance: f64,
    },
    /// Measure LSH similarity against the angular law and write the curve.
    LshCalibrate {
        /// Signature bits.
        #[arg(long, default_value_t = 128)]
        dim: usize,
        #[arg(long, default_value_t = 10_000)]
        pairs: usize,
        #[arg(long, default_value_t = 64)]
        mm_dim: usize,
        #[arg(long, default_value_t = 20)]
        buckets: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build or update the N2O item index table.
    N2o {
        #[command(subcommand)]
        action: N2oAction,
    },
    /// Write a request trace.
    GenTrace {
        #[arg(long)]
        users: usize,
        #[arg(long)]
        requests: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 100.0)]
        rate: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a synthetic feature store snapshot.
    GenStore {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Subcommand)]
pub enum N2oAction {
    /// Full rebuild from a store snapshot.
    Rebuild {
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Apply JSON-lines update events to an existing table.
    Apply {
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        table: PathBuf,
        #[arg(long)]
        events: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Also write the updated store.
        #[arg(long)]
        store_out: Option<PathBuf>,
    },
}

fn config(path: Option<&Path>) -> Result<AifConfig> {
    path.map_or_else(|| Ok(AifConfig::default()), AifConfig::load)
}

fn engine(cfg: &AifConfig, store: Option<&Path>) -> Result<Engine> {
    match store {
        Some(p) => Engine::with_store(cfg, load_store(p, cfg)?),
        None => Engine::new(cfg),
    }
}

fn read_trace(path: &Path) -> Result<Vec<TraceEntry>> {
    TraceEntry::read_jsonl(BufReader::new(File::open(path)?))
}

fn read_events(path: &Path) -> Result<Vec<ItemUpdateEvent>> {
    read_trace(path)?
        .into_iter()
        .map(|e| match e {
            TraceEntry::Update(u) => Ok(u),
            TraceEntry::Request(r) => Err(AifError::Format(format!(
                "events file holds request {}",
                r.request_id
            ))),
        })
        .collect()
}

/// Runs one command, writing a short summary to `log`. Returns the process
/// exit code: 0 on success, 1 when a verification fails.
pub fn execute(cli: Cli, log: &mut dyn Write) -> Result<i32> {
    match cli.command {
        Command::Bench {
            pipeline,
            trace,
            mode,
            config: cfg_path,
            store,
            out,
        } => {
            let cfg = config(cfg_path.as_deref())?;
            let trace = read_trace(&trace)?;
            let engine = engine(&cfg, store.as_deref())?;
            let report = run_benchmark(&engine, &trace, pipeline, mode)?;
            emit_report(&report, &out)?;
            writeln!(
                log,
                "{pipeline} ({mode}): {} requests, avgRT {:.3} ms, p99RT {:.3} ms, maxQPS {:.1}",
                report.requests, report.avg_rt_ms, report.p99_rt_ms, report.max_qps
            )?;
            Ok(0)
        }
        Command::Verify {
            trace,
            config: cfg_path,
            store,
            out,
            tolerance,
        } => {
            let cfg = config(cfg_path.as_deref())?;
            let trace = read_trace(&trace)?;
            let engine = engine(&cfg, store.as_deref())?;
            let report = equivalence_check(&engine, &trace, false)?;
            if let Some(out) = out {
                std::fs::write(out, report.to_csv())?;
            }
            let passed = report.passed(tolerance);
            writeln!(
                log,
                "{}: {} requests ({} stale), max |diff| {:e}, min rank agreement {}",
                if passed { "PASS" } else { "FAIL" },
                report.comparisons.len(),
                report.stale_requests(),
                report.max_abs_diff(),
                report.min_rank_agreement()
            )?;
            Ok(if passed { 0 } else { 1 })
        }
        Command::LshCalibrate {
            dim,
            pairs,
            mm_dim,
            buckets,
            seed,
            out,
        } => {
            let r = calibrate(dim, mm_dim, pairs, buckets, seed)?;
            std::fs::write(&out, r.to_csv())?;
            writeln!(
                log,
                "{pairs} pairs, {dim} bits: bucket error {:.5}, mean bias {:+.5}, per-pair |dev| {:.5}",
                r.bucket_error, r.mean_bias, r.pair_mean_abs_dev
            )?;
            Ok(0)
        }
        Command::N2o { action } => match action {
            N2oAction::Rebuild {
                store,
                config: cfg_path,
                out,
            } => {
                let cfg = config(cfg_path.as_deref())?;
                let store = load_store(&store, &cfg)?;
                let model = ModelParams::init(&cfg, 1);
                let table = N2OIndexTable::rebuild_full(&store, &model, 0)?;
                table.save(&out)?;
                writeln!(log, "rebuilt {} entries", table.len())?;
                Ok(0)
            }
            N2oAction::Apply {
                store,
                table,
                events,
                config: cfg_path,
                out,
                store_out,
            } => {
                let cfg = config(cfg_path.as_deref())?;
                let store = load_store(&store, &cfg)?;
                let model = ModelParams::init(&cfg, 1);
                let table = N2OIndexTable::load(&table, 0, model.version)?;
                let events = read_events(&events)?;
                for e in &events {
                    store.apply_item_update(e)?;
                }
                let next = table.apply_incremental(&events, &store, &model)?;
                next.save(&out)?;
                if let Some(p) = store_out {
                    save_store(&store, p)?;
                }
                writeln!(log, "applied {} events, {} entries", events.len(), next.len())?;
                Ok(0)
            }
        },
        Command::GenTrace {
            users,
            requests,
            seed,
            rate,
            out,
        } => {
            let trace: Vec<TraceEntry> = generate_workload(users, requests, rate, seed)?
                .into_iter()
                .map(TraceEntry::Request)
                .collect();
            TraceEntry::write_jsonl(&trace, File::create(&out)?)?;
            writeln!(log, "wrote {requests} requests")?;
            Ok(0)
        }
        Command::GenStore { config: cfg_path, out } => {
            let cfg = config(cfg_path.as_deref())?;
            let store = FeatureStore::generate(&cfg)?;
            save_store(&store, &out)?;
            writeln!(log, "wrote {} items, {} users", store.item_count(), store.user_count())?;
            Ok(0)
        }
    }
}
