//! Workload generation and latency benchmarking.

use std::fmt::Write as _;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Instant;

use parking_lot::Mutex;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};

use crate::error::{AifError, Result};
use crate::pipeline::{Engine, PipelineKind, PipelineOutput, Request, TraceEntry};

/// Seeded request stream: uniform users, exponential inter-arrival times at
/// `rate_qps`, request ids `0..requests`.
pub fn generate_workload(users: usize, requests: usize, rate_qps: f64, seed: u64) -> Result<Vec<Request>> {
    if users == 0 || requests == 0 {
        return Err(AifError::Precondition("users and requests must be positive".into()));
    }
    if !(rate_qps > 0.0 && rate_qps.is_finite()) {
        return Err(AifError::Precondition(format!("arrival rate must be positive, got {rate_qps}")));
    }
    let exp = Exp::new(rate_qps / 1000.0)
        .map_err(|e| AifError::Precondition(format!("arrival rate {rate_qps}: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut t = 0.0;
    let mut out = Vec::with_capacity(requests);
    for request_id in 0..requests as u64 {
        t += exp.sample(&mut rng);
        out.push(Request {
            request_id,
            user_id: rand::Rng::random_range(&mut rng, 0..users as u64),
            arrival_ms: t,
            candidate_seed: rand::Rng::random(&mut rng),
        });
    }
    Ok(out)
}

/// Nearest-rank percentile of an ascending slice: the value at position
/// `⌈p/100 · n⌉` (1-based). Empty input gives 0.
pub fn nearest_rank(sorted: &[f64], p: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let rank = ((p / 100.0) * sorted.len() as f64).ceil().max(1.0) as usize;
    sorted[rank.min(sorted.len()) - 1]
}

/// Response times of a FIFO queue with `servers` identical servers.
pub fn simulate_queue(arrivals_ms: &[f64], service_ms: &[f64], servers: usize) -> Vec<f64> {
    let mut free = vec![0.0f64; servers.max(1)];
    arrivals_ms
        .iter()
        .zip(service_ms)
        .map(|(&a, &s)| {
            let (k, _) = free
                .iter()
                .enumerate()
                .min_by(|x, y| x.1.total_cmp(y.1))
                .expect("at least one server");
            let start = free[k].max(a);
            free[k] = start + s;
            start + s - a
        })
        .collect()
}

const QPS_SAMPLES: usize = 2000;
const QPS_ITERATIONS: usize = 8;

/// Largest offered rate whose queued p99 stays within `sla_ms`, found by
/// bisection. Service times are replayed cyclically against a seeded Poisson
/// arrival stream. Returns 0 when even the lowest rate misses the SLA.
pub fn max_qps(service_ms: &[f64], servers: usize, sla_ms: f64, seed: u64) -> f64 {
    if service_ms.is_empty() {
        return 0.0;
    }
    let service: Vec<f64> = service_ms.iter().cycle().take(QPS_SAMPLES).copied().collect();
    let p99_at = |rate: f64| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let exp = Exp::new(rate / 1000.0).expect("positive rate");
        let mut t = 0.0;
        let arrivals: Vec<f64> = (0..QPS_SAMPLES)
            .map(|_| {
                t += exp.sample(&mut rng);
                t
            })
            .collect();
        let mut rt = simulate_queue(&arrivals, &service, servers);
        rt.sort_by(f64::total_cmp);
        nearest_rank(&rt, 99.0)
    };
    let mean = service.iter().sum::<f64>() / service.len() as f64;
    let mut lo = 1.0;
    let mut hi = 2.0 * servers as f64 * 1000.0 / mean.max(1e-9);
    if p99_at(lo) > sla_ms {
        return 0.0;
    }
    if p99_at(hi) <= sla_ms {
        return hi;
    }
    for _ in 0..QPS_ITERATIONS {
        let mid = 0.5 * (lo + hi);
        if p99_at(mid) <= sla_ms {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    lo
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BenchMode {
    /// Latency from the stage cost model; deterministic.
    Virtual,
    /// Measured compute time on a worker pool; informational.
    Wall,
}

impl std::str::FromStr for BenchMode {
    type Err = AifError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "virtual" => Ok(Self::Virtual),
            "wall" => Ok(Self::Wall),
            other => Err(AifError::Precondition(format!("unknown mode {other:?}"))),
        }
    }
}

impl std::fmt::Display for BenchMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Virtual => "virtual",
            Self::Wall => "wall",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatencyReport {
    pub pipeline: PipelineKind,
    pub mode: BenchMode,
    pub requests: usize,
    pub avg_rt_ms: f64,
    pub p50_rt_ms: f64,
    pub p99_rt_ms: f64,
    pub max_qps: f64,
    pub variance_ms2: f64,
    /// Mean virtual milliseconds per request, by stage.
    pub stages: Vec<(String, f64)>,
    pub counters: Vec<(String, u64)>,
}

impl LatencyReport {
    /// Summary statistics over raw per-request latencies.
    pub fn from_latencies(pipeline: PipelineKind, mode: BenchMode, latencies_ms: &[f64]) -> Self {
        let n = latencies_ms.len();
        let mut sorted = latencies_ms.to_vec();
        sorted.sort_by(f64::total_cmp);
        let avg = if n == 0 { 0.0 } else { latencies_ms.iter().sum::<f64>() / n as f64 };
        let var = if n == 0 {
            0.0
        } else {
            latencies_ms.iter().map(|x| (x - avg) * (x - avg)).sum::<f64>() / n as f64
        };
        Self {
            pipeline,
            mode,
            requests: n,
            avg_rt_ms: avg,
            p50_rt_ms: nearest_rank(&sorted, 50.0),
            p99_rt_ms: nearest_rank(&sorted, 99.0),
            max_qps: 0.0,
            variance_ms2: var,
            stages: Vec::new(),
            counters: Vec::new(),
        }
    }

    /// `metric,value` lines with a stable order, then the same numbers as a
    /// `#`-prefixed table.
    pub fn to_text(&self) -> String {
        let mut rows: Vec<(String, String)> = vec![
            ("pipeline".into(), self.pipeline.to_string()),
            ("mode".into(), self.mode.to_string()),
            ("requests".into(), self.requests.to_string()),
            ("avg_rt_ms".into(), self.avg_rt_ms.to_string()),
            ("p50_rt_ms".into(), self.p50_rt_ms.to_string()),
            ("p99_rt_ms".into(), self.p99_rt_ms.to_string()),
            ("max_qps".into(), self.max_qps.to_string()),
            ("variance_ms2".into(), self.variance_ms2.to_string()),
        ];
        rows.extend(self.stages.iter().map(|(k, v)| (format!("stage.{k}"), v.to_string())));
        rows.extend(self.counters.iter().map(|(k, v)| (format!("counter.{k}"), v.to_string())));

        let mut out = String::from("metric,value\n");
        for (k, v) in &rows {
            let _ = writeln!(out, "{k},{v}");
        }
        let width = rows.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
        let _ = writeln!(out, "#");
        let _ = writeln!(out, "# {:<width$}  value", "metric");
        for (k, v) in &rows {
            let _ = writeln!(out, "# {k:<width$}  {v}");
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let bad = |m: String| AifError::Format(format!("report: {m}"));
        let mut r = Self::from_latencies(PipelineKind::Aif, BenchMode::Virtual, &[]);
        let mut seen_header = false;
        for line in text.lines() {
            if line.starts_with('#') || line.trim().is_empty() {
                continue;
            }
            if !seen_header {
                if line != "metric,value" {
                    return Err(bad(format!("unexpected header {line:?}")));
                }
                seen_header = true;
                continue;
            }
            let (k, v) = line.split_once(',').ok_or_else(|| bad(format!("malformed line {line:?}")))?;
            let num = || v.parse::<f64>().map_err(|e| bad(format!("{k}: {e}")));
            match k {
                "pipeline" => r.pipeline = v.parse()?,
                "mode" => r.mode = v.parse()?,
                "requests" => r.requests = v.parse().map_err(|e| bad(format!("{k}: {e}")))?,
                "avg_rt_ms" => r.avg_rt_ms = num()?,
                "p50_rt_ms" => r.p50_rt_ms = num()?,
                "p99_rt_ms" => r.p99_rt_ms = num()?,
                "max_qps" => r.max_qps = num()?,
                "variance_ms2" => r.variance_ms2 = num()?,
                _ => {
                    if let Some(s) = k.strip_prefix("stage.") {
                        r.stages.push((s.to_string(), num()?));
                    } else if let Some(c) = k.strip_prefix("counter.") {
                        r.counters.push((c.to_string(), v.parse().map_err(|e| bad(format!("{k}: {e}")))?));
                    } else {
                        return Err(bad(format!("unknown metric {k:?}")));
                    }
                }
            }
        }
        if !seen_header {
            return Err(bad("missing header".into()));
        }
        Ok(r)
    }

    pub fn stage(&self, name: &str) -> Option<f64> {
        self.stages.iter().find(|(k, _)| k == name).map(|(_, v)| *v)
    }

    pub fn counter(&self, name: &str) -> Option<u64> {
        self.counters.iter().find(|(k, _)| k == name).map(|(_, v)| *v)
    }
}

pub fn emit_report(report: &LatencyReport, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, report.to_text())?;
    Ok(())
}

fn stage_means(outputs: &[PipelineOutput]) -> Vec<(String, f64)> {
    let Some(first) = outputs.first() else {
        return Vec::new();
    };
    let n = outputs.len() as f64;
    let mut stages: Vec<(String, f64)> = first
        .latency
        .stages()
        .iter()
        .enumerate()
        .map(|(k, (name, _))| {
            let total: crate::clock::VirtualDuration = outputs.iter().map(|o| o.latency.stages()[k].1).sum();
            (name.to_string(), total.as_ms() / n)
        })
        .collect();
    let batches: usize = outputs.iter().map(|o| o.latency.mini_batches).sum();
    stages.push(("mini_batches".into(), batches as f64 / n));
    stages
}

/// Replays `trace` through one pipeline. Updates in the trace are applied
/// and drained into the nearline path before the next request. Counters are
/// reset at the start, so the report covers this run only.
pub fn run_benchmark(engine: &Engine, trace: &[TraceEntry], kind: PipelineKind, mode: BenchMode) -> Result<LatencyReport> {
    engine.reset_counters();
    let cfg = engine.config();
    let (latencies, outputs) = match mode {
        BenchMode::Virtual => {
            let mut outputs = Vec::new();
            for entry in trace {
                match entry {
                    TraceEntry::Update(ev) => {
                        engine.ingest_update(ev)?;
                        engine.drain_nearline()?;
                    }
                    TraceEntry::Request(r) => outputs.push(engine.run(kind, r)?),
                }
            }
            let lat = outputs.iter().map(|o| o.latency.total.as_ms()).collect::<Vec<_>>();
            (lat, outputs)
        }
        BenchMode::Wall => run_wall(engine, trace, kind)?,
    };
    let mut report = LatencyReport::from_latencies(kind, mode, &latencies);
    report.max_qps = max_qps(&latencies, cfg.workers, cfg.sla_p99_ms, cfg.seed);
    report.stages = stage_means(&outputs);
    report.counters = engine.counters().pairs().into_iter().map(|(k, v)| (k.to_string(), v)).collect();
    Ok(report)
}

/// Runs requests on `workers` threads. An update in the trace is a barrier:
/// requests before it finish, then it is applied and drained.
fn run_wall(engine: &Engine, trace: &[TraceEntry], kind: PipelineKind) -> Result<(Vec<f64>, Vec<PipelineOutput>)> {
    let mut latencies = Vec::new();
    let mut outputs = Vec::new();
    let mut segment: Vec<&Request> = Vec::new();
    for entry in trace {
        match entry {
            TraceEntry::Request(r) => segment.push(r),
            TraceEntry::Update(ev) => {
                run_segment(engine, &std::mem::take(&mut segment), kind, &mut latencies, &mut outputs)?;
                engine.ingest_update(ev)?;
                engine.drain_nearline()?;
            }
        }
    }
    run_segment(engine, &segment, kind, &mut latencies, &mut outputs)?;
    Ok((latencies, outputs))
}

fn run_segment(
    engine: &Engine,
    requests: &[&Request],
    kind: PipelineKind,
    latencies: &mut Vec<f64>,
    outputs: &mut Vec<PipelineOutput>,
) -> Result<()> {
    let workers = engine.config().workers.clamp(1, requests.len().max(1));
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<(usize, Result<(f64, PipelineOutput)>)>> = Mutex::new(Vec::new());
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(r) = requests.get(i) else { break };
                let start = Instant::now();
                let out = match kind {
                    PipelineKind::Sequential => engine.run_sequential(r),
                    PipelineKind::Aif => engine.run_aif_concurrent(r),
                };
                let ms = start.elapsed().as_secs_f64() * 1000.0;
                results.lock().push((i, out.map(|o| (ms, o))));
            });
        }
    });
    let mut results = results.into_inner();
    results.sort_by_key(|(i, _)| *i);
    for (_, r) in results {
        let (ms, o) = r?;
        latencies.push(ms);
        outputs.push(o);
    }
    Ok(())
}
