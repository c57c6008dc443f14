use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use super::engine::{Engine, PipelineOutput};
use super::Request;
use crate::error::{AifError, Result};
use crate::features::ItemUpdateEvent;

/// One line of a replay trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TraceEntry {
    Request(Request),
    Update(ItemUpdateEvent),
}

impl TraceEntry {
    /// Writes one JSON object per line.
    pub fn write_jsonl(entries: &[TraceEntry], mut out: impl Write) -> Result<()> {
        for e in entries {
            serde_json::to_writer(&mut out, e).map_err(|err| AifError::Format(err.to_string()))?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    /// Reads a trace written by [`TraceEntry::write_jsonl`]; blank lines are skipped.
    pub fn read_jsonl(input: impl BufRead) -> Result<Vec<TraceEntry>> {
        let mut out = Vec::new();
        for (n, line) in input.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let e = serde_json::from_str(&line).map_err(|err| AifError::Format(format!("trace line {}: {err}", n + 1)))?;
            out.push(e);
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RequestComparison {
    pub request_id: u64,
    pub max_abs_diff: f64,
    /// Fraction of rank positions holding the same item in both rankings.
    pub rank_agreement: f64,
    /// Updates were waiting for the nearline path when the request ran.
    pub stale: bool,
    /// For stale requests, the difference after draining and rerunning.
    pub post_drain_diff: Option<f64>,
}

impl RequestComparison {
    fn ok(&self, tol: f64) -> bool {
        match self.post_drain_diff {
            Some(d) => d <= tol,
            None => self.max_abs_diff <= tol && self.rank_agreement == 1.0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EquivalenceReport {
    pub comparisons: Vec<RequestComparison>,
    pub updates_applied: usize,
}

impl EquivalenceReport {
    fn fresh(&self) -> impl Iterator<Item = &RequestComparison> {
        self.comparisons.iter().filter(|c| !c.stale)
    }

    /// Largest score difference over requests that saw no pending update.
    pub fn max_abs_diff(&self) -> f64 {
        self.fresh().map(|c| c.max_abs_diff).fold(0.0, f64::max)
    }

    /// Smallest rank agreement over requests that saw no pending update.
    pub fn min_rank_agreement(&self) -> f64 {
        self.fresh().map(|c| c.rank_agreement).fold(1.0, f64::min)
    }

    /// Mean rank agreement over requests that saw no pending update.
    pub fn mean_rank_agreement(&self) -> f64 {
        let n = self.fresh().count();
        if n == 0 {
            return 1.0;
        }
        self.fresh().map(|c| c.rank_agreement).sum::<f64>() / n as f64
    }

    pub fn stale_requests(&self) -> usize {
        self.comparisons.iter().filter(|c| c.stale).count()
    }

    /// Every fresh request within `tol` with identical ranking, and every
    /// stale request within `tol` once drained.
    pub fn passed(&self, tol: f64) -> bool {
        self.comparisons.iter().all(|c| c.ok(tol))
    }

    /// `request_id,max_abs_diff,rank_agreement`; stale requests are written
    /// as `#` comment lines.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("request_id,max_abs_diff,rank_agreement\n");
        for c in &self.comparisons {
            if c.stale {
                s.push_str(&format!(
                    "# stale request {}: max_abs_diff={:e} rank_agreement={} post_drain_diff={:e}\n",
                    c.request_id,
                    c.max_abs_diff,
                    c.rank_agreement,
                    c.post_drain_diff.unwrap_or(f64::NAN)
                ));
            } else {
                s.push_str(&format!("{},{:e},{}\n", c.request_id, c.max_abs_diff, c.rank_agreement));
            }
        }
        s
    }
}

/// Maximum absolute score difference and rank agreement between two runs
/// of the same request.
pub fn compare_outputs(a: &PipelineOutput, b: &PipelineOutput) -> Result<(f64, f64)> {
    if a.scored.len() != b.scored.len() || a.scored.iter().zip(&b.scored).any(|(x, y)| x.item_id != y.item_id) {
        return Err(AifError::Consistency(format!(
            "request {} produced different candidate sets",
            a.request_id
        )));
    }
    let diff = a
        .scored
        .iter()
        .zip(&b.scored)
        .map(|(x, y)| (f64::from(x.score) - f64::from(y.score)).abs())
        .fold(0.0, f64::max);
    let (ra, rb) = (a.ranked(), b.ranked());
    let same = ra.iter().zip(&rb).filter(|(x, y)| x.item_id == y.item_id).count();
    let agreement = if ra.is_empty() { 1.0 } else { same as f64 / ra.len() as f64 };
    Ok((diff, agreement))
}

/// Replays `trace` through both pipelines. Updates go to the store at once;
/// with `drain_updates` the nearline path also catches up immediately,
/// otherwise it catches up only when a stale request forces a drain.
pub fn equivalence_check(engine: &Engine, trace: &[TraceEntry], drain_updates: bool) -> Result<EquivalenceReport> {
    let mut report = EquivalenceReport::default();
    for entry in trace {
        match entry {
            TraceEntry::Update(ev) => {
                engine.ingest_update(ev)?;
                if drain_updates {
                    engine.drain_nearline()?;
                }
                report.updates_applied += 1;
            }
            TraceEntry::Request(r) => {
                let stale = engine.pending_updates() > 0;
                let seq = engine.run_sequential(r)?;
                let aif = engine.run_aif(r)?;
                let (max_abs_diff, rank_agreement) = compare_outputs(&seq, &aif)?;
                let post_drain_diff = if stale {
                    engine.drain_nearline()?;
                    let again = engine.run_aif(r)?;
                    Some(compare_outputs(&seq, &again)?.0)
                } else {
                    None
                };
                report.comparisons.push(RequestComparison {
                    request_id: r.request_id,
                    max_abs_diff,
                    rank_agreement,
                    stale,
                    post_drain_diff,
                });
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::AifConfig;
    use crate::features::random_update_events;

    fn requests(n: u64) -> Vec<TraceEntry> {
        (0..n)
            .map(|i| {
                TraceEntry::Request(Request {
                    request_id: i,
                    user_id: i % 8,
                    arrival_ms: i as f64 * 2.0,
                    candidate_seed: 77 + i,
                })
            })
            .collect()
    }

    #[test]
    fn clean_trace_is_equivalent() {
        let e = Engine::new(&AifConfig::small()).unwrap();
        let r = equivalence_check(&e, &requests(5), true).unwrap();
        assert_eq!(r.comparisons.len(), 5);
        assert_eq!(r.max_abs_diff(), 0.0);
        assert_eq!(r.min_rank_agreement(), 1.0);
        assert!(r.passed(1e-6));
    }

    #[test]
    fn undrained_updates_mark_requests_stale() {
        let e = Engine::new(&AifConfig::small()).unwrap();
        let mut trace = requests(4);
        let ups = random_update_events(e.store(), 30, 9);
        trace.splice(2..2, ups.into_iter().map(TraceEntry::Update));
        let r = equivalence_check(&e, &trace, false).unwrap();
        assert_eq!(r.updates_applied, 30);
        assert_eq!(r.stale_requests(), 1);
        assert_eq!(r.comparisons[2].post_drain_diff, Some(0.0));
        assert!(r.passed(1e-6));
        let csv = r.to_csv();
        assert!(csv.lines().any(|l| l.starts_with("# stale request 2")));
    }

    #[test]
    fn trace_round_trips_through_jsonl() {
        let e = Engine::new(&AifConfig::small()).unwrap();
        let mut trace = requests(3);
        trace.extend(random_update_events(e.store(), 3, 1).into_iter().map(TraceEntry::Update));
        let mut buf = Vec::new();
        TraceEntry::write_jsonl(&trace, &mut buf).unwrap();
        let back = TraceEntry::read_jsonl(&buf[..]).unwrap();
        assert_eq!(back, trace);
        assert!(TraceEntry::read_jsonl(&b"{\"kind\":\"nope\"}\n"[..]).is_err());
    }
}
