//! Acceptance criteria. Each test prints one `PASS`/`FAIL` line with the
//! measured value and the pinned tolerance, then asserts.

use std::collections::{BTreeSet, VecDeque};
use std::time::Instant;

use aif::bea::{bea_item_phase, bea_serve, bea_user_phase, BridgeSet};
use aif::bench::{generate_workload, run_benchmark, BenchMode};
use aif::clock::VirtualDuration;
use aif::config::AifConfig;
use aif::features::{random_update_events, FeatureStore};
use aif::lsh::{calibrate, complexity_report, pack, similarity, PackedSignature, PopcountLut};
use aif::math::{count_macs, matmul, mlp_forward, softmax_rows, Activation, DenseMatrix, Layer};
use aif::model::ModelParams;
use aif::nearline::N2OIndexTable;
use aif::pipeline::{
    copr_loss_values, delta_ndcg, equivalence_check, finite_difference_gradient, toy_train, CoprToyModel, Engine,
    Objective, PipelineKind, Relevance, Request, TraceEntry,
};
use aif::precache::{LruCache, LruEvent};
use aif::user_async::{decode_transport, encode_transport, AsyncUserVector, CacheKey};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const REDUCTION_TOL: f64 = 1e-12;
const ANGULAR_TOL: f64 = 0.02;
const EQUIVALENCE_TOL: f64 = 1e-6;
const BEA_TOL: f32 = 1e-6;
const COPR_INDIFFERENCE_TOL: f64 = 1e-9;
const COPR_GRADIENT_TOL: f64 = 1e-3;
const COPR_DESCENT_FRACTION: f64 = 0.8;

fn verdict(name: &str, ok: bool, detail: impl std::fmt::Display) {
    println!("{} {name}: {detail}", if ok { "PASS" } else { "FAIL" });
    assert!(ok, "{name}: {detail}");
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DenseMatrix {
    DenseMatrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

#[test]
fn complexity_reductions() {
    let t = Instant::now();
    let d_lsh = 32;
    let rows = complexity_report(1024, 4096, 8 * d_lsh, 8 * d_lsh, d_lsh);
    let expected = [0.0, 43.75, 43.75, 50.0, 93.75];
    let worst = rows
        .iter()
        .zip(expected)
        .map(|(r, e)| (r.reduction_pct - e).abs())
        .fold(0.0, f64::max);
    let got: Vec<String> = rows.iter().map(|r| format!("{}={}%", r.method, r.reduction_pct)).collect();
    verdict(
        "complexity-reductions",
        worst <= REDUCTION_TOL && t.elapsed().as_secs_f64() < 1.0,
        format!("{} (max error {worst:e}, tol {REDUCTION_TOL:e})", got.join(", ")),
    );
}

#[test]
fn packing_example() {
    let bits = [false, false, true, true, false, true, false, true];
    let byte = pack(&bits).unwrap().bytes()[0];
    verdict("packing-example", byte == 53, format!("00110101 -> {byte} (expected 53)"));
}

fn per_bit_similarity(a: &[u8], b: &[u8]) -> f32 {
    let mut agree = 0u32;
    for (x, y) in a.iter().zip(b) {
        for k in 0..8 {
            if (x >> k) & 1 == (y >> k) & 1 {
                agree += 1;
            }
        }
    }
    agree as f32 / (8 * a.len()) as f32
}

#[test]
fn packed_similarity_oracle() {
    let t = Instant::now();
    let lut = PopcountLut::new();
    let mut mismatches = 0usize;
    for a in 0..=255u8 {
        for b in 0..=255u8 {
            let s = similarity(&PackedSignature::from_bytes(vec![a]), &PackedSignature::from_bytes(vec![b]), &lut).unwrap();
            if s.to_bits() != per_bit_similarity(&[a], &[b]).to_bits() {
                mismatches += 1;
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for _ in 0..1000 {
        let len = rng.random_range(2..=32);
        let a: Vec<u8> = (0..len).map(|_| rng.random()).collect();
        let b: Vec<u8> = (0..len).map(|_| rng.random()).collect();
        let s = similarity(&PackedSignature::from_bytes(a.clone()), &PackedSignature::from_bytes(b.clone()), &lut).unwrap();
        if s.to_bits() != per_bit_similarity(&a, &b).to_bits() {
            mismatches += 1;
        }
    }
    let secs = t.elapsed().as_secs_f64();
    verdict(
        "packed-similarity-oracle",
        mismatches == 0 && secs < 5.0,
        format!("65536 byte pairs + 1000 multi-byte pairs, {mismatches} mismatches, {secs:.2}s"),
    );
}

#[test]
fn lsh_angular_fidelity() {
    let t = Instant::now();
    let r = calibrate(128, 64, 10_000, 20, 2024).unwrap();
    let secs = t.elapsed().as_secs_f64();
    verdict(
        "lsh-angular-fidelity",
        r.bucket_error <= ANGULAR_TOL && secs < 30.0,
        format!(
            "bucket error {:.5} (tol {ANGULAR_TOL}), mean bias {:+.5}, per-pair mean |dev| {:.5}, {secs:.1}s",
            r.bucket_error, r.mean_bias, r.pair_mean_abs_dev
        ),
    );
}

#[test]
fn pipeline_score_equivalence() {
    let t = Instant::now();
    let cfg = AifConfig::default();
    assert_eq!(cfg.candidates, 1024);
    let engine = Engine::new(&cfg).unwrap();
    let trace: Vec<TraceEntry> = generate_workload(cfg.num_users, 1000, cfg.arrival_rate_qps, 99)
        .unwrap()
        .into_iter()
        .map(TraceEntry::Request)
        .collect();
    let report = equivalence_check(&engine, &trace, true).unwrap();
    let secs = t.elapsed().as_secs_f64();
    let (diff, agreement) = (report.max_abs_diff(), report.min_rank_agreement());
    verdict(
        "pipeline-score-equivalence",
        report.comparisons.len() == 1000 && diff <= EQUIVALENCE_TOL && agreement == 1.0 && secs < 300.0,
        format!(
            "{} requests, b=1024, max |diff| {diff:e} (tol {EQUIVALENCE_TOL:e}), min rank agreement {:.1}%, {secs:.0}s",
            report.comparisons.len(),
            agreement * 100.0
        ),
    );
}

#[test]
fn redundancy_counters() {
    let mut cfg = AifConfig::small();
    cfg.costs.mini_batch_size = cfg.candidates / 4;
    let engine = Engine::new(&cfg).unwrap();
    let requests = generate_workload(cfg.num_users, 100, 50.0, 5).unwrap();
    for r in &requests {
        engine.run_sequential(r).unwrap();
        engine.run_aif(r).unwrap();
    }
    let before = engine.counters();
    let updates = random_update_events(engine.store(), 25, 6);
    for u in &updates {
        engine.ingest_update(u).unwrap();
        engine.drain_nearline().unwrap();
    }
    for r in requests.iter().take(10) {
        let r = Request { request_id: r.request_id + 1000, ..*r };
        engine.run_aif(&r).unwrap();
    }
    let after = engine.counters();
    let batch_sum = 100 * cfg.candidates as u64;
    let ok = before.seq_user_forwards == 400
        && before.aif_user_forwards == 100
        && before.aif_item_forwards == 0
        && before.seq_item_forwards == batch_sum
        && after.aif_item_forwards == updates.len() as u64
        && after.n2o_misses == 0;
    verdict(
        "redundancy-counters",
        ok,
        format!(
            "sequential user forwards {} (expect 400), AIF user forwards {} (expect 100), \
             sequential item forwards {} (expect {batch_sum}), AIF item forwards {} before / {} after {} updates",
            before.seq_user_forwards,
            before.aif_user_forwards,
            before.seq_item_forwards,
            before.aif_item_forwards,
            after.aif_item_forwards,
            updates.len()
        ),
    );
}

/// Closed-form latency from stage costs, the candidate categories and the
/// user's subsequence lengths.
fn oracle_latency(engine: &Engine, r: &Request, precache: bool) -> (VirtualDuration, VirtualDuration) {
    let c = &engine.config().costs;
    let ms = VirtualDuration::from_ms;
    let lengths = engine.subsequence_lengths(r.user_id);
    let ids = engine.retrieve(r);
    let mut seq = ms(c.retrieval_ms);
    let mut aif_batches = VirtualDuration::ZERO;
    for batch in ids.chunks(c.mini_batch_size) {
        let cats: BTreeSet<u64> = batch.iter().map(|id| engine.store().item(*id).unwrap().category_id).collect();
        let parse: VirtualDuration = cats.iter().filter_map(|k| lengths.get(k)).map(|&l| c.parse_cost(l)).sum();
        seq += ms(c.user_feature_fetch_ms)
            + ms(c.user_forward_ms)
            + ms(c.item_feature_fetch_ms)
            + ms(c.item_forward_ms)
            + parse
            + ms(c.prerank_forward_ms);
        aif_batches += ms(c.item_feature_fetch_ms) + ms(c.prerank_forward_ms);
        if !precache {
            aif_batches += parse;
        }
    }
    let prefetch: VirtualDuration = if precache {
        lengths.values().map(|&l| c.parse_cost(l)).sum()
    } else {
        VirtualDuration::ZERO
    };
    let user_path = ms(c.user_feature_fetch_ms) + ms(c.user_forward_ms) + prefetch;
    (seq, ms(c.retrieval_ms).max(user_path) + aif_batches)
}

#[test]
fn latency_overlap_law() {
    let mut checked = 0;
    let mut failures = 0;
    let mut both_regimes = [false; 2];
    for (user_fetch, batch) in [(4.0, 1000), (45.0, 50), (12.5, 64)] {
        let mut cfg = AifConfig::small();
        cfg.costs.user_feature_fetch_ms = user_fetch;
        cfg.costs.mini_batch_size = batch;
        for precache in [true, false] {
            cfg.sim_precache = precache;
            let engine = Engine::new(&cfg).unwrap();
            for r in generate_workload(cfg.num_users, 20, 50.0, 8).unwrap() {
                let (seq_oracle, aif_oracle) = oracle_latency(&engine, &r, precache);
                let seq = engine.run_sequential(&r).unwrap().latency;
                let aif = engine.run_aif(&r).unwrap().latency;
                both_regimes[usize::from(aif.user_path > aif.retrieval)] = true;
                checked += 2;
                failures += usize::from(seq.total != seq_oracle) + usize::from(aif.total != aif_oracle);
            }
        }
    }
    verdict(
        "latency-overlap-law",
        failures == 0 && both_regimes == [true, true],
        format!("{checked} request latencies against the closed form, {failures} mismatches (exact, integer ns)"),
    );
}

#[test]
fn incremental_n2o_consistency() {
    let t = Instant::now();
    let cfg = AifConfig::default();
    let store = FeatureStore::generate(&cfg).unwrap();
    let model = ModelParams::init(&cfg, 1);
    let before = N2OIndexTable::rebuild_full(&store, &model, 0).unwrap();
    let events = random_update_events(&store, 50, 31);
    for e in &events {
        store.apply_item_update(e).unwrap();
    }
    let incremental = before.apply_incremental(&events, &store, &model).unwrap();
    let full = N2OIndexTable::rebuild_full(&store, &model, 0).unwrap();
    let diff = incremental.diff_ids(&full);
    let secs = t.elapsed().as_secs_f64();
    verdict(
        "incremental-n2o-consistency",
        incremental.same_entries(&full) && secs < 60.0,
        format!("50 events, {} entries, {} differing ids (bit-exact), {secs:.1}s", full.len(), diff.len()),
    );
}

/// Reference LRU: a recency queue, least recent at the front.
struct RefLru {
    cap: usize,
    order: VecDeque<u32>,
    trace: Vec<LruEvent<u32>>,
}

impl RefLru {
    fn get(&mut self, k: u32) {
        if let Some(p) = self.order.iter().position(|&x| x == k) {
            self.order.remove(p);
            self.order.push_back(k);
            self.trace.push(LruEvent::Hit(k));
        } else {
            self.trace.push(LruEvent::Miss(k));
        }
    }

    fn insert(&mut self, k: u32) {
        self.trace.push(LruEvent::Insert(k));
        if let Some(p) = self.order.iter().position(|&x| x == k) {
            self.order.remove(p);
        } else if self.order.len() == self.cap {
            let v = self.order.pop_front().unwrap();
            self.trace.push(LruEvent::Evict(v));
        }
        self.order.push_back(k);
    }
}

#[test]
fn lru_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut lru = LruCache::with_trace(16);
    let mut reference = RefLru {
        cap: 16,
        order: VecDeque::new(),
        trace: Vec::new(),
    };
    for _ in 0..10_000 {
        let k = rng.random_range(0..48u32);
        if rng.random_bool(0.6) {
            lru.get(&k);
            reference.get(k);
        } else {
            lru.insert(k, k);
            reference.insert(k);
        }
    }
    let first_diff = lru.trace().iter().zip(&reference.trace).position(|(a, b)| a != b);
    let ok = lru.trace() == reference.trace.as_slice()
        && lru.keys_by_recency() == reference.order.iter().copied().collect::<Vec<_>>();
    let evictions = reference.trace.iter().filter(|e| matches!(e, LruEvent::Evict(_))).count();
    verdict(
        "lru-oracle",
        ok,
        format!(
            "10000 ops, {} trace events, {evictions} evictions, first divergence {first_diff:?}",
            reference.trace.len()
        ),
    );
}

#[test]
fn bea_degeneracy_and_cost() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (d, d_out, b) = (32, 16, 256);
    let f = vec![
        Layer::new(random_matrix(&mut rng, 24, d), vec![0.1; 24], Activation::Relu).unwrap(),
        Layer::new(random_matrix(&mut rng, d_out, 24), vec![-0.05; d_out], Activation::Identity).unwrap(),
    ];
    let u = random_matrix(&mut rng, 20, d);
    let items = random_matrix(&mut rng, b, d);
    let bridge = BridgeSet::new(random_matrix(&mut rng, 1, d), 1).unwrap();
    let served = bea_serve(&bea_item_phase(&bridge, &items).unwrap(), &bea_user_phase(&bridge, &u, &f).unwrap()).unwrap();
    let logits = matmul(bridge.matrix(), &u, true).unwrap().map(|x| x / (d as f32).sqrt());
    let single = mlp_forward(&matmul(&softmax_rows(&logits), &u, false).unwrap(), &f).unwrap();
    let worst = (0..b)
        .flat_map(|i| (0..d_out).map(move |j| (i, j)))
        .map(|(i, j)| (served.get(i, j) - single.get(0, j)).abs())
        .fold(0.0f32, f32::max);

    let n = 8;
    let bridges = BridgeSet::new(random_matrix(&mut rng, n, d), 1).unwrap();
    let weights = bea_item_phase(&bridges, &items).unwrap();
    let mut macs = Vec::new();
    for m in [4, 16, 64] {
        let u = random_matrix(&mut rng, m, d);
        let v = bea_user_phase(&bridges, &u, &f).unwrap();
        let (_, count) = count_macs(|| bea_serve(&weights, &v).unwrap());
        macs.push(count);
    }
    let expected = (b * n * d_out) as u64;
    verdict(
        "bea-degeneracy-and-cost",
        worst <= BEA_TOL && macs.iter().all(|&c| c == expected),
        format!("n=1 max |diff| {worst:e} (tol {BEA_TOL:e}); serving MACs {macs:?} for m=4,16,64 (expect {expected})"),
    );
}

#[test]
fn copr_loss_sanity() {
    // indifference point
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let bids: Vec<f64> = (0..12).map(|_| rng.random_range(0.5..2.5)).collect();
    let y: Vec<f64> = bids.iter().map(|b| 0.3 / b).collect();
    let teacher: Vec<f64> = (0..12).map(|_| rng.random()).collect();
    let rel = Relevance::top_k(&teacher, 10);
    let expect = rel.pairs().map(|(i, j)| delta_ndcg(&rel, i, j)).sum::<f64>() * std::f64::consts::LN_2;
    let indiff = (copr_loss_values(&y, &bids, &rel).unwrap() - expect).abs();

    // gradient on 10 random parameters
    let model = CoprToyModel::synthetic(32, 4, 8, 11);
    let p = model.init_params(12);
    let g = model.gradient(&p);
    let fd = finite_difference_gradient(&model, &p, 1e-6);
    let mut worst = 0.0f64;
    for _ in 0..10 {
        let k = rng.random_range(0..model.dim());
        let rel_err = (g[k] - fd[k]).abs() / g[k].abs().max(fd[k].abs()).max(1e-12);
        worst = worst.max(rel_err);
    }

    // descent
    let report = toy_train(&model, &p, 200, 0.05);
    let ok = indiff <= COPR_INDIFFERENCE_TOL
        && worst <= COPR_GRADIENT_TOL
        && report.non_increasing_fraction >= COPR_DESCENT_FRACTION
        && !report.diverged;
    verdict(
        "copr-loss-sanity",
        ok,
        format!(
            "indifference |err| {indiff:e} (tol {COPR_INDIFFERENCE_TOL:e}); gradient rel err {worst:e} (tol {COPR_GRADIENT_TOL:e}); \
             {:.1}% of 200 steps non-increasing (need {}%), loss {:.4} -> {:.4}",
            report.non_increasing_fraction * 100.0,
            COPR_DESCENT_FRACTION * 100.0,
            report.losses[0],
            report.losses.last().unwrap()
        ),
    );
}

fn special_float(rng: &mut ChaCha8Rng) -> f32 {
    match rng.random_range(0..6) {
        0 => -0.0,
        1 => f32::from_bits(rng.random_range(1..0x0080_0000)),
        2 => -f32::from_bits(rng.random_range(1..0x0080_0000)),
        3 => f32::MIN_POSITIVE,
        _ => rng.random_range(-1e6..1e6),
    }
}

#[test]
fn transport_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut failures = 0;
    let mut specials = 0;
    for i in 0..1000u64 {
        let mut fill = |r: usize, c: usize| {
            let data: Vec<f32> = (0..r * c).map(|_| special_float(&mut rng)).collect();
            specials += data.iter().filter(|x| x.is_subnormal() || x.to_bits() == 0x8000_0000).count();
            DenseMatrix::from_vec(r, c, data).unwrap()
        };
        let v = AsyncUserVector {
            key: CacheKey::new(i, &format!("user-{i}-ü")),
            u_self: fill(1, 32),
            u_profile_attn: fill(1, 32),
            bea_vectors: fill(8, 16),
            created_at: VirtualDuration::from_nanos(i * 1_000_003),
            model_version: i % 5,
        };
        let back = decode_transport(&encode_transport(&v)).unwrap();
        if !back.bit_eq(&v) {
            failures += 1;
        }
    }
    verdict(
        "transport-round-trip",
        failures == 0,
        format!("1000 vectors, {specials} signed-zero/subnormal values, {failures} bit mismatches"),
    );
}

#[test]
fn precache_directional() {
    let cfg = AifConfig::small();
    let trace: Vec<TraceEntry> = generate_workload(cfg.num_users, 60, 50.0, 21)
        .unwrap()
        .into_iter()
        .map(TraceEntry::Request)
        .collect();
    let on = Engine::new(&cfg).unwrap();
    let with = run_benchmark(&on, &trace, PipelineKind::Aif, BenchMode::Virtual).unwrap();
    let hits = with.counter("sim_cache_hits").unwrap();
    let misses = with.counter("sim_cache_misses").unwrap();
    let hittable = hits as f64 / (hits + misses).max(1) as f64;
    let off = Engine::new(&AifConfig { sim_precache: false, ..cfg }).unwrap();
    let without = run_benchmark(&off, &trace, PipelineKind::Aif, BenchMode::Virtual).unwrap();
    verdict(
        "precache-directional",
        hittable >= 0.5 && without.avg_rt_ms > with.avg_rt_ms,
        format!(
            "hittable lookups {:.1}%, avgRT {:.4} ms with pre-cache vs {:.4} ms without ({:+.2}%)",
            hittable * 100.0,
            with.avg_rt_ms,
            without.avg_rt_ms,
            100.0 * (without.avg_rt_ms / with.avg_rt_ms - 1.0)
        ),
    );
}
