//! Long-term behavior modeling over LSH signatures.
//!
//! Multi-modal item embeddings are hashed with random hyperplanes into
//! `d'`-bit signatures, packed eight bits per byte. Similarity between two
//! signatures is the fraction of agreeing bits, computed bytewise as
//! `lut[255 - (a ^ b)]` where `lut` is a popcount table. The similarity matrix
//! between candidates and a behavior subsequence feeds both the DIN-style
//! weighted sum and the SimTier histogram.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::codec::{ByteReader, ByteWriter};
use crate::error::{AifError, Result};
use crate::features::{normalize_embedding, FeatureStore, ItemUpdateEvent};
use crate::math::{matmul, DenseMatrix};

/// Random hyperplanes `W_hash`, `d' × d_mm`, drawn from a standard normal.
#[derive(Debug, Clone, PartialEq)]
pub struct HashPlane {
    w: DenseMatrix,
    seed: u64,
}

impl HashPlane {
    pub fn new(bits: usize, mm_dim: usize, seed: u64) -> Result<Self> {
        if bits == 0 || bits % 8 != 0 {
            return Err(AifError::shape("hash_plane", format!("d' = {bits} is not a positive multiple of 8")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..bits * mm_dim).map(|_| rng.sample(StandardNormal)).collect();
        Ok(Self {
            w: DenseMatrix::from_raw(bits, mm_dim, data),
            seed,
        })
    }

    pub fn bits(&self) -> usize {
        self.w.rows()
    }

    pub fn input_dim(&self) -> usize {
        self.w.cols()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn matrix(&self) -> &DenseMatrix {
        &self.w
    }
}

/// Bit `k` is set iff `m · W_hash[k] > 0`; a zero projection gives 0.
pub fn lsh_hash(m: &[f32], plane: &HashPlane) -> Result<Vec<bool>> {
    if m.len() != plane.input_dim() {
        return Err(AifError::shape(
            "lsh_hash",
            format!("embedding of {} for planes over {}", m.len(), plane.input_dim()),
        ));
    }
    Ok((0..plane.bits())
        .map(|k| {
            let dot: f64 = m
                .iter()
                .zip(plane.w.row(k))
                .map(|(&a, &b)| f64::from(a) * f64::from(b))
                .sum();
            dot > 0.0
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct PackedSignature {
    bytes: Vec<u8>,
}

impl PackedSignature {
    pub fn from_bytes(bytes: Vec<u8>) -> Self {
        Self { bytes }
    }

    pub fn bytes(&self) -> &[u8] {
        &self.bytes
    }

    pub fn bits(&self) -> usize {
        self.bytes.len() * 8
    }

    pub fn complement(&self) -> Self {
        Self {
            bytes: self.bytes.iter().map(|b| !b).collect(),
        }
    }
}

/// Packs bits most-significant first: `[0,0,1,1,0,1,0,1]` becomes `53`.
pub fn pack(bits: &[bool]) -> Result<PackedSignature> {
    if bits.len() % 8 != 0 {
        return Err(AifError::shape("pack", format!("{} bits is not a multiple of 8", bits.len())));
    }
    let bytes = bits
        .chunks_exact(8)
        .map(|c| c.iter().fold(0u8, |acc, &b| (acc << 1) | u8::from(b)))
        .collect();
    Ok(PackedSignature { bytes })
}

pub fn unpack(sig: &PackedSignature) -> Vec<bool> {
    sig.bytes
        .iter()
        .flat_map(|&b| (0..8).rev().map(move |i| (b >> i) & 1 == 1))
        .collect()
}

/// `lut[k]` = number of set bits in `k`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PopcountLut([u8; 256]);

impl Default for PopcountLut {
    fn default() -> Self {
        Self::new()
    }
}

impl PopcountLut {
    pub fn new() -> Self {
        let mut t = [0u8; 256];
        for k in 1..256 {
            t[k] = t[k >> 1] + (k & 1) as u8;
        }
        Self(t)
    }

    pub fn get(&self, k: u8) -> u8 {
        self.0[usize::from(k)]
    }

    pub fn table(&self) -> &[u8; 256] {
        &self.0
    }
}

/// Fraction of agreeing bits, via XNOR popcounts.
pub fn similarity(a: &PackedSignature, b: &PackedSignature, lut: &PopcountLut) -> Result<f32> {
    if a.bytes.len() != b.bytes.len() {
        return Err(AifError::shape(
            "similarity",
            format!("{} vs {} bytes", a.bytes.len(), b.bytes.len()),
        ));
    }
    if a.bytes.is_empty() {
        return Err(AifError::shape("similarity", "empty signatures"));
    }
    let agree: u32 = a
        .bytes
        .iter()
        .zip(&b.bytes)
        .map(|(&x, &y)| u32::from(lut.get(255 - (x ^ y))))
        .sum();
    Ok(agree as f32 / a.bits() as f32)
}

/// `M_sim[i][j] = similarity(items[i], seq[j])`, `b × L`.
pub fn similarity_matrix(
    items: &[PackedSignature],
    seq: &[PackedSignature],
    lut: &PopcountLut,
) -> Result<DenseMatrix> {
    let mut data = Vec::with_capacity(items.len() * seq.len());
    for a in items {
        for s in seq {
            data.push(similarity(a, s, lut)?);
        }
    }
    Ok(DenseMatrix::from_raw(items.len(), seq.len(), data))
}

/// `M_sim · (U_seq · W_seqᵀ)`.
pub fn lsh_din(u_seq: &DenseMatrix, m_sim: &DenseMatrix, w_seq: &DenseMatrix) -> Result<DenseMatrix> {
    if m_sim.cols() != u_seq.rows() {
        return Err(AifError::shape(
            "lsh_din",
            format!("M_sim has {} columns for a sequence of {}", m_sim.cols(), u_seq.rows()),
        ));
    }
    let projected = matmul(u_seq, w_seq, true)?;
    matmul(m_sim, &projected, false)
}

/// Counts of scores per tier. Tier `i` (0-based) covers `[i/N, (i+1)/N)`,
/// except the top tier which also includes 1.0.
pub fn simtier(row: &[f32], tiers: usize) -> Result<Vec<u32>> {
    if tiers == 0 {
        return Err(AifError::Contract("simtier needs at least one tier".into()));
    }
    let mut counts = vec![0u32; tiers];
    for &s in row {
        counts[tier_of(s, tiers)?] += 1;
    }
    Ok(counts)
}

fn tier_of(s: f32, tiers: usize) -> Result<usize> {
    if !(0.0..=1.0).contains(&s) {
        return Err(AifError::Contract(format!("similarity {s} outside [0, 1]")));
    }
    let s = f64::from(s);
    let n = tiers as f64;
    let mut t = (s * n).floor() as usize;
    // floor(s*N) can land one off near a boundary; settle it with exact compares
    while t > 0 && s < t as f64 / n {
        t -= 1;
    }
    while t + 1 < tiers && s >= (t + 1) as f64 / n {
        t += 1;
    }
    Ok(t.min(tiers - 1))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComplexityRow {
    pub method: &'static str,
    pub multiply_adds: u64,
    /// Saving against the first row, in percent.
    pub reduction_pct: f64,
}

/// Attention and similarity cost of the long-term behavior variants over `b`
/// candidates and a sequence of `l`.
pub fn complexity_report(b: u64, l: u64, d_id: u64, d_mm: u64, d_lsh: u64) -> Vec<ComplexityRow> {
    let rows = [
        ("DIN + SimTier", d_id + d_mm),
        ("LSH-DIN + SimTier", d_lsh + d_mm),
        ("DIN + LSH-SimTier", d_id + d_lsh),
        ("MM-DIN + SimTier", d_mm),
        ("LSH-DIN + LSH-SimTier (AIF)", d_lsh),
    ];
    let base = b * l * (d_id + d_mm);
    rows.iter()
        .map(|&(method, width)| {
            let macs = b * l * width;
            ComplexityRow {
                method,
                multiply_adds: macs,
                reduction_pct: if base == 0 {
                    0.0
                } else {
                    100.0 * (base - macs) as f64 / base as f64
                },
            }
        })
        .collect()
}

pub const SIGNATURE_MAGIC: &[u8; 4] = b"LSH1";

/// Item signatures keyed by item id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SignatureTable {
    bits: usize,
    entries: BTreeMap<u64, PackedSignature>,
}

impl SignatureTable {
    pub fn new(bits: usize) -> Self {
        Self {
            bits,
            entries: BTreeMap::new(),
        }
    }

    /// Hashes every item currently in the store.
    pub fn build(store: &FeatureStore, plane: &HashPlane) -> Result<Self> {
        let mut table = Self::new(plane.bits());
        for item in store.items() {
            table.insert(item.item_id, &item.mm_embedding, plane)?;
        }
        Ok(table)
    }

    pub fn bits(&self) -> usize {
        self.bits
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, item_id: u64) -> Option<&PackedSignature> {
        self.entries.get(&item_id)
    }

    pub fn contains(&self, item_id: u64) -> bool {
        self.entries.contains_key(&item_id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (u64, &PackedSignature)> {
        self.entries.iter().map(|(&k, v)| (k, v))
    }

    pub fn insert(&mut self, item_id: u64, mm: &[f32], plane: &HashPlane) -> Result<()> {
        let sig = pack(&lsh_hash(mm, plane)?)?;
        self.entries.insert(item_id, sig);
        Ok(())
    }

    /// Rehashes the event's item if it carries a new multi-modal embedding.
    /// Returns whether anything changed.
    pub fn signature_update(&mut self, event: &ItemUpdateEvent, plane: &HashPlane) -> Result<bool> {
        match &event.new_mm_embedding {
            Some(mm) => {
                self.insert(event.item_id, &normalize_embedding(mm), plane)?;
                Ok(true)
            }
            None => Ok(false),
        }
    }

    /// `"LSH1"`, u32 d', u64 count, then per record u64 item_id and d'/8 bytes.
    pub fn encode(&self) -> Vec<u8> {
        let mut w = ByteWriter::new();
        w.bytes(SIGNATURE_MAGIC)
            .u32(self.bits as u32)
            .u64(self.entries.len() as u64);
        for (&id, sig) in &self.entries {
            w.u64(id).bytes(&sig.bytes);
        }
        w.finish()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        r.magic(SIGNATURE_MAGIC)?;
        let bits = r.u32()? as usize;
        if bits % 8 != 0 {
            return Err(AifError::Format(format!("signature width {bits} is not a multiple of 8")));
        }
        let count = r.u64()?;
        let mut table = Self::new(bits);
        for _ in 0..count {
            let id = r.u64()?;
            let sig = PackedSignature::from_bytes(r.take(bits / 8)?.to_vec());
            table.entries.insert(id, sig);
        }
        r.finish()?;
        Ok(table)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.encode())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::decode(&std::fs::read(path)?)
    }
}

fn random_unit(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-9 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// A random unit pair at angle `theta`, rounded to f32. Returns the pair and
/// the angle actually realized after rounding.
pub fn unit_pair_at_angle(rng: &mut ChaCha8Rng, dim: usize, theta: f64) -> (Vec<f32>, Vec<f32>, f64) {
    let u = random_unit(rng, dim);
    let w = loop {
        let r = random_unit(rng, dim);
        let proj: f64 = r.iter().zip(&u).map(|(a, b)| a * b).sum();
        let orth: Vec<f64> = r.iter().zip(&u).map(|(a, b)| a - proj * b).collect();
        let norm = orth.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            break orth.into_iter().map(|x| x / norm).collect::<Vec<_>>();
        }
    };
    let v: Vec<f64> = u
        .iter()
        .zip(&w)
        .map(|(a, b)| theta.cos() * a + theta.sin() * b)
        .collect();
    let uf: Vec<f32> = normalize_embedding(&u.iter().map(|&x| x as f32).collect::<Vec<_>>());
    let vf: Vec<f32> = normalize_embedding(&v.iter().map(|&x| x as f32).collect::<Vec<_>>());
    let dot: f64 = uf.iter().zip(&vf).map(|(&a, &b)| f64::from(a) * f64::from(b)).sum();
    let nu: f64 = uf.iter().map(|&a| f64::from(a).powi(2)).sum::<f64>().sqrt();
    let nv: f64 = vf.iter().map(|&a| f64::from(a).powi(2)).sum::<f64>().sqrt();
    (uf, vf, (dot / (nu * nv)).clamp(-1.0, 1.0).acos())
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationBucket {
    pub theta_lo: f64,
    pub theta_hi: f64,
    pub pairs: usize,
    pub mean_theta: f64,
    pub mean_similarity: f64,
    /// Mean of `1 - θ/π` over the bucket's pairs.
    pub mean_theory: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationReport {
    pub bits: usize,
    pub mm_dim: usize,
    pub pairs: usize,
    pub buckets: Vec<CalibrationBucket>,
    /// Pair-weighted mean over buckets of `|mean similarity - mean theory|`.
    pub bucket_error: f64,
    /// `mean(similarity) - mean(1 - θ/π)` over all pairs.
    pub mean_bias: f64,
    /// Mean over pairs of `|similarity - (1 - θ/π)|`. Includes the binomial
    /// spread of a single `d'`-bit estimate, roughly `0.8·sqrt(p(1-p)/d')`.
    pub pair_mean_abs_dev: f64,
}

/// Measures how closely signature similarity tracks `1 - θ/π`. Angles are
/// drawn uniformly on `[0, π]` so every bucket is populated; one plane set is
/// shared by all pairs.
pub fn calibrate(bits: usize, mm_dim: usize, pairs: usize, buckets: usize, seed: u64) -> Result<CalibrationReport> {
    if buckets == 0 {
        return Err(AifError::Precondition("calibration needs at least one bucket".into()));
    }
    let plane = HashPlane::new(bits, mm_dim, seed)?;
    let lut = PopcountLut::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_ca11);
    let mut acc = vec![(0usize, 0.0f64, 0.0f64, 0.0f64); buckets];
    let (mut sum_sim, mut sum_theory, mut sum_abs) = (0.0, 0.0, 0.0);
    for _ in 0..pairs {
        let target = rng.random_range(0.0..PI);
        let (u, v, theta) = unit_pair_at_angle(&mut rng, mm_dim, target);
        let s = f64::from(similarity(&pack(&lsh_hash(&u, &plane)?)?, &pack(&lsh_hash(&v, &plane)?)?, &lut)?);
        let theory = 1.0 - theta / PI;
        let b = ((theta / PI * buckets as f64) as usize).min(buckets - 1);
        acc[b].0 += 1;
        acc[b].1 += theta;
        acc[b].2 += s;
        acc[b].3 += theory;
        sum_sim += s;
        sum_theory += theory;
        sum_abs += (s - theory).abs();
    }
    let width = PI / buckets as f64;
    let buckets: Vec<CalibrationBucket> = acc
        .iter()
        .enumerate()
        .map(|(i, &(n, t, s, th))| {
            let k = n.max(1) as f64;
            CalibrationBucket {
                theta_lo: i as f64 * width,
                theta_hi: (i + 1) as f64 * width,
                pairs: n,
                mean_theta: t / k,
                mean_similarity: s / k,
                mean_theory: th / k,
            }
        })
        .collect();
    let total = pairs.max(1) as f64;
    let bucket_error = buckets
        .iter()
        .map(|b| b.pairs as f64 * (b.mean_similarity - b.mean_theory).abs())
        .sum::<f64>()
        / total;
    Ok(CalibrationReport {
        bits,
        mm_dim,
        pairs,
        buckets,
        bucket_error,
        mean_bias: (sum_sim - sum_theory) / total,
        pair_mean_abs_dev: sum_abs / total,
    })
}

impl CalibrationReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("theta_lo,theta_hi,pairs,mean_theta,mean_similarity,theory,abs_error\n");
        for b in &self.buckets {
            let _ = writeln!(
                out,
                "{:.6},{:.6},{},{:.6},{:.6},{:.6},{:.6}",
                b.theta_lo,
                b.theta_hi,
                b.pairs,
                b.mean_theta,
                b.mean_similarity,
                b.mean_theory,
                (b.mean_similarity - b.mean_theory).abs()
            );
        }
        out
    }
}
