use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::math::DenseMatrix;

/// Hashed-bucket embedding table standing in for trained parameters.
///
/// Row `b` is drawn from a ChaCha8 stream keyed by `(seed, b)`, so
/// `lookup(id)` depends only on `(seed, bucket_count, id)`. Entries are uniform
/// on `[-a, a)` with `a = min(0.5, 9 / sqrt(dim))`, which keeps every norm
/// below 10.
#[derive(Clone)]
pub struct EmbeddingTable {
    bucket_count: u64,
    dim: usize,
    seed: u64,
    data: Vec<f32>,
}

impl std::fmt::Debug for EmbeddingTable {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("EmbeddingTable")
            .field("bucket_count", &self.bucket_count)
            .field("dim", &self.dim)
            .field("seed", &self.seed)
            .finish()
    }
}

impl EmbeddingTable {
    pub fn new(bucket_count: u64, dim: usize, seed: u64) -> Self {
        assert!(bucket_count > 0 && dim > 0, "empty embedding table");
        let amp = 0.5f32.min(9.0 / (dim as f32).sqrt());
        let mut data = Vec::with_capacity(bucket_count as usize * dim);
        for bucket in 0..bucket_count {
            data.extend(Self::bucket_row(seed, bucket, dim, amp));
        }
        Self {
            bucket_count,
            dim,
            seed,
            data,
        }
    }

    fn bucket_row(seed: u64, bucket: u64, dim: usize, amp: f32) -> impl Iterator<Item = f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(bucket);
        (0..dim).map(move |_| rng.random_range(-amp..amp))
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn bucket_count(&self) -> u64 {
        self.bucket_count
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn row(&self, feature_id: u64) -> &[f32] {
        let b = (feature_id % self.bucket_count) as usize;
        &self.data[b * self.dim..(b + 1) * self.dim]
    }

    pub fn lookup(&self, feature_id: u64) -> DenseMatrix {
        DenseMatrix::from_raw(1, self.dim, self.row(feature_id).to_vec())
    }
}
