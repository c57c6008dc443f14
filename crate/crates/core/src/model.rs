//! Model parameters shared by the sequential and asynchronous pipelines.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::bea::BridgeSet;
use crate::config::AifConfig;
use crate::math::{Activation, DenseMatrix, Layer};

/// Width of the score-head input for `cfg`. Column order:
///
/// ```text
/// [ u_self (d) | u_profile_attn (d) | item vector (d) | bea v̂ (d') |
///   lsh-din (d) | simtier fractions (N) | raw item embedding (d_item) ]
/// ```
pub fn head_input_dim(cfg: &AifConfig) -> usize {
    4 * cfg.model_dim + cfg.bea_out_dim + cfg.tiers + cfg.item_dim()
}

#[derive(Debug, Clone)]
pub struct ModelParams {
    pub version: u64,
    /// `d × d_user`
    pub w_profile: DenseMatrix,
    /// `d × d_user`, shared by the short sequence and the long-term DIN
    pub w_seq: DenseMatrix,
    /// FFN after self-attention: `d → d` relu, `d → d`.
    pub user_ffn: Vec<Layer>,
    /// Item reduction: `d_item → hidden` relu, `hidden → d`.
    pub item_mlp: Vec<Layer>,
    pub bridges: BridgeSet,
    /// Shared user-side BEA network `f`: `d → d` relu, `d → d'`.
    pub bea_f: Vec<Layer>,
    /// Score head: `input → hidden` relu, `hidden → 1`, then sigmoid.
    pub head: Vec<Layer>,
}

fn dense(rng: &mut ChaCha8Rng, out: usize, input: usize, act: Activation) -> Layer {
    let bound = (3.0 / input as f32).sqrt();
    let w = (0..out * input).map(|_| rng.random_range(-bound..bound)).collect();
    let b = (0..out).map(|_| rng.random_range(-0.05..0.05)).collect();
    Layer::new(DenseMatrix::from_raw(out, input, w), b, act).expect("consistent layer dims")
}

fn projection(rng: &mut ChaCha8Rng, out: usize, input: usize) -> DenseMatrix {
    let bound = (3.0 / input as f32).sqrt();
    DenseMatrix::from_raw(
        out,
        input,
        (0..out * input).map(|_| rng.random_range(-bound..bound)).collect(),
    )
}

impl ModelParams {
    /// Seeded parameters for `version`; different versions draw different
    /// weights from the same base seed.
    pub fn init(cfg: &AifConfig, version: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.model_seed);
        rng.set_stream(version);
        let (d, du) = (cfg.model_dim, cfg.user_dim());
        let w_profile = projection(&mut rng, d, du);
        let w_seq = projection(&mut rng, d, du);
        let user_ffn = vec![
            dense(&mut rng, d, d, Activation::Relu),
            dense(&mut rng, d, d, Activation::Identity),
        ];
        let item_mlp = vec![
            dense(&mut rng, cfg.item_hidden_dim, cfg.item_dim(), Activation::Relu),
            dense(&mut rng, d, cfg.item_hidden_dim, Activation::Identity),
        ];
        let bridge_rows = (0..cfg.bridges * d).map(|_| rng.sample(StandardNormal)).collect();
        let bridges = BridgeSet::new(DenseMatrix::from_raw(cfg.bridges, d, bridge_rows), version)
            .expect("at least one bridge");
        let bea_f = vec![
            dense(&mut rng, d, d, Activation::Relu),
            dense(&mut rng, cfg.bea_out_dim, d, Activation::Identity),
        ];
        let head = vec![
            dense(&mut rng, cfg.head_hidden_dim, head_input_dim(cfg), Activation::Relu),
            dense(&mut rng, 1, cfg.head_hidden_dim, Activation::Identity),
        ];
        Self {
            version,
            w_profile,
            w_seq,
            user_ffn,
            item_mlp,
            bridges,
            bea_f,
            head,
        }
    }

    pub fn model_dim(&self) -> usize {
        self.w_seq.rows()
    }
}
