//! Bridge Embedding Approximation.
//!
//! `n` bridge rows stand in for candidate items during user-side
//! cross-attention, so the expensive part splits into a user phase (run
//! online next to retrieval) and an item phase (run nearline). Serving is a
//! `b × n` by `n × d'` product.
//!
//! The user phase never sees item data and the item phase never sees user
//! data; the signatures below enforce that.

use crate::error::{AifError, Result};
use crate::math::{attention_weights, matmul, mlp_forward, DenseMatrix, Layer};

/// Bridge embeddings `B` (`n × d`), fixed for one model version.
#[derive(Debug, Clone, PartialEq)]
pub struct BridgeSet {
    rows: DenseMatrix,
    model_version: u64,
}

impl BridgeSet {
    pub fn new(rows: DenseMatrix, model_version: u64) -> Result<Self> {
        if rows.rows() == 0 {
            return Err(AifError::Precondition("bridge set needs n >= 1".into()));
        }
        if !rows.is_finite() {
            return Err(AifError::Precondition("bridge rows must be finite".into()));
        }
        Ok(Self {
            rows,
            model_version,
        })
    }

    pub fn matrix(&self) -> &DenseMatrix {
        &self.rows
    }

    pub fn count(&self) -> usize {
        self.rows.rows()
    }

    pub fn dim(&self) -> usize {
        self.rows.cols()
    }

    pub fn model_version(&self) -> u64 {
        self.model_version
    }

    fn scale(&self) -> f32 {
        (self.dim() as f32).sqrt()
    }
}

/// User phase: `W = softmax(B·Uᵀ/√d)`, then `V = f(W·U)` with `f` shared across
/// bridges. Returns `V` (`n × d'`).
pub fn bea_user_phase(bridges: &BridgeSet, u: &DenseMatrix, f: &[Layer]) -> Result<DenseMatrix> {
    if u.rows() == 0 {
        return Err(AifError::Precondition("BEA user phase needs m >= 1".into()));
    }
    if u.cols() != bridges.dim() {
        return Err(AifError::shape(
            "bea_user_phase",
            format!("user width {} vs bridge width {}", u.cols(), bridges.dim()),
        ));
    }
    let w = attention_weights(bridges.matrix(), u, bridges.scale())?;
    let aggregated = matmul(&w, u, false)?;
    mlp_forward(&aggregated, f)
}

/// Item phase: `ŵ = softmax(I·Bᵀ/√d)` (`b × n`).
pub fn bea_item_phase(bridges: &BridgeSet, items: &DenseMatrix) -> Result<DenseMatrix> {
    if items.cols() != bridges.dim() {
        return Err(AifError::shape(
            "bea_item_phase",
            format!("item width {} vs bridge width {}", items.cols(), bridges.dim()),
        ));
    }
    attention_weights(items, bridges.matrix(), bridges.scale())
}

/// Serving: `v̂ = ŵ·V`. Costs exactly `b·n·d'` multiply-adds.
pub fn bea_serve(weights: &DenseMatrix, v: &DenseMatrix) -> Result<DenseMatrix> {
    if weights.cols() != v.rows() {
        return Err(AifError::shape(
            "bea_serve",
            format!("{} bridge weights vs {} user vectors", weights.cols(), v.rows()),
        ));
    }
    matmul(weights, v, false)
}

/// Reference without bridges: each candidate attends over `U` directly, then
/// the same `f` runs per candidate. Used for cost and approximation studies.
pub fn full_cross_oracle(u: &DenseMatrix, items: &DenseMatrix, f: &[Layer]) -> Result<DenseMatrix> {
    if u.cols() != items.cols() {
        return Err(AifError::shape(
            "full_cross_oracle",
            format!("user width {} vs item width {}", u.cols(), items.cols()),
        ));
    }
    if u.rows() == 0 {
        return Err(AifError::Precondition("full cross needs m >= 1".into()));
    }
    let scale = (u.cols() as f32).sqrt();
    let w = attention_weights(items, u, scale)?;
    let aggregated = matmul(&w, u, false)?;
    mlp_forward(&aggregated, f)
}
