//! The three neighbor-node approximations: attention skipped on the backward
//! pass, the FFN recomputed from its saved input, and FFN weight gradients
//! projected onto the top right singular subspace of the weight.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{top_r_right_singular_vectors, Matrix, SvdConfig};
use crate::model::{
    ffn_backward, ffn_forward, ActivationCache, BlockGrads, FfnIntermediates, LayerWeights,
    ModelConfig, WeightKind, WgradRule,
};

/// `G_y · (xᵀ·V1) · V1ᵀ` for `g_y: (m × b)`, `x: (n × b)`, `v1: (n × r)`,
/// evaluated in exactly that association order.
pub fn lowrank_wgrad(g_y: &Matrix, x: &Matrix, v1: &Matrix) -> Result<Matrix> {
    if g_y.cols() != x.cols() || x.rows() != v1.rows() {
        return Err(Error::contract(
            "lowrank_wgrad",
            format!("g_y {:?}, x {:?}, v1 {:?}", g_y.shape(), x.shape(), v1.shape()),
        ));
    }
    let xt_v = x.matmul_tn(v1)?;
    g_y.matmul(&xt_v)?.matmul_nt(v1)
}

/// Same product for row-major activation batches: `dy: (b × m)` holds `G_yᵀ`
/// and `x: (b × n)` holds `xᵀ`, so no transposes are materialized.
pub fn lowrank_wgrad_rows(dy: &Matrix, x: &Matrix, v1: &Matrix) -> Result<Matrix> {
    if dy.rows() != x.rows() || x.cols() != v1.rows() {
        return Err(Error::contract(
            "lowrank_wgrad_rows",
            format!("dy {:?}, x {:?}, v1 {:?}", dy.shape(), x.shape(), v1.shape()),
        ));
    }
    let xt_v = x.matmul(v1)?;
    dy.matmul_tn(&xt_v)?.matmul_nt(v1)
}

/// Projection rank. `Full` uses every input dimension, which makes the
/// low-rank product exact.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rank {
    Fixed(usize),
    Full,
}

impl Rank {
    pub fn for_matrix(self, w: &Matrix) -> usize {
        match self {
            Rank::Fixed(r) => r.clamp(1, w.cols()),
            Rank::Full => w.cols(),
        }
    }
}

impl Default for Rank {
    fn default() -> Self {
        Rank::Fixed(4)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
struct LayerProjection {
    step: u64,
    bases: BTreeMap<WeightKind, Matrix>,
}

/// Per-node projection state: one basis per FFN matrix of each layer the
/// node runs in neighbor mode, and that layer's local step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionCache {
    rank: Rank,
    period: u64,
    svd: SvdConfig,
    layers: BTreeMap<usize, LayerProjection>,
    svd_calls: u64,
}

impl ProjectionCache {
    pub fn new(rank: Rank, period: u64, svd: SvdConfig) -> Result<Self> {
        if period == 0 {
            return Err(Error::Config("projection refresh period must be at least 1".into()));
        }
        Ok(ProjectionCache {
            rank,
            period,
            svd,
            layers: BTreeMap::new(),
            svd_calls: 0,
        })
    }

    pub fn rank(&self) -> Rank {
        self.rank
    }

    pub fn period(&self) -> u64 {
        self.period
    }

    /// Local step of `layer`; zero if the layer has never run in neighbor mode.
    pub fn local_step(&self, layer: usize) -> u64 {
        self.layers.get(&layer).map_or(0, |p| p.step)
    }

    /// Forgets the layer's bases and zeroes its step, as on failover adoption.
    pub fn reset(&mut self, layer: usize) {
        self.layers.remove(&layer);
    }

    pub fn basis(&self, layer: usize, kind: WeightKind) -> Option<&Matrix> {
        self.layers.get(&layer).and_then(|p| p.bases.get(&kind))
    }

    /// Number of truncated SVDs computed so far.
    pub fn svd_calls(&self) -> u64 {
        self.svd_calls
    }

    fn advance(&mut self, layer: usize) {
        self.layers.entry(layer).or_default().step += 1;
    }
}

/// Recomputes the layer's projections when its local step is a multiple of
/// the period (or no basis exists yet); otherwise the stored ones are reused.
/// Returns whether a refresh happened. Does not advance the step.
pub fn refresh_projection(cache: &mut ProjectionCache, lw: &LayerWeights, layer: usize) -> Result<bool> {
    let entry = cache.layers.entry(layer).or_default();
    let due = entry.step % cache.period == 0 || entry.bases.len() < WeightKind::FFN_LINEAR.len();
    if !due {
        return Ok(false);
    }
    for kind in WeightKind::FFN_LINEAR {
        let w = lw.get(kind);
        let cfg = SvdConfig {
            rank: cache.rank.for_matrix(w),
            ..cache.svd
        };
        let v = top_r_right_singular_vectors(w, &cfg)?;
        entry.bases.insert(kind, v);
        cache.svd_calls += 1;
    }
    Ok(true)
}

/// Recomputes the FFN intermediates from the saved residual stream `x1`.
pub fn recompute_ffn(lw: &LayerWeights, x1: &Matrix) -> Result<FfnIntermediates> {
    ffn_forward(lw, x1)
}

/// Low-rank Wgrad through the stored bases of one layer.
pub struct LowRankWgrad<'a> {
    bases: &'a BTreeMap<WeightKind, Matrix>,
}

impl WgradRule for LowRankWgrad<'_> {
    fn wgrad(&mut self, kind: WeightKind, dy: &Matrix, x: &Matrix) -> Result<Matrix> {
        let v1 = self
            .bases
            .get(&kind)
            .ok_or_else(|| Error::contract("low-rank wgrad", format!("no projection for {kind:?}")))?;
        lowrank_wgrad_rows(dy, x, v1)
    }
}

/// Backward through a block that kept only its FFN input: the FFN is
/// recomputed and differentiated with `rule`, the attention branch is skipped
/// and the cotangent of the block input is that of `x1` alone. The returned
/// gradients hold the FFN group only.
pub fn backward_block_skip_mha(
    lw: &LayerWeights,
    cache: &ActivationCache,
    dy: &Matrix,
    rule: &mut dyn WgradRule,
) -> Result<(Matrix, BlockGrads)> {
    let ActivationCache::FfnInputOnly { x1, .. } = cache else {
        return Err(Error::contract(
            "backward_block_mecefo",
            "needs an FfnInputOnly activation cache",
        ));
    };
    if dy.shape() != x1.shape() {
        return Err(Error::contract(
            "backward_block_mecefo",
            format!("dy {:?} vs activations {:?}", dy.shape(), x1.shape()),
        ));
    }
    let ffn = recompute_ffn(lw, x1)?;
    ffn_backward(lw, x1, &ffn, dy, rule)
}

/// Neighbor-mode backward for `layer`: refresh (or reuse) the projections,
/// recompute the FFN, approximate its weight gradients, skip attention, then
/// advance the layer's local step.
pub fn backward_block_mecefo(
    lw: &LayerWeights,
    _cfg: &ModelConfig,
    layer: usize,
    cache: &ActivationCache,
    dy: &Matrix,
    proj: &mut ProjectionCache,
) -> Result<(Matrix, BlockGrads)> {
    if cache.mode() != crate::model::CacheMode::FfnInputOnly {
        return Err(Error::contract(
            "backward_block_mecefo",
            "needs an FfnInputOnly activation cache",
        ));
    }
    refresh_projection(proj, lw, layer)?;
    let bases = &proj.layers[&layer].bases;
    let out = backward_block_skip_mha(lw, cache, dy, &mut LowRankWgrad { bases })?;
    proj.advance(layer);
    Ok(out)
}
