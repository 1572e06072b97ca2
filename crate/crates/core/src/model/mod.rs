//! Toy decoder-only transformer with hand-written forward and backward passes.

mod block;
mod weights;

pub use block::{
    attention_backward, attention_forward, backward_block_exact, ffn_backward, ffn_forward,
    forward_block, rmsnorm, rmsnorm_backward, silu, ActivationCache, AttnIntermediates, CacheMode,
    ExactWgrad, FfnIntermediates, WgradRule, RMS_EPS,
};
pub use weights::{
    derive_seed, BlockGrads, GradientSet, LayerWeights, ModelConfig, ModelWeights, ParamId,
    TensorEntry, WeightKind, INIT_STD,
};

use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// Everything the model-level backward pass needs from a forward pass.
#[derive(Clone, Debug)]
pub struct ModelCache {
    pub tokens: Vec<usize>,
    pub blocks: Vec<ActivationCache>,
    pub final_input: Matrix,
    pub final_inv_rms: Vec<f64>,
    pub final_normed: Matrix,
}

/// Embeds `tokens`, runs every block with the cache mode chosen for it, and
/// projects to logits `(tokens, vocab)`.
pub fn forward_model(
    weights: &ModelWeights,
    cfg: &ModelConfig,
    tokens: &[usize],
    modes: &[CacheMode],
) -> Result<(Matrix, ModelCache)> {
    if modes.len() != weights.num_layers() {
        return Err(Error::contract(
            "forward_model",
            format!("{} cache modes for {} layers", modes.len(), weights.num_layers()),
        ));
    }
    if let Some(&bad) = tokens.iter().find(|&&t| t >= cfg.vocab) {
        return Err(Error::contract(
            "forward_model",
            format!("token id {bad} outside vocabulary of {}", cfg.vocab),
        ));
    }
    if tokens.is_empty() || tokens.len() % cfg.seq_len != 0 {
        return Err(Error::contract(
            "forward_model",
            format!("{} tokens is not a multiple of seq_len {}", tokens.len(), cfg.seq_len),
        ));
    }
    let mut x = Matrix::zeros(tokens.len(), cfg.hidden);
    for (i, &t) in tokens.iter().enumerate() {
        x.row_mut(i).copy_from_slice(weights.embedding.row(t));
    }
    let mut blocks = Vec::with_capacity(modes.len());
    for (lw, &mode) in weights.layers.iter().zip(modes) {
        let (y, cache) = forward_block(lw, cfg, &x, mode)?;
        blocks.push(cache);
        x = y;
    }
    let (normed, inv_rms) = rmsnorm(&x, &weights.final_norm);
    let logits = normed.matmul_nt(&weights.unembedding)?;
    Ok((
        logits,
        ModelCache {
            tokens: tokens.to_vec(),
            blocks,
            final_input: x,
            final_inv_rms: inv_rms,
            final_normed: normed,
        },
    ))
}

/// Backward through the whole model. `block_backward` is invoked for layers
/// `L-1 .. 0` with the layer index, its cache and the cotangent of its
/// output, and decides how that block is differentiated.
pub fn backward_model<F>(
    weights: &ModelWeights,
    cache: &ModelCache,
    dlogits: &Matrix,
    mut block_backward: F,
) -> Result<GradientSet>
where
    F: FnMut(usize, &ActivationCache, &Matrix) -> Result<(Matrix, BlockGrads)>,
{
    let mut grads = GradientSet::new();
    grads.insert(ParamId::Unembedding, dlogits.matmul_tn(&cache.final_normed)?);
    let d_normed = dlogits.matmul(&weights.unembedding)?;
    let (mut dx, d_final) = rmsnorm_backward(
        &cache.final_input,
        &cache.final_inv_rms,
        &weights.final_norm,
        &d_normed,
    );
    grads.insert(ParamId::FinalNorm, d_final);
    for layer in (0..cache.blocks.len()).rev() {
        let (d_in, block) = block_backward(layer, &cache.blocks[layer], &dx)?;
        grads.insert_block(layer, block);
        dx = d_in;
    }
    let mut d_embed = Matrix::zeros(weights.embedding.rows(), weights.embedding.cols());
    for (i, &t) in cache.tokens.iter().enumerate() {
        for (acc, &g) in d_embed.row_mut(t).iter_mut().zip(dx.row(i)) {
            *acc += g;
        }
    }
    grads.insert(ParamId::Embedding, d_embed);
    Ok(grads)
}

/// Exact gradients of every parameter; requires `Full` caches everywhere.
pub fn backward_model_exact(
    weights: &ModelWeights,
    cfg: &ModelConfig,
    cache: &ModelCache,
    dlogits: &Matrix,
) -> Result<GradientSet> {
    backward_model(weights, cache, dlogits, |layer, c, dy| {
        backward_block_exact(&weights.layers[layer], cfg, c, dy)
    })
}

/// Mean token-level cross entropy and its gradient with respect to the
/// logits, `(softmax − onehot) / tokens`.
pub fn cross_entropy(logits: &Matrix, targets: &[usize]) -> Result<(f64, Matrix)> {
    if logits.rows() != targets.len() || logits.rows() == 0 {
        return Err(Error::contract(
            "cross_entropy",
            format!("{} logit rows for {} targets", logits.rows(), targets.len()),
        ));
    }
    if let Some(&bad) = targets.iter().find(|&&t| t >= logits.cols()) {
        return Err(Error::contract(
            "cross_entropy",
            format!("target {bad} outside {} classes", logits.cols()),
        ));
    }
    let count = targets.len() as f64;
    let mut loss = 0.0;
    let mut d = Matrix::zeros(logits.rows(), logits.cols());
    for (i, &t) in targets.iter().enumerate() {
        let row = logits.row(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let lse = max + sum.ln();
        loss += lse - row[t];
        for (j, g) in d.row_mut(i).iter_mut().enumerate() {
            let p = (row[j] - lse).exp();
            *g = (p - if j == t { 1.0 } else { 0.0 }) / count;
        }
    }
    Ok((loss / count, d))
}
