//! One pre-norm transformer block:
//!
//! ```text
//! x1 = x  + Wo · Attn(RoPE(Wq·n), RoPE(Wk·n), Wv·n),   n  = RMSNorm(x;  g_attn)
//! y  = x1 + Wdown · (silu(Wgate·n2) ⊙ Wup·n2),        n2 = RMSNorm(x1; g_ffn)
//! ```
//!
//! with causal softmax attention scaled by `1/√head_dim`. Activations are
//! row-major `(tokens, features)` with `tokens = batch · seq_len`.

use crate::error::{Error, Result};
use crate::linalg::Matrix;

use super::weights::{BlockGrads, LayerWeights, ModelConfig, WeightKind};

pub const RMS_EPS: f64 = 1e-6;
const ROPE_BASE: f64 = 10_000.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CacheMode {
    /// Keep every intermediate needed for the exact backward pass.
    Full,
    /// Keep only the block input and the residual stream entering the FFN.
    FfnInputOnly,
}

/// Attention sub-block intermediates.
#[derive(Clone, Debug, PartialEq)]
pub struct AttnIntermediates {
    pub normed: Matrix,
    pub inv_rms: Vec<f64>,
    /// Queries and keys after the rotary embedding.
    pub q: Matrix,
    pub k: Matrix,
    pub v: Matrix,
    /// Softmax probabilities, one `seq × seq` matrix per (sequence, head),
    /// indexed `seq_idx * heads + head`.
    pub probs: Vec<Matrix>,
    /// Concatenated head outputs before `Wo`.
    pub heads_out: Matrix,
    pub out: Matrix,
}

/// FFN sub-block intermediates.
#[derive(Clone, Debug, PartialEq)]
pub struct FfnIntermediates {
    pub normed: Matrix,
    pub inv_rms: Vec<f64>,
    pub gate: Matrix,
    pub up: Matrix,
    /// `silu(gate) ⊙ up`.
    pub act: Matrix,
    pub out: Matrix,
}

#[derive(Clone, Debug, PartialEq)]
pub enum ActivationCache {
    Full {
        x: Matrix,
        attn: AttnIntermediates,
        x1: Matrix,
        ffn: FfnIntermediates,
    },
    FfnInputOnly {
        x: Matrix,
        x1: Matrix,
    },
}

impl ActivationCache {
    pub fn mode(&self) -> CacheMode {
        match self {
            ActivationCache::Full { .. } => CacheMode::Full,
            ActivationCache::FfnInputOnly { .. } => CacheMode::FfnInputOnly,
        }
    }

    pub fn block_input(&self) -> &Matrix {
        match self {
            ActivationCache::Full { x, .. } | ActivationCache::FfnInputOnly { x, .. } => x,
        }
    }

    pub fn ffn_input(&self) -> &Matrix {
        match self {
            ActivationCache::Full { x1, .. } | ActivationCache::FfnInputOnly { x1, .. } => x1,
        }
    }

    /// Number of stored activation tensors.
    pub fn tensor_count(&self) -> usize {
        match self {
            // x, normed, q, k, v, probs, heads_out, out, x1, normed2, gate, up, act, ffn out
            ActivationCache::Full { .. } => 14,
            ActivationCache::FfnInputOnly { .. } => 2,
        }
    }

    /// Number of stored `f64` values.
    pub fn stored_values(&self) -> usize {
        match self {
            ActivationCache::Full { x, attn, x1, ffn } => {
                x.len()
                    + attn.normed.len()
                    + attn.inv_rms.len()
                    + attn.q.len()
                    + attn.k.len()
                    + attn.v.len()
                    + attn.probs.iter().map(Matrix::len).sum::<usize>()
                    + attn.heads_out.len()
                    + attn.out.len()
                    + x1.len()
                    + ffn.normed.len()
                    + ffn.inv_rms.len()
                    + ffn.gate.len()
                    + ffn.up.len()
                    + ffn.act.len()
                    + ffn.out.len()
            }
            ActivationCache::FfnInputOnly { x, x1 } => x.len() + x1.len(),
        }
    }
}

fn check_input(cfg: &ModelConfig, x: &Matrix, op: &'static str) -> Result<()> {
    if x.cols() != cfg.hidden || x.rows() == 0 || x.rows() % cfg.seq_len != 0 {
        return Err(Error::contract(
            op,
            format!(
                "activations {:?} need (k·{}, {}) shape",
                x.shape(),
                cfg.seq_len,
                cfg.hidden
            ),
        ));
    }
    Ok(())
}

pub fn rmsnorm(x: &Matrix, scale: &Matrix) -> (Matrix, Vec<f64>) {
    let m = x.cols();
    let mut out = Matrix::zeros(x.rows(), m);
    let mut inv = Vec::with_capacity(x.rows());
    let g = scale.as_slice();
    for i in 0..x.rows() {
        let row = x.row(i);
        let ms = row.iter().map(|v| v * v).sum::<f64>() / m as f64;
        let r = 1.0 / (ms + RMS_EPS).sqrt();
        inv.push(r);
        for ((o, &v), &s) in out.row_mut(i).iter_mut().zip(row).zip(g) {
            *o = v * r * s;
        }
    }
    (out, inv)
}

/// Returns `(dx, dscale)`.
pub fn rmsnorm_backward(x: &Matrix, inv_rms: &[f64], scale: &Matrix, dout: &Matrix) -> (Matrix, Matrix) {
    let m = x.cols();
    let g = scale.as_slice();
    let mut dx = Matrix::zeros(x.rows(), m);
    let mut dscale = Matrix::zeros(1, m);
    for i in 0..x.rows() {
        let r = inv_rms[i];
        let xr = x.row(i);
        let dr = dout.row(i);
        let mut dot = 0.0;
        for j in 0..m {
            dscale.as_mut_slice()[j] += dr[j] * xr[j] * r;
            dot += dr[j] * g[j] * xr[j];
        }
        let coef = r * r * r * dot / m as f64;
        for (j, d) in dx.row_mut(i).iter_mut().enumerate() {
            *d = r * dr[j] * g[j] - coef * xr[j];
        }
    }
    (dx, dscale)
}

fn rope_tables(cfg: &ModelConfig) -> (Vec<f64>, Vec<f64>) {
    let half = cfg.head_dim() / 2;
    let mut cos = Vec::with_capacity(cfg.seq_len * half);
    let mut sin = Vec::with_capacity(cfg.seq_len * half);
    for pos in 0..cfg.seq_len {
        for i in 0..half {
            let freq = ROPE_BASE.powf(-2.0 * i as f64 / cfg.head_dim() as f64);
            let angle = pos as f64 * freq;
            cos.push(angle.cos());
            sin.push(angle.sin());
        }
    }
    (cos, sin)
}

/// Rotates each head's consecutive pairs by the position angle. `inverse`
/// applies the transpose rotation, which is the backward map.
fn apply_rope(cfg: &ModelConfig, m: &mut Matrix, inverse: bool) {
    if !cfg.rope {
        return;
    }
    let (cos, sin) = rope_tables(cfg);
    let d = cfg.head_dim();
    let half = d / 2;
    for row in 0..m.rows() {
        let pos = row % cfg.seq_len;
        let values = m.row_mut(row);
        for h in 0..cfg.heads {
            for i in 0..half {
                let c = cos[pos * half + i];
                let s = if inverse { -sin[pos * half + i] } else { sin[pos * half + i] };
                let a = h * d + 2 * i;
                let (x0, x1) = (values[a], values[a + 1]);
                values[a] = x0 * c - x1 * s;
                values[a + 1] = x0 * s + x1 * c;
            }
        }
    }
}

pub fn attention_forward(lw: &LayerWeights, cfg: &ModelConfig, x: &Matrix) -> Result<AttnIntermediates> {
    let (normed, inv_rms) = rmsnorm(x, &lw.norm_attn);
    let mut q = normed.matmul_nt(&lw.q)?;
    let mut k = normed.matmul_nt(&lw.k)?;
    let v = normed.matmul_nt(&lw.v)?;
    apply_rope(cfg, &mut q, false);
    apply_rope(cfg, &mut k, false);

    let (s, d) = (cfg.seq_len, cfg.head_dim());
    let scale = 1.0 / (d as f64).sqrt();
    let sequences = x.rows() / s;
    let mut probs = Vec::with_capacity(sequences * cfg.heads);
    let mut heads_out = Matrix::zeros(x.rows(), cfg.hidden);
    for seq in 0..sequences {
        let base = seq * s;
        for h in 0..cfg.heads {
            let col = h * d;
            let mut p = Matrix::zeros(s, s);
            for i in 0..s {
                let qi = &q.row(base + i)[col..col + d];
                let mut max = f64::NEG_INFINITY;
                for j in 0..=i {
                    let kj = &k.row(base + j)[col..col + d];
                    let dot: f64 = qi.iter().zip(kj).map(|(a, b)| a * b).sum();
                    let score = dot * scale;
                    p[(i, j)] = score;
                    max = max.max(score);
                }
                let mut total = 0.0;
                for j in 0..=i {
                    let e = (p[(i, j)] - max).exp();
                    p[(i, j)] = e;
                    total += e;
                }
                for j in 0..=i {
                    p[(i, j)] /= total;
                }
                let out = &mut heads_out.row_mut(base + i)[col..col + d];
                for j in 0..=i {
                    let pij = p[(i, j)];
                    let vj = &v.row(base + j)[col..col + d];
                    for (o, &vv) in out.iter_mut().zip(vj) {
                        *o += pij * vv;
                    }
                }
            }
            probs.push(p);
        }
    }
    let out = heads_out.matmul_nt(&lw.o)?;
    Ok(AttnIntermediates {
        normed,
        inv_rms,
        q,
        k,
        v,
        probs,
        heads_out,
        out,
    })
}

/// FFN forward from the residual stream entering the sub-block. Recomputation
/// reuses this exact function, so its output is bit-identical to the forward.
pub fn ffn_forward(lw: &LayerWeights, x1: &Matrix) -> Result<FfnIntermediates> {
    let (normed, inv_rms) = rmsnorm(x1, &lw.norm_ffn);
    let gate = normed.matmul_nt(&lw.gate)?;
    let up = normed.matmul_nt(&lw.up)?;
    let act = gate.map(silu).hadamard(&up)?;
    let out = act.matmul_nt(&lw.down)?;
    Ok(FfnIntermediates {
        normed,
        inv_rms,
        gate,
        up,
        act,
        out,
    })
}

#[inline]
fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

#[inline]
pub fn silu(z: f64) -> f64 {
    z * sigmoid(z)
}

#[inline]
fn silu_grad(z: f64) -> f64 {
    let s = sigmoid(z);
    s * (1.0 + z * (1.0 - s))
}

pub fn forward_block(
    lw: &LayerWeights,
    cfg: &ModelConfig,
    x: &Matrix,
    mode: CacheMode,
) -> Result<(Matrix, ActivationCache)> {
    check_input(cfg, x, "forward_block")?;
    let attn = attention_forward(lw, cfg, x)?;
    let x1 = x.add(&attn.out)?;
    let ffn = ffn_forward(lw, &x1)?;
    let y = x1.add(&ffn.out)?;
    let cache = match mode {
        CacheMode::Full => ActivationCache::Full {
            x: x.clone(),
            attn,
            x1,
            ffn,
        },
        CacheMode::FfnInputOnly => ActivationCache::FfnInputOnly { x: x.clone(), x1 },
    };
    Ok((y, cache))
}

/// Weight-gradient rule for one linear map: given the output cotangent
/// `dY (tokens × out)` and the input `X (tokens × in)`, return `(out × in)`.
pub trait WgradRule {
    fn wgrad(&mut self, kind: WeightKind, dy: &Matrix, x: &Matrix) -> Result<Matrix>;
}

/// `G_W = dYᵀ · X`.
pub struct ExactWgrad;

impl WgradRule for ExactWgrad {
    fn wgrad(&mut self, _kind: WeightKind, dy: &Matrix, x: &Matrix) -> Result<Matrix> {
        dy.matmul_tn(x)
    }
}

/// FFN backward shared by the exact and approximate block passes. Returns the
/// total cotangent of `x1` (residual plus FFN branch) and the FFN gradients.
pub fn ffn_backward(
    lw: &LayerWeights,
    x1: &Matrix,
    ffn: &FfnIntermediates,
    dy: &Matrix,
    rule: &mut dyn WgradRule,
) -> Result<(Matrix, BlockGrads)> {
    let mut grads = BlockGrads::new();
    let d_act = dy.matmul(&lw.down)?;
    grads.insert(WeightKind::Down, rule.wgrad(WeightKind::Down, dy, &ffn.act)?);

    let mut d_gate = Matrix::zeros(d_act.rows(), d_act.cols());
    let mut d_up = Matrix::zeros(d_act.rows(), d_act.cols());
    for (((dg, du), (&da, &g)), &u) in d_gate
        .as_mut_slice()
        .iter_mut()
        .zip(d_up.as_mut_slice())
        .zip(d_act.as_slice().iter().zip(ffn.gate.as_slice()))
        .zip(ffn.up.as_slice())
    {
        *dg = da * u * silu_grad(g);
        *du = da * silu(g);
    }
    grads.insert(WeightKind::Gate, rule.wgrad(WeightKind::Gate, &d_gate, &ffn.normed)?);
    grads.insert(WeightKind::Up, rule.wgrad(WeightKind::Up, &d_up, &ffn.normed)?);

    let mut d_normed = d_gate.matmul(&lw.gate)?;
    d_normed.add_assign(&d_up.matmul(&lw.up)?)?;
    let (dx1_branch, d_scale) = rmsnorm_backward(x1, &ffn.inv_rms, &lw.norm_ffn, &d_normed);
    grads.insert(WeightKind::NormFfn, d_scale);
    Ok((dy.add(&dx1_branch)?, grads))
}

/// Attention backward. Returns the total cotangent of `x` (residual plus
/// attention branch) and the attention-group gradients.
pub fn attention_backward(
    lw: &LayerWeights,
    cfg: &ModelConfig,
    x: &Matrix,
    attn: &AttnIntermediates,
    dx1: &Matrix,
) -> Result<(Matrix, BlockGrads)> {
    let mut grads = BlockGrads::new();
    grads.insert(WeightKind::O, dx1.matmul_tn(&attn.heads_out)?);
    let d_heads = dx1.matmul(&lw.o)?;

    let (s, d) = (cfg.seq_len, cfg.head_dim());
    let scale = 1.0 / (d as f64).sqrt();
    let mut dq = Matrix::zeros(x.rows(), cfg.hidden);
    let mut dk = Matrix::zeros(x.rows(), cfg.hidden);
    let mut dv = Matrix::zeros(x.rows(), cfg.hidden);
    let sequences = x.rows() / s;
    let mut d_scores = vec![0.0; s];
    for seq in 0..sequences {
        let base = seq * s;
        for h in 0..cfg.heads {
            let col = h * d;
            let p = &attn.probs[seq * cfg.heads + h];
            for i in 0..s {
                let doi = &d_heads.row(base + i)[col..col + d];
                let mut weighted = 0.0;
                for j in 0..=i {
                    let vj = &attn.v.row(base + j)[col..col + d];
                    let dp: f64 = doi.iter().zip(vj).map(|(a, b)| a * b).sum();
                    d_scores[j] = dp;
                    weighted += p[(i, j)] * dp;
                }
                for j in 0..=i {
                    let pij = p[(i, j)];
                    let ds = pij * (d_scores[j] - weighted) * scale;
                    // dv_j += p_ij · do_i
                    {
                        let dvj = &mut dv.row_mut(base + j)[col..col + d];
                        for (t, &g) in dvj.iter_mut().zip(doi) {
                            *t += pij * g;
                        }
                    }
                    let kj: Vec<f64> = attn.k.row(base + j)[col..col + d].to_vec();
                    let qi: Vec<f64> = attn.q.row(base + i)[col..col + d].to_vec();
                    {
                        let dqi = &mut dq.row_mut(base + i)[col..col + d];
                        for (t, &kk) in dqi.iter_mut().zip(&kj) {
                            *t += ds * kk;
                        }
                    }
                    let dkj = &mut dk.row_mut(base + j)[col..col + d];
                    for (t, &qq) in dkj.iter_mut().zip(&qi) {
                        *t += ds * qq;
                    }
                }
            }
        }
    }
    apply_rope(cfg, &mut dq, true);
    apply_rope(cfg, &mut dk, true);

    grads.insert(WeightKind::Q, dq.matmul_tn(&attn.normed)?);
    grads.insert(WeightKind::K, dk.matmul_tn(&attn.normed)?);
    grads.insert(WeightKind::V, dv.matmul_tn(&attn.normed)?);
    let mut d_normed = dq.matmul(&lw.q)?;
    d_normed.add_assign(&dk.matmul(&lw.k)?)?;
    d_normed.add_assign(&dv.matmul(&lw.v)?)?;
    let (dx_branch, d_scale) = rmsnorm_backward(x, &attn.inv_rms, &lw.norm_attn, &d_normed);
    grads.insert(WeightKind::NormAttn, d_scale);
    Ok((dx1.add(&dx_branch)?, grads))
}

/// Exact backward through a block whose forward kept a `Full` cache.
pub fn backward_block_exact(
    lw: &LayerWeights,
    cfg: &ModelConfig,
    cache: &ActivationCache,
    dy: &Matrix,
) -> Result<(Matrix, BlockGrads)> {
    let ActivationCache::Full { x, attn, x1, ffn } = cache else {
        return Err(Error::contract(
            "backward_block_exact",
            "needs a Full activation cache",
        ));
    };
    if dy.shape() != x.shape() {
        return Err(Error::contract(
            "backward_block_exact",
            format!("dy {:?} vs activations {:?}", dy.shape(), x.shape()),
        ));
    }
    let (dx1, mut grads) = ffn_backward(lw, x1, ffn, dy, &mut ExactWgrad)?;
    let (dx, attn_grads) = attention_backward(lw, cfg, x, attn, &dx1)?;
    grads.extend(attn_grads);
    Ok((dx, grads))
}
