//! Independent reference implementations shared by the integration tests.
//! Nothing here calls into the library's forward, backward or SVD code.

#![allow(dead_code)]

use mecefo::harness::{RunConfig, ShardedDataset};
use mecefo::model::{
    backward_model_exact, cross_entropy, forward_model, CacheMode, LayerWeights, ModelConfig, ModelWeights,
};
use mecefo::optim::{lr_at, OptimizerConfig};
use mecefo::Matrix;

pub type Rows = Vec<Vec<f64>>;

pub fn rows_of(m: &Matrix) -> Rows {
    (0..m.rows()).map(|i| m.row(i).to_vec()).collect()
}

/// `x · wᵀ` for `w` stored `(out, in)`.
fn linear(x: &Rows, w: &Matrix) -> Rows {
    x.iter()
        .map(|row| {
            (0..w.rows())
                .map(|o| (0..w.cols()).map(|i| row[i] * w[(o, i)]).sum())
                .collect()
        })
        .collect()
}

fn norm(x: &Rows, scale: &Matrix) -> Rows {
    x.iter()
        .map(|row| {
            let ms = row.iter().map(|v| v * v).sum::<f64>() / row.len() as f64;
            let denom = (ms + 1e-6).sqrt();
            row.iter().enumerate().map(|(j, v)| v / denom * scale[(0, j)]).collect()
        })
        .collect()
}

fn add(a: &Rows, b: &Rows) -> Rows {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect())
        .collect()
}

/// Rotary embedding written with an explicit angle per (position, pair).
fn rotate(x: &mut Rows, cfg: &ModelConfig) {
    if !cfg.rope {
        return;
    }
    let d = cfg.head_dim();
    for (t, row) in x.iter_mut().enumerate() {
        let pos = (t % cfg.seq_len) as f64;
        for h in 0..cfg.heads {
            for i in 0..d / 2 {
                let theta = pos / 10_000f64.powf(2.0 * i as f64 / d as f64);
                let a = h * d + 2 * i;
                let (x0, x1) = (row[a], row[a + 1]);
                row[a] = x0 * theta.cos() - x1 * theta.sin();
                row[a + 1] = x0 * theta.sin() + x1 * theta.cos();
            }
        }
    }
}

fn attention(lw: &LayerWeights, cfg: &ModelConfig, x: &Rows) -> Rows {
    let h_in = norm(x, &lw.norm_attn);
    let mut q = linear(&h_in, &lw.q);
    let mut k = linear(&h_in, &lw.k);
    let v = linear(&h_in, &lw.v);
    rotate(&mut q, cfg);
    rotate(&mut k, cfg);
    let (s, d) = (cfg.seq_len, cfg.head_dim());
    let mut heads = vec![vec![0.0; cfg.hidden]; x.len()];
    for t in 0..x.len() {
        let start = t - t % s;
        for h in 0..cfg.heads {
            let cols = h * d..(h + 1) * d;
            // Softmax over all positions of the sequence with a -inf mask.
            let scores: Vec<f64> = (start..start + s)
                .map(|u| {
                    if u > t {
                        f64::NEG_INFINITY
                    } else {
                        cols.clone().map(|c| q[t][c] * k[u][c]).sum::<f64>() / (d as f64).sqrt()
                    }
                })
                .collect();
            let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scores.iter().map(|z| (z - max).exp()).collect();
            let z: f64 = exps.iter().sum();
            for c in cols {
                heads[t][c] = exps.iter().enumerate().map(|(j, e)| e / z * v[start + j][c]).sum();
            }
        }
    }
    linear(&heads, &lw.o)
}

fn ffn(lw: &LayerWeights, x: &Rows) -> Rows {
    let h_in = norm(x, &lw.norm_ffn);
    let gate = linear(&h_in, &lw.gate);
    let up = linear(&h_in, &lw.up);
    let act: Rows = gate
        .iter()
        .zip(&up)
        .map(|(g, u)| g.iter().zip(u).map(|(a, b)| a / (1.0 + (-a).exp()) * b).collect())
        .collect();
    linear(&act, &lw.down)
}

/// Logits of the full model, one row per token.
pub fn reference_logits(w: &ModelWeights, cfg: &ModelConfig, tokens: &[usize]) -> Rows {
    let mut x: Rows = tokens.iter().map(|&t| w.embedding.row(t).to_vec()).collect();
    for lw in &w.layers {
        let x1 = add(&x, &attention(lw, cfg, &x));
        x = add(&x1, &ffn(lw, &x1));
    }
    linear(&norm(&x, &w.final_norm), &w.unembedding)
}

pub fn reference_loss(w: &ModelWeights, cfg: &ModelConfig, tokens: &[usize], targets: &[usize]) -> f64 {
    let logits = reference_logits(w, cfg, tokens);
    let total: f64 = logits
        .iter()
        .zip(targets)
        .map(|(row, &t)| {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
            lse - row[t]
        })
        .sum();
    total / targets.len() as f64
}

/// FFN-group gradients of `sum(dy ⊙ ffn(x1))` with the norm, SwiGLU and
/// down projection differentiated by hand, entry by entry.
pub struct FfnGrads {
    pub gate: Rows,
    pub up: Rows,
    pub down: Rows,
    pub norm_ffn: Vec<f64>,
    pub dx1: Rows,
}

pub fn reference_ffn_backward(lw: &LayerWeights, x1: &Rows, dy: &Rows) -> FfnGrads {
    let (m, f) = (lw.gate.cols(), lw.gate.rows());
    let tokens = x1.len();
    let mut out = FfnGrads {
        gate: vec![vec![0.0; m]; f],
        up: vec![vec![0.0; m]; f],
        down: vec![vec![0.0; f]; m],
        norm_ffn: vec![0.0; m],
        dx1: dy.clone(),
    };
    for t in 0..tokens {
        let x = &x1[t];
        let ms = x.iter().map(|v| v * v).sum::<f64>() / m as f64;
        let s = (ms + 1e-6).sqrt();
        let xhat: Vec<f64> = x.iter().map(|v| v / s).collect();
        let h: Vec<f64> = (0..m).map(|j| xhat[j] * lw.norm_ffn[(0, j)]).collect();
        let mut dh = vec![0.0; m];
        for a in 0..f {
            let g: f64 = (0..m).map(|j| lw.gate[(a, j)] * h[j]).sum();
            let u: f64 = (0..m).map(|j| lw.up[(a, j)] * h[j]).sum();
            let sig = 1.0 / (1.0 + (-g).exp());
            let act = g * sig * u;
            let dact: f64 = (0..m).map(|o| dy[t][o] * lw.down[(o, a)]).sum();
            for o in 0..m {
                out.down[o][a] += dy[t][o] * act;
            }
            let dg = dact * u * (sig + g * sig * (1.0 - sig));
            let du = dact * g * sig;
            for j in 0..m {
                out.gate[a][j] += dg * h[j];
                out.up[a][j] += du * h[j];
                dh[j] += dg * lw.gate[(a, j)] + du * lw.up[(a, j)];
            }
        }
        // h_j = g_j x_j / s, with s depending on every x_k.
        let dxhat: Vec<f64> = (0..m).map(|j| dh[j] * lw.norm_ffn[(0, j)]).collect();
        let proj: f64 = (0..m).map(|j| dxhat[j] * xhat[j]).sum::<f64>() / m as f64;
        for j in 0..m {
            out.norm_ffn[j] += dh[j] * xhat[j];
            out.dx1[t][j] += (dxhat[j] - xhat[j] * proj) / s;
        }
    }
    out
}

pub fn max_rel(got: &Matrix, want: &Rows) -> f64 {
    let mut diff: f64 = 0.0;
    let mut scale: f64 = 0.0;
    for (i, row) in want.iter().enumerate() {
        for (j, &w) in row.iter().enumerate() {
            diff = diff.max((got[(i, j)] - w).abs());
            scale = scale.max(w.abs());
        }
    }
    if scale > 0.0 {
        diff / scale
    } else {
        diff
    }
}

/// Residual `‖w‖² − Σ top-r eigenvalues of wᵀw` from a dense symmetric
/// eigendecomposition, the optimum over all rank-`r` orthogonal projections.
pub fn optimal_projection_residual(w: &Matrix, r: usize) -> f64 {
    let a = nalgebra::DMatrix::from_fn(w.rows(), w.cols(), |i, j| w[(i, j)]);
    let gram = a.transpose() * &a;
    let mut eig: Vec<f64> = gram.symmetric_eigen().eigenvalues.iter().copied().collect();
    eig.sort_by(|x, y| y.total_cmp(x));
    let total: f64 = eig.iter().sum();
    total - eig[..r].iter().sum::<f64>()
}

/// `‖w − w V Vᵀ‖²_F`.
pub fn projection_residual(w: &Matrix, v: &Matrix) -> f64 {
    let proj = w.matmul(v).unwrap().matmul_nt(v).unwrap();
    w.sub(&proj).unwrap().frobenius_norm_sq()
}

/// Per-iteration `(loss, lr)` and final weights of textbook synchronous data
/// parallel training: every rank runs the exact backward, gradients are
/// summed in rank order and divided by the rank count, AdamW steps every
/// parameter.
pub fn plain_data_parallel(cfg: &RunConfig) -> (Vec<(f64, f64)>, ModelWeights) {
    let OptimizerConfig::AdamW {
        beta1,
        beta2,
        eps,
        weight_decay,
    } = cfg.optimizer
    else {
        panic!("plain loop implements AdamW only");
    };
    let n = cfg.cluster.dp;
    let seqs = cfg.global_batch / n;
    let mut w = ModelWeights::init(&cfg.model, cfg.seed).unwrap();
    let data = ShardedDataset::load(&cfg.dataset, &cfg.model, n, cfg.seed).unwrap();
    let ids = w.param_ids();
    let mut m1: Vec<Vec<f64>> = ids.iter().map(|&id| vec![0.0; w.get(id).len()]).collect();
    let mut m2 = m1.clone();
    let mut trace = Vec::new();
    for t in 0..cfg.iterations {
        let lr = lr_at(t, cfg.iterations, cfg.lr);
        let mut loss_sum = 0.0;
        let mut grads = Vec::new();
        for rank in 0..n {
            let b = data.batch(rank, t, seqs);
            let modes = vec![CacheMode::Full; cfg.model.layers];
            let (logits, cache) = forward_model(&w, &cfg.model, &b.inputs, &modes).unwrap();
            let (loss, dl) = cross_entropy(&logits, &b.targets).unwrap();
            loss_sum += loss;
            grads.push(backward_model_exact(&w, &cfg.model, &cache, &dl).unwrap());
        }
        trace.push((loss_sum / n as f64, lr));
        let step = (t + 1) as i32;
        let (c1, c2) = (1.0 - beta1.powi(step), 1.0 - beta2.powi(step));
        for (p, &id) in ids.iter().enumerate() {
            let mut g = grads[0].get(id).unwrap().as_slice().to_vec();
            for other in &grads[1..] {
                for (a, b) in g.iter_mut().zip(other.get(id).unwrap().as_slice()) {
                    *a += b;
                }
            }
            let param = w.get_mut(id).as_mut_slice();
            for i in 0..g.len() {
                let gi = g[i] / n as f64;
                m1[p][i] = beta1 * m1[p][i] + (1.0 - beta1) * gi;
                m2[p][i] = beta2 * m2[p][i] + (1.0 - beta2) * gi * gi;
                let update = m1[p][i] / c1 / ((m2[p][i] / c2).sqrt() + eps) + weight_decay * param[i];
                param[i] -= lr * update;
            }
        }
    }
    (trace, w)
}
