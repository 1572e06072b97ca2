//! Dense row-major `f64` matrices and the handful of kernels the simulator
//! needs: products in three transpose layouts, norms, seeded Gaussian fill and
//! a truncated SVD that returns only the top right singular vectors.
//!
//! Every product accumulates each output entry over the shared dimension in
//! ascending order, so results are bit-reproducible for fixed inputs.

use std::ops::{Index, IndexMut};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::contract(
                "Matrix::from_vec",
                format!("{} values for a {rows}x{cols} matrix", data.len()),
            ));
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Builds a matrix from equally long rows. Panics on ragged input; meant
    /// for literals in tests and examples.
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Matrix {
            rows: rows.len(),
            cols,
            data,
        }
    }

    /// A 1×n row vector.
    pub fn row_vector(values: Vec<f64>) -> Self {
        Matrix {
            rows: 1,
            cols: values.len(),
            data: values,
        }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        t
    }

    /// Columns `start..end` as a new matrix.
    pub fn columns(&self, start: usize, end: usize) -> Matrix {
        let mut out = Matrix::zeros(self.rows, end - start);
        for i in 0..self.rows {
            out.row_mut(i).copy_from_slice(&self.row(i)[start..end]);
        }
        out
    }

    /// `self · other`.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::contract(
                "matmul",
                format!("{:?} x {:?}", self.shape(), other.shape()),
            ));
        }
        let (m, k, n) = (self.rows, self.cols, other.cols);
        let mut out = Matrix::zeros(m, n);
        for i in 0..m {
            let a_row = &self.data[i * k..(i + 1) * k];
            let c_row = &mut out.data[i * n..(i + 1) * n];
            for (p, &a) in a_row.iter().enumerate() {
                let b_row = &other.data[p * n..(p + 1) * n];
                for (c, &b) in c_row.iter_mut().zip(b_row) {
                    *c += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `self · otherᵀ`.
    pub fn matmul_nt(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            return Err(Error::contract(
                "matmul_nt",
                format!("{:?} x {:?}ᵀ", self.shape(), other.shape()),
            ));
        }
        let (m, k, n) = (self.rows, self.cols, other.rows);
        let mut out = Matrix::zeros(m, n);
        for i in 0..m {
            let a_row = &self.data[i * k..(i + 1) * k];
            for j in 0..n {
                let b_row = &other.data[j * k..(j + 1) * k];
                let mut acc = 0.0;
                for (a, b) in a_row.iter().zip(b_row) {
                    acc += a * b;
                }
                out.data[i * n + j] = acc;
            }
        }
        Ok(out)
    }

    /// `selfᵀ · other`.
    pub fn matmul_tn(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows {
            return Err(Error::contract(
                "matmul_tn",
                format!("{:?}ᵀ x {:?}", self.shape(), other.shape()),
            ));
        }
        let (k, m, n) = (self.rows, self.cols, other.cols);
        let mut out = Matrix::zeros(m, n);
        for p in 0..k {
            let a_row = &self.data[p * m..(p + 1) * m];
            let b_row = &other.data[p * n..(p + 1) * n];
            for (i, &a) in a_row.iter().enumerate() {
                let c_row = &mut out.data[i * n..(i + 1) * n];
                for (c, &b) in c_row.iter_mut().zip(b_row) {
                    *c += a * b;
                }
            }
        }
        Ok(out)
    }

    fn check_same_shape(&self, other: &Matrix, op: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::contract(
                op,
                format!("{:?} vs {:?}", self.shape(), other.shape()),
            ));
        }
        Ok(())
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_map(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_map(other, "sub", |a, b| a - b)
    }

    pub fn hadamard(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_map(other, "hadamard", |a, b| a * b)
    }

    pub fn add_assign(&mut self, other: &Matrix) -> Result<()> {
        self.check_same_shape(other, "add_assign")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    fn zip_map(&self, other: &Matrix, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        self.check_same_shape(other, op)?;
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn scale(&self, s: f64) -> Matrix {
        self.map(|v| v * s)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn frobenius_norm_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.frobenius_norm_sq().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn is_zero(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0)
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;

    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

/// Fills a `rows × cols` matrix with `N(mean, stddev²)` draws in row-major
/// order. The stream is ChaCha8 seeded through `seed_from_u64`, sampled with
/// `rand_distr::Normal`, so identical arguments give bit-identical output.
pub fn seeded_gaussian(rows: usize, cols: usize, mean: f64, stddev: f64, seed: u64) -> Result<Matrix> {
    if !(stddev >= 0.0) || !stddev.is_finite() || !mean.is_finite() {
        return Err(Error::contract(
            "seeded_gaussian",
            format!("mean {mean}, stddev {stddev}"),
        ));
    }
    let normal = Normal::new(mean, stddev).map_err(|e| Error::contract("seeded_gaussian", e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..rows * cols).map(|_| normal.sample(&mut rng)).collect();
    Ok(Matrix { rows, cols, data })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SvdConfig {
    pub rank: usize,
    pub tolerance: f64,
    pub max_iterations: usize,
    pub seed: u64,
}

impl SvdConfig {
    pub fn new(rank: usize) -> Self {
        SvdConfig {
            rank,
            ..Default::default()
        }
    }

    fn validate(&self, rows: usize, cols: usize) -> Result<()> {
        if self.rank == 0 || self.rank > cols {
            return Err(Error::contract(
                "top_r_right_singular_vectors",
                format!("rank {} for a {rows}x{cols} matrix", self.rank),
            ));
        }
        if !(self.tolerance > 0.0) || self.max_iterations == 0 {
            return Err(Error::contract(
                "top_r_right_singular_vectors",
                format!("tolerance {} / max_iterations {}", self.tolerance, self.max_iterations),
            ));
        }
        Ok(())
    }
}

impl Default for SvdConfig {
    fn default() -> Self {
        SvdConfig {
            rank: 1,
            tolerance: 1e-10,
            max_iterations: 500,
            seed: 0x5eed,
        }
    }
}

/// Returns an `n × r` matrix whose orthonormal columns span the top-`r`
/// right singular subspace of the `m × n` matrix `w`.
///
/// Block power iteration on `wᵀw` with an oversampled block, re-orthonormalized
/// every step and rotated by a Rayleigh-Ritz solve so the leading columns are
/// ordered by singular value. Converged when every leading Ritz pair satisfies
/// `‖Aq − λq‖ ≤ tolerance · λ_max`. Directions missing from the range (rank
/// deficiency) are completed with seeded random vectors; the zero matrix maps
/// to the first `r` standard basis vectors. `r` may exceed the rank of `w` (up
/// to its column count); the extra columns then span part of its null space.
pub fn top_r_right_singular_vectors(w: &Matrix, cfg: &SvdConfig) -> Result<Matrix> {
    cfg.validate(w.rows(), w.cols())?;
    let n = w.cols();
    let r = cfg.rank;
    if w.is_zero() {
        let mut v = Matrix::zeros(n, r);
        for j in 0..r {
            v[(j, j)] = 1.0;
        }
        return Ok(v);
    }
    if !w.is_finite() {
        return Err(Error::NonFinite {
            what: "SVD input".into(),
        });
    }

    let gram = w.matmul_tn(w)?;
    let block = n.min(r + r.max(4));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");

    // Rows of `basis` are the current orthonormal block.
    let mut basis = Matrix::zeros(block, n);
    for v in basis.as_mut_slice() {
        *v = normal.sample(&mut rng);
    }
    orthonormalize_rows(&mut basis, &mut rng, &normal);

    let mut residual = f64::INFINITY;
    for _ in 0..cfg.max_iterations {
        // gram is symmetric, so basis·gram is (gram·basisᵀ)ᵀ.
        let mut next = basis.matmul(&gram)?;
        orthonormalize_rows(&mut next, &mut rng, &normal);

        let projected = next.matmul(&gram)?.matmul_nt(&next)?;
        let (values, vectors) = symmetric_eigen(&projected);
        // Ritz vectors as rows: vectorsᵀ · next, sorted by descending value.
        basis = vectors.matmul_tn(&next)?;

        let ritz_images = basis.matmul(&gram)?;
        let scale = values[0].abs().max(f64::MIN_POSITIVE);
        residual = (0..r)
            .map(|j| {
                let q = basis.row(j);
                let aq = ritz_images.row(j);
                aq.iter()
                    .zip(q)
                    .map(|(a, x)| (a - values[j] * x).powi(2))
                    .sum::<f64>()
                    .sqrt()
                    / scale
            })
            .fold(0.0, f64::max);
        if residual <= cfg.tolerance {
            let mut top = Matrix::zeros(r, n);
            for j in 0..r {
                top.row_mut(j).copy_from_slice(basis.row(j));
            }
            // Ritz rotation keeps orthonormality to rounding; one more pass
            // pins it well inside the 10·tolerance contract.
            orthonormalize_rows(&mut top, &mut rng, &normal);
            return Ok(top.transpose());
        }
    }
    Err(Error::SvdNoConvergence {
        iterations: cfg.max_iterations,
        residual,
    })
}

/// Modified Gram-Schmidt over the rows, applied twice. A row that collapses
/// (below `1e-10` of the largest input row norm) is replaced by a fresh random
/// direction and re-orthogonalized.
fn orthonormalize_rows(m: &mut Matrix, rng: &mut ChaCha8Rng, normal: &Normal<f64>) {
    let (k, n) = m.shape();
    let scale = (0..k)
        .map(|i| m.row(i).iter().map(|v| v * v).sum::<f64>().sqrt())
        .fold(0.0, f64::max);
    let floor = 1e-10 * scale.max(f64::MIN_POSITIVE);
    for i in 0..k {
        let mut attempts = 0;
        loop {
            let before = m.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            for _ in 0..2 {
                for j in 0..i {
                    let dot: f64 = m.row(i).iter().zip(m.row(j)).map(|(a, b)| a * b).sum();
                    let (head, tail) = m.as_mut_slice().split_at_mut(i * n);
                    let prev = &head[j * n..(j + 1) * n];
                    for (x, p) in tail[..n].iter_mut().zip(prev) {
                        *x -= dot * p;
                    }
                }
            }
            let norm = m.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > floor.max(1e-12 * before) && norm > 0.0 {
                for x in m.row_mut(i) {
                    *x /= norm;
                }
                break;
            }
            attempts += 1;
            assert!(attempts < 64, "could not complete an orthonormal basis");
            for x in m.row_mut(i) {
                *x = normal.sample(rng) * scale.max(1.0);
            }
        }
    }
}

/// Cyclic Jacobi eigen-decomposition of a small symmetric matrix.
///
/// Returns eigenvalues in descending order and the matching eigenvectors as
/// the columns of the second matrix.
pub fn symmetric_eigen(a: &Matrix) -> (Vec<f64>, Matrix) {
    let n = a.rows();
    debug_assert_eq!(n, a.cols());
    let mut s = a.clone();
    let mut v = Matrix::identity(n);
    let total: f64 = s.frobenius_norm_sq();
    for _sweep in 0..100 {
        let mut off = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    off += s[(i, j)] * s[(i, j)];
                }
            }
        }
        if off <= 1e-30 * total || off == 0.0 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = s[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let theta = (s[(q, q)] - s[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let sn = t * c;
                for k in 0..n {
                    let skp = s[(k, p)];
                    let skq = s[(k, q)];
                    s[(k, p)] = c * skp - sn * skq;
                    s[(k, q)] = sn * skp + c * skq;
                }
                for k in 0..n {
                    let spk = s[(p, k)];
                    let sqk = s[(q, k)];
                    s[(p, k)] = c * spk - sn * sqk;
                    s[(q, k)] = sn * spk + c * sqk;
                }
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - sn * vkq;
                    v[(k, q)] = sn * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| s[(j, j)].total_cmp(&s[(i, i)]).then(i.cmp(&j)));
    let values = order.iter().map(|&i| s[(i, i)]).collect();
    let mut vectors = Matrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        for k in 0..n {
            vectors[(k, dst)] = v[(k, src)];
        }
    }
    (values, vectors)
}
