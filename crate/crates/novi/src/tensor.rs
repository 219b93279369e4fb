//! Dense row-major double-precision tensors and the linear-algebra kernels
//! (products, Cholesky, triangular solves, pairwise distances) the rest of
//! the crate is built on.
//!
//! Determinism policy: data-parallel paths split work into fixed-size,
//! disjoint output chunks and never reduce across threads, so identical
//! inputs produce bit-identical outputs at any thread count.

use crate::error::{NoviError, Result};
use ndarray::ArrayView2;
use rayon::prelude::*;

/// Minimum element count before elementwise ops go parallel.
const PAR_THRESHOLD: usize = 1 << 15;
/// Fixed chunk length for parallel elementwise maps.
const PAR_CHUNK: usize = 1 << 14;

/// Dense row-major tensor of `f64` values.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(NoviError::dim(format!(
                "shape {:?} wants {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::filled(shape, 1.0)
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        let m = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != m) {
            return Err(NoviError::dim("ragged rows"));
        }
        let mut data = Vec::with_capacity(n * m);
        for r in rows {
            data.extend_from_slice(r);
        }
        Ok(Tensor {
            shape: vec![n, m],
            data,
        })
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1, "item() on non-scalar");
        self.data[0]
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        self.shape[1]
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.shape[1] + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        let m = self.shape[1];
        self.data[i * m + j] = v;
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn check_2d(&self, what: &str) -> Result<(usize, usize)> {
        if self.ndim() != 2 {
            return Err(NoviError::dim(format!(
                "{what}: expected 2-d tensor, got shape {:?}",
                self.shape
            )));
        }
        Ok((self.shape[0], self.shape[1]))
    }

    /// Reinterpret with a new shape of identical element count.
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(NoviError::dim(format!(
                "reshape {:?} -> {:?}: element count mismatch",
                self.shape, shape
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64 + Sync) -> Tensor {
        let mut out = vec![0.0; self.data.len()];
        if self.data.len() >= PAR_THRESHOLD {
            out.par_chunks_mut(PAR_CHUNK)
                .zip(self.data.par_chunks(PAR_CHUNK))
                .for_each(|(o, a)| {
                    for (oi, ai) in o.iter_mut().zip(a) {
                        *oi = f(*ai);
                    }
                });
        } else {
            for (oi, ai) in out.iter_mut().zip(&self.data) {
                *oi = f(*ai);
            }
        }
        Tensor {
            shape: self.shape.clone(),
            data: out,
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64 + Sync) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(NoviError::dim(format!(
                "elementwise op on shapes {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        let mut out = vec![0.0; self.data.len()];
        if self.data.len() >= PAR_THRESHOLD {
            out.par_chunks_mut(PAR_CHUNK)
                .zip(self.data.par_chunks(PAR_CHUNK))
                .zip(other.data.par_chunks(PAR_CHUNK))
                .for_each(|((o, a), b)| {
                    for ((oi, ai), bi) in o.iter_mut().zip(a).zip(b) {
                        *oi = f(*ai, *bi);
                    }
                });
        } else {
            for ((oi, ai), bi) in out.iter_mut().zip(&self.data).zip(&other.data) {
                *oi = f(*ai, *bi);
            }
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: out,
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a * b)
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.map(|a| a * c)
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        self.map(|a| a + c)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Matrix product of two 2-d tensors.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.check_2d("matmul lhs")?;
        let (k2, n) = other.check_2d("matmul rhs")?;
        if k != k2 {
            return Err(NoviError::dim(format!(
                "matmul: inner extents {k} vs {k2} (shapes {:?} x {:?})",
                self.shape, other.shape
            )));
        }
        let mut out = vec![0.0; m * n];
        if m == 0 || n == 0 || k == 0 {
            return Tensor::new(vec![m, n], out);
        }
        let a = ArrayView2::from_shape((m, k), &self.data)
            .map_err(|e| NoviError::dim(e.to_string()))?;
        // Column-blocked parallel GEMM: each block writes a disjoint slice of
        // the output, so results are identical at any thread count.
        let threads = rayon::current_num_threads();
        let work = m * n * k;
        if threads > 1 && work > (1 << 20) && n >= 2 * threads {
            let block = n.div_ceil(threads);
            let col_blocks: Vec<(usize, usize)> = (0..n)
                .step_by(block)
                .map(|c0| (c0, (c0 + block).min(n)))
                .collect();
            let pieces: Vec<Vec<f64>> = col_blocks
                .par_iter()
                .map(|&(c0, c1)| {
                    let w = c1 - c0;
                    let mut sub = vec![0.0; k * w];
                    for r in 0..k {
                        sub[r * w..(r + 1) * w]
                            .copy_from_slice(&other.data[r * n + c0..r * n + c1]);
                    }
                    let b = ArrayView2::from_shape((k, w), &sub).unwrap();
                    a.dot(&b).into_raw_vec_and_offset().0
                })
                .collect();
            for (bi, &(c0, c1)) in col_blocks.iter().enumerate() {
                let w = c1 - c0;
                for r in 0..m {
                    out[r * n + c0..r * n + c1].copy_from_slice(&pieces[bi][r * w..(r + 1) * w]);
                }
            }
        } else {
            let b = ArrayView2::from_shape((k, n), &other.data)
                .map_err(|e| NoviError::dim(e.to_string()))?;
            out = a.dot(&b).into_raw_vec_and_offset().0;
        }
        Tensor::new(vec![m, n], out)
    }

    /// Batched matrix product: `(g, n, k) x (g, k, p) -> (g, n, p)`.
    pub fn bmm(&self, other: &Tensor) -> Result<Tensor> {
        if self.ndim() != 3 || other.ndim() != 3 {
            return Err(NoviError::dim("bmm expects 3-d tensors"));
        }
        let (g, n, k) = (self.shape[0], self.shape[1], self.shape[2]);
        let (g2, k2, p) = (other.shape[0], other.shape[1], other.shape[2]);
        if g != g2 || k != k2 {
            return Err(NoviError::dim(format!(
                "bmm: shapes {:?} x {:?}",
                self.shape, other.shape
            )));
        }
        let mut out = vec![0.0; g * n * p];
        out.par_chunks_mut(n * p)
            .enumerate()
            .for_each(|(gi, chunk)| {
                let a = ArrayView2::from_shape((n, k), &self.data[gi * n * k..(gi + 1) * n * k])
                    .unwrap();
                let b = ArrayView2::from_shape((k, p), &other.data[gi * k * p..(gi + 1) * k * p])
                    .unwrap();
                let c = a.dot(&b);
                chunk.copy_from_slice(c.as_slice().unwrap());
            });
        Tensor::new(vec![g, n, p], out)
    }

    /// Transpose of a 2-d tensor.
    pub fn transpose(&self) -> Result<Tensor> {
        let (n, m) = self.check_2d("transpose")?;
        let mut out = vec![0.0; n * m];
        // Block transpose for cache friendliness on the large operands.
        const B: usize = 64;
        if n * m >= PAR_THRESHOLD {
            out.par_chunks_mut(n * B.min(m))
                .enumerate()
                .for_each(|(blk, chunk)| {
                    let c0 = blk * B.min(m);
                    let w = (c0 + B.min(m)).min(m) - c0;
                    for j in 0..w {
                        for i in 0..n {
                            chunk[j * n + i] = self.data[i * m + c0 + j];
                        }
                    }
                });
            // The parallel path above only works when m divides into equal B
            // chunks; fall back when it does not.
            if m % B.min(m) != 0 {
                for i in 0..n {
                    for j in 0..m {
                        out[j * n + i] = self.data[i * m + j];
                    }
                }
            }
        } else {
            for i in 0..n {
                for j in 0..m {
                    out[j * n + i] = self.data[i * m + j];
                }
            }
        }
        Tensor::new(vec![m, n], out)
    }

    /// Per-block transpose of a 3-d tensor: `(g, n, m) -> (g, m, n)`.
    pub fn transpose_batch(&self) -> Result<Tensor> {
        if self.ndim() != 3 {
            return Err(NoviError::dim("transpose_batch expects a 3-d tensor"));
        }
        let (g, n, m) = (self.shape[0], self.shape[1], self.shape[2]);
        let mut out = vec![0.0; g * n * m];
        out.par_chunks_mut(n * m).enumerate().for_each(|(gi, c)| {
            let src = &self.data[gi * n * m..(gi + 1) * n * m];
            for i in 0..n {
                for j in 0..m {
                    c[j * n + i] = src[i * m + j];
                }
            }
        });
        Tensor::new(vec![g, m, n], out)
    }

    /// Swap the two leading axes of a 3-d tensor: `(a, b, c) -> (b, a, c)`.
    pub fn swap_axes01(&self) -> Result<Tensor> {
        if self.ndim() != 3 {
            return Err(NoviError::dim("swap_axes01 expects a 3-d tensor"));
        }
        let (a, b, c) = (self.shape[0], self.shape[1], self.shape[2]);
        let mut out = vec![0.0; a * b * c];
        for i in 0..a {
            for j in 0..b {
                let src = &self.data[(i * b + j) * c..(i * b + j + 1) * c];
                out[(j * a + i) * c..(j * a + i + 1) * c].copy_from_slice(src);
            }
        }
        Tensor::new(vec![b, a, c], out)
    }

    /// Row sums of a 2-d tensor, returned as a length-n vector.
    pub fn row_sums(&self) -> Result<Tensor> {
        let (n, m) = self.check_2d("row_sums")?;
        let out: Vec<f64> = (0..n)
            .map(|i| self.data[i * m..(i + 1) * m].iter().sum())
            .collect();
        Tensor::new(vec![n], out)
    }

    /// Column sums of a 2-d tensor, returned as a length-m vector.
    pub fn col_sums(&self) -> Result<Tensor> {
        let (n, m) = self.check_2d("col_sums")?;
        let mut out = vec![0.0; m];
        for i in 0..n {
            for j in 0..m {
                out[j] += self.data[i * m + j];
            }
        }
        Tensor::new(vec![m], out)
    }

    pub fn slice_rows(&self, r0: usize, r1: usize) -> Result<Tensor> {
        let (n, m) = self.check_2d("slice_rows")?;
        if r0 > r1 || r1 > n {
            return Err(NoviError::dim(format!("slice_rows [{r0},{r1}) of {n}")));
        }
        Ok(Tensor {
            shape: vec![r1 - r0, m],
            data: self.data[r0 * m..r1 * m].to_vec(),
        })
    }

    pub fn slice_cols(&self, c0: usize, c1: usize) -> Result<Tensor> {
        let (n, m) = self.check_2d("slice_cols")?;
        if c0 > c1 || c1 > m {
            return Err(NoviError::dim(format!("slice_cols [{c0},{c1}) of {m}")));
        }
        let w = c1 - c0;
        let mut data = Vec::with_capacity(n * w);
        for i in 0..n {
            data.extend_from_slice(&self.data[i * m + c0..i * m + c1]);
        }
        Tensor::new(vec![n, w], data)
    }

    pub fn concat_rows(parts: &[&Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(NoviError::input("concat_rows of zero tensors"));
        }
        let m = parts[0].check_2d("concat_rows")?.1;
        let mut data = Vec::new();
        let mut n = 0;
        for p in parts {
            let (pn, pm) = p.check_2d("concat_rows")?;
            if pm != m {
                return Err(NoviError::dim("concat_rows: column mismatch"));
            }
            n += pn;
            data.extend_from_slice(&p.data);
        }
        Tensor::new(vec![n, m], data)
    }

    pub fn concat_cols(parts: &[&Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(NoviError::input("concat_cols of zero tensors"));
        }
        let n = parts[0].check_2d("concat_cols")?.0;
        let widths: Vec<usize> = parts
            .iter()
            .map(|p| p.check_2d("concat_cols").map(|(pn, pm)| {
                debug_assert_eq!(pn, n);
                pm
            }))
            .collect::<Result<_>>()?;
        if parts.iter().any(|p| p.shape[0] != n) {
            return Err(NoviError::dim("concat_cols: row mismatch"));
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(n * total);
        for i in 0..n {
            for (p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&p.data[i * w..(i + 1) * w]);
            }
        }
        Tensor::new(vec![n, total], data)
    }

    /// Pad a 2-d tensor with zero rows before and after.
    pub fn pad_rows(&self, before: usize, after: usize) -> Result<Tensor> {
        let (n, m) = self.check_2d("pad_rows")?;
        let mut data = vec![0.0; (before + n + after) * m];
        data[before * m..(before + n) * m].copy_from_slice(&self.data);
        Tensor::new(vec![before + n + after, m], data)
    }

    /// Pad a 2-d tensor with zero columns before and after.
    pub fn pad_cols(&self, before: usize, after: usize) -> Result<Tensor> {
        let (n, m) = self.check_2d("pad_cols")?;
        let w = before + m + after;
        let mut data = vec![0.0; n * w];
        for i in 0..n {
            data[i * w + before..i * w + before + m]
                .copy_from_slice(&self.data[i * m..(i + 1) * m]);
        }
        Tensor::new(vec![n, w], data)
    }

    /// Vertically tile a 2-d tensor `times` times.
    pub fn tile_rows(&self, times: usize) -> Result<Tensor> {
        let (n, m) = self.check_2d("tile_rows")?;
        let mut data = Vec::with_capacity(times * n * m);
        for _ in 0..times {
            data.extend_from_slice(&self.data);
        }
        Tensor::new(vec![times * n, m], data)
    }

    /// Squared Euclidean distance between all row pairs, clamped at zero.
    pub fn pairwise_sqdist(&self, other: &Tensor) -> Result<Tensor> {
        let (n, d) = self.check_2d("pairwise_sqdist lhs")?;
        let (m, d2) = other.check_2d("pairwise_sqdist rhs")?;
        if d != d2 {
            return Err(NoviError::dim(format!(
                "pairwise_sqdist: trailing dimensions {d} vs {d2}"
            )));
        }
        // |x - z|^2 = |x|^2 + |z|^2 - 2 x.z, evaluated via one GEMM.
        let cross = self.matmul(&other.transpose()?)?;
        let xs: Vec<f64> = (0..n)
            .map(|i| self.data[i * d..(i + 1) * d].iter().map(|v| v * v).sum())
            .collect();
        let zs: Vec<f64> = (0..m)
            .map(|j| other.data[j * d..(j + 1) * d].iter().map(|v| v * v).sum())
            .collect();
        let mut data = cross.data;
        for i in 0..n {
            for j in 0..m {
                let v = xs[i] + zs[j] - 2.0 * data[i * m + j];
                data[i * m + j] = if v > 0.0 { v } else { 0.0 };
            }
        }
        Tensor::new(vec![n, m], data)
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Which triangular system a solve targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    /// Solve `L x = b` by forward substitution.
    Lower,
    /// Solve `L^T x = b` by back substitution.
    Upper,
}

/// Lower-triangular Cholesky factor together with the jitter that made the
/// factorization succeed.
#[derive(Debug, Clone)]
pub struct CholeskyFactor {
    lower: Tensor,
    jitter_used: f64,
}

impl CholeskyFactor {
    pub fn lower(&self) -> &Tensor {
        &self.lower
    }

    pub fn jitter_used(&self) -> f64 {
        self.jitter_used
    }

    pub fn dim(&self) -> usize {
        self.lower.shape()[0]
    }

    /// `log det (L L^T)` of the factored matrix.
    pub fn log_det(&self) -> f64 {
        let n = self.dim();
        (0..n).map(|i| self.lower.at(i, i).ln()).sum::<f64>() * 2.0
    }

    /// Apply `(L L^T)^{-1}` to a matrix of right-hand sides.
    pub fn solve(&self, b: &Tensor) -> Result<Tensor> {
        let y = tri_solve(self, b, Side::Lower)?;
        tri_solve(self, &y, Side::Upper)
    }

    /// Dense `(L L^T)^{-1}` via solves against the identity.
    pub fn inverse(&self) -> Result<Tensor> {
        self.solve(&Tensor::eye(self.dim()))
    }
}

/// Default base jitter for kernel-matrix factorizations.
pub const BASE_JITTER: f64 = 1e-8;
/// Cap on the escalated jitter before a factorization is abandoned.
pub const JITTER_CAP: f64 = 1e-2;

/// Cholesky factorization with geometric jitter escalation.
///
/// Starting from `base_jitter`, the diagonal boost is multiplied by 10 until
/// the factorization succeeds or the boost exceeds [`JITTER_CAP`].
pub fn cholesky(a: &Tensor, base_jitter: f64) -> Result<CholeskyFactor> {
    let (n, m) = match a.shape() {
        [n, m] => (*n, *m),
        s => return Err(NoviError::dim(format!("cholesky on shape {s:?}"))),
    };
    if n != m {
        return Err(NoviError::dim(format!("cholesky on non-square {n}x{m}")));
    }
    if !a.all_finite() {
        return Err(NoviError::numerical("cholesky: non-finite input"));
    }
    let mut max_asym: f64 = 0.0;
    let mut max_abs: f64 = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            max_asym = max_asym.max((a.at(i, j) - a.at(j, i)).abs());
            max_abs = max_abs.max(a.at(i, j).abs());
        }
        max_abs = max_abs.max(a.at(i, i).abs());
    }
    if max_asym > 1e-10 * max_abs.max(1.0) {
        return Err(NoviError::input(format!(
            "cholesky: non-symmetric input (max asymmetry {max_asym:.3e})"
        )));
    }

    let mut jitter = base_jitter.max(0.0);
    loop {
        if let Some(lower) = try_factor(a, jitter, n) {
            return Ok(CholeskyFactor {
                lower,
                jitter_used: jitter,
            });
        }
        jitter = if jitter == 0.0 { BASE_JITTER } else { jitter * 10.0 };
        if jitter > JITTER_CAP {
            return Err(NoviError::numerical(format!(
                "cholesky failed up to jitter {:.3e}",
                jitter / 10.0
            )));
        }
    }
}

fn try_factor(a: &Tensor, jitter: f64, n: usize) -> Option<Tensor> {
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut s = a.at(i, j);
            if i == j {
                s += jitter;
            }
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            if i == j {
                if s <= 0.0 || !s.is_finite() {
                    return None;
                }
                l[i * n + i] = s.sqrt();
            } else {
                l[i * n + j] = s / l[j * n + j];
            }
        }
    }
    Some(Tensor::new(vec![n, n], l).unwrap())
}

/// Triangular solve against a Cholesky factor with a matrix (or vector) of
/// right-hand sides. Columns are independent and solved in parallel blocks.
pub fn tri_solve(factor: &CholeskyFactor, b: &Tensor, side: Side) -> Result<Tensor> {
    let n = factor.dim();
    let (bn, bm) = match b.shape() {
        [r] => (*r, 1),
        [r, c] => (*r, *c),
        s => return Err(NoviError::dim(format!("tri_solve rhs shape {s:?}"))),
    };
    if bn != n {
        return Err(NoviError::dim(format!(
            "tri_solve: factor dim {n} vs rhs rows {bn}"
        )));
    }
    let l = factor.lower.data();
    let mut out = vec![0.0; bn * bm];

    let solve_block = |cols: std::ops::Range<usize>, out: &mut [f64]| {
        let w = cols.len();
        // Gather the column block into contiguous row-major storage.
        let mut x = vec![0.0; n * w];
        for r in 0..n {
            x[r * w..(r + 1) * w].copy_from_slice(&b.data()[r * bm + cols.start..r * bm + cols.end]);
        }
        match side {
            Side::Lower => {
                for i in 0..n {
                    let (head, tail) = x.split_at_mut(i * w);
                    let xi = &mut tail[..w];
                    for k in 0..i {
                        let lik = l[i * n + k];
                        if lik != 0.0 {
                            let xk = &head[k * w..(k + 1) * w];
                            for (a, b) in xi.iter_mut().zip(xk) {
                                *a -= lik * b;
                            }
                        }
                    }
                    let d = l[i * n + i];
                    for a in xi.iter_mut() {
                        *a /= d;
                    }
                }
            }
            Side::Upper => {
                for i in (0..n).rev() {
                    let (head, tail) = x.split_at_mut((i + 1) * w);
                    let xi = &mut head[i * w..(i + 1) * w];
                    for k in (i + 1)..n {
                        let lki = l[k * n + i]; // (L^T)_{ik}
                        if lki != 0.0 {
                            let xk = &tail[(k - i - 1) * w..(k - i) * w];
                            for (a, b) in xi.iter_mut().zip(xk) {
                                *a -= lki * b;
                            }
                        }
                    }
                    let d = l[i * n + i];
                    for a in xi.iter_mut() {
                        *a /= d;
                    }
                }
            }
        }
        for r in 0..n {
            out[r * w..(r + 1) * w].copy_from_slice(&x[r * w..(r + 1) * w]);
        }
    };

    let work = n * n * bm;
    let threads = rayon::current_num_threads();
    if threads > 1 && work > (1 << 20) && bm >= 2 * threads {
        let block = bm.div_ceil(threads * 2);
        let col_blocks: Vec<(usize, usize)> = (0..bm)
            .step_by(block)
            .map(|c0| (c0, (c0 + block).min(bm)))
            .collect();
        let pieces: Vec<Vec<f64>> = col_blocks
            .par_iter()
            .map(|&(c0, c1)| {
                let mut piece = vec![0.0; n * (c1 - c0)];
                solve_block(c0..c1, &mut piece);
                piece
            })
            .collect();
        for (bi, &(c0, c1)) in col_blocks.iter().enumerate() {
            let w = c1 - c0;
            for r in 0..n {
                out[r * bm + c0..r * bm + c1].copy_from_slice(&pieces[bi][r * w..(r + 1) * w]);
            }
        }
    } else {
        solve_block(0..bm, &mut out);
    }
    Tensor::new(b.shape().to_vec(), out)
}
