//! Dense matrix substrate, seeded randomness and a finite-difference gradient oracle.
//!
//! Working precision is `f32`. Matrix products use a fixed reduction order: every
//! output element is accumulated sequentially over the inner dimension, starting
//! from `0.0`, so results are bit-reproducible regardless of how rows are scheduled.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Dense row-major matrix of working-precision reals.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f32) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::InvalidArgument(format!(
                "data length {} does not match shape {rows}x{cols}",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from nested rows. Panics on ragged input; intended for tests and literals.
    pub fn from_rows<R: AsRef<[f32]>>(rows: &[R]) -> Self {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Self {
            rows: rows.len(),
            cols,
            data,
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f32 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, value: f32) {
        self.data[i * self.cols + j] = value;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        let c = self.cols;
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn scale(&self, c: f32) -> Matrix {
        self.map(|x| x * c)
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn hadamard(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, "hadamard", |a, b| a * b)
    }

    pub fn add_assign(&mut self, other: &Matrix) -> Result<()> {
        self.check_same_shape(other, "add_assign")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    fn zip_with(&self, other: &Matrix, op: &'static str, f: impl Fn(f32, f32) -> f32) -> Result<Matrix> {
        self.check_same_shape(other, op)?;
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    fn check_same_shape(&self, other: &Matrix, op: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::ShapeMismatch {
                op,
                lhs: self.shape(),
                rhs: other.shape(),
            });
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn absmax(&self) -> f32 {
        self.data.iter().fold(0.0f32, |m, x| m.max(x.abs()))
    }

    pub fn abs_mean(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        self.data.iter().map(|&x| x.abs() as f64).sum::<f64>() / self.data.len() as f64
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().map(|&x| x as f64).sum()
    }

    /// Squared Frobenius norm, accumulated in f64.
    pub fn sq_norm(&self) -> f64 {
        self.data.iter().map(|&x| (x as f64) * (x as f64)).sum()
    }

    pub fn frobenius(&self) -> f64 {
        self.sq_norm().sqrt()
    }
}

/// Computes `A · Bᵀ` for `A: r×k` and `b_transposed: c×k`.
///
/// Each output element is `((0 + a0*b0) + a1*b1) + ...` in f32, sequential over `k`.
/// Blocking only changes which elements are in flight together, never any element's
/// reduction order, so results are identical for every tile size and instruction set.
pub fn matmul(a: &Matrix, b_transposed: &Matrix) -> Result<Matrix> {
    if a.cols != b_transposed.cols {
        return Err(Error::ShapeMismatch {
            op: "matmul",
            lhs: a.shape(),
            rhs: b_transposed.shape(),
        });
    }
    // k×c layout: row p holds B[:, p]ᵀ.
    let bk = b_transposed.transpose();
    let mut out = Matrix::zeros(a.rows, b_transposed.rows);
    gemm_kernel(&a.data, &bk.data, &mut out.data, a.rows, a.cols, b_transposed.rows);
    Ok(out)
}

/// `A · B` for `A: r×k`, `B: k×c`, same reduction order as [`matmul`].
pub fn matmul_nn(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::ShapeMismatch {
            op: "matmul_nn",
            lhs: a.shape(),
            rhs: b.shape(),
        });
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    gemm_kernel(&a.data, &b.data, &mut out.data, a.rows, a.cols, b.cols);
    Ok(out)
}

const TILE_ROWS: usize = 4;
const TILE_COLS: usize = 32;

/// Generic tiled product `out = A·B` (`A: r×k`, `B: k×c`, all row-major) with each output
/// accumulated in order `p = 0, 1, ..., k−1` starting from zero. Used for f32 and for the
/// widened int8 path.
pub(crate) fn gemm_kernel<T>(a: &[T], b: &[T], out: &mut [T], r: usize, k: usize, c: usize)
where
    T: Copy + Default + std::ops::Add<Output = T> + std::ops::Mul<Output = T>,
{
    debug_assert_eq!(a.len(), r * k);
    debug_assert_eq!(b.len(), k * c);
    debug_assert_eq!(out.len(), r * c);
    let full_cols = c - c % TILE_COLS;
    let mut i = 0;
    while i + TILE_ROWS <= r {
        let mut j = 0;
        while j < full_cols {
            let mut acc = [[T::default(); TILE_COLS]; TILE_ROWS];
            let arows: [&[T]; TILE_ROWS] = std::array::from_fn(|ii| &a[(i + ii) * k..(i + ii + 1) * k]);
            for (p, bfull) in b.chunks_exact(c).enumerate() {
                let brow: &[T; TILE_COLS] = bfull[j..j + TILE_COLS].try_into().unwrap();
                for (row, arow) in acc.iter_mut().zip(&arows) {
                    let av = arow[p];
                    for (o, &bv) in row.iter_mut().zip(brow) {
                        *o = *o + av * bv;
                    }
                }
            }
            for (ii, row) in acc.iter().enumerate() {
                out[(i + ii) * c + j..(i + ii) * c + j + TILE_COLS].copy_from_slice(row);
            }
            j += TILE_COLS;
        }
        gemm_edge(a, b, out, i..i + TILE_ROWS, full_cols..c, k, c);
        i += TILE_ROWS;
    }
    gemm_edge(a, b, out, i..r, 0..c, k, c);
}

fn gemm_edge<T>(a: &[T], b: &[T], out: &mut [T], rows: std::ops::Range<usize>, cols: std::ops::Range<usize>, k: usize, c: usize)
where
    T: Copy + Default + std::ops::Add<Output = T> + std::ops::Mul<Output = T>,
{
    if cols.is_empty() {
        return;
    }
    for i in rows {
        let orow = &mut out[i * c + cols.start..i * c + cols.end];
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * c + cols.start..p * c + cols.end];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
}

/// `Aᵀ · B` for `A: k×r`, `B: k×c`, same reduction order as [`matmul`].
pub fn matmul_tn(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.rows != b.rows {
        return Err(Error::ShapeMismatch {
            op: "matmul_tn",
            lhs: a.shape(),
            rhs: b.shape(),
        });
    }
    matmul_nn(&a.transpose(), b)
}

/// 64-bit seed for every pseudo-random stream in the crate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct Seed(pub u64);

impl Seed {
    /// Derives an independent child seed, e.g. for a trial index or iteration.
    pub fn derive(self, index: u64) -> Seed {
        // splitmix64 over (seed, index)
        let mut z = self.0 ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(0xD1B5_4A32_D192_ED03);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        Seed(z ^ (z >> 31))
    }
}

/// Seeded generator: ChaCha8 integer stream, uniforms from the top 53 bits of each
/// `u64`, and standard normals via the Box–Muller transform (both outputs of a pair
/// are used, cosine first).
#[derive(Debug, Clone)]
pub struct Rng {
    inner: ChaCha8Rng,
    spare: Option<f64>,
}

impl Rng {
    pub fn new(seed: Seed) -> Self {
        Self {
            inner: ChaCha8Rng::seed_from_u64(seed.0),
            spare: None,
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        (self.inner.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0);
        // Lemire-free modulo with rejection to stay unbiased.
        let zone = u64::MAX - (u64::MAX % n);
        loop {
            let x = self.inner.next_u64();
            if x < zone {
                return x % n;
            }
        }
    }

    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        // u1 in (0, 1] so ln(u1) is finite.
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = std::f64::consts::TAU * u2;
        self.spare = Some(r * theta.sin());
        r * theta.cos()
    }

    pub fn gaussian(&mut self, mean: f64, stdev: f64) -> f64 {
        mean + stdev * self.normal()
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i as u64 + 1) as usize;
            items.swap(i, j);
        }
    }
}

/// Matrix with i.i.d. `N(mean, stdev²)` entries, drawn in row-major order.
pub fn gaussian_matrix(rows: usize, cols: usize, mean: f64, stdev: f64, seed: Seed) -> Matrix {
    let mut rng = Rng::new(seed);
    gaussian_matrix_from(&mut rng, rows, cols, mean, stdev)
}

pub fn gaussian_matrix_from(rng: &mut Rng, rows: usize, cols: usize, mean: f64, stdev: f64) -> Matrix {
    assert!(stdev >= 0.0, "stdev must be non-negative");
    Matrix::from_fn(rows, cols, |_, _| rng.gaussian(mean, stdev) as f32)
}

/// Central-difference gradient of a scalar function of a matrix.
///
/// The perturbed points are materialized in f32, so the divisor is the step actually
/// taken, `(x+h) - (x-h)` evaluated exactly in f64, rather than the nominal `2h`.
pub fn finite_difference_grad<F>(mut f: F, x: &Matrix, h: f32) -> Result<Matrix>
where
    F: FnMut(&Matrix) -> f64,
{
    if !(h > 0.0) {
        return Err(Error::InvalidArgument(format!("step must be positive, got {h}")));
    }
    let mut probe = x.clone();
    let mut grad = Matrix::zeros(x.rows, x.cols);
    for idx in 0..x.data.len() {
        let orig = x.data[idx];
        let hi = orig + h;
        let lo = orig - h;
        probe.data[idx] = hi;
        let f_hi = f(&probe);
        probe.data[idx] = lo;
        let f_lo = f(&probe);
        probe.data[idx] = orig;
        if !f_hi.is_finite() || !f_lo.is_finite() {
            return Err(Error::NonFinite("finite_difference_grad objective"));
        }
        grad.data[idx] = ((f_hi - f_lo) / (hi as f64 - lo as f64)) as f32;
    }
    Ok(grad)
}
