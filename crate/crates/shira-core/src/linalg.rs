//! Dense row-major matrices, a fixed in-repo PRNG, and numerical rank.
//!
//! Everything is 64-bit floats in row-major order; that layout is also the
//! wire layout of the binary formats in [`crate::persist`]. Operations are
//! pure and deterministic: the parallel matmul partitions output rows, so
//! each entry sees the same floating-point operation order as the
//! sequential kernel.

use crate::error::{Result, ShiraError};
use crate::par;
use serde::{Deserialize, Serialize};

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Row-major 2-D array of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    /// Builds a matrix from row-major data. The length must be exactly
    /// `rows * cols` and every entry must be finite.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(ShiraError::shape(
                "DenseMatrix::new",
                format!("{rows}x{cols}"),
                format!("data len {}", data.len()),
            ));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(ShiraError::InvalidArgument(
                "matrix entries must be finite".into(),
            ));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn shape_string(&self) -> String {
        format!("{}x{}", self.rows, self.cols)
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        self.data[row * self.cols + col] = value;
    }

    #[inline]
    pub fn row(&self, row: usize) -> &[f64] {
        &self.data[row * self.cols..(row + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn transpose(&self) -> DenseMatrix {
        let mut out = DenseMatrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Number of entries whose values differ from `other`'s.
    pub fn count_diff(&self, other: &DenseMatrix) -> usize {
        assert_eq!(self.shape(), other.shape(), "count_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .filter(|(a, b)| a != b)
            .count()
    }

    /// Bit-level equality, stricter than `==` (distinguishes -0.0 from 0.0).
    pub fn bit_eq(&self, other: &DenseMatrix) -> bool {
        self.shape() == other.shape()
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

/// Sampling distributions for [`rand_matrix`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dist {
    /// Uniform on `[0, 1)`.
    Uniform,
    /// Mean-zero gaussian with the given standard deviation.
    Gaussian { std: f64 },
    /// Mean-zero gaussian with std `sqrt(2 / fan_in)`, fan-in = cols.
    Kaiming,
}

/// Deterministic 64-bit PRNG, fixed so sequences can be reproduced in any
/// language from this description alone (no platform RNG involved).
///
/// State initialisation: one splitmix64 step of the seed
/// (`z = seed + 0x9E3779B97F4A7C15; z = (z ^ z>>30) * 0xBF58476D1CE4E5B9;
/// z = (z ^ z>>27) * 0x94D049BB133111EB; z = z ^ z>>31`), replacing a zero
/// result with `0x9E3779B97F4A7C15`.
///
/// Each draw is xorshift64*: `x ^= x>>12; x ^= x<<25; x ^= x>>27;` then the
/// output is `x * 0x2545F4914F6CDD1D` (wrapping).
///
/// `next_f64` maps a draw to `[0,1)` as `(x >> 11) * 2^-53`. `next_gaussian`
/// is one Box-Muller evaluation consuming exactly two draws:
/// `sqrt(-2 ln(1-u1)) * cos(2*pi*u2)` (the sine half is discarded, keeping
/// the state a single 64-bit word). The raw `u64` stream is bit-exact
/// everywhere; gaussian outputs match to within the platform libm's
/// `ln`/`cos` rounding.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SeededRng {
    state: u64,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        let mut z = seed.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
        if z == 0 {
            z = 0x9E37_79B9_7F4A_7C15;
        }
        Self { state: z }
    }

    pub fn next_u64(&mut self) -> u64 {
        let mut x = self.state;
        x ^= x >> 12;
        x ^= x << 25;
        x ^= x >> 27;
        self.state = x;
        x.wrapping_mul(0x2545_F491_4F6C_DD1D)
    }

    /// Uniform in `[0, 1)`.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Mean-zero, unit-std gaussian (Box-Muller, two draws per call).
    pub fn next_gaussian(&mut self) -> f64 {
        let u1 = self.next_f64();
        let u2 = self.next_f64();
        // 1-u1 lies in (0,1]; ln never sees zero.
        (-2.0 * (1.0 - u1).ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Uniform integer in `[0, bound)`. `bound` must be nonzero; the modulo
    /// bias is below 2^-40 for every bound used in this crate.
    pub fn next_index(&mut self, bound: u64) -> u64 {
        assert!(bound > 0, "next_index bound must be positive");
        self.next_u64() % bound
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.next_index(i as u64 + 1) as usize;
            xs.swap(i, j);
        }
    }
}

/// Deterministic random matrix. Identical seed gives identical bits.
pub fn rand_matrix(rng: &mut SeededRng, rows: usize, cols: usize, dist: Dist) -> DenseMatrix {
    assert!(rows >= 1 && cols >= 1, "rand_matrix wants rows, cols >= 1");
    let mut data = Vec::with_capacity(rows * cols);
    match dist {
        Dist::Uniform => {
            for _ in 0..rows * cols {
                data.push(rng.next_f64());
            }
        }
        Dist::Gaussian { std } => {
            for _ in 0..rows * cols {
                data.push(std * rng.next_gaussian());
            }
        }
        Dist::Kaiming => {
            let std = (2.0 / cols as f64).sqrt();
            for _ in 0..rows * cols {
                data.push(std * rng.next_gaussian());
            }
        }
    }
    DenseMatrix { rows, cols, data }
}

fn check_mul_shapes(a: &DenseMatrix, b: &DenseMatrix) -> Result<()> {
    if a.cols != b.rows {
        return Err(ShiraError::shape(
            "matmul",
            a.shape_string(),
            b.shape_string(),
        ));
    }
    Ok(())
}

#[inline]
fn matmul_row(a_row: &[f64], b: &DenseMatrix, out_row: &mut [f64]) {
    // ikj order: each output entry accumulates terms in ascending k, the
    // same order as the textbook ijk loop, so results are bit-identical.
    for (k, &aik) in a_row.iter().enumerate() {
        let b_row = b.row(k);
        for (o, &bv) in out_row.iter_mut().zip(b_row) {
            *o += aik * bv;
        }
    }
}

/// Sequential matrix product; the reference kernel the parallel path must
/// match bit-for-bit.
pub fn matmul_seq(a: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix> {
    check_mul_shapes(a, b)?;
    let mut out = DenseMatrix::zeros(a.rows, b.cols);
    for (i, out_row) in out.data.chunks_mut(b.cols).enumerate() {
        matmul_row(a.row(i), b, out_row);
    }
    Ok(out)
}

/// Matrix product. Dispatches to a row-parallel kernel when the `parallel`
/// feature is on, the thread budget allows it, and the problem is big
/// enough to amortize the pool; output bits do not depend on the path.
pub fn matmul(a: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix> {
    check_mul_shapes(a, b)?;
    #[cfg(feature = "parallel")]
    {
        let work = a.rows * a.cols * b.cols;
        if par::parallel_enabled() && work >= 1 << 16 && a.rows > 1 {
            let mut out = DenseMatrix::zeros(a.rows, b.cols);
            let cols = b.cols;
            par::run(|| {
                out.data
                    .par_chunks_mut(cols)
                    .enumerate()
                    .for_each(|(i, out_row)| matmul_row(a.row(i), b, out_row));
            });
            return Ok(out);
        }
    }
    matmul_seq(a, b)
}

/// Entrywise `w + alpha * delta`. With `alpha == 0.0` this returns `w`
/// bit-identical (no arithmetic is performed, so even signed zeros
/// survive).
pub fn add_scaled(w: &DenseMatrix, delta: &DenseMatrix, alpha: f64) -> Result<DenseMatrix> {
    if w.shape() != delta.shape() {
        return Err(ShiraError::shape(
            "add_scaled",
            w.shape_string(),
            delta.shape_string(),
        ));
    }
    if alpha == 0.0 {
        return Ok(w.clone());
    }
    let data = w
        .data
        .iter()
        .zip(&delta.data)
        .map(|(a, d)| a + alpha * d)
        .collect();
    Ok(DenseMatrix {
        rows: w.rows,
        cols: w.cols,
        data,
    })
}

/// Numerical rank by Gaussian elimination with full pivoting: the count of
/// pivots whose magnitude exceeds `tol` times the largest pivot magnitude.
pub fn numerical_rank(a: &DenseMatrix, tol: f64) -> Result<usize> {
    if a.rows == 0 || a.cols == 0 {
        return Err(ShiraError::EmptyMatrix("numerical_rank"));
    }
    if !(tol > 0.0) {
        return Err(ShiraError::InvalidArgument(format!(
            "numerical_rank tolerance must be positive, got {tol}"
        )));
    }
    let (n, m) = (a.rows, a.cols);
    let mut w = a.data.clone();
    let mut pivots: Vec<f64> = Vec::new();

    for step in 0..n.min(m) {
        // Full pivot: largest magnitude in the remaining submatrix.
        let mut best = 0.0f64;
        let (mut pr, mut pc) = (step, step);
        for r in step..n {
            for c in step..m {
                let v = w[r * m + c].abs();
                if v > best {
                    best = v;
                    pr = r;
                    pc = c;
                }
            }
        }
        if best == 0.0 {
            break;
        }
        if pr != step {
            for c in 0..m {
                w.swap(step * m + c, pr * m + c);
            }
        }
        if pc != step {
            for r in 0..n {
                w.swap(r * m + step, r * m + pc);
            }
        }
        let pivot = w[step * m + step];
        pivots.push(pivot.abs());
        for r in step + 1..n {
            let factor = w[r * m + step] / pivot;
            if factor == 0.0 {
                continue;
            }
            for c in step..m {
                w[r * m + c] -= factor * w[step * m + c];
            }
        }
    }

    let largest = pivots.iter().cloned().fold(0.0f64, f64::max);
    if largest == 0.0 {
        return Ok(0);
    }
    Ok(pivots.iter().filter(|p| **p > tol * largest).count())
}
