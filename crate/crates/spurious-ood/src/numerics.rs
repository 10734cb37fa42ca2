//! Deterministic numerical kernels shared by every other module: a seedable
//! RNG with derivable child streams, Gaussian sampling, dense row-major
//! linear algebra, minimum-norm least squares, SPD solves and a stable
//! log-sum-exp.
//!
//! Everything here is bit-reproducible across runs and platforms for a fixed
//! seed; all stochastic sampling in the crate goes through [`Rng`].

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum NumericsError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("rank deficient: smallest pivot {0:e} below tolerance")]
    RankDeficient(f64),
    #[error("matrix is not symmetric positive definite (pivot {0:e})")]
    NotSpd(f64),
    #[error("empty input")]
    EmptyInput,
    #[error("variance must be positive, got {0}")]
    NonPositiveVariance(f64),
}

pub type Result<T> = std::result::Result<T, NumericsError>;

// ---------------------------------------------------------------------------
// RNG
// ---------------------------------------------------------------------------

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// xoshiro256++ seeded through splitmix64 expansion. Child streams are
/// derived from the *original* seed plus a label, so they do not depend on
/// how many draws the parent has made.
#[derive(Debug, Clone)]
pub struct Rng {
    s: [u64; 4],
    seed: u64,
    /// Cached second Box-Muller deviate.
    spare: Option<f64>,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        let mut sm = seed;
        let s = [
            splitmix64(&mut sm),
            splitmix64(&mut sm),
            splitmix64(&mut sm),
            splitmix64(&mut sm),
        ];
        Rng { s, seed, spare: None }
    }

    /// Derive an independent stream keyed by `label`. Depends only on the
    /// seed this generator was constructed with, never on draw order.
    pub fn child(&self, label: &str) -> Rng {
        // FNV-1a over the label bytes, folded into the seed via splitmix.
        let mut h: u64 = 0xCBF2_9CE4_8422_2325;
        for &b in label.as_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01B3);
        }
        let mut sm = self.seed ^ h;
        Rng::new(splitmix64(&mut sm))
    }

    pub fn next_u64(&mut self) -> u64 {
        let s = &mut self.s;
        let result = s[0]
            .wrapping_add(s[3])
            .rotate_left(23)
            .wrapping_add(s[0]);
        let t = s[1] << 17;
        s[2] ^= s[0];
        s[3] ^= s[1];
        s[1] ^= s[2];
        s[0] ^= s[3];
        s[2] ^= t;
        s[3] = s[3].rotate_left(45);
        result
    }

    /// Uniform in [0, 1) with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in [0, n).
    pub fn next_below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        (self.next_f64() * n as f64) as usize % n
    }

    /// Standard normal deviate via Box-Muller.
    pub fn next_gaussian(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        // u1 in (0,1] so the log is finite.
        let u1 = 1.0 - self.next_f64();
        let u2 = self.next_f64();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare = Some(r * theta.sin());
        r * theta.cos()
    }

    /// Fisher-Yates shuffle of indices 0..n.
    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = self.next_below(i + 1);
            idx.swap(i, j);
        }
        idx
    }
}

/// `n` i.i.d. samples from the isotropic Gaussian N(mean, variance * I).
pub fn gaussian_vector(
    rng: &mut Rng,
    mean: &[f64],
    variance: f64,
    n: usize,
) -> Result<Vec<Vec<f64>>> {
    if variance <= 0.0 {
        return Err(NumericsError::NonPositiveVariance(variance));
    }
    let sd = variance.sqrt();
    Ok((0..n)
        .map(|_| mean.iter().map(|&m| m + sd * rng.next_gaussian()).collect())
        .collect())
}

// ---------------------------------------------------------------------------
// Dense linear algebra
// ---------------------------------------------------------------------------

/// Row-major dense matrix with immutable dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        if rows.is_empty() {
            return Err(NumericsError::EmptyInput);
        }
        let cols = rows[0].len();
        if rows.iter().any(|r| r.len() != cols) {
            return Err(NumericsError::ShapeMismatch("ragged rows".into()));
        }
        Ok(Matrix {
            rows: rows.len(),
            cols,
            data: rows.iter().flat_map(|r| r.iter().copied()).collect(),
        })
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(NumericsError::ShapeMismatch(format!(
                "{}x{} needs {} entries, got {}",
                rows,
                cols,
                rows * cols,
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
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

    pub fn trace(&self) -> f64 {
        (0..self.rows.min(self.cols)).map(|i| self.get(i, i)).sum()
    }

    /// self * other. The inner loop is ordered i-k-j so both operands are
    /// walked contiguously; this carries the MLP training load.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(NumericsError::ShapeMismatch(format!(
                "{}x{} * {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let arow = &self.data[i * self.cols..(i + 1) * self.cols];
            let orow = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for (k, &a) in arow.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let brow = &other.data[k * other.cols..(k + 1) * other.cols];
                for (o, &b) in orow.iter_mut().zip(brow) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    pub fn matvec(&self, v: &[f64]) -> Result<Vec<f64>> {
        if self.cols != v.len() {
            return Err(NumericsError::ShapeMismatch(format!(
                "{}x{} * vec {}",
                self.rows,
                self.cols,
                v.len()
            )));
        }
        Ok((0..self.rows).map(|i| dot(self.row(i), v)).collect())
    }

    pub fn scale(&self, c: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|x| x * c).collect(),
        }
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(NumericsError::ShapeMismatch("add".into()));
        }
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a + b)
                .collect(),
        })
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm2(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// Cholesky factor L (lower triangular, S = L Lᵀ). `pivot_tol` is an
/// absolute bound on the pivot before the square root; the first failing
/// pivot is reported.
fn cholesky(s: &Matrix, pivot_tol: f64) -> std::result::Result<Matrix, f64> {
    let n = s.rows;
    let mut l = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let mut sum = s.get(i, j);
            for k in 0..j {
                sum -= l.get(i, k) * l.get(j, k);
            }
            if i == j {
                if sum <= pivot_tol {
                    return Err(sum);
                }
                l.set(i, j, sum.sqrt());
            } else {
                l.set(i, j, sum / l.get(j, j));
            }
        }
    }
    Ok(l)
}

fn cholesky_solve(l: &Matrix, rhs: &[f64]) -> Vec<f64> {
    let n = l.rows;
    // forward substitution L y = rhs
    let mut y = vec![0.0; n];
    for i in 0..n {
        let mut sum = rhs[i];
        for k in 0..i {
            sum -= l.get(i, k) * y[k];
        }
        y[i] = sum / l.get(i, i);
    }
    // backward substitution Lᵀ x = y
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let mut sum = y[i];
        for k in i + 1..n {
            sum -= l.get(k, i) * x[k];
        }
        x[i] = sum / l.get(i, i);
    }
    x
}

/// Minimum-Euclidean-norm solution of the underdetermined system A x = b,
/// computed as Aᵀ(AAᵀ)⁻¹b. Requires linearly independent rows.
pub fn min_norm_solve(a: &Matrix, b: &[f64]) -> Result<Vec<f64>> {
    if a.rows() != b.len() {
        return Err(NumericsError::ShapeMismatch(format!(
            "A is {}x{}, b has {}",
            a.rows(),
            a.cols(),
            b.len()
        )));
    }
    let gram = a.matmul(&a.transpose())?;
    let l = cholesky(&gram, 1e-10).map_err(NumericsError::RankDeficient)?;
    let y = cholesky_solve(&l, b);
    a.transpose().matvec(&y)
}

/// Solve S x = rhs for symmetric positive-definite S.
pub fn spd_solve(s: &Matrix, rhs: &[f64]) -> Result<Vec<f64>> {
    let l = spd_cholesky(s)?;
    Ok(cholesky_solve(&l, rhs))
}

/// Cholesky factor with the SPD pivot tolerance used across the crate
/// (pivot ≤ 1e-12 · trace(S)/d fails).
pub fn spd_cholesky(s: &Matrix) -> Result<Matrix> {
    if s.rows() != s.cols() {
        return Err(NumericsError::ShapeMismatch("not square".into()));
    }
    let tol = 1e-12 * s.trace() / s.rows() as f64;
    cholesky(s, tol).map_err(NumericsError::NotSpd)
}

/// Quadratic form vᵀ S⁻¹ v from a precomputed Cholesky factor of S.
pub fn chol_quadform(l: &Matrix, v: &[f64]) -> f64 {
    // solve L y = v, then vᵀS⁻¹v = yᵀy
    let n = l.rows();
    let mut y = vec![0.0; n];
    for i in 0..n {
        let mut sum = v[i];
        for k in 0..i {
            sum -= l.get(i, k) * y[k];
        }
        y[i] = sum / l.get(i, i);
    }
    dot(&y, &y)
}

/// log Σ exp(v_i), max-shifted so it never overflows on finite input.
pub fn log_sum_exp(v: &[f64]) -> Result<f64> {
    if v.is_empty() {
        return Err(NumericsError::EmptyInput);
    }
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m.is_infinite() {
        return Ok(m);
    }
    let sum: f64 = v.iter().map(|x| (x - m).exp()).sum();
    Ok(m + sum.ln())
}
