//! Small numerical kernel: dense matrices, seeded random streams, adaptive
//! quadrature and descriptive statistics.
//!
//! Every reduction here runs in a fixed left-to-right order so that reruns
//! with the same seed are bit-identical.

use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Normal};

use crate::error::{Error, Result};

/// Dense row-major matrix of `f64`.
#[derive(Debug, Clone, PartialEq)]
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

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::Shape(format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        if let Some(bad) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite matrix entry at {bad}")));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        let m = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != m) {
            return Err(Error::Shape("ragged rows".into()));
        }
        Matrix::from_vec(n, m, rows.concat())
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
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
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

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        t
    }

    /// Standard product. Each output entry accumulates over the inner index
    /// in increasing order starting from zero.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::Shape(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let dst = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                let src = other.row(k);
                for (d, b) in dst.iter_mut().zip(src) {
                    *d += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `out += xᵀ·self` for a row vector `x` of length `rows`. Zero entries of
    /// `x` are skipped, which leaves the result unchanged and makes spike
    /// inputs cheap.
    pub fn acc_vec_mul(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.rows);
        debug_assert_eq!(out.len(), self.cols);
        for (r, &xr) in x.iter().enumerate() {
            if xr == 0.0 {
                continue;
            }
            for (o, w) in out.iter_mut().zip(self.row(r)) {
                *o += xr * w;
            }
        }
    }

    /// `out += self·g` for a column vector `g` of length `cols`.
    pub fn acc_mul_vec(&self, g: &[f64], out: &mut [f64]) {
        debug_assert_eq!(g.len(), self.cols);
        debug_assert_eq!(out.len(), self.rows);
        for (r, o) in out.iter_mut().enumerate() {
            let mut s = 0.0;
            for (w, gv) in self.row(r).iter().zip(g) {
                s += w * gv;
            }
            *o += s;
        }
    }

    /// `self += x gᵀ` (rank-one update), skipping zero entries of `x`.
    pub fn acc_outer(&mut self, x: &[f64], g: &[f64]) {
        debug_assert_eq!(x.len(), self.rows);
        debug_assert_eq!(g.len(), self.cols);
        for (r, &xr) in x.iter().enumerate() {
            if xr == 0.0 {
                continue;
            }
            for (d, gv) in self.row_mut(r).iter_mut().zip(g) {
                *d += xr * gv;
            }
        }
    }

    pub fn zero_diagonal(&mut self) {
        for i in 0..self.rows.min(self.cols) {
            self.data[i * self.cols + i] = 0.0;
        }
    }

    pub fn diagonal_is_zero(&self) -> bool {
        (0..self.rows.min(self.cols)).all(|i| self.data[i * self.cols + i] == 0.0)
    }

    /// Entries excluding the diagonal.
    pub fn off_diagonal(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.data.len());
        for r in 0..self.rows {
            for c in 0..self.cols {
                if r != c {
                    v.push(self.get(r, c));
                }
            }
        }
        v
    }

    pub fn scale(&mut self, k: f64) {
        self.data.iter_mut().for_each(|v| *v *= k);
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|d| *d = v);
    }

    pub fn add_assign(&mut self, other: &Matrix) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::Shape(format!(
                "cannot add {:?} to {:?}",
                other.shape(),
                self.shape()
            )));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| f64::max(m, (a - b).abs()))
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3)
    })
}

/// Seeded random stream with deterministic named substreams.
///
/// A substream depends only on the root seed and the path of names used to
/// reach it, never on how many values the parent has already produced.
#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    path: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self::at(seed, 0)
    }

    fn at(seed: u64, path: u64) -> Self {
        let key = splitmix64(seed ^ splitmix64(path));
        Rng {
            seed,
            path,
            inner: ChaCha8Rng::seed_from_u64(key),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn substream(&self, name: &str) -> Rng {
        Self::at(self.seed, splitmix64(self.path ^ fnv1a(name.as_bytes())))
    }

    pub fn substream_index(&self, index: u64) -> Rng {
        Self::at(
            self.seed,
            splitmix64(self.path.wrapping_add(0x5851_F42D_4C95_7F2D) ^ splitmix64(index)),
        )
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.random()
    }

    /// Uniform draw on `[0, 1)`.
    pub fn uniform01(&mut self) -> f64 {
        self.inner.random()
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform01() < p
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    pub fn sample(&mut self, dist: Dist, n: usize) -> Result<Vec<f64>> {
        dist.validate()?;
        Ok(match dist {
            Dist::Uniform { lo, hi } => (0..n).map(|_| lo + (hi - lo) * self.uniform01()).collect(),
            Dist::Normal { mean, var } => {
                let normal = Normal::new(mean, var.sqrt())
                    .map_err(|e| Error::Parameter(e.to_string()))?;
                (0..n).map(|_| normal.sample(&mut self.inner)).collect()
            }
            Dist::Gamma { shape, scale } => {
                let gamma =
                    Gamma::new(shape, scale).map_err(|e| Error::Parameter(e.to_string()))?;
                (0..n).map(|_| gamma.sample(&mut self.inner)).collect()
            }
        })
    }
}

/// Sampling distributions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Dist {
    Uniform { lo: f64, hi: f64 },
    Normal { mean: f64, var: f64 },
    Gamma { shape: f64, scale: f64 },
}

impl Dist {
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            // A degenerate interval is allowed and yields the constant `lo`.
            Dist::Uniform { lo, hi } => lo.is_finite() && hi.is_finite() && hi >= lo,
            Dist::Normal { mean, var } => mean.is_finite() && var.is_finite() && var > 0.0,
            Dist::Gamma { shape, scale } => {
                shape.is_finite() && scale.is_finite() && shape > 0.0 && scale > 0.0
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Parameter(format!("invalid distribution {self:?}")))
        }
    }

    pub fn mean(&self) -> f64 {
        match *self {
            Dist::Uniform { lo, hi } => 0.5 * (lo + hi),
            Dist::Normal { mean, .. } => mean,
            Dist::Gamma { shape, scale } => shape * scale,
        }
    }

    pub fn variance(&self) -> f64 {
        match *self {
            Dist::Uniform { lo, hi } => (hi - lo).powi(2) / 12.0,
            Dist::Normal { var, .. } => var,
            Dist::Gamma { shape, scale } => shape * scale * scale,
        }
    }
}

// Gauss–Kronrod 7/15 nodes and weights (QUADPACK).
const XGK: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];
const WGK: [f64; 8] = [
    0.022_935_322_010_529_22,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_18,
    0.140_653_259_715_525_92,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_727_83,
];
const WG: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_7,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
];

const MAX_INTERVALS: usize = 20_000;

fn gk15<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64) -> (f64, f64) {
    let center = 0.5 * (a + b);
    let half = 0.5 * (b - a);
    let fc = f(center);
    let mut kronrod = fc * WGK[7];
    let mut gauss = fc * WG[3];
    for j in 0..7 {
        let dx = half * XGK[j];
        let pair = f(center - dx) + f(center + dx);
        kronrod += WGK[j] * pair;
        if j % 2 == 1 {
            gauss += WG[j / 2] * pair;
        }
    }
    let value = kronrod * half;
    let err = ((kronrod - gauss) * half).abs();
    (value, err)
}

/// Adaptive Gauss–Kronrod quadrature with absolute tolerance `tol`.
pub fn quad<F: Fn(f64) -> f64>(f: F, lo: f64, hi: f64, tol: f64) -> Result<f64> {
    quad_with_breaks(f, lo, hi, &[], tol)
}

/// As [`quad`], with the interval pre-split at `breaks` (points outside
/// `(lo, hi)` are ignored). Kinks and jumps placed on a break point are
/// integrated without loss of accuracy.
pub fn quad_with_breaks<F: Fn(f64) -> f64>(
    f: F,
    lo: f64,
    hi: f64,
    breaks: &[f64],
    tol: f64,
) -> Result<f64> {
    if !(lo.is_finite() && hi.is_finite()) || lo >= hi {
        return Err(Error::Domain(format!("invalid interval [{lo}, {hi}]")));
    }
    if !(tol > 0.0) {
        return Err(Error::Parameter(format!("tolerance must be positive, got {tol}")));
    }
    let mut points: Vec<f64> = breaks.iter().copied().filter(|&p| p > lo && p < hi).collect();
    points.sort_by(f64::total_cmp);
    points.dedup();
    let mut edges = Vec::with_capacity(points.len() + 2);
    edges.push(lo);
    edges.extend(points);
    edges.push(hi);

    // (a, b, value, err)
    let mut parts: Vec<(f64, f64, f64, f64)> = edges
        .windows(2)
        .map(|w| {
            let (v, e) = gk15(&f, w[0], w[1]);
            (w[0], w[1], v, e)
        })
        .collect();

    loop {
        let total_err: f64 = parts.iter().map(|p| p.3).sum();
        let estimate: f64 = parts.iter().map(|p| p.2).sum();
        if !estimate.is_finite() {
            return Err(Error::Quadrature {
                estimate,
                error: total_err,
            });
        }
        if total_err <= tol {
            return Ok(estimate);
        }
        if parts.len() >= MAX_INTERVALS {
            return Err(Error::Quadrature {
                estimate,
                error: total_err,
            });
        }
        let (worst, _) = parts
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, p)| {
                if p.3 > best.1 {
                    (i, p.3)
                } else {
                    best
                }
            });
        let (a, b, _, _) = parts[worst];
        let mid = 0.5 * (a + b);
        if !(mid > a && mid < b) {
            return Err(Error::Quadrature {
                estimate,
                error: total_err,
            });
        }
        let (lv, le) = gk15(&f, a, mid);
        let (rv, re) = gk15(&f, mid, b);
        parts[worst] = (a, mid, lv, le);
        parts.push((mid, b, rv, re));
    }
}

/// Descriptive statistics of a sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Summary {
    pub mean: f64,
    /// Population variance (divides by `n`).
    pub variance: f64,
    pub median: f64,
    pub min: f64,
    pub max: f64,
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Population variance around the sample mean.
pub fn variance(v: &[f64]) -> f64 {
    let m = mean(v);
    v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64
}

pub fn median(v: &[f64]) -> f64 {
    let mut sorted = v.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

pub fn stats(v: &[f64]) -> Result<Summary> {
    if v.is_empty() {
        return Err(Error::Domain("statistics of an empty sample".into()));
    }
    Ok(Summary {
        mean: mean(v),
        variance: variance(v),
        median: median(v),
        min: v.iter().copied().fold(f64::INFINITY, f64::min),
        max: v.iter().copied().fold(f64::NEG_INFINITY, f64::max),
    })
}
