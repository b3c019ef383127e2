//! Weight sampling: variance rules crossed with sampling distributions.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::numkit::{Dist, Matrix, Rng};

/// Shape parameter of each one-sided Gamma in the BiGamma mixture.
pub const BIGAMMA_SHAPE: f64 = 2.0;

/// How the target variance (and mean) of a weight matrix is chosen.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum VarianceRule {
    /// `2/(fan_in + fan_out)`.
    Glorot,
    /// `2/fan_in`.
    He,
    /// Orthonormal rows or columns.
    Orthogonal,
    /// `1/(3·fan_in)`.
    LegacyUniform,
    /// `1/fan_in`.
    LegacyNormal,
    Prescribed { mean: f64, var: f64 },
}

impl VarianceRule {
    pub fn name(&self) -> &'static str {
        match self {
            VarianceRule::Glorot => "glorot",
            VarianceRule::He => "he",
            VarianceRule::Orthogonal => "orthogonal",
            VarianceRule::LegacyUniform => "legacy_uniform",
            VarianceRule::LegacyNormal => "legacy_normal",
            VarianceRule::Prescribed { .. } => "prescribed",
        }
    }
}

impl FromStr for VarianceRule {
    type Err = Error;

    /// Parses every rule except `Prescribed`, which carries values.
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "glorot" => Ok(VarianceRule::Glorot),
            "he" => Ok(VarianceRule::He),
            "orthogonal" => Ok(VarianceRule::Orthogonal),
            "legacy_uniform" => Ok(VarianceRule::LegacyUniform),
            "legacy_normal" => Ok(VarianceRule::LegacyNormal),
            other => Err(Error::Parameter(format!("unknown variance rule '{other}'"))),
        }
    }
}

/// Sampling distribution for the matrix entries.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightDist {
    Uniform,
    Normal,
    /// Symmetric mixture `Gamma(w)/2 + Gamma(−w)/2`; never samples zero.
    BiGamma,
}

impl WeightDist {
    pub fn name(&self) -> &'static str {
        match self {
            WeightDist::Uniform => "uniform",
            WeightDist::Normal => "normal",
            WeightDist::BiGamma => "bigamma",
        }
    }

    /// Range used for ensemble voltage bounds: the exact support for the
    /// uniform, `mean ± 3σ` for unbounded distributions.
    pub fn ensemble_range(&self, mean: f64, var: f64) -> (f64, f64) {
        let half = match self {
            WeightDist::Uniform => (3.0 * var).sqrt(),
            WeightDist::Normal | WeightDist::BiGamma => 3.0 * var.sqrt(),
        };
        (mean - half, mean + half)
    }
}

impl fmt::Display for WeightDist {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for WeightDist {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "uniform" => Ok(WeightDist::Uniform),
            "normal" => Ok(WeightDist::Normal),
            "bigamma" => Ok(WeightDist::BiGamma),
            other => Err(Error::Parameter(format!("unknown weight distribution '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InitScheme {
    pub rule: VarianceRule,
    pub dist: WeightDist,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl InitScheme {
    pub fn new(rule: VarianceRule, dist: WeightDist, fan_in: usize, fan_out: usize) -> Self {
        InitScheme { rule, dist, fan_in, fan_out }
    }

    pub fn target_mean(&self) -> f64 {
        match self.rule {
            VarianceRule::Prescribed { mean, .. } => mean,
            _ => 0.0,
        }
    }

    pub fn target_variance(&self) -> Result<f64> {
        let fan = |n: usize| -> Result<f64> {
            if n == 0 {
                Err(Error::Parameter(format!("{} needs positive fan counts", self.rule.name())))
            } else {
                Ok(n as f64)
            }
        };
        match self.rule {
            VarianceRule::Glorot => Ok(2.0 / (fan(self.fan_in)? + fan(self.fan_out)?)),
            VarianceRule::He => Ok(2.0 / fan(self.fan_in)?),
            VarianceRule::Orthogonal => Ok(1.0 / fan(self.fan_in.max(self.fan_out))?),
            VarianceRule::LegacyUniform => Ok(1.0 / (3.0 * fan(self.fan_in)?)),
            VarianceRule::LegacyNormal => Ok(1.0 / fan(self.fan_in)?),
            VarianceRule::Prescribed { var, mean } => {
                if var >= 0.0 && var.is_finite() && mean.is_finite() {
                    Ok(var)
                } else {
                    Err(Error::Parameter(format!("prescribed variance must be >= 0, got {var}")))
                }
            }
        }
    }

    /// `E[w²]` of the scheme.
    pub fn second_moment(&self) -> Result<f64> {
        Ok(self.target_variance()? + self.target_mean().powi(2))
    }

    pub fn ensemble_range(&self) -> Result<(f64, f64)> {
        let var = self.target_variance()?;
        Ok(self.dist.ensemble_range(self.target_mean(), var))
    }
}

/// Zero-mean draws with variance `var`.
fn centered_draws(rng: &mut Rng, dist: WeightDist, var: f64, n: usize) -> Result<Vec<f64>> {
    if var == 0.0 {
        return match dist {
            WeightDist::BiGamma => Err(Error::Parameter("BiGamma needs a positive variance".into())),
            _ => Ok(vec![0.0; n]),
        };
    }
    match dist {
        WeightDist::Uniform => {
            let a = (3.0 * var).sqrt();
            rng.sample(Dist::Uniform { lo: -a, hi: a }, n)
        }
        WeightDist::Normal => rng.sample(Dist::Normal { mean: 0.0, var }, n),
        WeightDist::BiGamma => {
            // E[w²] = k(k+1)θ²
            let scale = (var / (BIGAMMA_SHAPE * (BIGAMMA_SHAPE + 1.0))).sqrt();
            let mags = rng.sample(Dist::Gamma { shape: BIGAMMA_SHAPE, scale }, n)?;
            Ok(mags
                .into_iter()
                .map(|m| if rng.bernoulli(0.5) { m } else { -m })
                .collect())
        }
    }
}

/// A `rows × cols` matrix with orthonormal columns (`rows ≥ cols`) or rows.
pub fn orthogonal(rng: &mut Rng, rows: usize, cols: usize) -> Result<Matrix> {
    if rows == 0 || cols == 0 {
        return Err(Error::Shape("orthogonal matrix needs positive dimensions".into()));
    }
    let tall = rows >= cols;
    let (n, k) = if tall { (rows, cols) } else { (cols, rows) };
    let raw = rng.sample(Dist::Normal { mean: 0.0, var: 1.0 }, n * k)?;
    // k vectors of length n, orthonormalised by modified Gram–Schmidt applied
    // twice; dividing by the positive norm keeps the triangular factor's
    // diagonal positive
    let mut q: Vec<Vec<f64>> = raw.chunks(n).map(|c| c.to_vec()).collect();
    for j in 0..k {
        for _ in 0..2 {
            for i in 0..j {
                let dot: f64 = (0..n).map(|r| q[i][r] * q[j][r]).sum();
                for r in 0..n {
                    q[j][r] -= dot * q[i][r];
                }
            }
            let norm = q[j].iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm < 1e-300 {
                return Err(Error::Numeric("degenerate sample in orthogonalisation".into()));
            }
            q[j].iter_mut().for_each(|v| *v /= norm);
        }
    }
    let mut m = Matrix::zeros(rows, cols);
    for (j, v) in q.iter().enumerate() {
        for (r, &x) in v.iter().enumerate() {
            if tall {
                m.set(r, j, x);
            } else {
                m.set(j, r, x);
            }
        }
    }
    Ok(m)
}

/// Sample a `rows × cols` weight matrix. With `zero_diag` the diagonal is
/// zeroed after sampling and any prescribed mean is added off-diagonal only.
pub fn sample_weights(
    scheme: &InitScheme,
    rng: &mut Rng,
    rows: usize,
    cols: usize,
    zero_diag: bool,
) -> Result<Matrix> {
    let var = scheme.target_variance()?;
    let mut m = match scheme.rule {
        VarianceRule::Orthogonal => orthogonal(rng, rows, cols)?,
        _ => Matrix::from_vec(rows, cols, centered_draws(rng, scheme.dist, var, rows * cols)?)?,
    };
    if zero_diag {
        m.zero_diagonal();
    }
    Ok(prescribed_shift(&m, scheme.target_mean(), zero_diag))
}

/// Add `target_mean` to every entry; with `skip_diag` the diagonal is left
/// untouched.
pub fn prescribed_shift(base: &Matrix, target_mean: f64, skip_diag: bool) -> Matrix {
    let mut out = base.clone();
    if target_mean == 0.0 {
        return out;
    }
    for r in 0..out.rows() {
        for c in 0..out.cols() {
            if !(skip_diag && r == c) {
                out.set(r, c, out.get(r, c) + target_mean);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit;

    fn entries(m: &Matrix, skip_diag: bool) -> Vec<f64> {
        if skip_diag {
            m.off_diagonal()
        } else {
            m.as_slice().to_vec()
        }
    }

    #[test]
    fn glorot_uniform_support() {
        let s = InitScheme::new(VarianceRule::Glorot, WeightDist::Uniform, 200, 300);
        assert!((s.target_variance().unwrap() - 4e-3).abs() < 1e-18);
        let (lo, hi) = s.ensemble_range().unwrap();
        assert!((hi - 0.109_544_511_501_033_2).abs() < 1e-12 && lo == -hi);
        let m = sample_weights(&s, &mut Rng::new(1), 200, 300, false).unwrap();
        assert!(m.as_slice().iter().all(|w| (lo..=hi).contains(w)));
    }

    #[test]
    fn he_normal_variance() {
        let s = InitScheme::new(VarianceRule::He, WeightDist::Normal, 200, 7);
        assert!((s.target_variance().unwrap() - 0.01).abs() < 1e-18);
    }

    #[test]
    fn variance_fidelity_all_pairs() {
        let mut rng = Rng::new(5);
        for rule in [
            VarianceRule::Glorot,
            VarianceRule::He,
            VarianceRule::LegacyUniform,
            VarianceRule::LegacyNormal,
            VarianceRule::Prescribed { mean: 0.02, var: 3e-3 },
        ] {
            for dist in [WeightDist::Uniform, WeightDist::Normal, WeightDist::BiGamma] {
                let s = InitScheme::new(rule, dist, 300, 200);
                let m = sample_weights(&s, &mut rng, 250, 400, false).unwrap();
                let target = s.target_variance().unwrap();
                let v = numkit::variance(m.as_slice());
                assert!((v / target - 1.0).abs() < 0.02, "{rule:?} {dist:?} {v} {target}");
                let n = m.as_slice().len() as f64;
                let mu = numkit::mean(m.as_slice());
                assert!((mu - s.target_mean()).abs() < 3.0 * target.sqrt() / n.sqrt());
            }
        }
    }

    #[test]
    fn orthogonal_square_and_rectangular() {
        let mut rng = Rng::new(9);
        let m = orthogonal(&mut rng, 64, 64).unwrap();
        let g = m.transpose().matmul(&m).unwrap();
        assert!(g.max_abs_diff(&Matrix::identity(64)) < 1e-10);
        let tall = orthogonal(&mut rng, 50, 20).unwrap();
        let g = tall.transpose().matmul(&tall).unwrap();
        assert!(g.max_abs_diff(&Matrix::identity(20)) < 1e-10);
        let wide = orthogonal(&mut rng, 20, 50).unwrap();
        let g = wide.matmul(&wide.transpose()).unwrap();
        assert!(g.max_abs_diff(&Matrix::identity(20)) < 1e-10);
    }

    #[test]
    fn bigamma_is_bimodal_and_never_zero() {
        let s = InitScheme::new(VarianceRule::Prescribed { mean: 0.0, var: 0.01 }, WeightDist::BiGamma, 1, 1);
        let m = sample_weights(&s, &mut Rng::new(3), 1, 100_000, false).unwrap();
        let w = m.as_slice();
        assert!(w.iter().all(|&x| x != 0.0));
        let sd = 0.1;
        let bins = 41;
        let (lo, hi) = (-4.0 * sd, 4.0 * sd);
        let mut hist = vec![0usize; bins];
        for &x in w {
            if x >= lo && x < hi {
                hist[((x - lo) / (hi - lo) * bins as f64) as usize] += 1;
            }
        }
        let peak = *hist.iter().max().unwrap();
        assert!(hist[bins / 2] * 2 < peak, "{hist:?}");
        assert!((numkit::mean(w)).abs() < 3.0 * sd / (w.len() as f64).sqrt());
    }

    #[test]
    fn zero_diagonal_and_shift() {
        let s = InitScheme::new(VarianceRule::Prescribed { mean: 0.05, var: 0.01 }, WeightDist::Normal, 128, 128);
        let m = sample_weights(&s, &mut Rng::new(4), 128, 128, true).unwrap();
        assert!(m.diagonal_is_zero());
        let off = entries(&m, true);
        let mu = numkit::mean(&off);
        assert!((mu - 0.05).abs() < 3.0 * 0.1 / (off.len() as f64).sqrt());
    }

    #[test]
    fn shift_translates_extremes() {
        let base = Matrix::from_vec(2, 2, vec![0.0, -0.3, 0.4, 0.0]).unwrap();
        assert_eq!(prescribed_shift(&base, 0.0, true), base);
        let shifted = prescribed_shift(&base, 0.1, true);
        assert_eq!(shifted.get(0, 0), 0.0);
        assert!((shifted.get(0, 1) - (-0.2)).abs() < 1e-15);
        assert!((shifted.get(1, 0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn invalid_prescriptions() {
        let s = InitScheme::new(VarianceRule::Prescribed { mean: 0.0, var: -1.0 }, WeightDist::Normal, 1, 1);
        assert!(sample_weights(&s, &mut Rng::new(1), 2, 2, false).is_err());
        let s = InitScheme::new(VarianceRule::Prescribed { mean: 0.0, var: 0.0 }, WeightDist::BiGamma, 1, 1);
        assert!(sample_weights(&s, &mut Rng::new(1), 2, 2, false).is_err());
        let s = InitScheme::new(VarianceRule::Glorot, WeightDist::Normal, 0, 3);
        assert!(s.target_variance().is_err());
    }
}
