//! Heaviside spike nonlinearity and its surrogate pseudo-derivatives.
//!
//! Every shape `f` has `f(0) = 1` and unit area. The pseudo-derivative used in
//! the backward pass is `γ·f(s·v)` where `γ` is the dampening (peak height) and
//! `s` the sharpness (inverse width).

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::numkit::quad_with_breaks;

/// Surrogate-gradient shape.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Shape {
    Triangular,
    Exponential,
    Gaussian,
    DSigmoid,
    DFastSigmoid,
    Rectangular,
    /// Tail-fatness `q > 1`; `q = 2` recovers [`Shape::DFastSigmoid`].
    QPseudoSpike { q: f64 },
}

impl Shape {
    /// The seven shapes, with `q` for the q-PseudoSpike member.
    pub fn all(q: f64) -> [Shape; 7] {
        [
            Shape::Triangular,
            Shape::Exponential,
            Shape::Gaussian,
            Shape::DSigmoid,
            Shape::DFastSigmoid,
            Shape::Rectangular,
            Shape::QPseudoSpike { q },
        ]
    }

    pub fn name(&self) -> &'static str {
        match self {
            Shape::Triangular => "triangular",
            Shape::Exponential => "exponential",
            Shape::Gaussian => "gaussian",
            Shape::DSigmoid => "dsigmoid",
            Shape::DFastSigmoid => "dfastsigmoid",
            Shape::Rectangular => "rectangular",
            Shape::QPseudoSpike { .. } => "qpseudospike",
        }
    }

    /// Parse a shape name; `q` is only used for `qpseudospike`.
    pub fn parse(name: &str, q: f64) -> Result<Shape> {
        let shape = match name.trim().to_ascii_lowercase().as_str() {
            "triangular" => Shape::Triangular,
            "exponential" => Shape::Exponential,
            "gaussian" => Shape::Gaussian,
            "dsigmoid" => Shape::DSigmoid,
            "dfastsigmoid" => Shape::DFastSigmoid,
            "rectangular" => Shape::Rectangular,
            "qpseudospike" => Shape::QPseudoSpike { q },
            other => return Err(Error::Parameter(format!("unknown surrogate shape '{other}'"))),
        };
        shape.validate()?;
        Ok(shape)
    }

    pub fn validate(&self) -> Result<()> {
        if let Shape::QPseudoSpike { q } = *self {
            if !(q > 1.0 && q.is_finite()) {
                return Err(Error::Parameter(format!("q-PseudoSpike needs q > 1, got {q}")));
            }
        }
        Ok(())
    }

    /// Unit-scale shape value `f(v)`.
    pub fn eval(&self, v: f64) -> f64 {
        let a = v.abs();
        match *self {
            Shape::Triangular => (1.0 - a).max(0.0),
            Shape::Exponential => (-2.0 * a).exp(),
            Shape::Gaussian => (-std::f64::consts::PI * v * v).exp(),
            Shape::DSigmoid => {
                // 4σ(4v)(1−σ(4v)) written in terms of |v| so it is exactly even
                let e = (-4.0 * a).exp();
                4.0 * e / ((1.0 + e) * (1.0 + e))
            }
            Shape::DFastSigmoid => {
                let d = 1.0 + 2.0 * a;
                1.0 / (d * d)
            }
            Shape::Rectangular => {
                if a < 0.5 {
                    1.0
                } else {
                    0.0
                }
            }
            Shape::QPseudoSpike { q } => (1.0 + 2.0 * a / (q - 1.0)).powf(-q),
        }
    }

    /// Odd antiderivative `F(v) = ∫₀^v f`, finite at `±∞`.
    pub fn antiderivative(&self, v: f64) -> f64 {
        let a = v.abs();
        let half = match *self {
            Shape::Triangular => {
                if a >= 1.0 {
                    0.5
                } else {
                    a - 0.5 * a * a
                }
            }
            Shape::Exponential => 0.5 * (1.0 - (-2.0 * a).exp()),
            Shape::Gaussian => 0.5 * libm::erf(std::f64::consts::PI.sqrt() * a),
            Shape::DSigmoid => 1.0 / (1.0 + (-4.0 * a).exp()) - 0.5,
            Shape::DFastSigmoid => 0.5 * (1.0 - 1.0 / (1.0 + 2.0 * a)),
            Shape::Rectangular => a.min(0.5),
            Shape::QPseudoSpike { q } => 0.5 * (1.0 - (1.0 + 2.0 * a / (q - 1.0)).powf(1.0 - q)),
        };
        half.copysign(v)
    }

    /// Points where `f` is not smooth.
    fn kinks(&self) -> &'static [f64] {
        match self {
            Shape::Triangular => &[-1.0, 0.0, 1.0],
            Shape::Rectangular => &[-0.5, 0.5],
            Shape::Gaussian => &[],
            _ => &[0.0],
        }
    }

    fn bounded_support(&self) -> Option<f64> {
        match self {
            Shape::Triangular => Some(1.0),
            Shape::Rectangular => Some(0.5),
            _ => None,
        }
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Shape {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Shape::parse(s, 2.0)
    }
}

/// A surrogate shape with its dampening `γ` and sharpness `s`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurrogateSpec {
    pub shape: Shape,
    pub gamma: f64,
    pub sharpness: f64,
}

impl SurrogateSpec {
    pub fn new(shape: Shape, gamma: f64, sharpness: f64) -> Result<Self> {
        let spec = SurrogateSpec {
            shape,
            gamma,
            sharpness,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Unit dampening and sharpness.
    pub fn unit(shape: Shape) -> Self {
        SurrogateSpec {
            shape,
            gamma: 1.0,
            sharpness: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.shape.validate()?;
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(Error::Parameter(format!("dampening must be > 0, got {}", self.gamma)));
        }
        if !(self.sharpness > 0.0 && self.sharpness.is_finite()) {
            return Err(Error::Parameter(format!(
                "sharpness must be > 0, got {}",
                self.sharpness
            )));
        }
        Ok(())
    }

    /// `γ·f(s·v)`.
    #[inline]
    pub fn pseudo_derivative(&self, v: f64) -> f64 {
        self.gamma * self.shape.eval(self.sharpness * v)
    }

    /// `∫ f(v) dv` of the unit-scale shape over the real line.
    pub fn shape_area(&self) -> f64 {
        shape_area(self.shape)
    }

    /// Second (`m = 2`) or first moment of the pseudo-derivative under a
    /// uniform voltage prior; see [`shape_moment`].
    pub fn moment(&self, m: u32, v_lo: f64, v_hi: f64, span: f64) -> Result<f64> {
        shape_moment(self, m, v_lo, v_hi, span)
    }
}

/// Forward spike nonlinearity: 1 iff `v ≥ 0`.
#[inline]
pub fn heaviside(v: f64) -> f64 {
    if v >= 0.0 {
        1.0
    } else {
        0.0
    }
}

#[inline]
pub fn shape_f(shape: Shape, v: f64) -> f64 {
    shape.eval(v)
}

#[inline]
pub fn pseudo_derivative(spec: &SurrogateSpec, v: f64) -> f64 {
    spec.pseudo_derivative(v)
}

/// Analytic area under the unit-scale shape.
pub fn shape_area(shape: Shape) -> f64 {
    shape.antiderivative(f64::INFINITY) - shape.antiderivative(f64::NEG_INFINITY)
}

/// `∫_{lo}^{hi} f(v)^m dv` for the unit-scale shape.
///
/// The exponential shape uses its closed form when `lo < 0 < hi` (infinite
/// limits allowed there); every other case integrates numerically over
/// finite limits.
pub fn shape_power_integral(shape: Shape, m: u32, lo: f64, hi: f64) -> Result<f64> {
    if !(lo < hi) {
        return Err(Error::Domain(format!("need lo < hi, got [{lo}, {hi}]")));
    }
    if m == 0 {
        return Err(Error::Domain("moment order must be at least 1".into()));
    }
    let mf = f64::from(m);
    if shape == Shape::Exponential && lo < 0.0 && hi > 0.0 {
        let k = 2.0 * mf;
        return Ok(-(-k * hi.abs()).exp() / k - (-k * lo.abs()).exp() / k + 2.0 / k);
    }
    if m == 1 {
        return Ok(shape.antiderivative(hi) - shape.antiderivative(lo));
    }
    // Compact shapes only contribute on their support.
    let (lo, hi) = match shape.bounded_support() {
        Some(w) => {
            let (a, b) = (lo.max(-w), hi.min(w));
            if a >= b {
                return Ok(0.0);
            }
            (a, b)
        }
        None => (lo, hi),
    };
    if !(lo.is_finite() && hi.is_finite()) {
        return Err(Error::Domain(format!(
            "numeric moment needs finite limits, got [{lo}, {hi}]"
        )));
    }
    // Geometric break points keep the peak resolved on very wide intervals.
    let mut breaks: Vec<f64> = shape.kinks().to_vec();
    let reach = lo.abs().max(hi.abs());
    let mut p = 0.0625;
    while p < reach {
        breaks.push(p);
        breaks.push(-p);
        p *= 2.0;
    }
    let f = |v: f64| shape.eval(v).powi(m as i32);
    quad_with_breaks(f, lo, hi, &breaks, 1e-13)
}

/// `γ^m / (s·span) · ∫_{v_lo}^{v_hi} f(v)^m dv`.
///
/// The caller supplies the already-scaled limits `v_lo = s(y_min − thr)`,
/// `v_hi = s(y_max − thr)` and the unscaled voltage span `y_max − y_min`.
pub fn shape_moment(spec: &SurrogateSpec, m: u32, v_lo: f64, v_hi: f64, span: f64) -> Result<f64> {
    if !(m == 1 || m == 2) {
        return Err(Error::Domain(format!("moment order must be 1 or 2, got {m}")));
    }
    if !(span > 0.0) {
        return Err(Error::Domain(format!("voltage span must be positive, got {span}")));
    }
    let integral = shape_power_integral(spec.shape, m, v_lo, v_hi)?;
    Ok(spec.gamma.powi(m as i32) / (spec.sharpness * span) * integral)
}
