//! Conditions I–IV: recurrent weight mean and variance, surrogate dampening
//! and sharpness chosen so that activity and gradients stay stable in time
//! and depth at initialization.
//!
//! * CI: each neuron fires half of the time, `Median[v] = 0`.
//! * CII: recurrent and input contributions to the voltage variance match.
//! * CIII: maximal gradients are equal across time and layers.
//! * CIV: gradient variances are equal across time and layers.

use std::fmt;
use std::str::FromStr;

use crate::cells::{CellConfig, CellKind, Reset, WeightSet};
use crate::error::{Error, Result};
use crate::init::{sample_weights, InitScheme, VarianceRule, WeightDist};
use crate::numkit::{Matrix, Rng};
use crate::surrogate::{Shape, SurrogateSpec};

pub const SHARPNESS_MIN: f64 = 1e-3;
pub const SHARPNESS_MAX: f64 = 1e4;
pub const SHARPNESS_SAMPLES: usize = 256;
pub const SHARPNESS_BISECTIONS: usize = 60;
pub const SHARPNESS_TOL: f64 = 1e-4;

/// Statistics a single layer's conditions depend on.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerStats {
    pub mean_z: f64,
    pub var_z: f64,
    pub n_in: usize,
    pub n_rec: usize,
    pub alpha: f64,
    pub thr: f64,
    /// Input comes from the data (`ξ = 0`) rather than a spiking layer below.
    pub is_data_input: bool,
    pub gamma_in: f64,
    pub e_sg2_in: f64,
    pub max_w_in: f64,
    pub e_w_in_sq: f64,
    pub var_w_in: f64,
}

impl LayerStats {
    /// First layer, fed by data with the given input statistics.
    pub fn data(n_in: usize, n_rec: usize, alpha: f64, thr: f64, mean_z: f64, var_z: f64) -> Self {
        LayerStats {
            mean_z,
            var_z,
            n_in,
            n_rec,
            alpha,
            thr,
            is_data_input: true,
            gamma_in: 0.0,
            e_sg2_in: 0.0,
            max_w_in: 0.0,
            e_w_in_sq: 0.0,
            var_w_in: 0.0,
        }
    }

    /// Layer fed by a spiking layer below that fires half of the time.
    pub fn stacked(n_in: usize, n_rec: usize, alpha: f64, thr: f64) -> Self {
        LayerStats {
            is_data_input: false,
            ..Self::data(n_in, n_rec, alpha, thr, 0.5, 0.25)
        }
    }

    pub fn xi(&self) -> f64 {
        if self.is_data_input {
            0.0
        } else {
            1.0
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_rec < 2 {
            return Err(Error::Domain(format!("n_rec must be >= 2, got {}", self.n_rec)));
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::Domain(format!("decay must lie in (0, 1], got {}", self.alpha)));
        }
        if !(self.thr >= 0.0 && self.thr.is_finite()) {
            return Err(Error::Domain(format!("threshold must be >= 0, got {}", self.thr)));
        }
        if !(self.var_z >= 0.0 && self.var_z.is_finite() && self.mean_z.is_finite()) {
            return Err(Error::Domain(format!("invalid input statistics ({}, {})", self.mean_z, self.var_z)));
        }
        let rest = [self.gamma_in, self.e_sg2_in, self.max_w_in, self.e_w_in_sq, self.var_w_in];
        if rest.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("non-finite layer statistics".into()));
        }
        Ok(())
    }

    fn n_minus_one(&self) -> f64 {
        (self.n_rec - 1) as f64
    }
}

/// CI: `Mean[w_rec] = (3 − 2α)·thr/(n_rec − 1)`.
pub fn cond1_mean_wrec(stats: &LayerStats) -> Result<f64> {
    stats.validate()?;
    Ok((3.0 - 2.0 * stats.alpha) * stats.thr / stats.n_minus_one())
}

/// CII: `Var[w_rec] = 2(Var[z] + Mean[z]²)·n_in/(n_rec − 1)·Var[w_in] − Mean[w_rec]²/2`.
/// A negative value means the CI mean exhausts the variance budget.
pub fn cond2_var_wrec(stats: &LayerStats, mean_w_rec: f64) -> Result<f64> {
    stats.validate()?;
    let drive = stats.var_z + stats.mean_z * stats.mean_z;
    Ok(2.0 * drive * stats.n_in as f64 / stats.n_minus_one() * stats.var_w_in - 0.5 * mean_w_rec * mean_w_rec)
}

/// CIII: `γ = Min/((n_rec − 1)·Min − thr) · (1/Max) · (1 − α − ξ·n_in·Max[w_in]·γ_in)`.
/// A non-positive value means the layer below already uses up the budget.
pub fn cond3_dampening(stats: &LayerStats, w_rec_min: f64, w_rec_max: f64) -> Result<f64> {
    stats.validate()?;
    check_support(w_rec_min, w_rec_max)?;
    let denom = stats.n_minus_one() * w_rec_min - stats.thr;
    if denom == 0.0 {
        return Err(Error::Domain("singular dampening denominator".into()));
    }
    Ok(w_rec_min / denom / w_rec_max * budget3(stats))
}

/// CIV: `E[σ′²] = (1 − α² − ξ·n_in·E[w_in²]·E[σ′²_in]) / ((n_rec − 1)·E[w_rec²] + thr²)`.
/// A non-positive value means the vanishing-gradient budget is exhausted.
pub fn cond4_target_moment(stats: &LayerStats, e_w_rec_sq: f64) -> Result<f64> {
    stats.validate()?;
    let denom = stats.n_minus_one() * e_w_rec_sq + stats.thr * stats.thr;
    if !(denom > 0.0) {
        return Err(Error::Domain(format!("CIV denominator must be positive, got {denom}")));
    }
    Ok(budget4(stats, stats.alpha * stats.alpha) / denom)
}

/// Multiplicative-reset CI: `Mean[w_rec] = (1 − α)·thr/(n_rec − 1)`.
pub fn cond1_mean_wrec_multiplicative(stats: &LayerStats) -> Result<f64> {
    stats.validate()?;
    Ok((1.0 - stats.alpha) * stats.thr / stats.n_minus_one())
}

/// Multiplicative-reset CIII: `γ = (1 − α − ξ·n_in·Max[w_in]·γ_in)/((n_rec − 1)·Max)`.
pub fn cond3_dampening_multiplicative(stats: &LayerStats, w_rec_max: f64) -> Result<f64> {
    stats.validate()?;
    if !(w_rec_max > 0.0 && w_rec_max.is_finite()) {
        return Err(Error::Domain(format!("Max[w_rec] must be positive, got {w_rec_max}")));
    }
    Ok(budget3(stats) / (stats.n_minus_one() * w_rec_max))
}

/// Multiplicative-reset CIV:
/// `E[σ′²] = (1 − α²/2 − ξ·n_in·E[w_in²]·E[σ′²_in])/((n_rec − 1)·E[w_rec²])`.
pub fn cond4_target_moment_multiplicative(stats: &LayerStats, e_w_rec_sq: f64) -> Result<f64> {
    stats.validate()?;
    let denom = stats.n_minus_one() * e_w_rec_sq;
    if !(denom > 0.0) {
        return Err(Error::Domain(format!("CIV denominator must be positive, got {denom}")));
    }
    Ok(budget4(stats, 0.5 * stats.alpha * stats.alpha) / denom)
}

fn budget3(stats: &LayerStats) -> f64 {
    1.0 - stats.alpha - stats.xi() * stats.n_in as f64 * stats.max_w_in * stats.gamma_in
}

fn budget4(stats: &LayerStats, alpha_term: f64) -> f64 {
    1.0 - alpha_term - stats.xi() * stats.n_in as f64 * stats.e_w_in_sq * stats.e_sg2_in
}

fn check_support(lo: f64, hi: f64) -> Result<()> {
    if lo < 0.0 && hi > 0.0 && lo.is_finite() && hi.is_finite() {
        Ok(())
    } else {
        Err(Error::Domain(format!(
            "recurrent weights must straddle zero, got [{lo}, {hi}]"
        )))
    }
}

/// Which reading of Min/Max the voltage bounds use.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BoundsMode {
    /// Extremes of the weight distribution, all presynaptic neurons active.
    Ensemble,
    /// Extremes reachable with the sampled weights, per neuron.
    PerSample,
}

impl BoundsMode {
    pub fn name(&self) -> &'static str {
        match self {
            BoundsMode::Ensemble => "ensemble",
            BoundsMode::PerSample => "per_sample",
        }
    }
}

impl FromStr for BoundsMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ensemble" => Ok(BoundsMode::Ensemble),
            "per_sample" | "persample" => Ok(BoundsMode::PerSample),
            other => Err(Error::Parameter(format!("unknown bounds mode '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VoltageBounds {
    pub y_min: f64,
    pub y_max: f64,
    /// Per-neuron bounds (empty in ensemble mode).
    pub neuron_min: Vec<f64>,
    pub neuron_max: Vec<f64>,
}

/// Weight extremes for ensemble bounds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnsembleRanges {
    pub w_rec: (f64, f64),
    pub w_in: (f64, f64),
    pub bias: (f64, f64),
}

fn check_decay(alpha: f64) -> Result<()> {
    if alpha >= 1.0 || alpha.is_nan() {
        Err(Error::Domain(format!("voltage bound diverges for decay {alpha} >= 1")))
    } else if alpha <= 0.0 {
        Err(Error::Domain(format!("decay must be positive, got {alpha}")))
    } else {
        Ok(())
    }
}

/// Ensemble bounds, treating every presynaptic neuron as able to fire at once.
pub fn voltage_bounds_ensemble(
    alpha: f64,
    thr: f64,
    n_in: usize,
    n_rec: usize,
    ranges: &EnsembleRanges,
    reset: Reset,
) -> Result<VoltageBounds> {
    check_decay(alpha)?;
    let n = n_rec.saturating_sub(1) as f64;
    let n_in = n_in as f64;
    let hi = n * ranges.w_rec.1 + ranges.bias.1 + n_in * ranges.w_in.1;
    let lo = n * ranges.w_rec.0 + ranges.bias.0 + n_in * ranges.w_in.0;
    let (y_min, y_max) = match reset {
        Reset::Subtractive => ((lo - thr) / (1.0 - alpha), hi / (1.0 - alpha)),
        Reset::Multiplicative => (alpha * lo / (1.0 - alpha), alpha * hi / (1.0 - alpha)),
    };
    Ok(VoltageBounds {
        y_min,
        y_max,
        neuron_min: Vec::new(),
        neuron_max: Vec::new(),
    })
}

/// Per-neuron bounds from the sampled weights, inputs in `[0, 1]`, reduced to
/// global extremes.
pub fn voltage_bounds_per_sample(cfg: &CellConfig, w: &WeightSet) -> Result<VoltageBounds> {
    if cfg.kind == CellKind::Slstm {
        return Err(Error::Usage("voltage bounds apply to spiking cells".into()));
    }
    w.check(cfg)?;
    let n = cfg.n_rec;
    // largest threshold an ALIF neuron can reach: a_t ≤ 1/(1 − ρ)
    let thr_boost = if cfg.kind == CellKind::Alif {
        cfg.beta / (1.0 - cfg.rho)
    } else {
        0.0
    };
    let column_sums = |m: &Matrix, i: usize| {
        (0..m.rows()).fold((0.0, 0.0), |(pos, neg), r| {
            let v = m.get(r, i);
            (pos + v.max(0.0), neg + (-v).max(0.0))
        })
    };
    let mut neuron_min = Vec::with_capacity(n);
    let mut neuron_max = Vec::with_capacity(n);
    for i in 0..n {
        let alpha = cfg.alpha[i];
        check_decay(alpha)?;
        let (rec_pos, rec_neg) = column_sums(&w.w_rec, i);
        let (in_pos, in_neg) = column_sums(&w.w_in, i);
        let b = w.bias[i];
        let hi = rec_pos + b + in_pos;
        let lo = -rec_neg + b - in_neg;
        let (mn, mx) = match cfg.reset {
            Reset::Subtractive => ((lo - cfg.thr[i] - thr_boost) / (1.0 - alpha), hi / (1.0 - alpha)),
            Reset::Multiplicative => (alpha * lo / (1.0 - alpha), alpha * hi / (1.0 - alpha)),
        };
        neuron_min.push(mn.min(0.0));
        neuron_max.push(mx.max(0.0));
    }
    Ok(VoltageBounds {
        y_min: neuron_min.iter().copied().fold(f64::INFINITY, f64::min),
        y_max: neuron_max.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        neuron_min,
        neuron_max,
    })
}

/// Result of the sharpness search.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SharpnessSolution {
    pub sharpness: f64,
    /// `E[σ′²]` at the returned sharpness.
    pub moment: f64,
    pub feasible: bool,
    /// Moments at the largest and smallest sharpness searched.
    pub attained_min: f64,
    pub attained_max: f64,
}

/// `E[σ′²]` under a uniform voltage prior on `[y_min, y_max]`.
pub fn sg_second_moment(shape: Shape, gamma: f64, s: f64, y_min: f64, y_max: f64, thr: f64) -> Result<f64> {
    let spec = SurrogateSpec::new(shape, gamma, s)?;
    spec.moment(2, s * (y_min - thr), s * (y_max - thr), y_max - y_min)
}

/// Smallest sharpness whose second moment matches `target` within
/// [`SHARPNESS_TOL`] relative. The moment is non-increasing in `s`, so a
/// log-spaced scan over `[SHARPNESS_MIN, SHARPNESS_MAX]` brackets the crossing
/// and log-space bisection refines it. An unattainable target returns the
/// closest end of the range with `feasible = false`.
pub fn solve_sharpness(shape: Shape, gamma: f64, target: f64, y_min: f64, y_max: f64, thr: f64) -> Result<SharpnessSolution> {
    if !(target > 0.0 && target.is_finite()) {
        return Err(Error::Domain(format!("target moment must be positive, got {target}")));
    }
    if !(y_min < thr && thr < y_max && y_min.is_finite() && y_max.is_finite()) {
        return Err(Error::Domain(format!(
            "threshold {thr} must lie strictly inside the voltage range [{y_min}, {y_max}]"
        )));
    }
    let moment = |s: f64| sg_second_moment(shape, gamma, s, y_min, y_max, thr);
    let upper = target * (1.0 + 0.5 * SHARPNESS_TOL);
    let lower = target * (1.0 - 0.5 * SHARPNESS_TOL);
    let (log_lo, log_hi) = (SHARPNESS_MIN.ln(), SHARPNESS_MAX.ln());
    let grid = |k: usize| (log_lo + (log_hi - log_lo) * k as f64 / (SHARPNESS_SAMPLES - 1) as f64).exp();

    let attained_max = moment(SHARPNESS_MIN)?;
    let attained_min = moment(SHARPNESS_MAX)?;
    let result = |sharpness: f64, m: f64, feasible: bool| SharpnessSolution {
        sharpness,
        moment: m,
        feasible,
        attained_min,
        attained_max,
    };
    if attained_max < lower {
        return Ok(result(SHARPNESS_MIN, attained_max, false));
    }
    if attained_min > upper {
        return Ok(result(SHARPNESS_MAX, attained_min, false));
    }
    if attained_max <= upper {
        return Ok(result(SHARPNESS_MIN, attained_max, true));
    }
    // first grid point meeting the upper tolerance
    let mut prev = SHARPNESS_MIN;
    let mut hit = (SHARPNESS_MAX, attained_min);
    for k in 1..SHARPNESS_SAMPLES {
        let s = grid(k);
        let m = if k == SHARPNESS_SAMPLES - 1 { attained_min } else { moment(s)? };
        if m <= upper {
            hit = (s, m);
            break;
        }
        prev = s;
    }
    let (mut lo, mut hi) = (prev.ln(), hit.0.ln());
    let mut best = hit;
    for _ in 0..SHARPNESS_BISECTIONS {
        let mid = 0.5 * (lo + hi);
        let s = mid.exp();
        let m = moment(s)?;
        if m <= upper {
            hi = mid;
            best = (s, m);
        } else {
            lo = mid;
        }
    }
    let feasible = (best.1 / target - 1.0).abs() <= SHARPNESS_TOL;
    Ok(result(best.0, best.1, feasible))
}

/// Subset of conditions applied; the rest use naive defaults.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ConditionMask {
    pub c1: bool,
    pub c2: bool,
    pub c3: bool,
    pub c4: bool,
}

impl ConditionMask {
    pub const NONE: ConditionMask = ConditionMask { c1: false, c2: false, c3: false, c4: false };
    pub const ALL: ConditionMask = ConditionMask { c1: true, c2: true, c3: true, c4: true };

    pub fn is_empty(&self) -> bool {
        *self == Self::NONE
    }
}

impl fmt::Display for ConditionMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<&str> = [(self.c1, "I"), (self.c2, "II"), (self.c3, "III"), (self.c4, "IV")]
            .iter()
            .filter(|(on, _)| *on)
            .map(|(_, n)| *n)
            .collect();
        if names.is_empty() {
            f.write_str("none")
        } else {
            f.write_str(&names.join(","))
        }
    }
}

impl FromStr for ConditionMask {
    type Err = Error;

    /// `none`, `all`, or a comma-separated subset of `I,II,III,IV`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        match s.to_ascii_lowercase().as_str() {
            "none" | "" => return Ok(Self::NONE),
            "all" => return Ok(Self::ALL),
            _ => {}
        }
        let mut mask = Self::NONE;
        for part in s.split(',') {
            match part.trim().to_ascii_uppercase().as_str() {
                "I" | "1" => mask.c1 = true,
                "II" | "2" => mask.c2 = true,
                "III" | "3" => mask.c3 = true,
                "IV" | "4" => mask.c4 = true,
                other => return Err(Error::Parameter(format!("unknown condition '{other}'"))),
            }
        }
        Ok(mask)
    }
}

/// What the solver does when a condition has no admissible value.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InfeasiblePolicy {
    /// Return [`Error::Infeasible`].
    Fail,
    /// Use the naive default for the offending quantity (for an unreachable
    /// second moment, the closest reachable sharpness) and flag the layer.
    Fallback,
}

impl InfeasiblePolicy {
    pub fn name(&self) -> &'static str {
        match self {
            InfeasiblePolicy::Fail => "fail",
            InfeasiblePolicy::Fallback => "fallback",
        }
    }
}

impl FromStr for InfeasiblePolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "fail" => Ok(InfeasiblePolicy::Fail),
            "fallback" => Ok(InfeasiblePolicy::Fallback),
            other => Err(Error::Parameter(format!("unknown infeasibility policy '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolveOptions {
    pub mask: ConditionMask,
    pub reset: Reset,
    pub bounds: BoundsMode,
    pub shape: Shape,
    pub w_in_rule: VarianceRule,
    pub w_in_dist: WeightDist,
    pub w_rec_dist: WeightDist,
    pub on_infeasible: InfeasiblePolicy,
}

impl SolveOptions {
    pub fn new(mask: ConditionMask, shape: Shape) -> Self {
        SolveOptions {
            mask,
            reset: Reset::Subtractive,
            bounds: BoundsMode::PerSample,
            shape,
            w_in_rule: VarianceRule::Glorot,
            w_in_dist: WeightDist::Uniform,
            w_rec_dist: WeightDist::Uniform,
            on_infeasible: InfeasiblePolicy::Fallback,
        }
    }
}

/// Solver output for one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionedInit {
    pub mean_w_rec: f64,
    pub var_w_rec: f64,
    pub gamma: f64,
    pub sharpness: f64,
    /// CIV target, when defined.
    pub target_second_moment: Option<f64>,
    /// `E[σ′²]` reached with the chosen `γ` and `s`.
    pub attained_second_moment: f64,
    pub y_min: f64,
    pub y_max: f64,
    pub feasible: bool,
    pub reason: Option<String>,
}

impl ConditionedInit {
    /// Glorot variance for a square recurrent matrix, unit dampening and
    /// sharpness.
    pub fn naive(n_rec: usize) -> Self {
        ConditionedInit {
            mean_w_rec: 0.0,
            var_w_rec: naive_var(n_rec),
            gamma: 1.0,
            sharpness: 1.0,
            target_second_moment: None,
            attained_second_moment: f64::NAN,
            y_min: f64::NAN,
            y_max: f64::NAN,
            feasible: true,
            reason: None,
        }
    }
}

fn naive_var(n_rec: usize) -> f64 {
    1.0 / n_rec as f64
}

/// A solved layer: the conditioned values, the statistics they were derived
/// from, and the sampled weights.
#[derive(Debug, Clone, PartialEq)]
pub struct SolvedLayer {
    pub init: ConditionedInit,
    pub stats: LayerStats,
    pub w_in: Matrix,
    pub w_rec: Matrix,
}

/// Solve the conditions layer by layer, bottom-up, sampling the weights as it
/// goes. Only `n_in`, `n_rec`, `alpha`, `thr`, `mean_z`, `var_z` and
/// `is_data_input` are read from `layers`; the remaining fields are filled from
/// the sampled input weights and the layer below.
pub fn solve_all(layers: &[LayerStats], opts: &SolveOptions, rng: &Rng) -> Result<Vec<SolvedLayer>> {
    let mut out: Vec<SolvedLayer> = Vec::with_capacity(layers.len());
    for (l, base) in layers.iter().enumerate() {
        let below = out.last().map(|s| &s.init);
        let solved = solve_layer(l, base, below, opts, rng)?;
        if let (false, InfeasiblePolicy::Fail) = (solved.init.feasible, opts.on_infeasible) {
            return Err(Error::Infeasible {
                layer: l,
                reason: solved.init.reason.unwrap_or_default(),
            });
        }
        out.push(solved);
    }
    Ok(out)
}

/// [`solve_all`] with the multiplicative-reset formulas.
pub fn solve_all_multiplicative(layers: &[LayerStats], opts: &SolveOptions, rng: &Rng) -> Result<Vec<SolvedLayer>> {
    solve_all(layers, &SolveOptions { reset: Reset::Multiplicative, ..*opts }, rng)
}

fn matrix_range(m: &Matrix, skip_diag: bool) -> (f64, f64) {
    let vals = if skip_diag { m.off_diagonal() } else { m.as_slice().to_vec() };
    vals.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
}

fn solve_layer(
    l: usize,
    base: &LayerStats,
    below: Option<&ConditionedInit>,
    opts: &SolveOptions,
    rng: &Rng,
) -> Result<SolvedLayer> {
    let mut stats = *base;
    stats.validate()?;
    check_decay(stats.alpha)?;
    let (n_in, n_rec) = (stats.n_in, stats.n_rec);
    let mult = opts.reset == Reset::Multiplicative;
    let ensemble = opts.bounds == BoundsMode::Ensemble;
    let mask = opts.mask;
    let mut reasons: Vec<String> = Vec::new();

    let in_scheme = InitScheme::new(opts.w_in_rule, opts.w_in_dist, n_in, n_rec);
    let w_in = sample_weights(&in_scheme, &mut rng.substream(&format!("w_in/{l}")), n_in, n_rec, false)?;
    let in_range = if ensemble { in_scheme.ensemble_range()? } else { matrix_range(&w_in, false) };
    stats.var_w_in = in_scheme.target_variance()?;
    stats.e_w_in_sq = in_scheme.second_moment()?;
    stats.max_w_in = in_range.1;
    if let Some(b) = below {
        stats.gamma_in = b.gamma;
        stats.e_sg2_in = if b.attained_second_moment.is_finite() { b.attained_second_moment } else { 0.0 };
    } else {
        stats.gamma_in = 0.0;
        stats.e_sg2_in = 0.0;
    }

    let naive = ConditionedInit::naive(n_rec);
    let mean = if mask.c1 {
        if mult { cond1_mean_wrec_multiplicative(&stats)? } else { cond1_mean_wrec(&stats)? }
    } else {
        naive.mean_w_rec
    };
    let var = if mask.c2 {
        let v = cond2_var_wrec(&stats, mean)?;
        if v < 0.0 {
            reasons.push(format!("CI mean dominates CII budget (Var[w_rec] = {v:.6e})"));
            naive.var_w_rec
        } else {
            v
        }
    } else {
        naive.var_w_rec
    };

    let rec_scheme = InitScheme::new(VarianceRule::Prescribed { mean, var }, opts.w_rec_dist, n_rec, n_rec);
    let w_rec = sample_weights(&rec_scheme, &mut rng.substream(&format!("w_rec/{l}")), n_rec, n_rec, true)?;
    let rec_range = if ensemble { rec_scheme.ensemble_range()? } else { matrix_range(&w_rec, true) };

    let bounds = if ensemble {
        let ranges = EnsembleRanges { w_rec: rec_range, w_in: in_range, bias: (0.0, 0.0) };
        voltage_bounds_ensemble(stats.alpha, stats.thr, n_in, n_rec, &ranges, opts.reset)?
    } else {
        let mut cfg = CellConfig::lif(n_in, n_rec, stats.alpha, stats.thr, SurrogateSpec::unit(opts.shape));
        cfg.reset = opts.reset;
        let w = WeightSet { w_in: w_in.clone(), w_rec: w_rec.clone(), bias: vec![0.0; n_rec] };
        voltage_bounds_per_sample(&cfg, &w)?
    };

    let gamma = if mask.c3 {
        let g = if mult {
            cond3_dampening_multiplicative(&stats, rec_range.1)
        } else {
            cond3_dampening(&stats, rec_range.0, rec_range.1)
        };
        match g {
            Ok(g) if g > 0.0 && g.is_finite() => g,
            Ok(g) => {
                reasons.push(format!("CIII dampening non-positive ({g:.6e})"));
                naive.gamma
            }
            Err(e) => {
                reasons.push(format!("CIII undefined: {e}"));
                naive.gamma
            }
        }
    } else {
        naive.gamma
    };

    let e_w_rec_sq = rec_scheme.second_moment()?;
    let target = if mult {
        cond4_target_moment_multiplicative(&stats, e_w_rec_sq)
    } else {
        cond4_target_moment(&stats, e_w_rec_sq)
    };
    let sharpness = if mask.c4 {
        match &target {
            Ok(t) if *t > 0.0 => {
                match solve_sharpness(opts.shape, gamma, *t, bounds.y_min, bounds.y_max, stats.thr) {
                    Ok(sol) => {
                        if !sol.feasible {
                            reasons.push(format!(
                                "CIV target {t:.6e} unattainable with dampening {gamma:.6e}; attainable [{:.6e}, {:.6e}]",
                                sol.attained_min, sol.attained_max
                            ));
                        }
                        sol.sharpness
                    }
                    Err(e) => {
                        reasons.push(format!("CIV sharpness undefined: {e}"));
                        naive.sharpness
                    }
                }
            }
            Ok(t) => {
                reasons.push(format!("vanishing-gradient budget exhausted (target {t:.6e})"));
                naive.sharpness
            }
            Err(e) => {
                reasons.push(format!("CIV undefined: {e}"));
                naive.sharpness
            }
        }
    } else {
        naive.sharpness
    };

    let attained = if bounds.y_max > bounds.y_min {
        sg_second_moment(opts.shape, gamma, sharpness, bounds.y_min, bounds.y_max, stats.thr)?
    } else {
        gamma * gamma
    };
    let feasible = reasons.is_empty();
    Ok(SolvedLayer {
        init: ConditionedInit {
            mean_w_rec: mean,
            var_w_rec: var,
            gamma,
            sharpness,
            target_second_moment: target.ok(),
            attained_second_moment: attained,
            y_min: bounds.y_min,
            y_max: bounds.y_max,
            feasible,
            reason: (!feasible).then(|| reasons.join("; ")),
        },
        stats,
        w_in,
        w_rec,
    })
}
