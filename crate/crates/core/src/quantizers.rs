//! Unbiased stochastic quantizers.
//!
//! The exact-model operators realize the two error laws with a Rademacher
//! sign, so their first two conditional moments are matched exactly. The
//! rounding operators snap to an integer or floating-point grid with
//! probabilities proportional to proximity.

use ndarray::Array2;
use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spectrum::{quantized_geometry, ProblemSpec, QuantizedGeometry, Regime};

/// One quantization operator.
///
/// In JSON: `{"kind": "additive", "epsilon": 0.01}`, `{"kind": "int_round", "bits": 8}`,
/// `{"kind": "fp_round", "mantissa_bits": 4}`, `{"kind": "identity"}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum QuantizerSpec {
    Identity,
    /// `(1 + √ε s) x` with one sign `s` shared by every coordinate.
    Multiplicative { epsilon: f64 },
    /// `(1 + √ε s_i) x_i` with independent signs.
    MultiplicativeIndep { epsilon: f64 },
    /// `x_i + √ε s_i` with independent signs.
    Additive { epsilon: f64 },
    /// Stochastic rounding onto multiples of `2^-bits`.
    IntRound { bits: u32 },
    /// Stochastic rounding onto multiples of `2^(⌊log₂|x|⌋ - mantissa_bits)`.
    FpRound { mantissa_bits: u32 },
}

impl Default for QuantizerSpec {
    fn default() -> Self {
        QuantizerSpec::Identity
    }
}

impl QuantizerSpec {
    pub fn validate(&self) -> Result<()> {
        match *self {
            QuantizerSpec::Identity => Ok(()),
            QuantizerSpec::Multiplicative { epsilon }
            | QuantizerSpec::MultiplicativeIndep { epsilon }
            | QuantizerSpec::Additive { epsilon } => {
                if epsilon >= 0.0 && epsilon.is_finite() {
                    Ok(())
                } else {
                    Err(Error::InvalidQuantizer(format!(
                        "epsilon must be finite and non-negative, got {epsilon}"
                    )))
                }
            }
            QuantizerSpec::IntRound { bits } => {
                if (1..=52).contains(&bits) {
                    Ok(())
                } else {
                    Err(Error::InvalidQuantizer(format!(
                        "int_round bits must be in 1..=52, got {bits}"
                    )))
                }
            }
            QuantizerSpec::FpRound { mantissa_bits } => {
                if mantissa_bits <= 52 {
                    Ok(())
                } else {
                    Err(Error::InvalidQuantizer(format!(
                        "fp_round mantissa_bits must be at most 52, got {mantissa_bits}"
                    )))
                }
            }
        }
    }

    /// True when the operator returns its input unchanged.
    pub fn is_identity(&self) -> bool {
        match *self {
            QuantizerSpec::Identity => true,
            QuantizerSpec::Multiplicative { epsilon }
            | QuantizerSpec::MultiplicativeIndep { epsilon }
            | QuantizerSpec::Additive { epsilon } => epsilon == 0.0,
            QuantizerSpec::IntRound { .. } | QuantizerSpec::FpRound { .. } => false,
        }
    }

    /// Which error law the operator follows. Rounding falls under `General`.
    pub fn regime(&self) -> Regime {
        if self.is_identity() {
            return Regime::None;
        }
        match self {
            QuantizerSpec::Identity => Regime::None,
            QuantizerSpec::Multiplicative { .. } | QuantizerSpec::MultiplicativeIndep { .. } => {
                Regime::Multiplicative
            }
            QuantizerSpec::Additive { .. } => Regime::Additive,
            QuantizerSpec::IntRound { .. } | QuantizerSpec::FpRound { .. } => Regime::General,
        }
    }

    /// The error level reported in output tables.
    ///
    /// For the exact models this is `ε`. For rounding it is the worst-case
    /// conditional variance: `δ²/4` (absolute) for `int_round` and
    /// `2^(-2m)/4` (relative) for `fp_round`.
    pub fn epsilon(&self) -> f64 {
        match *self {
            QuantizerSpec::Identity => 0.0,
            QuantizerSpec::Multiplicative { epsilon }
            | QuantizerSpec::MultiplicativeIndep { epsilon }
            | QuantizerSpec::Additive { epsilon } => epsilon,
            QuantizerSpec::IntRound { bits } => pow2(-2 * bits as i32) / 4.0,
            QuantizerSpec::FpRound { mantissa_bits } => pow2(-2 * mantissa_bits as i32) / 4.0,
        }
    }

    /// Quantizes `x` in place with a fresh draw from `rng`.
    pub fn apply_in_place<R: Rng + ?Sized>(&self, x: &mut [f64], rng: &mut R) {
        if self.is_identity() {
            return;
        }
        match *self {
            QuantizerSpec::Identity => {}
            QuantizerSpec::Multiplicative { epsilon } => {
                let scale = 1.0 + epsilon.sqrt() * rademacher(rng);
                for v in x.iter_mut() {
                    *v *= scale;
                }
            }
            QuantizerSpec::MultiplicativeIndep { epsilon } => {
                let r = epsilon.sqrt();
                for v in x.iter_mut() {
                    *v *= 1.0 + r * rademacher(rng);
                }
            }
            QuantizerSpec::Additive { epsilon } => {
                let r = epsilon.sqrt();
                for v in x.iter_mut() {
                    *v += r * rademacher(rng);
                }
            }
            QuantizerSpec::IntRound { bits } => {
                let scale = pow2(bits as i32);
                let delta = pow2(-(bits as i32));
                for v in x.iter_mut() {
                    *v = round_on_grid(*v, scale, delta, rng);
                }
            }
            QuantizerSpec::FpRound { mantissa_bits } => {
                for v in x.iter_mut() {
                    *v = fp_round_scalar(*v, mantissa_bits, rng);
                }
            }
        }
    }

    pub fn apply<R: Rng + ?Sized>(&self, x: &[f64], rng: &mut R) -> Vec<f64> {
        let mut out = x.to_vec();
        self.apply_in_place(&mut out, rng);
        out
    }

    /// `E[(Q(x) - x)(Q(x) - x)ᵀ | x]` in structured form.
    pub fn conditional_covariance(&self, x: &[f64]) -> ConditionalCovariance {
        if self.is_identity() {
            return ConditionalCovariance::Zero;
        }
        match *self {
            QuantizerSpec::Identity => ConditionalCovariance::Zero,
            QuantizerSpec::Multiplicative { epsilon } => ConditionalCovariance::RankOne {
                scale: epsilon,
                vector: x.to_vec(),
            },
            QuantizerSpec::MultiplicativeIndep { epsilon } => {
                ConditionalCovariance::Diagonal(x.iter().map(|v| epsilon * v * v).collect())
            }
            QuantizerSpec::Additive { epsilon } => ConditionalCovariance::Isotropic(epsilon),
            QuantizerSpec::IntRound { bits } => {
                let delta = pow2(-(bits as i32));
                ConditionalCovariance::Diagonal(
                    x.iter().map(|&v| rounding_variance(v, delta)).collect(),
                )
            }
            QuantizerSpec::FpRound { mantissa_bits } => ConditionalCovariance::Diagonal(
                x.iter()
                    .map(|&v| match fp_step(v, mantissa_bits) {
                        Some(delta) => rounding_variance(v, delta),
                        None => 0.0,
                    })
                    .collect(),
            ),
        }
    }

    /// Dense form of [`conditional_covariance`](Self::conditional_covariance).
    pub fn analytic_error_moment(&self, x: &[f64]) -> Array2<f64> {
        self.conditional_covariance(x).to_dense(x.len())
    }

    /// `E[Var(Q(x) | x)]` for a scalar `x ~ N(0, var)`.
    ///
    /// Closed form for the exact models. For rounding the cell-wise integral
    /// of `p(1-p)δ²` against the Gaussian density is evaluated by
    /// Gauss-Legendre quadrature, switching to the cell average `δ²/6` once
    /// cells are fine relative to the standard deviation.
    pub fn gaussian_error_variance(&self, var: f64) -> f64 {
        if self.is_identity() || var == 0.0 && !matches!(self, QuantizerSpec::Additive { .. }) {
            return 0.0;
        }
        match *self {
            QuantizerSpec::Identity => 0.0,
            QuantizerSpec::Multiplicative { epsilon }
            | QuantizerSpec::MultiplicativeIndep { epsilon } => epsilon * var,
            QuantizerSpec::Additive { epsilon } => epsilon,
            QuantizerSpec::IntRound { bits } => int_gaussian_variance(bits, var.sqrt()),
            QuantizerSpec::FpRound { mantissa_bits } => fp_gaussian_variance(mantissa_bits, var.sqrt()),
        }
    }
}

/// Structured conditional covariance of a quantization error.
#[derive(Debug, Clone, PartialEq)]
pub enum ConditionalCovariance {
    Zero,
    /// `c I`.
    Isotropic(f64),
    /// `scale · v vᵀ`.
    RankOne { scale: f64, vector: Vec<f64> },
    Diagonal(Vec<f64>),
}

impl ConditionalCovariance {
    pub fn to_dense(&self, n: usize) -> Array2<f64> {
        let mut m = Array2::zeros((n, n));
        match self {
            ConditionalCovariance::Zero => {}
            ConditionalCovariance::Isotropic(c) => m.diag_mut().fill(*c),
            ConditionalCovariance::RankOne { scale, vector } => {
                for i in 0..n {
                    for j in 0..n {
                        m[[i, j]] = scale * vector[i] * vector[j];
                    }
                }
            }
            ConditionalCovariance::Diagonal(v) => {
                for (i, x) in v.iter().enumerate() {
                    m[[i, i]] = *x;
                }
            }
        }
        m
    }

    /// `tr(diag(weights) · Σ)`.
    pub fn weighted_trace(&self, weights: &[f64]) -> f64 {
        match self {
            ConditionalCovariance::Zero => 0.0,
            ConditionalCovariance::Isotropic(c) => c * weights.iter().sum::<f64>(),
            ConditionalCovariance::RankOne { scale, vector } => {
                scale * weights.iter().zip(vector).map(|(w, v)| w * v * v).sum::<f64>()
            }
            ConditionalCovariance::Diagonal(v) => weights.iter().zip(v).map(|(w, x)| w * x).sum(),
        }
    }

    /// Spectral norm. All variants are positive semidefinite.
    pub fn spectral_norm(&self) -> f64 {
        match self {
            ConditionalCovariance::Zero => 0.0,
            ConditionalCovariance::Isotropic(c) => *c,
            ConditionalCovariance::RankOne { scale, vector } => {
                scale * vector.iter().map(|v| v * v).sum::<f64>()
            }
            ConditionalCovariance::Diagonal(v) => v.iter().copied().fold(0.0, f64::max),
        }
    }

    /// Spectral norm of `self + other`.
    ///
    /// Exact except for a diagonal plus a rank-one term, where the triangle
    /// inequality gives an upper bound.
    pub fn spectral_norm_of_sum(&self, other: &ConditionalCovariance) -> f64 {
        use ConditionalCovariance::*;
        match (self, other) {
            (Zero, x) | (x, Zero) => x.spectral_norm(),
            (Isotropic(c), x) | (x, Isotropic(c)) => c + x.spectral_norm(),
            (Diagonal(a), Diagonal(b)) => a.iter().zip(b).map(|(x, y)| x + y).fold(0.0, f64::max),
            (RankOne { scale: s, vector: u }, RankOne { scale: t, vector: v }) => {
                // Nonzero spectrum of s·uuᵀ + t·vvᵀ equals that of the 2×2 Gram
                // matrix [[s uᵀu, √(st) uᵀv], [√(st) uᵀv, t vᵀv]].
                let uu: f64 = u.iter().map(|x| x * x).sum();
                let vv: f64 = v.iter().map(|x| x * x).sum();
                let uv: f64 = u.iter().zip(v).map(|(x, y)| x * y).sum();
                let a = s * uu;
                let c = t * vv;
                let b2 = s * t * uv * uv;
                let half_tr = 0.5 * (a + c);
                let disc = (0.25 * (a - c) * (a - c) + b2).sqrt();
                half_tr + disc
            }
            (x, y) => x.spectral_norm() + y.spectral_norm(),
        }
    }
}

/// Quantizer choice for each of the five sites of the update.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SiteQuantizers {
    #[serde(default)]
    pub data: QuantizerSpec,
    #[serde(default)]
    pub label: QuantizerSpec,
    #[serde(default)]
    pub param: QuantizerSpec,
    #[serde(default)]
    pub activation: QuantizerSpec,
    #[serde(default)]
    pub output_grad: QuantizerSpec,
}

impl SiteQuantizers {
    pub fn identity() -> Self {
        Self::default()
    }

    /// The same operator at every site.
    pub fn uniform(q: QuantizerSpec) -> Self {
        Self {
            data: q,
            label: q,
            param: q,
            activation: q,
            output_grad: q,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for q in self.as_array() {
            q.validate()?;
        }
        Ok(())
    }

    /// `[data, label, param, activation, output_grad]`.
    pub fn as_array(&self) -> [QuantizerSpec; 5] {
        [
            self.data,
            self.label,
            self.param,
            self.activation,
            self.output_grad,
        ]
    }

    pub fn is_identity(&self) -> bool {
        self.as_array().iter().all(QuantizerSpec::is_identity)
    }

    /// The regime shared by every non-identity site, or `General` for a mix.
    pub fn regime(&self) -> Regime {
        let mut out = Regime::None;
        for q in self.as_array() {
            match (out, q.regime()) {
                (_, Regime::None) => {}
                (Regime::None, r) => out = r,
                (a, b) if a == b => {}
                _ => return Regime::General,
            }
        }
        out
    }

    /// `[ε_d, ε_l, ε_p, ε_a, ε_o]` as reported by [`QuantizerSpec::epsilon`].
    pub fn epsilons(&self) -> [f64; 5] {
        self.as_array().map(|q| q.epsilon())
    }
}

/// `H + D`, `D` and `w^(q)*` induced by quantizing Gaussian features with `q`.
///
/// Exact models give the closed forms `D = εH` and `D = εI`; rounding gives
/// `D_i = E[Var(Q(x_i) | x_i)]` with `x_i ~ N(0, λ_i)`.
pub fn data_geometry(spec: &ProblemSpec, q: &QuantizerSpec) -> Result<QuantizedGeometry> {
    q.validate()?;
    match q.regime() {
        Regime::None => quantized_geometry(spec, Regime::None, 0.0),
        Regime::General => {
            let d = spec
                .eigenvalues()
                .iter()
                .map(|&l| q.gaussian_error_variance(l))
                .collect();
            QuantizedGeometry::from_distortion(spec, d, Regime::General)
        }
        r => quantized_geometry(spec, r, q.epsilon()),
    }
}

/// `E[(Q_l(y) - y)²]` for the Gaussian label `y`.
pub fn label_error_moment(spec: &ProblemSpec, q: &QuantizerSpec) -> f64 {
    q.gaussian_error_variance(spec.label_second_moment())
}

/// ±1 with probability ½ each, from the top bit of one `u32`.
pub fn rademacher<R: RngCore + ?Sized>(rng: &mut R) -> f64 {
    if rng.next_u32() >> 31 == 1 {
        1.0
    } else {
        -1.0
    }
}

pub fn quantize_multiplicative<R: Rng + ?Sized>(x: &[f64], epsilon: f64, rng: &mut R) -> Vec<f64> {
    QuantizerSpec::Multiplicative { epsilon }.apply(x, rng)
}

pub fn quantize_multiplicative_indep<R: Rng + ?Sized>(x: &[f64], epsilon: f64, rng: &mut R) -> Vec<f64> {
    QuantizerSpec::MultiplicativeIndep { epsilon }.apply(x, rng)
}

pub fn quantize_additive<R: Rng + ?Sized>(x: &[f64], epsilon: f64, rng: &mut R) -> Vec<f64> {
    QuantizerSpec::Additive { epsilon }.apply(x, rng)
}

pub fn quantize_int_round<R: Rng + ?Sized>(x: &[f64], bits: u32, rng: &mut R) -> Vec<f64> {
    QuantizerSpec::IntRound { bits }.apply(x, rng)
}

pub fn quantize_fp_round<R: Rng + ?Sized>(x: &[f64], mantissa_bits: u32, rng: &mut R) -> Vec<f64> {
    QuantizerSpec::FpRound { mantissa_bits }.apply(x, rng)
}

/// `(1/n) Σ (Q(x) - x)(Q(x) - x)ᵀ` over `n` independent applications.
pub fn empirical_error_moment<R: Rng + ?Sized>(
    q: &QuantizerSpec,
    x: &[f64],
    n: usize,
    rng: &mut R,
) -> Array2<f64> {
    let d = x.len();
    let mut acc = Array2::<f64>::zeros((d, d));
    let mut buf = vec![0.0; d];
    let mut err = vec![0.0; d];
    for _ in 0..n {
        buf.copy_from_slice(x);
        q.apply_in_place(&mut buf, rng);
        for i in 0..d {
            err[i] = buf[i] - x[i];
        }
        for i in 0..d {
            for j in 0..d {
                acc[[i, j]] += err[i] * err[j];
            }
        }
    }
    acc / n.max(1) as f64
}

/// `(x - ⌊x⌋_δ)(⌈x⌉_δ - x)`, the variance of stochastic rounding with step `δ`.
pub fn rounding_variance(x: f64, delta: f64) -> f64 {
    let lo = (x / delta).floor() * delta;
    (x - lo) * (lo + delta - x)
}

/// Step size of the floating-point grid at `x`; `None` for zero or non-finite input.
pub fn fp_step(x: f64, mantissa_bits: u32) -> Option<f64> {
    if x == 0.0 || !x.is_finite() {
        return None;
    }
    Some(pow2(floor_log2(x.abs()) - mantissa_bits as i32))
}

/// Exact `2^e` for any exponent that is representable, including subnormals.
pub(crate) fn pow2(e: i32) -> f64 {
    if (-1022..=1023).contains(&e) {
        f64::from_bits(((e + 1023) as u64) << 52)
    } else {
        2f64.powi(e)
    }
}

/// `⌊log₂ v⌋` for finite `v > 0`, read from the exponent bits.
fn floor_log2(v: f64) -> i32 {
    let bits = v.to_bits();
    let exp = ((bits >> 52) & 0x7ff) as i32;
    if exp == 0 {
        // Subnormal: the leading mantissa bit fixes the exponent.
        let mantissa = bits & ((1u64 << 52) - 1);
        -1074 + (63 - mantissa.leading_zeros() as i32)
    } else {
        exp - 1023
    }
}

/// Rounds to `k·δ`, where `scale = 1/δ` is an exact power of two.
fn round_on_grid<R: Rng + ?Sized>(x: f64, scale: f64, delta: f64, rng: &mut R) -> f64 {
    if !x.is_finite() {
        return x;
    }
    let scaled = x * scale;
    let k = scaled.floor();
    let frac = scaled - k;
    if frac == 0.0 {
        return x;
    }
    let u: f64 = rng.random();
    if u < frac {
        (k + 1.0) * delta
    } else {
        k * delta
    }
}

fn fp_round_scalar<R: Rng + ?Sized>(x: f64, mantissa_bits: u32, rng: &mut R) -> f64 {
    match fp_step(x, mantissa_bits) {
        None => x,
        Some(delta) => {
            let e = floor_log2(x.abs()) - mantissa_bits as i32;
            round_on_grid(x, pow2(-e), delta, rng)
        }
    }
}

// 5-point Gauss-Legendre rule on [-1, 1].
const GL_NODES: [f64; 5] = [
    0.0,
    -0.538_469_310_105_683_1,
    0.538_469_310_105_683_1,
    -0.906_179_845_938_664,
    0.906_179_845_938_664,
];
const GL_WEIGHTS: [f64; 5] = [
    0.568_888_888_888_888_9,
    0.478_628_670_499_366_5,
    0.478_628_670_499_366_5,
    0.236_926_885_056_189_1,
    0.236_926_885_056_189_1,
];

/// Half-widths of the Gaussian integration range, in standard deviations.
const GAUSS_RANGE: f64 = 12.0;
const MAX_EXACT_CELLS: f64 = 20_000.0;

fn gaussian_pdf(x: f64, sd: f64) -> f64 {
    let z = x / sd;
    (-0.5 * z * z).exp() / (sd * (2.0 * std::f64::consts::PI).sqrt())
}

/// `∫_a^b (x-a)(b-x) φ(x) dx`.
fn cell_integral(a: f64, b: f64, sd: f64) -> f64 {
    let mid = 0.5 * (a + b);
    let half = 0.5 * (b - a);
    let mut s = 0.0;
    for (t, w) in GL_NODES.iter().zip(GL_WEIGHTS) {
        let x = mid + half * t;
        s += w * (x - a) * (b - x) * gaussian_pdf(x, sd);
    }
    s * half
}

/// `∫_a^b φ(x) dx` by composite Gauss-Legendre.
fn mass(a: f64, b: f64, sd: f64) -> f64 {
    const PIECES: usize = 8;
    let h = (b - a) / PIECES as f64;
    let mut s = 0.0;
    for p in 0..PIECES {
        let mid = a + (p as f64 + 0.5) * h;
        for (t, w) in GL_NODES.iter().zip(GL_WEIGHTS) {
            s += w * gaussian_pdf(mid + 0.5 * h * t, sd);
        }
    }
    s * 0.5 * h
}

fn int_gaussian_variance(bits: u32, sd: f64) -> f64 {
    let delta = pow2(-(bits as i32));
    let upper = GAUSS_RANGE * sd;
    let cells = (upper / delta).ceil();
    if cells > MAX_EXACT_CELLS {
        return delta * delta / 6.0;
    }
    // The grid is symmetric about 0, so integrate over x ≥ 0 and double.
    let mut total = 0.0;
    for k in 0..cells as usize {
        let a = k as f64 * delta;
        total += cell_integral(a, a + delta, sd);
    }
    2.0 * total
}

fn fp_gaussian_variance(mantissa_bits: u32, sd: f64) -> f64 {
    let upper = GAUSS_RANGE * sd;
    let e_hi = floor_log2(upper);
    let cells_per_binade = pow2(mantissa_bits as i32);
    let exact = cells_per_binade <= 256.0;
    let mut total = 0.0;
    // Binades far below the scale contribute at most x² ≤ 2^(2e) each.
    for e in (e_hi - 60..=e_hi).rev() {
        let lo = pow2(e);
        let hi = pow2(e + 1);
        let delta = pow2(e - mantissa_bits as i32);
        if exact {
            for k in 0..cells_per_binade as usize {
                let a = lo + k as f64 * delta;
                total += cell_integral(a, a + delta, sd);
            }
        } else {
            total += mass(lo, hi, sd) * delta * delta / 6.0;
        }
    }
    2.0 * total
}
