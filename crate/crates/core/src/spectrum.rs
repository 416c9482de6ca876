//! The regression problem in the eigenbasis of the feature covariance `H`.
//!
//! Everything is diagonal: `H = diag(λ)`, and both data-quantization models
//! produce an error covariance `D` that commutes with `H`, so `H + D`,
//! the quantized optimum and every norm reduce to per-coordinate arithmetic.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Eigenvalues `λ_1 ≥ … ≥ λ_d > 0` of `H`, ground-truth weights and label noise variance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProblemSpec {
    eigenvalues: Vec<f64>,
    w_star: Vec<f64>,
    noise_var: f64,
}

impl ProblemSpec {
    pub fn new(eigenvalues: Vec<f64>, w_star: Vec<f64>, noise_var: f64) -> Result<Self> {
        if eigenvalues.is_empty() {
            return Err(Error::InvalidProblem("dimension must be at least 1".into()));
        }
        if eigenvalues.len() != w_star.len() {
            return Err(Error::InvalidProblem(format!(
                "{} eigenvalues but {} weights",
                eigenvalues.len(),
                w_star.len()
            )));
        }
        if eigenvalues.iter().any(|&l| !(l > 0.0) || !l.is_finite()) {
            return Err(Error::InvalidProblem(
                "eigenvalues must be finite and strictly positive".into(),
            ));
        }
        if eigenvalues.windows(2).any(|p| p[1] > p[0]) {
            return Err(Error::InvalidProblem(
                "eigenvalues must be sorted non-increasing".into(),
            ));
        }
        if w_star.iter().any(|w| !w.is_finite()) {
            return Err(Error::InvalidProblem("w_star must be finite".into()));
        }
        if !(noise_var >= 0.0) || !noise_var.is_finite() {
            return Err(Error::InvalidProblem(
                "noise variance must be finite and non-negative".into(),
            ));
        }
        Ok(Self {
            eigenvalues,
            w_star,
            noise_var,
        })
    }

    /// Power-law spectrum `λ_i = i^{-a}` with constant ground truth `w*_i = value`.
    pub fn power_law(dim: usize, a: f64, w_value: f64, noise_var: f64) -> Result<Self> {
        let eigenvalues = power_law_eigenvalues(dim, a)?;
        Self::new(eigenvalues, vec![w_value; dim], noise_var)
    }

    pub fn dim(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    pub fn w_star(&self) -> &[f64] {
        &self.w_star
    }

    pub fn noise_var(&self) -> f64 {
        self.noise_var
    }

    pub fn trace(&self) -> f64 {
        self.eigenvalues.iter().sum()
    }

    /// `‖w*‖²_H`.
    pub fn signal_energy(&self) -> f64 {
        self.eigenvalues
            .iter()
            .zip(&self.w_star)
            .map(|(l, w)| l * w * w)
            .sum()
    }

    /// `E[y²] = ‖w*‖²_H + σ²` for the Gaussian linear model.
    pub fn label_second_moment(&self) -> f64 {
        self.signal_energy() + self.noise_var
    }
}

/// `[1^{-a}, 2^{-a}, …, d^{-a}]`.
pub fn power_law_eigenvalues(dim: usize, a: f64) -> Result<Vec<f64>> {
    if dim < 1 {
        return Err(Error::InvalidProblem("dimension must be at least 1".into()));
    }
    if !(a > 1.0) || !a.is_finite() {
        return Err(Error::InvalidProblem(format!(
            "power-law exponent must be finite and > 1, got {a}"
        )));
    }
    Ok((1..=dim).map(|i| (i as f64).powf(-a)).collect())
}

/// One minibatch: `features` is `B × d`, `labels` has length `B`.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub features: Array2<f64>,
    pub labels: Array1<f64>,
}

impl Batch {
    pub fn size(&self) -> usize {
        self.labels.len()
    }
}

/// Precomputed feature scales `√λ_i` for repeated sampling from one problem.
#[derive(Debug, Clone)]
pub struct DataModel {
    scales: Vec<f64>,
    w_star: Vec<f64>,
    noise_sd: f64,
}

impl DataModel {
    pub fn new(spec: &ProblemSpec) -> Self {
        Self {
            scales: spec.eigenvalues.iter().map(|l| l.sqrt()).collect(),
            w_star: spec.w_star.clone(),
            noise_sd: spec.noise_var.sqrt(),
        }
    }

    pub fn dim(&self) -> usize {
        self.scales.len()
    }

    /// Fills `batch` in place. Each row draws `d` standard normals for the
    /// features followed by one for the label noise, so the stream layout does
    /// not depend on `σ²`.
    pub fn fill<R: Rng + ?Sized>(&self, batch: &mut Batch, rng: &mut R) {
        let d = self.dim();
        debug_assert_eq!(batch.features.ncols(), d);
        for (mut row, label) in batch
            .features
            .rows_mut()
            .into_iter()
            .zip(batch.labels.iter_mut())
        {
            let mut dot = 0.0;
            for ((x, &s), &w) in row.iter_mut().zip(&self.scales).zip(&self.w_star) {
                let z: f64 = rng.sample(StandardNormal);
                *x = s * z;
                dot += w * *x;
            }
            let noise: f64 = rng.sample(StandardNormal);
            *label = dot + self.noise_sd * noise;
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, batch_size: usize, rng: &mut R) -> Batch {
        let mut batch = Batch {
            features: Array2::zeros((batch_size, self.dim())),
            labels: Array1::zeros(batch_size),
        };
        self.fill(&mut batch, rng);
        batch
    }
}

/// Draws `B` i.i.d. rows `x = √λ ∘ z`, `y = ⟨w*, x⟩ + ξ` with `ξ ~ N(0, σ²)`.
pub fn sample_batch<R: Rng + ?Sized>(spec: &ProblemSpec, batch_size: usize, rng: &mut R) -> Batch {
    DataModel::new(spec).sample(batch_size, rng)
}

/// How data quantization distorts the spectrum.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    /// `D = 0`.
    None,
    /// `D = ε_d H`.
    Multiplicative,
    /// `D = ε_d I`.
    Additive,
    /// Any other diagonal `D`, e.g. measured from a rounding quantizer.
    General,
}

impl std::fmt::Display for Regime {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Regime::None => "none",
            Regime::Multiplicative => "multiplicative",
            Regime::Additive => "additive",
            Regime::General => "general",
        };
        f.write_str(s)
    }
}

/// `H^(q) = H + D`, `D` and `w^(q)* = (H + D)^{-1} H w*`, all diagonal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantizedGeometry {
    pub eigenvalues_q: Vec<f64>,
    pub d_diag: Vec<f64>,
    pub w_star_q: Vec<f64>,
    pub regime: Regime,
}

impl QuantizedGeometry {
    /// Builds the geometry from an arbitrary non-negative diagonal `D`.
    pub fn from_distortion(spec: &ProblemSpec, d_diag: Vec<f64>, regime: Regime) -> Result<Self> {
        if d_diag.len() != spec.dim() {
            return Err(Error::DimensionMismatch {
                expected: spec.dim(),
                got: d_diag.len(),
            });
        }
        if d_diag.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(Error::InvalidProblem(
                "data distortion must be finite and non-negative".into(),
            ));
        }
        let eigenvalues_q = spec
            .eigenvalues
            .iter()
            .zip(&d_diag)
            .map(|(l, d)| l + d)
            .collect();
        let w_star_q = spec
            .eigenvalues
            .iter()
            .zip(&d_diag)
            .zip(&spec.w_star)
            .map(|((l, d), w)| l / (l + d) * w)
            .collect();
        Ok(Self {
            eigenvalues_q,
            d_diag,
            w_star_q,
            regime,
        })
    }

    pub fn dim(&self) -> usize {
        self.eigenvalues_q.len()
    }

    pub fn trace_q(&self) -> f64 {
        self.eigenvalues_q.iter().sum()
    }

    /// Spectral norm of the diagonal `D`.
    pub fn distortion_norm(&self) -> f64 {
        self.d_diag.iter().copied().fold(0.0, f64::max)
    }

    /// `H^(q)` eigenvalues may fall out of order under a general `D`.
    pub fn is_sorted(&self) -> bool {
        self.eigenvalues_q.windows(2).all(|p| p[1] <= p[0])
    }
}

/// Closed-form geometry for the exact multiplicative / additive data models.
pub fn quantized_geometry(spec: &ProblemSpec, regime: Regime, eps_d: f64) -> Result<QuantizedGeometry> {
    if !(eps_d >= 0.0) || !eps_d.is_finite() {
        return Err(Error::InvalidQuantizer(format!(
            "eps_d must be finite and non-negative, got {eps_d}"
        )));
    }
    match regime {
        Regime::None => QuantizedGeometry::from_distortion(spec, vec![0.0; spec.dim()], regime),
        Regime::Multiplicative => {
            // Written out directly so that λ^(q) = (1+ε)λ and w^(q)* = w*/(1+ε)
            // hold exactly, not via λ/(λ+ελ).
            let scale = 1.0 + eps_d;
            Ok(QuantizedGeometry {
                eigenvalues_q: spec.eigenvalues.iter().map(|l| scale * l).collect(),
                d_diag: spec.eigenvalues.iter().map(|l| eps_d * l).collect(),
                w_star_q: spec.w_star.iter().map(|w| w / scale).collect(),
                regime,
            })
        }
        Regime::Additive => QuantizedGeometry::from_distortion(spec, vec![eps_d; spec.dim()], regime),
        Regime::General => Err(Error::InvalidProblem(
            "general geometry needs an explicit distortion; use QuantizedGeometry::from_distortion"
                .into(),
        )),
    }
}
