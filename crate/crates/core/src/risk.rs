//! Excess risk and its four-term decomposition, in the eigenbasis of `H`.
//!
//! For a fixed averaged iterate `w̄` the decomposition
//!
//! ```text
//! E(w̄) = R₁ + R₂ + R₃ + R₄
//! R₁ = -½E[(Q_l(y) - y)²] - ½ Σ D_i w̄_i²
//! R₂ =  ½ Σ (λ_i + D_i)(w̄_i - w^(q)*_i)²
//! R₃ =  ½E[(Q_l(y) - y)²] + ½ Σ D_i (λ_i/(λ_i + D_i))² w*_i²
//! R₄ =  ½ Σ λ_i (D_i/(λ_i + D_i))² w*_i²
//! ```
//!
//! holds exactly, so averaging over seeds only adds Monte Carlo noise to `R₁`
//! and `R₂`. `R₁` is never positive: the full-precision loss of `w̄` is below
//! its loss on quantized data by exactly the injected error variance.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spectrum::{ProblemSpec, QuantizedGeometry};

/// `½ Σ λ_i (w_i - w*_i)²`.
pub fn excess_risk(w: &[f64], spec: &ProblemSpec) -> Result<f64> {
    if w.len() != spec.dim() {
        return Err(Error::DimensionMismatch {
            expected: spec.dim(),
            got: w.len(),
        });
    }
    Ok(0.5
        * spec
            .eigenvalues()
            .iter()
            .zip(w)
            .zip(spec.w_star())
            .map(|((l, w), ws)| l * (w - ws) * (w - ws))
            .sum::<f64>())
}

fn check_geometry(geom: &QuantizedGeometry, spec: &ProblemSpec) -> Result<()> {
    if geom.dim() != spec.dim() {
        return Err(Error::DimensionMismatch {
            expected: spec.dim(),
            got: geom.dim(),
        });
    }
    Ok(())
}

/// `½ ‖w*‖²` in the `D(H+D)⁻¹H(H+D)⁻¹D` norm.
pub fn r4_closed_form(geom: &QuantizedGeometry, spec: &ProblemSpec) -> Result<f64> {
    check_geometry(geom, spec)?;
    Ok(0.5
        * spec
            .eigenvalues()
            .iter()
            .zip(&geom.d_diag)
            .zip(spec.w_star())
            .map(|((l, d), w)| {
                let r = d / (l + d);
                l * r * r * w * w
            })
            .sum::<f64>())
}

/// `½E[(Q_l(y) - y)²] + ½ ‖w*‖²` in the `H(H+D)⁻¹D(H+D)⁻¹H` norm.
pub fn r3_closed_form(geom: &QuantizedGeometry, spec: &ProblemSpec, label_err_sq: f64) -> Result<f64> {
    check_geometry(geom, spec)?;
    let feature: f64 = spec
        .eigenvalues()
        .iter()
        .zip(&geom.d_diag)
        .zip(spec.w_star())
        .map(|((l, d), w)| {
            let r = l / (l + d);
            d * r * r * w * w
        })
        .sum();
    Ok(0.5 * label_err_sq + 0.5 * feature)
}

/// `(R₁, R₂)` for one averaged iterate.
pub fn r1_r2_single(
    avg: &[f64],
    geom: &QuantizedGeometry,
    spec: &ProblemSpec,
    label_err_sq: f64,
) -> Result<(f64, f64)> {
    check_geometry(geom, spec)?;
    if avg.len() != spec.dim() {
        return Err(Error::DimensionMismatch {
            expected: spec.dim(),
            got: avg.len(),
        });
    }
    let mut feature = 0.0;
    let mut r2 = 0.0;
    for i in 0..avg.len() {
        let e = avg[i] - geom.w_star_q[i];
        feature += geom.d_diag[i] * avg[i] * avg[i];
        r2 += geom.eigenvalues_q[i] * e * e;
    }
    Ok((-0.5 * label_err_sq - 0.5 * feature, 0.5 * r2))
}

/// Seed averages of `R₁` and `R₂` over the final averaged iterates of several runs.
pub fn r1_r2_monte_carlo(
    avg_weights: &[Vec<f64>],
    geom: &QuantizedGeometry,
    spec: &ProblemSpec,
    label_err_sq: f64,
) -> Result<(f64, f64)> {
    if avg_weights.len() < 2 {
        return Err(Error::NotEnoughSeeds {
            needed: 2,
            got: avg_weights.len(),
        });
    }
    let n = avg_weights.len() as f64;
    let (mut r1, mut r2) = (0.0, 0.0);
    for w in avg_weights {
        let (a, b) = r1_r2_single(w, geom, spec, label_err_sq)?;
        r1 += a;
        r2 += b;
    }
    Ok((r1 / n, r2 / n))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    ClosedForm,
    MonteCarlo,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskBreakdown {
    pub r1: f64,
    pub r2: f64,
    pub r3: f64,
    pub r4: f64,
    pub total: f64,
    pub r1_method: Method,
    pub r2_method: Method,
    pub r3_method: Method,
    pub r4_method: Method,
    /// Seed mean of `E(w̄_N)` computed directly, for comparison with `total`.
    pub direct_mean: f64,
    /// Standard error of `direct_mean`.
    pub direct_stderr: f64,
    pub n_seeds: usize,
}

/// All four terms from a set of final averaged iterates.
pub fn decompose(
    avg_weights: &[Vec<f64>],
    geom: &QuantizedGeometry,
    spec: &ProblemSpec,
    label_err_sq: f64,
) -> Result<RiskBreakdown> {
    let (r1, r2) = r1_r2_monte_carlo(avg_weights, geom, spec, label_err_sq)?;
    let r3 = r3_closed_form(geom, spec, label_err_sq)?;
    let r4 = r4_closed_form(geom, spec)?;
    let direct = avg_weights
        .iter()
        .map(|w| excess_risk(w, spec))
        .collect::<Result<Vec<_>>>()?;
    let n = direct.len() as f64;
    let mean = direct.iter().sum::<f64>() / n;
    let var = direct.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    Ok(RiskBreakdown {
        r1,
        r2,
        r3,
        r4,
        total: r1 + r2 + r3 + r4,
        r1_method: Method::MonteCarlo,
        r2_method: Method::MonteCarlo,
        r3_method: Method::ClosedForm,
        r4_method: Method::ClosedForm,
        direct_mean: mean,
        direct_stderr: (var / n).sqrt(),
        n_seeds: avg_weights.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectrum::{quantized_geometry, Regime};
    use approx::assert_relative_eq;

    fn two_dim() -> ProblemSpec {
        ProblemSpec::new(vec![1.0, 0.25], vec![1.0, 1.0], 1.0).unwrap()
    }

    #[test]
    fn excess_risk_examples() {
        let spec = two_dim();
        assert_eq!(excess_risk(&[1.0, 1.0], &spec).unwrap(), 0.0);
        assert_eq!(excess_risk(&[2.0, 3.0], &spec).unwrap(), 1.0);
        assert!(excess_risk(&[1.0], &spec).is_err());
    }

    #[test]
    fn r4_examples() {
        let spec = ProblemSpec::new(vec![1.0], vec![1.0], 1.0).unwrap();
        let g = quantized_geometry(&spec, Regime::Additive, 1.0).unwrap();
        assert_relative_eq!(r4_closed_form(&g, &spec).unwrap(), 0.125, max_relative = 1e-15);
        assert_relative_eq!(r3_closed_form(&g, &spec, 0.0).unwrap(), 0.125, max_relative = 1e-15);

        let spec = two_dim();
        let g = quantized_geometry(&spec, Regime::None, 0.0).unwrap();
        assert_eq!(r4_closed_form(&g, &spec).unwrap(), 0.0);
        assert_eq!(r3_closed_form(&g, &spec, 0.0).unwrap(), 0.0);

        let g = quantized_geometry(&spec, Regime::Multiplicative, 0.01).unwrap();
        let want = 0.5 * (0.01f64 / 1.01).powi(2) * 1.25;
        assert_relative_eq!(r4_closed_form(&g, &spec).unwrap(), want, max_relative = 1e-12);
        assert_relative_eq!(want, 6.127e-5, max_relative = 1e-3);
    }

    #[test]
    fn r1_additive_feature_term() {
        let spec = two_dim();
        let g = quantized_geometry(&spec, Regime::Additive, 0.2).unwrap();
        let w = [0.5, -1.5];
        let (r1, _) = r1_r2_single(&w, &g, &spec, 0.0).unwrap();
        assert_relative_eq!(r1, -0.5 * 0.2 * (0.25 + 2.25), max_relative = 1e-15);
    }

    #[test]
    fn terms_vanish_at_quantized_optimum_without_quantization() {
        let spec = two_dim();
        let g = quantized_geometry(&spec, Regime::None, 0.0).unwrap();
        let ws = vec![g.w_star_q.clone(), g.w_star_q.clone()];
        assert_eq!(r1_r2_monte_carlo(&ws, &g, &spec, 0.0).unwrap(), (0.0, 0.0));
        assert!(r1_r2_monte_carlo(&ws[..1], &g, &spec, 0.0).is_err());
    }

    #[test]
    fn identity_holds_per_iterate() {
        let spec = ProblemSpec::new(vec![2.0, 0.7, 0.1], vec![1.0, -0.5, 3.0], 0.4).unwrap();
        for (regime, eps) in [(Regime::Additive, 0.3), (Regime::Multiplicative, 0.05)] {
            let g = quantized_geometry(&spec, regime, eps).unwrap();
            for w in [[0.0, 0.0, 0.0], [1.2, 0.3, -2.0], [1.0, -0.5, 3.0]] {
                let (r1, r2) = r1_r2_single(&w, &g, &spec, 0.07).unwrap();
                let total = r1 + r2 + r3_closed_form(&g, &spec, 0.07).unwrap() + r4_closed_form(&g, &spec).unwrap();
                assert_relative_eq!(total, excess_risk(&w, &spec).unwrap(), epsilon = 1e-13, max_relative = 1e-12);
            }
        }
    }
}
