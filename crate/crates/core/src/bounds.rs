//! Upper bounds on the expected excess risk of the averaged iterate, the
//! full-precision baseline `R₀`, the matching conditions under which
//! quantization keeps the baseline rate, the power-law rates and the FP/INT
//! bit-width rule.
//!
//! Head sums run over the `k*` largest eigenvalues of `H^(q)`, tail sums over
//! the rest. Norms are diagonal: `‖w‖²_A = Σ A_i w_i²`.

use serde::{Deserialize, Serialize};

use crate::engine::NoiseStats;
use crate::error::{Error, Result};
use crate::quantizers::{data_geometry, label_error_moment, QuantizerSpec, SiteQuantizers};
use crate::spectrum::{quantized_geometry, ProblemSpec, QuantizedGeometry, Regime};

/// Fourth-moment constant for Gaussian features.
pub const DEFAULT_ALPHA_B: f64 = 3.0;

/// Error levels of the five sites.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Eps {
    pub d: f64,
    pub l: f64,
    pub p: f64,
    pub a: f64,
    pub o: f64,
}

impl Eps {
    pub fn uniform(e: f64) -> Self {
        Self {
            d: e,
            l: e,
            p: e,
            a: e,
            o: e,
        }
    }

    fn from_array(e: [f64; 5]) -> Self {
        Self {
            d: e[0],
            l: e[1],
            p: e[2],
            a: e[3],
            o: e[4],
        }
    }
}

/// Where the noise constant σ² came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SigmaSource {
    User,
    /// [`default_sigma_sq`]: a Gaussian-moment heuristic, not a proven constant.
    Heuristic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundInputs {
    pub spec: ProblemSpec,
    pub geom: QuantizedGeometry,
    /// Selects which bound [`bound`] evaluates and which stepsize rule applies.
    pub regime: Regime,
    pub eps: Eps,
    pub n: usize,
    pub batch: usize,
    pub stepsize: f64,
    pub alpha_b: f64,
    /// `σ²` with `E[ξ² x^(q) x^(q)ᵀ] ≼ σ² H^(q)`.
    pub sigma_sq: f64,
    pub sigma_source: SigmaSource,
    /// `E[(Q_l(y) - y)²]`.
    pub label_err_sq: f64,
    /// `sup_t ‖E[ε_o ε_oᵀ | o] + E[ε_a ε_aᵀ | a]‖` (general bound only).
    pub act_out_sup: f64,
    /// `sup_t tr(H^(q) E[ε_p ε_pᵀ])` (general bound only).
    pub param_trace: f64,
}

impl BoundInputs {
    /// Inputs for a problem run with `sites`.
    ///
    /// `noise` carries the measured σ_G ingredients. Without it they are
    /// filled analytically, which is only possible when the parameter,
    /// activation and output-gradient sites are identity or additive.
    #[allow(clippy::too_many_arguments)]
    pub fn from_sites(
        spec: &ProblemSpec,
        sites: &SiteQuantizers,
        n: usize,
        batch: usize,
        stepsize: f64,
        alpha_b: f64,
        sigma_sq: Option<f64>,
        noise: Option<NoiseStats>,
    ) -> Result<Self> {
        sites.validate()?;
        let geom = data_geometry(spec, &sites.data)?;
        let label_err_sq = label_error_moment(spec, &sites.label);
        let (act_out_sup, param_trace) = match noise {
            Some(ns) => (ns.act_out_sup, ns.param_trace_sup),
            None => {
                let analytic = |q: &QuantizerSpec| match q {
                    _ if q.is_identity() => Some(0.0),
                    QuantizerSpec::Additive { epsilon } => Some(*epsilon),
                    _ => None,
                };
                match (
                    analytic(&sites.activation),
                    analytic(&sites.output_grad),
                    analytic(&sites.param),
                ) {
                    (Some(a), Some(o), Some(p)) => (a + o, p * geom.trace_q()),
                    _ if sites.regime() == Regime::Multiplicative => (f64::NAN, f64::NAN),
                    _ => {
                        return Err(Error::Config(
                            "the general bound needs measured quantization noise for these sites; \
                             run a simulation first"
                                .into(),
                        ))
                    }
                }
            }
        };
        let (sigma_sq, sigma_source) = match sigma_sq {
            Some(s) => (s, SigmaSource::User),
            None => (
                default_sigma_sq(spec, &geom, label_err_sq, &sites.label),
                SigmaSource::Heuristic,
            ),
        };
        let inputs = Self {
            spec: spec.clone(),
            geom,
            regime: sites.regime(),
            eps: Eps::from_array(sites.epsilons()),
            n,
            batch,
            stepsize,
            alpha_b,
            sigma_sq,
            sigma_source,
            label_err_sq,
            act_out_sup,
            param_trace,
        };
        inputs.validate()?;
        Ok(inputs)
    }

    /// Inputs for an exact multiplicative or additive model at the given levels.
    #[allow(clippy::too_many_arguments)]
    pub fn exact(
        spec: &ProblemSpec,
        regime: Regime,
        eps: Eps,
        n: usize,
        batch: usize,
        stepsize: f64,
        alpha_b: f64,
        sigma_sq: Option<f64>,
    ) -> Result<Self> {
        let make = |e: f64| match regime {
            Regime::Multiplicative => Ok(QuantizerSpec::Multiplicative { epsilon: e }),
            Regime::Additive => Ok(QuantizerSpec::Additive { epsilon: e }),
            Regime::None => Ok(QuantizerSpec::Identity),
            Regime::General => Err(Error::Config(
                "exact inputs need the multiplicative or additive regime".into(),
            )),
        };
        let sites = SiteQuantizers {
            data: make(eps.d)?,
            label: make(eps.l)?,
            param: make(eps.p)?,
            activation: make(eps.a)?,
            output_grad: make(eps.o)?,
        };
        let mut inputs = Self::from_sites(spec, &sites, n, batch, stepsize, alpha_b, sigma_sq, None)?;
        // An all-zero level collapses the site regime to `None`; keep the requested one.
        inputs.regime = regime;
        Ok(inputs)
    }

    /// The same problem and run without any quantization.
    pub fn unquantized(&self) -> Result<Self> {
        let sigma = match self.sigma_source {
            SigmaSource::User => Some(self.sigma_sq),
            SigmaSource::Heuristic => None,
        };
        let mut out = Self::from_sites(
            &self.spec,
            &SiteQuantizers::identity(),
            self.n,
            self.batch,
            self.stepsize,
            self.alpha_b,
            sigma,
            None,
        )?;
        out.regime = Regime::None;
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        if self.geom.dim() != self.spec.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.spec.dim(),
                got: self.geom.dim(),
            });
        }
        if self.n == 0 || self.batch == 0 {
            return Err(Error::InvalidRun("N and B must be at least 1".into()));
        }
        if !(self.stepsize > 0.0) || !(self.alpha_b > 0.0) || !(self.sigma_sq >= 0.0) {
            return Err(Error::InvalidRun(
                "stepsize and alpha_B must be positive, sigma² non-negative".into(),
            ));
        }
        Ok(())
    }

    fn n_gamma(&self) -> f64 {
        self.n as f64 * self.stepsize
    }
}

/// Default noise constant σ².
///
/// With `ξ = Q_l(y) - ⟨w^(q)*, Q_d(x)⟩`, the label noise enters once, while
/// the parts of `ξ` that scale with `x` (misfit `w* - w^(q)*` and the data
/// error seen through `w^(q)*`) get the Gaussian fourth-moment factor 3. A
/// label quantizer whose error grows with `|y|` gets the same factor.
pub fn default_sigma_sq(
    spec: &ProblemSpec,
    geom: &QuantizedGeometry,
    label_err_sq: f64,
    label: &QuantizerSpec,
) -> f64 {
    let mut signal = 0.0;
    for i in 0..spec.dim() {
        let l = spec.eigenvalues()[i];
        let diff = spec.w_star()[i] - geom.w_star_q[i];
        signal += l * diff * diff + geom.d_diag[i] * geom.w_star_q[i] * geom.w_star_q[i];
    }
    let label_factor = match label {
        QuantizerSpec::Identity | QuantizerSpec::Additive { .. } => 1.0,
        _ => 3.0,
    };
    spec.noise_var() + label_factor * label_err_sq + 3.0 * signal
}

/// `max{k : λ_k ≥ 1/(Nγ)}` (1-based), or 0 when no eigenvalue qualifies.
pub fn effective_dimension(eigenvalues: &[f64], n: usize, gamma: f64) -> usize {
    let threshold = 1.0 / (n as f64 * gamma);
    eigenvalues
        .iter()
        .rposition(|&l| l >= threshold)
        .map_or(0, |i| i + 1)
}

/// `ε̃ = 2ε_p + 4ε_o(1+ε_a)(1+ε_p) + 2ε_a(1+ε_p)`.
pub fn eps_tilde(eps: &Eps) -> f64 {
    2.0 * eps.p + 4.0 * eps.o * (1.0 + eps.a) * (1.0 + eps.p) + 2.0 * eps.a * (1.0 + eps.p)
}

/// The largest admissible stepsize (exclusive) for the inputs' regime.
pub fn stepsize_limit(inputs: &BoundInputs) -> f64 {
    match inputs.regime {
        Regime::Multiplicative => {
            1.0 / (inputs.alpha_b * (1.0 + inputs.eps.d) * (1.0 + eps_tilde(&inputs.eps)) * inputs.spec.trace())
        }
        _ => 1.0 / (inputs.alpha_b * inputs.geom.trace_q()),
    }
}

pub fn stepsize_ok(inputs: &BoundInputs) -> bool {
    inputs.stepsize < stepsize_limit(inputs)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub regime: Regime,
    pub k_star: usize,
    /// Variance term, including any constant prefactor of the bound.
    pub var_err: f64,
    /// Bias term, including any constant prefactor of the bound.
    pub bias_err: f64,
    pub approx_err: f64,
    /// Zero outside the general bound.
    pub quantized_err: f64,
    /// `σ_G²`, `σ_M²` or `σ_A²`.
    pub sigma_eff_sq: f64,
    /// `ε̃`; only set by the multiplicative bound.
    pub eps_tilde: Option<f64>,
    /// Prefactor already applied to `var_err` and `bias_err`.
    pub var_bias_factor: f64,
    pub sigma_sq: f64,
    pub sigma_source: SigmaSource,
    pub stepsize: f64,
    pub stepsize_limit: f64,
    pub stepsize_ok: bool,
    /// Sum of the terms; `None` when the stepsize condition fails.
    pub total: Option<f64>,
}

/// Head/tail split of a diagonal spectrum by `λ ≥ 1/(Nγ)`.
struct Split {
    /// Indices sorted by non-increasing eigenvalue.
    order: Vec<usize>,
    k: usize,
}

impl Split {
    fn new(eigenvalues: &[f64], n_gamma: f64) -> Self {
        let mut order: Vec<usize> = (0..eigenvalues.len()).collect();
        order.sort_by(|&i, &j| eigenvalues[j].total_cmp(&eigenvalues[i]));
        let sorted: Vec<f64> = order.iter().map(|&i| eigenvalues[i]).collect();
        let k = effective_dimension(&sorted, 1, n_gamma);
        Self { order, k }
    }

    fn head(&self) -> &[usize] {
        &self.order[..self.k]
    }

    fn tail(&self) -> &[usize] {
        &self.order[self.k..]
    }
}

/// `‖w‖²_{I_{0:k}} + Nγ ‖w‖²_{H_{k:∞}}`.
fn signal_mass(split: &Split, eig: &[f64], w: &[f64], n_gamma: f64) -> f64 {
    let head: f64 = split.head().iter().map(|&i| w[i] * w[i]).sum();
    let tail: f64 = split.tail().iter().map(|&i| eig[i] * w[i] * w[i]).sum();
    head + n_gamma * tail
}

/// `k/N + Nγ² Σ_tail λ²`.
fn effective_count(split: &Split, eig: &[f64], n: usize, gamma: f64) -> f64 {
    let tail: f64 = split.tail().iter().map(|&i| eig[i] * eig[i]).sum();
    split.k as f64 / n as f64 + n as f64 * gamma * gamma * tail
}

/// `1/(γN)² ‖w‖²_{H_{0:k}^{-1}} + ‖w‖²_{H_{k:∞}}`.
fn bias_term(split: &Split, eig: &[f64], w: &[f64], n_gamma: f64) -> f64 {
    let head: f64 = split.head().iter().map(|&i| w[i] * w[i] / eig[i]).sum();
    let tail: f64 = split.tail().iter().map(|&i| eig[i] * w[i] * w[i]).sum();
    head / (n_gamma * n_gamma) + tail
}

/// `E[ε_l²] + 3/2 ‖w*‖²_{H(H+D)⁻¹D(H+D)⁻¹H} + 1/2 ‖w*‖²_{D(H+D)⁻¹H(H+D)⁻¹D}`.
fn approx_general(spec: &ProblemSpec, geom: &QuantizedGeometry, label_err_sq: f64) -> f64 {
    let mut d1 = 0.0;
    let mut d2 = 0.0;
    for i in 0..spec.dim() {
        let l = spec.eigenvalues()[i];
        let d = geom.d_diag[i];
        let w2 = spec.w_star()[i] * spec.w_star()[i];
        let s = (l + d) * (l + d);
        d1 += l * l * d / s * w2;
        d2 += d * d * l / s * w2;
    }
    label_err_sq + 1.5 * d1 + 0.5 * d2
}

fn finish(mut report: BoundReport) -> BoundReport {
    report.total = report.stepsize_ok.then(|| {
        report.var_err + report.bias_err + report.approx_err + report.quantized_err
    });
    report
}

/// The general-quantization bound `VarErr + BiasErr + ApproxErr + QuantizedErr`.
pub fn bound_general(inputs: &BoundInputs) -> Result<BoundReport> {
    inputs.validate()?;
    let spec = &inputs.spec;
    let geom = &inputs.geom;
    let lq = &geom.eigenvalues_q;
    let wq = &geom.w_star_q;
    let (n, gamma, ab) = (inputs.n, inputs.stepsize, inputs.alpha_b);
    let ng = inputs.n_gamma();
    let split = Split::new(lq, ng);

    let denom = 1.0 - gamma * ab * geom.trace_q();
    let signal = 2.0 * ab / ng * signal_mass(&split, lq, wq, ng);
    let sigma_g = (inputs.sigma_sq + inputs.act_out_sup) / inputs.batch as f64 + ab * inputs.param_trace;
    let noise = (sigma_g + signal) / denom;

    let var_err = noise * effective_count(&split, lq, n, gamma);
    let bias_err = bias_term(&split, lq, wq, ng);
    let approx_err = approx_general(spec, geom, inputs.label_err_sq);

    let dnorm = geom.distortion_norm();
    let quantized_err = if dnorm == 0.0 {
        0.0
    } else {
        let head_bias: f64 = split.head().iter().map(|&i| wq[i] * wq[i] / (lq[i] * lq[i])).sum();
        let tail_bias: f64 = split.tail().iter().map(|&i| wq[i] * wq[i]).sum();
        let head_var: f64 = split.head().iter().map(|&i| 1.0 / (n as f64 * lq[i])).sum();
        let tail_var: f64 = split.tail().iter().map(|&i| lq[i]).sum();
        2.0 * dnorm * (head_bias / (ng * ng) + tail_bias)
            + 2.0 * dnorm * noise * (head_var + n as f64 * gamma * gamma * tail_var)
    };

    let limit = 1.0 / (ab * geom.trace_q());
    Ok(finish(BoundReport {
        regime: inputs.regime,
        k_star: split.k,
        var_err,
        bias_err,
        approx_err,
        quantized_err,
        sigma_eff_sq: sigma_g,
        eps_tilde: None,
        var_bias_factor: 1.0,
        sigma_sq: inputs.sigma_sq,
        sigma_source: inputs.sigma_source,
        stepsize: gamma,
        stepsize_limit: limit,
        stepsize_ok: gamma < limit,
        total: None,
    }))
}

/// The multiplicative-quantization bound with its `(1+3ε_d)/(1+ε_d)` prefactor.
pub fn bound_multiplicative(inputs: &BoundInputs) -> Result<BoundReport> {
    inputs.validate()?;
    let spec = &inputs.spec;
    let e = inputs.eps;
    let lam = spec.eigenvalues();
    let geom = quantized_geometry(spec, Regime::Multiplicative, e.d)?;
    let lq = &geom.eigenvalues_q;
    let wq = &geom.w_star_q;
    let (n, gamma, ab) = (inputs.n, inputs.stepsize, inputs.alpha_b);
    let ng = inputs.n_gamma();
    let split = Split::new(lq, ng);
    let et = eps_tilde(&e);
    let b = inputs.batch as f64;
    let energy = spec.signal_energy();

    let denom = 1.0 - (1.0 + et) * gamma * ab * (1.0 + e.d) * spec.trace();
    let tail_sq: f64 = split.tail().iter().map(|&i| lam[i] * lam[i]).sum();
    let eff = split.k as f64 / n as f64 + n as f64 * gamma * gamma * (1.0 + e.d) * (1.0 + e.d) * tail_sq;

    let sigma_m = (1.0 + 4.0 * e.o) * inputs.sigma_sq / b
        + energy / (1.0 + e.d)
            * (4.0 * e.o * ((1.0 + e.a) * (1.0 + e.p) + 1.0) * ab
                + 2.0 * e.a * (1.0 + e.p) * ab
                + 2.0 * e.p * ab);
    let var = eff * sigma_m / denom
        + eff * 2.0 * (1.0 + et) * ab * signal_mass(&split, lq, wq, ng) / (ng * denom);
    let bias = bias_term(&split, lq, wq, ng);
    let approx_err = energy * (1.5 + 0.5 * e.d) * e.d / ((1.0 + e.d) * (1.0 + e.d))
        + e.l * spec.label_second_moment();
    let factor = (1.0 + 3.0 * e.d) / (1.0 + e.d);

    let limit = 1.0 / (ab * (1.0 + e.d) * (1.0 + et) * spec.trace());
    Ok(finish(BoundReport {
        regime: Regime::Multiplicative,
        k_star: split.k,
        var_err: factor * var,
        bias_err: factor * bias,
        approx_err,
        quantized_err: 0.0,
        sigma_eff_sq: sigma_m,
        eps_tilde: Some(et),
        var_bias_factor: factor,
        sigma_sq: inputs.sigma_sq,
        sigma_source: inputs.sigma_source,
        stepsize: gamma,
        stepsize_limit: limit,
        stepsize_ok: gamma < limit,
        total: None,
    }))
}

/// The additive-quantization bound `ApproxErr + 2 VarErr + 2 BiasErr`.
pub fn bound_additive(inputs: &BoundInputs) -> Result<BoundReport> {
    inputs.validate()?;
    let spec = &inputs.spec;
    let e = inputs.eps;
    let geom = quantized_geometry(spec, Regime::Additive, e.d)?;
    let lq = &geom.eigenvalues_q;
    let wq = &geom.w_star_q;
    let (n, gamma, ab) = (inputs.n, inputs.stepsize, inputs.alpha_b);
    let ng = inputs.n_gamma();
    let split = Split::new(lq, ng);
    let b = inputs.batch as f64;
    let tr_q = geom.trace_q();

    let sigma_a = (e.o + e.a) / b + ab * e.p * tr_q + inputs.sigma_sq / b;
    let denom = 1.0 - gamma * ab * tr_q;
    let signal = 2.0 * ab / ng * signal_mass(&split, lq, wq, ng);
    let var = (sigma_a + signal) / denom * effective_count(&split, lq, n, gamma);
    let bias = bias_term(&split, lq, wq, ng);
    let approx_err = approx_general(spec, &geom, e.l);

    let limit = 1.0 / (ab * tr_q);
    Ok(finish(BoundReport {
        regime: Regime::Additive,
        k_star: split.k,
        var_err: 2.0 * var,
        bias_err: 2.0 * bias,
        approx_err,
        quantized_err: 0.0,
        sigma_eff_sq: sigma_a,
        eps_tilde: None,
        var_bias_factor: 2.0,
        sigma_sq: inputs.sigma_sq,
        sigma_source: inputs.sigma_source,
        stepsize: gamma,
        stepsize_limit: limit,
        stepsize_ok: gamma < limit,
        total: None,
    }))
}

/// The bound matching `inputs.regime`: multiplicative, additive, or general otherwise.
pub fn bound(inputs: &BoundInputs) -> Result<BoundReport> {
    match inputs.regime {
        Regime::Multiplicative => bound_multiplicative(inputs),
        Regime::Additive => bound_additive(inputs),
        Regime::None | Regime::General => bound_general(inputs),
    }
}

/// Full-precision baseline `R₀` with the same problem, `N`, `B`, `γ`, `α_B` and `σ²`.
pub fn baseline_r0(inputs: &BoundInputs) -> Result<f64> {
    let spec = &inputs.spec;
    let lam = spec.eigenvalues();
    let w = spec.w_star();
    let (n, gamma, ab) = (inputs.n, inputs.stepsize, inputs.alpha_b);
    let limit = 1.0 / (ab * spec.trace());
    if !(gamma < limit) {
        return Err(Error::StepsizeViolated { gamma, limit });
    }
    let ng = inputs.n_gamma();
    let split = Split::new(lam, ng);
    let eff = effective_count(&split, lam, n, gamma);
    let denom = 1.0 - gamma * ab * spec.trace();
    Ok(eff * 4.0 * ab * signal_mass(&split, lam, w, ng) / (ng * denom)
        + eff * inputs.sigma_sq / (inputs.batch as f64 * denom)
        + 2.0 * bias_term(&split, lam, w, ng))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Condition {
    pub name: String,
    pub value: f64,
    pub threshold: f64,
    /// `value / threshold`; the hidden constant is taken as 1.
    pub ratio: f64,
    pub pass: bool,
}

impl Condition {
    fn new(name: &str, value: f64, threshold: f64) -> Self {
        let ratio = if value == 0.0 { 0.0 } else { value / threshold };
        Self {
            name: name.into(),
            value,
            threshold,
            ratio,
            pass: ratio <= 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchingReport {
    pub regime: Regime,
    pub r0: f64,
    pub conditions: Vec<Condition>,
    pub all_pass: bool,
}

/// Error-level conditions under which the quantized risk stays within a constant of `R₀`.
pub fn check_matching_conditions(inputs: &BoundInputs, r0: f64) -> Result<MatchingReport> {
    if !(r0 > 0.0) {
        return Err(Error::Config(format!("R0 must be positive, got {r0}")));
    }
    let spec = &inputs.spec;
    let e = inputs.eps;
    let s2 = inputs.sigma_sq;
    let b = inputs.batch as f64;
    let energy = spec.signal_energy();
    let conditions = match inputs.regime {
        Regime::Multiplicative => {
            let noise_cap = (s2 / (b * energy)).min(1.0);
            vec![
                Condition::new("eps_l", e.l, r0),
                Condition::new("eps_p", e.p, noise_cap),
                Condition::new("eps_a", e.a, noise_cap),
                Condition::new("eps_o", e.o, noise_cap),
                Condition::new("eps_d", e.d, (r0 / energy).min(1.0)),
            ]
        }
        Regime::Additive => {
            let lam = spec.eigenvalues();
            let w = spec.w_star();
            let d = spec.dim();
            let ng = inputs.n_gamma();
            let k0 = effective_dimension(lam, inputs.n, inputs.stepsize);
            let tr_q = spec.trace() + d as f64 * e.d;
            let norm_sq: f64 = w.iter().map(|x| x * x).sum();
            let tail_l2: f64 = lam[k0..].iter().map(|l| l * l).sum();
            let spread = if d > k0 {
                (tail_l2 / (d - k0) as f64).sqrt()
            } else {
                f64::INFINITY
            };
            let tail_h: f64 = (k0..d).map(|i| lam[i] * w[i] * w[i]).sum();
            let head_hinv: f64 = (0..k0).map(|i| w[i] * w[i] / lam[i]).sum();
            let tail_i: f64 = (k0..d).map(|i| w[i] * w[i]).sum();
            let bias_ratio = if tail_i > 0.0 {
                (tail_h + head_hinv / (ng * ng)) / tail_i
            } else {
                f64::INFINITY
            };
            let by_r0 = if norm_sq > 0.0 { r0 / norm_sq } else { f64::INFINITY };
            vec![
                Condition::new("eps_l", e.l, r0),
                Condition::new("eps_o+eps_a", e.o + e.a, s2),
                Condition::new("eps_p", e.p, s2 / (b * tr_q)),
                Condition::new("eps_d", e.d, by_r0.min(spread).min(bias_ratio)),
            ]
        }
        r => {
            return Err(Error::Config(format!(
                "matching conditions exist for the multiplicative and additive regimes, not {r}"
            )))
        }
    };
    let all_pass = conditions.iter().all(|c| c.pass);
    Ok(MatchingReport {
        regime: inputs.regime,
        r0,
        conditions,
        all_pass,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerLawBound {
    pub d_eff: f64,
    pub bound: f64,
}

/// Rates for `λ_i ~ i^{-a}` with unit constants.
pub fn powerlaw_bound(inputs: &BoundInputs, a: f64, regime: Regime) -> Result<PowerLawBound> {
    if !(a > 1.0) {
        return Err(Error::InvalidProblem(format!("power-law exponent must be > 1, got {a}")));
    }
    let e = inputs.eps;
    let ng = inputs.n_gamma();
    let n = inputs.n as f64;
    let d = inputs.spec.dim() as f64;
    let b = inputs.batch as f64;
    let s2 = inputs.sigma_sq;
    match regime {
        Regime::Multiplicative => {
            let d_eff = (ng * (1.0 + e.d)).powf(1.0 / a);
            let m = d_eff.min(d);
            let bound = e.d + e.l + m / ng + m / n * (s2 / b + e.p + e.o + e.a + m / ng);
            Ok(PowerLawBound { d_eff, bound })
        }
        Regime::Additive => {
            let floor = d.powf(-a).max(1.0 / ng - e.d);
            let head = floor.powf(-1.0 / a);
            let d_eff = (d - head) * e.d * ng + head;
            let m = d_eff.min(d);
            let bound = e.d * d
                + e.l
                + m / ng
                + m / n * (s2 / b + (1.0 + d * e.d) * e.p + (e.o + e.a) / b + m / ng);
            Ok(PowerLawBound { d_eff, bound })
        }
        r => Err(Error::Config(format!(
            "power-law rates exist for the multiplicative and additive regimes, not {r}"
        ))),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preference {
    Fp,
    Int,
    Boundary,
}

impl std::fmt::Display for Preference {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Preference::Fp => "fp",
            Preference::Int => "int",
            Preference::Boundary => "boundary",
        })
    }
}

/// FP is preferred when `m ≥ b - ½log₂ d`, INT when `b ≥ m + ½log₂ d`.
pub fn fp_int_preference(bits: u32, mantissa_bits: u32, dim: usize) -> Result<Preference> {
    if dim == 0 {
        return Err(Error::InvalidProblem("dimension must be at least 1".into()));
    }
    let margin = mantissa_bits as f64 - bits as f64 + 0.5 * (dim as f64).log2();
    Ok(if margin.abs() < 1e-9 {
        Preference::Boundary
    } else if margin > 0.0 {
        Preference::Fp
    } else {
        Preference::Int
    })
}
