//! Shared test helpers: random desk-scale configurations and a dense oracle.
//!
//! The oracle works with full matrices in a randomly rotated basis, so it
//! shares no code path with the diagonal arithmetic of the library.

#![allow(dead_code)]

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use quantsgd::bounds::{baseline_r0, bound, powerlaw_bound, stepsize_limit, BoundInputs, Eps, SigmaSource};
use quantsgd::risk::{r3_closed_form, r4_closed_form};
use quantsgd::spectrum::{ProblemSpec, QuantizedGeometry, Regime};

pub fn rel_err(got: f64, want: f64) -> f64 {
    if got == want {
        return 0.0;
    }
    (got - want).abs() / got.abs().max(want.abs())
}

/// A randomized problem with inputs for one of the three bounds.
#[derive(Debug, Clone)]
pub struct RandomCase {
    pub inputs: BoundInputs,
    /// Power-law exponent when the spectrum is `i^{-a}`.
    pub exponent: Option<f64>,
}

pub fn random_spec(rng: &mut ChaCha8Rng) -> (ProblemSpec, Option<f64>) {
    let d = rng.random_range(2..=40);
    let (eigs, exponent) = if rng.random_bool(0.5) {
        let a = rng.random_range(1.2..3.0);
        ((1..=d).map(|i| (i as f64).powf(-a)).collect(), Some(a))
    } else {
        let mut e: Vec<f64> = (0..d).map(|_| 10f64.powf(rng.random_range(-4.0..0.5))).collect();
        e.sort_by(|a, b| b.total_cmp(a));
        (e, None)
    };
    let w: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    let noise = rng.random_range(0.0..2.0);
    (ProblemSpec::new(eigs, w, noise).unwrap(), exponent)
}

/// `k`-th random case; the regime cycles through multiplicative, additive and general.
pub fn random_case(k: u64) -> RandomCase {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0000 + k);
    let (spec, exponent) = random_spec(&mut rng);
    let eps = Eps {
        d: rng.random_range(0.0..0.2),
        l: rng.random_range(0.0..0.2),
        p: rng.random_range(0.0..0.1),
        a: rng.random_range(0.0..0.1),
        o: rng.random_range(0.0..0.1),
    };
    let n = rng.random_range(10..=10_000);
    let batch = rng.random_range(1..=16);
    let sigma = rng.random_range(0.1..2.0);
    let regime = [Regime::Multiplicative, Regime::Additive, Regime::General][(k % 3) as usize];
    let mut inputs = match regime {
        Regime::General => {
            let d_diag: Vec<f64> = (0..spec.dim())
                .map(|_| 10f64.powf(rng.random_range(-5.0..-1.0)))
                .collect();
            BoundInputs {
                geom: QuantizedGeometry::from_distortion(&spec, d_diag, Regime::General).unwrap(),
                spec: spec.clone(),
                regime,
                eps,
                n,
                batch,
                stepsize: 1.0,
                alpha_b: 3.0,
                sigma_sq: sigma,
                sigma_source: SigmaSource::User,
                label_err_sq: rng.random_range(0.0..0.1),
                act_out_sup: rng.random_range(0.0..0.5),
                param_trace: rng.random_range(0.0..0.05),
            }
        }
        r => BoundInputs::exact(&spec, r, eps, n, batch, 1.0, 3.0, Some(sigma)).unwrap(),
    };
    inputs.stepsize = rng.random_range(0.05..0.95) * stepsize_limit(&inputs);
    RandomCase { inputs, exponent }
}

fn random_orthogonal(d: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let g = DMatrix::from_fn(d, d, |_, _| rng.sample::<f64, _>(StandardNormal));
    g.qr().q()
}

/// Dense copies of `H`, `D` and `w*` in a random orthonormal basis.
pub struct Dense {
    pub u: DMatrix<f64>,
    pub h: DMatrix<f64>,
    pub dm: DMatrix<f64>,
    pub w: DVector<f64>,
    pub noise_var: f64,
}

impl Dense {
    pub fn new(spec: &ProblemSpec, d_diag: &[f64], seed: u64) -> Self {
        let d = spec.dim();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let u = random_orthogonal(d, &mut rng);
        let lam = DMatrix::from_diagonal(&DVector::from_column_slice(spec.eigenvalues()));
        let dd = DMatrix::from_diagonal(&DVector::from_column_slice(d_diag));
        Self {
            h: &u * lam * u.transpose(),
            dm: &u * dd * u.transpose(),
            w: &u * DVector::from_column_slice(spec.w_star()),
            u,
            noise_var: spec.noise_var(),
        }
    }

    pub fn hq(&self) -> DMatrix<f64> {
        &self.h + &self.dm
    }

    fn hq_inv(&self) -> DMatrix<f64> {
        self.hq().try_inverse().expect("H + D invertible")
    }

    /// `w^(q)*` expressed back in the eigenbasis of `H`.
    pub fn w_star_q(&self) -> Vec<f64> {
        let wq = self.hq_inv() * &self.h * &self.w;
        (self.u.transpose() * wq).iter().copied().collect()
    }

    fn wq(&self) -> DVector<f64> {
        self.hq_inv() * &self.h * &self.w
    }

    fn quad(&self, m: &DMatrix<f64>, v: &DVector<f64>) -> f64 {
        (v.transpose() * m * v)[(0, 0)]
    }

    /// `‖w*‖²` in the `H(H+D)⁻¹D(H+D)⁻¹H` norm.
    pub fn d1_norm(&self) -> f64 {
        let a = self.hq_inv();
        self.quad(&(&self.h * &a * &self.dm * &a * &self.h), &self.w)
    }

    /// `‖w*‖²` in the `D(H+D)⁻¹H(H+D)⁻¹D` norm.
    pub fn d2_norm(&self) -> f64 {
        let a = self.hq_inv();
        self.quad(&(&self.dm * &a * &self.h * &a * &self.dm), &self.w)
    }

    pub fn r3(&self, label_err_sq: f64) -> f64 {
        0.5 * label_err_sq + 0.5 * self.d1_norm()
    }

    pub fn r4(&self) -> f64 {
        0.5 * self.d2_norm()
    }

    pub fn energy(&self) -> f64 {
        self.quad(&self.h, &self.w)
    }
}

/// Head/tail spectral projections of a symmetric matrix at threshold `1/(Nγ)`.
pub struct DenseSplit {
    pub k: usize,
    vals: DVector<f64>,
    vecs: DMatrix<f64>,
    thr: f64,
}

impl DenseSplit {
    pub fn new(m: &DMatrix<f64>, n_gamma: f64) -> Self {
        let eig = SymmetricEigen::new(m.clone());
        let thr = 1.0 / n_gamma;
        let k = eig.eigenvalues.iter().filter(|&&v| v >= thr).count();
        Self {
            k,
            vals: eig.eigenvalues,
            vecs: eig.eigenvectors,
            thr,
        }
    }

    /// `Σ_i f(λ_i) v_i v_iᵀ` over the head or the tail.
    fn func(&self, head: bool, f: impl Fn(f64) -> f64) -> DMatrix<f64> {
        let d = self.vals.len();
        let mut out = DMatrix::zeros(d, d);
        for i in 0..d {
            let v = self.vals[i];
            if (v >= self.thr) == head {
                let c = self.vecs.column(i);
                out += f(v) * &c * c.transpose();
            }
        }
        out
    }

    pub fn norm(&self, head: bool, f: impl Fn(f64) -> f64, w: &DVector<f64>) -> f64 {
        (w.transpose() * self.func(head, f) * w)[(0, 0)]
    }

    pub fn sum(&self, head: bool, f: impl Fn(f64) -> f64) -> f64 {
        self.vals.iter().filter(|&&v| (v >= self.thr) == head).map(|&v| f(v)).sum()
    }
}

/// Values the oracle reproduces for one case.
#[derive(Debug, Clone, Copy)]
pub struct OracleValues {
    pub k_star: usize,
    pub sigma_eff_sq: f64,
    pub eps_tilde: Option<f64>,
    pub total: f64,
    pub r0: f64,
}

fn eps_tilde(e: &Eps) -> f64 {
    2.0 * e.p + 4.0 * e.o * (1.0 + e.a) * (1.0 + e.p) + 2.0 * e.a * (1.0 + e.p)
}

/// Full-precision baseline from dense `H`.
pub fn oracle_r0(inputs: &BoundInputs, dense: &Dense) -> f64 {
    let (n, g, ab) = (inputs.n as f64, inputs.stepsize, inputs.alpha_b);
    let ng = n * g;
    let s = DenseSplit::new(&dense.h, ng);
    let w = &dense.w;
    let eff = s.k as f64 / n + n * g * g * s.sum(false, |v| v * v);
    let denom = 1.0 - g * ab * dense.h.trace();
    let mass = s.norm(true, |_| 1.0, w) + ng * s.norm(false, |v| v, w);
    eff * 4.0 * ab * mass / (ng * denom)
        + eff * inputs.sigma_sq / (inputs.batch as f64 * denom)
        + 2.0 / (ng * ng) * s.norm(true, |v| 1.0 / v, w)
        + 2.0 * s.norm(false, |v| v, w)
}

/// Bound total, `k*`, effective noise and baseline from dense matrices.
pub fn oracle(inputs: &BoundInputs, seed: u64) -> OracleValues {
    let dense = Dense::new(&inputs.spec, &inputs.geom.d_diag, seed);
    let (n, g, ab, b) = (inputs.n as f64, inputs.stepsize, inputs.alpha_b, inputs.batch as f64);
    let ng = n * g;
    let hq = dense.hq();
    let s = DenseSplit::new(&hq, ng);
    let wq = dense.wq();
    let e = inputs.eps;
    let mass = s.norm(true, |_| 1.0, &wq) + ng * s.norm(false, |v| v, &wq);
    let eff = s.k as f64 / n + n * g * g * s.sum(false, |v| v * v);
    let bias = s.norm(true, |v| 1.0 / v, &wq) / (ng * ng) + s.norm(false, |v| v, &wq);
    let approx = |label: f64| label + 1.5 * dense.d1_norm() + 0.5 * dense.d2_norm();
    let r0 = oracle_r0(inputs, &dense);

    match inputs.regime {
        Regime::Multiplicative => {
            let et = eps_tilde(&e);
            let energy = dense.energy();
            let denom = 1.0 - g * ab * (1.0 + e.d) * (1.0 + et) * dense.h.trace();
            let sigma_m = (1.0 + 4.0 * e.o) * inputs.sigma_sq / b
                + energy / (1.0 + e.d)
                    * ab
                    * (4.0 * e.o * ((1.0 + e.a) * (1.0 + e.p) + 1.0) + 2.0 * e.a * (1.0 + e.p) + 2.0 * e.p);
            let var = eff / denom * (sigma_m + 2.0 * (1.0 + et) * ab * mass / ng);
            let c = (1.0 + 3.0 * e.d) / (1.0 + e.d);
            let label = e.l * (energy + dense.noise_var);
            OracleValues {
                k_star: s.k,
                sigma_eff_sq: sigma_m,
                eps_tilde: Some(et),
                total: c * (var + bias) + approx(label),
                r0,
            }
        }
        Regime::Additive => {
            let sigma_a = (e.o + e.a) / b + ab * e.p * hq.trace() + inputs.sigma_sq / b;
            let denom = 1.0 - g * ab * hq.trace();
            let var = (sigma_a + 2.0 * ab * mass / ng) / denom * eff;
            OracleValues {
                k_star: s.k,
                sigma_eff_sq: sigma_a,
                eps_tilde: None,
                total: 2.0 * var + 2.0 * bias + approx(e.l),
                r0,
            }
        }
        _ => {
            let sigma_g = (inputs.sigma_sq + inputs.act_out_sup) / b + ab * inputs.param_trace;
            let denom = 1.0 - g * ab * hq.trace();
            let noise = (sigma_g + 2.0 * ab * mass / ng) / denom;
            let dnorm = SymmetricEigen::new(dense.dm.clone()).eigenvalues.amax();
            let quantized = 2.0 * dnorm
                * (s.norm(true, |v| 1.0 / (v * v), &wq) / (ng * ng) + s.norm(false, |_| 1.0, &wq))
                + 2.0 * dnorm * noise * (s.sum(true, |v| 1.0 / (n * v)) + n * g * g * s.sum(false, |v| v));
            OracleValues {
                k_star: s.k,
                sigma_eff_sq: sigma_g,
                eps_tilde: None,
                total: noise * eff + bias + approx(inputs.label_err_sq) + quantized,
                r0,
            }
        }
    }
}

/// Root of a decreasing function on `[lo, hi]` by bisection in log space.
pub fn bisect_log(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64) -> f64 {
    for _ in 0..400 {
        let mid = ((lo.ln() + hi.ln()) * 0.5).exp();
        if mid <= lo || mid >= hi {
            break;
        }
        if f(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Continuous index where `(1+ε_d) i^{-a}` drops to `1/(Nγ)`.
pub fn oracle_deff_mult(a: f64, n_gamma: f64, eps_d: f64) -> f64 {
    bisect_log(|x| (1.0 + eps_d) * x.powf(-a) - 1.0 / n_gamma, 1e-300, 1e300)
}

/// `(d - h) ε_d Nγ + h`, with `h` the continuous index where `i^{-a}` meets `max(d^{-a}, 1/(Nγ) - ε_d)`.
pub fn oracle_deff_add(a: f64, n_gamma: f64, eps_d: f64, d: f64) -> f64 {
    let floor = d.powf(-a).max(1.0 / n_gamma - eps_d);
    let h = bisect_log(|x| x.powf(-a) - floor, 1e-300, 1e300);
    (d - h) * eps_d * n_gamma + h
}

/// Relative errors of every library quantity against the oracle for case `k`.
pub fn compare_case(k: u64) -> Vec<(&'static str, f64)> {
    let case = random_case(k);
    let inputs = &case.inputs;
    let dense = Dense::new(&inputs.spec, &inputs.geom.d_diag, 0x0dd5 + k);
    let want = oracle(inputs, 0x0dd5 + k);
    let report = bound(inputs).unwrap();
    let mut out = Vec::new();

    let wq = dense.w_star_q();
    let scale = wq.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let wq_err = inputs
        .geom
        .w_star_q
        .iter()
        .zip(&wq)
        .map(|(a, b)| (a - b).abs() / scale)
        .fold(0.0, f64::max);
    out.push(("w_star_q", wq_err));
    out.push((
        "r3",
        rel_err(r3_closed_form(&inputs.geom, &inputs.spec, inputs.label_err_sq).unwrap(), dense.r3(inputs.label_err_sq)),
    ));
    out.push(("r4", rel_err(r4_closed_form(&inputs.geom, &inputs.spec).unwrap(), dense.r4())));
    out.push(("k_star", if report.k_star == want.k_star { 0.0 } else { 1.0 }));
    out.push(("sigma_eff_sq", rel_err(report.sigma_eff_sq, want.sigma_eff_sq)));
    if let Some(et) = want.eps_tilde {
        out.push(("eps_tilde", rel_err(report.eps_tilde.unwrap(), et)));
    }
    out.push(("bound_total", rel_err(report.total.expect("stepsize ok"), want.total)));
    out.push(("r0", rel_err(baseline_r0(inputs).unwrap(), want.r0)));
    if let Some(a) = case.exponent {
        let ng = inputs.n as f64 * inputs.stepsize;
        match inputs.regime {
            Regime::Multiplicative => {
                let got = powerlaw_bound(inputs, a, Regime::Multiplicative).unwrap().d_eff;
                out.push(("d_eff_mult", rel_err(got, oracle_deff_mult(a, ng, inputs.eps.d))));
            }
            Regime::Additive => {
                let got = powerlaw_bound(inputs, a, Regime::Additive).unwrap().d_eff;
                let d = inputs.spec.dim() as f64;
                out.push(("d_eff_add", rel_err(got, oracle_deff_add(a, ng, inputs.eps.d, d))));
            }
            _ => {}
        }
    }
    out
}
