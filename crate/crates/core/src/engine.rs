//! The quantized SGD recursion with iterate averaging.
//!
//! One step computes
//!
//! ```text
//! w_t = w_{t-1} + γ/B · Q_d(X)ᵀ Q_o( Q_l(y) - Q_a( Q_d(X) Q_p(w_{t-1}) ) )
//! ```
//!
//! with a single realization of `Q_d(X)` used in both places. All other
//! arithmetic is full precision and the stored weights are never quantized.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quantizers::{data_geometry, SiteQuantizers};
use crate::risk::excess_risk;
use crate::spectrum::{Batch, DataModel, ProblemSpec};

/// Stream ids of the per-trial ChaCha generators.
pub mod stream {
    pub const DATA: u64 = 0;
    pub const DATA_QUANT: u64 = 1;
    pub const LABEL: u64 = 2;
    pub const PARAM: u64 = 3;
    pub const ACTIVATION: u64 = 4;
    pub const OUTPUT_GRAD: u64 = 5;
}

/// Number of checkpoints when none are given.
pub const DEFAULT_CHECKPOINTS: usize = 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub steps: usize,
    pub batch: usize,
    pub stepsize: f64,
    /// Sorted step indices in `[1, steps]`.
    pub checkpoints: Vec<usize>,
    pub seed: u64,
    /// Initial weights; zero when `None`.
    pub w0: Option<Vec<f64>>,
}

impl RunConfig {
    /// A run from `w_0 = 0` with the default geometric checkpoint grid.
    pub fn new(steps: usize, batch: usize, stepsize: f64, seed: u64) -> Self {
        Self {
            steps,
            batch,
            stepsize,
            checkpoints: geometric_checkpoints(steps, DEFAULT_CHECKPOINTS),
            seed,
            w0: None,
        }
    }

    pub fn with_w0(mut self, w0: Vec<f64>) -> Self {
        self.w0 = Some(w0);
        self
    }

    pub fn with_checkpoints(mut self, checkpoints: Vec<usize>) -> Self {
        self.checkpoints = checkpoints;
        self
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::InvalidRun("steps must be at least 1".into()));
        }
        if self.batch == 0 {
            return Err(Error::InvalidRun("batch must be at least 1".into()));
        }
        if !(self.stepsize > 0.0) || !self.stepsize.is_finite() {
            return Err(Error::InvalidRun(format!(
                "stepsize must be finite and positive, got {}",
                self.stepsize
            )));
        }
        if self.checkpoints.windows(2).any(|p| p[1] <= p[0]) {
            return Err(Error::InvalidRun("checkpoints must be strictly increasing".into()));
        }
        if let (Some(&first), Some(&last)) = (self.checkpoints.first(), self.checkpoints.last()) {
            if first < 1 || last > self.steps {
                return Err(Error::InvalidRun(format!(
                    "checkpoints must lie in [1, {}]",
                    self.steps
                )));
            }
        }
        if let Some(w0) = &self.w0 {
            if w0.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: w0.len(),
                });
            }
        }
        Ok(())
    }
}

/// About `count` distinct integers spread geometrically over `[1, n]`, always including 1 and `n`.
pub fn geometric_checkpoints(n: usize, count: usize) -> Vec<usize> {
    if n == 0 || count == 0 {
        return Vec::new();
    }
    if count == 1 {
        return vec![n];
    }
    let ln = (n as f64).ln();
    let mut out: Vec<usize> = (0..count)
        .map(|k| {
            let v = (ln * k as f64 / (count - 1) as f64).exp().round() as usize;
            v.clamp(1, n)
        })
        .collect();
    out.push(n);
    out.sort_unstable();
    out.dedup();
    out
}

/// Independent random streams for the data and the five quantization sites.
#[derive(Debug, Clone)]
pub struct SiteStreams<R> {
    pub data: R,
    pub label: R,
    pub param: R,
    pub activation: R,
    pub output_grad: R,
}

fn substream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

impl SiteStreams<ChaCha8Rng> {
    pub fn from_seed(seed: u64) -> Self {
        Self {
            data: substream(seed, stream::DATA_QUANT),
            label: substream(seed, stream::LABEL),
            param: substream(seed, stream::PARAM),
            activation: substream(seed, stream::ACTIVATION),
            output_grad: substream(seed, stream::OUTPUT_GRAD),
        }
    }
}

/// The data-sampling stream of a trial.
pub fn data_stream(seed: u64) -> ChaCha8Rng {
    substream(seed, stream::DATA)
}

/// Reusable buffers for [`Stepper::step`].
#[derive(Debug, Clone)]
pub struct Stepper {
    xq: Array2<f64>,
    yq: Vec<f64>,
    wq: Vec<f64>,
    act: Vec<f64>,
    act_q: Vec<f64>,
    out: Vec<f64>,
    out_q: Vec<f64>,
}

impl Stepper {
    pub fn new(dim: usize, batch: usize) -> Self {
        Self {
            xq: Array2::zeros((batch, dim)),
            yq: vec![0.0; batch],
            wq: vec![0.0; dim],
            act: vec![0.0; batch],
            act_q: vec![0.0; batch],
            out: vec![0.0; batch],
            out_q: vec![0.0; batch],
        }
    }

    /// Activation `Q_d(X) Q_p(w)` of the last step, before `Q_a`.
    pub fn activation(&self) -> &[f64] {
        &self.act
    }

    /// Output gradient `Q_l(y) - Q_a(a)` of the last step, before `Q_o`.
    pub fn output_grad(&self) -> &[f64] {
        &self.out
    }

    /// Advances `w` in place by one step. Returns `false` if any weight is no longer finite.
    pub fn step<R: Rng>(
        &mut self,
        w: &mut [f64],
        batch: &Batch,
        sites: &SiteQuantizers,
        gamma: f64,
        streams: &mut SiteStreams<R>,
    ) -> Result<bool> {
        let (b, d) = batch.features.dim();
        if w.len() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: w.len(),
            });
        }
        if batch.labels.len() != b {
            return Err(Error::DimensionMismatch {
                expected: b,
                got: batch.labels.len(),
            });
        }
        if self.xq.dim() != (b, d) {
            *self = Stepper::new(d, b);
        }

        self.xq.assign(&batch.features);
        for mut row in self.xq.rows_mut() {
            let row = row.as_slice_mut().expect("standard layout");
            sites.data.apply_in_place(row, &mut streams.data);
        }

        for (q, y) in self.yq.iter_mut().zip(batch.labels.iter()) {
            *q = *y;
        }
        sites.label.apply_in_place(&mut self.yq, &mut streams.label);

        self.wq.copy_from_slice(w);
        sites.param.apply_in_place(&mut self.wq, &mut streams.param);

        for (j, row) in self.xq.rows().into_iter().enumerate() {
            let mut a = 0.0;
            for (x, wq) in row.iter().zip(&self.wq) {
                a += x * wq;
            }
            self.act[j] = a;
        }
        self.act_q.copy_from_slice(&self.act);
        sites.activation.apply_in_place(&mut self.act_q, &mut streams.activation);

        for j in 0..b {
            self.out[j] = self.yq[j] - self.act_q[j];
        }
        self.out_q.copy_from_slice(&self.out);
        sites.output_grad.apply_in_place(&mut self.out_q, &mut streams.output_grad);

        let coef = gamma / b as f64;
        let mut finite = true;
        for (i, wi) in w.iter_mut().enumerate() {
            let mut g = 0.0;
            for j in 0..b {
                g += self.xq[[j, i]] * self.out_q[j];
            }
            *wi += coef * g;
            finite &= wi.is_finite();
        }
        Ok(finite)
    }
}

/// One step from `w` on `batch`, returning the new weights.
pub fn sgd_step<R: Rng>(
    w: &[f64],
    batch: &Batch,
    sites: &SiteQuantizers,
    gamma: f64,
    streams: &mut SiteStreams<R>,
) -> Result<Vec<f64>> {
    let mut stepper = Stepper::new(w.len(), batch.size());
    let mut out = w.to_vec();
    stepper.step(&mut out, batch, sites, gamma, streams)?;
    Ok(out)
}

/// Running maxima of the quantization-noise quantities that enter the general bound.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct NoiseStats {
    /// `sup_t ‖E[ε_o ε_oᵀ | o] + E[ε_a ε_aᵀ | a]‖`.
    pub act_out_sup: f64,
    /// `sup_t tr(H^(q) E[ε_p ε_pᵀ | w_{t-1}])`.
    pub param_trace_sup: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub seed: u64,
    /// `(t, E(w_t))` at each checkpoint.
    pub risk_last: Vec<(usize, f64)>,
    /// `(t, E(w̄_t))` at each checkpoint, `w̄_t` the mean of `w_0 … w_{t-1}`.
    pub risk_avg: Vec<(usize, f64)>,
    /// `w̄_N`.
    pub final_avg: Vec<f64>,
    /// `w_N`.
    pub final_last: Vec<f64>,
    pub noise: NoiseStats,
}

impl Trajectory {
    pub fn final_risk_avg(&self) -> Option<f64> {
        self.risk_avg.last().map(|p| p.1)
    }
}

/// Runs `cfg.steps` steps from `cfg.w0`. Deterministic in `cfg.seed`.
///
/// Fails with [`Error::Diverged`] when a weight, or the risk at a checkpoint, stops being finite.
pub fn run_trajectory(spec: &ProblemSpec, sites: &SiteQuantizers, cfg: &RunConfig) -> Result<Trajectory> {
    let d = spec.dim();
    cfg.validate(d)?;
    sites.validate()?;

    let model = DataModel::new(spec);
    let mut data_rng = data_stream(cfg.seed);
    let mut streams = SiteStreams::from_seed(cfg.seed);
    let mut stepper = Stepper::new(d, cfg.batch);
    let mut batch = Batch {
        features: Array2::zeros((cfg.batch, d)),
        labels: ndarray::Array1::zeros(cfg.batch),
    };

    let hq = data_geometry(spec, &sites.data)?.eigenvalues_q;
    let track_param = !sites.param.is_identity();
    let track_act_out = !(sites.activation.is_identity() && sites.output_grad.is_identity());
    let mut noise = NoiseStats::default();

    let mut w = cfg.w0.clone().unwrap_or_else(|| vec![0.0; d]);
    let mut sum = vec![0.0; d];
    let mut avg = vec![0.0; d];
    let mut risk_last = Vec::with_capacity(cfg.checkpoints.len());
    let mut risk_avg = Vec::with_capacity(cfg.checkpoints.len());
    let mut next_cp = cfg.checkpoints.iter().copied().peekable();

    for t in 1..=cfg.steps {
        for (s, wi) in sum.iter_mut().zip(&w) {
            *s += wi;
        }
        if track_param {
            let tr = sites.param.conditional_covariance(&w).weighted_trace(&hq);
            noise.param_trace_sup = noise.param_trace_sup.max(tr);
        }

        model.fill(&mut batch, &mut data_rng);
        if !stepper.step(&mut w, &batch, sites, cfg.stepsize, &mut streams)? {
            return Err(Error::Diverged {
                step: t,
                seed: cfg.seed,
            });
        }

        if track_act_out {
            let ca = sites.activation.conditional_covariance(stepper.activation());
            let co = sites.output_grad.conditional_covariance(stepper.output_grad());
            noise.act_out_sup = noise.act_out_sup.max(ca.spectral_norm_of_sum(&co));
        }

        if next_cp.peek() == Some(&t) {
            next_cp.next();
            let inv = 1.0 / t as f64;
            for (a, s) in avg.iter_mut().zip(&sum) {
                *a = s * inv;
            }
            let last = excess_risk(&w, spec)?;
            let mean = excess_risk(&avg, spec)?;
            if !(last.is_finite() && mean.is_finite()) {
                return Err(Error::Diverged {
                    step: t,
                    seed: cfg.seed,
                });
            }
            risk_last.push((t, last));
            risk_avg.push((t, mean));
        }
    }

    let inv = 1.0 / cfg.steps as f64;
    let final_avg = sum.iter().map(|s| s * inv).collect();
    Ok(Trajectory {
        seed: cfg.seed,
        risk_last,
        risk_avg,
        final_avg,
        final_last: w,
        noise,
    })
}

/// Runs seeds `cfg.seed, cfg.seed + 1, …` in parallel; results are in seed order.
pub fn run_seeds(
    spec: &ProblemSpec,
    sites: &SiteQuantizers,
    cfg: &RunConfig,
    n_seeds: usize,
) -> Result<Vec<Trajectory>> {
    (0..n_seeds as u64)
        .into_par_iter()
        .map(|k| {
            let mut c = cfg.clone();
            c.seed = cfg.seed.wrapping_add(k);
            run_trajectory(spec, sites, &c)
        })
        .collect()
}

/// Per-checkpoint mean and standard error of the averaged-iterate risk across seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskSummary {
    pub steps: Vec<usize>,
    pub mean: Vec<f64>,
    /// Sample standard deviation over `√n`; NaN when `n = 1`.
    pub stderr: Vec<f64>,
}

pub fn summarize(trajectories: &[Trajectory]) -> Result<RiskSummary> {
    let first = trajectories.first().ok_or(Error::NotEnoughSeeds { needed: 1, got: 0 })?;
    let steps: Vec<usize> = first.risk_avg.iter().map(|p| p.0).collect();
    let n = trajectories.len() as f64;
    let mut mean = Vec::with_capacity(steps.len());
    let mut stderr = Vec::with_capacity(steps.len());
    for k in 0..steps.len() {
        let vals: Vec<f64> = trajectories.iter().map(|t| t.risk_avg[k].1).collect();
        let m = vals.iter().sum::<f64>() / n;
        let var = vals.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1.0);
        mean.push(m);
        stderr.push(if trajectories.len() > 1 { (var / n).sqrt() } else { f64::NAN });
    }
    Ok(RiskSummary { steps, mean, stderr })
}

/// Mean and standard error of `E(w̄_t)` over `n_seeds` consecutive seeds.
pub fn mean_risk(
    spec: &ProblemSpec,
    sites: &SiteQuantizers,
    cfg: &RunConfig,
    n_seeds: usize,
) -> Result<RiskSummary> {
    if n_seeds == 0 {
        return Err(Error::NotEnoughSeeds { needed: 1, got: 0 });
    }
    summarize(&run_seeds(spec, sites, cfg, n_seeds)?)
}
