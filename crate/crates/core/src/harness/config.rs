//! JSON experiment configuration and sweep-cell expansion.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::bounds::DEFAULT_ALPHA_B;
use crate::engine::{geometric_checkpoints, RunConfig, DEFAULT_CHECKPOINTS};
use crate::error::{Error, Result};
use crate::quantizers::{data_geometry, SiteQuantizers};
use crate::spectrum::ProblemSpec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub problem: ProblemConfig,
    #[serde(default)]
    pub quantizers: SiteQuantizers,
    pub run: RunSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bounds: Option<BoundsSection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemConfig {
    pub dim: usize,
    pub spectrum: SpectrumConfig,
    pub w_star: WStarConfig,
    pub noise_var: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SpectrumConfig {
    PowerLaw { a: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum WStarConfig {
    Constant { value: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Stepsize {
    Value(f64),
    Named(StepsizeRule),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepsizeRule {
    /// `0.5 / (α_B tr(H + D))`.
    Auto,
}

impl Default for Stepsize {
    fn default() -> Self {
        Stepsize::Named(StepsizeRule::Auto)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    pub steps: usize,
    pub batch: usize,
    #[serde(default)]
    pub stepsize: Stepsize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoints: Option<Vec<usize>>,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Axis {
    /// Dotted path into the config; `*` matches every key or index at that level.
    pub path: String,
    pub values: Vec<Value>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Emit {
    Csv,
    Json,
    Bounds,
}

fn default_n_seeds() -> usize {
    20
}

fn default_emit() -> Vec<Emit> {
    vec![Emit::Csv, Emit::Json]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    #[serde(default)]
    pub axes: Vec<Axis>,
    #[serde(default = "default_n_seeds")]
    pub n_seeds: usize,
    #[serde(default = "default_emit")]
    pub emit: Vec<Emit>,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            axes: Vec::new(),
            n_seeds: default_n_seeds(),
            emit: default_emit(),
        }
    }
}

fn default_alpha_b() -> f64 {
    DEFAULT_ALPHA_B
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundsSection {
    #[serde(default = "default_alpha_b")]
    pub alpha_b: f64,
    /// Fourth-moment noise constant σ²; the heuristic default is used when absent.
    #[serde(default)]
    pub sigma_sq: Option<f64>,
}

impl Default for BoundsSection {
    fn default() -> Self {
        Self {
            alpha_b: DEFAULT_ALPHA_B,
            sigma_sq: None,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.problem_spec()?;
        self.quantizers.validate()?;
        if let Some(s) = &self.sweep {
            if s.n_seeds == 0 {
                return Err(Error::NotEnoughSeeds { needed: 1, got: 0 });
            }
        }
        let run = self.run_config(self.run.seed)?;
        run.validate(self.problem.dim)
    }

    pub fn problem_spec(&self) -> Result<ProblemSpec> {
        let p = &self.problem;
        let SpectrumConfig::PowerLaw { a } = p.spectrum;
        let WStarConfig::Constant { value } = p.w_star;
        ProblemSpec::power_law(p.dim, a, value, p.noise_var)
    }

    pub fn spectrum_exponent(&self) -> f64 {
        let SpectrumConfig::PowerLaw { a } = self.problem.spectrum;
        a
    }

    pub fn bounds_section(&self) -> BoundsSection {
        self.bounds.unwrap_or_default()
    }

    pub fn sweep_section(&self) -> SweepSection {
        self.sweep.clone().unwrap_or_default()
    }

    /// The stepsize, resolving `"auto"` against the data-quantized trace.
    pub fn stepsize(&self) -> Result<f64> {
        match self.run.stepsize {
            Stepsize::Value(g) => Ok(g),
            Stepsize::Named(StepsizeRule::Auto) => {
                let geom = data_geometry(&self.problem_spec()?, &self.quantizers.data)?;
                Ok(0.5 / (self.bounds_section().alpha_b * geom.trace_q()))
            }
        }
    }

    /// Engine settings with the given base seed.
    pub fn run_config(&self, seed: u64) -> Result<RunConfig> {
        let checkpoints = self
            .run
            .checkpoints
            .clone()
            .unwrap_or_else(|| geometric_checkpoints(self.run.steps, DEFAULT_CHECKPOINTS));
        Ok(RunConfig::new(self.run.steps, self.run.batch, self.stepsize()?, seed).with_checkpoints(checkpoints))
    }

    /// The config of one cell: no sweep axes, stepsize resolved to a number.
    fn resolved(&self) -> Result<Self> {
        let mut out = self.clone();
        out.run.stepsize = Stepsize::Value(self.stepsize()?);
        if let Some(s) = &mut out.sweep {
            s.axes.clear();
        }
        Ok(out)
    }

    /// Hash of the resolved config without `run.seed`, as 16 hex digits.
    pub fn experiment_id(&self) -> Result<String> {
        Ok(self.config_hash()?[..16].to_string())
    }

    /// Full SHA-256 of the canonical resolved config without `run.seed`.
    pub fn config_hash(&self) -> Result<String> {
        let mut v = serde_json::to_value(self.resolved()?)?;
        if let Some(run) = v.get_mut("run").and_then(Value::as_object_mut) {
            run.remove("seed");
        }
        // `serde_json::Map` is ordered by key, so this text is canonical.
        let text = serde_json::to_string(&v)?;
        Ok(hex(&Sha256::digest(text.as_bytes())))
    }

    /// One resolved config per point of the cartesian product of the sweep axes.
    pub fn expand(&self) -> Result<Vec<ExperimentConfig>> {
        let axes = self.sweep.as_ref().map(|s| s.axes.clone()).unwrap_or_default();
        let base = serde_json::to_value(self)?;
        let mut values = vec![base];
        for axis in &axes {
            if axis.values.is_empty() {
                return Err(Error::Config(format!("axis `{}` has no values", axis.path)));
            }
            let mut next = Vec::with_capacity(values.len() * axis.values.len());
            for v in &values {
                for value in &axis.values {
                    let mut cell = v.clone();
                    set_path(&mut cell, &axis.path, value)?;
                    next.push(cell);
                }
            }
            values = next;
        }
        values
            .into_iter()
            .map(|v| {
                let cfg: ExperimentConfig = serde_json::from_value(v)?;
                cfg.validate()?;
                cfg.resolved()
            })
            .collect()
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Base seed of a cell's trials: stable in the root seed and the experiment id only.
pub fn cell_seed(root_seed: u64, experiment_id: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(root_seed.to_le_bytes());
    h.update(experiment_id.as_bytes());
    let digest = h.finalize();
    let mut b = [0u8; 8];
    b.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(b)
}

/// Sets every location matched by `path` to `value`.
///
/// Intermediate segments must exist; the last one may be new if its parent
/// is an object.
pub fn set_path(root: &mut Value, path: &str, value: &Value) -> Result<()> {
    let segments: Vec<&str> = path.split('.').collect();
    if segments.iter().any(|s| s.is_empty()) {
        return Err(Error::InvalidPath(path.into()));
    }
    let hits = set_rec(root, &segments, value, path)?;
    if hits == 0 {
        return Err(Error::InvalidPath(path.into()));
    }
    Ok(())
}

fn set_rec(node: &mut Value, segs: &[&str], value: &Value, path: &str) -> Result<usize> {
    let (head, rest) = segs.split_first().expect("non-empty path");
    let last = rest.is_empty();
    match node {
        Value::Object(map) => {
            if *head == "*" {
                let mut hits = 0;
                for child in map.values_mut() {
                    hits += if last {
                        *child = value.clone();
                        1
                    } else {
                        set_rec(child, rest, value, path)?
                    };
                }
                Ok(hits)
            } else if last {
                map.insert((*head).to_string(), value.clone());
                Ok(1)
            } else {
                match map.get_mut(*head) {
                    Some(child) => set_rec(child, rest, value, path),
                    None => Err(Error::InvalidPath(path.into())),
                }
            }
        }
        Value::Array(items) => {
            if *head == "*" {
                let mut hits = 0;
                for child in items.iter_mut() {
                    hits += if last {
                        *child = value.clone();
                        1
                    } else {
                        set_rec(child, rest, value, path)?
                    };
                }
                Ok(hits)
            } else {
                let idx: usize = head.parse().map_err(|_| Error::InvalidPath(path.into()))?;
                let child = items.get_mut(idx).ok_or_else(|| Error::InvalidPath(path.into()))?;
                if last {
                    *child = value.clone();
                    Ok(1)
                } else {
                    set_rec(child, rest, value, path)
                }
            }
        }
        _ => Err(Error::InvalidPath(path.into())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    const BASE: &str = r#"{
        "problem": {"dim": 20, "spectrum": {"kind": "power_law", "a": 2.0},
                    "w_star": {"kind": "constant", "value": 1.0}, "noise_var": 1.0},
        "quantizers": {
            "data": {"kind": "additive", "epsilon": 0.01},
            "label": {"kind": "additive", "epsilon": 0.01},
            "param": {"kind": "additive", "epsilon": 0.01},
            "activation": {"kind": "additive", "epsilon": 0.01},
            "output_grad": {"kind": "additive", "epsilon": 0.01}
        },
        "run": {"steps": 100, "batch": 1, "stepsize": "auto", "seed": 7},
        "sweep": {"axes": [], "n_seeds": 3}
    }"#;

    #[test]
    fn parses_and_resolves_auto_stepsize() {
        let cfg = ExperimentConfig::from_json(BASE).unwrap();
        let spec = cfg.problem_spec().unwrap();
        let want = 0.5 / (3.0 * (spec.trace() + 20.0 * 0.01));
        assert!((cfg.stepsize().unwrap() - want).abs() < 1e-15);
        let cells = cfg.expand().unwrap();
        assert_eq!(cells.len(), 1);
        assert_eq!(cells[0].run.stepsize, Stepsize::Value(cfg.stepsize().unwrap()));
    }

    #[test]
    fn explicit_stepsize() {
        let text = BASE.replace("\"auto\"", "0.01");
        let cfg = ExperimentConfig::from_json(&text).unwrap();
        assert_eq!(cfg.stepsize().unwrap(), 0.01);
    }

    #[test]
    fn rejects_unknown_fields() {
        let text = BASE.replace("\"noise_var\"", "\"noise\": 1, \"noise_var\"");
        assert!(ExperimentConfig::from_json(&text).is_err());
    }

    #[test]
    fn expand_cartesian_product() {
        let mut cfg = ExperimentConfig::from_json(BASE).unwrap();
        cfg.sweep.as_mut().unwrap().axes = vec![
            Axis {
                path: "quantizers.*.kind".into(),
                values: vec![json!("multiplicative"), json!("additive")],
            },
            Axis {
                path: "quantizers.*.epsilon".into(),
                values: vec![json!(0.001), json!(0.005), json!(0.01)],
            },
        ];
        let cells = cfg.expand().unwrap();
        assert_eq!(cells.len(), 6);
        let ids: std::collections::BTreeSet<_> = cells.iter().map(|c| c.experiment_id().unwrap()).collect();
        assert_eq!(ids.len(), 6);
        assert_eq!(
            cells[0].quantizers.activation,
            crate::QuantizerSpec::Multiplicative { epsilon: 0.001 }
        );
    }

    #[test]
    fn experiment_id_ignores_seed() {
        let a = ExperimentConfig::from_json(BASE).unwrap();
        let mut b = a.clone();
        b.run.seed = 99;
        assert_eq!(a.experiment_id().unwrap(), b.experiment_id().unwrap());
        let mut c = a.clone();
        c.run.batch = 2;
        assert_ne!(a.experiment_id().unwrap(), c.experiment_id().unwrap());
        assert_eq!(a.experiment_id().unwrap().len(), 16);
    }

    #[test]
    fn bad_paths() {
        let mut v = serde_json::to_value(ExperimentConfig::from_json(BASE).unwrap()).unwrap();
        assert!(matches!(set_path(&mut v, "nope.x", &json!(1)), Err(Error::InvalidPath(_))));
        assert!(matches!(set_path(&mut v, "problem..dim", &json!(1)), Err(Error::InvalidPath(_))));
        set_path(&mut v, "problem.dim", &json!(50)).unwrap();
        assert_eq!(v["problem"]["dim"], json!(50));
    }

    #[test]
    fn cell_seed_depends_on_both_inputs() {
        assert_ne!(cell_seed(1, "abc"), cell_seed(2, "abc"));
        assert_ne!(cell_seed(1, "abc"), cell_seed(1, "abd"));
        assert_eq!(cell_seed(1, "abc"), cell_seed(1, "abc"));
    }
}
