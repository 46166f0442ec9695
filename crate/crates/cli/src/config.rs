//! Run configuration: one JSON file, optionally patched by `--set
//! dotted.path=value` overrides.

use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use safe_sysid::constraints::{ConstraintSpecs, RiskSpec, SafetySpec, StabilitySpec};
use safe_sysid::dataset::SnakeShape;
use safe_sysid::qcqp::SolverConfig;
use safe_sysid::robot::{PidGains, TwoLinkParams};
use safe_sysid::rollout::RolloutConfig;
use safe_sysid::{Error, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Experiment {
    Robot,
    Demonstrations,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub experiment: Experiment,
    pub seed: u64,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub robot: Option<RobotData>,
    #[serde(default)]
    pub demonstrations: Option<DemoData>,
    pub model: ModelConfig,
    pub safety: SafetyConfig,
    pub stability: StabilityConfig,
    pub risk: RiskSpec,
    pub sampler: SamplerConfig,
    pub solver: SolverConfig,
    pub train: TrainConfig,
    pub rollout: RolloutConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RobotData {
    pub params: TwoLinkParams,
    pub gains: PidGains,
    pub trajectories: usize,
    pub steps: usize,
    pub period: f64,
    pub target: [f64; 2],
    /// Initial conditions are drawn where the barrier is at least this.
    pub min_barrier: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DemoData {
    /// Existing dataset manifest; used when `synthetic` is absent.
    #[serde(default)]
    pub manifest: Option<PathBuf>,
    /// Generate the snake-like stand-in instead of reading a manifest.
    #[serde(default)]
    pub synthetic: Option<SnakeShape>,
    pub translate_to_origin: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub n_h: usize,
    pub sigma: f64,
    pub weight_bound_out: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SafetyConfig {
    pub iota1: f64,
    pub iota2: f64,
    pub alpha: f64,
    pub center: Vec<f64>,
    pub gamma: f64,
    pub zeta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StabilityConfig {
    /// Row-major `n x n`.
    pub p: Vec<f64>,
    pub rho: f64,
    pub delta: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    pub tau: f64,
    pub inflation: f64,
    /// Number of grid points kept as constraint states.
    pub budget: usize,
    pub max_points: usize,
    /// Tighten every bound by its sampling margin.
    pub margins: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub mu_w: f64,
    pub xi_rounds: usize,
    /// Skip every constraint and fit the ridge solution.
    pub unconstrained: bool,
}

impl RunConfig {
    /// Reads `path`, applies `overrides` (`dotted.path=value`, value parsed
    /// as JSON and otherwise taken as a string) and resolves relative paths
    /// against the config file's directory.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut value: Value = serde_json::from_str(&text).map_err(|e| parse_error(path, e))?;
        for item in overrides {
            apply_override(&mut value, item).map_err(|message| Error::Parse {
                path: path.to_path_buf(),
                message,
            })?;
        }
        let mut config: RunConfig = serde_json::from_value(value).map_err(|e| parse_error(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        config.output_dir = base.join(&config.output_dir);
        if let Some(demo) = config.demonstrations.as_mut() {
            if let Some(m) = demo.manifest.as_mut() {
                *m = base.join(&*m);
            }
        }
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        match self.experiment {
            Experiment::Robot if self.robot.is_none() => {
                return Err(Error::InvalidInput("robot experiment needs a `robot` section".into()))
            }
            Experiment::Demonstrations => {
                let Some(d) = &self.demonstrations else {
                    return Err(Error::InvalidInput(
                        "demonstrations experiment needs a `demonstrations` section".into(),
                    ));
                };
                match (&d.manifest, &d.synthetic) {
                    (None, None) => {
                        return Err(Error::InvalidInput(
                            "demonstrations need either `manifest` or `synthetic`".into(),
                        ))
                    }
                    (Some(m), None) if !m.exists() => {
                        return Err(Error::io(m, std::io::Error::from(std::io::ErrorKind::NotFound)))
                    }
                    _ => {}
                }
            }
            _ => {}
        }
        if self.model.n_h == 0 {
            return Err(Error::InvalidInput("model.n_h must be >= 1".into()));
        }
        if self.sampler.budget == 0 {
            return Err(Error::InvalidInput("sampler.budget must be >= 1".into()));
        }
        if !(self.train.mu_w > 0.0) {
            return Err(Error::InvalidInput("train.mu_w must be > 0".into()));
        }
        RiskSpec::new(self.risk.p_k, self.risk.xi)?;
        self.solver.validate()?;
        self.rollout.validate()?;
        self.safety_spec()?;
        self.stability_spec(&DVector::zeros(self.safety.center.len()))?;
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.safety.center.len()
    }

    pub fn safety_spec(&self) -> Result<SafetySpec> {
        SafetySpec::from_ellipse(
            self.safety.iota1,
            self.safety.iota2,
            self.safety.alpha,
            DVector::from_column_slice(&self.safety.center),
            self.safety.gamma,
            self.safety.zeta,
        )
    }

    pub fn stability_spec(&self, equilibrium: &DVector<f64>) -> Result<StabilitySpec> {
        let n = equilibrium.len();
        if self.stability.p.len() != n * n {
            return Err(Error::InvalidInput(format!(
                "stability.p has {} entries, expected {}",
                self.stability.p.len(),
                n * n
            )));
        }
        StabilitySpec::new(
            DMatrix::from_row_slice(n, n, &self.stability.p),
            equilibrium.clone(),
            self.stability.rho,
            self.stability.delta,
        )
    }

    pub fn specs(&self, equilibrium: &DVector<f64>) -> Result<ConstraintSpecs> {
        ConstraintSpecs::new(self.safety_spec()?, self.stability_spec(equilibrium)?, self.risk, self.model.sigma)
    }

    /// Canonical JSON of the resolved configuration.
    pub fn canonical_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    /// SHA-256 of [`Self::canonical_json`], hex encoded.
    pub fn hash(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.canonical_json()?.as_bytes())))
    }
}

fn parse_error(path: &Path, e: serde_json::Error) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

/// Sets `a.b.c=value` inside `root`, creating intermediate objects.
pub fn apply_override(root: &mut Value, item: &str) -> std::result::Result<(), String> {
    let (path, raw) = item
        .split_once('=')
        .ok_or_else(|| format!("override `{item}` is not of the form key=value"))?;
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(format!("override `{item}` has an empty key"));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    for key in &keys[..keys.len() - 1] {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| format!("`{path}`: `{key}` is inside a non-object"))?;
        node = obj.entry(key.to_string()).or_insert_with(|| Value::Object(Default::default()));
        if node.is_null() {
            *node = Value::Object(Default::default());
        }
    }
    node.as_object_mut()
        .ok_or_else(|| format!("`{path}` does not address an object field"))?
        .insert(keys[keys.len() - 1].to_string(), value);
    Ok(())
}
