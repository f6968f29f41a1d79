//! Run configuration: a TOML file with top-level keys and a few sections.
//!
//! ```toml
//! model = "benchmark"
//! case = ["Case1", "Case4"]    # or a single string; default: all four cases
//! preset = "desk"              # desk | paper; explicit counts below win
//! N = 50
//! M = 500
//! M_u = 500
//! runs = 100
//! criterion = "trace"          # trace | logdet
//! seed = 1
//! output_dir = "output"
//! policy_file = "policy.txt"   # optional; bound/validate use it instead of cases
//!
//! [input]                      # u_min, u_max, b, k
//! [optimizer]                  # max_iterations, restarts, rel_tolerance, patience, initial_step
//! [smc]                        # particles, resample_threshold, shrinkage
//! [truth]                      # theta
//! [params]                     # Case1 = [0.62], ... fixed policies for bound/validate
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use pcrlb_design::designer::OptimizerSettings;
use pcrlb_design::pcrlb::BoundCriterion;
use pcrlb_design::policy::{build_input_space, InputSpace, PolicyTemplate};
use pcrlb_design::smc::SmcConfig;
use pcrlb_design::ssm::{GaussianSsm, ModelRegistry};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, thiserror::Error, PartialEq)]
#[error("config: {0}")]
pub struct ConfigError(pub String);

fn err<T>(msg: impl Into<String>) -> Result<T, ConfigError> {
    Err(ConfigError(msg.into()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    #[default]
    Desk,
    Paper,
}

impl Preset {
    /// `(N, M, M_u, runs)`
    pub fn counts(self) -> (usize, usize, usize, usize) {
        match self {
            Preset::Desk => (50, 500, 500, 100),
            Preset::Paper => (100, 2000, 2000, 500),
        }
    }
}

impl std::str::FromStr for Preset {
    type Err = ConfigError;
    fn from_str(s: &str) -> Result<Self, ConfigError> {
        match s {
            "desk" => Ok(Preset::Desk),
            "paper" => Ok(Preset::Paper),
            other => err(format!("`preset` must be desk or paper, got `{other}`")),
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum OneOrMany {
    One(String),
    Many(Vec<String>),
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawInput {
    u_min: Option<Vec<f64>>,
    u_max: Option<Vec<f64>>,
    b: Option<i64>,
    k: Option<i64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawOptimizer {
    max_iterations: Option<i64>,
    restarts: Option<Vec<f64>>,
    rel_tolerance: Option<f64>,
    patience: Option<i64>,
    initial_step: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSmc {
    particles: Option<i64>,
    resample_threshold: Option<f64>,
    shrinkage: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTruth {
    theta: Option<Vec<f64>>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    model: Option<String>,
    case: Option<OneOrMany>,
    preset: Option<String>,
    #[serde(rename = "N")]
    n: Option<i64>,
    #[serde(rename = "M")]
    m: Option<i64>,
    #[serde(rename = "M_u")]
    m_u: Option<i64>,
    runs: Option<i64>,
    criterion: Option<String>,
    seed: Option<i64>,
    output_dir: Option<String>,
    policy_file: Option<String>,
    input: Option<RawInput>,
    optimizer: Option<RawOptimizer>,
    smc: Option<RawSmc>,
    truth: Option<RawTruth>,
    params: Option<BTreeMap<String, Vec<f64>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InputSettings {
    pub u_min: Vec<f64>,
    pub u_max: Vec<f64>,
    pub b: usize,
    pub k: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OptimizerConfig {
    pub max_iterations: usize,
    pub restarts: Vec<f64>,
    pub rel_tolerance: f64,
    pub patience: usize,
    pub initial_step: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SmcSettings {
    pub particles: usize,
    pub resample_threshold: f64,
    pub shrinkage: f64,
}

/// Validated configuration with defaults applied.
///
/// Everything that affects results is part of the config hash; the output
/// directory and thread count are not.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub model: String,
    pub cases: Vec<PolicyTemplate>,
    pub preset: Preset,
    pub horizon: usize,
    pub samples: usize,
    pub input_paths: usize,
    pub runs: usize,
    pub criterion: BoundCriterion,
    pub seed: u64,
    pub input: InputSettings,
    pub optimizer: OptimizerConfig,
    pub smc: SmcSettings,
    pub truth_theta: Vec<f64>,
    pub params: BTreeMap<String, Vec<f64>>,
    pub policy_file: Option<PathBuf>,
    #[serde(skip)]
    pub output_dir: PathBuf,
    #[serde(skip)]
    pub threads: Option<usize>,
}

/// Command-line overrides applied on top of the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub output_dir: Option<PathBuf>,
    pub preset: Option<Preset>,
    pub threads: Option<usize>,
}

fn count(name: &str, v: Option<i64>, default: usize, min: i64) -> Result<usize, ConfigError> {
    match v {
        None => Ok(default),
        Some(x) if x < min => err(format!("`{name}` must be at least {min}, got {x}")),
        Some(x) => usize::try_from(x).map_err(|_| ConfigError(format!("`{name}` is too large"))),
    }
}

fn unit_interval(name: &str, v: f64, open_low: bool, open_high: bool) -> Result<(), ConfigError> {
    let lo_ok = if open_low { v > 0.0 } else { v >= 0.0 };
    let hi_ok = if open_high { v < 1.0 } else { v <= 1.0 };
    if v.is_finite() && lo_ok && hi_ok {
        Ok(())
    } else {
        err(format!("`{name}` = {v} is outside its allowed range"))
    }
}

/// Parse and validate a configuration file. Relative `policy_file` paths are
/// resolved against the file's directory.
pub fn parse_config(path: &Path, overrides: &Overrides) -> Result<RunConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|e| ConfigError(format!("cannot read {}: {e}", path.display())))?;
    let mut cfg = parse_config_str(&text, overrides)?;
    if let (Some(p), Some(dir)) = (&cfg.policy_file, path.parent()) {
        if p.is_relative() {
            cfg.policy_file = Some(dir.join(p));
        }
    }
    Ok(cfg)
}

/// Parse and validate configuration text.
pub fn parse_config_str(text: &str, overrides: &Overrides) -> Result<RunConfig, ConfigError> {
    let raw: RawConfig = toml::from_str(text).map_err(|e| ConfigError(e.to_string()))?;

    let model_name = raw.model.ok_or_else(|| ConfigError("`model` is required".into()))?;
    let model = ModelRegistry::with_builtins()
        .get(&model_name)
        .ok_or_else(|| ConfigError(format!("`model`: unknown model `{model_name}`")))?;

    let cases = match raw.case {
        None => PolicyTemplate::CASES.to_vec(),
        Some(OneOrMany::One(s)) => vec![s.parse().map_err(|e| ConfigError(format!("`case`: {e}")))?],
        Some(OneOrMany::Many(v)) => v
            .iter()
            .map(|s| s.parse().map_err(|e| ConfigError(format!("`case`: {e}"))))
            .collect::<Result<Vec<_>, _>>()?,
    };
    if cases.is_empty() {
        return err("`case` must name at least one case");
    }

    let preset = match (overrides.preset, &raw.preset) {
        (Some(p), _) => p,
        (None, Some(s)) => s.parse()?,
        (None, None) => Preset::Desk,
    };
    let (dn, dm, dmu, druns) = preset.counts();
    let horizon = count("N", raw.n, dn, 1)?;
    let samples = count("M", raw.m, dm, 2)?;
    let input_paths = count("M_u", raw.m_u, dmu, 1)?;
    let runs = count("runs", raw.runs, druns, 2)?;

    let criterion = match raw.criterion.as_deref() {
        None | Some("trace") => BoundCriterion::Trace,
        Some("logdet") => BoundCriterion::LogDet,
        Some(other) => return err(format!("`criterion` must be trace or logdet, got `{other}`")),
    };
    let seed = match (overrides.seed, raw.seed) {
        (Some(s), _) => s,
        (None, Some(s)) if s < 0 => return err(format!("`seed` must be nonnegative, got {s}")),
        (None, Some(s)) => s as u64,
        (None, None) => 1,
    };

    let ri = raw.input.unwrap_or_default();
    let p = model.dims().input;
    let input = InputSettings {
        u_min: ri.u_min.unwrap_or_else(|| vec![-0.8; p]),
        u_max: ri.u_max.unwrap_or_else(|| vec![0.8; p]),
        b: count("input.b", ri.b, 2, 2)?,
        k: count("input.k", ri.k, 0, 0)?,
    };
    if input.u_min.len() != p || input.u_max.len() != p {
        return err(format!("`input.u_min` and `input.u_max` need {p} entries for model `{model_name}`"));
    }
    build_input_space(&input.u_min, &input.u_max, input.b, input.k).map_err(|e| ConfigError(format!("`input`: {e}")))?;
    if horizon < input.k + 1 {
        return err(format!("`N` = {horizon} is shorter than `input.k` + 1"));
    }

    let ro = raw.optimizer.unwrap_or_default();
    let def = OptimizerSettings::default();
    let optimizer = OptimizerConfig {
        max_iterations: count("optimizer.max_iterations", ro.max_iterations, def.max_iterations, 1)?,
        restarts: ro.restarts.unwrap_or(def.restarts),
        rel_tolerance: ro.rel_tolerance.unwrap_or(def.rel_tolerance),
        patience: count("optimizer.patience", ro.patience, def.patience, 1)?,
        initial_step: ro.initial_step.unwrap_or(def.initial_step),
    };
    for r in &optimizer.restarts {
        unit_interval("optimizer.restarts", *r, true, true)?;
    }
    if !(optimizer.rel_tolerance.is_finite() && optimizer.rel_tolerance >= 0.0) {
        return err("`optimizer.rel_tolerance` must be a nonnegative number");
    }
    if !(optimizer.initial_step.is_finite() && optimizer.initial_step > 0.0) {
        return err("`optimizer.initial_step` must be positive");
    }

    let rs = raw.smc.unwrap_or_default();
    let sdef = SmcConfig::default();
    let smc = SmcSettings {
        particles: count("smc.particles", rs.particles, sdef.particles, 100)?,
        resample_threshold: rs.resample_threshold.unwrap_or(sdef.resample_threshold),
        shrinkage: rs.shrinkage.unwrap_or(sdef.shrinkage),
    };
    unit_interval("smc.resample_threshold", smc.resample_threshold, true, false)?;
    if !(smc.shrinkage > 0.9 && smc.shrinkage < 1.0) {
        return err(format!("`smc.shrinkage` = {} must lie in (0.9, 1)", smc.shrinkage));
    }

    let truth_theta = raw
        .truth
        .and_then(|t| t.theta)
        .unwrap_or_else(|| model.reference_theta().iter().copied().collect());
    if truth_theta.len() != model.dims().param || truth_theta.iter().any(|v| !v.is_finite()) {
        return err(format!("`truth.theta` needs {} finite entries", model.dims().param));
    }

    let params = raw.params.unwrap_or_default();
    let space = build_input_space(&input.u_min, &input.u_max, input.b, input.k).map_err(|e| ConfigError(e.to_string()))?;
    for (name, phi) in &params {
        let t: PolicyTemplate = name.parse().map_err(|e| ConfigError(format!("`params.{name}`: {e}")))?;
        if phi.len() != t.arity(&space) {
            return err(format!("`params.{name}` needs {} values, got {}", t.arity(&space), phi.len()));
        }
        for v in phi {
            unit_interval(&format!("params.{name}"), *v, false, false)?;
        }
    }

    let output_dir = overrides
        .output_dir
        .clone()
        .or_else(|| raw.output_dir.map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("output"));
    if overrides.threads == Some(0) {
        return err("`--threads` must be positive");
    }

    Ok(RunConfig {
        model: model_name,
        cases,
        preset,
        horizon,
        samples,
        input_paths,
        runs,
        criterion,
        seed,
        input,
        optimizer,
        smc,
        truth_theta,
        params,
        policy_file: raw.policy_file.map(PathBuf::from),
        output_dir,
        threads: overrides.threads,
    })
}

impl RunConfig {
    pub fn build_model(&self) -> GaussianSsm {
        ModelRegistry::with_builtins().get(&self.model).expect("model name validated at parse time")
    }

    pub fn input_space(&self) -> InputSpace {
        build_input_space(&self.input.u_min, &self.input.u_max, self.input.b, self.input.k)
            .expect("input grid validated at parse time")
    }

    pub fn optimizer_settings(&self) -> OptimizerSettings {
        OptimizerSettings {
            max_iterations: self.optimizer.max_iterations,
            restarts: self.optimizer.restarts.clone(),
            rel_tolerance: self.optimizer.rel_tolerance,
            patience: self.optimizer.patience,
            initial_step: self.optimizer.initial_step,
        }
    }

    pub fn smc_config(&self) -> SmcConfig {
        SmcConfig {
            particles: self.smc.particles,
            resample_threshold: self.smc.resample_threshold,
            shrinkage: self.smc.shrinkage,
            seed: self.seed,
        }
    }

    /// First 16 hex digits of the SHA-256 of the canonical TOML form.
    pub fn hash(&self) -> String {
        let canonical = toml::to_string(self).expect("config serializes");
        let digest = Sha256::digest(canonical.as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    /// Metadata comment written at the top of every CSV.
    pub fn metadata(&self) -> String {
        format!("seed={}, config_hash={}", self.seed, self.hash())
    }
}
