//! Monte-Carlo design objective and the policy search built on it.
//!
//! The objective for a policy is the average, over `M_u` input paths drawn
//! from the policy, of `Σ_t Φ(L_t)` computed with `M` prior samples. Input
//! path `i` is produced by inverse-CDF transforms of a frozen uniform stream
//! and uses its own frozen noise table (replicate `i`), so for a fixed master
//! seed the objective is a deterministic function of the policy parameters.

use std::collections::HashMap;
use std::time::{Duration, Instant};

use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::noise::{NoiseKey, StreamKind};
use crate::pcrlb::{bound_trajectory, BoundCriterion};
use crate::policy::{policy_from_template, InputSpace, MarkovInputPolicy, PolicyTemplate};
use crate::ssm::{GaussianSsm, InputSequence};

/// Nelder-Mead settings.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerSettings {
    /// Iteration cap per restart.
    pub max_iterations: usize,
    /// Starting points; each restart begins at `(c, ..., c)`.
    pub restarts: Vec<f64>,
    /// Stop when the best value improved by less than this (relative) ...
    pub rel_tolerance: f64,
    /// ... over this many consecutive iterations.
    pub patience: usize,
    /// Initial simplex edge in logit units.
    pub initial_step: f64,
}

impl Default for OptimizerSettings {
    fn default() -> Self {
        Self { max_iterations: 200, restarts: vec![0.25, 0.5, 0.75], rel_tolerance: 1e-3, patience: 5, initial_step: 1.0 }
    }
}

#[derive(Debug, Clone)]
pub struct DesignConfig {
    pub model: GaussianSsm,
    pub space: InputSpace,
    pub template: PolicyTemplate,
    /// Horizon `N`.
    pub horizon: usize,
    /// Prior samples `M` per bound trajectory.
    pub samples: usize,
    /// Input paths `M_u` per objective evaluation.
    pub input_paths: usize,
    pub criterion: BoundCriterion,
    pub seed: u64,
    pub optimizer: OptimizerSettings,
    /// Worker threads; `None` uses the global rayon pool.
    pub threads: Option<usize>,
}

impl DesignConfig {
    pub fn validate(&self) -> Result<()> {
        let k = self.space.memory();
        if self.horizon < k + 1 {
            return Err(Error::Parameter(format!("horizon {} is shorter than memory + 1 = {}", self.horizon, k + 1)));
        }
        if self.samples < 2 {
            return Err(Error::Parameter("M must be at least 2".into()));
        }
        if self.input_paths < 1 {
            return Err(Error::Parameter("M_u must be at least 1".into()));
        }
        if self.space.dim() != self.model.dims().input {
            return Err(Error::Dimension("input grid dimension differs from the model input".into()));
        }
        if self.threads == Some(0) {
            return Err(Error::Parameter("threads must be positive".into()));
        }
        Ok(())
    }

    fn install<T: Send>(&self, f: impl FnOnce() -> T + Send) -> Result<T> {
        match self.threads {
            None => Ok(f()),
            Some(n) => {
                let pool = rayon::ThreadPoolBuilder::new()
                    .num_threads(n)
                    .build()
                    .map_err(|e| Error::Parameter(format!("thread pool: {e}")))?;
                Ok(pool.install(f))
            }
        }
    }
}

/// Objective value with the per-path detail behind it.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectiveEvaluation {
    pub value: f64,
    /// `Σ_t Φ(L_t)` for each input path.
    pub path_sums: Vec<f64>,
    /// Mean `Φ(L_t)` over input paths, `t = 1..=N`.
    pub mean_trace: Vec<f64>,
}

impl ObjectiveEvaluation {
    /// Monte-Carlo standard error of `value` across input paths.
    pub fn standard_error(&self) -> f64 {
        let n = self.path_sums.len();
        if n < 2 {
            return f64::NAN;
        }
        let var = self.path_sums.iter().map(|s| (s - self.value).powi(2)).sum::<f64>() / (n - 1) as f64;
        (var / n as f64).sqrt()
    }
}

/// Input path `i` for `policy`, drawn from the frozen uniforms of replicate `i`.
pub fn input_path(policy: &MarkovInputPolicy, horizon: usize, seed: u64, i: usize) -> InputSequence {
    let draws = horizon - policy.space().memory();
    let mut rng = NoiseKey::new(seed, i as u64).stream(StreamKind::InputPath, 0);
    let uniforms: Vec<f64> = (0..draws).map(|_| rng.gen()).collect();
    policy.sample_with(&uniforms)
}

/// `Σ_t Φ(L_t)` trace for one fixed input sequence using noise replicate `i`.
pub fn path_trace(config: &DesignConfig, inputs: &InputSequence, i: usize) -> Result<Vec<f64>> {
    let key = NoiseKey::new(config.seed, i as u64);
    bound_trajectory(&config.model, inputs, config.samples, config.criterion, key)
        .map(|b| b.steps.iter().map(|s| s.phi).collect())
        .map_err(|e| Error::PathFailure { seed: config.seed, replicate: i as u64, source: Box::new(e) })
}

pub fn evaluate_policy(config: &DesignConfig, policy: &MarkovInputPolicy) -> Result<ObjectiveEvaluation> {
    config.validate()?;
    let traces = config.install(|| {
        (0..config.input_paths)
            .into_par_iter()
            .map(|i| path_trace(config, &input_path(policy, config.horizon, config.seed, i), i))
            .collect::<Result<Vec<_>>>()
    })??;
    let m = traces.len() as f64;
    let path_sums: Vec<f64> = traces.iter().map(|t| t.iter().sum()).collect();
    let value = path_sums.iter().sum::<f64>() / m;
    let mean_trace = (0..config.horizon).map(|t| traces.iter().map(|tr| tr[t]).sum::<f64>() / m).collect();
    Ok(ObjectiveEvaluation { value, path_sums, mean_trace })
}

pub fn evaluate_objective_detailed(config: &DesignConfig, phi: &[f64]) -> Result<ObjectiveEvaluation> {
    let policy = policy_from_template(config.template, &config.space, phi)?;
    evaluate_policy(config, &policy)
}

pub fn evaluate_objective(config: &DesignConfig, phi: &[f64]) -> Result<f64> {
    evaluate_objective_detailed(config, phi).map(|e| e.value)
}

#[derive(Debug, Clone, PartialEq)]
pub struct HistoryEntry {
    pub iteration: usize,
    /// Best parameters found so far.
    pub phi: Vec<f64>,
    /// Best objective found so far.
    pub objective: f64,
}

#[derive(Debug, Clone)]
pub struct DesignResult {
    pub template: PolicyTemplate,
    pub phi: Vec<f64>,
    pub policy: MarkovInputPolicy,
    /// Objective re-evaluated at `phi`.
    pub objective: f64,
    pub standard_error: f64,
    pub mean_trace: Vec<f64>,
    pub history: Vec<HistoryEntry>,
    pub converged: bool,
    pub evaluations: usize,
    pub wall_time: Duration,
}

fn logit(p: f64) -> f64 {
    let p = p.clamp(1e-12, 1.0 - 1e-12);
    (p / (1.0 - p)).ln()
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

struct CachedObjective<'a> {
    config: &'a DesignConfig,
    cache: HashMap<Vec<u64>, f64>,
}

impl CachedObjective<'_> {
    fn eval(&mut self, z: &[f64]) -> Result<(Vec<f64>, f64)> {
        let phi: Vec<f64> = z.iter().map(|v| sigmoid(*v)).collect();
        let key: Vec<u64> = phi.iter().map(|v| v.to_bits()).collect();
        if let Some(v) = self.cache.get(&key) {
            return Ok((phi, *v));
        }
        let v = evaluate_objective(self.config, &phi)?;
        self.cache.insert(key, v);
        Ok((phi, v))
    }
}

struct Vertex {
    z: Vec<f64>,
    phi: Vec<f64>,
    value: f64,
}

/// Minimize the objective over the template parameters.
///
/// Nelder-Mead runs in logit coordinates from each configured start point.
/// A restart stops when its best value improves by less than the relative
/// tolerance over `patience` consecutive iterations, or at the iteration cap
/// (then the result is marked non-converged). Templates without parameters are
/// evaluated once.
pub fn optimize(config: &DesignConfig) -> Result<DesignResult> {
    config.validate()?;
    let started = Instant::now();
    let d = config.template.arity(&config.space);
    let opt = &config.optimizer;
    let mut f = CachedObjective { config, cache: HashMap::new() };
    let mut history = Vec::new();
    let mut best: Option<(Vec<f64>, f64)> = None;
    let mut converged = true;
    let mut iteration = 0;

    let mut record = |best: &mut Option<(Vec<f64>, f64)>, phi: &[f64], value: f64, iteration: usize| {
        if best.as_ref().map_or(true, |b| value < b.1) {
            *best = Some((phi.to_vec(), value));
        }
        let b = best.as_ref().expect("just set");
        history.push(HistoryEntry { iteration, phi: b.0.clone(), objective: b.1 });
    };

    if d == 0 {
        let (phi, v) = f.eval(&[])?;
        record(&mut best, &phi, v, 0);
    } else {
        let starts = if opt.restarts.is_empty() { vec![0.5] } else { opt.restarts.clone() };
        for start in starts {
            let z0 = vec![logit(start); d];
            let mut simplex = Vec::with_capacity(d + 1);
            for i in 0..=d {
                let mut z = z0.clone();
                if i > 0 {
                    z[i - 1] += opt.initial_step;
                }
                let (phi, value) = f.eval(&z)?;
                simplex.push(Vertex { z, phi, value });
            }
            let mut bests = Vec::new();
            let mut restart_converged = false;
            for _ in 0..opt.max_iterations {
                nelder_mead_step(&mut f, &mut simplex)?;
                iteration += 1;
                let top = &simplex[0];
                record(&mut best, &top.phi, top.value, iteration);
                bests.push(top.value);
                let n = bests.len();
                if n > opt.patience {
                    let old = bests[n - 1 - opt.patience];
                    let new = bests[n - 1];
                    if (old - new) <= opt.rel_tolerance * old.abs().max(f64::MIN_POSITIVE) {
                        restart_converged = true;
                        break;
                    }
                }
            }
            if !restart_converged {
                log::warn!("{} restart from {start} hit the iteration cap", config.template);
                converged = false;
            }
        }
    }

    let (phi, _) = best.expect("at least one evaluation");
    let policy = policy_from_template(config.template, &config.space, &phi)?;
    let eval = evaluate_policy(config, &policy)?;
    Ok(DesignResult {
        template: config.template,
        phi,
        policy,
        objective: eval.value,
        standard_error: eval.standard_error(),
        mean_trace: eval.mean_trace,
        history,
        converged,
        evaluations: f.cache.len(),
        wall_time: started.elapsed(),
    })
}

fn nelder_mead_step(f: &mut CachedObjective<'_>, simplex: &mut Vec<Vertex>) -> Result<()> {
    simplex.sort_by(|a, b| a.value.total_cmp(&b.value));
    let n = simplex.len() - 1;
    let d = simplex[0].z.len();
    let centroid: Vec<f64> = (0..d).map(|i| simplex[..n].iter().map(|v| v.z[i]).sum::<f64>() / n as f64).collect();
    let worst = &simplex[n];
    let along = |c: f64| -> Vec<f64> { (0..d).map(|i| centroid[i] + c * (worst.z[i] - centroid[i])).collect() };

    let zr = along(-1.0);
    let (pr, fr) = f.eval(&zr)?;
    let vertex = |z, phi, value| Vertex { z, phi, value };
    if fr < simplex[0].value {
        let ze = along(-2.0);
        let (pe, fe) = f.eval(&ze)?;
        simplex[n] = if fe < fr { vertex(ze, pe, fe) } else { vertex(zr, pr, fr) };
    } else if fr < simplex[n - 1].value {
        simplex[n] = vertex(zr, pr, fr);
    } else {
        let outside = fr < simplex[n].value;
        let zc = along(if outside { -0.5 } else { 0.5 });
        let (pc, fc) = f.eval(&zc)?;
        if fc < fr.min(simplex[n].value) {
            simplex[n] = vertex(zc, pc, fc);
        } else {
            let z_best = simplex[0].z.clone();
            for v in simplex.iter_mut().skip(1) {
                let z: Vec<f64> = (0..d).map(|i| z_best[i] + 0.5 * (v.z[i] - z_best[i])).collect();
                let (phi, value) = f.eval(&z)?;
                *v = vertex(z, phi, value);
            }
        }
    }
    simplex.sort_by(|a, b| a.value.total_cmp(&b.value));
    Ok(())
}

/// Optimize each template and order the outcomes by objective, best first.
pub fn rank_cases(config: &DesignConfig, templates: &[PolicyTemplate]) -> Result<Vec<DesignResult>> {
    let mut out = templates
        .iter()
        .map(|t| optimize(&DesignConfig { template: *t, ..config.clone() }))
        .collect::<Result<Vec<_>>>()?;
    out.sort_by(|a, b| a.objective.total_cmp(&b.objective));
    Ok(out)
}
