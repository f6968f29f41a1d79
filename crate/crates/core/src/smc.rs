//! Particle filter for joint state and parameter estimation, and the MSE
//! experiment that checks designed inputs against the bound.
//!
//! Parameters are carried as particles with artificial dynamics: before each
//! propagation they are shrunk toward the weighted mean by a factor `a` and
//! jittered with covariance `(1 - a^2) V`, which keeps the first two moments
//! of the parameter cloud unchanged.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::designer::input_path;
use crate::error::{Error, Result};
use crate::noise::{NoiseKey, StreamKind};
use crate::policy::MarkovInputPolicy;
use crate::ssm::{simulate_with_streams, ExtendedState, GaussianSsm, InputSequence};

#[derive(Debug, Clone, PartialEq)]
pub struct SmcConfig {
    pub particles: usize,
    /// Resample when the effective sample size drops below this fraction.
    pub resample_threshold: f64,
    /// Kernel shrinkage factor `a`.
    pub shrinkage: f64,
    pub seed: u64,
}

impl Default for SmcConfig {
    fn default() -> Self {
        Self { particles: 1000, resample_threshold: 0.5, shrinkage: 0.98, seed: 0 }
    }
}

impl SmcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.particles < 100 {
            return Err(Error::Parameter(format!("need at least 100 particles, got {}", self.particles)));
        }
        if !(self.resample_threshold > 0.0 && self.resample_threshold <= 1.0) {
            return Err(Error::Parameter(format!("resampling threshold {} outside (0, 1]", self.resample_threshold)));
        }
        if !(self.shrinkage > 0.9 && self.shrinkage < 1.0) {
            return Err(Error::Parameter(format!("shrinkage {} outside (0.9, 1)", self.shrinkage)));
        }
        Ok(())
    }
}

/// Posterior summaries for `t = 0..=N` (index 0 is the prior cloud).
#[derive(Debug, Clone, PartialEq)]
pub struct SmcEstimate {
    pub theta_mean: Vec<DVector<f64>>,
    pub theta_cov: Vec<DMatrix<f64>>,
    pub state_mean: Vec<DVector<f64>>,
    pub resamples: usize,
}

fn weighted_moments(values: &[Vec<f64>], w: &[f64]) -> (DVector<f64>, DMatrix<f64>) {
    let dim = values[0].len();
    let mut mean = DVector::zeros(dim);
    for (v, wi) in values.iter().zip(w) {
        for (m, x) in mean.iter_mut().zip(v) {
            *m += wi * x;
        }
    }
    let mut cov = DMatrix::zeros(dim, dim);
    for (v, wi) in values.iter().zip(w) {
        let d = DVector::from_iterator(dim, v.iter().zip(mean.iter()).map(|(x, m)| x - m));
        cov.ger(*wi, &d, &d, 1.0);
    }
    (mean, cov)
}

fn jitter_factor(cov: &DMatrix<f64>) -> DMatrix<f64> {
    let n = cov.nrows();
    let scale = cov.diagonal().amax().max(f64::MIN_POSITIVE);
    let mut eps = 0.0;
    loop {
        if let Some(c) = (cov + DMatrix::identity(n, n) * eps).cholesky() {
            return c.unpack();
        }
        eps = if eps == 0.0 { 1e-12 * scale } else { eps * 10.0 };
    }
}

/// Systematic resampling: one uniform, `n` evenly spaced pointers.
fn systematic_resample(w: &[f64], u: f64) -> Vec<usize> {
    let n = w.len();
    let mut out = Vec::with_capacity(n);
    let mut cum = w[0];
    let mut i = 0;
    for k in 0..n {
        let p = (u + k as f64) / n as f64;
        while p > cum && i + 1 < n {
            i += 1;
            cum += w[i];
        }
        out.push(i);
    }
    out
}

fn log_likelihood(model: &GaussianSsm, y: &[f64], pred: &[f64]) -> f64 {
    let r = DVector::from_iterator(y.len(), y.iter().zip(pred).map(|(a, b)| a - b));
    -0.5 * (model.measurement_whitener() * r).norm_squared()
}

/// Joint state/parameter filter over `y_1..y_N` generated under `inputs`.
pub fn smc_joint_estimate(
    model: &GaussianSsm,
    inputs: &InputSequence,
    measurements: &[Vec<f64>],
    config: &SmcConfig,
) -> Result<SmcEstimate> {
    smc_with_rng(model, inputs, measurements, config, &mut NoiseKey::new(config.seed, 0).stream(StreamKind::Filter, 0))
}

fn smc_with_rng<R: Rng>(
    model: &GaussianSsm,
    inputs: &InputSequence,
    measurements: &[Vec<f64>],
    config: &SmcConfig,
    rng: &mut R,
) -> Result<SmcEstimate> {
    config.validate()?;
    let d = model.dims();
    if inputs.dim() != d.input || measurements.len() != inputs.len() || measurements.iter().any(|y| y.len() != d.output) {
        return Err(Error::Dimension("inputs and measurements must have matching lengths and model dimensions".into()));
    }
    let np = config.particles;
    let a = config.shrinkage;
    let h = (1.0 - a * a).sqrt();
    let (mut xs, mut ths): (Vec<Vec<f64>>, Vec<Vec<f64>>) = (0..np)
        .map(|_| {
            let ExtendedState { x, theta } = model.draw_prior(rng);
            (x, theta)
        })
        .unzip();
    let mut w = vec![1.0 / np as f64; np];
    let mut out = SmcEstimate { theta_mean: Vec::new(), theta_cov: Vec::new(), state_mean: Vec::new(), resamples: 0 };
    let record = |out: &mut SmcEstimate, xs: &[Vec<f64>], ths: &[Vec<f64>], w: &[f64]| {
        let (tm, tc) = weighted_moments(ths, w);
        out.theta_mean.push(tm);
        out.theta_cov.push(tc);
        out.state_mean.push(weighted_moments(xs, w).0);
    };
    record(&mut out, &xs, &ths, &w);

    let mut logw = vec![0.0; np];
    let mut next = vec![0.0; d.state];
    let mut pred = vec![0.0; d.output];
    let mut noise = vec![0.0; d.state];
    for t in 0..inputs.len() {
        let (mean, cov) = weighted_moments(&ths, &w);
        let l = jitter_factor(&cov) * h;
        for th in ths.iter_mut() {
            let z = DVector::from_iterator(d.param, (0..d.param).map(|_| rng.sample::<f64, _>(StandardNormal)));
            let jit = &l * z;
            for (k, v) in th.iter_mut().enumerate() {
                *v = a * *v + (1.0 - a) * mean[k] + jit[k];
            }
        }
        for i in 0..np {
            model.dynamics().drift(&xs[i], &ths[i], inputs.get(t), &mut next);
            model.add_process_noise(rng, &mut next, &mut noise);
            model.dynamics().observe(&next, &ths[i], inputs.next_clamped(t), &mut pred);
            xs[i].copy_from_slice(&next);
            let ll = log_likelihood(model, &measurements[t], &pred);
            logw[i] = w[i].ln() + if ll.is_finite() { ll } else { f64::NEG_INFINITY };
        }
        let max = logw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !(max >= 1e-300f64.ln()) {
            return Err(Error::FilterDegeneracy { time: t + 1 });
        }
        let total: f64 = logw.iter().map(|l| (l - max).exp()).sum();
        for (wi, l) in w.iter_mut().zip(&logw) {
            *wi = (l - max).exp() / total;
        }
        record(&mut out, &xs, &ths, &w);
        let ess = 1.0 / w.iter().map(|v| v * v).sum::<f64>();
        if ess < config.resample_threshold * np as f64 {
            let idx = systematic_resample(&w, rng.gen());
            xs = idx.iter().map(|&i| xs[i].clone()).collect();
            ths = idx.iter().map(|&i| ths[i].clone()).collect();
            w.fill(1.0 / np as f64);
            out.resamples += 1;
        }
    }
    Ok(out)
}

/// Averaged estimation error against the bound.
#[derive(Debug, Clone, PartialEq)]
pub struct ValidationReport {
    /// `tr` of the across-run mean of `(θ_{t|t} - θ*)(θ_{t|t} - θ*)ᵀ`, `t = 1..=N`.
    pub trace_mse: Vec<f64>,
    pub trace_bound: Vec<f64>,
    pub sum_trace_mse: f64,
    /// Time points where the achieved MSE trace is below the bound.
    pub violations: usize,
    /// Runs that completed.
    pub runs: usize,
    /// Runs dropped after filter degeneracy or divergence.
    pub failed_runs: usize,
}

impl ValidationReport {
    pub fn dominance_fraction(&self) -> f64 {
        1.0 - self.violations as f64 / self.trace_mse.len().max(1) as f64
    }

    /// CSV with columns `t,trace_mse,trace_bound`.
    pub fn write_csv<W: std::io::Write>(&self, w: &mut W, metadata: &str) -> std::io::Result<()> {
        writeln!(w, "# {metadata}")?;
        writeln!(w, "t,trace_mse,trace_bound")?;
        for (t, (m, b)) in self.trace_mse.iter().zip(&self.trace_bound).enumerate() {
            writeln!(w, "{},{m:.17e},{b:.17e}", t + 1)?;
        }
        Ok(())
    }
}

/// Run `runs` independent identification experiments at `theta_star`.
///
/// Run `r` draws its input path from `policy` exactly as the objective does
/// for replicate `r` of `smc.seed`, draws `x_0` from the prior marginal, and
/// uses its own truth and filter streams.
pub fn mse_experiment(
    model: &GaussianSsm,
    theta_star: &[f64],
    policy: &MarkovInputPolicy,
    runs: usize,
    horizon: usize,
    smc: &SmcConfig,
    bound_trace: &[f64],
) -> Result<ValidationReport> {
    smc.validate()?;
    let d = model.dims();
    if runs < 2 {
        return Err(Error::Parameter("need at least 2 validation runs".into()));
    }
    if theta_star.len() != d.param {
        return Err(Error::Dimension("true parameter has the wrong length".into()));
    }
    if bound_trace.len() != horizon {
        return Err(Error::Dimension(format!("bound trace has {} points, horizon is {horizon}", bound_trace.len())));
    }
    if horizon < policy.space().memory() + 1 {
        return Err(Error::Parameter("horizon shorter than the policy window".into()));
    }
    let outcomes: Vec<Result<Vec<f64>>> = (0..runs)
        .into_par_iter()
        .map(|r| {
            let key = NoiseKey::new(smc.seed, r as u64);
            let inputs = input_path(policy, horizon, smc.seed, r);
            let x0 = model.draw_prior(&mut key.stream(StreamKind::TruthPrior, 0)).x;
            let z0 = ExtendedState { x: x0, theta: theta_star.to_vec() };
            let truth = simulate_with_streams(
                model,
                &inputs,
                &z0,
                &mut key.stream(StreamKind::TruthProcess, 0),
                &mut key.stream(StreamKind::TruthMeasurement, 0),
                r,
            )?;
            let est = smc_with_rng(model, &inputs, &truth.measurements, smc, &mut key.stream(StreamKind::Filter, 0))?;
            Ok(est.theta_mean[1..]
                .iter()
                .map(|m| m.iter().zip(theta_star).map(|(a, b)| (a - b).powi(2)).sum())
                .collect())
        })
        .collect();
    let mut sums = vec![0.0; horizon];
    let mut ok = 0;
    let mut failed = 0;
    for (r, o) in outcomes.into_iter().enumerate() {
        match o {
            Ok(se) => {
                ok += 1;
                for (s, v) in sums.iter_mut().zip(se) {
                    *s += v;
                }
            }
            Err(e @ (Error::FilterDegeneracy { .. } | Error::SimulationDivergence { .. })) => {
                log::warn!("validation run {r} dropped: {e}");
                failed += 1;
            }
            Err(e) => return Err(e),
        }
    }
    if ok < 2 {
        return Err(Error::NonFinite(format!("only {ok} validation runs completed")));
    }
    let trace_mse: Vec<f64> = sums.iter().map(|s| s / ok as f64).collect();
    let violations = trace_mse.iter().zip(bound_trace).filter(|(m, b)| m < b).count();
    Ok(ValidationReport {
        sum_trace_mse: trace_mse.iter().sum(),
        trace_mse,
        trace_bound: bound_trace.to_vec(),
        violations,
        runs: ok,
        failed_runs: failed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracles::kalman_filter;
    use crate::policy::{build_input_space, policy_from_template, PolicyTemplate};
    use crate::ssm::{make_benchmark_model, make_bias_model};

    #[test]
    fn config_validation() {
        assert!(SmcConfig::default().validate().is_ok());
        assert!(SmcConfig { particles: 99, ..Default::default() }.validate().is_err());
        assert!(SmcConfig { resample_threshold: 0.0, ..Default::default() }.validate().is_err());
        assert!(SmcConfig { shrinkage: 0.9, ..Default::default() }.validate().is_err());
        assert!(SmcConfig { shrinkage: 1.0, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn systematic_resampling_counts() {
        let idx = systematic_resample(&[0.5, 0.0, 0.25, 0.25], 0.3);
        assert_eq!(idx, vec![0, 0, 2, 3]);
        let idx = systematic_resample(&[0.0, 1.0], 0.99);
        assert_eq!(idx, vec![1, 1]);
    }

    #[test]
    fn prior_cloud_at_time_zero() {
        let m = make_benchmark_model();
        let u = InputSequence::scalar(vec![0.8]);
        let cfg = SmcConfig { seed: 9, ..Default::default() };
        let est = smc_joint_estimate(&m, &u, &[vec![0.5]], &cfg).unwrap();
        let sd = 0.1;
        for (got, want) in est.theta_mean[0].iter().zip([0.7, 0.6, 0.5, 0.4]) {
            assert!((got - want).abs() < 4.0 * sd / (1000f64).sqrt());
        }
        assert_eq!(est.theta_mean.len(), 2);
    }

    #[test]
    fn known_parameter_matches_kalman_means() {
        let m = make_bias_model()
            .with_prior(DVector::zeros(2), DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 1e-12])))
            .unwrap();
        let n = 30;
        let u = InputSequence::scalar((0..n).map(|t| if t % 4 < 2 { 0.8 } else { -0.8 }).collect());
        let key = NoiseKey::new(2, 0);
        let z0 = ExtendedState { x: vec![0.3], theta: vec![0.0] };
        let truth = simulate_with_streams(
            &m,
            &u,
            &z0,
            &mut key.stream(StreamKind::TruthProcess, 0),
            &mut key.stream(StreamKind::TruthMeasurement, 0),
            0,
        )
        .unwrap();
        let kal = kalman_filter(&m, &u, &truth.measurements).unwrap();
        let np = 2000;
        let est = smc_joint_estimate(&m, &u, &truth.measurements, &SmcConfig { particles: np, seed: 3, ..Default::default() }).unwrap();
        let mut sq = 0.0;
        for t in 1..=n {
            let sd = kal[t].cov[(0, 0)].sqrt();
            sq += ((est.state_mean[t][0] - kal[t].mean[0]) / sd).powi(2);
        }
        let rms = (sq / n as f64).sqrt();
        assert!(rms < 5.0 / (np as f64).sqrt(), "{rms}");
    }

    #[test]
    fn parameter_posterior_tightens_on_the_bias_model() {
        let m = make_bias_model();
        let n = 40;
        let u = InputSequence::scalar((0..n).map(|t| if t % 2 == 0 { 0.8 } else { -0.8 }).collect());
        let key = NoiseKey::new(6, 0);
        let z0 = ExtendedState { x: vec![0.0], theta: vec![0.5] };
        let truth = simulate_with_streams(&m, &u, &z0, &mut key.stream(StreamKind::TruthProcess, 0), &mut key.stream(StreamKind::TruthMeasurement, 0), 0).unwrap();
        let est = smc_joint_estimate(&m, &u, &truth.measurements, &SmcConfig { particles: 10_000, seed: 3, ..Default::default() }).unwrap();
        let var: Vec<f64> = est.theta_cov.iter().map(|c| c[(0, 0)]).collect();
        for w in var.windows(2) {
            assert!(w[1] <= 1.05 * w[0], "{} -> {}", w[0], w[1]);
        }
        let kal = kalman_filter(&m, &u, &truth.measurements).unwrap();
        let ratio = var[n] / kal[n].cov[(1, 1)];
        assert!((0.5..2.0).contains(&ratio), "{ratio}");
    }

    #[test]
    fn experiment_bookkeeping() {
        let m = make_benchmark_model();
        let space = build_input_space(&[-0.8], &[0.8], 2, 0).unwrap();
        let p = policy_from_template(PolicyTemplate::Case4, &space, &[]).unwrap();
        let smc = SmcConfig { particles: 100, seed: 4, ..Default::default() };
        let theta = [0.8, 0.7, 0.6, 0.5];
        let r = mse_experiment(&m, &theta, &p, 4, 10, &smc, &[0.0; 10]).unwrap();
        assert_eq!(r.runs + r.failed_runs, 4);
        assert_eq!(r.trace_mse.len(), 10);
        assert_eq!(r.violations, 0);
        assert!(r.trace_mse.iter().all(|v| *v >= 0.0));
        assert_eq!(r, mse_experiment(&m, &theta, &p, 4, 10, &smc, &[0.0; 10]).unwrap());
        assert!(mse_experiment(&m, &theta, &p, 1, 10, &smc, &[0.0; 10]).is_err());
        assert!(mse_experiment(&m, &theta, &p, 4, 10, &smc, &[0.0; 9]).is_err());
        let mut out = Vec::new();
        r.write_csv(&mut out, "seed=4").unwrap();
        let text = String::from_utf8(out).unwrap();
        assert!(text.starts_with("# seed=4\nt,trace_mse,trace_bound\n1,"));
    }
}
