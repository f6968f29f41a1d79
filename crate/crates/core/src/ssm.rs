//! Additive-Gaussian nonlinear state-space models.
//!
//! A model is
//!
//! ```text
//! x[t+1] = f(x[t], theta, u[t]) + v[t],   v ~ N(0, Q)
//! y[t]   = g(x[t], theta, u[t]) + w[t],   w ~ N(0, R)
//! (x[0], theta) ~ N(prior_mean, prior_cov)
//! ```
//!
//! with static parameters `theta`. The maps and their analytic Jacobians are
//! supplied through [`Dynamics`]; [`GaussianSsm`] adds the noise and prior
//! covariances and caches their factorizations.
//!
//! Time convention used throughout the crate: `inputs[t]` drives the
//! transition `x[t] -> x[t+1]`, and the measurement `y[t+1]` is taken with
//! `inputs[t+1]`, clamped to the last input at the end of the horizon.

use std::collections::BTreeMap;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::noise::{NoiseKey, StreamKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dims {
    pub state: usize,
    pub param: usize,
    pub input: usize,
    pub output: usize,
}

impl Dims {
    pub fn extended(&self) -> usize {
        self.state + self.param
    }
}

/// Drift and observation maps with analytic Jacobians.
///
/// Jacobians are written row-major: `out[i * cols + j] = d map_i / d arg_j`.
/// Implementations must be pure; they are called concurrently.
pub trait Dynamics: Send + Sync {
    fn dims(&self) -> Dims;
    fn drift(&self, x: &[f64], theta: &[f64], u: &[f64], out: &mut [f64]);
    fn observe(&self, x: &[f64], theta: &[f64], u: &[f64], out: &mut [f64]);
    fn drift_jac_x(&self, x: &[f64], theta: &[f64], u: &[f64], out: &mut [f64]);
    fn drift_jac_theta(&self, x: &[f64], theta: &[f64], u: &[f64], out: &mut [f64]);
    fn obs_jac_x(&self, x: &[f64], theta: &[f64], u: &[f64], out: &mut [f64]);
    fn obs_jac_theta(&self, x: &[f64], theta: &[f64], u: &[f64], out: &mut [f64]);
}

/// The univariate non-stationary benchmark
/// `x' = a x + x / (b + x^2) + u + v`, `y = c x + d x^2 + w`, `theta = [a, b, c, d]`.
#[derive(Debug, Clone, Copy, Default)]
pub struct Benchmark;

impl Dynamics for Benchmark {
    fn dims(&self) -> Dims {
        Dims { state: 1, param: 4, input: 1, output: 1 }
    }

    fn drift(&self, x: &[f64], th: &[f64], u: &[f64], out: &mut [f64]) {
        let x = x[0];
        out[0] = th[0] * x + x / (th[1] + x * x) + u[0];
    }

    fn observe(&self, x: &[f64], th: &[f64], _u: &[f64], out: &mut [f64]) {
        let x = x[0];
        out[0] = th[2] * x + th[3] * x * x;
    }

    fn drift_jac_x(&self, x: &[f64], th: &[f64], _u: &[f64], out: &mut [f64]) {
        let x2 = x[0] * x[0];
        let den = th[1] + x2;
        out[0] = th[0] + (th[1] - x2) / (den * den);
    }

    fn drift_jac_theta(&self, x: &[f64], th: &[f64], _u: &[f64], out: &mut [f64]) {
        let x = x[0];
        let den = th[1] + x * x;
        out[0] = x;
        out[1] = -x / (den * den);
        out[2] = 0.0;
        out[3] = 0.0;
    }

    fn obs_jac_x(&self, x: &[f64], th: &[f64], _u: &[f64], out: &mut [f64]) {
        out[0] = th[2] + 2.0 * th[3] * x[0];
    }

    fn obs_jac_theta(&self, x: &[f64], _th: &[f64], _u: &[f64], out: &mut [f64]) {
        out[0] = 0.0;
        out[1] = 0.0;
        out[2] = x[0];
        out[3] = x[0] * x[0];
    }
}

/// Fully linear model `x' = x + theta + u + v`, `y = x + w`. Its extended
/// system is linear-Gaussian, so a Kalman filter gives its exact information.
#[derive(Debug, Clone, Copy, Default)]
pub struct BiasOracle;

impl Dynamics for BiasOracle {
    fn dims(&self) -> Dims {
        Dims { state: 1, param: 1, input: 1, output: 1 }
    }

    fn drift(&self, x: &[f64], th: &[f64], u: &[f64], out: &mut [f64]) {
        out[0] = x[0] + th[0] + u[0];
    }

    fn observe(&self, x: &[f64], _th: &[f64], _u: &[f64], out: &mut [f64]) {
        out[0] = x[0];
    }

    fn drift_jac_x(&self, _x: &[f64], _th: &[f64], _u: &[f64], out: &mut [f64]) {
        out[0] = 1.0;
    }

    fn drift_jac_theta(&self, _x: &[f64], _th: &[f64], _u: &[f64], out: &mut [f64]) {
        out[0] = 1.0;
    }

    fn obs_jac_x(&self, _x: &[f64], _th: &[f64], _u: &[f64], out: &mut [f64]) {
        out[0] = 1.0;
    }

    fn obs_jac_theta(&self, _x: &[f64], _th: &[f64], _u: &[f64], out: &mut [f64]) {
        out[0] = 0.0;
    }
}

/// A point of the extended state `z = (x, theta)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ExtendedState {
    pub x: Vec<f64>,
    pub theta: Vec<f64>,
}

impl ExtendedState {
    pub fn concat(&self) -> Vec<f64> {
        self.x.iter().chain(&self.theta).copied().collect()
    }
}

/// A sequence of `p`-dimensional inputs stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct InputSequence {
    dim: usize,
    values: Vec<f64>,
}

impl InputSequence {
    pub fn new(dim: usize, values: Vec<f64>) -> Result<Self> {
        if dim == 0 || values.len() % dim != 0 {
            return Err(Error::Dimension(format!(
                "{} input values do not split into rows of {dim}",
                values.len()
            )));
        }
        Ok(Self { dim, values })
    }

    /// Scalar inputs.
    pub fn scalar(values: Vec<f64>) -> Self {
        Self { dim: 1, values }
    }

    pub fn constant(dim_value: &[f64], len: usize) -> Self {
        let values = (0..len).flat_map(|_| dim_value.iter().copied()).collect();
        Self { dim: dim_value.len(), values }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.values.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, t: usize) -> &[f64] {
        &self.values[t * self.dim..(t + 1) * self.dim]
    }

    /// Input used with the measurement taken after transition `t`.
    pub fn next_clamped(&self, t: usize) -> &[f64] {
        self.get((t + 1).min(self.len() - 1))
    }

    pub fn iter(&self) -> impl Iterator<Item = &[f64]> {
        self.values.chunks_exact(self.dim)
    }
}

/// Additive-Gaussian state-space model with cached noise factorizations.
#[derive(Clone)]
pub struct GaussianSsm {
    name: String,
    dynamics: Arc<dyn Dynamics>,
    dims: Dims,
    process_cov: DMatrix<f64>,
    measurement_cov: DMatrix<f64>,
    prior_mean: DVector<f64>,
    prior_cov: DMatrix<f64>,
    process_chol: DMatrix<f64>,
    measurement_chol: DMatrix<f64>,
    prior_chol: DMatrix<f64>,
    process_whitener: DMatrix<f64>,
    measurement_whitener: DMatrix<f64>,
    reference_theta: Option<DVector<f64>>,
}

impl std::fmt::Debug for GaussianSsm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("GaussianSsm")
            .field("name", &self.name)
            .field("dims", &self.dims)
            .field("process_cov", &self.process_cov)
            .field("measurement_cov", &self.measurement_cov)
            .field("prior_mean", &self.prior_mean)
            .field("prior_cov", &self.prior_cov)
            .finish()
    }
}

fn lower_cholesky(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    if !m.is_square() {
        return Err(Error::ModelDefinition(format!("{what} is not square")));
    }
    if (m - m.transpose()).amax() > 1e-12 * m.amax().max(1.0) {
        return Err(Error::ModelDefinition(format!("{what} is not symmetric")));
    }
    m.clone()
        .cholesky()
        .map(|c| c.unpack())
        .ok_or_else(|| Error::ModelDefinition(format!("{what} is not positive definite")))
}

fn invert_lower(l: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let n = l.nrows();
    l.solve_lower_triangular(&DMatrix::identity(n, n))
        .ok_or_else(|| Error::ModelDefinition(format!("{what} factor is singular")))
}

impl GaussianSsm {
    pub fn new(
        name: impl Into<String>,
        dynamics: Arc<dyn Dynamics>,
        process_cov: DMatrix<f64>,
        measurement_cov: DMatrix<f64>,
        prior_mean: DVector<f64>,
        prior_cov: DMatrix<f64>,
    ) -> Result<Self> {
        let dims = dynamics.dims();
        if dims.state == 0 || dims.param == 0 || dims.input == 0 || dims.output == 0 {
            return Err(Error::ModelDefinition("all dimensions must be positive".into()));
        }
        let expect = |m: &DMatrix<f64>, k: usize, what: &str| {
            if m.nrows() != k || m.ncols() != k {
                Err(Error::ModelDefinition(format!(
                    "{what} is {}x{}, expected {k}x{k}",
                    m.nrows(),
                    m.ncols()
                )))
            } else {
                Ok(())
            }
        };
        expect(&process_cov, dims.state, "process covariance")?;
        expect(&measurement_cov, dims.output, "measurement covariance")?;
        expect(&prior_cov, dims.extended(), "prior covariance")?;
        if prior_mean.len() != dims.extended() {
            return Err(Error::ModelDefinition(format!(
                "prior mean has length {}, expected {}",
                prior_mean.len(),
                dims.extended()
            )));
        }
        let process_chol = lower_cholesky(&process_cov, "process covariance")?;
        let measurement_chol = lower_cholesky(&measurement_cov, "measurement covariance")?;
        let prior_chol = lower_cholesky(&prior_cov, "prior covariance")?;
        let process_whitener = invert_lower(&process_chol, "process covariance")?;
        let measurement_whitener = invert_lower(&measurement_chol, "measurement covariance")?;
        Ok(Self {
            name: name.into(),
            dynamics,
            dims,
            process_cov,
            measurement_cov,
            prior_mean,
            prior_cov,
            process_chol,
            measurement_chol,
            prior_chol,
            process_whitener,
            measurement_whitener,
            reference_theta: None,
        })
    }

    /// Same maps, new noise covariances.
    pub fn with_noise(&self, process_cov: DMatrix<f64>, measurement_cov: DMatrix<f64>) -> Result<Self> {
        let mut m = Self::new(
            self.name.clone(),
            self.dynamics.clone(),
            process_cov,
            measurement_cov,
            self.prior_mean.clone(),
            self.prior_cov.clone(),
        )?;
        m.reference_theta = self.reference_theta.clone();
        Ok(m)
    }

    /// Same maps, new prior.
    pub fn with_prior(&self, prior_mean: DVector<f64>, prior_cov: DMatrix<f64>) -> Result<Self> {
        let mut m = Self::new(
            self.name.clone(),
            self.dynamics.clone(),
            self.process_cov.clone(),
            self.measurement_cov.clone(),
            prior_mean,
            prior_cov,
        )?;
        m.reference_theta = self.reference_theta.clone();
        Ok(m)
    }

    /// Attach a parameter vector used as simulation ground truth by default.
    pub fn with_reference_theta(mut self, theta: DVector<f64>) -> Result<Self> {
        if theta.len() != self.dims.param {
            return Err(Error::Dimension("reference theta length".into()));
        }
        self.reference_theta = Some(theta);
        Ok(self)
    }

    pub fn name(&self) -> &str {
        &self.name
    }
    pub fn dims(&self) -> Dims {
        self.dims
    }
    pub fn dynamics(&self) -> &dyn Dynamics {
        self.dynamics.as_ref()
    }
    pub fn process_cov(&self) -> &DMatrix<f64> {
        &self.process_cov
    }
    pub fn measurement_cov(&self) -> &DMatrix<f64> {
        &self.measurement_cov
    }
    pub fn prior_mean(&self) -> &DVector<f64> {
        &self.prior_mean
    }
    pub fn prior_cov(&self) -> &DMatrix<f64> {
        &self.prior_cov
    }
    /// Lower Cholesky factor of Q.
    pub fn process_chol(&self) -> &DMatrix<f64> {
        &self.process_chol
    }
    pub fn measurement_chol(&self) -> &DMatrix<f64> {
        &self.measurement_chol
    }
    /// `L_Q^{-1}`, so that `Q^{-1} = W^T W`.
    pub fn process_whitener(&self) -> &DMatrix<f64> {
        &self.process_whitener
    }
    pub fn measurement_whitener(&self) -> &DMatrix<f64> {
        &self.measurement_whitener
    }

    /// Ground-truth parameters: the attached reference, else the prior mean.
    pub fn reference_theta(&self) -> DVector<f64> {
        self.reference_theta
            .clone()
            .unwrap_or_else(|| self.prior_mean.rows(self.dims.state, self.dims.param).into_owned())
    }

    pub fn drift(&self, x: &[f64], theta: &[f64], u: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dims.state];
        self.dynamics.drift(x, theta, u, &mut out);
        out
    }

    pub fn observe(&self, x: &[f64], theta: &[f64], u: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dims.output];
        self.dynamics.observe(x, theta, u, &mut out);
        out
    }

    fn check_input(&self, inputs: &InputSequence) -> Result<()> {
        if inputs.is_empty() {
            return Err(Error::Dimension("input sequence is empty".into()));
        }
        if inputs.dim() != self.dims.input {
            return Err(Error::Dimension(format!(
                "inputs have dimension {}, model expects {}",
                inputs.dim(),
                self.dims.input
            )));
        }
        Ok(())
    }

    /// Draw one prior point using `rng`.
    pub fn draw_prior<R: Rng + ?Sized>(&self, rng: &mut R) -> ExtendedState {
        let s = self.dims.extended();
        let z = DVector::from_iterator(s, (0..s).map(|_| rng.sample::<f64, _>(StandardNormal)));
        let v = &self.prior_mean + &self.prior_chol * z;
        ExtendedState {
            x: v.rows(0, self.dims.state).iter().copied().collect(),
            theta: v.rows(self.dims.state, self.dims.param).iter().copied().collect(),
        }
    }

    /// Add `Q^{1/2} z` (z standard normal from `rng`) to `x`.
    pub(crate) fn add_process_noise<R: Rng + ?Sized>(&self, rng: &mut R, x: &mut [f64], scratch: &mut [f64]) {
        add_correlated_noise(&self.process_chol, rng, x, scratch);
    }

    pub(crate) fn add_measurement_noise<R: Rng + ?Sized>(&self, rng: &mut R, y: &mut [f64], scratch: &mut [f64]) {
        add_correlated_noise(&self.measurement_chol, rng, y, scratch);
    }
}

fn add_correlated_noise<R: Rng + ?Sized>(chol: &DMatrix<f64>, rng: &mut R, out: &mut [f64], z: &mut [f64]) {
    let k = out.len();
    for zi in z.iter_mut().take(k) {
        *zi = rng.sample(StandardNormal);
    }
    for i in 0..k {
        let mut acc = 0.0;
        for j in 0..=i {
            acc += chol[(i, j)] * z[j];
        }
        out[i] += acc;
    }
}

/// The benchmark model with `Q = R = 0.01` and prior
/// `N([1, 0.7, 0.6, 0.5, 0.4], 0.01 I)`; ground truth `theta = [0.8, 0.7, 0.6, 0.5]`.
pub fn make_benchmark_model() -> GaussianSsm {
    GaussianSsm::new(
        "benchmark",
        Arc::new(Benchmark),
        DMatrix::from_element(1, 1, 0.01),
        DMatrix::from_element(1, 1, 0.01),
        DVector::from_vec(vec![1.0, 0.7, 0.6, 0.5, 0.4]),
        DMatrix::from_diagonal_element(5, 5, 0.01),
    )
    .and_then(|m| m.with_reference_theta(DVector::from_vec(vec![0.8, 0.7, 0.6, 0.5])))
    .expect("benchmark model is well formed")
}

/// The linear bias model with `Q = R = 0.01` and prior `N(0, I)`.
pub fn make_bias_model() -> GaussianSsm {
    GaussianSsm::new(
        "bias",
        Arc::new(BiasOracle),
        DMatrix::from_element(1, 1, 0.01),
        DMatrix::from_element(1, 1, 0.01),
        DVector::zeros(2),
        DMatrix::identity(2, 2),
    )
    .and_then(|m| m.with_reference_theta(DVector::from_vec(vec![0.5])))
    .expect("bias model is well formed")
}

type ModelFactory = Arc<dyn Fn() -> GaussianSsm + Send + Sync>;

/// Name -> model factory. Built-ins are `benchmark` and `bias`.
#[derive(Clone)]
pub struct ModelRegistry {
    factories: BTreeMap<String, ModelFactory>,
}

impl Default for ModelRegistry {
    fn default() -> Self {
        Self::with_builtins()
    }
}

impl ModelRegistry {
    pub fn with_builtins() -> Self {
        let mut r = Self { factories: BTreeMap::new() };
        r.register("benchmark", make_benchmark_model);
        r.register("bias", make_bias_model);
        r
    }

    pub fn register<F>(&mut self, name: &str, factory: F)
    where
        F: Fn() -> GaussianSsm + Send + Sync + 'static,
    {
        self.factories.insert(name.to_string(), Arc::new(factory));
    }

    pub fn get(&self, name: &str) -> Option<GaussianSsm> {
        self.factories.get(name).map(|f| f())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.factories.keys().map(String::as_str)
    }
}

/// `count` i.i.d. prior draws.
pub fn sample_prior<R: Rng + ?Sized>(model: &GaussianSsm, count: usize, rng: &mut R) -> Result<Vec<ExtendedState>> {
    if count == 0 {
        return Err(Error::Dimension("sample count must be at least 1".into()));
    }
    Ok((0..count).map(|_| model.draw_prior(rng)).collect())
}

/// One simulated trajectory with its (fixed) parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplePath {
    pub theta: Vec<f64>,
    /// `x[0..=N]`
    pub states: Vec<Vec<f64>>,
    /// `y[1..=N]`, stored at index `t - 1`.
    pub measurements: Vec<Vec<f64>>,
}

/// `M` paths sharing one input sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleEnsemble {
    pub inputs: InputSequence,
    pub paths: Vec<SamplePath>,
}

impl SampleEnsemble {
    pub fn len(&self) -> usize {
        self.paths.len()
    }
    pub fn is_empty(&self) -> bool {
        self.paths.is_empty()
    }
    pub fn horizon(&self) -> usize {
        self.inputs.len()
    }
}

/// Advance every initial state through the dynamics under `inputs`.
///
/// Path `j` draws its process noise from stream `j` of [`StreamKind::Process`]
/// and its measurement noise from stream `j` of [`StreamKind::Measurement`]
/// under `key`, so the noise does not depend on the inputs or on the thread
/// schedule.
pub fn simulate_paths(
    model: &GaussianSsm,
    inputs: &InputSequence,
    initial: &[ExtendedState],
    key: NoiseKey,
) -> Result<SampleEnsemble> {
    use rayon::prelude::*;
    model.check_input(inputs)?;
    let d = model.dims();
    for (j, z) in initial.iter().enumerate() {
        if z.x.len() != d.state || z.theta.len() != d.param {
            return Err(Error::Dimension(format!("initial state {j} has wrong dimensions")));
        }
    }
    let paths = initial
        .par_iter()
        .enumerate()
        .map(|(j, z0)| simulate_one(model, inputs, z0, key, j))
        .collect::<Result<Vec<_>>>()?;
    Ok(SampleEnsemble { inputs: inputs.clone(), paths })
}

pub(crate) fn simulate_one(
    model: &GaussianSsm,
    inputs: &InputSequence,
    z0: &ExtendedState,
    key: NoiseKey,
    j: usize,
) -> Result<SamplePath> {
    simulate_with_streams(
        model,
        inputs,
        z0,
        &mut key.stream(StreamKind::Process, j as u64),
        &mut key.stream(StreamKind::Measurement, j as u64),
        j,
    )
}

pub(crate) fn simulate_with_streams<R: Rng>(
    model: &GaussianSsm,
    inputs: &InputSequence,
    z0: &ExtendedState,
    process_rng: &mut R,
    measurement_rng: &mut R,
    path: usize,
) -> Result<SamplePath> {
    let d = model.dims();
    let n_steps = inputs.len();
    let mut scratch = vec![0.0; d.state.max(d.output)];
    let mut states = Vec::with_capacity(n_steps + 1);
    let mut measurements = Vec::with_capacity(n_steps);
    states.push(z0.x.clone());
    for t in 0..n_steps {
        let mut next = vec![0.0; d.state];
        model.dynamics.drift(&states[t], &z0.theta, inputs.get(t), &mut next);
        model.add_process_noise(process_rng, &mut next, &mut scratch);
        let mut y = vec![0.0; d.output];
        model.dynamics.observe(&next, &z0.theta, inputs.next_clamped(t), &mut y);
        model.add_measurement_noise(measurement_rng, &mut y, &mut scratch);
        if next.iter().chain(&y).any(|v| !v.is_finite()) {
            return Err(Error::SimulationDivergence { path, time: t + 1 });
        }
        states.push(next);
        measurements.push(y);
    }
    Ok(SamplePath { theta: z0.theta.clone(), states, measurements })
}

/// Worst relative mismatch between an analytic Jacobian and central differences.
#[derive(Debug, Clone, PartialEq)]
pub struct JacobianMismatch {
    pub which: &'static str,
    pub row: usize,
    pub col: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Compare every analytic Jacobian of `dynamics` with central differences at
/// `(x, theta, u)`. Returns the first entry whose error exceeds
/// `rel_tol * max(1, |numeric|)`.
pub fn check_jacobians(
    dynamics: &dyn Dynamics,
    x: &[f64],
    theta: &[f64],
    u: &[f64],
    step: f64,
    rel_tol: f64,
) -> std::result::Result<(), JacobianMismatch> {
    let d = dynamics.dims();
    type Map<'a> = &'a dyn Fn(&[f64], &[f64], &mut [f64]);
    let drift = |x: &[f64], th: &[f64], out: &mut [f64]| dynamics.drift(x, th, u, out);
    let obs = |x: &[f64], th: &[f64], out: &mut [f64]| dynamics.observe(x, th, u, out);
    let cases: [(&'static str, Map, usize, bool); 4] = [
        ("drift_jac_x", &drift, d.state, true),
        ("drift_jac_theta", &drift, d.state, false),
        ("obs_jac_x", &obs, d.output, true),
        ("obs_jac_theta", &obs, d.output, false),
    ];
    for (which, map, rows, wrt_x) in cases {
        let cols = if wrt_x { d.state } else { d.param };
        let mut analytic = vec![0.0; rows * cols];
        match which {
            "drift_jac_x" => dynamics.drift_jac_x(x, theta, u, &mut analytic),
            "drift_jac_theta" => dynamics.drift_jac_theta(x, theta, u, &mut analytic),
            "obs_jac_x" => dynamics.obs_jac_x(x, theta, u, &mut analytic),
            _ => dynamics.obs_jac_theta(x, theta, u, &mut analytic),
        }
        let mut plus = vec![0.0; rows];
        let mut minus = vec![0.0; rows];
        for c in 0..cols {
            let (mut xp, mut tp) = (x.to_vec(), theta.to_vec());
            let (mut xm, mut tm) = (x.to_vec(), theta.to_vec());
            if wrt_x {
                xp[c] += step;
                xm[c] -= step;
            } else {
                tp[c] += step;
                tm[c] -= step;
            }
            map(&xp, &tp, &mut plus);
            map(&xm, &tm, &mut minus);
            for r in 0..rows {
                let numeric = (plus[r] - minus[r]) / (2.0 * step);
                let a = analytic[r * cols + c];
                if (a - numeric).abs() > rel_tol * numeric.abs().max(1.0) {
                    return Err(JacobianMismatch { which, row: r, col: c, analytic: a, numeric });
                }
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn benchmark_settings() {
        let m = make_benchmark_model();
        assert_eq!(m.process_cov()[(0, 0)], 0.01);
        assert_eq!(m.measurement_cov()[(0, 0)], 0.01);
        assert_eq!(m.prior_mean().as_slice(), &[1.0, 0.7, 0.6, 0.5, 0.4]);
        assert_eq!(m.prior_cov(), &DMatrix::from_diagonal_element(5, 5, 0.01));
        assert_eq!(m.reference_theta().as_slice(), &[0.8, 0.7, 0.6, 0.5]);
    }

    #[test]
    fn benchmark_drift_at_zero_state_is_the_input() {
        let m = make_benchmark_model();
        assert_eq!(m.drift(&[0.0], &[0.3, 0.9, -0.2, 1.1], &[0.3]), vec![0.3]);
    }

    #[test]
    fn benchmark_state_jacobian_value() {
        // central-difference oracle, frozen
        let f = |x: f64| 0.8 * x + x / (0.7 + x * x);
        let h = 1e-6;
        let fd = (f(1.0 + h) - f(1.0 - h)) / (2.0 * h);
        assert!((fd - 0.696_193_771_626_297_6).abs() < 1e-8);
        let mut out = [0.0];
        Benchmark.drift_jac_x(&[1.0], &[0.8, 0.7, 0.6, 0.5], &[0.4], &mut out);
        assert!((out[0] - 0.696_193_771_626_297_6).abs() < 1e-12);
    }

    #[test]
    fn bias_model_maps() {
        let b = BiasOracle;
        let mut out = [0.0];
        b.drift_jac_theta(&[3.0], &[0.1], &[0.2], &mut out);
        assert_eq!(out, [1.0]);
        b.obs_jac_theta(&[3.0], &[0.1], &[0.2], &mut out);
        assert_eq!(out, [0.0]);
        b.drift(&[2.0], &[0.5], &[-0.8], &mut out);
        assert!((out[0] - 1.7).abs() < 1e-15);
    }

    #[test]
    fn rejects_indefinite_covariances() {
        let m = make_bias_model();
        let err = m.with_prior(DVector::zeros(2), DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]));
        assert!(matches!(err, Err(Error::ModelDefinition(_))));
        let err = m.with_noise(DMatrix::from_element(1, 1, -1.0), DMatrix::from_element(1, 1, 1.0));
        assert!(matches!(err, Err(Error::ModelDefinition(_))));
        let err = m.with_noise(DMatrix::from_element(2, 2, 1.0), DMatrix::from_element(1, 1, 1.0));
        assert!(matches!(err, Err(Error::ModelDefinition(_))));
    }

    #[test]
    fn jacobians_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for model in [make_benchmark_model(), make_bias_model()] {
            let d = model.dims();
            for _ in 0..100 {
                let x: Vec<f64> = (0..d.state).map(|_| rng.gen_range(-2.0..2.0)).collect();
                let mut theta: Vec<f64> = (0..d.param).map(|_| rng.gen_range(0.2..1.2)).collect();
                if model.name() == "benchmark" {
                    theta[1] = rng.gen_range(0.3..1.5);
                }
                let u: Vec<f64> = (0..d.input).map(|_| rng.gen_range(-1.0..1.0)).collect();
                check_jacobians(model.dynamics(), &x, &theta, &u, 1e-6, 1e-5)
                    .unwrap_or_else(|e| panic!("{}: {e:?}", model.name()));
            }
        }
    }

    #[test]
    fn jacobian_checker_catches_errors() {
        struct Wrong;
        impl Dynamics for Wrong {
            fn dims(&self) -> Dims {
                BiasOracle.dims()
            }
            fn drift(&self, x: &[f64], th: &[f64], u: &[f64], out: &mut [f64]) {
                out[0] = 2.0 * x[0] + th[0] + u[0];
            }
            fn observe(&self, x: &[f64], th: &[f64], u: &[f64], out: &mut [f64]) {
                BiasOracle.observe(x, th, u, out)
            }
            fn drift_jac_x(&self, x: &[f64], th: &[f64], u: &[f64], out: &mut [f64]) {
                BiasOracle.drift_jac_x(x, th, u, out)
            }
            fn drift_jac_theta(&self, x: &[f64], th: &[f64], u: &[f64], out: &mut [f64]) {
                BiasOracle.drift_jac_theta(x, th, u, out)
            }
            fn obs_jac_x(&self, x: &[f64], th: &[f64], u: &[f64], out: &mut [f64]) {
                BiasOracle.obs_jac_x(x, th, u, out)
            }
            fn obs_jac_theta(&self, x: &[f64], th: &[f64], u: &[f64], out: &mut [f64]) {
                BiasOracle.obs_jac_theta(x, th, u, out)
            }
        }
        let e = check_jacobians(&Wrong, &[0.3], &[0.1], &[0.0], 1e-6, 1e-5).unwrap_err();
        assert_eq!(e.which, "drift_jac_x");
    }

    #[test]
    fn prior_sampling() {
        let m = make_benchmark_model();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 100_000;
        let draws = sample_prior(&m, n, &mut rng).unwrap();
        let sd = 0.1;
        for (k, want) in [1.0, 0.7, 0.6, 0.5, 0.4].iter().enumerate() {
            let mean = draws.iter().map(|z| z.concat()[k]).sum::<f64>() / n as f64;
            assert!((mean - want).abs() < 4.0 * sd / (n as f64).sqrt(), "coord {k}: {mean}");
        }
        let again = sample_prior(&m, 3, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(again, sample_prior(&m, 3, &mut ChaCha8Rng::seed_from_u64(5)).unwrap());
        assert!(sample_prior(&m, 0, &mut rng).is_err());
    }

    #[test]
    fn degenerate_prior_reproduces_mean() {
        let m = make_benchmark_model();
        let m = m
            .with_prior(m.prior_mean().clone(), DMatrix::from_diagonal_element(5, 5, 1e-12))
            .unwrap();
        let draws = sample_prior(&m, 50, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        for z in draws {
            for (a, b) in z.concat().iter().zip(m.prior_mean().iter()) {
                assert!((a - b).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn noiseless_bias_recursion() {
        let eps = DMatrix::from_element(1, 1, 1e-18);
        let m = make_bias_model().with_noise(eps.clone(), eps).unwrap();
        let z0 = ExtendedState { x: vec![0.0], theta: vec![0.5] };
        let ens = simulate_paths(&m, &InputSequence::scalar(vec![0.1, 0.1]), &[z0], NoiseKey::new(3, 0)).unwrap();
        let p = &ens.paths[0];
        assert!((p.states[1][0] - 0.6).abs() < 1e-8);
        assert!((p.states[2][0] - 1.2).abs() < 1e-8);
        assert!((p.measurements[0][0] - 0.6).abs() < 1e-8);
        assert!((p.measurements[1][0] - 1.2).abs() < 1e-8);
        assert_eq!(p.theta, vec![0.5]);
    }

    #[test]
    fn first_moment_and_noise_covariance() {
        let m = make_bias_model();
        let n = 100_000;
        let init: Vec<_> = (0..n).map(|_| ExtendedState { x: vec![0.0], theta: vec![0.5] }).collect();
        let ens = simulate_paths(&m, &InputSequence::scalar(vec![0.2, -0.4]), &init, NoiseKey::new(9, 0)).unwrap();
        let mean = ens.paths.iter().map(|p| p.states[1][0]).sum::<f64>() / n as f64;
        assert!((mean - 0.7).abs() < 4.0 * 0.01f64.sqrt() / (n as f64).sqrt());
        // residual variance vs Q: var of sample variance is 2 Q^2 / n
        let resid: Vec<f64> = ens
            .paths
            .iter()
            .map(|p| p.states[2][0] - (p.states[1][0] + 0.5 - 0.4))
            .collect();
        let var = resid.iter().map(|r| r * r).sum::<f64>() / n as f64;
        assert!((var - 0.01).abs() < 4.0 * 0.01 * (2.0 / n as f64).sqrt(), "{var}");
        assert!(ens.paths.iter().all(|p| p.theta == vec![0.5]));
    }

    #[test]
    fn ensemble_independent_of_thread_count() {
        let m = make_benchmark_model();
        let init = sample_prior(&m, 64, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let u = InputSequence::scalar(vec![0.8, -0.8, 0.8, 0.8]);
        let run = |threads| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| simulate_paths(&m, &u, &init, NoiseKey::new(1, 2)).unwrap())
        };
        assert_eq!(run(1), run(3));
    }

    #[test]
    fn divergence_is_reported() {
        let m = make_benchmark_model();
        let z0 = ExtendedState { x: vec![1e200], theta: vec![1e200, 0.7, 0.6, 0.5] };
        let err = simulate_paths(&m, &InputSequence::scalar(vec![0.0; 3]), &[z0], NoiseKey::new(0, 0)).unwrap_err();
        assert!(matches!(err, Error::SimulationDivergence { path: 0, time: 1 }));
    }

    #[test]
    fn registry_lookup() {
        let mut r = ModelRegistry::with_builtins();
        assert!(r.get("benchmark").is_some());
        assert!(r.get("nope").is_none());
        r.register("bias2", make_bias_model);
        assert_eq!(r.names().collect::<Vec<_>>(), vec!["benchmark", "bias", "bias2"]);
    }
}
