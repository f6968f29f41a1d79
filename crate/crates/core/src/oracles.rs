//! Brute-force and closed-form cross-checks.
//!
//! None of these reuse the information recursion or the analytic Jacobians:
//! the Kalman routines recover the linear system matrices by differencing the
//! model maps, the Hessian oracle differentiates the log-density numerically,
//! and the enumeration oracle sums over every input sequence exactly.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::designer::{evaluate_objective, path_trace, DesignConfig};
use crate::error::{Error, Result};
use crate::pcrlb::HBlocks;
use crate::policy::{policy_from_template, MarkovInputPolicy};
use crate::ssm::{GaussianSsm, InputSequence, SampleEnsemble};

/// Largest number of input sequences the enumeration oracle will visit.
pub const ENUMERATION_CAP: usize = 4096;

/// Gaussian belief over the extended state `(x, theta)`.
#[derive(Debug, Clone, PartialEq)]
pub struct KalmanState {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

/// `map(z) = m z + c` for one input value.
struct Affine {
    m: DMatrix<f64>,
    c: DVector<f64>,
}

fn split(z: &DVector<f64>, n: usize) -> (Vec<f64>, Vec<f64>) {
    (z.rows(0, n).iter().copied().collect(), z.rows(n, z.len() - n).iter().copied().collect())
}

/// Recover an affine map by differencing at unit vectors, then confirm it at
/// probe points. Fails if the map is not affine in `(x, theta)`.
fn affine_map(model: &GaussianSsm, u: &[f64], observation: bool) -> Result<Affine> {
    let d = model.dims();
    let s = d.extended();
    let rows = if observation { d.output } else { d.state };
    let eval = |z: &DVector<f64>| -> DVector<f64> {
        let (x, th) = split(z, d.state);
        let v = if observation { model.observe(&x, &th, u) } else { model.drift(&x, &th, u) };
        DVector::from_vec(v)
    };
    let c = eval(&DVector::zeros(s));
    let mut m = DMatrix::zeros(rows, s);
    for j in 0..s {
        let col = eval(&DVector::from_fn(s, |i, _| if i == j { 1.0 } else { 0.0 })) - &c;
        m.set_column(j, &col);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0x11ea7);
    for _ in 0..8 {
        let z = DVector::from_fn(s, |_, _| rng.gen_range(-3.0..3.0));
        let want = &m * &z + &c;
        let got = eval(&z);
        let scale = 1.0 + want.amax();
        if (got - want).amax() > 1e-9 * scale {
            let which = if observation { "observation" } else { "drift" };
            return Err(Error::OracleMisuse(format!("{which} map of `{}` is not linear in (x, theta)", model.name())));
        }
    }
    Ok(Affine { m, c })
}

fn extended_transition(model: &GaussianSsm, u: &[f64]) -> Result<Affine> {
    let d = model.dims();
    let s = d.extended();
    let f = affine_map(model, u, false)?;
    let mut m = DMatrix::identity(s, s);
    m.view_mut((0, 0), (d.state, s)).copy_from(&f.m);
    let mut c = DVector::zeros(s);
    c.rows_mut(0, d.state).copy_from(&f.c);
    Ok(Affine { m, c })
}

fn predict(model: &GaussianSsm, st: &KalmanState, a: &Affine) -> KalmanState {
    let n = model.dims().state;
    let mut cov = &a.m * &st.cov * a.m.transpose();
    let mut q = cov.view_mut((0, 0), (n, n));
    q += model.process_cov();
    KalmanState { mean: &a.m * &st.mean + &a.c, cov: (&cov + cov.transpose()) * 0.5 }
}

fn correct(model: &GaussianSsm, st: &KalmanState, h: &Affine, y: Option<&[f64]>) -> Result<KalmanState> {
    let r = model.measurement_cov();
    let s = &h.m * &st.cov * h.m.transpose() + r;
    let s_inv = s.try_inverse().ok_or(Error::Singular { what: "innovation covariance" })?;
    let k = &st.cov * h.m.transpose() * s_inv;
    let ikh = DMatrix::identity(st.cov.nrows(), st.cov.nrows()) - &k * &h.m;
    let cov = &ikh * &st.cov * ikh.transpose() + &k * r * k.transpose();
    let mean = match y {
        Some(y) => &st.mean + &k * (DVector::from_column_slice(y) - (&h.m * &st.mean + &h.c)),
        None => st.mean.clone(),
    };
    Ok(KalmanState { mean, cov: (&cov + cov.transpose()) * 0.5 })
}

fn run_kalman(model: &GaussianSsm, inputs: &InputSequence, ys: Option<&[Vec<f64>]>) -> Result<Vec<KalmanState>> {
    if inputs.is_empty() || inputs.dim() != model.dims().input {
        return Err(Error::Dimension("input sequence does not match the model".into()));
    }
    let mut st = KalmanState { mean: model.prior_mean().clone(), cov: model.prior_cov().clone() };
    let mut out = vec![st.clone()];
    for t in 0..inputs.len() {
        let a = extended_transition(model, inputs.get(t))?;
        let h = affine_map(model, inputs.next_clamped(t), true)?;
        st = correct(model, &predict(model, &st, &a), &h, ys.map(|y| y[t].as_slice()))?;
        out.push(st.clone());
    }
    Ok(out)
}

/// Posterior covariance of `(x_t, theta)` for `t = 1..=N` on a linear model.
/// The covariance does not depend on the measured values.
pub fn kalman_extended(model: &GaussianSsm, inputs: &InputSequence) -> Result<Vec<DMatrix<f64>>> {
    Ok(run_kalman(model, inputs, None)?.into_iter().skip(1).map(|s| s.cov).collect())
}

/// Kalman filter on the extended state. Element `t` is the belief after
/// `y_1..y_t`; element 0 is the prior.
pub fn kalman_filter(model: &GaussianSsm, inputs: &InputSequence, measurements: &[Vec<f64>]) -> Result<Vec<KalmanState>> {
    if measurements.len() != inputs.len() || measurements.iter().any(|y| y.len() != model.dims().output) {
        return Err(Error::Dimension("need one measurement of the model output size per input".into()));
    }
    run_kalman(model, inputs, Some(measurements))
}

/// Every grid-index sequence of length `n` over `r` symbols, lexicographic.
pub fn all_index_sequences(r: usize, n: usize) -> Result<Vec<Vec<usize>>> {
    let count = (0..n)
        .try_fold(1usize, |acc, _| acc.checked_mul(r))
        .filter(|c| *c <= ENUMERATION_CAP)
        .ok_or_else(|| Error::Capacity(format!("{r}^{n} input sequences exceed {ENUMERATION_CAP}")))?;
    Ok((0..count)
        .map(|mut c| {
            let mut v = vec![0; n];
            for slot in v.iter_mut().rev() {
                *slot = c % r;
                c /= r;
            }
            v
        })
        .collect())
}

fn sequence_probability(policy: &MarkovInputPolicy, idx: &[usize]) -> f64 {
    let sp = policy.space();
    let k = sp.memory();
    let mut state = sp.state_of(&idx[..=k]);
    let mut p = policy.gamma()[state];
    for &g in &idx[k + 1..] {
        let next = sp.successor(state, g);
        p *= policy.pi()[state][next];
        state = next;
    }
    p
}

/// Bound sums for every input sequence under every noise replicate
/// `0..config.input_paths`. Independent of the policy parameters, so one table
/// serves any number of enumeration queries.
#[derive(Debug, Clone)]
pub struct SequenceTable {
    pub sequences: Vec<Vec<usize>>,
    /// `sums[s][i]`: `Σ_t Φ(L_t)` for sequence `s` under replicate `i`.
    pub sums: Vec<Vec<f64>>,
}

impl SequenceTable {
    pub fn build(config: &DesignConfig) -> Result<Self> {
        config.validate()?;
        if config.horizon > 8 {
            return Err(Error::Capacity("enumeration is limited to horizons of at most 8".into()));
        }
        let sp = &config.space;
        let sequences = all_index_sequences(sp.grid_size(), config.horizon)?;
        let sums = sequences
            .iter()
            .map(|seq| {
                let values = seq.iter().flat_map(|&g| sp.point(g)).collect();
                let inputs = InputSequence::new(sp.dim(), values)?;
                (0..config.input_paths)
                    .into_par_iter()
                    .map(|i| path_trace(config, &inputs, i).map(|t| t.iter().sum()))
                    .collect::<Result<Vec<f64>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { sequences, sums })
    }

    /// `Σ_U P(U) · mean_i S(U, i)`. Zero-probability sequences contribute nothing.
    pub fn objective(&self, policy: &MarkovInputPolicy) -> f64 {
        self.sequences
            .iter()
            .zip(&self.sums)
            .map(|(seq, sums)| {
                let p = sequence_probability(policy, seq);
                if p == 0.0 {
                    0.0
                } else {
                    p * sums.iter().sum::<f64>() / sums.len() as f64
                }
            })
            .sum()
    }
}

/// Exact expectation of the objective over the input chain, conditional on
/// the frozen noise tables that the Monte-Carlo objective uses.
pub fn enumerate_objective(config: &DesignConfig, phi: &[f64]) -> Result<f64> {
    let policy = policy_from_template(config.template, &config.space, phi)?;
    Ok(SequenceTable::build(config)?.objective(&policy))
}

/// Grid-search result for templates with at most two parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct GridSearch {
    pub phi: Vec<f64>,
    pub objective: f64,
    pub points: Vec<(Vec<f64>, f64)>,
}

/// Evaluate the objective on `{0, 1/(n-1), ..., 1}^d` and keep the minimum.
pub fn grid_search(config: &DesignConfig, points_per_dim: usize) -> Result<GridSearch> {
    let d = config.template.arity(&config.space);
    if d > 2 {
        return Err(Error::OracleMisuse(format!("grid search supports at most 2 parameters, {} has {d}", config.template)));
    }
    if points_per_dim < 2 {
        return Err(Error::OracleMisuse("grid needs at least 2 points per parameter".into()));
    }
    let axis: Vec<f64> = (0..points_per_dim).map(|i| i as f64 / (points_per_dim - 1) as f64).collect();
    let grid = all_index_sequences(points_per_dim, d)?;
    let mut points = Vec::with_capacity(grid.len());
    for g in grid {
        let phi: Vec<f64> = g.iter().map(|&i| axis[i]).collect();
        let v = evaluate_objective(config, &phi)?;
        points.push((phi, v));
    }
    let (phi, objective) = points
        .iter()
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .cloned()
        .expect("grid is not empty");
    Ok(GridSearch { phi, objective, points })
}

/// `-log p(x_{t+1} | x_t, theta, u_t) - log p(y_{t+1} | x_{t+1}, theta, u_{t+1})`
/// up to constants, as a function of `v = (x_t, theta, x_{t+1})`.
fn neg_log_transition(model: &GaussianSsm, v: &[f64], y: &[f64], u: &[f64], u_next: &[f64]) -> f64 {
    let d = model.dims();
    let (n, q) = (d.state, d.param);
    let x = &v[..n];
    let th = &v[n..n + q];
    let xn = &v[n + q..];
    let f = model.drift(x, th, u);
    let g = model.observe(xn, th, u_next);
    let rx = DVector::from_iterator(n, xn.iter().zip(&f).map(|(a, b)| a - b));
    let ry = DVector::from_iterator(d.output, y.iter().zip(&g).map(|(a, b)| a - b));
    0.5 * ((model.process_whitener() * rx).norm_squared() + (model.measurement_whitener() * ry).norm_squared())
}

fn fd_hessian(f: &dyn Fn(&[f64]) -> f64, at: &[f64], step: f64) -> DMatrix<f64> {
    let s = at.len();
    let h: Vec<f64> = at.iter().map(|v| step * v.abs().max(1.0)).collect();
    let mut v = at.to_vec();
    let mut shifted = |i: usize, si: f64, j: usize, sj: f64| {
        v.copy_from_slice(at);
        v[i] += si * h[i];
        v[j] += sj * h[j];
        f(&v)
    };
    let mut out = DMatrix::zeros(s, s);
    for i in 0..s {
        for j in i..s {
            let val = (shifted(i, 1.0, j, 1.0) - shifted(i, 1.0, j, -1.0) - shifted(i, -1.0, j, 1.0)
                + shifted(i, -1.0, j, -1.0))
                / (4.0 * h[i] * h[j]);
            out[(i, j)] = val;
            out[(j, i)] = val;
        }
    }
    out
}

fn split_hessian(hs: &DMatrix<f64>, n: usize, q: usize) -> HBlocks {
    HBlocks {
        h11: hs.view((0, 0), (n, n)).into_owned(),
        h12: hs.view((0, n), (n, q)).into_owned(),
        h13: hs.view((0, n + q), (n, n)).into_owned(),
        h22: hs.view((n, n), (q, q)).into_owned(),
        h23: hs.view((n, n + q), (q, n)).into_owned(),
        h33: hs.view((n + q, n + q), (n, n)).into_owned(),
    }
}

/// Per-path finite-difference Hessians of the negative log transition density
/// at time `t` of `ensemble`, split into blocks.
///
/// Each Hessian is a Richardson extrapolation of central differences at
/// `step` and `step / 2` (steps scale with `max(1, |v_i|)`). An entry whose two
/// estimates disagree by more than `1e-3 (1 + |H|)` is reported as an error.
pub fn fd_h_block_samples(model: &GaussianSsm, ensemble: &SampleEnsemble, t: usize, step: f64) -> Result<Vec<HBlocks>> {
    if !(1e-7..=1e-3).contains(&step) {
        return Err(Error::OracleMisuse(format!("finite-difference step {step} outside [1e-7, 1e-3]")));
    }
    let d = model.dims();
    if t >= ensemble.horizon() || ensemble.is_empty() {
        return Err(Error::Dimension(format!("time {t} outside the ensemble")));
    }
    let u = ensemble.inputs.get(t);
    let u_next = ensemble.inputs.next_clamped(t);
    ensemble
        .paths
        .par_iter()
        .enumerate()
        .map(|(j, p)| {
            let mut at = p.states[t].clone();
            at.extend_from_slice(&p.theta);
            at.extend_from_slice(&p.states[t + 1]);
            let y = &p.measurements[t];
            let f = |v: &[f64]| neg_log_transition(model, v, y, u, u_next);
            if !f(&at).is_finite() {
                return Err(Error::NonFinite(format!("log-density of path {j} at time {t}")));
            }
            let coarse = fd_hessian(&f, &at, step);
            let fine = fd_hessian(&f, &at, step / 2.0);
            let extrapolated = (&fine * 4.0 - &coarse) / 3.0;
            if extrapolated.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("finite-difference Hessian of path {j}")));
            }
            let gap = coarse.zip_map(&fine, |a, b| (a - b).abs() / (1.0 + b.abs())).max();
            if gap > 1e-3 {
                return Err(Error::OracleMisuse(format!(
                    "finite-difference Hessian of path {j} depends on the step (relative gap {gap:e})"
                )));
            }
            Ok(split_hessian(&extrapolated, d.state, d.param))
        })
        .collect()
}

/// Sample average of [`fd_h_block_samples`].
pub fn fd_h_blocks(model: &GaussianSsm, ensemble: &SampleEnsemble, t: usize, step: f64) -> Result<HBlocks> {
    let samples = fd_h_block_samples(model, ensemble, t, step)?;
    let m = samples.len() as f64;
    let mut it = samples.into_iter();
    let first = it.next().expect("ensemble is not empty");
    let sum = it.fold(first, |mut acc, h| {
        acc.h11 += h.h11;
        acc.h12 += h.h12;
        acc.h13 += h.h13;
        acc.h22 += h.h22;
        acc.h23 += h.h23;
        acc.h33 += h.h33;
        acc
    });
    Ok(HBlocks {
        h11: sum.h11 / m,
        h12: sum.h12 / m,
        h13: sum.h13 / m,
        h22: sum.h22 / m,
        h23: sum.h23 / m,
        h33: sum.h33 / m,
    })
}
