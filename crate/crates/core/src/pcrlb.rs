//! Monte-Carlo posterior Cramér–Rao bound for the parameter block.
//!
//! The posterior information matrix of the extended state `z = (x, theta)` is
//! propagated with the Tichavský-style recursion; for additive Gaussian noise
//! its six expectation blocks reduce to Gram products of the model Jacobians,
//! which are estimated by averaging over simulated prior paths. The bound on
//! the parameter error is the inverse Schur complement of the state block.

use std::io::Write;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::noise::{NoiseKey, StreamKind};
use crate::ssm::{Dims, ExtendedState, GaussianSsm, InputSequence, SampleEnsemble};

/// Posterior information matrix, kept in blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct Pim {
    pub jx: DMatrix<f64>,
    pub jxtheta: DMatrix<f64>,
    pub jtheta: DMatrix<f64>,
}

impl Pim {
    pub fn state_dim(&self) -> usize {
        self.jx.nrows()
    }

    pub fn param_dim(&self) -> usize {
        self.jtheta.nrows()
    }

    /// `[[Jx, Jxθ], [Jxθᵀ, Jθ]]`
    pub fn assemble(&self) -> DMatrix<f64> {
        let (n, q) = (self.state_dim(), self.param_dim());
        let mut j = DMatrix::zeros(n + q, n + q);
        j.view_mut((0, 0), (n, n)).copy_from(&self.jx);
        j.view_mut((0, n), (n, q)).copy_from(&self.jxtheta);
        j.view_mut((n, 0), (q, n)).copy_from(&self.jxtheta.transpose());
        j.view_mut((n, n), (q, q)).copy_from(&self.jtheta);
        j
    }

    /// Split an assembled `(n+q)x(n+q)` matrix at `n`.
    pub fn from_assembled(j: &DMatrix<f64>, n: usize) -> Result<Self> {
        if !j.is_square() || n == 0 || n >= j.nrows() {
            return Err(Error::Dimension(format!("cannot split {}x{} at {n}", j.nrows(), j.ncols())));
        }
        let q = j.nrows() - n;
        Ok(Self {
            jx: j.view((0, 0), (n, n)).into_owned(),
            jxtheta: j.view((0, n), (n, q)).into_owned(),
            jtheta: j.view((n, n), (q, q)).into_owned(),
        })
    }
}

/// The six expectation blocks driving one step of the recursion.
#[derive(Debug, Clone, PartialEq)]
pub struct HBlocks {
    pub h11: DMatrix<f64>,
    pub h12: DMatrix<f64>,
    pub h13: DMatrix<f64>,
    pub h22: DMatrix<f64>,
    pub h23: DMatrix<f64>,
    pub h33: DMatrix<f64>,
}

/// Scalarization of the bound matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum BoundCriterion {
    #[default]
    Trace,
    /// Natural log of the determinant. Applied to the mean bound matrix when
    /// averaging over input paths.
    LogDet,
}

impl BoundCriterion {
    pub fn apply(&self, l: &DMatrix<f64>) -> Result<f64> {
        match self {
            BoundCriterion::Trace => Ok(l.trace()),
            BoundCriterion::LogDet => {
                let chol = l.clone().cholesky().ok_or_else(|| Error::NotPositiveDefinite {
                    what: "bound matrix",
                    min_eigenvalue: min_eigenvalue(l),
                })?;
                Ok(2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>())
            }
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            BoundCriterion::Trace => "trace",
            BoundCriterion::LogDet => "logdet",
        }
    }
}

/// Bound at one time step.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundStep {
    pub t: usize,
    pub pim: Pim,
    pub l_theta: DMatrix<f64>,
    pub phi: f64,
}

/// Bounds for `t = 1..=N`.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundTrajectory {
    pub steps: Vec<BoundStep>,
}

impl BoundTrajectory {
    pub fn phi_sum(&self) -> f64 {
        self.steps.iter().map(|s| s.phi).sum()
    }

    /// CSV with columns `t,phi,l_1_1,...,l_q_q` (row-major bound entries).
    pub fn write_csv<W: Write>(&self, w: &mut W, metadata: &str) -> std::io::Result<()> {
        let q = self.steps.first().map(|s| s.l_theta.nrows()).unwrap_or(0);
        writeln!(w, "# {metadata}")?;
        write!(w, "t,phi")?;
        for i in 1..=q {
            for j in 1..=q {
                write!(w, ",l_{i}_{j}")?;
            }
        }
        writeln!(w)?;
        for s in &self.steps {
            write!(w, "{},{}", s.t, s.phi)?;
            for i in 0..q {
                for j in 0..q {
                    write!(w, ",{}", s.l_theta[(i, j)])?;
                }
            }
            writeln!(w)?;
        }
        Ok(())
    }
}

pub(crate) fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

pub(crate) fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    symmetrize(m).symmetric_eigenvalues().iter().copied().fold(f64::INFINITY, f64::min)
}

/// Cholesky succeeds, no pivot collapses to round-off relative to its
/// diagonal entry, and no diagonal entry is at round-off level relative to
/// `magnitudes`, the size of the terms it was computed from.
pub(crate) fn is_positive_definite(m: &DMatrix<f64>, magnitudes: &[f64]) -> bool {
    let diag = m.diagonal();
    if diag.iter().zip(magnitudes).any(|(d, s)| *d <= 64.0 * f64::EPSILON * s) {
        return false;
    }
    match m.clone().cholesky() {
        Some(c) => c
            .l_dirty()
            .diagonal()
            .iter()
            .zip(diag.iter())
            .all(|(l, d)| l * l > 64.0 * f64::EPSILON * d),
        None => false,
    }
}

/// Per-diagonal-entry sum of the absolute terms entering an update.
fn diagonal_magnitudes(j: &Pim, h: &HBlocks, a_inv_h13: &DMatrix<f64>, a_inv_b: &DMatrix<f64>) -> Vec<f64> {
    let b = &j.jxtheta + &h.h12;
    let x_corr = h.h13.transpose() * a_inv_h13;
    let t_corr = b.transpose() * a_inv_b;
    let n = h.h33.nrows();
    let q = h.h22.nrows();
    (0..n)
        .map(|i| h.h33[(i, i)].abs() + x_corr[(i, i)].abs())
        .chain((0..q).map(|i| j.jtheta[(i, i)].abs() + h.h22[(i, i)].abs() + t_corr[(i, i)].abs()))
        .collect()
}

/// Prior information: blocks of `prior_cov^{-1}`.
pub fn init_pim(model: &GaussianSsm) -> Result<Pim> {
    let n = model.dims().state;
    let inv = model
        .prior_cov()
        .clone()
        .cholesky()
        .ok_or(Error::Singular { what: "prior covariance" })?
        .inverse();
    Pim::from_assembled(&symmetrize(&inv), n)
}

/// Whitened Jacobian rows for one time step, stored column by column.
///
/// With `W_Q = L_Q^{-1}` and `W_R = L_R^{-1}`, each sample contributes the rows
/// of `A = W_Q [∂f/∂x | ∂f/∂θ]` and `B = W_R [∂g/∂θ | ∂g/∂x']`; the Grams
/// `Aᵀ A`, `Bᵀ B` are formed once in [`GramAccumulator::finish`]. The raw drift
/// Jacobians are summed for the linear cross terms.
#[derive(Debug, Clone)]
pub(crate) struct GramAccumulator {
    dims: Dims,
    count: usize,
    drift_cols: Vec<Vec<f64>>,
    obs_cols: Vec<Vec<f64>>,
    drift_jac_sum: Vec<f64>,
}

/// Per-sample scratch space for Jacobian evaluation.
pub(crate) struct JacobianScratch {
    fx: Vec<f64>,
    ftheta: Vec<f64>,
    gx: Vec<f64>,
    gtheta: Vec<f64>,
    wq: Vec<f64>,
    wr: Vec<f64>,
}

impl JacobianScratch {
    pub(crate) fn new(model: &GaussianSsm) -> Self {
        let d = model.dims();
        let row_major = |m: &DMatrix<f64>| {
            let mut v = Vec::with_capacity(m.len());
            for i in 0..m.nrows() {
                for j in 0..m.ncols() {
                    v.push(m[(i, j)]);
                }
            }
            v
        };
        Self {
            fx: vec![0.0; d.state * d.state],
            ftheta: vec![0.0; d.state * d.param],
            gx: vec![0.0; d.output * d.state],
            gtheta: vec![0.0; d.output * d.param],
            wq: row_major(model.process_whitener()),
            wr: row_major(model.measurement_whitener()),
        }
    }
}

/// Append the rows of `W (rows x rows, lower) * [left | right]` to `cols`.
fn whiten_rows(w: &[f64], rows: usize, left: &[f64], left_cols: usize, right: &[f64], right_cols: usize, cols: &mut [Vec<f64>]) {
    if rows == 1 {
        let w = w[0];
        let (cl, cr) = cols.split_at_mut(left_cols);
        for (col, v) in cl.iter_mut().zip(&left[..left_cols]) {
            col.push(w * v);
        }
        for (col, v) in cr.iter_mut().zip(&right[..right_cols]) {
            col.push(w * v);
        }
        return;
    }
    for i in 0..rows {
        let wi = &w[i * rows..i * rows + i + 1];
        for (c, col) in cols.iter_mut().enumerate() {
            let (src, width, c) = if c < left_cols { (left, left_cols, c) } else { (right, right_cols, c - left_cols) };
            let v: f64 = wi.iter().enumerate().map(|(k, wik)| wik * src[k * width + c]).sum();
            col.push(v);
        }
    }
}

/// Dot product with four independent partial sums (fixed order, vectorizable).
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    let tail: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

fn gram(cols: &[Vec<f64>], scale: f64) -> DMatrix<f64> {
    let s = cols.len();
    let mut g = DMatrix::zeros(s, s);
    for i in 0..s {
        for j in i..s {
            let v = dot(&cols[i], &cols[j]) * scale;
            g[(i, j)] = v;
            g[(j, i)] = v;
        }
    }
    g
}

impl GramAccumulator {
    pub(crate) fn new(dims: Dims) -> Self {
        Self::with_capacity(dims, 0)
    }

    pub(crate) fn with_capacity(dims: Dims, samples: usize) -> Self {
        let s = dims.extended();
        Self {
            dims,
            count: 0,
            drift_cols: (0..s).map(|_| Vec::with_capacity(samples * dims.state)).collect(),
            obs_cols: (0..s).map(|_| Vec::with_capacity(samples * dims.output)).collect(),
            drift_jac_sum: vec![0.0; dims.state * s],
        }
    }

    /// Add the drift-side terms evaluated at `(x_t, theta, u_t)`.
    pub(crate) fn add_drift(&mut self, model: &GaussianSsm, sc: &mut JacobianScratch, x: &[f64], theta: &[f64], u: &[f64]) {
        let d = self.dims;
        let dy = model.dynamics();
        dy.drift_jac_x(x, theta, u, &mut sc.fx);
        dy.drift_jac_theta(x, theta, u, &mut sc.ftheta);
        let s = d.extended();
        for (i, row) in self.drift_jac_sum.chunks_exact_mut(s).enumerate() {
            let (rx, rt) = row.split_at_mut(d.state);
            for (a, b) in rx.iter_mut().zip(&sc.fx[i * d.state..(i + 1) * d.state]) {
                *a += b;
            }
            for (a, b) in rt.iter_mut().zip(&sc.ftheta[i * d.param..(i + 1) * d.param]) {
                *a += b;
            }
        }
        whiten_rows(&sc.wq, d.state, &sc.fx, d.state, &sc.ftheta, d.param, &mut self.drift_cols);
        self.count += 1;
    }

    /// Add the measurement-side terms evaluated at `(x_{t+1}, theta, u_{t+1})`.
    pub(crate) fn add_observation(
        &mut self,
        model: &GaussianSsm,
        sc: &mut JacobianScratch,
        x_next: &[f64],
        theta: &[f64],
        u_next: &[f64],
    ) {
        let d = self.dims;
        let dy = model.dynamics();
        dy.obs_jac_x(x_next, theta, u_next, &mut sc.gx);
        dy.obs_jac_theta(x_next, theta, u_next, &mut sc.gtheta);
        whiten_rows(&sc.wr, d.output, &sc.gtheta, d.param, &sc.gx, d.state, &mut self.obs_cols);
    }

    pub(crate) fn finish(&self, model: &GaussianSsm) -> HBlocks {
        let d = self.dims;
        let (n, q, s) = (d.state, d.param, d.extended());
        let inv_m = 1.0 / self.count as f64;
        let dg = gram(&self.drift_cols, inv_m);
        let og = gram(&self.obs_cols, inv_m);
        let wq = model.process_whitener();
        let q_inv = wq.transpose() * wq;
        let mean_fx = DMatrix::from_fn(n, n, |i, j| self.drift_jac_sum[i * s + j] * inv_m);
        let mean_ft = DMatrix::from_fn(n, q, |i, j| self.drift_jac_sum[i * s + n + j] * inv_m);
        HBlocks {
            h11: dg.view((0, 0), (n, n)).into_owned(),
            h12: dg.view((0, n), (n, q)).into_owned(),
            h13: -(mean_fx.transpose() * &q_inv),
            h22: dg.view((n, n), (q, q)) + og.view((0, 0), (q, q)),
            h23: og.view((0, q), (q, n)) - mean_ft.transpose() * &q_inv,
            h33: &q_inv + og.view((q, q), (n, n)),
        }
    }
}

/// Sample averages of the Gaussian H-block integrands over the transition
/// `t -> t+1` of every path in `ensemble`.
pub fn estimate_h_blocks(model: &GaussianSsm, ensemble: &SampleEnsemble, t: usize) -> Result<HBlocks> {
    let d = model.dims();
    if ensemble.is_empty() {
        return Err(Error::Dimension("empty ensemble".into()));
    }
    if t >= ensemble.horizon() {
        return Err(Error::Dimension(format!("time {t} outside horizon {}", ensemble.horizon())));
    }
    if ensemble.inputs.dim() != d.input {
        return Err(Error::Dimension("input dimension".into()));
    }
    let u = ensemble.inputs.get(t);
    let u_next = ensemble.inputs.next_clamped(t);
    let mut acc = GramAccumulator::new(d);
    let mut sc = JacobianScratch::new(model);
    for (j, p) in ensemble.paths.iter().enumerate() {
        if p.theta.len() != d.param || p.states.len() <= t + 1 || p.states[t].len() != d.state {
            return Err(Error::Dimension(format!("path {j} does not match the model")));
        }
        acc.add_drift(model, &mut sc, &p.states[t], &p.theta, u);
        acc.add_observation(model, &mut sc, &p.states[t + 1], &p.theta, u_next);
    }
    Ok(acc.finish(model))
}

fn solve_spd(a: &DMatrix<f64>, what: &'static str) -> Result<nalgebra::Cholesky<f64, nalgebra::Dyn>> {
    let a = symmetrize(a);
    if let Some(c) = a.clone().cholesky() {
        return Ok(c);
    }
    let n = a.nrows();
    (a + DMatrix::identity(n, n) * 1e-9).cholesky().ok_or(Error::Singular { what })
}

/// One step of the information recursion.
pub fn update_pim(j: &Pim, h: &HBlocks) -> Result<Pim> {
    let a = &j.jx + &h.h11;
    let chol = solve_spd(&a, "Jx + H11")?;
    let b = &j.jxtheta + &h.h12;
    let a_inv_h13 = chol.solve(&h.h13);
    let a_inv_b = chol.solve(&b);
    let jx = symmetrize(&(&h.h33 - h.h13.transpose() * &a_inv_h13));
    let jxtheta = h.h23.transpose() - h.h13.transpose() * &a_inv_b;
    let jtheta = symmetrize(&(&j.jtheta + &h.h22 - b.transpose() * &a_inv_b));
    let next = Pim { jx, jxtheta, jtheta };
    let assembled = next.assemble();
    if assembled.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("information matrix".into()));
    }
    if !is_positive_definite(&assembled, &diagonal_magnitudes(j, h, &a_inv_h13, &a_inv_b)) {
        return Err(Error::NotPositiveDefinite {
            what: "posterior information matrix",
            min_eigenvalue: min_eigenvalue(&assembled),
        });
    }
    Ok(next)
}

/// `[Jθ - Jxθᵀ Jx⁻¹ Jxθ]⁻¹`, the lower-right block of the inverse PIM.
pub fn lower_bound_theta(j: &Pim) -> Result<DMatrix<f64>> {
    let jx = symmetrize(&j.jx);
    let chol = jx.cholesky().ok_or(Error::Singular { what: "Jx" })?;
    let schur = symmetrize(&(&j.jtheta - j.jxtheta.transpose() * chol.solve(&j.jxtheta)));
    match schur.clone().cholesky() {
        Some(c) => Ok(symmetrize(&c.inverse())),
        None => Err(Error::NotPositiveDefinite {
            what: "Schur complement of the information matrix",
            min_eigenvalue: min_eigenvalue(&schur),
        }),
    }
}

/// Prior draws for paths `0..count`, each from its own keyed stream.
pub fn sample_prior_keyed(model: &GaussianSsm, count: usize, key: NoiseKey) -> Vec<ExtendedState> {
    (0..count)
        .map(|j| model.draw_prior(&mut key.stream(StreamKind::Prior, j as u64)))
        .collect()
}

/// Monte-Carlo bound trajectory for a fixed input sequence using `samples`
/// prior paths drawn from the noise table `key`.
///
/// Path `j` uses the same streams as [`crate::ssm::simulate_paths`] fed with
/// [`sample_prior_keyed`], so the two routes see identical samples.
pub fn bound_trajectory(
    model: &GaussianSsm,
    inputs: &InputSequence,
    samples: usize,
    criterion: BoundCriterion,
    key: NoiseKey,
) -> Result<BoundTrajectory> {
    let d = model.dims();
    if inputs.is_empty() {
        return Err(Error::Dimension("horizon must be at least 1".into()));
    }
    if inputs.dim() != d.input {
        return Err(Error::Dimension("input dimension".into()));
    }
    if samples < 2 {
        return Err(Error::Dimension("at least 2 sample paths are required".into()));
    }
    let horizon = inputs.len();
    let mut acc: Vec<_> = (0..horizon).map(|_| GramAccumulator::with_capacity(d, samples)).collect();
    let mut sc = JacobianScratch::new(model);
    let mut x = vec![0.0; d.state];
    let mut next = vec![0.0; d.state];
    let mut noise_scratch = vec![0.0; d.state];
    for j in 0..samples {
        let z0 = model.draw_prior(&mut key.stream(StreamKind::Prior, j as u64));
        let mut rng = key.stream(StreamKind::Process, j as u64);
        x.copy_from_slice(&z0.x);
        for t in 0..horizon {
            let u = inputs.get(t);
            acc[t].add_drift(model, &mut sc, &x, &z0.theta, u);
            model.dynamics().drift(&x, &z0.theta, u, &mut next);
            model.add_process_noise(&mut rng, &mut next, &mut noise_scratch);
            if next.iter().any(|v| !v.is_finite()) {
                return Err(Error::SimulationDivergence { path: j, time: t + 1 });
            }
            acc[t].add_observation(model, &mut sc, &next, &z0.theta, inputs.next_clamped(t));
            std::mem::swap(&mut x, &mut next);
        }
    }
    let mut pim = init_pim(model)?;
    let mut steps = Vec::with_capacity(horizon);
    for (t, a) in acc.iter().enumerate() {
        pim = update_pim(&pim, &a.finish(model))?;
        let l_theta = lower_bound_theta(&pim)?;
        let phi = criterion.apply(&l_theta)?;
        steps.push(BoundStep { t: t + 1, pim: pim.clone(), l_theta, phi });
    }
    Ok(BoundTrajectory { steps })
}
