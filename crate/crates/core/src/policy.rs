//! Markov-chain parametrization of discretized input sequences.
//!
//! The input space is a grid of `r = b^p` points. A policy of memory `k` is a
//! first-order Markov chain over windows of `k + 1` consecutive grid points,
//! given by an initial distribution over windows and a window transition
//! matrix. Windows are numbered lexicographically, most significant input
//! first: for `b = 2, p = 1, k = 1` the order is `(s1 s1), (s1 s2), (s2 s1), (s2 s2)`.
//!
//! For `k >= 1` a transition must shift the window by one input, so the last
//! `k` inputs of the source equal the first `k` inputs of the target. Other
//! entries are structural zeros.

use std::fmt::Write as _;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ssm::InputSequence;

/// Default cap on the number of chain states `r^(k+1)`.
pub const DEFAULT_STATE_CAP: usize = 4096;

const SUM_TOLERANCE: f64 = 1e-12;

/// Discretized input space with a window memory.
#[derive(Debug, Clone, PartialEq)]
pub struct InputSpace {
    levels: Vec<Vec<f64>>,
    memory: usize,
    grid: usize,
    states: usize,
}

/// Build an equispaced grid with `b` levels per dimension, endpoints included.
pub fn build_input_space(u_min: &[f64], u_max: &[f64], b: usize, k: usize) -> Result<InputSpace> {
    build_input_space_capped(u_min, u_max, b, k, DEFAULT_STATE_CAP)
}

pub fn build_input_space_capped(u_min: &[f64], u_max: &[f64], b: usize, k: usize, cap: usize) -> Result<InputSpace> {
    if u_min.is_empty() || u_min.len() != u_max.len() {
        return Err(Error::Parameter("u_min and u_max must have the same positive length".into()));
    }
    if b < 2 {
        return Err(Error::Parameter(format!("need at least 2 levels per input, got {b}")));
    }
    let mut levels = Vec::with_capacity(u_min.len());
    for (lo, hi) in u_min.iter().zip(u_max) {
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(Error::Parameter(format!("bounds [{lo}, {hi}] are not an interval")));
        }
        let step = (hi - lo) / (b - 1) as f64;
        let mut dim: Vec<f64> = (0..b).map(|i| lo + step * i as f64).collect();
        dim[b - 1] = *hi;
        levels.push(dim);
    }
    InputSpace::from_levels(levels, k, cap)
}

fn checked_pow(base: usize, exp: usize) -> Option<usize> {
    let mut acc: usize = 1;
    for _ in 0..exp {
        acc = acc.checked_mul(base)?;
    }
    Some(acc)
}

impl InputSpace {
    /// Grid from explicit per-dimension levels (strictly increasing, equal count).
    pub fn from_levels(levels: Vec<Vec<f64>>, memory: usize, cap: usize) -> Result<Self> {
        let b = levels.first().map(Vec::len).unwrap_or(0);
        if b < 2 || levels.iter().any(|l| l.len() != b) {
            return Err(Error::Parameter("every input dimension needs the same number (>= 2) of levels".into()));
        }
        for l in &levels {
            if l.iter().any(|v| !v.is_finite()) || l.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::Parameter("levels must be finite and strictly increasing".into()));
            }
        }
        let too_big = || Error::Capacity(format!("{b}^{} levels with memory {memory} exceed {cap} chain states", levels.len()));
        let grid = checked_pow(b, levels.len()).ok_or_else(too_big)?;
        let states = memory
            .checked_add(1)
            .and_then(|e| checked_pow(grid, e))
            .filter(|s| *s <= cap)
            .ok_or_else(too_big)?;
        Ok(Self { levels, memory, grid, states })
    }

    pub fn dim(&self) -> usize {
        self.levels.len()
    }
    pub fn levels_per_dim(&self) -> usize {
        self.levels[0].len()
    }
    pub fn levels(&self) -> &[Vec<f64>] {
        &self.levels
    }
    pub fn memory(&self) -> usize {
        self.memory
    }
    /// `r = b^p`
    pub fn grid_size(&self) -> usize {
        self.grid
    }
    /// `r^(k+1)`
    pub fn chain_states(&self) -> usize {
        self.states
    }
    pub fn u_min(&self) -> Vec<f64> {
        self.levels.iter().map(|l| l[0]).collect()
    }
    pub fn u_max(&self) -> Vec<f64> {
        self.levels.iter().map(|l| l[l.len() - 1]).collect()
    }

    /// Grid point `i`, first dimension most significant.
    pub fn point(&self, i: usize) -> Vec<f64> {
        let b = self.levels_per_dim();
        let p = self.dim();
        let mut out = vec![0.0; p];
        let mut rest = i;
        for d in (0..p).rev() {
            out[d] = self.levels[d][rest % b];
            rest /= b;
        }
        out
    }

    /// Grid index of `u`, if it is a grid point (to a relative 1e-9).
    pub fn encode(&self, u: &[f64]) -> Option<usize> {
        if u.len() != self.dim() {
            return None;
        }
        let b = self.levels_per_dim();
        let mut idx = 0;
        for (d, v) in u.iter().enumerate() {
            let l = &self.levels[d];
            let tol = 1e-9 * (l[b - 1] - l[0]);
            let j = l.iter().position(|g| (g - v).abs() <= tol)?;
            idx = idx * b + j;
        }
        Some(idx)
    }

    /// Grid indices `(g_0, ..., g_k)` of chain state `s`.
    pub fn window(&self, s: usize) -> Vec<usize> {
        let mut w = vec![0; self.memory + 1];
        let mut rest = s;
        for slot in w.iter_mut().rev() {
            *slot = rest % self.grid;
            rest /= self.grid;
        }
        w
    }

    pub fn state_of(&self, window: &[usize]) -> usize {
        window.iter().fold(0, |acc, g| acc * self.grid + g)
    }

    /// State reached from `s` by appending grid point `next`.
    pub fn successor(&self, s: usize, next: usize) -> usize {
        (s % (self.states / self.grid)) * self.grid + next
    }

    pub fn is_consistent(&self, from: usize, to: usize) -> bool {
        self.successor(from, to % self.grid) == to
    }
}

/// Initial window distribution plus window transition matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct MarkovInputPolicy {
    space: InputSpace,
    gamma: Vec<f64>,
    pi: Vec<Vec<f64>>,
}

fn check_probabilities(v: &[f64], what: &str) -> Result<()> {
    if let Some(x) = v.iter().find(|x| !(x.is_finite() && (0.0..=1.0).contains(*x))) {
        return Err(Error::Parameter(format!("{what} has entry {x} outside [0, 1]")));
    }
    let sum: f64 = v.iter().sum();
    if (sum - 1.0).abs() > SUM_TOLERANCE {
        return Err(Error::Parameter(format!("{what} sums to {sum}")));
    }
    Ok(())
}

impl MarkovInputPolicy {
    /// Validate a dense policy. For memory `k >= 1`, mass on transitions that do
    /// not shift the window is dropped and the row renormalized (with a warning).
    pub fn new(space: InputSpace, gamma: Vec<f64>, mut pi: Vec<Vec<f64>>) -> Result<Self> {
        let s = space.chain_states();
        if gamma.len() != s || pi.len() != s || pi.iter().any(|r| r.len() != s) {
            return Err(Error::Dimension(format!("policy matrices must be sized for {s} chain states")));
        }
        check_probabilities(&gamma, "initial distribution")?;
        for (i, row) in pi.iter_mut().enumerate() {
            check_probabilities(row, &format!("transition row {i}"))?;
            if space.memory() == 0 {
                continue;
            }
            let stray: f64 = (0..s).filter(|&j| !space.is_consistent(i, j)).map(|j| row[j]).sum();
            if stray == 0.0 {
                continue;
            }
            let kept = 1.0 - stray;
            if kept <= 0.0 {
                return Err(Error::Structural(format!(
                    "transition row {i} puts no mass on windows that extend it"
                )));
            }
            log::warn!("transition row {i} has mass {stray} on non-overlapping windows; renormalizing");
            for (j, v) in row.iter_mut().enumerate() {
                *v = if space.is_consistent(i, j) { *v / kept } else { 0.0 };
            }
        }
        Ok(Self { space, gamma, pi })
    }

    /// Build from rows over the `r` possible next inputs of each state.
    pub fn from_next_input_rows(space: InputSpace, gamma: Vec<f64>, rows: Vec<Vec<f64>>) -> Result<Self> {
        let s = space.chain_states();
        let r = space.grid_size();
        if rows.len() != s || rows.iter().any(|row| row.len() != r) {
            return Err(Error::Dimension(format!("need {s} rows of {r} next-input probabilities")));
        }
        let pi = rows
            .iter()
            .enumerate()
            .map(|(i, row)| {
                let mut dense = vec![0.0; s];
                for (g, p) in row.iter().enumerate() {
                    dense[space.successor(i, g)] += p;
                }
                dense
            })
            .collect();
        Self::new(space, gamma, pi)
    }

    pub fn space(&self) -> &InputSpace {
        &self.space
    }
    pub fn gamma(&self) -> &[f64] {
        &self.gamma
    }
    pub fn pi(&self) -> &[Vec<f64>] {
        &self.pi
    }

    /// Number of free entries before any tying: `S (1 + S)` with `S = r^(k+1)`.
    pub fn untied_parameter_count(&self) -> usize {
        let s = self.space.chain_states();
        s * (1 + s)
    }

    /// Deterministic inverse-CDF sampling: `uniforms[0]` picks the first
    /// window, each further uniform one transition. Produces
    /// `uniforms.len() + k` inputs.
    pub fn sample_indices_with(&self, uniforms: &[f64]) -> Vec<usize> {
        let Some((first, rest)) = uniforms.split_first() else {
            return Vec::new();
        };
        let mut state = inverse_cdf(&self.gamma, *first, |i| i);
        let mut out = self.space.window(state);
        let r = self.space.grid_size();
        for u in rest {
            let row = &self.pi[state];
            let next = inverse_cdf_over(r, *u, |g| row[self.space.successor(state, g)]);
            state = self.space.successor(state, next);
            out.push(next);
        }
        out
    }

    pub fn decode(&self, indices: &[usize]) -> InputSequence {
        let values = indices.iter().flat_map(|&i| self.space.point(i)).collect();
        InputSequence::new(self.space.dim(), values).expect("grid points have the space dimension")
    }

    pub fn sample_with(&self, uniforms: &[f64]) -> InputSequence {
        self.decode(&self.sample_indices_with(uniforms))
    }

    /// Serialize to the plain-text policy format (17 significant digits).
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let sp = &self.space;
        let _ = writeln!(s, "markov-input-policy 1");
        let _ = writeln!(s, "b {}", sp.levels_per_dim());
        let _ = writeln!(s, "p {}", sp.dim());
        let _ = writeln!(s, "k {}", sp.memory());
        for (d, l) in sp.levels().iter().enumerate() {
            let _ = write!(s, "levels {}", d + 1);
            for v in l {
                let _ = write!(s, " {v:.16e}");
            }
            s.push('\n');
        }
        let _ = write!(s, "gamma");
        for v in &self.gamma {
            let _ = write!(s, " {v:.16e}");
        }
        s.push('\n');
        for row in &self.pi {
            let _ = write!(s, "pi");
            for v in row {
                let _ = write!(s, " {v:.16e}");
            }
            s.push('\n');
        }
        s
    }

    /// Parse the plain-text policy format. Never panics on malformed input.
    pub fn from_text(text: &str) -> Result<Self> {
        parse_policy(text, DEFAULT_STATE_CAP)
    }
}

fn inverse_cdf(p: &[f64], u: f64, _id: impl Fn(usize) -> usize) -> usize {
    inverse_cdf_over(p.len(), u, |i| p[i])
}

/// First index whose cumulative mass exceeds `u`, skipping zero-mass entries.
fn inverse_cdf_over(len: usize, u: f64, p: impl Fn(usize) -> f64) -> usize {
    let mut cum = 0.0;
    let mut last_positive = 0;
    for i in 0..len {
        let pi = p(i);
        if pi <= 0.0 {
            continue;
        }
        cum += pi;
        last_positive = i;
        if u < cum {
            return i;
        }
    }
    last_positive
}

/// Draw `n` inputs from the chain.
pub fn sample_sequence<R: Rng + ?Sized>(policy: &MarkovInputPolicy, n: usize, rng: &mut R) -> Result<InputSequence> {
    let k = policy.space().memory();
    if n < k + 1 {
        return Err(Error::Parameter(format!("need at least {} inputs for memory {k}", k + 1)));
    }
    let uniforms: Vec<f64> = (0..n - k).map(|_| rng.gen::<f64>()).collect();
    Ok(policy.sample_with(&uniforms))
}

/// `log P_Γ(first window) + Σ log P_Π(window_t | window_{t-1})`.
/// Returns `-inf` for sequences the chain cannot produce.
pub fn sequence_log_prob(policy: &MarkovInputPolicy, inputs: &InputSequence) -> Result<f64> {
    let sp = policy.space();
    let k = sp.memory();
    if inputs.dim() != sp.dim() {
        return Err(Error::Dimension("input dimension".into()));
    }
    if inputs.len() < k + 1 {
        return Err(Error::Parameter(format!("need at least {} inputs for memory {k}", k + 1)));
    }
    let idx = inputs
        .iter()
        .enumerate()
        .map(|(t, u)| sp.encode(u).ok_or_else(|| Error::Encoding { position: t, value: u.to_vec() }))
        .collect::<Result<Vec<_>>>()?;
    Ok(indices_log_prob(policy, &idx))
}

pub(crate) fn indices_log_prob(policy: &MarkovInputPolicy, idx: &[usize]) -> f64 {
    let sp = policy.space();
    let k = sp.memory();
    let mut state = sp.state_of(&idx[..=k]);
    let mut lp = policy.gamma()[state].ln();
    for &g in &idx[k + 1..] {
        let next = sp.successor(state, g);
        lp += policy.pi()[state][next].ln();
        state = next;
    }
    lp
}

/// Tied families of policies over a binary scalar grid, plus a free form.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PolicyTemplate {
    /// `P_Γ = [p1, 1-p1]`, `P_Π = [[p1, 1-p1], [1-p1, p1]]`
    Case1,
    /// `P_Γ = [p1, 1-p1]`, `P_Π = [[p1, 1-p1], [1-p2, p2]]`
    Case2,
    /// `P_Γ = [p0, 1-p0]`, `P_Π = [[p1, 1-p1], [1-p2, p2]]`
    Case3,
    /// Uniform two-level chain (PRBS), no parameters.
    Case4,
    /// Every row on its own simplex via normalized nonnegative weights.
    Free,
}

impl PolicyTemplate {
    pub const CASES: [PolicyTemplate; 4] = [Self::Case1, Self::Case2, Self::Case3, Self::Case4];

    pub fn name(&self) -> &'static str {
        match self {
            Self::Case1 => "Case1",
            Self::Case2 => "Case2",
            Self::Case3 => "Case3",
            Self::Case4 => "Case4",
            Self::Free => "Free",
        }
    }

    pub fn arity(&self, space: &InputSpace) -> usize {
        match self {
            Self::Case1 => 1,
            Self::Case2 => 2,
            Self::Case3 => 3,
            Self::Case4 => 0,
            Self::Free => {
                let s = space.chain_states();
                s + s * space.grid_size()
            }
        }
    }
}

impl std::fmt::Display for PolicyTemplate {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PolicyTemplate {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "case1" => Ok(Self::Case1),
            "case2" => Ok(Self::Case2),
            "case3" => Ok(Self::Case3),
            "case4" | "prbs" => Ok(Self::Case4),
            "free" => Ok(Self::Free),
            other => Err(Error::Parameter(format!("unknown policy template `{other}`"))),
        }
    }
}

fn normalize_weights(w: &[f64]) -> Vec<f64> {
    let total: f64 = w.iter().sum();
    if total > 0.0 {
        w.iter().map(|v| v / total).collect()
    } else {
        vec![1.0 / w.len() as f64; w.len()]
    }
}

/// Map template parameters in the unit box to a policy.
pub fn policy_from_template(template: PolicyTemplate, space: &InputSpace, phi: &[f64]) -> Result<MarkovInputPolicy> {
    let d = template.arity(space);
    if phi.len() != d {
        return Err(Error::Parameter(format!("{template} takes {d} parameters, got {}", phi.len())));
    }
    if let Some(v) = phi.iter().find(|v| !(v.is_finite() && (0.0..=1.0).contains(*v))) {
        return Err(Error::Parameter(format!("parameter {v} outside [0, 1]")));
    }
    if template != PolicyTemplate::Free && space.chain_states() != 2 {
        return Err(Error::Parameter(format!("{template} needs a two-level scalar input with memory 0")));
    }
    let binary = |g: f64, stay0: f64, stay1: f64| {
        MarkovInputPolicy::new(space.clone(), vec![g, 1.0 - g], vec![vec![stay0, 1.0 - stay0], vec![1.0 - stay1, stay1]])
    };
    match template {
        PolicyTemplate::Case1 => binary(phi[0], phi[0], phi[0]),
        PolicyTemplate::Case2 => binary(phi[0], phi[0], phi[1]),
        PolicyTemplate::Case3 => binary(phi[0], phi[1], phi[2]),
        PolicyTemplate::Case4 => binary(0.5, 0.5, 0.5),
        PolicyTemplate::Free => {
            let s = space.chain_states();
            let r = space.grid_size();
            let gamma = normalize_weights(&phi[..s]);
            let rows = phi[s..].chunks_exact(r).map(normalize_weights).collect();
            MarkovInputPolicy::from_next_input_rows(space.clone(), gamma, rows)
        }
    }
}

fn parse_error(line: usize, msg: impl std::fmt::Display) -> Error {
    Error::Structural(format!("policy text line {line}: {msg}"))
}

fn parse_policy(text: &str, cap: usize) -> Result<MarkovInputPolicy> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));
    let mut next = |want: &str| -> Result<(usize, Vec<&str>)> {
        let (no, line) = lines.next().ok_or_else(|| parse_error(0, format!("missing `{want}` line")))?;
        let mut parts = line.split_whitespace();
        let key = parts.next().unwrap_or_default();
        if key != want {
            return Err(parse_error(no, format!("expected `{want}`, found `{key}`")));
        }
        Ok((no, parts.collect()))
    };
    let int = |no: usize, v: &[&str]| -> Result<usize> {
        match v {
            [x] => x.parse().map_err(|e| parse_error(no, e)),
            _ => Err(parse_error(no, "expected one integer")),
        }
    };
    let floats = |no: usize, v: &[&str]| -> Result<Vec<f64>> {
        v.iter().map(|x| x.parse::<f64>().map_err(|e| parse_error(no, e))).collect()
    };
    let (no, v) = next("markov-input-policy")?;
    if v != ["1"] {
        return Err(parse_error(no, "unsupported version"));
    }
    let (no, v) = next("b")?;
    let b = int(no, &v)?;
    let (no, v) = next("p")?;
    let p = int(no, &v)?;
    let (no, v) = next("k")?;
    let k = int(no, &v)?;
    if p == 0 || p > 64 || b > cap || k > 64 {
        return Err(parse_error(no, "header values out of range"));
    }
    let mut levels = Vec::with_capacity(p);
    for d in 1..=p {
        let (no, v) = next("levels")?;
        if v.first().and_then(|x| x.parse::<usize>().ok()) != Some(d) {
            return Err(parse_error(no, format!("expected levels for dimension {d}")));
        }
        let l = floats(no, &v[1..])?;
        if l.len() != b {
            return Err(parse_error(no, format!("expected {b} levels")));
        }
        levels.push(l);
    }
    let space = InputSpace::from_levels(levels, k, cap)?;
    let s = space.chain_states();
    let (no, v) = next("gamma")?;
    let gamma = floats(no, &v)?;
    let mut pi = Vec::with_capacity(s);
    for _ in 0..s {
        let (no, v) = next("pi")?;
        pi.push(floats(no, &v)?);
    }
    if let Some((no, _)) = lines.next() {
        return Err(parse_error(no, "trailing content"));
    }
    MarkovInputPolicy::new(space, gamma, pi)
}
