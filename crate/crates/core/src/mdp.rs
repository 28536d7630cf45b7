//! Tabular MDPs, policies and the Bellman machinery every other module builds on.
//!
//! Kernels are stored row-major as `kernel[(x * n_actions + a) * n_states + y] = P(y|x,a)`
//! and rewards as `rewards[x * n_actions + a]`. State-action tables elsewhere in the crate
//! use the same `x * n_actions + a` layout.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Row sums must hit 1 within this on construction.
pub const PROB_TOL: f64 = 1e-12;
/// Allowed Bellman residual of the exact solver, relative to `max(1, |V|_inf)`.
pub const SOLVE_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabularMdp {
    n_states: usize,
    n_actions: usize,
    discount: f64,
    /// Row-major `[x][a][y]`.
    kernel: Vec<f64>,
    /// Row-major `[x][a]`.
    rewards: Vec<f64>,
}

impl TabularMdp {
    pub fn new(
        n_states: usize,
        n_actions: usize,
        discount: f64,
        kernel: Vec<f64>,
        rewards: Vec<f64>,
    ) -> Result<Self> {
        if n_states == 0 || n_actions == 0 {
            return Err(Error::Invalid("an MDP needs at least one state and one action".into()));
        }
        if !(0.0..1.0).contains(&discount) {
            return Err(Error::Invalid(format!("discount must lie in [0, 1), got {discount}")));
        }
        let pairs = n_states * n_actions;
        if kernel.len() != pairs * n_states {
            return Err(Error::Dimension(format!(
                "kernel has {} entries, expected {}",
                kernel.len(),
                pairs * n_states
            )));
        }
        if rewards.len() != pairs {
            return Err(Error::Dimension(format!(
                "rewards has {} entries, expected {pairs}",
                rewards.len()
            )));
        }
        if let Some(r) = rewards.iter().find(|r| !r.is_finite()) {
            return Err(Error::Invalid(format!("non-finite reward {r}")));
        }
        for (i, row) in kernel.chunks(n_states).enumerate() {
            check_distribution(row, PROB_TOL).map_err(|e| {
                Error::Invalid(format!("kernel row (x={}, a={}): {e}", i / n_actions, i % n_actions))
            })?;
        }
        Ok(Self { n_states, n_actions, discount, kernel, rewards })
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn n_pairs(&self) -> usize {
        self.n_states * self.n_actions
    }

    pub fn discount(&self) -> f64 {
        self.discount
    }

    pub fn kernel(&self) -> &[f64] {
        &self.kernel
    }

    pub fn rewards(&self) -> &[f64] {
        &self.rewards
    }

    pub fn row(&self, x: usize, a: usize) -> &[f64] {
        let start = (x * self.n_actions + a) * self.n_states;
        &self.kernel[start..start + self.n_states]
    }

    pub fn reward(&self, x: usize, a: usize) -> f64 {
        self.rewards[x * self.n_actions + a]
    }

    /// Same rewards and discount, different dynamics.
    pub fn with_kernel(&self, kernel: Vec<f64>) -> Result<Self> {
        Self::new(self.n_states, self.n_actions, self.discount, kernel, self.rewards.clone())
    }

    /// Same dynamics and discount, different rewards.
    pub fn with_rewards(&self, rewards: Vec<f64>) -> Result<Self> {
        if rewards.len() != self.n_pairs() {
            return Err(Error::Dimension(format!(
                "rewards has {} entries, expected {}",
                rewards.len(),
                self.n_pairs()
            )));
        }
        if let Some(r) = rewards.iter().find(|r| !r.is_finite()) {
            return Err(Error::Invalid(format!("non-finite reward {r}")));
        }
        Ok(Self { rewards, ..self.clone() })
    }

    pub fn max_abs_reward(&self) -> f64 {
        self.rewards.iter().fold(0.0, |m, r| m.max(r.abs()))
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Parse(e.to_string()))
    }

    /// Parses and re-validates an MDP file.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let raw: TabularMdp = toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        Self::new(raw.n_states, raw.n_actions, raw.discount, raw.kernel, raw.rewards)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_toml_string()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }
}

fn check_distribution(row: &[f64], tol: f64) -> std::result::Result<(), String> {
    if let Some(p) = row.iter().find(|p| !p.is_finite() || **p < 0.0) {
        return Err(format!("entry {p} is not a probability"));
    }
    let total: f64 = row.iter().sum();
    if (total - 1.0).abs() > tol {
        return Err(format!("sums to {total}"));
    }
    Ok(())
}

/// A stochastic policy; deterministic policies are one-hot rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Policy {
    n_states: usize,
    n_actions: usize,
    probs: Vec<f64>,
}

impl Policy {
    pub fn new(n_states: usize, n_actions: usize, probs: Vec<f64>) -> Result<Self> {
        if probs.len() != n_states * n_actions {
            return Err(Error::Dimension(format!(
                "policy has {} entries, expected {}",
                probs.len(),
                n_states * n_actions
            )));
        }
        for (x, row) in probs.chunks(n_actions).enumerate() {
            check_distribution(row, PROB_TOL)
                .map_err(|e| Error::Invalid(format!("policy row {x}: {e}")))?;
        }
        Ok(Self { n_states, n_actions, probs })
    }

    pub fn uniform(n_states: usize, n_actions: usize) -> Self {
        let p = 1.0 / n_actions as f64;
        Self { n_states, n_actions, probs: vec![p; n_states * n_actions] }
    }

    pub fn deterministic(n_actions: usize, actions: &[usize]) -> Result<Self> {
        let mut probs = vec![0.0; actions.len() * n_actions];
        for (x, &a) in actions.iter().enumerate() {
            if a >= n_actions {
                return Err(Error::Dimension(format!("action {a} out of range at state {x}")));
            }
            probs[x * n_actions + a] = 1.0;
        }
        Ok(Self { n_states: actions.len(), n_actions, probs })
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn prob(&self, x: usize, a: usize) -> f64 {
        self.probs[x * self.n_actions + a]
    }

    pub fn row(&self, x: usize) -> &[f64] {
        &self.probs[x * self.n_actions..(x + 1) * self.n_actions]
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    /// The chosen action per state, if every row is one-hot.
    pub fn actions(&self) -> Option<Vec<usize>> {
        (0..self.n_states)
            .map(|x| self.row(x).iter().position(|&p| p == 1.0))
            .collect()
    }

    /// Averages a state-action table under the policy.
    pub fn average(&self, table: &[f64]) -> Vec<f64> {
        (0..self.n_states)
            .map(|x| {
                self.row(x)
                    .iter()
                    .zip(&table[x * self.n_actions..(x + 1) * self.n_actions])
                    .map(|(p, t)| p * t)
                    .sum()
            })
            .collect()
    }

    fn check_shape(&self, mdp: &TabularMdp) -> Result<()> {
        if self.n_states != mdp.n_states || self.n_actions != mdp.n_actions {
            return Err(Error::Dimension(format!(
                "policy is {}x{}, MDP is {}x{}",
                self.n_states, self.n_actions, mdp.n_states, mdp.n_actions
            )));
        }
        Ok(())
    }
}

/// Returns `(P^π, r^π)` with `P^π` row-major `n_states x n_states`.
pub fn policy_kernel(mdp: &TabularMdp, policy: &Policy) -> Result<(Vec<f64>, Vec<f64>)> {
    policy.check_shape(mdp)?;
    let n = mdp.n_states;
    let mut p_pi = vec![0.0; n * n];
    let mut r_pi = vec![0.0; n];
    for x in 0..n {
        for a in 0..mdp.n_actions {
            let w = policy.prob(x, a);
            if w == 0.0 {
                continue;
            }
            r_pi[x] += w * mdp.reward(x, a);
            for (dst, p) in p_pi[x * n..(x + 1) * n].iter_mut().zip(mdp.row(x, a)) {
                *dst += w * p;
            }
        }
    }
    Ok((p_pi, r_pi))
}

/// Solves `(I - γ P) V = r` for a state kernel `P`, with one step of iterative refinement.
pub fn solve_linear_bellman(p: &[f64], r: &[f64], gamma: f64) -> Result<Vec<f64>> {
    let n = r.len();
    if p.len() != n * n {
        return Err(Error::Dimension(format!("state kernel has {} entries, expected {}", p.len(), n * n)));
    }
    let a = DMatrix::from_fn(n, n, |i, j| f64::from(u8::from(i == j)) - gamma * p[i * n + j]);
    let lu = a.clone().lu();
    let b = DVector::from_column_slice(r);
    let mut v = lu
        .solve(&b)
        .ok_or_else(|| Error::Numerical("singular Bellman system".into()))?;
    let resid = &b - &a * &v;
    if let Some(dv) = lu.solve(&resid) {
        v += dv;
    }
    let resid = (&b - &a * &v).amax();
    let scale = v.amax().max(1.0);
    if !resid.is_finite() || resid > SOLVE_TOL * scale {
        return Err(Error::Numerical(format!("Bellman residual {resid:e} too large")));
    }
    Ok(v.as_slice().to_vec())
}

pub fn policy_evaluation_exact(mdp: &TabularMdp, policy: &Policy) -> Result<Vec<f64>> {
    let (p_pi, r_pi) = policy_kernel(mdp, policy)?;
    solve_linear_bellman(&p_pi, &r_pi, mdp.discount)
}

/// `(Pφ)(x,a) = Σ_y P(y|x,a) φ(y)`.
pub fn apply_kernel(mdp: &TabularMdp, phi: &[f64]) -> Result<Vec<f64>> {
    check_len(phi, mdp.n_states, "phi")?;
    Ok(mdp.kernel.chunks(mdp.n_states).map(|row| dot(row, phi)).collect())
}

/// `Q(x,a) = r(x,a) + γ (PV)(x,a)`.
pub fn q_values(mdp: &TabularMdp, v: &[f64]) -> Result<Vec<f64>> {
    let mut q = apply_kernel(mdp, v)?;
    for (q, r) in q.iter_mut().zip(&mdp.rewards) {
        *q = r + mdp.discount * *q;
    }
    Ok(q)
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

fn max_per_state(q: &[f64], n_actions: usize) -> Vec<f64> {
    q.chunks(n_actions).map(|row| row[argmax(row)]).collect()
}

/// The optimality operator `T*V`.
pub fn bellman_optimality(mdp: &TabularMdp, v: &[f64]) -> Result<Vec<f64>> {
    Ok(max_per_state(&q_values(mdp, v)?, mdp.n_actions))
}

pub fn greedy_policy(mdp: &TabularMdp, v: &[f64]) -> Result<Policy> {
    let q = q_values(mdp, v)?;
    let actions: Vec<usize> = q.chunks(mdp.n_actions).map(argmax).collect();
    Policy::deterministic(mdp.n_actions, &actions)
}

pub fn value_iteration(mdp: &TabularMdp, tol: f64, max_iters: usize) -> Result<(Vec<f64>, Policy)> {
    value_iteration_from(mdp, vec![0.0; mdp.n_states], tol, max_iters)
}

/// Value iteration from a warm start. Stops at the first iterate `V` with
/// `|V - T*V|_inf <= tol` and returns it with its greedy policy.
pub fn value_iteration_from(
    mdp: &TabularMdp,
    mut v: Vec<f64>,
    tol: f64,
    max_iters: usize,
) -> Result<(Vec<f64>, Policy)> {
    if tol.is_nan() || tol <= 0.0 {
        return Err(Error::Invalid(format!("tolerance must be positive, got {tol}")));
    }
    check_len(&v, mdp.n_states, "initial values")?;
    let mut residual = f64::INFINITY;
    for _ in 0..=max_iters {
        let next = bellman_optimality(mdp, &v)?;
        residual = sup_distance(&next, &v);
        if residual <= tol {
            let policy = greedy_policy(mdp, &v)?;
            return Ok((v, policy));
        }
        if !residual.is_finite() {
            break;
        }
        v = next;
    }
    Err(Error::NotConverged { iterations: max_iters, residual })
}

/// A probability vector with i.i.d. uniform weights, renormalised.
pub fn random_distribution<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| rng.gen::<f64>() + 1e-3).collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|p| p / s).collect()
}

/// Dense random MDP with rewards uniform on [-1, 1]; used for tests and audits.
pub fn random_mdp<R: Rng + ?Sized>(rng: &mut R, n: usize, m: usize, gamma: f64) -> TabularMdp {
    let kernel = (0..n * m).flat_map(|_| random_distribution(rng, n)).collect();
    let rewards = (0..n * m).map(|_| rng.gen_range(-1.0..1.0)).collect();
    TabularMdp::new(n, m, gamma, kernel, rewards).expect("random rows are normalised")
}

/// What a planner is solving for.
#[derive(Debug, Clone, PartialEq)]
pub enum Mode {
    /// Policy evaluation of the given policy.
    Evaluation(Policy),
    /// Optimal control.
    Control,
}

/// Default tolerance for value iteration inside planners.
pub const PLAN_TOL: f64 = 1e-10;
const PLAN_MAX_ITERS: usize = 1_000_000;

/// Solves `mdp` for `mode`: exact evaluation, or value iteration to `tol`.
/// The policy is `None` in evaluation mode.
pub fn solve_mode(mdp: &TabularMdp, mode: &Mode, tol: f64) -> Result<(Vec<f64>, Option<Policy>)> {
    match mode {
        Mode::Evaluation(policy) => Ok((policy_evaluation_exact(mdp, policy)?, None)),
        Mode::Control => {
            let (v, pi) = value_iteration(mdp, tol, PLAN_MAX_ITERS)?;
            Ok((v, Some(pi)))
        }
    }
}

/// The true target of `mode`: `V^π` or `V*`.
pub fn target_values(mdp: &TabularMdp, mode: &Mode) -> Result<Vec<f64>> {
    Ok(solve_mode(mdp, mode, 1e-12)?.0)
}

pub(crate) fn check_len(v: &[f64], n: usize, what: &str) -> Result<()> {
    if v.len() != n {
        return Err(Error::Dimension(format!("{what} has length {}, expected {n}", v.len())));
    }
    Ok(())
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn sup_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

pub(crate) fn sup_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}
