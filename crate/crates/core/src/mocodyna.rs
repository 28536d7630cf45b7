//! Sample-based agents: MoCoDyna and the TD, Q-learning and Dyna baselines.
//!
//! All agents consume the same exogenous stream of `(x, a, r, x')` samples. Every
//! `eval_every` steps the agent reports its current value estimate, which is scored
//! against the true target.

use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::analysis::{avg_tv_error, normalized_error, sup_error};
use crate::envs::{smooth_kernel, Environment};
use crate::maxent::SolverOptions;
use crate::mdp::{self, dot, sup_distance, Mode, Policy, TabularMdp, PLAN_TOL};
use crate::moco::{moco_solve, BasisSet};
use crate::{Error, Result};

/// Projection residuals below this (relative to `max(1, |V|_2)`) trigger the random fallback.
pub const DEGENERATE_TOL: f64 = 1e-10;

/// `α` for `t <= N`, then `α / (t − N)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LearningRate {
    pub alpha: f64,
    pub n: u64,
}

impl LearningRate {
    pub fn at(&self, t: u64) -> f64 {
        if t <= self.n {
            self.alpha
        } else {
            self.alpha / (t - self.n) as f64
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case", tag = "mode")]
pub enum SamplingScheme {
    /// `(x, a)` drawn uniformly at every step.
    #[default]
    UniformStateAction,
    /// Follow the sampled next state with a uniform action, jumping to a uniform state with
    /// probability `restart` (so absorbing states do not trap the stream).
    Trajectory { restart: f64 },
}

/// A reproducible sample stream.
#[derive(Debug, Clone)]
pub struct Sampler {
    scheme: SamplingScheme,
    rng: ChaCha8Rng,
    state: Option<usize>,
}

impl Sampler {
    pub fn new(scheme: SamplingScheme, rng: ChaCha8Rng) -> Self {
        Self { scheme, rng, state: None }
    }

    pub fn next(&mut self, env: &Environment) -> (usize, usize, f64, usize) {
        let (n, m) = (env.mdp.n_states(), env.mdp.n_actions());
        let x = match (self.scheme, self.state) {
            (SamplingScheme::Trajectory { restart }, Some(s)) if !self.rng.gen_bool(restart.clamp(0.0, 1.0)) => s,
            _ => self.rng.gen_range(0..n),
        };
        let a = self.rng.gen_range(0..m);
        let (r, y) = env.sample(x, a, &mut self.rng);
        self.state = Some(y);
        (x, a, r, y)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MocoDynaConfig {
    /// Functions used by the correction.
    pub d: usize,
    /// Extra, younger functions whose queries are still being estimated.
    pub c: usize,
    pub beta: f64,
    /// Basis rotation period.
    pub k: u64,
    /// Euclidean norm of every basis function; `√n` when `None`.
    pub basis_norm: Option<f64>,
}

impl MocoDynaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 {
            return Err(Error::Invalid("d must be at least 1".into()));
        }
        if self.k == 0 {
            return Err(Error::Invalid("rotation period K must be at least 1".into()));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::Invalid(format!("beta must be finite and >= 0, got {}", self.beta)));
        }
        if let Some(norm) = self.basis_norm {
            if !(norm > 0.0 && norm.is_finite()) {
                return Err(Error::Invalid(format!("basis norm must be positive, got {norm}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
struct BasisSlot {
    phi: Vec<f64>,
    psi: Vec<f64>,
    /// Visits to each pair since `phi` was inserted.
    age: Vec<u64>,
}

impl BasisSlot {
    fn fresh(phi: Vec<f64>, pairs: usize) -> Self {
        Self { phi, psi: vec![0.0; pairs], age: vec![0; pairs] }
    }
}

/// Counts, MLE model, reward means and the rotating basis with its running query means.
#[derive(Debug, Clone)]
pub struct AgentState {
    n_states: usize,
    n_actions: usize,
    discount: f64,
    config: MocoDynaConfig,
    counts: Vec<u64>,
    transitions: Vec<u64>,
    reward_mean: Vec<f64>,
    /// Oldest first.
    basis: VecDeque<BasisSlot>,
    t: u64,
    rng: ChaCha8Rng,
    degenerate_rotations: usize,
}

impl AgentState {
    /// Starts from `d + c` random orthogonal functions scaled to the configured norm.
    pub fn new(n_states: usize, n_actions: usize, discount: f64, config: MocoDynaConfig, mut rng: ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let size = config.d + config.c;
        if size > n_states {
            return Err(Error::Invalid(format!("d + c = {size} exceeds the number of states {n_states}")));
        }
        let pairs = n_states * n_actions;
        let norm = config.basis_norm.unwrap_or((n_states as f64).sqrt());
        let mut functions: Vec<Vec<f64>> = Vec::with_capacity(size);
        while functions.len() < size {
            let raw: Vec<f64> = (0..n_states).map(|_| rng.gen_range(-1.0..1.0)).collect();
            if let Some(f) = orthogonalize(&raw, &functions, norm) {
                functions.push(f);
            }
        }
        Ok(Self {
            n_states,
            n_actions,
            discount,
            config,
            counts: vec![0; pairs],
            transitions: vec![0; pairs * n_states],
            reward_mean: vec![0.0; pairs],
            basis: functions.into_iter().map(|f| BasisSlot::fresh(f, pairs)).collect(),
            t: 0,
            rng,
            degenerate_rotations: 0,
        })
    }

    pub fn t(&self) -> u64 {
        self.t
    }

    pub fn config(&self) -> &MocoDynaConfig {
        &self.config
    }

    pub fn degenerate_rotations(&self) -> usize {
        self.degenerate_rotations
    }

    pub fn visits(&self, x: usize, a: usize) -> u64 {
        self.counts[x * self.n_actions + a]
    }

    pub fn reward_estimate(&self) -> &[f64] {
        &self.reward_mean
    }

    /// Basis functions, oldest first.
    pub fn basis_functions(&self) -> Vec<&[f64]> {
        self.basis.iter().map(|s| s.phi.as_slice()).collect()
    }

    /// Query estimates, aligned with [`Self::basis_functions`].
    pub fn query_estimates(&self) -> Vec<&[f64]> {
        self.basis.iter().map(|s| s.psi.as_slice()).collect()
    }

    pub fn ages(&self, i: usize) -> &[u64] {
        &self.basis[i].age
    }

    /// Absorbs one sample. `ψ_i(x,a)` moves toward `φ_i(x')` with step `1/N_i(x,a)`, so it
    /// stays the mean of `φ_i(x')` over visits since `φ_i` was inserted.
    pub fn step(&mut self, x: usize, a: usize, r: f64, y: usize) {
        let pair = x * self.n_actions + a;
        self.t += 1;
        self.counts[pair] += 1;
        self.transitions[pair * self.n_states + y] += 1;
        self.reward_mean[pair] += (r - self.reward_mean[pair]) / self.counts[pair] as f64;
        for slot in &mut self.basis {
            slot.age[pair] += 1;
            slot.psi[pair] += (slot.phi[y] - slot.psi[pair]) / slot.age[pair] as f64;
        }
    }

    /// Maximum-likelihood kernel; unvisited rows are uniform over all states.
    pub fn mle_kernel(&self) -> Vec<f64> {
        mle_kernel(&self.counts, &self.transitions, self.n_states)
    }

    /// `smooth(P_MLE, λ)` with the estimated rewards.
    pub fn model(&self, lambda: f64) -> Result<TabularMdp> {
        let kernel = smooth_kernel(&self.mle_kernel(), self.n_states, lambda);
        TabularMdp::new(self.n_states, self.n_actions, self.discount, kernel, self.reward_mean.clone())
    }

    /// Corrects the model with the `d` oldest functions and solves for `mode`.
    pub fn plan(&self, lambda: f64, mode: &Mode, opts: &SolverOptions) -> Result<Plan> {
        let model = self.model(lambda)?;
        let active = self.basis.iter().take(self.config.d);
        let basis = BasisSet::new(active.clone().map(|s| s.phi.clone()).collect(), active.map(|s| s.psi.clone()).collect())?;
        let (values, policy, corrected) = moco_solve(&model, &basis, self.config.beta, mode, opts)?;
        Ok(Plan { values, policy, model_kernel: model.kernel().to_vec(), corrected_kernel: corrected.kernel })
    }

    /// Drops the oldest function and appends `v` with the `d − 1` newest functions projected
    /// out, rescaled to the configured norm. Returns `true` when `v` was degenerate and a
    /// random direction was used instead.
    pub fn rotate_basis(&mut self, v: &[f64]) -> Result<bool> {
        mdp::check_len(v, self.n_states, "value vector")?;
        let pairs = self.n_states * self.n_actions;
        self.basis.pop_front();
        let keep = self.config.d - 1;
        let retained: Vec<Vec<f64>> = self.basis.iter().rev().take(keep).map(|s| s.phi.clone()).collect();
        let norm = self.config.basis_norm.unwrap_or((self.n_states as f64).sqrt());
        let mut degenerate = false;
        let phi = match orthogonalize(v, &retained, norm) {
            Some(f) => f,
            None => {
                degenerate = true;
                self.degenerate_rotations += 1;
                log::warn!("value function at step {} lies in the retained span; using a random direction", self.t);
                loop {
                    let raw: Vec<f64> = (0..self.n_states).map(|_| self.rng.gen_range(-1.0..1.0)).collect();
                    if let Some(f) = orthogonalize(&raw, &retained, norm) {
                        break f;
                    }
                }
            }
        };
        self.basis.push_back(BasisSlot::fresh(phi, pairs));
        Ok(degenerate)
    }
}

fn mle_kernel(counts: &[u64], transitions: &[u64], n: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(transitions.len());
    for (pair, row) in transitions.chunks(n).enumerate() {
        if counts[pair] == 0 {
            out.extend(std::iter::repeat(1.0 / n as f64).take(n));
        } else {
            let total = counts[pair] as f64;
            out.extend(row.iter().map(|&c| c as f64 / total));
        }
    }
    out
}

/// Removes the components along `others` (two Gram-Schmidt passes) and rescales to `norm`;
/// `None` when the residual is negligible.
fn orthogonalize(v: &[f64], others: &[Vec<f64>], norm: f64) -> Option<Vec<f64>> {
    let mut r = v.to_vec();
    for _ in 0..2 {
        for f in others {
            let ff = dot(f, f);
            if ff == 0.0 {
                continue;
            }
            let c = dot(f, &r) / ff;
            r.iter_mut().zip(f).for_each(|(ri, fi)| *ri -= c * fi);
        }
    }
    let size = dot(&r, &r).sqrt();
    let scale = dot(v, v).sqrt().max(1.0);
    if size <= DEGENERATE_TOL * scale {
        return None;
    }
    Some(r.into_iter().map(|x| x * norm / size).collect())
}

/// Output of one MoCoDyna planning call.
#[derive(Debug, Clone)]
pub struct Plan {
    pub values: Vec<f64>,
    pub policy: Option<Policy>,
    pub model_kernel: Vec<f64>,
    pub corrected_kernel: Vec<f64>,
}

/// Value-based baselines, kept as state-action tables.
#[derive(Debug, Clone)]
pub struct QTable {
    n_actions: usize,
    discount: f64,
    q: Vec<f64>,
    t: u64,
}

impl QTable {
    pub fn new(n_states: usize, n_actions: usize, discount: f64) -> Self {
        Self { n_actions, discount, q: vec![0.0; n_states * n_actions], t: 0 }
    }

    pub fn q(&self) -> &[f64] {
        &self.q
    }

    /// Expected-SARSA form of TD(0) for `Q^π`; the stream is off-policy, so the
    /// bootstrap averages over `π` at `x'` instead of using the sampled action.
    pub fn td_step(&mut self, x: usize, a: usize, r: f64, y: usize, policy: &Policy, lr: &LearningRate) {
        self.t += 1;
        let m = self.n_actions;
        let next: f64 = (0..m).map(|b| policy.prob(y, b) * self.q[y * m + b]).sum();
        self.update(x * m + a, r + self.discount * next, lr);
    }

    pub fn q_learning_step(&mut self, x: usize, a: usize, r: f64, y: usize, lr: &LearningRate) {
        self.t += 1;
        let m = self.n_actions;
        let next = self.q[y * m..(y + 1) * m].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        self.update(x * m + a, r + self.discount * next, lr);
    }

    fn update(&mut self, pair: usize, target: f64, lr: &LearningRate) {
        let alpha = lr.at(self.t);
        self.q[pair] += alpha * (target - self.q[pair]);
    }

    pub fn values(&self, mode: &Mode) -> Vec<f64> {
        match mode {
            Mode::Evaluation(pi) => pi.average(&self.q),
            Mode::Control => self.q.chunks(self.n_actions).map(|row| row[mdp::argmax(row)]).collect(),
        }
    }

    pub fn greedy(&self) -> Policy {
        let actions: Vec<usize> = self.q.chunks(self.n_actions).map(mdp::argmax).collect();
        Policy::deterministic(self.n_actions, &actions).expect("argmax is in range")
    }
}

/// Dyna: the MLE model is updated every sample and replanned from scratch every
/// `plan_every` steps.
#[derive(Debug, Clone)]
pub struct DynaState {
    n_states: usize,
    n_actions: usize,
    discount: f64,
    counts: Vec<u64>,
    transitions: Vec<u64>,
    reward_mean: Vec<f64>,
    t: u64,
    plan: Option<(Vec<f64>, Option<Policy>, Vec<f64>)>,
}

impl DynaState {
    pub fn new(n_states: usize, n_actions: usize, discount: f64) -> Self {
        let pairs = n_states * n_actions;
        Self {
            n_states,
            n_actions,
            discount,
            counts: vec![0; pairs],
            transitions: vec![0; pairs * n_states],
            reward_mean: vec![0.0; pairs],
            t: 0,
            plan: None,
        }
    }

    pub fn dyna_step(&mut self, x: usize, a: usize, r: f64, y: usize, lambda: f64, plan_every: u64, mode: &Mode) -> Result<()> {
        let pair = x * self.n_actions + a;
        self.t += 1;
        self.counts[pair] += 1;
        self.transitions[pair * self.n_states + y] += 1;
        self.reward_mean[pair] += (r - self.reward_mean[pair]) / self.counts[pair] as f64;
        if self.t % plan_every.max(1) == 0 {
            self.replan(lambda, mode)?;
        }
        Ok(())
    }

    pub fn model(&self, lambda: f64) -> Result<TabularMdp> {
        let kernel = smooth_kernel(&mle_kernel(&self.counts, &self.transitions, self.n_states), self.n_states, lambda);
        TabularMdp::new(self.n_states, self.n_actions, self.discount, kernel, self.reward_mean.clone())
    }

    pub fn replan(&mut self, lambda: f64, mode: &Mode) -> Result<()> {
        let model = self.model(lambda)?;
        let (v, pi) = mdp::solve_mode(&model, mode, PLAN_TOL)?;
        self.plan = Some((v, pi, model.kernel().to_vec()));
        Ok(())
    }

    /// Latest plan as `(values, policy, model kernel)`.
    pub fn current(&self) -> Option<&(Vec<f64>, Option<Policy>, Vec<f64>)> {
        self.plan.as_ref()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum Agent {
    MocoDyna(MocoDynaConfig),
    Td(LearningRate),
    QLearning(LearningRate),
    Dyna { plan_every: u64 },
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub steps: u64,
    pub eval_every: u64,
    /// Smoothing applied to the MLE model (MoCoDyna and Dyna).
    pub lambda: f64,
    pub sampling: SamplingScheme,
    pub mode: Mode,
    pub solver: SolverOptions,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalPoint {
    pub step: u64,
    pub normalized_error: f64,
    pub sup_error: f64,
    /// Average l1 row error of the (smoothed) learned model.
    pub model_tv_uncorrected: Option<f64>,
    /// Same for the corrected kernel (MoCoDyna only).
    pub model_tv_corrected: Option<f64>,
    pub policy: Option<Policy>,
    /// Whether the reported policy is optimal in the true MDP (control only).
    pub policy_optimal: Option<bool>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunResult {
    pub points: Vec<EvalPoint>,
    pub rotations: usize,
    pub degenerate_rotations: usize,
    /// Error that cut the run short.
    pub error: Option<String>,
}

impl RunResult {
    pub fn last(&self) -> Option<&EvalPoint> {
        self.points.last()
    }
}

struct Scorer<'a> {
    truth: &'a TabularMdp,
    mode: &'a Mode,
    target: Vec<f64>,
}

impl Scorer<'_> {
    fn point(&self, step: u64, v: &[f64], pi: Option<Policy>, tv: (Option<f64>, Option<f64>)) -> Result<EvalPoint> {
        let policy_optimal = match (&pi, self.mode) {
            (Some(p), Mode::Control) => {
                let vp = mdp::policy_evaluation_exact(self.truth, p)?;
                Some(sup_distance(&vp, &self.target) <= 1e-6 * (1.0 + mdp::sup_norm(&self.target)))
            }
            _ => None,
        };
        Ok(EvalPoint {
            step,
            normalized_error: normalized_error(v, &self.target)?,
            sup_error: sup_error(v, &self.target),
            model_tv_uncorrected: tv.0,
            model_tv_corrected: tv.1,
            policy: pi,
            policy_optimal,
        })
    }
}

/// Runs `agent` for `cfg.steps` samples from `env`, scoring every `cfg.eval_every` steps.
/// Solver failures end the run early with the error recorded.
pub fn run_agent(env: &Environment, agent: &Agent, cfg: &RunConfig, rng: &mut ChaCha8Rng) -> Result<RunResult> {
    if cfg.eval_every == 0 {
        return Err(Error::Invalid("evaluation period must be at least 1".into()));
    }
    if !(0.0..=1.0).contains(&cfg.lambda) {
        return Err(Error::Invalid(format!("smoothing weight must lie in [0, 1], got {}", cfg.lambda)));
    }
    let truth = &env.mdp;
    let (n, m, gamma) = (truth.n_states(), truth.n_actions(), truth.discount());
    if let Mode::Evaluation(pi) = &cfg.mode {
        if pi.n_states() != n || pi.n_actions() != m {
            return Err(Error::Dimension("policy does not match the environment".into()));
        }
    }
    let scorer = Scorer { truth, mode: &cfg.mode, target: mdp::target_values(truth, &cfg.mode)? };
    let mut sampler = Sampler::new(cfg.sampling, ChaCha8Rng::seed_from_u64(rng.gen()));
    let agent_rng = ChaCha8Rng::seed_from_u64(rng.gen());
    let mut result = RunResult::default();
    let outcome = match agent {
        Agent::MocoDyna(mc) => {
            let mut state = AgentState::new(n, m, gamma, *mc, agent_rng)?;
            let r = drive(cfg, |t| {
                let (x, a, r, y) = sampler.next(env);
                state.step(x, a, r, y);
                let eval = t % cfg.eval_every == 0;
                let rotate = t % mc.k == 0;
                if !eval && !rotate {
                    return Ok(());
                }
                let plan = state.plan(cfg.lambda, &cfg.mode, &cfg.solver)?;
                if eval {
                    let tv = (
                        Some(avg_tv_error(truth.kernel(), &plan.model_kernel, n)),
                        Some(avg_tv_error(truth.kernel(), &plan.corrected_kernel, n)),
                    );
                    result.points.push(scorer.point(t, &plan.values, plan.policy.clone(), tv)?);
                }
                if rotate {
                    state.rotate_basis(&plan.values)?;
                    result.rotations += 1;
                }
                Ok(())
            });
            result.degenerate_rotations = state.degenerate_rotations();
            r
        }
        Agent::Td(lr) | Agent::QLearning(lr) => {
            let policy = match (&cfg.mode, agent) {
                (Mode::Evaluation(pi), Agent::Td(_)) => Some(pi.clone()),
                (Mode::Control, Agent::QLearning(_)) => None,
                _ => return Err(Error::Invalid("TD evaluates a policy and Q-learning solves control".into())),
            };
            let mut table = QTable::new(n, m, gamma);
            drive(cfg, |t| {
                let (x, a, r, y) = sampler.next(env);
                match &policy {
                    Some(pi) => table.td_step(x, a, r, y, pi, lr),
                    None => table.q_learning_step(x, a, r, y, lr),
                }
                if t % cfg.eval_every == 0 {
                    let pi = policy.is_none().then(|| table.greedy());
                    result.points.push(scorer.point(t, &table.values(&cfg.mode), pi, (None, None))?);
                }
                Ok(())
            })
        }
        Agent::Dyna { plan_every } => {
            let mut state = DynaState::new(n, m, gamma);
            drive(cfg, |t| {
                let (x, a, r, y) = sampler.next(env);
                state.dyna_step(x, a, r, y, cfg.lambda, *plan_every, &cfg.mode)?;
                if t % cfg.eval_every == 0 {
                    if state.current().is_none() {
                        state.replan(cfg.lambda, &cfg.mode)?;
                    }
                    let (v, pi, kernel) = state.current().expect("plan exists");
                    let tv = (Some(avg_tv_error(truth.kernel(), kernel, n)), None);
                    result.points.push(scorer.point(t, v, pi.clone(), tv)?);
                }
                Ok(())
            })
        }
    };
    if let Err(e) = outcome {
        result.error = Some(e.to_string());
    }
    Ok(result)
}

fn drive(cfg: &RunConfig, mut step: impl FnMut(u64) -> Result<()>) -> Result<()> {
    for t in 1..=cfg.steps {
        step(t)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{cliffwalk, smooth};
    use crate::mdp::apply_kernel;
    use crate::moco::moco_control;

    fn config(d: usize, c: usize) -> MocoDynaConfig {
        MocoDynaConfig { d, c, beta: 0.1, k: 100, basis_norm: None }
    }

    fn agent(d: usize, c: usize) -> AgentState {
        AgentState::new(36, 4, 0.9, config(d, c), ChaCha8Rng::seed_from_u64(1)).unwrap()
    }

    #[test]
    fn learning_rate_schedule() {
        let lr = LearningRate { alpha: 0.2, n: 10 };
        assert_eq!(lr.at(1), 0.2);
        assert_eq!(lr.at(10), 0.2);
        assert_eq!(lr.at(11), 0.2);
        assert_eq!(lr.at(14), 0.05);
    }

    #[test]
    fn initial_basis_is_orthogonal_with_fixed_norm() {
        let s = agent(3, 2);
        let f = s.basis_functions();
        assert_eq!(f.len(), 5);
        for i in 0..5 {
            assert!((dot(f[i], f[i]) - 36.0).abs() < 1e-9);
            for j in 0..i {
                assert!(dot(f[i], f[j]).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn first_visit_overwrites_and_means_are_exact() {
        let mut s = agent(1, 1);
        let phi0: Vec<f64> = s.basis_functions()[0].to_vec();
        s.step(3, 1, 2.0, 7);
        assert_eq!(s.query_estimates()[0][3 * 4 + 1], phi0[7]);
        let ys = [7, 8, 9, 7, 2, 30, 31];
        for &y in &ys[1..] {
            s.step(3, 1, 0.0, y);
        }
        let mean = ys.iter().map(|&y| phi0[y]).sum::<f64>() / ys.len() as f64;
        assert!((s.query_estimates()[0][13] - mean).abs() < 1e-12);
        assert!((s.reward_estimate()[13] - 2.0 / 7.0).abs() < 1e-15);
        assert_eq!(s.visits(3, 1), 7);
    }

    #[test]
    fn mle_rows_are_normalised_and_unvisited_rows_uniform() {
        let env = cliffwalk();
        let mut s = agent(2, 2);
        let mut sampler = Sampler::new(SamplingScheme::UniformStateAction, ChaCha8Rng::seed_from_u64(2));
        for _ in 0..500 {
            let (x, a, r, y) = sampler.next(&env);
            s.step(x, a, r, y);
        }
        let k = s.mle_kernel();
        for (pair, row) in k.chunks(36).enumerate() {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            if s.counts[pair] == 0 {
                assert!(row.iter().all(|p| *p == 1.0 / 36.0));
            }
        }
    }

    #[test]
    fn queries_concentrate_on_the_true_expectation() {
        let env = cliffwalk();
        let mut good = 0;
        for seed in 0..20 {
            let mut s = AgentState::new(36, 4, 0.9, config(1, 0), ChaCha8Rng::seed_from_u64(seed)).unwrap();
            let mut sampler = Sampler::new(SamplingScheme::UniformStateAction, ChaCha8Rng::seed_from_u64(100 + seed));
            for _ in 0..10_000 {
                let (x, a, r, y) = sampler.next(&env);
                s.step(x, a, r, y);
            }
            let exact = apply_kernel(&env.mdp, s.basis_functions()[0]).unwrap();
            // Entries are O(1) with |φ|_2 = √n; rescale to a unit-range function for the check.
            let range = s.basis_functions()[0].iter().fold(0.0f64, |m, v| m.max(v.abs()));
            if sup_distance(s.query_estimates()[0], &exact) / range < 0.05 * 4.0 {
                good += 1;
            }
        }
        assert!(good >= 19, "{good}");
    }

    #[test]
    fn rotation_orthogonalises_against_newest_functions() {
        let mut s = agent(3, 2);
        let v: Vec<f64> = (0..36).map(|x| (x as f64 * 0.3).cos() * 10.0).collect();
        assert!(!s.rotate_basis(&v).unwrap());
        let f = s.basis_functions();
        assert_eq!(f.len(), 5);
        let new = f[4];
        assert!((dot(new, new) - 36.0).abs() < 1e-9);
        for old in &f[2..4] {
            assert!(dot(new, old).abs() <= 1e-8);
        }
        assert!(s.ages(4).iter().all(|a| *a == 0));
        assert!(s.query_estimates()[4].iter().all(|q| *q == 0.0));
    }

    #[test]
    fn orthogonal_input_is_only_rescaled() {
        let mut s = agent(1, 0);
        let v: Vec<f64> = (0..36).map(|x| x as f64).collect();
        s.rotate_basis(&v).unwrap();
        let scale = 6.0 / dot(&v, &v).sqrt();
        for (a, b) in s.basis_functions()[0].iter().zip(&v) {
            assert!((a - b * scale).abs() < 1e-12);
        }
    }

    #[test]
    fn span_input_is_degenerate() {
        let mut s = agent(2, 0);
        let v: Vec<f64> = s.basis_functions()[1].iter().map(|x| 3.0 * x).collect();
        assert!(s.rotate_basis(&v).unwrap());
        assert_eq!(s.degenerate_rotations(), 1);
        let f = s.basis_functions();
        assert!(dot(f[0], f[1]).abs() < 1e-8);
    }

    #[test]
    fn exact_statistics_reproduce_moco_on_the_true_model() {
        let env = cliffwalk();
        let mut s = agent(2, 1);
        // Plant the true kernel and exact queries.
        for pair in 0..144 {
            s.counts[pair] = 1_000_000;
            for y in 0..36 {
                s.transitions[pair * 36 + y] = (env.mdp.kernel()[pair * 36 + y] * 1e6).round() as u64;
            }
            s.counts[pair] = s.transitions[pair * 36..(pair + 1) * 36].iter().sum();
        }
        s.reward_mean = env.mdp.rewards().to_vec();
        let model = s.model(0.0).unwrap();
        for slot in &mut s.basis {
            slot.psi = apply_kernel(&env.mdp, &slot.phi).unwrap();
        }
        let plan = s.plan(0.0, &Mode::Control, &SolverOptions::default()).unwrap();
        let basis = BasisSet::new(
            s.basis.iter().take(2).map(|b| b.phi.clone()).collect(),
            s.basis.iter().take(2).map(|b| b.psi.clone()).collect(),
        )
        .unwrap();
        let (v, _) = moco_control(&model, &basis, 0.1).unwrap();
        assert!(sup_distance(&plan.values, &v) < 1e-9);
    }

    #[test]
    fn q_learning_with_zero_rate_is_inert() {
        let mut q = QTable::new(3, 2, 0.9);
        q.q = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        q.q_learning_step(0, 1, 10.0, 2, &LearningRate { alpha: 0.0, n: 100 });
        assert_eq!(q.q(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn rotation_and_evaluation_cadence() {
        let env = cliffwalk();
        let cfg = RunConfig {
            steps: 1000,
            eval_every: 200,
            lambda: 0.5,
            sampling: SamplingScheme::UniformStateAction,
            mode: Mode::Control,
            solver: SolverOptions::default(),
        };
        let agent = Agent::MocoDyna(MocoDynaConfig { d: 2, c: 1, beta: 0.16, k: 300, basis_norm: None });
        let res = run_agent(&env, &agent, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(res.error.is_none(), "{:?}", res.error);
        assert_eq!(res.rotations, 3);
        assert_eq!(res.points.iter().map(|p| p.step).collect::<Vec<_>>(), vec![200, 400, 600, 800, 1000]);
        for p in &res.points {
            assert!(p.model_tv_corrected.is_some() && p.policy_optimal.is_some());
        }
    }

    #[test]
    fn dyna_without_smoothing_approaches_v_star() {
        let env = cliffwalk();
        let cfg = RunConfig {
            steps: 100_000,
            eval_every: 50_000,
            lambda: 0.0,
            sampling: SamplingScheme::UniformStateAction,
            mode: Mode::Control,
            solver: SolverOptions::default(),
        };
        let res = run_agent(&env, &Agent::Dyna { plan_every: 10_000 }, &cfg, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert!(res.last().unwrap().normalized_error < 0.05, "{:?}", res.last());
    }

    #[test]
    fn mismatched_baseline_is_rejected() {
        let env = cliffwalk();
        let cfg = RunConfig {
            steps: 10,
            eval_every: 5,
            lambda: 0.0,
            sampling: SamplingScheme::UniformStateAction,
            mode: Mode::Control,
            solver: SolverOptions::default(),
        };
        let lr = LearningRate { alpha: 0.2, n: 5 };
        assert!(run_agent(&env, &Agent::Td(lr), &cfg, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
        let smoothed = smooth(&env.mdp, 0.5).unwrap();
        assert_eq!(smoothed.n_states(), 36);
    }
}
