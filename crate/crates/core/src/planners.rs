//! Iterative planners that query the true dynamics once per iteration.
//!
//! Every planner returns an [`IterationTrace`] holding `V_0, …, V_K`. Solver failures
//! mid-run end the trace early with the error recorded, so partial runs stay inspectable.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::analysis::normalized_error;
use crate::maxent::SolverOptions;
use crate::mdp::{self, apply_kernel, sup_distance, sup_norm, Mode, Policy, TabularMdp, PLAN_TOL};
use crate::moco::{moco_solve, BasisSet};
use crate::{Error, Result};

/// Access to `Pφ`, optionally perturbed by independent uniform noise on `[−ε, ε]` per pair.
#[derive(Debug, Clone)]
pub struct QueryOracle {
    mdp: TabularMdp,
    noise: f64,
    rng: ChaCha8Rng,
    calls: usize,
}

impl QueryOracle {
    pub fn exact(mdp: TabularMdp) -> Self {
        Self { mdp, noise: 0.0, rng: ChaCha8Rng::seed_from_u64(0), calls: 0 }
    }

    pub fn noisy(mdp: TabularMdp, half_width: f64, rng: ChaCha8Rng) -> Result<Self> {
        if !(half_width >= 0.0 && half_width.is_finite()) {
            return Err(Error::Invalid(format!("noise half-width must be finite and >= 0, got {half_width}")));
        }
        Ok(Self { mdp, noise: half_width, rng, calls: 0 })
    }

    pub fn query(&mut self, phi: &[f64]) -> Result<Vec<f64>> {
        let mut psi = apply_kernel(&self.mdp, phi)?;
        self.calls += 1;
        if self.noise > 0.0 {
            for v in &mut psi {
                *v += self.rng.gen_range(-self.noise..=self.noise);
            }
        }
        Ok(psi)
    }

    pub fn calls(&self) -> usize {
        self.calls
    }

    pub fn noise(&self) -> f64 {
        self.noise
    }

    pub fn mdp(&self) -> &TabularMdp {
        &self.mdp
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct IterationTrace {
    /// `V_0, …, V_K`.
    pub values: Vec<Vec<f64>>,
    /// Greedy policies in control mode, `None` otherwise.
    pub policies: Vec<Option<Policy>>,
    /// `queries[k]` answers the query issued on `values[k]`.
    pub queries: Vec<Vec<f64>>,
    pub oracle_calls: usize,
    /// Iteration at which divergence was first detected.
    pub diverged: Option<usize>,
    /// Error that cut the run short.
    pub error: Option<String>,
}

impl IterationTrace {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn last(&self) -> Option<&[f64]> {
        self.values.last().map(Vec::as_slice)
    }

    pub fn normalized_errors(&self, target: &[f64]) -> Result<Vec<f64>> {
        self.values.iter().map(|v| normalized_error(v, target)).collect()
    }

    pub fn sup_errors(&self, target: &[f64]) -> Vec<f64> {
        self.values.iter().map(|v| sup_distance(v, target)).collect()
    }

    /// First iteration whose normalized error is below `threshold`.
    pub fn iterations_to(&self, target: &[f64], threshold: f64) -> Result<Option<usize>> {
        Ok(self.normalized_errors(target)?.iter().position(|e| *e < threshold))
    }

    fn push(&mut self, v: Vec<f64>, pi: Option<Policy>) {
        self.values.push(v);
        self.policies.push(pi);
    }
}

fn check_run(mdp: &TabularMdp, oracle: &QueryOracle, k: usize, mode: &Mode) -> Result<()> {
    if k == 0 {
        return Err(Error::Invalid("K must be at least 1".into()));
    }
    let truth = oracle.mdp();
    if truth.n_states() != mdp.n_states() || truth.n_actions() != mdp.n_actions() {
        return Err(Error::Dimension("model and oracle MDP differ in shape".into()));
    }
    if let Mode::Evaluation(pi) = mode {
        if pi.n_states() != mdp.n_states() || pi.n_actions() != mdp.n_actions() {
            return Err(Error::Dimension("policy does not match the MDP".into()));
        }
    }
    Ok(())
}

/// Relative singular-value floor for the exact-query window; see [`BasisSet::orthonormalized`].
pub const WINDOW_RANK_TOL: f64 = 1e-10;

/// MoCoVI: correct the model with the `d` most recent iterates and their queries, plan,
/// then query the new iterate. The window starts as `d` zero functions with zero queries.
pub fn mocovi(
    model: &TabularMdp,
    oracle: &mut QueryOracle,
    d: usize,
    beta: f64,
    k: usize,
    mode: &Mode,
) -> Result<IterationTrace> {
    mocovi_with(model, oracle, d, beta, k, mode, &SolverOptions::default())
}

pub fn mocovi_with(
    model: &TabularMdp,
    oracle: &mut QueryOracle,
    d: usize,
    beta: f64,
    k: usize,
    mode: &Mode,
    opts: &SolverOptions,
) -> Result<IterationTrace> {
    check_run(model, oracle, k, mode)?;
    if d == 0 {
        return Err(Error::Invalid("d must be at least 1".into()));
    }
    let start = oracle.calls();
    let mut trace = IterationTrace::default();
    for it in 0..=k {
        // Zero functions constrain nothing, so only real iterates enter the correction.
        let lo = it.saturating_sub(d);
        let basis = BasisSet::new(trace.values[lo..it].to_vec(), trace.queries[lo..it].to_vec())?;
        let basis = if beta == 0.0 { basis.orthonormalized(WINDOW_RANK_TOL) } else { basis };
        let (v, pi) = match moco_solve(model, &basis, beta, mode, opts) {
            Ok((v, pi, _)) => (v, pi),
            Err(e) => {
                trace.error = Some(e.to_string());
                break;
            }
        };
        trace.push(v, pi);
        if it == k {
            break;
        }
        match oracle.query(&trace.values[it]) {
            Ok(q) => trace.queries.push(q),
            Err(e) => {
                trace.error = Some(e.to_string());
                break;
            }
        }
    }
    trace.oracle_calls = oracle.calls() - start;
    Ok(trace)
}

/// Approximate VI from `V_0 = 0`: `V_{k+1} = max_a {r + γ ψ_k}` (or the `π`-average in
/// evaluation mode) where `ψ_k` answers the query on `V_k`.
pub fn approx_value_iteration(oracle: &mut QueryOracle, k: usize, mode: &Mode) -> Result<IterationTrace> {
    let truth = oracle.mdp().clone();
    check_run(&truth, oracle, k, mode)?;
    let (n, m, gamma) = (truth.n_states(), truth.n_actions(), truth.discount());
    let start = oracle.calls();
    let mut trace = IterationTrace::default();
    trace.push(vec![0.0; n], None);
    for it in 0..k {
        let psi = oracle.query(&trace.values[it])?;
        let q: Vec<f64> = truth.rewards().iter().zip(&psi).map(|(r, p)| r + gamma * p).collect();
        let (v, pi) = match mode {
            Mode::Evaluation(pi) => (pi.average(&q), None),
            Mode::Control => {
                let greedy: Vec<usize> = q.chunks(m).map(mdp::argmax).collect();
                let v = greedy.iter().enumerate().map(|(x, &a)| q[x * m + a]).collect();
                (v, Some(Policy::deterministic(m, &greedy)?))
            }
        };
        trace.queries.push(psi);
        trace.push(v, pi);
    }
    if let Mode::Control = mode {
        trace.policies[0] = Some(mdp::greedy_policy(&truth, &trace.values[0])?);
    }
    trace.oracle_calls = oracle.calls() - start;
    Ok(trace)
}

/// OS-VI: `V_{k+1}` solves the model MDP with reward `r + γ(ψ_k − P̂V_k)`, starting from
/// the pure model solution. Divergence (`|V_k|_inf > 10 |r|_inf / (1 − γ)`) is flagged and
/// the run continues.
pub fn osvi(model: &TabularMdp, oracle: &mut QueryOracle, k: usize, mode: &Mode) -> Result<IterationTrace> {
    check_run(model, oracle, k, mode)?;
    let gamma = model.discount();
    let limit = 10.0 * model.max_abs_reward() / (1.0 - gamma);
    let start = oracle.calls();
    let mut trace = IterationTrace::default();
    let mut reward = model.rewards().to_vec();
    for it in 0..=k {
        let step = model.with_rewards(reward.clone()).and_then(|shifted| {
            let scale = 1.0f64.max(shifted.max_abs_reward());
            mdp::solve_mode(&shifted, mode, PLAN_TOL * scale)
        });
        let (v, pi) = match step {
            Ok(s) => s,
            Err(e) => {
                trace.error = Some(e.to_string());
                break;
            }
        };
        if trace.diverged.is_none() && sup_norm(&v) > limit {
            log::warn!("OS-VI diverged at iteration {it}");
            trace.diverged = Some(it);
        }
        trace.push(v, pi);
        if it == k {
            break;
        }
        let v = &trace.values[it];
        let psi = oracle.query(v)?;
        let pv = apply_kernel(model, v)?;
        reward = model.rewards().iter().zip(psi.iter().zip(&pv)).map(|(r, (q, p))| r + gamma * (q - p)).collect();
        trace.queries.push(psi);
    }
    trace.oracle_calls = oracle.calls() - start;
    Ok(trace)
}

/// Plans once in the model and repeats the answer for `k + 1` iterations, with no queries.
pub fn pure_model(model: &TabularMdp, k: usize, mode: &Mode) -> Result<IterationTrace> {
    let (v, pi) = mdp::solve_mode(model, mode, PLAN_TOL)?;
    let mut trace = IterationTrace::default();
    for _ in 0..=k {
        trace.push(v.clone(), pi.clone());
    }
    Ok(trace)
}

/// Noise-free initial error plus the accumulated noise term for approximate VI:
/// `γ^K |V* − V_0| + ε γ (1 − γ^{K−1}) / (1 − γ)²`.
pub fn approx_vi_bound(gamma: f64, k: usize, initial_error: f64, noise: f64) -> f64 {
    gamma.powi(k as i32) * initial_error + noise * gamma * (1.0 - gamma.powi(k as i32 - 1)) / (1.0 - gamma).powi(2)
}
