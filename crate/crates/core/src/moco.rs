//! Model correction: reshape every row of an approximate kernel with MaxEnt so that its
//! expectations of a few basis functions agree with queried values, then plan in the
//! corrected MDP.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::maxent::{gibbs_distribution, kl_divergence, solve_dual_with, MomentProblem, SolveStatus, SolverOptions};
use crate::mdp::{self, apply_kernel, check_len, Mode, Policy, TabularMdp, PLAN_TOL};
use crate::{Error, Result};

/// Basis functions over states and their (possibly noisy) next-state expectations.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct BasisSet {
    functions: Vec<Vec<f64>>,
    queries: Vec<Vec<f64>>,
}

impl BasisSet {
    pub fn new(functions: Vec<Vec<f64>>, queries: Vec<Vec<f64>>) -> Result<Self> {
        if functions.len() != queries.len() {
            return Err(Error::Dimension(format!(
                "{} basis functions but {} query tables",
                functions.len(),
                queries.len()
            )));
        }
        if functions.iter().chain(&queries).flatten().any(|v| !v.is_finite()) {
            return Err(Error::Invalid("non-finite basis or query entry".into()));
        }
        Ok(Self { functions, queries })
    }

    pub fn empty() -> Self {
        Self::default()
    }

    /// Queries each function exactly against `mdp`.
    pub fn exact(mdp: &TabularMdp, functions: Vec<Vec<f64>>) -> Result<Self> {
        let queries = functions.iter().map(|f| apply_kernel(mdp, f)).collect::<Result<_>>()?;
        Self::new(functions, queries)
    }

    pub fn d(&self) -> usize {
        self.functions.len()
    }

    pub fn functions(&self) -> &[Vec<f64>] {
        &self.functions
    }

    pub fn queries(&self) -> &[Vec<f64>] {
        &self.queries
    }

    /// An equivalent basis for exact (`β = 0`) correction. Each function is centred, its
    /// query shifted by the same constant (rows sum to one, so the constraint is unchanged),
    /// and the centred span is orthogonalised to Euclidean norm `√n` with the queries pushed
    /// through the same linear map. Directions whose singular value is below
    /// `rel_tol · σ_max` of the original functions are dropped.
    ///
    /// Without this, a window whose span contains the constants, or whose functions nearly
    /// coincide, gives constraints that round-off makes infeasible and the dual diverges.
    pub fn orthonormalized(&self, rel_tol: f64) -> BasisSet {
        let d = self.d();
        if d == 0 {
            return self.clone();
        }
        let n = self.functions[0].len();
        let pairs = self.queries[0].len();
        let sigma_max = DMatrix::from_fn(n, d, |z, i| self.functions[i][z]).singular_values().max();
        let means: Vec<f64> = self.functions.iter().map(|f| f.iter().sum::<f64>() / n as f64).collect();
        let functions: Vec<Vec<f64>> =
            self.functions.iter().zip(&means).map(|(f, c)| f.iter().map(|v| v - c).collect()).collect();
        let queries: Vec<Vec<f64>> =
            self.queries.iter().zip(&means).map(|(q, c)| q.iter().map(|v| v - c).collect()).collect();
        let f = DMatrix::from_fn(n, d, |z, i| functions[i][z]);
        let svd = f.svd(false, true);
        let v_t = svd.v_t.as_ref().expect("requested V");
        let scale = (n as f64).sqrt();
        let mut out = BasisSet::empty();
        for (k, &sigma) in svd.singular_values.iter().enumerate() {
            if sigma_max == 0.0 || sigma <= rel_tol * sigma_max {
                continue;
            }
            // Column k of V / σ_k, times √n.
            let w: Vec<f64> = (0..d).map(|i| v_t[(k, i)] * scale / sigma).collect();
            let combine = |table: &[Vec<f64>], len: usize| -> Vec<f64> {
                (0..len).map(|j| table.iter().zip(&w).map(|(t, wi)| wi * t[j]).sum()).collect()
            };
            out.functions.push(combine(&functions, n));
            out.queries.push(combine(&queries, pairs));
        }
        out
    }

    fn check_shape(&self, mdp: &TabularMdp) -> Result<()> {
        for (f, q) in self.functions.iter().zip(&self.queries) {
            check_len(f, mdp.n_states(), "basis function")?;
            check_len(q, mdp.n_pairs(), "query table")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RowDiagnostic {
    pub status: RowStatus,
    pub grad_norm: f64,
    pub iterations: usize,
}

/// Serializable mirror of [`SolveStatus`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RowStatus {
    Converged,
    MaxIterations,
    Unbounded,
    Stalled,
}

impl From<SolveStatus> for RowStatus {
    fn from(s: SolveStatus) -> Self {
        match s {
            SolveStatus::Converged => Self::Converged,
            SolveStatus::MaxIterations => Self::MaxIterations,
            SolveStatus::Unbounded => Self::Unbounded,
            SolveStatus::Stalled => Self::Stalled,
        }
    }
}

/// The materialised corrected kernel `P̄` with per-pair duals and solver diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrectedKernel {
    pub n_states: usize,
    pub n_actions: usize,
    pub d: usize,
    pub beta: f64,
    /// Row-major `[x][a][y]`, same layout as [`TabularMdp`].
    pub kernel: Vec<f64>,
    /// Row-major `[x][a][i]`.
    pub duals: Vec<f64>,
    pub diagnostics: Vec<RowDiagnostic>,
}

impl CorrectedKernel {
    pub fn row(&self, x: usize, a: usize) -> &[f64] {
        let start = (x * self.n_actions + a) * self.n_states;
        &self.kernel[start..start + self.n_states]
    }

    pub fn dual(&self, x: usize, a: usize) -> &[f64] {
        let start = (x * self.n_actions + a) * self.d;
        &self.duals[start..start + self.d]
    }

    /// Pairs whose dual solve did not reach the tolerance.
    pub fn unconverged(&self) -> usize {
        self.diagnostics.iter().filter(|d| d.status != RowStatus::Converged).count()
    }

    /// The corrected MDP: `model`'s rewards and discount with `P̄`.
    pub fn to_mdp(&self, model: &TabularMdp) -> Result<TabularMdp> {
        model.with_kernel(self.kernel.clone())
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))
    }
}

pub fn correct_kernel(model: &TabularMdp, basis: &BasisSet, beta: f64) -> Result<CorrectedKernel> {
    correct_kernel_with(model, basis, beta, &SolverOptions::default())
}

/// Solves one MaxEnt problem per `(x, a)` in parallel. A pair whose solve falls short
/// keeps the solver's last iterate (still a valid Gibbs distribution) and is flagged in
/// the diagnostics.
pub fn correct_kernel_with(
    model: &TabularMdp,
    basis: &BasisSet,
    beta: f64,
    opts: &SolverOptions,
) -> Result<CorrectedKernel> {
    basis.check_shape(model)?;
    if !(beta >= 0.0 && beta.is_finite()) {
        return Err(Error::Invalid(format!("beta must be finite and nonnegative, got {beta}")));
    }
    let (n, m, d) = (model.n_states(), model.n_actions(), basis.d());
    let flat: Vec<f64> = basis.functions.concat();

    let rows: Vec<(Vec<f64>, Vec<f64>, RowDiagnostic)> = (0..n * m)
        .into_par_iter()
        .map(|pair| {
            let prior = model.row(pair / m, pair % m);
            if d == 0 {
                let diag = RowDiagnostic { status: RowStatus::Converged, grad_norm: 0.0, iterations: 0 };
                return Ok((prior.to_vec(), Vec::new(), diag));
            }
            let targets = basis.queries.iter().map(|q| q[pair]).collect();
            let problem = MomentProblem::from_flat(prior.to_vec(), flat.clone(), d, targets, beta)?;
            let sol = solve_dual_with(&problem, opts);
            let row = gibbs_distribution(&problem, &sol.lambda)?;
            let total: f64 = row.iter().sum();
            if !total.is_finite() || (total - 1.0).abs() > 1e-10 {
                return Err(Error::Numerical(format!("corrected row {pair} sums to {total}")));
            }
            let diag = RowDiagnostic {
                status: sol.status.into(),
                grad_norm: sol.grad_norm,
                iterations: sol.iterations,
            };
            Ok((row, sol.lambda, diag))
        })
        .collect::<Result<_>>()?;

    let unconverged = rows.iter().filter(|r| r.2.status != RowStatus::Converged).count();
    if unconverged > 0 {
        log::debug!("{unconverged} of {} dual solves did not converge", n * m);
    }
    let mut kernel = Vec::with_capacity(n * m * n);
    let mut duals = Vec::with_capacity(n * m * d);
    let mut diagnostics = Vec::with_capacity(n * m);
    for (row, lambda, diag) in rows {
        kernel.extend(row);
        duals.extend(lambda);
        diagnostics.push(diag);
    }
    Ok(CorrectedKernel { n_states: n, n_actions: m, d, beta, kernel, duals, diagnostics })
}

/// `V̄^π`: exact evaluation of `policy` in the corrected MDP.
pub fn moco_pe(model: &TabularMdp, basis: &BasisSet, beta: f64, policy: &Policy) -> Result<Vec<f64>> {
    let corrected = correct_kernel(model, basis, beta)?.to_mdp(model)?;
    mdp::policy_evaluation_exact(&corrected, policy)
}

/// `(V̄*, π̄*)`: value iteration in the corrected MDP to [`PLAN_TOL`].
pub fn moco_control(model: &TabularMdp, basis: &BasisSet, beta: f64) -> Result<(Vec<f64>, Policy)> {
    let corrected = correct_kernel(model, basis, beta)?.to_mdp(model)?;
    mdp::value_iteration(&corrected, PLAN_TOL, 1_000_000)
}

/// Corrects and solves for `mode` in one go, keeping the kernel around.
pub fn moco_solve(
    model: &TabularMdp,
    basis: &BasisSet,
    beta: f64,
    mode: &Mode,
    opts: &SolverOptions,
) -> Result<(Vec<f64>, Option<Policy>, CorrectedKernel)> {
    let corrected = correct_kernel_with(model, basis, beta, opts)?;
    let (v, pi) = mdp::solve_mode(&corrected.to_mdp(model)?, mode, PLAN_TOL)?;
    Ok((v, pi, corrected))
}

/// Per-pair model and query errors.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorTables {
    /// `√KL(P(·|x,a) ‖ P̂(·|x,a))`; `+inf` where `P̂` misses part of `P`'s support.
    pub eps_model: Vec<f64>,
    /// `|ψ(x,a) − (Pφ)(x,a)|_2`.
    pub eps_query: Vec<f64>,
}

impl ErrorTables {
    /// Largest finite model error.
    pub fn model_sup(&self) -> f64 {
        finite_sup(&self.eps_model)
    }

    pub fn query_sup(&self) -> f64 {
        finite_sup(&self.eps_query)
    }

    /// Pairs with an infinite model error.
    pub fn flagged(&self) -> Vec<usize> {
        (0..self.eps_model.len()).filter(|&i| !self.eps_model[i].is_finite()).collect()
    }
}

fn finite_sup(v: &[f64]) -> f64 {
    v.iter().filter(|x| x.is_finite()).fold(0.0, |m, x| m.max(*x))
}

pub fn error_tables(true_mdp: &TabularMdp, model: &TabularMdp, basis: &BasisSet) -> Result<ErrorTables> {
    if true_mdp.n_states() != model.n_states() || true_mdp.n_actions() != model.n_actions() {
        return Err(Error::Dimension("true MDP and model differ in shape".into()));
    }
    basis.check_shape(true_mdp)?;
    let m = true_mdp.n_actions();
    let exact: Vec<Vec<f64>> = basis.functions.iter().map(|f| apply_kernel(true_mdp, f)).collect::<Result<_>>()?;
    let eps_model = (0..true_mdp.n_pairs())
        .map(|i| kl_divergence(true_mdp.row(i / m, i % m), model.row(i / m, i % m)).sqrt())
        .collect();
    let eps_query = (0..true_mdp.n_pairs())
        .map(|i| {
            basis
                .queries
                .iter()
                .zip(&exact)
                .map(|(q, e)| (q[i] - e[i]).powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .collect();
    Ok(ErrorTables { eps_model, eps_query })
}

/// `|ε_Query|_inf / |ε_Model|_inf`, clamped to `[1e-6, 1e6]`.
pub fn default_beta(tables: &ErrorTables) -> f64 {
    let (q, m) = (tables.query_sup(), tables.model_sup());
    let raw = if m == 0.0 { 1e6 } else { q / m };
    raw.clamp(1e-6, 1e6)
}
