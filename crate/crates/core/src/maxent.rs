//! Minimum cross-entropy density estimation on a finite support.
//!
//! Given a prior `p̂`, basis functions `φ_1..φ_d` and targets `φ̄`, the corrected
//! distribution is the Gibbs reweighting `q_λ ∝ p̂ · exp(λ·φ)` at the maximiser of the
//! concave dual
//!
//! ```text
//! D(λ) = λ·φ̄ − log Σ_z p̂(z) exp(λ·φ(z)) − (β²/4)|λ|²
//! ```
//!
//! With `β = 0` the moments are matched exactly (when feasible). With `β > 0` the dual is
//! strongly concave and the constraints become soft.
//!
//! The solver is BFGS with Armijo backtracking. The line search measures the change in
//! `D` directly, relative to the current Gibbs distribution (via `expm1`/`ln_1p`), instead
//! of differencing two objective values. This keeps steps acceptable when the gradient is
//! already near 1e-9 and the objective change is far below f64 resolution of `D` itself.

use crate::mdp::dot;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct MomentProblem {
    prior: Vec<f64>,
    /// `d x n`, row-major.
    basis: Vec<f64>,
    targets: Vec<f64>,
    beta: f64,
    d: usize,
    support: Vec<usize>,
}

impl MomentProblem {
    pub fn new(prior: Vec<f64>, basis: Vec<Vec<f64>>, targets: Vec<f64>, beta: f64) -> Result<Self> {
        let n = prior.len();
        let d = basis.len();
        let mut flat = Vec::with_capacity(n * d);
        for (i, row) in basis.iter().enumerate() {
            if row.len() != n {
                return Err(Error::Dimension(format!(
                    "basis function {i} has length {}, prior has {n}",
                    row.len()
                )));
            }
            flat.extend_from_slice(row);
        }
        Self::from_flat(prior, flat, d, targets, beta)
    }

    /// `basis` is `d x n`, row-major.
    pub fn from_flat(prior: Vec<f64>, basis: Vec<f64>, d: usize, targets: Vec<f64>, beta: f64) -> Result<Self> {
        let n = prior.len();
        if n == 0 {
            return Err(Error::Invalid("empty support".into()));
        }
        if basis.len() != n * d || targets.len() != d {
            return Err(Error::Dimension(format!(
                "basis has {} entries and targets {}, expected {} and {d}",
                basis.len(),
                targets.len(),
                n * d
            )));
        }
        if prior.iter().chain(&basis).chain(&targets).any(|v| !v.is_finite()) || !beta.is_finite() {
            return Err(Error::Invalid("non-finite entry in moment problem".into()));
        }
        if beta < 0.0 {
            return Err(Error::Invalid(format!("beta must be nonnegative, got {beta}")));
        }
        if prior.iter().any(|p| *p < 0.0) || (prior.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
            return Err(Error::Invalid("prior is not a probability vector".into()));
        }
        let support = (0..n).filter(|&z| prior[z] > 0.0).collect();
        Ok(Self { prior, basis, targets, beta, d, support })
    }

    pub fn n(&self) -> usize {
        self.prior.len()
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn prior(&self) -> &[f64] {
        &self.prior
    }

    pub fn targets(&self) -> &[f64] {
        &self.targets
    }

    pub fn basis_function(&self, i: usize) -> &[f64] {
        let n = self.n();
        &self.basis[i * n..(i + 1) * n]
    }

    pub fn with_targets(&self, targets: Vec<f64>) -> Result<Self> {
        Self::from_flat(self.prior.clone(), self.basis.clone(), self.d, targets, self.beta)
    }

    fn phi(&self, i: usize, z: usize) -> f64 {
        self.basis[i * self.prior.len() + z]
    }

    fn check_lambda(&self, lambda: &[f64]) -> Result<()> {
        if lambda.len() != self.d {
            return Err(Error::Dimension(format!("lambda has length {}, expected {}", lambda.len(), self.d)));
        }
        if lambda.iter().any(|l| !l.is_finite()) {
            return Err(Error::Invalid("non-finite lambda".into()));
        }
        Ok(())
    }

    fn gibbs(&self, lambda: &[f64]) -> Gibbs {
        if lambda.iter().all(|l| *l == 0.0) {
            // Exactly the prior; its mass is 1 by construction.
            let q: Vec<f64> = self.support.iter().map(|&z| self.prior[z]).collect();
            let mean = (0..self.d)
                .map(|i| self.support.iter().zip(&q).map(|(&z, w)| w * self.phi(i, z)).sum())
                .collect();
            return Gibbs { log_z: 0.0, q, mean };
        }
        let scores: Vec<f64> = self
            .support
            .iter()
            .map(|&z| (0..self.d).map(|i| lambda[i] * self.phi(i, z)).sum())
            .collect();
        let shift = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut q: Vec<f64> = self
            .support
            .iter()
            .zip(&scores)
            .map(|(&z, s)| self.prior[z] * (s - shift).exp())
            .collect();
        let total: f64 = q.iter().sum();
        q.iter_mut().for_each(|w| *w /= total);
        let mean = (0..self.d)
            .map(|i| self.support.iter().zip(&q).map(|(&z, w)| w * self.phi(i, z)).sum())
            .collect();
        Gibbs { log_z: shift + total.ln(), q, mean }
    }

    fn objective_at(&self, lambda: &[f64], g: &Gibbs) -> f64 {
        dot(lambda, &self.targets) - g.log_z - 0.25 * self.beta * self.beta * dot(lambda, lambda)
    }

    fn gradient_at(&self, lambda: &[f64], g: &Gibbs) -> Vec<f64> {
        let half_b2 = 0.5 * self.beta * self.beta;
        (0..self.d)
            .map(|i| self.targets[i] - g.mean[i] - half_b2 * lambda[i])
            .collect()
    }

    /// `D(λ + step) − D(λ)` evaluated relative to `q_λ`.
    fn increment(&self, g: &Gibbs, grad: &[f64], step: &[f64]) -> f64 {
        let mut acc = 0.0;
        for (k, &z) in self.support.iter().enumerate() {
            if g.q[k] == 0.0 {
                continue;
            }
            let u: f64 = (0..self.d).map(|i| step[i] * (self.phi(i, z) - g.mean[i])).sum();
            acc += g.q[k] * u.exp_m1();
        }
        dot(step, grad) - 0.25 * self.beta * self.beta * dot(step, step) - acc.ln_1p()
    }

    /// Per-coordinate range check; a necessary condition for feasibility at β = 0.
    fn box_feasible(&self) -> bool {
        (0..self.d).all(|i| {
            let vals = self.support.iter().map(|&z| self.phi(i, z));
            let lo = vals.clone().fold(f64::INFINITY, f64::min);
            let hi = vals.fold(f64::NEG_INFINITY, f64::max);
            let slack = 1e-12 * (1.0 + lo.abs().max(hi.abs()));
            self.targets[i] >= lo - slack && self.targets[i] <= hi + slack
        })
    }
}

struct Gibbs {
    log_z: f64,
    /// Probabilities on the prior's support, in support order.
    q: Vec<f64>,
    mean: Vec<f64>,
}

pub fn dual_objective(problem: &MomentProblem, lambda: &[f64]) -> Result<f64> {
    problem.check_lambda(lambda)?;
    Ok(problem.objective_at(lambda, &problem.gibbs(lambda)))
}

pub fn dual_gradient(problem: &MomentProblem, lambda: &[f64]) -> Result<Vec<f64>> {
    problem.check_lambda(lambda)?;
    Ok(problem.gradient_at(lambda, &problem.gibbs(lambda)))
}

/// `q_λ` over the full index set; exactly zero off the prior's support.
pub fn gibbs_distribution(problem: &MomentProblem, lambda: &[f64]) -> Result<Vec<f64>> {
    problem.check_lambda(lambda)?;
    let g = problem.gibbs(lambda);
    let mut q = vec![0.0; problem.n()];
    for (&z, w) in problem.support.iter().zip(&g.q) {
        q[z] = *w;
    }
    Ok(q)
}

/// `Σ p ln(p/q)` in nats with `0 ln 0 = 0`. Returns `+inf` when `p` is not absolutely
/// continuous with respect to `q`.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    assert_eq!(p.len(), q.len(), "kl_divergence: length mismatch");
    let mut kl = 0.0;
    for (&pz, &qz) in p.iter().zip(q) {
        if pz > 0.0 {
            if qz <= 0.0 {
                return f64::INFINITY;
            }
            kl += pz * (pz / qz).ln();
        }
    }
    kl.max(0.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolveStatus {
    Converged,
    MaxIterations,
    /// `β = 0` and the targets cannot be matched; `|λ|_inf` ran past the cap.
    Unbounded,
    /// The line search could not make progress (round-off floor above the tolerance).
    Stalled,
}

#[derive(Debug, Clone, Copy)]
pub struct SolverOptions {
    pub tol: f64,
    pub max_iters: usize,
    pub lambda_cap: f64,
    /// Keep every accepted iterate and its objective increment.
    pub record_path: bool,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self { tol: 1e-9, max_iters: 500, lambda_cap: 1e6, record_path: false }
    }
}

impl SolverOptions {
    pub fn with_tol(tol: f64) -> Self {
        Self { tol, ..Self::default() }
    }
}

#[derive(Debug, Clone)]
pub struct DualSolution {
    pub lambda: Vec<f64>,
    pub log_normalizer: f64,
    pub objective: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    pub status: SolveStatus,
    /// Accepted iterates, starting at λ = 0 (only with `record_path`).
    pub path: Vec<Vec<f64>>,
    /// `D(λ_{k+1}) − D(λ_k)` for each accepted step (only with `record_path`).
    pub increments: Vec<f64>,
}

impl DualSolution {
    pub fn converged(&self) -> bool {
        self.status == SolveStatus::Converged
    }
}

/// Solves the dual and returns the last iterate whatever the outcome; the status says
/// whether it is optimal.
pub fn solve_dual_with(problem: &MomentProblem, opts: &SolverOptions) -> DualSolution {
    let d = problem.d;
    let mut lambda = vec![0.0; d];
    let mut g = problem.gibbs(&lambda);
    let mut grad = problem.gradient_at(&lambda, &g);
    let mut path = Vec::new();
    let mut increments = Vec::new();
    if opts.record_path {
        path.push(lambda.clone());
    }

    let finish = |lambda: Vec<f64>, g: &Gibbs, grad: &[f64], iterations, status, path, increments| DualSolution {
        objective: problem.objective_at(&lambda, g),
        log_normalizer: g.log_z,
        grad_norm: dot(grad, grad).sqrt(),
        lambda,
        iterations,
        status,
        path,
        increments,
    };

    if problem.beta == 0.0 && !problem.box_feasible() {
        return finish(lambda, &g, &grad, 0, SolveStatus::Unbounded, path, increments);
    }

    let identity = |h: &mut Vec<f64>, scale: f64| {
        h.iter_mut().for_each(|v| *v = 0.0);
        (0..d).for_each(|i| h[i * d + i] = scale);
    };
    let mut hinv = vec![0.0; d * d];
    identity(&mut hinv, 1.0);
    let mut scaled = false;

    for iter in 0..opts.max_iters {
        if dot(&grad, &grad).sqrt() <= opts.tol {
            return finish(lambda, &g, &grad, iter, SolveStatus::Converged, path, increments);
        }

        let mut accepted = None;
        for attempt in 0..2 {
            let mut dir: Vec<f64> = (0..d).map(|i| dot(&hinv[i * d..(i + 1) * d], &grad)).collect();
            let mut slope = dot(&dir, &grad);
            if attempt == 1 || !(slope > 0.0 && slope.is_finite()) {
                dir = grad.clone();
                slope = dot(&grad, &grad);
            }
            let mut t = 1.0;
            for _ in 0..80 {
                let step: Vec<f64> = dir.iter().map(|v| t * v).collect();
                let inc = problem.increment(&g, &grad, &step);
                if inc >= 1e-4 * t * slope {
                    accepted = Some((step, inc));
                    break;
                }
                t *= 0.5;
            }
            if accepted.is_some() {
                break;
            }
            // Gradient-descent fallback with a fresh curvature model.
            identity(&mut hinv, 1.0);
            scaled = false;
        }
        let Some((step, inc)) = accepted else {
            return finish(lambda, &g, &grad, iter, SolveStatus::Stalled, path, increments);
        };

        lambda.iter_mut().zip(&step).for_each(|(l, s)| *l += s);
        let g_new = problem.gibbs(&lambda);
        let grad_new = problem.gradient_at(&lambda, &g_new);
        if opts.record_path {
            path.push(lambda.clone());
            increments.push(inc);
        }

        // Curvature pair for the concave objective: y = ∇D(λ) − ∇D(λ + s).
        let y: Vec<f64> = grad.iter().zip(&grad_new).map(|(a, b)| a - b).collect();
        let sy = dot(&step, &y);
        let yy = dot(&y, &y);
        if sy > 1e-12 * dot(&step, &step).sqrt() * yy.sqrt() && sy > 0.0 {
            if !scaled {
                identity(&mut hinv, sy / yy);
                scaled = true;
            }
            bfgs_update(&mut hinv, &step, &y, sy);
        } else {
            identity(&mut hinv, 1.0);
            scaled = false;
        }
        g = g_new;
        grad = grad_new;

        if problem.beta == 0.0 && lambda.iter().any(|l| l.abs() > opts.lambda_cap) {
            return finish(lambda, &g, &grad, iter + 1, SolveStatus::Unbounded, path, increments);
        }
    }
    let status = if dot(&grad, &grad).sqrt() <= opts.tol {
        SolveStatus::Converged
    } else {
        SolveStatus::MaxIterations
    };
    finish(lambda, &g, &grad, opts.max_iters, status, path, increments)
}

/// `H ← (I − ρ s yᵀ) H (I − ρ y sᵀ) + ρ s sᵀ` with `ρ = 1/(sᵀy)`.
fn bfgs_update(h: &mut [f64], s: &[f64], y: &[f64], sy: f64) {
    let d = s.len();
    let rho = 1.0 / sy;
    let hy: Vec<f64> = (0..d).map(|i| dot(&h[i * d..(i + 1) * d], y)).collect();
    let yhy = dot(y, &hy);
    for i in 0..d {
        for j in 0..d {
            h[i * d + j] += -rho * (s[i] * hy[j] + hy[i] * s[j]) + (rho * rho * yhy + rho) * s[i] * s[j];
        }
    }
}

/// Solves to `|∇D|_2 <= tol`; anything short of that is an error.
pub fn solve_dual(problem: &MomentProblem, tol: f64, max_iters: usize) -> Result<DualSolution> {
    if tol.is_nan() || tol <= 0.0 {
        return Err(Error::Invalid(format!("tolerance must be positive, got {tol}")));
    }
    let opts = SolverOptions { tol, max_iters, ..SolverOptions::default() };
    let sol = solve_dual_with(problem, &opts);
    match sol.status {
        SolveStatus::Converged => Ok(sol),
        SolveStatus::Unbounded => Err(Error::UnboundedDual { cap: opts.lambda_cap }),
        SolveStatus::MaxIterations | SolveStatus::Stalled => {
            Err(Error::NotConverged { iterations: sol.iterations, residual: sol.grad_norm })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn binary(target: f64, beta: f64) -> MomentProblem {
        MomentProblem::new(vec![0.5, 0.5], vec![vec![1.0, 0.0]], vec![target], beta).unwrap()
    }

    #[test]
    fn objective_vanishes_at_zero() {
        let p = MomentProblem::new(vec![0.2, 0.3, 0.5], vec![vec![1.0, -2.0, 4.0]], vec![3.0], 0.7).unwrap();
        assert_eq!(dual_objective(&p, &[0.0]).unwrap(), 0.0);
    }

    #[test]
    fn objective_binary_hand_value() {
        let l = (7.0f64 / 3.0).ln();
        let expected = 0.7 * l - (0.5 * (7.0 / 3.0) + 0.5f64).ln();
        let got = dual_objective(&binary(0.7, 0.0), &[l]).unwrap();
        assert_abs_diff_eq!(got, expected, epsilon = 1e-15);
        assert_abs_diff_eq!(got, 0.0823, epsilon = 5e-5);
    }

    #[test]
    fn objective_is_stable_for_huge_lambda() {
        let p = MomentProblem::new(
            vec![0.25; 4],
            vec![vec![0.0, 1.0, 0.5, 0.2], vec![1.0, 0.0, 0.3, 0.9]],
            vec![0.5, 0.5],
            0.0,
        )
        .unwrap();
        for lam in [[1000.0, -1000.0], [1000.0, 1000.0], [-1000.0, -1000.0]] {
            assert!(dual_objective(&p, &lam).unwrap().is_finite());
            let q = gibbs_distribution(&p, &lam).unwrap();
            assert_abs_diff_eq!(q.iter().sum::<f64>(), 1.0, epsilon = 1e-10);
        }
    }

    #[test]
    fn nan_inputs_are_rejected() {
        assert!(MomentProblem::new(vec![1.0], vec![vec![f64::NAN]], vec![0.0], 0.0).is_err());
        let p = binary(0.7, 0.0);
        assert!(dual_objective(&p, &[f64::NAN]).is_err());
    }

    #[test]
    fn gradient_at_zero_is_moment_gap() {
        let p = MomentProblem::new(vec![0.2, 0.3, 0.5], vec![vec![1.0, -2.0, 4.0]], vec![3.0], 0.0).unwrap();
        let g = dual_gradient(&p, &[0.0]).unwrap();
        assert_abs_diff_eq!(g[0], 3.0 - (0.2 - 0.6 + 2.0), epsilon = 1e-15);
    }

    #[test]
    fn prior_moments_give_zero_lambda() {
        let prior = vec![0.1, 0.2, 0.3, 0.4];
        let phi = vec![vec![1.0, 2.0, -1.0, 0.5], vec![0.0, 3.0, 1.0, 1.0]];
        let targets: Vec<f64> = phi.iter().map(|f| dot(f, &prior)).collect();
        for beta in [0.0, 0.1, 1.0] {
            let p = MomentProblem::new(prior.clone(), phi.clone(), targets.clone(), beta).unwrap();
            let sol = solve_dual(&p, 1e-9, 500).unwrap();
            assert!(sol.lambda.iter().all(|l| l.abs() < 1e-9));
        }
    }

    #[test]
    fn binary_exact_constraint() {
        let sol = solve_dual(&binary(0.7, 0.0), 1e-12, 500).unwrap();
        let q = gibbs_distribution(&binary(0.7, 0.0), &sol.lambda).unwrap();
        assert_abs_diff_eq!(q[0], 0.7, epsilon = 1e-12);
        assert_abs_diff_eq!(q[1], 0.3, epsilon = 1e-12);
        assert_abs_diff_eq!(sol.lambda[0], (7.0f64 / 3.0).ln(), epsilon = 1e-10);
    }

    #[test]
    fn strong_regularisation_keeps_lambda_small() {
        let sol = solve_dual(&binary(0.7, 10.0), 1e-12, 500).unwrap();
        assert!(sol.lambda[0].abs() <= 2.0 / 100.0 * 0.2);
    }

    #[test]
    fn gibbs_respects_zero_prior() {
        let p = MomentProblem::new(vec![0.0, 0.5, 0.5], vec![vec![5.0, 1.0, 0.0]], vec![0.6], 0.0).unwrap();
        let q = gibbs_distribution(&p, &[3.0]).unwrap();
        assert_eq!(q[0], 0.0);
        assert_eq!(gibbs_distribution(&p, &[0.0]).unwrap(), vec![0.0, 0.5, 0.5]);
    }

    #[test]
    fn kl_examples() {
        let p = [0.2, 0.3, 0.5];
        assert_eq!(kl_divergence(&p, &p), 0.0);
        let expected = 0.5 * 2f64.ln() + 0.5 * (2.0f64 / 3.0).ln();
        assert_abs_diff_eq!(kl_divergence(&[0.5, 0.5], &[0.25, 0.75]), expected, epsilon = 1e-15);
        assert_abs_diff_eq!(expected, 0.14384, epsilon = 1e-5);
        assert_eq!(kl_divergence(&[0.5, 0.5], &[1.0, 0.0]), f64::INFINITY);
        assert_eq!(kl_divergence(&[1.0, 0.0], &[0.5, 0.5]), 2f64.ln());
    }

    #[test]
    fn infeasible_hard_constraint_is_unbounded() {
        let err = solve_dual(&binary(1.5, 0.0), 1e-9, 500).unwrap_err();
        assert!(matches!(err, Error::UnboundedDual { .. }), "{err}");
        // On the boundary the optimum escapes to infinity; stopping once the gradient is
        // below tolerance is also acceptable, and then the moment is matched.
        match solve_dual(&binary(1.0, 0.0), 1e-9, 100_000) {
            Ok(sol) => assert!(sol.lambda[0] > 10.0 && sol.grad_norm <= 1e-9),
            Err(err) => assert!(matches!(err, Error::UnboundedDual { .. } | Error::NotConverged { .. }), "{err}"),
        }
    }

    #[test]
    fn iteration_budget_is_reported() {
        let p = MomentProblem::new(
            vec![0.25; 4],
            vec![vec![0.0, 1.0, 2.0, 3.0], vec![1.0, 0.0, 4.0, 1.0]],
            vec![2.5, 2.0],
            0.0,
        )
        .unwrap();
        assert!(matches!(solve_dual(&p, 1e-12, 1).unwrap_err(), Error::NotConverged { iterations: 1, .. }));
    }

    #[test]
    fn accepted_steps_increase_the_objective() {
        let p = MomentProblem::new(
            vec![0.1, 0.2, 0.3, 0.4],
            vec![vec![0.0, 1.0, 2.0, 3.0], vec![1.0, 0.0, 4.0, 1.0]],
            vec![2.5, 2.0],
            0.0,
        )
        .unwrap();
        let sol = solve_dual_with(&p, &SolverOptions { record_path: true, ..SolverOptions::with_tol(1e-12) });
        assert!(sol.converged());
        assert!(sol.increments.iter().all(|&inc| inc >= 0.0));
        for w in sol.path.windows(2) {
            let (a, b) = (dual_objective(&p, &w[0]).unwrap(), dual_objective(&p, &w[1]).unwrap());
            assert!(b >= a - 1e-14 * (1.0 + a.abs()), "{a} -> {b}");
        }
    }

    #[test]
    fn empty_basis_is_trivial() {
        let p = MomentProblem::new(vec![0.3, 0.7], vec![], vec![], 0.0).unwrap();
        let sol = solve_dual(&p, 1e-9, 10).unwrap();
        assert!(sol.lambda.is_empty());
        assert_eq!(gibbs_distribution(&p, &[]).unwrap(), vec![0.3, 0.7]);
    }
}
