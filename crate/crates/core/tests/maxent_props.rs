mod common;

use common::{dot, random_vector, rng};
use moco::maxent::{
    dual_gradient, dual_objective, gibbs_distribution, kl_divergence, solve_dual_with, MomentProblem, SolverOptions,
};
use moco::mdp::random_distribution;
use proptest::prelude::*;
use rand::Rng;

/// Prior with occasional zeros, `d` bounded functions, targets near a feasible mean.
fn problem(seed: u64, n: usize, d: usize, beta: f64) -> (MomentProblem, Vec<f64>) {
    let mut r = rng(seed);
    let mut prior = random_distribution(&mut r, n);
    for p in prior.iter_mut().skip(1) {
        if r.gen_bool(0.2) {
            *p = 0.0;
        }
    }
    let s: f64 = prior.iter().sum();
    prior.iter_mut().for_each(|p| *p /= s);
    let basis: Vec<Vec<f64>> = (0..d).map(|_| random_vector(&mut r, n, 2.0)).collect();
    let p = random_distribution(&mut r, n);
    let targets = basis.iter().map(|f| dot(f, &p) + r.gen_range(-0.1..0.1)).collect();
    (MomentProblem::new(prior, basis, targets, beta).unwrap(), p)
}

fn tight() -> SolverOptions {
    SolverOptions { tol: 1e-10, max_iters: 5000, ..SolverOptions::default() }
}

fn norm2(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn gibbs_is_normalised_and_keeps_the_prior_support(
        seed in any::<u64>(), n in 1usize..50, d in 1usize..=5, scale in 0.0f64..200.0,
    ) {
        let (prob, _) = problem(seed, n, d, 0.5);
        let lambda = random_vector(&mut rng(seed ^ 1), d, scale.max(1e-9));
        let q = gibbs_distribution(&prob, &lambda).unwrap();
        prop_assert!((q.iter().sum::<f64>() - 1.0).abs() <= 1e-10);
        for (qz, pz) in q.iter().zip(prob.prior()) {
            prop_assert_eq!(*qz == 0.0, *pz == 0.0 || *qz == 0.0);
            if *pz == 0.0 {
                prop_assert_eq!(*qz, 0.0);
            }
        }
    }

    #[test]
    fn gradient_matches_finite_differences(
        seed in any::<u64>(), n in 1usize..=50, d in 1usize..=5, beta in 0.0f64..2.0,
    ) {
        let (prob, _) = problem(seed, n, d, beta);
        let lambda = random_vector(&mut rng(seed ^ 2), d, 1.5);
        let g = dual_gradient(&prob, &lambda).unwrap();
        let h = 1e-5;
        let fd: Vec<f64> = (0..d)
            .map(|i| {
                let mut up = lambda.clone();
                let mut down = lambda.clone();
                up[i] += h;
                down[i] -= h;
                (dual_objective(&prob, &up).unwrap() - dual_objective(&prob, &down).unwrap()) / (2.0 * h)
            })
            .collect();
        let diff: Vec<f64> = fd.iter().zip(&g).map(|(a, b)| a - b).collect();
        prop_assert!(norm2(&diff) <= 1e-5 * norm2(&g).max(1.0), "fd {fd:?} vs {g:?}");
    }

    #[test]
    fn dual_is_stable_in_the_targets(seed in any::<u64>(), n in 2usize..30, d in 1usize..=4, bi in 0usize..3) {
        let beta = [0.1, 1.0, 10.0][bi];
        let (p1, _) = problem(seed, n, d, beta);
        let shifted: Vec<f64> = p1.targets().iter().map(|t| t + rng(seed ^ 3).gen_range(-0.5..0.5)).collect();
        let p2 = p1.with_targets(shifted).unwrap();
        let s1 = solve_dual_with(&p1, &tight());
        let s2 = solve_dual_with(&p2, &tight());
        prop_assert!(s1.converged() && s2.converged());
        let dl: Vec<f64> = s1.lambda.iter().zip(&s2.lambda).map(|(a, b)| a - b).collect();
        let dt: Vec<f64> = p1.targets().iter().zip(p2.targets()).map(|(a, b)| a - b).collect();
        let slack = 2.0 * (s1.grad_norm + s2.grad_norm) / (beta * beta);
        prop_assert!(norm2(&dl) <= 2.0 / (beta * beta) * norm2(&dt) + slack + 1e-12);
    }

    #[test]
    fn regularised_kl_bound_holds_for_probe_multipliers(
        seed in any::<u64>(), n in 2usize..30, d in 1usize..=4, beta in 0.05f64..3.0,
    ) {
        let (prob, p) = problem(seed, n, d, beta);
        // p must live on the prior's support for the bound to be finite.
        let mut p: Vec<f64> = p.iter().zip(prob.prior()).map(|(a, b)| if *b > 0.0 { *a } else { 0.0 }).collect();
        let s: f64 = p.iter().sum();
        p.iter_mut().for_each(|v| *v /= s);
        let sol = solve_dual_with(&prob, &tight());
        prop_assert!(sol.converged());
        let q_star = gibbs_distribution(&prob, &sol.lambda).unwrap();
        let dev: Vec<f64> = (0..d).map(|i| dot(prob.basis_function(i), &p) - prob.targets()[i]).collect();
        let mut r = rng(seed ^ 4);
        for _ in 0..5 {
            let probe = random_vector(&mut r, d, 3.0);
            let q = gibbs_distribution(&prob, &probe).unwrap();
            let rhs = kl_divergence(&p, &q) + 2.0 / (beta * beta) * dot(&dev, &dev) + 0.25 * beta * beta * dot(&probe, &probe);
            prop_assert!(kl_divergence(&p, &q_star) <= rhs + 1e-9);
        }
    }

    #[test]
    fn accepted_steps_never_decrease_the_dual(seed in any::<u64>(), n in 2usize..40, d in 1usize..=5, beta in 0.0f64..2.0) {
        let (prob, _) = problem(seed, n, d, beta);
        let sol = solve_dual_with(&prob, &SolverOptions { record_path: true, ..tight() });
        prop_assert_eq!(sol.path.len(), sol.increments.len() + 1);
        for inc in &sol.increments {
            prop_assert!(*inc >= 0.0, "increment {inc}");
        }
        let mut prev = dual_objective(&prob, &sol.path[0]).unwrap();
        for lam in &sol.path[1..] {
            let cur = dual_objective(&prob, lam).unwrap();
            prop_assert!(cur >= prev - 1e-12 * (1.0 + prev.abs()));
            prev = cur;
        }
    }
}
