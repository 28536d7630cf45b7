mod common;

use common::{rng, sparse_mdp};
use moco::analysis::{audit_bounds, avg_tv_error, discounted_future_state, random_instance, AuditOptions};
use moco::mdp::{policy_kernel, random_mdp, Policy};
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn every_audit_on_a_valid_instance_passes(seed in any::<u64>()) {
        let inst = random_instance(&mut rng(seed)).unwrap();
        let report = audit_bounds(&inst.as_audit(), &AuditOptions::default()).unwrap();
        prop_assert!(report.get("regularized_pe").is_some() || !report.skipped.is_empty());
        for a in &report.audits {
            prop_assert!(a.slack >= -1e-9, "{a:?}");
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn occupancy_matches_the_truncated_series(seed in any::<u64>(), n in 1usize..15, m in 1usize..4, gamma in 0.0f64..=0.95) {
        let mdp = random_mdp(&mut rng(seed), n, m, gamma);
        let (p, _) = policy_kernel(&mdp, &Policy::uniform(n, m)).unwrap();
        let eta = discounted_future_state(&p, gamma).unwrap();
        // (1 − γ) Σ_t γ^t P^t, summed until the tail is below 1e-13.
        let mut term: Vec<f64> = (0..n * n).map(|k| if k / n == k % n { 1.0 } else { 0.0 }).collect();
        let mut series = term.clone();
        let mut weight = 1.0;
        while weight > 1e-13 {
            let mut next = vec![0.0; n * n];
            for i in 0..n {
                for k in 0..n {
                    let t = term[i * n + k];
                    for j in 0..n {
                        next[i * n + j] += t * p[k * n + j];
                    }
                }
            }
            weight *= gamma;
            term = next;
            series.iter_mut().zip(&term).for_each(|(s, t)| *s += weight * t);
        }
        for (e, s) in eta.iter().zip(&series) {
            prop_assert!((e - (1.0 - gamma) * s).abs() <= 1e-10);
        }
    }

    #[test]
    fn tv_error_is_a_symmetric_distance(seed in any::<u64>(), n in 1usize..12, m in 1usize..4) {
        let mut r = rng(seed);
        let a = sparse_mdp(&mut r, n, m, 0.5);
        let b = random_mdp(&mut r, n, m, 0.5);
        prop_assert_eq!(avg_tv_error(a.kernel(), a.kernel(), n), 0.0);
        prop_assert_eq!(avg_tv_error(a.kernel(), b.kernel(), n), avg_tv_error(b.kernel(), a.kernel(), n));
        prop_assert!(avg_tv_error(a.kernel(), b.kernel(), n) <= 2.0 + 1e-12);
    }
}
