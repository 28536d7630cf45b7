mod common;

use common::{rng, sparse_mdp};
use moco::envs::smooth;
use moco::maxent::kl_divergence;
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn full_smoothing_is_idempotent(seed in any::<u64>(), n in 1usize..15, m in 1usize..4) {
        let mdp = sparse_mdp(&mut rng(seed), n, m, 0.9);
        let once = smooth(&mdp, 1.0).unwrap();
        prop_assert_eq!(smooth(&once, 1.0).unwrap(), once);
    }

    #[test]
    fn model_error_grows_with_the_smoothing_weight(seed in any::<u64>(), n in 1usize..15, m in 1usize..4) {
        let mdp = sparse_mdp(&mut rng(seed), n, m, 0.9);
        let models: Vec<_> = [0.0, 0.1, 0.5, 1.0].iter().map(|&l| smooth(&mdp, l).unwrap()).collect();
        for x in 0..n {
            for a in 0..m {
                let errs: Vec<f64> = models.iter().map(|s| kl_divergence(mdp.row(x, a), s.row(x, a)).sqrt()).collect();
                prop_assert_eq!(errs[0], 0.0);
                prop_assert!(errs.windows(2).all(|e| e[0] <= e[1] + 1e-15), "{errs:?}");
            }
        }
    }
}
