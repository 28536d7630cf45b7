#![allow(dead_code)]

use moco::mdp::{random_mdp, TabularMdp};
use moco::moco::BasisSet;
use moco::mdp::apply_kernel;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_vector<R: Rng>(rng: &mut R, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-scale..scale)).collect()
}

/// Random MDP whose rows each have a few structural zeros.
pub fn sparse_mdp<R: Rng>(rng: &mut R, n: usize, m: usize, gamma: f64) -> TabularMdp {
    let dense = random_mdp(rng, n, m, gamma);
    let mut kernel = dense.kernel().to_vec();
    for row in kernel.chunks_mut(n) {
        let keep = rng.gen_range(0..n);
        for (y, p) in row.iter_mut().enumerate() {
            if y != keep && rng.gen_bool(0.3) {
                *p = 0.0;
            }
        }
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|p| *p /= s);
    }
    dense.with_kernel(kernel).unwrap()
}

/// `d` random functions with queries against `truth`, perturbed uniformly by `noise`.
pub fn noisy_basis<R: Rng>(rng: &mut R, truth: &TabularMdp, d: usize, noise: f64) -> BasisSet {
    let n = truth.n_states();
    let functions: Vec<Vec<f64>> = (0..d).map(|_| random_vector(rng, n, 1.0)).collect();
    let queries = functions
        .iter()
        .map(|f| {
            let mut q = apply_kernel(truth, f).unwrap();
            if noise > 0.0 {
                q.iter_mut().for_each(|v| *v += rng.gen_range(-noise..noise));
            }
            q
        })
        .collect();
    BasisSet::new(functions, queries).unwrap()
}

pub fn sup_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

pub fn sup_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
