//! Benchmark environments and the smoothing operator used to manufacture model error.

use rand::Rng;

use crate::mdp::TabularMdp;
use crate::{Error, Result};

pub const GRID: usize = 6;
pub const CLIFFWALK_DISCOUNT: f64 = 0.9;
/// Top-right corner.
pub const GOAL: usize = GRID - 1;
pub const GOAL_REWARD: f64 = 20.0;
pub const ACTION_NAMES: [&str; 4] = ["UP", "RIGHT", "DOWN", "LEFT"];

/// Per-step penalty of a cliff cell, or `None` for ordinary cells.
/// Columns 1..=4 of rows 0, 2 and 4 are cliffs.
pub fn cliff_penalty(state: usize) -> Option<f64> {
    let (row, col) = (state / GRID, state % GRID);
    if !(1..=4).contains(&col) {
        return None;
    }
    match row {
        0 => Some(-32.0),
        2 => Some(-16.0),
        4 => Some(-8.0),
        _ => None,
    }
}

fn shift(state: usize, action: usize) -> usize {
    let (row, col) = (state / GRID, state % GRID);
    let (r, c) = match action {
        0 if row > 0 => (row - 1, col),
        1 if col + 1 < GRID => (row, col + 1),
        2 if row + 1 < GRID => (row + 1, col),
        3 if col > 0 => (row, col - 1),
        _ => (row, col),
    };
    r * GRID + c
}

/// A tabular MDP plus the per-transition rewards `R(x, a, y)` used when sampling.
/// The MDP's rewards are the expectations `Σ_y P(y|x,a) R(x,a,y)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Environment {
    pub mdp: TabularMdp,
    /// Row-major `[x][a][y]`.
    transition_rewards: Vec<f64>,
}

impl Environment {
    /// Rewards do not depend on the next state.
    pub fn from_mdp(mdp: TabularMdp) -> Self {
        let n = mdp.n_states();
        let transition_rewards = mdp.rewards().iter().flat_map(|&r| std::iter::repeat(r).take(n)).collect();
        Self { mdp, transition_rewards }
    }

    pub fn transition_reward(&self, x: usize, a: usize, y: usize) -> f64 {
        let n = self.mdp.n_states();
        self.transition_rewards[(x * self.mdp.n_actions() + a) * n + y]
    }

    /// Draws `(r, x')` for the pair `(x, a)`.
    pub fn sample<R: Rng + ?Sized>(&self, x: usize, a: usize, rng: &mut R) -> (f64, usize) {
        let row = self.mdp.row(x, a);
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        let mut y = row.iter().rposition(|p| *p > 0.0).unwrap_or(0);
        for (i, p) in row.iter().enumerate() {
            acc += p;
            if u < acc {
                y = i;
                break;
            }
        }
        (self.transition_reward(x, a, y), y)
    }
}

/// The 6x6 cliffwalk with its transition-level rewards.
pub fn cliffwalk() -> Environment {
    let n = GRID * GRID;
    let m = 4;
    let mut kernel = vec![0.0; n * m * n];
    let mut transition_rewards = vec![0.0; n * m * n];
    let mut rewards = vec![0.0; n * m];
    for x in 0..n {
        for a in 0..m {
            let base = (x * m + a) * n;
            if x == GOAL {
                kernel[base + x] = 1.0;
                continue;
            }
            if let Some(penalty) = cliff_penalty(x) {
                kernel[base + x] = 1.0;
                transition_rewards[base + x] = penalty;
                rewards[x * m + a] = penalty;
                continue;
            }
            for dir in 0..m {
                let p = if dir == a { 0.9 } else { 0.1 / 3.0 };
                kernel[base + shift(x, dir)] += p;
            }
            transition_rewards[base + GOAL] = GOAL_REWARD;
            rewards[x * m + a] = GOAL_REWARD * kernel[base + GOAL];
        }
    }
    let mdp = TabularMdp::new(n, m, CLIFFWALK_DISCOUNT, kernel, rewards).expect("cliffwalk rows are normalised");
    Environment { mdp, transition_rewards }
}

pub fn build_cliffwalk() -> TabularMdp {
    cliffwalk().mdp
}

/// `(1 − λ) P(·|x,a) + λ U(supp P(·|x,a))` row by row; rewards and discount unchanged.
pub fn smooth(mdp: &TabularMdp, lambda: f64) -> Result<TabularMdp> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Invalid(format!("smoothing weight must lie in [0, 1], got {lambda}")));
    }
    Ok(mdp.with_kernel(smooth_kernel(mdp.kernel(), mdp.n_states(), lambda))?)
}

/// [`smooth`] on a raw row-major kernel.
pub fn smooth_kernel(kernel: &[f64], n_states: usize, lambda: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(kernel.len());
    for row in kernel.chunks(n_states) {
        let support = row.iter().filter(|p| **p > 0.0).count() as f64;
        out.extend(row.iter().map(|&p| if p > 0.0 { (1.0 - lambda) * p + lambda / support } else { 0.0 }));
    }
    out
}
