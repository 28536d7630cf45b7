//! Maximum-entropy model correction for tabular MDPs.
//!
//! An approximate model `P̂` is corrected, one state-action pair at a time, toward the
//! distribution of minimum KL divergence whose expectations of a few basis functions match
//! values queried from the true dynamics. The crate provides:
//!
//! * [`mdp`]: tabular MDPs, policies, Bellman operators and exact solvers.
//! * [`maxent`]: the regularised MaxEnt dual, its gradient and a quasi-Newton solver.
//! * [`moco`]: kernel correction, planning in the corrected MDP and error tables.
//! * [`planners`]: MoCoVI, approximate value iteration and OS-VI.
//! * [`mocodyna`]: the sample-based MoCoDyna agent plus TD, Q-learning and Dyna baselines.
//! * [`envs`]: the cliffwalk gridworld and kernel smoothing.
//! * [`analysis`]: metrics, discounted occupancy machinery and numeric bound audits.
//!
//! ```
//! use moco::{envs, mdp};
//!
//! let world = envs::build_cliffwalk();
//! let (v_star, _) = mdp::value_iteration(&world, 1e-10, 10_000).unwrap();
//! assert!(v_star[5].abs() < 1e-9); // the goal is absorbing with zero reward
//! ```

pub mod analysis;
pub mod envs;
pub mod maxent;
pub mod mdp;
pub mod moco;
pub mod mocodyna;
pub mod planners;

mod error;

pub use error::{Error, Result};
pub use maxent::{DualSolution, MomentProblem, SolveStatus, SolverOptions};
pub use mdp::{Mode, Policy, TabularMdp};
pub use moco::{BasisSet, CorrectedKernel, ErrorTables};
pub use planners::{IterationTrace, QueryOracle};
