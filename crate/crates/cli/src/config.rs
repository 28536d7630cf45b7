//! Experiment configuration: a TOML file naming the environment, the λ grid, the
//! algorithms with their hyperparameters, and the seeds.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use moco::envs::{cliffwalk, smooth, Environment};
use moco::mdp::{Mode, Policy, TabularMdp};
use moco::mocodyna::{Agent, LearningRate, MocoDynaConfig, SamplingScheme};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Bumped whenever a CSV column changes.
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    /// Planners on a known model with queries to the true kernel, evaluating a policy.
    Pe,
    /// Same, solving for the optimal policy.
    Control,
    /// Agents learning from samples, evaluating a policy.
    DynaPe,
    DynaControl,
    /// Bound audits on random instances.
    Audit,
}

impl ExperimentKind {
    pub fn is_planning(self) -> bool {
        matches!(self, Self::Pe | Self::Control)
    }

    pub fn is_learning(self) -> bool {
        matches!(self, Self::DynaPe | Self::DynaControl)
    }

    pub fn is_control(self) -> bool {
        matches!(self, Self::Control | Self::DynaControl)
    }
}

/// One value for every λ, or one per λ in the order of `lambdas`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PerLambda<T> {
    One(T),
    Each(Vec<T>),
}

impl<T: Copy> PerLambda<T> {
    pub fn at(&self, lambda_index: usize) -> T {
        match self {
            Self::One(v) => *v,
            Self::Each(vs) => vs[lambda_index],
        }
    }

    fn values(&self) -> Vec<T> {
        match self {
            Self::One(v) => vec![*v],
            Self::Each(vs) => vs.clone(),
        }
    }

    fn check_len(&self, n: usize, what: &str) -> Result<()> {
        if let Self::Each(vs) = self {
            ensure!(vs.len() == n, "{what} lists {} values for {n} lambdas", vs.len());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Algorithm {
    Mocovi {
        label: Option<String>,
        d: usize,
        /// 0 (exact correction) when absent.
        beta: Option<PerLambda<f64>>,
    },
    Vi {
        label: Option<String>,
    },
    Osvi {
        label: Option<String>,
    },
    PureModel {
        label: Option<String>,
    },
    MocoDyna {
        label: Option<String>,
        d: usize,
        c: usize,
        beta: PerLambda<f64>,
        k: PerLambda<u64>,
        basis_norm: Option<f64>,
    },
    Td {
        label: Option<String>,
        alpha: PerLambda<f64>,
        n: u64,
    },
    QLearning {
        label: Option<String>,
        alpha: PerLambda<f64>,
        n: u64,
    },
    Dyna {
        label: Option<String>,
        /// Replan every this many samples.
        plan_every: Option<u64>,
    },
}

impl Algorithm {
    pub fn label(&self) -> String {
        let (label, fallback) = match self {
            Self::Mocovi { label, d, .. } => (label, format!("mocovi-d{d}")),
            Self::Vi { label } => (label, "vi".into()),
            Self::Osvi { label } => (label, "osvi".into()),
            Self::PureModel { label } => (label, "pure-model".into()),
            Self::MocoDyna { label, d, .. } => (label, format!("moco-dyna-d{d}")),
            Self::Td { label, .. } => (label, "td".into()),
            Self::QLearning { label, .. } => (label, "q-learning".into()),
            Self::Dyna { label, .. } => (label, "dyna".into()),
        };
        label.clone().unwrap_or(fallback)
    }

    fn is_planner(&self) -> bool {
        matches!(self, Self::Mocovi { .. } | Self::Vi { .. } | Self::Osvi { .. } | Self::PureModel { .. })
    }

    /// The agent for learning experiments at the given λ index.
    pub fn agent(&self, lambda_index: usize) -> Option<Agent> {
        Some(match self {
            Self::MocoDyna { d, c, beta, k, basis_norm, .. } => Agent::MocoDyna(MocoDynaConfig {
                d: *d,
                c: *c,
                beta: beta.at(lambda_index),
                k: k.at(lambda_index),
                basis_norm: *basis_norm,
            }),
            Self::Td { alpha, n, .. } => Agent::Td(LearningRate { alpha: alpha.at(lambda_index), n: *n }),
            Self::QLearning { alpha, n, .. } => Agent::QLearning(LearningRate { alpha: alpha.at(lambda_index), n: *n }),
            Self::Dyna { plan_every, .. } => Agent::Dyna { plan_every: plan_every.unwrap_or(1) },
            _ => return None,
        })
    }

    fn validate(&self, kind: ExperimentKind, n_lambdas: usize, n_states: usize) -> Result<()> {
        let label = self.label();
        if kind.is_planning() {
            ensure!(self.is_planner(), "{label}: not a planner, but the experiment is `{kind:?}`");
        } else {
            ensure!(!self.is_planner(), "{label}: a planner cannot learn from samples in `{kind:?}`");
        }
        match self {
            Self::Mocovi { d, beta, .. } => {
                ensure!(*d >= 1, "{label}: d must be at least 1");
                if let Some(beta) = beta {
                    beta.check_len(n_lambdas, "beta")?;
                    ensure!(beta.values().iter().all(|b| b.is_finite() && *b >= 0.0), "{label}: beta must be >= 0");
                }
            }
            Self::MocoDyna { d, c, beta, k, basis_norm, .. } => {
                beta.check_len(n_lambdas, "beta")?;
                k.check_len(n_lambdas, "k")?;
                ensure!(d + c <= n_states, "{label}: d + c = {} exceeds {n_states} states", d + c);
                for i in 0..n_lambdas {
                    let cfg = MocoDynaConfig { d: *d, c: *c, beta: beta.at(i), k: k.at(i), basis_norm: *basis_norm };
                    cfg.validate().with_context(|| label.clone())?;
                }
            }
            Self::Td { alpha, .. } | Self::QLearning { alpha, .. } => {
                alpha.check_len(n_lambdas, "alpha")?;
                ensure!(alpha.values().iter().all(|a| *a > 0.0 && *a <= 1.0), "{label}: alpha must lie in (0, 1]");
                if matches!(self, Self::Td { .. }) {
                    ensure!(!kind.is_control(), "{label}: TD evaluates a policy; use q-learning for control");
                } else {
                    ensure!(kind.is_control(), "{label}: q-learning only solves control");
                }
            }
            Self::Dyna { plan_every, .. } => {
                ensure!(plan_every.unwrap_or(1) >= 1, "{label}: plan_every must be at least 1");
            }
            Self::Vi { .. } | Self::Osvi { .. } | Self::PureModel { .. } => {}
        }
        Ok(())
    }
}

/// A named environment or a TOML file in the [`TabularMdp`] format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum EnvironmentSpec {
    Named(String),
    File { path: PathBuf },
}

impl Default for EnvironmentSpec {
    fn default() -> Self {
        Self::Named("cliffwalk".into())
    }
}

impl EnvironmentSpec {
    pub fn load(&self) -> Result<Environment> {
        match self {
            Self::Named(name) => named_environment(name),
            Self::File { path } => {
                let mdp = TabularMdp::load(path).with_context(|| format!("loading {}", path.display()))?;
                Ok(Environment::from_mdp(mdp))
            }
        }
    }
}

pub fn named_environment(name: &str) -> Result<Environment> {
    match name {
        "cliffwalk" => Ok(cliffwalk()),
        other => bail!("unknown environment `{other}` (known: cliffwalk)"),
    }
}

/// Writes `name` smoothed by `lambda` to `<dir>/<name>-lambda-<lambda>.toml`. Rewriting the
/// same file yields identical bytes.
pub fn make_env(name: &str, lambda: f64, dir: &Path) -> Result<PathBuf> {
    ensure!((0.0..=1.0).contains(&lambda), "lambda must lie in [0, 1], got {lambda}");
    let env = named_environment(name)?;
    let mdp = smooth(&env.mdp, lambda)?;
    std::fs::create_dir_all(dir)?;
    let path = dir.join(format!("{name}-lambda-{lambda}.toml"));
    mdp.save(&path)?;
    Ok(path)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum PolicySpec {
    Uniform,
    Deterministic { actions: Vec<usize> },
}

impl Default for PolicySpec {
    fn default() -> Self {
        Self::Uniform
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AuditSpec {
    #[serde(default = "default_instances")]
    pub instances: usize,
    #[serde(default = "default_grid_points")]
    pub grid_points: usize,
}

impl Default for AuditSpec {
    fn default() -> Self {
        Self { instances: default_instances(), grid_points: default_grid_points() }
    }
}

fn default_instances() -> usize {
    100
}

fn default_grid_points() -> usize {
    21
}

fn default_seeds() -> u64 {
    20
}

fn default_lambdas() -> Vec<f64> {
    vec![0.1, 0.5, 1.0]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    #[serde(default)]
    pub environment: EnvironmentSpec,
    #[serde(default = "default_lambdas")]
    pub lambdas: Vec<f64>,
    /// Runs per (algorithm, λ) cell.
    #[serde(default = "default_seeds")]
    pub seeds: u64,
    #[serde(default)]
    pub first_seed: u64,
    /// Iterations for planners, samples for agents.
    #[serde(default)]
    pub budget: u64,
    /// Agents only; defaults to `budget / 100`.
    pub eval_every: Option<u64>,
    /// Half-width of uniform noise on planner queries.
    #[serde(default)]
    pub query_noise: f64,
    #[serde(default)]
    pub sampling: SamplingScheme,
    #[serde(default)]
    pub policy: PolicySpec,
    #[serde(default)]
    pub audit: AuditSpec,
    #[serde(default)]
    pub algorithms: Vec<Algorithm>,
    /// Used when `--out` is not given.
    pub output: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).context("parsing experiment config")?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::from_toml(&text).with_context(|| format!("in {}", path.display()))
    }

    /// Checks every hyperparameter against its algorithm; nothing runs until this passes.
    pub fn validate(&self) -> Result<()> {
        ensure!(self.seeds >= 1, "seeds must be at least 1");
        if self.kind == ExperimentKind::Audit {
            ensure!(self.algorithms.is_empty(), "an audit experiment takes no algorithms");
            ensure!(self.audit.instances >= 1, "audit needs at least one instance");
            ensure!(self.audit.grid_points >= 2, "audit grid needs at least two points");
            return Ok(());
        }
        ensure!(!self.lambdas.is_empty(), "no lambdas given");
        for l in &self.lambdas {
            ensure!((0.0..=1.0).contains(l), "lambda must lie in [0, 1], got {l}");
        }
        ensure!(!self.algorithms.is_empty(), "no algorithms given");
        ensure!(self.budget >= 1, "budget must be at least 1");
        ensure!(self.query_noise.is_finite() && self.query_noise >= 0.0, "query_noise must be >= 0");
        if let Some(e) = self.eval_every {
            ensure!(e >= 1, "eval_every must be at least 1");
        }
        let env = self.environment.load()?;
        let (n, m) = (env.mdp.n_states(), env.mdp.n_actions());
        if !self.kind.is_control() {
            self.policy(n, m)?;
        }
        let mut labels = HashSet::new();
        for alg in &self.algorithms {
            alg.validate(self.kind, self.lambdas.len(), n)?;
            ensure!(labels.insert(alg.label()), "duplicate algorithm label `{}`", alg.label());
        }
        Ok(())
    }

    pub fn policy(&self, n_states: usize, n_actions: usize) -> Result<Policy> {
        Ok(match &self.policy {
            PolicySpec::Uniform => Policy::uniform(n_states, n_actions),
            PolicySpec::Deterministic { actions } => {
                ensure!(actions.len() == n_states, "policy lists {} actions for {n_states} states", actions.len());
                Policy::deterministic(n_actions, actions)?
            }
        })
    }

    pub fn mode(&self, n_states: usize, n_actions: usize) -> Result<Mode> {
        Ok(if self.kind.is_control() { Mode::Control } else { Mode::Evaluation(self.policy(n_states, n_actions)?) })
    }

    pub fn eval_every(&self) -> u64 {
        self.eval_every.unwrap_or((self.budget / 100).max(1))
    }

    /// SHA-256 over the normalised config and the seed offset, written into every CSV.
    pub fn hash(&self, seed_offset: u64) -> Result<String> {
        let text = toml::to_string(self).context("serialising config")?;
        let mut h = Sha256::new();
        h.update(text.as_bytes());
        h.update(format!("seed_offset={seed_offset}").as_bytes());
        Ok(format!("{:x}", h.finalize()))
    }
}
