//! The (algorithm × λ × seed) grid: enumeration, per-cell RNG streams, isolated execution
//! and ordered merging of the results.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use moco::analysis::{audit_bounds, avg_tv_error, normalized_error, random_instance, sup_error, AuditOptions};
use moco::envs::{smooth, Environment};
use moco::maxent::SolverOptions;
use moco::mdp::{target_values, Mode};
use moco::mocodyna::{run_agent, RunConfig};
use moco::planners::{approx_value_iteration, mocovi, osvi, pure_model, IterationTrace, QueryOracle};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::config::{Algorithm, ExperimentConfig, ExperimentKind};
use crate::output::{summarize, write_csv, AuditRecord, RunRecord, TimingRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunOptions {
    /// Worker threads; 0 lets rayon decide.
    pub workers: usize,
    pub seed_offset: u64,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self { workers: 0, seed_offset: 0 }
    }
}

/// One (algorithm, λ, seed) run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Cell {
    pub algorithm: usize,
    pub lambda: usize,
    pub seed: u64,
}

impl Cell {
    /// Seeded with `seed + offset`, on a stream fixed by the algorithm and λ positions, so
    /// a cell's randomness does not depend on which other cells run or in what order.
    pub fn rng(&self, seed_offset: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed.wrapping_add(seed_offset));
        rng.set_stream(((self.algorithm as u64) << 32) | self.lambda as u64);
        rng
    }
}

/// Algorithm-major, then λ, then seed.
pub fn cells(cfg: &ExperimentConfig) -> Vec<Cell> {
    let mut out = Vec::new();
    for algorithm in 0..cfg.algorithms.len() {
        for lambda in 0..cfg.lambdas.len() {
            for seed in cfg.first_seed..cfg.first_seed + cfg.seeds {
                out.push(Cell { algorithm, lambda, seed });
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellOutput {
    pub cell: Cell,
    pub records: Vec<RunRecord>,
    pub wall_time_s: f64,
    pub error: Option<String>,
}

/// Runs `job` on every cell with `workers` threads. A cell that errors or panics keeps
/// whatever rows it produced plus the message; the others are unaffected.
pub fn run_cells<F>(cells: &[Cell], workers: usize, job: F) -> Result<Vec<CellOutput>>
where
    F: Fn(&Cell) -> (Vec<RunRecord>, Option<String>) + Sync,
{
    let pool = rayon::ThreadPoolBuilder::new().num_threads(workers).build()?;
    Ok(pool.install(|| {
        cells
            .par_iter()
            .map(|cell| {
                let start = Instant::now();
                let (records, error) = match catch_unwind(AssertUnwindSafe(|| job(cell))) {
                    Ok(out) => out,
                    Err(panic) => {
                        let msg = panic
                            .downcast_ref::<String>()
                            .cloned()
                            .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
                            .unwrap_or_else(|| "panic".into());
                        (Vec::new(), Some(format!("panicked: {msg}")))
                    }
                };
                if let Some(e) = &error {
                    log::warn!("cell {cell:?} failed: {e}");
                }
                CellOutput { cell: *cell, records, wall_time_s: start.elapsed().as_secs_f64(), error }
            })
            .collect()
    }))
}

/// Runs the whole grid of a validated planning or learning config.
pub fn run_grid(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<Vec<CellOutput>> {
    cfg.validate()?;
    if cfg.kind == ExperimentKind::Audit {
        bail!("audit configs produce audits, not runs");
    }
    let env = cfg.environment.load()?;
    let mode = cfg.mode(env.mdp.n_states(), env.mdp.n_actions())?;
    let target = target_values(&env.mdp, &mode)?;
    let grid = cells(cfg);
    log::info!("running {} cells", grid.len());
    run_cells(&grid, opts.workers, |cell| {
        let alg = &cfg.algorithms[cell.algorithm];
        let lambda = cfg.lambdas[cell.lambda];
        let mut rng = cell.rng(opts.seed_offset);
        let result = if cfg.kind.is_planning() {
            planner_cell(cfg, &env, &mode, &target, alg, cell.lambda, &mut rng)
        } else {
            agent_cell(cfg, &env, &mode, alg, cell.lambda, &mut rng)
        };
        let label = alg.label();
        match result {
            Ok((points, error)) => {
                let records = points
                    .into_iter()
                    .map(|p| RunRecord {
                        algorithm: label.clone(),
                        seed: cell.seed,
                        lambda,
                        step: p.step,
                        normalized_error: p.normalized_error,
                        sup_error: p.sup_error,
                        model_tv_uncorrected: p.model_tv_uncorrected,
                        model_tv_corrected: p.model_tv_corrected,
                    })
                    .collect();
                (records, error)
            }
            Err(e) => (Vec::new(), Some(format!("{e:#}"))),
        }
    })
}

struct Point {
    step: u64,
    normalized_error: f64,
    sup_error: f64,
    model_tv_uncorrected: Option<f64>,
    model_tv_corrected: Option<f64>,
}

type CellResult = Result<(Vec<Point>, Option<String>)>;

fn planner_cell(
    cfg: &ExperimentConfig,
    env: &Environment,
    mode: &Mode,
    target: &[f64],
    alg: &Algorithm,
    lambda_index: usize,
    rng: &mut ChaCha8Rng,
) -> CellResult {
    let truth = &env.mdp;
    let model = smooth(truth, cfg.lambdas[lambda_index])?;
    let mut oracle = if cfg.query_noise > 0.0 {
        QueryOracle::noisy(truth.clone(), cfg.query_noise, ChaCha8Rng::from_rng(rng)?)?
    } else {
        QueryOracle::exact(truth.clone())
    };
    let k = cfg.budget as usize;
    let trace: IterationTrace = match alg {
        Algorithm::Mocovi { d, beta, .. } => {
            let beta = beta.as_ref().map_or(0.0, |b| b.at(lambda_index));
            mocovi(&model, &mut oracle, *d, beta, k, mode)?
        }
        Algorithm::Vi { .. } => approx_value_iteration(&mut oracle, k, mode)?,
        Algorithm::Osvi { .. } => osvi(&model, &mut oracle, k, mode)?,
        Algorithm::PureModel { .. } => pure_model(&model, k, mode)?,
        other => bail!("{} is not a planner", other.label()),
    };
    let uses_model = !matches!(alg, Algorithm::Vi { .. });
    let tv = uses_model.then(|| avg_tv_error(model.kernel(), truth.kernel(), truth.n_states()));
    let points = trace
        .values
        .iter()
        .enumerate()
        .map(|(step, v)| {
            Ok(Point {
                step: step as u64,
                normalized_error: normalized_error(v, target)?,
                sup_error: sup_error(v, target),
                model_tv_uncorrected: tv,
                model_tv_corrected: None,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let error = match (trace.error, trace.diverged) {
        (Some(e), _) => Some(e),
        (None, Some(k)) => Some(format!("diverged at iteration {k}")),
        (None, None) => None,
    };
    Ok((points, error))
}

fn agent_cell(
    cfg: &ExperimentConfig,
    env: &Environment,
    mode: &Mode,
    alg: &Algorithm,
    lambda_index: usize,
    rng: &mut ChaCha8Rng,
) -> CellResult {
    let agent = alg.agent(lambda_index).context("not an agent")?;
    let run = RunConfig {
        steps: cfg.budget,
        eval_every: cfg.eval_every(),
        lambda: cfg.lambdas[lambda_index],
        sampling: cfg.sampling,
        mode: mode.clone(),
        solver: SolverOptions::default(),
    };
    let result = run_agent(env, &agent, &run, rng)?;
    let points = result
        .points
        .iter()
        .map(|p| Point {
            step: p.step,
            normalized_error: p.normalized_error,
            sup_error: p.sup_error,
            model_tv_uncorrected: p.model_tv_uncorrected,
            model_tv_corrected: p.model_tv_corrected,
        })
        .collect();
    Ok((points, result.error))
}

/// Audits `cfg.audit.instances` random instances in parallel. Instance `i` draws from the
/// stream `i` of the generator seeded with `first_seed + seed_offset`.
pub fn run_audits(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<Vec<AuditRecord>> {
    cfg.validate()?;
    if cfg.kind != ExperimentKind::Audit {
        bail!("not an audit config");
    }
    let audit_opts = AuditOptions { grid_points: cfg.audit.grid_points, ..AuditOptions::default() };
    let seed = cfg.first_seed.wrapping_add(opts.seed_offset);
    let pool = rayon::ThreadPoolBuilder::new().num_threads(opts.workers).build()?;
    let per_instance: Vec<Result<Vec<AuditRecord>>> = pool.install(|| {
        (0..cfg.audit.instances)
            .into_par_iter()
            .map(|i| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(i as u64);
                let inst = random_instance(&mut rng)?;
                let report = audit_bounds(&inst.as_audit(), &audit_opts)?;
                Ok(report
                    .audits
                    .into_iter()
                    .map(|a| AuditRecord {
                        bound_id: a.id,
                        instance_id: i,
                        lhs: a.lhs,
                        rhs: a.rhs,
                        slack: a.slack,
                        pass: a.pass,
                    })
                    .collect())
            })
            .collect()
    });
    let mut out = Vec::new();
    for rows in per_instance {
        out.extend(rows?);
    }
    Ok(out)
}

/// What [`run_experiment`] wrote.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ExperimentSummary {
    pub cells: usize,
    pub failed_cells: usize,
    pub rows: usize,
    pub failing_audits: usize,
}

/// Runs `cfg` and writes its CSVs into `out`: `runs.csv`, `summary.csv` and `timings.csv`
/// for runs, `audits.csv` for audits.
pub fn run_experiment(cfg: &ExperimentConfig, out: &Path, opts: &RunOptions) -> Result<ExperimentSummary> {
    cfg.validate()?;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let hash = cfg.hash(opts.seed_offset)?;
    if cfg.kind == ExperimentKind::Audit {
        let audits = run_audits(cfg, opts)?;
        write_csv(&out.join("audits.csv"), &hash, &audits)?;
        return Ok(ExperimentSummary {
            rows: audits.len(),
            failing_audits: audits.iter().filter(|a| !a.pass).count(),
            ..ExperimentSummary::default()
        });
    }
    let outputs = run_grid(cfg, opts)?;
    let records: Vec<RunRecord> = outputs.iter().flat_map(|o| o.records.iter().cloned()).collect();
    let timings: Vec<TimingRecord> = outputs
        .iter()
        .map(|o| TimingRecord {
            algorithm: cfg.algorithms[o.cell.algorithm].label(),
            seed: o.cell.seed,
            lambda: cfg.lambdas[o.cell.lambda],
            wall_time_s: o.wall_time_s,
            rows: o.records.len(),
            error: o.error.clone(),
        })
        .collect();
    write_csv(&out.join("runs.csv"), &hash, &records)?;
    write_csv(&out.join("summary.csv"), &hash, &summarize(&records))?;
    write_csv(&out.join("timings.csv"), &hash, &timings)?;
    Ok(ExperimentSummary {
        cells: outputs.len(),
        failed_cells: outputs.iter().filter(|o| o.error.is_some()).count(),
        rows: records.len(),
        failing_audits: 0,
    })
}
