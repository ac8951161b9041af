//! Seeded experiment harness: random instance generation, parameter sweeps,
//! algorithm comparisons, CSV rows.
//!
//! A sweep runs `groups` random instances per grid value and one row per
//! (value, group, algorithm). Everything except `runtime_ms` is a pure
//! function of the config and seed; groups and grid points run in parallel
//! and rows are sorted before emission.

use std::str::FromStr;
use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::constrained::{
    bayes_rule_feasible, exact_constrained_bruteforce, greedy_constrained, knapsack_view,
    random_selection_constrained, ORACLE_MOVABLE_CAP,
};
use crate::dp::{build_joint_counts, greedy_from_counts};
use crate::error::{Error, Result};
use crate::fusion::{and_rule, evaluate_rule, majority_rule, or_rule, rule_from_bayes};
use crate::model::{SensorProfile, SensorSet, Subset, SystemParams, ENUMERATION_CAP};
use crate::scalar::{real, Real};
use crate::selection::{best_subset_exhaustive, sfs_select};

/// Paper-regime defaults used by the study sweeps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BaseParams<T> {
    pub t_c: T,
    pub pi0: T,
    pub gamma: T,
    pub alpha: T,
    pub n: usize,
    pub r: u32,
}

impl<T: Real> Default for BaseParams<T> {
    fn default() -> Self {
        Self {
            t_c: real(0.2),
            pi0: real(0.4),
            gamma: real(2.0),
            alpha: real(0.8),
            n: 10,
            r: 2,
        }
    }
}

/// Which scalar the sweep varies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepVar {
    Gamma,
    Alpha,
    N,
    R,
    K,
}

impl SweepVar {
    pub fn as_str(&self) -> &'static str {
        match self {
            SweepVar::Gamma => "gamma",
            SweepVar::Alpha => "alpha",
            SweepVar::N => "n",
            SweepVar::R => "r",
            SweepVar::K => "k",
        }
    }
}

impl FromStr for SweepVar {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gamma" => Ok(SweepVar::Gamma),
            "alpha" => Ok(SweepVar::Alpha),
            "n" => Ok(SweepVar::N),
            "r" => Ok(SweepVar::R),
            "k" => Ok(SweepVar::K),
            other => Err(Error::InvalidConfig(format!(
                "unknown sweep variable {other:?}; expected gamma|alpha|n|r|k"
            ))),
        }
    }
}

/// Algorithms the harness can place in a row.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Algorithm {
    Bayes,
    Majority,
    And,
    Or,
    Greedy,
    Random,
    Dp,
    Sfs,
    Exhaustive,
}

impl Algorithm {
    pub fn as_str(&self) -> &'static str {
        match self {
            Algorithm::Bayes => "bayes",
            Algorithm::Majority => "majority",
            Algorithm::And => "and",
            Algorithm::Or => "or",
            Algorithm::Greedy => "greedy",
            Algorithm::Random => "random",
            Algorithm::Dp => "dp",
            Algorithm::Sfs => "sfs",
            Algorithm::Exhaustive => "exhaustive",
        }
    }

    fn is_constrained(&self) -> bool {
        matches!(self, Algorithm::Greedy | Algorithm::Random | Algorithm::Dp)
    }
}

impl FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bayes" => Ok(Algorithm::Bayes),
            "majority" => Ok(Algorithm::Majority),
            "and" => Ok(Algorithm::And),
            "or" => Ok(Algorithm::Or),
            "greedy" => Ok(Algorithm::Greedy),
            "random" => Ok(Algorithm::Random),
            "dp" => Ok(Algorithm::Dp),
            "sfs" => Ok(Algorithm::Sfs),
            "exhaustive" => Ok(Algorithm::Exhaustive),
            other => Err(Error::InvalidConfig(format!("unknown algorithm {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig<T> {
    pub sweep: SweepVar,
    pub grid: Vec<f64>,
    pub base: BaseParams<T>,
    pub groups: u32,
    pub seed: u64,
    /// Uniform sampling range for both p_f and p_m.
    pub range: (T, T),
    pub algorithms: Vec<Algorithm>,
}

impl<T: Real> ExperimentConfig<T> {
    pub fn new(sweep: SweepVar, grid: Vec<f64>, algorithms: Vec<Algorithm>) -> Self {
        Self {
            sweep,
            grid,
            base: BaseParams::default(),
            groups: 30,
            seed: 0,
            range: (real(0.05), real(0.45)),
            algorithms,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.grid.is_empty() {
            return Err(Error::InvalidConfig("sweep grid is empty".into()));
        }
        if self.groups == 0 {
            return Err(Error::InvalidConfig("need at least one group".into()));
        }
        if self.algorithms.is_empty() {
            return Err(Error::InvalidConfig("need at least one algorithm".into()));
        }
        let (lo, hi) = self.range;
        if !(lo > T::zero() && hi < T::one() && lo < hi) {
            return Err(Error::InvalidConfig(
                "profile sampling range must satisfy 0 < lo < hi < 1".into(),
            ));
        }
        for &v in &self.grid {
            match self.sweep {
                SweepVar::Gamma if v >= 0.0 => {}
                SweepVar::Alpha if (0.0..=1.0).contains(&v) => {}
                SweepVar::N | SweepVar::K | SweepVar::R
                    if v >= 0.0 && v.fract() == 0.0 && v <= u32::MAX as f64 =>
                {
                    if self.sweep == SweepVar::N && v < 1.0 {
                        return Err(Error::InvalidConfig("n must be >= 1".into()));
                    }
                    if self.sweep == SweepVar::K && v > self.base.n as f64 {
                        return Err(Error::InvalidConfig(format!(
                            "k = {v} exceeds n = {}",
                            self.base.n
                        )));
                    }
                }
                _ => {
                    return Err(Error::InvalidConfig(format!(
                        "grid value {v} invalid for sweep over {}",
                        self.sweep.as_str()
                    )))
                }
            }
        }
        Ok(())
    }
}

/// One CSV row. `ratio_to_opt` is present only when the relevant oracle is
/// within budget.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentRow {
    pub sweep_var: &'static str,
    pub value: f64,
    pub group: u32,
    pub algorithm: &'static str,
    pub total: f64,
    pub ratio_to_opt: Option<f64>,
    pub runtime_ms: f64,
}

pub const CSV_HEADER: &str = "sweep_var,value,group,algorithm,total,ratio_to_opt,runtime_ms";

impl ExperimentRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.sweep_var,
            self.value,
            self.group,
            self.algorithm,
            self.total,
            self.ratio_to_opt.map_or(String::new(), |r| r.to_string()),
            self.runtime_ms
        )
    }
}

/// Per-grid-point bookkeeping of the boundary-case exclusions used when
/// aggregating approximation factors.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridPointSummary {
    pub value: f64,
    pub excluded_groups: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentOutput {
    pub rows: Vec<ExperimentRow>,
    pub grid_summaries: Vec<GridPointSummary>,
}

impl ExperimentOutput {
    pub fn write_csv<W: std::io::Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "{CSV_HEADER}")?;
        for row in &self.rows {
            writeln!(out, "{}", row.to_csv())?;
        }
        Ok(())
    }
}

/// Uniform i.i.d. profiles: per SU, one draw for p_f then one for p_m, all
/// within `range`. Deterministic per seed (ChaCha8).
pub fn sample_instance<T: Real>(n: usize, seed: u64, range: (T, T)) -> Result<SensorSet<T>> {
    let (lo, hi) = range;
    if !(lo > T::zero() && hi < T::one() && lo < hi) {
        return Err(Error::InvalidConfig(
            "profile sampling range must satisfy 0 < lo < hi < 1".into(),
        ));
    }
    if n == 0 {
        return Err(Error::InvalidConfig("n must be >= 1".into()));
    }
    let lo_f = lo.to_f64().unwrap();
    let hi_f = hi.to_f64().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = move || real::<T>(lo_f + (hi_f - lo_f) * rng.random::<f64>());
    let sensors = (0..n)
        .map(|_| {
            let p_f = draw();
            let p_m = draw();
            SensorProfile::new(p_f, p_m)
        })
        .collect::<Result<Vec<_>>>()?;
    SensorSet::new(sensors)
}

/// Stable per-group instance seed: grid values share profiles so curves are
/// comparable across the sweep.
pub fn group_seed(base_seed: u64, group: u32) -> u64 {
    base_seed
        .wrapping_add((group as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(1)
}

struct Task<T> {
    grid_idx: usize,
    value: f64,
    group: u32,
    params: SystemParams<T>,
    n: usize,
    r: u32,
    k: usize,
}

fn effective_task<T: Real>(
    config: &ExperimentConfig<T>,
    grid_idx: usize,
    value: f64,
    group: u32,
) -> Result<Task<T>> {
    let b = &config.base;
    let mut n = b.n;
    let mut r = b.r;
    let mut k = b.n;
    let mut gamma = b.gamma;
    let mut alpha = b.alpha;
    match config.sweep {
        SweepVar::Gamma => gamma = real(value),
        SweepVar::Alpha => alpha = real(value),
        SweepVar::N => {
            n = value as usize;
            k = n;
        }
        SweepVar::R => r = value as u32,
        SweepVar::K => k = value as usize,
    }
    Ok(Task {
        grid_idx,
        value,
        group,
        params: SystemParams::new(b.t_c, b.pi0, gamma, alpha)?,
        n,
        r,
        k,
    })
}

fn run_task<T: Real>(
    config: &ExperimentConfig<T>,
    task: &Task<T>,
) -> Result<(Vec<ExperimentRow>, Option<bool>)> {
    let sensors = sample_instance(task.n, group_seed(config.seed, task.group), config.range)?;
    let subset = Subset::full(task.n);
    let params = &task.params;

    let bayes_total = if config.algorithms.iter().any(|a| {
        matches!(
            a,
            Algorithm::Bayes | Algorithm::Majority | Algorithm::And | Algorithm::Or
        )
    }) {
        let rule = rule_from_bayes(&sensors, &subset, params)?;
        Some(evaluate_rule(&rule, &sensors, &subset, params)?.total)
    } else {
        None
    };

    // Constrained oracle plus the two boundary-case flags, when in budget.
    let need_constrained = config.algorithms.iter().any(Algorithm::is_constrained);
    let mut constrained_opt: Option<T> = None;
    let mut excluded: Option<bool> = None;
    if need_constrained && task.n <= ENUMERATION_CAP {
        let movable = knapsack_view(&sensors, &subset, params)?.items.len();
        if movable <= ORACLE_MOVABLE_CAP {
            let oracle = exact_constrained_bruteforce(&sensors, &subset, params)?;
            let bayes_feasible = bayes_rule_feasible(&sensors, &subset, params)?;
            let all_moved_optimal = oracle.diagnostics.c_prime == T::zero();
            constrained_opt = Some(oracle.total);
            excluded = Some(bayes_feasible || all_moved_optimal);
        }
    }

    let selection_opt = if config.algorithms.contains(&Algorithm::Sfs) {
        best_subset_exhaustive(&sensors, params, task.k)
            .ok()
            .map(|r| r.total)
    } else {
        None
    };

    let ratio =
        |total: T, opt: Option<T>| -> Option<f64> { opt.map(|o| (total / o).to_f64().unwrap()) };

    let mut rows = Vec::with_capacity(config.algorithms.len());
    for &algo in &config.algorithms {
        let start = Instant::now();
        let (total, ratio_to_opt) = match algo {
            Algorithm::Bayes => {
                let t = bayes_total.expect("computed above");
                (t, Some(1.0))
            }
            Algorithm::Majority | Algorithm::And | Algorithm::Or => {
                let rule = match algo {
                    Algorithm::Majority => majority_rule(task.n)?,
                    Algorithm::And => and_rule(task.n)?,
                    _ => or_rule(task.n)?,
                };
                let t = evaluate_rule(&rule, &sensors, &subset, params)?.total;
                (t, ratio(t, bayes_total))
            }
            Algorithm::Greedy => {
                let t = greedy_constrained(&sensors, &subset, params)?.total;
                (t, ratio(t, constrained_opt))
            }
            Algorithm::Random => {
                let seed = group_seed(config.seed, task.group) ^ 0x5EED_0F5A_11D0_A4D1;
                let t = random_selection_constrained(&sensors, &subset, params, seed)?.total;
                (t, ratio(t, constrained_opt))
            }
            Algorithm::Dp => {
                let table = Arc::new(build_joint_counts(&sensors, params, task.r)?);
                let t = greedy_from_counts(&table, params, &sensors)?.total;
                (t, ratio(t, constrained_opt))
            }
            Algorithm::Sfs => {
                let t = sfs_select(&sensors, params, task.k)?.total;
                (t, ratio(t, selection_opt))
            }
            Algorithm::Exhaustive => {
                let t = best_subset_exhaustive(&sensors, params, task.k)?.total;
                (t, Some(1.0))
            }
        };
        rows.push(ExperimentRow {
            sweep_var: config.sweep.as_str(),
            value: task.value,
            group: task.group,
            algorithm: algo.as_str(),
            total: total.to_f64().unwrap(),
            ratio_to_opt,
            runtime_ms: start.elapsed().as_secs_f64() * 1e3,
        });
    }
    Ok((rows, excluded))
}

/// Runs the sweep: one row per (grid value, group, algorithm), sorted by
/// grid order, then group, then the configured algorithm order.
pub fn run_experiment<T: Real>(config: &ExperimentConfig<T>) -> Result<ExperimentOutput> {
    config.validate()?;
    let mut tasks = Vec::new();
    for (grid_idx, &value) in config.grid.iter().enumerate() {
        for group in 0..config.groups {
            tasks.push(effective_task(config, grid_idx, value, group)?);
        }
    }
    type TaskResult = (usize, u32, Vec<ExperimentRow>, Option<bool>);
    let results: Vec<Result<TaskResult>> = tasks
        .par_iter()
        .map(|task| {
            let (rows, excluded) = run_task(config, task)?;
            Ok((task.grid_idx, task.group, rows, excluded))
        })
        .collect();

    let mut keyed = Vec::with_capacity(results.len());
    for r in results {
        keyed.push(r?);
    }
    keyed.sort_by_key(|(grid_idx, group, _, _)| (*grid_idx, *group));

    let mut rows = Vec::new();
    let mut grid_summaries: Vec<GridPointSummary> = config
        .grid
        .iter()
        .map(|&value| GridPointSummary {
            value,
            excluded_groups: 0,
        })
        .collect();
    for (grid_idx, _, mut task_rows, excluded) in keyed {
        rows.append(&mut task_rows);
        if excluded == Some(true) {
            grid_summaries[grid_idx].excluded_groups += 1;
        }
    }
    Ok(ExperimentOutput {
        rows,
        grid_summaries,
    })
}
