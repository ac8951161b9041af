//! `coopsense` — cooperative-sensing decision fusion from the command line.
//!
//! Subcommands: `solve` (one instance, one algorithm), `sweep` (seeded
//! parameter study, CSV), `simulate` (Monte-Carlo slots), `oracle`
//! (brute-force references), `gen` (instance generation).
//!
//! Exit codes: 0 success, 2 infeasible instance, 3 compute/memory budget
//! exceeded, 4 configuration or I/O error.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::PathBuf;
use std::str::FromStr;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use coopsense::constrained::{
    exact_constrained_bruteforce, greedy_constrained, hard_instance, random_selection_constrained,
};
use coopsense::dp::{build_joint_counts, greedy_from_counts};
use coopsense::experiment::{
    run_experiment, sample_instance, Algorithm, BaseParams, ExperimentConfig, SweepVar,
};
use coopsense::fusion::{
    and_rule, evaluate_rule, majority_rule, optimal_rule_bruteforce, or_rule, rule_from_bayes,
    DecisionRule,
};
use coopsense::model::{Instance, Subset, SystemParams};
use coopsense::selection::best_subset_exhaustive;
use coopsense::sim::run_simulation_observed;
use coopsense::{ConstrainedSolution64, Error as LibError, Instance64};

#[derive(Parser)]
#[command(
    name = "coopsense",
    version,
    about = "Decision fusion for cooperative spectrum sensing: optimal rules, constrained throughput maximization, sweeps and simulation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve one instance with one algorithm; prints JSON.
    Solve(SolveArgs),
    /// Run a seeded parameter sweep; prints CSV (exclusion counts on stderr).
    Sweep(SweepArgs),
    /// Monte-Carlo simulate a rule on an instance; prints a JSON summary.
    Simulate(SimulateArgs),
    /// Brute-force reference solvers for desk-scale instances.
    Oracle(OracleArgs),
    /// Generate an instance file: random profiles or a partition-encoding
    /// hard case.
    Gen(GenArgs),
}

#[derive(Args)]
struct SolveArgs {
    /// Instance JSON file.
    #[arg(long)]
    instance: PathBuf,
    /// bayes | majority | and | or | greedy | random | dp
    #[arg(long)]
    algorithm: String,
    /// Decimal places for the count-based path (dp only).
    #[arg(long, default_value_t = 2)]
    r: u32,
    /// Seed for the random-selection baseline.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct SweepArgs {
    /// Swept variable: gamma | alpha | n | r | k
    #[arg(long)]
    sweep: String,
    /// Comma-separated grid values.
    #[arg(long, value_delimiter = ',', required = true)]
    grid: Vec<f64>,
    /// Comma-separated algorithms per row.
    #[arg(long, value_delimiter = ',', required = true)]
    algorithms: Vec<String>,
    /// Random instance groups per grid value.
    #[arg(long, default_value_t = 30)]
    groups: u32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Profile sampling range as lo,hi.
    #[arg(long, value_delimiter = ',', default_values_t = [0.05, 0.45])]
    range: Vec<f64>,
    #[arg(long, default_value_t = 0.2)]
    t_c: f64,
    #[arg(long, default_value_t = 0.4)]
    pi0: f64,
    #[arg(long, default_value_t = 2.0)]
    gamma: f64,
    #[arg(long, default_value_t = 0.8)]
    alpha: f64,
    #[arg(long, default_value_t = 10)]
    n: usize,
    #[arg(long, default_value_t = 2)]
    r: u32,
    /// Write CSV here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long)]
    instance: PathBuf,
    /// Rule to simulate: bayes | majority | and | or | greedy | random | dp
    #[arg(long, default_value = "bayes")]
    algorithm: String,
    #[arg(long, default_value_t = 100_000)]
    slots: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Decimal places for the count-based path (dp only).
    #[arg(long, default_value_t = 2)]
    r: u32,
    /// Write a per-slot CSV trace here.
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Args)]
struct OracleArgs {
    #[arg(long)]
    instance: PathBuf,
    /// a = unconstrained rule search, b = constrained assignment search,
    /// d = size-k sensing-set search.
    #[arg(long)]
    problem: String,
    /// Sensing-set size (problem d).
    #[arg(long)]
    k: Option<usize>,
}

#[derive(Args)]
struct GenArgs {
    /// Number of interfering SUs (random generation).
    #[arg(long)]
    n: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Profile sampling range as lo,hi.
    #[arg(long, value_delimiter = ',', default_values_t = [0.05, 0.45])]
    range: Vec<f64>,
    /// Partition weights for a hard instance (overrides --n and the
    /// system-parameter flags; the construction fixes them).
    #[arg(long, value_delimiter = ',')]
    hard: Option<Vec<u32>>,
    #[arg(long, default_value_t = 0.2)]
    t_c: f64,
    #[arg(long, default_value_t = 0.4)]
    pi0: f64,
    #[arg(long, default_value_t = 2.0)]
    gamma: f64,
    #[arg(long, default_value_t = 0.8)]
    alpha: f64,
    /// Optional metadata: total SUs including non-interfering ones.
    #[arg(long)]
    m: Option<usize>,
    /// Write the instance here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

enum CliError {
    Lib(LibError),
    Io(String),
}

fn parse_range(range: &[f64]) -> Result<(f64, f64), CliError> {
    match range {
        [lo, hi] => Ok((*lo, *hi)),
        _ => Err(CliError::Lib(LibError::InvalidConfig(
            "--range takes exactly two values: lo,hi".into(),
        ))),
    }
}

impl From<LibError> for CliError {
    fn from(e: LibError) -> Self {
        CliError::Lib(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Lib(e) => write!(f, "{e}"),
            CliError::Io(e) => write!(f, "{e}"),
        }
    }
}

impl CliError {
    fn exit_code(&self) -> i32 {
        match self {
            CliError::Lib(LibError::Infeasible { .. }) => 2,
            CliError::Lib(LibError::BudgetExceeded(_) | LibError::EnumerationCap { .. }) => 3,
            _ => 4,
        }
    }
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 4 } else { 0 };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Solve(args) => solve(args),
        Command::Sweep(args) => sweep(args),
        Command::Simulate(args) => simulate(args),
        Command::Oracle(args) => oracle(args),
        Command::Gen(args) => gen(args),
    }
}

fn load_instance(path: &PathBuf) -> Result<Instance64, CliError> {
    let text = fs::read_to_string(path)?;
    Ok(Instance::from_json_str(&text)?)
}

/// Builds the requested rule, either directly (fusion rules) or as the rule
/// of a constrained solution.
fn build_rule(
    instance: &Instance64,
    algorithm: &str,
    r: u32,
    seed: u64,
) -> Result<(DecisionRule<f64>, Option<ConstrainedSolution64>), CliError> {
    let sensors = instance.sensors();
    let params = instance.params();
    let subset = Subset::full(sensors.len());
    let k = sensors.len();
    match algorithm {
        "bayes" => Ok((rule_from_bayes(sensors, &subset, params)?, None)),
        "majority" => Ok((majority_rule(k)?, None)),
        "and" => Ok((and_rule(k)?, None)),
        "or" => Ok((or_rule(k)?, None)),
        "greedy" => {
            let sol = greedy_constrained(sensors, &subset, params)?;
            Ok((sol.rule.clone(), Some(sol)))
        }
        "random" => {
            let sol = random_selection_constrained(sensors, &subset, params, seed)?;
            Ok((sol.rule.clone(), Some(sol)))
        }
        "dp" => {
            let table = Arc::new(build_joint_counts(sensors, params, r)?);
            let sol = greedy_from_counts(&table, params, sensors)?;
            Ok((sol.rule.clone(), Some(sol)))
        }
        other => Err(CliError::Lib(LibError::InvalidConfig(format!(
            "unknown algorithm {other:?}; expected bayes|majority|and|or|greedy|random|dp"
        )))),
    }
}

fn solve(args: SolveArgs) -> Result<(), CliError> {
    let instance = load_instance(&args.instance)?;
    let (rule, solution) = build_rule(&instance, &args.algorithm, args.r, args.seed)?;
    let output = match solution {
        Some(sol) => json!({
            "algorithm": args.algorithm,
            "solution": sol,
        }),
        None => {
            let evaluation = evaluate_rule(
                &rule,
                instance.sensors(),
                &Subset::full(instance.sensors().len()),
                instance.params(),
            )?;
            json!({
                "algorithm": args.algorithm,
                "rule": rule,
                "evaluation": evaluation,
            })
        }
    };
    println!(
        "{}",
        serde_json::to_string_pretty(&output).map_err(LibError::from)?
    );
    Ok(())
}

fn sweep(args: SweepArgs) -> Result<(), CliError> {
    let sweep = SweepVar::from_str(&args.sweep)?;
    let algorithms = args
        .algorithms
        .iter()
        .map(|s| Algorithm::from_str(s))
        .collect::<Result<Vec<_>, _>>()?;
    let params_check = SystemParams::new(args.t_c, args.pi0, args.gamma, args.alpha)?;
    let config = ExperimentConfig {
        sweep,
        grid: args.grid,
        base: BaseParams {
            t_c: params_check.t_c(),
            pi0: params_check.pi0(),
            gamma: params_check.gamma(),
            alpha: params_check.alpha(),
            n: args.n,
            r: args.r,
        },
        groups: args.groups,
        seed: args.seed,
        range: parse_range(&args.range)?,
        algorithms,
    };
    let output = run_experiment(&config)?;
    match &args.out {
        Some(path) => {
            let file = fs::File::create(path)?;
            output.write_csv(std::io::BufWriter::new(file))?;
        }
        None => {
            let stdout = std::io::stdout();
            output.write_csv(stdout.lock())?;
        }
    }
    for summary in &output.grid_summaries {
        eprintln!(
            "# value={} excluded_groups={}",
            summary.value, summary.excluded_groups
        );
    }
    Ok(())
}

fn simulate(args: SimulateArgs) -> Result<(), CliError> {
    let instance = load_instance(&args.instance)?;
    let sensors = instance.sensors();
    let params = instance.params();
    let subset = Subset::full(sensors.len());
    let (rule, solution) = build_rule(&instance, &args.algorithm, args.r, args.seed)?;

    let mut trace_file = match &args.trace {
        Some(path) => {
            let mut w = std::io::BufWriter::new(fs::File::create(path)?);
            writeln!(w, "slot,B,obs_hex,O,collision,throughput")?;
            Some(w)
        }
        None => None,
    };
    let mut trace_error = None;
    let summary = run_simulation_observed(
        sensors,
        &subset,
        &rule,
        params,
        args.slots,
        args.seed,
        |slot, t| {
            if let Some(w) = trace_file.as_mut() {
                if trace_error.is_none() {
                    if let Err(e) = writeln!(
                        w,
                        "{},{},{},{},{},{}",
                        slot,
                        t.pu_active as u8,
                        t.observations.hex(),
                        t.decision as u8,
                        t.collision as u8,
                        t.slot_throughput
                    ) {
                        trace_error = Some(e);
                    }
                }
            }
        },
    )?;
    if let Some(e) = trace_error {
        return Err(e.into());
    }

    let analytic = if sensors.len() <= coopsense::model::ENUMERATION_CAP {
        Some(evaluate_rule(&rule, sensors, &subset, params)?)
    } else {
        None
    };
    let mut output = json!({
        "algorithm": args.algorithm,
        "summary": summary,
        "collision_rate": summary.collision_rate(),
        "pu_success_rate": summary.pu_success_rate(),
    });
    if let Some(analytic) = analytic {
        output["analytic"] = serde_json::to_value(analytic).map_err(LibError::from)?;
    }
    if let Some(sol) = solution {
        output["solution_feasible"] = json!(sol.feasible);
    }
    println!(
        "{}",
        serde_json::to_string_pretty(&output).map_err(LibError::from)?
    );
    Ok(())
}

fn oracle(args: OracleArgs) -> Result<(), CliError> {
    let instance = load_instance(&args.instance)?;
    let sensors = instance.sensors();
    let params = instance.params();
    let subset = Subset::full(sensors.len());
    let output = match args.problem.as_str() {
        "a" => {
            let (rule, evaluation) = optimal_rule_bruteforce(sensors, &subset, params)?;
            json!({"problem": "a", "rule": rule, "evaluation": evaluation})
        }
        "b" => {
            let solution = exact_constrained_bruteforce(sensors, &subset, params)?;
            json!({"problem": "b", "solution": solution})
        }
        "d" => {
            let k = args.k.ok_or_else(|| {
                CliError::Lib(LibError::InvalidConfig(
                    "--k is required for problem d".into(),
                ))
            })?;
            let selection = best_subset_exhaustive(sensors, params, k)?;
            json!({"problem": "d", "selection": selection})
        }
        other => {
            return Err(CliError::Lib(LibError::InvalidConfig(format!(
                "unknown problem {other:?}; expected a|b|d"
            ))))
        }
    };
    println!(
        "{}",
        serde_json::to_string_pretty(&output).map_err(LibError::from)?
    );
    Ok(())
}

fn gen(args: GenArgs) -> Result<(), CliError> {
    let instance = match &args.hard {
        Some(weights) => {
            let (sensors, params) = hard_instance::<f64>(weights)?;
            Instance::new(sensors, params)
        }
        None => {
            let n = args.n.ok_or_else(|| {
                CliError::Lib(LibError::InvalidConfig(
                    "either --n or --hard is required".into(),
                ))
            })?;
            let sensors = sample_instance(n, args.seed, parse_range(&args.range)?)?;
            let params = SystemParams::new(args.t_c, args.pi0, args.gamma, args.alpha)?;
            Instance::new(sensors, params)
        }
    };
    let instance = match args.m {
        Some(m) => instance.with_m_total(m)?,
        None => instance,
    };
    let text = instance.to_json_string()?;
    match &args.out {
        Some(path) => fs::write(path, text + "\n")?,
        None => println!("{text}"),
    }
    Ok(())
}
