//! Command-line experiment runner.
//!
//! Every subcommand reads one JSON config, writes `<stem>.<command>.json` (full
//! results) and `<stem>.<command>.csv` (summary rows) into `--out-dir`, and
//! prints a residual table. Exit codes: 0 when every check meets its
//! tolerance, 2 for an unreadable or invalid config, 3 for a solver failure
//! or a missed tolerance.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::bonds::{
    bond_curve, gap_to_limit, hetero_gamma_limit, monte_carlo_price, yield_bounds,
    RandomWalkEconomy,
};
use crate::complete::{constrained_consumption, AgentSpec};
use crate::equilibrium::{
    default_starts, nonuniqueness_scan, solve_equilibrium, vanishing_endowment_family,
    verify_equilibrium, EconomySpec, ScanRoot, TwoAgentExample,
};
use crate::error::Error;
use crate::incomplete::{one_period_closed_form, solve_kkt, verify_kkt, KktOptions};
use crate::instances::{random_agent, random_span_market, random_spd, random_tree, random_type_c};
use crate::market::{MarketConfig, Spd, WealthSpace};
use crate::oracle::{oracle_complete, oracle_incomplete};
use crate::probtree::{AdaptedProcess, TreeSpec};
use crate::savings::{
    monotonicity_report, regime_threshold, savings_fkg_slack, solve_c0_curve, variance_fkg_slack,
    SavingsConfig, MONOTONE_TOL, SOLVER_TOL,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_SCHEMA: i32 = 2;
pub const EXIT_FAILURE: i32 = 3;

#[derive(Debug, Parser)]
#[command(
    name = "cara",
    version,
    about = "Exponential-utility consumption experiments on finite probability trees"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub flags: Flags,
}

#[derive(Debug, Clone, Default, Args)]
pub struct Flags {
    /// Override the default tolerance of the primary checks.
    #[arg(long, global = true)]
    pub tol: Option<f64>,
    /// Seed for multi-start solvers, Monte Carlo and random instances.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Number of solver starts.
    #[arg(long, global = true)]
    pub starts: Option<usize>,
    /// Directory for the JSON and CSV outputs.
    #[arg(long, global = true, default_value = ".")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// Constrained optimum in a complete market, per agent.
    OptimizeComplete { config: PathBuf },
    /// Kuhn–Tucker optimum in an incomplete market, per agent.
    OptimizeIncomplete { config: PathBuf },
    /// Equilibrium state price densities by multi-start Newton on the weights.
    Equilibrium { config: PathBuf },
    /// Root scan of the two-agent one-period example.
    EquilibriaScan { config: PathBuf },
    /// Zero-coupon yields in a random-walk endowment economy.
    BondYields { config: PathBuf },
    /// Present consumption as a function of un-insurable income risk.
    Precautionary { config: PathBuf },
    /// Closed forms and the active-set solver against brute-force oracles.
    OracleCheck { config: PathBuf },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::OptimizeComplete { .. } => "optimize-complete",
            Command::OptimizeIncomplete { .. } => "optimize-incomplete",
            Command::Equilibrium { .. } => "equilibrium",
            Command::EquilibriaScan { .. } => "equilibria-scan",
            Command::BondYields { .. } => "bond-yields",
            Command::Precautionary { .. } => "precautionary",
            Command::OracleCheck { .. } => "oracle-check",
        }
    }

    pub fn config(&self) -> &Path {
        match self {
            Command::OptimizeComplete { config }
            | Command::OptimizeIncomplete { config }
            | Command::Equilibrium { config }
            | Command::EquilibriaScan { config }
            | Command::BondYields { config }
            | Command::Precautionary { config }
            | Command::OracleCheck { config } => config,
        }
    }
}

/// One line of the residual table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub tol: f64,
    pub pass: bool,
}

impl Check {
    /// Passes when `value ≤ tol`.
    pub fn at_most(name: impl Into<String>, value: f64, tol: f64) -> Self {
        Check {
            name: name.into(),
            value,
            tol,
            pass: value <= tol,
        }
    }

    /// Passes when `value ≥ tol`.
    pub fn at_least(name: impl Into<String>, value: f64, tol: f64) -> Self {
        Check {
            name: name.into(),
            value,
            tol,
            pass: value >= tol,
        }
    }
}

/// Results of one subcommand before they are written out.
#[derive(Debug, Clone)]
pub struct Report {
    pub results: Value,
    pub csv: String,
    pub checks: Vec<Check>,
}

impl Report {
    pub fn pass(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }
}

#[derive(Debug)]
pub enum CliError {
    Schema(String),
    Solver(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Solver(e)
    }
}

/// Paths written by a run.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Outputs {
    pub json: PathBuf,
    pub csv: PathBuf,
}

pub fn output_paths(command: &Command, out_dir: &Path) -> Outputs {
    let stem = command
        .config()
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "config".into());
    Outputs {
        json: out_dir.join(format!("{stem}.{}.json", command.name())),
        csv: out_dir.join(format!("{stem}.{}.csv", command.name())),
    }
}

/// Parses `args` (including the program name) and runs the subcommand.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_SCHEMA } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    run(&cli.command, &cli.flags)
}

/// Runs one subcommand, writes its outputs and returns the exit code.
pub fn run(command: &Command, flags: &Flags) -> i32 {
    let paths = output_paths(command, &flags.out_dir);
    let outcome = execute(command, flags);
    if let Err(e) = fs::create_dir_all(&flags.out_dir) {
        eprintln!("cannot create {}: {e}", flags.out_dir.display());
        return EXIT_FAILURE;
    }
    match outcome {
        Ok(report) => {
            let pass = report.pass();
            let doc = json!({
                "command": command.name(),
                "pass": pass,
                "checks": report.checks,
                "results": report.results,
            });
            if let Err(e) = write_outputs(&paths, &doc, &report.csv) {
                eprintln!("{e}");
                return EXIT_FAILURE;
            }
            print!("{}", residual_table(command.name(), &report.checks));
            if pass {
                EXIT_OK
            } else {
                EXIT_FAILURE
            }
        }
        Err(CliError::Schema(msg)) => {
            eprintln!("config error: {msg}");
            EXIT_SCHEMA
        }
        Err(CliError::Solver(e)) => {
            eprintln!("solver failure: {e}");
            let doc = json!({
                "command": command.name(),
                "pass": false,
                "error": e.to_string(),
                "diagnostics": format!("{e:?}"),
            });
            let _ = write_outputs(&paths, &doc, "error\n");
            EXIT_FAILURE
        }
    }
}

/// Runs a subcommand without touching the filesystem beyond reading the config.
pub fn execute(command: &Command, flags: &Flags) -> Result<Report, CliError> {
    let path = command.config();
    match command {
        Command::OptimizeComplete { .. } => optimize_complete(&load(path)?, flags),
        Command::OptimizeIncomplete { .. } => optimize_incomplete(&load(path)?, flags),
        Command::Equilibrium { .. } => equilibrium(&load(path)?, flags),
        Command::EquilibriaScan { .. } => equilibria_scan(&load(path)?, flags),
        Command::BondYields { .. } => bond_yields(&load(path)?, flags),
        Command::Precautionary { .. } => precautionary(&load(path)?, flags),
        Command::OracleCheck { .. } => oracle_check(&load(path)?, flags),
    }
}

fn load<T: DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Schema(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Schema(format!("{}: {e}", path.display())))
}

/// Validation failures of a parsed config count as schema errors.
fn schema<T>(r: crate::Result<T>) -> Result<T, CliError> {
    r.map_err(|e| CliError::Schema(e.to_string()))
}

fn write_outputs(paths: &Outputs, doc: &Value, csv: &str) -> Result<(), String> {
    let mut text = serde_json::to_string_pretty(doc).map_err(|e| e.to_string())?;
    text.push('\n');
    fs::write(&paths.json, text).map_err(|e| format!("{}: {e}", paths.json.display()))?;
    fs::write(&paths.csv, csv).map_err(|e| format!("{}: {e}", paths.csv.display()))
}

pub fn residual_table(title: &str, checks: &[Check]) -> String {
    let width = checks
        .iter()
        .map(|c| c.name.len())
        .max()
        .unwrap_or(5)
        .max(5);
    let mut s = format!(
        "{title}\n{:<width$}  {:>12}  {:>10}  status\n",
        "check", "value", "tol"
    );
    for c in checks {
        let _ = writeln!(
            s,
            "{:<width$}  {:>12.3e}  {:>10.1e}  {}",
            c.name,
            c.value,
            c.tol,
            if c.pass { "PASS" } else { "FAIL" }
        );
    }
    s
}

fn csv_row(out: &mut String, cells: &[String]) {
    out.push_str(&cells.join(","));
    out.push('\n');
}

/// Shortest round-trip form, scientific outside `[1e-4, 1e15)`.
fn f(x: f64) -> String {
    let a = x.abs();
    if a != 0.0 && a.is_finite() && !(1e-4..1e15).contains(&a) {
        format!("{x:e}")
    } else {
        format!("{x}")
    }
}

// ---------------------------------------------------------------- complete

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompleteConfig {
    pub tree: TreeSpec,
    /// State price density with `ξ_0 = 1`; defaults to 1 everywhere.
    #[serde(default)]
    pub spd: Option<AdaptedProcess>,
    pub agents: Vec<AgentSpec>,
    /// Also compare against the brute-force oracle.
    #[serde(default)]
    pub oracle: bool,
}

fn optimize_complete(cfg: &CompleteConfig, flags: &Flags) -> Result<Report, CliError> {
    let tol = flags.tol.unwrap_or(1e-10);
    let tree = schema(cfg.tree.build())?;
    let xi = match &cfg.spd {
        Some(p) => schema(Spd::new(&tree, p.clone()))?,
        None => Spd::unit(&tree),
    };
    for a in &cfg.agents {
        schema(a.validate(&tree))?;
    }
    let mut csv = String::from("agent,level,node,prob,spd,endowment,consumption\n");
    let mut checks = Vec::new();
    let mut results = Vec::new();
    for (i, a) in cfg.agents.iter().enumerate() {
        let sol = constrained_consumption(&tree, a, &xi)?;
        checks.push(Check::at_most(
            format!("agent {i} budget"),
            sol.budget_residual,
            tol,
        ));
        let oracle = if cfg.oracle {
            let o = oracle_complete(&tree, a, &xi, false)?;
            let gap = sol.consumption.sup_distance(&o.consumption);
            checks.push(Check::at_most(
                format!("agent {i} oracle gap"),
                gap,
                tol.max(1e-7),
            ));
            Some(json!({ "value": o.value, "gap": gap, "method": o.method }))
        } else {
            None
        };
        for (k, v, c) in sol.consumption.iter() {
            csv_row(
                &mut csv,
                &[
                    i.to_string(),
                    k.to_string(),
                    v.to_string(),
                    f(tree.prob(k, v)),
                    f(xi.get(k, v)),
                    f(a.endowment.get(k, v)),
                    f(c),
                ],
            );
        }
        results.push(json!({ "solution": sol, "oracle": oracle }));
    }
    Ok(Report {
        results: json!({ "agents": results }),
        csv,
        checks,
    })
}

// -------------------------------------------------------------- incomplete

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IncompleteConfig {
    pub market: MarketConfig,
    pub agents: Vec<AgentSpec>,
    #[serde(default)]
    pub oracle: bool,
}

fn optimize_incomplete(cfg: &IncompleteConfig, flags: &Flags) -> Result<Report, CliError> {
    let tol = flags.tol.unwrap_or(1e-8);
    let m = schema(cfg.market.build())?;
    let tree = m.tree();
    for a in &cfg.agents {
        schema(a.validate(tree))?;
    }
    let opts = KktOptions {
        starts: flags.starts.unwrap_or(KktOptions::default().starts),
        seed: flags.seed.unwrap_or(0),
        ..KktOptions::default()
    };
    let type_c = tree.horizon() == 1 && matches!(m.wealth_space(1), WealthSpace::Blocks(_));
    let mut csv = String::from("agent,level,node,endowment,consumption,multiplier,wealth\n");
    let mut checks = Vec::new();
    let mut results = Vec::new();
    for (i, a) in cfg.agents.iter().enumerate() {
        let sol = solve_kkt(a, &m, &opts)?;
        let rep = verify_kkt(&sol, a, &m, tol)?;
        let kkt = rep
            .projection
            .iter()
            .cloned()
            .fold(0.0, f64::max)
            .max(rep.complementary)
            .max(-rep.min_multiplier)
            .max(rep.budget)
            .max(rep.wealth_form);
        checks.push(Check::at_most(format!("agent {i} KKT residual"), kkt, tol));
        let closed = if type_c {
            let cf = one_period_closed_form(a, &m)?;
            let gap = cf
                .c1
                .iter()
                .enumerate()
                .map(|(v, c)| (c - sol.consumption.get(1, v)).abs())
                .fold((cf.c0 - sol.consumption.get(0, 0)).abs(), f64::max);
            checks.push(Check::at_most(
                format!("agent {i} closed-form gap"),
                gap,
                tol,
            ));
            Some(cf)
        } else {
            None
        };
        let oracle = if cfg.oracle {
            let o = oracle_incomplete(a, &m)?;
            let gap = (o.value - sol.utility).abs();
            checks.push(Check::at_most(
                format!("agent {i} oracle utility gap"),
                gap,
                tol,
            ));
            Some(json!({ "value": o.value, "gap": gap }))
        } else {
            None
        };
        for (k, v, c) in sol.consumption.iter() {
            csv_row(
                &mut csv,
                &[
                    i.to_string(),
                    k.to_string(),
                    v.to_string(),
                    f(a.endowment.get(k, v)),
                    f(c),
                    f(sol.multipliers.get(k, v)),
                    f(sol.wealth.get(k, v)),
                ],
            );
        }
        results
            .push(json!({ "solution": sol, "kkt": rep, "closed_form": closed, "oracle": oracle }));
    }
    Ok(Report {
        results: json!({ "agents": results }),
        csv,
        checks,
    })
}

// ------------------------------------------------------------- equilibrium

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VanishingConfig {
    /// Level-wise values of `X` in `ξ_k = X_k β_max(k)` on zero-endowment nodes.
    pub x: AdaptedProcess,
    /// `log λ_1`, required when the aggregate endowment vanishes at the root.
    #[serde(default)]
    pub anchor: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EquilibriumConfig {
    pub tree: TreeSpec,
    pub agents: Vec<AgentSpec>,
    /// Explicit Negishi weight starts; drawn at random when absent.
    #[serde(default)]
    pub starts: Option<Vec<Vec<f64>>>,
    /// Builds one member of the family for economies whose aggregate
    /// endowment vanishes somewhere.
    #[serde(default)]
    pub vanishing: Option<VanishingConfig>,
}

fn equilibrium(cfg: &EquilibriumConfig, flags: &Flags) -> Result<Report, CliError> {
    let tol = flags.tol.unwrap_or(1e-8);
    let tree = schema(cfg.tree.build())?;
    let econ = schema(EconomySpec::new(tree, cfg.agents.clone()))?;
    let solutions = match &cfg.vanishing {
        Some(v) => {
            schema(v.x.check_shape(econ.tree()))?;
            vec![vanishing_endowment_family(&econ, &v.x, v.anchor)?]
        }
        None => {
            let starts = match &cfg.starts {
                Some(s) => s.clone(),
                None => default_starts(&econ, flags.starts.unwrap_or(8), flags.seed.unwrap_or(0)),
            };
            solve_equilibrium(&econ, &starts)?
        }
    };
    let n = econ.n_agents();
    let mut header = vec![
        "solution".to_string(),
        "level".into(),
        "node".into(),
        "spd".into(),
        "aggregate".into(),
    ];
    header.extend((0..n).map(|i| format!("c{i}")));
    let mut csv = String::new();
    csv_row(&mut csv, &header);
    let mut checks = Vec::new();
    let mut results = Vec::new();
    for (s, sol) in solutions.iter().enumerate() {
        let rep = verify_equilibrium(&econ, sol.spd.process(), &sol.consumptions, tol)?;
        checks.push(Check::at_most(
            format!("solution {s} clearing"),
            rep.clearing,
            tol,
        ));
        let budget = rep.budgets.iter().cloned().fold(0.0, f64::max);
        checks.push(Check::at_most(format!("solution {s} budgets"), budget, tol));
        checks.push(Check::at_most(
            format!("solution {s} normalization"),
            rep.normalization,
            tol,
        ));
        let opt = rep.optimality.iter().cloned().fold(0.0, f64::max);
        checks.push(Check::at_most(format!("solution {s} optimality"), opt, tol));
        for (k, v, x) in sol.spd.process().iter() {
            let mut row = vec![
                s.to_string(),
                k.to_string(),
                v.to_string(),
                f(x),
                f(econ.aggregate().get(k, v)),
            ];
            row.extend(sol.consumptions.iter().map(|c| f(c.get(k, v))));
            csv_row(&mut csv, &row);
        }
        results.push(json!({ "solution": sol, "report": rep }));
    }
    Ok(Report {
        results: json!({ "solutions": results }),
        csv,
        checks,
    })
}

// ---------------------------------------------------------- equilibria scan

fn default_grid_size() -> usize {
    24
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScanConfig {
    /// Period-1 endowment of the first agent.
    pub e1_1: f64,
    /// Offset below the largest value of `h` used to place `ε²_0`.
    pub delta: f64,
    /// Starts per axis of the `(log x, log y)` grid.
    #[serde(default = "default_grid_size")]
    pub grid: usize,
    /// Declared number of distinct equilibria the scan must find.
    #[serde(default)]
    pub min_equilibria: Option<usize>,
}

fn scan_row(csv: &mut String, kind: &str, r: &ScanRoot) {
    csv_row(
        csv,
        &[
            kind.to_string(),
            f(r.x),
            f(r.y),
            f(r.budget[0]),
            f(r.budget[1]),
            f(r.recipe[0]),
            f(r.recipe[1]),
        ],
    );
}

fn equilibria_scan(cfg: &ScanConfig, flags: &Flags) -> Result<Report, CliError> {
    let tol = flags.tol.unwrap_or(1e-9);
    let ex = schema(TwoAgentExample::construct(cfg.e1_1, cfg.delta))?;
    let report = nonuniqueness_scan(&ex, cfg.grid)?;
    let mut csv = String::from("kind,x,y,budget_1,budget_2,reduced_1,reduced_2\n");
    let mut checks = vec![Check::at_least(
        "hypotheses hold",
        f64::from(u8::from(ex.hypotheses_hold())),
        1.0,
    )];
    for (i, r) in report.equilibria.iter().enumerate() {
        scan_row(&mut csv, "equilibrium", r);
        checks.push(Check::at_most(
            format!("equilibrium {i} budgets"),
            r.budget_max(),
            tol,
        ));
    }
    for r in &report.recipe_roots {
        scan_row(&mut csv, "reduced-root", r);
    }
    for r in &report.recipe_pairs {
        scan_row(&mut csv, "constructed-pair", r);
    }
    if let Some(k) = cfg.min_equilibria {
        checks.push(Check::at_least(
            "distinct equilibria",
            report.equilibria.len() as f64,
            k as f64,
        ));
    }
    Ok(Report {
        results: json!({ "example": ex, "x_max": ex.x_max(), "h_max": ex.h_max(), "scan": report }),
        csv,
        checks,
    })
}

// -------------------------------------------------------------- bond yields

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MonteCarloConfig {
    pub horizons: Vec<usize>,
    pub paths: usize,
    /// Largest accepted `|z|`.
    #[serde(default = "default_z")]
    pub max_z: f64,
}

fn default_z() -> f64 {
    3.0
}

fn default_step() -> usize {
    1
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BondConfig {
    pub economy: RandomWalkEconomy,
    /// Horizons `t_step, 2 t_step, …, t_max`.
    pub t_max: usize,
    #[serde(default = "default_step")]
    pub t_step: usize,
    /// Required `|Y(0, t_max) - limit|` when the impatience rate is common.
    #[serde(default)]
    pub limit_tol: Option<f64>,
    /// Yields at `t ≥ bounds_from` must lie within the bounds widened by this slack.
    #[serde(default)]
    pub bound_slack: Option<f64>,
    #[serde(default)]
    pub bounds_from: usize,
    #[serde(default)]
    pub monte_carlo: Option<MonteCarloConfig>,
}

fn bond_yields(cfg: &BondConfig, flags: &Flags) -> Result<Report, CliError> {
    schema(cfg.economy.validate())?;
    if cfg.t_step == 0 || cfg.t_max == 0 {
        return Err(CliError::Schema("t_max and t_step must be positive".into()));
    }
    let econ = &cfg.economy;
    let ts: Vec<usize> = (1..=cfg.t_max / cfg.t_step)
        .map(|i| i * cfg.t_step)
        .collect();
    let curve = bond_curve(econ, &ts)?;
    let common = econ.rhos.windows(2).all(|w| w[0] == w[1]);
    let limit = common.then(|| hetero_gamma_limit(&econ.gammas, econ.rhos[0], &econ.law));
    let gaps = if common {
        Some(gap_to_limit(econ, &ts)?)
    } else {
        None
    };
    let bounds = yield_bounds(econ).ok();
    let mut checks = Vec::new();
    let mut csv = String::from("t,log_price,yield,limit,gap_to_limit,lower,upper\n");
    let opt = |x: Option<f64>| x.map(f).unwrap_or_default();
    let lower = bounds.as_ref().and_then(|b| b.lower.finite());
    let upper = bounds.as_ref().and_then(|b| b.upper.finite());
    let mut worst_bound: f64 = f64::NEG_INFINITY;
    for (i, p) in curve.iter().enumerate() {
        let gap = gaps.as_ref().map(|g| g[i].1);
        csv_row(
            &mut csv,
            &[
                p.t.to_string(),
                f(p.log_price),
                f(p.yield_),
                opt(limit),
                opt(gap),
                opt(lower),
                opt(upper),
            ],
        );
        if p.t >= cfg.bounds_from {
            if let Some(l) = lower {
                worst_bound = worst_bound.max(l - p.yield_);
            }
            if let Some(u) = upper {
                worst_bound = worst_bound.max(p.yield_ - u);
            }
        }
    }
    if let (Some(tol), Some(g)) = (cfg.limit_tol, gaps.as_ref().and_then(|g| g.last())) {
        checks.push(Check::at_most(
            format!("gap to limit at t = {}", g.0),
            g.1.abs(),
            tol,
        ));
    }
    if let Some(slack) = cfg.bound_slack {
        if bounds.is_none() {
            return Err(CliError::Schema(
                "bound_slack needs a common risk aversion and decreasing impatience".into(),
            ));
        }
        checks.push(Check::at_most(
            format!("distance outside bounds for t ≥ {}", cfg.bounds_from),
            worst_bound,
            slack,
        ));
    }
    let mut mc = Vec::new();
    if let Some(m) = &cfg.monte_carlo {
        for (j, &t) in m.horizons.iter().enumerate() {
            let est = monte_carlo_price(
                econ,
                t,
                m.paths,
                flags.seed.unwrap_or(0).wrapping_add(j as u64),
                true,
            )?;
            let exact = crate::bonds::bond_price(econ, t)?.ln();
            let z = est.z_score(exact);
            checks.push(Check::at_most(
                format!("Monte Carlo |z| at t = {t}"),
                z,
                m.max_z,
            ));
            mc.push(json!({ "estimate": est, "exact_log_price": exact, "z": z }));
        }
    }
    Ok(Report {
        results: json!({
            "economy": econ,
            "curve": curve,
            "limit": limit,
            "gaps": gaps,
            "bounds": bounds,
            "monte_carlo": mc,
        }),
        csv,
        checks,
    })
}

// ------------------------------------------------------------ precautionary

fn precautionary(cfg: &SavingsConfig, flags: &Flags) -> Result<Report, CliError> {
    let tol = flags.tol.unwrap_or(1e-10);
    let inst = schema(cfg.build())?;
    let curve = solve_c0_curve(&inst)?;
    let threshold = regime_threshold(&inst)?;
    let in_regime = curve.iter().all(|p| p.in_regime);
    let mut checks = vec![
        Check::at_most("ε_0 above regime threshold", threshold - inst.e0, 0.0),
        Check::at_most(
            "budget residual",
            curve.iter().map(|p| p.budget_residual).fold(0.0, f64::max),
            tol,
        ),
        Check::at_most(
            "gap to KKT solver",
            curve.iter().map(|p| p.solver_gap).fold(0.0, f64::max),
            SOLVER_TOL,
        ),
    ];
    let mut fkg: f64 = 0.0;
    for p in &curve {
        for s in variance_fkg_slack(&inst, p.eps)?
            .into_iter()
            .chain(savings_fkg_slack(&inst, p.eps)?)
        {
            fkg = fkg.min(s);
        }
    }
    checks.push(Check::at_most(
        "negative covariance slack",
        (-fkg).max(0.0),
        1e-12,
    ));
    let monotone = if in_regime {
        let rep = monotonicity_report(&inst, &curve)?;
        checks.push(Check::at_most(
            "increase of c0",
            rep.max_violation.max(0.0),
            MONOTONE_TOL,
        ));
        checks.push(Check::at_most(
            "decrease of variance",
            rep.variance_drop,
            MONOTONE_TOL,
        ));
        Some(rep)
    } else {
        None
    };
    let mut csv = String::from(
        "eps,c0,lambda,var_min,var_max,dc0_deps,in_regime,budget_residual,solver_gap\n",
    );
    for (i, p) in curve.iter().enumerate() {
        let vmin = p.variance.iter().cloned().fold(f64::INFINITY, f64::min);
        let vmax = p.variance.iter().cloned().fold(0.0, f64::max);
        let d = monotone
            .as_ref()
            .map(|r| f(r.derivative[i]))
            .unwrap_or_default();
        csv_row(
            &mut csv,
            &[
                f(p.eps),
                f(p.c0),
                f(p.lambda),
                f(vmin),
                f(vmax),
                d,
                p.in_regime.to_string(),
                f(p.budget_residual),
                f(p.solver_gap),
            ],
        );
    }
    Ok(Report {
        results: json!({ "regime_threshold": threshold, "curve": curve, "monotonicity": monotone }),
        csv,
        checks,
    })
}

// ------------------------------------------------------------- oracle check

fn default_horizon() -> usize {
    2
}

fn default_branch() -> usize {
    3
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleCheckConfig {
    /// Random complete-market instances.
    #[serde(default)]
    pub complete: usize,
    /// Random incomplete-market instances.
    #[serde(default)]
    pub incomplete: usize,
    /// Random one-period type-C instances compared with the closed form.
    #[serde(default)]
    pub type_c: usize,
    #[serde(default = "default_horizon")]
    pub max_horizon: usize,
    #[serde(default = "default_branch")]
    pub max_branch: usize,
}

fn oracle_check(cfg: &OracleCheckConfig, flags: &Flags) -> Result<Report, CliError> {
    let tol = flags.tol.unwrap_or(1e-7);
    if cfg.max_horizon == 0 || cfg.max_branch < 2 {
        return Err(CliError::Schema(
            "max_horizon must be ≥ 1 and max_branch ≥ 2".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(flags.seed.unwrap_or(0));
    let mut csv = String::from("kind,instance,gap\n");
    let mut rows = Vec::new();
    let mut worst = [0.0f64; 3];
    for i in 0..cfg.complete {
        let h = rng.random_range(1..=cfg.max_horizon);
        let tree = random_tree(&mut rng, h, cfg.max_branch);
        let xi = random_spd(&mut rng, &tree);
        let a = random_agent(&mut rng, &tree, 1.0, 0.3);
        let closed = constrained_consumption(&tree, &a, &xi)?;
        let o = oracle_complete(&tree, &a, &xi, false)?;
        let gap = closed.consumption.sup_distance(&o.consumption);
        worst[0] = worst[0].max(gap);
        rows.push(("complete", i, gap));
    }
    for i in 0..cfg.incomplete {
        let h = rng.random_range(1..=cfg.max_horizon);
        let tree = random_tree(&mut rng, h, cfg.max_branch);
        let n_assets = rng.random_range(0..=1);
        let m = random_span_market(&mut rng, &tree, n_assets)?;
        let a = random_agent(&mut rng, &tree, 1.0, 0.4);
        let opts = KktOptions {
            seed: rng.random(),
            ..KktOptions::default()
        };
        let s = solve_kkt(&a, &m, &opts)?;
        let o = oracle_incomplete(&a, &m)?;
        let gap = (o.value - s.utility).abs();
        worst[1] = worst[1].max(gap);
        rows.push(("incomplete", i, gap));
    }
    for i in 0..cfg.type_c {
        let n_states = rng.random_range(3..=6);
        let n_blocks = rng.random_range(1..=n_states.min(3));
        let m = random_type_c(&mut rng, n_states, n_blocks)?;
        let tree = m.tree().clone();
        let e0 = rng.random_range(0.0..1.0);
        let e1: Vec<f64> = (0..n_states)
            .map(|_| {
                if rng.random_bool(0.3) {
                    0.0
                } else {
                    rng.random_range(0.0..2.0)
                }
            })
            .collect();
        let a = AgentSpec::new(
            &tree,
            rng.random_range(0.5..2.5),
            rng.random_range(0.0..0.1),
            AdaptedProcess::new(&tree, vec![vec![e0], e1])?,
        )?;
        let cf = one_period_closed_form(&a, &m)?;
        let s = solve_kkt(&a, &m, &KktOptions::default())?;
        let gap = cf
            .c1
            .iter()
            .enumerate()
            .map(|(v, c)| (c - s.consumption.get(1, v)).abs())
            .fold((cf.c0 - s.consumption.get(0, 0)).abs(), f64::max);
        worst[2] = worst[2].max(gap);
        rows.push(("type-c", i, gap));
    }
    for (kind, i, gap) in &rows {
        csv_row(&mut csv, &[kind.to_string(), i.to_string(), f(*gap)]);
    }
    let mut checks = Vec::new();
    for (name, count, w) in [
        ("complete: closed form vs oracle", cfg.complete, worst[0]),
        (
            "incomplete: KKT vs oracle utility",
            cfg.incomplete,
            worst[1],
        ),
        ("type-C: closed form vs KKT", cfg.type_c, worst[2]),
    ] {
        if count > 0 {
            checks.push(Check::at_most(name, w, tol));
        }
    }
    let results: Vec<Value> = rows
        .iter()
        .map(|(kind, i, gap)| json!({ "kind": kind, "instance": i, "gap": gap }))
        .collect();
    Ok(Report {
        results: json!({ "instances": results }),
        csv,
        checks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flags(dir: &Path) -> Flags {
        Flags {
            out_dir: dir.to_path_buf(),
            ..Flags::default()
        }
    }

    fn write(dir: &Path, name: &str, body: &str) -> PathBuf {
        let p = dir.join(name);
        fs::write(&p, body).unwrap();
        p
    }

    #[test]
    fn trivial_tree_consumes_endowment() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = write(
            dir.path(),
            "t0.json",
            r#"{"tree": {"conditional": []}, "agents": [{"gamma": 2.0, "endowment": [[1.5]]}]}"#,
        );
        let cmd = Command::OptimizeComplete { config: cfg };
        assert_eq!(run(&cmd, &flags(dir.path())), EXIT_OK);
        let csv = fs::read_to_string(output_paths(&cmd, dir.path()).csv).unwrap();
        assert_eq!(csv.lines().nth(1).unwrap(), "0,0,0,1,1,1.5,1.5");
    }

    #[test]
    fn unknown_keys_are_schema_errors() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = write(
            dir.path(),
            "bad.json",
            r#"{"tree": {"conditional": []}, "agents": [], "colour": 1}"#,
        );
        assert_eq!(
            run(
                &Command::OptimizeComplete { config: cfg },
                &flags(dir.path())
            ),
            EXIT_SCHEMA
        );
        let missing = dir.path().join("missing.json");
        assert_eq!(
            run(
                &Command::Precautionary { config: missing },
                &flags(dir.path())
            ),
            EXIT_SCHEMA
        );
        let neg = write(
            dir.path(),
            "neg.json",
            r#"{"tree": {"conditional": []}, "agents": [{"gamma": -1.0, "endowment": [[1.0]]}]}"#,
        );
        assert_eq!(
            run(
                &Command::OptimizeComplete { config: neg },
                &flags(dir.path())
            ),
            EXIT_SCHEMA
        );
    }

    #[test]
    fn missed_tolerance_exits_three() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = write(
            dir.path(),
            "e.json",
            r#"{"tree": {"conditional": [[[0.5, 0.5]]]},
                "agents": [{"gamma": 1.0, "endowment": [[1.0], [0.5, 2.0]]},
                           {"gamma": 2.0, "endowment": [[0.5], [1.0, 0.2]]}]}"#,
        );
        let cmd = Command::Equilibrium { config: cfg };
        assert_eq!(run(&cmd, &flags(dir.path())), EXIT_OK);
        let oc = write(dir.path(), "o.json", r#"{"complete": 3, "max_horizon": 2}"#);
        let oc = Command::OracleCheck { config: oc };
        assert_eq!(run(&oc, &flags(dir.path())), EXIT_OK);
        let strict = Flags {
            tol: Some(1e-30),
            ..flags(dir.path())
        };
        assert_eq!(run(&oc, &strict), EXIT_FAILURE);
        let doc: Value =
            serde_json::from_str(&fs::read_to_string(output_paths(&oc, dir.path()).json).unwrap())
                .unwrap();
        assert_eq!(doc["pass"], Value::Bool(false));
    }

    #[test]
    fn solver_failure_writes_diagnostics() {
        let dir = tempfile::tempdir().unwrap();
        // Aggregate endowment vanishes at a leaf: the weight solver refuses.
        let cfg = write(
            dir.path(),
            "z.json",
            r#"{"tree": {"conditional": [[[0.5, 0.5]]]},
                "agents": [{"gamma": 1.0, "endowment": [[1.0], [0.0, 2.0]]}]}"#,
        );
        let cmd = Command::Equilibrium { config: cfg };
        assert_eq!(run(&cmd, &flags(dir.path())), EXIT_FAILURE);
        let doc: Value =
            serde_json::from_str(&fs::read_to_string(output_paths(&cmd, dir.path()).json).unwrap())
                .unwrap();
        assert!(doc["error"].as_str().unwrap().contains("hypothesis"));
    }

    #[test]
    fn cli_parses_flags_anywhere() {
        let cli = Cli::try_parse_from([
            "cara",
            "--tol",
            "1e-6",
            "bond-yields",
            "c.json",
            "--seed",
            "7",
        ])
        .unwrap();
        assert_eq!(cli.flags.tol, Some(1e-6));
        assert_eq!(cli.flags.seed, Some(7));
        assert_eq!(cli.command.name(), "bond-yields");
        assert!(Cli::try_parse_from(["cara", "frobnicate", "c.json"]).is_err());
    }
}
