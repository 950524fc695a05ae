//! `pipetbench`: lattice, pattern, planning and simulation commands.
//!
//! Exit codes: 0 success, 1 runtime error, 2 usage error, 3 config error,
//! 4 no reachable goal pose, 5 motion planning failure.

mod config;

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use pipetbench_core::labware::{
    count_availability_patterns, routine_patterns, Slot, TargetKind, DEFAULT_COLS, DEFAULT_ROWS,
};
use pipetbench_core::planning::{segment_name, CycleFailure};
use pipetbench_core::sim::{
    grid_csv, mean_grid, plan_cycle, run_trials, sweep_csv, sweep_rotation_intervals, BatchSummary, LoopMode,
    RunMetrics, Scenario, SimError, Workcell,
};
use pipetbench_core::spiral::SpiralLattice;
use serde::Serialize;

use config::{ConfigError, OutputSection, ScenarioConfig};

const EXIT_RUNTIME: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_CONFIG: u8 = 3;
const EXIT_GOAL_SEARCH: u8 = 4;
const EXIT_PLANNING: u8 = 5;

#[derive(Parser, Debug)]
#[command(name = "pipetbench", version, about = "Pipette-tip pickup planning and simulation")]
struct Cli {
    /// Overrides the config's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Scenario file (TOML). Built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory [default: config `output.dir`, else `out`].
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    #[arg(long, short, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build the deviation lattice and write it as CSV.
    Spiral {
        /// Acceptable residual error, mm.
        #[arg(long)]
        e_mm: f64,
        /// Tip pitch, mm.
        #[arg(long)]
        d_mm: f64,
    },
    /// Plan one full dispense cycle and write one CSV per segment.
    Plan {
        /// Rack slot as `row,col` [default: first slot in picking order].
        #[arg(long, value_parser = parse_slot)]
        slot: Option<Slot>,
    },
    /// Monte-Carlo runs over the whole rack.
    Simulate {
        /// Overrides the config's loop mode.
        #[arg(long, value_enum)]
        mode: Option<Mode>,
        #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
        trials: u64,
    },
    /// Neighbor availability pattern counts.
    Patterns {
        /// Print the picking-routine masks.
        #[arg(long)]
        list_routine: bool,
        /// Count and list raw patterns for one target position.
        #[arg(long, value_enum)]
        target: Option<Target>,
    },
    /// Success rate and steps against the classifier's rotation interval.
    Sweep {
        #[arg(long, value_delimiter = ',', default_value = "5,10,20,30,45")]
        intervals: Vec<f64>,
        #[arg(long, default_value_t = 20, value_parser = clap::value_parser!(u64).range(1..))]
        trials: u64,
    },
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum Mode {
    Open,
    Closed,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum Target {
    Corner,
    Edge,
    Interior,
}

fn parse_slot(s: &str) -> Result<Slot, String> {
    let (r, c) = s.split_once(',').ok_or("expected row,col")?;
    let parse = |v: &str| v.trim().parse::<usize>().map_err(|e| e.to_string());
    Ok(Slot::new(parse(r)?, parse(c)?))
}

#[derive(Debug)]
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn runtime(e: impl ToString) -> Self {
        Self {
            code: EXIT_RUNTIME,
            message: e.to_string(),
        }
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Self {
            code: EXIT_CONFIG,
            message: e.to_string(),
        }
    }
}

impl From<SimError> for Failure {
    fn from(e: SimError) -> Self {
        let code = match &e {
            SimError::Cycle(CycleFailure::GoalSearch { .. }) => EXIT_GOAL_SEARCH,
            SimError::Cycle(CycleFailure::Planning { .. }) => EXIT_PLANNING,
            SimError::Invalid(_) => EXIT_CONFIG,
            _ => EXIT_RUNTIME,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Self::runtime(e)
    }
}

struct Context {
    scenario: Scenario,
    /// The config as run, seed override applied.
    resolved: ScenarioConfig,
    output: OutputSection,
    out_dir: PathBuf,
    verbose: bool,
}

impl Context {
    fn new(cli: &Cli) -> Result<Self, Failure> {
        let mut cfg = match &cli.config {
            Some(p) => ScenarioConfig::load(p)?,
            None => ScenarioConfig::default(),
        };
        let mut scenario = cfg.scenario();
        if let Some(seed) = cli.seed {
            scenario.seed = seed;
        }
        cfg.seed = Some(scenario.seed);
        let out_dir = cli
            .out_dir
            .clone()
            .or_else(|| cfg.output.dir.clone())
            .unwrap_or_else(|| PathBuf::from("out"));
        Ok(Self {
            scenario,
            output: cfg.output.clone(),
            resolved: cfg,
            out_dir,
            verbose: cli.verbose,
        })
    }

    fn write(&self, name: &str, contents: &str) -> Result<PathBuf, Failure> {
        fs::create_dir_all(&self.out_dir)?;
        let path = self.out_dir.join(name);
        fs::write(&path, contents)?;
        if self.verbose {
            eprintln!("wrote {}", path.display());
        }
        Ok(path)
    }

    fn write_config(&self) -> Result<(), Failure> {
        self.write("config.toml", &self.resolved.to_toml()).map(drop)
    }
}

fn cmd_spiral(ctx: &Context, e_mm: f64, d_mm: f64) -> Result<(), Failure> {
    let lattice = SpiralLattice::build(e_mm * 1e-3, d_mm * 1e-3).map_err(|e| Failure {
        code: EXIT_USAGE,
        message: e.to_string(),
    })?;
    ctx.write("lattice.csv", &lattice.to_csv())?;
    println!("rings={} nodes={}", lattice.rings(), lattice.len());
    Ok(())
}

fn cmd_plan(ctx: &Context, slot: Option<Slot>) -> Result<(), Failure> {
    let s = &ctx.scenario;
    let cell = Workcell::build(s)?;
    let slot = match slot {
        Some(slot) => slot,
        None => cell
            .rack
            .picking_sequence()
            .first()
            .copied()
            .ok_or_else(|| Failure::runtime("rack holds no tips"))?,
    };
    ctx.write_config()?;
    let plan = plan_cycle(s, &cell, slot, s.seed)?;
    println!("slot={slot} seed={}", s.seed);
    for (k, traj) in plan.trajectories.iter().enumerate() {
        let name = format!("segment_{}.csv", k + 1);
        ctx.write(&name, &traj.to_csv())?;
        println!(
            "segment {} ({}): duration={:.4}s retries={} rejected_poses={}",
            k + 1,
            segment_name(k),
            traj.duration(),
            plan.retries[k],
            plan.rejected_poses[k + 1],
        );
    }
    println!("cycle duration={:.4}s retries={}", plan.duration(), plan.total_retries());
    Ok(())
}

type GridFn = fn(&RunMetrics) -> Vec<Vec<f64>>;

#[derive(Serialize)]
struct SimulateReport<'a> {
    mode: LoopMode,
    seed: u64,
    batch: BatchSummary,
    #[serde(skip_serializing_if = "Option::is_none")]
    runs: Option<&'a [RunMetrics]>,
}

fn cmd_simulate(ctx: &Context, mode: Option<Mode>, trials: u64) -> Result<(), Failure> {
    let mut s = ctx.scenario.clone();
    if let Some(m) = mode {
        s.correction.mode = match m {
            Mode::Open => LoopMode::Open,
            Mode::Closed => LoopMode::Closed,
        };
    }
    ctx.write_config()?;
    let runs = run_trials(&s, trials as usize)?;
    let batch = BatchSummary::from_runs(&runs);
    let report = SimulateReport {
        mode: s.correction.mode,
        seed: s.seed,
        batch,
        runs: ctx.output.per_run.then_some(runs.as_slice()),
    };
    ctx.write("metrics.json", &(serde_json::to_string_pretty(&report).map_err(Failure::runtime)? + "\n"))?;
    if ctx.output.grids {
        let grids: [(&str, GridFn); 3] = [
            ("steps_grid.csv", RunMetrics::steps_grid),
            ("success_grid.csv", RunMetrics::success_grid),
            ("infeasible_grid.csv", RunMetrics::infeasible_grid),
        ];
        for (name, f) in grids {
            let all: Vec<_> = runs.iter().map(f).collect();
            ctx.write(name, &grid_csv(&mean_grid(&all)))?;
        }
    }
    println!(
        "trials={} tips={} attached={} success_rate={:.4} average_steps={:.4} max_infeasible={}",
        batch.trials, batch.tips, batch.attached, batch.success_rate, batch.average_steps, batch.max_infeasible
    );
    Ok(())
}

fn cmd_patterns(list_routine: bool, target: Option<Target>) -> Result<(), Failure> {
    let mut out = String::new();
    if let Some(t) = target {
        let kind = match t {
            Target::Corner => TargetKind::Corner,
            Target::Edge => TargetKind::Edge,
            Target::Interior => TargetKind::Interior,
        };
        let patterns = kind.patterns();
        let name = format!("{t:?}").to_lowercase();
        writeln!(out, "target={name} patterns={} reduced={}", patterns.len(), kind.reduced_count()).unwrap();
        for m in &patterns {
            writeln!(out, "{}", m.to_bitstring()).unwrap();
        }
    } else {
        let c = count_availability_patterns();
        writeln!(out, "total={} reduced={} routine={}", c.total, c.symmetry_reduced, c.picking_routine).unwrap();
        if list_routine {
            for m in routine_patterns(DEFAULT_ROWS, DEFAULT_COLS) {
                writeln!(out, "{}", m.to_bitstring()).unwrap();
            }
        }
    }
    emit(&out)
}

/// Print to stdout; a reader that hangs up early is not an error.
fn emit(text: &str) -> Result<(), Failure> {
    match std::io::stdout().lock().write_all(text.as_bytes()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}

fn cmd_sweep(ctx: &Context, intervals: &[f64], trials: u64) -> Result<(), Failure> {
    if intervals.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
        return Err(Failure {
            code: EXIT_USAGE,
            message: "intervals must be positive".into(),
        });
    }
    ctx.write_config()?;
    let rows = sweep_rotation_intervals(&ctx.scenario, intervals, trials as usize)?;
    let csv = sweep_csv(&rows);
    ctx.write("sweep.csv", &csv)?;
    emit(&csv)
}

fn configure_threads() -> Result<(), Failure> {
    let Ok(v) = std::env::var("PIPETBENCH_THREADS") else {
        return Ok(());
    };
    let n: usize = v.trim().parse().map_err(|_| Failure {
        code: EXIT_USAGE,
        message: format!("PIPETBENCH_THREADS must be a positive integer, got {v:?}"),
    })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(Failure::runtime)
}

fn run(cli: Cli) -> Result<(), Failure> {
    configure_threads()?;
    if let Command::Patterns { list_routine, target } = cli.command {
        return cmd_patterns(list_routine, target);
    }
    let ctx = Context::new(&cli)?;
    if ctx.verbose {
        eprintln!("seed {} out-dir {}", ctx.scenario.seed, ctx.out_dir.display());
    }
    match cli.command {
        Command::Spiral { e_mm, d_mm } => cmd_spiral(&ctx, e_mm, d_mm),
        Command::Plan { slot } => cmd_plan(&ctx, slot),
        Command::Simulate { mode, trials } => cmd_simulate(&ctx, mode, trials),
        Command::Sweep { ref intervals, trials } => cmd_sweep(&ctx, intervals, trials),
        Command::Patterns { .. } => unreachable!(),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
