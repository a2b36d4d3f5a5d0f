//! `reservoir`: command-line front end for the reservoir toolkit.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use reservoir_core::config::{AppConfig, Period, Strategy};
use reservoir_core::dp::{self, DpSolution, Policy};
use reservoir_core::empc::ForecastSource;
use reservoir_core::harness::{
    execute_with_manifest, load_manifest, verify_manifest, with_jobs, write_atomic, write_outputs, CompareSettings,
    Experiment, InnerLoopFit, ManifestCommand, SweepSpec,
};
use reservoir_core::hydrology::{load_trace, HydrologyTrace};
use reservoir_core::innerloop::{linearized_inner_loop, simulate_inner_loop};
use reservoir_core::reservoir::Trajectory;
use reservoir_core::vrft::{fit_pid, mean_annual_cycle};
use reservoir_core::Error;

#[derive(Debug, Parser)]
#[command(name = "reservoir", version, about = "Reservoir operation: DP policies, VRFT inner loop, eMPC governor")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// JSON configuration; the shipped default when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true, default_value = ".")]
    output_dir: PathBuf,
    /// Overrides the hydrology seed of the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for sweeps and DP stages.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum PeriodArg {
    Train,
    Validation,
}

impl From<PeriodArg> for Period {
    fn from(p: PeriodArg) -> Self {
        match p {
            PeriodArg::Train => Period::Train,
            PeriodArg::Validation => Period::Validation,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum StrategyArg {
    Ddp,
    Sdp,
    Empc,
}

impl From<StrategyArg> for Strategy {
    fn from(s: StrategyArg) -> Self {
        match s {
            StrategyArg::Ddp => Strategy::Ddp,
            StrategyArg::Sdp => Strategy::Sdp,
            StrategyArg::Empc => Strategy::Empc,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ForecastArg {
    Oracle,
    Persistence,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ControllerArg {
    /// The PID inner loop tracking a storage reference.
    Pid,
    /// A stored DP policy.
    Policy,
}

/// Where a command takes its hydrology from.
#[derive(Debug, Args)]
struct TraceArgs {
    #[arg(long, value_enum, default_value = "train")]
    period: PeriodArg,
    /// A `day,q_d,q_t,q_l` CSV used instead of the synthetic period trace.
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write the synthetic training and validation traces.
    GenHydrology,
    /// Run a controller on a trace and score it.
    Simulate {
        #[arg(long, value_enum, default_value = "pid")]
        controller: ControllerArg,
        /// Storage reference CSV with an `s_ref` column (pid controller).
        #[arg(long)]
        reference: Option<PathBuf>,
        /// Inner-loop JSON from `vrft-fit` (pid controller); fitted when omitted.
        #[arg(long)]
        gains: Option<PathBuf>,
        /// Policy JSON from `dp` or `sdp` (policy controller).
        #[arg(long)]
        policy: Option<PathBuf>,
        #[command(flatten)]
        trace: TraceArgs,
    },
    /// Deterministic DP with perfect foresight over the trace.
    Dp {
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        storage_nodes: Option<usize>,
        #[command(flatten)]
        trace: TraceArgs,
    },
    /// Periodic stochastic DP; the policy is scored on the trace.
    Sdp {
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        storage_nodes: Option<usize>,
        #[arg(long)]
        max_sweeps: Option<usize>,
        #[command(flatten)]
        trace: TraceArgs,
    },
    /// Fit the inner-loop PID gains by VRFT.
    VrftFit {
        /// Trajectory CSV to fit on; the training DDP run when omitted.
        #[arg(long)]
        trajectory: Option<PathBuf>,
    },
    /// Closed-loop receding-horizon run of the eMPC governor.
    EmpcRun {
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        horizon: Option<usize>,
        #[arg(long, value_enum)]
        forecast: Option<ForecastArg>,
        /// Inner-loop JSON from `vrft-fit`; fitted when omitted.
        #[arg(long)]
        gains: Option<PathBuf>,
        #[command(flatten)]
        trace: TraceArgs,
    },
    /// Weight and horizon sweep with its Pareto front.
    Pareto {
        /// Replaces the sweep weights (repeatable).
        #[arg(long)]
        alpha: Vec<f64>,
        /// Replaces the eMPC horizons (repeatable).
        #[arg(long)]
        horizon: Vec<usize>,
        /// Replaces the swept strategies (repeatable).
        #[arg(long, value_enum)]
        strategy: Vec<StrategyArg>,
        #[arg(long, value_enum)]
        period: Option<PeriodArg>,
        /// Re-executes a manifest and checks every number bit for bit.
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Train/validation table of the strategies.
    Compare {
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        horizon: Option<usize>,
        #[arg(long, value_enum)]
        strategy: Vec<StrategyArg>,
        /// Re-executes a manifest and checks every number bit for bit.
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
}

/// Exit status: 1 for bad input, 2 for failed computations.
#[derive(Debug)]
enum Failure {
    Validation(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        if e.is_validation() {
            Failure::Validation(e.to_string())
        } else {
            Failure::Runtime(e.to_string())
        }
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let jobs = cli.common.jobs;
    let outcome = with_jobs(jobs, move || run(cli)).map_err(Failure::from).and_then(|r| r);
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Validation(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}

fn load_config(common: &Common) -> CliResult<AppConfig> {
    let cfg = match &common.config {
        Some(path) => AppConfig::load(path).map_err(|e| match e {
            Error::Io(io) => Failure::Validation(format!("cannot read config {}: {io}", path.display())),
            other => other.into(),
        })?,
        None => AppConfig::default_config(),
    };
    let cfg = match common.seed {
        Some(seed) => cfg.with_seed(seed),
        None => cfg,
    };
    cfg.validate()?;
    Ok(cfg)
}

fn read_input(path: &Path) -> CliResult<std::io::BufReader<std::fs::File>> {
    std::fs::File::open(path)
        .map(std::io::BufReader::new)
        .map_err(|e| Failure::Validation(format!("cannot read {}: {e}", path.display())))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> CliResult<T> {
    serde_json::from_reader(read_input(path)?)
        .map_err(|e| Failure::Validation(format!("{}: {e}", path.display())))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let bytes = serde_json::to_vec_pretty(value).map_err(Error::from)?;
    write_atomic(path, &bytes)?;
    Ok(())
}

fn write_trajectory(path: &Path, traj: &Trajectory) -> CliResult<()> {
    let mut bytes = Vec::new();
    traj.write_csv(&mut bytes)?;
    write_atomic(path, &bytes)?;
    Ok(())
}

fn pick_trace(exp: &Experiment, args: &TraceArgs) -> CliResult<HydrologyTrace> {
    match &args.trace {
        Some(path) => Ok(load_trace(read_input(path)?)?),
        None => Ok(exp.trace(args.period.into()).clone()),
    }
}

/// Scores a trajectory, writes it with its report and prints the report.
fn finish_run(exp: &Experiment, dir: &Path, traj: &Trajectory) -> CliResult<()> {
    let report = exp.score(traj)?;
    write_trajectory(&dir.join("trajectory.csv"), traj)?;
    write_json(&dir.join("report.json"), &report)?;
    println!("J_H = {:.4} kWh/day, J_F = {:.4} cm^2", report.j_h, report.j_f);
    Ok(())
}

fn inner_loop(exp: &Experiment, gains: Option<&Path>) -> CliResult<InnerLoopFit> {
    match gains {
        Some(path) => read_json(path),
        None => Ok(exp.fit_inner_loop()?),
    }
}

fn run(cli: Cli) -> CliResult<()> {
    let mut cfg = load_config(&cli.common)?;
    let dir = cli.common.output_dir.clone();
    match cli.command {
        Command::GenHydrology => {
            let exp = Experiment::new(cfg)?;
            for (name, trace) in [("train", &exp.train), ("validation", &exp.validation)] {
                let mut bytes = Vec::new();
                trace.write_csv(&mut bytes)?;
                write_atomic(&dir.join(format!("hydrology_{name}.csv")), &bytes)?;
            }
            println!("wrote {} training and {} validation days", exp.train.len(), exp.validation.len());
            Ok(())
        }
        Command::Simulate {
            controller,
            reference,
            gains,
            policy,
            trace,
        } => {
            let exp = Experiment::new(cfg)?;
            let tr = pick_trace(&exp, &trace)?;
            let traj = match controller {
                ControllerArg::Policy => {
                    let path = policy.ok_or_else(|| Failure::Validation("--policy is required".into()))?;
                    let policy: Policy = read_json(&path)?;
                    exp.run_policy(&policy, &tr)?
                }
                ControllerArg::Pid => {
                    let path = reference.ok_or_else(|| Failure::Validation("--reference is required".into()))?;
                    let s_ref = read_reference(&path)?;
                    let inner = inner_loop(&exp, gains.as_deref())?;
                    let c = &exp.config;
                    simulate_inner_loop(
                        &c.reservoir,
                        &c.routing,
                        &inner.pid,
                        &s_ref,
                        &tr,
                        c.reservoir.initial_storage,
                        &exp.inner_loop_options(),
                    )?
                }
            };
            finish_run(&exp, &dir, &traj)
        }
        Command::Dp {
            alpha,
            storage_nodes,
            trace,
        } => {
            if let Some(n) = storage_nodes {
                cfg.dp.storage_nodes = n;
            }
            cfg.validate()?;
            let alpha = alpha.unwrap_or(cfg.empc.alpha);
            let exp = Experiment::new(cfg)?;
            let tr = pick_trace(&exp, &trace)?;
            let sol = dp::solve_ddp(&exp.dp_model(alpha)?, &tr, None)?;
            let traj = exp.run_policy(&sol.policy, &tr)?;
            write_solution(&dir, &sol)?;
            finish_run(&exp, &dir, &traj)
        }
        Command::Sdp {
            alpha,
            storage_nodes,
            max_sweeps,
            trace,
        } => {
            if let Some(n) = storage_nodes {
                cfg.dp.storage_nodes = n;
            }
            if let Some(n) = max_sweeps {
                cfg.dp.max_sweeps = n;
            }
            cfg.validate()?;
            let alpha = alpha.unwrap_or(cfg.empc.alpha);
            let exp = Experiment::new(cfg)?;
            let tr = pick_trace(&exp, &trace)?;
            let sol = exp.solve_sdp(alpha, &exp.ensemble()?)?;
            let traj = exp.run_policy(&sol.policy, &tr)?;
            write_solution(&dir, &sol)?;
            finish_run(&exp, &dir, &traj)
        }
        Command::VrftFit { trajectory } => {
            let exp = Experiment::new(cfg)?;
            let inner = match trajectory {
                None => exp.fit_inner_loop()?,
                Some(path) => {
                    let c = &exp.config;
                    let traj = Trajectory::read_csv(read_input(&path)?, 0, c.reservoir.seconds_per_step)?;
                    let cycle = mean_annual_cycle(&traj)?;
                    let il = &c.inner_loop;
                    let fit = fit_pid(&cycle.u, &cycle.s, &il.reference_model, il.prefilter.as_ref())?;
                    let scaling = il.scaling(&c.reservoir, &exp.train);
                    InnerLoopFit {
                        pid: fit.params,
                        model: linearized_inner_loop(&fit.params, &scaling)?,
                        fit: Some(fit),
                        scaling,
                    }
                }
            };
            write_json(&dir.join("pid.json"), &inner)?;
            let [kp, ki, kd] = inner.pid.theta;
            println!("theta = ({kp:e}, {ki:e}, {kd:e})");
            Ok(())
        }
        Command::EmpcRun {
            alpha,
            horizon,
            forecast,
            gains,
            trace,
        } => {
            let exp = Experiment::new(cfg)?;
            let tr = pick_trace(&exp, &trace)?;
            let mut ecfg = exp.empc_config(
                alpha.unwrap_or(exp.config.empc.alpha),
                horizon.unwrap_or(exp.config.empc.horizon),
            );
            if let Some(f) = forecast {
                ecfg.forecast = match f {
                    ForecastArg::Oracle => ForecastSource::Oracle,
                    ForecastArg::Persistence => ForecastSource::Persistence,
                };
            }
            ecfg.validate()?;
            let inner = inner_loop(&exp, gains.as_deref())?;
            let run = exp.run_empc(&inner, &ecfg, &tr)?;
            write_json(&dir.join("empc_log.json"), &run.steps)?;
            if run.fallbacks() > 0 {
                eprintln!("warning: {} days fell back to the previous plan", run.fallbacks());
            }
            finish_run(&exp, &dir, &run.trajectory)
        }
        Command::Pareto {
            alpha,
            horizon,
            strategy,
            period,
            manifest,
        } => {
            if let Some(path) = manifest {
                return rerun(&path);
            }
            let mut spec = SweepSpec::from_config(&cfg.sweep);
            if !alpha.is_empty() {
                spec.alphas = alpha.clone();
                spec.empc_alphas = alpha;
            }
            if !horizon.is_empty() {
                spec.horizons = horizon;
            }
            if !strategy.is_empty() {
                spec.strategies = strategy.into_iter().map(Strategy::from).collect();
            }
            if let Some(p) = period {
                spec.period = p.into();
            }
            spec.validate()?;
            let (outcome, m) = execute_with_manifest(&cfg, ManifestCommand::Pareto { spec })?;
            write_outputs(&dir, &outcome, &m)?;
            for e in outcome.entries() {
                match (e.report, e.error) {
                    (Some(r), _) => println!("{:24} J_H = {:.4}  J_F = {:.4}", e.label, r.j_h, r.j_f),
                    (None, err) => println!("{:24} failed: {}", e.label, err.unwrap_or_default()),
                }
            }
            Ok(())
        }
        Command::Compare {
            alpha,
            horizon,
            strategy,
            manifest,
        } => {
            if let Some(path) = manifest {
                return rerun(&path);
            }
            let strategies = if strategy.is_empty() {
                cfg.sweep.strategies.clone()
            } else {
                strategy.into_iter().map(Strategy::from).collect()
            };
            let settings = CompareSettings {
                alpha: alpha.unwrap_or(cfg.empc.alpha),
                horizon: horizon.unwrap_or(cfg.empc.horizon),
            };
            if !(0.0..=1.0).contains(&settings.alpha) {
                return Err(Failure::Validation(format!("--alpha {} outside [0, 1]", settings.alpha)));
            }
            if settings.horizon == 0 {
                return Err(Failure::Validation("--horizon must be >= 1".into()));
            }
            let (outcome, m) = execute_with_manifest(&cfg, ManifestCommand::Compare { strategies, settings })?;
            write_outputs(&dir, &outcome, &m)?;
            for e in outcome.entries() {
                if let Some(r) = e.report {
                    println!("{:16} J_H = {:.4}  J_F = {:.4}", e.label, r.j_h, r.j_f);
                }
            }
            Ok(())
        }
    }
}

fn write_solution(dir: &Path, sol: &DpSolution) -> CliResult<()> {
    write_json(&dir.join("policy.json"), &sol.policy)?;
    write_json(&dir.join("bellman.json"), &sol.table)
}

/// Reads the `s_ref` column of a CSV.
fn read_reference(path: &Path) -> CliResult<Vec<f64>> {
    let mut rdr = csv::Reader::from_reader(read_input(path)?);
    let bad = |line: usize, msg: String| Failure::Validation(format!("{}:{line}: {msg}", path.display()));
    let headers = rdr.headers().map_err(|e| bad(1, e.to_string()))?.clone();
    let col = headers
        .iter()
        .position(|h| h.trim() == "s_ref")
        .ok_or_else(|| bad(1, "missing `s_ref` column".into()))?;
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| bad(i + 2, e.to_string()))?;
        let field = rec.get(col).unwrap_or("").trim();
        let v: f64 = field.parse().map_err(|_| bad(i + 2, format!("`{field}` is not a number")))?;
        out.push(v);
    }
    Ok(out)
}

fn rerun(path: &Path) -> CliResult<()> {
    let manifest = load_manifest(path).map_err(|e| match e {
        Error::Io(io) => Failure::Validation(format!("cannot read manifest {}: {io}", path.display())),
        other => other.into(),
    })?;
    let mismatches = verify_manifest(&manifest)?;
    if mismatches.is_empty() {
        println!("all {} entries reproduced bit for bit", manifest.entries.len());
        Ok(())
    } else {
        for m in &mismatches {
            eprintln!("mismatch {}: recorded {:?}, rerun {:?}", m.label, m.recorded, m.rerun);
        }
        Err(Failure::Runtime(format!("{} entries differ from the manifest", mismatches.len())))
    }
}
