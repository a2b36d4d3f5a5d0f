//! Experiment orchestration: weight and horizon sweeps, Pareto fronts,
//! train/validation comparisons and reproducible run manifests.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{AppConfig, Period, Strategy, SweepConfig};
use crate::dp::{self, Disturbances, DpModel, DpSolution, GridSpec, Policy};
use crate::empc::{run_receding_horizon, EmpcConfig, EmpcRun, RecedingOptions};
use crate::error::{Error, Result};
use crate::hydrology::{build_ensemble, generate_trace, DisturbanceEnsemble, HydrologyTrace};
use crate::innerloop::{linearized_inner_loop, Scaling, SimulationOptions, StateSpaceModel};
use crate::objectives::{evaluate, pareto_filter, LabeledPoint, ObjectivesReport, StageCost};
use crate::reservoir::Trajectory;
use crate::vrft::{fit_pid, mean_annual_cycle, PIDParams, PidFit};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// A validated configuration with its training and validation traces.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub config: AppConfig,
    pub grid: GridSpec,
    pub train: HydrologyTrace,
    pub validation: HydrologyTrace,
}

/// Inner-loop gains and their linearization, fixed after training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InnerLoopFit {
    pub pid: PIDParams,
    /// Present when the gains were fitted rather than configured.
    pub fit: Option<PidFit>,
    pub scaling: Scaling,
    pub model: StateSpaceModel,
}

impl Experiment {
    pub fn new(config: AppConfig) -> Result<Self> {
        config.validate()?;
        let grid = config.dp.grid(&config.reservoir)?;
        let train = generate_trace(&config.hydrology, config.sweep.train_days)?;
        let validation = generate_trace(&validation_model(&config), config.sweep.validation_days)?;
        Ok(Experiment {
            config,
            grid,
            train,
            validation,
        })
    }

    pub fn trace(&self, period: Period) -> &HydrologyTrace {
        match period {
            Period::Train => &self.train,
            Period::Validation => &self.validation,
        }
    }

    pub fn stage_cost(&self, alpha: f64) -> Result<StageCost> {
        self.config.objectives.stage_cost(alpha)
    }

    pub fn dp_model(&self, alpha: f64) -> Result<DpModel<'_>> {
        Ok(DpModel {
            spec: &self.config.reservoir,
            routing: &self.config.routing,
            grid: &self.grid,
            cost: self.stage_cost(alpha)?,
        })
    }

    pub fn ensemble(&self) -> Result<DisturbanceEnsemble> {
        build_ensemble(&self.config.hydrology, self.config.dp.scenarios_per_day)
    }

    pub fn score(&self, traj: &Trajectory) -> Result<ObjectivesReport> {
        evaluate(traj, self.config.objectives.h_bar)
    }

    /// Perfect-foresight DDP over the whole trace, simulated on that trace.
    pub fn run_ddp(&self, alpha: f64, trace: &HydrologyTrace) -> Result<(DpSolution, Trajectory)> {
        let model = self.dp_model(alpha)?;
        let sol = dp::solve_ddp(&model, trace, None)?;
        let traj = dp::simulate_policy(&sol.policy, &self.config.reservoir, &self.config.routing, trace)?;
        Ok((sol, traj))
    }

    pub fn solve_sdp(&self, alpha: f64, ensemble: &DisturbanceEnsemble) -> Result<DpSolution> {
        dp::solve_sdp(&self.dp_model(alpha)?, ensemble, &self.config.dp.sdp_options())
    }

    pub fn run_policy(&self, policy: &Policy, trace: &HydrologyTrace) -> Result<Trajectory> {
        dp::simulate_policy(policy, &self.config.reservoir, &self.config.routing, trace)
    }

    /// Configured gains, or gains fitted by VRFT on the mean annual cycle of
    /// the training DDP trajectory.
    pub fn fit_inner_loop(&self) -> Result<InnerLoopFit> {
        let il = &self.config.inner_loop;
        let scaling = il.scaling(&self.config.reservoir, &self.train);
        let (pid, fit) = match il.pid {
            Some(pid) => (pid, None),
            None => {
                let (_, traj) = self.run_ddp(self.config.sweep.vrft_alpha, &self.train)?;
                let cycle = mean_annual_cycle(&traj)?;
                let fit = fit_pid(&cycle.u, &cycle.s, &il.reference_model, il.prefilter.as_ref())?;
                (fit.params, Some(fit))
            }
        };
        let model = linearized_inner_loop(&pid, &scaling)?;
        Ok(InnerLoopFit {
            pid,
            fit,
            scaling,
            model,
        })
    }

    pub fn empc_config(&self, alpha: f64, horizon: usize) -> EmpcConfig {
        EmpcConfig {
            alpha,
            horizon,
            ..self.config.empc.clone()
        }
    }

    pub fn run_empc(&self, inner: &InnerLoopFit, cfg: &EmpcConfig, trace: &HydrologyTrace) -> Result<EmpcRun> {
        let opts = RecedingOptions {
            anti_windup: self.config.inner_loop.anti_windup,
            ..RecedingOptions::default()
        };
        run_receding_horizon(
            &self.config.reservoir,
            &self.config.routing,
            &inner.pid,
            &inner.model,
            trace,
            cfg,
            self.stage_cost(cfg.alpha)?,
            self.config.reservoir.initial_storage,
            &opts,
        )
    }

    pub fn inner_loop_options(&self) -> SimulationOptions {
        SimulationOptions {
            anti_windup: self.config.inner_loop.anti_windup,
            ..SimulationOptions::default()
        }
    }
}

/// Hydrology of the validation period: a wetter climate and a disjoint seed.
pub fn validation_model(config: &AppConfig) -> crate::hydrology::InflowModel {
    let sw = &config.sweep;
    config
        .hydrology
        .wetter(sw.validation_wet_shift)
        .with_seed(config.hydrology.seed.wrapping_add(sw.validation_seed_offset))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub strategies: Vec<Strategy>,
    pub alphas: Vec<f64>,
    pub empc_alphas: Vec<f64>,
    pub horizons: Vec<usize>,
    pub period: Period,
}

impl SweepSpec {
    pub fn from_config(cfg: &SweepConfig) -> Self {
        SweepSpec {
            strategies: cfg.strategies.clone(),
            alphas: cfg.alphas.clone(),
            empc_alphas: cfg.empc_alphas.clone(),
            horizons: cfg.horizons.clone(),
            period: cfg.period,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.strategies.is_empty() {
            return Err(Error::InvalidArgument("sweep has no strategies".into()));
        }
        let uses_dp = self.strategies.iter().any(|s| *s != Strategy::Empc);
        if uses_dp && self.alphas.is_empty() {
            return Err(Error::InvalidArgument("sweep has no weights".into()));
        }
        if let Some(a) = self.alphas.iter().chain(&self.empc_alphas).find(|a| !(0.0..=1.0).contains(*a)) {
            return Err(Error::InvalidArgument(format!("weight {a} outside [0, 1]")));
        }
        if self.strategies.contains(&Strategy::Empc) {
            if self.horizons.is_empty() || self.empc_alphas.is_empty() {
                return Err(Error::InvalidArgument("eMPC sweep needs weights and horizons".into()));
            }
            if self.horizons.contains(&0) {
                return Err(Error::InvalidArgument("horizons must be >= 1".into()));
            }
        }
        Ok(())
    }

    pub fn cells(&self) -> Vec<Cell> {
        let mut cells = Vec::new();
        for &strategy in &self.strategies {
            match strategy {
                Strategy::Ddp | Strategy::Sdp => {
                    cells.extend(self.alphas.iter().map(|&alpha| Cell { strategy, alpha, horizon: None }))
                }
                Strategy::Empc => {
                    for &alpha in &self.empc_alphas {
                        cells.extend(self.horizons.iter().map(|&h| Cell { strategy, alpha, horizon: Some(h) }));
                    }
                }
            }
        }
        cells
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub strategy: Strategy,
    pub alpha: f64,
    pub horizon: Option<usize>,
}

impl Cell {
    pub fn label(&self) -> String {
        match self.horizon {
            Some(n) => format!("{} alpha={} N={}", self.strategy.name(), self.alpha, n),
            None => format!("{} alpha={}", self.strategy.name(), self.alpha),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub label: String,
    pub cell: Cell,
    pub report: Option<ObjectivesReport>,
    pub error: Option<String>,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub period: Period,
    pub cells: Vec<CellResult>,
    pub pareto: Vec<LabeledPoint>,
    /// Inner-loop gains used by the eMPC cells.
    pub pid: Option<PIDParams>,
}

impl SweepResult {
    pub fn points(&self) -> Vec<LabeledPoint> {
        self.cells
            .iter()
            .filter_map(|c| {
                c.report.map(|r| LabeledPoint {
                    label: c.label.clone(),
                    j_h: r.j_h,
                    j_f: r.j_f,
                })
            })
            .collect()
    }

    pub fn report(&self, strategy: Strategy, alpha: f64, horizon: Option<usize>) -> Option<ObjectivesReport> {
        self.cells
            .iter()
            .find(|c| c.cell.strategy == strategy && c.cell.alpha == alpha && c.cell.horizon == horizon)
            .and_then(|c| c.report)
    }
}

/// Runs a closure on a pool of `jobs` threads (0 or 1 means one thread).
pub fn with_jobs<T: Send>(jobs: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

/// Runs every cell; a failing cell is recorded without stopping the others.
pub fn sweep(exp: &Experiment, spec: &SweepSpec) -> Result<SweepResult> {
    spec.validate()?;
    let trace = exp.trace(spec.period);
    let cells = spec.cells();
    let needs_sdp = spec.strategies.contains(&Strategy::Sdp);
    let ensemble = if needs_sdp { Some(exp.ensemble()) } else { None };
    let inner = if spec.strategies.contains(&Strategy::Empc) {
        Some(exp.fit_inner_loop())
    } else {
        None
    };

    let results: Vec<CellResult> = cells
        .par_iter()
        .map(|cell| {
            let started = Instant::now();
            let outcome = run_cell(exp, cell, trace, ensemble.as_ref(), inner.as_ref());
            let (report, error) = match outcome {
                Ok(r) => (Some(r), None),
                Err(e) => (None, Some(e.to_string())),
            };
            CellResult {
                label: cell.label(),
                cell: *cell,
                report,
                error,
                seconds: started.elapsed().as_secs_f64(),
            }
        })
        .collect();

    let mut out = SweepResult {
        period: spec.period,
        cells: results,
        pareto: Vec::new(),
        pid: inner.and_then(|r| r.ok()).map(|f| f.pid),
    };
    out.pareto = pareto_filter(&out.points());
    Ok(out)
}

fn run_cell(
    exp: &Experiment,
    cell: &Cell,
    trace: &HydrologyTrace,
    ensemble: Option<&Result<DisturbanceEnsemble>>,
    inner: Option<&Result<InnerLoopFit>>,
) -> Result<ObjectivesReport> {
    let traj = match cell.strategy {
        Strategy::Ddp => exp.run_ddp(cell.alpha, trace)?.1,
        Strategy::Sdp => {
            let ensemble = shared(ensemble, "disturbance ensemble")?;
            let sol = exp.solve_sdp(cell.alpha, ensemble)?;
            exp.run_policy(&sol.policy, trace)?
        }
        Strategy::Empc => {
            let inner = shared(inner, "inner-loop gains")?;
            let horizon = cell.horizon.ok_or_else(|| Error::InvalidArgument("eMPC cell without horizon".into()))?;
            exp.run_empc(inner, &exp.empc_config(cell.alpha, horizon), trace)?.trajectory
        }
    };
    exp.score(&traj)
}

fn shared<'a, T>(slot: Option<&'a Result<T>>, name: &str) -> Result<&'a T> {
    match slot {
        Some(Ok(v)) => Ok(v),
        Some(Err(e)) => Err(Error::MissingArtifact(format!("{name}: {e}"))),
        None => Err(Error::MissingArtifact(name.into())),
    }
}

/// Policies and gains frozen after the training period.
#[derive(Debug, Clone, Default)]
pub struct TrainedArtifacts {
    pub sdp_policy: Option<Policy>,
    pub inner_loop: Option<InnerLoopFit>,
}

/// Trains what each strategy needs: the SDP policy at `alpha` and the
/// inner-loop gains.
pub fn train_artifacts(exp: &Experiment, strategies: &[Strategy], alpha: f64) -> Result<TrainedArtifacts> {
    let mut art = TrainedArtifacts::default();
    if strategies.contains(&Strategy::Sdp) {
        let ensemble = exp.ensemble()?;
        art.sdp_policy = Some(exp.solve_sdp(alpha, &ensemble)?.policy);
    }
    if strategies.contains(&Strategy::Empc) {
        art.inner_loop = Some(exp.fit_inner_loop()?);
    }
    Ok(art)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CompareSettings {
    pub alpha: f64,
    pub horizon: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub strategy: Strategy,
    pub period: Period,
    pub report: ObjectivesReport,
}

/// `(strategy x period) -> (J_H, J_F)`. DDP is re-solved on each period with
/// perfect foresight; SDP and the inner loop use frozen training artifacts;
/// eMPC runs online on each period.
pub fn compare_train_validation(
    exp: &Experiment,
    strategies: &[Strategy],
    artifacts: &TrainedArtifacts,
    settings: CompareSettings,
    train: &HydrologyTrace,
    validation: &HydrologyTrace,
) -> Result<Vec<ComparisonRow>> {
    let mut rows = Vec::new();
    for &strategy in strategies {
        for (period, trace) in [(Period::Train, train), (Period::Validation, validation)] {
            let traj = match strategy {
                Strategy::Ddp => exp.run_ddp(settings.alpha, trace)?.1,
                Strategy::Sdp => {
                    let policy = artifacts
                        .sdp_policy
                        .as_ref()
                        .ok_or_else(|| Error::MissingArtifact("SDP policy".into()))?;
                    exp.run_policy(policy, trace)?
                }
                Strategy::Empc => {
                    let inner = artifacts
                        .inner_loop
                        .as_ref()
                        .ok_or_else(|| Error::MissingArtifact("inner-loop gains".into()))?;
                    exp.run_empc(inner, &exp.empc_config(settings.alpha, settings.horizon), trace)?
                        .trajectory
                }
            };
            rows.push(ComparisonRow {
                strategy,
                period,
                report: exp.score(&traj)?,
            });
        }
    }
    Ok(rows)
}

/// What a manifest re-executes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ManifestCommand {
    Pareto { spec: SweepSpec },
    Compare { strategies: Vec<Strategy>, settings: CompareSettings },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seeds {
    pub hydrology: u64,
    pub validation: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub label: String,
    pub report: Option<ObjectivesReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub total_seconds: f64,
    pub entries: Vec<(String, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: String,
    pub config_hash: String,
    pub seeds: Seeds,
    pub command: ManifestCommand,
    pub config: AppConfig,
    /// Full-precision results, in run order.
    pub entries: Vec<ManifestEntry>,
    pub timing: Timing,
}

/// Hex SHA-256 of the canonical JSON form of a configuration.
pub fn config_hash(config: &AppConfig) -> Result<String> {
    let bytes = serde_json::to_vec(config)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Results of a manifest command, with per-entry timings.
#[derive(Debug, Clone)]
pub enum Outcome {
    Pareto(SweepResult),
    Compare(Vec<ComparisonRow>),
}

impl Outcome {
    pub fn entries(&self) -> Vec<ManifestEntry> {
        match self {
            Outcome::Pareto(res) => res
                .cells
                .iter()
                .map(|c| ManifestEntry {
                    label: c.label.clone(),
                    report: c.report,
                    error: c.error.clone(),
                })
                .collect(),
            Outcome::Compare(rows) => rows
                .iter()
                .map(|r| ManifestEntry {
                    label: comparison_label(r),
                    report: Some(r.report),
                    error: None,
                })
                .collect(),
        }
    }

    fn timings(&self) -> Vec<(String, f64)> {
        match self {
            Outcome::Pareto(res) => res.cells.iter().map(|c| (c.label.clone(), c.seconds)).collect(),
            Outcome::Compare(_) => Vec::new(),
        }
    }
}

fn comparison_label(row: &ComparisonRow) -> String {
    format!("{} {}", row.strategy.name(), row.period.name())
}

/// Executes a command against a configuration.
pub fn execute(config: &AppConfig, command: &ManifestCommand) -> Result<Outcome> {
    let exp = Experiment::new(config.clone())?;
    match command {
        ManifestCommand::Pareto { spec } => Ok(Outcome::Pareto(sweep(&exp, spec)?)),
        ManifestCommand::Compare { strategies, settings } => {
            let art = train_artifacts(&exp, strategies, settings.alpha)?;
            let rows = compare_train_validation(&exp, strategies, &art, *settings, &exp.train, &exp.validation)?;
            Ok(Outcome::Compare(rows))
        }
    }
}

/// Executes a command and records everything needed to reproduce it.
pub fn execute_with_manifest(config: &AppConfig, command: ManifestCommand) -> Result<(Outcome, RunManifest)> {
    let started = Instant::now();
    let outcome = execute(config, &command)?;
    let manifest = RunManifest {
        version: VERSION.to_string(),
        config_hash: config_hash(config)?,
        seeds: Seeds {
            hydrology: config.hydrology.seed,
            validation: validation_model(config).seed,
        },
        command,
        config: config.clone(),
        entries: outcome.entries(),
        timing: Timing {
            total_seconds: started.elapsed().as_secs_f64(),
            entries: outcome.timings(),
        },
    };
    Ok((outcome, manifest))
}

/// An entry whose rerun differs from the recorded value.
#[derive(Debug, Clone, PartialEq)]
pub struct Mismatch {
    pub label: String,
    pub recorded: Option<ObjectivesReport>,
    pub rerun: Option<ObjectivesReport>,
}

fn same_bits(a: &Option<ObjectivesReport>, b: &Option<ObjectivesReport>) -> bool {
    match (a, b) {
        (Some(a), Some(b)) => {
            a.j_h.to_bits() == b.j_h.to_bits() && a.j_f.to_bits() == b.j_f.to_bits() && a.horizon == b.horizon
        }
        (None, None) => true,
        _ => false,
    }
}

/// Re-executes a manifest and lists every entry that is not bit-identical.
pub fn verify_manifest(manifest: &RunManifest) -> Result<Vec<Mismatch>> {
    let hash = config_hash(&manifest.config)?;
    if hash != manifest.config_hash {
        return Err(Error::InvalidArgument(format!(
            "config hash mismatch: recorded {}, computed {hash}",
            manifest.config_hash
        )));
    }
    let rerun = execute(&manifest.config, &manifest.command)?.entries();
    if rerun.len() != manifest.entries.len() {
        return Err(Error::InvalidArgument(format!(
            "manifest lists {} entries, rerun produced {}",
            manifest.entries.len(),
            rerun.len()
        )));
    }
    Ok(manifest
        .entries
        .iter()
        .zip(rerun)
        .filter(|(a, b)| a.label != b.label || !same_bits(&a.report, &b.report))
        .map(|(a, b)| Mismatch {
            label: a.label.clone(),
            recorded: a.report,
            rerun: b.report,
        })
        .collect())
}

pub fn load_manifest(path: &Path) -> Result<RunManifest> {
    let file = std::fs::File::open(path)?;
    let mut de = serde_json::Deserializer::from_reader(std::io::BufReader::new(file));
    serde_path_to_error::deserialize(&mut de).map_err(|e| Error::config(e.path().to_string(), e.into_inner().to_string()))
}

/// Writes through a temporary file in the target directory, then renames.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    #[cfg(unix)]
    {
        use std::os::unix::fs::PermissionsExt;
        tmp.as_file().set_permissions(std::fs::Permissions::from_mode(0o644))?;
    }
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

fn csv_bytes(header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for row in rows {
        w.write_record(&row)?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

fn fmt4(x: f64) -> String {
    format!("{x:.4}")
}

fn opt_horizon(h: Option<usize>) -> String {
    h.map(|n| n.to_string()).unwrap_or_default()
}

/// `pareto.csv`: the non-dominated points.
pub fn pareto_csv(res: &SweepResult) -> Result<Vec<u8>> {
    let rows = res.pareto.iter().map(|p| {
        let cell = res.cells.iter().find(|c| c.label == p.label).map(|c| c.cell);
        vec![
            p.label.clone(),
            cell.map(|c| c.strategy.name().to_string()).unwrap_or_default(),
            cell.map(|c| c.alpha.to_string()).unwrap_or_default(),
            opt_horizon(cell.and_then(|c| c.horizon)),
            fmt4(p.j_h),
            fmt4(p.j_f),
        ]
    });
    csv_bytes(&["label", "strategy", "alpha", "horizon", "J_H", "J_F"], rows)
}

/// `sweep.csv`: every cell, with its status.
pub fn sweep_csv(res: &SweepResult) -> Result<Vec<u8>> {
    let rows = res.cells.iter().map(|c| {
        let (h, f) = c.report.map(|r| (fmt4(r.j_h), fmt4(r.j_f))).unwrap_or_default();
        vec![
            c.label.clone(),
            c.cell.strategy.name().to_string(),
            c.cell.alpha.to_string(),
            opt_horizon(c.cell.horizon),
            h,
            f,
            res.pareto.iter().any(|p| p.label == c.label).to_string(),
            c.error.clone().unwrap_or_default(),
        ]
    });
    csv_bytes(&["label", "strategy", "alpha", "horizon", "J_H", "J_F", "pareto", "error"], rows)
}

const LONG_HEADER: [&str; 7] = ["label", "strategy", "alpha", "horizon", "period", "metric", "value"];

/// Plot-ready long format: one row per (point, metric).
pub fn sweep_long_csv(res: &SweepResult) -> Result<Vec<u8>> {
    let rows = res.cells.iter().flat_map(|c| {
        c.report.into_iter().flat_map(move |r| {
            [("J_H", r.j_h), ("J_F", r.j_f)].map(|(m, v)| {
                vec![
                    c.label.clone(),
                    c.cell.strategy.name().to_string(),
                    c.cell.alpha.to_string(),
                    opt_horizon(c.cell.horizon),
                    res.period.name().to_string(),
                    m.to_string(),
                    fmt4(v),
                ]
            })
        })
    });
    csv_bytes(&LONG_HEADER, rows)
}

/// `comparison.csv`: one row per (strategy, period).
pub fn comparison_csv(rows: &[ComparisonRow]) -> Result<Vec<u8>> {
    let body = rows.iter().map(|r| {
        vec![
            r.strategy.name().to_string(),
            r.period.name().to_string(),
            fmt4(r.report.j_h),
            fmt4(r.report.j_f),
        ]
    });
    csv_bytes(&["strategy", "period", "J_H", "J_F"], body)
}

pub fn comparison_long_csv(rows: &[ComparisonRow], settings: CompareSettings) -> Result<Vec<u8>> {
    let body = rows.iter().flat_map(|r| {
        [("J_H", r.report.j_h), ("J_F", r.report.j_f)].map(|(m, v)| {
            let horizon = if r.strategy == Strategy::Empc {
                settings.horizon.to_string()
            } else {
                String::new()
            };
            vec![
                comparison_label(r),
                r.strategy.name().to_string(),
                settings.alpha.to_string(),
                horizon,
                r.period.name().to_string(),
                m.to_string(),
                fmt4(v),
            ]
        })
    });
    csv_bytes(&LONG_HEADER, body)
}

/// Writes the tables and the manifest of an outcome into `dir`.
pub fn write_outputs(dir: &Path, outcome: &Outcome, manifest: &RunManifest) -> Result<()> {
    match outcome {
        Outcome::Pareto(res) => {
            write_atomic(&dir.join("pareto.csv"), &pareto_csv(res)?)?;
            write_atomic(&dir.join("sweep.csv"), &sweep_csv(res)?)?;
            write_atomic(&dir.join("sweep_long.csv"), &sweep_long_csv(res)?)?;
        }
        Outcome::Compare(rows) => {
            let settings = match &manifest.command {
                ManifestCommand::Compare { settings, .. } => *settings,
                ManifestCommand::Pareto { .. } => {
                    return Err(Error::InvalidArgument("comparison outcome with a sweep manifest".into()))
                }
            };
            write_atomic(&dir.join("comparison.csv"), &comparison_csv(rows)?)?;
            write_atomic(&dir.join("comparison_long.csv"), &comparison_long_csv(rows, settings)?)?;
        }
    }
    write_atomic(&dir.join("manifest.json"), &serde_json::to_vec_pretty(manifest)?)
}

/// DDP solved against the realized trace and SDP against the ensemble, as
/// used when checking that a degenerate ensemble makes them agree.
pub fn extract_on_trace(exp: &Experiment, alpha: f64, table: &crate::dp::BellmanTable, trace: &HydrologyTrace) -> Result<Policy> {
    dp::extract_policy(&exp.dp_model(alpha)?, table, Disturbances::Trace(trace))
}
