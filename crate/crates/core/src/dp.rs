//! Deterministic and stochastic dynamic programming over a (day, storage) grid.
//!
//! Stage costs use the memoryless downstream level of the same day's flows,
//! since the controller state is storage alone.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hydrology::{Disturbance, DisturbanceEnsemble, HydrologyTrace, DAYS_PER_YEAR};
use crate::objectives::StageCost;
use crate::plant::Plant;
use crate::reservoir::{ReservoirSpec, Trajectory};
use crate::routing::DownstreamModel;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    /// Storage nodes, m3, strictly increasing.
    pub storage: Vec<f64>,
    /// Control nodes, m3/s, strictly increasing and >= 0.
    pub controls: Vec<f64>,
    #[serde(default = "default_period")]
    pub period: usize,
}

fn default_period() -> usize {
    DAYS_PER_YEAR
}

impl GridSpec {
    pub fn new(storage: Vec<f64>, controls: Vec<f64>) -> Result<Self> {
        let g = GridSpec {
            storage,
            controls,
            period: DAYS_PER_YEAR,
        };
        g.validate()?;
        Ok(g)
    }

    /// `n` evenly spaced storage nodes on `[s_min, s_max]`.
    pub fn uniform(s_min: f64, s_max: f64, n: usize, controls: Vec<f64>) -> Result<Self> {
        if n < 2 {
            return Err(Error::config("dp.grid.storage_nodes", "need at least 2 storage nodes"));
        }
        let step = (s_max - s_min) / (n - 1) as f64;
        let mut storage: Vec<f64> = (0..n).map(|i| s_min + step * i as f64).collect();
        storage[n - 1] = s_max;
        Self::new(storage, controls)
    }

    pub fn validate(&self) -> Result<()> {
        let increasing = |v: &[f64]| v.windows(2).all(|w| w[0] < w[1]) && v.iter().all(|x| x.is_finite());
        if self.storage.len() < 2 || !increasing(&self.storage) {
            return Err(Error::config(
                "dp.grid.storage",
                "need at least 2 strictly increasing storage nodes",
            ));
        }
        if self.controls.len() < 2 || !increasing(&self.controls) || self.controls[0] < 0.0 {
            return Err(Error::config(
                "dp.grid.controls",
                "need at least 2 strictly increasing, nonnegative control nodes",
            ));
        }
        if self.period == 0 {
            return Err(Error::config("dp.grid.period", "must be >= 1"));
        }
        Ok(())
    }

    /// Index of the nearest storage node; equidistant queries pick the lower.
    pub fn nearest_storage_node(&self, s: f64) -> usize {
        let nodes = &self.storage;
        let n = nodes.len();
        if s <= nodes[0] {
            return 0;
        }
        if s >= nodes[n - 1] {
            return n - 1;
        }
        let i = nodes.partition_point(|&x| x <= s) - 1;
        if s - nodes[i] <= nodes[i + 1] - s {
            i
        } else {
            i + 1
        }
    }

    /// Piecewise-linear interpolation of node values; queries outside the
    /// grid take the boundary value. Returns whether the query was clamped.
    pub fn interpolate(&self, values: &[f64], s: f64) -> (f64, bool) {
        let nodes = &self.storage;
        let n = nodes.len();
        if s <= nodes[0] {
            return (values[0], s < nodes[0]);
        }
        if s >= nodes[n - 1] {
            return (values[n - 1], s > nodes[n - 1]);
        }
        let i = nodes.partition_point(|&x| x <= s) - 1;
        if nodes[i] == s {
            return (values[i], false);
        }
        let w = (s - nodes[i]) / (nodes[i + 1] - nodes[i]);
        (values[i] + w * (values[i + 1] - values[i]), false)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Horizon {
    /// Row `t` is stage `t` of a finite horizon starting at `start_day`.
    Finite,
    /// Row `d` is day-of-year `d`; row `period` wraps to row 0.
    Periodic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BellmanTable {
    pub horizon: Horizon,
    pub alpha: f64,
    pub grid: GridSpec,
    /// Day of year of row 0 (finite horizons only).
    pub start_day: usize,
    /// `values[row][node]`, cost-to-go.
    pub values: Vec<Vec<f64>>,
    /// Max-norm change over the last full sweep (0 for finite horizons).
    pub residual: f64,
    pub sweeps: usize,
    /// Average cost per stage at the periodic steady state.
    pub gain: f64,
    /// Bellman evaluations whose next storage fell outside the grid.
    pub next_state_clamps: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Policy {
    pub horizon: Horizon,
    pub grid: GridSpec,
    pub start_day: usize,
    /// `mu[row][node]`: control value (m3/s), always a control node.
    pub mu: Vec<Vec<f64>>,
}

impl Policy {
    /// Row used at step `t` of a simulation whose first day is `start_day`.
    pub fn row(&self, t: usize, start_day: usize) -> Result<usize> {
        match self.horizon {
            Horizon::Periodic => Ok((start_day + t) % self.mu.len()),
            Horizon::Finite => {
                if t < self.mu.len() {
                    Ok(t)
                } else {
                    Err(Error::InvalidArgument(format!(
                        "finite-horizon policy has {} stages, step {t} requested",
                        self.mu.len()
                    )))
                }
            }
        }
    }

    /// Control of the nearest storage node.
    pub fn evaluate(&self, row: usize, s: f64) -> f64 {
        self.mu[row][self.grid.nearest_storage_node(s)]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DpSolution {
    pub table: BellmanTable,
    pub policy: Policy,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SdpOptions {
    /// Convergence tolerance relative to max |H| after the first sweep.
    pub tol_relative: f64,
    /// Absolute tolerance; overrides `tol_relative` when set.
    #[serde(default)]
    pub tol: Option<f64>,
    pub max_sweeps: usize,
}

impl Default for SdpOptions {
    fn default() -> Self {
        SdpOptions {
            tol_relative: 1e-6,
            tol: None,
            max_sweeps: 200,
        }
    }
}

/// Disturbances driving the recursion.
#[derive(Debug, Clone, Copy)]
pub enum Disturbances<'a> {
    Trace(&'a HydrologyTrace),
    Ensemble(&'a DisturbanceEnsemble),
}

/// Everything the Bellman operator needs besides the disturbances.
#[derive(Debug, Clone, Copy)]
pub struct DpModel<'a> {
    pub spec: &'a ReservoirSpec,
    pub routing: &'a dyn DownstreamModel,
    pub grid: &'a GridSpec,
    pub cost: StageCost,
}

/// Cost ingredients at a release clamped to one of the node's bounds.
#[derive(Debug, Clone, Copy)]
struct BoundTerms {
    lo: f64,
    hi: f64,
    tail_lo: f64,
    tail_hi: f64,
    flood_lo: f64,
    flood_hi: f64,
}

/// Per-stage precomputation for `k` scenarios.
struct StageData {
    scenarios: Vec<Disturbance>,
    weights: Vec<f64>,
    /// Indexed `j * n_storage + i`.
    bounds: Vec<BoundTerms>,
    /// Flood term of an unclamped release, indexed `j * n_controls + c`.
    flood_u: Vec<f64>,
}

struct StageResult {
    values: Vec<f64>,
    argmin: Vec<usize>,
    clamps: u64,
}

impl<'a> DpModel<'a> {
    fn stage_data(&self, scenarios: &[Disturbance], weights: &[f64]) -> StageData {
        let grid = self.grid;
        let level = |r: f64, d: &Disturbance| self.routing.instantaneous_level(r, d.q_t, d.q_l);
        let mut bounds = Vec::with_capacity(scenarios.len() * grid.storage.len());
        let mut flood_u = Vec::with_capacity(scenarios.len() * grid.controls.len());
        for d in scenarios {
            for &s in &grid.storage {
                let (lo, hi) = self.spec.release_bounds(s, d.q_d);
                bounds.push(BoundTerms {
                    lo,
                    hi,
                    tail_lo: self.spec.tailwater_of_release.eval(lo),
                    tail_hi: self.spec.tailwater_of_release.eval(hi),
                    flood_lo: self.cost.flood_term(level(lo, d)),
                    flood_hi: self.cost.flood_term(level(hi, d)),
                });
            }
            for &u in &grid.controls {
                flood_u.push(self.cost.flood_term(level(u, d)));
            }
        }
        StageData {
            scenarios: scenarios.to_vec(),
            weights: weights.to_vec(),
            bounds,
            flood_u,
        }
    }

    /// Stage cost and next storage for storage node `i`, control `c` and
    /// scenario `j`, using the precomputed terms.
    #[inline]
    fn transition(&self, data: &StageData, tail_u: &[f64], levels: &[f64], i: usize, c: usize, j: usize) -> (f64, f64) {
        let n = self.grid.storage.len();
        let m = self.grid.controls.len();
        let b = &data.bounds[j * n + i];
        let u = self.grid.controls[c];
        let (r, tail, flood) = if u < b.lo {
            (b.lo, b.tail_lo, b.flood_lo)
        } else if u > b.hi {
            (b.hi, b.tail_hi, b.flood_hi)
        } else {
            (u, tail_u[c], data.flood_u[j * m + c])
        };
        let s = self.grid.storage[i];
        let head = (levels[i] - tail).max(0.0);
        let energy = self.spec.energy_production(head, r);
        let g = -self.cost.alpha * self.cost.hydropower_scale * energy + (1.0 - self.cost.alpha) * flood;
        (g, self.spec.mass_balance(s, data.scenarios[j].q_d, r))
    }

    /// One Bellman backup of `next` through the stage described by `data`.
    fn backup(&self, data: &StageData, next: &[f64]) -> StageResult {
        let grid = self.grid;
        let tail_u: Vec<f64> = grid
            .controls
            .iter()
            .map(|&u| self.spec.tailwater_of_release.eval(u))
            .collect();
        let levels: Vec<f64> = grid
            .storage
            .iter()
            .map(|&s| self.spec.level_of_storage.eval(s))
            .collect();
        let per_node: Vec<(f64, usize, u64)> = (0..grid.storage.len())
            .into_par_iter()
            .map(|i| {
                let mut best = f64::INFINITY;
                let mut arg = 0;
                let mut clamps = 0;
                for c in 0..grid.controls.len() {
                    let mut acc = 0.0;
                    for (j, &w) in data.weights.iter().enumerate() {
                        let (g, s_next) = self.transition(data, &tail_u, &levels, i, c, j);
                        let (h, clamped) = grid.interpolate(next, s_next);
                        clamps += clamped as u64;
                        acc += w * (g + h);
                    }
                    if acc < best {
                        best = acc;
                        arg = c;
                    }
                }
                (best, arg, clamps)
            })
            .collect();
        StageResult {
            values: per_node.iter().map(|p| p.0).collect(),
            argmin: per_node.iter().map(|p| p.1).collect(),
            clamps: per_node.iter().map(|p| p.2).sum(),
        }
    }

    fn check(&self) -> Result<()> {
        self.grid.validate()?;
        self.spec.validate()?;
        if !(0.0..=1.0).contains(&self.cost.alpha) {
            return Err(Error::InvalidArgument(format!(
                "alpha = {} must lie in [0, 1]",
                self.cost.alpha
            )));
        }
        Ok(())
    }

    fn controls_of(&self, argmin: &[usize]) -> Vec<f64> {
        argmin.iter().map(|&c| self.grid.controls[c]).collect()
    }
}

/// Backward recursion over the first `horizon` days of `trace` (all of it by
/// default) with zero terminal cost.
pub fn solve_ddp(model: &DpModel, trace: &HydrologyTrace, horizon: Option<usize>) -> Result<DpSolution> {
    model.check()?;
    let horizon = horizon.unwrap_or(trace.len());
    if horizon == 0 || horizon > trace.len() {
        return Err(Error::InvalidArgument(format!(
            "horizon {horizon} must lie in 1..={} (trace length)",
            trace.len()
        )));
    }
    let n = model.grid.storage.len();
    let mut values = vec![Vec::new(); horizon];
    let mut mu = vec![Vec::new(); horizon];
    let mut next = vec![0.0; n];
    let mut clamps = 0;
    for t in (0..horizon).rev() {
        let data = model.stage_data(&[trace.at(t)], &[1.0]);
        let res = model.backup(&data, &next);
        clamps += res.clamps;
        mu[t] = model.controls_of(&res.argmin);
        next = res.values.clone();
        values[t] = res.values;
    }
    let grid = model.grid.clone();
    Ok(DpSolution {
        table: BellmanTable {
            horizon: Horizon::Finite,
            alpha: model.cost.alpha,
            grid: grid.clone(),
            start_day: trace.start_day,
            values,
            residual: 0.0,
            sweeps: 1,
            gain: 0.0,
            next_state_clamps: clamps,
        },
        policy: Policy {
            horizon: Horizon::Finite,
            grid,
            start_day: trace.start_day,
            mu,
        },
    })
}

/// Relative value iteration over the cyclic year.
///
/// The problem is undiscounted, so plain successive approximation grows by
/// the annual average cost every sweep. After each full sweep the table is
/// shifted so that day 0, node 0 reads zero; the shift over one year is the
/// annual cost and `gain` reports it per day. Convergence is declared when
/// the shifted table changes by less than the tolerance over a full sweep.
pub fn solve_sdp(model: &DpModel, ensemble: &DisturbanceEnsemble, opts: &SdpOptions) -> Result<DpSolution> {
    model.check()?;
    ensemble.validate()?;
    if model.grid.period != DAYS_PER_YEAR {
        return Err(Error::InvalidArgument(format!(
            "periodic solve needs a {DAYS_PER_YEAR}-day grid period"
        )));
    }
    if opts.max_sweeps == 0 {
        return Err(Error::config("dp.max_sweeps", "must be >= 1"));
    }
    if let Some(tol) = opts.tol {
        if !(tol > 0.0) {
            return Err(Error::config("dp.tol", "must be > 0"));
        }
    } else if !(opts.tol_relative > 0.0) {
        return Err(Error::config("dp.tol_relative", "must be > 0"));
    }
    let n = model.grid.storage.len();
    let days: Vec<StageData> = (0..DAYS_PER_YEAR)
        .map(|d| model.stage_data(&ensemble.scenarios[d], &ensemble.weights[d]))
        .collect();

    let mut table = vec![vec![0.0; n]; DAYS_PER_YEAR];
    let mut tol = opts.tol.unwrap_or(f64::NAN);
    let mut residual = f64::NAN;
    for sweep in 1..=opts.max_sweeps {
        let mut fresh = vec![Vec::new(); DAYS_PER_YEAR];
        let mut next = table[0].clone();
        let mut clamps = 0;
        for d in (0..DAYS_PER_YEAR).rev() {
            let res = model.backup(&days[d], &next);
            clamps += res.clamps;
            next = res.values.clone();
            fresh[d] = res.values;
        }
        if sweep == 1 && opts.tol.is_none() {
            let scale = fresh.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
            tol = opts.tol_relative * scale.max(f64::MIN_POSITIVE);
        }
        let shift = fresh[0][0];
        for row in &mut fresh {
            for v in row.iter_mut() {
                *v -= shift;
            }
        }
        let gain = shift / DAYS_PER_YEAR as f64;
        // The first sweep is measured against the zero initial table.
        residual = fresh
            .iter()
            .flatten()
            .zip(table.iter().flatten())
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        table = fresh;
        if residual < tol {
            let bellman = BellmanTable {
                horizon: Horizon::Periodic,
                alpha: model.cost.alpha,
                grid: model.grid.clone(),
                start_day: 0,
                values: table,
                residual,
                sweeps: sweep,
                gain,
                next_state_clamps: clamps,
            };
            let policy = extract_policy(model, &bellman, Disturbances::Ensemble(ensemble))?;
            return Ok(DpSolution { table: bellman, policy });
        }
    }
    Err(Error::NotConverged {
        sweeps: opts.max_sweeps,
        residual,
    })
}

/// One forward minimization pass against a stored table.
pub fn extract_policy(model: &DpModel, table: &BellmanTable, disturbances: Disturbances) -> Result<Policy> {
    model.check()?;
    let n = model.grid.storage.len();
    let rows = table.values.len();
    if *model.grid != table.grid || table.values.iter().any(|r| r.len() != n) || rows == 0 {
        return Err(Error::InvalidArgument("table does not match the model grid".into()));
    }
    let zeros = vec![0.0; n];
    let mut mu = Vec::with_capacity(rows);
    for row in 0..rows {
        let next: &[f64] = match table.horizon {
            Horizon::Finite if row + 1 == rows => &zeros,
            Horizon::Finite => &table.values[row + 1],
            Horizon::Periodic => &table.values[(row + 1) % rows],
        };
        let data = match (table.horizon, disturbances) {
            (Horizon::Finite, Disturbances::Trace(trace)) => {
                if rows > trace.len() {
                    return Err(Error::InvalidArgument("trace shorter than the table horizon".into()));
                }
                model.stage_data(&[trace.at(row)], &[1.0])
            }
            (Horizon::Periodic, Disturbances::Ensemble(e)) => {
                if rows != e.scenarios.len() {
                    return Err(Error::InvalidArgument("ensemble period does not match the table".into()));
                }
                model.stage_data(&e.scenarios[row], &e.weights[row])
            }
            _ => {
                return Err(Error::InvalidArgument(
                    "finite tables need a trace, periodic tables an ensemble".into(),
                ))
            }
        };
        mu.push(model.controls_of(&model.backup(&data, next).argmin));
    }
    Ok(Policy {
        horizon: table.horizon,
        grid: table.grid.clone(),
        start_day: table.start_day,
        mu,
    })
}

/// Closed-loop run of a grid policy, evaluated at the nearest storage node.
pub fn simulate_policy(
    policy: &Policy,
    spec: &ReservoirSpec,
    routing: &dyn DownstreamModel,
    trace: &HydrologyTrace,
) -> Result<Trajectory> {
    simulate_policy_from(policy, spec, routing, trace, spec.initial_storage)
}

pub fn simulate_policy_from(
    policy: &Policy,
    spec: &ReservoirSpec,
    routing: &dyn DownstreamModel,
    trace: &HydrologyTrace,
    s0: f64,
) -> Result<Trajectory> {
    if trace.is_empty() {
        return Err(Error::InvalidArgument("empty trace".into()));
    }
    let mut plant = Plant::new(spec, routing, trace.start_day, s0, trace.at(0));
    for t in 0..trace.len() {
        let row = policy.row(t, trace.start_day)?;
        let u = policy.evaluate(row, plant.storage());
        plant.step(u, trace.at(t));
    }
    Ok(plant.finish())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reservoir::tests::wide_spec;
    use crate::routing::RoutingModel;

    fn memoryless() -> RoutingModel {
        RoutingModel {
            lag: 0,
            attenuation: 0.0,
            rating_scale: 10.0,
            rating_exponent: 0.5,
        }
    }

    fn stage(alpha: f64) -> StageCost {
        StageCost {
            alpha,
            h_bar: 950.0,
            hydropower_scale: 1e-6,
        }
    }

    #[test]
    fn interpolation_is_exact_on_nodes_and_clamps_outside() {
        let g = GridSpec::new(vec![0.0, 1.0, 3.0], vec![0.0, 1.0]).unwrap();
        let v = [5.0, 7.0, 1.0];
        assert_eq!(g.interpolate(&v, 1.0), (7.0, false));
        assert_eq!(g.interpolate(&v, 2.0), (4.0, false));
        assert_eq!(g.interpolate(&v, -1.0), (5.0, true));
        assert_eq!(g.interpolate(&v, 3.0), (1.0, false));
        assert_eq!(g.interpolate(&v, 4.0), (1.0, true));
        assert_eq!(g.nearest_storage_node(0.5), 0);
        assert_eq!(g.nearest_storage_node(0.51), 1);
        assert_eq!(g.nearest_storage_node(2.5), 2);
    }

    #[test]
    fn grid_rejects_bad_nodes() {
        assert!(GridSpec::new(vec![0.0], vec![0.0, 1.0]).is_err());
        assert!(GridSpec::new(vec![0.0, 0.0], vec![0.0, 1.0]).is_err());
        assert!(GridSpec::new(vec![0.0, 1.0], vec![-1.0, 1.0]).is_err());
    }

    #[test]
    fn forced_move_horizon_one() {
        let mut spec = wide_spec();
        // Release pinned at 100 m3/s whatever the decision.
        spec.release_table = crate::reservoir::ReleaseTable::new(vec![crate::reservoir::ReleaseNode {
            s: 5e9,
            q: 0.0,
            r_min: 100.0,
            r_max: 100.0,
        }])
        .unwrap();
        let routing = memoryless();
        let grid = GridSpec::new(vec![4e9, 5e9, 6e9], vec![0.0, 500.0]).unwrap();
        let model = DpModel {
            spec: &spec,
            routing: &routing,
            grid: &grid,
            cost: stage(0.5),
        };
        let trace = HydrologyTrace::new(0, vec![200.0], vec![50.0], vec![50.0]).unwrap();
        let sol = solve_ddp(&model, &trace, None).unwrap();
        for i in 0..3 {
            // All controls give the same release; lowest index wins.
            assert_eq!(sol.policy.mu[0][i], 0.0);
            let s = grid.storage[i];
            let head = spec.hydraulic_head(s, 100.0);
            let g = model.cost.cost(spec.energy_production(head, 100.0), routing.instantaneous_level(100.0, 50.0, 50.0));
            assert_eq!(sol.table.values[0][i], g);
        }
    }

    #[test]
    fn flat_cost_ties_pick_lowest_control() {
        let spec = wide_spec();
        let routing = memoryless();
        let grid = GridSpec::new(vec![4e9, 5e9, 6e9], vec![0.0, 100.0, 200.0]).unwrap();
        let model = DpModel {
            spec: &spec,
            routing: &routing,
            grid: &grid,
            cost: stage(0.0),
        };
        let trace = HydrologyTrace::new(0, vec![100.0; 3], vec![10.0; 3], vec![10.0; 3]).unwrap();
        let sol = solve_ddp(&model, &trace, None).unwrap();
        assert!(sol.policy.mu.iter().flatten().all(|&u| u == 0.0));
        assert!(sol.table.values.iter().flatten().all(|&h| h == 0.0));
    }

    #[test]
    fn horizon_longer_than_trace_is_rejected() {
        let spec = wide_spec();
        let routing = memoryless();
        let grid = GridSpec::new(vec![4e9, 6e9], vec![0.0, 100.0]).unwrap();
        let model = DpModel {
            spec: &spec,
            routing: &routing,
            grid: &grid,
            cost: stage(0.5),
        };
        let trace = HydrologyTrace::new(0, vec![100.0; 3], vec![10.0; 3], vec![10.0; 3]).unwrap();
        assert!(solve_ddp(&model, &trace, Some(4)).is_err());
        assert_eq!(solve_ddp(&model, &trace, Some(2)).unwrap().table.values.len(), 2);
    }

    #[test]
    fn zero_control_policy_accumulates_inflow() {
        let spec = wide_spec();
        let routing = memoryless();
        let grid = GridSpec::new(vec![1e9, 2e10], vec![0.0, 1.0]).unwrap();
        let policy = Policy {
            horizon: Horizon::Periodic,
            grid,
            start_day: 0,
            mu: vec![vec![0.0, 0.0]; DAYS_PER_YEAR],
        };
        let trace = HydrologyTrace::new(0, vec![300.0; 5], vec![0.0; 5], vec![0.0; 5]).unwrap();
        let traj = simulate_policy_from(&policy, &spec, &routing, &trace, 5e9).unwrap();
        for (k, rec) in traj.records.iter().enumerate() {
            let (lo, _) = spec.release_bounds(rec.s, 300.0);
            assert_eq!(rec.r, lo);
            assert_eq!(traj.next_storage(k), rec.s + (300.0 - lo) * 86_400.0);
        }
        let again = simulate_policy_from(&policy, &spec, &routing, &trace, 5e9).unwrap();
        assert_eq!(traj, again);
    }

    #[test]
    fn extract_policy_reproduces_ddp_policy() {
        let spec = wide_spec();
        let routing = memoryless();
        let grid = GridSpec::uniform(3e9, 9e9, 7, vec![0.0, 200.0, 500.0, 1000.0, 2000.0]).unwrap();
        let model = DpModel {
            spec: &spec,
            routing: &routing,
            grid: &grid,
            cost: stage(0.3),
        };
        let trace = HydrologyTrace::new(0, vec![600.0, 900.0, 1500.0, 400.0], vec![3000.0; 4], vec![2000.0; 4]).unwrap();
        let sol = solve_ddp(&model, &trace, None).unwrap();
        let again = extract_policy(&model, &sol.table, Disturbances::Trace(&trace)).unwrap();
        assert_eq!(again, sol.policy);
        assert!(extract_policy(&model, &sol.table, Disturbances::Trace(&trace.window(0, 2))).is_err());
    }

    #[test]
    fn sdp_rejects_bad_options_and_reports_non_convergence() {
        let spec = wide_spec();
        let routing = memoryless();
        let grid = GridSpec::uniform(3e9, 9e9, 5, vec![0.0, 500.0, 1500.0]).unwrap();
        let model = DpModel {
            spec: &spec,
            routing: &routing,
            grid: &grid,
            cost: stage(0.5),
        };
        let trace = HydrologyTrace::new(
            0,
            (0..DAYS_PER_YEAR).map(|d| 500.0 + 400.0 * (d as f64 / 30.0).sin()).collect(),
            vec![2000.0; DAYS_PER_YEAR],
            vec![1500.0; DAYS_PER_YEAR],
        )
        .unwrap();
        let ens = DisturbanceEnsemble::from_trace_year(&trace).unwrap();
        let bad = SdpOptions {
            max_sweeps: 0,
            ..SdpOptions::default()
        };
        assert!(solve_sdp(&model, &ens, &bad).is_err());
        let one = SdpOptions {
            max_sweeps: 1,
            ..SdpOptions::default()
        };
        match solve_sdp(&model, &ens, &one) {
            Err(Error::NotConverged { sweeps: 1, residual }) => assert!(residual.is_finite() && residual > 0.0),
            other => panic!("expected non-convergence, got {other:?}"),
        }
        let sol = solve_sdp(&model, &ens, &SdpOptions::default()).unwrap();
        assert!(sol.table.sweeps > 1 && sol.table.residual.is_finite());
        let again = extract_policy(&model, &sol.table, Disturbances::Ensemble(&ens)).unwrap();
        assert_eq!(again, sol.policy);
    }
}
