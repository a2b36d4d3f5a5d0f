//! Economic MPC reference governor.
//!
//! Each day a storage-setpoint plan over the prediction horizon is chosen to
//! minimize the scalarized hydropower/flood cost predicted by the linear
//! inner-loop model, subject to storage bounds and the release bounds
//! evaluated at the predicted storages.
//!
//! The default solver is an exact-penalty pattern search. Because the
//! setpoint-to-decision map of the linear loop is lower triangular with a
//! nonzero diagonal, the search runs on the predicted decisions `u` (scaled
//! flows) and maps the result back to setpoints by forward substitution; a
//! unit step in one decision is a setpoint pulse in the original variables.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hydrology::{Disturbance, HydrologyTrace};
use crate::innerloop::{InnerLoop, PidState, StateSpaceModel};
use crate::objectives::StageCost;
use crate::plant::Plant;
use crate::reservoir::{ReservoirSpec, Trajectory};
use crate::routing::{DownstreamModel, RoutingState};
use crate::vrft::PIDParams;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ForecastSource {
    /// The recorded inflows of the coming days.
    Oracle,
    /// Yesterday's inflows repeated over the horizon.
    Persistence,
}

/// Optional soft penalty `weight * max(h - level, 0)^2` on predicted levels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LevelMargin {
    /// cm, below the flood threshold.
    pub level: f64,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverConfig {
    /// Polls per start and penalty weight.
    pub max_iterations: usize,
    /// Exact-penalty weights, tried in order until a start becomes feasible.
    pub penalty_schedule: Vec<f64>,
    /// Initial pattern step, scaled flow units.
    pub initial_step: f64,
    /// The search stops once the step falls below this, scaled flow units.
    pub tolerance: f64,
    /// Largest accepted total violation, scaled units.
    pub feasibility_tolerance: f64,
    /// Also start from constant setpoint plans, not only the warm start.
    pub restarts: bool,
    /// Discrete setpoint values (m3); when set and small enough, every plan
    /// over this lattice is enumerated instead of searching.
    #[serde(default)]
    pub lattice: Option<Vec<f64>>,
    pub max_enumeration: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            max_iterations: 300,
            penalty_schedule: vec![1e2, 1e4, 1e6],
            initial_step: 0.05,
            tolerance: 1e-4,
            feasibility_tolerance: 1e-6,
            restarts: true,
            lattice: None,
            max_enumeration: 100_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmpcConfig {
    /// Prediction horizon, days.
    pub horizon: usize,
    pub alpha: f64,
    pub forecast: ForecastSource,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub level_margin: Option<LevelMargin>,
}

impl EmpcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 {
            return Err(Error::config("empc.horizon", "must be >= 1"));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::config("empc.alpha", "must lie in [0, 1]"));
        }
        let s = &self.solver;
        if s.penalty_schedule.is_empty() || s.penalty_schedule.iter().any(|p| !(*p > 0.0)) {
            return Err(Error::config("empc.solver.penalty_schedule", "needs positive weights"));
        }
        for (name, v) in [
            ("initial_step", s.initial_step),
            ("tolerance", s.tolerance),
            ("feasibility_tolerance", s.feasibility_tolerance),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::config(format!("empc.solver.{name}"), "must be > 0"));
            }
        }
        if let Some(l) = &s.lattice {
            if l.is_empty() {
                return Err(Error::config("empc.solver.lattice", "must not be empty"));
            }
        }
        if let Some(m) = &self.level_margin {
            if !(m.weight >= 0.0 && m.level.is_finite()) {
                return Err(Error::config("empc.level_margin", "needs a finite level and weight >= 0"));
            }
        }
        Ok(())
    }
}

/// Penalized cost after each accepted iterate of one search run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterateLog {
    pub start: usize,
    pub penalty: f64,
    pub costs: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmpcStepResult {
    pub s_ref_plan: Vec<f64>,
    /// Predicted storage at the start of each horizon day, m3.
    pub predicted_s: Vec<f64>,
    /// Predicted decisions, m3/s.
    pub predicted_u: Vec<f64>,
    pub applied_s_ref: f64,
    /// Horizon-average predicted energy, kWh/day.
    pub j_hyd: f64,
    /// Horizon-average predicted squared excess level, cm2.
    pub j_flo: f64,
    pub cost: f64,
    /// Largest storage-bound excess over the plan, m3.
    pub storage_violation: f64,
    /// Largest release-bound excess over the plan, m3/s.
    pub release_violation: f64,
    pub feasible: bool,
    pub evaluations: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub iterates: Vec<IterateLog>,
}

/// Everything fixed during one optimization.
struct Problem<'a> {
    spec: &'a ReservoirSpec,
    routing: &'a dyn DownstreamModel,
    stage: StageCost,
    margin: Option<LevelMargin>,
    model: &'a StateSpaceModel,
    x0: [f64; 3],
    routing_state: &'a RoutingState,
    forecast: &'a [Disturbance],
    feasibility_tolerance: f64,
}

/// Running state of a plan evaluation. Costs accumulate day by day in a fixed
/// order, so resuming from a stored state reproduces a full pass bit for bit.
#[derive(Debug, Clone)]
struct PlanState {
    s: f64,
    routing: RoutingState,
    energy: f64,
    flood: f64,
    margin: f64,
    viol: f64,
    s_viol: f64,
    r_viol: f64,
}

impl PlanState {
    fn start(p: &Problem) -> Self {
        PlanState {
            s: p.x0[0],
            routing: p.routing_state.clone(),
            energy: 0.0,
            flood: 0.0,
            margin: 0.0,
            viol: 0.0,
            s_viol: 0.0,
            r_viol: 0.0,
        }
    }
}

/// Full evaluation of a decision plan (physical units).
#[derive(Debug, Clone)]
struct Evaluation {
    cost: f64,
    j_hyd: f64,
    j_flo: f64,
    /// Sum of scaled violations.
    violation: f64,
    storage_violation: f64,
    release_violation: f64,
    s: Vec<f64>,
}

impl Problem<'_> {
    fn n(&self) -> usize {
        self.forecast.len()
    }

    /// Day-by-day state of a plan: `states[k]` is the state before day `k`.
    fn trace(&self, u: &[f64]) -> Vec<PlanState> {
        let mut st = PlanState::start(self);
        let mut states = Vec::with_capacity(u.len() + 1);
        for (k, &uk) in u.iter().enumerate() {
            states.push(st.clone());
            self.advance(&mut st, uk, &self.forecast[k]);
        }
        states.push(st);
        states
    }

    #[inline]
    fn advance(&self, st: &mut PlanState, uk: f64, d: &Disturbance) {
        let spec = self.spec;
        let sc = &self.model.scaling;
        let (lo, hi) = spec.release_bounds(st.s, d.q_d);
        st.r_viol = st.r_viol.max((lo - uk).max(0.0) + (uk - hi).max(0.0));
        let (lo, hi) = self.release_band(lo, hi);
        st.viol += ((lo - uk).max(0.0) + (uk - hi).max(0.0)) / sc.flow;
        let head = spec.hydraulic_head(st.s, uk);
        st.energy += spec.energy_production(head, uk);
        let h = self.routing.advance(&mut st.routing, uk + d.q_t + d.q_l);
        st.flood += self.stage.flood_term(h);
        if let Some(m) = &self.margin {
            let ex = (h - m.level).max(0.0);
            st.margin += m.weight * ex * ex;
        }
        st.s = spec.mass_balance(st.s, d.q_d, uk);
        st.s_viol = st.s_viol.max((spec.s_min - st.s).max(0.0) + (st.s - spec.s_max).max(0.0));
        let (s_lo, s_hi) = self.storage_band();
        st.viol += ((s_lo - st.s).max(0.0) + (st.s - s_hi).max(0.0)) / sc.storage;
    }

    /// Storage bounds tightened by the feasibility tolerance, so that a plan
    /// accepted as feasible keeps the real storage inside `[s_min, s_max]`.
    fn storage_band(&self) -> (f64, f64) {
        let back = self.feasibility_tolerance * self.model.scaling.storage;
        (self.spec.s_min + back, self.spec.s_max - back)
    }

    /// Release bounds tightened the same way, so accepted decisions are
    /// released unsaturated. Collapses to the midpoint when the band is
    /// narrower than the tolerance.
    fn release_band(&self, lo: f64, hi: f64) -> (f64, f64) {
        let back = self.feasibility_tolerance * self.model.scaling.flow;
        if hi - lo > 2.0 * back {
            (lo + back, hi - back)
        } else {
            let mid = 0.5 * (lo + hi);
            (mid, mid)
        }
    }

    fn cost_of(&self, st: &PlanState, n: usize) -> f64 {
        let n = n as f64;
        -self.stage.alpha * self.stage.hydropower_scale * (st.energy / n)
            + (1.0 - self.stage.alpha) * (st.flood / n)
            + st.margin / n
    }

    fn evaluate(&self, u: &[f64]) -> Evaluation {
        let states = self.trace(u);
        let last = states.last().expect("trace has a final state");
        let n = u.len() as f64;
        Evaluation {
            cost: self.cost_of(last, u.len()),
            j_hyd: last.energy / n,
            j_flo: last.flood / n,
            violation: last.viol,
            storage_violation: last.s_viol,
            release_violation: last.r_viol,
            s: states[..u.len()].iter().map(|p| p.s).collect(),
        }
    }

    /// Penalized cost of `u`, resuming from `from[k]`, the state of a plan
    /// that agrees with `u` on days before `k`.
    /// Returns the penalized cost and the violation.
    fn penalized_from(&self, u: &[f64], from: &[PlanState], k: usize, rho: f64, scratch: &mut PlanState) -> (f64, f64) {
        scratch.clone_from(&from[k]);
        for (j, &uj) in u.iter().enumerate().skip(k) {
            self.advance(scratch, uj, &self.forecast[j]);
        }
        (self.cost_of(scratch, u.len()) + rho * scratch.viol, scratch.viol)
    }

    /// Greedy forward projection of a decision plan onto the release bounds
    /// and, where the bounds allow, onto the storage bounds.
    fn repair(&self, u: &[f64]) -> Vec<f64> {
        let spec = self.spec;
        let dt = spec.seconds_per_step;
        let (s_lo, s_hi) = self.storage_band();
        let mut s = self.x0[0];
        let mut out = Vec::with_capacity(u.len());
        for (uk, d) in u.iter().zip(self.forecast) {
            let (lo, hi) = spec.release_bounds(s, d.q_d);
            let (lo, hi) = self.release_band(lo, hi);
            let mut v = uk.clamp(lo, hi);
            let next = spec.mass_balance(s, d.q_d, v);
            if next > s_hi {
                v = (v + (next - s_hi) / dt).min(hi);
                // The correction can land an ulp outside; step until it holds.
                while v < hi && spec.mass_balance(s, d.q_d, v) > s_hi {
                    v = v.next_up();
                }
            } else if next < s_lo {
                v = (v - (s_lo - next) / dt).max(lo);
                while v > lo && spec.mass_balance(s, d.q_d, v) < s_lo {
                    v = v.next_down();
                }
            }
            s = spec.mass_balance(s, d.q_d, v);
            out.push(v);
        }
        out
    }

    fn decisions_of(&self, s_ref: &[f64]) -> Vec<f64> {
        let inputs: Vec<(f64, f64)> = s_ref.iter().zip(self.forecast).map(|(r, d)| (*r, d.q_d)).collect();
        self.model.predict(self.x0, &inputs).into_iter().map(|p| p.1).collect()
    }

    /// Inverts the setpoint-to-decision map one day at a time: the decision
    /// on day `k` depends on the setpoint of day `k` only through the direct
    /// feedthrough, so each setpoint solves a scalar equation.
    fn setpoints_of(&self, u: &[f64]) -> Result<Vec<f64>> {
        let m = self.model;
        let sc = &m.scaling;
        let gain = m.d[1][0];
        if gain == 0.0 || !gain.is_finite() {
            return Err(Error::InvalidArgument(
                "inner loop has zero static gain from setpoint to decision".into(),
            ));
        }
        let mut x = m.scale_state(self.x0);
        let mut s_ref = Vec::with_capacity(u.len());
        for (uk, d) in u.iter().zip(self.forecast) {
            let q = d.q_d / sc.flow;
            let free = m.c[1][0] * x[0] + m.c[1][1] * x[1] + m.c[1][2] * x[2] + m.d[1][1] * q;
            let r = (uk / sc.flow - free) / gain;
            m.step_scaled(&mut x, [r, q]);
            s_ref.push(r * sc.storage);
        }
        Ok(s_ref)
    }

    fn result(&self, s_ref: Vec<f64>, evaluations: usize, iterates: Vec<IterateLog>) -> EmpcStepResult {
        let u = self.decisions_of(&s_ref);
        let e = self.evaluate(&u);
        EmpcStepResult {
            applied_s_ref: s_ref[0],
            s_ref_plan: s_ref,
            predicted_s: e.s,
            predicted_u: u,
            j_hyd: e.j_hyd,
            j_flo: e.j_flo,
            cost: e.cost,
            storage_violation: e.storage_violation,
            release_violation: e.release_violation,
            feasible: e.violation <= self.feasibility_tolerance,
            evaluations,
            iterates,
        }
    }
}

/// Generalized pattern search on scaled decisions with opportunistic polling.
/// Moves must lower the penalized cost; once an iterate is feasible, moves
/// that leave the feasible set are also rejected.
struct Search<'p, 'a> {
    problem: &'p Problem<'a>,
    cfg: &'p SolverConfig,
    evaluations: usize,
}

impl Search<'_, '_> {
    fn run(&mut self, start: usize, v0: Vec<f64>, rho: f64) -> (Vec<f64>, f64, IterateLog) {
        let flow = self.problem.model.scaling.flow;
        let n = v0.len();
        let mut v = v0;
        let mut u: Vec<f64> = v.iter().map(|x| x * flow).collect();
        let mut states = self.problem.trace(&u);
        let mut best = {
            let last = states.last().expect("trace has a final state");
            self.problem.cost_of(last, n) + rho * last.viol
        };
        let mut feasible = states.last().expect("trace has a final state").viol <= self.problem.feasibility_tolerance;
        let mut scratch = states[0].clone();
        self.evaluations += 1;
        let mut log = IterateLog {
            start,
            penalty: rho,
            costs: vec![best],
        };
        // Directions: single-day pulses, then transfers between adjacent days.
        let mut dirs: Vec<(usize, Option<usize>, f64)> = Vec::with_capacity(4 * n);
        for k in 0..n {
            dirs.push((k, None, 1.0));
            dirs.push((k, None, -1.0));
        }
        for k in 0..n.saturating_sub(1) {
            dirs.push((k, Some(k + 1), 1.0));
            dirs.push((k, Some(k + 1), -1.0));
        }
        let mut step = self.cfg.initial_step;
        let mut first = 0;
        let mut polls = 0;
        while polls < self.cfg.max_iterations && step >= self.cfg.tolerance {
            polls += 1;
            let mut improved = false;
            for o in 0..dirs.len() {
                let idx = (first + o) % dirs.len();
                let (k, pair, sign) = dirs[idx];
                let saved = (v[k], pair.map(|j| v[j]));
                v[k] += sign * step;
                u[k] = v[k] * flow;
                if let Some(j) = pair {
                    v[j] -= sign * step;
                    u[j] = v[j] * flow;
                }
                let (c, viol) = self.problem.penalized_from(&u, &states, k, rho, &mut scratch);
                self.evaluations += 1;
                let keeps_feasible = !feasible || viol <= self.problem.feasibility_tolerance;
                if !(c < best && keeps_feasible) {
                    v[k] = saved.0;
                    u[k] = v[k] * flow;
                    if let (Some(j), Some(old)) = (pair, saved.1) {
                        v[j] = old;
                        u[j] = old * flow;
                    }
                } else {
                    best = c;
                    feasible = viol <= self.problem.feasibility_tolerance;
                    states = self.problem.trace(&u);
                    log.costs.push(best);
                    first = idx;
                    improved = true;
                    break;
                }
            }
            if improved {
                step = (step * 2.0).min(self.cfg.initial_step);
            } else {
                step *= 0.5;
            }
        }
        (v, best, log)
    }
}

/// One optimization of the setpoint plan over `forecast.len()` days.
#[allow(clippy::too_many_arguments)]
pub fn solve_step(
    model: &StateSpaceModel,
    x0: [f64; 3],
    routing_state: &RoutingState,
    forecast: &[Disturbance],
    spec: &ReservoirSpec,
    routing: &dyn DownstreamModel,
    stage: StageCost,
    cfg: &EmpcConfig,
    warm_start: Option<&[f64]>,
) -> Result<EmpcStepResult> {
    cfg.validate()?;
    if forecast.is_empty() {
        return Err(Error::InvalidArgument("empty forecast".into()));
    }
    if let Some(w) = warm_start {
        if w.len() != forecast.len() {
            return Err(Error::InvalidArgument(format!(
                "warm start has {} days, forecast {}",
                w.len(),
                forecast.len()
            )));
        }
    }
    let problem = Problem {
        spec,
        routing,
        stage: StageCost { alpha: cfg.alpha, ..stage },
        margin: cfg.level_margin,
        model,
        x0,
        routing_state,
        forecast,
        feasibility_tolerance: cfg.solver.feasibility_tolerance,
    };
    let n = forecast.len();
    let solver = &cfg.solver;

    let finish = |res: EmpcStepResult| {
        if res.feasible {
            Ok(res)
        } else {
            Err(Error::Infeasible {
                storage: res.storage_violation,
                release: res.release_violation,
                best: Box::new(res),
            })
        }
    };

    if let Some(lattice) = &solver.lattice {
        let combos = (lattice.len() as f64).powi(n as i32);
        if combos <= solver.max_enumeration as f64 {
            return finish(enumerate_lattice(&problem, lattice));
        }
    }

    if solver.max_iterations == 0 {
        if let Some(w) = warm_start {
            return finish(problem.result(w.to_vec(), 1, Vec::new()));
        }
    }

    let s_now = x0[0];
    let mut starts: Vec<Vec<f64>> = Vec::new();
    if let Some(w) = warm_start {
        starts.push(w.to_vec());
    }
    if solver.restarts || warm_start.is_none() {
        starts.push(vec![s_now; n]);
        starts.push(vec![spec.s_min + 0.95 * (spec.s_max - spec.s_min); n]);
    }
    let flow = model.scaling.flow;
    let mut search = Search {
        problem: &problem,
        cfg: solver,
        evaluations: 0,
    };
    let mut logs = Vec::new();
    // (violation, cost, scaled decisions) of the best candidate so far.
    let mut best: Option<(bool, f64, f64, Vec<f64>)> = None;
    for (i, plan) in starts.iter().enumerate() {
        let mut u0 = problem.decisions_of(plan);
        if problem.evaluate(&u0).violation > solver.feasibility_tolerance {
            u0 = problem.repair(&u0);
        }
        let mut v: Vec<f64> = u0.iter().map(|u| u / flow).collect();
        for &rho in &solver.penalty_schedule {
            let (nv, _, log) = search.run(i, v, rho);
            logs.push(log);
            v = nv;
            let u: Vec<f64> = v.iter().map(|x| x * flow).collect();
            if problem.evaluate(&u).violation <= solver.feasibility_tolerance {
                break;
            }
        }
        let u: Vec<f64> = v.iter().map(|x| x * flow).collect();
        let e = problem.evaluate(&u);
        let feasible = e.violation <= solver.feasibility_tolerance;
        let better = match &best {
            None => true,
            Some((bf, bv, bc, _)) => match (feasible, *bf) {
                (true, false) => true,
                (false, true) => false,
                (true, true) => e.cost < *bc,
                (false, false) => e.violation < *bv,
            },
        };
        if better {
            best = Some((feasible, e.violation, e.cost, u));
        }
    }
    let (_, _, _, u) = best.expect("at least one start");
    let s_ref = problem.setpoints_of(&u)?;
    let evaluations = search.evaluations;
    finish(problem.result(s_ref, evaluations, logs))
}

/// Exhaustive scan of every lattice plan; ties keep the first plan in
/// lexicographic order. Infeasible plans only win when nothing is feasible.
fn enumerate_lattice(problem: &Problem, lattice: &[f64]) -> EmpcStepResult {
    let n = problem.n();
    let m = lattice.len();
    let mut idx = vec![0usize; n];
    let mut best: Option<(bool, f64, f64, Vec<f64>)> = None;
    let mut evaluations = 0;
    loop {
        let plan: Vec<f64> = idx.iter().map(|&i| lattice[i]).collect();
        let e = problem.evaluate(&problem.decisions_of(&plan));
        evaluations += 1;
        let feasible = e.violation <= problem.feasibility_tolerance;
        let better = match &best {
            None => true,
            Some((bf, bv, bc, _)) => match (feasible, *bf) {
                (true, false) => true,
                (false, true) => false,
                (true, true) => e.cost < *bc,
                (false, false) => e.violation < *bv,
            },
        };
        if better {
            best = Some((feasible, e.violation, e.cost, plan));
        }
        // Odometer increment, last position fastest.
        let mut pos = n;
        loop {
            if pos == 0 {
                let (_, _, _, plan) = best.expect("lattice is non-empty");
                return problem.result(plan, evaluations, Vec::new());
            }
            pos -= 1;
            idx[pos] += 1;
            if idx[pos] < m {
                break;
            }
            idx[pos] = 0;
        }
    }
}

/// One day of a receding-horizon run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub t: usize,
    pub horizon: usize,
    pub applied_s_ref: f64,
    /// The solver failed and the previous plan's tail was applied.
    pub fallback: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub result: Option<EmpcStepResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmpcRun {
    pub trajectory: Trajectory,
    pub steps: Vec<StepLog>,
}

impl EmpcRun {
    pub fn fallbacks(&self) -> usize {
        self.steps.iter().filter(|s| s.fallback).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RecedingOptions {
    pub anti_windup: bool,
    /// Initial controller memory; by default the loop starts bumpless at the
    /// first day's Da inflow.
    pub initial_state: Option<PidState>,
    /// Keep per-iterate cost logs in the step results.
    pub keep_iterates: bool,
}

impl Default for RecedingOptions {
    fn default() -> Self {
        RecedingOptions {
            anti_windup: true,
            initial_state: None,
            keep_iterates: false,
        }
    }
}

fn forecast_for(trace: &HydrologyTrace, t: usize, n: usize, source: ForecastSource) -> Vec<Disturbance> {
    match source {
        ForecastSource::Oracle => (t..t + n).map(|k| trace.at(k)).collect(),
        ForecastSource::Persistence => vec![trace.at(t.saturating_sub(1)); n],
    }
}

/// Closed-loop run: each day solve, apply the first setpoint to the real
/// inner loop, shift the plan as the next warm start.
#[allow(clippy::too_many_arguments)]
pub fn run_receding_horizon(
    spec: &ReservoirSpec,
    routing: &dyn DownstreamModel,
    pid: &PIDParams,
    model: &StateSpaceModel,
    trace: &HydrologyTrace,
    cfg: &EmpcConfig,
    stage: StageCost,
    s0: f64,
    opts: &RecedingOptions,
) -> Result<EmpcRun> {
    cfg.validate()?;
    pid.validate()?;
    if trace.len() < cfg.horizon + 1 {
        return Err(Error::InvalidArgument(format!(
            "trace of {} days is shorter than the horizon plus one ({})",
            trace.len(),
            cfg.horizon + 1
        )));
    }
    let plant = Plant::new(spec, routing, trace.start_day, s0, trace.at(0));
    let state = opts
        .initial_state
        .unwrap_or_else(|| PidState::bumpless(pid, trace.q_d[0]));
    let mut lp = InnerLoop::new(*pid, opts.anti_windup, state, plant);
    // Previous setpoint plan and its predicted decisions.
    let mut previous: Option<(Vec<f64>, Vec<f64>)> = None;
    let mut steps = Vec::with_capacity(trace.len());
    let shifted = |p: &[f64], n: usize| {
        let mut w: Vec<f64> = p.iter().skip(1).copied().collect();
        let last = *p.last().expect("plans are non-empty");
        w.resize(n.max(1), last);
        w.truncate(n);
        w
    };
    for t in 0..trace.len() {
        let n = cfg.horizon.min(trace.len() - t);
        let forecast = forecast_for(trace, t, n, cfg.forecast);
        let warm: Option<Vec<f64>> = previous.as_ref().map(|(p, _)| shifted(p, n));
        let x0 = lp.linear_state();
        let solved = solve_step(
            model,
            x0,
            lp.plant.routing_state(),
            &forecast,
            spec,
            routing,
            stage,
            cfg,
            warm.as_deref(),
        );
        let (applied, plan, fallback, error, mut result) = match solved {
            Ok(res) => {
                let u = res.predicted_u.clone();
                (res.applied_s_ref, (res.s_ref_plan.clone(), u), false, None, Some(res))
            }
            Err(err) => {
                let msg = err.to_string();
                let best = match err {
                    Error::Infeasible { best, .. } => Some(*best),
                    _ => None,
                };
                match (&previous, best) {
                    (Some((_, prev_u)), best) => {
                        // Keep the previous decisions, re-targeted from the
                        // current controller state.
                        let problem = Problem {
                            spec,
                            routing,
                            stage,
                            margin: cfg.level_margin,
                            model,
                            x0,
                            routing_state: lp.plant.routing_state(),
                            forecast: &forecast,
                            feasibility_tolerance: cfg.solver.feasibility_tolerance,
                        };
                        let u = shifted(prev_u, n);
                        let s_ref = problem.setpoints_of(&u)?;
                        (s_ref[0], (s_ref, u), true, Some(msg), best)
                    }
                    (None, Some(b)) => {
                        let plan = (b.s_ref_plan.clone(), b.predicted_u.clone());
                        (b.applied_s_ref, plan, true, Some(msg), Some(b))
                    }
                    (None, None) => return Err(Error::InvalidArgument(msg)),
                }
            }
        };
        if !opts.keep_iterates {
            if let Some(r) = result.as_mut() {
                r.iterates.clear();
            }
        }
        lp.step(applied, trace.at(t));
        steps.push(StepLog {
            t,
            horizon: n,
            applied_s_ref: applied,
            fallback,
            error,
            result,
        });
        previous = Some(plan);
    }
    Ok(EmpcRun {
        trajectory: lp.plant.finish(),
        steps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::innerloop::{linearized_inner_loop, Scaling};
    use crate::reservoir::tests::wide_spec;
    use crate::reservoir::{ReleaseNode, ReleaseTable};
    use crate::routing::RoutingModel;

    fn routing() -> RoutingModel {
        RoutingModel {
            lag: 1,
            attenuation: 0.2,
            rating_scale: 8.0,
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

    fn setup() -> (ReservoirSpec, PIDParams, StateSpaceModel) {
        let mut spec = wide_spec();
        spec.release_table = ReleaseTable::new(vec![
            ReleaseNode { s: 1e9, q: 0.0, r_min: 0.0, r_max: 2000.0 },
            ReleaseNode { s: 1e10, q: 0.0, r_min: 200.0, r_max: 6000.0 },
            ReleaseNode { s: 1e9, q: 10_000.0, r_min: 0.0, r_max: 8000.0 },
            ReleaseNode { s: 1e10, q: 10_000.0, r_min: 500.0, r_max: 16_000.0 },
        ])
        .unwrap();
        let pid = PIDParams::new(-2e-6, -1e-7, -2e-7);
        let sc = Scaling { storage: spec.s_max, flow: 5000.0, seconds_per_step: 86_400.0 };
        let model = linearized_inner_loop(&pid, &sc).unwrap();
        (spec, pid, model)
    }

    fn cfg(horizon: usize, alpha: f64) -> EmpcConfig {
        EmpcConfig {
            horizon,
            alpha,
            forecast: ForecastSource::Oracle,
            solver: SolverConfig::default(),
            level_margin: None,
        }
    }

    fn forecast(n: usize) -> Vec<Disturbance> {
        (0..n)
            .map(|k| Disturbance { q_d: 1500.0 + 100.0 * k as f64, q_t: 4000.0, q_l: 3000.0 })
            .collect()
    }

    #[test]
    fn returned_plans_are_feasible_and_not_worse_than_warm_start() {
        let (spec, pid, model) = setup();
        let r = routing();
        let x0 = [5e9, PidState::bumpless(&pid, 1500.0).integral, 0.0];
        let rs = r.state_at_rest(8500.0);
        let fc = forecast(10);
        let c = cfg(10, 0.5);
        let warm = vec![5e9; 10];
        let res = solve_step(&model, x0, &rs, &fc, &spec, &r, stage(0.5), &c, Some(&warm)).unwrap();
        assert!(res.feasible);
        assert_eq!(res.applied_s_ref, res.s_ref_plan[0]);
        let warm_only = SolverConfig { max_iterations: 0, ..SolverConfig::default() };
        let base = solve_step(&model, x0, &rs, &fc, &spec, &r, stage(0.5), &EmpcConfig { solver: warm_only, ..c.clone() }, Some(&warm)).unwrap();
        assert_eq!(base.s_ref_plan, warm);
        assert!(res.cost <= base.cost);
        // Bounds re-evaluated at the plan's own predicted storages.
        for k in 0..10 {
            let (lo, hi) = spec.release_bounds(res.predicted_s[k], fc[k].q_d);
            assert!(res.predicted_u[k] >= lo - 1e-3 && res.predicted_u[k] <= hi + 1e-3);
        }
        for log in &res.iterates {
            assert!(log.costs.windows(2).all(|w| w[1] <= w[0]));
        }
    }

    #[test]
    fn flat_cost_keeps_optimal_warm_start() {
        let (spec, pid, model) = setup();
        let r = routing();
        let x0 = [5e9, PidState::bumpless(&pid, 1500.0).integral, 0.0];
        let rs = r.state_at_rest(1500.0);
        let fc: Vec<Disturbance> = (0..5).map(|_| Disturbance { q_d: 1500.0, q_t: 0.0, q_l: 0.0 }).collect();
        let warm = vec![5e9; 5];
        // alpha = 0 and levels far below the threshold: every plan costs 0.
        let res = solve_step(&model, x0, &rs, &fc, &spec, &r, stage(0.0), &cfg(5, 0.0), Some(&warm)).unwrap();
        assert_eq!(res.cost, 0.0);
        for (a, b) in res.s_ref_plan.iter().zip(&warm) {
            assert!((a - b).abs() <= 1e-6 * b);
        }
    }

    #[test]
    fn hydropower_only_beats_every_constant_plan() {
        let (spec, pid, model) = setup();
        let r = routing();
        let x0 = [6e9, PidState::bumpless(&pid, 1500.0).integral, 0.0];
        let rs = r.state_at_rest(1500.0);
        let fc: Vec<Disturbance> = (0..6).map(|_| Disturbance { q_d: 1500.0, q_t: 0.0, q_l: 0.0 }).collect();
        let c = cfg(6, 1.0);
        let res = solve_step(&model, x0, &rs, &fc, &spec, &r, stage(1.0), &c, None).unwrap();
        let problem = Problem {
            spec: &spec,
            routing: &r,
            stage: stage(1.0),
            margin: None,
            model: &model,
            x0,
            routing_state: &rs,
            forecast: &fc,
            feasibility_tolerance: 1e-6,
        };
        for i in 0..=400 {
            let level = 1e9 + 9e9 * i as f64 / 400.0;
            let e = problem.evaluate(&problem.decisions_of(&[level; 6]));
            if e.violation <= 1e-6 {
                assert!(res.cost <= e.cost + 1e-9 * e.cost.abs(), "constant plan {level} beats the solver");
            }
        }
    }

    #[test]
    fn lattice_enumeration_picks_the_cheapest_plan() {
        let (spec, pid, model) = setup();
        let r = routing();
        let x0 = [5e9, PidState::bumpless(&pid, 1500.0).integral, 0.0];
        let rs = r.state_at_rest(9000.0);
        let fc = forecast(2);
        let mut c = cfg(2, 0.3);
        c.solver.lattice = Some(vec![4.8e9, 5e9, 5.2e9]);
        let res = solve_step(&model, x0, &rs, &fc, &spec, &r, stage(0.3), &c, None).unwrap();
        assert_eq!(res.evaluations, 9);
        let problem = Problem {
            spec: &spec,
            routing: &r,
            stage: stage(0.3),
            margin: None,
            model: &model,
            x0,
            routing_state: &rs,
            forecast: &fc,
            feasibility_tolerance: 1e-6,
        };
        for a in [4.8e9, 5e9, 5.2e9] {
            for b in [4.8e9, 5e9, 5.2e9] {
                let e = problem.evaluate(&problem.decisions_of(&[a, b]));
                if e.violation <= 1e-6 {
                    assert!(res.cost <= e.cost);
                }
            }
        }
    }

    #[test]
    fn infeasible_problem_reports_best_plan() {
        let (mut spec, pid, model) = setup();
        // A mandatory release far above anything the setpoints can reach at
        // the storage floor, with storage already at the floor.
        spec.s_min = 4.9e9;
        spec.release_table = ReleaseTable::new(vec![ReleaseNode { s: 5e9, q: 0.0, r_min: 9000.0, r_max: 9000.0 }]).unwrap();
        let r = routing();
        let x0 = [4.9e9, PidState::bumpless(&pid, 100.0).integral, 0.0];
        let rs = r.state_at_rest(100.0);
        let fc: Vec<Disturbance> = (0..3).map(|_| Disturbance { q_d: 100.0, q_t: 0.0, q_l: 0.0 }).collect();
        match solve_step(&model, x0, &rs, &fc, &spec, &r, stage(0.5), &cfg(3, 0.5), None) {
            Err(Error::Infeasible { storage, best, .. }) => {
                assert!(storage > 0.0);
                assert_eq!(best.s_ref_plan.len(), 3);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn disabled_optimizer_tracks_the_warm_start() {
        let (spec, pid, model) = setup();
        let r = routing();
        let n = 30;
        let trace = HydrologyTrace::new(0, vec![1500.0; n], vec![3000.0; n], vec![2000.0; n]).unwrap();
        let mut c = cfg(5, 0.5);
        c.solver.max_iterations = 0;
        c.solver.restarts = false;
        let run = run_receding_horizon(&spec, &r, &pid, &model, &trace, &c, stage(0.5), 5e9, &RecedingOptions::default()).unwrap();
        // The first plan is a search from constant plans (no warm start yet);
        // afterwards every step reapplies the shifted plan unchanged.
        let first = run.steps[0].result.as_ref().unwrap().s_ref_plan.clone();
        for (t, step) in run.steps.iter().enumerate().take(5) {
            assert_eq!(step.applied_s_ref, first[t]);
        }
        assert_eq!(run.trajectory.len(), n);
        assert!(run.trajectory.max_mass_balance_residual() <= 4.0 * f64::EPSILON * spec.s_max);
    }

    #[test]
    fn short_trace_is_rejected_and_horizons_truncate() {
        let (spec, pid, model) = setup();
        let r = routing();
        let trace = HydrologyTrace::new(0, vec![1500.0; 5], vec![3000.0; 5], vec![2000.0; 5]).unwrap();
        assert!(run_receding_horizon(&spec, &r, &pid, &model, &trace, &cfg(5, 0.5), stage(0.5), 5e9, &RecedingOptions::default()).is_err());
        let run = run_receding_horizon(&spec, &r, &pid, &model, &trace, &cfg(3, 0.5), stage(0.5), 5e9, &RecedingOptions::default()).unwrap();
        let horizons: Vec<usize> = run.steps.iter().map(|s| s.horizon).collect();
        assert_eq!(horizons, vec![3, 3, 3, 2, 1]);
    }
}
