//! PID inner loop around the reservoir and its linear approximation.
//!
//! The controller is `u_t = kp e_t + ki I_t + kd (e_t - e_{t-1})` with
//! `I_t = I_{t-1} + e_t` and `e_t = s_ref_t - s_t`. The plant seen by the
//! linear model is the unsaturated mass balance `s_{t+1} = s_t + dt (q_t - u_t)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hydrology::{Disturbance, HydrologyTrace};
use crate::plant::Plant;
use crate::reservoir::{ReservoirSpec, StepRecord, Trajectory};
use crate::routing::DownstreamModel;
use crate::vrft::{LinearSISOModel, PIDParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InnerLoopConfig {
    /// Fixed gains; when absent they are fitted from the DDP mean cycle.
    #[serde(default)]
    pub pid: Option<PIDParams>,
    pub reference_model: LinearSISOModel,
    /// Optional filter applied to the VRFT regressors and target.
    #[serde(default)]
    pub prefilter: Option<LinearSISOModel>,
    /// Storage normalization (m3); defaults to `s_max`.
    #[serde(default)]
    pub storage_scale: Option<f64>,
    /// Flow normalization (m3/s); defaults to the 99th percentile of the
    /// training Da inflow.
    #[serde(default)]
    pub flow_scale: Option<f64>,
    /// Freeze the integrator while the release is saturated.
    #[serde(default = "default_true")]
    pub anti_windup: bool,
}

fn default_true() -> bool {
    true
}

impl InnerLoopConfig {
    pub fn validate(&self) -> Result<()> {
        self.reference_model
            .validate()
            .map_err(|e| Error::config("inner_loop.reference_model", e.to_string()))?;
        if let Some(p) = &self.pid {
            p.validate().map_err(|e| Error::config("inner_loop.pid", e.to_string()))?;
        }
        if let Some(l) = &self.prefilter {
            l.validate().map_err(|e| Error::config("inner_loop.prefilter", e.to_string()))?;
        }
        for (name, v) in [("storage_scale", self.storage_scale), ("flow_scale", self.flow_scale)] {
            if let Some(v) = v {
                if !(v.is_finite() && v > 0.0) {
                    return Err(Error::config(format!("inner_loop.{name}"), "must be > 0"));
                }
            }
        }
        Ok(())
    }

    pub fn scaling(&self, spec: &ReservoirSpec, training: &HydrologyTrace) -> Scaling {
        Scaling {
            storage: self.storage_scale.unwrap_or(spec.s_max),
            flow: self.flow_scale.unwrap_or_else(|| percentile(&training.q_d, 0.99)),
            seconds_per_step: spec.seconds_per_step,
        }
    }
}

/// Linear-interpolated empirical quantile, `p` in [0, 1].
pub fn percentile(values: &[f64], p: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    if v.is_empty() {
        return f64::NAN;
    }
    let pos = p.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (pos - lo as f64) * (v[hi] - v[lo])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scaling {
    /// m3 per unit of scaled storage.
    pub storage: f64,
    /// m3/s per unit of scaled flow.
    pub flow: f64,
    pub seconds_per_step: f64,
}

impl Scaling {
    pub fn validate(&self) -> Result<()> {
        if [self.storage, self.flow, self.seconds_per_step]
            .iter()
            .all(|v| v.is_finite() && *v > 0.0)
        {
            Ok(())
        } else {
            Err(Error::InvalidArgument("scaling constants must be > 0".into()))
        }
    }

    /// Time step in scaled units: storage change per unit of scaled flow.
    pub fn step(&self) -> f64 {
        self.seconds_per_step * self.flow / self.storage
    }
}

/// Controller memory: the running error sum and the previous error (m3).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PidState {
    pub integral: f64,
    pub prev_error: f64,
}

impl PidState {
    /// State whose first output at zero error equals `u0`, so the loop starts
    /// without a bump.
    pub fn bumpless(pid: &PIDParams, u0: f64) -> Self {
        let ki = pid.theta[1];
        PidState {
            integral: if ki != 0.0 { u0 / ki } else { 0.0 },
            prev_error: 0.0,
        }
    }
}

/// PID plus reservoir, advanced one day at a time.
#[derive(Debug, Clone)]
pub struct InnerLoop<'a> {
    pub pid: PIDParams,
    pub anti_windup: bool,
    pub state: PidState,
    pub plant: Plant<'a>,
}

impl<'a> InnerLoop<'a> {
    pub fn new(pid: PIDParams, anti_windup: bool, state: PidState, plant: Plant<'a>) -> Self {
        InnerLoop {
            pid,
            anti_windup,
            state,
            plant,
        }
    }

    /// Controller output for a setpoint at the current storage, without
    /// advancing anything.
    pub fn control(&self, s_ref: f64) -> f64 {
        let [kp, ki, kd] = self.pid.theta;
        let e = s_ref - self.plant.storage();
        let integral = self.state.integral + e;
        kp * e + ki * integral + kd * (e - self.state.prev_error)
    }

    pub fn step(&mut self, s_ref: f64, dist: Disturbance) -> StepRecord {
        let e = s_ref - self.plant.storage();
        let u = self.control(s_ref);
        let rec = self.plant.step(u, dist);
        if !(self.anti_windup && rec.r != u) {
            self.state.integral += e;
        }
        self.state.prev_error = e;
        rec
    }

    /// Linear-model state `[s, I_{t-1}, e_{t-1}]` in physical units.
    pub fn linear_state(&self) -> [f64; 3] {
        [self.plant.storage(), self.state.integral, self.state.prev_error]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimulationOptions {
    pub anti_windup: bool,
    pub initial_state: PidState,
}

impl Default for SimulationOptions {
    fn default() -> Self {
        SimulationOptions {
            anti_windup: true,
            initial_state: PidState::default(),
        }
    }
}

/// Closed loop of PID and the nonlinear reservoir tracking `s_ref`.
pub fn simulate_inner_loop(
    spec: &ReservoirSpec,
    routing: &dyn DownstreamModel,
    pid: &PIDParams,
    s_ref: &[f64],
    trace: &HydrologyTrace,
    s0: f64,
    opts: &SimulationOptions,
) -> Result<Trajectory> {
    pid.validate()?;
    if s_ref.len() != trace.len() {
        return Err(Error::InvalidArgument(format!(
            "reference has {} days but the trace {}",
            s_ref.len(),
            trace.len()
        )));
    }
    let plant = Plant::new(spec, routing, trace.start_day, s0, trace.at(0));
    let mut lp = InnerLoop::new(*pid, opts.anti_windup, opts.initial_state, plant);
    for (t, &r) in s_ref.iter().enumerate() {
        lp.step(r, trace.at(t));
    }
    Ok(lp.plant.finish())
}

/// Scaled state-space realization of the unsaturated loop.
///
/// State `x = [s, I_{t-1}, e_{t-1}]`, inputs `w = [s_ref_t, q_t]`, outputs
/// `y = [s_t, u_t]`; `x_{t+1} = A x + B w`, `y = C x + D w`. All matrices act
/// on scaled quantities; the public methods take and return physical units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateSpaceModel {
    pub a: [[f64; 3]; 3],
    pub b: [[f64; 2]; 3],
    pub c: [[f64; 3]; 2],
    pub d: [[f64; 2]; 2],
    pub scaling: Scaling,
}

pub fn linearized_inner_loop(pid: &PIDParams, scaling: &Scaling) -> Result<StateSpaceModel> {
    pid.validate()?;
    scaling.validate()?;
    let g = scaling.storage / scaling.flow;
    let [kp, ki, kd] = pid.theta.map(|x| x * g);
    let k = kp + ki + kd;
    let ts = scaling.step();
    Ok(StateSpaceModel {
        a: [
            [1.0 + ts * k, -ts * ki, ts * kd],
            [-1.0, 1.0, 0.0],
            [-1.0, 0.0, 0.0],
        ],
        b: [[-ts * k, ts], [1.0, 0.0], [1.0, 0.0]],
        c: [[1.0, 0.0, 0.0], [-k, ki, -kd]],
        d: [[0.0, 0.0], [k, 0.0]],
        scaling: *scaling,
    })
}

impl StateSpaceModel {
    pub fn scale_state(&self, x: [f64; 3]) -> [f64; 3] {
        x.map(|v| v / self.scaling.storage)
    }

    /// One step in scaled units: returns the outputs and advances `x`.
    #[inline]
    pub fn step_scaled(&self, x: &mut [f64; 3], w: [f64; 2]) -> [f64; 2] {
        let y = [
            self.c[0][0] * x[0] + self.c[0][1] * x[1] + self.c[0][2] * x[2] + self.d[0][0] * w[0] + self.d[0][1] * w[1],
            self.c[1][0] * x[0] + self.c[1][1] * x[1] + self.c[1][2] * x[2] + self.d[1][0] * w[0] + self.d[1][1] * w[1],
        ];
        let next: [f64; 3] = std::array::from_fn(|i| {
            self.a[i][0] * x[0] + self.a[i][1] * x[1] + self.a[i][2] * x[2] + self.b[i][0] * w[0] + self.b[i][1] * w[1]
        });
        *x = next;
        y
    }

    /// Rollout from a physical state over physical `(s_ref, q)` inputs;
    /// returns physical `(s, u)` per step.
    pub fn predict(&self, x0: [f64; 3], inputs: &[(f64, f64)]) -> Vec<(f64, f64)> {
        let sc = &self.scaling;
        let mut x = self.scale_state(x0);
        inputs
            .iter()
            .map(|&(r, q)| {
                let y = self.step_scaled(&mut x, [r / sc.storage, q / sc.flow]);
                (y[0] * sc.storage, y[1] * sc.flow)
            })
            .collect()
    }

    /// Scaled state after the whole rollout.
    pub fn final_state(&self, x0: [f64; 3], inputs: &[(f64, f64)]) -> [f64; 3] {
        let sc = &self.scaling;
        let mut x = self.scale_state(x0);
        for &(r, q) in inputs {
            self.step_scaled(&mut x, [r / sc.storage, q / sc.flow]);
        }
        x
    }
}

/// Physical-unit rollout: the `predict` operation.
pub fn predict(model: &StateSpaceModel, x0: [f64; 3], inputs: &[(f64, f64)]) -> Result<Vec<(f64, f64)>> {
    if inputs.is_empty() {
        return Err(Error::InvalidArgument("prediction horizon must be >= 1".into()));
    }
    Ok(model.predict(x0, inputs))
}

/// Transfer functions of the unsaturated loop in scaled units, for checking
/// the realization: `(s/s_ref, s/q, u/s_ref, u/q)`.
pub fn loop_transfer_functions(pid: &PIDParams, scaling: &Scaling) -> [LinearSISOModel; 4] {
    let g = scaling.storage / scaling.flow;
    let scaled = PIDParams {
        theta: pid.theta.map(|x| x * g),
    };
    let cn = scaled.transfer_function().num; // C(z) (1 - z^-1)
    let ts = scaling.step();
    // den = (1 - z^-1)^2 - ts z^-1 Cn
    let den = vec![1.0, -2.0 - ts * cn[0], 1.0 - ts * cn[1], -ts * cn[2]];
    let delayed_cn: Vec<f64> = std::iter::once(0.0).chain(cn.iter().map(|c| -ts * c)).collect();
    let cn_diff = vec![cn[0], cn[1] - cn[0], cn[2] - cn[1], -cn[2]];
    [
        LinearSISOModel { num: delayed_cn.clone(), den: den.clone() },
        LinearSISOModel { num: vec![0.0, ts, -ts], den: den.clone() },
        LinearSISOModel { num: cn_diff, den: den.clone() },
        LinearSISOModel { num: delayed_cn, den },
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reservoir::tests::wide_spec;
    use crate::routing::RoutingModel;
    use crate::vrft::filter;

    fn routing() -> RoutingModel {
        RoutingModel {
            lag: 1,
            attenuation: 0.2,
            rating_scale: 10.0,
            rating_exponent: 0.5,
        }
    }

    fn unit_scaling() -> Scaling {
        Scaling { storage: 1.0, flow: 1.0, seconds_per_step: 1.0 }
    }

    #[test]
    fn zero_controller_integrates_inflow() {
        let m = linearized_inner_loop(&PIDParams::new(0.0, 0.0, 0.0), &unit_scaling()).unwrap();
        let out = m.predict([5.0, 0.0, 0.0], &[(100.0, 2.0); 4]);
        for (k, (s, u)) in out.iter().enumerate() {
            assert_eq!(*u, 0.0);
            assert_eq!(*s, 5.0 + 2.0 * k as f64);
        }
        let zero = m.predict([0.0; 3], &[(0.0, 0.0); 5]);
        assert!(zero.iter().all(|&(s, u)| s == 0.0 && u == 0.0));
    }

    #[test]
    fn horizon_one_is_one_matrix_application() {
        let sc = Scaling { storage: 1e10, flow: 5000.0, seconds_per_step: 86_400.0 };
        let m = linearized_inner_loop(&PIDParams::new(-2e-6, -3e-7, -1e-6), &sc).unwrap();
        let x0 = [5e9, 1e8, -3e7];
        let (s, u) = m.predict(x0, &[(6e9, 1200.0)])[0];
        let xs = m.scale_state(x0);
        let w = [6e9 / sc.storage, 1200.0 / sc.flow];
        let y_u = (0..3).map(|j| m.c[1][j] * xs[j]).sum::<f64>() + m.d[1][0] * w[0];
        assert_eq!(s, xs[0] * sc.storage);
        assert!((u - y_u * sc.flow).abs() <= 1e-12 * u.abs());
        assert!(predict(&m, x0, &[]).is_err());
    }

    #[test]
    fn realization_matches_transfer_functions() {
        let sc = Scaling { storage: 9.9e9, flow: 6000.0, seconds_per_step: 86_400.0 };
        let pid = PIDParams::new(-1.5e-6, -2e-7, -4e-7);
        let m = linearized_inner_loop(&pid, &sc).unwrap();
        let tfs = loop_transfer_functions(&pid, &sc);
        for input in 0..2 {
            let mut x = [0.0; 3];
            let mut outs = Vec::new();
            for t in 0..100 {
                let mut w = [0.0; 2];
                if t == 0 {
                    w[input] = 1.0;
                }
                outs.push(m.step_scaled(&mut x, w));
            }
            let mut imp = vec![0.0; 100];
            imp[0] = 1.0;
            for output in 0..2 {
                let reference = filter(&tfs[output * 2 + input], &imp).unwrap();
                for t in 0..100 {
                    assert!((outs[t][output] - reference[t]).abs() <= 1e-10, "in {input} out {output} t {t}");
                }
            }
        }
    }

    #[test]
    fn recovered_proportional_gain_reproduces_reference_model() {
        // Pure integrator with unit step: kp = -0.2 makes s follow M exactly.
        let m = linearized_inner_loop(&PIDParams::new(-0.2, 0.0, 0.0), &unit_scaling()).unwrap();
        let out = m.predict([0.0; 3], &[(1.0, 0.0); 60]);
        let s: Vec<f64> = out.iter().map(|p| p.0).collect();
        let expected = filter(&LinearSISOModel::first_order(0.8), &[1.0; 60]).unwrap();
        for t in 0..60 {
            assert!((s[t] - expected[t]).abs() <= 1e-12);
        }
    }

    #[test]
    fn integral_action_removes_offset() {
        let sc = Scaling { storage: 1e10, flow: 1e4, seconds_per_step: 86_400.0 };
        let m = linearized_inner_loop(&PIDParams::new(-2e-6, -2e-7, 0.0), &sc).unwrap();
        let out = m.predict([5e9, 0.0, 0.0], &vec![(6e9, 800.0); 3000]);
        let (s, u) = *out.last().unwrap();
        assert!((s - 6e9).abs() < 1e-3 * 6e9 * 1e-6, "{s}");
        assert!((u - 800.0).abs() < 1e-6);
    }

    #[test]
    fn setpoint_at_rest_stays_put() {
        let mut spec = wide_spec();
        spec.release_table = crate::reservoir::ReleaseTable::new(vec![crate::reservoir::ReleaseNode {
            s: 5e9,
            q: 0.0,
            r_min: 300.0,
            r_max: 5000.0,
        }])
        .unwrap();
        let trace = HydrologyTrace::new(0, vec![300.0; 50], vec![100.0; 50], vec![100.0; 50]).unwrap();
        let pid = PIDParams::new(-1e-6, -1e-7, -1e-7);
        let traj = simulate_inner_loop(&spec, &routing(), &pid, &[5e9; 50], &trace, 5e9, &SimulationOptions::default()).unwrap();
        assert!(traj.records.iter().all(|r| r.s == 5e9 && r.r == 300.0));
        assert_eq!(traj.final_storage, 5e9);
    }

    #[test]
    fn closed_release_accumulates_inflow() {
        let mut spec = wide_spec();
        spec.release_table = crate::reservoir::ReleaseTable::new(vec![crate::reservoir::ReleaseNode {
            s: 5e9,
            q: 0.0,
            r_min: 0.0,
            r_max: 0.0,
        }])
        .unwrap();
        let trace = HydrologyTrace::new(0, vec![400.0; 20], vec![0.0; 20], vec![0.0; 20]).unwrap();
        let pid = PIDParams::new(-1e-6, -1e-7, -1e-7);
        let traj = simulate_inner_loop(&spec, &routing(), &pid, &[2e9; 20], &trace, 5e9, &SimulationOptions::default()).unwrap();
        for (k, rec) in traj.records.iter().enumerate() {
            assert_eq!(rec.r, 0.0);
            assert_eq!(rec.s, 5e9 + 400.0 * 86_400.0 * k as f64);
        }
    }

    #[test]
    fn unsaturated_simulation_matches_prediction() {
        let spec = wide_spec();
        let n = 40;
        let q: Vec<f64> = (0..n).map(|t| 2000.0 + 300.0 * (t as f64 / 5.0).sin()).collect();
        let trace = HydrologyTrace::new(0, q.clone(), vec![500.0; n], vec![500.0; n]).unwrap();
        let s_ref: Vec<f64> = (0..n).map(|t| 5e9 + 2e7 * (t as f64 / 7.0).cos()).collect();
        let pid = PIDParams::new(-2e-6, -1e-7, -3e-7);
        let state = PidState::bumpless(&pid, 2000.0);
        let opts = SimulationOptions { anti_windup: true, initial_state: state };
        let traj = simulate_inner_loop(&spec, &routing(), &pid, &s_ref, &trace, 5e9, &opts).unwrap();
        assert!(traj.records.iter().all(|r| r.r == r.u), "saturation became active");
        let sc = Scaling { storage: spec.s_max, flow: 3000.0, seconds_per_step: 86_400.0 };
        let m = linearized_inner_loop(&pid, &sc).unwrap();
        let inputs: Vec<(f64, f64)> = s_ref.iter().zip(&q).map(|(r, q)| (*r, *q)).collect();
        let pred = m.predict([5e9, state.integral, state.prev_error], &inputs);
        for (rec, (s, u)) in traj.records.iter().zip(&pred) {
            assert!((rec.s - s).abs() <= 1e-9 * s.abs());
            assert!((rec.u - u).abs() <= 1e-9 * u.abs().max(1.0));
        }
    }

    #[test]
    fn percentile_interpolates() {
        assert_eq!(percentile(&[3.0, 1.0, 2.0], 0.5), 2.0);
        assert_eq!(percentile(&[0.0, 10.0], 0.99), 9.9);
    }
}
