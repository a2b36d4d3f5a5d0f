//! Reservoir mass balance, release saturation and characteristic curves.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Gravitational acceleration, m/s2.
pub const GRAVITY: f64 = 9.81;
/// Water density, kg/m3.
pub const WATER_DENSITY: f64 = 1000.0;

/// Monotone-abscissa piecewise-linear curve with flat extrapolation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<[f64; 2]>", into = "Vec<[f64; 2]>")]
pub struct PiecewiseLinear {
    x: Vec<f64>,
    y: Vec<f64>,
}

impl PiecewiseLinear {
    pub fn new(points: Vec<[f64; 2]>) -> Result<Self> {
        Self::try_from(points).map_err(|m| Error::InvalidArgument(m))
    }

    pub fn eval(&self, at: f64) -> f64 {
        let n = self.x.len();
        if at <= self.x[0] {
            return self.y[0];
        }
        if at >= self.x[n - 1] {
            return self.y[n - 1];
        }
        let i = self.x.partition_point(|x| *x <= at) - 1;
        let w = (at - self.x[i]) / (self.x[i + 1] - self.x[i]);
        self.y[i] + w * (self.y[i + 1] - self.y[i])
    }

    pub fn is_strictly_increasing_on(&self, lo: f64, hi: f64) -> bool {
        // Breakpoints inside [lo, hi] plus the interval ends.
        let mut xs: Vec<f64> = self.x.iter().cloned().filter(|x| *x > lo && *x < hi).collect();
        xs.insert(0, lo);
        xs.push(hi);
        xs.windows(2).all(|w| self.eval(w[1]) > self.eval(w[0]))
    }

    pub fn is_nondecreasing(&self) -> bool {
        self.y.windows(2).all(|w| w[1] >= w[0])
    }
}

impl TryFrom<Vec<[f64; 2]>> for PiecewiseLinear {
    type Error = String;

    fn try_from(points: Vec<[f64; 2]>) -> std::result::Result<Self, String> {
        if points.is_empty() {
            return Err("curve needs at least one point".into());
        }
        if points.iter().any(|p| !(p[0].is_finite() && p[1].is_finite())) {
            return Err("curve points must be finite".into());
        }
        if points.windows(2).any(|w| w[1][0] <= w[0][0]) {
            return Err("curve abscissae must be strictly increasing".into());
        }
        Ok(PiecewiseLinear {
            x: points.iter().map(|p| p[0]).collect(),
            y: points.iter().map(|p| p[1]).collect(),
        })
    }
}

impl From<PiecewiseLinear> for Vec<[f64; 2]> {
    fn from(c: PiecewiseLinear) -> Self {
        c.x.into_iter().zip(c.y).map(|(x, y)| [x, y]).collect()
    }
}

/// Turbine efficiency: a constant, or a table over hydraulic head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Efficiency {
    Constant(f64),
    HeadTable(PiecewiseLinear),
}

impl Efficiency {
    pub fn at(&self, head: f64) -> f64 {
        match self {
            Efficiency::Constant(eta) => *eta,
            Efficiency::HeadTable(curve) => curve.eval(head),
        }
    }
}

/// One node of the release-bound table.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReleaseNode {
    pub s: f64,
    pub q: f64,
    pub r_min: f64,
    pub r_max: f64,
}

/// Release bounds known only at scattered (storage, inflow) nodes.
///
/// Lookups average the two nearest nodes under a range-normalized Euclidean
/// metric, weighting each by inverse distance; an exact hit returns that node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<ReleaseNode>", into = "Vec<ReleaseNode>")]
pub struct ReleaseTable {
    nodes: Vec<ReleaseNode>,
    /// Node indices sorted by storage (stable, so ties keep index order).
    by_storage: Vec<usize>,
    s_lo: f64,
    s_hi: f64,
    q_lo: f64,
    q_hi: f64,
    s_scale: f64,
    q_scale: f64,
}

impl ReleaseTable {
    pub fn new(nodes: Vec<ReleaseNode>) -> Result<Self> {
        Self::try_from(nodes).map_err(Error::InvalidArgument)
    }

    pub fn nodes(&self) -> &[ReleaseNode] {
        &self.nodes
    }

    /// `(r_min, r_max)` at `(s, q)`; the query is first clamped into the
    /// bounding box of the nodes.
    pub fn bounds(&self, s: f64, q: f64) -> (f64, f64) {
        let s = s.clamp(self.s_lo, self.s_hi);
        let q = q.clamp(self.q_lo, self.q_hi);
        let ns = s * self.s_scale;
        let nq = q * self.q_scale;

        // Two best (distance^2, index) pairs, lexicographic order.
        let mut best = [(f64::INFINITY, usize::MAX); 2];
        let consider = |best: &mut [(f64, usize); 2], idx: usize, d2: f64| {
            let cand = (d2, idx);
            if lex_less(cand, best[0]) {
                best[1] = best[0];
                best[0] = cand;
            } else if lex_less(cand, best[1]) {
                best[1] = cand;
            }
        };
        let order = &self.by_storage;
        let start = order.partition_point(|&i| self.nodes[i].s < s);
        let dist2 = |i: usize| {
            let n = &self.nodes[i];
            let ds = n.s * self.s_scale - ns;
            let dq = n.q * self.q_scale - nq;
            (ds * ds + dq * dq, ds * ds)
        };
        // Expand outward in storage; stop once the storage gap alone exceeds
        // the current second-best distance.
        let mut up = start;
        let mut down = start;
        loop {
            let mut progressed = false;
            if up < order.len() {
                let (d2, ds2) = dist2(order[up]);
                if ds2 <= best[1].0 {
                    consider(&mut best, order[up], d2);
                    up += 1;
                    progressed = true;
                } else {
                    up = order.len();
                }
            }
            if down > 0 {
                let (d2, ds2) = dist2(order[down - 1]);
                if ds2 <= best[1].0 {
                    consider(&mut best, order[down - 1], d2);
                    down -= 1;
                    progressed = true;
                } else {
                    down = 0;
                }
            }
            if !progressed {
                break;
            }
        }

        let a = &self.nodes[best[0].1];
        if best[0].0 == 0.0 || best[1].1 == usize::MAX {
            return (a.r_min, a.r_max);
        }
        let b = &self.nodes[best[1].1];
        let wa = 1.0 / best[0].0.sqrt();
        let wb = 1.0 / best[1].0.sqrt();
        let r_min = (wa * a.r_min + wb * b.r_min) / (wa + wb);
        let r_max = (wa * a.r_max + wb * b.r_max) / (wa + wb);
        (r_min.max(0.0), r_max.max(r_min.max(0.0)))
    }
}

fn lex_less(a: (f64, usize), b: (f64, usize)) -> bool {
    a.0 < b.0 || (a.0 == b.0 && a.1 < b.1)
}

impl TryFrom<Vec<ReleaseNode>> for ReleaseTable {
    type Error = String;

    fn try_from(nodes: Vec<ReleaseNode>) -> std::result::Result<Self, String> {
        if nodes.is_empty() {
            return Err("release table is empty".into());
        }
        for (i, n) in nodes.iter().enumerate() {
            let finite = [n.s, n.q, n.r_min, n.r_max].iter().all(|v| v.is_finite());
            if !finite || n.r_min < 0.0 || n.r_min > n.r_max {
                return Err(format!("release node {i} must satisfy 0 <= r_min <= r_max"));
            }
        }
        let fold = |f: fn(&ReleaseNode) -> f64| {
            nodes.iter().map(f).fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
                (lo.min(v), hi.max(v))
            })
        };
        let (s_lo, s_hi) = fold(|n| n.s);
        let (q_lo, q_hi) = fold(|n| n.q);
        let scale = |lo: f64, hi: f64| if hi > lo { 1.0 / (hi - lo) } else { 1.0 };
        let mut by_storage: Vec<usize> = (0..nodes.len()).collect();
        by_storage.sort_by(|a, b| nodes[*a].s.total_cmp(&nodes[*b].s));
        Ok(ReleaseTable {
            s_scale: scale(s_lo, s_hi),
            q_scale: scale(q_lo, q_hi),
            nodes,
            by_storage,
            s_lo,
            s_hi,
            q_lo,
            q_hi,
        })
    }
}

impl From<ReleaseTable> for Vec<ReleaseNode> {
    fn from(t: ReleaseTable) -> Self {
        t.nodes
    }
}

fn default_seconds_per_step() -> f64 {
    86_400.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReservoirSpec {
    /// Storage bounds, m3.
    pub s_min: f64,
    pub s_max: f64,
    pub release_table: ReleaseTable,
    /// Storage (m3) to reservoir level (m).
    pub level_of_storage: PiecewiseLinear,
    /// Release (m3/s) to tailwater level (m).
    pub tailwater_of_release: PiecewiseLinear,
    /// Maximum turbined flow, m3/s.
    pub q_turb_max: f64,
    pub eta: Efficiency,
    #[serde(default = "default_seconds_per_step")]
    pub seconds_per_step: f64,
    /// Storage at the start of every simulation, m3.
    pub initial_storage: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReservoirState {
    pub t: usize,
    /// Storage, m3.
    pub s: f64,
}

/// Result of one mass-balance step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transition {
    pub next: ReservoirState,
    pub release: f64,
}

impl Transition {
    /// Negative storage means the release tables failed to keep the
    /// reservoir feasible; it is reported, never clamped away.
    pub fn is_infeasible(&self) -> bool {
        self.next.s < 0.0
    }
}

impl ReservoirSpec {
    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, path: &str, msg: &str| {
            if ok {
                Ok(())
            } else {
                Err(Error::config(format!("reservoir.{path}"), msg))
            }
        };
        check(
            self.s_min.is_finite() && self.s_max.is_finite() && self.s_min < self.s_max,
            "s_min",
            "must satisfy s_min < s_max",
        )?;
        check(self.q_turb_max > 0.0, "q_turb_max", "must be > 0")?;
        check(self.seconds_per_step > 0.0, "seconds_per_step", "must be > 0")?;
        check(
            self.level_of_storage.is_strictly_increasing_on(self.s_min, self.s_max),
            "level_of_storage",
            "must be strictly increasing on [s_min, s_max]",
        )?;
        check(
            self.tailwater_of_release.is_nondecreasing(),
            "tailwater_of_release",
            "must be monotone nondecreasing",
        )?;
        let eta_ok = match &self.eta {
            Efficiency::Constant(e) => *e > 0.0 && *e <= 1.0,
            Efficiency::HeadTable(c) => {
                let pts: Vec<[f64; 2]> = c.clone().into();
                pts.iter().all(|p| p[1] > 0.0 && p[1] <= 1.0)
            }
        };
        check(eta_ok, "eta", "efficiency must lie in (0, 1]")?;
        check(
            self.initial_storage >= 0.0 && self.initial_storage.is_finite(),
            "initial_storage",
            "must be finite and >= 0",
        )
    }

    pub fn release_bounds(&self, s: f64, q_d: f64) -> (f64, f64) {
        self.release_table.bounds(s, q_d)
    }

    /// Actual release `f(s, u, q)`: the decision saturated to the feasible range.
    pub fn apply_release(&self, s: f64, u: f64, q_d: f64) -> f64 {
        let (lo, hi) = self.release_bounds(s, q_d);
        u.clamp(lo, hi)
    }

    pub fn step(&self, state: ReservoirState, u: f64, q_d: f64) -> Transition {
        let release = self.apply_release(state.s, u, q_d);
        Transition {
            next: ReservoirState {
                t: state.t + 1,
                s: self.mass_balance(state.s, q_d, release),
            },
            release,
        }
    }

    #[inline]
    pub fn mass_balance(&self, s: f64, q_d: f64, release: f64) -> f64 {
        s + (q_d - release) * self.seconds_per_step
    }

    /// Net head (m): reservoir level minus tailwater, floored at zero.
    pub fn hydraulic_head(&self, s: f64, r: f64) -> f64 {
        (self.level_of_storage.eval(s) - self.tailwater_of_release.eval(r)).max(0.0)
    }

    /// Daily energy (kWh/day) for a given head and release.
    pub fn energy_production(&self, head: f64, r: f64) -> f64 {
        let q_turb = r.clamp(0.0, self.q_turb_max);
        let megawatts = self.eta.at(head) * GRAVITY * WATER_DENSITY * head * q_turb * 1e-6;
        megawatts * 24.0 * 1000.0
    }
}

/// One simulated day.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: usize,
    /// Storage at the start of the step.
    pub s: f64,
    pub u: f64,
    pub r: f64,
    pub q_d: f64,
    pub h_hanoi: f64,
    pub energy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub start_day: usize,
    pub seconds_per_step: f64,
    pub records: Vec<StepRecord>,
    pub final_storage: f64,
    /// Steps that ended with negative storage.
    pub negative_storage_events: usize,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Storage after step `k`.
    pub fn next_storage(&self, k: usize) -> f64 {
        self.records.get(k + 1).map_or(self.final_storage, |r| r.s)
    }

    /// Largest |s_{t+1} - s_t - (q - r) dt| over the trajectory.
    pub fn max_mass_balance_residual(&self) -> f64 {
        (0..self.len())
            .map(|k| {
                let rec = &self.records[k];
                (self.next_storage(k) - rec.s - (rec.q_d - rec.r) * self.seconds_per_step).abs()
            })
            .fold(0.0, f64::max)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["t", "s", "u", "r", "q_d", "h_hanoi", "energy"])?;
        for rec in &self.records {
            w.write_record([
                rec.t.to_string(),
                rec.s.to_string(),
                rec.u.to_string(),
                rec.r.to_string(),
                rec.q_d.to_string(),
                rec.h_hanoi.to_string(),
                rec.energy.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads the trajectory CSV; the final storage is rebuilt from the last
    /// record's mass balance.
    pub fn read_csv<R: Read>(reader: R, start_day: usize, seconds_per_step: f64) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(reader);
        let mut records = Vec::new();
        for (i, row) in rdr.deserialize::<StepRecord>().enumerate() {
            records.push(row.map_err(|e| Error::Parse {
                line: i + 2,
                message: e.to_string(),
            })?);
        }
        let last = records.last().ok_or_else(|| Error::Parse {
            line: 2,
            message: "trajectory has no rows".into(),
        })?;
        let final_storage = last.s + (last.q_d - last.r) * seconds_per_step;
        Ok(Trajectory {
            start_day,
            seconds_per_step,
            negative_storage_events: records.iter().filter(|r| r.s < 0.0).count(),
            records,
            final_storage,
        })
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    /// Small spec with a single wide release node and linear curves.
    pub(crate) fn wide_spec() -> ReservoirSpec {
        ReservoirSpec {
            s_min: 1e9,
            s_max: 1e10,
            release_table: ReleaseTable::new(vec![ReleaseNode {
                s: 5e9,
                q: 1000.0,
                r_min: 0.0,
                r_max: 1e6,
            }])
            .unwrap(),
            level_of_storage: PiecewiseLinear::new(vec![[0.0, 20.0], [1e10, 120.0]]).unwrap(),
            tailwater_of_release: PiecewiseLinear::new(vec![[0.0, 10.0], [1e4, 20.0]]).unwrap(),
            q_turb_max: 2400.0,
            eta: Efficiency::Constant(0.9),
            seconds_per_step: 86_400.0,
            initial_storage: 5e9,
        }
    }

    fn two_node_table() -> ReleaseTable {
        ReleaseTable::new(vec![
            ReleaseNode { s: 4e9, q: 1000.0, r_min: 100.0, r_max: 3000.0 },
            ReleaseNode { s: 6e9, q: 1000.0, r_min: 300.0, r_max: 5000.0 },
        ])
        .unwrap()
    }

    #[test]
    fn on_grid_query_returns_node() {
        let t = two_node_table();
        assert_eq!(t.bounds(4e9, 1000.0), (100.0, 3000.0));
        assert_eq!(t.bounds(6e9, 1000.0), (300.0, 5000.0));
    }

    #[test]
    fn equidistant_query_averages() {
        let (lo, hi) = two_node_table().bounds(5e9, 1000.0);
        assert!((lo - 200.0).abs() < 1e-9);
        assert!((hi - 4000.0).abs() < 1e-9);
    }

    #[test]
    fn far_query_clamps_to_edge() {
        let t = two_node_table();
        assert_eq!(t.bounds(0.0, 1000.0), (100.0, 3000.0));
        assert_eq!(t.bounds(1e12, 1e9), (300.0, 5000.0));
    }

    #[test]
    fn two_nn_matches_brute_force() {
        // Irregular 2-D node cloud.
        let mut nodes = Vec::new();
        let mut k = 0u64;
        for i in 0..9 {
            for j in 0..7 {
                k = k.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                let jitter = (k >> 40) as f64 / (1u64 << 24) as f64;
                let s = 3e9 + i as f64 * 1e9 + jitter * 3e8;
                let q = [0.0, 500.0, 1500.0, 3000.0, 6000.0, 12000.0, 25000.0][j];
                nodes.push(ReleaseNode { s, q, r_min: (i * 7 + j) as f64, r_max: 100.0 + (i * j) as f64 });
            }
        }
        let table = ReleaseTable::new(nodes.clone()).unwrap();
        let (s_lo, s_hi) = (table.s_lo, table.s_hi);
        let (q_lo, q_hi) = (table.q_lo, table.q_hi);
        for a in 0..40 {
            for b in 0..40 {
                let s = 2e9 + a as f64 * 3e8;
                let q = b as f64 * 800.0;
                let (cs, cq) = (s.clamp(s_lo, s_hi), q.clamp(q_lo, q_hi));
                let mut d: Vec<(f64, usize)> = nodes
                    .iter()
                    .enumerate()
                    .map(|(i, n)| {
                        let ds = (n.s - cs) / (s_hi - s_lo);
                        let dq = (n.q - cq) / (q_hi - q_lo);
                        (ds * ds + dq * dq, i)
                    })
                    .collect();
                d.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)));
                let expected = if d[0].0 == 0.0 {
                    (nodes[d[0].1].r_min, nodes[d[0].1].r_max)
                } else {
                    let (wa, wb) = (1.0 / d[0].0.sqrt(), 1.0 / d[1].0.sqrt());
                    let na = &nodes[d[0].1];
                    let nb = &nodes[d[1].1];
                    (
                        (wa * na.r_min + wb * nb.r_min) / (wa + wb),
                        (wa * na.r_max + wb * nb.r_max) / (wa + wb),
                    )
                };
                let got = table.bounds(s, q);
                assert!((got.0 - expected.0).abs() < 1e-9 && (got.1 - expected.1).abs() < 1e-9, "{s} {q}");
            }
        }
    }

    #[test]
    fn empty_table_is_rejected() {
        assert!(ReleaseTable::new(vec![]).is_err());
    }

    #[test]
    fn release_saturation() {
        let mut spec = wide_spec();
        spec.release_table = two_node_table();
        assert_eq!(spec.apply_release(4e9, 1500.0, 1000.0), 1500.0);
        assert_eq!(spec.apply_release(4e9, 1e12, 1000.0), 3000.0);
        assert_eq!(spec.apply_release(4e9, 0.0, 1000.0), 100.0);
    }

    #[test]
    fn step_mass_balance() {
        let spec = wide_spec();
        let st = ReservoirState { t: 0, s: 5e9 };
        let tr = spec.step(st, 1000.0, 2000.0);
        assert_eq!(tr.release, 1000.0);
        assert_eq!(tr.next.s, 5.0864e9);
        assert_eq!(tr.next.t, 1);
        assert_eq!(spec.step(st, 700.0, 700.0).next.s, 5e9);
        assert_eq!(spec.step(st, 0.0, 0.0).next.s, 5e9);
    }

    #[test]
    fn negative_storage_is_reported() {
        let spec = wide_spec();
        let tr = spec.step(ReservoirState { t: 0, s: 1e6 }, 1000.0, 0.0);
        assert!(tr.is_infeasible());
        assert!(tr.next.s < 0.0);
    }

    #[test]
    fn head_and_floor() {
        let mut spec = wide_spec();
        spec.level_of_storage = PiecewiseLinear::new(vec![[0.0, 100.0], [1e10, 100.0 + 1e-9]]).unwrap();
        spec.tailwater_of_release = PiecewiseLinear::new(vec![[0.0, 20.0], [1e4, 20.0]]).unwrap();
        assert!((spec.hydraulic_head(5e9, 100.0) - 80.0).abs() < 1e-6);
        spec.tailwater_of_release = PiecewiseLinear::new(vec![[0.0, 150.0]]).unwrap();
        assert_eq!(spec.hydraulic_head(5e9, 100.0), 0.0);
    }

    #[test]
    fn energy_values() {
        let spec = wide_spec();
        assert_eq!(spec.energy_production(0.0, 2000.0), 0.0);
        let expected = 0.9 * 9.81 * 1000.0 * 80.0 * 2000.0 * 1e-6 * 1000.0 * 24.0;
        assert!((spec.energy_production(80.0, 2000.0) - expected).abs() < 1e-6);
        assert!((expected - 1412.64 * 24_000.0).abs() < 1e-6);
        assert_eq!(spec.energy_production(80.0, 5000.0), spec.energy_production(80.0, 2400.0));
    }

    proptest::proptest! {
        #[test]
        fn head_monotone_in_storage(s1 in 0.0f64..1e10, ds in 0.0f64..5e9, r in 0.0f64..2e4) {
            let spec = wide_spec();
            proptest::prop_assert!(spec.hydraulic_head(s1 + ds, r) >= spec.hydraulic_head(s1, r));
        }

        #[test]
        fn step_monotone_in_inflow(s in 1e9f64..9e9, u in 0.0f64..5000.0, q in 0.0f64..8000.0, dq in 0.0f64..4000.0) {
            let mut spec = wide_spec();
            spec.release_table = two_node_table();
            let st = ReservoirState { t: 0, s };
            let a = spec.step(st, u, q);
            let b = spec.step(st, u, q + dq);
            proptest::prop_assert!(b.next.s >= a.next.s);
            let (lo, hi) = spec.release_bounds(s, q);
            proptest::prop_assert!(a.release >= lo && a.release <= hi);
        }

        #[test]
        fn energy_monotone(h in 0.0f64..150.0, dh in 0.0f64..20.0, r in 0.0f64..3000.0, dr in 0.0f64..1000.0) {
            let spec = wide_spec();
            let e = spec.energy_production(h, r);
            proptest::prop_assert!(e >= 0.0);
            proptest::prop_assert!(spec.energy_production(h + dh, r) >= e);
            proptest::prop_assert!(spec.energy_production(h, r + dr) >= e);
        }
    }
}
