//! Hydropower and flood objectives, their scalarization and Pareto filtering.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::reservoir::Trajectory;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectivesReport {
    /// Daily average energy production, kWh/day.
    #[serde(rename = "J_H")]
    pub j_h: f64,
    /// Daily average squared excess level over the flood threshold, cm2/day.
    #[serde(rename = "J_F")]
    pub j_f: f64,
    pub horizon: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectivesConfig {
    /// Flood threshold in Hanoi, cm.
    pub h_bar: f64,
    /// Factor converting kWh/day into the units traded off against cm2 in
    /// the scalarized cost (1e-6 gives GWh/day).
    pub hydropower_cost_scale: f64,
}

impl ObjectivesConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.h_bar.is_finite() && self.h_bar >= 0.0) {
            return Err(Error::config("objectives.h_bar", "must be finite and >= 0"));
        }
        if !(self.hydropower_cost_scale.is_finite() && self.hydropower_cost_scale > 0.0) {
            return Err(Error::config("objectives.hydropower_cost_scale", "must be > 0"));
        }
        Ok(())
    }

    pub fn stage_cost(&self, alpha: f64) -> Result<StageCost> {
        check_alpha(alpha)?;
        Ok(StageCost {
            alpha,
            h_bar: self.h_bar,
            hydropower_scale: self.hydropower_cost_scale,
        })
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if (0.0..=1.0).contains(&alpha) {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("alpha = {alpha} must lie in [0, 1]")))
    }
}

/// Scalarized immediate cost `-alpha * scale * energy + (1 - alpha) * excess^2`.
/// Averaging it over a trajectory reproduces [`scalarize`] of the scaled
/// objectives.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageCost {
    pub alpha: f64,
    pub h_bar: f64,
    pub hydropower_scale: f64,
}

impl StageCost {
    #[inline]
    pub fn flood_term(&self, level: f64) -> f64 {
        let excess = (level - self.h_bar).max(0.0);
        excess * excess
    }

    #[inline]
    pub fn cost(&self, energy: f64, level: f64) -> f64 {
        -self.alpha * self.hydropower_scale * energy + (1.0 - self.alpha) * self.flood_term(level)
    }

    /// Scalarized cost of a whole report, in the same units as [`Self::cost`].
    pub fn of_report(&self, report: &ObjectivesReport) -> f64 {
        -self.alpha * self.hydropower_scale * report.j_h + (1.0 - self.alpha) * report.j_f
    }
}

pub fn hydropower_objective(traj: &Trajectory) -> Result<f64> {
    if traj.is_empty() {
        return Err(Error::InvalidArgument("empty trajectory".into()));
    }
    Ok(traj.records.iter().map(|r| r.energy).sum::<f64>() / traj.len() as f64)
}

pub fn flood_objective(traj: &Trajectory, h_bar: f64) -> Result<f64> {
    if traj.is_empty() {
        return Err(Error::InvalidArgument("empty trajectory".into()));
    }
    let total: f64 = traj
        .records
        .iter()
        .map(|r| {
            let excess = (r.h_hanoi - h_bar).max(0.0);
            excess * excess
        })
        .sum();
    Ok(total / traj.len() as f64)
}

pub fn evaluate(traj: &Trajectory, h_bar: f64) -> Result<ObjectivesReport> {
    Ok(ObjectivesReport {
        j_h: hydropower_objective(traj)?,
        j_f: flood_objective(traj, h_bar)?,
        horizon: traj.len(),
    })
}

pub fn scalarize(j_h: f64, j_f: f64, alpha: f64) -> Result<f64> {
    check_alpha(alpha)?;
    Ok(-alpha * j_h + (1.0 - alpha) * j_f)
}

/// An objective pair with a caller-defined label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledPoint {
    pub label: String,
    #[serde(rename = "J_H")]
    pub j_h: f64,
    #[serde(rename = "J_F")]
    pub j_f: f64,
}

/// `a` dominates `b`: no worse in both objectives (J_H maximized, J_F
/// minimized) and strictly better in at least one.
pub fn dominates(a: (f64, f64), b: (f64, f64)) -> bool {
    a.0 >= b.0 && a.1 <= b.1 && (a.0 > b.0 || a.1 < b.1)
}

/// Non-dominated subset, in input order. Sorts by J_H descending and sweeps
/// the running minimum of J_F.
pub fn pareto_filter(points: &[LabeledPoint]) -> Vec<LabeledPoint> {
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.sort_by(|&a, &b| {
        points[b]
            .j_h
            .total_cmp(&points[a].j_h)
            .then(points[a].j_f.total_cmp(&points[b].j_f))
    });
    let mut keep = vec![false; points.len()];
    let mut best_f = f64::INFINITY;
    let mut i = 0;
    while i < order.len() {
        // Group of equal J_H.
        let mut j = i;
        while j < order.len() && points[order[j]].j_h == points[order[i]].j_h {
            j += 1;
        }
        let group_min = points[order[i]].j_f;
        if group_min < best_f {
            for &k in &order[i..j] {
                keep[k] = points[k].j_f == group_min;
            }
            best_f = group_min;
        }
        i = j;
    }
    points
        .iter()
        .zip(keep)
        .filter_map(|(p, k)| k.then(|| p.clone()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reservoir::StepRecord;

    fn traj(energy: &[f64], levels: &[f64]) -> Trajectory {
        Trajectory {
            start_day: 0,
            seconds_per_step: 86_400.0,
            records: energy
                .iter()
                .zip(levels)
                .enumerate()
                .map(|(t, (&e, &h))| StepRecord {
                    t,
                    s: 5e9,
                    u: 0.0,
                    r: 0.0,
                    q_d: 0.0,
                    h_hanoi: h,
                    energy: e,
                })
                .collect(),
            final_storage: 5e9,
            negative_storage_events: 0,
        }
    }

    fn pt(label: &str, j_h: f64, j_f: f64) -> LabeledPoint {
        LabeledPoint { label: label.into(), j_h, j_f }
    }

    #[test]
    fn hydropower_averages() {
        assert_eq!(hydropower_objective(&traj(&[7.0; 4], &[0.0; 4])).unwrap(), 7.0);
        assert_eq!(hydropower_objective(&traj(&[10.0, 20.0, 30.0], &[0.0; 3])).unwrap(), 20.0);
        assert_eq!(hydropower_objective(&traj(&[0.0; 3], &[0.0; 3])).unwrap(), 0.0);
        assert!(hydropower_objective(&traj(&[], &[])).is_err());
    }

    #[test]
    fn flood_objective_values() {
        assert_eq!(flood_objective(&traj(&[0.0; 3], &[100.0, 900.0, 949.9]), 950.0).unwrap(), 0.0);
        let mut levels = vec![500.0; 10];
        levels[3] = 960.0;
        assert_eq!(flood_objective(&traj(&[0.0; 10], &levels), 950.0).unwrap(), 10.0);
        assert_eq!(flood_objective(&traj(&[0.0], &[950.0]), 950.0).unwrap(), 0.0);
        assert!(flood_objective(&traj(&[], &[]), 950.0).is_err());
    }

    #[test]
    fn scalarize_endpoints_and_reference_value() {
        assert_eq!(scalarize(3.0, 5.0, 1.0).unwrap(), -3.0);
        assert_eq!(scalarize(3.0, 5.0, 0.0).unwrap(), 5.0);
        let v = scalarize(22.8049, 186.1333, 0.05).unwrap();
        assert!((v - 175.6864).abs() < 5e-5, "{v}");
        assert!(scalarize(1.0, 1.0, 1.5).is_err());
        assert!(scalarize(1.0, 1.0, -0.1).is_err());
    }

    #[test]
    fn stage_cost_average_matches_scalarize() {
        let cfg = ObjectivesConfig { h_bar: 950.0, hydropower_cost_scale: 1e-6 };
        let sc = cfg.stage_cost(0.3).unwrap();
        let t = traj(&[2e7, 3e7, 2.5e7], &[900.0, 980.0, 1000.0]);
        let avg: f64 = t.records.iter().map(|r| sc.cost(r.energy, r.h_hanoi)).sum::<f64>() / 3.0;
        let rep = evaluate(&t, 950.0).unwrap();
        let direct = scalarize(rep.j_h * 1e-6, rep.j_f, 0.3).unwrap();
        assert!((avg - direct).abs() < 1e-9);
    }

    #[test]
    fn flood_objective_ignores_sub_threshold_levels() {
        let a = traj(&[0.0; 3], &[100.0, 990.0, 300.0]);
        let b = traj(&[0.0; 3], &[900.0, 990.0, 10.0]);
        assert_eq!(flood_objective(&a, 950.0).unwrap(), flood_objective(&b, 950.0).unwrap());
    }

    #[test]
    fn pareto_ties_and_strict_dominance() {
        let tied = pareto_filter(&[pt("a", 10.0, 5.0), pt("b", 10.0, 5.0)]);
        assert_eq!(tied.len(), 2);
        let strict = pareto_filter(&[pt("a", 10.0, 5.0), pt("b", 9.0, 6.0)]);
        assert_eq!(strict, vec![pt("a", 10.0, 5.0)]);
    }

    #[test]
    fn scalarized_argmin_endpoints() {
        let pts = [(3.0, 10.0), (5.0, 40.0), (1.0, 2.0), (4.0, 20.0)];
        let argmin = |alpha: f64| {
            (0..pts.len())
                .min_by(|&a, &b| {
                    scalarize(pts[a].0, pts[a].1, alpha)
                        .unwrap()
                        .total_cmp(&scalarize(pts[b].0, pts[b].1, alpha).unwrap())
                })
                .unwrap()
        };
        assert_eq!(argmin(0.0), 2);
        assert_eq!(argmin(1.0), 1);
    }

    fn brute_force(points: &[LabeledPoint]) -> Vec<LabeledPoint> {
        points
            .iter()
            .filter(|p| !points.iter().any(|q| dominates((q.j_h, q.j_f), (p.j_h, p.j_f))))
            .cloned()
            .collect()
    }

    proptest::proptest! {
        #[test]
        fn pareto_matches_brute_force(raw in proptest::collection::vec((0u8..20, 0u8..20), 1..100)) {
            let points: Vec<LabeledPoint> = raw
                .iter()
                .enumerate()
                .map(|(i, (h, f))| pt(&i.to_string(), *h as f64, *f as f64))
                .collect();
            let fast = pareto_filter(&points);
            proptest::prop_assert_eq!(&fast, &brute_force(&points));
            for p in &points {
                if !fast.contains(p) {
                    proptest::prop_assert!(fast.iter().any(|q| dominates((q.j_h, q.j_f), (p.j_h, p.j_f))));
                }
            }
        }
    }

    #[test]
    fn pareto_random_cloud() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let points: Vec<LabeledPoint> = (0..100)
            .map(|i| pt(&i.to_string(), rng.random::<f64>(), rng.random::<f64>()))
            .collect();
        assert_eq!(pareto_filter(&points), brute_force(&points));
    }
}
