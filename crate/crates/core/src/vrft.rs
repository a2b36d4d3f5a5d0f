//! Discrete-time SISO transfer functions and Virtual Reference Feedback
//! Tuning of a PID controller.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hydrology::DAYS_PER_YEAR;
use crate::reservoir::Trajectory;

/// `num(z^-1) / den(z^-1)`, coefficients in ascending powers of `z^-1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinearSISOModel {
    pub num: Vec<f64>,
    pub den: Vec<f64>,
}

impl LinearSISOModel {
    pub fn new(num: Vec<f64>, den: Vec<f64>) -> Result<Self> {
        let m = LinearSISOModel { num, den };
        m.validate()?;
        Ok(m)
    }

    pub fn identity() -> Self {
        LinearSISOModel {
            num: vec![1.0],
            den: vec![1.0],
        }
    }

    /// First-order reference model `(1 - pole) z^-1 / (1 - pole z^-1)`, unit
    /// DC gain.
    pub fn first_order(pole: f64) -> Self {
        LinearSISOModel {
            num: vec![0.0, 1.0 - pole],
            den: vec![1.0, -pole],
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.den.first() {
            None => Err(Error::InvalidArgument("empty denominator".into())),
            Some(&d0) if d0 == 0.0 => Err(Error::InvalidArgument(
                "denominator leading coefficient is zero (non-causal model)".into(),
            )),
            _ if self.num.is_empty() => Err(Error::InvalidArgument("empty numerator".into())),
            _ if self.num.iter().chain(&self.den).any(|c| !c.is_finite()) => {
                Err(Error::InvalidArgument("non-finite coefficient".into()))
            }
            _ => Ok(()),
        }
    }

    /// Number of leading zero numerator coefficients (pure delay).
    pub fn relative_degree(&self) -> Option<usize> {
        self.num.iter().position(|&c| c != 0.0)
    }

    pub fn dc_gain(&self) -> f64 {
        self.num.iter().sum::<f64>() / self.den.iter().sum::<f64>()
    }

    /// Longest coefficient sequence, the length of the start-up transient.
    pub fn order_span(&self) -> usize {
        self.num.len().max(self.den.len())
    }
}

/// Causal difference-equation evaluation from zero initial conditions.
pub fn filter(model: &LinearSISOModel, input: &[f64]) -> Result<Vec<f64>> {
    model.validate()?;
    if input.is_empty() {
        return Err(Error::InvalidArgument("empty input series".into()));
    }
    let d0 = model.den[0];
    let mut out = vec![0.0; input.len()];
    for t in 0..input.len() {
        let mut acc = 0.0;
        for (k, &b) in model.num.iter().enumerate().take(t + 1) {
            acc += b * input[t - k];
        }
        for (k, &a) in model.den.iter().enumerate().skip(1).take(t) {
            acc -= a * out[t - k];
        }
        out[t] = acc / d0;
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VirtualReference {
    /// `r[t]` for `t < s.len() - trim`.
    pub r: Vec<f64>,
    /// Samples lost to the model's delay: the last `trim` references cannot
    /// be formed, and re-filtering reproduces the output from index `trim`.
    pub trim: usize,
}

/// `r = M^-1 s`, applying the delay of `M` as an advance of `s` so that
/// every filter stays causal.
pub fn virtual_reference(m: &LinearSISOModel, s: &[f64]) -> Result<VirtualReference> {
    m.validate()?;
    let d = m
        .relative_degree()
        .ok_or_else(|| Error::InvalidArgument("reference model has a zero numerator".into()))?;
    if s.len() <= d {
        return Err(Error::InvalidArgument(format!(
            "output series of length {} is too short for a delay of {d}",
            s.len()
        )));
    }
    let inverse = LinearSISOModel {
        num: m.den.clone(),
        den: m.num[d..].to_vec(),
    };
    Ok(VirtualReference {
        r: filter(&inverse, &s[d..])?,
        trim: d,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PIDParams {
    /// Proportional, integral and derivative gains.
    pub theta: [f64; 3],
}

impl PIDParams {
    pub fn new(kp: f64, ki: f64, kd: f64) -> Self {
        PIDParams { theta: [kp, ki, kd] }
    }

    pub fn validate(&self) -> Result<()> {
        if self.theta.iter().all(|g| g.is_finite()) {
            Ok(())
        } else {
            Err(Error::InvalidArgument("PID gains must be finite".into()))
        }
    }

    /// `C(z) = kp + ki / (1 - z^-1) + kd (1 - z^-1)` as a transfer function.
    pub fn transfer_function(&self) -> LinearSISOModel {
        let [kp, ki, kd] = self.theta;
        LinearSISOModel {
            num: vec![kp + ki + kd, -kp - 2.0 * kd, kd],
            den: vec![1.0, -1.0],
        }
    }
}

/// Virtual data set used by the fit, after trimming.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VirtualDataset {
    pub u: Vec<f64>,
    pub s: Vec<f64>,
    pub r: Vec<f64>,
    pub e: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PidFit {
    pub params: PIDParams,
    /// Mean squared residual of the least-squares criterion.
    pub criterion: f64,
    /// Leading samples excluded from the criterion.
    pub trimmed: usize,
    pub samples: usize,
}

const BASIS_NAMES: [&str; 3] = ["proportional", "integral", "derivative"];

/// The three PID regressors of an error series: `e`, its running sum and its
/// first difference.
pub fn pid_basis(e: &[f64]) -> [Vec<f64>; 3] {
    let mut integral = Vec::with_capacity(e.len());
    let mut acc = 0.0;
    for &x in e {
        acc += x;
        integral.push(acc);
    }
    let diff = e
        .iter()
        .enumerate()
        .map(|(t, &x)| if t == 0 { x } else { x - e[t - 1] })
        .collect();
    [e.to_vec(), integral, diff]
}

pub fn virtual_dataset(u: &[f64], s: &[f64], m: &LinearSISOModel) -> Result<VirtualDataset> {
    if u.len() != s.len() {
        return Err(Error::InvalidArgument(format!(
            "u and s lengths differ ({} vs {})",
            u.len(),
            s.len()
        )));
    }
    let vr = virtual_reference(m, s)?;
    let n = vr.r.len();
    let e = vr.r.iter().zip(s).map(|(r, s)| r - s).collect();
    Ok(VirtualDataset {
        u: u[..n].to_vec(),
        s: s[..n].to_vec(),
        r: vr.r,
        e,
    })
}

/// Least-squares PID fit `min (1/N) sum (u_t - C(z, theta) e_t)^2` on the
/// virtual error, optionally prefiltering both sides.
pub fn fit_pid(u: &[f64], s: &[f64], m: &LinearSISOModel, prefilter: Option<&LinearSISOModel>) -> Result<PidFit> {
    let data = virtual_dataset(u, s, m)?;
    let mut target = data.u.clone();
    let mut basis = pid_basis(&data.e);
    let mut trimmed = m.order_span();
    if let Some(l) = prefilter {
        target = filter(l, &target)?;
        for b in basis.iter_mut() {
            *b = filter(l, b)?;
        }
        trimmed += l.order_span();
    }
    let n = target.len().saturating_sub(trimmed);
    if n < 3 {
        return Err(Error::InvalidArgument(format!(
            "only {n} samples left after trimming {trimmed}; need at least 3"
        )));
    }
    let mut a = DMatrix::<f64>::from_fn(n, 3, |i, j| basis[j][i + trimmed]);
    let y = DVector::<f64>::from_iterator(n, target[trimmed..].iter().copied());

    // Column scaling keeps the rank test meaningful when regressors differ by
    // orders of magnitude (the running sum grows with N).
    let mut scales = [0.0; 3];
    for j in 0..3 {
        let norm = a.column(j).norm();
        if norm == 0.0 {
            return Err(Error::RankDeficient { basis: BASIS_NAMES[j] });
        }
        scales[j] = norm;
        a.column_mut(j).scale_mut(1.0 / norm);
    }
    let svd = a.clone().svd(true, true);
    let sv = &svd.singular_values;
    let (imin, smin) = sv.iter().copied().enumerate().fold((0, f64::INFINITY), |b, (i, v)| if v < b.1 { (i, v) } else { b });
    let smax = sv.iter().copied().fold(0.0, f64::max);
    if smin <= 1e-10 * smax {
        let v_t = svd.v_t.as_ref().expect("requested right singular vectors");
        let row = v_t.row(imin);
        let worst = (0..3)
            .max_by(|&x, &y| row[x].abs().total_cmp(&row[y].abs()))
            .unwrap_or(0);
        return Err(Error::RankDeficient { basis: BASIS_NAMES[worst] });
    }
    let scaled = svd
        .solve(&y, 1e-14 * smax)
        .map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let theta = [0, 1, 2].map(|j| scaled[j] / scales[j]);
    let resid = &y - &a * &scaled;
    Ok(PidFit {
        params: PIDParams { theta },
        criterion: resid.norm_squared() / n as f64,
        trimmed,
        samples: n,
    })
}

/// Day-of-year averages of the decision and storage series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnualCycle {
    /// `u[d]`, `s[d]` for day of year `d`.
    pub u: Vec<f64>,
    pub s: Vec<f64>,
}

impl AnnualCycle {
    /// Repeats the cycle to `len` samples, starting at day of year `start_day`.
    pub fn tile(&self, start_day: usize, len: usize) -> (Vec<f64>, Vec<f64>) {
        let day = |t: usize| (start_day + t) % DAYS_PER_YEAR;
        (
            (0..len).map(|t| self.u[day(t)]).collect(),
            (0..len).map(|t| self.s[day(t)]).collect(),
        )
    }
}

pub fn mean_annual_cycle(traj: &Trajectory) -> Result<AnnualCycle> {
    if traj.len() < DAYS_PER_YEAR {
        return Err(Error::InvalidArgument(format!(
            "trajectory of {} days is shorter than a year",
            traj.len()
        )));
    }
    let mut u = vec![0.0; DAYS_PER_YEAR];
    let mut s = vec![0.0; DAYS_PER_YEAR];
    let mut count = vec![0usize; DAYS_PER_YEAR];
    for (t, rec) in traj.records.iter().enumerate() {
        let d = (traj.start_day + t) % DAYS_PER_YEAR;
        u[d] += rec.u;
        s[d] += rec.s;
        count[d] += 1;
    }
    for d in 0..DAYS_PER_YEAR {
        u[d] /= count[d] as f64;
        s[d] /= count[d] as f64;
    }
    Ok(AnnualCycle { u, s })
}
