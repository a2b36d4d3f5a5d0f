//! Daily inflow disturbances for the three rivers (Da, Thao, Lo).
//!
//! Synthetic traces are lognormal: each river's log-flow is an AR(1) process
//! around a seasonal mean, with innovations correlated across rivers through
//! the Cholesky factor of a 3x3 correlation matrix.

use std::io::{Read, Write};

use nalgebra::Matrix3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Calendar period of every policy and seasonal profile (no leap days).
pub const DAYS_PER_YEAR: usize = 365;

const TRACE_STREAM: u64 = 0;
const ENSEMBLE_STREAM: u64 = 1;

/// Flows of one day, m3/s.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Disturbance {
    pub q_d: f64,
    pub q_t: f64,
    pub q_l: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HydrologyTrace {
    pub start_day: usize,
    pub q_d: Vec<f64>,
    pub q_t: Vec<f64>,
    pub q_l: Vec<f64>,
}

impl HydrologyTrace {
    pub fn new(start_day: usize, q_d: Vec<f64>, q_t: Vec<f64>, q_l: Vec<f64>) -> Result<Self> {
        let trace = HydrologyTrace {
            start_day,
            q_d,
            q_t,
            q_l,
        };
        trace.validate()?;
        Ok(trace)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.q_d.len();
        if n == 0 || self.q_t.len() != n || self.q_l.len() != n {
            return Err(Error::InvalidArgument(format!(
                "trace series must be non-empty and of equal length (got {}, {}, {})",
                self.q_d.len(),
                self.q_t.len(),
                self.q_l.len()
            )));
        }
        for (series, name) in [(&self.q_d, "q_d"), (&self.q_t, "q_t"), (&self.q_l, "q_l")] {
            if let Some(i) = series.iter().position(|q| !(q.is_finite() && *q >= 0.0)) {
                return Err(Error::InvalidArgument(format!(
                    "{name}[{i}] = {} is not a finite non-negative flow",
                    series[i]
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.q_d.len()
    }

    pub fn is_empty(&self) -> bool {
        self.q_d.is_empty()
    }

    pub fn day_of_year(&self, t: usize) -> usize {
        (self.start_day + t) % DAYS_PER_YEAR
    }

    pub fn at(&self, t: usize) -> Disturbance {
        Disturbance {
            q_d: self.q_d[t],
            q_t: self.q_t[t],
            q_l: self.q_l[t],
        }
    }

    /// Sub-trace covering `start..end`, keeping calendar alignment.
    pub fn window(&self, start: usize, end: usize) -> HydrologyTrace {
        HydrologyTrace {
            start_day: self.start_day + start,
            q_d: self.q_d[start..end].to_vec(),
            q_t: self.q_t[start..end].to_vec(),
            q_l: self.q_l[start..end].to_vec(),
        }
    }

    /// Writes the `day,q_d,q_t,q_l` CSV representation.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["day", "q_d", "q_t", "q_l"])?;
        for t in 0..self.len() {
            w.write_record([
                (self.start_day + t).to_string(),
                self.q_d[t].to_string(),
                self.q_t[t].to_string(),
                self.q_l[t].to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Parses a trace from the `day,q_d,q_t,q_l` CSV schema.
///
/// Days must be consecutive; the first row fixes `start_day`. Line numbers in
/// errors are 1-based and count the header as line 1.
pub fn load_trace<R: Read>(source: R) -> Result<HydrologyTrace> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .flexible(true)
        .from_reader(source);
    let headers = reader.headers()?.clone();
    let column = |name: &str| -> Result<usize> {
        headers.iter().position(|h| h == name).ok_or_else(|| Error::Parse {
            line: 1,
            message: format!("missing column `{name}`"),
        })
    };
    let cols = [column("day")?, column("q_d")?, column("q_t")?, column("q_l")?];

    let mut start_day = 0;
    let (mut q_d, mut q_t, mut q_l) = (Vec::new(), Vec::new(), Vec::new());
    for (row, record) in reader.records().enumerate() {
        let line = row + 2;
        let record = record.map_err(|e| Error::Parse {
            line,
            message: e.to_string(),
        })?;
        let cell = |k: usize| -> Result<&str> {
            record.get(cols[k]).ok_or_else(|| Error::Parse {
                line,
                message: format!("missing column `{}`", ["day", "q_d", "q_t", "q_l"][k]),
            })
        };
        let day: usize = cell(0)?.parse().map_err(|_| Error::Parse {
            line,
            message: format!("day `{}` is not a non-negative integer", cell(0).unwrap_or("")),
        })?;
        if row == 0 {
            start_day = day;
        } else if day != start_day + row {
            return Err(Error::Parse {
                line,
                message: format!("expected day {}, found {day}", start_day + row),
            });
        }
        let mut flows = [0.0; 3];
        for k in 1..4 {
            let text = cell(k)?;
            let v: f64 = text.parse().map_err(|_| Error::Parse {
                line,
                message: format!("`{text}` is not a number"),
            })?;
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Parse {
                    line,
                    message: format!("flow {v} must be finite and non-negative"),
                });
            }
            flows[k - 1] = v;
        }
        q_d.push(flows[0]);
        q_t.push(flows[1]);
        q_l.push(flows[2]);
    }
    if q_d.is_empty() {
        return Err(Error::Parse {
            line: 2,
            message: "trace has no data rows".into(),
        });
    }
    HydrologyTrace::new(start_day, q_d, q_t, q_l)
}

/// Seasonal lognormal inflow generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InflowModel {
    /// Log-mean per river (Da, Thao, Lo) and day of year.
    pub mu: [Vec<f64>; 3],
    /// Log-standard deviation per river and day of year.
    pub sigma: [Vec<f64>; 3],
    pub rho_time: f64,
    #[serde(rename = "R")]
    pub correlation: [[f64; 3]; 3],
    pub seed: u64,
}

impl InflowModel {
    /// Builds a model with constant profiles; handy for tests and toy runs.
    pub fn constant(mu: [f64; 3], sigma: [f64; 3], rho_time: f64, correlation: [[f64; 3]; 3], seed: u64) -> Self {
        InflowModel {
            mu: mu.map(|m| vec![m; DAYS_PER_YEAR]),
            sigma: sigma.map(|s| vec![s; DAYS_PER_YEAR]),
            rho_time,
            correlation,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for river in 0..3 {
            if self.mu[river].len() != DAYS_PER_YEAR {
                return Err(Error::config(
                    format!("hydrology.mu[{river}]"),
                    format!("expected {DAYS_PER_YEAR} values, got {}", self.mu[river].len()),
                ));
            }
            if self.sigma[river].len() != DAYS_PER_YEAR {
                return Err(Error::config(
                    format!("hydrology.sigma[{river}]"),
                    format!("expected {DAYS_PER_YEAR} values, got {}", self.sigma[river].len()),
                ));
            }
            if let Some(d) = self.mu[river].iter().position(|m| !m.is_finite()) {
                return Err(Error::config(format!("hydrology.mu[{river}][{d}]"), "must be finite"));
            }
            if let Some(d) = self.sigma[river].iter().position(|s| !(s.is_finite() && *s >= 0.0)) {
                return Err(Error::config(
                    format!("hydrology.sigma[{river}][{d}]"),
                    "must be finite and >= 0",
                ));
            }
        }
        if !(0.0..1.0).contains(&self.rho_time) {
            return Err(Error::config("hydrology.rho_time", "must lie in [0, 1)"));
        }
        self.cholesky().map(|_| ())
    }

    /// Lower Cholesky factor of the spatial correlation matrix.
    pub fn cholesky(&self) -> Result<Matrix3<f64>> {
        let r = &self.correlation;
        for i in 0..3 {
            if r[i][i] != 1.0 {
                return Err(Error::config(format!("hydrology.R[{i}][{i}]"), "diagonal must be 1"));
            }
            for j in 0..3 {
                if r[i][j] != r[j][i] || !r[i][j].is_finite() {
                    return Err(Error::config(format!("hydrology.R[{i}][{j}]"), "matrix must be symmetric"));
                }
            }
        }
        let m = Matrix3::from_fn(|i, j| r[i][j]);
        m.cholesky()
            .map(|c| c.l())
            .ok_or_else(|| Error::config("hydrology.R", "correlation matrix is not positive definite"))
    }

    /// Same model with a different seed.
    pub fn with_seed(&self, seed: u64) -> Self {
        InflowModel {
            seed,
            ..self.clone()
        }
    }

    /// Wetter variant: each river's log-mean is raised by up to `log_shift`,
    /// proportionally to how far the day sits above that river's driest day.
    pub fn wetter(&self, log_shift: f64) -> Self {
        let mut out = self.clone();
        for river in 0..3 {
            let lo = self.mu[river].iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = self.mu[river].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let span = hi - lo;
            for (m, base) in out.mu[river].iter_mut().zip(&self.mu[river]) {
                let weight = if span > 0.0 { (base - lo) / span } else { 1.0 };
                *m = base + log_shift * weight;
            }
        }
        out
    }

    fn flows(&self, day: usize, z: [f64; 3]) -> [f64; 3] {
        std::array::from_fn(|k| (self.mu[k][day] + self.sigma[k][day] * z[k]).exp())
    }
}

fn correlated_normals(rng: &mut ChaCha8Rng, chol: &Matrix3<f64>) -> [f64; 3] {
    let eta: [f64; 3] = std::array::from_fn(|_| StandardNormal.sample(rng));
    std::array::from_fn(|i| (0..=i).map(|j| chol[(i, j)] * eta[j]).sum())
}

/// Generates `n_days` of synthetic flows starting at day-of-year 0.
pub fn generate_trace(model: &InflowModel, n_days: usize) -> Result<HydrologyTrace> {
    if n_days == 0 {
        return Err(Error::InvalidArgument("n_days must be >= 1".into()));
    }
    model.validate()?;
    let chol = model.cholesky()?;
    let mut rng = ChaCha8Rng::seed_from_u64(model.seed);
    rng.set_stream(TRACE_STREAM);

    let rho = model.rho_time;
    let innovation_scale = (1.0 - rho * rho).sqrt();
    // Stationary start.
    let mut z = correlated_normals(&mut rng, &chol);
    let (mut q_d, mut q_t, mut q_l) = (
        Vec::with_capacity(n_days),
        Vec::with_capacity(n_days),
        Vec::with_capacity(n_days),
    );
    for t in 0..n_days {
        if t > 0 {
            let eps = correlated_normals(&mut rng, &chol);
            for k in 0..3 {
                z[k] = rho * z[k] + innovation_scale * eps[k];
            }
        }
        let [d, th, l] = model.flows(t % DAYS_PER_YEAR, z);
        q_d.push(d);
        q_t.push(th);
        q_l.push(l);
    }
    HydrologyTrace::new(0, q_d, q_t, q_l)
}

/// Per-day scenario sets used by the stochastic Bellman expectation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DisturbanceEnsemble {
    /// `scenarios[d][j]` for day-of-year `d`.
    pub scenarios: Vec<Vec<Disturbance>>,
    /// `weights[d][j]`, each row summing to one.
    pub weights: Vec<Vec<f64>>,
}

impl DisturbanceEnsemble {
    pub fn scenarios_per_day(&self) -> usize {
        self.scenarios.first().map_or(0, Vec::len)
    }

    pub fn validate(&self) -> Result<()> {
        if self.scenarios.len() != DAYS_PER_YEAR || self.weights.len() != DAYS_PER_YEAR {
            return Err(Error::InvalidArgument(format!(
                "ensemble must cover {DAYS_PER_YEAR} days, got {}",
                self.scenarios.len()
            )));
        }
        for (d, (s, w)) in self.scenarios.iter().zip(&self.weights).enumerate() {
            if s.is_empty() || s.len() != w.len() {
                return Err(Error::InvalidArgument(format!("day {d}: empty or mismatched scenario set")));
            }
            let total: f64 = w.iter().sum();
            if w.iter().any(|x| !(*x >= 0.0)) || (total - 1.0).abs() > 1e-12 {
                return Err(Error::InvalidArgument(format!("day {d}: weights must be >= 0 and sum to 1")));
            }
        }
        Ok(())
    }

    /// Degenerate single-scenario ensemble taken from one year of a trace.
    pub fn from_trace_year(trace: &HydrologyTrace) -> Result<Self> {
        if trace.len() < DAYS_PER_YEAR {
            return Err(Error::InvalidArgument("trace shorter than one year".into()));
        }
        let mut scenarios = vec![Vec::new(); DAYS_PER_YEAR];
        for t in 0..DAYS_PER_YEAR {
            scenarios[trace.day_of_year(t)] = vec![trace.at(t)];
        }
        Ok(DisturbanceEnsemble {
            scenarios,
            weights: vec![vec![1.0]; DAYS_PER_YEAR],
        })
    }
}

/// Draws `scenarios_per_day` equally weighted samples from each day's marginal
/// distribution. Temporal correlation is not represented: days are sampled
/// independently.
pub fn build_ensemble(model: &InflowModel, scenarios_per_day: usize) -> Result<DisturbanceEnsemble> {
    if scenarios_per_day == 0 {
        return Err(Error::InvalidArgument("scenarios_per_day must be >= 1".into()));
    }
    model.validate()?;
    let chol = model.cholesky()?;
    let mut rng = ChaCha8Rng::seed_from_u64(model.seed);
    rng.set_stream(ENSEMBLE_STREAM);
    let w = 1.0 / scenarios_per_day as f64;
    let mut scenarios = Vec::with_capacity(DAYS_PER_YEAR);
    for day in 0..DAYS_PER_YEAR {
        let day_set = (0..scenarios_per_day)
            .map(|_| {
                let [q_d, q_t, q_l] = model.flows(day, correlated_normals(&mut rng, &chol));
                Disturbance { q_d, q_t, q_l }
            })
            .collect();
        scenarios.push(day_set);
    }
    Ok(DisturbanceEnsemble {
        scenarios,
        weights: vec![vec![w; scenarios_per_day]; DAYS_PER_YEAR],
    })
}
