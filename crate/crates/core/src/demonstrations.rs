//! Demonstration trajectories: loading, equilibrium shift, velocity
//! estimation and projection onto subsystems.

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::interconnection::InterconnectionSpec;
use crate::scalar::Real;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct Trajectory<T> {
    pub states: Vec<Vec<T>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub velocities: Option<Vec<Vec<T>>>,
    /// Sample period in seconds; unknown for CSV input without a supplied `dt`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dt: Option<T>,
}

impl<T: Real> Trajectory<T> {
    pub fn new(states: Vec<Vec<T>>, velocities: Option<Vec<Vec<T>>>, dt: Option<T>) -> Result<Self> {
        let n = states.first().map_or(0, Vec::len);
        if let Some(bad) = states.iter().position(|s| s.len() != n) {
            return Err(Error::DimensionMismatch(format!(
                "state {bad} has dimension {}, expected {n}",
                states[bad].len()
            )));
        }
        if let Some(v) = &velocities {
            if v.len() != states.len() || v.iter().any(|r| r.len() != n) {
                return Err(Error::DimensionMismatch(
                    "velocities do not match states".into(),
                ));
            }
        }
        if let Some(dt) = dt {
            if !(dt > T::zero()) || !dt.is_finite() {
                return Err(Error::InvalidConfig(format!("dt must be positive, got {dt}")));
            }
        }
        Ok(Self {
            states,
            velocities,
            dt,
        })
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.states.first().map_or(0, Vec::len)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataFormat {
    Csv,
    Json,
}

impl DataFormat {
    /// Guesses the format from a file extension.
    pub fn from_path(path: &Path) -> Option<Self> {
        match path.extension()?.to_str()?.to_ascii_lowercase().as_str() {
            "csv" => Some(Self::Csv),
            "json" => Some(Self::Json),
            _ => None,
        }
    }
}

/// Target for [`DemonstrationSet::shift_to_origin`].
#[derive(Clone, Debug, PartialEq)]
pub enum Equilibrium<T> {
    /// Mean of the trajectories' final states.
    Auto,
    Point(Vec<T>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct DemonstrationSet<T> {
    pub trajectories: Vec<Trajectory<T>>,
    pub n: usize,
    /// Equilibrium in the original coordinates.
    pub equilibrium: Vec<T>,
    pub shifted: bool,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields, bound = "T: Real")]
struct JsonFile<T> {
    dt: T,
    trajectories: Vec<JsonTrajectory<T>>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields, bound = "T: Real")]
struct JsonTrajectory<T> {
    states: Vec<Vec<T>>,
    #[serde(default)]
    velocities: Option<Vec<Vec<T>>>,
}

impl<T: Real> DemonstrationSet<T> {
    pub fn new(trajectories: Vec<Trajectory<T>>) -> Result<Self> {
        let n = trajectories.iter().map(Trajectory::dim).find(|&d| d > 0).unwrap_or(0);
        if n == 0 {
            return Err(Error::TooFewSamples("no demonstration samples".into()));
        }
        for (i, t) in trajectories.iter().enumerate() {
            if t.dim() != n {
                return Err(Error::DimensionMismatch(format!(
                    "trajectory {i} has dimension {}, expected {n}",
                    t.dim()
                )));
            }
        }
        Ok(Self {
            trajectories,
            n,
            equilibrium: vec![T::zero(); n],
            shifted: false,
        })
    }

    /// Loads a CSV (`x1..xn[,dx1..dxn],traj_id`) or JSON demonstration file.
    ///
    /// CSV files carry no sample period; `dt` supplies it (and overrides the
    /// JSON value when given).
    pub fn load(path: &Path, format: DataFormat, dt: Option<T>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        match format {
            DataFormat::Csv => Self::from_csv_str(&text, dt),
            DataFormat::Json => Self::from_json_str(&text, dt),
        }
    }

    pub fn from_json_str(text: &str, dt: Option<T>) -> Result<Self> {
        let file: JsonFile<T> = serde_json::from_str(text).map_err(|e| Error::Parse {
            line: e.line(),
            message: e.to_string(),
        })?;
        let dt = dt.unwrap_or(file.dt);
        let trajs = file
            .trajectories
            .into_iter()
            .map(|t| Trajectory::new(t.states, t.velocities, Some(dt)))
            .collect::<Result<Vec<_>>>()?;
        Self::new(trajs)
    }

    pub fn from_csv_str(text: &str, dt: Option<T>) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .flexible(true)
            .trim(csv::Trim::All)
            .from_reader(text.as_bytes());
        let header = rdr.headers().map_err(csv_err)?.clone();
        let cols: Vec<&str> = header.iter().collect();
        let n = cols.iter().filter(|c| is_indexed(c, "x")).count();
        let nd = cols.iter().filter(|c| is_indexed(c, "dx")).count();
        let expect: Vec<String> = (1..=n)
            .map(|i| format!("x{i}"))
            .chain((1..=nd).map(|i| format!("dx{i}")))
            .chain(std::iter::once("traj_id".to_string()))
            .collect();
        if n == 0 || (nd != 0 && nd != n) || cols != expect {
            return Err(Error::Parse {
                line: 1,
                message: format!("expected header {}", expect.join(",")),
            });
        }
        let has_vel = nd > 0;
        let width = cols.len();

        let mut ids: Vec<String> = Vec::new();
        let mut groups: Vec<(Vec<Vec<T>>, Vec<Vec<T>>)> = Vec::new();
        for rec in rdr.records() {
            let rec = rec.map_err(csv_err)?;
            let line = rec.position().map_or(0, |p| p.line() as usize);
            if rec.len() != width {
                return Err(Error::Parse {
                    line,
                    message: format!("expected {width} fields, found {}", rec.len()),
                });
            }
            let mut vals = Vec::with_capacity(width - 1);
            for field in rec.iter().take(width - 1) {
                let v: f64 = field.parse().map_err(|_| Error::Parse {
                    line,
                    message: format!("not a number: {field:?}"),
                })?;
                vals.push(T::lit(v));
            }
            let id = rec[width - 1].to_string();
            let g = match ids.iter().position(|x| *x == id) {
                Some(g) => g,
                None => {
                    ids.push(id);
                    groups.push((Vec::new(), Vec::new()));
                    groups.len() - 1
                }
            };
            groups[g].0.push(vals[..n].to_vec());
            if has_vel {
                groups[g].1.push(vals[n..].to_vec());
            }
        }
        let trajs = groups
            .into_iter()
            .map(|(s, v)| Trajectory::new(s, has_vel.then_some(v), dt))
            .collect::<Result<Vec<_>>>()?;
        Self::new(trajs)
    }

    pub fn len(&self) -> usize {
        self.trajectories.iter().map(Trajectory::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn has_velocities(&self) -> bool {
        self.trajectories.iter().all(|t| t.velocities.is_some())
    }

    /// Subtracts `x_star` from every state. Velocities are untouched.
    pub fn shift_to_origin(&self, x_star: &Equilibrium<T>) -> Result<Self> {
        let x_star = match x_star {
            Equilibrium::Point(p) => {
                if p.len() != self.n {
                    return Err(Error::DimensionMismatch(format!(
                        "equilibrium has dimension {}, expected {}",
                        p.len(),
                        self.n
                    )));
                }
                p.clone()
            }
            Equilibrium::Auto => {
                let finals: Vec<&Vec<T>> =
                    self.trajectories.iter().filter_map(|t| t.states.last()).collect();
                let cnt = T::from_usize_lossy(finals.len().max(1));
                (0..self.n)
                    .map(|j| finals.iter().map(|s| s[j]).sum::<T>() / cnt)
                    .collect()
            }
        };
        let mut out = self.clone();
        for t in &mut out.trajectories {
            for s in &mut t.states {
                for (v, &c) in s.iter_mut().zip(&x_star) {
                    *v -= c;
                }
            }
        }
        for (e, &c) in out.equilibrium.iter_mut().zip(&x_star) {
            *e += c;
        }
        out.shifted = true;
        Ok(out)
    }

    /// Fills velocities by finite differences: central inside, one-sided at
    /// both ends. A trajectory ending exactly at the equilibrium gets a zero
    /// final velocity.
    pub fn estimate_velocities(&self) -> Result<Self> {
        let mut out = self.clone();
        let origin = self.current_equilibrium();
        for (i, t) in out.trajectories.iter_mut().enumerate() {
            let len = t.len();
            if len < 3 {
                return Err(Error::TooFewSamples(format!(
                    "trajectory {i} has {len} samples, need at least 3"
                )));
            }
            let dt = t.dt.ok_or_else(|| {
                Error::MissingVelocities(format!("trajectory {i} has no sample period"))
            })?;
            let two = T::lit(2.0);
            let s = &t.states;
            let mut v: Vec<Vec<T>> = Vec::with_capacity(len);
            for k in 0..len {
                let (a, b, h) = if k == 0 {
                    (1, 0, dt)
                } else if k == len - 1 {
                    (len - 1, len - 2, dt)
                } else {
                    (k + 1, k - 1, two * dt)
                };
                v.push(s[a].iter().zip(&s[b]).map(|(&p, &q)| (p - q) / h).collect());
            }
            if s[len - 1] == origin {
                v[len - 1] = vec![T::zero(); self.n];
            }
            t.velocities = Some(v);
        }
        Ok(out)
    }

    /// Equilibrium expressed in the current coordinates.
    fn current_equilibrium(&self) -> Vec<T> {
        if self.shifted {
            vec![T::zero(); self.n]
        } else {
            self.equilibrium.clone()
        }
    }

    /// All `(x, ẋ)` tuples in trajectory order. For a shifted set the tuple
    /// `(0, 0)` is appended once if no sample already equals it.
    pub fn samples(&self) -> Result<(Vec<Vec<T>>, Vec<Vec<T>>)> {
        let mut xs = Vec::with_capacity(self.len() + 1);
        let mut vs = Vec::with_capacity(self.len() + 1);
        for (i, t) in self.trajectories.iter().enumerate() {
            let v = t.velocities.as_ref().ok_or_else(|| {
                Error::MissingVelocities(format!("trajectory {i} has no velocities"))
            })?;
            xs.extend(t.states.iter().cloned());
            vs.extend(v.iter().cloned());
        }
        if self.shifted {
            let zero = vec![T::zero(); self.n];
            if !xs.iter().zip(&vs).any(|(x, v)| *x == zero && *v == zero) {
                xs.push(zero.clone());
                vs.push(zero);
            }
        }
        if xs.len() < self.n + 1 {
            return Err(Error::TooFewSamples(format!(
                "{} samples for dimension {}",
                xs.len(),
                self.n
            )));
        }
        warn_duplicates(&xs);
        Ok((xs, vs))
    }

    /// Splits every sample into per-subsystem state, velocity and input parts.
    pub fn project_to_subsystems(&self, spec: &InterconnectionSpec) -> Result<Vec<SubsystemData<T>>> {
        if spec.n() != self.n {
            return Err(Error::SpecMismatch(format!(
                "topology has n = {}, data has n = {}",
                spec.n(),
                self.n
            )));
        }
        let (xs, vs) = self.samples()?;
        let fan = spec.fan_out();
        Ok(spec
            .subsystems()
            .iter()
            .map(|s| SubsystemData {
                index: s.index,
                x_samples: xs.iter().map(|x| spec.select_states(s.index, x)).collect(),
                xdot_samples: vs.iter().map(|v| spec.select_states(s.index, v)).collect(),
                w_samples: xs.iter().map(|x| spec.select_inputs(s.index, x)).collect(),
                state_fan_out: s.state_coords.iter().map(|&c| fan[c]).collect(),
                state_dim: s.state_dim(),
                input_dim: s.input_dim(),
            })
            .collect())
    }

    /// First state of every trajectory.
    pub fn starts(&self) -> Vec<Vec<T>> {
        self.trajectories
            .iter()
            .filter_map(|t| t.states.first().cloned())
            .collect()
    }

    /// Largest Euclidean norm over all states.
    pub fn max_norm(&self) -> T {
        self.trajectories
            .iter()
            .flat_map(|t| &t.states)
            .map(|s| crate::scalar::norm(s))
            .fold(T::zero(), T::max)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct SubsystemData<T> {
    pub index: usize,
    pub x_samples: Vec<Vec<T>>,
    pub xdot_samples: Vec<Vec<T>>,
    pub w_samples: Vec<Vec<T>>,
    /// For each own state coordinate, how many subsystems read it as input.
    pub state_fan_out: Vec<usize>,
    pub state_dim: usize,
    pub input_dim: usize,
}

impl<T> SubsystemData<T> {
    pub fn len(&self) -> usize {
        self.x_samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x_samples.is_empty()
    }
}

fn is_indexed(col: &str, prefix: &str) -> bool {
    col.strip_prefix(prefix)
        .is_some_and(|r| !r.is_empty() && r.bytes().all(|b| b.is_ascii_digit()))
}

fn csv_err(e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line() as usize);
    Error::Parse {
        line,
        message: e.to_string(),
    }
}

fn warn_duplicates<T: Real>(xs: &[Vec<T>]) {
    let mut seen = HashSet::new();
    let mut dups = 0usize;
    for x in xs {
        let key: Vec<u64> = x.iter().map(|v| v.to_f64_lossy().to_bits()).collect();
        if !seen.insert(key) && x.iter().any(|v| !v.is_zero()) {
            dups += 1;
        }
    }
    if dups > 0 {
        log::warn!("{dups} duplicate state samples in demonstration data");
    }
}
