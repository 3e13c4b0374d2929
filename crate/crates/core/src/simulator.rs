//! Forward simulation of a composed model and fit diagnostics.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::composer::{global_field, global_lyapunov, ComposedModel};
use crate::demonstrations::{DemonstrationSet, SubsystemData};
use crate::error::{Error, Result};
use crate::learner::eval_subsystem_field;
use crate::learner::SubsystemModel;
use crate::scalar::{all_finite, norm, norm_sq, Real};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    /// `‖x‖` fell to the convergence radius.
    Converged,
    TimeLimit,
    /// The state became non-finite.
    Diverged,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RolloutOptions {
    pub dt: f64,
    pub t_max: f64,
    /// Stop once `‖x‖ ≤ stop_tol·‖x0‖`; `0` disables the check.
    pub stop_tol: f64,
    /// Diverged once `‖x‖ > blowup·max(1, ‖x0‖)`.
    pub blowup: f64,
}

impl Default for RolloutOptions {
    fn default() -> Self {
        Self {
            dt: 1e-2,
            t_max: 50.0,
            stop_tol: 1e-3,
            blowup: 1e6,
        }
    }
}

impl RolloutOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.dt.is_finite()) || !(self.t_max > 0.0 && self.t_max.is_finite()) || !(self.stop_tol >= 0.0) || !(self.blowup > 1.0) {
            return Err(Error::InvalidConfig(format!(
                "rollout needs dt > 0, t_max > 0, stop_tol >= 0 and blowup > 1 (got {}, {}, {}, {})",
                self.dt, self.t_max, self.stop_tol, self.blowup
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct Rollout<T> {
    pub times: Vec<T>,
    pub states: Vec<Vec<T>>,
    pub lyapunov_values: Vec<T>,
    pub terminated: Termination,
}

impl<T: Real> Rollout<T> {
    pub fn final_state(&self) -> &[T] {
        self.states.last().expect("rollouts hold at least the start")
    }
}

fn rk4_step<T: Real>(m: &ComposedModel<T>, x: &[T], h: T) -> Result<Vec<T>> {
    let half = T::lit(0.5) * h;
    let axpy = |a: &[T], s: T, b: &[T]| -> Vec<T> { a.iter().zip(b).map(|(&u, &v)| u + s * v).collect() };
    let k1 = global_field(m, x)?;
    let k2 = global_field(m, &axpy(x, half, &k1))?;
    let k3 = global_field(m, &axpy(x, half, &k2))?;
    let k4 = global_field(m, &axpy(x, h, &k3))?;
    let sixth = h / T::lit(6.0);
    let two = T::lit(2.0);
    Ok((0..x.len())
        .map(|i| x[i] + sixth * (k1[i] + two * k2[i] + two * k3[i] + k4[i]))
        .collect())
}

/// Integrates `ẋ = f(x)` from `x0` with classical RK4 at a fixed step.
pub fn rollout<T: Real>(m: &ComposedModel<T>, x0: &[T], opts: &RolloutOptions) -> Result<Rollout<T>> {
    opts.validate()?;
    if x0.len() != m.n() {
        return Err(Error::DimensionMismatch(format!(
            "start has dimension {}, model has {}",
            x0.len(),
            m.n()
        )));
    }
    let h = T::lit(opts.dt);
    let steps = (opts.t_max / opts.dt).ceil() as usize;
    let tol = T::lit(opts.stop_tol) * norm(x0);
    let limit = T::lit(opts.blowup) * norm(x0).max(T::one());
    let mut x = x0.to_vec();
    let mut out = Rollout {
        times: vec![T::zero()],
        states: vec![x.clone()],
        lyapunov_values: vec![global_lyapunov(m, &x).0],
        terminated: Termination::TimeLimit,
    };
    for step in 1..=steps {
        if norm(&x) <= tol {
            out.terminated = Termination::Converged;
            return Ok(out);
        }
        x = rk4_step(m, &x, h)?;
        if !all_finite(&x) || norm(&x) > limit {
            out.terminated = Termination::Diverged;
            return Ok(out);
        }
        out.times.push(T::from_usize_lossy(step) * h);
        out.lyapunov_values.push(global_lyapunov(m, &x).0);
        out.states.push(x.clone());
    }
    if norm(&x) <= tol {
        out.terminated = Termination::Converged;
    }
    Ok(out)
}

/// `(1/M) Σ ‖f(xₘ) − ẋₘ‖²` over paired samples.
pub fn mse<T: Real>(m: &ComposedModel<T>, states: &[Vec<T>], velocities: &[Vec<T>]) -> Result<T> {
    if states.len() != velocities.len() || states.is_empty() {
        return Err(Error::DimensionMismatch(format!(
            "{} states and {} velocities",
            states.len(),
            velocities.len()
        )));
    }
    let mut total = T::zero();
    for (x, v) in states.iter().zip(velocities) {
        let f = global_field(m, x)?;
        let r: Vec<T> = f.iter().zip(v).map(|(&a, &b)| a - b).collect();
        total += norm_sq(&r);
    }
    Ok(total / T::from_usize_lossy(states.len()))
}

/// `Σₘ ‖fᵢ(xᵢₘ, wᵢₘ) − ẋᵢₘ‖²` for one subsystem.
pub fn subsystem_residual<T: Real>(m: &SubsystemModel<T>, data: &SubsystemData<T>) -> Result<T> {
    let mut total = T::zero();
    for ((x, w), v) in data.x_samples.iter().zip(&data.w_samples).zip(&data.xdot_samples) {
        let f = eval_subsystem_field(m, x, w)?;
        let r: Vec<T> = f.iter().zip(v).map(|(&a, &b)| a - b).collect();
        total += norm_sq(&r);
    }
    Ok(total)
}

/// Writes `source,traj,time,x1..xn,V` rows for every demonstration (if
/// given) and rollout. States are written with `offset` added, so passing the
/// equilibrium gives original coordinates. Demonstrations without a time
/// step use the sample index as time.
pub fn export_plot_data<T: Real, W: Write>(
    m: &ComposedModel<T>,
    demos: Option<&DemonstrationSet<T>>,
    rollouts: &[Rollout<T>],
    offset: &[T],
    out: W,
) -> Result<()> {
    let n = m.n();
    if offset.len() != n || demos.is_some_and(|d| d.n != n) {
        return Err(Error::DimensionMismatch(format!(
            "plot export for dimension {n} got mismatched offset or data"
        )));
    }
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["source".to_string(), "traj".to_string(), "time".to_string()];
    header.extend((1..=n).map(|i| format!("x{i}")));
    header.push("V".to_string());
    w.write_record(&header)?;
    let mut row = |source: &str, traj: usize, t: T, x: &[T], v: T| -> Result<()> {
        let mut rec = vec![source.to_string(), traj.to_string(), t.to_f64_lossy().to_string()];
        rec.extend(x.iter().zip(offset).map(|(&a, &o)| (a + o).to_f64_lossy().to_string()));
        rec.push(v.to_f64_lossy().to_string());
        w.write_record(&rec)?;
        Ok(())
    };
    for (j, tr) in demos.iter().flat_map(|d| &d.trajectories).enumerate() {
        for (k, x) in tr.states.iter().enumerate() {
            let t = T::from_usize_lossy(k) * tr.dt.unwrap_or(T::one());
            row("demo", j + 1, t, x, global_lyapunov(m, x).0)?;
        }
    }
    for (j, r) in rollouts.iter().enumerate() {
        for ((t, x), v) in r.times.iter().zip(&r.states).zip(&r.lyapunov_values) {
            row("rollout", j + 1, *t, x, *v)?;
        }
    }
    w.flush()?;
    Ok(())
}
