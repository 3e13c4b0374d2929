//! Independent certificate checks: eigenvalue tests, sampled Lyapunov
//! conditions and a classical Lyapunov-equation oracle.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::composer::{global_field, global_lyapunov, ComposedModel};
use crate::error::{Error, Result};
use crate::learner::eval_subsystem_field;
use crate::linalg::{solve_linear, Mat, SymMat};
use crate::scalar::{dot, norm_sq, Real};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub pass: bool,
    /// Largest violation found; the check passes iff this is `<= tolerance`.
    pub worst_margin: f64,
    pub tolerance: f64,
    /// Input achieving the worst margin (empty for matrix-level checks).
    pub witness: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CertificateReport {
    pub checks: Vec<CheckResult>,
}

impl CertificateReport {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, worst_margin: f64, tolerance: f64, witness: Vec<f64>) {
        self.checks.push(CheckResult {
            name: name.into(),
            pass: worst_margin <= tolerance,
            worst_margin,
            tolerance,
            witness,
        });
    }

    /// Appends `other`'s checks with `prefix` prepended to their names.
    pub fn extend_prefixed(&mut self, prefix: &str, other: CertificateReport) {
        for mut c in other.checks {
            c.name = format!("{prefix}{}", c.name);
            self.checks.push(c);
        }
    }

    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CheckResult> {
        self.checks.iter().filter(|c| !c.pass)
    }

    pub fn get(&self, name: &str) -> Option<&CheckResult> {
        self.checks.iter().find(|c| c.name == name)
    }
}

/// Tracks the worst margin over a stream of samples.
#[derive(Clone, Debug)]
pub(crate) struct Worst {
    pub margin: f64,
    pub witness: Vec<f64>,
}

impl Worst {
    pub fn new() -> Self {
        Self {
            margin: f64::NEG_INFINITY,
            witness: Vec::new(),
        }
    }

    pub fn offer(&mut self, margin: f64, witness: impl FnOnce() -> Vec<f64>) {
        if margin > self.margin || margin.is_nan() {
            self.margin = if margin.is_nan() { f64::INFINITY } else { margin };
            self.witness = witness();
        }
    }
}

/// Uniform draw from the ball of radius `r` in `n` dimensions.
pub fn sample_ball<R: Rng>(rng: &mut R, n: usize, r: f64) -> Vec<f64> {
    if n == 0 {
        return Vec::new();
    }
    let dir: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 {
        return vec![0.0; n];
    }
    let u: f64 = rng.random();
    let s = r * u.powf(1.0 / n as f64) / norm;
    dir.into_iter().map(|v| v * s).collect()
}

fn to_f64<T: Real>(v: &[T]) -> Vec<f64> {
    v.iter().map(|x| x.to_f64_lossy()).collect()
}

/// Checks the composed certificate at the given points:
/// `storage_lower`/`storage_upper` (`δ̲‖x‖² ≤ V ≤ δ̄‖x‖²`), `decrease`
/// (`∇V·f + ξV ≤ 0`), `equilibrium` (`f(0) = 0`) and `composition`
/// (`λmax(C(μ)) ≤ 0`).
pub fn verify_composed_at<T: Real>(m: &ComposedModel<T>, points: &[Vec<T>], tol: T) -> Result<CertificateReport> {
    let tolf = tol.to_f64_lossy();
    let r = &m.rates;
    let mut lower = Worst::new();
    let mut upper = Worst::new();
    let mut decrease = Worst::new();
    for x in points {
        let (v, g) = global_lyapunov(m, x);
        let f = global_field(m, x)?;
        let nx = norm_sq(x);
        lower.offer((r.delta_lo * nx - v).to_f64_lossy(), || to_f64(x));
        upper.offer((v - r.delta_hi * nx).to_f64_lossy(), || to_f64(x));
        decrease.offer((dot(&g, &f) + r.xi * v).to_f64_lossy(), || to_f64(x));
    }
    let f0 = global_field(m, &vec![T::zero(); m.n()])?;
    let f0max = f0.iter().map(|v| v.abs().to_f64_lossy()).fold(0.0, f64::max);

    let mut rep = CertificateReport::new();
    rep.push("storage_lower", lower.margin, tolf, lower.witness);
    rep.push("storage_upper", upper.margin, tolf, upper.witness);
    rep.push("decrease", decrease.margin, tolf, decrease.witness);
    rep.push("equilibrium", f0max, 0.0, Vec::new());
    let eig = m.certificate_matrix()?.eigen()?;
    let n = m.n();
    rep.push(
        "composition",
        eig.values[n - 1].to_f64_lossy(),
        tolf,
        to_f64(&eig.vector(n - 1)),
    );
    Ok(rep)
}

/// [`verify_composed_at`] on `samples` uniform draws from the ball of
/// radius `radius`, plus the origin.
pub fn verify_composed<T: Real>(
    m: &ComposedModel<T>,
    samples: usize,
    radius: T,
    seed: u64,
    tol: T,
) -> Result<CertificateReport> {
    let points = ball_points(m.n(), samples, radius, seed);
    verify_composed_at(m, &points, tol)
}

fn ball_points<T: Real>(n: usize, samples: usize, radius: T, seed: u64) -> Vec<Vec<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = radius.to_f64_lossy();
    std::iter::once(vec![T::zero(); n])
        .chain((0..samples).map(|_| sample_ball(&mut rng, n, r).into_iter().map(T::lit).collect()))
        .collect()
}

/// Solves `AᵀP + PA = −I`. Errors with [`Error::NotHurwitz`] when the
/// solution is not unique or not positive definite.
pub fn lyapunov_oracle_linear<T: Real>(a: &Mat<T>) -> Result<SymMat<T>> {
    let n = a.rows();
    if n == 0 || a.cols() != n {
        return Err(Error::DimensionMismatch(format!(
            "Lyapunov oracle needs a non-empty square matrix, got {}x{}",
            a.rows(),
            a.cols()
        )));
    }
    // row-major vec(P): P[i][j] at i·n + j
    let nn = n * n;
    let mut l = Mat::zeros(nn, nn);
    for i in 0..n {
        for j in 0..n {
            let row = i * n + j;
            for k in 0..n {
                l[(row, k * n + j)] += a[(k, i)];
                l[(row, i * n + k)] += a[(k, j)];
            }
        }
    }
    let rhs: Vec<T> = (0..nn)
        .map(|r| if r / n == r % n { -T::one() } else { T::zero() })
        .collect();
    let p = match solve_linear(&l, &rhs) {
        Ok(p) => p,
        Err(Error::Singular) => return Err(Error::NotHurwitz),
        Err(e) => return Err(e),
    };
    let p = SymMat::symmetrize(&Mat::from_fn(n, n, |i, j| p[i * n + j]))?;
    if !p.is_finite() || p.cholesky().is_none() {
        return Err(Error::NotHurwitz);
    }
    Ok(p)
}

/// Evaluates the dissipation chain at sampled points:
/// `Σ μᵢ∇Vᵢ·fᵢ ≤ Σ −μᵢξᵢVᵢ + Σ μᵢsᵢ ≤ Σ −μᵢξᵢVᵢ ≤ −ξV`, and that the
/// stacked supply `Σ μᵢsᵢ` equals `xᵀC(μ)x`.
pub fn cross_check_composition<T: Real>(
    m: &ComposedModel<T>,
    samples: usize,
    radius: T,
    seed: u64,
    tol: T,
) -> Result<CertificateReport> {
    let tolf = tol.to_f64_lossy();
    let c = m.certificate_matrix()?;
    let mut dissipation = Worst::new();
    let mut supply = Worst::new();
    let mut assembly = Worst::new();
    let mut rate = Worst::new();
    for x in ball_points(m.n(), samples, radius, seed) {
        let (mut lhs, mut decay, mut stacked) = (T::zero(), T::zero(), T::zero());
        for ((s, sp), &mu) in m.subsystems.iter().zip(m.spec.subsystems()).zip(&m.mu) {
            let xi = m.spec.select_states(sp.index, &x);
            let wi = m.spec.select_inputs(sp.index, &x);
            let fi = eval_subsystem_field(s, &xi, &wi)?;
            let px = s.p.as_mat().matvec(&xi)?;
            lhs += mu * T::lit(2.0) * dot(&px, &fi);
            decay -= mu * s.xi * s.storage(&xi);
            stacked += mu * s.supply(&xi, &wi);
        }
        let quad = c.quad_form(&x);
        let (v, _) = global_lyapunov(m, &x);
        dissipation.offer((lhs - (decay + stacked)).to_f64_lossy(), || to_f64(&x));
        supply.offer(stacked.to_f64_lossy(), || to_f64(&x));
        assembly.offer((stacked - quad).abs().to_f64_lossy(), || to_f64(&x));
        rate.offer((decay + m.rates.xi * v).to_f64_lossy(), || to_f64(&x));
    }
    let mut rep = CertificateReport::new();
    rep.push("dissipation", dissipation.margin, tolf, dissipation.witness);
    rep.push("supply_nonpositive", supply.margin, tolf, supply.witness);
    rep.push("supply_assembly", assembly.margin, tolf, assembly.witness);
    rep.push("rate", rate.margin, tolf, rate.witness);
    Ok(rep)
}
