//! Dense semidefinite programming with a log-det barrier.
//!
//! A problem is a convex quadratic objective in a decision vector `z`, a list
//! of affine matrix constraints `F(z) = F₀ + Σ zₗ Fₗ ⪯ −ε·I`, and optional
//! per-variable bounds. [`solve_sdp`] runs a phase-I search for a strictly
//! feasible point (minimising a shared slack) and then a barrier method with
//! damped Newton centering steps.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{Mat, SymMat};
use crate::scalar::{dot, Real};

/// Affine symmetric-matrix map `z ↦ constant + Σ z[var]·matrix`.
#[derive(Clone, Debug)]
pub struct LmiBlock<T> {
    constant: SymMat<T>,
    terms: Vec<(usize, SymMat<T>)>,
}

impl<T: Real> LmiBlock<T> {
    pub fn new(constant: SymMat<T>) -> Self {
        Self {
            constant,
            terms: Vec::new(),
        }
    }

    pub fn zeros(dim: usize) -> Self {
        Self::new(SymMat::zeros(dim))
    }

    pub fn dim(&self) -> usize {
        self.constant.dim()
    }

    pub fn constant(&self) -> &SymMat<T> {
        &self.constant
    }

    pub fn terms(&self) -> &[(usize, SymMat<T>)] {
        &self.terms
    }

    pub fn add_constant(&mut self, m: &SymMat<T>) {
        self.constant.axpy(T::one(), m);
    }

    /// Adds `coef·m` to the coefficient of `var`, merging repeated variables.
    pub fn add_term(&mut self, var: usize, coef: T, m: &SymMat<T>) {
        assert_eq!(m.dim(), self.dim(), "term dimension");
        if let Some((_, existing)) = self.terms.iter_mut().find(|(v, _)| *v == var) {
            existing.axpy(coef, m);
        } else {
            self.terms.push((var, m.scaled(coef)));
        }
    }

    pub fn eval(&self, z: &[T]) -> SymMat<T> {
        let mut out = self.constant.clone();
        for (var, m) in &self.terms {
            out.axpy(z[*var], m);
        }
        out
    }
}

/// Places a `p×q` block `b` at `(r0, c0)` of an `n×n` symmetric matrix,
/// mirroring it to `(c0, r0)`. Diagonal placements (`r0 == c0`) need a
/// symmetric `b`.
pub fn embed<T: Real>(n: usize, r0: usize, c0: usize, b: &Mat<T>) -> SymMat<T> {
    let mut m = SymMat::zeros(n);
    for i in 0..b.rows() {
        for j in 0..b.cols() {
            let (r, c) = (r0 + i, c0 + j);
            if r0 == c0 {
                m.set(r, c, b[(i, j)]);
            } else {
                let cur = m[(r, c)];
                m.set(r, c, cur + b[(i, j)]);
            }
        }
    }
    m
}

/// Objective `½ zᵀ H z + cᵀ z + c₀`.
#[derive(Clone, Debug)]
pub struct QuadObjective<T> {
    pub hessian: SymMat<T>,
    pub linear: Vec<T>,
    pub constant: T,
}

impl<T: Real> QuadObjective<T> {
    pub fn zero(dim: usize) -> Self {
        Self {
            hessian: SymMat::zeros(dim),
            linear: vec![T::zero(); dim],
            constant: T::zero(),
        }
    }

    pub fn linear(c: Vec<T>) -> Self {
        let n = c.len();
        Self {
            hessian: SymMat::zeros(n),
            linear: c,
            constant: T::zero(),
        }
    }

    pub fn value(&self, z: &[T]) -> T {
        T::lit(0.5) * self.hessian.quad_form(z) + dot(&self.linear, z) + self.constant
    }

    fn gradient(&self, z: &[T]) -> Vec<T> {
        let mut g = self.linear.clone();
        self.hessian.as_mat().matvec_acc(z, T::one(), &mut g);
        g
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Bound<T> {
    pub lower: Option<T>,
    pub upper: Option<T>,
}

impl<T: Real> Bound<T> {
    pub fn free() -> Self {
        Self {
            lower: None,
            upper: None,
        }
    }

    pub fn between(lower: T, upper: T) -> Self {
        Self {
            lower: Some(lower),
            upper: Some(upper),
        }
    }

    pub fn at_least(lower: T) -> Self {
        Self {
            lower: Some(lower),
            upper: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SdpProblem<T> {
    pub decision_dim: usize,
    pub objective: QuadObjective<T>,
    /// Each block is required to satisfy `F(z) ⪯ −epsilon_strict·I`.
    pub constraint_blocks: Vec<LmiBlock<T>>,
    pub bound_constraints: Vec<Bound<T>>,
    pub epsilon_strict: T,
    /// Optional warm start; phase I is skipped when it is strictly feasible.
    pub start: Option<Vec<T>>,
}

impl<T: Real> SdpProblem<T> {
    pub fn new(decision_dim: usize, objective: QuadObjective<T>) -> Self {
        Self {
            decision_dim,
            objective,
            constraint_blocks: Vec::new(),
            bound_constraints: vec![Bound::free(); decision_dim],
            epsilon_strict: T::zero(),
            start: None,
        }
    }

    pub fn add_block(&mut self, block: LmiBlock<T>) {
        self.constraint_blocks.push(block);
    }

    fn validate(&self) -> Result<()> {
        let m = self.decision_dim;
        if self.objective.hessian.dim() != m || self.objective.linear.len() != m {
            return Err(Error::InvalidProblem("objective dimension".into()));
        }
        if self.bound_constraints.len() != m {
            return Err(Error::InvalidProblem("bounds dimension".into()));
        }
        if self.epsilon_strict < T::zero() {
            return Err(Error::InvalidProblem("epsilon_strict must be >= 0".into()));
        }
        if let Some(s) = &self.start {
            if s.len() != m {
                return Err(Error::InvalidProblem("start dimension".into()));
            }
        }
        for (j, b) in self.constraint_blocks.iter().enumerate() {
            for (var, f) in &b.terms {
                if *var >= m {
                    return Err(Error::InvalidProblem(format!("block {j} references z[{var}]")));
                }
                if f.dim() != b.dim() {
                    return Err(Error::InvalidProblem(format!("block {j} term dimension")));
                }
            }
        }
        for b in &self.bound_constraints {
            if let (Some(l), Some(u)) = (b.lower, b.upper) {
                if l > u {
                    return Err(Error::InvalidProblem("lower bound above upper".into()));
                }
            }
        }
        if m > 0 {
            let h = &self.objective.hessian;
            let scale = T::one().max(h.as_mat().max_abs());
            if h.min_eig()? < -T::lit(1e-10) * scale {
                return Err(Error::InvalidProblem("objective Hessian not PSD".into()));
            }
        }
        Ok(())
    }
}

/// Solver knobs. `max_iter` caps barrier (outer) rounds; `max_newton` caps the
/// Newton steps spent centering in each round.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct SolverOptions {
    pub max_iter: usize,
    pub max_newton: usize,
    pub feas_tol: f64,
    pub gap_tol: f64,
    pub barrier_growth: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            max_iter: 200,
            max_newton: 100,
            feas_tol: 1e-8,
            gap_tol: 1e-9,
            barrier_growth: 20.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SdpStatus {
    Optimal,
    Feasible,
    Infeasible,
    MaxIter,
}

#[derive(Clone, Debug)]
pub struct SdpSolution<T> {
    pub z: Vec<T>,
    pub objective_value: T,
    pub status: SdpStatus,
    /// Largest eigenvalue of `F(z)` over all constraint blocks (bounds excluded).
    pub max_block_eig: T,
    pub newton_steps: usize,
}

impl<T> SdpSolution<T> {
    pub fn is_feasible(&self) -> bool {
        matches!(self.status, SdpStatus::Optimal | SdpStatus::Feasible)
    }
}

/// `G(z) = g0 + Σ z_l G_l`, required `⪯ 0` (strictly, inside the barrier).
struct Constraint<T> {
    g0: SymMat<T>,
    terms: Vec<(usize, SymMat<T>)>,
}

impl<T: Real> Constraint<T> {
    fn eval(&self, z: &[T]) -> SymMat<T> {
        let mut out = self.g0.clone();
        for (var, m) in &self.terms {
            out.axpy(z[*var], m);
        }
        out
    }

    fn dim(&self) -> usize {
        self.g0.dim()
    }
}

fn scalar_mat<T: Real>(v: T) -> SymMat<T> {
    SymMat::from_diag(&[v])
}

fn lower_constraints<T: Real>(p: &SdpProblem<T>) -> Vec<Constraint<T>> {
    let mut out = Vec::new();
    for b in &p.constraint_blocks {
        let mut g0 = b.constant.clone();
        g0.add_diag(p.epsilon_strict);
        out.push(Constraint {
            g0,
            terms: b.terms.clone(),
        });
    }
    for (i, b) in p.bound_constraints.iter().enumerate() {
        if let Some(l) = b.lower {
            out.push(Constraint {
                g0: scalar_mat(l),
                terms: vec![(i, scalar_mat(-T::one()))],
            });
        }
        if let Some(u) = b.upper {
            out.push(Constraint {
                g0: scalar_mat(-u),
                terms: vec![(i, scalar_mat(T::one()))],
            });
        }
    }
    out
}

/// Max eigenvalue of every constraint at `z`, or `None` if some block fails to evaluate.
fn worst_eig<T: Real>(cons: &[Constraint<T>], z: &[T]) -> Option<T> {
    let mut worst = T::neg_infinity();
    for c in cons {
        let e = c.eval(z).max_eig().ok()?;
        worst = worst.max(e);
    }
    Some(worst)
}

fn strictly_feasible<T: Real>(cons: &[Constraint<T>], z: &[T]) -> bool {
    cons.iter().all(|c| c.eval(z).scaled(-T::one()).cholesky().is_some())
}

/// Barrier value `−Σ log det(−G_j(z))`, `None` outside the domain.
fn barrier_value<T: Real>(cons: &[Constraint<T>], z: &[T]) -> Option<T> {
    let mut acc = T::zero();
    for c in cons {
        let s = c.eval(z).scaled(-T::one());
        let ch = s.cholesky()?;
        acc -= ch.log_det();
    }
    acc.is_finite().then_some(acc)
}

struct Barrier<'a, T> {
    cons: &'a [Constraint<T>],
    obj: &'a QuadObjective<T>,
    degree: T,
}

impl<'a, T: Real> Barrier<'a, T> {
    fn new(cons: &'a [Constraint<T>], obj: &'a QuadObjective<T>) -> Self {
        let degree = T::from_usize_lossy(cons.iter().map(Constraint::dim).sum::<usize>());
        Self { cons, obj, degree }
    }

    fn merit(&self, tau: T, z: &[T]) -> Option<T> {
        Some(tau * self.obj.value(z) + barrier_value(self.cons, z)?)
    }

    /// Gradient and Hessian of `tau·f + φ` at a strictly feasible `z`.
    fn derivatives(&self, tau: T, z: &[T]) -> (Vec<T>, Mat<T>) {
        let m = z.len();
        let mut grad: Vec<T> = self.obj.gradient(z).into_iter().map(|g| tau * g).collect();
        let mut hess = self.obj.hessian.as_mat().scaled(tau);
        for c in self.cons {
            let s = c.eval(z).scaled(-T::one());
            let sinv = match s.cholesky() {
                Some(ch) => ch.inverse(),
                None => continue,
            };
            let ys: Vec<(usize, Mat<T>)> = c
                .terms
                .iter()
                .map(|(var, g)| (*var, sinv.as_mat().matmul(g.as_mat()).expect("square")))
                .collect();
            let b = c.dim();
            for (a, (va, ya)) in ys.iter().enumerate() {
                let tr: T = (0..b).map(|i| ya[(i, i)]).sum();
                grad[*va] += tr;
                for (vb, yb) in ys.iter().skip(a) {
                    let mut t = T::zero();
                    for i in 0..b {
                        for k in 0..b {
                            t += ya[(i, k)] * yb[(k, i)];
                        }
                    }
                    hess[(*va, *vb)] += t;
                    if va != vb {
                        hess[(*vb, *va)] += t;
                    }
                }
            }
        }
        debug_assert_eq!(hess.rows(), m);
        (grad, hess)
    }

    /// Damped Newton centering. Returns steps taken.
    fn center(&self, tau: T, z: &mut Vec<T>, max_newton: usize) -> usize {
        let mut steps = 0;
        for _ in 0..max_newton {
            let (grad, hess) = self.derivatives(tau, z);
            let dir = match newton_direction(&hess, &grad) {
                Some(d) => d,
                None => break,
            };
            let decrement = -dot(&grad, &dir);
            if !(decrement > T::lit(2e-12)) {
                break;
            }
            let f0 = match self.merit(tau, z) {
                Some(f) => f,
                None => break,
            };
            let mut alpha = T::one();
            let mut accepted = false;
            while alpha > T::lit(1e-14) {
                let trial: Vec<T> = z.iter().zip(&dir).map(|(&a, &d)| a + alpha * d).collect();
                if let Some(f1) = self.merit(tau, &trial) {
                    if f1 <= f0 - T::lit(0.01) * alpha * decrement {
                        *z = trial;
                        accepted = true;
                        break;
                    }
                }
                alpha *= T::lit(0.5);
            }
            steps += 1;
            if !accepted {
                break;
            }
        }
        steps
    }
}

fn newton_direction<T: Real>(hess: &Mat<T>, grad: &[T]) -> Option<Vec<T>> {
    let h = SymMat::symmetrize(hess).ok()?;
    let scale = T::one().max(h.as_mat().max_abs());
    let mut jitter = T::zero();
    for _ in 0..12 {
        let mut hj = h.clone();
        hj.add_diag(jitter);
        if let Some(ch) = hj.cholesky() {
            let d = ch.solve(grad);
            if d.iter().all(|x| x.is_finite()) {
                return Some(d.into_iter().map(|x| -x).collect());
            }
        }
        jitter = if jitter == T::zero() {
            T::epsilon() * scale * T::lit(10.0)
        } else {
            jitter * T::lit(100.0)
        };
    }
    None
}

fn max_lmi_eig<T: Real>(p: &SdpProblem<T>, z: &[T]) -> Result<T> {
    let mut worst = T::neg_infinity();
    for b in &p.constraint_blocks {
        worst = worst.max(b.eval(z).max_eig()?);
    }
    Ok(worst)
}

fn finish<T: Real>(p: &SdpProblem<T>, z: Vec<T>, status: SdpStatus, steps: usize) -> Result<SdpSolution<T>> {
    let objective_value = p.objective.value(&z);
    let max_block_eig = max_lmi_eig(p, &z)?;
    Ok(SdpSolution {
        z,
        objective_value,
        status,
        max_block_eig,
        newton_steps: steps,
    })
}

enum PhaseOne<T> {
    Interior(Vec<T>),
    Boundary(Vec<T>),
    Infeasible(Vec<T>),
    Undecided(Vec<T>),
}

fn phase_one<T: Real>(
    cons: &[Constraint<T>],
    z0: &[T],
    opts: &SolverOptions,
    steps: &mut usize,
) -> PhaseOne<T> {
    let m = z0.len();
    let slack = m;
    let aug: Vec<Constraint<T>> = cons
        .iter()
        .map(|c| {
            let mut terms = c.terms.clone();
            terms.push((slack, SymMat::scaled_identity(c.dim(), -T::one())));
            Constraint {
                g0: c.g0.clone(),
                terms,
            }
        })
        .collect();
    let s0 = worst_eig(cons, z0).unwrap_or(T::one());
    let mut z = z0.to_vec();
    z.push(s0.max(T::zero()) + T::one());
    let mut c = vec![T::zero(); m + 1];
    c[slack] = T::one();
    let obj = QuadObjective::linear(c);
    let barrier = Barrier::new(&aug, &obj);

    let feas_tol = T::lit(opts.feas_tol);
    let interior_margin = T::lit(100.0) * feas_tol;
    let growth = T::lit(opts.barrier_growth);
    let gap_tol = T::lit(opts.gap_tol);
    let mut tau = T::one();
    for _ in 0..opts.max_iter {
        *steps += barrier.center(tau, &mut z, opts.max_newton);
        let x = &z[..m];
        let actual = worst_eig(cons, x).unwrap_or(T::infinity());
        if actual < -interior_margin && strictly_feasible(cons, x) {
            return PhaseOne::Interior(x.to_vec());
        }
        let gap = barrier.degree / tau;
        if z[slack] - gap > feas_tol {
            return PhaseOne::Infeasible(x.to_vec());
        }
        if gap <= gap_tol * T::one().max(z[slack].abs()) {
            return if actual < T::zero() && strictly_feasible(cons, x) {
                PhaseOne::Interior(x.to_vec())
            } else if actual <= feas_tol {
                PhaseOne::Boundary(x.to_vec())
            } else {
                PhaseOne::Infeasible(x.to_vec())
            };
        }
        tau *= growth;
    }
    z.truncate(m);
    PhaseOne::Undecided(z)
}

/// Solves `p` to the tolerances in `opts`.
///
/// Feasible and optimal returns always satisfy every block within
/// `feas_tol`. Status `Feasible` means a point on the boundary of an
/// interior-free feasible set, or an interior point when the barrier schedule
/// ran out of rounds.
pub fn solve_sdp<T: Real>(p: &SdpProblem<T>, opts: &SolverOptions) -> Result<SdpSolution<T>> {
    p.validate()?;
    let m = p.decision_dim;
    let cons = lower_constraints(p);
    let mut steps = 0;

    let z0 = p.start.clone().unwrap_or_else(|| {
        p.bound_constraints
            .iter()
            .map(|b| match (b.lower, b.upper) {
                (Some(l), Some(u)) => T::lit(0.5) * (l + u),
                (Some(l), None) => l + T::one(),
                (None, Some(u)) => u - T::one(),
                (None, None) => T::zero(),
            })
            .collect()
    });

    let mut z = if strictly_feasible(&cons, &z0) {
        z0
    } else {
        match phase_one(&cons, &z0, opts, &mut steps) {
            PhaseOne::Interior(z) => z,
            PhaseOne::Boundary(z) => return finish(p, z, SdpStatus::Feasible, steps),
            PhaseOne::Infeasible(z) => return finish(p, z, SdpStatus::Infeasible, steps),
            PhaseOne::Undecided(z) => return finish(p, z, SdpStatus::MaxIter, steps),
        }
    };

    if m == 0 {
        return finish(p, z, SdpStatus::Optimal, steps);
    }

    let barrier = Barrier::new(&cons, &p.objective);
    let growth = T::lit(opts.barrier_growth);
    let gap_tol = T::lit(opts.gap_tol);
    let f0 = p.objective.value(&z).abs();
    let mut tau = if barrier.degree > T::zero() {
        T::one().max(barrier.degree / (T::one() + f0)).min(T::lit(1e3))
    } else {
        T::one()
    };
    for _ in 0..opts.max_iter {
        steps += barrier.center(tau, &mut z, opts.max_newton);
        let gap = barrier.degree / tau;
        if gap <= gap_tol * T::one().max(p.objective.value(&z).abs()) {
            return finish(p, z, SdpStatus::Optimal, steps);
        }
        tau *= growth;
    }
    finish(p, z, SdpStatus::Feasible, steps)
}
