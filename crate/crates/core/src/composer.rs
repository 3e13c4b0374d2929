//! Composition of subsystem certificates: multipliers `μᵢ` making
//! `[M; I]ᵀ 𝐃(μ₁D₁, …, μ_N D_N) [M; I] ⪯ 0`, the global field and the
//! global Lyapunov function `V(x) = Σ μᵢ xᵢᵀPᵢxᵢ`.
//!
//! All matrices here are in global coordinates: `M` maps the global state to
//! the stacked inputs, and each subsystem's state is selected from the
//! global state by its coordinate list.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::interconnection::InterconnectionSpec;
use crate::learner::{eval_subsystem_field, SubsystemModel};
use crate::linalg::{Mat, SymMat};
use crate::scalar::Real;
use crate::sdp::{solve_sdp, Bound, LmiBlock, QuadObjective, SdpProblem, SolverOptions};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct GlobalRates<T> {
    /// `min μᵢδ̲ᵢ`: `V(x) ≥ delta_lo·‖x‖²`.
    pub delta_lo: T,
    /// `N·max μᵢδ̄ᵢ`: `V(x) ≤ delta_hi·‖x‖²`.
    pub delta_hi: T,
    /// `min ξᵢ`: `V̇ ≤ −xi·V`.
    pub xi: T,
    /// `N·min δ̲ᵢ`, stated for the unweighted sum `Σ Vᵢ`. Reported only.
    pub sum_delta_lo: T,
    /// `N·max δ̄ᵢ`, stated for the unweighted sum `Σ Vᵢ`. Reported only.
    pub sum_delta_hi: T,
    /// `min μᵢξᵢ`. Reported only; it equals `xi` when all `ξᵢ` agree and
    /// `min μ = 1`.
    pub mu_xi: T,
}

impl<T: Real> GlobalRates<T> {
    pub fn new(subsystems: &[SubsystemModel<T>], mu: &[T]) -> Self {
        let nf = T::from_usize_lossy(subsystems.len());
        let min = |f: &dyn Fn(usize) -> T| {
            (0..subsystems.len()).map(f).fold(T::infinity(), T::min)
        };
        let max = |f: &dyn Fn(usize) -> T| {
            (0..subsystems.len()).map(f).fold(T::neg_infinity(), T::max)
        };
        Self {
            delta_lo: min(&|i| mu[i] * subsystems[i].delta_lo),
            delta_hi: nf * max(&|i| mu[i] * subsystems[i].delta_hi),
            xi: min(&|i| subsystems[i].xi),
            sum_delta_lo: nf * min(&|i| subsystems[i].delta_lo),
            sum_delta_hi: nf * max(&|i| subsystems[i].delta_hi),
            mu_xi: min(&|i| mu[i] * subsystems[i].xi),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct ComposedModel<T: Real> {
    pub spec: InterconnectionSpec,
    pub subsystems: Vec<SubsystemModel<T>>,
    pub mu: Vec<T>,
    pub rates: GlobalRates<T>,
    /// Largest eigenvalue of the composition certificate at `mu`.
    pub certificate_eig: T,
    /// False when the model was assembled without a passing certificate.
    pub certified: bool,
}

fn check_shapes<T: Real>(subsystems: &[SubsystemModel<T>], spec: &InterconnectionSpec, m: &Mat<T>) -> Result<()> {
    if subsystems.len() != spec.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} subsystem models for {} subsystems",
            subsystems.len(),
            spec.len()
        )));
    }
    for (s, sp) in subsystems.iter().zip(spec.subsystems()) {
        if s.state_dim != sp.state_dim() || s.input_dim != sp.input_dim() || s.d.dim() != s.state_dim + s.input_dim {
            return Err(Error::DimensionMismatch(format!(
                "subsystem {} dimensions do not match the topology",
                sp.index + 1
            )));
        }
    }
    if m.rows() != spec.input_total() || m.cols() != spec.n() {
        return Err(Error::DimensionMismatch(format!(
            "interconnection matrix is {}x{}, expected {}x{}",
            m.rows(),
            m.cols(),
            spec.input_total(),
            spec.n()
        )));
    }
    Ok(())
}

/// `Gᵢᵀ Dᵢ Gᵢ` with `Gᵢ = [Mᵢ; Eᵢ]` for every subsystem, where `Mᵢ` are the
/// rows of `m` feeding subsystem `i` and `Eᵢ` selects its states.
pub fn certificate_terms<T: Real>(
    subsystems: &[SubsystemModel<T>],
    spec: &InterconnectionSpec,
    m: &Mat<T>,
) -> Result<Vec<SymMat<T>>> {
    check_shapes(subsystems, spec, m)?;
    let offsets = spec.input_offsets();
    let n = spec.n();
    subsystems
        .iter()
        .zip(spec.subsystems())
        .zip(offsets)
        .map(|((s, sp), off)| {
            let p = sp.input_dim();
            let g = Mat::from_fn(p + sp.state_dim(), n, |r, c| {
                if r < p {
                    m[(off + r, c)]
                } else if sp.state_coords[r - p] == c {
                    T::one()
                } else {
                    T::zero()
                }
            });
            s.d.congruence(&g)
        })
        .collect()
}

/// `Σ μᵢ Gᵢᵀ Dᵢ Gᵢ`, an `n×n` symmetric matrix linear in `mu`.
pub fn assemble_certificate_matrix<T: Real>(
    subsystems: &[SubsystemModel<T>],
    spec: &InterconnectionSpec,
    m: &Mat<T>,
    mu: &[T],
) -> Result<SymMat<T>> {
    let terms = certificate_terms(subsystems, spec, m)?;
    if mu.len() != terms.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} multipliers for {} subsystems",
            mu.len(),
            terms.len()
        )));
    }
    Ok(weighted_sum(&terms, mu, spec.n()))
}

fn weighted_sum<T: Real>(terms: &[SymMat<T>], mu: &[T], n: usize) -> SymMat<T> {
    let mut c = SymMat::zeros(n);
    for (t, &u) in terms.iter().zip(mu) {
        c.axpy(u, t);
    }
    c
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ComposeOptions {
    pub mu_min: f64,
    /// Upper bound on each multiplier relative to `mu_min`.
    pub mu_cap_ratio: f64,
    /// Largest certificate eigenvalue accepted as `⪯ 0`.
    pub tol: f64,
}

impl Default for ComposeOptions {
    fn default() -> Self {
        Self {
            mu_min: 1.0,
            mu_cap_ratio: 1e4,
            tol: 1e-8,
        }
    }
}

/// Finds multipliers making the certificate NSD, maximising the margin and
/// rescaling so that `min μᵢ = mu_min`.
pub fn solve_mu<T: Real>(
    subsystems: &[SubsystemModel<T>],
    spec: &InterconnectionSpec,
    m: &Mat<T>,
    opts: &ComposeOptions,
    solver: &SolverOptions,
) -> Result<Vec<T>> {
    if !(opts.mu_min > 0.0) || !(opts.mu_cap_ratio >= 1.0) {
        return Err(Error::InvalidConfig("mu_min must be > 0 and mu_cap_ratio >= 1".into()));
    }
    let terms = certificate_terms(subsystems, spec, m)?;
    let n = spec.n();
    let nsub = terms.len();
    let mu_min = T::lit(opts.mu_min);
    let tol = T::lit(opts.tol);

    let mu = if m.rows() == 0 || nsub == 1 {
        vec![mu_min; nsub]
    } else {
        let t_var = nsub;
        let mut c = vec![T::zero(); nsub + 1];
        c[t_var] = -T::one();
        let mut prob = SdpProblem::new(nsub + 1, QuadObjective::linear(c));
        let mut blk = LmiBlock::zeros(n);
        for (i, t) in terms.iter().enumerate() {
            blk.add_term(i, T::one(), t);
        }
        blk.add_term(t_var, T::one(), &SymMat::identity(n));
        prob.add_block(blk);
        let cap = mu_min * T::lit(opts.mu_cap_ratio);
        for i in 0..nsub {
            prob.bound_constraints[i] = Bound::between(mu_min, cap);
        }
        let mut z0 = vec![T::lit(0.5) * (mu_min + cap); nsub + 1];
        let c0 = weighted_sum(&terms, &z0[..nsub], n);
        z0[t_var] = -c0.max_eig()? - T::one();
        prob.start = Some(z0);
        let sol = solve_sdp(&prob, solver)?;
        let mut mu = sol.z[..nsub].to_vec();
        let lo = mu.iter().copied().fold(T::infinity(), T::min);
        if lo > T::zero() {
            let s = mu_min / lo;
            for v in &mut mu {
                *v *= s;
            }
        }
        // equal weights certify by construction of the supply template; keep
        // them if the solver's answer is worse
        let equal = vec![mu_min; nsub];
        if weighted_sum(&terms, &equal, n).max_eig()? < weighted_sum(&terms, &mu, n).max_eig()? {
            mu = equal;
        }
        mu
    };

    let cmat = weighted_sum(&terms, &mu, n);
    let eig = cmat.eigen()?;
    let top = eig.values[n - 1];
    if top > tol {
        return Err(Error::CompositionInfeasible {
            max_eig: top.to_f64_lossy(),
            witness: eig.vector(n - 1).iter().map(|v| v.to_f64_lossy()).collect(),
            mu: mu.iter().map(|v| v.to_f64_lossy()).collect(),
        });
    }
    Ok(mu)
}

/// Assembles the composed model and re-checks the certificate at `mu`.
pub fn compose<T: Real>(
    spec: &InterconnectionSpec,
    subsystems: Vec<SubsystemModel<T>>,
    mu: Vec<T>,
    tol: T,
) -> Result<ComposedModel<T>> {
    let model = ComposedModel::uncertified(spec, subsystems, mu)?;
    if model.certificate_eig > tol {
        return Err(Error::CertificateViolation {
            max_eig: model.certificate_eig.to_f64_lossy(),
            tol: tol.to_f64_lossy(),
        });
    }
    Ok(ComposedModel {
        certified: true,
        ..model
    })
}

impl<T: Real> ComposedModel<T> {
    /// Assembles the model without requiring the certificate to hold.
    pub fn uncertified(spec: &InterconnectionSpec, subsystems: Vec<SubsystemModel<T>>, mu: Vec<T>) -> Result<Self> {
        if mu.len() != subsystems.len() || mu.iter().any(|&v| !(v > T::zero())) {
            return Err(Error::InvalidConfig("multipliers must be positive, one per subsystem".into()));
        }
        let cmat = assemble_certificate_matrix(&subsystems, spec, &spec.matrix(), &mu)?;
        let certificate_eig = cmat.max_eig()?;
        let rates = GlobalRates::new(&subsystems, &mu);
        Ok(Self {
            spec: spec.clone(),
            subsystems,
            mu,
            rates,
            certificate_eig,
            certified: false,
        })
    }

    pub fn n(&self) -> usize {
        self.spec.n()
    }

    pub fn certificate_matrix(&self) -> Result<SymMat<T>> {
        assemble_certificate_matrix(&self.subsystems, &self.spec, &self.spec.matrix(), &self.mu)
    }

    /// Largest subsystem training radius, in global coordinates.
    pub fn data_radius(&self) -> T {
        self.subsystems
            .iter()
            .map(|s| s.info.data_radius)
            .fold(T::zero(), T::max)
    }
}

/// `f(x)`: every subsystem evaluated at its own states and inputs, scattered
/// back to global coordinates.
pub fn global_field<T: Real>(m: &ComposedModel<T>, x: &[T]) -> Result<Vec<T>> {
    if x.len() != m.n() {
        return Err(Error::DimensionMismatch(format!(
            "state has dimension {}, model has {}",
            x.len(),
            m.n()
        )));
    }
    let mut out = vec![T::zero(); m.n()];
    for (s, sp) in m.subsystems.iter().zip(m.spec.subsystems()) {
        let xi = m.spec.select_states(sp.index, x);
        let wi = m.spec.select_inputs(sp.index, x);
        let fi = eval_subsystem_field(s, &xi, &wi)?;
        for (&c, v) in sp.state_coords.iter().zip(fi) {
            out[c] = v;
        }
    }
    Ok(out)
}

/// `V(x) = Σ μᵢ xᵢᵀPᵢxᵢ` and its gradient in global coordinates.
pub fn global_lyapunov<T: Real>(m: &ComposedModel<T>, x: &[T]) -> (T, Vec<T>) {
    let mut v = T::zero();
    let mut grad = vec![T::zero(); m.n()];
    let two = T::lit(2.0);
    for ((s, sp), &mu) in m.subsystems.iter().zip(m.spec.subsystems()).zip(&m.mu) {
        let xi = m.spec.select_states(sp.index, x);
        let px = s.p.as_mat().matvec(&xi).expect("shape");
        v += mu * xi.iter().zip(&px).map(|(&a, &b)| a * b).sum::<T>();
        for (&c, g) in sp.state_coords.iter().zip(px) {
            grad[c] = two * mu * g;
        }
    }
    (v, grad)
}
