//! Per-subsystem learning of LPV dynamics `fᵢ(x, w) = Σₖ γₖ(x)(Aₖx + Bₖw)`
//! together with a quadratic storage `V = xᵀPx` and supply rate
//! `[w; x]ᵀ D [w; x]`.
//!
//! The bilinear conditions are handled by alternating two convex problems:
//! Stage P fixes `(A, B)` and maximises the LMI margin over `(P, D)`;
//! Stage AB fixes `(P, D)` and minimises the tracking error over `(A, B)`.
//!
//! Stage P also bounds `D ⪯ s·diag(I_p, −diag(fᵢ))` with a shared constant
//! `s` (`supply_scale`), where `fᵢ` counts how many subsystems read each own
//! coordinate. Summed over subsystems these bounds cancel exactly in the
//! composition certificate, so subsystems learned independently remain
//! composable with equal multipliers.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::demonstrations::SubsystemData;
use crate::error::{Error, Result};
use crate::gmm::GmmModel;
use crate::linalg::{Mat, SymMat};
use crate::scalar::{dot, Real};
use crate::sdp::{embed, solve_sdp, LmiBlock, QuadObjective, SdpProblem, SolverOptions};
use crate::verifier::{CertificateReport, Worst};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields, bound = "T: Real")]
pub struct SubsystemHyperparams<T> {
    pub delta_lo: T,
    pub delta_hi: T,
    pub xi: T,
    pub d_max: T,
    pub epsilon_strict: T,
    pub max_outer_iter: usize,
    pub outer_tol: T,
    pub ridge: T,
    /// Shared scale `s` of the supply-rate template.
    pub supply_scale: T,
}

impl<T: Real> Default for SubsystemHyperparams<T> {
    fn default() -> Self {
        Self {
            delta_lo: T::lit(0.1),
            delta_hi: T::lit(10.0),
            xi: T::lit(0.1),
            d_max: T::lit(10.0),
            epsilon_strict: T::lit(1e-6),
            max_outer_iter: 20,
            outer_tol: T::lit(1e-4),
            ridge: T::lit(1e-8),
            supply_scale: T::one(),
        }
    }
}

impl<T: Real> SubsystemHyperparams<T> {
    pub fn validate(&self) -> Result<()> {
        let pos = [
            ("delta_lo", self.delta_lo),
            ("delta_hi", self.delta_hi),
            ("xi", self.xi),
            ("d_max", self.d_max),
            ("outer_tol", self.outer_tol),
            ("supply_scale", self.supply_scale),
        ];
        for (name, v) in pos {
            if !(v > T::zero()) || !v.is_finite() {
                return Err(Error::InvalidConfig(format!("{name} must be positive, got {v}")));
            }
        }
        if self.epsilon_strict < T::zero() || self.ridge < T::zero() {
            return Err(Error::InvalidConfig("epsilon_strict and ridge must be >= 0".into()));
        }
        if self.delta_lo > self.delta_hi {
            return Err(Error::InvalidConfig(format!(
                "delta_lo ({}) exceeds delta_hi ({})",
                self.delta_lo, self.delta_hi
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct SubsystemModel<T: Real> {
    pub index: usize,
    pub state_dim: usize,
    pub input_dim: usize,
    pub a: Vec<Mat<T>>,
    pub b: Vec<Mat<T>>,
    #[serde(rename = "P")]
    pub p: SymMat<T>,
    /// Supply-rate matrix over `[w; x]`, size `input_dim + state_dim`.
    #[serde(rename = "D")]
    pub d: SymMat<T>,
    pub delta_lo: T,
    pub delta_hi: T,
    pub xi: T,
    pub d_max: T,
    pub epsilon_strict: T,
    pub gmm: GmmModel<T>,
    /// Mean squared velocity residual on the training data.
    pub objective: T,
    pub info: LearnInfo<T>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct LearnInfo<T> {
    pub outer_iterations: usize,
    /// Number of pullback steps applied before Stage P succeeded.
    pub pullback_steps: usize,
    pub stage_p_margin: T,
    pub rank_deficient: bool,
    /// Largest `‖[x; w]‖` in the training data.
    pub data_radius: T,
    /// Objective after every accepted iterate, starting with the initial fit.
    pub objective_history: Vec<T>,
}

impl<T: Real> SubsystemModel<T> {
    pub fn k(&self) -> usize {
        self.a.len()
    }

    pub fn d11(&self) -> SymMat<T> {
        self.d.principal_block(0, self.input_dim)
    }

    pub fn d12(&self) -> Mat<T> {
        self.d.as_mat().block(0, self.input_dim, self.input_dim, self.state_dim)
    }

    pub fn d22(&self) -> SymMat<T> {
        self.d.principal_block(self.input_dim, self.state_dim)
    }

    /// The matrix inequality block for component `k` (required `≺ 0`).
    pub fn block(&self, k: usize) -> SymMat<T> {
        small_gain_block(&self.a[k], &self.b[k], &self.p, &self.d, self.xi)
    }

    pub fn storage(&self, x: &[T]) -> T {
        self.p.quad_form(x)
    }

    /// `[w; x]ᵀ D [w; x]`.
    pub fn supply(&self, x: &[T], w: &[T]) -> T {
        let s: Vec<T> = w.iter().chain(x).copied().collect();
        self.d.quad_form(&s)
    }
}

/// `[[−D11, BᵀP − D12], [⋆, ξP + AᵀP + PA − D22]]` over `[w; x]`.
pub fn small_gain_block<T: Real>(a: &Mat<T>, b: &Mat<T>, p: &SymMat<T>, d: &SymMat<T>, xi: T) -> SymMat<T> {
    let n = a.rows();
    let m = b.cols();
    let q = n + m;
    let pm = p.as_mat();
    let ap = a.transpose().matmul(pm).expect("shape");
    let btp = b.transpose().matmul(pm).expect("shape");
    let mut out = SymMat::from_upper_fn(q, |i, j| {
        if j < m {
            T::zero()
        } else if i < m {
            btp[(i, j - m)]
        } else {
            let (r, c) = (i - m, j - m);
            xi * pm[(r, c)] + ap[(r, c)] + ap[(c, r)]
        }
    });
    out.axpy(-T::one(), d);
    out
}

/// `Σₖ γₖ(x)(Aₖx + Bₖw)`.
pub fn eval_subsystem_field<T: Real>(m: &SubsystemModel<T>, x: &[T], w: &[T]) -> Result<Vec<T>> {
    if x.len() != m.state_dim || w.len() != m.input_dim {
        return Err(Error::DimensionMismatch(format!(
            "subsystem {} expects x in R^{} and w in R^{}, got {} and {}",
            m.index + 1,
            m.state_dim,
            m.input_dim,
            x.len(),
            w.len()
        )));
    }
    let g = m.gmm.gamma(x);
    let mut out = vec![T::zero(); m.state_dim];
    for (k, &gk) in g.iter().enumerate() {
        m.a[k].matvec_acc(x, gk, &mut out);
        if m.input_dim > 0 {
            m.b[k].matvec_acc(w, gk, &mut out);
        }
    }
    Ok(out)
}

/// Regression design for the tracking objective: row `k` of `phi` is
/// `[γ₁[x; w]; …; γ_K[x; w]]` at sample `k`.
struct Design<T> {
    phi: Vec<Vec<T>>,
    y: Vec<Vec<T>>,
    n: usize,
    p: usize,
    k: usize,
}

impl<T: Real> Design<T> {
    fn new(data: &SubsystemData<T>, gmm: &GmmModel<T>) -> Self {
        let (n, p, k) = (data.state_dim, data.input_dim, gmm.k());
        let phi = data
            .x_samples
            .iter()
            .zip(&data.w_samples)
            .map(|(x, w)| {
                let g = gmm.gamma(x);
                let mut row = Vec::with_capacity(k * (n + p));
                for &gk in &g {
                    row.extend(x.iter().chain(w).map(|&v| gk * v));
                }
                row
            })
            .collect();
        Self {
            phi,
            y: data.xdot_samples.clone(),
            n,
            p,
            k,
        }
    }

    fn width(&self) -> usize {
        self.k * (self.n + self.p)
    }

    fn samples(&self) -> usize {
        self.phi.len()
    }

    /// `ΦᵀΦ`.
    fn gram(&self) -> SymMat<T> {
        let w = self.width();
        let mut g = Mat::zeros(w, w);
        for row in &self.phi {
            for i in 0..w {
                if row[i] == T::zero() {
                    continue;
                }
                for j in i..w {
                    g[(i, j)] += row[i] * row[j];
                }
            }
        }
        SymMat::from_upper_fn(w, |i, j| g[(i, j)])
    }

    /// `Φᵀ y_r` for output row `r`.
    fn cross(&self, r: usize) -> Vec<T> {
        let mut c = vec![T::zero(); self.width()];
        for (row, y) in self.phi.iter().zip(&self.y) {
            for (ci, &v) in c.iter_mut().zip(row) {
                *ci += v * y[r];
            }
        }
        c
    }

    /// Mean over samples of `‖ẋ − f(x, w)‖²`.
    fn mse(&self, theta: &[T]) -> T {
        let w = self.width();
        let mut acc = T::zero();
        for (row, y) in self.phi.iter().zip(&self.y) {
            for (r, &yr) in y.iter().enumerate() {
                let e = yr - dot(row, &theta[r * w..(r + 1) * w]);
                acc += e * e;
            }
        }
        acc / T::from_usize_lossy(self.samples().max(1))
    }
}

/// Parameters are stored per output row: `theta[r·W + k·(n+p) + c]` is
/// column `c` of `[Aₖ Bₖ]` in row `r`, with `W = K(n+p)`.
fn pack<T: Real>(a: &[Mat<T>], b: &[Mat<T>], n: usize, p: usize) -> Vec<T> {
    let k = a.len();
    let w = k * (n + p);
    let mut theta = vec![T::zero(); n * w];
    for r in 0..n {
        for kk in 0..k {
            for c in 0..n {
                theta[r * w + kk * (n + p) + c] = a[kk][(r, c)];
            }
            for c in 0..p {
                theta[r * w + kk * (n + p) + n + c] = b[kk][(r, c)];
            }
        }
    }
    theta
}

fn unpack<T: Real>(theta: &[T], k: usize, n: usize, p: usize) -> (Vec<Mat<T>>, Vec<Mat<T>>) {
    let w = k * (n + p);
    let a = (0..k)
        .map(|kk| Mat::from_fn(n, n, |r, c| theta[r * w + kk * (n + p) + c]))
        .collect();
    let b = (0..k)
        .map(|kk| Mat::from_fn(n, p, |r, c| theta[r * w + kk * (n + p) + n + c]))
        .collect();
    (a, b)
}

#[derive(Clone, Debug)]
pub struct InitialFit<T> {
    pub a: Vec<Mat<T>>,
    pub b: Vec<Mat<T>>,
    /// Condition number of the regularised normal matrix exceeded 1e12.
    pub rank_deficient: bool,
    pub condition: T,
}

/// Unconstrained ridge least squares for `(A, B)`.
pub fn initial_fit<T: Real>(data: &SubsystemData<T>, gmm: &GmmModel<T>, ridge: T) -> Result<InitialFit<T>> {
    check_data(data, gmm)?;
    let design = Design::new(data, gmm);
    let (n, p, k) = (design.n, design.p, design.k);
    let mut g = design.gram();
    g.add_diag(ridge.max(T::min_positive_value()));
    let eig = g.eigenvalues()?;
    let lo = eig[0];
    let hi = eig[eig.len() - 1];
    let condition = if lo > T::zero() { hi / lo } else { T::infinity() };
    let rank_deficient = !(condition <= T::lit(1e12));
    if rank_deficient {
        log::warn!(
            "subsystem {}: normal matrix condition number {:e} exceeds 1e12",
            data.index + 1,
            condition.to_f64_lossy()
        );
    }
    let ch = g.cholesky().ok_or(Error::Singular)?;
    let w = design.width();
    let mut theta = vec![T::zero(); n * w];
    for r in 0..n {
        let sol = ch.solve(&design.cross(r));
        theta[r * w..(r + 1) * w].copy_from_slice(&sol);
    }
    let (a, b) = unpack(&theta, k, n, p);
    Ok(InitialFit {
        a,
        b,
        rank_deficient,
        condition,
    })
}

fn check_data<T: Real>(data: &SubsystemData<T>, gmm: &GmmModel<T>) -> Result<()> {
    if gmm.dim() != data.state_dim {
        return Err(Error::DimensionMismatch(format!(
            "mixture dimension {} but subsystem state dimension {}",
            gmm.dim(),
            data.state_dim
        )));
    }
    let m = data.len();
    if data.xdot_samples.len() != m || data.w_samples.len() != m {
        return Err(Error::DimensionMismatch("subsystem sample counts differ".into()));
    }
    let need = gmm.k() * (data.state_dim + data.input_dim) + 1;
    if m < need {
        return Err(Error::TooFewSamples(format!(
            "subsystem {} has {m} samples, needs {need}",
            data.index + 1
        )));
    }
    Ok(())
}

/// Symmetric unit matrix `E_ij + E_ji` (or `E_ii`).
fn sym_unit<T: Real>(n: usize, i: usize, j: usize) -> SymMat<T> {
    let mut u = SymMat::zeros(n);
    u.set(i, j, T::one());
    u
}

fn upper_pairs(n: usize) -> Vec<(usize, usize)> {
    (0..n).flat_map(|i| (i..n).map(move |j| (i, j))).collect()
}

fn sym_from_vars<T: Real>(n: usize, pairs: &[(usize, usize)], z: &[T]) -> SymMat<T> {
    let mut s = SymMat::zeros(n);
    for (v, &(i, j)) in pairs.iter().enumerate() {
        s.set(i, j, z[v]);
    }
    s
}

struct StageP<T> {
    p: SymMat<T>,
    d: SymMat<T>,
    margin: T,
    worst_block: usize,
}

/// Maximises `t` subject to every small-gain block `⪯ −t·I`, the storage
/// bounds and the composable supply-rate template.
fn stage_p<T: Real>(
    a: &[Mat<T>],
    b: &[Mat<T>],
    fan_out: &[usize],
    hp: &SubsystemHyperparams<T>,
    opts: &SolverOptions,
) -> Result<StageP<T>> {
    let n = a[0].rows();
    let m = b[0].cols();
    let q = n + m;
    let pp = upper_pairs(n);
    let dp = upper_pairs(q);
    let (np, nd) = (pp.len(), dp.len());
    let t_var = np + nd;
    let nvar = t_var + 1;
    let max_f = fan_out.iter().copied().max().unwrap_or(0);
    let slack = hp.d_max - hp.supply_scale * T::from_usize_lossy(max_f);
    if !(slack > T::zero()) {
        return Err(Error::InvalidConfig(format!(
            "supply_scale × fan-out ({max_f}) must stay below d_max"
        )));
    }

    let mut c = vec![T::zero(); nvar];
    c[t_var] = -T::one();
    let mut prob = SdpProblem::new(nvar, QuadObjective::linear(c));

    let mut lo = LmiBlock::new(SymMat::scaled_identity(n, hp.delta_lo));
    let mut hi = LmiBlock::new(SymMat::scaled_identity(n, -hp.delta_hi));
    for (v, &(i, j)) in pp.iter().enumerate() {
        let u = sym_unit::<T>(n, i, j);
        lo.add_term(v, -T::one(), &u);
        hi.add_term(v, T::one(), &u);
    }
    prob.add_block(lo);
    prob.add_block(hi);

    for k in 0..a.len() {
        let mut blk = LmiBlock::zeros(q);
        for (v, &(i, j)) in pp.iter().enumerate() {
            let u = sym_unit::<T>(n, i, j);
            let um = u.as_mat();
            let mut term = SymMat::zeros(q);
            if m > 0 {
                let btu = b[k].transpose().matmul(um)?;
                term = embed(q, 0, m, &btu);
            }
            let au = a[k].transpose().matmul(um)?;
            let br = SymMat::from_upper_fn(n, |r, cc| hp.xi * um[(r, cc)] + au[(r, cc)] + au[(cc, r)]);
            term.axpy(T::one(), &embed(q, m, m, br.as_mat()));
            blk.add_term(v, T::one(), &term);
        }
        for (v, &(i, j)) in dp.iter().enumerate() {
            blk.add_term(np + v, -T::one(), &sym_unit(q, i, j));
        }
        blk.add_term(t_var, T::one(), &SymMat::identity(q));
        prob.add_block(blk);
    }

    let mut d_hi = LmiBlock::new(SymMat::scaled_identity(q, -hp.d_max));
    let mut d_lo = LmiBlock::new(SymMat::scaled_identity(q, -hp.d_max));
    let mut tmpl = LmiBlock::zeros(q);
    for (v, &(i, j)) in dp.iter().enumerate() {
        let u = sym_unit::<T>(q, i, j);
        d_hi.add_term(np + v, T::one(), &u);
        d_lo.add_term(np + v, -T::one(), &u);
        tmpl.add_term(np + v, T::one(), &u);
    }
    let template: Vec<T> = (0..m)
        .map(|_| hp.supply_scale)
        .chain(fan_out.iter().map(|&f| -hp.supply_scale * T::from_usize_lossy(f)))
        .collect();
    tmpl.add_constant(&SymMat::from_diag(&template).scaled(-T::one()));
    prob.add_block(d_hi);
    prob.add_block(d_lo);
    prob.add_block(tmpl);

    // Strictly feasible start: P mid-range, D = template − c·I, t low.
    let mut z0 = vec![T::zero(); nvar];
    let mid = T::lit(0.5) * (hp.delta_lo + hp.delta_hi);
    for (v, &(i, j)) in pp.iter().enumerate() {
        if i == j {
            z0[v] = mid;
        }
    }
    let shift = T::lit(0.5) * slack;
    for (v, &(i, j)) in dp.iter().enumerate() {
        if i == j {
            z0[np + v] = template[i] - shift;
        }
    }
    let p0 = sym_from_vars(n, &pp, &z0);
    let d0 = sym_from_vars(q, &dp, &z0[np..]);
    let mut worst0 = T::neg_infinity();
    for k in 0..a.len() {
        worst0 = worst0.max(small_gain_block(&a[k], &b[k], &p0, &d0, hp.xi).max_eig()?);
    }
    z0[t_var] = -worst0 - T::one();
    prob.start = Some(z0);

    let sol = solve_sdp(&prob, opts)?;
    let p = sym_from_vars(n, &pp, &sol.z);
    let d = sym_from_vars(q, &dp, &sol.z[np..]);
    let mut margin = T::infinity();
    let mut worst_block = 0;
    for k in 0..a.len() {
        let e = -small_gain_block(&a[k], &b[k], &p, &d, hp.xi).max_eig()?;
        if e < margin {
            margin = e;
            worst_block = k;
        }
    }
    if !sol.is_feasible() {
        margin = margin.min(T::zero());
    }
    Ok(StageP {
        p,
        d,
        margin,
        worst_block,
    })
}

/// Minimises the tracking objective over `(A, B)` with `(P, D)` fixed,
/// keeping every small-gain block `⪯ −ε·I`.
fn stage_ab<T: Real>(
    design: &Design<T>,
    gram: &SymMat<T>,
    cross: &[Vec<T>],
    p: &SymMat<T>,
    d: &SymMat<T>,
    start: &[T],
    hp: &SubsystemHyperparams<T>,
    opts: &SolverOptions,
) -> Result<Option<Vec<T>>> {
    let (n, m, k) = (design.n, design.p, design.k);
    let q = n + m;
    let w = design.width();
    let nvar = n * w;
    let scale = T::one() / T::from_usize_lossy(design.samples().max(1));
    let two = T::lit(2.0);

    let mut h = SymMat::zeros(nvar);
    let mut lin = vec![T::zero(); nvar];
    let mut constant = T::zero();
    for r in 0..n {
        for i in 0..w {
            for j in i..w {
                let mut v = two * scale * gram[(i, j)];
                if i == j {
                    v += two * scale * hp.ridge;
                }
                h.set(r * w + i, r * w + j, v);
            }
            lin[r * w + i] = -two * scale * cross[r][i];
        }
        constant += scale * design.y.iter().map(|y| y[r] * y[r]).sum::<T>();
    }
    let obj = QuadObjective {
        hessian: h,
        linear: lin,
        constant,
    };
    let mut prob = SdpProblem::new(nvar, obj);
    prob.epsilon_strict = hp.epsilon_strict;
    let pm = p.as_mat();
    let zero_a = Mat::zeros(n, n);
    let zero_b = Mat::zeros(n, m);
    for kk in 0..k {
        let mut blk = LmiBlock::new(small_gain_block(&zero_a, &zero_b, p, d, hp.xi));
        for r in 0..n {
            // row r of P, placed in row c of E_cr·P
            for c in 0..n {
                let x = Mat::from_fn(n, n, |i, j| if i == c { pm[(r, j)] } else { T::zero() });
                let s = SymMat::from_upper_fn(n, |i, j| x[(i, j)] + x[(j, i)]);
                blk.add_term(r * w + kk * q + c, T::one(), &embed(q, m, m, s.as_mat()));
            }
            for c in 0..m {
                let x = Mat::from_fn(m, n, |i, j| if i == c { pm[(r, j)] } else { T::zero() });
                blk.add_term(r * w + kk * q + n + c, T::one(), &embed(q, 0, m, &x));
            }
        }
        prob.add_block(blk);
    }
    prob.start = Some(start.to_vec());
    let sol = solve_sdp(&prob, opts)?;
    if !sol.is_feasible() || sol.max_block_eig > -hp.epsilon_strict + T::lit(opts.feas_tol) {
        return Ok(None);
    }
    Ok(Some(sol.z))
}

/// Learns `(A, B, P, D)` for one subsystem by P/AB alternation.
pub fn learn_subsystem<T: Real>(
    data: &SubsystemData<T>,
    gmm: &GmmModel<T>,
    hp: &SubsystemHyperparams<T>,
    opts: &SolverOptions,
) -> Result<SubsystemModel<T>> {
    hp.validate()?;
    let init = initial_fit(data, gmm, hp.ridge)?;
    let design = Design::new(data, gmm);
    let (n, m, k) = (design.n, design.p, design.k);
    let fan = if data.state_fan_out.len() == n {
        data.state_fan_out.clone()
    } else {
        vec![0; n]
    };
    let two_eps = T::lit(2.0) * hp.epsilon_strict;

    // Stage P on the initial fit, pulling (A, B) toward (−ρI, 0) on failure.
    let rho = hp.xi + T::one();
    let mut last = None;
    let mut accepted = None;
    for step in 0..=5usize {
        let lam = T::from_usize_lossy(step) / T::lit(5.0);
        let a: Vec<Mat<T>> = init
            .a
            .iter()
            .map(|ak| {
                let mut mixed = ak.scaled(T::one() - lam);
                for i in 0..n {
                    mixed[(i, i)] -= lam * rho;
                }
                mixed
            })
            .collect();
        let b: Vec<Mat<T>> = init.b.iter().map(|bk| bk.scaled(T::one() - lam)).collect();
        let sp = stage_p(&a, &b, &fan, hp, opts)?;
        if sp.margin >= two_eps {
            accepted = Some((step, a, b, sp));
            break;
        }
        log::debug!(
            "subsystem {}: stage P margin {:e} at pullback step {step}",
            data.index + 1,
            sp.margin.to_f64_lossy()
        );
        last = Some(sp);
    }
    let Some((pullback_steps, a, b, sp)) = accepted else {
        let sp = last.expect("at least one attempt");
        return Err(Error::InfeasibleAtStageP {
            subsystem: data.index + 1,
            margin: sp.margin.to_f64_lossy(),
            worst_block: sp.worst_block + 1,
        });
    };

    let gram = design.gram();
    let cross: Vec<Vec<T>> = (0..n).map(|r| design.cross(r)).collect();
    let mut theta = pack(&a, &b, n, m);
    let mut obj = design.mse(&theta);
    let mut p = sp.p;
    let mut d = sp.d;
    let mut margin = sp.margin;
    let mut history = vec![obj];
    let mut outer = 0;
    while outer < hp.max_outer_iter {
        outer += 1;
        let Some(next) = stage_ab(&design, &gram, &cross, &p, &d, &theta, hp, opts)? else {
            log::debug!("subsystem {}: stage AB found no strictly feasible update", data.index + 1);
            break;
        };
        let next_obj = design.mse(&next);
        if !(next_obj < obj) {
            break;
        }
        let rel = (obj - next_obj) / obj.max(T::min_positive_value());
        theta = next;
        obj = next_obj;
        history.push(obj);
        let (na, nb) = unpack(&theta, k, n, m);
        let sp = stage_p(&na, &nb, &fan, hp, opts)?;
        if sp.margin >= two_eps {
            p = sp.p;
            d = sp.d;
            margin = sp.margin;
        } else {
            // keep the (P, D) that certified this (A, B)
            margin = -{
                let mut worst = T::neg_infinity();
                for kk in 0..k {
                    worst = worst.max(small_gain_block(&na[kk], &nb[kk], &p, &d, hp.xi).max_eig()?);
                }
                worst
            };
        }
        if rel < hp.outer_tol {
            break;
        }
    }

    let (a, b) = unpack(&theta, k, n, m);
    let data_radius = data
        .x_samples
        .iter()
        .zip(&data.w_samples)
        .map(|(x, w)| x.iter().chain(w).map(|&v| v * v).sum::<T>().sqrt())
        .fold(T::zero(), T::max);
    Ok(SubsystemModel {
        index: data.index,
        state_dim: n,
        input_dim: m,
        a,
        b,
        p,
        d,
        delta_lo: hp.delta_lo,
        delta_hi: hp.delta_hi,
        xi: hp.xi,
        d_max: hp.d_max,
        epsilon_strict: hp.epsilon_strict,
        gmm: gmm.clone(),
        objective: obj,
        info: LearnInfo {
            outer_iterations: outer,
            pullback_steps,
            stage_p_margin: margin,
            rank_deficient: init.rank_deficient,
            data_radius,
            objective_history: history,
        },
    })
}

/// Replays the subsystem conditions: per-component blocks, storage bounds,
/// the supply-rate cap and a sampled dissipation inequality.
pub fn check_subsystem_certificate<T: Real>(m: &SubsystemModel<T>, tol: T) -> Result<CertificateReport> {
    let radius = (T::lit(2.0) * m.info.data_radius).max(T::one());
    check_subsystem_certificate_sampled(m, tol, 1000, radius, 42)
}

pub fn check_subsystem_certificate_sampled<T: Real>(
    m: &SubsystemModel<T>,
    tol: T,
    samples: usize,
    radius: T,
    seed: u64,
) -> Result<CertificateReport> {
    let tol_f = tol.to_f64_lossy();
    let mut rep = CertificateReport::new();
    for k in 0..m.k() {
        let e = m.block(k).max_eig()? + m.epsilon_strict;
        rep.push(format!("block_{}", k + 1), e.to_f64_lossy(), tol_f, Vec::new());
    }
    let pe = m.p.eigenvalues()?;
    rep.push("storage_lower", (m.delta_lo - pe[0]).to_f64_lossy(), tol_f, Vec::new());
    rep.push(
        "storage_upper",
        (pe[pe.len() - 1] - m.delta_hi).to_f64_lossy(),
        tol_f,
        Vec::new(),
    );
    rep.push("supply_cap", (m.d.max_eig()? - m.d_max).to_f64_lossy(), tol_f, Vec::new());

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = radius.to_f64_lossy();
    let mut worst = Worst::new();
    for s in 0..samples {
        let (x, w): (Vec<T>, Vec<T>) = if s == 0 {
            (vec![T::zero(); m.state_dim], vec![T::zero(); m.input_dim])
        } else {
            (
                (0..m.state_dim).map(|_| T::lit(rng.random_range(-r..=r))).collect(),
                (0..m.input_dim).map(|_| T::lit(rng.random_range(-r..=r))).collect(),
            )
        };
        let margin = dissipation_gap(m, &x, &w)?;
        worst.offer(margin.to_f64_lossy(), || {
            x.iter().chain(&w).map(|v| v.to_f64_lossy()).collect()
        });
    }
    if samples > 0 {
        rep.push("dissipation", worst.margin, tol_f, worst.witness);
    }
    Ok(rep)
}

/// `∂V/∂x·f(x, w) + ξV(x) − [w; x]ᵀD[w; x]`, required `<= 0`.
pub fn dissipation_gap<T: Real>(m: &SubsystemModel<T>, x: &[T], w: &[T]) -> Result<T> {
    let f = eval_subsystem_field(m, x, w)?;
    let px = m.p.as_mat().matvec(x)?;
    let vdot = T::lit(2.0) * dot(&px, &f);
    Ok(vdot + m.xi * m.storage(x) - m.supply(x, w))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn scalar_model(a: f64, b: Option<f64>) -> SubsystemModel<f64> {
        let p = usize::from(b.is_some());
        SubsystemModel {
            index: 0,
            state_dim: 1,
            input_dim: p,
            a: vec![Mat::from_diag(&[a])],
            b: vec![match b {
                Some(v) => Mat::from_rows(&[vec![v]]).unwrap(),
                None => Mat::zeros(1, 0),
            }],
            p: SymMat::identity(1),
            d: SymMat::zeros(1 + p),
            delta_lo: 0.1,
            delta_hi: 10.0,
            xi: 0.1,
            d_max: 10.0,
            epsilon_strict: 1e-6,
            gmm: GmmModel::single(1),
            objective: 0.0,
            info: LearnInfo::default(),
        }
    }

    fn scalar_data(xs: &[f64], f: impl Fn(f64, f64) -> f64, ws: Option<&[f64]>) -> SubsystemData<f64> {
        let w: Vec<Vec<f64>> = match ws {
            Some(ws) => ws.iter().map(|&v| vec![v]).collect(),
            None => vec![Vec::new(); xs.len()],
        };
        SubsystemData {
            index: 0,
            x_samples: xs.iter().map(|&x| vec![x]).collect(),
            xdot_samples: xs
                .iter()
                .zip(&w)
                .map(|(&x, w)| vec![f(x, w.first().copied().unwrap_or(0.0))])
                .collect(),
            w_samples: w.clone(),
            state_fan_out: vec![0],
            state_dim: 1,
            input_dim: usize::from(ws.is_some()),
        }
    }

    fn grid(n: usize) -> Vec<f64> {
        (0..n).map(|i| 2.0 * i as f64 / (n - 1) as f64 - 1.0).collect()
    }

    #[test]
    fn field_examples() {
        let m = scalar_model(-1.0, Some(2.0));
        assert_eq!(eval_subsystem_field(&m, &[0.0], &[0.0]).unwrap(), vec![0.0]);
        assert_eq!(eval_subsystem_field(&m, &[1.0], &[1.0]).unwrap(), vec![1.0]);
        assert!(eval_subsystem_field(&m, &[1.0, 2.0], &[1.0]).is_err());

        let mut two = scalar_model(0.0, None);
        two.state_dim = 2;
        two.a = vec![Mat::from_diag(&[-1.0, -1.0]), Mat::from_diag(&[-3.0, -3.0])];
        two.b = vec![Mat::zeros(2, 0); 2];
        two.gmm = GmmModel::new(
            vec![0.5, 0.5],
            vec![vec![-1.0, 0.0], vec![1.0, 0.0]],
            vec![SymMat::identity(2); 2],
        )
        .unwrap();
        // x on the symmetry plane gives γ = (0.5, 0.5)
        let f = eval_subsystem_field(&two, &[0.0, 0.7], &[]).unwrap();
        assert!((f[0]).abs() < 1e-15 && (f[1] + 1.4).abs() < 1e-15);
    }

    #[test]
    fn initial_fit_examples() {
        let g = GmmModel::single(1);
        let d = scalar_data(&grid(50), |x, _| -2.0 * x, None);
        let fit = initial_fit(&d, &g, 1e-8).unwrap();
        assert!((fit.a[0][(0, 0)] + 2.0).abs() < 1e-8);

        let z = scalar_data(&grid(50), |_, _| 0.0, None);
        let fit = initial_fit(&z, &g, 1e-8).unwrap();
        assert_eq!(fit.a[0][(0, 0)], 0.0);

        let ws: Vec<f64> = grid(50).iter().map(|x| (3.0 * x).sin()).collect();
        let dw = scalar_data(&grid(50), |x, w| -x + 0.5 * w, Some(&ws));
        let fit = initial_fit(&dw, &g, 1e-8).unwrap();
        assert!((fit.a[0][(0, 0)] + 1.0).abs() < 1e-6);
        assert!((fit.b[0][(0, 0)] - 0.5).abs() < 1e-6);
        assert!(!fit.rank_deficient);
    }

    #[test]
    fn learns_stable_scalar() {
        let d = scalar_data(&grid(40), |x, _| -x, None);
        let m = learn_subsystem(&d, &GmmModel::single(1), &SubsystemHyperparams::default(), &SolverOptions::default())
            .unwrap();
        assert!((m.a[0][(0, 0)] + 1.0).abs() < 1e-4);
        assert!(m.objective <= 1e-8);
        assert!(check_subsystem_certificate(&m, 1e-7).unwrap().passed());
    }

    #[test]
    fn unstable_data_gets_stabilised() {
        let d = scalar_data(&grid(40), |x, _| x, None);
        let hp = SubsystemHyperparams::default();
        let m = learn_subsystem(&d, &GmmModel::single(1), &hp, &SolverOptions::default()).unwrap();
        let a = m.a[0][(0, 0)];
        assert!(a < 0.0, "a = {a}");
        assert!(m.objective > 0.0);
        assert!(m.info.pullback_steps > 0);
        // p = 0: block is ξP + 2aP − D22
        let blk = m.block(0);
        assert_eq!(blk.dim(), 1);
        let direct = (hp.xi + 2.0 * a) * m.p[(0, 0)] - m.d[(0, 0)];
        assert!((blk[(0, 0)] - direct).abs() < 1e-12);
        assert!(direct < 0.0);
        assert!(check_subsystem_certificate(&m, 1e-7).unwrap().passed());
    }

    #[test]
    fn coupled_scalar_with_input() {
        let xs = grid(60);
        let ws: Vec<f64> = xs.iter().map(|x| 0.8 * (2.0 * x).cos() - 0.2).collect();
        let mut d = scalar_data(&xs, |x, w| -1.5 * x + 0.2 * w, Some(&ws));
        d.state_fan_out = vec![1];
        let m = learn_subsystem(&d, &GmmModel::single(1), &SubsystemHyperparams::default(), &SolverOptions::default())
            .unwrap();
        assert!(m.objective < 1e-6, "{}", m.objective);
        let rep = check_subsystem_certificate(&m, 1e-7).unwrap();
        assert!(rep.passed(), "{rep:?}");
        // template: D ⪯ diag(1, −1)
        let gap = SymMat::from_diag(&[1.0, -1.0]).sub(&m.d).unwrap();
        assert!(gap.min_eig().unwrap() >= -1e-9);
    }

    #[test]
    fn constructed_violation_detected() {
        let m = scalar_model(1.0, None);
        let rep = check_subsystem_certificate_sampled(&m, 1e-7, 100, 1.0, 1).unwrap();
        let blk = rep.get("block_1").unwrap();
        assert!(!blk.pass && blk.worst_margin > 0.0);
        let diss = rep.get("dissipation").unwrap();
        assert!(!diss.pass);
        // sample 0 is the origin
        assert_eq!(dissipation_gap(&m, &[0.0], &[]).unwrap(), 0.0);
    }

    #[test]
    fn hyperparam_validation() {
        let hp = SubsystemHyperparams::<f64> {
            delta_lo: 2.0,
            delta_hi: 1.0,
            ..Default::default()
        };
        assert!(matches!(hp.validate(), Err(Error::InvalidConfig(_))));
    }

    fn random_model(n: usize, p: usize, k: usize, vals: &[f64]) -> SubsystemModel<f64> {
        let mut it = vals.iter().cycle().copied();
        let mut next = || it.next().unwrap();
        let a = (0..k).map(|_| Mat::from_fn(n, n, |_, _| next())).collect();
        let b = (0..k).map(|_| Mat::from_fn(n, p, |_, _| next())).collect();
        let l = Mat::from_fn(n, n, |_, _| next());
        let mut pm = SymMat::symmetrize(&l.transpose().matmul(&l).unwrap()).unwrap();
        pm.add_diag(0.5);
        let d = SymMat::from_upper_fn(n + p, |_, _| next());
        let means: Vec<Vec<f64>> = (0..k).map(|_| (0..n).map(|_| next()).collect()).collect();
        let gmm = GmmModel::new(vec![1.0 / k as f64; k], means, vec![SymMat::identity(n); k]).unwrap();
        SubsystemModel {
            index: 0,
            state_dim: n,
            input_dim: p,
            a,
            b,
            p: pm,
            d,
            delta_lo: 0.1,
            delta_hi: 10.0,
            xi: 0.3,
            d_max: 10.0,
            epsilon_strict: 0.0,
            gmm,
            objective: 0.0,
            info: LearnInfo::default(),
        }
    }

    proptest! {
        #[test]
        fn block_quadratic_form_matches_scalar_inequality(
            n in 1usize..3, p in 0usize..3, k in 1usize..3,
            vals in prop::collection::vec(-2.0f64..2.0, 64),
            pts in prop::collection::vec(-3.0f64..3.0, 8),
        ) {
            let m = random_model(n, p, k, &vals);
            let x = &pts[..n];
            let w = &pts[4..4 + p];
            let s: Vec<f64> = w.iter().chain(x).copied().collect();
            for kk in 0..k {
                // expanded scalar form: 2xᵀP(Aₖx + Bₖw) + ξxᵀPx − [w;x]ᵀD[w;x]
                let mut ax = m.a[kk].matvec(x).unwrap();
                if p > 0 {
                    m.b[kk].matvec_acc(w, 1.0, &mut ax);
                }
                let px = m.p.as_mat().matvec(x).unwrap();
                let lhs = 2.0 * dot(&px, &ax) + m.xi * m.p.quad_form(x) - m.d.quad_form(&s);
                let quad = m.block(kk).quad_form(&s);
                prop_assert!((lhs - quad).abs() <= 1e-9 * (1.0 + lhs.abs()));
            }
        }

        #[test]
        fn gamma_weighted_sum_closes(
            vals in prop::collection::vec(-2.0f64..2.0, 64),
            pts in prop::collection::vec(-3.0f64..3.0, 4),
        ) {
            let mut m = random_model(2, 2, 2, &vals);
            // shift each D so every block is NSD
            let shift = (0..2).map(|k| m.block(k).max_eig().unwrap()).fold(0.0f64, f64::max);
            m.d.add_diag(shift + 1e-9);
            prop_assume!((0..2).all(|k| m.block(k).max_eig().unwrap() <= 0.0));
            let gap = dissipation_gap(&m, &pts[..2], &pts[2..]).unwrap();
            prop_assert!(gap <= 1e-9 * (1.0 + pts.iter().map(|v| v * v).sum::<f64>()));
        }
    }
}
