//! Gaussian mixture models fitted by EM, and the mixing functions
//! `γₖ(x) = πₖ p(x|k) / Σⱼ πⱼ p(x|j)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{Cholesky, Mat, SymMat};
use crate::scalar::{norm_sq, Real};

#[derive(Clone, Debug)]
pub struct GmmModel<T: Real> {
    weights: Vec<T>,
    means: Vec<Vec<T>>,
    covariances: Vec<SymMat<T>>,
    chol: Vec<Cholesky<T>>,
    /// `ln πₖ − ½(d ln 2π + ln det Σₖ)`.
    log_consts: Vec<T>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GmmRepr<T> {
    #[serde(rename = "K")]
    k: usize,
    weights: Vec<T>,
    means: Vec<Vec<T>>,
    covariances: Vec<Vec<Vec<T>>>,
}

impl<T: Real> Serialize for GmmModel<T> {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        GmmRepr {
            k: self.k(),
            weights: self.weights.clone(),
            means: self.means.clone(),
            covariances: self.covariances.iter().map(|c| c.as_mat().to_rows()).collect(),
        }
        .serialize(s)
    }
}

impl<'de, T: Real> Deserialize<'de> for GmmModel<T> {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let r = GmmRepr::<T>::deserialize(d)?;
        if r.k != r.weights.len() {
            return Err(serde::de::Error::custom("K does not match weights"));
        }
        let covs = r
            .covariances
            .into_iter()
            .map(|c| {
                Mat::from_rows(&c)
                    .and_then(|m| SymMat::from_mat_checked(&m, T::lit(1e-9)))
            })
            .collect::<Result<Vec<_>>>()
            .map_err(serde::de::Error::custom)?;
        GmmModel::new(r.weights, r.means, covs).map_err(serde::de::Error::custom)
    }
}

impl<T: Real> PartialEq for GmmModel<T> {
    fn eq(&self, other: &Self) -> bool {
        self.weights == other.weights
            && self.means == other.means
            && self.covariances == other.covariances
    }
}

impl<T: Real> GmmModel<T> {
    /// Builds a mixture from its parameters. Weights must sum to one within 1e-9.
    pub fn new(weights: Vec<T>, means: Vec<Vec<T>>, covariances: Vec<SymMat<T>>) -> Result<Self> {
        let k = weights.len();
        if k == 0 || means.len() != k || covariances.len() != k {
            return Err(Error::InvalidConfig(
                "mixture needs matching nonempty weights, means and covariances".into(),
            ));
        }
        let d = means[0].len();
        if d == 0 || means.iter().any(|m| m.len() != d) || covariances.iter().any(|c| c.dim() != d) {
            return Err(Error::DimensionMismatch("mixture component dimensions".into()));
        }
        if weights.iter().any(|w| !(*w > T::zero()) || !w.is_finite()) {
            return Err(Error::InvalidConfig("mixture weights must be positive".into()));
        }
        let total: T = weights.iter().copied().sum();
        if (total - T::one()).abs() > T::lit(1e-9) {
            return Err(Error::InvalidConfig(format!("mixture weights sum to {total}")));
        }
        let mut chol = Vec::with_capacity(k);
        let mut log_consts = Vec::with_capacity(k);
        let half_d_ln_2pi = T::lit(0.5) * T::from_usize_lossy(d) * T::lit(std::f64::consts::TAU.ln());
        for (c, &w) in covariances.iter().zip(&weights) {
            let l = c.cholesky().ok_or_else(|| {
                Error::InvalidMatrix("mixture covariance is not positive definite".into())
            })?;
            log_consts.push(w.ln() - half_d_ln_2pi - T::lit(0.5) * l.log_det());
            chol.push(l);
        }
        Ok(Self {
            weights,
            means,
            covariances,
            chol,
            log_consts,
        })
    }

    /// Single standard-normal component, for which `γ ≡ 1`.
    pub fn single(dim: usize) -> Self {
        Self::new(vec![T::one()], vec![vec![T::zero(); dim]], vec![SymMat::identity(dim)])
            .expect("identity mixture")
    }

    pub fn k(&self) -> usize {
        self.weights.len()
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    pub fn weights(&self) -> &[T] {
        &self.weights
    }

    pub fn means(&self) -> &[Vec<T>] {
        &self.means
    }

    pub fn covariances(&self) -> &[SymMat<T>] {
        &self.covariances
    }

    /// `ln(πₖ p(x|k))` for every component.
    pub fn log_weighted_densities(&self, x: &[T]) -> Vec<T> {
        let half = T::lit(0.5);
        let mut diff = vec![T::zero(); x.len()];
        (0..self.k())
            .map(|k| {
                for ((d, &xi), &mi) in diff.iter_mut().zip(x).zip(&self.means[k]) {
                    *d = xi - mi;
                }
                let y = self.chol[k].solve_lower(&diff);
                self.log_consts[k] - half * norm_sq(&y)
            })
            .collect()
    }

    /// Mixing functions at `x`. Entries are strictly positive and sum to one.
    pub fn gamma(&self, x: &[T]) -> Vec<T> {
        gamma_from_log(&self.log_weighted_densities(x))
    }

    /// `ln p(x)` under the mixture.
    pub fn log_density(&self, x: &[T]) -> T {
        log_sum_exp(&self.log_weighted_densities(x))
    }

    pub fn log_likelihood(&self, points: &[Vec<T>]) -> T {
        points.iter().map(|x| self.log_density(x)).sum()
    }

    /// Bayesian information criterion on `points` (lower is better).
    pub fn bic(&self, points: &[Vec<T>]) -> T {
        let (k, d) = (self.k(), self.dim());
        let params = (k - 1) + k * d + k * d * (d + 1) / 2;
        T::from_usize_lossy(params) * T::from_usize_lossy(points.len()).ln()
            - T::lit(2.0) * self.log_likelihood(points)
    }
}

pub fn log_sum_exp<T: Real>(v: &[T]) -> T {
    let m = v.iter().copied().fold(T::neg_infinity(), T::max);
    if !m.is_finite() {
        return m;
    }
    m + v.iter().map(|&l| (l - m).exp()).sum::<T>().ln()
}

/// Normalised posterior from log-weights. Underflowing entries are raised to
/// the smallest positive normal value before the final normalisation.
pub fn gamma_from_log<T: Real>(log_w: &[T]) -> Vec<T> {
    let m = log_w.iter().copied().fold(T::neg_infinity(), T::max);
    let mut g: Vec<T> = log_w
        .iter()
        .map(|&l| ((l - m).exp()).max(T::min_positive_value()))
        .collect();
    let s: T = g.iter().copied().sum();
    for v in &mut g {
        *v /= s;
    }
    g
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GmmOptions {
    pub max_iter: usize,
    /// Stop when the log-likelihood gain falls below `tol·max(1, |LL|)`.
    pub tol: f64,
    pub min_weight: f64,
    /// Covariance eigenvalue floor relative to `trace(sample covariance)/d`.
    pub cov_floor_rel: f64,
}

impl Default for GmmOptions {
    fn default() -> Self {
        Self {
            max_iter: 500,
            tol: 1e-8,
            min_weight: 1e-6,
            cov_floor_rel: 1e-6,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GmmFit<T: Real> {
    pub model: GmmModel<T>,
    pub requested_k: usize,
    /// Components dropped during initialisation or EM.
    pub removed: usize,
    /// Log-likelihood before each M-step, then at the final parameters.
    pub log_likelihood: Vec<T>,
    pub iterations: usize,
    pub converged: bool,
}

/// Fits a `k`-component mixture by EM from a seeded k-means++ start.
pub fn fit_gmm<T: Real>(points: &[Vec<T>], k: usize, seed: u64, opts: &GmmOptions) -> Result<GmmFit<T>> {
    if k == 0 {
        return Err(Error::InvalidConfig("K must be at least 1".into()));
    }
    let n = points.len();
    let d = points.first().map_or(0, Vec::len);
    if d == 0 || points.iter().any(|p| p.len() != d) {
        return Err(Error::DimensionMismatch("mixture data dimensions".into()));
    }
    if n < k * (d + 1) {
        return Err(Error::TooFewSamples(format!(
            "{n} points for K = {k} in dimension {d}"
        )));
    }
    let nf = T::from_usize_lossy(n);

    let mean: Vec<T> = (0..d).map(|j| points.iter().map(|p| p[j]).sum::<T>() / nf).collect();
    let sample_cov = weighted_cov(points, &vec![T::one(); n], &mean, nf);
    let mut floor = T::lit(opts.cov_floor_rel) * sample_cov.trace() / T::from_usize_lossy(d);
    if !(floor > T::zero()) {
        floor = T::lit(opts.cov_floor_rel);
    }
    let init_cov = floor_cov(&sample_cov, floor)?;

    let centers = kmeans_pp(points, k, seed);
    let kk = centers.len();
    let mut removed = k - kk;
    if removed > 0 {
        log::warn!("only {kk} distinct initial centres for K = {k}");
    }
    let mut model = GmmModel::new(vec![T::one() / T::from_usize_lossy(kk); kk], centers, vec![init_cov; kk])?;

    let mut history = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    let mut resp = vec![vec![T::zero(); model.k()]; n];
    while iterations < opts.max_iter {
        let mut ll = T::zero();
        for (p, r) in points.iter().zip(resp.iter_mut()) {
            let lw = model.log_weighted_densities(p);
            ll += log_sum_exp(&lw);
            *r = gamma_from_log(&lw);
        }
        if let Some(&prev) = history.last() {
            let gain: T = ll - prev;
            if gain < T::lit(opts.tol) * T::one().max(ll.abs()) {
                history.push(ll);
                converged = true;
                break;
            }
        }
        history.push(ll);
        iterations += 1;

        let mut weights = Vec::new();
        let mut means = Vec::new();
        let mut covs = Vec::new();
        for c in 0..model.k() {
            let rc: Vec<T> = resp.iter().map(|r| r[c]).collect();
            let nk: T = rc.iter().copied().sum();
            if nk / nf < T::lit(opts.min_weight) {
                removed += 1;
                continue;
            }
            let mu: Vec<T> = (0..d)
                .map(|j| points.iter().zip(&rc).map(|(p, &w)| w * p[j]).sum::<T>() / nk)
                .collect();
            covs.push(floor_cov(&weighted_cov(points, &rc, &mu, nk), floor)?);
            means.push(mu);
            weights.push(nk / nf);
        }
        if weights.len() < model.k() {
            log::warn!("removed degenerate mixture components; K = {}", weights.len());
            resp = vec![vec![T::zero(); weights.len()]; n];
        }
        let total: T = weights.iter().copied().sum();
        for w in &mut weights {
            *w /= total;
        }
        model = GmmModel::new(weights, means, covs)?;
    }
    if !converged {
        history.push(model.log_likelihood(points));
    }
    Ok(GmmFit {
        model,
        requested_k: k,
        removed,
        log_likelihood: history,
        iterations,
        converged,
    })
}

/// Picks the component count in `k_range` with the lowest BIC; ties go to the
/// smaller count. Counts whose fit lost components, or that have too few
/// points, are skipped.
pub fn select_k<T: Real>(
    points: &[Vec<T>],
    k_range: impl IntoIterator<Item = usize>,
    seed: u64,
    opts: &GmmOptions,
) -> Result<usize> {
    Ok(select_k_fit(points, k_range, seed, opts)?.model.k())
}

/// As [`select_k`], returning the winning fit.
pub fn select_k_fit<T: Real>(
    points: &[Vec<T>],
    k_range: impl IntoIterator<Item = usize>,
    seed: u64,
    opts: &GmmOptions,
) -> Result<GmmFit<T>> {
    let d = points.first().map_or(0, Vec::len);
    let mut best: Option<(T, GmmFit<T>)> = None;
    let mut tried = false;
    for k in k_range {
        tried = true;
        if k == 0 || points.len() < k * (d + 1) {
            continue;
        }
        let fit = fit_gmm(points, k, seed, opts)?;
        if fit.model.k() < k {
            continue;
        }
        let bic = fit.model.bic(points);
        if best.as_ref().is_none_or(|(b, _)| bic < *b) {
            best = Some((bic, fit));
        }
    }
    if !tried {
        return Err(Error::InvalidConfig("empty K range".into()));
    }
    best.map(|(_, f)| f)
        .ok_or_else(|| Error::TooFewSamples("no component count in range is identifiable".into()))
}

fn weighted_cov<T: Real>(points: &[Vec<T>], w: &[T], mean: &[T], total: T) -> SymMat<T> {
    let d = mean.len();
    let mut acc = Mat::<T>::zeros(d, d);
    let mut diff = vec![T::zero(); d];
    for (p, &wk) in points.iter().zip(w) {
        for j in 0..d {
            diff[j] = p[j] - mean[j];
        }
        for i in 0..d {
            let s = wk * diff[i];
            for j in i..d {
                acc[(i, j)] += s * diff[j];
            }
        }
    }
    SymMat::from_upper_fn(d, |i, j| acc[(i, j)] / total)
}

/// Raises every eigenvalue of `c` to at least `floor`.
fn floor_cov<T: Real>(c: &SymMat<T>, floor: T) -> Result<SymMat<T>> {
    let e = c.eigen()?;
    if e.values[0] >= floor + floor {
        return Ok(c.clone());
    }
    let d = c.dim();
    let vals: Vec<T> = e.values.iter().map(|&v| v.max(floor)).collect();
    Ok(SymMat::from_upper_fn(d, |i, j| {
        (0..d).map(|k| e.vectors[(i, k)] * vals[k] * e.vectors[(j, k)]).sum()
    }))
}

/// k-means++ seeding. Returns fewer than `k` centres when the data has fewer
/// distinct points.
fn kmeans_pp<T: Real>(points: &[Vec<T>], k: usize, seed: u64) -> Vec<Vec<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers = vec![points[rng.random_range(0..points.len())].clone()];
    let dist = |a: &[T], b: &[T]| -> f64 {
        a.iter().zip(b).map(|(&x, &y)| (x - y).to_f64_lossy().powi(2)).sum()
    };
    let mut d2: Vec<f64> = points.iter().map(|p| dist(p, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        if !(total > 0.0) {
            break;
        }
        let u = rng.random::<f64>() * total;
        let mut acc = 0.0;
        let mut pick = d2.iter().rposition(|&v| v > 0.0).expect("positive mass");
        for (i, &v) in d2.iter().enumerate() {
            acc += v;
            if acc > u && v > 0.0 {
                pick = i;
                break;
            }
        }
        let c = points[pick].clone();
        for (p, dd) in points.iter().zip(d2.iter_mut()) {
            *dd = dd.min(dist(p, &c));
        }
        centers.push(c);
    }
    centers
}
