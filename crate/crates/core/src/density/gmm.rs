//! Full-covariance Gaussian mixtures fitted by expectation-maximization.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::linalg::{cholesky, log_det_from_cholesky, mahalanobis_sq};
use crate::error::{Error, Result};
use crate::rng;

/// Ridge added to every covariance after each M-step.
pub const COVARIANCE_JITTER: f64 = 1e-6;

const LN_2PI: f64 = 1.837_877_066_409_345_3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmmOptions {
    pub n_components: usize,
    pub max_iter: usize,
    /// Stop once the mean per-sample log-likelihood improves by less than this.
    pub tol: f64,
    pub jitter: f64,
    pub seed: u64,
}

impl GmmOptions {
    pub fn new(n_components: usize, seed: u64) -> Self {
        Self {
            n_components,
            max_iter: 200,
            tol: 1e-6,
            jitter: COVARIANCE_JITTER,
            seed,
        }
    }
}

/// A fitted mixture. Covariances are row-major `d x d`; their Cholesky
/// factors and normalizing constants are cached on construction.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "GmmParams", into = "GmmParams")]
pub struct GmmModel {
    mixing: Vec<f64>,
    means: Vec<Vec<f64>>,
    covariances: Vec<Vec<f64>>,
    dim: usize,
    chol: Vec<Vec<f64>>,
    /// `-0.5 * (d ln 2pi + ln |Sigma_j|)` per component.
    log_norm: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct GmmParams {
    mixing: Vec<f64>,
    means: Vec<Vec<f64>>,
    covariances: Vec<Vec<f64>>,
}

impl TryFrom<GmmParams> for GmmModel {
    type Error = Error;
    fn try_from(p: GmmParams) -> Result<Self> {
        GmmModel::new(p.mixing, p.means, p.covariances)
    }
}

impl From<GmmModel> for GmmParams {
    fn from(m: GmmModel) -> Self {
        GmmParams {
            mixing: m.mixing,
            means: m.means,
            covariances: m.covariances,
        }
    }
}

impl PartialEq for GmmModel {
    fn eq(&self, other: &Self) -> bool {
        self.mixing == other.mixing
            && self.means == other.means
            && self.covariances == other.covariances
    }
}

impl GmmModel {
    pub fn new(mixing: Vec<f64>, means: Vec<Vec<f64>>, covariances: Vec<Vec<f64>>) -> Result<Self> {
        let k = mixing.len();
        if k == 0 || means.len() != k || covariances.len() != k {
            return Err(Error::Shape(format!(
                "mixture needs matching component counts (mixing {k}, means {}, covariances {})",
                means.len(),
                covariances.len()
            )));
        }
        let dim = means[0].len();
        if means.iter().any(|m| m.len() != dim) || covariances.iter().any(|c| c.len() != dim * dim)
        {
            return Err(Error::Shape(format!("inconsistent component dimensions (d = {dim})")));
        }
        if mixing.iter().any(|&a| !(a >= 0.0)) {
            return Err(Error::Fit("mixing weights must be non-negative".into()));
        }
        let mut chol = Vec::with_capacity(k);
        let mut log_norm = Vec::with_capacity(k);
        for (j, cov) in covariances.iter().enumerate() {
            let l = cholesky(cov, dim).ok_or_else(|| {
                Error::Fit(format!("covariance of component {j} is not positive definite"))
            })?;
            log_norm.push(-0.5 * (dim as f64 * LN_2PI + log_det_from_cholesky(&l, dim)));
            chol.push(l);
        }
        Ok(Self {
            mixing,
            means,
            covariances,
            dim,
            chol,
            log_norm,
        })
    }

    pub fn n_components(&self) -> usize {
        self.mixing.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn mixing(&self) -> &[f64] {
        &self.mixing
    }

    pub fn means(&self) -> &[Vec<f64>] {
        &self.means
    }

    pub fn covariances(&self) -> &[Vec<f64>] {
        &self.covariances
    }

    fn check_dim(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim {
            return Err(Error::Shape(format!(
                "point has dimension {}, mixture has {}",
                x.len(),
                self.dim
            )));
        }
        Ok(())
    }

    /// `ln N(x; mu_j, Sigma_j)`; `scratch` needs length `dim`.
    fn component_log_pdf(&self, j: usize, x: &[f64], scratch: &mut [f64]) -> f64 {
        let d = self.dim;
        let mut diff = [0.0f64; 32];
        let m2 = if d <= diff.len() {
            for i in 0..d {
                diff[i] = x[i] - self.means[j][i];
            }
            mahalanobis_sq(&self.chol[j], d, &diff[..d], scratch)
        } else {
            let v: Vec<f64> = x.iter().zip(&self.means[j]).map(|(a, b)| a - b).collect();
            mahalanobis_sq(&self.chol[j], d, &v, scratch)
        };
        self.log_norm[j] - 0.5 * m2
    }

    fn log_pdf_unchecked(&self, x: &[f64], scratch: &mut [f64]) -> f64 {
        let mut terms = [0.0f64; 16];
        let k = self.n_components();
        if k <= terms.len() {
            for (j, term) in terms.iter_mut().take(k).enumerate() {
                *term = self.mixing[j].ln() + self.component_log_pdf(j, x, scratch);
            }
            log_sum_exp(&terms[..k])
        } else {
            let t: Vec<f64> = (0..k)
                .map(|j| self.mixing[j].ln() + self.component_log_pdf(j, x, scratch))
                .collect();
            log_sum_exp(&t)
        }
    }

    /// Log mixture density, evaluated with log-sum-exp.
    pub fn log_pdf(&self, x: &[f64]) -> Result<f64> {
        self.check_dim(x)?;
        let mut scratch = vec![0.0; self.dim];
        Ok(self.log_pdf_unchecked(x, &mut scratch))
    }

    pub fn pdf(&self, x: &[f64]) -> Result<f64> {
        Ok(self.log_pdf(x)?.exp())
    }

    /// `N(x; mu_j, Sigma_j)` evaluated directly, without the log-space path.
    pub fn component_pdf(&self, j: usize, x: &[f64]) -> Result<f64> {
        self.check_dim(x)?;
        let mut scratch = vec![0.0; self.dim];
        Ok(self.component_log_pdf(j, x, &mut scratch).exp())
    }

    /// Mixture density as the plain weighted sum of component densities.
    pub fn pdf_direct(&self, x: &[f64]) -> Result<f64> {
        (0..self.n_components())
            .map(|j| Ok(self.mixing[j] * self.component_pdf(j, x)?))
            .sum()
    }

    /// Mixture over the coordinates in `dims`, obtained by dropping the
    /// other rows and columns of each component.
    pub fn marginal(&self, dims: &[usize]) -> Result<Self> {
        if dims.is_empty() || dims.iter().any(|&i| i >= self.dim) {
            return Err(Error::Shape(format!(
                "invalid marginal coordinates {dims:?} for dimension {}",
                self.dim
            )));
        }
        let d = self.dim;
        let means = self
            .means
            .iter()
            .map(|m| dims.iter().map(|&i| m[i]).collect())
            .collect();
        let covariances = self
            .covariances
            .iter()
            .map(|c| {
                dims.iter()
                    .flat_map(|&i| dims.iter().map(move |&j| c[i * d + j]))
                    .collect()
            })
            .collect();
        Self::new(self.mixing.clone(), means, covariances)
    }

    /// Same mixture with components reordered by `perm`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        Self::new(
            perm.iter().map(|&j| self.mixing[j]).collect(),
            perm.iter().map(|&j| self.means[j].clone()).collect(),
            perm.iter().map(|&j| self.covariances[j].clone()).collect(),
        )
    }

    pub fn n_parameters(&self) -> usize {
        let (k, d) = (self.n_components(), self.dim);
        (k - 1) + k * d + k * d * (d + 1) / 2
    }
}

pub fn log_sum_exp(terms: &[f64]) -> f64 {
    let max = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + terms.iter().map(|t| (t - max).exp()).sum::<f64>().ln()
}

/// Fitted model plus the per-iteration mean log-likelihood.
#[derive(Debug, Clone)]
pub struct GmmFit {
    pub model: GmmModel,
    pub log_likelihood_trace: Vec<f64>,
    pub converged: bool,
}

impl GmmFit {
    pub fn final_log_likelihood(&self) -> f64 {
        *self.log_likelihood_trace.last().unwrap_or(&f64::NAN)
    }
}

pub fn fit_gmm(data: &[Vec<f64>], n_components: usize, seed: u64) -> Result<GmmFit> {
    fit_gmm_with(data, &GmmOptions::new(n_components, seed))
}

pub fn fit_gmm_with(data: &[Vec<f64>], opts: &GmmOptions) -> Result<GmmFit> {
    let n = data.len();
    let k = opts.n_components;
    if n == 0 {
        return Err(Error::Fit("cannot fit a mixture to empty data".into()));
    }
    if k == 0 {
        return Err(Error::Fit("n_components must be at least 1".into()));
    }
    if n < k {
        return Err(Error::Fit(format!(
            "{n} points cannot support {k} mixture components"
        )));
    }
    let d = data[0].len();
    if d == 0 {
        return Err(Error::Fit("points must have at least one coordinate".into()));
    }
    for (i, row) in data.iter().enumerate() {
        if row.len() != d {
            return Err(Error::Shape(format!("row {i} has {} coordinates, expected {d}", row.len())));
        }
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::Fit(format!("row {i} contains a non-finite value")));
        }
    }

    let fallback_cov = pooled_covariance(data, opts.jitter);
    let centers = kmeans_plus_plus(data, k, opts.seed);
    let mut resp = vec![0.0; n * k];
    for (i, x) in data.iter().enumerate() {
        let nearest = (0..k)
            .min_by(|&a, &b| sq_dist(x, &centers[a]).total_cmp(&sq_dist(x, &centers[b])))
            .unwrap();
        resp[i * k + nearest] = 1.0;
    }
    let mut model = m_step(data, &resp, k, opts.jitter, &fallback_cov, &centers)?;

    let mut trace = Vec::new();
    let mut converged = false;
    let mut terms = vec![0.0; k];
    let mut scratch = vec![0.0; d];
    for _ in 0..opts.max_iter {
        let mut ll = 0.0;
        for (i, x) in data.iter().enumerate() {
            for (j, term) in terms.iter_mut().enumerate() {
                *term = model.mixing[j].ln() + model.component_log_pdf(j, x, &mut scratch);
            }
            let lse = log_sum_exp(&terms);
            ll += lse;
            for j in 0..k {
                resp[i * k + j] = (terms[j] - lse).exp();
            }
        }
        let mean_ll = ll / n as f64;
        let improvement = trace.last().map(|prev| mean_ll - prev);
        trace.push(mean_ll);
        if matches!(improvement, Some(delta) if delta < opts.tol) {
            converged = true;
            break;
        }
        let means = model.means.clone();
        model = m_step(data, &resp, k, opts.jitter, &fallback_cov, &means)?;
    }
    Ok(GmmFit {
        model,
        log_likelihood_trace: trace,
        converged,
    })
}

fn m_step(
    data: &[Vec<f64>],
    resp: &[f64],
    k: usize,
    jitter: f64,
    fallback_cov: &[f64],
    previous_means: &[Vec<f64>],
) -> Result<GmmModel> {
    let n = data.len();
    let d = data[0].len();
    let mut weights = vec![0.0; k];
    let mut means = vec![vec![0.0; d]; k];
    for (i, x) in data.iter().enumerate() {
        for j in 0..k {
            let r = resp[i * k + j];
            weights[j] += r;
            for (m, v) in means[j].iter_mut().zip(x) {
                *m += r * v;
            }
        }
    }
    let mut covariances = Vec::with_capacity(k);
    for j in 0..k {
        if weights[j] <= f64::EPSILON * n as f64 {
            // Collapsed component: keep its location, give it the pooled
            // spread and let its weight stay negligible.
            means[j] = previous_means[j].clone();
            covariances.push(fallback_cov.to_vec());
            continue;
        }
        for m in means[j].iter_mut() {
            *m /= weights[j];
        }
        let mut cov = vec![0.0; d * d];
        for (i, x) in data.iter().enumerate() {
            let r = resp[i * k + j];
            if r == 0.0 {
                continue;
            }
            for a in 0..d {
                let da = x[a] - means[j][a];
                for b in 0..=a {
                    cov[a * d + b] += r * da * (x[b] - means[j][b]);
                }
            }
        }
        for a in 0..d {
            for b in 0..=a {
                let v = cov[a * d + b] / weights[j];
                cov[a * d + b] = v;
                cov[b * d + a] = v;
            }
            cov[a * d + a] += jitter;
        }
        covariances.push(cov);
    }
    let floor = f64::MIN_POSITIVE;
    let total: f64 = weights.iter().map(|w| w.max(floor)).sum();
    let mixing = weights.iter().map(|w| w.max(floor) / total).collect();
    GmmModel::new(mixing, means, covariances)
}

fn pooled_covariance(data: &[Vec<f64>], jitter: f64) -> Vec<f64> {
    let n = data.len() as f64;
    let d = data[0].len();
    let mut mean = vec![0.0; d];
    for x in data {
        for (m, v) in mean.iter_mut().zip(x) {
            *m += v / n;
        }
    }
    let mut cov = vec![0.0; d * d];
    for x in data {
        for a in 0..d {
            for b in 0..d {
                cov[a * d + b] += (x[a] - mean[a]) * (x[b] - mean[b]) / n;
            }
        }
    }
    for a in 0..d {
        cov[a * d + a] += jitter.max(1e-3 * cov[a * d + a]);
    }
    cov
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// k-means++ seeding: first center uniform, each next center drawn with
/// probability proportional to squared distance from the nearest chosen one.
fn kmeans_plus_plus(data: &[Vec<f64>], k: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = rng::stream(seed, "gmm/init", 0);
    let n = data.len();
    let mut centers = vec![data[rng.random_range(0..n)].clone()];
    let mut dist: Vec<f64> = data.iter().map(|x| sq_dist(x, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = dist.iter().sum();
        let next = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &w) in dist.iter().enumerate() {
                if u < w {
                    pick = i;
                    break;
                }
                u -= w;
            }
            pick
        } else {
            rng.random_range(0..n)
        };
        let c = data[next].clone();
        for (dv, x) in dist.iter_mut().zip(data) {
            *dv = dv.min(sq_dist(x, &c));
        }
        centers.push(c);
    }
    centers
}

/// Bayesian information criterion, `-2 ln L + p ln n` (lower is better).
pub fn bic(fit: &GmmFit, n: usize) -> f64 {
    -2.0 * fit.final_log_likelihood() * n as f64 + fit.model.n_parameters() as f64 * (n as f64).ln()
}

/// Fits 1..=max_components and keeps the lowest-BIC model.
pub fn fit_gmm_bic(data: &[Vec<f64>], max_components: usize, seed: u64) -> Result<GmmFit> {
    let mut best: Option<(f64, GmmFit)> = None;
    for k in 1..=max_components.min(data.len()).max(1) {
        let fit = fit_gmm(data, k, seed)?;
        let score = bic(&fit, data.len());
        if best.as_ref().is_none_or(|(b, _)| score < *b) {
            best = Some((score, fit));
        }
    }
    best.map(|(_, f)| f)
        .ok_or_else(|| Error::Fit("no candidate mixture could be fitted".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, Normal};

    fn two_clusters(seed: u64) -> Vec<Vec<f64>> {
        let mut r = rng::seeded(seed);
        let a = Normal::new(0.0, 0.5).unwrap();
        let b = Normal::new(10.0, 0.5).unwrap();
        let mut data: Vec<Vec<f64>> = (0..500).map(|_| vec![a.sample(&mut r)]).collect();
        data.extend((0..500).map(|_| vec![b.sample(&mut r)]));
        data
    }

    #[test]
    fn standard_normal_mode() {
        let m = GmmModel::new(vec![1.0], vec![vec![0.0]], vec![vec![1.0]]).unwrap();
        let p = m.pdf(&[0.0]).unwrap();
        assert!((p - 1.0 / (2.0 * std::f64::consts::PI).sqrt()).abs() < 1e-15);
        assert!((p - 0.398942).abs() < 1e-6);
    }

    #[test]
    fn duplicate_components_match_single() {
        let one = GmmModel::new(vec![1.0], vec![vec![0.0]], vec![vec![1.0]]).unwrap();
        let two =
            GmmModel::new(vec![0.5, 0.5], vec![vec![0.0]; 2], vec![vec![1.0]; 2]).unwrap();
        for x in [-3.0, -0.5, 0.0, 1.7, 4.2] {
            assert!((one.pdf(&[x]).unwrap() - two.pdf(&[x]).unwrap()).abs() < 1e-15);
        }
    }

    #[test]
    fn dimension_mismatch_is_shape_error() {
        let m = GmmModel::new(vec![1.0], vec![vec![0.0]], vec![vec![1.0]]).unwrap();
        assert!(matches!(m.pdf(&[0.0, 1.0]), Err(Error::Shape(_))));
    }

    #[test]
    fn recovers_two_separated_clusters() {
        let fit = fit_gmm(&two_clusters(3), 2, 11).unwrap();
        let m = &fit.model;
        let mut order: Vec<usize> = (0..2).collect();
        order.sort_by(|&a, &b| m.means()[a][0].total_cmp(&m.means()[b][0]));
        assert!(m.means()[order[0]][0].abs() < 0.1);
        assert!((m.means()[order[1]][0] - 10.0).abs() < 0.1);
        for &j in &order {
            assert!((m.mixing()[j] - 0.5).abs() < 0.05);
        }
    }

    #[test]
    fn single_component_is_sample_moments() {
        let data: Vec<Vec<f64>> = (0..50)
            .map(|i| {
                let t = i as f64;
                vec![t.sin() * 3.0, (t * 0.7).cos() + 0.1 * t]
            })
            .collect();
        let fit = fit_gmm(&data, 1, 0).unwrap();
        let n = data.len() as f64;
        let mean: Vec<f64> = (0..2).map(|a| data.iter().map(|x| x[a]).sum::<f64>() / n).collect();
        for a in 0..2 {
            assert!((fit.model.means()[0][a] - mean[a]).abs() < 1e-12);
            for b in 0..2 {
                let c = data
                    .iter()
                    .map(|x| (x[a] - mean[a]) * (x[b] - mean[b]))
                    .sum::<f64>()
                    / n;
                let jitter = if a == b { COVARIANCE_JITTER } else { 0.0 };
                assert!((fit.model.covariances()[0][a * 2 + b] - (c + jitter)).abs() < 1e-12);
            }
        }
        assert_eq!(fit.model.mixing(), &[1.0]);
    }

    #[test]
    fn too_few_points_is_fit_error() {
        let data = vec![vec![0.0], vec![1.0], vec![2.0]];
        assert!(matches!(fit_gmm(&data, 5, 0), Err(Error::Fit(_))));
        assert!(matches!(fit_gmm(&[], 1, 0), Err(Error::Fit(_))));
    }

    #[test]
    fn survives_duplicate_points() {
        let data = vec![vec![1.0, 2.0]; 40];
        let fit = fit_gmm(&data, 3, 5).unwrap();
        let p = fit.model.pdf(&[1.0, 2.0]).unwrap();
        assert!(p.is_finite() && p > 0.0);
    }

    #[test]
    fn marginal_of_independent_components() {
        let m = GmmModel::new(
            vec![0.3, 0.7],
            vec![vec![0.0, 5.0], vec![2.0, -1.0]],
            vec![vec![1.0, 0.0, 0.0, 4.0], vec![2.0, 0.0, 0.0, 0.5]],
        )
        .unwrap();
        let marg = m.marginal(&[1]).unwrap();
        let x = 0.7;
        let expected = 0.3 * (-(x - 5.0f64).powi(2) / 8.0).exp() / (2.0 * std::f64::consts::PI * 4.0).sqrt()
            + 0.7 * (-(x + 1.0f64).powi(2) / 1.0).exp() / (2.0 * std::f64::consts::PI * 0.5).sqrt();
        assert!((marg.pdf(&[x]).unwrap() - expected).abs() < 1e-14);
    }

    #[test]
    fn bic_prefers_two_components_for_two_clusters() {
        let fit = fit_gmm_bic(&two_clusters(8), 4, 1).unwrap();
        assert!(fit.model.n_components() >= 2);
    }
}
