//! Random-intercept logistic cluster propensity score.
//!
//! The probability of a cluster's observed treatment vector is
//!
//! ```text
//! f(A_i | L_i) = ∫ prod_j expit(eta_ij + b)^A_ij (1 - expit(eta_ij + b))^(1 - A_ij) phi(b; sigma_b^2) db
//! ```
//!
//! with `eta_ij = delta0 + L_ij' delta`. The integral is evaluated by adaptive
//! Gauss-Hermite quadrature: with `b = sigma_b z`, the nodes are centred at the
//! mode of the integrand in `z` and scaled by its curvature there.
//!
//! Scores and Jacobians are taken with respect to the unconstrained parameter
//! vector `(delta0, delta, ln sigma_b)`, the same parameterisation the fit
//! optimises over. Sandwich variances built from these scores do not depend on
//! that choice.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{expit, log_expit, log_sum_exp};
use crate::model::{ClusterData, Population, PropensityModel};
use crate::optim::{self, BfgsSettings};
use crate::quadrature::GaussHermite;

/// Below this value of `ln sigma_b` the random effect is treated as absent.
pub const LOG_SIGMA_FLOOR: f64 = -9.0;

/// Relative step used for finite-difference Jacobians of the score.
pub const JACOBIAN_STEP: f64 = 1e-5;

struct ClusterEval {
    log_density: f64,
    score: Option<Vec<f64>>,
}

fn evaluate(model: &PropensityModel, cluster: &ClusterData, want_score: bool) -> ClusterEval {
    let n = cluster.len();
    let q = model.n_params();
    let eta: Vec<f64> = cluster.covariate_rows().map(|row| model.linear_predictor(row)).collect();
    let a = cluster.treatment();

    if model.sigma_b == 0.0 {
        let log_density = eta
            .iter()
            .zip(a)
            .map(|(&e, &aj)| if aj == 1 { log_expit(e) } else { log_expit(-e) })
            .sum();
        let score = want_score.then(|| {
            let mut s = vec![0.0; q];
            for (j, row) in cluster.covariate_rows().enumerate() {
                let r = f64::from(a[j]) - expit(eta[j]);
                s[0] += r;
                for (sk, x) in s[1..q - 1].iter_mut().zip(row) {
                    *sk += r * x;
                }
            }
            s
        });
        return ClusterEval { log_density, score };
    }

    let sigma = model.sigma_b;
    let (mode, tau) = posterior_mode(&eta, a, sigma);
    let rule = GaussHermite::cached(model.quadrature_order);
    let k_nodes = rule.order();
    let mut log_terms = Vec::with_capacity(k_nodes);
    let mut node_b = Vec::with_capacity(k_nodes);
    let mut pis = if want_score { vec![0.0; n * k_nodes] } else { Vec::new() };
    for (k, (&t, &lw)) in rule.nodes.iter().zip(&rule.log_weights).enumerate() {
        let z = mode + std::f64::consts::SQRT_2 * tau * t;
        let b = sigma * z;
        let mut ll = 0.0;
        for j in 0..n {
            let e = eta[j] + b;
            ll += if a[j] == 1 { log_expit(e) } else { log_expit(-e) };
            if want_score {
                pis[k * n + j] = expit(e);
            }
        }
        log_terms.push(lw + t * t - 0.5 * z * z + tau.ln() + ll);
        node_b.push(b);
    }
    let log_density = log_sum_exp(&log_terms);
    if !want_score {
        return ClusterEval { log_density, score: None };
    }

    // posterior weights of the quadrature nodes
    let omega: Vec<f64> = log_terms.iter().map(|lt| (lt - log_density).exp()).collect();
    let mut s = vec![0.0; q];
    let mut sigma_term = 0.0;
    for (k, &wk) in omega.iter().enumerate() {
        let b = node_b[k];
        let resid: f64 = (0..n).map(|j| f64::from(a[j]) - pis[k * n + j]).sum();
        sigma_term += wk * b * resid;
    }
    for (j, row) in cluster.covariate_rows().enumerate() {
        let fitted: f64 = omega.iter().enumerate().map(|(k, wk)| wk * pis[k * n + j]).sum();
        let r = f64::from(a[j]) - fitted;
        s[0] += r;
        for (sk, x) in s[1..q - 1].iter_mut().zip(row) {
            *sk += r * x;
        }
    }
    s[q - 1] = sigma_term;
    ClusterEval { log_density, score: Some(s) }
}

/// Mode `z` of `sum_j ln P(A_ij | eta_ij + sigma z) - z^2 / 2` and the
/// curvature scale `tau = (-d2)^(-1/2)` there. The function is strictly
/// concave, so damped Newton converges from zero.
fn posterior_mode(eta: &[f64], a: &[u8], sigma: f64) -> (f64, f64) {
    let objective = |z: f64| -> f64 {
        eta.iter()
            .zip(a)
            .map(|(&e, &aj)| if aj == 1 { log_expit(e + sigma * z) } else { log_expit(-(e + sigma * z)) })
            .sum::<f64>()
            - 0.5 * z * z
    };
    let derivatives = |z: f64| -> (f64, f64) {
        let (mut d1, mut d2) = (-z, -1.0);
        for (&e, &aj) in eta.iter().zip(a) {
            let p = expit(e + sigma * z);
            d1 += sigma * (f64::from(aj) - p);
            d2 -= sigma * sigma * p * (1.0 - p);
        }
        (d1, d2)
    };
    let mut z = 0.0;
    let mut f = objective(z);
    for _ in 0..100 {
        let (d1, d2) = derivatives(z);
        let mut step = -d1 / d2;
        if step.abs() < 1e-12 {
            break;
        }
        let mut next = z + step;
        let mut f_next = objective(next);
        while f_next < f && step.abs() > 1e-14 {
            step *= 0.5;
            next = z + step;
            f_next = objective(next);
        }
        z = next;
        f = f_next;
    }
    let (_, d2) = derivatives(z);
    (z, (-d2).sqrt().recip())
}

fn check_dims(model: &PropensityModel, cluster: &ClusterData) -> Result<()> {
    if model.p() != cluster.p() {
        return Err(Error::DimensionMismatch(format!(
            "propensity model has {} covariates, cluster `{}` has {}",
            model.p(),
            cluster.id(),
            cluster.p()
        )));
    }
    Ok(())
}

/// `ln f(A_i | L_i; gamma)`.
pub fn log_cluster_density(model: &PropensityModel, cluster: &ClusterData) -> Result<f64> {
    check_dims(model, cluster)?;
    Ok(evaluate(model, cluster, false).log_density)
}

/// Cluster propensity score of the observed treatment vector.
pub fn cluster_density(model: &PropensityModel, cluster: &ClusterData) -> Result<f64> {
    log_cluster_density(model, cluster).map(f64::exp)
}

/// Log densities of every cluster, in population order.
pub fn log_densities(model: &PropensityModel, population: &Population) -> Result<Vec<f64>> {
    population.clusters().par_iter().map(|c| log_cluster_density(model, c)).collect()
}

/// `d ln f / d (delta0, delta, ln sigma_b)`. The last entry is zero when
/// `sigma_b == 0`.
pub fn score(model: &PropensityModel, cluster: &ClusterData) -> Result<Vec<f64>> {
    check_dims(model, cluster)?;
    Ok(evaluate(model, cluster, true).score.expect("score requested"))
}

/// Scores of every cluster, in population order.
pub fn scores(model: &PropensityModel, population: &Population) -> Result<Vec<Vec<f64>>> {
    population.clusters().par_iter().map(|c| score(model, c)).collect()
}

/// Central finite differences of the analytic score, before symmetrisation.
/// With `sigma_b == 0` the `ln sigma_b` row and column are zero.
pub fn score_jacobian_raw(model: &PropensityModel, cluster: &ClusterData) -> Result<DMatrix<f64>> {
    check_dims(model, cluster)?;
    let q = model.n_params();
    let theta = model.to_params();
    let free = if model.sigma_b == 0.0 { q - 1 } else { q };
    let mut jac = DMatrix::zeros(q, q);
    for c in 0..free {
        let h = JACOBIAN_STEP * theta[c].abs().max(1.0);
        let mut up = theta.clone();
        let mut down = theta.clone();
        up[c] += h;
        down[c] -= h;
        let s_up = score(&with_params(model, &up), cluster)?;
        let s_down = score(&with_params(model, &down), cluster)?;
        for r in 0..q {
            jac[(r, c)] = (s_up[r] - s_down[r]) / (2.0 * h);
        }
    }
    Ok(jac)
}

/// Per-cluster Hessian of `ln f`, symmetrised as `(H + H') / 2`.
pub fn score_jacobian(model: &PropensityModel, cluster: &ClusterData) -> Result<DMatrix<f64>> {
    let raw = score_jacobian_raw(model, cluster)?;
    Ok((&raw + raw.transpose()) * 0.5)
}

fn with_params(model: &PropensityModel, theta: &[f64]) -> PropensityModel {
    let mut m = PropensityModel::from_params(theta, model.quadrature_order);
    if model.sigma_b == 0.0 {
        m.sigma_b = 0.0;
    }
    m
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitSettings {
    /// Convergence threshold on the max-norm of the total log-likelihood gradient.
    pub grad_tol: f64,
    pub max_iter: usize,
}

impl Default for FitSettings {
    fn default() -> Self {
        Self { grad_tol: 1e-6, max_iter: 500 }
    }
}

/// Maximum likelihood fit of the propensity model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedPropensity {
    pub model: PropensityModel,
    pub log_likelihood: f64,
    pub converged: bool,
    pub iterations: usize,
    /// Max-norm of the log-likelihood gradient over the free parameters.
    pub gradient_max_norm: f64,
    /// The random-intercept variance was estimated at the boundary and `sigma_b`
    /// is reported as exactly zero.
    pub degenerate_sigma: bool,
    /// The summed score Jacobian was not negative definite at the optimum.
    pub singular_hessian: bool,
}

fn total_loglik(population: &Population, model: &PropensityModel) -> (f64, Vec<f64>) {
    let evals: Vec<ClusterEval> = population.clusters().par_iter().map(|c| evaluate(model, c, true)).collect();
    let q = model.n_params();
    let mut ll = 0.0;
    let mut grad = vec![0.0; q];
    for e in evals {
        ll += e.log_density;
        for (g, s) in grad.iter_mut().zip(e.score.expect("score requested")) {
            *g += s;
        }
    }
    (ll, grad)
}

/// Fits `(delta0, delta, ln sigma_b)` by BFGS on the negative log-likelihood.
///
/// A `sigma_b` of zero in `init` starts the search at `sigma_b = 0.05`. If
/// the search drives `ln sigma_b` below [`LOG_SIGMA_FLOOR`] the random effect
/// is dropped and the fixed effects are refitted with `sigma_b = 0`.
/// Non-convergence is reported through the `converged` flag, not an error.
pub fn fit(population: &Population, init: &PropensityModel, settings: FitSettings) -> Result<FittedPropensity> {
    init.validate()?;
    let p = population.p();
    if init.p() != p {
        return Err(Error::DimensionMismatch(format!("initial model has {} covariates, data has {p}", init.p())));
    }
    if population.n_clusters() < p + 2 {
        return Err(Error::InvalidParameter(format!(
            "{} clusters are too few to fit {} propensity parameters",
            population.n_clusters(),
            p + 2
        )));
    }
    let order = init.quadrature_order;
    let bfgs = BfgsSettings { grad_tol: settings.grad_tol, max_iter: settings.max_iter };

    let mut start = init.clone();
    start.sigma_b = start.sigma_b.max(0.05);
    let objective = |theta: &[f64]| {
        let model = PropensityModel::from_params(theta, order);
        let (ll, g) = total_loglik(population, &model);
        if !ll.is_finite() {
            return (f64::INFINITY, g);
        }
        (-ll, g.into_iter().map(|x| -x).collect())
    };
    let mut theta0 = start.to_params();
    let mut result = optim::minimize(objective, &theta0, bfgs);
    let mut degenerate = false;

    if result.x[p + 1] < LOG_SIGMA_FLOOR {
        degenerate = true;
        theta0 = result.x[..=p].to_vec();
        let fixed = |theta: &[f64]| {
            let mut model = PropensityModel::from_params(&[theta, &[0.0]].concat(), order);
            model.sigma_b = 0.0;
            let (ll, g) = total_loglik(population, &model);
            (-ll, g[..=p].iter().map(|x| -x).collect())
        };
        let refit = optim::minimize(fixed, &theta0, bfgs);
        result = optim::BfgsResult {
            x: [refit.x.as_slice(), &[f64::NEG_INFINITY]].concat(),
            iterations: result.iterations + refit.iterations,
            ..refit
        };
    }

    let mut model = PropensityModel::from_params(&result.x, order);
    if degenerate {
        model.sigma_b = 0.0;
    }
    if !model.delta0.is_finite() || model.delta.iter().any(|d| !d.is_finite()) {
        return Err(Error::Numerical("propensity fit diverged".into()));
    }
    let gradient_max_norm = result.gradient.iter().fold(0.0f64, |m, g| m.max(g.abs()));

    let mut hessian = DMatrix::zeros(model.n_params(), model.n_params());
    for c in population.clusters() {
        hessian += score_jacobian(&model, c)?;
    }
    let free = if degenerate { p + 1 } else { p + 2 };
    let info = -hessian.view((0, 0), (free, free)).into_owned();
    let singular_hessian = info.cholesky().is_none();

    Ok(FittedPropensity {
        model,
        log_likelihood: -result.value,
        converged: result.converged,
        iterations: result.iterations,
        gradient_max_norm,
        degenerate_sigma: degenerate,
        singular_hessian,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn cluster(cov: Vec<Vec<f64>>, a: Vec<u8>) -> ClusterData {
        let n = a.len();
        ClusterData::new("c", cov, a, vec![0.0; n]).unwrap()
    }

    #[test]
    fn degenerate_sigma_is_plain_logistic() {
        let m = PropensityModel::new(0.3, vec![0.7, -0.2], 0.0).unwrap();
        let c = cluster(vec![vec![0.5, 1.0], vec![-1.0, 2.0], vec![0.0, 0.0]], vec![1, 0, 1]);
        let direct: f64 = c
            .covariate_rows()
            .zip(c.treatment())
            .map(|(row, &a)| {
                let p = expit(m.linear_predictor(row));
                if a == 1 {
                    p
                } else {
                    1.0 - p
                }
            })
            .product();
        assert_relative_eq!(cluster_density(&m, &c).unwrap(), direct, max_relative = 1e-14);
    }

    #[test]
    fn single_unit_symmetric_half() {
        let c = cluster(vec![vec![0.9]], vec![1]);
        for sigma in [0.0, 0.3, 1.0, 2.5] {
            let m = PropensityModel::new(0.0, vec![0.0], sigma).unwrap();
            assert_relative_eq!(cluster_density(&m, &c).unwrap(), 0.5, epsilon = 1e-7);
        }
    }

    #[test]
    fn degenerate_single_unit_score_and_hessian() {
        let m = PropensityModel::new(-0.4, vec![0.8], 0.0).unwrap();
        let c = cluster(vec![vec![1.3]], vec![1]);
        let p = expit(-0.4 + 0.8 * 1.3);
        let s = score(&m, &c).unwrap();
        assert_relative_eq!(s[0], 1.0 - p, epsilon = 1e-15);
        assert_relative_eq!(s[1], (1.0 - p) * 1.3, epsilon = 1e-15);
        assert_eq!(s[2], 0.0);

        let h = score_jacobian(&m, &c).unwrap();
        let w = p * (1.0 - p);
        let x = [1.0, 1.3];
        for r in 0..2 {
            for k in 0..2 {
                assert!((h[(r, k)] + w * x[r] * x[k]).abs() < 1e-6);
            }
        }
        assert_eq!(h[(2, 2)], 0.0);
    }

    #[test]
    fn jacobian_is_nearly_symmetric() {
        let m = PropensityModel::new(-0.2, vec![0.3, -0.15], 0.6).unwrap();
        let c = cluster(vec![vec![0.1, 1.2], vec![-0.7, 0.3], vec![1.5, -0.4], vec![0.2, 0.2]], vec![1, 0, 1, 1]);
        let raw = score_jacobian_raw(&m, &c).unwrap();
        let asym = (&raw - raw.transpose()).abs().max();
        assert!(asym < 1e-4, "asymmetry {asym}");
        let sym = score_jacobian(&m, &c).unwrap();
        assert_eq!(sym, sym.transpose());
    }

    #[test]
    fn dimension_checks() {
        let m = PropensityModel::new(0.0, vec![0.0, 0.0], 0.5).unwrap();
        let c = cluster(vec![vec![0.0]], vec![1]);
        assert!(matches!(cluster_density(&m, &c), Err(Error::DimensionMismatch(_))));
    }
}
