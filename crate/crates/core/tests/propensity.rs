mod common;

use common::{all_vectors, density_oracle, random_cluster, random_model, rng, simulate_observed};
use rand::Rng;
use spillover::estimators::{group_estimate, psi_a_gamma_derivative};
use spillover::propensity::{self, cluster_density, log_cluster_density, score, score_jacobian, FitSettings};
use spillover::{CounterfactualPolicy, Population, PropensityModel};

#[test]
fn density_matches_adaptive_integration() {
    let mut r = rng(31);
    for i in 0..50 {
        let n = r.gen_range(1..=10);
        let p = r.gen_range(1..=3);
        let sigma = if i % 10 == 0 { 0.0 } else { r.gen_range(0.0..1.5) };
        let mut model = random_model(&mut r, p, sigma);
        model.quadrature_order = 30;
        let c = random_cluster(&mut r, "c", n, p);
        let quad = cluster_density(&model, &c).unwrap();
        let oracle = density_oracle(&model, &c);
        assert!((quad - oracle).abs() < 1e-8, "n={n} sigma={sigma}: {quad} vs {oracle}");
    }
}

#[test]
fn density_sums_to_one_over_treatment_vectors() {
    let mut r = rng(32);
    for n in 1..=10 {
        let sigma = r.gen_range(0.0..1.5);
        let model = random_model(&mut r, 2, sigma);
        let base = random_cluster(&mut r, "c", n, 2);
        let total: f64 = all_vectors(n)
            .into_iter()
            .map(|a| cluster_density(&model, &base.with_observations(a, vec![0.0; n]).unwrap()).unwrap())
            .sum();
        assert!((total - 1.0).abs() < 1e-8, "n={n}: {total}");
    }
}

fn log_density_at(model: &PropensityModel, theta: &[f64], c: &spillover::ClusterData) -> f64 {
    log_cluster_density(&PropensityModel::from_params(theta, model.quadrature_order), c).unwrap()
}

#[test]
fn score_matches_finite_differences() {
    let mut r = rng(33);
    for _ in 0..50 {
        let n = r.gen_range(1..=12);
        let p = r.gen_range(1..=4);
        let sigma = r.gen_range(0.1..1.5);
        let model = random_model(&mut r, p, sigma);
        let c = random_cluster(&mut r, "c", n, p);
        let s = score(&model, &c).unwrap();
        let theta = model.to_params();
        for k in 0..theta.len() {
            let h = 1e-5;
            let (mut up, mut down) = (theta.clone(), theta.clone());
            up[k] += h;
            down[k] -= h;
            let fd = (log_density_at(&model, &up, &c) - log_density_at(&model, &down, &c)) / (2.0 * h);
            assert!((s[k] - fd).abs() < 1e-6, "coord {k}: {} vs {fd}", s[k]);
        }
    }
}

#[test]
fn psi_gamma_derivative_matches_finite_differences() {
    let mut r = rng(34);
    for _ in 0..50 {
        let n = r.gen_range(1..=8);
        let p = r.gen_range(1..=3);
        let sigma = r.gen_range(0.1..1.2);
        let model = random_model(&mut r, p, sigma);
        let c = random_cluster(&mut r, "c", n, p);
        let pop = Population::new(vec![c.clone()]).unwrap();
        let alpha = r.gen_range(0.2..0.8);
        let delta_l: Vec<f64> = (0..p).map(|_| r.gen_range(-0.5..0.5)).collect();
        let policy = CounterfactualPolicy::solve(&pop, delta_l, &[alpha], 1e-12).unwrap();
        let a = r.gen_range(0..2u8);
        let analytic = psi_a_gamma_derivative(&c, &policy, alpha, a, &model).unwrap();
        let theta = model.to_params();
        let psi = |t: &[f64]| {
            let m = PropensityModel::from_params(t, model.quadrature_order);
            group_estimate(&c, &policy, alpha, a, cluster_density(&m, &c).unwrap()).unwrap()
        };
        for k in 0..theta.len() {
            let h = 1e-5 * theta[k].abs().max(1.0);
            let (mut up, mut down) = (theta.clone(), theta.clone());
            up[k] += h;
            down[k] -= h;
            let fd = (psi(&up) - psi(&down)) / (2.0 * h);
            let tol = 1e-5 * fd.abs().max(1.0);
            assert!((analytic[k] - fd).abs() < tol, "coord {k}: {} vs {fd}", analytic[k]);
        }
    }
}

#[test]
fn jacobian_is_symmetric_and_negative_on_average() {
    let mut r = rng(35);
    let model = PropensityModel::new(-0.2, vec![0.4, -0.3], 0.6).unwrap();
    let pop = simulate_observed(&mut r, &model, 400, (4, 8));
    let q = model.n_params();
    let mut h = nalgebra::DMatrix::zeros(q, q);
    for c in pop.clusters() {
        let j = score_jacobian(&model, c).unwrap();
        assert!((&j - j.transpose()).amax() == 0.0);
        h += j;
    }
    let info = -h / pop.n_clusters() as f64;
    assert!(info.cholesky().is_some());
}

#[test]
fn information_identity_at_true_parameters() {
    // E[psi_gamma psi_gamma'] = -E[d psi_gamma / d gamma'] under the model
    let mut r = rng(36);
    let model = PropensityModel::new(-0.2, vec![0.4, -0.3], 0.6).unwrap();
    let pop = simulate_observed(&mut r, &model, 4000, (5, 10));
    let q = model.n_params();
    let (mut outer, mut hess) = (nalgebra::DMatrix::zeros(q, q), nalgebra::DMatrix::zeros(q, q));
    for c in pop.clusters() {
        let s = nalgebra::DVector::from_vec(score(&model, c).unwrap());
        outer += &s * s.transpose();
        hess -= score_jacobian(&model, c).unwrap();
    }
    for i in 0..q {
        let rel = (outer[(i, i)] - hess[(i, i)]).abs() / hess[(i, i)];
        assert!(rel < 0.1, "diag {i}: {} vs {}", outer[(i, i)], hess[(i, i)]);
    }
}

#[test]
fn fit_recovers_parameters_and_is_start_invariant() {
    let mut r = rng(37);
    let truth = PropensityModel::new(-0.2, vec![0.3, -0.15, 0.2], 0.5).unwrap();
    let pop = simulate_observed(&mut r, &truth, 1500, (8, 14));
    let start_a = PropensityModel::new(0.0, vec![0.0; 3], 0.3).unwrap();
    let start_b = PropensityModel::new(1.0, vec![-0.5, 0.5, 0.5], 1.5).unwrap();
    let fa = propensity::fit(&pop, &start_a, FitSettings::default()).unwrap();
    let fb = propensity::fit(&pop, &start_b, FitSettings::default()).unwrap();
    assert!(fa.converged && fb.converged, "{fa:?}\n{fb:?}");
    assert!(!fa.singular_hessian && !fa.degenerate_sigma);
    assert!((fa.model.delta0 - truth.delta0).abs() < 0.15, "{:?}", fa.model);
    for (d, t) in fa.model.delta.iter().zip(&truth.delta) {
        assert!((d - t).abs() < 0.1, "{:?}", fa.model);
    }
    assert!((fa.model.sigma_b - truth.sigma_b).abs() < 0.15, "{:?}", fa.model);
    for (x, y) in fa.model.to_params().iter().zip(fb.model.to_params()) {
        assert!((x - y).abs() < 1e-4, "{:?} vs {:?}", fa.model, fb.model);
    }
    assert!((fa.log_likelihood - fb.log_likelihood).abs() < 1e-6);
    // the summed score vanishes at the optimum
    let total: Vec<f64> = propensity::scores(&fa.model, &pop).unwrap().iter().fold(vec![0.0; 5], |mut acc, s| {
        acc.iter_mut().zip(s).for_each(|(a, b)| *a += b);
        acc
    });
    assert!(total.iter().all(|g| g.abs() < 1e-5), "{total:?}");
}

#[test]
fn fit_without_cluster_effect_reports_boundary() {
    let mut r = rng(38);
    let truth = PropensityModel::new(0.1, vec![0.5], 0.0).unwrap();
    let pop = simulate_observed(&mut r, &truth, 300, (1, 1));
    let fit = propensity::fit(&pop, &PropensityModel::new(0.0, vec![0.0], 0.5).unwrap(), FitSettings::default()).unwrap();
    // single-unit clusters cannot identify sigma_b beyond its effect on the marginal
    assert!(fit.model.delta0.is_finite());
    assert!(fit.converged || fit.degenerate_sigma);
}
