mod common;

use common::{rng, simulate_observed};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use spillover::estimators::{
    estimate_table, f_alpha_contrast, f_alpha_group_estimate_mixture, f_alpha_indirect, group_estimate,
    variance_estimated_ps, variance_indirect,
};
use spillover::propensity::{self, cluster_density};
use spillover::{CounterfactualPolicy, DiscreteAlphaDistribution, Population, PropensityModel};

const ALPHAS: [f64; 3] = [0.3, 0.45, 0.6];

fn fixture(seed: u64, n_clusters: usize) -> (Population, PropensityModel, CounterfactualPolicy) {
    let mut r = rng(seed);
    let model = PropensityModel::new(-0.2, vec![0.4, -0.3], 0.5).unwrap();
    let pop = simulate_observed(&mut r, &model, n_clusters, (3, 9));
    let policy = CounterfactualPolicy::solve(&pop, vec![0.4, -0.3], &ALPHAS, 1e-12).unwrap();
    (pop, model, policy)
}

/// Covariance of the estimated-propensity sandwich, assembled cluster by
/// cluster from the group estimates and scores.
fn sandwich_oracle(pop: &Population, model: &PropensityModel, policy: &CounterfactualPolicy) -> DMatrix<f64> {
    let cells: Vec<(u8, f64)> = [0u8, 1].iter().flat_map(|&a| ALPHAS.iter().map(move |&al| (a, al))).collect();
    let n = pop.n_clusters() as f64;
    let m = cells.len();
    let q = model.n_params();
    let ys: Vec<DVector<f64>> = pop
        .clusters()
        .iter()
        .map(|c| {
            let f = cluster_density(model, c).unwrap();
            DVector::from_iterator(m, cells.iter().map(|&(a, al)| group_estimate(c, policy, al, a, f).unwrap()))
        })
        .collect();
    let ss: Vec<DVector<f64>> =
        pop.clusters().iter().map(|c| DVector::from_vec(propensity::score(model, c).unwrap())).collect();
    let mu = ys.iter().fold(DVector::zeros(m), |acc, y| acc + y) / n;
    let (mut v, mut a21, mut b11, mut b12) =
        (DMatrix::zeros(m, m), DMatrix::zeros(m, q), DMatrix::zeros(q, q), DMatrix::zeros(q, m));
    for (y, s) in ys.iter().zip(&ss) {
        let psi = y - &mu;
        v += &psi * psi.transpose();
        a21 -= y * s.transpose();
        b11 += s * s.transpose();
        b12 += s * psi.transpose();
    }
    let (v, a21, b11, b12) = (v / n, a21 / n, b11 / n, b12 / n);
    let inv = b11.try_inverse().unwrap();
    let cross = &a21 * &inv * &b12;
    v + &a21 * &inv * a21.transpose() + &cross + cross.transpose()
}

#[test]
fn estimated_sandwich_recomposes_from_blocks() {
    let (pop, model, policy) = fixture(51, 300);
    let ld = propensity::log_densities(&model, &pop).unwrap();
    let scores = propensity::scores(&model, &pop).unwrap();
    let (table, _) = estimate_table(&pop, &policy, &ALPHAS, &ld, Some(&scores)).unwrap();
    let oracle = sandwich_oracle(&pop, &model, &policy);
    let scale = oracle.amax();
    assert!((&table.covariance - &oracle).amax() < 1e-10 * scale, "{}\n{}", table.covariance, oracle);
    assert!(!table.ridge_applied);
}

#[test]
fn pairwise_covariances_are_grid_submatrices() {
    let (pop, model, policy) = fixture(52, 200);
    let ld = propensity::log_densities(&model, &pop).unwrap();
    let scores = propensity::scores(&model, &pop).unwrap();
    let (table, _) = estimate_table(&pop, &policy, &ALPHAS, &ld, Some(&scores)).unwrap();
    let w = variance_estimated_ps(&pop, &policy, 0.45, &model).unwrap();
    let (i0, i1) = (table.index_of(0, 0.45).unwrap(), table.index_of(1, 0.45).unwrap());
    let q = variance_indirect(&pop, &policy, 0.3, 0.6, &model).unwrap();
    let (j0, j1) = (table.index_of(0, 0.3).unwrap(), table.index_of(0, 0.6).unwrap());
    for (sub, (x, y)) in [(w, (i0, i1)), (q, (j0, j1))] {
        let idx = [x, y];
        for r in 0..2 {
            for c in 0..2 {
                let full = table.covariance[(idx[r], idx[c])];
                assert!((sub[(r, c)] - full).abs() < 1e-12 * full.abs().max(1.0));
            }
        }
    }
}

#[test]
fn known_ps_variance_is_covariance_of_group_estimates() {
    let (pop, model, policy) = fixture(53, 150);
    let ld = propensity::log_densities(&model, &pop).unwrap();
    let (table, blocks) = estimate_table(&pop, &policy, &ALPHAS, &ld, None).unwrap();
    let n = pop.n_clusters();
    for r in 0..table.cells.len() {
        for c in 0..table.cells.len() {
            let (mr, mc) = (table.estimates[r], table.estimates[c]);
            let cov: f64 = (0..n)
                .map(|i| (blocks.group_estimates[(i, r)] - mr) * (blocks.group_estimates[(i, c)] - mc))
                .sum::<f64>()
                / n as f64;
            assert!((table.covariance[(r, c)] - cov).abs() < 1e-12 * cov.abs().max(1.0));
        }
    }
}

#[test]
fn covariances_are_symmetric_psd() {
    let mut r = rng(54);
    for seed in 0..10 {
        let (pop, model, policy) = fixture(100 + seed, r.gen_range(20..120));
        let ld = propensity::log_densities(&model, &pop).unwrap();
        let scores = propensity::scores(&model, &pop).unwrap();
        for s in [None, Some(scores.as_slice())] {
            let (table, _) = estimate_table(&pop, &policy, &ALPHAS, &ld, s).unwrap();
            let cov = &table.covariance;
            assert_eq!(cov, &cov.transpose());
            let eig = cov.clone().symmetric_eigen();
            let floor = -1e-10 * cov.amax().max(1.0);
            assert!(eig.eigenvalues.iter().all(|&e| e >= floor), "{:?}", eig.eigenvalues);
        }
    }
}

#[test]
fn f_alpha_paths_agree() {
    let (pop, model, policy) = fixture(55, 60);
    let mut r = rng(56);
    let ld = propensity::log_densities(&model, &pop).unwrap();
    let (table, _) = estimate_table(&pop, &policy, &ALPHAS, &ld, None).unwrap();
    for _ in 0..20 {
        let k = r.gen_range(1..=3);
        let mut support: Vec<f64> = ALPHAS.to_vec();
        support.truncate(k);
        let raw: Vec<f64> = (0..k).map(|_| r.gen_range(0.05..1.0)).collect();
        let total: f64 = raw.iter().sum();
        let mut probs: Vec<f64> = raw.iter().map(|x| x / total).collect();
        let head: f64 = probs[..k - 1].iter().sum();
        probs[k - 1] = 1.0 - head;
        let dist = DiscreteAlphaDistribution::new(support, probs).unwrap();
        for a in 0..2u8 {
            let (linear, _) = f_alpha_contrast(&table, &dist, a).unwrap();
            let mixture = pop
                .clusters()
                .iter()
                .map(|c| {
                    let f = cluster_density(&model, c).unwrap();
                    f_alpha_group_estimate_mixture(c, &policy, &dist, a, f).unwrap()
                })
                .sum::<f64>()
                / pop.n_clusters() as f64;
            assert!((linear - mixture).abs() < 1e-12, "{linear} vs {mixture}");
        }
        let (ie, var) = f_alpha_indirect(&table, &dist, &dist).unwrap();
        assert_eq!(ie, 0.0);
        assert_eq!(var, 0.0);
    }
}
