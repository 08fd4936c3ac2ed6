#![allow(dead_code)]

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use spillover::{ClusterData, Population, PropensityModel};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn expit(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Every binary vector of length `n`, in counting order.
pub fn all_vectors(n: usize) -> Vec<Vec<u8>> {
    (0..1usize << n).map(|m| (0..n).map(|j| ((m >> j) & 1) as u8).collect()).collect()
}

pub fn random_cluster(rng: &mut ChaCha8Rng, id: &str, n: usize, p: usize) -> ClusterData {
    let cov = (0..n).map(|_| (0..p).map(|_| rng.gen_range(-1.5..1.5)).collect()).collect();
    let a = (0..n).map(|_| u8::from(rng.gen::<bool>())).collect();
    let y = (0..n).map(|_| rng.gen_range(-1.0..3.0)).collect();
    ClusterData::new(id, cov, a, y).unwrap()
}

pub fn random_population(rng: &mut ChaCha8Rng, n_clusters: usize, sizes: (usize, usize), p: usize) -> Population {
    let clusters = (0..n_clusters)
        .map(|i| {
            let n = rng.gen_range(sizes.0..=sizes.1);
            random_cluster(rng, &format!("c{i}"), n, p)
        })
        .collect();
    Population::new(clusters).unwrap()
}

pub fn random_model(rng: &mut ChaCha8Rng, p: usize, sigma: f64) -> PropensityModel {
    PropensityModel::new(rng.gen_range(-0.8..0.8), (0..p).map(|_| rng.gen_range(-0.8..0.8)).collect(), sigma).unwrap()
}

/// Draws treatments from a random-intercept logistic model; outcomes depend
/// on own treatment, the treated share and the first covariate.
pub fn simulate_observed(rng: &mut ChaCha8Rng, model: &PropensityModel, n_clusters: usize, sizes: (usize, usize)) -> Population {
    let p = model.delta.len();
    let clusters = (0..n_clusters)
        .map(|i| {
            let n = rng.gen_range(sizes.0..=sizes.1);
            let cov: Vec<Vec<f64>> = (0..n).map(|_| (0..p).map(|_| rng.gen_range(-1.7..1.7)).collect()).collect();
            let b = model.sigma_b * box_muller(rng);
            let a: Vec<u8> = cov
                .iter()
                .map(|row| {
                    let eta = model.delta0 + b + row.iter().zip(&model.delta).map(|(x, d)| x * d).sum::<f64>();
                    u8::from(rng.gen::<f64>() < expit(eta))
                })
                .collect();
            let share = a.iter().map(|&x| f64::from(x)).sum::<f64>() / n as f64;
            let y = (0..n)
                .map(|j| 1.0 + 0.5 * f64::from(a[j]) - share + 0.3 * cov[j][0] + 0.5 * box_muller(rng))
                .collect();
            ClusterData::new(format!("c{i}"), cov, a, y).unwrap()
        })
        .collect();
    Population::new(clusters).unwrap()
}

pub fn box_muller(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen::<f64>().max(1e-300);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Adaptive Simpson integration of `f` on `[a, b]`.
pub fn adaptive_simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    fn recurse(f: &dyn Fn(f64) -> f64, a: f64, b: f64, fa: f64, fm: f64, fb: f64, whole: f64, tol: f64, depth: u32) -> f64 {
        let m = 0.5 * (a + b);
        let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
        let (flm, frm) = (f(lm), f(rm));
        let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
        let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
        let delta = left + right - whole;
        if depth == 0 || delta.abs() <= 15.0 * tol {
            return left + right + delta / 15.0;
        }
        recurse(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1)
            + recurse(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)
    }
    let (fa, fb, fm) = (f(a), f(b), f(0.5 * (a + b)));
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    recurse(f, a, b, fa, fm, fb, whole, tol, 50)
}

/// Cluster density of `a` by direct integration over the random intercept.
pub fn density_oracle(model: &PropensityModel, cluster: &ClusterData) -> f64 {
    let eta: Vec<f64> = cluster
        .covariate_rows()
        .map(|row| model.delta0 + row.iter().zip(&model.delta).map(|(x, d)| x * d).sum::<f64>())
        .collect();
    let a = cluster.treatment();
    let lik = |b: f64| -> f64 {
        eta.iter()
            .zip(a)
            .map(|(&e, &aj)| if aj == 1 { expit(e + b) } else { 1.0 - expit(e + b) })
            .product()
    };
    let s = model.sigma_b;
    if s == 0.0 {
        return lik(0.0);
    }
    let phi = |b: f64| (-(b * b) / (2.0 * s * s)).exp() / (s * (2.0 * std::f64::consts::PI).sqrt());
    adaptive_simpson(&|b| lik(b) * phi(b), -12.0 * s, 12.0 * s, 1e-14)
}
