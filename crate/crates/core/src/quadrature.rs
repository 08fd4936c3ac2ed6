//! Gauss-Hermite quadrature against the standard normal density.

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

/// Nodes `t_k` and weights `w_k` such that
/// `E[f(Z)] ≈ sum_k w_k f(sqrt(2) t_k)` for `Z ~ N(0, 1)`.
/// The weights are the physicists' Hermite weights divided by `sqrt(pi)`, so
/// they sum to one.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussHermite {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
    pub log_weights: Vec<f64>,
}

impl GaussHermite {
    /// Computes the rule by Newton iteration on the orthonormal Hermite
    /// recurrence, with the usual asymptotic starting guesses.
    pub fn new(order: usize) -> Self {
        assert!(order >= 1, "quadrature order must be >= 1");
        let n = order;
        let nf = n as f64;
        // pi^(-1/4)
        const PIM4: f64 = 0.751_125_544_464_942_5;
        let mut x = vec![0.0; n];
        let mut w = vec![0.0; n];
        let m = (n + 1) / 2;
        let mut z = 0.0f64;
        for i in 0..m {
            z = match i {
                0 => (2.0 * nf + 1.0).sqrt() - 1.855_75 * (2.0 * nf + 1.0).powf(-0.166_67),
                1 => z - 1.14 * nf.powf(0.426) / z,
                2 => 1.86 * z - 0.86 * x[0],
                3 => 1.91 * z - 0.91 * x[1],
                _ => 2.0 * z - x[i - 2],
            };
            let mut pp = 0.0;
            for _ in 0..100 {
                let mut p1 = PIM4;
                let mut p2 = 0.0;
                for j in 0..n {
                    let p3 = p2;
                    p2 = p1;
                    let jf = j as f64;
                    p1 = z * (2.0 / (jf + 1.0)).sqrt() * p2 - (jf / (jf + 1.0)).sqrt() * p3;
                }
                pp = (2.0 * nf).sqrt() * p2;
                let z1 = z;
                z = z1 - p1 / pp;
                if (z - z1).abs() <= 1e-15 * z.abs().max(1.0) {
                    break;
                }
            }
            x[i] = z;
            x[n - 1 - i] = -z;
            w[i] = 2.0 / (pp * pp);
            w[n - 1 - i] = w[i];
        }
        if n % 2 == 1 {
            x[m - 1] = 0.0;
        }
        let sqrt_pi = std::f64::consts::PI.sqrt();
        let weights: Vec<f64> = w.iter().map(|wi| wi / sqrt_pi).collect();
        let log_weights = weights.iter().map(|wi| wi.ln()).collect();
        Self { nodes: x, weights, log_weights }
    }

    pub fn order(&self) -> usize {
        self.nodes.len()
    }

    /// Rule for `order`, memoised per thread.
    pub fn cached(order: usize) -> Rc<Self> {
        thread_local! {
            static CACHE: RefCell<HashMap<usize, Rc<GaussHermite>>> = RefCell::new(HashMap::new());
        }
        CACHE.with(|c| c.borrow_mut().entry(order).or_insert_with(|| Rc::new(Self::new(order))).clone())
    }

    /// `E[f(Z)]` for `Z ~ N(0, 1)`.
    pub fn expect(&self, f: impl Fn(f64) -> f64) -> f64 {
        let s2 = std::f64::consts::SQRT_2;
        self.nodes.iter().zip(&self.weights).map(|(t, w)| w * f(s2 * t)).sum()
    }
}
