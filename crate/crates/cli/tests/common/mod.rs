#![allow(dead_code)]

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn expit(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Writes a synthetic facility-style CSV: `units` rows scattered around
/// `centres` spatial centres, `p` covariates, a binary treatment from a
/// random-intercept logistic model and a continuous outcome with spillover.
pub fn write_facility_csv(path: &Path, units: usize, centres: usize, p: usize, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centre_xy: Vec<[f64; 2]> =
        (0..centres).map(|_| [rng.gen_range(0.0..100.0), rng.gen_range(0.0..60.0)]).collect();
    let centre_effect: Vec<f64> = (0..centres).map(|_| 0.5 * rng.sample::<f64, _>(StandardNormal)).collect();
    let coef: Vec<f64> = (0..p).map(|k| if k % 3 == 0 { 0.25 } else { -0.1 }).collect();

    let mut rows = Vec::with_capacity(units);
    for u in 0..units {
        let c = u % centres;
        let x = centre_xy[c][0] + 1.5 * rng.sample::<f64, _>(StandardNormal);
        let y = centre_xy[c][1] + 1.5 * rng.sample::<f64, _>(StandardNormal);
        let cov: Vec<f64> = (0..p).map(|k| 10.0 * k as f64 + rng.sample::<f64, _>(StandardNormal) * (1.0 + k as f64)).collect();
        let z: f64 = cov.iter().enumerate().map(|(k, v)| coef[k] * (v - 10.0 * k as f64) / (1.0 + k as f64)).sum();
        let a = u8::from(rng.gen::<f64>() < expit(-0.8 + centre_effect[c] + z));
        rows.push((x, y, cov, a, c));
    }
    let mut treated_share = vec![(0.0, 0.0); centres];
    for r in &rows {
        treated_share[r.4].0 += f64::from(r.3);
        treated_share[r.4].1 += 1.0;
    }
    let mut text = String::from("facility,x,y");
    for k in 0..p {
        write!(text, ",l{}", k + 1).unwrap();
    }
    text.push_str(",treated,ozone,site\n");
    for (i, (x, y, cov, a, c)) in rows.iter().enumerate() {
        let share = treated_share[*c].0 / treated_share[*c].1;
        let outcome = 50.0 - 0.8 * f64::from(*a) - 1.5 * share + 0.1 * cov[0] + rng.sample::<f64, _>(StandardNormal);
        write!(text, "f{i},{x},{y}").unwrap();
        for v in cov {
            write!(text, ",{v}").unwrap();
        }
        writeln!(text, ",{a},{outcome},s{c}").unwrap();
    }
    std::fs::write(path, text).unwrap();
}

pub fn covariate_names(p: usize) -> Vec<String> {
    (1..=p).map(|k| format!("l{k}")).collect()
}
