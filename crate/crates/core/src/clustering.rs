//! Agglomerative clustering of planar points into interference clusters.
//!
//! Distances are updated with the Lance-Williams recurrence. Ward linkage works
//! on squared Euclidean distances, for which the merge cost of clusters `A`
//! and `B` is `2 |A| |B| / (|A| + |B|) * ||c_A - c_B||^2`. Ties are broken by
//! the smallest pair of cluster slots, where a cluster's slot is the index of
//! its first member.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Linkage {
    #[default]
    Ward,
    Complete,
}

/// One agglomeration step: the clusters in slots `left < right` merged at
/// `height` into slot `left`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Merge {
    pub left: usize,
    pub right: usize,
    pub height: f64,
}

fn squared_distance(a: &[f64; 2], b: &[f64; 2]) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)
}

/// Full merge sequence down to `k` clusters.
pub fn agglomerate(points: &[[f64; 2]], k: usize, linkage: Linkage) -> Result<Vec<Merge>> {
    let n = points.len();
    if k == 0 || n < k {
        return Err(Error::TooFewPoints { points: n, clusters: k });
    }
    let mut dist = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let d2 = squared_distance(&points[i], &points[j]);
            dist[i * n + j] = match linkage {
                Linkage::Ward => d2,
                Linkage::Complete => d2.sqrt(),
            };
        }
    }
    let mut size = vec![1usize; n];
    let mut active = vec![true; n];
    let mut merges = Vec::with_capacity(n - k);

    for _ in 0..n - k {
        let mut best = (f64::INFINITY, usize::MAX, usize::MAX);
        for i in (0..n).filter(|&i| active[i]) {
            for j in (i + 1..n).filter(|&j| active[j]) {
                let d = dist[i * n + j];
                if d < best.0 {
                    best = (d, i, j);
                }
            }
        }
        let (height, i, j) = best;
        for m in (0..n).filter(|&m| active[m] && m != i && m != j) {
            let (dim, djm) = (dist[i * n + m], dist[j * n + m]);
            let updated = match linkage {
                Linkage::Ward => {
                    let (ni, nj, nm) = (size[i] as f64, size[j] as f64, size[m] as f64);
                    ((ni + nm) * dim + (nj + nm) * djm - nm * height) / (ni + nj + nm)
                }
                Linkage::Complete => dim.max(djm),
            };
            dist[i * n + m] = updated;
            dist[m * n + i] = updated;
        }
        size[i] += size[j];
        active[j] = false;
        merges.push(Merge { left: i, right: j, height });
    }
    Ok(merges)
}

/// Labels `0..k` per point after replaying `merges`, numbered in order of each
/// cluster's first member.
pub fn labels_from_merges(n: usize, merges: &[Merge]) -> Vec<usize> {
    let mut slot: Vec<usize> = (0..n).collect();
    for m in merges {
        for s in slot.iter_mut() {
            if *s == m.right {
                *s = m.left;
            }
        }
    }
    let mut relabel = std::collections::HashMap::new();
    slot.iter()
        .map(|s| {
            let next = relabel.len();
            *relabel.entry(*s).or_insert(next)
        })
        .collect()
}

/// Ward clustering of `points` into `k` groups.
pub fn ward_cluster(points: &[[f64; 2]], k: usize) -> Result<Vec<usize>> {
    cluster_points(points, k, Linkage::Ward)
}

pub fn cluster_points(points: &[[f64; 2]], k: usize, linkage: Linkage) -> Result<Vec<usize>> {
    let merges = agglomerate(points, k, linkage)?;
    Ok(labels_from_merges(points.len(), &merges))
}
