//! Agglomerative clustering with Ward linkage.
//!
//! Greedy global-minimum merging over a Lance-Williams distance matrix, with
//! ties in merge cost broken by the smallest (i, j) slot pair. A per-cluster
//! nearest-neighbor cache keeps the common case near O(p^2); Ward linkage is
//! reducible, so a cached nearest neighbor only goes stale when it was one of
//! the two clusters just merged.

use crate::error::{Error, Result};
use ndarray::{Array2, ArrayView2};

#[derive(Clone, Copy, PartialEq)]
struct Candidate {
    dist: f64,
    a: usize,
    b: usize,
}

impl Candidate {
    fn new(dist: f64, i: usize, j: usize) -> Self {
        Candidate {
            dist,
            a: i.min(j),
            b: i.max(j),
        }
    }

    fn better_than(&self, other: &Candidate) -> bool {
        if self.dist != other.dist {
            return self.dist < other.dist;
        }
        (self.a, self.b) < (other.a, other.b)
    }
}

/// Clusters the rows of `points` into exactly `k` groups. Labels are compact
/// in 0..k, ordered by each cluster's smallest member index.
pub fn ward_cluster(points: &ArrayView2<f64>, k: usize) -> Result<Vec<usize>> {
    let p = points.nrows();
    if k == 0 || k > p {
        return Err(Error::Argument(format!(
            "cluster count {k} must lie in 1..={p}"
        )));
    }
    if k == p {
        return Ok((0..p).collect());
    }

    // full symmetric matrix of squared Euclidean distances
    let d_feat = points.ncols();
    let mut dist = vec![0.0f64; p * p];
    for i in 0..p {
        for j in (i + 1)..p {
            let mut s = 0.0;
            for f in 0..d_feat {
                let diff = points[[i, f]] - points[[j, f]];
                s += diff * diff;
            }
            dist[i * p + j] = s;
            dist[j * p + i] = s;
        }
    }

    let mut active = vec![true; p];
    let mut size = vec![1usize; p];
    let mut parent: Vec<usize> = (0..p).collect();

    // nearest active neighbor per active slot
    let mut nn: Vec<Option<Candidate>> = vec![None; p];
    let scan_nn = |dist: &[f64], active: &[bool], i: usize| -> Option<Candidate> {
        let mut best: Option<Candidate> = None;
        for j in 0..p {
            if j == i || !active[j] {
                continue;
            }
            let cand = Candidate::new(dist[i * p + j], i, j);
            if best.as_ref().is_none_or(|b| cand.better_than(b)) {
                best = Some(cand);
            }
        }
        best
    };
    for i in 0..p {
        nn[i] = scan_nn(&dist, &active, i);
    }

    for _ in 0..(p - k) {
        // global minimum over the caches
        let mut best: Option<Candidate> = None;
        for i in 0..p {
            if !active[i] {
                continue;
            }
            if let Some(c) = &nn[i] {
                if best.as_ref().is_none_or(|b| c.better_than(b)) {
                    best = Some(*c);
                }
            }
        }
        let merge = best.expect("at least two active clusters remain");
        let (a, b) = (merge.a, merge.b);
        let d_ab = dist[a * p + b];
        let (na, nb) = (size[a] as f64, size[b] as f64);

        // Lance-Williams update of distances to the union, stored in slot a
        for kx in 0..p {
            if !active[kx] || kx == a || kx == b {
                continue;
            }
            let nk = size[kx] as f64;
            let d_ak = dist[a * p + kx];
            let d_bk = dist[b * p + kx];
            let updated =
                ((na + nk) * d_ak + (nb + nk) * d_bk - nk * d_ab) / (na + nb + nk);
            dist[a * p + kx] = updated;
            dist[kx * p + a] = updated;
        }
        active[b] = false;
        size[a] += size[b];
        parent[b] = a;

        nn[a] = scan_nn(&dist, &active, a);
        nn[b] = None;
        for kx in 0..p {
            if !active[kx] || kx == a {
                continue;
            }
            let stale = nn[kx].map_or(true, |c| c.a == a || c.b == a || c.a == b || c.b == b);
            if stale {
                nn[kx] = scan_nn(&dist, &active, kx);
            } else {
                // the fresh distance to the union may beat the cache
                let cand = Candidate::new(dist[kx * p + a], kx, a);
                if let Some(cur) = &nn[kx] {
                    if cand.better_than(cur) {
                        nn[kx] = Some(cand);
                    }
                }
            }
        }
    }

    // resolve roots and compact labels by smallest member index
    let mut root = vec![0usize; p];
    for i in 0..p {
        let mut r = i;
        while parent[r] != r {
            r = parent[r];
        }
        root[i] = r;
    }
    let mut label_of_root = vec![usize::MAX; p];
    let mut next = 0usize;
    let mut labels = vec![0usize; p];
    for i in 0..p {
        let r = root[i];
        if label_of_root[r] == usize::MAX {
            label_of_root[r] = next;
            next += 1;
        }
        labels[i] = label_of_root[r];
    }
    debug_assert_eq!(next, k);
    Ok(labels)
}

/// Per-cluster mean rows for a labeling in 0..k.
pub fn centroids(points: &ArrayView2<f64>, labels: &[usize], k: usize) -> Array2<f64> {
    let d = points.ncols();
    let mut sums = Array2::<f64>::zeros((k, d));
    let mut counts = vec![0usize; k];
    for (i, &l) in labels.iter().enumerate() {
        counts[l] += 1;
        for f in 0..d {
            sums[[l, f]] += points[[i, f]];
        }
    }
    for l in 0..k {
        let c = counts[l].max(1) as f64;
        for f in 0..d {
            sums[[l, f]] /= c;
        }
    }
    sums
}
