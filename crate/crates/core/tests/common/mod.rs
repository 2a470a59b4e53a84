//! Independent oracles for the integration suites: these deliberately avoid
//! the library's own computational paths.

// each integration binary compiles this module and uses a different subset
#![allow(dead_code)]

use ndarray::Array2;

/// Eigenvalues of a symmetric matrix via cyclic Jacobi rotations.
pub fn jacobi_eigenvalues(a: &Array2<f64>) -> Vec<f64> {
    let n = a.nrows();
    assert_eq!(n, a.ncols());
    let mut m = a.clone();
    for _sweep in 0..100 {
        let mut off = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                off += m[[i, j]] * m[[i, j]];
            }
        }
        if off < 1e-28 {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                if m[[p, q]].abs() < 1e-300 {
                    continue;
                }
                let theta = (m[[q, q]] - m[[p, p]]) / (2.0 * m[[p, q]]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[[k, p]];
                    let mkq = m[[k, q]];
                    m[[k, p]] = c * mkp - s * mkq;
                    m[[k, q]] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[[p, k]];
                    let mqk = m[[q, k]];
                    m[[p, k]] = c * mpk - s * mqk;
                    m[[q, k]] = s * mpk + c * mqk;
                }
            }
        }
    }
    (0..n).map(|i| m[[i, i]]).collect()
}

/// Exhaustive best 2-partition of up to ~20 points by within-cluster sum of
/// squares. Returns (labels, wcss).
pub fn brute_force_two_partition(points: &Array2<f64>) -> (Vec<usize>, f64) {
    let n = points.nrows();
    assert!(n <= 22, "exhaustive search only feasible for small n");
    let wcss_of = |members: &[usize]| -> f64 {
        if members.is_empty() {
            return 0.0;
        }
        let d = points.ncols();
        let mut mean = vec![0.0; d];
        for &i in members {
            for f in 0..d {
                mean[f] += points[[i, f]];
            }
        }
        for m in mean.iter_mut() {
            *m /= members.len() as f64;
        }
        members
            .iter()
            .map(|&i| {
                (0..d)
                    .map(|f| (points[[i, f]] - mean[f]).powi(2))
                    .sum::<f64>()
            })
            .sum()
    };
    let mut best: Option<(Vec<usize>, f64)> = None;
    // fix point 0 in side A to halve the search
    for bits in 0..(1u32 << (n - 1)) {
        let mut a = vec![0usize; 0];
        let mut b = vec![0usize; 0];
        a.push(0);
        for i in 1..n {
            if bits >> (i - 1) & 1 == 1 {
                b.push(i);
            } else {
                a.push(i);
            }
        }
        if b.is_empty() {
            continue;
        }
        let total = wcss_of(&a) + wcss_of(&b);
        if best.as_ref().is_none_or(|(_, w)| total < *w) {
            let mut labels = vec![0usize; n];
            for &i in &b {
                labels[i] = 1;
            }
            best = Some((labels, total));
        }
    }
    best.unwrap()
}

/// Clustering accuracy by exhaustive search over injective cluster-to-class
/// assignments (permutations of the padded label set).
pub fn brute_force_acc(pred: &[usize], truth: &[usize]) -> f64 {
    let cp = pred.iter().copied().max().unwrap_or(0) + 1;
    let ct = truth.iter().copied().max().unwrap_or(0) + 1;
    let k = cp.max(ct);
    assert!(k <= 8, "factorial search only feasible for small label sets");
    let mut perm: Vec<usize> = (0..k).collect();
    let mut best = 0usize;
    permute(&mut perm, 0, &mut |p| {
        let agree = pred
            .iter()
            .zip(truth.iter())
            .filter(|&(&a, &b)| p[a] == b)
            .count();
        if agree > best {
            best = agree;
        }
    });
    best as f64 / pred.len() as f64
}

fn permute(items: &mut Vec<usize>, start: usize, visit: &mut impl FnMut(&[usize])) {
    if start == items.len() {
        visit(items);
        return;
    }
    for i in start..items.len() {
        items.swap(start, i);
        permute(items, start + 1, visit);
        items.swap(start, i);
    }
}
