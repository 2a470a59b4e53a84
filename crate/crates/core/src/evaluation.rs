//! Clustering evaluation: k-means over the converged embedding and the four
//! agreement metrics (accuracy under optimal matching, NMI, ARI, macro-F1).

use crate::error::{Error, Result};
use ndarray::{Array2, ArrayView2};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// One repeat's metric values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricScores {
    pub acc: f64,
    pub nmi: f64,
    pub ari: f64,
    pub f1: f64,
}

/// Metrics over a set of repeats with their mean and population std.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_run: Vec<MetricScores>,
    pub mean: MetricScores,
    pub std: MetricScores,
}

impl MetricsReport {
    pub fn from_runs(per_run: Vec<MetricScores>) -> Self {
        assert!(!per_run.is_empty(), "need at least one run");
        let n = per_run.len() as f64;
        let mean = MetricScores {
            acc: per_run.iter().map(|r| r.acc).sum::<f64>() / n,
            nmi: per_run.iter().map(|r| r.nmi).sum::<f64>() / n,
            ari: per_run.iter().map(|r| r.ari).sum::<f64>() / n,
            f1: per_run.iter().map(|r| r.f1).sum::<f64>() / n,
        };
        let var = |f: fn(&MetricScores) -> f64, mu: f64| -> f64 {
            (per_run.iter().map(|r| (f(r) - mu).powi(2)).sum::<f64>() / n).sqrt()
        };
        let std = MetricScores {
            acc: var(|r| r.acc, mean.acc),
            nmi: var(|r| r.nmi, mean.nmi),
            ari: var(|r| r.ari, mean.ari),
            f1: var(|r| r.f1, mean.f1),
        };
        MetricsReport { per_run, mean, std }
    }
}

fn squared_distance(a: &ArrayView2<f64>, i: usize, centroid: &[f64]) -> f64 {
    a.row(i)
        .iter()
        .zip(centroid.iter())
        .map(|(x, c)| (x - c) * (x - c))
        .sum()
}

/// Lloyd's algorithm with k-means++ seeding, best of `restarts` attempts by
/// within-cluster sum of squares. Empty clusters reseed at the point
/// farthest from its centroid.
pub fn kmeans_cluster(
    f: &Array2<f64>,
    c: usize,
    restarts: usize,
    seed: u64,
) -> Result<Vec<usize>> {
    let n = f.nrows();
    let d = f.ncols();
    if c == 0 || c > n {
        return Err(Error::Argument(format!(
            "cluster count {c} must lie in 1..={n}"
        )));
    }
    let restarts = restarts.max(1);
    let view = f.view();

    let mut best: Option<(f64, Vec<usize>)> = None;
    for restart in 0..restarts {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(restart as u64));

        // k-means++ seeding
        let mut centroids: Vec<Vec<f64>> = Vec::with_capacity(c);
        let first = rng.random_range(0..n);
        centroids.push(view.row(first).to_vec());
        let mut min_d2: Vec<f64> = (0..n)
            .map(|i| squared_distance(&view, i, &centroids[0]))
            .collect();
        while centroids.len() < c {
            let total: f64 = min_d2.iter().sum();
            let next = if total <= 0.0 {
                rng.random_range(0..n)
            } else {
                let mut target = rng.random::<f64>() * total;
                let mut pick = n - 1;
                for (i, &w) in min_d2.iter().enumerate() {
                    target -= w;
                    if target <= 0.0 {
                        pick = i;
                        break;
                    }
                }
                pick
            };
            centroids.push(view.row(next).to_vec());
            for i in 0..n {
                let d2 = squared_distance(&view, i, centroids.last().unwrap());
                if d2 < min_d2[i] {
                    min_d2[i] = d2;
                }
            }
        }

        let mut labels = vec![0usize; n];
        for _iter in 0..200 {
            let mut changed = false;
            for i in 0..n {
                let mut best_k = 0;
                let mut best_d = f64::INFINITY;
                for (k, cent) in centroids.iter().enumerate() {
                    let d2 = squared_distance(&view, i, cent);
                    if d2 < best_d {
                        best_d = d2;
                        best_k = k;
                    }
                }
                if labels[i] != best_k {
                    labels[i] = best_k;
                    changed = true;
                }
            }
            // recompute centroids, reseeding empties at the farthest point
            let mut sums = vec![vec![0.0; d]; c];
            let mut counts = vec![0usize; c];
            for i in 0..n {
                counts[labels[i]] += 1;
                for j in 0..d {
                    sums[labels[i]][j] += view[[i, j]];
                }
            }
            for k in 0..c {
                if counts[k] == 0 {
                    let far = (0..n)
                        .max_by(|&a, &b| {
                            let da = squared_distance(&view, a, &centroids[labels[a]]);
                            let db = squared_distance(&view, b, &centroids[labels[b]]);
                            da.partial_cmp(&db).unwrap()
                        })
                        .unwrap();
                    centroids[k] = view.row(far).to_vec();
                    labels[far] = k;
                    changed = true;
                } else {
                    for j in 0..d {
                        centroids[k][j] = sums[k][j] / counts[k] as f64;
                    }
                }
            }
            if !changed {
                break;
            }
        }

        let wcss: f64 = (0..n)
            .map(|i| squared_distance(&view, i, &centroids[labels[i]]))
            .sum();
        if best.as_ref().is_none_or(|(b, _)| wcss < *b) {
            best = Some((wcss, labels));
        }
    }
    Ok(best.unwrap().1)
}

/// Minimum-cost assignment on a square matrix (Jonker-Volgenant style
/// shortest augmenting paths). Returns, for each row, its assigned column.
pub fn hungarian_min_assignment(cost: &Array2<f64>) -> Vec<usize> {
    let n = cost.nrows();
    assert_eq!(n, cost.ncols(), "assignment needs a square matrix");
    // potentials and matching, 1-indexed internally
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut p = vec![0usize; n + 1]; // column -> row
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[[i0 - 1, j - 1]] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut row_to_col = vec![0usize; n];
    for j in 1..=n {
        if p[j] != 0 {
            row_to_col[p[j] - 1] = j - 1;
        }
    }
    row_to_col
}

fn compact_labels(labels: &[usize]) -> (Vec<usize>, usize) {
    let mut distinct: Vec<usize> = labels.to_vec();
    distinct.sort_unstable();
    distinct.dedup();
    let mapped = labels
        .iter()
        .map(|l| distinct.binary_search(l).unwrap())
        .collect();
    (mapped, distinct.len())
}

fn contingency(pred: &[usize], truth: &[usize], cp: usize, ct: usize) -> Array2<f64> {
    let mut table = Array2::<f64>::zeros((cp, ct));
    for (&p, &t) in pred.iter().zip(truth.iter()) {
        table[[p, t]] += 1.0;
    }
    table
}

/// Accuracy-optimal injective mapping from prediction clusters to truth
/// classes, computed on the (padded square) contingency table.
fn optimal_matching(table: &Array2<f64>) -> Vec<usize> {
    let k = table.nrows().max(table.ncols());
    let mut cost = Array2::<f64>::zeros((k, k));
    for i in 0..k {
        for j in 0..k {
            let count = if i < table.nrows() && j < table.ncols() {
                table[[i, j]]
            } else {
                0.0
            };
            cost[[i, j]] = -count;
        }
    }
    hungarian_min_assignment(&cost)
}

fn agreement(table: &Array2<f64>, matching: &[usize]) -> f64 {
    let (cp, ct) = table.dim();
    matching
        .iter()
        .enumerate()
        .take(cp)
        .filter(|&(_, &j)| j < ct)
        .map(|(i, &j)| table[[i, j]])
        .sum()
}

fn macro_f1(pred: &[usize], truth: &[usize], ct: usize, matching: &[usize]) -> f64 {
    let mapped: Vec<Option<usize>> = matching
        .iter()
        .map(|&j| if j < ct { Some(j) } else { None })
        .collect();
    let mut f1_sum = 0.0;
    for class in 0..ct {
        let mut tp = 0.0;
        let mut fp = 0.0;
        let mut fn_ = 0.0;
        for (&p, &t) in pred.iter().zip(truth.iter()) {
            let predicted = mapped[p] == Some(class);
            let actual = t == class;
            match (predicted, actual) {
                (true, true) => tp += 1.0,
                (true, false) => fp += 1.0,
                (false, true) => fn_ += 1.0,
                _ => {}
            }
        }
        let denom = 2.0 * tp + fp + fn_;
        if denom > 0.0 {
            f1_sum += 2.0 * tp / denom;
        }
    }
    f1_sum / ct as f64
}

/// Best macro-F1 among the accuracy-optimal matchings. Tied matchings are
/// common on small contingency tables, and the set of optima is what stays
/// stable under relabeling, not any single matching of it; taking the best
/// F1 over that set keeps the reported value relabeling-invariant. Falls
/// back to the single Hungarian matching when the label set is too large to
/// enumerate.
fn best_f1_over_optimal_matchings(
    pred: &[usize],
    truth: &[usize],
    table: &Array2<f64>,
    hungarian: &[usize],
) -> f64 {
    let (cp, ct) = table.dim();
    let k = cp.max(ct);
    let best_agree = agreement(table, hungarian);
    if k > 8 {
        return macro_f1(pred, truth, ct, hungarian);
    }
    let mut perm: Vec<usize> = (0..k).collect();
    let mut best = 0.0f64;
    fn visit(
        perm: &mut Vec<usize>,
        start: usize,
        out: &mut impl FnMut(&[usize]),
    ) {
        if start == perm.len() {
            out(perm);
            return;
        }
        for i in start..perm.len() {
            perm.swap(start, i);
            visit(perm, start + 1, out);
            perm.swap(start, i);
        }
    }
    visit(&mut perm, 0, &mut |p| {
        if agreement(table, p) == best_agree {
            let f1 = macro_f1(pred, truth, ct, p);
            if f1 > best {
                best = f1;
            }
        }
    });
    best
}

fn entropy(counts: &[f64], n: f64) -> f64 {
    counts
        .iter()
        .filter(|&&c| c > 0.0)
        .map(|&c| {
            let p = c / n;
            -p * p.ln()
        })
        .sum()
}

/// The four agreement metrics for one labeling pair.
pub fn cluster_metrics(pred: &[usize], truth: &[usize]) -> Result<MetricScores> {
    if pred.len() != truth.len() {
        return Err(Error::Argument(format!(
            "prediction has {} labels, truth has {}",
            pred.len(),
            truth.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::Argument("empty labelings".into()));
    }
    let n = pred.len() as f64;
    let (pred, cp) = compact_labels(pred);
    let (truth, ct) = compact_labels(truth);
    let table = contingency(&pred, &truth, cp, ct);

    // ACC under the optimal matching
    let matching = optimal_matching(&table);
    let acc = agreement(&table, &matching) / n;

    // marginals
    let row_sums: Vec<f64> = (0..cp).map(|i| table.row(i).iter().sum()).collect();
    let col_sums: Vec<f64> = (0..ct).map(|j| table.column(j).sum()).collect();

    // NMI with arithmetic-mean normalization
    let h_pred = entropy(&row_sums, n);
    let h_truth = entropy(&col_sums, n);
    let mut mi = 0.0;
    for i in 0..cp {
        for j in 0..ct {
            let nij = table[[i, j]];
            if nij > 0.0 {
                mi += nij / n * ((n * nij) / (row_sums[i] * col_sums[j])).ln();
            }
        }
    }
    let nmi = if cp == 1 && ct == 1 {
        1.0
    } else {
        let normalizer = 0.5 * (h_pred + h_truth);
        if normalizer <= f64::EPSILON {
            0.0
        } else {
            (mi / normalizer).clamp(0.0, 1.0)
        }
    };

    // ARI on the pair counts
    let choose2 = |x: f64| x * (x - 1.0) / 2.0;
    let sum_ij: f64 = table.iter().map(|&v| choose2(v)).sum();
    let sum_a: f64 = row_sums.iter().map(|&v| choose2(v)).sum();
    let sum_b: f64 = col_sums.iter().map(|&v| choose2(v)).sum();
    let total_pairs = choose2(n);
    let expected = sum_a * sum_b / total_pairs.max(1.0);
    let max_index = 0.5 * (sum_a + sum_b);
    let ari = if (max_index - expected).abs() <= f64::EPSILON * max_index.max(1.0) {
        1.0
    } else {
        (sum_ij - expected) / (max_index - expected)
    };

    // macro-F1 over truth classes after the ACC-optimal mapping
    let f1 = best_f1_over_optimal_matchings(&pred, &truth, &table, &matching);

    Ok(MetricScores { acc, nmi, ari, f1 })
}
