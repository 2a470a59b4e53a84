//! Subcluster machinery: the agglomerative search over embeddings, the
//! Student-t soft assignment, weighted Gaussian fits, the compactness loss on
//! covariance determinants, and reparameterized sampling for missing nodes.
//!
//! Sub-centroids come out of a discrete merge, so they are treated as
//! constants; gradients reach the embedding only through the soft assignment
//! and the fitted distribution parameters.

use crate::error::{Error, Result};
use crate::graph::MissingMask;
use crate::linalg;
use crate::tape::{NodeId, Tape};
use crate::ward;
use ndarray::Array2;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use std::sync::Arc;

/// Ridge added to covariances before factorization; single-member
/// subclusters otherwise produce a singular fit.
pub const COV_RIDGE: f64 = 1e-6;

/// Gaussian mixture over subclusters of the embedding space.
#[derive(Debug, Clone)]
pub struct SubclusterModel {
    pub m: usize,
    /// Sub-centroid rows (constants for gradient purposes).
    pub centroids: Array2<f64>,
    /// Soft assignment, rows on the simplex.
    pub p: Array2<f64>,
    /// Fitted means, one row per subcluster.
    pub mu: Array2<f64>,
    /// Full covariance per subcluster.
    pub sigma2: Vec<Array2<f64>>,
    /// Lower Cholesky factors of `sigma2 + ridge * I`.
    pub chol: Vec<Array2<f64>>,
}

impl SubclusterModel {
    /// Search subclusters of `z` and fit the per-subcluster Gaussians.
    pub fn fit(z: &Array2<f64>, m: usize) -> Result<Self> {
        let (_, centroids) = find_subclusters(z, m)?;
        let p = soft_assignment(z, &centroids);
        let (mu, sigma2, chol) = estimate_gaussians(z, &p)?;
        Ok(SubclusterModel {
            m,
            centroids,
            p,
            mu,
            sigma2,
            chol,
        })
    }
}

/// Ward agglomeration of embedding rows into exactly `m` subclusters.
pub fn find_subclusters(z: &Array2<f64>, m: usize) -> Result<(Vec<usize>, Array2<f64>)> {
    let assignment = ward::ward_cluster(&z.view(), m)?;
    let centroids = ward::centroids(&z.view(), &assignment, m);
    Ok((assignment, centroids))
}

/// Student-t kernel soft assignment of rows to constant centroids:
/// `p_ij = (1 + ||z_i - u_j||^2)^-1`, row-normalized.
pub fn soft_assignment(z: &Array2<f64>, centroids: &Array2<f64>) -> Array2<f64> {
    let mut tape = Tape::new();
    let zn = tape.constant(z.clone());
    let p = build_soft_assignment(&mut tape, zn, Arc::new(centroids.clone()));
    tape.value(p).clone()
}

pub fn build_soft_assignment(
    tape: &mut Tape,
    z: NodeId,
    centroids: Arc<Array2<f64>>,
) -> NodeId {
    let sq = tape.sq_dist_to_const(z, centroids);
    let kernel = tape.recip1p(sq);
    tape.row_normalize(kernel)
}

/// Assignment-weighted mean and covariance per subcluster, plus the ridged
/// Cholesky factors.
#[allow(clippy::type_complexity)]
pub fn estimate_gaussians(
    z: &Array2<f64>,
    p: &Array2<f64>,
) -> Result<(Array2<f64>, Vec<Array2<f64>>, Vec<Array2<f64>>)> {
    let m = p.ncols();
    for j in 0..m {
        let s: f64 = p.column(j).sum();
        if !(s > 0.0) {
            return Err(Error::Argument(format!(
                "assignment column {j} sums to {s}, expected strictly positive"
            )));
        }
    }
    let mut tape = Tape::new();
    let zn = tape.constant(z.clone());
    let pn = tape.constant(p.clone());
    let g = build_gaussians(&mut tape, zn, pn, m)?;
    let d = z.ncols();
    let mut mu = Array2::<f64>::zeros((m, d));
    let mut sigma2 = Vec::with_capacity(m);
    let mut chol = Vec::with_capacity(m);
    for j in 0..m {
        mu.row_mut(j).assign(&tape.value(g.mu[j]).row(0));
        sigma2.push(tape.value(g.sigma2[j]).clone());
        chol.push(tape.value(g.chol[j]).clone());
    }
    Ok((mu, sigma2, chol))
}

/// Tape nodes of the per-subcluster Gaussian fit.
pub struct GaussianNodes {
    pub mu: Vec<NodeId>,
    pub sigma2: Vec<NodeId>,
    pub chol: Vec<NodeId>,
    pub det: Vec<NodeId>,
}

pub fn build_gaussians(
    tape: &mut Tape,
    z: NodeId,
    p: NodeId,
    m: usize,
) -> Result<GaussianNodes> {
    let mut nodes = GaussianNodes {
        mu: Vec::with_capacity(m),
        sigma2: Vec::with_capacity(m),
        chol: Vec::with_capacity(m),
        det: Vec::with_capacity(m),
    };
    for j in 0..m {
        let w = tape.col(p, j);
        let total = tape.sum(w);
        let weighted = tape.matmul_tn(w, z);
        let mu = tape.div_by_scalar(weighted, total);
        let centered = tape.sub_row_broadcast(z, mu);
        let reweighted = tape.mul_col(centered, w);
        let gram = tape.matmul_tn(reweighted, centered);
        let sigma2 = tape.div_by_scalar(gram, total);
        let ridged = tape.add_scaled_identity(sigma2, COV_RIDGE);
        let chol = tape.cholesky_lower(ridged)?;
        let half_logdet = tape.log_diag_sum(chol);
        let logdet = tape.scale(half_logdet, 2.0);
        let det = tape.exp(logdet);
        nodes.mu.push(mu);
        nodes.sigma2.push(sigma2);
        nodes.chol.push(chol);
        nodes.det.push(det);
    }
    Ok(nodes)
}

/// Mean determinant of the ridged covariances: the compactness objective
/// over the sampling volumes.
pub fn subcluster_loss(sigma2: &[Array2<f64>]) -> Result<f64> {
    let m = sigma2.len();
    let mut total = 0.0;
    for s in sigma2 {
        let mut ridged = s.clone();
        for i in 0..ridged.nrows() {
            ridged[[i, i]] += COV_RIDGE;
        }
        let l = linalg::cholesky_lower(&ridged)?;
        total += linalg::det_from_cholesky(&l);
    }
    Ok(total / m as f64)
}

pub fn build_subcluster_loss(tape: &mut Tape, gaussians: &GaussianNodes) -> NodeId {
    let mut acc = gaussians.det[0];
    for &d in &gaussians.det[1..] {
        acc = tape.add(acc, d);
    }
    tape.scale(acc, 1.0 / gaussians.det.len() as f64)
}

/// Standard-normal rows for the missing nodes, drawn in node order from the
/// seeded stream; available rows stay zero (they are masked out of the blend).
pub fn sampling_noise(mask: &MissingMask, dim: usize, seed: u64) -> Array2<f64> {
    let n = mask.h.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut eps = Array2::<f64>::zeros((n, dim));
    for i in 0..n {
        if !mask.h[i] {
            for k in 0..dim {
                eps[[i, k]] = rng.sample(StandardNormal);
            }
        }
    }
    eps
}

/// Draws reparameterized embeddings for missing nodes and blends them with
/// the encoder output; available rows pass through untouched.
pub fn sample_and_fuse(
    z: &Array2<f64>,
    model: &SubclusterModel,
    mask: &MissingMask,
    noise_seed: u64,
) -> Array2<f64> {
    let mut tape = Tape::new();
    let zn = tape.constant(z.clone());
    let pn = tape.constant(model.p.clone());
    let mu: Vec<NodeId> = (0..model.m)
        .map(|j| {
            let row = model.mu.row(j).to_owned().insert_axis(ndarray::Axis(0));
            tape.constant(row)
        })
        .collect();
    let chol: Vec<NodeId> = model
        .chol
        .iter()
        .map(|l| tape.constant(l.clone()))
        .collect();
    let eps = sampling_noise(mask, z.ncols(), noise_seed);
    let f = build_sample_and_fuse(
        &mut tape,
        zn,
        pn,
        &mu,
        &chol,
        Arc::new(eps),
        Arc::new(mask.h.clone()),
    );
    tape.value(f).clone()
}

/// Tape version of the sampling + fusion path. `mu[j]` are 1 x d rows,
/// `chol[j]` the lower factors; gradients flow through the assignment, the
/// means, and the factors, but not through the noise.
pub fn build_sample_and_fuse(
    tape: &mut Tape,
    z: NodeId,
    p: NodeId,
    mu: &[NodeId],
    chol: &[NodeId],
    noise: Arc<Array2<f64>>,
    available: Arc<Vec<bool>>,
) -> NodeId {
    let eps = tape.constant((*noise).clone());
    let mut sampled: Option<NodeId> = None;
    for j in 0..mu.len() {
        let shift = tape.matmul_nt(eps, chol[j]);
        let component = tape.add_row_broadcast(shift, mu[j]);
        let weight = tape.col(p, j);
        let weighted = tape.mul_col(component, weight);
        sampled = Some(match sampled {
            None => weighted,
            Some(acc) => tape.add(acc, weighted),
        });
    }
    tape.fuse_masked(z, sampled.expect("at least one subcluster"), available)
}

/// Coarse pseudo-labels: Ward-merge the sub-centroids into `c` groups and
/// give every node the group of its strongest subcluster.
pub fn merge_pseudo_labels(
    centroids: &Array2<f64>,
    p: &Array2<f64>,
    c: usize,
) -> Result<Vec<usize>> {
    let m = centroids.nrows();
    if c > m {
        return Err(Error::Argument(format!(
            "cannot merge {m} subclusters into {c} groups"
        )));
    }
    let groups = ward::ward_cluster(&centroids.view(), c)?;
    let labels = p
        .rows()
        .into_iter()
        .map(|row| {
            let mut best = 0usize;
            let mut best_val = f64::NEG_INFINITY;
            for (j, &v) in row.iter().enumerate() {
                if v > best_val {
                    best_val = v;
                    best = j;
                }
            }
            groups[best]
        })
        .collect();
    Ok(labels)
}
