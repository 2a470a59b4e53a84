//! Edge-attention refinement: per-node feature weights derived from
//! query/key agreement over graph neighbors, a pseudo-label contrastive
//! objective on those weights, and graph reconstruction scored with binary
//! cross entropy.

use crate::error::{Error, Result};
use crate::nn::EanLayerWeights;
use crate::sparse::CsrMatrix;
use crate::tape::{sigmoid, NodeId, ReconTarget, Tape};
use ndarray::Array2;
use std::sync::Arc;

/// Output of one attention layer: the reweighted embedding and the per-node
/// attention rows (softmax over feature dimensions).
#[derive(Debug, Clone)]
pub struct EanOutput {
    pub u: Array2<f64>,
    pub attention: Array2<f64>,
}

/// Predicted link probabilities and the reconstruction loss.
#[derive(Debug, Clone)]
pub struct ReconstructionResult {
    pub s: Array2<f64>,
    pub l_gra: f64,
}

/// Row-stochastic neighbor averaging operator of the raw graph. Rows of
/// isolated nodes fall back to a self-loop so the attention input never
/// vanishes.
pub fn neighbor_mean_matrix(g: &CsrMatrix) -> CsrMatrix {
    let n = g.rows();
    let mut triplets = Vec::new();
    for i in 0..n {
        let neighbors: Vec<usize> = g.row(i).filter(|&(_, v)| v > 0.0).map(|(j, _)| j).collect();
        if neighbors.is_empty() {
            triplets.push((i, i, 1.0));
        } else {
            let w = 1.0 / neighbors.len() as f64;
            for j in neighbors {
                triplets.push((i, j, w));
            }
        }
    }
    CsrMatrix::from_triplets(n, n, &triplets)
}

/// Plain forward pass of one layer.
pub fn ean_layer(
    h: &Array2<f64>,
    g: &CsrMatrix,
    weights: &EanLayerWeights,
) -> Result<EanOutput> {
    let d_in = h.ncols();
    let wq = &weights.w_query.value;
    if wq.nrows() != d_in
        || weights.w_key.value.dim() != wq.dim()
        || weights.w_value.value.dim() != wq.dim()
    {
        return Err(Error::Config(format!(
            "attention weights must share the shape {}x{}",
            d_in,
            wq.ncols()
        )));
    }
    if g.rows() != h.nrows() {
        return Err(Error::Config(format!(
            "graph has {} nodes for {} embedding rows",
            g.rows(),
            h.nrows()
        )));
    }
    let nm = Arc::new(neighbor_mean_matrix(g));
    let nm_t = Arc::new(nm.transpose());
    let mut tape = Tape::new();
    let hn = tape.constant(h.clone());
    let wqn = tape.constant(wq.clone());
    let wkn = tape.constant(weights.w_key.value.clone());
    let wvn = tape.constant(weights.w_value.value.clone());
    let (u, a) = build_ean_layer(&mut tape, hn, &nm, &nm_t, wqn, wkn, wvn);
    Ok(EanOutput {
        u: tape.value(u).clone(),
        attention: tape.value(a).clone(),
    })
}

/// Tape version. `nm`/`nm_t` are the neighbor-mean operator and its
/// transpose; returns the (U, A) node pair.
pub fn build_ean_layer(
    tape: &mut Tape,
    h: NodeId,
    nm: &Arc<CsrMatrix>,
    nm_t: &Arc<CsrMatrix>,
    w_query: NodeId,
    w_key: NodeId,
    w_value: NodeId,
) -> (NodeId, NodeId) {
    let d_prime = tape.value(w_query).ncols();
    let q = tape.matmul(h, w_query);
    let k = tape.matmul(h, w_key);
    let v = tape.matmul(h, w_value);
    let q_hat = tape.row_l2_normalize(q);
    let k_hat = tape.row_l2_normalize(k);
    let k_mean = tape.spmm(nm, nm_t, k_hat);
    let agreement = tape.hadamard(q_hat, k_mean);
    let scaled = tape.scale(agreement, 1.0 / (d_prime as f64).sqrt());
    let a = tape.row_softmax(scaled);
    let u = tape.hadamard(v, a);
    (u, a)
}

/// Joint contrastive loss over the attention rows of every layer, with
/// positives taken from shared pseudo-labels (self-pairs included).
pub fn contrastive_loss(a_layers: &[Array2<f64>], labels: &[usize], tau: f64) -> Result<f64> {
    if tau <= 0.0 {
        return Err(Error::Argument(format!("temperature must be positive, got {tau}")));
    }
    if a_layers.is_empty() {
        return Err(Error::Argument("no attention layers given".into()));
    }
    let mut tape = Tape::new();
    let nodes: Vec<NodeId> = a_layers
        .iter()
        .map(|a| tape.constant(a.clone()))
        .collect();
    let loss = build_contrastive_loss(&mut tape, &nodes, Arc::new(labels.to_vec()), tau);
    Ok(tape.scalar(loss))
}

pub fn build_contrastive_loss(
    tape: &mut Tape,
    a_layers: &[NodeId],
    labels: Arc<Vec<usize>>,
    tau: f64,
) -> NodeId {
    let mut acc: Option<NodeId> = None;
    for &a in a_layers {
        let unit = tape.row_l2_normalize(a);
        let omega = tape.info_nce(unit, Arc::clone(&labels), tau);
        acc = Some(match acc {
            None => omega,
            Some(prev) => tape.add(prev, omega),
        });
    }
    let total = acc.expect("at least one layer");
    tape.scale(total, 1.0 / a_layers.len() as f64)
}

/// Scores `sigmoid(U U^T)` against a target adjacency with entries in
/// [0, 1]; the returned matrix is exactly symmetric by construction.
pub fn reconstruct_and_score(u: &Array2<f64>, g_target: &Array2<f64>) -> Result<ReconstructionResult> {
    let n = u.nrows();
    if g_target.dim() != (n, n) {
        return Err(Error::Argument(format!(
            "target is {:?} for {n} embedding rows",
            g_target.dim()
        )));
    }
    if g_target.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
        return Err(Error::Argument(
            "target entries must lie in [0, 1]; run sigmoid_preprocess first".into(),
        ));
    }
    let mut s = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for j in i..n {
            let dot: f64 = u
                .row(i)
                .iter()
                .zip(u.row(j).iter())
                .map(|(a, b)| a * b)
                .sum();
            let v = sigmoid(dot);
            s[[i, j]] = v;
            s[[j, i]] = v;
        }
    }
    let mut tape = Tape::new();
    let un = tape.constant(u.clone());
    let loss = tape.bce_from_embedding(un, ReconTarget::Dense(Arc::new(g_target.clone())));
    Ok(ReconstructionResult {
        s,
        l_gra: tape.scalar(loss),
    })
}
