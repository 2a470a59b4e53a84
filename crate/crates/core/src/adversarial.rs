//! Subcluster discriminator and the two asymmetric losses of the imputation
//! game: the generator side aligns every node with its soft subcluster
//! target, the discriminator side pushes imputed nodes into the extra fake
//! class while keeping real nodes on their subclusters.

use crate::error::{Error, Result};
use crate::graph::MissingMask;
use crate::nn::ModelParams;
use crate::tape::{NodeId, Tape};
use ndarray::Array2;
use std::sync::Arc;

/// Row-stochastic class probabilities over m subclusters plus the fake class
/// in the last column.
#[derive(Debug, Clone)]
pub struct DiscriminatorOutput {
    pub r: Array2<f64>,
    pub fake_column: usize,
}

/// Classifies embeddings into m real subclusters + 1 fake class.
pub fn discriminate(f: &Array2<f64>, params: &ModelParams) -> Result<DiscriminatorOutput> {
    if params.disc_layers.len() != 2 {
        return Err(Error::Config(format!(
            "discriminator expects 2 layers, found {}",
            params.disc_layers.len()
        )));
    }
    let w0 = &params.disc_layers[0].value;
    let w1 = &params.disc_layers[1].value;
    if f.ncols() != w0.nrows() || w0.ncols() != w1.nrows() {
        return Err(Error::Config(format!(
            "discriminator shapes do not chain: input {} vs {}x{} -> {}x{}",
            f.ncols(),
            w0.nrows(),
            w0.ncols(),
            w1.nrows(),
            w1.ncols()
        )));
    }
    let mut tape = Tape::new();
    let fn_ = tape.constant(f.clone());
    let w0n = tape.constant(w0.clone());
    let w1n = tape.constant(w1.clone());
    let r = build_discriminator(&mut tape, fn_, w0n, w1n);
    Ok(DiscriminatorOutput {
        r: tape.value(r).clone(),
        fake_column: w1.ncols() - 1,
    })
}

/// Two-layer MLP with ReLU and a row softmax head.
pub fn build_discriminator(tape: &mut Tape, f: NodeId, w0: NodeId, w1: NodeId) -> NodeId {
    let h = tape.matmul(f, w0);
    let a = tape.relu(h);
    let logits = tape.matmul(a, w1);
    tape.row_softmax(logits)
}

/// Appends the all-zero fake column: rows keep their unit sums.
pub fn extend_assignment(p: &Array2<f64>) -> Array2<f64> {
    let (n, m) = p.dim();
    let mut out = Array2::<f64>::zeros((n, m + 1));
    out.slice_mut(ndarray::s![.., ..m]).assign(p);
    out
}

/// Generator-side alignment: mean cross entropy of the discriminator output
/// against the (gradient-stopped) extended assignment.
pub fn generator_alignment_loss(p_ext: &Array2<f64>, r: &DiscriminatorOutput) -> f64 {
    let mut tape = Tape::new();
    let rn = tape.constant(r.r.clone());
    let loss = build_alignment_loss(&mut tape, rn, Arc::new(p_ext.clone()));
    tape.scalar(loss)
}

pub fn build_alignment_loss(
    tape: &mut Tape,
    r: NodeId,
    p_ext_target: Arc<Array2<f64>>,
) -> NodeId {
    let n = p_ext_target.nrows();
    let weights = Arc::new(vec![1.0 / n as f64; n]);
    tape.ce_rows(r, p_ext_target, weights)
}

/// Discriminator-side loss: imputed nodes against the fake one-hot, real
/// nodes against the extended assignment, each side averaged over its own
/// population. An empty side contributes nothing.
pub fn discriminator_loss(
    p_ext: &Array2<f64>,
    r: &DiscriminatorOutput,
    mask: &MissingMask,
) -> f64 {
    let mut tape = Tape::new();
    let rn = tape.constant(r.r.clone());
    let loss = build_discriminator_loss(&mut tape, rn, Arc::new(p_ext.clone()), mask);
    tape.scalar(loss)
}

pub fn build_discriminator_loss(
    tape: &mut Tape,
    r: NodeId,
    p_ext_target: Arc<Array2<f64>>,
    mask: &MissingMask,
) -> NodeId {
    let (n, classes) = p_ext_target.dim();
    assert_eq!(mask.h.len(), n, "mask length mismatch");
    let n0 = mask.n_missing();
    let n1 = mask.n_available();

    let mut terms: Vec<NodeId> = Vec::new();
    if n0 > 0 {
        let mut fake = Array2::<f64>::zeros((n, classes));
        let mut weights = vec![0.0; n];
        for i in 0..n {
            if !mask.h[i] {
                fake[[i, classes - 1]] = 1.0;
                weights[i] = 1.0 / n0 as f64;
            }
        }
        terms.push(tape.ce_rows(r, Arc::new(fake), Arc::new(weights)));
    }
    if n1 > 0 {
        let mut weights = vec![0.0; n];
        for i in 0..n {
            if mask.h[i] {
                weights[i] = 1.0 / n1 as f64;
            }
        }
        terms.push(tape.ce_rows(r, p_ext_target, Arc::new(weights)));
    }
    match terms.len() {
        2 => tape.add(terms[0], terms[1]),
        1 => terms[0],
        _ => tape.scalar_leaf(0.0),
    }
}
