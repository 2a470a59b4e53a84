//! Alternating optimization of the full objective: per epoch, one
//! discriminator step on the adversarial classification loss, then one
//! generator step on the composite of subcluster compactness, alignment,
//! contrastive, and reconstruction terms.

use crate::adversarial::{build_alignment_loss, build_discriminator, build_discriminator_loss, extend_assignment};
use crate::edge_refine::{build_contrastive_loss, build_ean_layer, neighbor_mean_matrix};
use crate::error::{Error, Result};
use crate::evaluation::{cluster_metrics, kmeans_cluster, MetricScores};
use crate::graph::{is_probabilistic, sigmoid_preprocess, AttributeGraph, MissingMask};
use crate::nn::{adam_step, build_gcn, Architecture, ModelParams};
use crate::sparse::CsrMatrix;
use crate::subcluster::{
    build_gaussians, build_sample_and_fuse, build_soft_assignment, build_subcluster_loss,
    find_subclusters, merge_pseudo_labels, sampling_noise,
};
use crate::tape::{NodeId, ReconTarget, Tape};
use ndarray::Array2;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

/// Stream salts for deriving independent RNG streams from the run seed.
pub const SALT_INIT: u64 = 0x5EED_1417;
pub const SALT_KMEANS: u64 = 0x5EED_2718;
pub const SALT_NEG_SAMPLING: u64 = 0x5EED_3141;

/// Deterministic stream derivation (splitmix64 finalizer over the pair).
pub fn mix_seed(base: u64, stream: u64) -> u64 {
    let mut z = base ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn default_epochs() -> usize {
    100
}
fn default_lr() -> f64 {
    1e-3
}
fn default_lambda() -> f64 {
    10.0
}
fn default_tau() -> f64 {
    0.1
}
fn default_m_factor() -> usize {
    4
}
fn default_embed_dim() -> usize {
    16
}
fn default_hidden_dim() -> usize {
    64
}
fn default_restarts() -> usize {
    10
}

/// Hyperparameters of one training run.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub tau: f64,
    /// Subcluster count is `m_factor * c`.
    pub m_factor: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub disc_hidden_dim: usize,
    /// Depth of the edge-attention stack.
    pub ean_depth: usize,
    pub seed: u64,
    /// Class count override for unlabeled data.
    pub num_classes: Option<usize>,
    /// K-means restarts for the final clustering.
    pub kmeans_restarts: usize,
    /// Ablation: skip generative imputation and the adversarial game.
    pub wo_gi: bool,
    /// Ablation: skip the edge-attention stack and the contrastive term.
    pub wo_ea: bool,
    /// Ablation: drop the subcluster compactness term from the objective.
    pub wo_sl: bool,
    /// Approximate the reconstruction loss with sampled pairs (positives
    /// plus an equal count of sampled non-edges) instead of all n^2 terms.
    pub sampled_reconstruction: bool,
    /// Record invariant diagnostics every epoch (test support).
    pub validate_invariants: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: default_epochs(),
            lr: default_lr(),
            lambda1: default_lambda(),
            lambda2: default_lambda(),
            lambda3: default_lambda(),
            tau: default_tau(),
            m_factor: default_m_factor(),
            embed_dim: default_embed_dim(),
            hidden_dim: default_hidden_dim(),
            disc_hidden_dim: default_hidden_dim(),
            ean_depth: 2,
            seed: 0,
            num_classes: None,
            kmeans_restarts: default_restarts(),
            wo_gi: false,
            wo_ea: false,
            wo_sl: false,
            sampled_reconstruction: false,
            validate_invariants: false,
        }
    }
}

impl TrainConfig {
    /// Resolves the class count and validates the configuration against a
    /// concrete graph.
    pub fn resolve_classes(&self, graph: &AttributeGraph) -> Result<usize> {
        let c = self
            .num_classes
            .or(graph.c)
            .ok_or_else(|| Error::Config("class count unknown: no labels and no num_classes".into()))?;
        if c == 0 {
            return Err(Error::Config("class count must be positive".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.lambda1 < 0.0 || self.lambda2 < 0.0 || self.lambda3 < 0.0 {
            return Err(Error::Config("trade-off weights must be non-negative".into()));
        }
        if self.tau <= 0.0 {
            return Err(Error::Config("temperature must be positive".into()));
        }
        if self.m_factor == 0 {
            return Err(Error::Config("m_factor must be at least 1".into()));
        }
        let m = self.m_factor * c;
        if m > graph.n {
            return Err(Error::Config(format!(
                "m_factor * c = {m} exceeds the node count {}",
                graph.n
            )));
        }
        Ok(c)
    }
}

/// Loss components of one epoch, in the order they appear in the history CSV.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub l_sub: f64,
    pub l_ad1: f64,
    pub l_ad2: f64,
    pub l_con: f64,
    pub l_gra: f64,
    pub l_total: f64,
}

/// Worst-case invariant deviations observed across the run
/// (only collected with `validate_invariants`).
#[derive(Debug, Clone, Copy, Serialize)]
pub struct InvariantStats {
    pub max_p_row_dev: f64,
    pub max_r_row_dev: f64,
    pub max_a_row_dev: f64,
    pub max_s_asymmetry: f64,
    pub fuse_exact: bool,
    pub partition_exact: bool,
}

impl InvariantStats {
    fn new() -> Self {
        InvariantStats {
            max_p_row_dev: 0.0,
            max_r_row_dev: 0.0,
            max_a_row_dev: 0.0,
            max_s_asymmetry: 0.0,
            fuse_exact: true,
            partition_exact: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub history: Vec<EpochRecord>,
    pub wall_seconds: f64,
    /// Converged fused embedding, input of the final k-means.
    pub final_embedding: Array2<f64>,
    /// Metrics against ground truth, when labels are present.
    pub final_metrics: Option<MetricScores>,
    /// Trained weights, for checkpointing via `ModelParams::save`.
    pub final_params: ModelParams,
    pub invariants: Option<InvariantStats>,
}

impl RunReport {
    /// Loss history as CSV with the documented column set.
    pub fn write_history_csv(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(w, "epoch,L_sub,L_ad1,L_ad2,L_con,L_gra,L_total")?;
        for r in &self.history {
            writeln!(
                w,
                "{},{},{},{},{},{},{}",
                r.epoch, r.l_sub, r.l_ad1, r.l_ad2, r.l_con, r.l_gra, r.l_total
            )?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Composite objective value from its four parts.
pub struct LossParts {
    pub l_sub: f64,
    pub l_ad1: f64,
    pub l_con: f64,
    pub l_gra: f64,
}

pub fn total_loss(parts: &LossParts, config: &TrainConfig) -> f64 {
    parts.l_sub
        + config.lambda1 * parts.l_ad1
        + config.lambda2 * parts.l_con
        + config.lambda3 * parts.l_gra
}

fn max_row_sum_dev(m: &Array2<f64>) -> f64 {
    m.rows()
        .into_iter()
        .map(|r| (r.sum() - 1.0).abs())
        .fold(0.0, f64::max)
}

fn non_finite(name: &str, epoch: usize, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Numeric(format!(
            "{name} is {v} at epoch {epoch}; aborting"
        )))
    }
}

/// Samples `count` non-edge pairs (i < j) uniformly, rejecting edges.
fn sample_negative_pairs(
    g: &CsrMatrix,
    count: usize,
    seed: u64,
) -> Vec<(u32, u32, f64)> {
    let n = g.rows();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    let mut attempts = 0usize;
    let max_attempts = count.saturating_mul(50).max(1000);
    while out.len() < count && attempts < max_attempts {
        attempts += 1;
        let i = rng.random_range(0..n);
        let j = rng.random_range(0..n);
        if i == j {
            continue;
        }
        let (a, b) = (i.min(j), i.max(j));
        if g.get(a, b) == 0.0 {
            out.push((a as u32, b as u32, 0.0));
        }
    }
    out
}

enum ReconMode {
    Full(ReconTarget),
    Sampled { positives: Vec<(u32, u32, f64)> },
}

/// Runs the full alternating optimization and returns the loss history,
/// converged embedding, and (when labels exist) final metrics.
pub fn train(graph: &AttributeGraph, mask: &MissingMask, config: &TrainConfig) -> Result<RunReport> {
    let started = Instant::now();
    let c = config.resolve_classes(graph)?;
    let m = config.m_factor * c;
    if mask.h.len() != graph.n {
        return Err(Error::Consistency(format!(
            "mask covers {} nodes, graph has {}",
            mask.h.len(),
            graph.n
        )));
    }

    let arch = Architecture {
        input_dim: graph.d,
        gcn_hidden: config.hidden_dim,
        embed_dim: config.embed_dim,
        disc_hidden: config.disc_hidden_dim,
        disc_out: m + 1,
        ean_depth: config.ean_depth,
    };
    let mut params = ModelParams::init(&arch, mix_seed(config.seed, SALT_INIT));

    let adj = Arc::new(crate::graph::normalize_adjacency(&graph.g)?);
    let nm = Arc::new(neighbor_mean_matrix(&graph.g));
    let nm_t = Arc::new(nm.transpose());
    let available = Arc::new(mask.h.clone());

    let mut x_masked = graph.x.clone();
    for (i, &avail) in mask.h.iter().enumerate() {
        if !avail {
            x_masked.row_mut(i).fill(0.0);
        }
    }

    let recon = if config.sampled_reconstruction {
        if !is_probabilistic(&graph.g) {
            return Err(Error::Config(
                "sampled reconstruction needs edge weights in [0, 1]".into(),
            ));
        }
        let positives: Vec<(u32, u32, f64)> = graph
            .g
            .iter()
            .filter(|&(i, j, _)| i <= j)
            .map(|(i, j, v)| (i as u32, j as u32, v))
            .collect();
        ReconMode::Sampled { positives }
    } else if is_probabilistic(&graph.g) {
        ReconMode::Full(ReconTarget::Sparse(Arc::new(graph.g.clone())))
    } else {
        ReconMode::Full(ReconTarget::Dense(Arc::new(sigmoid_preprocess(&graph.g))))
    };

    let mut history = Vec::with_capacity(config.epochs);
    let mut stats = InvariantStats::new();

    for epoch in 0..config.epochs {
        let record = run_epoch(
            epoch,
            graph,
            mask,
            config,
            m,
            c,
            &mut params,
            &adj,
            &nm,
            &nm_t,
            &available,
            &x_masked,
            &recon,
            config.validate_invariants.then_some(&mut stats),
        )?;
        history.push(record);
    }

    // post-training forward for the converged embedding
    let final_embedding = forward_embedding(mask, config, m, &params, &adj, &x_masked)?;
    let final_metrics = match &graph.labels {
        Some(labels) => {
            let pred = kmeans_cluster(
                &final_embedding,
                c,
                config.kmeans_restarts,
                mix_seed(config.seed, SALT_KMEANS),
            )?;
            Some(cluster_metrics(&pred, labels)?)
        }
        None => None,
    };

    Ok(RunReport {
        history,
        wall_seconds: started.elapsed().as_secs_f64(),
        final_embedding,
        final_metrics,
        final_params: params,
        invariants: config.validate_invariants.then_some(stats),
    })
}

/// Value-only generator forward for the converged embedding. Draws are only
/// for training; at inference the imputation sits at the distribution mean
/// (zero noise), so missing rows blend the encoder output with their
/// assignment-weighted subcluster means.
fn forward_embedding(
    mask: &MissingMask,
    config: &TrainConfig,
    m: usize,
    params: &ModelParams,
    adj: &Arc<CsrMatrix>,
    x_masked: &Array2<f64>,
) -> Result<Array2<f64>> {
    let z = crate::nn::gcn_forward(x_masked, adj, params)?;
    if config.wo_gi {
        return Ok(z);
    }
    let (_, centroids) = find_subclusters(&z, m)?;
    let mut tape = Tape::new();
    let zn = tape.constant(z.clone());
    let p = build_soft_assignment(&mut tape, zn, Arc::new(centroids));
    let gaussians = build_gaussians(&mut tape, zn, p, m)?;
    let zero_noise = Arc::new(Array2::zeros((z.nrows(), config.embed_dim)));
    let f = build_sample_and_fuse(
        &mut tape,
        zn,
        p,
        &gaussians.mu,
        &gaussians.chol,
        zero_noise,
        Arc::new(mask.h.clone()),
    );
    Ok(tape.value(f).clone())
}

#[allow(clippy::too_many_arguments)]
fn run_epoch(
    epoch: usize,
    graph: &AttributeGraph,
    mask: &MissingMask,
    config: &TrainConfig,
    m: usize,
    c: usize,
    params: &mut ModelParams,
    adj: &Arc<CsrMatrix>,
    nm: &Arc<CsrMatrix>,
    nm_t: &Arc<CsrMatrix>,
    available: &Arc<Vec<bool>>,
    x_masked: &Array2<f64>,
    recon: &ReconMode,
    mut stats: Option<&mut InvariantStats>,
) -> Result<EpochRecord> {
    let mut tape = Tape::new();

    // generator forward with trainable encoder weights
    let x = tape.constant(x_masked.clone());
    let mut gcn_leaf_ids: Vec<(String, NodeId)> = Vec::new();
    let gcn_layers: Vec<(NodeId, crate::nn::Activation)> = params
        .gcn_layers
        .iter()
        .map(|l| {
            let id = tape.leaf(l.weight.value.clone(), true);
            gcn_leaf_ids.push((l.weight.name.clone(), id));
            (id, l.activation)
        })
        .collect();
    let z = build_gcn(&mut tape, x, adj, &gcn_layers);

    // subcluster search on the current embedding (gradient-stopped)
    let (_, centroids) = find_subclusters(tape.value(z), m)?;
    let p = build_soft_assignment(&mut tape, z, Arc::new(centroids.clone()));
    let gaussians = build_gaussians(&mut tape, z, p, m)?;
    let l_sub_node = build_subcluster_loss(&mut tape, &gaussians);
    let p_val = tape.value(p).clone();
    let pseudo_labels = merge_pseudo_labels(&centroids, &p_val, c)?;

    // sampling and fusion
    let f = if config.wo_gi {
        z
    } else {
        let noise = Arc::new(sampling_noise(
            mask,
            config.embed_dim,
            mix_seed(config.seed, epoch as u64),
        ));
        build_sample_and_fuse(
            &mut tape,
            z,
            p,
            &gaussians.mu,
            &gaussians.chol,
            noise,
            Arc::clone(available),
        )
    };

    // discriminator step: everything but the discriminator frozen
    let snapshot_before_d = stats.is_some().then(|| params.values());
    let l_ad2 = if config.wo_gi {
        0.0
    } else {
        let p_ext = Arc::new(extend_assignment(&p_val));
        let mut dtape = Tape::new();
        let f_const = dtape.constant(tape.value(f).clone());
        let w0 = dtape.leaf(params.disc_layers[0].value.clone(), true);
        let w1 = dtape.leaf(params.disc_layers[1].value.clone(), true);
        let r = build_discriminator(&mut dtape, f_const, w0, w1);
        let loss = build_discriminator_loss(&mut dtape, r, p_ext, mask);
        let mut grads_out = dtape.backward(loss);
        let mut grad_map = BTreeMap::new();
        if let Some(g) = grads_out.take(w0) {
            grad_map.insert(params.disc_layers[0].name.clone(), g);
        }
        if let Some(g) = grads_out.take(w1) {
            grad_map.insert(params.disc_layers[1].name.clone(), g);
        }
        adam_step(params, &grad_map, config.lr)?;
        dtape.scalar(loss)
    };

    if let Some(stats) = stats.as_deref_mut() {
        if let Some(before) = &snapshot_before_d {
            let after = params.values();
            for (name, value) in &after {
                let unchanged = value == &before[name];
                if ModelParams::is_discriminator(name) {
                    // allowed to move; nothing to assert per tensor
                } else if !unchanged {
                    stats.partition_exact = false;
                }
            }
        }
    }

    // generator step: discriminator frozen at its updated values
    let (l_ad1_node, r_node) = if config.wo_gi {
        (None, None)
    } else {
        let w0 = tape.constant(params.disc_layers[0].value.clone());
        let w1 = tape.constant(params.disc_layers[1].value.clone());
        let r = build_discriminator(&mut tape, f, w0, w1);
        let p_ext = Arc::new(extend_assignment(&p_val));
        let loss = build_alignment_loss(&mut tape, r, p_ext);
        (Some(loss), Some(r))
    };

    let mut ean_leaf_ids: Vec<(String, NodeId)> = Vec::new();
    let (u, a_nodes, l_con_node) = if config.wo_ea {
        (f, Vec::new(), None)
    } else {
        let mut h = f;
        let mut a_nodes = Vec::with_capacity(params.ean_layers.len());
        for layer in &params.ean_layers {
            let wq = tape.leaf(layer.w_query.value.clone(), true);
            let wk = tape.leaf(layer.w_key.value.clone(), true);
            let wv = tape.leaf(layer.w_value.value.clone(), true);
            ean_leaf_ids.push((layer.w_query.name.clone(), wq));
            ean_leaf_ids.push((layer.w_key.name.clone(), wk));
            ean_leaf_ids.push((layer.w_value.name.clone(), wv));
            let (u_out, a) = build_ean_layer(&mut tape, h, nm, nm_t, wq, wk, wv);
            h = u_out;
            a_nodes.push(a);
        }
        let l_con = build_contrastive_loss(
            &mut tape,
            &a_nodes,
            Arc::new(pseudo_labels),
            config.tau,
        );
        (h, a_nodes, Some(l_con))
    };

    let l_gra_node = match recon {
        ReconMode::Full(target) => tape.bce_from_embedding(u, target.clone()),
        ReconMode::Sampled { positives } => {
            let negatives = sample_negative_pairs(
                &graph.g,
                positives.len(),
                mix_seed(config.seed, SALT_NEG_SAMPLING ^ epoch as u64),
            );
            let mut pairs = positives.clone();
            pairs.extend(negatives);
            tape.bce_pairs(u, Arc::new(pairs))
        }
    };

    let mut total = tape.scale(l_sub_node, if config.wo_sl { 0.0 } else { 1.0 });
    if let Some(l1) = l_ad1_node {
        let term = tape.scale(l1, config.lambda1);
        total = tape.add(total, term);
    }
    if let Some(lc) = l_con_node {
        let term = tape.scale(lc, config.lambda2);
        total = tape.add(total, term);
    }
    let term = tape.scale(l_gra_node, config.lambda3);
    total = tape.add(total, term);

    let snapshot_before_g = stats.is_some().then(|| params.values());
    let mut grads_out = tape.backward(total);
    let mut grad_map = BTreeMap::new();
    for (name, id) in gcn_leaf_ids.iter().chain(ean_leaf_ids.iter()) {
        if let Some(g) = grads_out.take(*id) {
            grad_map.insert(name.clone(), g);
        }
    }
    adam_step(params, &grad_map, config.lr)?;

    let record = EpochRecord {
        epoch,
        l_sub: non_finite("L_sub", epoch, tape.scalar(l_sub_node))?,
        l_ad1: non_finite(
            "L_ad1",
            epoch,
            l_ad1_node.map_or(0.0, |n| tape.scalar(n)),
        )?,
        l_ad2: non_finite("L_ad2", epoch, l_ad2)?,
        l_con: non_finite(
            "L_con",
            epoch,
            l_con_node.map_or(0.0, |n| tape.scalar(n)),
        )?,
        l_gra: non_finite("L_gra", epoch, tape.scalar(l_gra_node))?,
        l_total: non_finite("L_total", epoch, tape.scalar(total))?,
    };

    if let Some(stats) = stats {
        stats.max_p_row_dev = stats.max_p_row_dev.max(max_row_sum_dev(&p_val));
        if let Some(r) = r_node {
            stats.max_r_row_dev = stats.max_r_row_dev.max(max_row_sum_dev(tape.value(r)));
        }
        for a in &a_nodes {
            stats.max_a_row_dev = stats.max_a_row_dev.max(max_row_sum_dev(tape.value(*a)));
        }
        // fused rows of available nodes must carry the encoder output bit for bit
        let (zv, fv) = (tape.value(z), tape.value(f));
        for i in 0..graph.n {
            if mask.h[i] {
                for k in 0..config.embed_dim {
                    if zv[[i, k]].to_bits() != fv[[i, k]].to_bits() {
                        stats.fuse_exact = false;
                    }
                }
            }
        }
        // score symmetry through an independent dense product
        let uv = tape.value(u);
        let gram = uv.dot(&uv.t());
        let mut asym = 0.0f64;
        for i in 0..graph.n {
            for j in (i + 1)..graph.n {
                asym = asym.max((gram[[i, j]] - gram[[j, i]]).abs());
            }
        }
        stats.max_s_asymmetry = stats.max_s_asymmetry.max(asym * 0.25); // sigmoid Lipschitz bound
        if let Some(before) = &snapshot_before_g {
            let after = params.values();
            for (name, value) in &after {
                if ModelParams::is_discriminator(name) && value != &before[name] {
                    stats.partition_exact = false;
                }
            }
        }
    }

    Ok(record)
}
