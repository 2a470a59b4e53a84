//! Attribute graphs: loading, masking, adjacency normalization, and the
//! synthetic block-model generator used by the test suites.

use crate::error::{Error, Result};
use crate::matio;
use crate::sparse::CsrMatrix;
use ndarray::Array2;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

/// An undirected attribute graph: dense attributes, sparse symmetric
/// adjacency, optional ground-truth labels.
#[derive(Debug, Clone)]
pub struct AttributeGraph {
    pub n: usize,
    pub d: usize,
    /// Class count, derived from labels when present.
    pub c: Option<usize>,
    pub x: Array2<f64>,
    pub g: CsrMatrix,
    pub labels: Option<Vec<usize>>,
    pub name: String,
}

impl AttributeGraph {
    pub fn new(
        x: Array2<f64>,
        g: CsrMatrix,
        labels: Option<Vec<usize>>,
        name: impl Into<String>,
    ) -> Result<Self> {
        let n = x.nrows();
        let d = x.ncols();
        if g.rows() != n || g.cols() != n {
            return Err(Error::Consistency(format!(
                "adjacency is {}x{} but feature matrix has {} rows",
                g.rows(),
                g.cols(),
                n
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Consistency("non-finite attribute entry".into()));
        }
        if g.iter().any(|(_, _, v)| v < 0.0) {
            return Err(Error::Consistency("negative adjacency entry".into()));
        }
        if !g.is_symmetric(0.0) {
            return Err(Error::Consistency("adjacency is not symmetric".into()));
        }
        let c = match &labels {
            Some(l) => {
                if l.len() != n {
                    return Err(Error::Consistency(format!(
                        "label count {} does not match {} nodes",
                        l.len(),
                        n
                    )));
                }
                Some(l.iter().max().map_or(0, |m| m + 1))
            }
            None => None,
        };
        Ok(AttributeGraph {
            n,
            d,
            c,
            x,
            g,
            labels,
            name: name.into(),
        })
    }
}

/// Availability mask over nodes: `h[i]` is true when node i keeps its
/// attribute row.
#[derive(Debug, Clone, PartialEq)]
pub struct MissingMask {
    pub h: Vec<bool>,
    pub ratio: f64,
    pub seed: u64,
}

impl MissingMask {
    /// Draws `round(n * ratio)` missing nodes uniformly without replacement.
    pub fn generate(n: usize, ratio: f64, seed: u64) -> Result<Self> {
        if !(0.0..1.0).contains(&ratio) {
            return Err(Error::Argument(format!(
                "missing ratio must lie in [0, 1), got {ratio}"
            )));
        }
        let k = (n as f64 * ratio).round() as usize;
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for i in 0..k {
            let j = rng.random_range(i..n);
            order.swap(i, j);
        }
        let mut h = vec![true; n];
        for &i in &order[..k] {
            h[i] = false;
        }
        Ok(MissingMask { h, ratio, seed })
    }

    pub fn all_available(n: usize) -> Self {
        MissingMask {
            h: vec![true; n],
            ratio: 0.0,
            seed: 0,
        }
    }

    /// Number of missing nodes.
    pub fn n_missing(&self) -> usize {
        self.h.iter().filter(|&&a| !a).count()
    }

    /// Number of available nodes.
    pub fn n_available(&self) -> usize {
        self.h.len() - self.n_missing()
    }
}

/// Zeroes the attribute rows of masked nodes.
pub fn apply_missing_mask(
    graph: &AttributeGraph,
    ratio: f64,
    seed: u64,
) -> Result<(Array2<f64>, MissingMask)> {
    let mask = MissingMask::generate(graph.n, ratio, seed)?;
    let mut x = graph.x.clone();
    for (i, &avail) in mask.h.iter().enumerate() {
        if !avail {
            x.row_mut(i).fill(0.0);
        }
    }
    Ok((x, mask))
}

/// Symmetric degree normalization with self-loops:
/// `D^{-1/2} (G + I) D^{-1/2}` where `D` is the degree diagonal of `G + I`.
pub fn normalize_adjacency(g: &CsrMatrix) -> Result<CsrMatrix> {
    if !g.is_symmetric(0.0) {
        return Err(Error::Consistency(
            "normalize_adjacency needs a symmetric adjacency".into(),
        ));
    }
    let n = g.rows();
    let mut deg = vec![1.0f64; n]; // self-loop contribution
    for (r, _, v) in g.iter() {
        deg[r] += v;
    }
    let inv_sqrt: Vec<f64> = deg.iter().map(|d| 1.0 / d.sqrt()).collect();
    let mut triplets: Vec<(usize, usize, f64)> = Vec::with_capacity(g.nnz() + n);
    for i in 0..n {
        triplets.push((i, i, (g.get(i, i) + 1.0) * inv_sqrt[i] * inv_sqrt[i]));
        for (j, v) in g.row(i) {
            if j != i {
                triplets.push((i, j, v * inv_sqrt[i] * inv_sqrt[j]));
            }
        }
    }
    Ok(CsrMatrix::from_triplets(n, n, &triplets))
}

/// Logistic squash applied only when some edge weight exceeds 1; binary and
/// probabilistic graphs pass through unchanged.
pub fn sigmoid_preprocess(g: &CsrMatrix) -> Array2<f64> {
    let needs = g.nnz() > 0 && g.max_value() > 1.0;
    let dense = g.to_dense();
    if needs {
        dense.mapv(|v| crate::tape::sigmoid(v))
    } else {
        dense
    }
}

/// True when `sigmoid_preprocess` would leave the graph unchanged, allowing
/// the reconstruction loss to stream against the sparse adjacency.
pub fn is_probabilistic(g: &CsrMatrix) -> bool {
    g.nnz() == 0 || g.max_value() <= 1.0
}

/// Planted-partition generator: `c` equal blocks, Bernoulli edges with
/// intra/inter probabilities, and class-conditional Gaussian attributes whose
/// mean norms scale with `separation`.
#[allow(clippy::too_many_arguments)]
pub fn generate_sbm(
    n: usize,
    c: usize,
    p_in: f64,
    p_out: f64,
    attr_dim: usize,
    separation: f64,
    seed: u64,
) -> Result<AttributeGraph> {
    if !(0.0..=1.0).contains(&p_in) || !(0.0..=1.0).contains(&p_out) || p_out > p_in {
        return Err(Error::Argument(format!(
            "need 0 <= p_out <= p_in <= 1, got p_in={p_in}, p_out={p_out}"
        )));
    }
    if c == 0 || n % c != 0 {
        return Err(Error::Argument(format!(
            "node count {n} must divide evenly into {c} classes"
        )));
    }
    if attr_dim == 0 {
        return Err(Error::Argument("attribute dimension must be positive".into()));
    }
    let block = n / c;
    let labels: Vec<usize> = (0..n).map(|i| i / block).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut triplets = Vec::new();
    for i in 0..n {
        for j in (i + 1)..n {
            let p = if labels[i] == labels[j] { p_in } else { p_out };
            if rng.random::<f64>() < p {
                triplets.push((i, j, 1.0));
                triplets.push((j, i, 1.0));
            }
        }
    }
    let g = CsrMatrix::from_triplets(n, n, &triplets);
    let mut x = Array2::<f64>::zeros((n, attr_dim));
    for i in 0..n {
        let axis = labels[i] % attr_dim;
        for k in 0..attr_dim {
            let noise: f64 = rng.sample(StandardNormal);
            x[[i, k]] = noise + if k == axis { separation } else { 0.0 };
        }
    }
    AttributeGraph::new(x, g, Some(labels), format!("sbm-n{n}-c{c}-s{seed}"))
}

/// Loads a graph from an edge list, a feature matrix (CSV or CGIRMAT1
/// binary), and an optional label file. The adjacency is symmetrized;
/// duplicate edges keep the weight seen last.
pub fn load_graph(
    edge_path: &Path,
    feature_path: &Path,
    label_path: Option<&Path>,
) -> Result<AttributeGraph> {
    let x = matio::read_matrix_auto(feature_path)?;
    let n = x.nrows();

    let file = BufReader::new(File::open(edge_path)?);
    let mut edges: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    for (lineno, line) in file.lines().enumerate() {
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = trimmed.split_whitespace().collect();
        if fields.len() != 2 && fields.len() != 3 {
            return Err(Error::Parse {
                path: edge_path.display().to_string(),
                line: lineno + 1,
                msg: format!("expected 'src dst' or 'src dst weight', got {trimmed:?}"),
            });
        }
        let parse_id = |s: &str| -> Result<usize> {
            s.parse().map_err(|_| Error::Parse {
                path: edge_path.display().to_string(),
                line: lineno + 1,
                msg: format!("invalid node id {s:?}"),
            })
        };
        let src = parse_id(fields[0])?;
        let dst = parse_id(fields[1])?;
        let weight: f64 = if fields.len() == 3 {
            fields[2].parse().map_err(|_| Error::Parse {
                path: edge_path.display().to_string(),
                line: lineno + 1,
                msg: format!("invalid weight {:?}", fields[2]),
            })?
        } else {
            1.0
        };
        if src >= n || dst >= n {
            return Err(Error::Bounds(format!(
                "{}:{}: node id {} out of range for {} nodes",
                edge_path.display(),
                lineno + 1,
                src.max(dst),
                n
            )));
        }
        edges.insert((src.min(dst), src.max(dst)), weight);
    }
    let mut triplets = Vec::with_capacity(edges.len() * 2);
    for (&(a, b), &w) in &edges {
        if w == 0.0 {
            continue;
        }
        triplets.push((a, b, w));
        if a != b {
            triplets.push((b, a, w));
        }
    }
    let g = CsrMatrix::from_triplets(n, n, &triplets);

    let labels = match label_path {
        Some(path) => {
            let file = BufReader::new(File::open(path)?);
            let mut labels = Vec::new();
            for (lineno, line) in file.lines().enumerate() {
                let line = line?;
                let trimmed = line.trim();
                if trimmed.is_empty() {
                    continue;
                }
                let label: usize = trimmed.parse().map_err(|_| Error::Parse {
                    path: path.display().to_string(),
                    line: lineno + 1,
                    msg: format!("invalid label {trimmed:?}"),
                })?;
                labels.push(label);
            }
            if labels.len() != n {
                return Err(Error::Consistency(format!(
                    "{} labels for {} nodes",
                    labels.len(),
                    n
                )));
            }
            Some(labels)
        }
        None => None,
    };

    let name = feature_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "graph".into());
    AttributeGraph::new(x, g, labels, name)
}

/// Writes the documented on-disk formats. Features go out as CSV so the
/// round trip is exact in f64.
pub fn save_graph(
    graph: &AttributeGraph,
    edge_path: &Path,
    feature_path: &Path,
    label_path: Option<&Path>,
) -> Result<()> {
    let mut w = BufWriter::new(File::create(edge_path)?);
    for (i, j, v) in graph.g.iter() {
        if i <= j {
            writeln!(w, "{i}\t{j}\t{v}")?;
        }
    }
    w.flush()?;
    matio::write_csv(feature_path, &graph.x)?;
    if let Some(path) = label_path {
        if let Some(labels) = &graph.labels {
            let mut w = BufWriter::new(File::create(path)?);
            for l in labels {
                writeln!(w, "{l}")?;
            }
            w.flush()?;
        }
    }
    Ok(())
}
