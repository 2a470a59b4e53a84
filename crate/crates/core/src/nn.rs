//! Differentiable building blocks: parameter store with Adam state, the GCN
//! encoder, and the finite-difference gradient-check harness every loss in
//! this crate has to pass.

use crate::error::{Error, Result};
use crate::matio;
use crate::sparse::CsrMatrix;
use crate::tape::{NodeId, Tape};
use ndarray::Array2;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
/// Central-difference step of the gradient checker.
pub const FD_STEP: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Linear,
}

/// One trainable tensor with its optimizer state.
#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: Array2<f64>,
    first_moment: Array2<f64>,
    second_moment: Array2<f64>,
    step: u64,
}

impl Param {
    pub fn new(name: impl Into<String>, value: Array2<f64>) -> Self {
        let dim = value.dim();
        Param {
            name: name.into(),
            value,
            first_moment: Array2::zeros(dim),
            second_moment: Array2::zeros(dim),
            step: 0,
        }
    }

    fn adam_update(&mut self, grad: &Array2<f64>, lr: f64) -> Result<()> {
        if grad.dim() != self.value.dim() {
            return Err(Error::Config(format!(
                "gradient shape {:?} does not match parameter {} of shape {:?}",
                grad.dim(),
                self.name,
                self.value.dim()
            )));
        }
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite gradient for parameter {}",
                self.name
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - ADAM_BETA1.powi(t);
        let bc2 = 1.0 - ADAM_BETA2.powi(t);
        ndarray::Zip::from(&mut self.value)
            .and(&mut self.first_moment)
            .and(&mut self.second_moment)
            .and(grad)
            .for_each(|v, m, s, &g| {
                *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
                *s = ADAM_BETA2 * *s + (1.0 - ADAM_BETA2) * g * g;
                let m_hat = *m / bc1;
                let s_hat = *s / bc2;
                *v -= lr * m_hat / (s_hat.sqrt() + ADAM_EPS);
            });
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct GcnLayer {
    pub weight: Param,
    pub activation: Activation,
}

/// Query/key/value projections of one edge-attention layer.
#[derive(Debug, Clone)]
pub struct EanLayerWeights {
    pub w_query: Param,
    pub w_key: Param,
    pub w_value: Param,
}

/// Layer widths. Both the encoder and the discriminator are two-layer
/// (hidden + output); attention layers are square in the embedding width.
#[derive(Debug, Clone, Copy)]
pub struct Architecture {
    pub input_dim: usize,
    pub gcn_hidden: usize,
    pub embed_dim: usize,
    pub disc_hidden: usize,
    /// Discriminator output units: one per subcluster plus the fake class.
    pub disc_out: usize,
    pub ean_depth: usize,
}

/// Every trainable tensor of a run, keyed by stable dotted names
/// (`gcn.0.weight`, `disc.1.weight`, `ean.0.wq`, ...).
#[derive(Debug, Clone)]
pub struct ModelParams {
    pub gcn_layers: Vec<GcnLayer>,
    pub disc_layers: Vec<Param>,
    pub ean_layers: Vec<EanLayerWeights>,
}

fn xavier(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-bound..bound))
}

impl ModelParams {
    pub fn init(arch: &Architecture, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gcn_layers = vec![
            GcnLayer {
                weight: Param::new(
                    "gcn.0.weight",
                    xavier(&mut rng, arch.input_dim, arch.gcn_hidden),
                ),
                activation: Activation::Relu,
            },
            GcnLayer {
                weight: Param::new(
                    "gcn.1.weight",
                    xavier(&mut rng, arch.gcn_hidden, arch.embed_dim),
                ),
                activation: Activation::Linear,
            },
        ];
        let disc_layers = vec![
            Param::new(
                "disc.0.weight",
                xavier(&mut rng, arch.embed_dim, arch.disc_hidden),
            ),
            Param::new(
                "disc.1.weight",
                xavier(&mut rng, arch.disc_hidden, arch.disc_out),
            ),
        ];
        let ean_layers = (0..arch.ean_depth)
            .map(|l| EanLayerWeights {
                w_query: Param::new(
                    format!("ean.{l}.wq"),
                    xavier(&mut rng, arch.embed_dim, arch.embed_dim),
                ),
                w_key: Param::new(
                    format!("ean.{l}.wk"),
                    xavier(&mut rng, arch.embed_dim, arch.embed_dim),
                ),
                w_value: Param::new(
                    format!("ean.{l}.wv"),
                    xavier(&mut rng, arch.embed_dim, arch.embed_dim),
                ),
            })
            .collect();
        ModelParams {
            gcn_layers,
            disc_layers,
            ean_layers,
        }
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut out: Vec<&Param> = Vec::new();
        for l in &self.gcn_layers {
            out.push(&l.weight);
        }
        for p in &self.disc_layers {
            out.push(p);
        }
        for l in &self.ean_layers {
            out.push(&l.w_query);
            out.push(&l.w_key);
            out.push(&l.w_value);
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out: Vec<&mut Param> = Vec::new();
        for l in &mut self.gcn_layers {
            out.push(&mut l.weight);
        }
        for p in &mut self.disc_layers {
            out.push(p);
        }
        for l in &mut self.ean_layers {
            out.push(&mut l.w_query);
            out.push(&mut l.w_key);
            out.push(&mut l.w_value);
        }
        out
    }

    pub fn is_discriminator(name: &str) -> bool {
        name.starts_with("disc.")
    }

    /// Snapshot of values only, for exact-partition assertions.
    pub fn values(&self) -> BTreeMap<String, Array2<f64>> {
        self.params()
            .into_iter()
            .map(|p| (p.name.clone(), p.value.clone()))
            .collect()
    }

    /// Writes one CGIRMAT1 file per tensor plus a `manifest.txt` mapping
    /// names to file names.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut manifest = String::new();
        for p in self.params() {
            let file = format!("{}.mat", p.name);
            matio::write_binary(&dir.join(&file), &p.value)?;
            manifest.push_str(&format!("{}\t{}\n", p.name, file));
        }
        std::fs::write(dir.join("manifest.txt"), manifest)?;
        Ok(())
    }

    /// Loads tensor values from a checkpoint directory; optimizer state
    /// resets. Every parameter of `self` must appear in the manifest.
    pub fn load_values(&mut self, dir: &Path) -> Result<()> {
        let manifest = std::fs::read_to_string(dir.join("manifest.txt"))?;
        let mut files: BTreeMap<String, String> = BTreeMap::new();
        for line in manifest.lines() {
            if let Some((name, file)) = line.split_once('\t') {
                files.insert(name.to_string(), file.to_string());
            }
        }
        for p in self.params_mut() {
            let file = files.get(&p.name).ok_or_else(|| {
                Error::Consistency(format!("checkpoint is missing tensor {}", p.name))
            })?;
            let value = matio::read_binary(&dir.join(file))?;
            if value.dim() != p.value.dim() {
                return Err(Error::Consistency(format!(
                    "checkpoint tensor {} has shape {:?}, expected {:?}",
                    p.name,
                    value.dim(),
                    p.value.dim()
                )));
            }
            p.value = value;
            p.first_moment.fill(0.0);
            p.second_moment.fill(0.0);
            p.step = 0;
        }
        Ok(())
    }
}

/// One Adam step over exactly the parameters named in `grads`.
pub fn adam_step(
    params: &mut ModelParams,
    grads: &BTreeMap<String, Array2<f64>>,
    lr: f64,
) -> Result<()> {
    let known: Vec<String> = params.params().iter().map(|p| p.name.clone()).collect();
    for name in grads.keys() {
        if !known.contains(name) {
            return Err(Error::Config(format!("gradient for unknown parameter {name}")));
        }
    }
    for p in params.params_mut() {
        if let Some(g) = grads.get(&p.name) {
            p.adam_update(g, lr)?;
        }
    }
    Ok(())
}

/// Builds the encoder on the tape: alternating `A_hat (H W)` products with
/// the configured activations. `adj` must be symmetric (its own transpose).
pub fn build_gcn(
    tape: &mut Tape,
    x: NodeId,
    adj: &Arc<CsrMatrix>,
    layers: &[(NodeId, Activation)],
) -> NodeId {
    let mut h = x;
    for &(w, act) in layers {
        let xw = tape.matmul(h, w);
        let agg = tape.spmm(adj, adj, xw);
        h = match act {
            Activation::Relu => tape.relu(agg),
            Activation::Linear => agg,
        };
    }
    h
}

/// Plain (value-only) GCN forward pass.
pub fn gcn_forward(
    x_masked: &Array2<f64>,
    adj: &Arc<CsrMatrix>,
    params: &ModelParams,
) -> Result<Array2<f64>> {
    if params.gcn_layers.is_empty() {
        return Err(Error::Config("encoder has no layers".into()));
    }
    if x_masked.ncols() != params.gcn_layers[0].weight.value.nrows() {
        return Err(Error::Config(format!(
            "feature width {} does not match first encoder layer input {}",
            x_masked.ncols(),
            params.gcn_layers[0].weight.value.nrows()
        )));
    }
    if adj.rows() != x_masked.nrows() {
        return Err(Error::Config(format!(
            "adjacency has {} rows for {} feature rows",
            adj.rows(),
            x_masked.nrows()
        )));
    }
    let mut tape = Tape::new();
    let x = tape.constant(x_masked.clone());
    let layers: Vec<(NodeId, Activation)> = params
        .gcn_layers
        .iter()
        .map(|l| (tape.constant(l.weight.value.clone()), l.activation))
        .collect();
    let z = build_gcn(&mut tape, x, adj, &layers);
    Ok(tape.value(z).clone())
}

/// A scalar objective with analytic gradients, the subject of
/// `check_gradients`.
pub trait ScalarObjective {
    fn value_and_grads(&self, point: &Bundle) -> Result<(f64, Bundle)>;

    fn value(&self, point: &Bundle) -> Result<f64> {
        Ok(self.value_and_grads(point)?.0)
    }
}

impl<F> ScalarObjective for F
where
    F: Fn(&Bundle) -> Result<(f64, Bundle)>,
{
    fn value_and_grads(&self, point: &Bundle) -> Result<(f64, Bundle)> {
        self(point)
    }
}

/// Named tensors forming the input of a checked objective.
pub type Bundle = BTreeMap<String, Array2<f64>>;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Max relative error per tensor.
    pub per_tensor: BTreeMap<String, f64>,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.per_tensor.values().copied().fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_err() <= self.tol
    }
}

/// Compares analytic gradients against central finite differences with step
/// `FD_STEP`, coordinate by coordinate, using the relative error
/// `|a - b| / max(|a|, |b|, 1e-8)`.
pub fn check_gradients<O: ScalarObjective>(
    objective: &O,
    point: &Bundle,
    tol: f64,
) -> Result<GradCheckReport> {
    let (value, analytic) = objective.value_and_grads(point)?;
    if !value.is_finite() {
        return Err(Error::Numeric("loss not finite at the check point".into()));
    }
    let mut per_tensor = BTreeMap::new();
    for (name, tensor) in point {
        let zero = Array2::zeros(tensor.dim());
        let grad = analytic.get(name).unwrap_or(&zero);
        let mut worst = 0.0f64;
        for i in 0..tensor.nrows() {
            for j in 0..tensor.ncols() {
                let probe = |delta: f64| -> Result<f64> {
                    let mut p = point.clone();
                    p.get_mut(name).unwrap()[[i, j]] += delta;
                    let v = objective.value(&p)?;
                    if !v.is_finite() {
                        return Err(Error::Numeric(format!(
                            "loss not finite at perturbed point {name}[{i},{j}]"
                        )));
                    }
                    Ok(v)
                };
                let fd = (probe(FD_STEP)? - probe(-FD_STEP)?) / (2.0 * FD_STEP);
                let a = grad[[i, j]];
                let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-8);
                worst = worst.max(rel);
            }
        }
        per_tensor.insert(name.clone(), worst);
    }
    Ok(GradCheckReport { per_tensor, tol })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{generate_sbm, normalize_adjacency};
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    fn tiny_arch() -> Architecture {
        Architecture {
            input_dim: 4,
            gcn_hidden: 6,
            embed_dim: 3,
            disc_hidden: 5,
            disc_out: 4,
            ean_depth: 2,
        }
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let a = ModelParams::init(&tiny_arch(), 9);
        let b = ModelParams::init(&tiny_arch(), 9);
        for (pa, pb) in a.params().iter().zip(b.params().iter()) {
            assert_eq!(pa.value, pb.value);
        }
        let w = &a.gcn_layers[0].weight.value;
        let bound = (6.0 / (4 + 6) as f64).sqrt();
        assert!(w.iter().all(|v| v.abs() < bound));
    }

    #[test]
    fn adam_zero_gradient_keeps_parameters() {
        let mut params = ModelParams::init(&tiny_arch(), 1);
        let before = params.values();
        let mut grads = BTreeMap::new();
        grads.insert(
            "gcn.0.weight".to_string(),
            Array2::zeros(params.gcn_layers[0].weight.value.dim()),
        );
        adam_step(&mut params, &grads, 1e-3).unwrap();
        assert_eq!(params.values(), before);
    }

    #[test]
    fn adam_first_step_matches_closed_form() {
        let mut params = ModelParams {
            gcn_layers: vec![GcnLayer {
                weight: Param::new("gcn.0.weight", array![[0.5]]),
                activation: Activation::Linear,
            }],
            disc_layers: vec![],
            ean_layers: vec![],
        };
        let mut grads = BTreeMap::new();
        grads.insert("gcn.0.weight".to_string(), array![[1.0]]);
        adam_step(&mut params, &grads, 0.01).unwrap();
        // bias-corrected first step: m_hat = s_hat = 1, update = -lr / (1 + eps)
        let expected = 0.5 - 0.01 / (1.0 + ADAM_EPS);
        assert_abs_diff_eq!(
            params.gcn_layers[0].weight.value[[0, 0]],
            expected,
            epsilon = 1e-15
        );
    }

    #[test]
    fn adam_only_touches_named_parameters() {
        let mut params = ModelParams::init(&tiny_arch(), 3);
        let before = params.values();
        let mut grads = BTreeMap::new();
        grads.insert(
            "disc.0.weight".to_string(),
            Array2::from_elem(params.disc_layers[0].value.dim(), 0.1),
        );
        adam_step(&mut params, &grads, 1e-3).unwrap();
        for (name, value) in params.values() {
            if name == "disc.0.weight" {
                assert_ne!(value, before[&name]);
            } else {
                assert_eq!(value, before[&name]);
            }
        }
    }

    #[test]
    fn adam_is_deterministic() {
        let run = || {
            let mut params = ModelParams::init(&tiny_arch(), 5);
            let mut grads = BTreeMap::new();
            grads.insert(
                "gcn.1.weight".to_string(),
                Array2::from_elem(params.gcn_layers[1].weight.value.dim(), 0.37),
            );
            adam_step(&mut params, &grads, 2e-3).unwrap();
            adam_step(&mut params, &grads, 2e-3).unwrap();
            params.values()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn adam_rejects_non_finite_and_unknown() {
        let mut params = ModelParams::init(&tiny_arch(), 5);
        let mut grads = BTreeMap::new();
        grads.insert(
            "gcn.0.weight".to_string(),
            Array2::from_elem(params.gcn_layers[0].weight.value.dim(), f64::NAN),
        );
        match adam_step(&mut params, &grads, 1e-3) {
            Err(Error::Numeric(msg)) => assert!(msg.contains("gcn.0.weight")),
            other => panic!("expected numeric error, got {other:?}"),
        }
        let mut grads = BTreeMap::new();
        grads.insert("nope".to_string(), array![[1.0]]);
        assert!(matches!(
            adam_step(&mut params, &grads, 1e-3),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn gcn_zero_input_gives_zero_embedding() {
        let g = generate_sbm(12, 2, 0.5, 0.1, 4, 1.0, 2).unwrap();
        let adj = Arc::new(normalize_adjacency(&g.g).unwrap());
        let params = ModelParams::init(&tiny_arch(), 4);
        let z = gcn_forward(&Array2::zeros((12, 4)), &adj, &params).unwrap();
        assert!(z.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gcn_hand_case_two_node_path() {
        let g = CsrMatrix::from_triplets(2, 2, &[(0, 1, 1.0), (1, 0, 1.0)]);
        let adj = Arc::new(normalize_adjacency(&g).unwrap());
        let params = ModelParams {
            gcn_layers: vec![GcnLayer {
                weight: Param::new("gcn.0.weight", array![[1.0]]),
                activation: Activation::Linear,
            }],
            disc_layers: vec![],
            ean_layers: vec![],
        };
        let z = gcn_forward(&array![[1.0], [3.0]], &adj, &params).unwrap();
        assert_abs_diff_eq!(z, array![[2.0], [2.0]], epsilon = 1e-14);
    }

    #[test]
    fn gcn_fills_masked_node_from_neighbor() {
        // node 1 is masked (zero row) but adjacent to node 0
        let g = CsrMatrix::from_triplets(3, 3, &[(0, 1, 1.0), (1, 0, 1.0)]);
        let adj = Arc::new(normalize_adjacency(&g).unwrap());
        let params = ModelParams {
            gcn_layers: vec![GcnLayer {
                weight: Param::new("gcn.0.weight", array![[1.0]]),
                activation: Activation::Linear,
            }],
            disc_layers: vec![],
            ean_layers: vec![],
        };
        let z = gcn_forward(&array![[2.0], [0.0], [0.0]], &adj, &params).unwrap();
        assert!(z[[1, 0]] != 0.0);
        assert_eq!(z[[2, 0]], 0.0); // isolated masked node stays zero
    }

    #[test]
    fn gcn_shape_mismatch_is_config_error() {
        let g = CsrMatrix::from_triplets(2, 2, &[(0, 1, 1.0), (1, 0, 1.0)]);
        let adj = Arc::new(normalize_adjacency(&g).unwrap());
        let params = ModelParams::init(&tiny_arch(), 0);
        assert!(matches!(
            gcn_forward(&Array2::zeros((2, 7)), &adj, &params),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn gcn_is_permutation_equivariant() {
        let g = generate_sbm(14, 2, 0.5, 0.1, 4, 1.5, 6).unwrap();
        let params = ModelParams::init(&tiny_arch(), 8);
        let adj = Arc::new(normalize_adjacency(&g.g).unwrap());
        let z = gcn_forward(&g.x, &adj, &params).unwrap();

        // relabel nodes with a fixed permutation
        let n = g.n;
        let perm: Vec<usize> = (0..n).map(|i| (i * 5 + 3) % n).collect();
        let mut xp = Array2::zeros((n, g.d));
        for i in 0..n {
            xp.row_mut(perm[i]).assign(&g.x.row(i));
        }
        let trip: Vec<_> = g
            .g
            .iter()
            .map(|(i, j, v)| (perm[i], perm[j], v))
            .collect();
        let gp = CsrMatrix::from_triplets(n, n, &trip);
        let adjp = Arc::new(normalize_adjacency(&gp).unwrap());
        let zp = gcn_forward(&xp, &adjp, &params).unwrap();
        for i in 0..n {
            for k in 0..z.ncols() {
                assert_abs_diff_eq!(zp[[perm[i], k]], z[[i, k]], epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn gradcheck_quadratic_is_machine_precision() {
        let objective = |point: &Bundle| -> crate::error::Result<(f64, Bundle)> {
            let x = &point["x"];
            let value = 0.5 * x.iter().map(|v| v * v).sum::<f64>();
            let mut grads = Bundle::new();
            grads.insert("x".into(), x.clone());
            Ok((value, grads))
        };
        let mut point = Bundle::new();
        point.insert("x".into(), array![[1.0, -2.0], [0.3, 4.0]]);
        let report = check_gradients(&objective, &point, 1e-8).unwrap();
        assert!(report.passed(), "max err {}", report.max_rel_err());
    }

    #[test]
    fn gradcheck_flags_wrong_gradient() {
        let objective = |point: &Bundle| -> crate::error::Result<(f64, Bundle)> {
            let x = &point["x"];
            let value = x.iter().map(|v| v * v).sum::<f64>();
            let mut grads = Bundle::new();
            grads.insert("x".into(), x.clone()); // missing factor 2
            Ok((value, grads))
        };
        let mut point = Bundle::new();
        point.insert("x".into(), array![[1.0, 2.0]]);
        let report = check_gradients(&objective, &point, 1e-4).unwrap();
        assert!(!report.passed());
    }

    #[test]
    fn checkpoint_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let params = ModelParams::init(&tiny_arch(), 11);
        params.save(dir.path()).unwrap();
        let mut other = ModelParams::init(&tiny_arch(), 99);
        other.load_values(dir.path()).unwrap();
        for (a, b) in params.params().iter().zip(other.params().iter()) {
            // stored as f32
            for (va, vb) in a.value.iter().zip(b.value.iter()) {
                assert_abs_diff_eq!(*va, *vb, epsilon = 1e-6);
            }
        }
    }
}
