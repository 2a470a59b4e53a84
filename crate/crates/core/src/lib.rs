//! Attribute-missing graph clustering with subcluster-aware generative
//! imputation and edge-attention refinement.
//!
//! The pipeline encodes a graph whose attribute rows are partially missing,
//! searches fine-grained subclusters of the embedding, fits a Gaussian per
//! subcluster, draws reparameterized imputations for the missing nodes, and
//! refines the fused embedding with per-node feature attention driven by
//! graph reconstruction. An alternating scheme trains a subcluster
//! discriminator against the imputation generator.
//!
//! Start from [`graph::load_graph`] or [`graph::generate_sbm`], mask with
//! [`graph::apply_missing_mask`], train with [`trainer::train`], and score
//! with [`evaluation`].

pub mod adversarial;
pub mod edge_refine;
pub mod error;
pub mod evaluation;
pub mod graph;
pub mod linalg;
pub mod matio;
pub mod nn;
pub mod sparse;
pub mod subcluster;
pub mod tape;
pub mod trainer;
pub mod ward;

pub use adversarial::DiscriminatorOutput;
pub use error::{Error, Result};
pub use evaluation::{MetricScores, MetricsReport};
pub use graph::{AttributeGraph, MissingMask};
pub use nn::ModelParams;
pub use subcluster::SubclusterModel;
pub use trainer::{train, RunReport, TrainConfig};
