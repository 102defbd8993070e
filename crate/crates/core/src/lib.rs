//! Knowledge-grounded multiple-choice question answering.
//!
//! The crate covers the whole pipeline at desk scale:
//!
//! - [`kg`]: triple/template ingestion, adjacency indexes, relation statistics
//! - [`retrieval`]: entity grounding and hop-bounded subgraph extraction
//! - [`context`]: triplet linearization, embedding and top-k context scoring
//! - [`tensor`]: dense tensors with a reverse-mode tape and gradient oracle
//! - [`model`]: LM/GNN layers with none, naive, interaction-token and
//!   bidirectional cross-attention fusion
//! - [`train`]: datasets, the planted-knowledge synthetic task, SGD training,
//!   evaluation and ablation grids
//! - [`config`]: the run configuration document used by the CLI

pub mod config;
pub mod context;
pub mod kg;
pub mod model;
pub mod retrieval;
pub mod selfcheck;
pub mod tensor;
pub mod text;
pub mod train;
