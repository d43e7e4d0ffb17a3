//! Hierarchical graph classification built around hard-assignment pooling with
//! node- and edge-attention coarsening, and a multi-distance graph convolution
//! that routes each node pair through exactly one shortest-walk-distance channel.
//!
//! Layout:
//! - [`graphdata`]: TUDataset parsing, node features, padded batches.
//! - [`numerics`]: dense reverse-mode tape, grouped softmax, gradient checking.
//! - [`mdgnn`]: reachability masks, exact-distance topologies, multi-distance GCN.
//! - [`pool`]: soft/hard assignment, attention-weighted coarsening, soft baseline.
//! - [`model`]: stacked blocks, readout, heads, loss, checkpoints.
//! - [`train`]: Adam, stratified k-fold, early stopping, CSV reporting.

pub mod error;
pub mod graphdata;
pub mod mdgnn;
pub mod model;
pub mod numerics;
pub mod pool;
pub mod train;

pub use error::{Error, Result};
pub use graphdata::{Graph, GraphBatch, GraphCollection};
pub use model::{Model, ModelConfig};
pub use numerics::{Gradients, Tape, Var};
pub use pool::PoolMode;
pub use train::TrainConfig;
