//! Convolutional-table (CT) networks: deep models whose layers are fern
//! ensembles voting through lookup tables instead of dot-product filters.
//!
//! A CT layer holds `M` (word calculator, voting table) pairs. At every
//! spatial location each calculator turns the surrounding patch into a
//! `K`-bit word by thresholding differences of two (fractionally offset)
//! samples, and the word selects a row of the `2^K x D_o` voting table.
//! The `M` selected rows are summed into the output column. Inference is
//! pure lookup-and-add ("hard" mode); training replaces the Heaviside
//! with a linear sigmoid so word choice becomes a sparse probability
//! distribution ("soft" mode) with usable gradients.
//!
//! The crate is organized around that split:
//!
//! - [`tensor`]: dense `H x W x D` activation maps with bilinear sampling
//!   and its exact derivatives, spatial gradients, and pooling.
//! - [`fern`]: bit functions and word calculators, hard and soft.
//! - [`layer`]: the CT layer forward paths and per-location cost model.
//! - [`network`]: sequential CT networks, builders, and evaluation.
//! - [`cost`]: operation-count and memory models for CT vs. convolution.
//! - [`theory`]: executable capacity constructions (fern shattering and
//!   the two-layer rectangle network) with brute-force verifiers.
//!
//! With the default `parallel` feature, batch evaluation and per-row
//! layer loops run on rayon; disabling the feature falls back to the
//! same code run sequentially.

pub mod cost;
pub mod error;
pub mod fern;
pub mod layer;
pub mod network;
pub mod tensor;
pub mod theory;

pub use error::{CtError, Result};
pub use fern::{BitFunctionParams, SoftConfig, SoftWordActivity, WordCalculator};
pub use layer::{ConvTable, CtLayerConfig, ForwardCache, VotingTable};
pub use network::{LayerSpec, Network, NetworkSpec};
pub use tensor::{PadMode, PadSpec, Tensor3};
