//! Any-order, any-subset autoregressive sequence modeling.
//!
//! A sequence is split into an ordered list of position groups and modeled
//! as a product of group conditionals: every group is predicted from the
//! groups before it. Left-to-right language modeling is the special case of
//! singleton groups.
//!
//! The crate provides the pieces end to end:
//!
//! - [`grouping`]: the ordered partitions driving every stage.
//! - [`masking`]: content/query attention masks derived from a grouping.
//! - [`net`]: a two-stream transformer with exact reverse-mode gradients.
//! - [`train`]: the three-stage curriculum and an AdamW optimizer.
//! - [`decode`]: groupwise sampling and dynamic resampling.
//! - [`eval`]: likelihoods, brute-force normalization checks, ROUGE.
//! - [`io`]: tokenizer, corpus packing and checkpoints.
//! - [`verify`]: the information-flow and correctness suites as a library.

pub mod decode;
pub mod eval;
pub mod grouping;
pub mod io;
pub mod masking;
pub mod net;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod verify;

pub use grouping::{Grouping, InfillSpec};
pub use masking::MaskPair;
pub use net::{ModelConfig, ModelParams};
