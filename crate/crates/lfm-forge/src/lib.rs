//! Building blocks for hybrid conv/attention language models: the decoder
//! stack with streaming decode, Top-K distillation and preference-alignment
//! losses, checkpoint merging, late-interaction retrieval scoring, and
//! multi-objective candidate selection.

pub mod align;
pub mod archsearch;
pub mod backbone;
pub mod bench;
pub mod checkpoint;
pub mod distill;
pub mod error;
pub mod merge;
pub mod retrieval;
pub mod tensor;

pub use checkpoint::Checkpoint;
pub use error::{Error, Result};
pub use tensor::{RngSeed, Tensor};
