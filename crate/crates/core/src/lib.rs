#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::too_many_arguments)]

//! Supervised session segmentation for e-commerce behavior logs.
//!
//! Each gap between two consecutive items of a session is a candidate
//! segmentation point. The toolkit describes a gap by the pairwise
//! similarities (behavior embedding, brand, title, price) of the items in a
//! window around it and classifies the gap with a supervised model.

pub mod baseline;
pub mod behavior_embed;
pub mod corpus;
pub mod eval_tune;
pub mod explain;
pub mod features;
pub mod models;
pub mod pipeline;
pub mod synth;
pub mod text_embed;
mod vecfile;

pub use vecfile::VecFileError;
