//! Desk-scale laboratory for in-context learning in small transformers.
//!
//! The crate is organized around the experiment pipeline:
//!
//! - [`tensor`] / [`tape`] — dense f64 tensors with reverse-mode autodiff.
//! - [`transformer`] — configurable pre-norm transformer over packed
//!   (x, y) context prompts.
//! - [`tasks`] — synthetic task families (linear, sparse linear, decision
//!   trees) with known hierarchy depth.
//! - [`construction`] — the fixed-weight attention stack whose forward pass
//!   runs gradient descent on in-context linear regression, plus the
//!   independent GD oracle it is verified against.
//! - [`train`] — AdamW training on streams of fresh episodes and ICL
//!   evaluation over context-length grids.
//! - [`analysis`] — power-law, sigmoid-emergence, and depth-width allocation
//!   fits with bootstrap confidence intervals, plus closed-form predictions.

pub mod analysis;
pub mod construction;
pub mod seeds;
pub mod tape;
pub mod tasks;
pub mod tensor;
pub mod train;
pub mod transformer;
