//! Small transformer encoders, the decomposition heads and a causal report
//! decoder, all built on [`crate::autodiff`].
//!
//! Blocks are pre-norm with single-head attention and a gelu MLP. The visual
//! encoder prepends a learned CLS row to the projected patches; the text
//! encoder prepends the CLS token. Token embeddings are shared between the
//! text encoder and the decoder, each with its own positional table.
//!
//! Decoder context layout, one row each:
//!
//! ```text
//! [ proj(X_cur) ; proj(X_prior)? ; prompt ; prior report? ; BOS ; prefix ]
//! ```
//!
//! The prompt is `WITH_HISTORY` or `NO_HISTORY`. With a single decoder block,
//! causal masking over the whole row sequence and prefix masking give the
//! same outputs for generated rows, so only those rows are computed as
//! queries.

mod layers;
mod model;
mod params;

pub use layers::{Block, LayerNorm, Linear, Mlp, MASKED_SCORE};
pub use model::{
    argmax_rows, Decoded, Decomposed, DecompositionHeads, Head, Model, ModelConfig, PriorContext,
    ProjectionHead, ReportDecoder, TextEncoder, VisualEncoder,
};
pub use params::{Ctx, ParamId, ParamStore};
