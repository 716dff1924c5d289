//! Multi-subject identity conditioning for MM-DiT style video denoisers.
//!
//! The crate is organized bottom-up:
//!
//! - [`numerics`]: dense tensors, PRNG, reverse-mode gradients, tensor files.
//! - [`token_layout`]: identity-prompt template and typed token sequence.
//! - [`rope3d`]: `(t, y, x)` rotary indices for text, `<image>` and VAE tokens.
//! - [`lora`]: low-rank reparameterized linear maps and the parameter store.
//! - [`mm_attention`]: two-stream joint attention and the text-image
//!   interaction module.
//! - [`identity_injection`]: attention-inherited cross-attention injection and
//!   the token-concatenation / adapter baselines.
//! - [`toy_pipeline`]: mock encoders, synthetic scenes and a flow-matching
//!   toy denoiser.
//! - [`consolidation`]: segmentation gating and clique-based subject
//!   consolidation.
//! - [`metrics`]: identity similarity, temporal consistency, Fréchet distance.

pub mod consolidation;
pub mod identity_injection;
pub mod io_util;
pub mod lora;
pub mod metrics;
pub mod mm_attention;
pub mod numerics;
pub mod rope3d;
pub mod token_layout;
pub mod toy_pipeline;

pub use numerics::{Graph, NumericsError, Rng, Tensor, Var};
