//! Desk-scale laboratory for cross-modal contrastive representation learning
//! on synthetic long-form content.
//!
//! The pipeline: [`corpus`] synthesizes long-form contents whose snippets share
//! a per-content artifact latent, [`sampler`] draws minibatches under the
//! hierarchical (k, w) policy, [`encoder`] + [`objective`] implement the
//! two-tower model and the symmetric contrastive loss with exact gradients,
//! [`trainer`] runs Adam under a warmup+cosine schedule, and [`metrics`]
//! estimates the similarity-pool KL diagnostics and a linear probe.

mod binio;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod metrics;
pub mod objective;
pub mod sampler;
pub mod trainer;

pub use error::{Error, Result};

/// Derives a reproducible sub-seed for a named RNG stream.
///
/// Splitmix64 finalizer over the base seed xored with the stream id, so
/// distinct streams of one run never share state.
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    let mut z = base ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
