//! Sequential novel-view synthesis with multi-view attention.
//!
//! A set of posed context views is encoded view by view, a transformer
//! encoder produces one attended representation per view, and a
//! recurrent latent-variable decoder renders a pose-ordered sequence of
//! novel views whose last element is the query view.

pub mod attention_core;
pub mod error;
pub mod objective_metrics;
pub mod params;
pub mod pipeline;
pub mod repr_encoder;
pub mod scene_forge;
pub mod seeds;
pub mod seq_decoder;

pub use error::{Result, TgqnError};
pub use tgqn_autograd as autograd;
