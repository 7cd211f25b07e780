//! Generated-to-real modality alignment at desk scale.
//!
//! A shared encoder backbone is pretrained contrastively on real inputs and
//! text, then low-rank adapters and a separate projection head learn to place
//! generated inputs next to their real partners. A linear probe trained on
//! generated embeddings is finally evaluated on real inputs through the
//! untouched real path.

pub mod data;
pub mod error;
pub mod eval;
pub mod loss;
pub mod model;
pub mod numerics;
pub mod train;

pub use error::{Error, ErrorClass, Result};
