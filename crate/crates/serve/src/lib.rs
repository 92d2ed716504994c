//! Inference service and command-line entry points: seeded generation,
//! four-corner interpolation grids with an anchor cache for promoting
//! cells to corners, and prompt-pair interpolation.

pub mod anchors;
pub mod api;
pub mod engine;
pub mod error;
pub mod http;
pub mod interp;
pub mod sheet;

pub use anchors::{AnchorCache, AnchorHandle};
pub use engine::Engine;
pub use error::{ServeError, ServeResult};
pub use interp::interp_embedding;
