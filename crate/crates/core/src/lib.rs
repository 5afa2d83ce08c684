//! Open-vocabulary medical detection: data curation, presence bookkeeping,
//! label vocabularies, encoders, metrics and the pseudo-label engine.
//!
//! Everything here is plain Rust with no tensor library, so it also builds
//! for `wasm32-unknown-unknown`.

pub mod curation;
pub mod encoder;
pub mod geometry;
pub mod metrics;
pub mod presence;
pub mod pseudo_label;
pub mod synthetic;
pub mod vocabulary;
