//! Energy-use prediction for mixed electric and diesel transit fleets:
//! telemetry cleaning, map matching, per-road-segment samples, context
//! enrichment and regression models.

pub mod enrich;
pub mod error;
pub mod experiments;
pub mod geo;
pub mod ingest;
pub mod map_match;
pub mod ml;
pub mod pipeline;
pub mod road_network;
pub mod sampler;
pub mod synth;

pub use error::{Error, ErrorClass, Result};
