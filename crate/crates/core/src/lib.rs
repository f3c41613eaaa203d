//! Geocoding compositional location descriptions into bounding boxes.
//!
//! A *recaller* supplies coordinates for the places a description mentions
//! and an LLM *reasoner* turns description plus coordinates into a box. The
//! [`metrics`] module scores boxes by great-circle distance between
//! centroids and by spherical area overlap.

pub mod cli;
pub mod eval;
pub mod gazetteer;
pub mod geo;
pub mod llm;
pub mod metrics;
pub mod net;
pub mod pipeline;

pub use geo::{BoundingBox, GeoInfo, GeoPoint};
pub use metrics::{aggregate, MetricsReport, Prediction};
pub use pipeline::{run_experiment, run_record, Approach, Deps, LocationRecord, Mention};
