//! Offline multi-object tracklet association.
//!
//! The pipeline links per-frame detections into reliable tracklets with a
//! dual-threshold strategy, jointly learns a feed-forward embedding and
//! temporally constrained segment-wise Mahalanobis metrics online, scores
//! tracklet pairs with motion and appearance affinity models, stitches
//! tracklets by solving a generalized linear assignment with softassign, and
//! interpolates the remaining gaps. Evaluation uses the standard CLEAR-MOT
//! protocol.

pub mod affinity;
pub mod assoc;
pub mod config;
pub mod embed;
pub mod error;
pub mod eval;
pub mod io;
pub mod metric;
pub mod pipeline;
pub mod synth;
pub mod trackgen;
pub mod types;

pub use config::{validate_config, Config, SoftassignConfig, TrackGenConfig};
pub use error::{Error, Result};
pub use pipeline::{run_pipeline, PipelineOutput};
pub use types::{plan_segments, BBox, Detection, SegmentPlan, Tracklet, Trajectory};
