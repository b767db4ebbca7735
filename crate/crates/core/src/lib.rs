//! Long-term visual localization against a dense semantic 3D map.
//!
//! The pipeline builds a labeled point cloud from database depth maps and
//! segmentations, retrieves database images for a query by global
//! descriptor, matches several local feature families, scores each retrieved
//! image by semantic agreement under a temporary pose, and estimates the
//! final pose with RANSAC whose samples are weighted by those scores.

pub mod classes;
pub mod config;
pub mod error;
pub mod eval;
pub mod features;
pub mod geometry;
pub mod io;
pub mod map;
pub mod pipeline;
pub mod pose;
pub mod retrieval;
pub mod scoring;
pub mod synth;

pub type ImageId = u32;

pub use error::{Error, Result};
pub use features::{Correspondence2D3D, FeatureFamily, FeatureSet, Keypoint, Match2D2D};
pub use geometry::{CameraIntrinsics, ImagePoint, PoseError, RigidPose, WorldPoint};
pub use map::{DatabaseImageRecord, DenseMap, DensePoint, DepthMap, LabelImage, VisibilityCone};
pub use pose::{PnPSolution, RansacConfig};
pub use retrieval::{GlobalDescriptor, RetrievalConfig, RetrievalIndex};
pub use scoring::{SemanticScore, VisibilityGateConfig};
