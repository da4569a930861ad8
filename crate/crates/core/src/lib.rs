//! Cross-modal place recognition: camera-style queries are matched against a
//! LiDAR map rendered from virtual viewpoints, scored by a blend of global
//! descriptor similarity and semantic overlap.

pub mod aggregation;
pub mod config;
pub mod encoder;
pub mod error;
pub mod io;
pub mod losses;
pub mod matching;
pub mod model;
pub mod pipeline;
pub mod projection;
pub mod selfcheck;
pub mod synth;
pub mod types;
pub mod viewpoints;

pub use config::{validate_config, Config, LossKind, Rng};
pub use error::{Error, Result};
pub use model::ModelParams;
pub use types::{LabeledPointCloud, Pose};
