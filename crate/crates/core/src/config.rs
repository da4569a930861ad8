//! Run configuration and seeded randomness.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of raw input channels of a query observation:
/// normalized depth, surface normal (3) and three appearance channels.
pub const QUERY_CHANNELS: usize = 7;

/// Deterministic generator used across the crate. ChaCha output is
/// specified bit-for-bit, so a seed reproduces the same stream everywhere.
pub type Rng = ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Triplet,
    Infonce,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub n_classes: usize,
    pub descriptor_dim: usize,
    pub n_viewpoints: usize,
    pub range_rows: usize,
    pub range_cols: usize,
    /// Degrees.
    pub vfov_up: f64,
    /// Degrees.
    pub vfov_down: f64,
    pub alpha: f64,
    pub beta: f64,
    pub lambda_sem: f64,
    pub margin: f64,
    pub temperature: f64,
    pub loss_kind: LossKind,
    pub match_threshold_m: f64,
    pub seed: u64,
    /// Render crop radius and depth normalization constant, meters.
    pub max_range_m: f64,
    /// NetVLAD cluster count.
    pub clusters: usize,
    /// Horizontal field of view of the query camera, degrees.
    pub frustum_deg: f64,
    pub negatives_per_anchor: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            n_classes: 8,
            descriptor_dim: 128,
            n_viewpoints: 8,
            range_rows: 16,
            range_cols: 180,
            vfov_up: 2.0,
            vfov_down: -24.8,
            alpha: 0.7,
            beta: 0.3,
            lambda_sem: 0.1,
            margin: 0.3,
            temperature: 0.07,
            loss_kind: LossKind::Infonce,
            match_threshold_m: 5.0,
            seed: 0,
            max_range_m: 80.0,
            clusters: 8,
            frustum_deg: 90.0,
            negatives_per_anchor: 4,
            batch_size: 8,
            learning_rate: 3e-2,
        }
    }
}

impl Config {
    /// Velodyne HDL-64E image geometry (64 x 900).
    pub fn hdl64() -> Self {
        Self {
            range_rows: 64,
            range_cols: 900,
            ..Self::default()
        }
    }

    /// Channels of a local feature map: depth, normal (3), one-hot class.
    pub fn feature_channels(&self) -> usize {
        4 + self.n_classes
    }

    /// Column count of the query camera window inside a full panorama.
    pub fn frustum_cols(&self) -> usize {
        let w = (self.range_cols as f64 * self.frustum_deg / 360.0).round() as usize;
        w.clamp(1, self.range_cols)
    }

    /// First column of the frontal window (azimuth 0 sits at column `cols / 2`).
    pub fn frustum_start(&self) -> usize {
        self.range_cols / 2 - self.frustum_cols() / 2
    }

    pub fn rng(&self) -> Rng {
        Rng::seed_from_u64(self.seed)
    }

    /// Independent stream `stream` derived from the configured seed.
    pub fn rng_stream(&self, stream: u64) -> Rng {
        stream_rng(self.seed, stream)
    }

    pub fn validate(self) -> Result<Self> {
        validate_config(self)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Config = serde_json::from_str(text)?;
        cfg.validate()
    }
}

pub fn stream_rng(seed: u64, stream: u64) -> Rng {
    let mut rng = Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Returns the config unchanged if every invariant holds, otherwise the
/// first violated field.
pub fn validate_config(cfg: Config) -> Result<Config> {
    let finite = |field: &'static str, v: f64| {
        if v.is_finite() {
            Ok(())
        } else {
            Err(Error::config(field, "must be finite"))
        }
    };
    if cfg.n_classes == 0 || cfg.n_classes > 256 {
        return Err(Error::config("n_classes", "must be in 1..=256"));
    }
    if cfg.descriptor_dim == 0 {
        return Err(Error::config("descriptor_dim", "must be positive"));
    }
    if cfg.n_viewpoints == 0 {
        return Err(Error::config("n_viewpoints", "must be positive"));
    }
    if cfg.range_rows == 0 {
        return Err(Error::config("range_rows", "must be positive"));
    }
    if cfg.range_cols == 0 {
        return Err(Error::config("range_cols", "must be positive"));
    }
    finite("vfov_up", cfg.vfov_up)?;
    finite("vfov_down", cfg.vfov_down)?;
    if cfg.vfov_up <= cfg.vfov_down {
        return Err(Error::config("vfov_up", "must exceed vfov_down"));
    }
    finite("alpha", cfg.alpha)?;
    finite("beta", cfg.beta)?;
    if cfg.alpha < 0.0 {
        return Err(Error::config("alpha", "must be non-negative"));
    }
    if cfg.beta < 0.0 {
        return Err(Error::config("beta", "must be non-negative"));
    }
    if cfg.alpha + cfg.beta <= 0.0 {
        return Err(Error::config("alpha/beta", "alpha + beta must be positive"));
    }
    finite("lambda_sem", cfg.lambda_sem)?;
    if cfg.lambda_sem < 0.0 {
        return Err(Error::config("lambda_sem", "must be non-negative"));
    }
    finite("margin", cfg.margin)?;
    if cfg.margin < 0.0 {
        return Err(Error::config("margin", "must be non-negative"));
    }
    if !(cfg.temperature > 0.0 && cfg.temperature.is_finite()) {
        return Err(Error::config("temperature", "must be positive"));
    }
    if !(cfg.match_threshold_m >= 0.0 && cfg.match_threshold_m.is_finite()) {
        return Err(Error::config("match_threshold_m", "must be non-negative"));
    }
    if !(cfg.max_range_m > 0.0 && cfg.max_range_m.is_finite()) {
        return Err(Error::config("max_range_m", "must be positive"));
    }
    if cfg.clusters == 0 {
        return Err(Error::config("clusters", "must be positive"));
    }
    if !(cfg.frustum_deg > 0.0 && cfg.frustum_deg <= 360.0) {
        return Err(Error::config("frustum_deg", "must be in (0, 360]"));
    }
    if cfg.batch_size == 0 {
        return Err(Error::config("batch_size", "must be positive"));
    }
    if !(cfg.learning_rate >= 0.0 && cfg.learning_rate.is_finite()) {
        return Err(Error::config("learning_rate", "must be non-negative"));
    }
    Ok(cfg)
}
