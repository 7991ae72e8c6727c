//! TOML configuration for the full pipeline: grid preset, module
//! hyperparameters, training schedule and ablation switches.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::voxel::VoxelGridSpec;

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("fade_epochs {fade} exceeds epochs {epochs}")]
    FadeTooLong { fade: usize, epochs: usize },
    #[error("unknown grid preset {0:?}")]
    UnknownGrid(String),
    #[error("{0}")]
    BadValue(String),
}

/// Which voxel grid the pipeline runs on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GridPreset {
    Kitti,
    Waymo,
    Desk,
}

impl GridPreset {
    pub fn spec(self) -> VoxelGridSpec {
        match self {
            GridPreset::Kitti => VoxelGridSpec::kitti(),
            GridPreset::Waymo => VoxelGridSpec::waymo(),
            GridPreset::Desk => VoxelGridSpec::desk(),
        }
    }

    pub fn parse(s: &str) -> Result<Self, ConfigError> {
        match s {
            "kitti" => Ok(GridPreset::Kitti),
            "waymo" => Ok(GridPreset::Waymo),
            "desk" => Ok(GridPreset::Desk),
            other => Err(ConfigError::UnknownGrid(other.to_string())),
        }
    }
}

/// Structural ablation switches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationFlags {
    /// Decorate points with 2D image features; off substitutes zeros.
    pub decoration: bool,
    /// Train the 2D backbone end to end; off freezes it.
    pub e2e: bool,
    /// Separate sparse streams for lidar and camera features; off runs one
    /// shared stream on the channel-concatenated voxel features.
    pub two_sparse_conv: bool,
    /// Initialize queries from heatmap local maxima; off takes dense top
    /// scores without the peak predicate.
    pub heatmap_init: bool,
    /// Append the one-hot class code to each query embedding.
    pub category_embedding: bool,
}

impl Default for AblationFlags {
    fn default() -> Self {
        Self {
            decoration: true,
            e2e: true,
            two_sparse_conv: true,
            heatmap_init: true,
            category_embedding: true,
        }
    }
}

/// Every tunable of the pipeline. Unknown keys in a config file are errors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub grid: GridPreset,
    /// Image feature channels out of the 2D backbone.
    pub c_img: usize,
    /// Image dimensions fed to the backbone; must be divisible by 4.
    pub image_h: usize,
    pub image_w: usize,
    /// Sparse backbone channel schedule: subm, strided, subm, strided.
    pub sparse_channels: [usize; 4],
    /// Number of object classes.
    pub k_classes: usize,
    /// Queries selected per class.
    pub n_queries: usize,
    /// Hidden width of the heatmap head.
    pub head_hidden: usize,
    /// Attention projection width.
    pub d_model: usize,
    /// Post-attention fully connected width.
    pub fc_out: usize,
    /// Dropout rate on the attention correlation matrix.
    pub dropout: f64,
    /// Regression loss weight in the total loss.
    pub reg_weight: f64,
    /// Query-to-GT matching radius in BEV cells.
    pub assign_radius: f64,
    /// Inference score cutoff.
    pub score_threshold: f64,
    /// BEV NMS IoU cutoff; 1.0 disables suppression.
    pub nms_iou: f64,
    /// Per-class evaluation IoU thresholds (vehicle 0.7, pedestrian 0.5).
    pub eval_iou_thresholds: Vec<f64>,
    /// Voxel occupancy cap; 0 means unlimited.
    pub max_points_per_voxel: usize,

    pub epochs: usize,
    pub lr_max: f64,
    pub weight_decay: f64,
    /// Cycled beta1 range for the one-cycle policy.
    pub momentum: [f64; 2],
    pub beta2: f64,
    /// GT-Paste is disabled for the final fade_epochs epochs.
    pub fade_epochs: usize,
    /// Maximum objects pasted per scene.
    pub gt_paste_max: usize,
    pub seed: u64,

    /// Scene generation: objects per scene and clutter point count.
    pub scene_objects: [usize; 2],
    pub scene_clutter: usize,

    pub ablation: AblationFlags,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            grid: GridPreset::Desk,
            c_img: 16,
            image_h: 64,
            image_w: 96,
            sparse_channels: [16, 32, 32, 64],
            k_classes: 2,
            n_queries: 8,
            head_hidden: 32,
            d_model: 32,
            fc_out: 192,
            dropout: 0.3,
            reg_weight: 2.0,
            assign_radius: 2.0,
            score_threshold: 0.3,
            nms_iou: 0.1,
            eval_iou_thresholds: vec![0.7, 0.5],
            max_points_per_voxel: 0,
            epochs: 20,
            lr_max: 2e-3,
            weight_decay: 0.01,
            momentum: [0.85, 0.95],
            beta2: 0.999,
            fade_epochs: 5,
            gt_paste_max: 3,
            seed: 0,
            scene_objects: [2, 4],
            scene_clutter: 200,
            ablation: AblationFlags::default(),
        }
    }
}

impl Config {
    /// KITTI-scale preset: full grid, wide channels, lr 2e-3.
    pub fn kitti() -> Self {
        Self {
            grid: GridPreset::Kitti,
            c_img: 64,
            image_h: 448,
            image_w: 800,
            lr_max: 2e-3,
            ..Self::default()
        }
    }

    /// Waymo-scale preset: lr 3e-3 per the larger-dataset schedule.
    pub fn waymo() -> Self {
        Self {
            grid: GridPreset::Waymo,
            c_img: 64,
            image_h: 448,
            image_w: 800,
            lr_max: 3e-3,
            ..Self::default()
        }
    }

    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: Config = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.fade_epochs > self.epochs {
            return Err(ConfigError::FadeTooLong {
                fade: self.fade_epochs,
                epochs: self.epochs,
            });
        }
        if self.image_h % 4 != 0 || self.image_w % 4 != 0 {
            return Err(ConfigError::BadValue(format!(
                "image dims {}x{} not divisible by 4",
                self.image_h, self.image_w
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ConfigError::BadValue(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        if self.k_classes == 0 {
            return Err(ConfigError::BadValue("k_classes must be positive".into()));
        }
        if self.momentum[0] > self.momentum[1] {
            return Err(ConfigError::BadValue(format!(
                "momentum range [{}, {}] inverted",
                self.momentum[0], self.momentum[1]
            )));
        }
        if self.scene_objects[0] > self.scene_objects[1] {
            return Err(ConfigError::BadValue("scene_objects range inverted".into()));
        }
        Ok(())
    }

    /// FNV-1a over the canonical TOML text; stored in checkpoints so stale
    /// weights cannot silently run under a different configuration.
    pub fn hash(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in self.to_toml().bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        h
    }

    pub fn spec(&self) -> VoxelGridSpec {
        self.grid.spec()
    }

    /// BEV grid dims after the two stride-2 stages.
    pub fn bev_dims(&self) -> (usize, usize, usize) {
        let d = self.spec().dims();
        (d[0].div_ceil(4), d[1].div_ceil(4), d[2].div_ceil(4))
    }

    /// BEV cell edge length in meters.
    pub fn bev_cell_size(&self) -> f64 {
        self.spec().voxel_size[0] * 4.0
    }

    /// BEV origin (x, y) in meters.
    pub fn bev_origin(&self) -> (f64, f64) {
        let r = self.spec().range;
        (r[0][0], r[1][0])
    }

    /// Channels of one flattened sparse stream.
    pub fn stream_bev_channels(&self) -> usize {
        let (_, _, nz) = self.bev_dims();
        nz * self.sparse_channels[3]
    }

    /// Channels of the fused BEV map the heads consume.
    pub fn fused_bev_channels(&self) -> usize {
        if self.ablation.two_sparse_conv {
            2 * self.stream_bev_channels()
        } else {
            self.stream_bev_channels()
        }
    }
}
