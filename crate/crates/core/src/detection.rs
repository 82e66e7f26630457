//! Detection records shared by every method, and the JSON report schema.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::loss::LossBreakdown;
use crate::param::PoseParams;

/// Version tag written into every report.
pub const SCHEMA_VERSION: &str = "1.0";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "baseline")]
    Baseline,
    #[serde(rename = "neural")]
    Neural,
    #[serde(rename = "neural+sharpen")]
    NeuralSharpen,
    #[serde(rename = "gridsearch")]
    GridSearch,
}

impl Method {
    pub const ALL: [Method; 4] = [
        Method::Baseline,
        Method::Neural,
        Method::NeuralSharpen,
        Method::GridSearch,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Baseline => "baseline",
            Method::Neural => "neural",
            Method::NeuralSharpen => "neural+sharpen",
            Method::GridSearch => "gridsearch",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "baseline" => Ok(Method::Baseline),
            "neural" => Ok(Method::Neural),
            "neural+sharpen" | "neural-sharpen" => Ok(Method::NeuralSharpen),
            "gridsearch" | "grid-search" => Ok(Method::GridSearch),
            other => Err(Error::InvalidConfig(format!("unknown method '{other}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SideDetection {
    pub pose: PoseParams,
    pub loss: f64,
    pub negated: bool,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DetectionStats {
    /// Number of optimization starts (or candidate placements).
    pub inits: usize,
    /// Objective evaluations.
    pub evals: usize,
    pub wall_ms: u64,
}

/// Per-side poses and losses produced by one method on one image pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub method: Method,
    pub left: SideDetection,
    pub right: SideDetection,
    pub l_reg: f64,
    pub total: f64,
    pub stats: DetectionStats,
}

impl Detection {
    pub fn new(
        method: Method,
        pose_left: PoseParams,
        pose_right: PoseParams,
        loss: &LossBreakdown,
        stats: DetectionStats,
    ) -> Self {
        Detection {
            method,
            left: SideDetection {
                pose: pose_left,
                loss: loss.l_left,
                negated: loss.negated_left,
            },
            right: SideDetection {
                pose: pose_right,
                loss: loss.l_right,
                negated: loss.negated_right,
            },
            l_reg: loss.l_reg,
            total: loss.total,
            stats,
        }
    }

    /// `l_left + l_right`.
    pub fn sides_loss(&self) -> f64 {
        self.left.loss + self.right.loss
    }
}

/// A quadrilateral in original-image pixel coordinates `[x, y]`, corners in
/// the order top-left, top-right, bottom-right, bottom-left of the template
/// frame.
pub type PixelQuad = [[f64; 2]; 4];

/// The on-disk detection document.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionReport {
    pub spec_version: String,
    pub method: Method,
    pub template_hash: String,
    pub left: SideDetection,
    pub right: SideDetection,
    pub l_reg: f64,
    pub total: f64,
    /// Left side first, then right.
    pub original_frame_boxes: [PixelQuad; 2],
    pub stats: DetectionStats,
}

impl DetectionReport {
    pub fn new(det: &Detection, template_hash: String, boxes: [PixelQuad; 2]) -> Self {
        DetectionReport {
            spec_version: SCHEMA_VERSION.to_string(),
            method: det.method,
            template_hash,
            left: det.left,
            right: det.right,
            l_reg: det.l_reg,
            total: det.total,
            original_frame_boxes: boxes,
            stats: det.stats,
        }
    }
}
