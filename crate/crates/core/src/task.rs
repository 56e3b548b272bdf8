//! Task kinds, geometry profiles and per-step vocabulary schedules.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Result, UliError};

/// Labels per side of one dense target (4×4 = 16 decode steps).
pub const DENSE_SIDE: usize = 4;
/// Semantic annotations are supervised at 1/4 of the input resolution.
pub const SEMSEG_DOWNSAMPLE: usize = 4;
/// Pixel side of the region owned by one semantic-segmentation grid point.
pub const SEMSEG_CELL: usize = DENSE_SIDE * SEMSEG_DOWNSAMPLE;
/// Polar rays per instance mask.
pub const RAYS: usize = 24;
/// Fixed caption length including terminator padding.
pub const CAPTION_LEN: usize = 20;
/// Instruction segments are truncated to this many tokens.
pub const MAX_INSTRUCTION: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    #[serde(rename = "det")]
    Detection,
    #[serde(rename = "insseg")]
    InstanceSeg,
    #[serde(rename = "semseg")]
    SemanticSeg,
    Caption,
    Grounding,
}

impl TaskKind {
    pub const ALL: [TaskKind; 5] =
        [TaskKind::Detection, TaskKind::InstanceSeg, TaskKind::SemanticSeg, TaskKind::Caption, TaskKind::Grounding];

    /// Text of the task identifier prompt.
    pub fn prompt(self) -> &'static str {
        match self {
            TaskKind::Detection => "object detection",
            TaskKind::InstanceSeg => "instance segmentation",
            TaskKind::SemanticSeg => "semantic segmentation",
            TaskKind::Caption => "image captioning",
            TaskKind::Grounding => "visual grounding",
        }
    }

    pub fn short(self) -> &'static str {
        match self {
            TaskKind::Detection => "det",
            TaskKind::InstanceSeg => "insseg",
            TaskKind::SemanticSeg => "semseg",
            TaskKind::Caption => "caption",
            TaskKind::Grounding => "grounding",
        }
    }

    /// Fixed response length per track.
    pub fn decode_steps(self) -> usize {
        match self {
            TaskKind::Detection => 5,
            TaskKind::InstanceSeg => 1 + 4 + 2 + RAYS,
            TaskKind::SemanticSeg => DENSE_SIDE * DENSE_SIDE,
            TaskKind::Caption => CAPTION_LEN,
            TaskKind::Grounding => 4,
        }
    }

    /// Object- and pixel-level tasks run many grid-anchored tracks.
    pub fn is_grid(self) -> bool {
        matches!(self, TaskKind::Detection | TaskKind::InstanceSeg | TaskKind::SemanticSeg)
    }

    pub fn is_sparse(self) -> bool {
        matches!(self, TaskKind::Detection | TaskKind::InstanceSeg)
    }

    pub fn has_instruction(self) -> bool {
        matches!(self, TaskKind::Grounding)
    }

    pub fn index(self) -> usize {
        Self::ALL.iter().position(|&t| t == self).unwrap()
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.short())
    }
}

impl FromStr for TaskKind {
    type Err = UliError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "det" | "detection" => Ok(TaskKind::Detection),
            "insseg" | "instance" => Ok(TaskKind::InstanceSeg),
            "semseg" | "semantic" => Ok(TaskKind::SemanticSeg),
            "caption" | "captioning" => Ok(TaskKind::Caption),
            "grounding" | "ground" => Ok(TaskKind::Grounding),
            other => Err(UliError::Config(format!("unknown task {other:?}"))),
        }
    }
}

/// Vocabulary slice a decode step draws from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepSlice {
    /// Subword table plus terminator.
    Text,
    /// Category concepts plus background.
    Classes,
    /// Offsets from the grid point over `[-R, R]`.
    SignedCoord,
    /// Absolute positions or lengths over `[0, R]`.
    UnsignedCoord,
}

/// Geometry shared by every task under one profile.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Profile {
    pub name: String,
    pub patch: usize,
    /// Window side in patches.
    pub window: usize,
    /// Grid points per window side for detection / instance segmentation.
    pub points_per_window_side: usize,
    pub object_resolution: usize,
    pub semseg_resolution: usize,
    pub image_level_resolution: usize,
}

impl Profile {
    pub fn desk() -> Self {
        Self {
            name: "desk".into(),
            patch: 8,
            window: 4,
            points_per_window_side: 2,
            object_resolution: 64,
            semseg_resolution: 64,
            image_level_resolution: 32,
        }
    }

    pub fn paper() -> Self {
        Self {
            name: "paper".into(),
            patch: 16,
            window: 14,
            points_per_window_side: 5,
            object_resolution: 1120,
            semseg_resolution: 672,
            image_level_resolution: 224,
        }
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "paper" => Ok(Self::paper()),
            other => Err(UliError::Config(format!("unknown profile {other:?}"))),
        }
    }

    pub fn resolution(&self, kind: TaskKind) -> usize {
        match kind {
            TaskKind::Detection | TaskKind::InstanceSeg => self.object_resolution,
            TaskKind::SemanticSeg => self.semseg_resolution,
            TaskKind::Caption | TaskKind::Grounding => self.image_level_resolution,
        }
    }

    pub fn max_resolution(&self) -> usize {
        self.object_resolution.max(self.semseg_resolution).max(self.image_level_resolution)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskSpec {
    pub kind: TaskKind,
    /// Square input side in pixels.
    pub resolution: usize,
    pub patch: usize,
    pub window: usize,
    pub points_per_window_side: usize,
    pub schedule: Vec<StepSlice>,
}

impl TaskSpec {
    pub fn new(kind: TaskKind, profile: &Profile) -> Self {
        Self::with_resolution(kind, profile, profile.resolution(kind))
    }

    pub fn with_resolution(kind: TaskKind, profile: &Profile, resolution: usize) -> Self {
        use StepSlice::*;
        let schedule = match kind {
            TaskKind::Detection => vec![Classes, SignedCoord, SignedCoord, SignedCoord, SignedCoord],
            TaskKind::InstanceSeg => {
                let mut s = vec![Classes];
                s.extend([SignedCoord; 6]);
                s.extend([UnsignedCoord; RAYS]);
                s
            }
            TaskKind::SemanticSeg => vec![Classes; DENSE_SIDE * DENSE_SIDE],
            TaskKind::Caption => vec![Text; CAPTION_LEN],
            TaskKind::Grounding => vec![UnsignedCoord; 4],
        };
        debug_assert_eq!(schedule.len(), kind.decode_steps());
        Self {
            kind,
            resolution,
            patch: profile.patch,
            window: profile.window,
            points_per_window_side: profile.points_per_window_side,
            schedule,
        }
    }

    pub fn steps(&self) -> usize {
        self.schedule.len()
    }

    /// Coordinate bin count: twice the input resolution.
    pub fn coord_bins(&self) -> usize {
        2 * self.resolution
    }

    pub fn patch_grid(&self) -> usize {
        self.resolution / self.patch
    }

    /// Value range `(lo, hi)` of a coordinate step.
    pub fn coord_range(&self, slice: StepSlice) -> Option<(f64, f64)> {
        let r = self.resolution as f64;
        match slice {
            StepSlice::SignedCoord => Some((-r, r)),
            StepSlice::UnsignedCoord => Some((0.0, r)),
            _ => None,
        }
    }
}
