//! Request and response bodies of the HTTP interface.

use serde::{Deserialize, Serialize};

pub const MAX_COUNT: usize = 16;
pub const GRID_SIDE: std::ops::RangeInclusive<usize> = 2..=16;
pub const MAX_STEPS: usize = 64;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub checkpoint_id: Option<String>,
    pub backbone_id: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateRequest {
    pub prompt: String,
    /// Drawn by the server and returned when absent.
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default = "one")]
    pub count: usize,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateResponse {
    pub checkpoint_id: String,
    pub seed: u64,
    pub anchor_id: String,
    /// Base-64 PNG images.
    pub images: Vec<String>,
    /// Cosine similarity between each image and the prompt.
    pub similarities: Vec<f64>,
}

/// A grid corner: a prompt to encode or a previously returned anchor id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Corner {
    Prompt { prompt: String },
    Anchor { anchor: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridRequest {
    /// Ordered top-left, top-right, bottom-left, bottom-right.
    pub corners: [Corner; 4],
    pub rows: usize,
    pub cols: usize,
    #[serde(default)]
    pub seed: Option<u64>,
    /// Use one noise vector for every cell.
    #[serde(default = "yes")]
    pub share_noise: bool,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub row: usize,
    pub col: usize,
    /// Blend weight toward the right-hand corners.
    pub u: f64,
    /// Blend weight toward the bottom corners.
    pub v: f64,
    pub anchor_id: String,
    pub image: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridResponse {
    pub checkpoint_id: String,
    pub seed: u64,
    pub rows: usize,
    pub cols: usize,
    pub corner_anchor_ids: [String; 4],
    /// Row-major.
    pub cells: Vec<GridCell>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InterpolateRequest {
    pub prompt_a: String,
    pub prompt_b: String,
    pub steps: usize,
    #[serde(default)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    /// Blend weight toward `prompt_b`.
    pub t: f64,
    pub anchor_id: String,
    pub image: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterpolateResponse {
    pub checkpoint_id: String,
    pub seed: u64,
    pub frames: Vec<Frame>,
}
