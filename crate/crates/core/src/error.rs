use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("label map invariant violated: {0}")]
    InvariantViolation(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("invalid counts: intersection {intersection}, areas {gt_area}/{pred_area}")]
    InvalidCounts {
        intersection: u64,
        gt_area: u64,
        pred_area: u64,
    },
    #[error("empty mask")]
    EmptyMask,
    #[error("empty dataset: {0}")]
    EmptyDataset(String),
    #[error("metric undefined: {0}")]
    Undefined(String),
    #[error("png codec error: {0}")]
    Codec(String),
    #[error("unsupported channel layout: {0}")]
    Channel(String),
    #[error("segment id {0} does not fit in 24 bits")]
    IdOverflow(u32),
    #[error("missing file {}", .0.display())]
    MissingFile(PathBuf),
    #[error("image {image_id}: segment id {segment_id} present in PNG but not in segments_info")]
    UnknownSegmentId { image_id: String, segment_id: u32 },
    #[error("category {0} is not listed in categories")]
    CategoryMissing(u32),
    #[error("class value {0} has no category mapping")]
    UnmappedCategory(u32),
    #[error("image {0} is not listed in the manifest")]
    MissingImage(String),
    #[error("image sets differ: {0}")]
    ImageSetMismatch(String),
    #[error("frame {width}x{height} exceeds the oracle limit of {limit}x{limit}")]
    FrameTooLarge {
        width: usize,
        height: usize,
        limit: usize,
    },
    #[error("infeasible scene spec: {0}")]
    InfeasibleSpec(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}
