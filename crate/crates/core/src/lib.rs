//! Panoptic segmentation evaluation: the Panoptic Quality family (PQ/SQ/RQ,
//! mPQ+, bPQ, iPQ, wPQ, fwPQ) plus multiclass count R², over COCO panoptic
//! annotations.
//!
//! The pipeline is `panoptic_io` (decode) → `segmap` (validated label maps) →
//! `matching` (contingency histogram, unique IoU > 0.5 matching, void rule) →
//! `boundary` (bands, boundary IoU, weighted IoU) → `metrics` (aggregation).
//! `synth` builds seeded fixtures and `oracle` re-derives every number by brute
//! force for verification.

pub mod boundary;
mod error;
pub mod matching;
pub mod metrics;
#[doc(hidden)]
pub mod oracle;
pub mod panoptic_io;
pub mod report;
pub mod segmap;
pub mod synth;

pub use error::{Error, Result};
pub use metrics::{AggregateConvention, DenominatorConvention, MetricConfig};
pub use report::MetricReport;
pub use segmap::{LabelMap, PanopticAnnotation, SegmentRecord};
