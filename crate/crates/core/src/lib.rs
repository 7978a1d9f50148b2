//! Post-processing for crowd detectors.
//!
//! Raw detector outputs (boxes and, for two-stage detectors, proposals) are
//! compressed into small spatial matrices and value histograms. A compact
//! network reads those to predict one NMS threshold per image region and the
//! crowd count directly; the final boxes are the highest-confidence survivors
//! of region-adaptive NMS, truncated to the predicted count.
//!
//! The crate also ships a synthetic crowd/detector simulator and the
//! evaluation metrics used to validate the whole pipeline end to end.

pub mod compress;
pub mod config;
pub mod error;
pub mod geometry;
pub mod metrics;
pub mod net;
pub mod nms;
pub mod pipeline;
pub mod rng;
pub mod scene;
pub mod select;
pub mod synth;

pub use error::{Error, Result};
pub use geometry::{iou, sigmoid, Detection, Point, PseudoBox};
pub use scene::{load_scenes, save_scenes, DetectorOutput, SceneRecord};
