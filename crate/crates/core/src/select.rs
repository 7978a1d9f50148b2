//! Decouple-then-align box selection: the count decoder decides how many
//! boxes survive, confidence decides which.

use serde::{Deserialize, Serialize};

use crate::geometry::Detection;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    /// Final boxes, by descending score.
    pub boxes: Vec<Detection>,
    /// Boxes left after NMS.
    pub n_c: usize,
    /// Raw count decoder output.
    pub n_hat: f64,
    /// `min(round(n_hat), n_c)`.
    pub n_final: usize,
}

/// Rounds half up; negative and non-finite inputs count as zero.
pub fn round_count(n_hat: f64) -> usize {
    if n_hat.is_finite() && n_hat > 0.0 {
        (n_hat + 0.5).floor() as usize
    } else {
        0
    }
}

pub fn decouple_then_align(nms_boxes: &[Detection], n_hat: f64) -> SelectionResult {
    let n_c = nms_boxes.len();
    let n_final = round_count(n_hat).min(n_c);
    let mut boxes = nms_boxes.to_vec();
    boxes.sort_by(|a, b| b.score.total_cmp(&a.score));
    boxes.truncate(n_final);
    SelectionResult {
        boxes,
        n_c,
        n_hat,
        n_final,
    }
}
