//! Greedy NMS, region-adaptive NMS and the per-region threshold search that
//! produces training labels for the NMS decoder.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{bin_index, iou, sigmoid, Detection, PseudoBox};
use crate::metrics::{match_hungarian, LocReport, MatchCriterion};
use crate::scene::SceneRecord;
use crate::synth::pseudo_boxes_from_points;

/// One NMS threshold per cell of a `k x k` grid, row-major (y-major) order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionThresholds {
    pub k: usize,
    pub values: Vec<f64>,
}

impl RegionThresholds {
    pub fn new(k: usize, values: Vec<f64>) -> Result<Self> {
        let t = Self { k, values };
        t.validate()?;
        Ok(t)
    }

    pub fn uniform(k: usize, value: f64) -> Self {
        Self {
            k,
            values: vec![value; k * k],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.values.len() != self.k * self.k {
            return Err(Error::Shape(format!(
                "{} thresholds for a {}x{} region grid",
                self.values.len(),
                self.k,
                self.k
            )));
        }
        if let Some(v) = self.values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Invalid(format!("NMS threshold {v} outside [0, 1]")));
        }
        Ok(())
    }
}

/// A `k x k` partition of an image into equal regions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegionGrid {
    pub width: f64,
    pub height: f64,
    pub k: usize,
}

impl RegionGrid {
    pub fn new(width: f64, height: f64, k: usize) -> Self {
        Self { width, height, k }
    }

    pub fn regions(&self) -> usize {
        self.k * self.k
    }

    /// `x-bin + k * y-bin`, far edges clamped into the last bin.
    pub fn region_of(&self, x: f64, y: f64) -> usize {
        bin_index(x, self.width, self.k) + self.k * bin_index(y, self.height, self.k)
    }
}

/// Classic greedy NMS.
///
/// Boxes with `sigmoid(score) < conf_floor` are dropped first. The rest are
/// visited by descending score (ties keep input order) and a box is kept iff
/// its IoU with every already-kept box is at most `threshold`.
pub fn nms_standard(dets: &[Detection], threshold: f64, conf_floor: f64) -> Vec<Detection> {
    let mut order = score_order(dets, conf_floor);
    let mut kept: Vec<Detection> = Vec::with_capacity(order.len());
    for idx in order.drain(..) {
        let cand = &dets[idx];
        if kept.iter().all(|k| iou(k, cand) <= threshold) {
            kept.push(*cand);
        }
    }
    kept
}

/// Indices of boxes passing the confidence floor, by descending score.
fn score_order(dets: &[Detection], conf_floor: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len())
        .filter(|&i| sigmoid(dets[i].score) >= conf_floor)
        .collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score));
    order
}

pub fn assign_regions(dets: &[Detection], width: f64, height: f64, k: usize) -> Vec<usize> {
    let grid = RegionGrid::new(width, height, k);
    dets.iter().map(|d| grid.region_of(d.cx, d.cy)).collect()
}

/// Runs [`nms_standard`] independently inside every region with that
/// region's threshold. Output is concatenated in region order.
pub fn nms_region_adaptive(
    dets: &[Detection],
    thresholds: &RegionThresholds,
    width: f64,
    height: f64,
    conf_floor: f64,
) -> Vec<Detection> {
    let k = thresholds.k;
    let regions = assign_regions(dets, width, height, k);
    let mut buckets: Vec<Vec<Detection>> = vec![Vec::new(); k * k];
    for (d, r) in dets.iter().zip(regions) {
        buckets[r].push(*d);
    }
    buckets
        .iter()
        .zip(&thresholds.values)
        .flat_map(|(bucket, &t)| nms_standard(bucket, t, conf_floor))
        .collect()
}

/// F1 of `dets` against ground truth, both restricted to one region.
/// Two empty sets score 1.
pub fn f1_region(
    dets: &[Detection],
    gts: &[PseudoBox],
    grid: &RegionGrid,
    region: usize,
    criterion: &MatchCriterion,
) -> f64 {
    let preds: Vec<Detection> = dets
        .iter()
        .filter(|d| grid.region_of(d.cx, d.cy) == region)
        .copied()
        .collect();
    let truth: Vec<PseudoBox> = gts
        .iter()
        .filter(|g| grid.region_of(g.cx, g.cy) == region)
        .copied()
        .collect();
    region_f1(&match_hungarian(&preds, &truth, criterion))
}

fn region_f1(r: &LocReport) -> f64 {
    if r.tp + r.fp + r.fn_ == 0 {
        1.0
    } else {
        r.f1
    }
}

/// `{0, s, 2s, ...}` up to and including 1 when `1/s` is integral.
pub fn threshold_grid(step: f64) -> Vec<f64> {
    let n = (1.0 / step + 1e-9).floor() as usize;
    (0..=n).map(|i| (i as f64 * step).min(1.0)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchConfig {
    pub k: usize,
    pub step: f64,
    pub conf_floor: f64,
    pub criterion: MatchCriterion,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            k: 4,
            step: 0.01,
            conf_floor: 0.3,
            criterion: MatchCriterion::default(),
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("nms: k must be >= 1".into()));
        }
        if !(self.step > 0.0 && self.step <= 1.0) {
            return Err(Error::Config("nms: step must lie in (0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.conf_floor) {
            return Err(Error::Config("nms: conf_floor must lie in [0, 1]".into()));
        }
        self.criterion.validate()
    }
}

/// Linear search for the per-region NMS threshold that maximizes region F1
/// against the scene's pseudo boxes. Ties go to the smallest threshold.
pub fn search_thresholds(scene: &SceneRecord, cfg: &SearchConfig) -> Result<RegionThresholds> {
    cfg.validate()?;
    let gts = pseudo_boxes_from_points(&scene.points, scene.width, scene.height);
    let (w, h) = scene.dims();
    let grid = RegionGrid::new(w, h, cfg.k);
    let thresholds = threshold_grid(cfg.step);

    let mut region_dets: Vec<Vec<Detection>> = vec![Vec::new(); grid.regions()];
    for d in &scene.boxes {
        region_dets[grid.region_of(d.cx, d.cy)].push(*d);
    }
    let mut region_gts: Vec<Vec<PseudoBox>> = vec![Vec::new(); grid.regions()];
    for g in gts {
        region_gts[grid.region_of(g.cx, g.cy)].push(g);
    }

    let values = region_dets
        .iter()
        .zip(&region_gts)
        .map(|(dets, gts)| search_region(dets, gts, &thresholds, cfg))
        .collect();
    RegionThresholds::new(cfg.k, values)
}

fn search_region(
    dets: &[Detection],
    gts: &[PseudoBox],
    thresholds: &[f64],
    cfg: &SearchConfig,
) -> f64 {
    let order = score_order(dets, cfg.conf_floor);
    let sorted: Vec<Detection> = order.iter().map(|&i| dets[i]).collect();
    let n = sorted.len();
    let mut overlap = vec![0.0; n * n];
    for a in 0..n {
        for b in 0..a {
            let v = iou(&sorted[a], &sorted[b]);
            overlap[a * n + b] = v;
            overlap[b * n + a] = v;
        }
    }

    let mut best = (f64::NEG_INFINITY, 0.0);
    let mut last_kept: Option<Vec<usize>> = None;
    let mut last_f1 = 0.0;
    for &t in thresholds {
        let mut kept: Vec<usize> = Vec::with_capacity(n);
        for cand in 0..n {
            if kept.iter().all(|&k| overlap[cand * n + k] <= t) {
                kept.push(cand);
            }
        }
        let f1 = if last_kept.as_ref() == Some(&kept) {
            last_f1
        } else {
            let preds: Vec<Detection> = kept.iter().map(|&i| sorted[i]).collect();
            region_f1(&match_hungarian(&preds, gts, &cfg.criterion))
        };
        if f1 > best.0 {
            best = (f1, t);
        }
        last_f1 = f1;
        last_kept = Some(kept);
    }
    best.1
}
