//! Counting, localization and detection metrics.
//!
//! Localization uses a maximum-cardinality matching on the boolean
//! "close enough" graph between predictions and ground truth, found with the
//! Hungarian (Kuhn) augmenting-path method.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou, Detection, Point, PseudoBox};

#[derive(Debug, Clone, PartialEq)]
pub struct CountReport {
    pub mae: f64,
    pub rmse: f64,
    /// Signed `pred - gt` per scene.
    pub per_scene_errors: Vec<f64>,
}

pub fn count_metrics(preds: &[f64], gts: &[usize]) -> Result<CountReport> {
    if preds.len() != gts.len() {
        return Err(Error::Invalid(format!(
            "count_metrics: {} predictions for {} ground-truth counts",
            preds.len(),
            gts.len()
        )));
    }
    if preds.is_empty() {
        return Err(Error::Invalid("count_metrics: no scenes".into()));
    }
    let errors: Vec<f64> = preds.iter().zip(gts).map(|(p, g)| p - *g as f64).collect();
    let n = errors.len() as f64;
    let mae = errors.iter().map(|e| e.abs()).sum::<f64>() / n;
    let rmse = (errors.iter().map(|e| e * e).sum::<f64>() / n).sqrt();
    Ok(CountReport {
        mae,
        rmse,
        per_scene_errors: errors,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LocReport {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl LocReport {
    /// Precision and recall are 0 when their denominator is 0; F1 is 0 when
    /// `P + R = 0`.
    pub fn from_counts(tp: usize, fp: usize, fn_: usize) -> Self {
        let ratio = |num: usize, den: usize| {
            if den == 0 {
                0.0
            } else {
                num as f64 / den as f64
            }
        };
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        Self {
            tp,
            fp,
            fn_,
            precision,
            recall,
            f1,
        }
    }

    pub fn merge(&self, other: &LocReport) -> LocReport {
        LocReport::from_counts(self.tp + other.tp, self.fp + other.fp, self.fn_ + other.fn_)
    }
}

/// Radius used to decide whether a prediction lands on a ground-truth point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceThreshold {
    /// Fixed radius in pixels.
    Pixels(f64),
    /// Multiple of the ground-truth pseudo-box side.
    PseudoSide(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MatchCriterion {
    /// Centers closer than the threshold (strictly).
    Distance { sigma: DistanceThreshold },
    /// Box overlap with the ground-truth pseudo box at least `iou_thresh`.
    Box { iou_thresh: f64 },
}

impl Default for MatchCriterion {
    fn default() -> Self {
        MatchCriterion::Distance {
            sigma: DistanceThreshold::PseudoSide(0.5),
        }
    }
}

impl MatchCriterion {
    pub fn pixels(sigma: f64) -> Self {
        MatchCriterion::Distance {
            sigma: DistanceThreshold::Pixels(sigma),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            MatchCriterion::Distance {
                sigma: DistanceThreshold::Pixels(s) | DistanceThreshold::PseudoSide(s),
            } => s > 0.0 && s.is_finite(),
            MatchCriterion::Box { iou_thresh } => iou_thresh > 0.0 && iou_thresh < 1.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid match criterion {self:?}")))
        }
    }

    pub fn matches(&self, pred: &Detection, gt: &PseudoBox) -> bool {
        match *self {
            MatchCriterion::Distance { sigma } => {
                let radius = match sigma {
                    DistanceThreshold::Pixels(s) => s,
                    DistanceThreshold::PseudoSide(f) => f * gt.side(),
                };
                pred.center().distance(&gt.center()) < radius
            }
            MatchCriterion::Box { iou_thresh } => iou(pred, gt) >= iou_thresh,
        }
    }
}

/// Maximum-cardinality bipartite matching. `adjacency[l]` lists the right
/// vertices `l` may pair with. Returns, per left vertex, its partner.
pub fn max_bipartite_matching(adjacency: &[Vec<usize>], n_right: usize) -> Vec<Option<usize>> {
    let mut right_of_left: Vec<Option<usize>> = vec![None; adjacency.len()];
    let mut left_of_right: Vec<Option<usize>> = vec![None; n_right];
    let mut visited = vec![usize::MAX; n_right];

    for root in 0..adjacency.len() {
        // Iterative DFS for an augmenting path starting at `root`.
        let mut stack: Vec<(usize, usize)> = vec![(root, 0)];
        let mut via: Vec<usize> = Vec::new();
        let mut found = false;
        while let Some(&mut (left, ref mut next)) = stack.last_mut() {
            if *next >= adjacency[left].len() {
                stack.pop();
                via.pop();
                continue;
            }
            let right = adjacency[left][*next];
            *next += 1;
            if visited[right] == root {
                continue;
            }
            visited[right] = root;
            via.push(right);
            match left_of_right[right] {
                None => {
                    found = true;
                    break;
                }
                Some(owner) => stack.push((owner, 0)),
            }
        }
        if found {
            // stack[i].0 gets paired with via[i]
            for (&(left, _), &right) in stack.iter().zip(&via) {
                right_of_left[left] = Some(right);
                left_of_right[right] = Some(left);
            }
        }
    }
    right_of_left
}

fn report_from_adjacency(adjacency: &[Vec<usize>], n_gt: usize) -> LocReport {
    let matched = max_bipartite_matching(adjacency, n_gt)
        .iter()
        .filter(|m| m.is_some())
        .count();
    LocReport::from_counts(matched, adjacency.len() - matched, n_gt - matched)
}

/// Matches predicted boxes against ground-truth pseudo boxes.
pub fn match_hungarian(
    preds: &[Detection],
    gts: &[PseudoBox],
    criterion: &MatchCriterion,
) -> LocReport {
    let adjacency: Vec<Vec<usize>> = preds
        .iter()
        .map(|p| {
            gts.iter()
                .enumerate()
                .filter(|(_, g)| criterion.matches(p, g))
                .map(|(j, _)| j)
                .collect()
        })
        .collect();
    report_from_adjacency(&adjacency, gts.len())
}

/// Matches predicted points against ground-truth points within `sigma` pixels.
pub fn match_points(preds: &[Point], gts: &[Point], sigma: f64) -> LocReport {
    let adjacency: Vec<Vec<usize>> = preds
        .iter()
        .map(|p| {
            gts.iter()
                .enumerate()
                .filter(|(_, g)| p.distance(g) < sigma)
                .map(|(j, _)| j)
                .collect()
        })
        .collect();
    report_from_adjacency(&adjacency, gts.len())
}

/// Precision, recall and F1 averaged over a sweep of distance thresholds.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LocSummary {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Averages pooled localization metrics over the integer distance thresholds
/// `1..=100` pixels. Counts are pooled over scenes at each threshold first.
pub fn eval_localization_qnrf(scenes: &[(Vec<Point>, Vec<Point>)]) -> LocSummary {
    localization_sweep(scenes, &(1..=100).map(f64::from).collect::<Vec<_>>())
}

pub fn localization_sweep(scenes: &[(Vec<Point>, Vec<Point>)], thresholds: &[f64]) -> LocSummary {
    let per_threshold = localization_curve(scenes, thresholds);
    let n = per_threshold.len().max(1) as f64;
    let mean = |f: fn(&LocReport) -> f64| per_threshold.iter().map(f).sum::<f64>() / n;
    LocSummary {
        precision: mean(|r| r.precision),
        recall: mean(|r| r.recall),
        f1: mean(|r| r.f1),
    }
}

pub fn localization_curve(
    scenes: &[(Vec<Point>, Vec<Point>)],
    thresholds: &[f64],
) -> Vec<LocReport> {
    thresholds
        .iter()
        .map(|&t| {
            scenes
                .iter()
                .map(|(p, g)| match_points(p, g, t))
                .fold(LocReport::default(), |acc, r| acc.merge(&r))
        })
        .collect()
}

/// Predictions and ground truth of one image for AP.
#[derive(Debug, Clone, Copy)]
pub struct ApScene<'a> {
    pub preds: &'a [Detection],
    pub gts: &'a [PseudoBox],
}

/// Dataset-level average precision at an IoU threshold, using the
/// all-point interpolated precision envelope.
pub fn average_precision(scenes: &[ApScene<'_>], iou_thresh: f64) -> Result<f64> {
    let total_gt: usize = scenes.iter().map(|s| s.gts.len()).sum();
    if total_gt == 0 {
        return Err(Error::Invalid(
            "average precision is undefined without ground-truth boxes".into(),
        ));
    }
    let mut order: Vec<(usize, usize)> = scenes
        .iter()
        .enumerate()
        .flat_map(|(s, scene)| (0..scene.preds.len()).map(move |k| (s, k)))
        .collect();
    // stable: ties keep (scene, index) order
    order.sort_by(|a, b| {
        let sa = scenes[a.0].preds[a.1].score;
        let sb = scenes[b.0].preds[b.1].score;
        sb.total_cmp(&sa)
    });

    let mut taken: Vec<Vec<bool>> = scenes.iter().map(|s| vec![false; s.gts.len()]).collect();
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut recalls = Vec::with_capacity(order.len());
    let mut precisions = Vec::with_capacity(order.len());
    for (s, k) in order {
        let pred = &scenes[s].preds[k];
        let best = scenes[s]
            .gts
            .iter()
            .enumerate()
            .filter(|(j, _)| !taken[s][*j])
            .map(|(j, g)| (j, iou(pred, g)))
            .filter(|(_, v)| *v >= iou_thresh)
            .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)));
        match best {
            Some((j, _)) => {
                taken[s][j] = true;
                tp += 1;
            }
            None => fp += 1,
        }
        recalls.push(tp as f64 / total_gt as f64);
        precisions.push(tp as f64 / (tp + fp) as f64);
    }
    Ok(interpolated_area(&recalls, &precisions))
}

/// Area under the precision envelope of a PR curve given in ranking order.
pub fn interpolated_area(recalls: &[f64], precisions: &[f64]) -> f64 {
    let mut mrec = Vec::with_capacity(recalls.len() + 2);
    let mut mpre = Vec::with_capacity(precisions.len() + 2);
    mrec.push(0.0);
    mpre.push(0.0);
    mrec.extend_from_slice(recalls);
    mpre.extend_from_slice(precisions);
    mrec.push(1.0);
    mpre.push(0.0);
    for i in (0..mpre.len() - 1).rev() {
        mpre[i] = mpre[i].max(mpre[i + 1]);
    }
    (1..mrec.len())
        .filter(|&i| mrec[i] != mrec[i - 1])
        .map(|i| (mrec[i] - mrec[i - 1]) * mpre[i])
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pb(x: f64, y: f64, side: f64) -> PseudoBox {
        PseudoBox::square(Point::new(x, y), side)
    }

    fn d(x: f64, y: f64, side: f64, score: f64) -> Detection {
        Detection::new(x, y, side, side, score)
    }

    #[test]
    fn exact_counts_have_zero_error() {
        let r = count_metrics(&[3.0, 4.0, 0.0], &[3, 4, 0]).unwrap();
        assert_eq!((r.mae, r.rmse), (0.0, 0.0));
    }

    #[test]
    fn two_term_count_errors() {
        let r = count_metrics(&[3.0, 5.0], &[1, 5]).unwrap();
        assert_eq!(r.mae, 1.0);
        assert_eq!(r.rmse, 2f64.sqrt());
        assert_eq!(r.per_scene_errors, vec![2.0, 0.0]);
    }

    #[test]
    fn count_length_mismatch_is_an_error() {
        assert!(count_metrics(&[1.0], &[1, 2]).is_err());
        assert!(count_metrics(&[], &[]).is_err());
    }

    #[test]
    fn identical_point_sets_match_perfectly() {
        let pts = vec![
            Point::new(1.0, 2.0),
            Point::new(30.0, 4.0),
            Point::new(9.0, 9.0),
        ];
        let r = match_points(&pts, &pts, 0.5);
        assert_eq!((r.precision, r.recall, r.f1), (1.0, 1.0, 1.0));
    }

    #[test]
    fn single_feasible_edge() {
        let preds = [Point::new(0.0, 0.0), Point::new(10.0, 10.0)];
        let gts = [Point::new(0.0, 1.0), Point::new(50.0, 50.0)];
        let r = match_points(&preds, &gts, 5.0);
        assert_eq!((r.tp, r.fp, r.fn_), (1, 1, 1));
        assert_eq!(r.f1, 0.5);
    }

    #[test]
    fn augmenting_path_reassigns() {
        // Greedy would pair left 0 with right 0 and strand left 1.
        let adj = vec![vec![0, 1], vec![0]];
        let m = max_bipartite_matching(&adj, 2);
        assert_eq!(m, vec![Some(1), Some(0)]);
    }

    #[test]
    fn box_criterion_uses_iou() {
        let crit = MatchCriterion::Box { iou_thresh: 0.5 };
        let r = match_hungarian(&[d(5.0, 5.0, 10.0, 0.0)], &[pb(10.0, 5.0, 10.0)], &crit);
        assert_eq!(r.tp, 0);
        let r = match_hungarian(&[d(6.0, 5.0, 10.0, 0.0)], &[pb(5.0, 5.0, 10.0)], &crit);
        assert_eq!(r.tp, 1);
    }

    #[test]
    fn pseudo_side_radius() {
        let crit = MatchCriterion::default();
        let gt = [pb(0.0, 0.0, 10.0)];
        assert_eq!(match_hungarian(&[d(4.9, 0.0, 1.0, 0.0)], &gt, &crit).tp, 1);
        assert_eq!(match_hungarian(&[d(5.0, 0.0, 1.0, 0.0)], &gt, &crit).tp, 0);
    }

    #[test]
    fn qnrf_sweep_trivial_cases() {
        let pts = vec![Point::new(1.0, 2.0), Point::new(300.0, 4.0)];
        let s = eval_localization_qnrf(&[(pts.clone(), pts.clone())]);
        assert_eq!((s.precision, s.recall, s.f1), (1.0, 1.0, 1.0));
        let s = eval_localization_qnrf(&[(vec![], pts)]);
        assert_eq!((s.precision, s.recall, s.f1), (0.0, 0.0, 0.0));
    }

    #[test]
    fn ap_single_exact_hit() {
        let preds = [d(5.0, 5.0, 10.0, 1.0)];
        let gts = [pb(5.0, 5.0, 10.0)];
        let ap = average_precision(
            &[ApScene {
                preds: &preds,
                gts: &gts,
            }],
            0.5,
        )
        .unwrap();
        assert_eq!(ap, 1.0);
    }

    #[test]
    fn ap_trailing_false_positive_keeps_full_area() {
        let preds = [d(5.0, 5.0, 10.0, 2.0), d(500.0, 500.0, 10.0, -1.0)];
        let gts = [pb(5.0, 5.0, 10.0)];
        let ap = average_precision(
            &[ApScene {
                preds: &preds,
                gts: &gts,
            }],
            0.5,
        )
        .unwrap();
        assert_eq!(ap, 1.0);
    }

    #[test]
    fn ap_all_misses_is_zero() {
        let preds = [d(100.0, 5.0, 10.0, 2.0), d(500.0, 500.0, 10.0, -1.0)];
        let gts = [pb(5.0, 5.0, 10.0)];
        let ap = average_precision(
            &[ApScene {
                preds: &preds,
                gts: &gts,
            }],
            0.5,
        )
        .unwrap();
        assert_eq!(ap, 0.0);
    }

    #[test]
    fn ap_leading_false_positive() {
        // PR points: (0, 0), (0.5, 0.5), (1, 2/3) -> envelope 2/3 everywhere.
        let preds = [
            d(500.0, 500.0, 10.0, 3.0),
            d(5.0, 5.0, 10.0, 2.0),
            d(50.0, 5.0, 10.0, 1.0),
        ];
        let gts = [pb(5.0, 5.0, 10.0), pb(50.0, 5.0, 10.0)];
        let ap = average_precision(
            &[ApScene {
                preds: &preds,
                gts: &gts,
            }],
            0.5,
        )
        .unwrap();
        assert!((ap - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn ap_without_ground_truth_is_an_error() {
        let preds = [d(5.0, 5.0, 10.0, 1.0)];
        assert!(average_precision(
            &[ApScene {
                preds: &preds,
                gts: &[]
            }],
            0.5
        )
        .is_err());
    }

    #[test]
    fn loc_report_degenerate() {
        let r = LocReport::from_counts(0, 0, 0);
        assert_eq!((r.precision, r.recall, r.f1), (0.0, 0.0, 0.0));
        let r = LocReport::from_counts(1, 1, 1);
        assert_eq!(r.f1, 0.5);
    }
}
