//! Synthetic crowd scenes and a simulated detector.
//!
//! Ground truth is a mixture of Gaussian clusters over a uniform background.
//! The simulated detector reproduces the behaviour real crowd detectors show:
//! boxes in dense areas are smaller, less confident and more often missed,
//! and every detection may come with overlapping duplicates.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Detection, Point, PseudoBox};
use crate::rng::{fnv1a, stream};
use crate::scene::SceneRecord;

/// Smallest pseudo-box side, in pixels.
pub const PSEUDO_MIN_SIDE: f64 = 4.0;

/// Minimum spacing enforced between generated heads, in pixels.
const MIN_SEPARATION: f64 = 3.0;
const PLACEMENT_TRIES: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub seed: u64,
    pub num_scenes: usize,
    pub width: u32,
    pub height: u32,
    /// Inclusive range of people per scene.
    pub count_range: (usize, usize),
    /// Inclusive range of Gaussian clusters per scene.
    pub cluster_count_range: (usize, usize),
    /// Clustered-to-background mass ratio. 0 gives a uniform crowd.
    pub density_gradient: f64,
    /// Detection probability for an isolated head.
    pub detector_recall_base: f64,
    /// Per-neighbour exponential decay of the detection probability.
    pub recall_density_slope: f64,
    /// Expected background false positives per true head.
    pub fp_rate: f64,
    /// Mean raw score of background false positives.
    pub fp_score_mean: f64,
    /// Log-normal std of box width/height relative to the pseudo box.
    pub size_noise: f64,
    /// Std of the center offset, as a fraction of the pseudo-box side.
    pub center_noise: f64,
    /// Std of the raw score around its density-dependent mean.
    pub score_noise: f64,
    /// Mean raw score of an isolated head.
    pub conf_base: f64,
    /// Raw-score drop per neighbour within the density radius.
    pub conf_density_slope: f64,
    /// Probability that a detected head also gets a duplicate box.
    pub duplicate_rate: f64,
    /// Max center shift of a duplicate, as a fraction of the box side.
    pub duplicate_shift: f64,
    /// Proposals emitted per box; only used when `two_stage` is set.
    pub proposal_multiplier: f64,
    pub two_stage: bool,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            num_scenes: 500,
            width: 512,
            height: 512,
            count_range: (10, 300),
            cluster_count_range: (1, 4),
            density_gradient: 3.0,
            detector_recall_base: 0.97,
            recall_density_slope: 0.002,
            fp_rate: 0.3,
            fp_score_mean: -0.5,
            size_noise: 0.15,
            center_noise: 0.08,
            score_noise: 0.6,
            conf_base: 2.0,
            conf_density_slope: 0.01,
            duplicate_rate: 0.5,
            duplicate_shift: 0.35,
            proposal_multiplier: 2.0,
            two_stage: true,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("synth: {m}")));
        if self.count_range.0 > self.count_range.1 {
            return bad(format!("empty count_range {:?}", self.count_range));
        }
        if self.cluster_count_range.0 > self.cluster_count_range.1 {
            return bad(format!(
                "empty cluster_count_range {:?}",
                self.cluster_count_range
            ));
        }
        if !(self.detector_recall_base > 0.0 && self.detector_recall_base <= 1.0) {
            return bad("detector_recall_base must lie in (0, 1]".into());
        }
        if !(0.0..=1.0).contains(&self.duplicate_rate) {
            return bad("duplicate_rate must lie in [0, 1]".into());
        }
        if self.proposal_multiplier < 1.0 {
            return bad("proposal_multiplier must be >= 1".into());
        }
        let non_negative = [
            ("density_gradient", self.density_gradient),
            ("recall_density_slope", self.recall_density_slope),
            ("fp_rate", self.fp_rate),
            ("size_noise", self.size_noise),
            ("center_noise", self.center_noise),
            ("score_noise", self.score_noise),
            ("conf_density_slope", self.conf_density_slope),
            ("duplicate_shift", self.duplicate_shift),
        ];
        for (name, v) in non_negative {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be finite and >= 0"));
            }
        }
        if self.width == 0 || self.height == 0 {
            return bad("width and height must be positive".into());
        }
        let capacity = (self.width as f64 / PSEUDO_MIN_SIDE).floor()
            * (self.height as f64 / PSEUDO_MIN_SIDE).floor();
        if self.count_range.1 as f64 > capacity {
            return bad(format!(
                "a {}x{} frame cannot hold {} people",
                self.width, self.height, self.count_range.1
            ));
        }
        Ok(())
    }

    pub fn max_pseudo_side(&self) -> f64 {
        max_pseudo_side(self.width, self.height)
    }
}

/// Largest pseudo-box side for a frame: `min(width, height) / 8`.
pub fn max_pseudo_side(width: u32, height: u32) -> f64 {
    width.min(height) as f64 / 8.0
}

pub fn scene_id(index: usize) -> String {
    format!("scene-{index:05}")
}

/// Draws ground-truth heads for `cfg.num_scenes` scenes.
pub fn generate_ground_truth(cfg: &SynthConfig) -> Result<Vec<SceneRecord>> {
    cfg.validate()?;
    Ok((0..cfg.num_scenes)
        .into_par_iter()
        .map(|index| generate_scene(cfg, index))
        .collect())
}

fn generate_scene(cfg: &SynthConfig, index: usize) -> SceneRecord {
    let mut rng = stream(cfg.seed, &[0, index as u64]);
    let (w, h) = (cfg.width as f64, cfg.height as f64);
    let n = rng.random_range(cfg.count_range.0..=cfg.count_range.1);
    let k = rng.random_range(cfg.cluster_count_range.0..=cfg.cluster_count_range.1);
    let short = w.min(h);
    let clusters: Vec<(Point, f64)> = (0..k)
        .map(|_| {
            let c = Point::new(
                rng.random_range(0.1 * w..=0.9 * w),
                rng.random_range(0.1 * h..=0.9 * h),
            );
            (c, short * rng.random_range(0.04..0.12))
        })
        .collect();
    let background = if clusters.is_empty() {
        1.0
    } else {
        1.0 / (1.0 + cfg.density_gradient)
    };

    let mut points: Vec<Point> = Vec::with_capacity(n);
    for _ in 0..n {
        let mut candidate = Point::new(0.0, 0.0);
        for _ in 0..PLACEMENT_TRIES {
            candidate = if rng.random::<f64>() < background {
                Point::new(rng.random_range(0.0..w), rng.random_range(0.0..h))
            } else {
                let (c, sd) = clusters[rng.random_range(0..clusters.len())];
                let dx: f64 = rng.sample(StandardNormal);
                let dy: f64 = rng.sample(StandardNormal);
                Point::new(c.x + dx * sd, c.y + dy * sd)
            };
            let inside = (0.0..=w).contains(&candidate.x) && (0.0..=h).contains(&candidate.y);
            if inside
                && points
                    .iter()
                    .all(|p| p.distance(&candidate) >= MIN_SEPARATION)
            {
                break;
            }
        }
        candidate.x = candidate.x.clamp(0.0, w);
        candidate.y = candidate.y.clamp(0.0, h);
        points.push(candidate);
    }

    let mut scene = SceneRecord::new(scene_id(index), cfg.width, cfg.height);
    scene.points = points;
    scene
}

/// Bounds used when sizing pseudo boxes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PseudoBoxRule {
    pub min_side: f64,
    pub max_side: f64,
}

impl PseudoBoxRule {
    pub fn for_frame(width: u32, height: u32) -> Self {
        Self {
            min_side: PSEUDO_MIN_SIDE,
            max_side: max_pseudo_side(width, height),
        }
    }
}

/// One square box per point with side equal to the nearest-neighbour distance,
/// clamped to `[4, min(width, height) / 8]`.
pub fn pseudo_boxes_from_points(points: &[Point], width: u32, height: u32) -> Vec<PseudoBox> {
    pseudo_boxes_with_rule(points, PseudoBoxRule::for_frame(width, height))
}

pub fn pseudo_boxes_with_rule(points: &[Point], rule: PseudoBoxRule) -> Vec<PseudoBox> {
    let nn = nearest_neighbor_distances(points);
    points
        .iter()
        .zip(nn)
        .map(|(p, d)| {
            let side = match d {
                Some(d) => d.clamp(rule.min_side, rule.max_side),
                None => rule.max_side,
            };
            PseudoBox::square(*p, side)
        })
        .collect()
}

fn nearest_neighbor_distances(points: &[Point]) -> Vec<Option<f64>> {
    points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            points
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != i)
                .map(|(_, q)| p.distance(q))
                .min_by(f64::total_cmp)
        })
        .collect()
}

/// Number of other points within `radius` of each point.
pub fn local_density(points: &[Point], radius: f64) -> Vec<usize> {
    points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            points
                .iter()
                .enumerate()
                .filter(|(j, q)| *j != i && p.distance(q) <= radius)
                .count()
        })
        .collect()
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// Fills `boxes` (and `proposals` for two-stage configs) for one scene.
pub fn simulate_detector(scene: &SceneRecord, cfg: &SynthConfig) -> SceneRecord {
    let mut rng = stream(cfg.seed, &[1, fnv1a(scene.id.as_bytes())]);
    let (w, h) = scene.dims();
    let rule = PseudoBoxRule::for_frame(scene.width, scene.height);
    let pseudo = pseudo_boxes_with_rule(&scene.points, rule);
    let density = local_density(&scene.points, rule.max_side);

    let mut boxes = Vec::new();
    for (pb, &dens) in pseudo.iter().zip(&density) {
        let dens = dens as f64;
        let p_detect = cfg.detector_recall_base * (-cfg.recall_density_slope * dens).exp();
        let draw: f64 = rng.random();
        let offset = (normal(&mut rng), normal(&mut rng));
        let size = (normal(&mut rng), normal(&mut rng));
        let score_eps = normal(&mut rng);
        let dup_draw: f64 = rng.random();
        let dup_shift = (rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0));
        let dup_size = (normal(&mut rng), normal(&mut rng));
        let dup_drop = rng.random_range(0.1..1.5);
        if draw >= p_detect {
            continue;
        }
        let side = pb.side();
        let bw = side * (cfg.size_noise * size.0).exp();
        let bh = side * (cfg.size_noise * size.1).exp();
        let cx = (pb.cx + cfg.center_noise * side * offset.0).clamp(0.0, w);
        let cy = (pb.cy + cfg.center_noise * side * offset.1).clamp(0.0, h);
        let score = cfg.conf_base - cfg.conf_density_slope * dens + cfg.score_noise * score_eps;
        boxes.push(Detection::new(cx, cy, bw, bh, score));

        if dup_draw < cfg.duplicate_rate {
            boxes.push(Detection::new(
                (cx + cfg.duplicate_shift * bw * dup_shift.0).clamp(0.0, w),
                (cy + cfg.duplicate_shift * bh * dup_shift.1).clamp(0.0, h),
                bw * (cfg.size_noise * dup_size.0).exp(),
                bh * (cfg.size_noise * dup_size.1).exp(),
                score - dup_drop,
            ));
        }
    }

    let expected_fp = cfg.fp_rate * scene.points.len() as f64;
    let fp_count = if expected_fp > 0.0 {
        Poisson::new(expected_fp)
            .map(|d| d.sample(&mut rng) as usize)
            .unwrap_or(0)
    } else {
        0
    };
    for _ in 0..fp_count {
        // background clutter looks like a head of a size seen in this scene
        let side = pseudo[rng.random_range(0..pseudo.len())].side();
        let size = (normal(&mut rng), normal(&mut rng));
        boxes.push(Detection::new(
            rng.random_range(0.0..=w),
            rng.random_range(0.0..=h),
            side * (cfg.size_noise * size.0).exp(),
            side * (cfg.size_noise * size.1).exp(),
            cfg.fp_score_mean + normal(&mut rng),
        ));
    }

    // Detector output order carries no information about the ground truth.
    for i in (1..boxes.len()).rev() {
        let j = rng.random_range(0..=i);
        boxes.swap(i, j);
    }

    let proposals = cfg.two_stage.then(|| {
        let m = (boxes.len() as f64 * cfg.proposal_multiplier).round() as usize;
        (0..m)
            .map(|_| {
                let b = boxes[rng.random_range(0..boxes.len())];
                let jitter = (normal(&mut rng), normal(&mut rng));
                let size = (normal(&mut rng), normal(&mut rng));
                let eps = normal(&mut rng);
                Detection::new(
                    (b.cx + 0.1 * b.w * jitter.0).clamp(0.0, w),
                    (b.cy + 0.1 * b.h * jitter.1).clamp(0.0, h),
                    b.w * (2.0 * cfg.size_noise * size.0).exp(),
                    b.h * (2.0 * cfg.size_noise * size.1).exp(),
                    b.score + (2.0 * cfg.score_noise + 0.5) * eps,
                )
            })
            .collect()
    });

    let mut out = scene.clone();
    out.boxes = boxes;
    out.proposals = proposals;
    out
}

/// Ground truth plus simulated detector output for every scene.
pub fn generate_dataset(cfg: &SynthConfig) -> Result<Vec<SceneRecord>> {
    let gt = generate_ground_truth(cfg)?;
    Ok(gt.par_iter().map(|s| simulate_detector(s, cfg)).collect())
}
