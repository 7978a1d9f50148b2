//! Boxes, points and overlap.
//!
//! Boxes are stored as center + size with a raw (pre-sigmoid) confidence.
//! Corner form is derived on demand.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn distance(&self, other: &Point) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

impl From<[f64; 2]> for Point {
    fn from([x, y]: [f64; 2]) -> Self {
        Self { x, y }
    }
}

impl From<Point> for [f64; 2] {
    fn from(p: Point) -> Self {
        [p.x, p.y]
    }
}

/// A single box or proposal emitted by a detector.
///
/// `score` is the raw confidence before any sigmoid is applied.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 5]", into = "[f64; 5]")]
pub struct Detection {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
    pub score: f64,
}

impl Detection {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64, score: f64) -> Self {
        Self {
            cx,
            cy,
            w,
            h,
            score,
        }
    }

    pub fn center(&self) -> Point {
        Point::new(self.cx, self.cy)
    }

    /// Confidence mapped through the logistic sigmoid.
    pub fn confidence(&self) -> f64 {
        sigmoid(self.score)
    }

    /// Area normalized by the image size, `(w / W) * (h / H)`.
    pub fn normalized_area(&self, width: f64, height: f64) -> f64 {
        (self.w / width) * (self.h / height)
    }
}

impl From<[f64; 5]> for Detection {
    fn from([cx, cy, w, h, score]: [f64; 5]) -> Self {
        Self {
            cx,
            cy,
            w,
            h,
            score,
        }
    }
}

impl From<Detection> for [f64; 5] {
    fn from(d: Detection) -> Self {
        [d.cx, d.cy, d.w, d.h, d.score]
    }
}

/// Square box synthesized around a ground-truth point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PseudoBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl PseudoBox {
    pub fn square(center: Point, side: f64) -> Self {
        Self {
            cx: center.x,
            cy: center.y,
            w: side,
            h: side,
        }
    }

    pub fn center(&self) -> Point {
        Point::new(self.cx, self.cy)
    }

    pub fn side(&self) -> f64 {
        self.w
    }
}

/// Axis-aligned rectangle in corner form.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Corners {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl Corners {
    pub fn area(&self) -> f64 {
        (self.x1 - self.x0).max(0.0) * (self.y1 - self.y0).max(0.0)
    }
}

pub trait BoxLike {
    fn corners(&self) -> Corners;
}

fn center_size_corners(cx: f64, cy: f64, w: f64, h: f64) -> Corners {
    Corners {
        x0: cx - w / 2.0,
        y0: cy - h / 2.0,
        x1: cx + w / 2.0,
        y1: cy + h / 2.0,
    }
}

impl BoxLike for Detection {
    fn corners(&self) -> Corners {
        center_size_corners(self.cx, self.cy, self.w, self.h)
    }
}

impl BoxLike for PseudoBox {
    fn corners(&self) -> Corners {
        center_size_corners(self.cx, self.cy, self.w, self.h)
    }
}

impl BoxLike for Corners {
    fn corners(&self) -> Corners {
        *self
    }
}

/// Intersection over union of two boxes.
pub fn iou<A: BoxLike + ?Sized, B: BoxLike + ?Sized>(a: &A, b: &B) -> f64 {
    let a = a.corners();
    let b = b.corners();
    let iw = (a.x1.min(b.x1) - a.x0.max(b.x0)).max(0.0);
    let ih = (a.y1.min(b.y1) - a.y0.max(b.y0)).max(0.0);
    let inter = iw * ih;
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Cell index of `coord` on a grid of `cells` equal bins spanning `[0, extent]`.
/// A coordinate exactly on the far edge falls into the last cell.
pub fn bin_index(coord: f64, extent: f64, cells: usize) -> usize {
    let size = extent / cells as f64;
    let raw = (coord / size).floor();
    if raw <= 0.0 {
        0
    } else {
        (raw as usize).min(cells - 1)
    }
}
