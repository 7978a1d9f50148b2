//! Scene records and their JSONL encoding.
//!
//! One scene per line:
//! `{"id": str, "width": int, "height": int, "points": [[x,y],...],
//!   "boxes": [[cx,cy,w,h,score],...], "proposals": [[cx,cy,w,h,score],...]|null}`

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Detection, Point};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneRecord {
    pub id: String,
    pub width: u32,
    pub height: u32,
    #[serde(default)]
    pub points: Vec<Point>,
    #[serde(default)]
    pub boxes: Vec<Detection>,
    #[serde(default)]
    pub proposals: Option<Vec<Detection>>,
}

impl SceneRecord {
    pub fn new(id: impl Into<String>, width: u32, height: u32) -> Self {
        Self {
            id: id.into(),
            width,
            height,
            points: Vec::new(),
            boxes: Vec::new(),
            proposals: None,
        }
    }

    pub fn count(&self) -> usize {
        self.points.len()
    }

    pub fn dims(&self) -> (f64, f64) {
        (self.width as f64, self.height as f64)
    }

    /// Copy of this scene with the ground truth removed.
    pub fn detector_view(&self) -> DetectorOutput {
        DetectorOutput {
            id: self.id.clone(),
            width: self.width,
            height: self.height,
            boxes: self.boxes.clone(),
            proposals: self.proposals.clone(),
        }
    }

    /// Clamps every coordinate into the frame. Returns how many values moved.
    fn clamp_into_frame(&mut self) -> usize {
        let (w, h) = self.dims();
        let mut moved = 0;
        let mut clamp = |v: &mut f64, hi: f64| {
            let c = v.clamp(0.0, hi);
            if c != *v {
                *v = c;
                moved += 1;
            }
        };
        for p in &mut self.points {
            clamp(&mut p.x, w);
            clamp(&mut p.y, h);
        }
        for d in self
            .boxes
            .iter_mut()
            .chain(self.proposals.iter_mut().flatten())
        {
            clamp(&mut d.cx, w);
            clamp(&mut d.cy, h);
        }
        moved
    }

    fn validate(&self) -> std::result::Result<(), String> {
        if self.width == 0 || self.height == 0 {
            return Err(format!("scene `{}` has zero width or height", self.id));
        }
        for p in &self.points {
            if !(p.x.is_finite() && p.y.is_finite()) {
                return Err(format!("scene `{}` has a non-finite point", self.id));
            }
        }
        for d in self.boxes.iter().chain(self.proposals.iter().flatten()) {
            let finite = [d.cx, d.cy, d.w, d.h, d.score]
                .iter()
                .all(|v| v.is_finite());
            if !finite {
                return Err(format!("scene `{}` has a non-finite detection", self.id));
            }
            if d.w <= 0.0 || d.h <= 0.0 {
                return Err(format!(
                    "scene `{}` has a detection with non-positive size ({} x {})",
                    self.id, d.w, d.h
                ));
            }
        }
        Ok(())
    }
}

/// What a detector produces for one image: no ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorOutput {
    pub id: String,
    pub width: u32,
    pub height: u32,
    #[serde(default)]
    pub boxes: Vec<Detection>,
    #[serde(default)]
    pub proposals: Option<Vec<Detection>>,
}

impl DetectorOutput {
    pub fn dims(&self) -> (f64, f64) {
        (self.width as f64, self.height as f64)
    }
}

#[derive(Debug, Default, Clone, PartialEq)]
pub struct LoadReport {
    pub scenes: Vec<SceneRecord>,
    /// Number of coordinates that were outside the frame and got clamped.
    pub clamped: usize,
}

pub fn load_scenes(path: impl AsRef<Path>) -> Result<Vec<SceneRecord>> {
    load_scenes_with_report(path).map(|r| r.scenes)
}

pub fn load_scenes_with_report(path: impl AsRef<Path>) -> Result<LoadReport> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    let mut report = LoadReport::default();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: idx + 1,
            message,
        };
        let mut scene: SceneRecord =
            serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        scene.validate().map_err(parse_err)?;
        let moved = scene.clamp_into_frame();
        if moved > 0 {
            log::warn!(
                "{}:{}: clamped {} out-of-frame coordinate(s) in scene `{}`",
                path.display(),
                idx + 1,
                moved,
                scene.id
            );
            report.clamped += moved;
        }
        report.scenes.push(scene);
    }
    Ok(report)
}

pub fn save_scenes(scenes: &[SceneRecord], path: impl AsRef<Path>) -> Result<()> {
    write_jsonl(scenes, path)
}

/// Writes any serializable sequence as JSON lines.
pub fn write_jsonl<T: Serialize>(items: &[T], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for item in items {
        serde_json::to_writer(&mut out, item).map_err(|e| Error::Invalid(e.to_string()))?;
        out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

/// Reads JSON lines into any deserializable type, naming the line on failure.
pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: impl AsRef<Path>) -> Result<Vec<T>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut items = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let item = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: idx + 1,
            message: e.to_string(),
        })?;
        items.push(item);
    }
    Ok(items)
}
