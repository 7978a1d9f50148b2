//! Output-feature compression.
//!
//! Detector outputs are reduced to two fixed-size tensors:
//!
//! * `t2d` (`C x S x S`): per-patch sums of normalized box area and of
//!   sigmoid confidence, one channel per output feature.
//! * `t1d` (`C x L`): histograms of the squashed area (`tanh`) and confidence
//!   (`sigmoid`) values after multiplying each by its scaling coefficient.
//!
//! Channel order is fixed: box area, box confidence, proposal area, proposal
//! confidence. One-stage inputs carry only the first two.
//!
//! Storage of a 2D channel is row-major with the y-bin as the row, so cell
//! `(i, j)` (x-bin `i`, y-bin `j`) lives at `j * S + i`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{bin_index, sigmoid, Detection};
use crate::scene::DetectorOutput;

pub const CHANNEL_NAMES: [&str; 4] = ["box_area", "box_conf", "proposal_area", "proposal_conf"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompressionConfig {
    /// Spatial grid side `S`.
    pub grid_size: usize,
    /// Histogram length `L`.
    pub hist_len: usize,
    pub alpha_box_area: f64,
    pub alpha_box_conf: f64,
    pub alpha_proposal_area: f64,
    pub alpha_proposal_conf: f64,
    /// Scale applied to the score inside the 2D confidence channels. `None`
    /// keeps the plain `sigmoid(score)`.
    pub spatial_conf_alpha: Option<f64>,
    pub two_stage: bool,
}

impl Default for CompressionConfig {
    fn default() -> Self {
        Self {
            grid_size: 64,
            hist_len: 256,
            alpha_box_area: 200.0,
            alpha_box_conf: 1.0,
            alpha_proposal_area: 200.0,
            alpha_proposal_conf: 1.0,
            spatial_conf_alpha: None,
            two_stage: true,
        }
    }
}

impl CompressionConfig {
    pub fn channels(&self) -> usize {
        if self.two_stage {
            4
        } else {
            2
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid_size == 0 || self.hist_len == 0 {
            return Err(Error::Config(
                "compression: grid_size and hist_len must be >= 1".into(),
            ));
        }
        let mut alphas = vec![
            self.alpha_box_area,
            self.alpha_box_conf,
            self.alpha_proposal_area,
            self.alpha_proposal_conf,
        ];
        alphas.extend(self.spatial_conf_alpha);
        if alphas.iter().any(|a| !(*a >= 1.0 && a.is_finite())) {
            return Err(Error::Config(
                "compression: scaling coefficients must be finite and >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// Square `S x S` matrix indexed by `(x-bin, y-bin)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    size: usize,
    data: Vec<f64>,
}

impl Grid {
    pub fn zeros(size: usize) -> Self {
        Self {
            size,
            data: vec![0.0; size * size],
        }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[j * self.size + i]
    }

    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        self.data[j * self.size + i] += v;
    }

    /// Row-major values, one row per y-bin.
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn total(&self) -> f64 {
        self.data.iter().sum()
    }
}

fn compress_2d(
    dets: &[Detection],
    width: f64,
    height: f64,
    size: usize,
    value: impl Fn(&Detection) -> f64,
) -> Grid {
    let mut grid = Grid::zeros(size);
    for d in dets {
        let i = bin_index(d.cx, width, size);
        let j = bin_index(d.cy, height, size);
        grid.add(i, j, value(d));
    }
    grid
}

/// Per-patch sum of `(w / W) * (h / H)`.
pub fn compress_2d_area(dets: &[Detection], width: f64, height: f64, size: usize) -> Grid {
    compress_2d(dets, width, height, size, |d| {
        d.normalized_area(width, height)
    })
}

/// Per-patch sum of `sigmoid(score)`.
pub fn compress_2d_conf(dets: &[Detection], width: f64, height: f64, size: usize) -> Grid {
    compress_2d_conf_scaled(dets, width, height, size, 1.0)
}

pub fn compress_2d_conf_scaled(
    dets: &[Detection],
    width: f64,
    height: f64,
    size: usize,
    alpha: f64,
) -> Grid {
    compress_2d(dets, width, height, size, |d| sigmoid(d.score * alpha))
}

fn histogram(values: impl Iterator<Item = f64>, len: usize) -> Vec<f64> {
    let mut hist = vec![0.0; len];
    for v in values {
        let idx = (v * len as f64).floor();
        let idx = if idx <= 0.0 {
            0
        } else {
            (idx as usize).min(len - 1)
        };
        hist[idx] += 1.0;
    }
    hist
}

/// Histogram of `sigmoid(score * alpha)` over `len` equal bins of `[0, 1]`.
pub fn compress_1d_conf(dets: &[Detection], len: usize, alpha: f64) -> Vec<f64> {
    histogram(dets.iter().map(|d| sigmoid(d.score * alpha)), len)
}

/// Histogram of `tanh((w / W) * (h / H) * alpha)` over `len` equal bins of `[0, 1]`.
pub fn compress_1d_area(
    dets: &[Detection],
    width: f64,
    height: f64,
    len: usize,
    alpha: f64,
) -> Vec<f64> {
    histogram(
        dets.iter()
            .map(|d| (d.normalized_area(width, height) * alpha).tanh()),
        len,
    )
}

/// The stacked network inputs for one scene.
#[derive(Debug, Clone, PartialEq)]
pub struct CompressedFeatures {
    pub channels: usize,
    pub grid_size: usize,
    pub hist_len: usize,
    /// `channels x grid_size x grid_size`, row-major, rows are y-bins.
    pub t2d: Vec<f64>,
    /// `channels x hist_len`.
    pub t1d: Vec<f64>,
}

impl CompressedFeatures {
    pub fn zeros(channels: usize, grid_size: usize, hist_len: usize) -> Self {
        Self {
            channels,
            grid_size,
            hist_len,
            t2d: vec![0.0; channels * grid_size * grid_size],
            t1d: vec![0.0; channels * hist_len],
        }
    }

    pub fn channel_names(&self) -> &'static [&'static str] {
        &CHANNEL_NAMES[..self.channels]
    }

    pub fn channel_2d(&self, c: usize) -> &[f64] {
        let n = self.grid_size * self.grid_size;
        &self.t2d[c * n..(c + 1) * n]
    }

    pub fn channel_1d(&self, c: usize) -> &[f64] {
        &self.t1d[c * self.hist_len..(c + 1) * self.hist_len]
    }

    fn check(&self) -> Result<()> {
        let n2 = self.channels * self.grid_size * self.grid_size;
        let n1 = self.channels * self.hist_len;
        if self.t2d.len() != n2 || self.t1d.len() != n1 {
            return Err(Error::Shape(format!(
                "features declare C={}, S={}, L={} but hold {} / {} values",
                self.channels,
                self.grid_size,
                self.hist_len,
                self.t2d.len(),
                self.t1d.len()
            )));
        }
        Ok(())
    }
}

pub fn compress_scene(
    scene: &DetectorOutput,
    cfg: &CompressionConfig,
) -> Result<CompressedFeatures> {
    cfg.validate()?;
    let (w, h) = scene.dims();
    let s = cfg.grid_size;
    let l = cfg.hist_len;
    let conf_alpha = cfg.spatial_conf_alpha.unwrap_or(1.0);

    let mut groups: Vec<(&[Detection], f64, f64)> =
        vec![(&scene.boxes, cfg.alpha_box_area, cfg.alpha_box_conf)];
    if cfg.two_stage {
        let proposals = scene.proposals.as_deref().ok_or_else(|| {
            Error::Invalid(format!(
                "scene `{}` has no proposals but the compression is two-stage",
                scene.id
            ))
        })?;
        groups.push((proposals, cfg.alpha_proposal_area, cfg.alpha_proposal_conf));
    }

    let mut out = CompressedFeatures {
        channels: cfg.channels(),
        grid_size: s,
        hist_len: l,
        t2d: Vec::with_capacity(cfg.channels() * s * s),
        t1d: Vec::with_capacity(cfg.channels() * l),
    };
    for (dets, alpha_area, alpha_conf) in groups {
        out.t2d
            .extend_from_slice(compress_2d_area(dets, w, h, s).as_slice());
        out.t2d
            .extend_from_slice(compress_2d_conf_scaled(dets, w, h, s, conf_alpha).as_slice());
        out.t1d.extend(compress_1d_area(dets, w, h, l, alpha_area));
        out.t1d.extend(compress_1d_conf(dets, l, alpha_conf));
    }
    Ok(out)
}

fn write_u64(out: &mut impl Write, v: u64) -> std::io::Result<()> {
    out.write_all(&v.to_le_bytes())
}

fn write_f64s(out: &mut impl Write, vs: &[f64]) -> std::io::Result<()> {
    for v in vs {
        out.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub(crate) fn read_u64(input: &mut impl Read) -> std::io::Result<u64> {
    let mut buf = [0u8; 8];
    input.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

pub(crate) fn read_f64s(input: &mut impl Read, n: usize) -> std::io::Result<Vec<f64>> {
    let mut buf = [0u8; 8];
    (0..n)
        .map(|_| {
            input.read_exact(&mut buf)?;
            Ok(f64::from_le_bytes(buf))
        })
        .collect()
}

/// Header `C, S, L` (little-endian u64) followed by `t2d` and `t1d` as
/// little-endian f64 in row-major order.
pub fn write_features_to(out: &mut impl Write, f: &CompressedFeatures) -> std::io::Result<()> {
    write_u64(out, f.channels as u64)?;
    write_u64(out, f.grid_size as u64)?;
    write_u64(out, f.hist_len as u64)?;
    write_f64s(out, &f.t2d)?;
    write_f64s(out, &f.t1d)
}

pub fn read_features_from(input: &mut impl Read) -> std::io::Result<CompressedFeatures> {
    let channels = read_u64(input)? as usize;
    let grid_size = read_u64(input)? as usize;
    let hist_len = read_u64(input)? as usize;
    if channels > 4 || grid_size > 1 << 14 || hist_len > 1 << 20 {
        return Err(std::io::Error::new(
            std::io::ErrorKind::InvalidData,
            format!("implausible feature header C={channels} S={grid_size} L={hist_len}"),
        ));
    }
    let t2d = read_f64s(input, channels * grid_size * grid_size)?;
    let t1d = read_f64s(input, channels * hist_len)?;
    Ok(CompressedFeatures {
        channels,
        grid_size,
        hist_len,
        t2d,
        t1d,
    })
}

pub fn save_features(f: &CompressedFeatures, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    f.check()?;
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    write_features_to(&mut out, f)
        .and_then(|_| out.flush())
        .map_err(|e| Error::io(path, e))
}

pub fn load_features(path: impl AsRef<Path>) -> Result<CompressedFeatures> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_features_from(&mut BufReader::new(file)).map_err(|e| Error::io(path, e))
}

/// Writes one CSV per channel and representation into `dir`:
/// `<channel>_2d.csv` holds `S` rows (y-bins) of `S` values and
/// `<channel>_1d.csv` holds one line of `L` values.
pub fn dump_features(f: &CompressedFeatures, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    f.check()?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let s = f.grid_size;
    for (c, name) in f.channel_names().iter().enumerate() {
        let mut text = String::new();
        for row in f.channel_2d(c).chunks(s) {
            push_csv_row(&mut text, row);
        }
        let path = dir.join(format!("{name}_2d.csv"));
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;

        let mut text = String::new();
        push_csv_row(&mut text, f.channel_1d(c));
        let path = dir.join(format!("{name}_1d.csv"));
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

fn push_csv_row(text: &mut String, values: &[f64]) {
    use std::fmt::Write as _;
    for (k, v) in values.iter().enumerate() {
        if k > 0 {
            text.push(',');
        }
        // `Display` for f64 prints the shortest string that parses back exactly.
        let _ = write!(text, "{v}");
    }
    text.push('\n');
}

/// Reads a directory written by [`dump_features`] back into features.
pub fn read_dump(dir: impl AsRef<Path>, channels: usize) -> Result<CompressedFeatures> {
    let dir = dir.as_ref();
    let mut t2d = Vec::new();
    let mut t1d = Vec::new();
    let mut grid_size = 0;
    let mut hist_len = 0;
    for name in &CHANNEL_NAMES[..channels] {
        let path = dir.join(format!("{name}_2d.csv"));
        let rows = read_csv(&path)?;
        grid_size = rows.len();
        if rows.iter().any(|r| r.len() != grid_size) {
            return Err(Error::Shape(format!("{} is not square", path.display())));
        }
        t2d.extend(rows.into_iter().flatten());

        let path = dir.join(format!("{name}_1d.csv"));
        let rows = read_csv(&path)?;
        let row = rows.into_iter().next().unwrap_or_default();
        hist_len = row.len();
        t1d.extend(row);
    }
    let f = CompressedFeatures {
        channels,
        grid_size,
        hist_len,
        t2d,
        t1d,
    };
    f.check()?;
    Ok(f)
}

fn read_csv(path: &Path) -> Result<Vec<Vec<f64>>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, line)| {
            line.split(',')
                .map(|v| {
                    v.trim().parse::<f64>().map_err(|e| Error::Parse {
                        path: path.to_path_buf(),
                        line: n + 1,
                        message: e.to_string(),
                    })
                })
                .collect()
        })
        .collect()
}
