//! End-to-end orchestration: simulate, compress, search labels, train,
//! infer, compare against a fixed-threshold baseline, and evaluate.
//!
//! Each stage also exists as a standalone function so the command line can
//! run them one at a time on files.

use std::collections::HashMap;
use std::fmt;
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::compress::{
    compress_scene, load_features, save_features, CompressedFeatures, CompressionConfig,
};
use crate::config::{EvalConfig, PipelineConfig, SplitConfig};
use crate::error::{Error, Result};
use crate::geometry::{Detection, Point};
use crate::metrics::{
    average_precision, count_metrics, match_hungarian, ApScene, LocReport, MatchCriterion,
};
use crate::net::{init_output_priors, save_model, train, write_loss_curve, HatModel, TrainSample};
use crate::nms::{
    nms_region_adaptive, nms_standard, search_thresholds, RegionThresholds, SearchConfig,
};
use crate::rng::mix;
use crate::scene::{read_jsonl, save_scenes, write_jsonl, DetectorOutput, SceneRecord};
use crate::select::decouple_then_align;
use crate::synth::{generate_dataset, pseudo_boxes_from_points};

pub const BASELINE: &str = "baseline_fixed_nms";
pub const ORACLE: &str = "oracle_region_nms";
pub const HAT_NMS: &str = "hat_region_nms";
pub const CROWD_HAT: &str = "crowd_hat";

/// Exclusive claim on a workspace directory, released on drop.
#[derive(Debug)]
pub struct WorkspaceLock {
    path: PathBuf,
}

impl WorkspaceLock {
    pub fn acquire(path: impl Into<PathBuf>) -> Result<Self> {
        let path = path.into();
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                Err(Error::Invalid(format!(
                    "workspace is locked by another pipeline (remove {} if stale)",
                    path.display()
                )))
            }
            Err(e) => Err(Error::io(&path, e)),
        }
    }
}

impl Drop for WorkspaceLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }
}

/// Assigns scene `i` to validation when a seeded hash of `i` falls below
/// `val_fraction`.
pub fn split_scenes(n: usize, cfg: &SplitConfig) -> Vec<Split> {
    (0..n)
        .map(|i| {
            let u = (mix(cfg.seed, &[4, i as u64]) >> 11) as f64 / (1u64 << 53) as f64;
            if u < cfg.val_fraction {
                Split::Val
            } else {
                Split::Train
            }
        })
        .collect()
}

/// Final output for one scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenePrediction {
    pub id: String,
    /// Reported crowd count; always equals `boxes.len()`.
    pub count: usize,
    /// Boxes surviving NMS, before count alignment.
    pub n_c: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_hat: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub thresholds: Option<Vec<f64>>,
    pub boxes: Vec<Detection>,
}

impl ScenePrediction {
    fn from_nms(id: &str, boxes: Vec<Detection>, thresholds: Option<Vec<f64>>) -> Self {
        Self {
            id: id.to_string(),
            count: boxes.len(),
            n_c: boxes.len(),
            n_hat: None,
            thresholds,
            boxes,
        }
    }
}

pub fn compress_all(
    scenes: &[DetectorOutput],
    cfg: &CompressionConfig,
) -> Result<Vec<CompressedFeatures>> {
    scenes.par_iter().map(|s| compress_scene(s, cfg)).collect()
}

/// Searches threshold labels for every scene and pairs them with features.
pub fn build_samples(
    scenes: &[SceneRecord],
    features: &[CompressedFeatures],
    cfg: &SearchConfig,
) -> Result<Vec<TrainSample>> {
    if scenes.len() != features.len() {
        return Err(Error::Shape(format!(
            "{} scenes but {} feature sets",
            scenes.len(),
            features.len()
        )));
    }
    scenes
        .par_iter()
        .zip(features.par_iter())
        .map(|(scene, f)| {
            Ok(TrainSample {
                id: scene.id.clone(),
                features: f.clone(),
                thresholds: search_thresholds(scene, cfg)?.values,
                count: scene.count(),
            })
        })
        .collect()
}

/// Runs the trained model on detector output only: compress, predict,
/// region-adaptive NMS, then keep the `min(round(n_hat), n_c)` best boxes.
pub fn infer_scene(
    model: &HatModel,
    scene: &DetectorOutput,
    compression: &CompressionConfig,
    conf_floor: f64,
) -> Result<ScenePrediction> {
    let features = compress_scene(scene, compression)?;
    let pred = model.infer(&features)?;
    let thresholds = RegionThresholds::new(model.arch().k, pred.thresholds)?;
    let (w, h) = scene.dims();
    let kept = nms_region_adaptive(&scene.boxes, &thresholds, w, h, conf_floor);
    let sel = decouple_then_align(&kept, pred.count);
    Ok(ScenePrediction {
        id: scene.id.clone(),
        count: sel.n_final,
        n_c: sel.n_c,
        n_hat: Some(sel.n_hat),
        thresholds: Some(thresholds.values),
        boxes: sel.boxes,
    })
}

pub fn infer_all(
    model: &HatModel,
    scenes: &[DetectorOutput],
    compression: &CompressionConfig,
    conf_floor: f64,
) -> Result<Vec<ScenePrediction>> {
    scenes
        .par_iter()
        .map(|s| infer_scene(model, s, compression, conf_floor))
        .collect()
}

/// The detection-counting comparator: one global NMS threshold, count =
/// surviving boxes.
pub fn baseline_fixed_nms(
    scenes: &[DetectorOutput],
    threshold: f64,
    conf_floor: f64,
) -> Vec<ScenePrediction> {
    scenes
        .par_iter()
        .map(|s| {
            ScenePrediction::from_nms(&s.id, nms_standard(&s.boxes, threshold, conf_floor), None)
        })
        .collect()
}

/// Region-adaptive NMS with given per-scene thresholds (e.g. searched labels).
pub fn region_nms_with(
    scenes: &[DetectorOutput],
    thresholds: &[RegionThresholds],
    conf_floor: f64,
) -> Vec<ScenePrediction> {
    scenes
        .par_iter()
        .zip(thresholds.par_iter())
        .map(|(s, t)| {
            let (w, h) = s.dims();
            let kept = nms_region_adaptive(&s.boxes, t, w, h, conf_floor);
            ScenePrediction::from_nms(&s.id, kept, Some(t.values.clone()))
        })
        .collect()
}

/// Pooled Hungarian metrics of boxes against pseudo boxes built from the
/// ground-truth points.
pub fn pooled_localization(
    preds: &[ScenePrediction],
    gts: &[SceneRecord],
    criterion: &MatchCriterion,
) -> LocReport {
    preds
        .par_iter()
        .zip(gts.par_iter())
        .map(|(p, g)| {
            let pseudo = pseudo_boxes_from_points(&g.points, g.width, g.height);
            match_hungarian(&p.boxes, &pseudo, criterion)
        })
        .collect::<Vec<_>>()
        .iter()
        .fold(LocReport::default(), |acc, r| acc.merge(r))
}

/// Picks the candidate threshold with the best pooled F1 on `scenes`;
/// ties go to the smallest candidate.
pub fn choose_fixed_threshold(
    scenes: &[SceneRecord],
    candidates: &[f64],
    conf_floor: f64,
    criterion: &MatchCriterion,
) -> Result<(f64, f64)> {
    let views: Vec<DetectorOutput> = scenes.iter().map(SceneRecord::detector_view).collect();
    let mut sorted = candidates.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut best: Option<(f64, f64)> = None;
    for t in sorted {
        let preds = baseline_fixed_nms(&views, t, conf_floor);
        let f1 = pooled_localization(&preds, scenes, criterion).f1;
        if best.is_none_or(|(_, b)| f1 > b) {
            best = Some((t, f1));
        }
    }
    best.ok_or_else(|| Error::Invalid("no candidate thresholds".into()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub mae: f64,
    pub rmse: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// `None` when there is no ground truth at all.
    pub ap: Option<f64>,
}

impl EvalReport {
    pub fn rows(&self, method: &str, split: &str) -> Vec<MetricRow> {
        [
            ("mae", self.mae),
            ("rmse", self.rmse),
            ("precision", self.precision),
            ("recall", self.recall),
            ("f1", self.f1),
            ("ap", self.ap.unwrap_or(f64::NAN)),
        ]
        .into_iter()
        .map(|(m, v)| MetricRow::new(method, m, split, v))
        .collect()
    }
}

/// Evaluates predictions against ground truth, matched by scene id.
pub fn evaluate(
    preds: &[ScenePrediction],
    gts: &[SceneRecord],
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    let by_id: HashMap<&str, &SceneRecord> = gts.iter().map(|g| (g.id.as_str(), g)).collect();
    let mut matched = Vec::with_capacity(preds.len());
    for p in preds {
        let g = by_id
            .get(p.id.as_str())
            .ok_or_else(|| Error::Invalid(format!("no ground truth for scene `{}`", p.id)))?;
        matched.push((*g).clone());
    }
    let counts: Vec<f64> = preds.iter().map(|p| p.count as f64).collect();
    let truth: Vec<usize> = matched.iter().map(SceneRecord::count).collect();
    let c = count_metrics(&counts, &truth)?;
    let loc = pooled_localization(preds, &matched, &cfg.criterion);
    let pseudo: Vec<_> = matched
        .iter()
        .map(|g| pseudo_boxes_from_points(&g.points, g.width, g.height))
        .collect();
    let ap_scenes: Vec<ApScene> = preds
        .iter()
        .zip(&pseudo)
        .map(|(p, g)| ApScene {
            preds: &p.boxes,
            gts: g,
        })
        .collect();
    let ap = average_precision(&ap_scenes, cfg.ap_iou).ok();
    Ok(EvalReport {
        mae: c.mae,
        rmse: c.rmse,
        precision: loc.precision,
        recall: loc.recall,
        f1: loc.f1,
        ap,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub method: String,
    pub metric: String,
    pub split: String,
    pub value: f64,
}

impl MetricRow {
    pub fn new(method: &str, metric: &str, split: &str, value: f64) -> Self {
        Self {
            method: method.into(),
            metric: metric.into(),
            split: split.into(),
            value,
        }
    }
}

pub fn write_metrics_csv(rows: &[MetricRow], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let mut write = || -> std::io::Result<()> {
        writeln!(out, "method,metric,split,value")?;
        for r in rows {
            writeln!(out, "{},{},{},{}", r.method, r.metric, r.split, r.value)?;
        }
        out.flush()
    };
    write().map_err(|e| Error::io(path, e))
}

pub fn read_metrics_csv(path: impl AsRef<Path>) -> Result<Vec<MetricRow>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        let bad = |m: &str| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: m.into(),
        };
        if f.len() != 4 {
            return Err(bad("expected 4 fields"));
        }
        let value = f[3].parse().map_err(|_| bad("value is not a number"))?;
        rows.push(MetricRow::new(f[0], f[1], f[2], value));
    }
    Ok(rows)
}

/// Renders rows as an aligned text table.
pub fn format_table(rows: &[MetricRow]) -> String {
    let mut s = format!(
        "{:<20} {:<16} {:<6} {:>12}\n",
        "method", "metric", "split", "value"
    );
    for r in rows {
        s.push_str(&format!(
            "{:<20} {:<16} {:<6} {:>12.4}\n",
            r.method, r.metric, r.split, r.value
        ));
    }
    s
}

/// File name for the `index`-th scene's artifact; keeps directory order
/// equal to dataset order.
pub fn artifact_name(index: usize, id: &str) -> String {
    let clean: String = id
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' {
                c
            } else {
                '_'
            }
        })
        .collect();
    format!("{index:06}-{clean}.bin")
}

fn reset_dir(dir: &Path) -> Result<()> {
    if dir.exists() {
        fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

pub fn save_feature_dir(
    ids: &[&str],
    features: &[CompressedFeatures],
    dir: impl AsRef<Path>,
) -> Result<()> {
    let dir = dir.as_ref();
    reset_dir(dir)?;
    for (i, (id, f)) in ids.iter().zip(features).enumerate() {
        save_features(f, dir.join(artifact_name(i, id)))?;
    }
    Ok(())
}

pub fn load_feature_dir(dir: impl AsRef<Path>) -> Result<Vec<CompressedFeatures>> {
    sorted_bins(dir.as_ref())?
        .iter()
        .map(load_features)
        .collect()
}

pub fn save_sample_dir(samples: &[TrainSample], dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    reset_dir(dir)?;
    for (i, s) in samples.iter().enumerate() {
        s.save(dir.join(artifact_name(i, &s.id)))?;
    }
    Ok(())
}

pub fn load_sample_dir(dir: impl AsRef<Path>) -> Result<Vec<TrainSample>> {
    sorted_bins(dir.as_ref())?
        .iter()
        .map(TrainSample::load)
        .collect()
}

fn sorted_bins(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut paths = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let p = entry.map_err(|e| Error::io(dir, e))?.path();
        if p.extension().is_some_and(|e| e == "bin") {
            paths.push(p);
        }
    }
    paths.sort();
    Ok(paths)
}

fn stage<T>(name: &'static str, path: &Path, r: Result<T>) -> Result<T> {
    r.map_err(|e| Error::Stage {
        stage: name,
        path: path.to_path_buf(),
        source: Box::new(e),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineSummary {
    pub n_train: usize,
    pub n_val: usize,
    pub baseline_threshold: f64,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub rows: Vec<MetricRow>,
}

impl PipelineSummary {
    pub fn value(&self, method: &str, metric: &str, split: &str) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.method == method && r.metric == metric && r.split == split)
            .map(|r| r.value)
    }
}

impl fmt::Display for PipelineSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "scenes: {} train, {} val", self.n_train, self.n_val)?;
        writeln!(
            f,
            "fixed NMS threshold (best on train): {}",
            self.baseline_threshold
        )?;
        writeln!(
            f,
            "training loss: {:.5} -> {:.5}",
            self.initial_loss, self.final_loss
        )?;
        writeln!(f)?;
        write!(f, "{}", format_table(&self.rows))
    }
}

/// Runs every stage in order inside `cfg.paths.workspace`.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<PipelineSummary> {
    cfg.validate()?;
    let paths = &cfg.paths;
    let ws = &paths.workspace;
    fs::create_dir_all(ws).map_err(|e| Error::io(ws, e))?;
    let _lock = WorkspaceLock::acquire(paths.lock())?;
    let conf_floor = cfg.nms.conf_floor;

    let config_path = paths.resolved_config();
    stage(
        "config",
        &config_path,
        cfg.to_toml_string()
            .and_then(|t| fs::write(&config_path, t).map_err(|e| Error::io(&config_path, e))),
    )?;

    // synth
    let scenes_path = paths.scenes();
    let scenes = stage("synth", &scenes_path, generate_dataset(&cfg.synth))?;
    if scenes.is_empty() {
        return stage(
            "synth",
            &scenes_path,
            Err(Error::Invalid("empty dataset".into())),
        );
    }
    stage("synth", &scenes_path, save_scenes(&scenes, &scenes_path))?;
    let views: Vec<DetectorOutput> = scenes.iter().map(SceneRecord::detector_view).collect();
    let det_path = paths.detections();
    stage("synth", &det_path, write_jsonl(&views, &det_path))?;

    // split
    let split = split_scenes(scenes.len(), &cfg.split);
    let split_path = paths.split();
    let split_csv: String = std::iter::once("id,split\n".to_string())
        .chain(
            scenes
                .iter()
                .zip(&split)
                .map(|(s, p)| format!("{},{}\n", s.id, p.name())),
        )
        .collect();
    stage(
        "split",
        &split_path,
        fs::write(&split_path, split_csv).map_err(|e| Error::io(&split_path, e)),
    )?;
    let pick =
        |want: Split| -> Vec<usize> { (0..scenes.len()).filter(|&i| split[i] == want).collect() };
    let train_idx = pick(Split::Train);
    let val_idx = pick(Split::Val);
    if train_idx.is_empty() {
        return stage(
            "split",
            &split_path,
            Err(Error::Invalid("empty training split".into())),
        );
    }

    // compress
    let feat_dir = paths.features();
    let features = stage(
        "compress",
        &feat_dir,
        compress_all(&views, &cfg.compression),
    )?;
    let ids: Vec<&str> = scenes.iter().map(|s| s.id.as_str()).collect();
    stage(
        "compress",
        &feat_dir,
        save_feature_dir(&ids, &features, &feat_dir),
    )?;

    // search
    let sample_dir = paths.samples();
    let samples = stage(
        "search",
        &sample_dir,
        build_samples(&scenes, &features, &cfg.nms),
    )?;
    stage(
        "search",
        &sample_dir,
        save_sample_dir(&samples, &sample_dir),
    )?;

    // train, from the samples on disk
    let model_path = paths.model();
    let stored = stage("train", &sample_dir, load_sample_dir(&sample_dir))?;
    let train_set: Vec<TrainSample> = train_idx.iter().map(|&i| stored[i].clone()).collect();
    let mut model = stage(
        "train",
        &model_path,
        HatModel::new(cfg.arch.clone(), cfg.train.seed),
    )?;
    init_output_priors(&mut model, &train_set);
    let curve = stage(
        "train",
        &model_path,
        train(&mut model, &train_set, &cfg.train),
    )?;
    stage("train", &model_path, save_model(&model, &model_path))?;
    let curve_path = paths.loss_curve();
    stage("train", &curve_path, write_loss_curve(&curve, &curve_path))?;

    // infer, reading detector output only
    let pred_path = paths.predictions();
    let detector_only: Vec<DetectorOutput> = stage("infer", &det_path, read_jsonl(&det_path))?;
    let hat = stage(
        "infer",
        &pred_path,
        infer_all(&model, &detector_only, &cfg.compression, conf_floor),
    )?;
    stage("infer", &pred_path, write_jsonl(&hat, &pred_path))?;

    // baselines and ablations
    let base_path = paths.baseline_predictions();
    let train_scenes: Vec<SceneRecord> = train_idx.iter().map(|&i| scenes[i].clone()).collect();
    let (best_t, _) = stage(
        "baseline",
        &base_path,
        choose_fixed_threshold(
            &train_scenes,
            &cfg.eval.baseline_thresholds,
            conf_floor,
            &cfg.eval.criterion,
        ),
    )?;
    let baseline = baseline_fixed_nms(&detector_only, best_t, conf_floor);
    stage("baseline", &base_path, write_jsonl(&baseline, &base_path))?;
    let labels: Vec<RegionThresholds> = samples
        .iter()
        .map(|s| RegionThresholds::new(cfg.nms.k, s.thresholds.clone()))
        .collect::<Result<_>>()?;
    let oracle = region_nms_with(&detector_only, &labels, conf_floor);
    let hat_nms: Vec<ScenePrediction> = hat
        .iter()
        .zip(&detector_only)
        .map(|(p, d)| {
            let t = RegionThresholds::new(cfg.nms.k, p.thresholds.clone().unwrap_or_default())?;
            let (w, h) = d.dims();
            let kept = nms_region_adaptive(&d.boxes, &t, w, h, conf_floor);
            Ok(ScenePrediction::from_nms(&d.id, kept, Some(t.values)))
        })
        .collect::<Result<_>>()?;

    // eval
    let metrics_path = paths.metrics();
    let mut rows = vec![MetricRow::new(BASELINE, "nms_threshold", "train", best_t)];
    for (split_name, idx) in [("train", &train_idx), ("val", &val_idx)] {
        if idx.is_empty() {
            continue;
        }
        let gts: Vec<SceneRecord> = idx.iter().map(|&i| scenes[i].clone()).collect();
        for (method, preds) in [
            (BASELINE, &baseline),
            (ORACLE, &oracle),
            (HAT_NMS, &hat_nms),
            (CROWD_HAT, &hat),
        ] {
            let subset: Vec<ScenePrediction> = idx.iter().map(|&i| preds[i].clone()).collect();
            let report = stage("eval", &metrics_path, evaluate(&subset, &gts, &cfg.eval))?;
            rows.extend(report.rows(method, split_name));
        }
        rows.push(MetricRow::new(
            CROWD_HAT,
            "threshold_mae",
            split_name,
            threshold_mae(idx.iter().map(|&i| (&hat[i], &samples[i]))),
        ));
    }
    stage(
        "eval",
        &metrics_path,
        write_metrics_csv(&rows, &metrics_path),
    )?;

    let summary = PipelineSummary {
        n_train: train_idx.len(),
        n_val: val_idx.len(),
        baseline_threshold: best_t,
        initial_loss: curve.first().map_or(f64::NAN, |e| e.total),
        final_loss: curve.last().map_or(f64::NAN, |e| e.total),
        rows,
    };
    let summary_path = paths.summary();
    stage(
        "eval",
        &summary_path,
        fs::write(&summary_path, summary.to_string()).map_err(|e| Error::io(&summary_path, e)),
    )?;
    Ok(summary)
}

/// Mean absolute difference between predicted and searched region
/// thresholds.
pub fn threshold_mae<'a>(
    pairs: impl Iterator<Item = (&'a ScenePrediction, &'a TrainSample)>,
) -> f64 {
    let (mut sum, mut n) = (0.0, 0usize);
    for (p, s) in pairs {
        if let Some(t) = &p.thresholds {
            for (a, b) in t.iter().zip(&s.thresholds) {
                sum += (a - b).abs();
                n += 1;
            }
        }
    }
    if n == 0 {
        f64::NAN
    } else {
        sum / n as f64
    }
}

/// Ground-truth points per scene, in the order of `preds`.
pub fn point_pairs(
    preds: &[ScenePrediction],
    gts: &[SceneRecord],
) -> Vec<(Vec<Point>, Vec<Point>)> {
    preds
        .iter()
        .zip(gts)
        .map(|(p, g)| {
            (
                p.boxes.iter().map(Detection::center).collect(),
                g.points.clone(),
            )
        })
        .collect()
}
