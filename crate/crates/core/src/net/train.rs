use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::arch::HatArchitecture;
use super::model::{HatModel, LossWeights};
use crate::compress::{
    read_f64s, read_features_from, read_u64, write_features_to, CompressedFeatures,
};
use crate::error::{Error, Result};
use crate::rng::stream;

/// Adam moments and step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub const BETA1: f64 = 0.9;
    pub const BETA2: f64 = 0.999;
    pub const EPS: f64 = 1e-8;

    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }

    /// One bias-corrected Adam update of `params` in place.
    pub fn update(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - Self::BETA1.powi(t);
        let c2 = 1.0 - Self::BETA2.powi(t);
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grad)
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            *m = Self::BETA1 * *m + (1.0 - Self::BETA1) * g;
            *v = Self::BETA2 * *v + (1.0 - Self::BETA2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= lr * m_hat / (v_hat.sqrt() + Self::EPS);
        }
    }
}

/// Network inputs for one scene plus its supervision.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSample {
    pub id: String,
    pub features: CompressedFeatures,
    /// Searched per-region NMS thresholds, region-major.
    pub thresholds: Vec<f64>,
    pub count: usize,
}

const SAMPLE_MAGIC: &[u8; 4] = b"CHTS";
const SAMPLE_VERSION: u32 = 1;

impl TrainSample {
    pub fn validate(&self) -> Result<()> {
        if self.thresholds.iter().any(|t| !(0.0..=1.0).contains(t)) {
            return Err(Error::Invalid(format!(
                "sample `{}` has a threshold label outside [0, 1]",
                self.id
            )));
        }
        Ok(())
    }

    /// Layout: magic, version, id, K^2, count, the feature block
    /// (`C, S, L` header and tensors), then the thresholds. Integers are
    /// little-endian u64 except the u32 version; reals are little-endian f64.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = BufWriter::new(file);
        let write = |out: &mut BufWriter<File>| -> std::io::Result<()> {
            out.write_all(SAMPLE_MAGIC)?;
            out.write_all(&SAMPLE_VERSION.to_le_bytes())?;
            out.write_all(&(self.id.len() as u64).to_le_bytes())?;
            out.write_all(self.id.as_bytes())?;
            out.write_all(&(self.thresholds.len() as u64).to_le_bytes())?;
            out.write_all(&(self.count as u64).to_le_bytes())?;
            write_features_to(out, &self.features)?;
            for t in &self.thresholds {
                out.write_all(&t.to_le_bytes())?;
            }
            out.flush()
        };
        write(&mut out).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut input = BufReader::new(file);
        let format = |m: String| Error::ModelFormat(format!("{}: {m}", path.display()));
        let mut magic = [0u8; 4];
        input
            .read_exact(&mut magic)
            .map_err(|e| Error::io(path, e))?;
        if &magic != SAMPLE_MAGIC {
            return Err(format("not a training sample file".into()));
        }
        let mut ver = [0u8; 4];
        input.read_exact(&mut ver).map_err(|e| Error::io(path, e))?;
        let ver = u32::from_le_bytes(ver);
        if ver != SAMPLE_VERSION {
            return Err(format(format!("unsupported sample version {ver}")));
        }
        let read = |input: &mut BufReader<File>| -> std::io::Result<Self> {
            let id_len = read_u64(input)? as usize;
            let mut id = vec![0u8; id_len.min(1 << 16)];
            input.read_exact(&mut id)?;
            let regions = read_u64(input)? as usize;
            let count = read_u64(input)? as usize;
            let features = read_features_from(input)?;
            let thresholds = read_f64s(input, regions.min(1 << 16))?;
            Ok(TrainSample {
                id: String::from_utf8_lossy(&id).into_owned(),
                features,
                thresholds,
                count,
            })
        };
        read(&mut input).map_err(|e| Error::io(path, e))
    }
}

/// Which decoders receive a training signal.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecoderMode {
    #[default]
    Joint,
    NmsOnly,
    CountOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Weight of the count loss relative to the region NMS loss.
    pub count_weight: f64,
    pub mode: DecoderMode,
    pub seed: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 16,
            lr: 1e-5,
            count_weight: 1.0,
            mode: DecoderMode::Joint,
            seed: 7,
        }
    }
}

impl TrainOptions {
    pub fn loss_weights(&self) -> LossWeights {
        match self.mode {
            DecoderMode::Joint => LossWeights {
                nms: 1.0,
                count: self.count_weight,
            },
            DecoderMode::NmsOnly => LossWeights {
                nms: 1.0,
                count: 0.0,
            },
            DecoderMode::CountOnly => LossWeights {
                nms: 0.0,
                count: 1.0,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("train: batch_size must be >= 1".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config("train: lr must be finite and >= 0".into()));
        }
        if !(self.count_weight >= 0.0 && self.count_weight.is_finite()) {
            return Err(Error::Config("train: count_weight must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLoss {
    pub epoch: usize,
    pub total: f64,
    pub nms: f64,
    pub count: f64,
}

/// Trains `model` in place and returns the per-epoch mean losses (measured
/// on each batch before its update).
pub fn train(
    model: &mut HatModel,
    dataset: &[TrainSample],
    opts: &TrainOptions,
) -> Result<Vec<EpochLoss>> {
    opts.validate()?;
    if dataset.is_empty() {
        return Err(Error::Invalid("empty dataset".into()));
    }
    let weights = opts.loss_weights();
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut curve = Vec::with_capacity(opts.epochs);
    let mut batch: Vec<&TrainSample> = Vec::with_capacity(opts.batch_size);
    for epoch in 0..opts.epochs {
        let mut rng = stream(opts.seed, &[2, epoch as u64]);
        order.shuffle(&mut rng);
        let mut sums = (0.0, 0.0, 0.0);
        for (step, chunk) in order.chunks(opts.batch_size).enumerate() {
            batch.clear();
            batch.extend(chunk.iter().map(|&i| &dataset[i]));
            let loss = model.loss_refs(&batch, weights)?;
            let n = chunk.len() as f64;
            sums.0 += loss.total * n;
            sums.1 += loss.nms * n;
            sums.2 += loss.count * n;
            let HatModel { params, adam, .. } = model;
            adam.update(params, &loss.gradient, opts.lr);
            if let Some(i) = params.iter().position(|p| !p.is_finite()) {
                return Err(Error::Diverged {
                    epoch,
                    step,
                    detail: format!(
                        "parameter {i} became {} (batch loss {:.6e})",
                        params[i], loss.total
                    ),
                });
            }
        }
        let n = dataset.len() as f64;
        let e = EpochLoss {
            epoch,
            total: sums.0 / n,
            nms: sums.1 / n,
            count: sums.2 / n,
        };
        log::debug!(
            "epoch {epoch}: loss {:.5} (nms {:.5}, count {:.4})",
            e.total,
            e.nms,
            e.count
        );
        curve.push(e);
    }
    Ok(curve)
}

/// Points the decoder outputs at the dataset's mean threshold label and mean
/// count before training (see [`HatModel::set_output_priors`]).
pub fn init_output_priors(model: &mut HatModel, dataset: &[TrainSample]) {
    let labels: Vec<f64> = dataset
        .iter()
        .flat_map(|s| s.thresholds.iter().copied())
        .collect();
    if labels.is_empty() {
        return;
    }
    let mean_t = labels.iter().sum::<f64>() / labels.len() as f64;
    let mean_n = dataset.iter().map(|s| s.count as f64).sum::<f64>() / dataset.len() as f64;
    model.set_output_priors(mean_t, mean_n);
}

pub fn write_loss_curve(curve: &[EpochLoss], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut text = String::from("epoch,total,nms,count\n");
    for e in curve {
        text.push_str(&format!("{},{},{},{}\n", e.epoch, e.total, e.nms, e.count));
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

const MODEL_MAGIC: &[u8; 8] = b"CROWDHAT";
pub const MODEL_VERSION: u32 = 1;

/// Binary model file: magic, version, architecture as JSON, seed, Adam step,
/// then parameters and both Adam moments as little-endian f64.
pub fn save_model(model: &HatModel, path: impl AsRef<Path>) -> Result<()> {
    save_model_versioned(model, path, MODEL_VERSION)
}

pub fn save_model_versioned(model: &HatModel, path: impl AsRef<Path>, version: u32) -> Result<()> {
    let path = path.as_ref();
    let arch = serde_json::to_vec(model.arch()).map_err(|e| Error::ModelFormat(e.to_string()))?;
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let write = |out: &mut BufWriter<File>| -> std::io::Result<()> {
        out.write_all(MODEL_MAGIC)?;
        out.write_all(&version.to_le_bytes())?;
        out.write_all(&(arch.len() as u64).to_le_bytes())?;
        out.write_all(&arch)?;
        out.write_all(&model.seed.to_le_bytes())?;
        out.write_all(&model.adam.step.to_le_bytes())?;
        out.write_all(&(model.params.len() as u64).to_le_bytes())?;
        for block in [&model.params, &model.adam.m, &model.adam.v] {
            for v in block.iter() {
                out.write_all(&v.to_le_bytes())?;
            }
        }
        out.flush()
    };
    write(&mut out).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<HatModel> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut input = BufReader::new(file);
    let io = |e| Error::io(path, e);
    let mut magic = [0u8; 8];
    input.read_exact(&mut magic).map_err(io)?;
    if &magic != MODEL_MAGIC {
        return Err(Error::ModelFormat(format!(
            "{} is not a model file",
            path.display()
        )));
    }
    let mut ver = [0u8; 4];
    input.read_exact(&mut ver).map_err(io)?;
    let ver = u32::from_le_bytes(ver);
    if ver != MODEL_VERSION {
        return Err(Error::ModelFormat(format!(
            "model version {ver} is not supported (expected {MODEL_VERSION})"
        )));
    }
    let arch_len = read_u64(&mut input).map_err(io)? as usize;
    if arch_len > 1 << 20 {
        return Err(Error::ModelFormat("architecture block too large".into()));
    }
    let mut arch = vec![0u8; arch_len];
    input.read_exact(&mut arch).map_err(io)?;
    let arch: HatArchitecture =
        serde_json::from_slice(&arch).map_err(|e| Error::ModelFormat(e.to_string()))?;
    let seed = read_u64(&mut input).map_err(io)?;
    let step = read_u64(&mut input).map_err(io)?;
    let n = read_u64(&mut input).map_err(io)? as usize;
    if n > 1 << 32 {
        return Err(Error::ModelFormat("parameter block too large".into()));
    }
    let params = read_f64s(&mut input, n).map_err(io)?;
    let m = read_f64s(&mut input, n).map_err(io)?;
    let v = read_f64s(&mut input, n).map_err(io)?;
    HatModel::from_parts(arch, params, AdamState { m, v, step }, seed)
}
