use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use super::arch::HatArchitecture;
use super::layers::{self, Dims};
use super::train::{AdamState, TrainSample};
use crate::compress::CompressedFeatures;
use crate::error::{Error, Result};
use crate::geometry::sigmoid;
use crate::rng::stream;

#[derive(Debug, Clone)]
struct ConvLayer {
    c_in: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
    w: usize,
    b: usize,
}

impl ConvLayer {
    fn n_weights(&self) -> usize {
        self.c_out * self.c_in * self.kh * self.kw
    }
}

#[derive(Debug, Clone)]
struct Dense {
    n_in: usize,
    n_out: usize,
    w: usize,
    b: usize,
}

#[derive(Debug, Clone)]
struct Encoder {
    layers: Vec<ConvLayer>,
    input: Dims,
    pool: (usize, usize),
}

#[derive(Debug, Clone)]
struct Mlp {
    hidden: Dense,
    out: Dense,
}

#[derive(Debug, Clone)]
struct Layout {
    enc2d: Encoder,
    enc1d: Encoder,
    local: Encoder,
    pn: Mlp,
    pc: Mlp,
    total: usize,
    /// (offset, fan_in, len) of every weight block, for initialization.
    weight_blocks: Vec<(usize, usize, usize)>,
}

struct Allocator {
    next: usize,
    weight_blocks: Vec<(usize, usize, usize)>,
}

impl Allocator {
    fn conv(&mut self, c_in: usize, c_out: usize, kh: usize, kw: usize) -> ConvLayer {
        let w = self.next;
        let n = c_out * c_in * kh * kw;
        self.weight_blocks.push((w, c_in * kh * kw, n));
        let b = w + n;
        self.next = b + c_out;
        ConvLayer {
            c_in,
            c_out,
            kh,
            kw,
            w,
            b,
        }
    }

    fn dense(&mut self, n_in: usize, n_out: usize) -> Dense {
        let w = self.next;
        self.weight_blocks.push((w, n_in, n_in * n_out));
        let b = w + n_in * n_out;
        self.next = b + n_out;
        Dense { n_in, n_out, w, b }
    }

    fn encoder(
        &mut self,
        input: Dims,
        widths: &[usize],
        kernel: (usize, usize),
        pool: (usize, usize),
    ) -> Encoder {
        let mut c_in = input.c;
        let layers = widths
            .iter()
            .map(|&c_out| {
                let l = self.conv(c_in, c_out, kernel.0, kernel.1);
                c_in = c_out;
                l
            })
            .collect();
        Encoder {
            layers,
            input,
            pool,
        }
    }

    fn mlp(&mut self, n_in: usize, hidden: usize) -> Mlp {
        Mlp {
            hidden: self.dense(n_in, hidden),
            out: self.dense(hidden, 1),
        }
    }
}

impl Layout {
    fn new(arch: &HatArchitecture) -> Self {
        let mut a = Allocator {
            next: 0,
            weight_blocks: Vec::new(),
        };
        let c = arch.in_channels;
        let s = arch.grid_size;
        let p = arch.patch_size();
        let enc2d = a.encoder(Dims::new(c, s, s), &arch.enc2d, (3, 3), (2, 2));
        let enc1d = a.encoder(Dims::new(c, 1, arch.hist_len), &arch.enc1d, (1, 3), (1, 2));
        let local = a.encoder(Dims::new(c, p, p), &arch.local_enc, (3, 3), (2, 2));
        let pn = a.mlp(arch.local_len() + arch.global_len(), arch.pn_hidden);
        let pc = a.mlp(arch.global_len(), arch.pc_hidden);
        Layout {
            enc2d,
            enc1d,
            local,
            pn,
            pc,
            total: a.next,
            weight_blocks: a.weight_blocks,
        }
    }
}

/// Intermediate values of one encoder pass, kept for backpropagation.
struct EncoderTrace {
    stage_inputs: Vec<Vec<f64>>,
    stage_dims: Vec<Dims>,
    activations: Vec<Vec<f64>>,
    pool_argmax: Vec<Vec<usize>>,
    output: Vec<f64>,
}

impl Encoder {
    fn forward(&self, params: &[f64], input: Vec<f64>) -> EncoderTrace {
        let mut x = input;
        let mut dims = self.input;
        let mut trace = EncoderTrace {
            stage_inputs: Vec::with_capacity(self.layers.len()),
            stage_dims: Vec::with_capacity(self.layers.len()),
            activations: Vec::with_capacity(self.layers.len()),
            pool_argmax: Vec::with_capacity(self.layers.len()),
            output: Vec::new(),
        };
        let last = self.layers.len() - 1;
        for (s, l) in self.layers.iter().enumerate() {
            let mut act = vec![0.0; l.c_out * dims.plane()];
            layers::conv_forward(
                &x,
                dims,
                &params[l.w..l.w + l.n_weights()],
                &params[l.b..l.b + l.c_out],
                l.c_out,
                l.kh,
                l.kw,
                &mut act,
            );
            layers::relu_inplace(&mut act);
            let act_dims = Dims::new(l.c_out, dims.h, dims.w);
            trace.stage_inputs.push(std::mem::take(&mut x));
            trace.stage_dims.push(dims);
            if s == last {
                trace.output = layers::gap_forward(&act, act_dims);
            } else {
                let (pooled, idx) =
                    layers::maxpool_forward(&act, act_dims, self.pool.0, self.pool.1);
                trace.pool_argmax.push(idx);
                x = pooled;
                dims = layers::pooled_dims(act_dims, self.pool.0, self.pool.1);
            }
            trace.activations.push(act);
        }
        trace
    }

    fn backward(
        &self,
        params: &[f64],
        trace: &EncoderTrace,
        grad_output: &[f64],
        grads: &mut [f64],
    ) {
        let last = self.layers.len() - 1;
        let mut grad_act: Vec<f64> = Vec::new();
        for s in (0..self.layers.len()).rev() {
            let l = &self.layers[s];
            let dims = trace.stage_dims[s];
            let act_dims = Dims::new(l.c_out, dims.h, dims.w);
            if s == last {
                grad_act = layers::gap_backward(grad_output, act_dims);
            }
            layers::relu_backward(&trace.activations[s], &mut grad_act);

            let mut grad_in = (s > 0).then(|| vec![0.0; dims.numel()]);
            let (gw, rest) = grads[l.w..].split_at_mut(l.n_weights());
            let gb = &mut rest[l.b - l.w - l.n_weights()..][..l.c_out];
            layers::conv_backward(
                &trace.stage_inputs[s],
                dims,
                &params[l.w..l.w + l.n_weights()],
                l.c_out,
                l.kh,
                l.kw,
                &grad_act,
                grad_in.as_deref_mut(),
                gw,
                gb,
            );
            if let Some(g_pooled) = grad_in {
                // Route through the pool that produced this stage's input.
                let prev = &self.layers[s - 1];
                let prev_dims = trace.stage_dims[s - 1];
                let mut g = vec![0.0; prev.c_out * prev_dims.plane()];
                layers::maxpool_backward(&g_pooled, &trace.pool_argmax[s - 1], &mut g);
                grad_act = g;
            }
        }
    }
}

struct MlpTrace {
    input: Vec<f64>,
    hidden: Vec<f64>,
    z: f64,
}

impl Mlp {
    fn forward(&self, params: &[f64], input: Vec<f64>) -> MlpTrace {
        let h = &self.hidden;
        let mut hidden = layers::dense_forward(
            &input,
            &params[h.w..h.w + h.n_in * h.n_out],
            &params[h.b..h.b + h.n_out],
        );
        layers::relu_inplace(&mut hidden);
        let o = &self.out;
        let z =
            layers::dense_forward(&hidden, &params[o.w..o.w + o.n_in], &params[o.b..o.b + 1])[0];
        MlpTrace { input, hidden, z }
    }

    fn backward(&self, params: &[f64], trace: &MlpTrace, dz: f64, grads: &mut [f64]) -> Vec<f64> {
        let o = &self.out;
        let (gw, rest) = grads[o.w..].split_at_mut(o.n_in);
        let mut d_hidden = layers::dense_backward(
            &trace.hidden,
            &params[o.w..o.w + o.n_in],
            &[dz],
            gw,
            &mut rest[o.b - o.w - o.n_in..][..1],
        );
        layers::relu_backward(&trace.hidden, &mut d_hidden);
        let h = &self.hidden;
        let nw = h.n_in * h.n_out;
        let (gw, rest) = grads[h.w..].split_at_mut(nw);
        layers::dense_backward(
            &trace.input,
            &params[h.w..h.w + nw],
            &d_hidden,
            gw,
            &mut rest[h.b - h.w - nw..][..h.n_out],
        )
    }
}

/// Region thresholds and count for one scene.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub thresholds: Vec<f64>,
    pub count: f64,
}

/// Relative weights of the region NMS loss and the count loss.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossWeights {
    pub nms: f64,
    pub count: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            nms: 1.0,
            count: 1.0,
        }
    }
}

/// Batch-mean loss, split by term, with its gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct LossValue {
    pub total: f64,
    pub nms: f64,
    pub count: f64,
    pub gradient: Vec<f64>,
}

struct SampleTrace {
    g2d: EncoderTrace,
    g1d: EncoderTrace,
    locals: Vec<EncoderTrace>,
    pn: Vec<MlpTrace>,
    thresholds: Vec<f64>,
    pc: MlpTrace,
    count: f64,
}

/// The network: two global encoders, a shared local encoder and the NMS and
/// count decoders, with all parameters in one flat vector.
#[derive(Debug, Clone)]
pub struct HatModel {
    arch: HatArchitecture,
    layout: Layout,
    pub params: Vec<f64>,
    pub adam: AdamState,
    pub seed: u64,
}

impl PartialEq for HatModel {
    fn eq(&self, other: &Self) -> bool {
        self.arch == other.arch
            && self.params == other.params
            && self.adam == other.adam
            && self.seed == other.seed
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

impl HatModel {
    /// He-normal weights drawn from `seed`, zero biases.
    pub fn new(arch: HatArchitecture, seed: u64) -> Result<Self> {
        let mut model = Self::zeros(arch)?;
        model.seed = seed;
        let mut rng = stream(seed, &[3]);
        for &(offset, fan_in, len) in &model.layout.weight_blocks {
            let std = (2.0 / fan_in as f64).sqrt();
            for p in &mut model.params[offset..offset + len] {
                let z: f64 = rng.sample(StandardNormal);
                *p = std * z;
            }
        }
        Ok(model)
    }

    pub fn zeros(arch: HatArchitecture) -> Result<Self> {
        arch.validate()?;
        let layout = Layout::new(&arch);
        let n = layout.total;
        Ok(Self {
            arch,
            layout,
            params: vec![0.0; n],
            adam: AdamState::new(n),
            seed: 0,
        })
    }

    pub(crate) fn from_parts(
        arch: HatArchitecture,
        params: Vec<f64>,
        adam: AdamState,
        seed: u64,
    ) -> Result<Self> {
        let mut model = Self::zeros(arch)?;
        if params.len() != model.params.len()
            || adam.m.len() != params.len()
            || adam.v.len() != params.len()
        {
            return Err(Error::ModelFormat(format!(
                "architecture needs {} parameters, file holds {}",
                model.params.len(),
                params.len()
            )));
        }
        model.params = params;
        model.adam = adam;
        model.seed = seed;
        Ok(model)
    }

    /// Sets the decoder output biases so that, with the hidden layers
    /// ignored, the NMS decoder predicts `threshold` and the count decoder
    /// predicts `count`. Starting from the label means keeps the first Adam
    /// steps from driving the threshold sigmoid into saturation.
    pub fn set_output_priors(&mut self, threshold: f64, count: f64) {
        let t = threshold.clamp(1e-3, 1.0 - 1e-3);
        self.params[self.layout.pn.out.b] = (t / (1.0 - t)).ln();
        // inverse softplus
        let y = (count / self.arch.count_scale).max(1e-3);
        self.params[self.layout.pc.out.b] = if y > 30.0 { y } else { y.exp_m1().ln() };
    }

    pub fn arch(&self) -> &HatArchitecture {
        &self.arch
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    fn check_2d(&self, t2d: &[f64]) -> Result<()> {
        let a = &self.arch;
        let want = a.in_channels * a.grid_size * a.grid_size;
        if t2d.len() != want {
            return Err(Error::Shape(format!(
                "t2d has {} values, expected C x S x S = {} x {} x {}",
                t2d.len(),
                a.in_channels,
                a.grid_size,
                a.grid_size
            )));
        }
        Ok(())
    }

    fn check_1d(&self, t1d: &[f64]) -> Result<()> {
        let a = &self.arch;
        if t1d.len() != a.in_channels * a.hist_len {
            return Err(Error::Shape(format!(
                "t1d has {} values, expected C x L = {} x {}",
                t1d.len(),
                a.in_channels,
                a.hist_len
            )));
        }
        Ok(())
    }

    /// `log(1 + x * S^2)` for the spatial input.
    fn normalize_2d(&self, t2d: &[f64]) -> Vec<f64> {
        let s2 = (self.arch.grid_size * self.arch.grid_size) as f64;
        t2d.iter().map(|v| (v * s2).ln_1p()).collect()
    }

    /// `log(1 + x)` for the histograms.
    fn normalize_1d(t1d: &[f64]) -> Vec<f64> {
        t1d.iter().map(|v| v.ln_1p()).collect()
    }

    /// Splits a normalized `C x S x S` tensor into `k x k` patches, row-major
    /// over regions (y-major, then x).
    fn patches(&self, t2d: &[f64]) -> Vec<Vec<f64>> {
        let a = &self.arch;
        let (s, p, k, c) = (a.grid_size, a.patch_size(), a.k, a.in_channels);
        (0..k * k)
            .map(|r| {
                let (px, py) = (r % k, r / k);
                let mut patch = Vec::with_capacity(c * p * p);
                for ch in 0..c {
                    for y in 0..p {
                        let row = ch * s * s + (py * p + y) * s + px * p;
                        patch.extend_from_slice(&t2d[row..row + p]);
                    }
                }
                patch
            })
            .collect()
    }

    fn global(&self, norm2d: Vec<f64>, norm1d: Vec<f64>) -> (EncoderTrace, EncoderTrace, Vec<f64>) {
        let g2d = self.layout.enc2d.forward(&self.params, norm2d);
        let g1d = self.layout.enc1d.forward(&self.params, norm1d);
        let mut fg = g2d.output.clone();
        fg.extend_from_slice(&g1d.output);
        (g2d, g1d, fg)
    }

    /// Global feature: pooled 2D encoding followed by pooled 1D encoding.
    pub fn forward_global(&self, t2d: &[f64], t1d: &[f64]) -> Result<Vec<f64>> {
        self.check_2d(t2d)?;
        self.check_1d(t1d)?;
        Ok(self
            .global(self.normalize_2d(t2d), Self::normalize_1d(t1d))
            .2)
    }

    /// One local feature per region.
    pub fn forward_local(&self, t2d: &[f64]) -> Result<Vec<Vec<f64>>> {
        self.check_2d(t2d)?;
        Ok(self
            .patches(&self.normalize_2d(t2d))
            .into_iter()
            .map(|p| self.layout.local.forward(&self.params, p).output)
            .collect())
    }

    pub fn predict_thresholds(&self, global: &[f64], locals: &[Vec<f64>]) -> Result<Vec<f64>> {
        self.check_features(global, locals)?;
        Ok(locals
            .iter()
            .map(|fl| {
                let mut input = fl.clone();
                input.extend_from_slice(global);
                sigmoid(self.layout.pn.forward(&self.params, input).z)
            })
            .collect())
    }

    pub fn predict_count(&self, global: &[f64]) -> Result<f64> {
        self.check_features(global, &[])?;
        let z = self.layout.pc.forward(&self.params, global.to_vec()).z;
        Ok(self.arch.count_scale * layers::softplus(z))
    }

    fn check_features(&self, global: &[f64], locals: &[Vec<f64>]) -> Result<()> {
        if global.len() != self.arch.global_len() {
            return Err(Error::Shape(format!(
                "global feature has length {}, expected {}",
                global.len(),
                self.arch.global_len()
            )));
        }
        if locals.len() > self.arch.regions()
            || locals.iter().any(|l| l.len() != self.arch.local_len())
        {
            return Err(Error::Shape(format!(
                "expected at most {} local features of length {}",
                self.arch.regions(),
                self.arch.local_len()
            )));
        }
        Ok(())
    }

    pub fn infer(&self, features: &CompressedFeatures) -> Result<Prediction> {
        self.check_compressed(features)?;
        let trace = self.trace(&features.t2d, &features.t1d);
        Ok(Prediction {
            thresholds: trace.thresholds,
            count: trace.count,
        })
    }

    fn check_compressed(&self, f: &CompressedFeatures) -> Result<()> {
        let a = &self.arch;
        if f.channels != a.in_channels || f.grid_size != a.grid_size || f.hist_len != a.hist_len {
            return Err(Error::Shape(format!(
                "features are C={}, S={}, L={}; model expects C={}, S={}, L={}",
                f.channels, f.grid_size, f.hist_len, a.in_channels, a.grid_size, a.hist_len
            )));
        }
        self.check_2d(&f.t2d)?;
        self.check_1d(&f.t1d)
    }

    fn trace(&self, t2d: &[f64], t1d: &[f64]) -> SampleTrace {
        let norm2d = self.normalize_2d(t2d);
        let patches = self.patches(&norm2d);
        let (g2d, g1d, fg) = self.global(norm2d, Self::normalize_1d(t1d));
        let locals: Vec<EncoderTrace> = patches
            .into_iter()
            .map(|p| self.layout.local.forward(&self.params, p))
            .collect();
        let pn: Vec<MlpTrace> = locals
            .iter()
            .map(|l| {
                let mut input = l.output.clone();
                input.extend_from_slice(&fg);
                self.layout.pn.forward(&self.params, input)
            })
            .collect();
        let thresholds = pn.iter().map(|t| sigmoid(t.z)).collect();
        let pc = self.layout.pc.forward(&self.params, fg);
        let count = self.arch.count_scale * layers::softplus(pc.z);
        SampleTrace {
            g2d,
            g1d,
            locals,
            pn,
            thresholds,
            pc,
            count,
        }
    }

    fn backward(&self, trace: &SampleTrace, d_thresholds: &[f64], d_count: f64) -> Vec<f64> {
        let l = &self.layout;
        let mut grads = vec![0.0; self.params.len()];
        let mut d_global = vec![0.0; self.arch.global_len()];

        let dz = d_count * self.arch.count_scale * sigmoid(trace.pc.z);
        if dz != 0.0 {
            let d = l.pc.backward(&self.params, &trace.pc, dz, &mut grads);
            for (a, b) in d_global.iter_mut().zip(d) {
                *a += b;
            }
        }

        let n_local = self.arch.local_len();
        for (r, (&t, &dt)) in trace.thresholds.iter().zip(d_thresholds).enumerate() {
            let dz = dt * t * (1.0 - t);
            if dz == 0.0 {
                continue;
            }
            let d_in = l.pn.backward(&self.params, &trace.pn[r], dz, &mut grads);
            for (a, b) in d_global.iter_mut().zip(&d_in[n_local..]) {
                *a += b;
            }
            l.local
                .backward(&self.params, &trace.locals[r], &d_in[..n_local], &mut grads);
        }

        let n2 = self.arch.enc2d.last().copied().unwrap_or(0);
        l.enc2d
            .backward(&self.params, &trace.g2d, &d_global[..n2], &mut grads);
        l.enc1d
            .backward(&self.params, &trace.g1d, &d_global[n2..], &mut grads);
        grads
    }

    fn check_sample(&self, s: &TrainSample) -> Result<()> {
        self.check_compressed(&s.features)?;
        if s.thresholds.len() != self.arch.regions() {
            return Err(Error::Shape(format!(
                "sample `{}` has {} threshold labels, expected {}",
                s.id,
                s.thresholds.len(),
                self.arch.regions()
            )));
        }
        Ok(())
    }

    fn sample_loss(
        &self,
        s: &TrainSample,
        weights: LossWeights,
        with_grad: bool,
    ) -> Result<(f64, f64, Option<Vec<f64>>)> {
        let trace = self.trace(&s.features.t2d, &s.features.t1d);
        let kk = self.arch.regions() as f64;
        let nms = trace
            .thresholds
            .iter()
            .zip(&s.thresholds)
            .map(|(p, t)| (p - t).abs())
            .sum::<f64>()
            / kk;
        let count_err = trace.count - s.count as f64;
        let count = count_err.abs();
        if !(nms.is_finite() && count.is_finite()) {
            return Err(Error::NonFiniteLoss {
                sample: s.id.clone(),
            });
        }
        let grad = with_grad.then(|| {
            let d_thr: Vec<f64> = trace
                .thresholds
                .iter()
                .zip(&s.thresholds)
                .map(|(p, t)| weights.nms * sign(p - t) / kk)
                .collect();
            self.backward(&trace, &d_thr, weights.count * sign(count_err))
        });
        Ok((nms, count, grad))
    }

    /// Batch-mean of `w_nms * L_nms + w_count * L_count`, with gradient.
    /// `|x|` has subgradient 0 at 0.
    pub fn loss(&self, batch: &[TrainSample], weights: LossWeights) -> Result<LossValue> {
        let refs: Vec<&TrainSample> = batch.iter().collect();
        self.batch_loss(&refs, weights, true)
    }

    pub(crate) fn loss_refs(
        &self,
        batch: &[&TrainSample],
        weights: LossWeights,
    ) -> Result<LossValue> {
        self.batch_loss(batch, weights, true)
    }

    /// Same value as [`HatModel::loss`] without the backward pass.
    pub fn loss_value(&self, batch: &[TrainSample], weights: LossWeights) -> Result<LossValue> {
        let refs: Vec<&TrainSample> = batch.iter().collect();
        self.batch_loss(&refs, weights, false)
    }

    fn batch_loss(
        &self,
        batch: &[&TrainSample],
        weights: LossWeights,
        with_grad: bool,
    ) -> Result<LossValue> {
        if batch.is_empty() {
            return Err(Error::Invalid("loss over an empty batch".into()));
        }
        for s in batch.iter().copied() {
            self.check_sample(s)?;
        }
        let per_sample: Vec<(f64, f64, Option<Vec<f64>>)> = batch
            .par_iter()
            .map(|s| self.sample_loss(s, weights, with_grad))
            .collect::<Result<_>>()?;

        // Fixed-order reduction keeps results independent of the thread count.
        let n = batch.len() as f64;
        let mut out = LossValue {
            total: 0.0,
            nms: 0.0,
            count: 0.0,
            gradient: if with_grad {
                vec![0.0; self.params.len()]
            } else {
                Vec::new()
            },
        };
        for (nms, count, grad) in per_sample {
            out.nms += nms;
            out.count += count;
            if let Some(g) = grad {
                for (a, b) in out.gradient.iter_mut().zip(g) {
                    *a += b;
                }
            }
        }
        out.nms /= n;
        out.count /= n;
        out.total = weights.nms * out.nms + weights.count * out.count;
        for g in &mut out.gradient {
            *g /= n;
        }
        Ok(out)
    }
}
