//! Forward and backward kernels for the handful of layer types the network
//! uses. Tensors are flat `f64` slices in `(channel, row, column)` order; 1D
//! signals are treated as a single row.

/// Spatial extent of a feature map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dims {
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Dims {
    pub fn new(c: usize, h: usize, w: usize) -> Self {
        Self { c, h, w }
    }

    pub fn numel(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }
}

/// Zero-padded "same" convolution with an odd `kh x kw` kernel.
///
/// `weight` is laid out `(out, in, kh, kw)`.
#[allow(clippy::too_many_arguments)]
pub fn conv_forward(
    input: &[f64],
    dims: Dims,
    weight: &[f64],
    bias: &[f64],
    c_out: usize,
    kh: usize,
    kw: usize,
    out: &mut [f64],
) {
    let Dims { c: c_in, h, w } = dims;
    let plane = h * w;
    debug_assert_eq!(out.len(), c_out * plane);
    for o in 0..c_out {
        let dst = &mut out[o * plane..(o + 1) * plane];
        dst.fill(bias[o]);
        for i in 0..c_in {
            let src = &input[i * plane..(i + 1) * plane];
            for ky in 0..kh {
                let dy = ky as isize - (kh / 2) as isize;
                let (y0, y1) = valid_range(h, dy);
                for kx in 0..kw {
                    let wv = weight[((o * c_in + i) * kh + ky) * kw + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    let dx = kx as isize - (kw / 2) as isize;
                    let (x0, x1) = valid_range(w, dx);
                    for y in y0..y1 {
                        let sy = (y as isize + dy) as usize;
                        let s = &src[sy * w + (x0 as isize + dx) as usize..][..x1 - x0];
                        let d = &mut dst[y * w + x0..y * w + x1];
                        for (dv, sv) in d.iter_mut().zip(s) {
                            *dv += wv * sv;
                        }
                    }
                }
            }
        }
    }
}

/// Accumulates weight and bias gradients, and the input gradient when
/// `grad_in` is given.
#[allow(clippy::too_many_arguments)]
pub fn conv_backward(
    input: &[f64],
    dims: Dims,
    weight: &[f64],
    c_out: usize,
    kh: usize,
    kw: usize,
    grad_out: &[f64],
    mut grad_in: Option<&mut [f64]>,
    grad_w: &mut [f64],
    grad_b: &mut [f64],
) {
    let Dims { c: c_in, h, w } = dims;
    let plane = h * w;
    for o in 0..c_out {
        let g = &grad_out[o * plane..(o + 1) * plane];
        grad_b[o] += g.iter().sum::<f64>();
        for i in 0..c_in {
            let src = &input[i * plane..(i + 1) * plane];
            for ky in 0..kh {
                let dy = ky as isize - (kh / 2) as isize;
                let (y0, y1) = valid_range(h, dy);
                for kx in 0..kw {
                    let widx = ((o * c_in + i) * kh + ky) * kw + kx;
                    let wv = weight[widx];
                    let dx = kx as isize - (kw / 2) as isize;
                    let (x0, x1) = valid_range(w, dx);
                    let mut acc = 0.0;
                    for y in y0..y1 {
                        let sy = (y as isize + dy) as usize;
                        let soff = sy * w + (x0 as isize + dx) as usize;
                        let gr = &g[y * w + x0..y * w + x1];
                        let sr = &src[soff..soff + (x1 - x0)];
                        acc += gr.iter().zip(sr).map(|(a, b)| a * b).sum::<f64>();
                        if let Some(gi) = grad_in.as_deref_mut() {
                            let gi = &mut gi[i * plane + soff..i * plane + soff + (x1 - x0)];
                            for (d, gv) in gi.iter_mut().zip(gr) {
                                *d += wv * gv;
                            }
                        }
                    }
                    grad_w[widx] += acc;
                }
            }
        }
    }
}

/// Output positions `y` for which `y + offset` stays inside `[0, n)`.
fn valid_range(n: usize, offset: isize) -> (usize, usize) {
    let lo = (-offset).max(0) as usize;
    let hi = (n as isize - offset.max(0)).max(lo as isize) as usize;
    (lo.min(n), hi.min(n))
}

pub fn relu_inplace(x: &mut [f64]) {
    for v in x {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// Zeroes `grad` wherever the ReLU output was not positive.
pub fn relu_backward(activated: &[f64], grad: &mut [f64]) {
    for (g, a) in grad.iter_mut().zip(activated) {
        if *a <= 0.0 {
            *g = 0.0;
        }
    }
}

pub fn pooled_dims(dims: Dims, ph: usize, pw: usize) -> Dims {
    Dims::new(dims.c, dims.h / ph, dims.w / pw)
}

/// Non-overlapping max pooling with floor semantics. Returns the flat input
/// index chosen for every output cell (first maximum wins).
pub fn maxpool_forward(input: &[f64], dims: Dims, ph: usize, pw: usize) -> (Vec<f64>, Vec<usize>) {
    let od = pooled_dims(dims, ph, pw);
    let mut out = Vec::with_capacity(od.numel());
    let mut idx = Vec::with_capacity(od.numel());
    for c in 0..dims.c {
        let base = c * dims.plane();
        for oy in 0..od.h {
            for ox in 0..od.w {
                let mut best = f64::NEG_INFINITY;
                let mut best_i = base;
                for py in 0..ph {
                    for px in 0..pw {
                        let i = base + (oy * ph + py) * dims.w + ox * pw + px;
                        if input[i] > best {
                            best = input[i];
                            best_i = i;
                        }
                    }
                }
                out.push(best);
                idx.push(best_i);
            }
        }
    }
    (out, idx)
}

pub fn maxpool_backward(grad_out: &[f64], argmax: &[usize], grad_in: &mut [f64]) {
    for (g, &i) in grad_out.iter().zip(argmax) {
        grad_in[i] += g;
    }
}

pub fn gap_forward(input: &[f64], dims: Dims) -> Vec<f64> {
    let n = dims.plane() as f64;
    input
        .chunks(dims.plane())
        .map(|p| p.iter().sum::<f64>() / n)
        .collect()
}

pub fn gap_backward(grad_out: &[f64], dims: Dims) -> Vec<f64> {
    let n = dims.plane() as f64;
    grad_out
        .iter()
        .flat_map(|g| std::iter::repeat_n(g / n, dims.plane()))
        .collect()
}

/// `out = weight * input + bias`, with `weight` laid out `(n_out, n_in)`.
pub fn dense_forward(input: &[f64], weight: &[f64], bias: &[f64]) -> Vec<f64> {
    let n_in = input.len();
    bias.iter()
        .enumerate()
        .map(|(o, b)| {
            b + weight[o * n_in..(o + 1) * n_in]
                .iter()
                .zip(input)
                .map(|(w, x)| w * x)
                .sum::<f64>()
        })
        .collect()
}

/// Accumulates parameter gradients and returns the input gradient.
pub fn dense_backward(
    input: &[f64],
    weight: &[f64],
    grad_out: &[f64],
    grad_w: &mut [f64],
    grad_b: &mut [f64],
) -> Vec<f64> {
    let n_in = input.len();
    let mut grad_in = vec![0.0; n_in];
    for (o, g) in grad_out.iter().enumerate() {
        grad_b[o] += g;
        if *g == 0.0 {
            continue;
        }
        let row = o * n_in..(o + 1) * n_in;
        for ((gw, x), (gi, w)) in grad_w[row.clone()]
            .iter_mut()
            .zip(input)
            .zip(grad_in.iter_mut().zip(&weight[row]))
        {
            *gw += g * x;
            *gi += g * w;
        }
    }
    grad_in
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}
