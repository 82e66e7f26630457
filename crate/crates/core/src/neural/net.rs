//! The localization network: a small strided conv stack, 1x1 convs,
//! per-location channel normalization, fully-connected layers and the
//! bounded output head `6(σ(z) - 1/2)`.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{resize, Image};

/// Output bound of the head: every component lies in `(-OUTPUT_BOUND, OUTPUT_BOUND)`.
pub const OUTPUT_BOUND: f64 = 3.0;
const NORMALIZE_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

/// Layer layout of a [`LocNet`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct LocNetArch {
    pub input_height: usize,
    pub input_width: usize,
    pub conv: Vec<ConvSpec>,
    /// Output channels of the 1x1 convolutions.
    pub pointwise: Vec<usize>,
    pub normalize: bool,
    /// Widths of the hidden fully-connected layers.
    pub hidden: Vec<usize>,
}

impl Default for LocNetArch {
    fn default() -> Self {
        let conv = [8, 16, 32, 32]
            .into_iter()
            .map(|channels| ConvSpec {
                channels,
                kernel: 3,
                stride: 2,
            })
            .collect();
        LocNetArch {
            input_height: 200,
            input_width: 125,
            conv,
            pointwise: vec![16, 8],
            normalize: true,
            hidden: vec![128, 32],
        }
    }
}

impl LocNetArch {
    /// The default layer stack on a different input size.
    pub fn with_input(height: usize, width: usize) -> Self {
        LocNetArch {
            input_height: height,
            input_width: width,
            ..LocNetArch::default()
        }
    }

    /// A single fully-connected layer from the raw input to the four outputs.
    pub fn linear(height: usize, width: usize) -> Self {
        LocNetArch {
            input_height: height,
            input_width: width,
            conv: Vec::new(),
            pointwise: Vec::new(),
            normalize: false,
            hidden: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let convs_ok = self
            .conv
            .iter()
            .all(|c| c.channels > 0 && c.kernel > 0 && c.stride > 0);
        if self.input_height == 0 || self.input_width == 0 || !convs_ok {
            return Err(Error::InvalidConfig(format!("network layout {self:?}")));
        }
        if self.pointwise.iter().chain(&self.hidden).any(|&n| n == 0) {
            return Err(Error::InvalidConfig("zero-width layer".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum OpKind {
    Conv { kernel: usize, stride: usize, pad: usize },
    Normalize,
    Dense,
}

/// One layer with its tensor geometry and parameter offsets.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Op {
    kind: OpKind,
    relu: bool,
    in_c: usize,
    in_h: usize,
    in_w: usize,
    out_c: usize,
    out_h: usize,
    out_w: usize,
    w_offset: usize,
    b_offset: usize,
}

impl Op {
    fn in_len(&self) -> usize {
        self.in_c * self.in_h * self.in_w
    }

    fn out_len(&self) -> usize {
        self.out_c * self.out_h * self.out_w
    }

    fn weight_len(&self) -> usize {
        match self.kind {
            OpKind::Conv { kernel, .. } => self.out_c * self.in_c * kernel * kernel,
            OpKind::Normalize => 0,
            OpKind::Dense => self.out_c * self.in_len(),
        }
    }

    fn fan_in(&self) -> usize {
        match self.kind {
            OpKind::Conv { kernel, .. } => self.in_c * kernel * kernel,
            OpKind::Normalize => 1,
            OpKind::Dense => self.in_len(),
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn push_op(ops: &mut Vec<Op>, offset: &mut usize, kind: OpKind, relu: bool, input: (usize, usize, usize), output: (usize, usize, usize)) {
    let mut op = Op {
        kind,
        relu,
        in_c: input.0,
        in_h: input.1,
        in_w: input.2,
        out_c: output.0,
        out_h: output.1,
        out_w: output.2,
        w_offset: *offset,
        b_offset: 0,
    };
    let wl = op.weight_len();
    let bl = if kind == OpKind::Normalize { 0 } else { op.out_c };
    op.b_offset = *offset + wl;
    *offset += wl + bl;
    ops.push(op);
}

/// Ops of a layout, the total parameter count and the conv-stack prefix
/// length.
fn build_ops(arch: &LocNetArch) -> (Vec<Op>, usize, usize) {
    let mut ops = Vec::new();
    let (mut c, mut h, mut w) = (1usize, arch.input_height, arch.input_width);
    let mut offset = 0;
    for spec in &arch.conv {
        let pad = spec.kernel / 2;
        let oh = (h + 2 * pad).saturating_sub(spec.kernel) / spec.stride + 1;
        let ow = (w + 2 * pad).saturating_sub(spec.kernel) / spec.stride + 1;
        let kind = OpKind::Conv {
            kernel: spec.kernel,
            stride: spec.stride,
            pad,
        };
        push_op(&mut ops, &mut offset, kind, true, (c, h, w), (spec.channels, oh, ow));
        c = spec.channels;
        h = oh;
        w = ow;
    }
    let backbone_len = offset;
    for &out in &arch.pointwise {
        let kind = OpKind::Conv {
            kernel: 1,
            stride: 1,
            pad: 0,
        };
        push_op(&mut ops, &mut offset, kind, true, (c, h, w), (out, h, w));
        c = out;
    }
    if arch.normalize {
        push_op(&mut ops, &mut offset, OpKind::Normalize, false, (c, h, w), (c, h, w));
    }
    let mut n = c * h * w;
    for &out in &arch.hidden {
        push_op(&mut ops, &mut offset, OpKind::Dense, true, (n, 1, 1), (out, 1, 1));
        n = out;
    }
    push_op(&mut ops, &mut offset, OpKind::Dense, false, (n, 1, 1), (4, 1, 1));
    (ops, offset, backbone_len)
}

/// Network weights (flat) with the layout they belong to.
///
/// Every mutable access bumps a generation counter, so activation caches
/// taken before an update are detected as stale.
#[derive(Clone, Debug)]
pub struct LocNet {
    arch: LocNetArch,
    ops: Vec<Op>,
    params: Vec<f64>,
    backbone_len: usize,
    generation: u64,
}

/// Intermediate activations of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    generation: u64,
    /// `acts[i]` is the input of op `i`; the last entry holds the logits.
    acts: Vec<Vec<f64>>,
    /// Per-location channel norms of each normalize op (empty otherwise).
    norms: Vec<Vec<f64>>,
}

impl ForwardCache {
    pub fn logits(&self) -> [f64; 4] {
        let z = self.acts.last().expect("non-empty cache");
        [z[0], z[1], z[2], z[3]]
    }
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Resizes a half to the network input size and standardizes it to zero
/// mean and unit variance.
pub fn prepare_input(img: &Image, arch: &LocNetArch) -> Result<Vec<f64>> {
    let r = if img.shape() == (arch.input_height, arch.input_width) {
        img.clone()
    } else {
        resize(img, arch.input_height, arch.input_width)?
    };
    let vals = r.to_f64();
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let inv = 1.0 / (var.sqrt() + 1e-8);
    Ok(vals.into_iter().map(|v| (v - mean) * inv).collect())
}

impl LocNet {
    /// All parameters zero.
    pub fn zeros(arch: LocNetArch) -> Result<Self> {
        arch.validate()?;
        let (ops, len, backbone_len) = build_ops(&arch);
        Ok(LocNet {
            arch,
            ops,
            params: vec![0.0; len],
            backbone_len,
            generation: 0,
        })
    }

    /// He-normal weights, zero biases; the output layer is scaled down so
    /// initial predictions sit near the center of the pose box.
    pub fn init<R: Rng + ?Sized>(arch: LocNetArch, rng: &mut R) -> Result<Self> {
        let mut net = LocNet::zeros(arch)?;
        let last = net.ops.len() - 1;
        for (i, op) in net.ops.clone().iter().enumerate() {
            if op.kind == OpKind::Normalize {
                continue;
            }
            let gain = if i == last { 0.1 } else { 1.0 };
            let normal = Normal::new(0.0, gain * (2.0 / op.fan_in() as f64).sqrt())
                .expect("positive standard deviation");
            for p in &mut net.params[op.w_offset..op.w_offset + op.weight_len()] {
                *p = normal.sample(rng);
            }
        }
        Ok(net)
    }

    /// Rebuilds a network from a layout and a flat parameter vector.
    pub fn from_params(arch: LocNetArch, params: Vec<f64>) -> Result<Self> {
        let mut net = LocNet::zeros(arch)?;
        if params.len() != net.params.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} parameters for a layout with {}",
                params.len(),
                net.params.len()
            )));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::InvalidConfig("non-finite network parameter".into()));
        }
        net.params = params;
        Ok(net)
    }

    pub fn arch(&self) -> &LocNetArch {
        &self.arch
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    /// Mutable parameters; invalidates earlier forward caches.
    pub fn params_mut(&mut self) -> &mut [f64] {
        self.generation += 1;
        &mut self.params
    }

    /// Number of parameters in the strided conv stack; they come first in
    /// the flat vector.
    pub fn backbone_len(&self) -> usize {
        self.backbone_len
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    /// Forward pass on a prepared input; returns the bounded output.
    pub fn forward(&self, input: &[f64]) -> Result<([f64; 4], ForwardCache)> {
        let expect = self.arch.input_height * self.arch.input_width;
        if input.len() != expect {
            return Err(Error::ShapeMismatch(format!(
                "network input has {} values, expected {expect}",
                input.len()
            )));
        }
        let mut acts = Vec::with_capacity(self.ops.len() + 1);
        let mut norms = Vec::with_capacity(self.ops.len());
        acts.push(input.to_vec());
        for op in &self.ops {
            let x = acts.last().expect("input pushed");
            let mut norm = Vec::new();
            let mut y = match op.kind {
                OpKind::Conv { kernel, stride, pad } => self.conv_forward(op, x, kernel, stride, pad),
                OpKind::Dense => self.dense_forward(op, x),
                OpKind::Normalize => normalize_forward(op, x, &mut norm),
            };
            if op.relu {
                for v in &mut y {
                    *v = v.max(0.0);
                }
            }
            norms.push(norm);
            acts.push(y);
        }
        let cache = ForwardCache {
            generation: self.generation,
            acts,
            norms,
        };
        let z = cache.logits();
        Ok((z.map(|z| 2.0 * OUTPUT_BOUND * (sigmoid(z) - 0.5)), cache))
    }

    /// Convenience: prepare an image and run the forward pass.
    pub fn predict(&self, img: &Image) -> Result<[f64; 4]> {
        let x = prepare_input(img, &self.arch)?;
        Ok(self.forward(&x)?.0)
    }

    /// Parameter gradient of `upstream · output` for the pass in `cache`.
    pub fn backward(&self, cache: &ForwardCache, upstream: &[f64; 4]) -> Result<Vec<f64>> {
        if cache.generation != self.generation {
            return Err(Error::StaleCache {
                cache: cache.generation,
                weights: self.generation,
            });
        }
        let mut grad = vec![0.0; self.params.len()];
        let z = cache.logits();
        let mut delta: Vec<f64> = (0..4)
            .map(|k| {
                let s = sigmoid(z[k]);
                upstream[k] * 2.0 * OUTPUT_BOUND * s * (1.0 - s)
            })
            .collect();
        for (i, op) in self.ops.iter().enumerate().rev() {
            let x = &cache.acts[i];
            let y = &cache.acts[i + 1];
            if op.relu {
                for (d, v) in delta.iter_mut().zip(y) {
                    if *v <= 0.0 {
                        *d = 0.0;
                    }
                }
            }
            let need_input_grad = i > 0;
            delta = match op.kind {
                OpKind::Conv { kernel, stride, pad } => {
                    self.conv_backward(op, x, &delta, kernel, stride, pad, &mut grad, need_input_grad)
                }
                OpKind::Dense => self.dense_backward(op, x, &delta, &mut grad, need_input_grad),
                OpKind::Normalize => normalize_backward(op, y, &cache.norms[i], &delta),
            };
        }
        Ok(grad)
    }

    fn conv_forward(&self, op: &Op, x: &[f64], k: usize, s: usize, p: usize) -> Vec<f64> {
        let w = &self.params[op.w_offset..op.w_offset + op.weight_len()];
        let b = &self.params[op.b_offset..op.b_offset + op.out_c];
        let (ih, iw, oh, ow) = (op.in_h as isize, op.in_w as isize, op.out_h, op.out_w);
        let mut y = vec![0.0; op.out_len()];
        for co in 0..op.out_c {
            let out = &mut y[co * oh * ow..(co + 1) * oh * ow];
            out.fill(b[co]);
            for ci in 0..op.in_c {
                let plane = &x[ci * op.in_h * op.in_w..(ci + 1) * op.in_h * op.in_w];
                for ky in 0..k {
                    for kx in 0..k {
                        let wv = w[((co * op.in_c + ci) * k + ky) * k + kx];
                        for oy in 0..oh {
                            let iy = (oy * s + ky) as isize - p as isize;
                            if iy < 0 || iy >= ih {
                                continue;
                            }
                            let row = &plane[iy as usize * op.in_w..];
                            let orow = &mut out[oy * ow..(oy + 1) * ow];
                            for (ox, o) in orow.iter_mut().enumerate() {
                                let ix = (ox * s + kx) as isize - p as isize;
                                if ix >= 0 && ix < iw {
                                    *o += wv * row[ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
        y
    }

    #[allow(clippy::too_many_arguments)]
    fn conv_backward(
        &self,
        op: &Op,
        x: &[f64],
        dy: &[f64],
        k: usize,
        s: usize,
        p: usize,
        grad: &mut [f64],
        need_input_grad: bool,
    ) -> Vec<f64> {
        let w = &self.params[op.w_offset..op.w_offset + op.weight_len()];
        let (ih, iw, oh, ow) = (op.in_h as isize, op.in_w as isize, op.out_h, op.out_w);
        let mut dx = if need_input_grad { vec![0.0; op.in_len()] } else { Vec::new() };
        for co in 0..op.out_c {
            let d = &dy[co * oh * ow..(co + 1) * oh * ow];
            grad[op.b_offset + co] += d.iter().sum::<f64>();
            for ci in 0..op.in_c {
                let base = ci * op.in_h * op.in_w;
                for ky in 0..k {
                    for kx in 0..k {
                        let wi = ((co * op.in_c + ci) * k + ky) * k + kx;
                        let wv = w[wi];
                        let mut gw = 0.0;
                        for oy in 0..oh {
                            let iy = (oy * s + ky) as isize - p as isize;
                            if iy < 0 || iy >= ih {
                                continue;
                            }
                            let row = base + iy as usize * op.in_w;
                            for ox in 0..ow {
                                let ix = (ox * s + kx) as isize - p as isize;
                                if ix < 0 || ix >= iw {
                                    continue;
                                }
                                let g = d[oy * ow + ox];
                                gw += g * x[row + ix as usize];
                                if need_input_grad {
                                    dx[row + ix as usize] += g * wv;
                                }
                            }
                        }
                        grad[op.w_offset + wi] += gw;
                    }
                }
            }
        }
        dx
    }

    fn dense_forward(&self, op: &Op, x: &[f64]) -> Vec<f64> {
        let n = op.in_len();
        let w = &self.params[op.w_offset..op.w_offset + op.weight_len()];
        let b = &self.params[op.b_offset..op.b_offset + op.out_c];
        (0..op.out_c)
            .map(|o| b[o] + w[o * n..(o + 1) * n].iter().zip(x).map(|(a, b)| a * b).sum::<f64>())
            .collect()
    }

    fn dense_backward(&self, op: &Op, x: &[f64], dy: &[f64], grad: &mut [f64], need_input_grad: bool) -> Vec<f64> {
        let n = op.in_len();
        let w = &self.params[op.w_offset..op.w_offset + op.weight_len()];
        let mut dx = if need_input_grad { vec![0.0; n] } else { Vec::new() };
        for (o, &g) in dy.iter().enumerate() {
            grad[op.b_offset + o] += g;
            if g == 0.0 {
                continue;
            }
            let gw = &mut grad[op.w_offset + o * n..op.w_offset + (o + 1) * n];
            for (gwi, xi) in gw.iter_mut().zip(x) {
                *gwi += g * xi;
            }
            if need_input_grad {
                for (dxi, wi) in dx.iter_mut().zip(&w[o * n..(o + 1) * n]) {
                    *dxi += g * wi;
                }
            }
        }
        dx
    }
}

fn normalize_forward(op: &Op, x: &[f64], norms: &mut Vec<f64>) -> Vec<f64> {
    let hw = op.in_h * op.in_w;
    let mut y = vec![0.0; x.len()];
    norms.clear();
    for loc in 0..hw {
        let n = (0..op.in_c).map(|c| x[c * hw + loc].powi(2)).sum::<f64>().sqrt();
        let d = n.max(NORMALIZE_EPS);
        for c in 0..op.in_c {
            y[c * hw + loc] = x[c * hw + loc] / d;
        }
        norms.push(n);
    }
    y
}

/// Backward of `y = x / max(‖x‖, ε)` per location, written in terms of `y`.
fn normalize_backward(op: &Op, y: &[f64], norms: &[f64], dy: &[f64]) -> Vec<f64> {
    let hw = op.in_h * op.in_w;
    let mut dx = vec![0.0; y.len()];
    for loc in 0..hw {
        let n = norms[loc];
        if n < NORMALIZE_EPS {
            for c in 0..op.in_c {
                dx[c * hw + loc] = dy[c * hw + loc] / NORMALIZE_EPS;
            }
            continue;
        }
        let dot: f64 = (0..op.in_c).map(|c| y[c * hw + loc] * dy[c * hw + loc]).sum();
        for c in 0..op.in_c {
            dx[c * hw + loc] = (dy[c * hw + loc] - y[c * hw + loc] * dot) / n;
        }
    }
    dx
}
