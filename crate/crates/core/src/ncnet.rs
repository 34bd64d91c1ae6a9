//! Neighbourhood consensus network.
//!
//! A stack of zero-padded, stride-1 4D convolutions (cross-correlation
//! semantics), each followed by ReLU, applied symmetrically to a
//! correlation volume and its pair transpose.
//!
//! Two convolution routes are kept side by side. [`conv4d_direct`] is the
//! literal six-loop definition and serves as the reference.
//! [`conv4d_aggregated`] sums `k` 3D convolutions over slices along the
//! first axis; each 3D convolution runs on a zero-padded copy of the input
//! slice so that every kernel tap becomes one contiguous multiply-add over
//! a flat buffer.

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::correlation::{CorrTensor, Stage};
use crate::error::{NcError, Result};
use crate::features::ByteReader;
use crate::tensor4::Tensor4;

pub const WEIGHTS_MAGIC: [u8; 4] = *b"NCW1";

/// One 4D convolution layer; weights are `[out][in][k][k][k][k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv4dLayer {
    pub in_ch: usize,
    pub out_ch: usize,
    pub k: usize,
    pub weights: Vec<f32>,
    pub bias: Vec<f32>,
}

impl Conv4dLayer {
    pub fn new(
        in_ch: usize,
        out_ch: usize,
        k: usize,
        weights: Vec<f32>,
        bias: Vec<f32>,
    ) -> Result<Self> {
        if k % 2 == 0 {
            return Err(NcError::InvalidArgument(format!(
                "kernel size must be odd, got {k}"
            )));
        }
        if in_ch == 0 || out_ch == 0 {
            return Err(NcError::InvalidArgument(
                "channel counts must be positive".into(),
            ));
        }
        let n = out_ch * in_ch * k.pow(4);
        if weights.len() != n || bias.len() != out_ch {
            return Err(NcError::Shape(format!(
                "layer {in_ch}->{out_ch} k={k} needs {n} weights and {out_ch} biases, got {} and {}",
                weights.len(),
                bias.len()
            )));
        }
        Ok(Self {
            in_ch,
            out_ch,
            k,
            weights,
            bias,
        })
    }

    pub fn zeros(in_ch: usize, out_ch: usize, k: usize) -> Result<Self> {
        Self::new(
            in_ch,
            out_ch,
            k,
            vec![0.0; out_ch * in_ch * k.pow(4)],
            vec![0.0; out_ch],
        )
    }

    /// Single-channel layer whose kernel is 1 at the center: the identity map.
    pub fn delta(k: usize) -> Result<Self> {
        let mut l = Self::zeros(1, 1, k)?;
        let r = k / 2;
        let center = ((r * k + r) * k + r) * k + r;
        l.weights[center] = 1.0;
        Ok(l)
    }

    #[inline]
    pub fn taps(&self) -> usize {
        self.k.pow(4)
    }

    #[inline]
    fn kernel(&self, o: usize, i: usize) -> &[f32] {
        let t = self.taps();
        let base = (o * self.in_ch + i) * t;
        &self.weights[base..base + t]
    }

    /// Layer computing the input gradient: kernel flipped, channels swapped,
    /// no bias.
    pub(crate) fn transposed(&self) -> Conv4dLayer {
        let t = self.taps();
        let mut w = vec![0.0; self.weights.len()];
        for o in 0..self.out_ch {
            for i in 0..self.in_ch {
                let src = self.kernel(o, i);
                let base = (i * self.out_ch + o) * t;
                for (n, &v) in src.iter().enumerate() {
                    w[base + t - 1 - n] = v;
                }
            }
        }
        Conv4dLayer {
            in_ch: self.out_ch,
            out_ch: self.in_ch,
            k: self.k,
            weights: w,
            bias: vec![0.0; self.in_ch],
        }
    }

    fn check_input(&self, input: &Tensor4) -> Result<()> {
        if input.channels() != self.in_ch {
            return Err(NcError::ChannelMismatch {
                expected: self.in_ch,
                actual: input.channels(),
            });
        }
        Ok(())
    }
}

/// Reference 4D convolution: zero padding, stride 1, output dims equal
/// input dims.
pub fn conv4d_direct(input: &Tensor4, layer: &Conv4dLayer) -> Result<Tensor4> {
    layer.check_input(input)?;
    let dims = input.dims();
    let k = layer.k;
    let r = (k / 2) as isize;
    let mut out = Tensor4::zeros(layer.out_ch, dims);
    let inside = |v: isize, n: usize| v >= 0 && (v as usize) < n;
    for o in 0..layer.out_ch {
        for p0 in 0..dims[0] {
            for p1 in 0..dims[1] {
                for p2 in 0..dims[2] {
                    for p3 in 0..dims[3] {
                        let mut acc = layer.bias[o];
                        for i in 0..layer.in_ch {
                            let ker = layer.kernel(o, i);
                            let mut n = 0;
                            for a in 0..k {
                                for b in 0..k {
                                    for c in 0..k {
                                        for d in 0..k {
                                            let q = [
                                                p0 as isize + a as isize - r,
                                                p1 as isize + b as isize - r,
                                                p2 as isize + c as isize - r,
                                                p3 as isize + d as isize - r,
                                            ];
                                            if q.iter().zip(dims).all(|(&v, n)| inside(v, n)) {
                                                acc += ker[n] * input.get(i, q.map(|v| v as usize));
                                            }
                                            n += 1;
                                        }
                                    }
                                }
                            }
                        }
                        out.set(o, [p0, p1, p2, p3], acc);
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Zero-padded copy of every `(channel, d1)` 3D slice, padded by `r` on the
/// last three axes, plus the index arithmetic shared by the kernels below.
pub(crate) struct PaddedSlices {
    dims: [usize; 4],
    r: usize,
    /// padded extents of axes 2..4
    p: [usize; 3],
    data: Vec<f32>,
}

impl PaddedSlices {
    pub(crate) fn new(input: &Tensor4, r: usize) -> Self {
        let dims = input.dims();
        let p = [dims[1] + 2 * r, dims[2] + 2 * r, dims[3] + 2 * r];
        let slice = p[0] * p[1] * p[2];
        let mut data = vec![0.0; input.channels() * dims[0] * slice];
        let src = input.data();
        let mut s = 0;
        for ch in 0..input.channels() {
            for q0 in 0..dims[0] {
                let base = (ch * dims[0] + q0) * slice;
                for x in 0..dims[1] {
                    for y in 0..dims[2] {
                        let o = base + ((x + r) * p[1] + y + r) * p[2] + r;
                        data[o..o + dims[3]].copy_from_slice(&src[s..s + dims[3]]);
                        s += dims[3];
                    }
                }
            }
        }
        Self { dims, r, p, data }
    }

    #[inline]
    fn slice_len(&self) -> usize {
        self.p[0] * self.p[1] * self.p[2]
    }

    #[inline]
    fn slice(&self, ch: usize, q0: usize) -> &[f32] {
        let n = self.slice_len();
        let base = (ch * self.dims[0] + q0) * n;
        &self.data[base..base + n]
    }

    /// Length of the flat run covering every valid output position when
    /// outputs are laid out with the padded strides of axes 3 and 4.
    #[inline]
    fn run_len(&self) -> usize {
        ((self.dims[1] - 1) * self.p[1] + self.dims[2] - 1) * self.p[2] + self.dims[3]
    }

    /// Flat offset of kernel tap `(b, c, d)` inside a padded slice.
    #[inline]
    fn tap_offset(&self, b: usize, c: usize, d: usize) -> usize {
        (b * self.p[1] + c) * self.p[2] + d
    }

    /// Scatters a dense `[d2][d3][d4]` slice into the strided run layout.
    fn to_run(&self, dense: &[f32], run: &mut [f32]) {
        run.fill(0.0);
        let [_, d2, d3, d4] = self.dims;
        let mut s = 0;
        for x in 0..d2 {
            for y in 0..d3 {
                let o = (x * self.p[1] + y) * self.p[2];
                run[o..o + d4].copy_from_slice(&dense[s..s + d4]);
                s += d4;
            }
        }
    }

    /// Gathers the valid positions of a run back to a dense slice, adding `bias`.
    fn from_run(&self, run: &[f32], dense: &mut [f32], bias: f32) {
        let [_, d2, d3, d4] = self.dims;
        let mut s = 0;
        for x in 0..d2 {
            for y in 0..d3 {
                let o = (x * self.p[1] + y) * self.p[2];
                for (dst, &v) in dense[s..s + d4].iter_mut().zip(&run[o..o + d4]) {
                    *dst = v + bias;
                }
                s += d4;
            }
        }
    }
}

#[inline]
fn axpy(acc: &mut [f32], w: f32, x: &[f32]) {
    for (a, &v) in acc.iter_mut().zip(x) {
        *a += w * v;
    }
}

#[inline]
fn dot(a: &[f32], b: &[f32]) -> f32 {
    // eight lanes so the compiler can keep the reduction in vector registers
    let mut lanes = [0.0f32; 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for n in 0..8 {
            lanes[n] += x[n] * y[n];
        }
    }
    let mut s: f32 = lanes.iter().sum();
    for (x, y) in ra.iter().zip(rb) {
        s += x * y;
    }
    s
}

/// 4D convolution assembled from 3D convolutions over first-axis slices.
/// Numerically equivalent to [`conv4d_direct`].
pub fn conv4d_aggregated(input: &Tensor4, layer: &Conv4dLayer) -> Result<Tensor4> {
    layer.check_input(input)?;
    let padded = PaddedSlices::new(input, layer.k / 2);
    Ok(conv_padded(&padded, layer, true))
}

fn conv_padded(padded: &PaddedSlices, layer: &Conv4dLayer, with_bias: bool) -> Tensor4 {
    let dims = padded.dims;
    let k = layer.k;
    let r = padded.r;
    let run = padded.run_len();
    let offsets: Vec<usize> = (0..k * k * k)
        .map(|n| padded.tap_offset(n / (k * k), n / k % k, n % k))
        .collect();
    let k3 = k * k * k;
    let mut out = Tensor4::zeros(layer.out_ch, dims);
    let dense_len = dims[1] * dims[2] * dims[3];
    let mut acc = vec![0.0f32; run];
    for o in 0..layer.out_ch {
        for p0 in 0..dims[0] {
            acc.fill(0.0);
            for a in 0..k {
                let q0 = p0 as isize + a as isize - r as isize;
                if q0 < 0 || q0 as usize >= dims[0] {
                    continue;
                }
                for i in 0..layer.in_ch {
                    let src = padded.slice(i, q0 as usize);
                    let ker = &layer.kernel(o, i)[a * k3..(a + 1) * k3];
                    for (&w, &off) in ker.iter().zip(&offsets) {
                        if w != 0.0 {
                            axpy(&mut acc, w, &src[off..off + run]);
                        }
                    }
                }
            }
            let bias = if with_bias { layer.bias[o] } else { 0.0 };
            let base = (o * dims[0] + p0) * dense_len;
            padded.from_run(&acc, &mut out.data_mut()[base..base + dense_len], bias);
        }
    }
    out
}

/// Gradient of a convolution's output with respect to its input.
pub(crate) fn conv4d_input_grad(grad_out: &Tensor4, layer: &Conv4dLayer) -> Tensor4 {
    let t = layer.transposed();
    let padded = PaddedSlices::new(grad_out, t.k / 2);
    conv_padded(&padded, &t, false)
}

/// Gradients with respect to a layer's weights and biases, accumulated into
/// `dw` and `db`.
pub(crate) fn conv4d_param_grad(
    input: &Tensor4,
    grad_out: &Tensor4,
    layer: &Conv4dLayer,
    dw: &mut [f32],
    db: &mut [f32],
) {
    let dims = input.dims();
    let k = layer.k;
    let r = k / 2;
    let padded = PaddedSlices::new(input, r);
    let run = padded.run_len();
    let taps = layer.taps();
    let k3 = k * k * k;
    let dense_len = dims[1] * dims[2] * dims[3];
    let offsets: Vec<usize> = (0..k3)
        .map(|n| padded.tap_offset(n / (k * k), n / k % k, n % k))
        .collect();
    let mut g_run = vec![0.0f32; padded.slice_len()];
    for o in 0..layer.out_ch {
        let g = grad_out.channel(o);
        db[o] += g.iter().sum::<f32>();
        for p0 in 0..dims[0] {
            let gs = &g[p0 * dense_len..(p0 + 1) * dense_len];
            if gs.iter().all(|&v| v == 0.0) {
                continue;
            }
            padded.to_run(gs, &mut g_run[..run]);
            for a in 0..k {
                let q0 = p0 as isize + a as isize - r as isize;
                if q0 < 0 || q0 as usize >= dims[0] {
                    continue;
                }
                for i in 0..layer.in_ch {
                    let src = padded.slice(i, q0 as usize);
                    let wbase = (o * layer.in_ch + i) * taps + a * k3;
                    for (n, &off) in offsets.iter().enumerate() {
                        dw[wbase + n] += dot(&g_run[..run], &src[off..off + run]);
                    }
                }
            }
        }
    }
}

/// Layer layout of a consensus network.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NetConfig {
    pub num_layers: usize,
    pub k: usize,
    pub hidden: usize,
    /// Apply ReLU after the final single-channel layer as well.
    pub final_relu: bool,
}

impl NetConfig {
    /// Three layers of 5^4 filters, 16 hidden channels.
    pub const CATEGORY: NetConfig = NetConfig {
        num_layers: 3,
        k: 5,
        hidden: 16,
        final_relu: true,
    };

    /// Two layers of 3^4 filters, 16 hidden channels.
    pub const INSTANCE: NetConfig = NetConfig {
        num_layers: 2,
        k: 3,
        hidden: 16,
        final_relu: true,
    };

    pub fn channel_chain(&self) -> Vec<usize> {
        let mut chain = vec![1];
        chain.extend(std::iter::repeat_n(self.hidden, self.num_layers - 1));
        chain.push(1);
        chain
    }

    fn validate(&self) -> Result<()> {
        if self.k % 2 == 0 {
            return Err(NcError::InvalidArgument(format!(
                "kernel size must be odd, got {}",
                self.k
            )));
        }
        if self.num_layers == 0 || (self.num_layers > 1 && self.hidden == 0) {
            return Err(NcError::InvalidArgument(
                "need at least one layer and positive hidden width".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NcNetParams {
    pub layers: Vec<Conv4dLayer>,
    pub config: NetConfig,
}

impl NcNetParams {
    /// Wraps explicit layers, checking the `1 -> ... -> 1` channel chain.
    pub fn from_layers(layers: Vec<Conv4dLayer>, final_relu: bool) -> Result<Self> {
        let first = layers
            .first()
            .ok_or_else(|| NcError::ConfigMismatch("network has no layers".into()))?;
        if first.in_ch != 1 || layers.last().unwrap().out_ch != 1 {
            return Err(NcError::ConfigMismatch(
                "network must map 1 channel to 1 channel".into(),
            ));
        }
        for (n, pair) in layers.windows(2).enumerate() {
            if pair[0].out_ch != pair[1].in_ch {
                return Err(NcError::ConfigMismatch(format!(
                    "layer {n} outputs {} channels but layer {} takes {}",
                    pair[0].out_ch,
                    n + 1,
                    pair[1].in_ch
                )));
            }
        }
        let config = NetConfig {
            num_layers: layers.len(),
            k: first.k,
            hidden: if layers.len() > 1 { first.out_ch } else { 0 },
            final_relu,
        };
        Ok(Self { layers, config })
    }

    pub fn zeros(config: NetConfig) -> Result<Self> {
        config.validate()?;
        let chain = config.channel_chain();
        let layers = chain
            .windows(2)
            .map(|c| Conv4dLayer::zeros(c[0], c[1], config.k))
            .collect::<Result<_>>()?;
        Ok(Self { layers, config })
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.bias.len())
            .sum()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(file);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(&WEIGHTS_MAGIC);
        buf.extend_from_slice(&(self.layers.len() as u32).to_le_bytes());
        for l in &self.layers {
            for v in [l.in_ch, l.out_ch, l.k] {
                buf.extend_from_slice(&(v as u32).to_le_bytes());
            }
            for v in l.weights.iter().chain(&l.bias) {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        w.write_all(&buf)?;
        Ok(())
    }

    /// Parses an `NCW1` buffer. The final-layer ReLU flag is not stored in
    /// the file and defaults to on.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        r.magic(WEIGHTS_MAGIC)?;
        let count = r.u32()? as usize;
        if count == 0 {
            return Err(NcError::ConfigMismatch(
                "header declares zero layers".into(),
            ));
        }
        let mut layers = Vec::new();
        for _ in 0..count {
            let in_ch = r.u32()? as usize;
            let out_ch = r.u32()? as usize;
            let k = r.u32()? as usize;
            let n = k
                .checked_pow(4)
                .and_then(|t| t.checked_mul(in_ch))
                .and_then(|t| t.checked_mul(out_ch))
                .filter(|t| t.checked_mul(4).is_some())
                .ok_or_else(|| {
                    NcError::DimensionOverflow(format!("layer {in_ch}->{out_ch} k={k}"))
                })?;
            let weights = r.f32s(n)?;
            let bias = r.f32s(out_ch)?;
            layers.push(Conv4dLayer::new(in_ch, out_ch, k, weights, bias)?);
        }
        if r.remaining() != 0 {
            return Err(NcError::ConfigMismatch(format!(
                "header declares {count} layers but {} bytes follow them",
                r.remaining()
            )));
        }
        Self::from_layers(layers, true)
    }
}

pub fn save_params(p: &NcNetParams, path: impl AsRef<Path>) -> Result<()> {
    p.save(path)
}

pub fn load_params(path: impl AsRef<Path>) -> Result<NcNetParams> {
    NcNetParams::from_bytes(&std::fs::read(path)?)
}

/// Loads a checkpoint and checks it against an expected layer layout.
pub fn load_params_for(path: impl AsRef<Path>, expected: NetConfig) -> Result<NcNetParams> {
    let mut p = load_params(path)?;
    let c = p.config;
    if (c.num_layers, c.k, c.hidden) != (expected.num_layers, expected.k, expected.hidden) {
        return Err(NcError::ConfigMismatch(format!(
            "checkpoint has {} layers k={} hidden={}, expected {} layers k={} hidden={}",
            c.num_layers, c.k, c.hidden, expected.num_layers, expected.k, expected.hidden
        )));
    }
    p.config.final_relu = expected.final_relu;
    Ok(p)
}

/// Uniform weights in `±sqrt(1 / fan_in)` with `fan_in = in_ch * k^4`, zero biases.
pub fn init_params(config: NetConfig, seed: u64) -> Result<NcNetParams> {
    let mut p = NcNetParams::zeros(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for l in &mut p.layers {
        let bound = (1.0 / (l.in_ch * l.taps()) as f32).sqrt();
        for w in &mut l.weights {
            *w = rng.random_range(-bound..=bound);
        }
    }
    Ok(p)
}

/// Starting point for training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum InitScheme {
    /// [`init_params`] only.
    Uniform,
    /// [`init_params`] plus a unit pass-through at the center tap, so the
    /// untrained network reproduces its input: every hidden channel copies
    /// it and the last layer averages them back.
    #[default]
    CenterIdentity,
}

pub fn init_params_with(config: NetConfig, seed: u64, scheme: InitScheme) -> Result<NcNetParams> {
    let mut p = init_params(config, seed)?;
    if scheme == InitScheme::Uniform {
        return Ok(p);
    }
    let n = p.layers.len();
    for (li, l) in p.layers.iter_mut().enumerate() {
        let taps = l.taps();
        let center = taps / 2;
        for o in 0..l.out_ch {
            for i in 0..l.in_ch {
                let gain = if li + 1 == n {
                    1.0 / l.in_ch as f32
                } else if li == 0 || o == i {
                    1.0
                } else {
                    continue;
                };
                l.weights[(o * l.in_ch + i) * taps + center] += gain;
            }
        }
    }
    Ok(p)
}

/// Activations kept by a forward pass: `acts[0]` is the input, `acts[n + 1]`
/// the output of layer `n` after its nonlinearity.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub acts: Vec<Tensor4>,
}

impl ForwardTrace {
    pub fn output(&self) -> &Tensor4 {
        self.acts.last().unwrap()
    }
}

fn check_single(c: &Tensor4) -> Result<()> {
    if c.channels() != 1 {
        return Err(NcError::ChannelMismatch {
            expected: 1,
            actual: c.channels(),
        });
    }
    Ok(())
}

pub fn ncnet_forward(c: &Tensor4, params: &NcNetParams) -> Result<Tensor4> {
    Ok(ncnet_forward_traced(c, params)?.acts.pop().unwrap())
}

pub fn ncnet_forward_traced(c: &Tensor4, params: &NcNetParams) -> Result<ForwardTrace> {
    check_single(c)?;
    let mut acts = vec![c.clone()];
    let last = params.layers.len() - 1;
    for (n, layer) in params.layers.iter().enumerate() {
        let mut y = conv4d_aggregated(acts.last().unwrap(), layer)?;
        if n < last || params.config.final_relu {
            y.relu_in_place();
        }
        acts.push(y);
    }
    Ok(ForwardTrace { acts })
}

/// `N(c) + N(cᵀ)ᵀ`, invariant to the order of the two images.
pub fn ncnet_symmetric(c: &CorrTensor, params: &NcNetParams) -> Result<CorrTensor> {
    Ok(ncnet_symmetric_traced(c, params)?.0)
}

pub(crate) fn ncnet_symmetric_traced(
    c: &CorrTensor,
    params: &NcNetParams,
) -> Result<(CorrTensor, ForwardTrace, ForwardTrace)> {
    c.require_stage(&[Stage::Raw, Stage::Mnn], "raw or mnn")?;
    let fwd = ncnet_forward_traced(c.tensor(), params)?;
    let rev = ncnet_forward_traced(&c.tensor().transpose_pairs(), params)?;
    let mut out = fwd.output().clone();
    let back = rev.output().transpose_pairs();
    for (x, y) in out.data_mut().iter_mut().zip(back.data()) {
        *x += y;
    }
    Ok((CorrTensor::advance(out, c.stage(), Stage::Nc), fwd, rev))
}
