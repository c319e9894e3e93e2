//! The descriptor network: seven convolutions over an instance-normalized
//! 32x32 grayscale patch, ending in a 128-d unit descriptor. Also houses
//! checkpoint and descriptor-file serialization and the training loop for
//! one epoch.

use rand::Rng;
use rand::RngCore;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::geometry::{format_keypoints, parse_keypoints, GridKind, Keypoint};
use crate::image::Patch;
use crate::loss::{
    distance_matrix, mine_hardest_in_batch, positive_distances, triplet_margin_loss,
    DistancePower, TripletSelection,
};
use crate::nn::{
    finite_diff_check, sgd_step, zero_grad, BatchNorm, ConvLayer, FaultInjection,
    GradCheckConfig, InstanceNorm, L2Normalize, Layer, LayerAux, Mode, OptimConfig, ReluDropout,
    Scalar, Tensor4,
};

pub const PATCH_SIDE: usize = 32;
pub const DESCRIPTOR_DIM: usize = 128;

const CHECKPOINT_MAGIC: &[u8; 6] = b"LPNET1";
const DESCRIPTOR_MAGIC: &[u8; 7] = b"LPDESC1";

/// A 128-d unit-norm patch descriptor, tagged with the sampling geometry
/// of the patch it came from so incompatible sets cannot be mixed.
#[derive(Debug, Clone, PartialEq)]
pub struct Descriptor {
    pub values: Vec<f32>,
    pub grid_kind: GridKind,
    pub lambda: f64,
}

/// Ordered layer stack with a fixed topology; see [`build_network`].
#[derive(Debug, Clone)]
pub struct Network<T: Scalar> {
    pub layers: Vec<Layer<T>>,
}

/// Kaiser-style orthogonal init: rows (or columns, whichever set is the
/// smaller one) of the returned `rows x cols` row-major matrix are
/// orthonormal. Gaussian basis + modified Gram-Schmidt, computed in f64.
fn orthogonal_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let (n, m) = (rows.min(cols), rows.max(cols));
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(n);
    while basis.len() < n {
        let mut v: Vec<f64> = (0..m).map(|_| StandardNormal.sample(rng)).collect();
        for u in &basis {
            let dot: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(u).for_each(|(a, b)| *a -= dot * b);
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm < 1e-6 {
            continue; // essentially-dependent draw; retry
        }
        v.iter_mut().for_each(|a| *a /= norm);
        basis.push(v);
    }
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[r * cols + c] = if rows <= cols {
                basis[r][c]
            } else {
                basis[c][r]
            };
        }
    }
    out
}

/// Build the 7-convolution descriptor network, deterministic in the seed.
///
/// Topology: instance-normalized input; six 3x3 convolutions with channel
/// plan 32,32,64,64,128,128 and strides 1,1,2,1,2,1, each followed by
/// batchnorm + ReLU (dropout after the last ReLU); a final 8x8 convolution
/// to 128 channels, batchnorm, then L2 normalization. Spatial trace for a
/// 32x32 input: 32,32,16,16,8,8 then 1x1.
pub fn build_network<T: Scalar>(seed: u64) -> Network<T> {
    build_network_with(seed, 0.1).expect("default dropout rate is valid")
}

pub fn build_network_with<T: Scalar>(seed: u64, dropout: f64) -> Result<Network<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let plan: [(usize, usize, usize, usize, usize); 7] = [
        // (out, in, kernel, stride, pad)
        (32, 1, 3, 1, 1),
        (32, 32, 3, 1, 1),
        (64, 32, 3, 2, 1),
        (64, 64, 3, 1, 1),
        (128, 64, 3, 2, 1),
        (128, 128, 3, 1, 1),
        (128, 128, 8, 1, 0),
    ];
    let mut layers: Vec<Layer<T>> = vec![Layer::InstanceNorm(InstanceNorm::new())];
    for (i, &(out_c, in_c, k, stride, pad)) in plan.iter().enumerate() {
        let mut conv = ConvLayer::new(out_c, in_c, k, stride, pad)?;
        let fan = in_c * k * k;
        let w = orthogonal_matrix(out_c, fan, &mut rng);
        conv.w = w.into_iter().map(T::from_f64).collect();
        layers.push(Layer::Conv(conv));
        layers.push(Layer::BatchNorm(BatchNorm::new(out_c)));
        match i {
            5 => layers.push(Layer::ReluDropout(ReluDropout::new(dropout)?)),
            6 => layers.push(Layer::L2Normalize(L2Normalize::new())),
            _ => layers.push(Layer::ReluDropout(ReluDropout::new(0.0)?)),
        }
    }
    Ok(Network { layers })
}

/// Run a layer stack forward, returning the output and the per-layer
/// trace needed for backward.
pub(crate) fn forward_stack<T: Scalar>(
    layers: &mut [Layer<T>],
    x: &Tensor4<T>,
    mode: Mode,
    rng: &mut dyn RngCore,
) -> Result<(Tensor4<T>, Vec<LayerAux<T>>)> {
    let mut trace = Vec::with_capacity(layers.len());
    let mut cur = x.clone();
    for layer in layers.iter_mut() {
        let (y, aux) = layer.forward(&cur, mode, rng)?;
        trace.push(aux);
        cur = y;
    }
    Ok((cur, trace))
}

/// Backpropagate through a traced forward pass, accumulating parameter
/// gradients and returning the input gradient.
pub(crate) fn backward_stack<T: Scalar>(
    layers: &mut [Layer<T>],
    trace: &[LayerAux<T>],
    d_out: &Tensor4<T>,
) -> Result<Tensor4<T>> {
    let mut d = d_out.clone();
    for (layer, aux) in layers.iter_mut().zip(trace).rev() {
        d = layer.backward(aux, &d)?;
    }
    Ok(d)
}

/// Stack patches into an `N x 1 x 32 x 32` tensor, rejecting wrong sizes
/// and mixed grid kinds.
pub fn patches_to_tensor(patches: &[Patch]) -> Result<Tensor4<f32>> {
    let mut data = Vec::with_capacity(patches.len() * PATCH_SIDE * PATCH_SIDE);
    for (i, p) in patches.iter().enumerate() {
        if p.size != PATCH_SIDE {
            return Err(Error::Shape {
                expected: format!("{PATCH_SIDE}x{PATCH_SIDE} patches"),
                actual: format!("patch {i} is {0}x{0}", p.size),
            });
        }
        if p.grid_kind != patches[0].grid_kind {
            return Err(Error::InvalidArgument(format!(
                "mixed grid kinds in one batch: patch 0 is {}, patch {i} is {}",
                patches[0].grid_kind.name(),
                p.grid_kind.name()
            )));
        }
        data.extend_from_slice(&p.data);
    }
    Tensor4::from_vec(patches.len(), 1, PATCH_SIDE, PATCH_SIDE, data)
}

impl<T: Scalar> Network<T> {
    pub fn forward(
        &mut self,
        x: &Tensor4<T>,
        mode: Mode,
        rng: &mut dyn RngCore,
    ) -> Result<(Tensor4<T>, Vec<LayerAux<T>>)> {
        forward_stack(&mut self.layers, x, mode, rng)
    }

    pub fn backward(&mut self, trace: &[LayerAux<T>], d_out: &Tensor4<T>) -> Result<Tensor4<T>> {
        backward_stack(&mut self.layers, trace, d_out)
    }

    pub fn cast<U: Scalar>(&self) -> Network<U> {
        Network {
            layers: self.layers.iter().map(|l| l.cast()).collect(),
        }
    }
}

impl Network<f32> {
    /// Inference-mode description of a patch batch: one unit descriptor
    /// per patch, order preserved. Errors on non-32x32 patches and on
    /// mixed cartesian/log-polar batches.
    pub fn describe(&mut self, patches: &[Patch]) -> Result<Vec<Descriptor>> {
        if patches.is_empty() {
            return Ok(Vec::new());
        }
        let grid_kind = patches[0].grid_kind;
        let lambda = patches[0].lambda;
        let mut rng = ChaCha8Rng::seed_from_u64(0); // unused: dropout is off
        let mut out = Vec::with_capacity(patches.len());
        for chunk in patches.chunks(256) {
            let x = patches_to_tensor(chunk)?;
            let (y, _) = self.forward(&x, Mode::Infer, &mut rng)?;
            if y.c * y.h * y.w != DESCRIPTOR_DIM {
                return Err(Error::Shape {
                    expected: format!("{DESCRIPTOR_DIM}-d descriptors"),
                    actual: format!("{:?}", y.dims()),
                });
            }
            for s in 0..y.n {
                out.push(Descriptor {
                    values: y.sample(s).to_vec(),
                    grid_kind,
                    lambda,
                });
            }
        }
        Ok(out)
    }
}

/// One training batch: side-by-side positive patch pairs as stacked
/// `K x 1 x 32 x 32` tensors.
#[derive(Debug, Clone)]
pub struct PatchPairBatch {
    pub a: Tensor4<f32>,
    pub b: Tensor4<f32>,
}

#[derive(Debug, Clone, Copy)]
pub struct LossConfig {
    pub margin: f64,
    pub power: DistancePower,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            margin: 1.0,
            power: DistancePower::Two,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct EpochStats {
    pub mean_loss: f64,
    pub batches: usize,
    pub active_triplets: usize,
}

/// Train over one epoch of batches: forward both sides, mine the hardest
/// in-batch negatives, backpropagate the margin loss and take one SGD
/// step per batch. Aborts with the batch index if the loss goes
/// non-finite.
pub fn train_epoch<I>(
    net: &mut Network<f32>,
    batches: I,
    optim: &OptimConfig,
    loss_cfg: &LossConfig,
    epoch: usize,
    rng: &mut dyn RngCore,
) -> Result<EpochStats>
where
    I: IntoIterator<Item = Result<PatchPairBatch>>,
{
    let mut total_loss = 0.0f64;
    let mut batches_seen = 0usize;
    let mut active = 0usize;
    for (bi, batch) in batches.into_iter().enumerate() {
        let batch = batch?;
        let k = batch.a.n;
        if batch.b.n != k || k < 2 {
            return Err(Error::Shape {
                expected: "two equally sized sides with at least 2 pairs".into(),
                actual: format!("{} and {} samples", batch.a.n, batch.b.n),
            });
        }
        zero_grad(&mut net.layers);
        let (fa, trace_a) = net.forward(&batch.a, Mode::Train, rng)?;
        let (fb, trace_b) = net.forward(&batch.b, Mode::Train, rng)?;
        let d = distance_matrix(k, DESCRIPTOR_DIM, &fa.data, &fb.data)?;
        let pos = positive_distances(k, DESCRIPTOR_DIM, &fa.data, &fb.data);
        let sel = mine_hardest_in_batch(&d, &pos)?;
        let out = triplet_margin_loss(
            k,
            DESCRIPTOR_DIM,
            &fa.data,
            &fb.data,
            &sel,
            loss_cfg.margin,
            loss_cfg.power,
        )?;
        if !out.loss.is_finite() {
            return Err(Error::Diverged { batch: bi });
        }
        // mean over the batch so the step size is K-independent
        let scale = 1.0 / k as f32;
        let mut da = Tensor4::from_vec(k, DESCRIPTOR_DIM, 1, 1, out.grad_a)?;
        let mut db = Tensor4::from_vec(k, DESCRIPTOR_DIM, 1, 1, out.grad_b)?;
        da.data.iter_mut().for_each(|v| *v *= scale);
        db.data.iter_mut().for_each(|v| *v *= scale);
        net.backward(&trace_a, &da)?;
        net.backward(&trace_b, &db)?;
        sgd_step(&mut net.layers, optim, epoch)?;
        total_loss += out.loss / k as f64;
        active += out.active;
        batches_seen += 1;
    }
    if batches_seen == 0 {
        return Err(Error::InvalidArgument("epoch with no batches".into()));
    }
    Ok(EpochStats {
        mean_loss: total_loss / batches_seen as f64,
        batches: batches_seen,
        active_triplets: active,
    })
}

// --- checkpoint serialization -------------------------------------------

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f32s(&mut self, v: &[f32]) {
        for x in v {
            self.buf.extend_from_slice(&x.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Decode {
                offset: self.pos,
                msg: format!("truncated while reading {what}"),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
    fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        let raw = self.take(n * 4, what)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

const KIND_INSTANCENORM: u32 = 0;
const KIND_CONV: u32 = 1;
const KIND_BATCHNORM: u32 = 2;
const KIND_RELU_DROPOUT: u32 = 3;
const KIND_L2NORM: u32 = 4;

/// Serialize a network (parameters plus optimizer state) to bytes.
pub fn save_checkpoint(net: &Network<f32>) -> Vec<u8> {
    let mut w = Writer { buf: Vec::new() };
    w.buf.extend_from_slice(CHECKPOINT_MAGIC);
    w.u32(net.layers.len() as u32);
    for layer in &net.layers {
        match layer {
            Layer::InstanceNorm(inorm) => {
                w.u32(KIND_INSTANCENORM);
                w.f64(inorm.eps);
            }
            Layer::Conv(c) => {
                w.u32(KIND_CONV);
                w.u32(4);
                for d in [c.out_channels, c.in_channels, c.kernel, c.kernel] {
                    w.u32(d as u32);
                }
                w.u32(c.stride as u32);
                w.u32(c.pad as u32);
                w.u32(c.skip_input_grad as u32);
                w.f32s(&c.w);
                w.f32s(&c.b);
                w.f32s(&c.mom_w);
                w.f32s(&c.mom_b);
            }
            Layer::BatchNorm(b) => {
                w.u32(KIND_BATCHNORM);
                w.u32(1);
                w.u32(b.channels as u32);
                w.u32(b.initialized as u32);
                w.f64(b.eps);
                w.f64(b.momentum);
                w.f32s(&b.gamma);
                w.f32s(&b.beta);
                w.f32s(&b.running_mean);
                w.f32s(&b.running_var);
                w.f32s(&b.mom_gamma);
                w.f32s(&b.mom_beta);
            }
            Layer::ReluDropout(r) => {
                w.u32(KIND_RELU_DROPOUT);
                w.f64(r.rate);
            }
            Layer::L2Normalize(l) => {
                w.u32(KIND_L2NORM);
                w.f64(l.norm_floor);
            }
        }
    }
    w.buf
}

pub fn load_checkpoint(bytes: &[u8]) -> Result<Network<f32>> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(CHECKPOINT_MAGIC.len(), "magic")?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::Decode {
            offset: 0,
            msg: format!("bad checkpoint magic {magic:?}"),
        });
    }
    let count = r.u32("layer count")? as usize;
    let mut layers = Vec::with_capacity(count);
    for li in 0..count {
        let kind = r.u32("layer kind")?;
        let layer = match kind {
            KIND_INSTANCENORM => {
                let eps = r.f64("instancenorm eps")?;
                Layer::InstanceNorm(InstanceNorm { eps })
            }
            KIND_CONV => {
                let rank = r.u32("conv rank")?;
                if rank != 4 {
                    return Err(Error::Decode {
                        offset: r.pos,
                        msg: format!("conv layer {li}: expected rank 4, got {rank}"),
                    });
                }
                let out_c = r.u32("conv dims")? as usize;
                let in_c = r.u32("conv dims")? as usize;
                let k = r.u32("conv dims")? as usize;
                let k2 = r.u32("conv dims")? as usize;
                if k != k2 {
                    return Err(Error::Decode {
                        offset: r.pos,
                        msg: format!("conv layer {li}: non-square kernel {k}x{k2}"),
                    });
                }
                let stride = r.u32("conv stride")? as usize;
                let pad = r.u32("conv pad")? as usize;
                let skip = r.u32("conv flag")? != 0;
                let wn = out_c * in_c * k * k;
                let mut conv = ConvLayer::new(out_c, in_c, k, stride, pad)?;
                conv.w = r.f32s(wn, "conv weights")?;
                conv.b = r.f32s(out_c, "conv bias")?;
                conv.mom_w = r.f32s(wn, "conv weight momentum")?;
                conv.mom_b = r.f32s(out_c, "conv bias momentum")?;
                conv.skip_input_grad = skip;
                Layer::Conv(conv)
            }
            KIND_BATCHNORM => {
                let rank = r.u32("batchnorm rank")?;
                if rank != 1 {
                    return Err(Error::Decode {
                        offset: r.pos,
                        msg: format!("batchnorm layer {li}: expected rank 1, got {rank}"),
                    });
                }
                let c = r.u32("batchnorm channels")? as usize;
                let initialized = r.u32("batchnorm flag")? != 0;
                let eps = r.f64("batchnorm eps")?;
                let momentum = r.f64("batchnorm momentum")?;
                let mut bn = BatchNorm::new(c);
                bn.eps = eps;
                bn.momentum = momentum;
                bn.initialized = initialized;
                bn.gamma = r.f32s(c, "batchnorm gamma")?;
                bn.beta = r.f32s(c, "batchnorm beta")?;
                bn.running_mean = r.f32s(c, "batchnorm mean")?;
                bn.running_var = r.f32s(c, "batchnorm variance")?;
                bn.mom_gamma = r.f32s(c, "batchnorm gamma momentum")?;
                bn.mom_beta = r.f32s(c, "batchnorm beta momentum")?;
                Layer::BatchNorm(bn)
            }
            KIND_RELU_DROPOUT => {
                let rate = r.f64("dropout rate")?;
                Layer::ReluDropout(ReluDropout::new(rate)?)
            }
            KIND_L2NORM => {
                let norm_floor = r.f64("norm floor")?;
                Layer::L2Normalize(L2Normalize { norm_floor })
            }
            other => {
                return Err(Error::Decode {
                    offset: r.pos - 4,
                    msg: format!("unknown layer kind tag {other}"),
                })
            }
        };
        layers.push(layer);
    }
    if r.pos != bytes.len() {
        return Err(Error::Decode {
            offset: r.pos,
            msg: format!("{} trailing bytes after checkpoint", bytes.len() - r.pos),
        });
    }
    Ok(Network { layers })
}

// --- descriptor file serialization ---------------------------------------

/// Serialize descriptors: magic, u32 count, u32 dim, little-endian f32s.
/// The grid kind and lambda travel in the text sidecar (see
/// [`format_descriptor_sidecar`]); this checks the set is homogeneous.
pub fn encode_descriptors(descs: &[Descriptor]) -> Result<Vec<u8>> {
    for (i, d) in descs.iter().enumerate() {
        if d.values.len() != DESCRIPTOR_DIM {
            return Err(Error::Shape {
                expected: format!("{DESCRIPTOR_DIM}-d descriptors"),
                actual: format!("descriptor {i} has {} values", d.values.len()),
            });
        }
        if d.grid_kind != descs[0].grid_kind || d.lambda != descs[0].lambda {
            return Err(Error::InvalidArgument(format!(
                "descriptor {i} mixes grid geometry ({} lambda {}) with ({} lambda {})",
                d.grid_kind.name(),
                d.lambda,
                descs[0].grid_kind.name(),
                descs[0].lambda
            )));
        }
    }
    let mut w = Writer { buf: Vec::new() };
    w.buf.extend_from_slice(DESCRIPTOR_MAGIC);
    w.u32(descs.len() as u32);
    w.u32(DESCRIPTOR_DIM as u32);
    for d in descs {
        w.f32s(&d.values);
    }
    Ok(w.buf)
}

/// Decode a descriptor file into raw vectors (geometry comes from the
/// sidecar).
pub fn decode_descriptors(bytes: &[u8]) -> Result<Vec<Vec<f32>>> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(DESCRIPTOR_MAGIC.len(), "magic")?;
    if magic != DESCRIPTOR_MAGIC {
        return Err(Error::Decode {
            offset: 0,
            msg: format!("bad descriptor-file magic {magic:?}"),
        });
    }
    let count = r.u32("count")? as usize;
    let dim = r.u32("dim")? as usize;
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        out.push(r.f32s(dim, &format!("descriptor {i}"))?);
    }
    if r.pos != bytes.len() {
        return Err(Error::Decode {
            offset: r.pos,
            msg: format!("{} trailing bytes after descriptors", bytes.len() - r.pos),
        });
    }
    Ok(out)
}

/// Text sidecar for a descriptor file: grid geometry header plus source
/// keypoints line-aligned with descriptor order.
pub fn format_descriptor_sidecar(kind: GridKind, lambda: f64, kps: &[Keypoint]) -> String {
    let mut s = format!("# grid_kind={}\n# lambda={}\n", kind.name(), lambda);
    s.push_str(&format_keypoints(kps));
    s
}

pub fn parse_descriptor_sidecar(text: &str) -> Result<(GridKind, f64, Vec<Keypoint>)> {
    let mut kind = None;
    let mut lambda = None;
    for line in text.lines() {
        let line = line.trim();
        if let Some(rest) = line.strip_prefix("# grid_kind=") {
            kind = Some(GridKind::parse(rest.trim())?);
        } else if let Some(rest) = line.strip_prefix("# lambda=") {
            lambda = Some(rest.trim().parse::<f64>().map_err(|e| {
                Error::Config(format!("bad lambda in descriptor sidecar: {e}"))
            })?);
        }
    }
    let kind = kind.ok_or_else(|| Error::Config("descriptor sidecar lacks grid_kind".into()))?;
    let lambda = lambda.ok_or_else(|| Error::Config("descriptor sidecar lacks lambda".into()))?;
    let kps = parse_keypoints(text)?;
    Ok((kind, lambda, kps))
}

// --- whole-network gradient check ----------------------------------------

/// Finite-difference check of the full network plus triplet loss in f64:
/// K pairs of random patches, triplet selection frozen at the starting
/// point, deterministic forwards. Returns the worst relative error.
pub fn full_network_gradcheck(
    seed: u64,
    pairs: usize,
    samples: usize,
    fault: Option<FaultInjection>,
) -> Result<f64> {
    let net: Network<f64> = build_network_with(seed, 0.0)?;
    let mut layers = net.layers;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let k = pairs.max(2);
    let mk = |rng: &mut ChaCha8Rng| {
        let data: Vec<f64> = (0..k * PATCH_SIDE * PATCH_SIDE)
            .map(|_| rng.gen::<f64>())
            .collect();
        Tensor4::from_vec(k, 1, PATCH_SIDE, PATCH_SIDE, data)
    };
    let mut inputs = vec![mk(&mut rng)?, mk(&mut rng)?];

    // Freeze the triplet selection at the starting point so the objective
    // stays differentiable under the probe perturbations.
    let sel: TripletSelection = {
        let mut dummy = ChaCha8Rng::seed_from_u64(0);
        let (fa, _) = forward_stack(&mut layers, &inputs[0], Mode::Deterministic, &mut dummy)?;
        let (fb, _) = forward_stack(&mut layers, &inputs[1], Mode::Deterministic, &mut dummy)?;
        let d = distance_matrix(k, DESCRIPTOR_DIM, &fa.data, &fb.data)?;
        let pos = positive_distances(k, DESCRIPTOR_DIM, &fa.data, &fb.data);
        mine_hardest_in_batch(&d, &pos)?
    };
    let loss_cfg = LossConfig::default();

    let loss_of = |layers: &mut Vec<Layer<f64>>, inputs: &[Tensor4<f64>]| -> Result<f64> {
        let mut dummy = ChaCha8Rng::seed_from_u64(0);
        let (fa, _) = forward_stack(layers, &inputs[0], Mode::Deterministic, &mut dummy)?;
        let (fb, _) = forward_stack(layers, &inputs[1], Mode::Deterministic, &mut dummy)?;
        Ok(triplet_margin_loss(
            k,
            DESCRIPTOR_DIM,
            &fa.data,
            &fb.data,
            &sel,
            loss_cfg.margin,
            loss_cfg.power,
        )?
        .loss)
    };
    let grad_of = |layers: &mut Vec<Layer<f64>>,
                   inputs: &[Tensor4<f64>]|
     -> Result<Vec<Tensor4<f64>>> {
        let mut dummy = ChaCha8Rng::seed_from_u64(0);
        let (fa, ta) = forward_stack(layers, &inputs[0], Mode::Deterministic, &mut dummy)?;
        let (fb, tb) = forward_stack(layers, &inputs[1], Mode::Deterministic, &mut dummy)?;
        let out = triplet_margin_loss(
            k,
            DESCRIPTOR_DIM,
            &fa.data,
            &fb.data,
            &sel,
            loss_cfg.margin,
            loss_cfg.power,
        )?;
        let da = Tensor4::from_vec(k, DESCRIPTOR_DIM, 1, 1, out.grad_a)?;
        let db = Tensor4::from_vec(k, DESCRIPTOR_DIM, 1, 1, out.grad_b)?;
        let ga = backward_stack(layers, &ta, &da)?;
        let gb = backward_stack(layers, &tb, &db)?;
        Ok(vec![ga, gb])
    };
    let cfg = GradCheckConfig {
        samples,
        seed: seed ^ 0xc0ffee,
        fault,
        // Smaller step than the per-layer checks: the stack holds ~1e5
        // rectifier activations, so the probability that a probe interval
        // straddles one of their kinks scales with the step width. 1e-6
        // keeps central-difference roundoff near 1e-9 in f64, far below
        // the tolerance.
        eps: 1e-6,
        ..GradCheckConfig::default()
    };
    finite_diff_check(&mut layers, &mut inputs, loss_of, grad_of, &cfg)
}
