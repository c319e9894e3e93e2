//! Layer kinds and their forward/backward passes.
//!
//! Forward passes return a [`LayerAux`] capture alongside the output so a
//! whole-stack trace can be kept per forward pass; siamese training runs
//! two traced forwards over the same parameters before backpropagating.

use rand::Rng;
use rand::RngCore;

use super::{ConvLayer, Mode, Scalar, Tensor4};
use crate::error::{Error, Result};

/// Per-layer state captured by a forward pass for use in backward.
#[derive(Debug, Clone)]
pub enum LayerAux<T> {
    None,
    /// Convolution keeps its input (columns are rebuilt in backward).
    Input(Tensor4<T>),
    /// Normalizations keep the normalized activations plus the inverse
    /// standard deviation per statistics group.
    Norm {
        x_hat: Tensor4<T>,
        inv_std: Vec<T>,
    },
    /// ReLU/dropout keeps the elementwise multiplier (0, 1 or the
    /// inverted-dropout scale).
    Factor(Vec<T>),
    /// L2 normalization keeps the outputs and per-sample input norms.
    L2 {
        y: Tensor4<T>,
        norms: Vec<T>,
    },
}

/// Batch normalization over (batch, H, W) per channel, with running
/// statistics for inference.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm<T> {
    pub channels: usize,
    pub eps: f64,
    /// EMA coefficient for running statistics (weight of the new batch).
    pub momentum: f64,
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    /// True once at least one training batch has updated the statistics.
    pub initialized: bool,
    pub grad_gamma: Vec<T>,
    pub grad_beta: Vec<T>,
    pub mom_gamma: Vec<T>,
    pub mom_beta: Vec<T>,
}

impl<T: Scalar> BatchNorm<T> {
    pub fn new(channels: usize) -> Self {
        BatchNorm {
            channels,
            eps: 1e-5,
            momentum: 0.1,
            gamma: vec![T::one(); channels],
            beta: vec![T::zero(); channels],
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            initialized: false,
            grad_gamma: vec![T::zero(); channels],
            grad_beta: vec![T::zero(); channels],
            mom_gamma: vec![T::zero(); channels],
            mom_beta: vec![T::zero(); channels],
        }
    }

    fn forward(&mut self, x: &Tensor4<T>, mode: Mode) -> Result<(Tensor4<T>, LayerAux<T>)> {
        if x.c != self.channels {
            return Err(Error::Shape {
                expected: format!("{} channels", self.channels),
                actual: format!("{} channels", x.c),
            });
        }
        let plane = x.h * x.w;
        let group = x.n * plane;
        let eps = T::from_f64(self.eps);
        match mode {
            Mode::Infer => {
                if !self.initialized {
                    return Err(Error::InvalidArgument(
                        "inference-mode batchnorm before any training update: \
                         running statistics are undefined"
                            .into(),
                    ));
                }
                let mut y = Tensor4::zeros(x.n, x.c, x.h, x.w);
                for s in 0..x.n {
                    for c in 0..x.c {
                        let inv = (self.running_var[c] + eps).sqrt().recip();
                        let mean = self.running_mean[c];
                        let off = (s * x.c + c) * plane;
                        for i in 0..plane {
                            y.data[off + i] =
                                self.gamma[c] * ((x.data[off + i] - mean) * inv) + self.beta[c];
                        }
                    }
                }
                Ok((y, LayerAux::None))
            }
            Mode::Train | Mode::Deterministic => {
                let m = T::from_f64(group as f64);
                let mut means = vec![T::zero(); x.c];
                let mut vars = vec![T::zero(); x.c];
                for c in 0..x.c {
                    let mut sum = T::zero();
                    for s in 0..x.n {
                        let off = (s * x.c + c) * plane;
                        sum += x.data[off..off + plane].iter().copied().sum::<T>();
                    }
                    let mean = sum / m;
                    let mut var = T::zero();
                    for s in 0..x.n {
                        let off = (s * x.c + c) * plane;
                        for i in 0..plane {
                            let d = x.data[off + i] - mean;
                            var += d * d;
                        }
                    }
                    means[c] = mean;
                    vars[c] = var / m;
                }
                let mut x_hat = Tensor4::zeros(x.n, x.c, x.h, x.w);
                let mut y = Tensor4::zeros(x.n, x.c, x.h, x.w);
                let mut inv_std = vec![T::zero(); x.c];
                for c in 0..x.c {
                    inv_std[c] = (vars[c] + eps).sqrt().recip();
                }
                for s in 0..x.n {
                    for c in 0..x.c {
                        let off = (s * x.c + c) * plane;
                        for i in 0..plane {
                            let xh = (x.data[off + i] - means[c]) * inv_std[c];
                            x_hat.data[off + i] = xh;
                            y.data[off + i] = self.gamma[c] * xh + self.beta[c];
                        }
                    }
                }
                if mode == Mode::Train {
                    let keep = T::from_f64(1.0 - self.momentum);
                    let new = T::from_f64(self.momentum);
                    for c in 0..x.c {
                        self.running_mean[c] = keep * self.running_mean[c] + new * means[c];
                        self.running_var[c] = keep * self.running_var[c] + new * vars[c];
                    }
                    self.initialized = true;
                }
                Ok((y, LayerAux::Norm { x_hat, inv_std }))
            }
        }
    }

    fn backward(&mut self, aux: &LayerAux<T>, d_out: &Tensor4<T>) -> Result<Tensor4<T>> {
        let LayerAux::Norm { x_hat, inv_std } = aux else {
            return Err(Error::InvalidArgument(
                "batchnorm backward requires a batch-statistics forward trace".into(),
            ));
        };
        let plane = d_out.h * d_out.w;
        let group = d_out.n * plane;
        let m = T::from_f64(group as f64);
        let mut d_in = Tensor4::zeros(d_out.n, d_out.c, d_out.h, d_out.w);
        for c in 0..d_out.c {
            let mut sum_dy = T::zero();
            let mut sum_dy_xhat = T::zero();
            for s in 0..d_out.n {
                let off = (s * d_out.c + c) * plane;
                for i in 0..plane {
                    let dy = d_out.data[off + i];
                    sum_dy += dy;
                    sum_dy_xhat += dy * x_hat.data[off + i];
                }
            }
            self.grad_gamma[c] += sum_dy_xhat;
            self.grad_beta[c] += sum_dy;
            let scale = self.gamma[c] * inv_std[c] / m;
            for s in 0..d_out.n {
                let off = (s * d_out.c + c) * plane;
                for i in 0..plane {
                    let dy = d_out.data[off + i];
                    d_in.data[off + i] =
                        scale * (m * dy - sum_dy - x_hat.data[off + i] * sum_dy_xhat);
                }
            }
        }
        Ok(d_in)
    }
}

/// Instance normalization per (sample, channel) over H*W, fixed scale 1
/// and shift 0, no running state.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceNorm {
    pub eps: f64,
}

impl InstanceNorm {
    pub fn new() -> Self {
        // small enough that affine intensity changes of real patches leave
        // the standardized output unchanged to well below 1e-5
        InstanceNorm { eps: 1e-9 }
    }

    fn forward<T: Scalar>(&self, x: &Tensor4<T>) -> (Tensor4<T>, LayerAux<T>) {
        let plane = x.h * x.w;
        let m = T::from_f64(plane as f64);
        let eps = T::from_f64(self.eps);
        let mut y = Tensor4::zeros(x.n, x.c, x.h, x.w);
        let mut inv_std = vec![T::zero(); x.n * x.c];
        for g in 0..x.n * x.c {
            let off = g * plane;
            let slice = &x.data[off..off + plane];
            let mean = slice.iter().copied().sum::<T>() / m;
            let var = slice
                .iter()
                .map(|&v| (v - mean) * (v - mean))
                .sum::<T>()
                / m;
            let inv = (var + eps).sqrt().recip();
            inv_std[g] = inv;
            for i in 0..plane {
                y.data[off + i] = (slice[i] - mean) * inv;
            }
        }
        let x_hat = y.clone();
        (y, LayerAux::Norm { x_hat, inv_std })
    }

    fn backward<T: Scalar>(&self, aux: &LayerAux<T>, d_out: &Tensor4<T>) -> Result<Tensor4<T>> {
        let LayerAux::Norm { x_hat, inv_std } = aux else {
            return Err(Error::InvalidArgument(
                "instancenorm backward requires a forward trace".into(),
            ));
        };
        let plane = d_out.h * d_out.w;
        let m = T::from_f64(plane as f64);
        let mut d_in = Tensor4::zeros(d_out.n, d_out.c, d_out.h, d_out.w);
        for g in 0..d_out.n * d_out.c {
            let off = g * plane;
            let mut sum_dy = T::zero();
            let mut sum_dy_xhat = T::zero();
            for i in 0..plane {
                let dy = d_out.data[off + i];
                sum_dy += dy;
                sum_dy_xhat += dy * x_hat.data[off + i];
            }
            let scale = inv_std[g] / m;
            for i in 0..plane {
                let dy = d_out.data[off + i];
                d_in.data[off + i] =
                    scale * (m * dy - sum_dy - x_hat.data[off + i] * sum_dy_xhat);
            }
        }
        Ok(d_in)
    }
}

impl Default for InstanceNorm {
    fn default() -> Self {
        Self::new()
    }
}

/// Elementwise `max(0, x)` followed by inverted dropout: in train mode
/// survivors are scaled by `1/(1-rate)` so inference is a no-op.
#[derive(Debug, Clone, PartialEq)]
pub struct ReluDropout {
    pub rate: f64,
}

impl ReluDropout {
    pub fn new(rate: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::InvalidArgument(format!(
                "dropout rate must be in [0,1), got {rate}"
            )));
        }
        Ok(ReluDropout { rate })
    }

    fn forward<T: Scalar>(
        &self,
        x: &Tensor4<T>,
        mode: Mode,
        rng: &mut dyn RngCore,
    ) -> (Tensor4<T>, LayerAux<T>) {
        let dropout_active = mode == Mode::Train && self.rate > 0.0;
        let keep_scale = T::from_f64(1.0 / (1.0 - self.rate));
        let mut y = Tensor4::zeros(x.n, x.c, x.h, x.w);
        let mut factor = vec![T::zero(); x.len()];
        for i in 0..x.len() {
            let mut f = if x.data[i] > T::zero() {
                T::one()
            } else {
                T::zero()
            };
            if dropout_active && f > T::zero() {
                // one draw per positive activation keeps the stream layout
                // stable under changing inputs within a fixed-shape batch
                f = if rng.gen::<f64>() < self.rate {
                    T::zero()
                } else {
                    keep_scale
                };
            }
            factor[i] = f;
            y.data[i] = x.data[i] * f;
        }
        (y, LayerAux::Factor(factor))
    }

    fn backward<T: Scalar>(&self, aux: &LayerAux<T>, d_out: &Tensor4<T>) -> Result<Tensor4<T>> {
        let LayerAux::Factor(factor) = aux else {
            return Err(Error::InvalidArgument(
                "relu/dropout backward requires a forward trace".into(),
            ));
        };
        let mut d_in = d_out.clone();
        for (d, f) in d_in.data.iter_mut().zip(factor) {
            *d *= *f;
        }
        Ok(d_in)
    }
}

/// Per-sample L2 normalization of the flattened feature vector.
#[derive(Debug, Clone, PartialEq)]
pub struct L2Normalize {
    pub norm_floor: f64,
}

impl L2Normalize {
    pub fn new() -> Self {
        L2Normalize { norm_floor: 1e-8 }
    }

    fn forward<T: Scalar>(&self, x: &Tensor4<T>) -> Result<(Tensor4<T>, LayerAux<T>)> {
        let dim = x.c * x.h * x.w;
        let mut y = Tensor4::zeros(x.n, x.c, x.h, x.w);
        let mut norms = vec![T::zero(); x.n];
        for s in 0..x.n {
            let off = s * dim;
            let norm = x.data[off..off + dim]
                .iter()
                .map(|&v| v * v)
                .sum::<T>()
                .sqrt();
            if norm.to_f64() < self.norm_floor {
                return Err(Error::InvalidArgument(format!(
                    "degenerate descriptor: norm {} below floor {}",
                    norm, self.norm_floor
                )));
            }
            norms[s] = norm;
            for i in 0..dim {
                y.data[off + i] = x.data[off + i] / norm;
            }
        }
        Ok((y.clone(), LayerAux::L2 { y, norms }))
    }

    fn backward<T: Scalar>(&self, aux: &LayerAux<T>, d_out: &Tensor4<T>) -> Result<Tensor4<T>> {
        let LayerAux::L2 { y, norms } = aux else {
            return Err(Error::InvalidArgument(
                "l2 normalize backward requires a forward trace".into(),
            ));
        };
        let dim = d_out.c * d_out.h * d_out.w;
        let mut d_in = Tensor4::zeros(d_out.n, d_out.c, d_out.h, d_out.w);
        for s in 0..d_out.n {
            let off = s * dim;
            let mut dot = T::zero();
            for i in 0..dim {
                dot += y.data[off + i] * d_out.data[off + i];
            }
            for i in 0..dim {
                d_in.data[off + i] = (d_out.data[off + i] - y.data[off + i] * dot) / norms[s];
            }
        }
        Ok(d_in)
    }
}

impl Default for L2Normalize {
    fn default() -> Self {
        Self::new()
    }
}

/// One mutable parameter tensor with its gradient and momentum buffers.
pub struct ParamSet<'a, T> {
    pub name: &'static str,
    pub value: &'a mut Vec<T>,
    pub grad: &'a mut Vec<T>,
    pub momentum: &'a mut Vec<T>,
    /// Whether weight decay applies (normalization scale/shift is exempt).
    pub weight_decay: bool,
}

/// A layer of the descriptor network.
#[derive(Debug, Clone, PartialEq)]
pub enum Layer<T> {
    Conv(ConvLayer<T>),
    BatchNorm(BatchNorm<T>),
    InstanceNorm(InstanceNorm),
    ReluDropout(ReluDropout),
    L2Normalize(L2Normalize),
}

impl<T: Scalar> Layer<T> {
    pub fn kind_name(&self) -> &'static str {
        match self {
            Layer::Conv(_) => "conv",
            Layer::BatchNorm(_) => "batchnorm",
            Layer::InstanceNorm(_) => "instancenorm",
            Layer::ReluDropout(_) => "relu_dropout",
            Layer::L2Normalize(_) => "l2_normalize",
        }
    }

    pub fn forward(
        &mut self,
        x: &Tensor4<T>,
        mode: Mode,
        rng: &mut dyn RngCore,
    ) -> Result<(Tensor4<T>, LayerAux<T>)> {
        match self {
            Layer::Conv(conv) => {
                let y = conv.forward(x)?;
                Ok((y, LayerAux::Input(x.clone())))
            }
            Layer::BatchNorm(bn) => bn.forward(x, mode),
            Layer::InstanceNorm(inorm) => Ok(inorm.forward(x)),
            Layer::ReluDropout(rd) => Ok(rd.forward(x, mode, rng)),
            Layer::L2Normalize(l2) => l2.forward(x),
        }
    }

    pub fn backward(&mut self, aux: &LayerAux<T>, d_out: &Tensor4<T>) -> Result<Tensor4<T>> {
        match self {
            Layer::Conv(conv) => {
                let LayerAux::Input(x) = aux else {
                    return Err(Error::InvalidArgument(
                        "conv backward requires a forward trace".into(),
                    ));
                };
                conv.backward(x, d_out)
            }
            Layer::BatchNorm(bn) => bn.backward(aux, d_out),
            Layer::InstanceNorm(inorm) => inorm.backward(aux, d_out),
            Layer::ReluDropout(rd) => rd.backward(aux, d_out),
            Layer::L2Normalize(l2) => l2.backward(aux, d_out),
        }
    }

    /// Visit every learnable parameter tensor of this layer.
    pub fn params_mut(&mut self) -> Vec<ParamSet<'_, T>> {
        match self {
            Layer::Conv(conv) => vec![
                ParamSet {
                    name: "weight",
                    value: &mut conv.w,
                    grad: &mut conv.grad_w,
                    momentum: &mut conv.mom_w,
                    weight_decay: true,
                },
                ParamSet {
                    name: "bias",
                    value: &mut conv.b,
                    grad: &mut conv.grad_b,
                    momentum: &mut conv.mom_b,
                    weight_decay: true,
                },
            ],
            Layer::BatchNorm(bn) => vec![
                ParamSet {
                    name: "gamma",
                    value: &mut bn.gamma,
                    grad: &mut bn.grad_gamma,
                    momentum: &mut bn.mom_gamma,
                    weight_decay: false,
                },
                ParamSet {
                    name: "beta",
                    value: &mut bn.beta,
                    grad: &mut bn.grad_beta,
                    momentum: &mut bn.mom_beta,
                    weight_decay: false,
                },
            ],
            _ => Vec::new(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Layer<U> {
        let cv = |v: &Vec<T>| -> Vec<U> { v.iter().map(|&x| U::from_f64(x.to_f64())).collect() };
        match self {
            Layer::Conv(c) => Layer::Conv(ConvLayer {
                out_channels: c.out_channels,
                in_channels: c.in_channels,
                kernel: c.kernel,
                stride: c.stride,
                pad: c.pad,
                w: cv(&c.w),
                b: cv(&c.b),
                grad_w: cv(&c.grad_w),
                grad_b: cv(&c.grad_b),
                mom_w: cv(&c.mom_w),
                mom_b: cv(&c.mom_b),
                skip_input_grad: c.skip_input_grad,
            }),
            Layer::BatchNorm(b) => Layer::BatchNorm(BatchNorm {
                channels: b.channels,
                eps: b.eps,
                momentum: b.momentum,
                gamma: cv(&b.gamma),
                beta: cv(&b.beta),
                running_mean: cv(&b.running_mean),
                running_var: cv(&b.running_var),
                initialized: b.initialized,
                grad_gamma: cv(&b.grad_gamma),
                grad_beta: cv(&b.grad_beta),
                mom_gamma: cv(&b.mom_gamma),
                mom_beta: cv(&b.mom_beta),
            }),
            Layer::InstanceNorm(i) => Layer::InstanceNorm(i.clone()),
            Layer::ReluDropout(r) => Layer::ReluDropout(r.clone()),
            Layer::L2Normalize(l) => Layer::L2Normalize(l.clone()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(0)
    }

    #[test]
    fn instancenorm_constant_patch_is_zero() {
        let x = Tensor4::from_vec(2, 1, 3, 3, vec![0.7f64; 18]).unwrap();
        let (y, _) = InstanceNorm::new().forward(&x);
        assert!(y.data.iter().all(|&v| v.abs() < 1e-9));
    }

    #[test]
    fn instancenorm_affine_invariance() {
        let base: Vec<f64> = (0..16).map(|i| (i as f64 * 0.37).sin()).collect();
        let x = Tensor4::from_vec(1, 1, 4, 4, base.clone()).unwrap();
        let scaled =
            Tensor4::from_vec(1, 1, 4, 4, base.iter().map(|v| 1.8 * v + 0.3).collect()).unwrap();
        let norm = InstanceNorm::new();
        let (y0, _) = norm.forward(&x);
        let (y1, _) = norm.forward(&scaled);
        for (a, b) in y0.data.iter().zip(&y1.data) {
            assert!((a - b).abs() < 1e-4, "{a} vs {b}");
        }
    }

    #[test]
    fn instancenorm_standardizes() {
        let x = Tensor4::from_vec(
            2,
            2,
            4,
            4,
            (0..64).map(|i| ((i * 37 % 64) as f64) / 7.0).collect(),
        )
        .unwrap();
        let (y, _) = InstanceNorm::new().forward(&x);
        for g in 0..4 {
            let s = &y.data[g * 16..(g + 1) * 16];
            let mean: f64 = s.iter().sum::<f64>() / 16.0;
            let var: f64 = s.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 16.0;
            assert!(mean.abs() < 1e-6);
            assert!((var - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn relu_clamps_negatives() {
        let x = Tensor4::from_vec(1, 1, 1, 3, vec![-1.0f64, 0.0, 2.0]).unwrap();
        let (y, _) = ReluDropout::new(0.0).unwrap().forward(&x, Mode::Train, &mut rng());
        assert_eq!(y.data, vec![0.0, 0.0, 2.0]);
    }

    #[test]
    fn dropout_inactive_at_inference_and_rate_zero() {
        let x = Tensor4::from_vec(1, 1, 2, 2, vec![1.0f64, 2.0, 3.0, 4.0]).unwrap();
        let rd = ReluDropout::new(0.5).unwrap();
        let (y, _) = rd.forward(&x, Mode::Infer, &mut rng());
        assert_eq!(y.data, x.data);
        let rd0 = ReluDropout::new(0.0).unwrap();
        let (y0, _) = rd0.forward(&x, Mode::Train, &mut rng());
        assert_eq!(y0.data, x.data);
    }

    #[test]
    fn inverted_dropout_preserves_mean() {
        let n = 1_000_000usize;
        let x = Tensor4::from_vec(1, 1, 1, n, vec![1.0f64; n]).unwrap();
        let rd = ReluDropout::new(0.5).unwrap();
        let mut r = rng();
        let (y, _) = rd.forward(&x, Mode::Train, &mut r);
        let mean = y.data.iter().sum::<f64>() / n as f64;
        assert!((mean - 1.0).abs() < 0.01, "mean {mean}");
    }

    #[test]
    fn l2_normalize_345() {
        let mut v = vec![0.0f64; 128];
        v[0] = 3.0;
        v[1] = 4.0;
        let x = Tensor4::from_vec(1, 128, 1, 1, v).unwrap();
        let (y, _) = L2Normalize::new().forward(&x).unwrap();
        assert!((y.data[0] - 0.6).abs() < 1e-12);
        assert!((y.data[1] - 0.8).abs() < 1e-12);
        // idempotence
        let (y2, _) = L2Normalize::new().forward(&y).unwrap();
        for (a, b) in y.data.iter().zip(&y2.data) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn l2_normalize_rejects_degenerate() {
        let x = Tensor4::from_vec(1, 4, 1, 1, vec![0.0f64; 4]).unwrap();
        assert!(L2Normalize::new().forward(&x).is_err());
    }

    #[test]
    fn batchnorm_infer_before_training_is_error() {
        let mut bn = BatchNorm::<f64>::new(2);
        let x = Tensor4::zeros(1, 2, 2, 2);
        assert!(bn.forward(&x, Mode::Infer).is_err());
        let _ = bn.forward(&x, Mode::Train).unwrap();
        assert!(bn.forward(&x, Mode::Infer).is_ok());
    }
}
