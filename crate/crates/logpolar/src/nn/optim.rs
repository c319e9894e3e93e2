//! SGD with classic momentum, L2 weight decay and a linear learning-rate
//! schedule that reaches zero after the configured number of epochs.

use super::{Layer, Scalar};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub total_epochs: usize,
}

impl OptimConfig {
    pub fn new(
        learning_rate: f64,
        momentum: f64,
        weight_decay: f64,
        total_epochs: usize,
    ) -> Result<Self> {
        if !(learning_rate > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "learning rate must be positive, got {learning_rate}"
            )));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::InvalidArgument(format!(
                "momentum must be in [0,1), got {momentum}"
            )));
        }
        if !(weight_decay >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "weight decay must be non-negative, got {weight_decay}"
            )));
        }
        if total_epochs == 0 {
            return Err(Error::InvalidArgument("total_epochs must be positive".into()));
        }
        Ok(OptimConfig {
            learning_rate,
            momentum,
            weight_decay,
            total_epochs,
        })
    }

    /// Linearly decayed learning rate for a 0-based epoch index.
    pub fn effective_lr(&self, epoch: usize) -> Result<f64> {
        if epoch >= self.total_epochs {
            return Err(Error::InvalidArgument(format!(
                "epoch {epoch} is past the schedule of {} epochs",
                self.total_epochs
            )));
        }
        Ok(self.learning_rate * (1.0 - epoch as f64 / self.total_epochs as f64))
    }
}

/// One SGD update over every parameter:
/// `v <- m*v + g + wd*theta; theta <- theta - lr_eff*v`.
/// Weight decay skips normalization scale/shift parameters.
pub fn sgd_step<T: Scalar>(layers: &mut [Layer<T>], config: &OptimConfig, epoch: usize) -> Result<()> {
    let lr = T::from_f64(config.effective_lr(epoch)?);
    let m = T::from_f64(config.momentum);
    let wd = T::from_f64(config.weight_decay);
    for layer in layers {
        for p in layer.params_mut() {
            let decay = if p.weight_decay { wd } else { T::zero() };
            for i in 0..p.value.len() {
                let g = p.grad[i] + decay * p.value[i];
                p.momentum[i] = m * p.momentum[i] + g;
                p.value[i] = p.value[i] - lr * p.momentum[i];
            }
        }
    }
    Ok(())
}

/// Clear every gradient buffer.
pub fn zero_grad<T: Scalar>(layers: &mut [Layer<T>]) {
    for layer in layers {
        for p in layer.params_mut() {
            p.grad.iter_mut().for_each(|g| *g = T::zero());
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ConvLayer;

    fn one_param_layer(value: f64) -> Layer<f64> {
        let mut conv = ConvLayer::new(1, 1, 1, 1, 0).unwrap();
        conv.w[0] = value;
        Layer::Conv(conv)
    }

    fn set_grad(layer: &mut Layer<f64>, g: f64) {
        layer.params_mut()[0].grad[0] = g;
    }

    fn weight(layer: &mut Layer<f64>) -> f64 {
        layer.params_mut()[0].value[0]
    }

    #[test]
    fn plain_gradient_step() {
        let cfg = OptimConfig::new(1.0, 0.0, 0.0, 10).unwrap();
        let mut layers = vec![one_param_layer(2.0)];
        set_grad(&mut layers[0], 0.25);
        sgd_step(&mut layers, &cfg, 0).unwrap();
        assert!((weight(&mut layers[0]) - 1.75).abs() < 1e-12);
    }

    #[test]
    fn schedule_endpoint() {
        let cfg = OptimConfig::new(1.0, 0.0, 0.0, 4).unwrap();
        assert!((cfg.effective_lr(3).unwrap() - 0.25).abs() < 1e-12);
        assert!(cfg.effective_lr(4).is_err());
    }

    #[test]
    fn momentum_unrolled_two_steps() {
        // constant gradient g, momentum 0.9: displacement lr*(g + 1.9 g)
        let lr = 0.01;
        let g = 0.5;
        let cfg = OptimConfig::new(lr, 0.9, 0.0, 1000).unwrap();
        let mut layers = vec![one_param_layer(1.0)];
        // long schedule keeps lr effectively constant over two steps at
        // the same epoch index
        set_grad(&mut layers[0], g);
        sgd_step(&mut layers, &cfg, 0).unwrap();
        set_grad(&mut layers[0], g);
        sgd_step(&mut layers, &cfg, 0).unwrap();
        let displaced = 1.0 - weight(&mut layers[0]);
        assert!((displaced - lr * (g + 1.9 * g)).abs() < 1e-12, "{displaced}");
    }

    #[test]
    fn weight_decay_skips_norm_params() {
        use crate::nn::BatchNorm;
        let cfg = OptimConfig::new(1.0, 0.0, 0.5, 10).unwrap();
        let mut layers = vec![Layer::BatchNorm(BatchNorm::<f64>::new(1))];
        // zero grads: a decayed parameter would still move
        sgd_step(&mut layers, &cfg, 0).unwrap();
        assert_eq!(layers[0].params_mut()[0].value[0], 1.0);
    }
}
