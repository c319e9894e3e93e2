//! Finite-difference verification of backward passes.
//!
//! The harness compares analytic gradients (filled in by a caller-supplied
//! backward closure) against central differences of a caller-supplied loss
//! closure, over a random subset of parameter and input coordinates. Runs
//! are expected in f64 with [`Mode::Deterministic`] forwards so repeated
//! evaluations are bit-identical.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{zero_grad, Layer, Tensor4};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub eps: f64,
    /// Number of sampled coordinates (minimum 200 when available).
    pub samples: usize,
    pub seed: u64,
    /// Optional deliberate corruption, used to verify the harness itself
    /// can detect a broken backward pass.
    pub fault: Option<FaultInjection>,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            eps: 1e-5,
            samples: 200,
            seed: 0,
            fault: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FaultInjection {
    /// Negate every analytic gradient before comparing.
    FlipGradSigns,
}

#[derive(Debug, Clone, Copy)]
enum Coord {
    Param { layer: usize, param: usize, idx: usize },
    Input { input: usize, idx: usize },
}

fn param_value(layers: &mut [Layer<f64>], layer: usize, param: usize, idx: usize) -> f64 {
    layers[layer].params_mut()[param].value[idx]
}

fn set_param_value(layers: &mut [Layer<f64>], layer: usize, param: usize, idx: usize, v: f64) {
    layers[layer].params_mut()[param].value[idx] = v;
}

/// Returns the worst relative error over the sampled coordinates.
///
/// `grad_fn` must zero nothing itself: the harness clears gradients, calls
/// it once, and reads back parameter gradients plus the returned input
/// gradients. `loss_fn` must evaluate the identical scalar objective
/// without side effects that change later evaluations.
pub fn finite_diff_check<LossFn, GradFn>(
    layers: &mut Vec<Layer<f64>>,
    inputs: &mut [Tensor4<f64>],
    mut loss_fn: LossFn,
    mut grad_fn: GradFn,
    cfg: &GradCheckConfig,
) -> Result<f64>
where
    LossFn: FnMut(&mut Vec<Layer<f64>>, &[Tensor4<f64>]) -> Result<f64>,
    GradFn: FnMut(&mut Vec<Layer<f64>>, &[Tensor4<f64>]) -> Result<Vec<Tensor4<f64>>>,
{
    zero_grad(layers);
    let input_grads = grad_fn(layers, inputs)?;
    if input_grads.len() != inputs.len() {
        return Err(Error::InvalidArgument(format!(
            "grad_fn returned {} input gradients for {} inputs",
            input_grads.len(),
            inputs.len()
        )));
    }
    let sign = match cfg.fault {
        Some(FaultInjection::FlipGradSigns) => -1.0,
        None => 1.0,
    };

    // Snapshot analytic parameter gradients.
    let mut param_grads: Vec<Vec<Vec<f64>>> = Vec::new();
    for layer in layers.iter_mut() {
        param_grads.push(layer.params_mut().iter().map(|p| p.grad.clone()).collect());
    }

    // Enumerate coordinate space.
    let mut param_coords: Vec<Coord> = Vec::new();
    for (li, grads) in param_grads.iter().enumerate() {
        for (pi, g) in grads.iter().enumerate() {
            for idx in 0..g.len() {
                param_coords.push(Coord::Param {
                    layer: li,
                    param: pi,
                    idx,
                });
            }
        }
    }
    let mut input_coords: Vec<Coord> = Vec::new();
    for (ii, t) in inputs.iter().enumerate() {
        for idx in 0..t.len() {
            input_coords.push(Coord::Input { input: ii, idx });
        }
    }
    if param_coords.is_empty() && input_coords.is_empty() {
        return Err(Error::InvalidArgument(
            "nothing to check: no parameters and no inputs".into(),
        ));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut picks: Vec<Coord> = Vec::with_capacity(cfg.samples);
    let n_input = if input_coords.is_empty() {
        0
    } else {
        cfg.samples / 3
    };
    let n_param = if param_coords.is_empty() {
        0
    } else {
        cfg.samples - n_input
    };
    for _ in 0..n_param {
        picks.push(param_coords[rng.gen_range(0..param_coords.len())]);
    }
    for _ in 0..n_input {
        picks.push(input_coords[rng.gen_range(0..input_coords.len())]);
    }

    let mut worst = 0.0f64;
    for coord in picks {
        let (analytic, numeric) = match coord {
            Coord::Param { layer, param, idx } => {
                let orig = param_value(layers, layer, param, idx);
                set_param_value(layers, layer, param, idx, orig + cfg.eps);
                let plus = loss_fn(layers, inputs)?;
                set_param_value(layers, layer, param, idx, orig - cfg.eps);
                let minus = loss_fn(layers, inputs)?;
                set_param_value(layers, layer, param, idx, orig);
                (
                    sign * param_grads[layer][param][idx],
                    (plus - minus) / (2.0 * cfg.eps),
                )
            }
            Coord::Input { input, idx } => {
                let orig = inputs[input].data[idx];
                inputs[input].data[idx] = orig + cfg.eps;
                let plus = loss_fn(layers, inputs)?;
                inputs[input].data[idx] = orig - cfg.eps;
                let minus = loss_fn(layers, inputs)?;
                inputs[input].data[idx] = orig;
                (
                    sign * input_grads[input].data[idx],
                    (plus - minus) / (2.0 * cfg.eps),
                )
            }
        };
        // Relative error with a floor so inactive coordinates (analytic
        // and numeric both ~0) do not amplify finite-difference noise.
        let denom = analytic.abs().max(numeric.abs()).max(1e-3);
        let err = (analytic - numeric).abs() / denom;
        if err > worst {
            worst = err;
        }
    }
    Ok(worst)
}
