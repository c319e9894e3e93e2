//! Verifies every analytic backward pass against central finite
//! differences in f64, then injects a sign-flip fault to show the
//! harness actually catches broken gradients.
//!
//!     cargo run --example gradient_check

use logpolar::net::full_network_gradcheck;
use logpolar::nn::FaultInjection;
use logpolar::run::{layer_gradcheck, LAYER_KINDS};

fn main() -> logpolar::Result<()> {
    let seed = 0;
    for kind in LAYER_KINDS {
        let err = layer_gradcheck(kind, seed, None)?;
        println!("layer {kind:<13} worst relative error {err:.3e}");
    }
    let err = full_network_gradcheck(seed, 2, 60, None)?;
    println!("full network + triplet loss: worst relative error {err:.3e}");

    let flipped = layer_gradcheck("conv", seed, Some(FaultInjection::FlipGradSigns))?;
    println!("with sign-flipped conv gradients: {flipped:.3e} (the fault is loud)");
    Ok(())
}
