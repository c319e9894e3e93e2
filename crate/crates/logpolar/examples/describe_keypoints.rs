//! Extracts log-polar patches at keypoints and turns them into unit-norm
//! 128-dimensional descriptors, then shows the distances that matter for
//! matching: a keypoint against its rotated self versus an unrelated
//! keypoint.
//!
//!     cargo run --example describe_keypoints

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use logpolar::datagen::{extract_support_patch, gaussian_blob_image};
use logpolar::eval::descriptor_distance;
use logpolar::geometry::{GridKind, GridSpec, Keypoint, TAU};
use logpolar::net::{build_network_with, Network, PATCH_SIDE};
use logpolar::nn::Layer;

fn main() -> logpolar::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let img = gaussian_blob_image(256, 256, 16, &mut rng);
    let spec = GridSpec::new(PATCH_SIDE, 96.0, GridKind::LogPolar)?;

    let kp = Keypoint::new(120.0, 130.0, 1.5, 0.4)?;
    let same_rotated = Keypoint::new(120.0, 130.0, 1.5, 0.4 + TAU / 8.0)?;
    let other = Keypoint::new(190.0, 70.0, 1.5, rng.gen::<f64>() * TAU)?;

    let patches = vec![
        extract_support_patch(&img, &kp, &spec)?,
        extract_support_patch(&img, &same_rotated, &spec)?,
        extract_support_patch(&img, &other, &spec)?,
    ];

    // a fresh network with identity normalization statistics, as used
    // when describing without a trained checkpoint
    let mut net: Network<f32> = build_network_with(1, 0.1)?;
    for layer in &mut net.layers {
        if let Layer::BatchNorm(bn) = layer {
            bn.initialized = true;
        }
    }
    let descs = net.describe(&patches)?;
    for (name, d) in ["anchor", "rotated", "unrelated"].iter().zip(&descs) {
        let norm: f32 = d.values.iter().map(|v| v * v).sum::<f32>().sqrt();
        println!("{name:10} descriptor: {} dims, norm {norm:.6}", d.values.len());
    }
    println!(
        "distance anchor <-> rotated self: {:.4}",
        descriptor_distance(&descs[0].values, &descs[1].values)?
    );
    println!(
        "distance anchor <-> unrelated:    {:.4}",
        descriptor_distance(&descs[0].values, &descs[2].values)?
    );
    Ok(())
}
