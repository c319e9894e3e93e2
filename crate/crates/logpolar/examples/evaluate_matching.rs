//! Scores descriptor matching on a synthetic view pair: global FPR95
//! (false positive rate at 95% recall) and FPR95 binned by scale
//! mismatch and orientation residual.
//!
//!     cargo run --example evaluate_matching

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use logpolar::datagen::{
    build_correspondences, extract_support_patch, gaussian_blob_image, DetectorNoise,
    FilterConfig, SimilarityTransform,
};
use logpolar::eval::{
    binned_fpr95, descriptor_distance, fpr95, MatchScores, ScoredPositive, DEFAULT_ORIENT_EDGES,
    DEFAULT_SCALE_EDGES,
};
use logpolar::geometry::{GridKind, GridSpec, Keypoint, TAU};
use logpolar::net::{build_network_with, Network, PATCH_SIDE};
use logpolar::nn::Layer;

fn main() -> logpolar::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(9);

    // several pairs so every scale bin sees some positives
    let mut scores = MatchScores::default();
    let spec = GridSpec::new(PATCH_SIDE, 96.0, GridKind::LogPolar)?;
    let mut net: Network<f32> = build_network_with(1, 0.1)?;
    for layer in &mut net.layers {
        if let Layer::BatchNorm(bn) = layer {
            bn.initialized = true;
        }
    }

    for _ in 0..6 {
        let base = gaussian_blob_image(200, 200, 14, &mut rng);
        let mut kps = Vec::new();
        for gy in 0..5 {
            for gx in 0..5 {
                kps.push(Keypoint::new(
                    60.0 + gx as f64 * 20.0,
                    60.0 + gy as f64 * 20.0,
                    1.0 + rng.gen::<f64>(),
                    rng.gen::<f64>() * TAU,
                )?);
            }
        }
        let transform = SimilarityTransform {
            scale: (rng.gen::<f64>() * 4f64.ln()).exp(),
            rotation: (rng.gen::<f64>() - 0.5) * 50f64.to_radians(),
            tx: 0.0,
            ty: 0.0,
        };
        let detector = DetectorNoise {
            loc_std: 0.3,
            scale_log_std: 0.05,
            orient_std_deg: 5.0,
            update_scale: false,
        };
        let pair =
            logpolar::datagen::synth_pair(&base, &kps, &transform, 0.0, &detector, &mut rng)?;
        let set = build_correspondences(&pair, &FilterConfig::default())?;

        let mut patches = Vec::new();
        for c in &set.records {
            patches.push(extract_support_patch(&pair.image_a, &pair.kps_a[c.idx_a], &spec)?);
            patches.push(extract_support_patch(&pair.image_b, &pair.kps_b[c.idx_b], &spec)?);
        }
        let descs = net.describe(&patches)?;
        for (i, c) in set.records.iter().enumerate() {
            scores.positives.push(ScoredPositive {
                distance: descriptor_distance(&descs[2 * i].values, &descs[2 * i + 1].values)?,
                scale_ratio: c.scale_ratio,
                orientation_residual: c.orientation_residual,
            });
            for j in 0..set.records.len() {
                if j != i {
                    scores.negatives.push(descriptor_distance(
                        &descs[2 * i].values,
                        &descs[2 * j + 1].values,
                    )?);
                }
            }
        }
    }

    let flat: Vec<f64> = scores.positives.iter().map(|p| p.distance).collect();
    println!(
        "untrained baseline on {} positives / {} negatives",
        scores.positives.len(),
        scores.negatives.len()
    );
    println!("global FPR95: {:.4}", fpr95(&flat, &scores.negatives)?);

    println!("\nFPR95 by scale-mismatch bin (all orientation residuals pooled):");
    for b in binned_fpr95(&scores, &DEFAULT_SCALE_EDGES, &[0.0, 180.0])? {
        let rate = b
            .fpr95
            .map(|r| format!("{r:.4}"))
            .unwrap_or_else(|| "  n/a".into());
        let conf = if b.low_confidence { " (low confidence)" } else { "" };
        println!(
            "  scale [{:.2}, {:.2}): {rate} over {} positives{conf}",
            b.scale_lo, b.scale_hi, b.positives
        );
    }
    println!("\nFPR95 by orientation-residual bin (all scales pooled):");
    for b in binned_fpr95(&scores, &[1.0, 4.0], &DEFAULT_ORIENT_EDGES)? {
        let rate = b
            .fpr95
            .map(|r| format!("{r:.4}"))
            .unwrap_or_else(|| "  n/a".into());
        let conf = if b.low_confidence { " (low confidence)" } else { "" };
        println!(
            "  orientation [{:.0}, {:.0}) deg: {rate} over {} positives{conf}",
            b.orient_lo, b.orient_hi, b.positives
        );
    }
    Ok(())
}
