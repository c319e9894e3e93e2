//! Generates a small synthetic dataset: view pairs under known
//! similarity transforms, with detector noise and verified ground-truth
//! correspondences, written in the on-disk layout the `train` command
//! reads.
//!
//!     cargo run --example synthesize_dataset [OUT_DIR]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use logpolar::datagen::{
    build_correspondences, format_correspondences, gaussian_blob_image, save_view_pair,
    DetectorNoise, FilterConfig, SimilarityTransform,
};
use logpolar::geometry::{Keypoint, TAU};

fn main() -> logpolar::Result<()> {
    let out = std::env::args()
        .nth(1)
        .map(std::path::PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("logpolar-synth-demo"));
    std::fs::create_dir_all(&out)?;
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let filters = FilterConfig::default();

    for i in 0..4 {
        let base = gaussian_blob_image(200, 200, 14, &mut rng);
        // keypoints on a jittered grid, far enough apart to survive the
        // separation filter
        let mut kps = Vec::new();
        for gy in 0..6 {
            for gx in 0..6 {
                kps.push(Keypoint::new(
                    55.0 + gx as f64 * 18.0 + rng.gen::<f64>(),
                    55.0 + gy as f64 * 18.0 + rng.gen::<f64>(),
                    1.0 + rng.gen::<f64>(),
                    rng.gen::<f64>() * TAU,
                )?);
            }
        }
        let transform = SimilarityTransform {
            scale: 1.0 + rng.gen::<f64>(),
            rotation: (rng.gen::<f64>() - 0.5) * 40f64.to_radians(),
            tx: (rng.gen::<f64>() - 0.5) * 6.0,
            ty: (rng.gen::<f64>() - 0.5) * 6.0,
        };
        let detector = DetectorNoise {
            loc_std: 0.3,
            scale_log_std: 0.05,
            orient_std_deg: 5.0,
            update_scale: false,
        };
        let pair = logpolar::datagen::synth_pair(&base, &kps, &transform, 0.01, &detector, &mut rng)?;
        let set = build_correspondences(&pair, &filters)?;
        let stem = format!("pair{i:04}");
        save_view_pair(&out, &stem, &pair)?;
        std::fs::write(out.join(format!("{stem}.corr")), format_correspondences(&set))?;
        println!(
            "{stem}: scale {:.2}, rotation {:+.1} deg -> {} verified correspondences",
            transform.scale,
            transform.rotation.to_degrees(),
            set.records.len()
        );
    }
    println!("dataset written to {}", out.display());
    Ok(())
}
