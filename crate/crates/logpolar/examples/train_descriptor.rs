//! Trains the descriptor network for a couple of epochs on a tiny
//! in-memory dataset: hardest-in-batch triplet mining, SGD with momentum
//! and a linearly decaying learning rate. Writes a checkpoint at the
//! end.
//!
//!     cargo run --example train_descriptor

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use logpolar::datagen::{
    assemble_batch, build_correspondences, gaussian_blob_image, BatchSource, DetectorNoise,
    FilterConfig, SimilarityTransform,
};
use logpolar::geometry::{GridKind, GridSpec, Keypoint, TAU};
use logpolar::net::{build_network_with, save_checkpoint, train_epoch, LossConfig, PATCH_SIDE};
use logpolar::nn::OptimConfig;

fn main() -> logpolar::Result<()> {
    let seed = 3;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // four synthetic view pairs with mild scale mismatch
    let mut dataset = Vec::new();
    for _ in 0..4 {
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
            scale: 1.0 + rng.gen::<f64>() * 0.5,
            rotation: (rng.gen::<f64>() - 0.5) * 30f64.to_radians(),
            tx: 0.0,
            ty: 0.0,
        };
        let pair = logpolar::datagen::synth_pair(
            &base,
            &kps,
            &transform,
            0.0,
            &DetectorNoise::none(),
            &mut rng,
        )?;
        let set = build_correspondences(&pair, &FilterConfig::default())?;
        dataset.push((pair, set));
    }
    let sources: Vec<BatchSource> = dataset
        .iter()
        .map(|(pair, set)| BatchSource { pair, set })
        .collect();
    let total: usize = dataset.iter().map(|(_, s)| s.records.len()).sum();
    println!("dataset: {} view pairs, {total} correspondences", dataset.len());

    let spec = GridSpec::new(PATCH_SIDE, 96.0, GridKind::LogPolar)?;
    let epochs = 2;
    let batch_k = 16;
    let mut net = build_network_with::<f32>(seed, 0.1)?;
    let optim = OptimConfig::new(0.1, 0.9, 1e-4, epochs)?;
    let loss_cfg = LossConfig::default();

    for epoch in 0..epochs {
        let mut data_rng = ChaCha8Rng::seed_from_u64(seed ^ (100 + epoch as u64));
        let mut train_rng = ChaCha8Rng::seed_from_u64(seed ^ (200 + epoch as u64));
        let per_epoch = (total / batch_k).max(1);
        let mut produced = 0;
        let batches = std::iter::from_fn(|| {
            if produced == per_epoch {
                return None;
            }
            produced += 1;
            Some(assemble_batch(&sources, &spec, batch_k, 5.0, &mut data_rng).map(|ab| ab.batch))
        });
        let stats = train_epoch(&mut net, batches, &optim, &loss_cfg, epoch, &mut train_rng)?;
        println!(
            "epoch {epoch}: mean loss {:.4} over {} batches, {} active triplets",
            stats.mean_loss, stats.batches, stats.active_triplets
        );
    }

    let out = std::env::temp_dir().join("logpolar-demo-model.lpnet");
    std::fs::write(&out, save_checkpoint(&net))?;
    println!("checkpoint written to {}", out.display());
    Ok(())
}
