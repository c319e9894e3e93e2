//! End-to-end acceptance suite. Each test prints one `[PASS]`/`[FAIL]`
//! line for the property it verifies, then asserts it.
//!
//! The trend-reproduction test trains four small models and is expensive
//! on the first run; its per-model outcomes are cached under
//! `target/trend-cache` (the protocol is fully seeded, so cached and
//! recomputed outcomes are identical). Run the `trend_experiment`
//! example ahead of time to warm that cache.

use std::time::Instant;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use logpolar::datagen::{
    build_correspondences, extract_support_patch, gaussian_blob_image, synth_pair,
    DetectorNoise, FilterConfig, GroundTruth, SimilarityTransform, ViewPair,
};
use logpolar::eval::{
    descriptor_distance, fpr95, retrieval_ranks, summarize_ranks, RetrievalQuery,
};
use logpolar::geometry::{GridKind, GridSpec, Keypoint};
use logpolar::image::{Image, Patch};
use logpolar::net::{
    build_network_with, full_network_gradcheck, load_checkpoint, save_checkpoint, Network,
    PATCH_SIDE,
};
use logpolar::nn::{FaultInjection, Layer};
use logpolar::run::{
    check_mining_against_oracle, check_radial_stretch, check_row_shift, layer_gradcheck,
    rotation_equivariance_mad, LAYER_KINDS,
};

const SEED: u64 = 20260823;

fn report(name: &str, pass: bool, detail: &str) {
    println!("[{}] {name}: {detail}", if pass { "PASS" } else { "FAIL" });
    assert!(pass, "{name}: {detail}");
}

// --- sampling-grid invariants ---------------------------------------------------

#[test]
fn row_shift_exactness() {
    let start = Instant::now();
    let result = check_row_shift(100, SEED);
    let elapsed = start.elapsed().as_secs_f64();
    report(
        "row-shift exactness",
        result.is_ok() && elapsed < 5.0,
        &format!(
            "100 keypoints bitwise in {elapsed:.2}s (limit 5s){}",
            result.err().map(|e| format!("; {e}")).unwrap_or_default()
        ),
    );
}

#[test]
fn radial_stretch_identity() {
    let result = check_radial_stretch(100, SEED);
    report(
        "radial stretch identity",
        result.is_ok(),
        &result
            .err()
            .map(|e| e.to_string())
            .unwrap_or_else(|| "squared support radius doubles the radial index, 100 keypoints".into()),
    );
}

#[test]
fn rotation_equivariance_end_to_end() {
    let mad = rotation_equivariance_mad(10, SEED).expect("equivariance probe runs");
    report(
        "rotation equivariance",
        mad < 0.02,
        &format!("worst mean absolute intensity difference {mad:.5} (limit 0.02)"),
    );
}

// --- gradients --------------------------------------------------------------------

#[test]
fn gradient_correctness_per_layer_and_full_network() {
    let mut worst: f64 = 0.0;
    let mut details = String::new();
    for kind in LAYER_KINDS {
        let err = layer_gradcheck(kind, SEED, None).expect("layer gradcheck runs");
        details.push_str(&format!("{kind} {err:.2e}, "));
        worst = worst.max(err);
    }
    // fixed fixture seed: the check must probe at a generic point, away
    // from the rectifier kinks and the triplet hinge boundary, where the
    // objective is differentiable
    let net_err = full_network_gradcheck(0, 3, 200, None).expect("network gradcheck runs");
    worst = worst.max(net_err);
    report(
        "gradient correctness",
        worst < 1e-4,
        &format!("{details}full network {net_err:.2e} (limit 1e-4)"),
    );
}

#[test]
fn gradient_fault_is_detected() {
    let fault = Some(FaultInjection::FlipGradSigns);
    let layer_err = layer_gradcheck("conv", SEED, fault).expect("faulted layer gradcheck runs");
    let net_err = full_network_gradcheck(0, 3, 200, fault).expect("faulted network gradcheck runs");
    report(
        "gradient fault detection",
        layer_err > 0.1 && net_err > 0.1,
        &format!("sign-flip fault: conv error {layer_err:.2e}, full network {net_err:.2e} (threshold 0.1)"),
    );
}

// --- mining -------------------------------------------------------------------------

#[test]
fn mining_matches_exhaustive_oracle() {
    let disagreements =
        check_mining_against_oracle(200, SEED).expect("mining oracle comparison runs");
    report(
        "mining oracle",
        disagreements == 0,
        &format!("200 random batches (K in 2..=64, with constructed ties): {disagreements} disagreements"),
    );
}

// --- FPR95 --------------------------------------------------------------------------

/// Independent O(P*N) re-derivation: sort positives, take the smallest
/// threshold admitting 95% of them, count admitted negatives.
fn fpr95_sweep(pos: &[f64], neg: &[f64]) -> f64 {
    let mut sorted = pos.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let k = ((0.95 * pos.len() as f64).ceil() as usize).max(1);
    let threshold = sorted[k - 1];
    neg.iter().filter(|&&d| d <= threshold).count() as f64 / neg.len() as f64
}

#[test]
fn fpr95_matches_threshold_sweep() {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let mut mismatches = 0usize;
    for _ in 0..100 {
        let p = rng.gen_range(1..200);
        let n = rng.gen_range(1..200);
        let pos: Vec<f64> = (0..p).map(|_| rng.gen::<f64>() * 2.0).collect();
        let neg: Vec<f64> = (0..n).map(|_| rng.gen::<f64>() * 2.0).collect();
        let got = fpr95(&pos, &neg).expect("fpr95 runs");
        if got != fpr95_sweep(&pos, &neg) {
            mismatches += 1;
        }
    }
    report(
        "fpr95 oracle",
        mismatches == 0,
        &format!("100 random score sets vs threshold sweep: {mismatches} mismatches"),
    );
}

#[test]
fn fpr95_on_same_distribution_is_095() {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED ^ 1);
    let pos: Vec<f64> = (0..10_000).map(|_| rng.gen()).collect();
    let neg: Vec<f64> = (0..10_000).map(|_| rng.gen()).collect();
    let rate = fpr95(&pos, &neg).expect("fpr95 runs");
    report(
        "fpr95 same-distribution",
        (rate - 0.95).abs() <= 0.02,
        &format!("identically distributed scores at 1e4 samples: {rate:.4} (expected 0.95 +/- 0.02)"),
    );
}

// --- correspondence builder ----------------------------------------------------------

fn default_filters() -> FilterConfig {
    FilterConfig::default()
}

/// Keypoints on a grid that stays in frame under scales up to 1.5 about
/// the image center.
fn grid_keypoints(size: usize, rng: &mut dyn RngCore) -> Vec<Keypoint> {
    let mut kps = Vec::new();
    let c = (size - 1) as f64 / 2.0;
    for gy in -2i32..=2 {
        for gx in -2i32..=2 {
            let x = c + gx as f64 * 12.0 + (rng.gen::<f64>() - 0.5);
            let y = c + gy as f64 * 12.0 + (rng.gen::<f64>() - 0.5);
            let sigma = 1.0 + rng.gen::<f64>();
            let theta = rng.gen::<f64>() * std::f64::consts::TAU;
            kps.push(Keypoint::new(x, y, sigma, theta).unwrap());
        }
    }
    kps
}

#[test]
fn correspondence_builder_recovers_planted_matches() {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED ^ 2);
    let cfg = default_filters();
    let mut worst = String::from("50 noise-free pairs, precision = recall = 1");
    let mut ok = true;
    for trial in 0..50 {
        let base = gaussian_blob_image(160, 160, 12, &mut rng);
        let kps = grid_keypoints(160, &mut rng);
        let transform = SimilarityTransform {
            scale: 1.0 + rng.gen::<f64>() * 0.5,
            rotation: (rng.gen::<f64>() * 2.0 - 1.0) * 20f64.to_radians(),
            tx: (rng.gen::<f64>() - 0.5) * 4.0,
            ty: (rng.gen::<f64>() - 0.5) * 4.0,
        };
        let pair = synth_pair(&base, &kps, &transform, 0.0, &DetectorNoise::none(), &mut rng)
            .expect("noise-free pair synthesizes");
        assert_eq!(pair.kps_b.len(), kps.len(), "planted keypoints stay in frame");
        let set = build_correspondences(&pair, &cfg).expect("builder runs");
        let exact = set.records.len() == kps.len()
            && set
                .records
                .iter()
                .enumerate()
                .all(|(i, r)| r.idx_a == i && r.idx_b == i);
        if !exact {
            ok = false;
            worst = format!(
                "trial {trial}: recovered {} of {} planted pairs exactly",
                set.records
                    .iter()
                    .filter(|r| r.idx_a == r.idx_b)
                    .count(),
                kps.len()
            );
            break;
        }
    }
    report("correspondence builder exact recovery", ok, &worst);
}

/// A hand-built pair under a known homography: keypoint 0 is the filter
/// target, keypoint 1 is a control that must always survive.
fn fixture_pair(h_ab: [f64; 9], kps_a: Vec<Keypoint>, kps_b: Vec<Keypoint>) -> ViewPair {
    let img = Image::new(128, 128, vec![0.5; 128 * 128]).unwrap();
    ViewPair {
        image_a: img.clone(),
        image_b: img,
        kps_a,
        kps_b,
        truth: GroundTruth::homography(h_ab).unwrap(),
        mask_a: None,
        mask_b: None,
    }
}

const IDENTITY_H: [f64; 9] = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];

fn kp(x: f64, y: f64, theta: f64) -> Keypoint {
    Keypoint::new(x, y, 1.5, theta).unwrap()
}

/// Runs the builder on a fixture and checks that exactly the control
/// pair (index 1 on both sides) survives.
fn expect_only_control(name: &str, pair: &ViewPair, control: (usize, usize)) {
    let set = build_correspondences(pair, &default_filters()).expect("builder runs");
    let pass = set.records.len() == 1
        && set.records[0].idx_a == control.0
        && set.records[0].idx_b == control.1;
    report(
        name,
        pass,
        &format!(
            "kept {:?}, want only the control pair {:?}",
            set.records
                .iter()
                .map(|r| (r.idx_a, r.idx_b))
                .collect::<Vec<_>>(),
            control
        ),
    );
}

#[test]
fn filter_projection_tolerance_rejects_far_detection() {
    // keypoint 0's only candidate sits 2 px from its true projection:
    // outside the 1.5 px tolerance but fine for every other filter
    let pair = fixture_pair(
        IDENTITY_H,
        vec![kp(30.0, 30.0, 0.0), kp(90.0, 90.0, 0.0)],
        vec![kp(32.0, 30.0, 0.0), kp(90.0, 90.0, 0.0)],
    );
    expect_only_control("projection-tolerance filter", &pair, (1, 1));
}

#[test]
fn filter_cycle_check_rejects_asymmetric_residual() {
    // halving homography: a residual of 1.4 px in view b grows to 2.8 px
    // on the way back, so only the cycle check can reject the pair
    let h = [0.5, 0.0, 0.0, 0.0, 0.5, 0.0, 0.0, 0.0, 1.0];
    let pair = fixture_pair(
        h,
        vec![kp(40.0, 40.0, 0.0), kp(100.0, 100.0, 0.0)],
        vec![kp(21.4, 20.0, 0.0), kp(50.0, 50.0, 0.0)],
    );
    expect_only_control("cycle-consistency filter", &pair, (1, 1));
}

#[test]
fn filter_occlusion_rejects_masked_keypoint() {
    // keypoint 0 projects exactly onto its detection, but that location
    // is flagged hidden in view b
    let mut pair = fixture_pair(
        IDENTITY_H,
        vec![kp(30.0, 30.0, 0.0), kp(90.0, 90.0, 0.0)],
        vec![kp(30.0, 30.0, 0.0), kp(90.0, 90.0, 0.0)],
    );
    let mut mask = vec![false; 128 * 128];
    mask[30 * 128 + 30] = true;
    pair.mask_b = Some(mask);
    expect_only_control("occlusion filter", &pair, (1, 1));
}

#[test]
fn filter_orientation_rejects_large_residual() {
    // identity mapping preserves orientation, so a detection rotated by
    // 30 degrees exceeds the 25 degree cutoff and nothing else
    let pair = fixture_pair(
        IDENTITY_H,
        vec![kp(30.0, 30.0, 0.0), kp(90.0, 90.0, 0.0)],
        vec![kp(30.0, 30.0, 30f64.to_radians()), kp(90.0, 90.0, 0.0)],
    );
    expect_only_control("orientation filter", &pair, (1, 1));
}

#[test]
fn filter_min_separation_suppresses_crowded_pair() {
    // two perfect matches 4 px apart: the 7 px suppression must drop the
    // later one (ties break by index) and nothing else objects
    let pair = fixture_pair(
        IDENTITY_H,
        vec![kp(30.0, 30.0, 0.0), kp(34.0, 30.0, 0.0)],
        vec![kp(30.0, 30.0, 0.0), kp(34.0, 30.0, 0.0)],
    );
    let set = build_correspondences(&pair, &default_filters()).expect("builder runs");
    let pass = set.records.len() == 1 && set.records[0].idx_a == 0 && set.records[0].idx_b == 0;
    report(
        "minimum-separation filter",
        pass,
        &format!(
            "kept {:?}, want only (0, 0)",
            set.records
                .iter()
                .map(|r| (r.idx_a, r.idx_b))
                .collect::<Vec<_>>()
        ),
    );
}

// --- descriptor contracts -------------------------------------------------------------

/// A fresh network with identity normalization statistics, as used when
/// describing without a trained checkpoint.
fn fresh_network(seed: u64) -> Network<f32> {
    let mut net: Network<f32> = build_network_with(seed, 0.1).unwrap();
    for layer in &mut net.layers {
        if let Layer::BatchNorm(bn) = layer {
            bn.initialized = true;
        }
    }
    net
}

fn sample_patches(count: usize, seed: u64) -> Vec<Patch> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = GridSpec::new(PATCH_SIDE, 96.0, GridKind::LogPolar).unwrap();
    (0..count)
        .map(|_| {
            let img = gaussian_blob_image(160, 160, 12, &mut rng);
            let keypoint = Keypoint::new(
                79.5 + (rng.gen::<f64>() - 0.5) * 10.0,
                79.5 + (rng.gen::<f64>() - 0.5) * 10.0,
                1.0 + rng.gen::<f64>() * 0.5,
                rng.gen::<f64>() * std::f64::consts::TAU,
            )
            .unwrap();
            extract_support_patch(&img, &keypoint, &spec).unwrap()
        })
        .collect()
}

#[test]
fn descriptors_have_unit_norm() {
    let mut net = fresh_network(SEED);
    let patches = sample_patches(8, SEED ^ 3);
    let descs = net.describe(&patches).unwrap();
    let worst = descs
        .iter()
        .map(|d| {
            let norm: f32 = d.values.iter().map(|v| v * v).sum::<f32>().sqrt();
            (f64::from(norm) - 1.0).abs()
        })
        .fold(0.0f64, f64::max);
    report(
        "descriptor unit norm",
        worst <= 1e-5,
        &format!("worst |norm - 1| over 8 descriptors: {worst:.2e} (limit 1e-5)"),
    );
}

#[test]
fn descriptors_ignore_affine_intensity_changes() {
    let mut net = fresh_network(SEED);
    let patches = sample_patches(4, SEED ^ 4);
    let rescaled: Vec<Patch> = patches
        .iter()
        .map(|p| Patch {
            size: p.size,
            grid_kind: p.grid_kind,
            lambda: p.lambda,
            data: p.data.iter().map(|v| 1.7 * v + 0.3).collect(),
        })
        .collect();
    let d0 = net.describe(&patches).unwrap();
    let d1 = net.describe(&rescaled).unwrap();
    let worst = d0
        .iter()
        .zip(&d1)
        .map(|(a, b)| descriptor_distance(&a.values, &b.values).unwrap())
        .fold(0.0f64, f64::max);
    report(
        "intensity-affine invariance",
        worst <= 1e-5,
        &format!("worst descriptor distance after x -> 1.7x + 0.3: {worst:.2e} (limit 1e-5)"),
    );
}

#[test]
fn checkpoints_round_trip_bitwise() {
    let net = fresh_network(SEED ^ 5);
    let bytes = save_checkpoint(&net);
    let reloaded = load_checkpoint(&bytes).unwrap();
    let again = save_checkpoint(&reloaded);
    report(
        "checkpoint round trip",
        bytes == again,
        &format!("{} bytes, save -> load -> save identical", bytes.len()),
    );
}

#[test]
fn training_is_bitwise_reproducible() {
    let bin = env!("CARGO_BIN_EXE_logpolar");
    let dir = std::env::temp_dir().join(format!("logpolar-acceptance-{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    let cfg_path = dir.join("tiny.cfg");
    std::fs::write(
        &cfg_path,
        "epochs = 2\nbatch_size = 8\nsynth_pairs = 4\nsynth_keypoints = 32\nsynth_max_scale = 1.5\nseed = 11\n",
    )
    .unwrap();
    let run = |args: &[&str]| {
        let status = std::process::Command::new(bin)
            .args(args)
            .status()
            .expect("CLI spawns");
        assert!(status.success(), "CLI failed: {args:?}");
    };
    let data = dir.join("data");
    let cfg = cfg_path.to_str().unwrap();
    run(&["--config", cfg, "--threads", "1", "--out", data.to_str().unwrap(), "synth"]);
    for name in ["run1", "run2"] {
        run(&[
            "--config",
            cfg,
            "--threads",
            "1",
            "--out",
            dir.join(name).to_str().unwrap(),
            "train",
            "--data",
            data.to_str().unwrap(),
        ]);
    }
    let m1 = std::fs::read(dir.join("run1/model.lpnet")).unwrap();
    let m2 = std::fs::read(dir.join("run2/model.lpnet")).unwrap();
    let e1 = std::fs::read(dir.join("run1/checkpoint_epoch001.lpnet")).unwrap();
    let e2 = std::fs::read(dir.join("run2/checkpoint_epoch001.lpnet")).unwrap();
    let pass = m1 == m2 && e1 == e2;
    report(
        "training determinism",
        pass,
        "two fixed-seed single-thread runs over 2 epochs produce bitwise identical checkpoints",
    );
    let _ = std::fs::remove_dir_all(&dir);
}

// --- scale-handling trend -------------------------------------------------------------

#[test]
fn logpolar_beats_cartesian_under_scale_change() {
    let cache = logpolar::trend::default_cache_dir();
    let outcomes = logpolar::trend::run_trend(&cache, |msg| println!("  trend: {msg}"))
        .expect("trend experiment runs");
    let f = logpolar::trend::trend_findings(&outcomes).expect("all four outcomes present");
    report(
        "scale-bin [2,4] advantage",
        f.bin24_relative_reduction >= 0.30,
        &format!(
            "log-polar {:.4} vs cartesian {:.4} in the [2,4] scale bin: {:.1}% relative reduction (need >= 30%)",
            f.logpolar_bin24,
            f.cartesian_bin24,
            100.0 * f.bin24_relative_reduction
        ),
    );
    report(
        "support-factor sweep",
        f.logpolar_relative_change <= 0.10 && f.cartesian_relative_change > 0.50,
        &format!(
            "16 -> 96: log-polar {:.4} -> {:.4} ({:+.1}%, limit +10%), cartesian {:.4} -> {:.4} ({:+.1}%, need > +50%)",
            f.logpolar_16,
            f.logpolar_96,
            100.0 * f.logpolar_relative_change,
            f.cartesian_16,
            f.cartesian_96,
            100.0 * f.cartesian_relative_change
        ),
    );
}

// --- retrieval ---------------------------------------------------------------------------

#[test]
fn retrieval_ranks_ideal_and_random_pools() {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED ^ 6);
    // planted ideal descriptors: the true match is at distance zero
    let ideal: Vec<RetrievalQuery> = (0..200)
        .map(|_| RetrievalQuery {
            true_distance: 0.0,
            other_distances: (0..99).map(|_| 0.1 + rng.gen::<f64>()).collect(),
        })
        .collect();
    let ranks = retrieval_ranks(&ideal).unwrap();
    let summary = summarize_ranks(&ranks).unwrap();
    report(
        "retrieval with ideal descriptors",
        summary.recall_at_1 == 1.0,
        &format!("rank-1 rate {:.3} over 200 queries (need 1.0)", summary.recall_at_1),
    );

    // random descriptors: the true match's rank is uniform over the pool
    let dim = 16;
    let mut random = Vec::new();
    for _ in 0..2000 {
        let q: Vec<f32> = (0..dim).map(|_| rng.gen::<f32>() - 0.5).collect();
        let cand: Vec<Vec<f32>> = (0..100)
            .map(|_| (0..dim).map(|_| rng.gen::<f32>() - 0.5).collect())
            .collect();
        random.push(RetrievalQuery {
            true_distance: descriptor_distance(&q, &cand[0]).unwrap(),
            other_distances: cand[1..]
                .iter()
                .map(|c| descriptor_distance(&q, c).unwrap())
                .collect(),
        });
    }
    let summary = summarize_ranks(&retrieval_ranks(&random).unwrap()).unwrap();
    report(
        "retrieval with random descriptors",
        (summary.mean_rank - 50.0).abs() <= 5.0,
        &format!(
            "mean rank {:.2} over 2000 queries of 100 candidates (need 50 +/- 10%)",
            summary.mean_rank
        ),
    );
}
