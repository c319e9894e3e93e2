//! Command-line entry points: synthetic data generation, training,
//! description, evaluation, gradient checking, and a self-check suite.
//! Every run writes a resolved-config snapshot next to its outputs so it
//! can be reproduced bit-exactly in single-thread mode.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::datagen::{
    assemble_batch, build_correspondences, extract_support_patch, format_correspondences,
    gaussian_blob_image, load_view_pair, parse_correspondences, save_view_pair, BatchSource,
    CorrespondenceSet, DetectorNoise, SimilarityTransform, ViewPair,
};
use crate::error::{Error, Result};
use crate::eval::{
    binned_fpr95, bins_csv, descriptor_distance, fpr95, global_csv, parse_score_file, ranks_csv,
    retrieval_ranks, summarize_ranks, GlobalRow, MatchScores, RetrievalQuery, ScoredPositive,
    DEFAULT_ORIENT_EDGES, DEFAULT_SCALE_EDGES,
};
use crate::geometry::{
    logpolar_grid, parse_keypoints, GridKind, GridSpec, Keypoint, TAU,
};
use crate::image::{bilinear_sample, decode_image, Image, ImageFormat};
use crate::loss::{mine_hardest_in_batch, distance_matrix, AnchorSide};
use crate::net::{
    build_network_with, encode_descriptors, format_descriptor_sidecar, full_network_gradcheck,
    load_checkpoint, save_checkpoint, LossConfig, Network, PATCH_SIDE,
};
use crate::nn::{
    finite_diff_check, BatchNorm, ConvLayer, FaultInjection, GradCheckConfig, InstanceNorm,
    L2Normalize, Layer, Mode, OptimConfig, ReluDropout, Tensor4,
};

#[derive(Parser, Debug)]
#[command(
    name = "logpolar",
    about = "Log-polar local patch descriptors: data synthesis, training, description, evaluation",
    version
)]
struct Cli {
    /// Flat key=value configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config file's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory or file, command-dependent.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads; 1 guarantees bitwise determinism.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate synthetic view pairs with planted scale mismatch and
    /// verified correspondences.
    Synth,
    /// Train a descriptor network on a directory of view-pair manifests.
    Train {
        /// Directory of *.manifest / *.corr files from `synth`.
        #[arg(long)]
        data: PathBuf,
    },
    /// Compute descriptors for images + keypoints into one descriptor file.
    Describe {
        /// Image file or directory (*.pgm / *.rawf32).
        #[arg(long)]
        images: PathBuf,
        /// Keypoint file or directory (*.kp, matched to images by stem).
        #[arg(long)]
        keypoints: PathBuf,
        /// Trained network checkpoint; without one an untrained network
        /// with default normalization statistics is used.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Global false positive rate at 95% recall.
    #[command(name = "eval-fpr95")]
    EvalFpr95 {
        #[command(flatten)]
        inputs: ScoreInputs,
    },
    /// FPR95 binned by scale mismatch and orientation residual.
    #[command(name = "eval-bins")]
    EvalBins {
        #[command(flatten)]
        inputs: ScoreInputs,
    },
    /// Retrieval ranks of true matches against a distractor pool.
    #[command(name = "eval-retrieval")]
    EvalRetrieval {
        #[arg(long)]
        desc_a: PathBuf,
        #[arg(long)]
        desc_b: PathBuf,
        /// Correspondence text file pairing descriptor indices.
        #[arg(long)]
        matches: PathBuf,
    },
    /// Finite-difference verification of every layer kind and the full
    /// network with triplet loss.
    Gradcheck {
        /// Inject a sign-flip fault to demonstrate the harness detects
        /// broken gradients.
        #[arg(long)]
        fault: bool,
    },
    /// Run the full invariant suite and report pass/fail per check.
    Selfcheck,
}

#[derive(clap::Args, Debug)]
struct ScoreInputs {
    /// Labelled score file: lines `p dist [scale_ratio orient_deg]` or
    /// `n dist`.
    #[arg(long, conflicts_with_all = ["desc_a", "desc_b", "matches"])]
    scores: Option<PathBuf>,
    #[arg(long, requires = "desc_b", requires = "matches")]
    desc_a: Option<PathBuf>,
    #[arg(long, requires = "desc_a")]
    desc_b: Option<PathBuf>,
    /// Correspondence text file pairing descriptor indices.
    #[arg(long)]
    matches: Option<PathBuf>,
}

/// Process entry point: parse arguments, dispatch, map errors to exit
/// codes (0 success, 1 validation error, 2 runtime failure).
pub fn cli_main<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    if cli.threads == 0 {
        return Err(Error::InvalidArgument("--threads must be at least 1".into()));
    }
    // A second build_global in the same process is harmless: the first
    // pool stays in effect.
    let _ = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads)
        .build_global();

    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }

    match cli.command {
        Command::Synth => cmd_synth(&cfg, require_out(&cli.out)?),
        Command::Train { data } => cmd_train(&cfg, &data, require_out(&cli.out)?),
        Command::Describe {
            images,
            keypoints,
            checkpoint,
        } => cmd_describe(
            &cfg,
            &images,
            &keypoints,
            checkpoint.as_deref(),
            require_out(&cli.out)?,
        ),
        Command::EvalFpr95 { inputs } => cmd_eval_fpr95(&cfg, &inputs, cli.out.as_deref()),
        Command::EvalBins { inputs } => cmd_eval_bins(&cfg, &inputs, require_out(&cli.out)?),
        Command::EvalRetrieval {
            desc_a,
            desc_b,
            matches,
        } => cmd_eval_retrieval(&cfg, &desc_a, &desc_b, &matches, cli.out.as_deref()),
        Command::Gradcheck { fault } => cmd_gradcheck(&cfg, fault),
        Command::Selfcheck => cmd_selfcheck(&cfg),
    }
}

fn require_out<'a>(out: &'a Option<PathBuf>) -> Result<&'a Path> {
    out.as_deref()
        .ok_or_else(|| Error::InvalidArgument("this command requires --out".into()))
}

/// Snapshot path convention: `resolved.cfg` inside an output directory,
/// `<file>.cfg` beside an output file.
fn write_snapshot(cfg: &RunConfig, out: &Path, is_dir: bool) -> Result<()> {
    let path = if is_dir {
        out.join("resolved.cfg")
    } else {
        let mut name = out.file_name().unwrap_or_default().to_os_string();
        name.push(".cfg");
        out.with_file_name(name)
    };
    std::fs::write(path, cfg.snapshot())?;
    Ok(())
}

fn grid_spec(cfg: &RunConfig) -> Result<GridSpec> {
    GridSpec::new(cfg.patch_size, cfg.lambda, cfg.grid_kind)
}

fn filter_config(cfg: &RunConfig) -> crate::datagen::FilterConfig {
    crate::datagen::FilterConfig {
        projection_tol: cfg.projection_tol,
        orientation_tol_deg: cfg.orientation_tol_deg,
        min_separation: cfg.min_separation,
        distractor_exclusion: cfg.distractor_exclusion,
    }
}

// --- synth --------------------------------------------------------------------

/// Keypoints planted on a jittered grid with the given margin, far enough
/// apart to survive the separation filter.
fn planted_keypoints(
    image_size: usize,
    count: usize,
    min_separation: f64,
    rng: &mut dyn RngCore,
) -> Vec<Keypoint> {
    let margin = image_size as f64 * 0.22;
    let span = image_size as f64 - 2.0 * margin;
    let step = (min_separation * 1.6).max(4.0);
    let per_row = ((span / step).floor() as usize + 1).max(1);
    let mut kps = Vec::new();
    for i in 0..count.min(per_row * per_row) {
        let gx = (i % per_row) as f64;
        let gy = (i / per_row) as f64;
        let jitter = step * 0.15;
        let x = margin + gx * step + (rng.gen::<f64>() - 0.5) * jitter;
        let y = margin + gy * step + (rng.gen::<f64>() - 0.5) * jitter;
        let sigma = 1.0 + rng.gen::<f64>();
        let theta = rng.gen::<f64>() * TAU;
        kps.push(Keypoint::new(x, y, sigma, theta).expect("generated keypoint is valid"));
    }
    kps
}

/// One synthetic pair with a planted scale mismatch drawn log-uniformly
/// from [1, max_scale] (the detector keeps the a-side scale, so the
/// transform scale becomes the correspondence's scale ratio).
pub(crate) fn synth_one_pair(
    cfg: &RunConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(ViewPair, CorrespondenceSet)> {
    let base = gaussian_blob_image(cfg.synth_image_size, cfg.synth_image_size, 14, rng);
    let kps = planted_keypoints(
        cfg.synth_image_size,
        cfg.synth_keypoints,
        cfg.min_separation,
        rng,
    );
    let scale = (rng.gen::<f64>() * cfg.synth_max_scale.ln()).exp();
    let rotation = (rng.gen::<f64>() * 2.0 - 1.0) * cfg.synth_max_rotation_deg.to_radians();
    let transform = SimilarityTransform {
        scale,
        rotation,
        tx: (rng.gen::<f64>() - 0.5) * 6.0,
        ty: (rng.gen::<f64>() - 0.5) * 6.0,
    };
    let detector = DetectorNoise {
        loc_std: 0.3,
        scale_log_std: 0.05,
        orient_std_deg: 5.0,
        update_scale: false,
    };
    let pair = synth_pair_with_retry(&base, &kps, &transform, cfg.synth_noise, &detector, rng)?;
    let set = build_correspondences(&pair, &filter_config(cfg))?;
    Ok((pair, set))
}

fn synth_pair_with_retry(
    base: &Image,
    kps: &[Keypoint],
    transform: &SimilarityTransform,
    noise: f64,
    detector: &DetectorNoise,
    rng: &mut ChaCha8Rng,
) -> Result<ViewPair> {
    crate::datagen::synth_pair(base, kps, transform, noise, detector, rng)
}

fn cmd_synth(cfg: &RunConfig, out: &Path) -> Result<()> {
    std::fs::create_dir_all(out)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut index = String::new();
    let mut total = 0usize;
    for i in 0..cfg.synth_pairs {
        let (pair, set) = synth_one_pair(cfg, &mut rng)?;
        let stem = format!("pair{i:04}");
        let manifest = save_view_pair(out, &stem, &pair)?;
        std::fs::write(
            out.join(format!("{stem}.corr")),
            format_correspondences(&set),
        )?;
        index.push_str(&format!(
            "{}\n",
            manifest.file_name().unwrap().to_string_lossy()
        ));
        total += set.records.len();
    }
    std::fs::write(out.join("index.txt"), index)?;
    write_snapshot(cfg, out, true)?;
    println!(
        "synth: wrote {} pairs, {total} correspondences to {}",
        cfg.synth_pairs,
        out.display()
    );
    Ok(())
}

// --- train --------------------------------------------------------------------

fn load_dataset(data: &Path) -> Result<Vec<(ViewPair, CorrespondenceSet)>> {
    let mut manifests: Vec<PathBuf> = std::fs::read_dir(data)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "manifest"))
        .collect();
    manifests.sort();
    if manifests.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "no *.manifest files in {}",
            data.display()
        )));
    }
    let mut out = Vec::with_capacity(manifests.len());
    for m in &manifests {
        let pair = load_view_pair(m)?;
        let corr_path = m.with_extension("corr");
        let set = parse_correspondences(&std::fs::read_to_string(&corr_path).map_err(|e| {
            Error::InvalidArgument(format!("missing correspondences {}: {e}", corr_path.display()))
        })?)?;
        out.push((pair, set));
    }
    Ok(out)
}

fn cmd_train(cfg: &RunConfig, data: &Path, out: &Path) -> Result<()> {
    if cfg.patch_size != PATCH_SIDE {
        return Err(Error::Config(format!(
            "the descriptor network requires patch_size {PATCH_SIDE}, got {}",
            cfg.patch_size
        )));
    }
    std::fs::create_dir_all(out)?;
    let dataset = load_dataset(data)?;
    let sources: Vec<BatchSource> = dataset
        .iter()
        .map(|(pair, set)| BatchSource { pair, set })
        .collect();
    let total: usize = dataset.iter().map(|(_, s)| s.records.len()).sum();
    let spec = grid_spec(cfg)?;
    let batches_per_epoch = (total / cfg.batch_size).max(1);

    let mut net: Network<f32> = build_network_with(cfg.seed, cfg.dropout)?;
    let optim = OptimConfig::new(
        cfg.learning_rate,
        cfg.momentum,
        cfg.weight_decay,
        cfg.epochs,
    )?;
    let loss_cfg = LossConfig {
        margin: cfg.margin,
        power: cfg.distance_power,
    };
    let mut log = String::from("# epoch mean_loss batches active_triplets\n");
    for epoch in 0..cfg.epochs {
        // independent streams per epoch: one for batch assembly, one for
        // dropout inside the forward pass
        let mut data_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (0xDA7A_0000 + epoch as u64));
        let mut train_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (0x7EA1_0000 + epoch as u64));
        let mut produced = 0usize;
        let batches = std::iter::from_fn(|| {
            if produced == batches_per_epoch {
                return None;
            }
            produced += 1;
            Some(
                assemble_batch(
                    &sources,
                    &spec,
                    cfg.batch_size,
                    cfg.jitter_std_deg,
                    &mut data_rng,
                )
                .map(|ab| ab.batch),
            )
        });
        let stats = crate::net::train_epoch(&mut net, batches, &optim, &loss_cfg, epoch, &mut train_rng)?;
        log.push_str(&format!(
            "{epoch} {} {} {}\n",
            stats.mean_loss, stats.batches, stats.active_triplets
        ));
        std::fs::write(
            out.join(format!("checkpoint_epoch{epoch:03}.lpnet")),
            save_checkpoint(&net),
        )?;
    }
    std::fs::write(out.join("model.lpnet"), save_checkpoint(&net))?;
    std::fs::write(out.join("loss.log"), &log)?;
    write_snapshot(cfg, out, true)?;
    println!(
        "train: {} epochs x {batches_per_epoch} batches on {total} correspondences -> {}",
        cfg.epochs,
        out.display()
    );
    Ok(())
}

// --- describe -----------------------------------------------------------------

fn load_image_file(path: &Path) -> Result<Image> {
    let bytes = std::fs::read(path)?;
    let fmt = match path.extension().and_then(|e| e.to_str()) {
        Some("pgm") => ImageFormat::Pgm8,
        Some("rawf32") => ImageFormat::RawF32,
        other => {
            return Err(Error::InvalidArgument(format!(
                "unsupported image extension {other:?} for {} (expected .pgm or .rawf32)",
                path.display()
            )))
        }
    };
    decode_image(&bytes, fmt)
}

/// Resolve (image, keypoint-file) work items from file-or-directory
/// arguments; directory inputs are matched by file stem.
fn describe_inputs(images: &Path, keypoints: &Path) -> Result<Vec<(PathBuf, PathBuf)>> {
    if images.is_file() {
        return Ok(vec![(images.to_path_buf(), keypoints.to_path_buf())]);
    }
    let mut items: Vec<(PathBuf, PathBuf)> = Vec::new();
    let mut files: Vec<PathBuf> = std::fs::read_dir(images)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| e == "pgm" || e == "rawf32")
        })
        .collect();
    files.sort();
    for img in files {
        let stem = img
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| Error::InvalidArgument(format!("bad file name {}", img.display())))?;
        let kp = if keypoints.is_dir() {
            keypoints.join(format!("{stem}.kp"))
        } else {
            keypoints.to_path_buf()
        };
        if !kp.exists() {
            return Err(Error::InvalidArgument(format!(
                "no keypoint file {} for image {}",
                kp.display(),
                img.display()
            )));
        }
        items.push((img, kp));
    }
    Ok(items)
}

fn cmd_describe(
    cfg: &RunConfig,
    images: &Path,
    keypoints: &Path,
    checkpoint: Option<&Path>,
    out: &Path,
) -> Result<()> {
    if cfg.patch_size != PATCH_SIDE {
        return Err(Error::Config(format!(
            "the descriptor network requires patch_size {PATCH_SIDE}, got {}",
            cfg.patch_size
        )));
    }
    let spec = grid_spec(cfg)?;
    let mut patches = Vec::new();
    let mut all_kps = Vec::new();
    for (img_path, kp_path) in describe_inputs(images, keypoints)? {
        let img = load_image_file(&img_path)?;
        let kps = parse_keypoints(&std::fs::read_to_string(&kp_path)?)?;
        for kp in &kps {
            patches.push(extract_support_patch(&img, kp, &spec)?);
        }
        all_kps.extend(kps);
    }

    let descriptors = if patches.is_empty() {
        Vec::new()
    } else {
        let mut net = match checkpoint {
            Some(path) => load_checkpoint(&std::fs::read(path)?)?,
            None => {
                let mut net: Network<f32> = build_network_with(cfg.seed, cfg.dropout)?;
                // an untrained network has no batch statistics yet; fall
                // back to the identity normalization (mean 0, variance 1)
                for layer in &mut net.layers {
                    if let Layer::BatchNorm(bn) = layer {
                        bn.initialized = true;
                    }
                }
                net
            }
        };
        net.describe(&patches)?
    };

    if let Some(parent) = out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    std::fs::write(out, encode_descriptors(&descriptors)?)?;
    let mut sidecar_name = out.file_name().unwrap_or_default().to_os_string();
    sidecar_name.push(".meta");
    std::fs::write(
        out.with_file_name(sidecar_name),
        format_descriptor_sidecar(cfg.grid_kind, cfg.lambda, &all_kps),
    )?;
    write_snapshot(cfg, out, false)?;
    println!("describe: {} descriptors -> {}", descriptors.len(), out.display());
    Ok(())
}

// --- evaluation ---------------------------------------------------------------

fn load_descriptor_file(path: &Path) -> Result<(Vec<Vec<f32>>, Option<(GridKind, f64)>)> {
    let descs = crate::net::decode_descriptors(&std::fs::read(path)?)?;
    let mut meta_name = path.file_name().unwrap_or_default().to_os_string();
    meta_name.push(".meta");
    let meta_path = path.with_file_name(meta_name);
    let meta = if meta_path.exists() {
        let (kind, lambda, _) =
            crate::net::parse_descriptor_sidecar(&std::fs::read_to_string(meta_path)?)?;
        Some((kind, lambda))
    } else {
        None
    };
    Ok((descs, meta))
}

struct DescriptorPair {
    a: Vec<Vec<f32>>,
    b: Vec<Vec<f32>>,
    matches: CorrespondenceSet,
}

fn load_descriptor_pair(desc_a: &Path, desc_b: &Path, matches: &Path) -> Result<DescriptorPair> {
    let (a, meta_a) = load_descriptor_file(desc_a)?;
    let (b, meta_b) = load_descriptor_file(desc_b)?;
    if let (Some(ma), Some(mb)) = (&meta_a, &meta_b) {
        if ma != mb {
            return Err(Error::InvalidArgument(format!(
                "descriptor files disagree on grid/lambda: {:?} vs {:?}",
                ma, mb
            )));
        }
    }
    let set = parse_correspondences(&std::fs::read_to_string(matches)?)?;
    for c in &set.records {
        if c.idx_a >= a.len() || c.idx_b >= b.len() {
            return Err(Error::InvalidArgument(format!(
                "correspondence ({}, {}) exceeds descriptor counts ({}, {})",
                c.idx_a,
                c.idx_b,
                a.len(),
                b.len()
            )));
        }
    }
    Ok(DescriptorPair {
        a,
        b,
        matches: set,
    })
}

/// Positive distances from the matched pairs; negatives from every
/// cross-pairing of non-corresponding matched keypoints.
fn scores_from_descriptors(pair: &DescriptorPair) -> Result<MatchScores> {
    let mut scores = MatchScores::default();
    for c in &pair.matches.records {
        scores.positives.push(ScoredPositive {
            distance: descriptor_distance(&pair.a[c.idx_a], &pair.b[c.idx_b])?,
            scale_ratio: c.scale_ratio,
            orientation_residual: c.orientation_residual,
        });
    }
    for ci in &pair.matches.records {
        for cj in &pair.matches.records {
            if ci.idx_a != cj.idx_a {
                scores
                    .negatives
                    .push(descriptor_distance(&pair.a[ci.idx_a], &pair.b[cj.idx_b])?);
            }
        }
    }
    Ok(scores)
}

fn resolve_scores(cfg: &RunConfig, inputs: &ScoreInputs) -> Result<MatchScores> {
    match (&inputs.scores, &inputs.desc_a, &inputs.desc_b, &inputs.matches) {
        (Some(path), None, None, None) => parse_score_file(&std::fs::read_to_string(path)?),
        (None, Some(a), Some(b), Some(m)) => {
            let _ = cfg;
            scores_from_descriptors(&load_descriptor_pair(a, b, m)?)
        }
        _ => Err(Error::InvalidArgument(
            "provide either --scores or all of --desc-a/--desc-b/--matches".into(),
        )),
    }
}

fn cmd_eval_fpr95(cfg: &RunConfig, inputs: &ScoreInputs, out: Option<&Path>) -> Result<()> {
    let scores = resolve_scores(cfg, inputs)?;
    let flat: Vec<f64> = scores.positives.iter().map(|p| p.distance).collect();
    let rate = fpr95(&flat, &scores.negatives)?;
    println!("{rate}");
    if let Some(out) = out {
        let csv = global_csv(&[GlobalRow {
            method: "descriptor".into(),
            grid_kind: cfg.grid_kind.name().into(),
            lambda: cfg.lambda,
            fpr95: rate,
            positives: scores.positives.len(),
            negatives: scores.negatives.len(),
        }]);
        std::fs::write(out, csv)?;
        write_snapshot(cfg, out, false)?;
    }
    Ok(())
}

fn cmd_eval_bins(cfg: &RunConfig, inputs: &ScoreInputs, out: &Path) -> Result<()> {
    let scores = resolve_scores(cfg, inputs)?;
    let bins = binned_fpr95(&scores, &DEFAULT_SCALE_EDGES, &DEFAULT_ORIENT_EDGES)?;
    std::fs::write(out, bins_csv(&bins))?;
    write_snapshot(cfg, out, false)?;
    let populated = bins.iter().filter(|b| b.positives > 0).count();
    println!(
        "eval-bins: {populated}/{} cells populated -> {}",
        bins.len(),
        out.display()
    );
    Ok(())
}

fn cmd_eval_retrieval(
    cfg: &RunConfig,
    desc_a: &Path,
    desc_b: &Path,
    matches: &Path,
    out: Option<&Path>,
) -> Result<()> {
    let pair = load_descriptor_pair(desc_a, desc_b, matches)?;
    let records: Vec<_> = pair
        .matches
        .records
        .iter()
        .take(cfg.matches_per_pair)
        .collect();
    if records.is_empty() {
        return Err(Error::InvalidArgument("no correspondences to evaluate".into()));
    }
    // candidate pool: every matched b-descriptor plus unmatched
    // b-descriptors as distractors (their 3 px exclusion from any match
    // endpoint is enforced by the correspondence builder upstream)
    let matched_b: std::collections::HashSet<usize> =
        records.iter().map(|c| c.idx_b).collect();
    let mut pool: Vec<usize> = records.iter().map(|c| c.idx_b).collect();
    let mut distractors = 0usize;
    for j in 0..pair.b.len() {
        if distractors == cfg.distractors_per_pair {
            break;
        }
        if !matched_b.contains(&j) {
            pool.push(j);
            distractors += 1;
        }
    }
    let mut queries = Vec::with_capacity(records.len());
    for c in &records {
        let q = &pair.a[c.idx_a];
        let true_distance = descriptor_distance(q, &pair.b[c.idx_b])?;
        let mut others = Vec::with_capacity(pool.len() - 1);
        for &j in &pool {
            if j != c.idx_b {
                others.push(descriptor_distance(q, &pair.b[j])?);
            }
        }
        queries.push(RetrievalQuery {
            true_distance,
            other_distances: others,
        });
    }
    let ranks = retrieval_ranks(&queries)?;
    let summary = summarize_ranks(&ranks)?;
    println!(
        "queries {} pool {} mean_rank {} median_rank {} rank1 {}",
        summary.queries,
        pool.len(),
        summary.mean_rank,
        summary.median_rank,
        summary.recall_at_1
    );
    if let Some(out) = out {
        std::fs::write(out, ranks_csv(&ranks))?;
        write_snapshot(cfg, out, false)?;
    }
    Ok(())
}

// --- gradcheck ------------------------------------------------------------------

/// Names accepted by [`layer_gradcheck`].
pub const LAYER_KINDS: [&str; 5] = [
    "conv",
    "batchnorm",
    "instancenorm",
    "relu_dropout",
    "l2_normalize",
];

/// Finite-difference check of one layer kind in isolation (f64,
/// deterministic forwards, linear readout loss). Returns the worst
/// relative error over sampled parameter and input coordinates.
pub fn layer_gradcheck(kind: &str, seed: u64, fault: Option<FaultInjection>) -> Result<f64> {
    let layer: Layer<f64> = match kind {
        "conv" => Layer::Conv(ConvLayer::new(3, 2, 3, 1, 1)?),
        "batchnorm" => {
            let mut bn = BatchNorm::new(2);
            // exercise non-trivial affine parameters
            bn.gamma = vec![1.3, 0.7];
            bn.beta = vec![0.2, -0.4];
            Layer::BatchNorm(bn)
        }
        "instancenorm" => Layer::InstanceNorm(InstanceNorm::new()),
        "relu_dropout" => Layer::ReluDropout(ReluDropout::new(0.0)?),
        "l2_normalize" => Layer::L2Normalize(L2Normalize::new()),
        other => {
            return Err(Error::InvalidArgument(format!(
                "unknown layer kind {other:?} (expected one of {LAYER_KINDS:?})"
            )))
        }
    };
    let mut layers = vec![layer];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, c, h, w) = (2, 2, 6, 6);
    let data: Vec<f64> = (0..n * c * h * w)
        .map(|_| {
            // keep magnitudes away from the ReLU kink so central
            // differences stay on one side of it
            let mag = 0.2 + rng.gen::<f64>();
            if rng.gen::<bool>() {
                mag
            } else {
                -mag
            }
        })
        .collect();
    let mut inputs = vec![Tensor4::from_vec(n, c, h, w, data)?];

    // fixed linear readout so the loss depends on every output coordinate
    let readout = |y: &Tensor4<f64>| -> f64 {
        y.data
            .iter()
            .enumerate()
            .map(|(i, v)| v * (1.0 + (i as f64).sin() * 0.5))
            .sum()
    };
    let d_readout = |y: &Tensor4<f64>| -> Tensor4<f64> {
        let mut d = y.clone();
        for (i, v) in d.data.iter_mut().enumerate() {
            *v = 1.0 + (i as f64).sin() * 0.5;
        }
        d
    };

    let cfg = GradCheckConfig {
        seed: seed ^ 0xC0FFEE,
        fault,
        ..GradCheckConfig::default()
    };
    let mut scratch_rng = ChaCha8Rng::seed_from_u64(0);
    finite_diff_check(
        &mut layers,
        &mut inputs,
        |layers, inputs| {
            let (y, _) = layers[0].forward(&inputs[0], Mode::Deterministic, &mut scratch_rng)?;
            Ok(readout(&y))
        },
        |layers, inputs| {
            let mut scratch = ChaCha8Rng::seed_from_u64(0);
            let (y, aux) = layers[0].forward(&inputs[0], Mode::Deterministic, &mut scratch)?;
            let d_in = layers[0].backward(&aux, &d_readout(&y))?;
            Ok(vec![d_in])
        },
        &cfg,
    )
}

fn cmd_gradcheck(cfg: &RunConfig, fault: bool) -> Result<()> {
    let fault = fault.then_some(FaultInjection::FlipGradSigns);
    let mut worst = 0.0f64;
    for kind in LAYER_KINDS {
        let err = layer_gradcheck(kind, cfg.seed, fault)?;
        println!("layer {kind:<13} worst_rel_err {err:.3e}");
        worst = worst.max(err);
    }
    let err = full_network_gradcheck(cfg.seed, 3, 200, fault)?;
    println!("full network    worst_rel_err {err:.3e}");
    worst = worst.max(err);
    println!("worst_rel_err {worst:.3e}");
    Ok(())
}

// --- invariant checks (shared by selfcheck and the test suite) -------------------

/// Log-polar grids at `theta` and `theta + 2*pi*k/L` must be equal under
/// a cyclic row rotation, bitwise.
pub fn check_row_shift(trials: usize, seed: u64) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let l = PATCH_SIDE;
    let spec = GridSpec::new(l, 96.0, GridKind::LogPolar)?;
    for trial in 0..trials {
        let kp = Keypoint::new(
            rng.gen::<f64>() * 500.0,
            rng.gen::<f64>() * 500.0,
            0.5 + rng.gen::<f64>() * 3.0,
            rng.gen::<f64>() * TAU,
        )?;
        let k = rng.gen_range(0..l);
        let rotated = Keypoint::new(kp.x, kp.y, kp.sigma, kp.theta + TAU * k as f64 / l as f64)?;
        let g0 = logpolar_grid(&kp, &spec)?;
        let g1 = logpolar_grid(&rotated, &spec)?;
        for row in 0..l {
            let src_row = (row + k) % l;
            for col in 0..l {
                let a = g1.src(row, col);
                let b = g0.src(src_row, col);
                if a.0.to_bits() != b.0.to_bits() || a.1.to_bits() != b.1.to_bits() {
                    return Err(Error::InvalidArgument(format!(
                        "trial {trial}: rotated grid row {row} differs from base row {src_row} \
                         at column {col}: {a:?} vs {b:?}"
                    )));
                }
            }
        }
    }
    Ok(())
}

/// Squaring the support radius must double the radial index exactly:
/// `src(x, .)` of the r^2 grid equals `src(2x, .)` of the r grid for
/// `2x <= L-1`. Exact for power-of-two radii, where the base-2 logarithm
/// is exact.
pub fn check_radial_stretch(trials: usize, seed: u64) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let l = PATCH_SIDE;
    for trial in 0..trials {
        let kp_xyt = (
            rng.gen::<f64>() * 500.0,
            rng.gen::<f64>() * 500.0,
            rng.gen::<f64>() * TAU,
        );
        let exponent = rng.gen_range(2u32..=5); // r in {4 .. 32}
        let r = f64::from(2u32.pow(exponent));
        let sigma = 2.0;
        // support radius = lambda * sigma / 2 = lambda, so lambda = r
        let kp = Keypoint::new(kp_xyt.0, kp_xyt.1, sigma, kp_xyt.2)?;
        let g_r = logpolar_grid(&kp, &GridSpec::new(l, r, GridKind::LogPolar)?)?;
        let g_r2 = logpolar_grid(&kp, &GridSpec::new(l, r * r, GridKind::LogPolar)?)?;
        for row in 0..l {
            for x in 0..l {
                if 2 * x > l - 1 {
                    continue;
                }
                let a = g_r2.src(row, x);
                let b = g_r.src(row, 2 * x);
                if a.0.to_bits() != b.0.to_bits() || a.1.to_bits() != b.1.to_bits() {
                    return Err(Error::InvalidArgument(format!(
                        "trial {trial}: r^2-grid column {x} differs from r-grid column {} \
                         at row {row}: {a:?} vs {b:?}",
                        2 * x
                    )));
                }
            }
        }
    }
    Ok(())
}

/// Rotate a smooth synthetic image by `2*pi*k/L` about a keypoint and
/// compare the log-polar patch against the unrotated patch cyclically
/// row-shifted. Returns the worst mean absolute intensity difference.
pub fn rotation_equivariance_mad(trials: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let l = PATCH_SIDE;
    let size = 256usize;
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let image = gaussian_blob_image(size, size, 12, &mut rng);
        let center = (size - 1) as f64 / 2.0;
        let sigma = 1.5 + rng.gen::<f64>();
        let lambda = 96.0;
        // keep the support ring inside the frame
        let kp = Keypoint::new(center, center, sigma, rng.gen::<f64>() * TAU)?;
        if kp.support_radius(lambda) > center - 2.0 {
            continue;
        }
        let spec = GridSpec::new(l, lambda, GridKind::LogPolar)?;
        let k = rng.gen_range(1..l);
        let delta = TAU * k as f64 / l as f64;

        // rotate the image content by delta about the keypoint
        let (c, s) = (delta.cos(), delta.sin());
        let mut data = Vec::with_capacity(size * size);
        for y in 0..size {
            for x in 0..size {
                let dx = x as f64 - kp.x;
                let dy = y as f64 - kp.y;
                let sx = kp.x + c * dx + s * dy;
                let sy = kp.y - s * dx + c * dy;
                data.push(bilinear_sample(&image, sx, sy)?);
            }
        }
        let rotated = Image::new(size, size, data)?;

        let patch0 = crate::image::extract_patch(&image, &logpolar_grid(&kp, &spec)?);
        let patch1 = crate::image::extract_patch(&rotated, &logpolar_grid(&kp, &spec)?);
        // content rotated by +delta: the rotated patch's row y samples
        // what the original saw at angle (y - k)
        let mut abs_sum = 0.0f64;
        for row in 0..l {
            let src_row = (row + l - k) % l;
            for col in 0..l {
                abs_sum +=
                    (f64::from(patch1.get(row, col)) - f64::from(patch0.get(src_row, col))).abs();
            }
        }
        worst = worst.max(abs_sum / (l * l) as f64);
    }
    Ok(worst)
}

/// Exhaustive re-derivation of hardest-in-batch mining, compared against
/// the production miner on random batches. Returns the number of
/// disagreements (0 on success).
pub fn check_mining_against_oracle(batches: usize, seed: u64) -> Result<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut disagreements = 0usize;
    for _ in 0..batches {
        let k = rng.gen_range(2..=64);
        let dim = 8;
        let mut fa: Vec<f64> = (0..k * dim).map(|_| rng.gen()).collect();
        let mut fb: Vec<f64> = (0..k * dim).map(|_| rng.gen()).collect();
        // deliberate ties: duplicating a descriptor row makes two negative
        // candidates bitwise equidistant from every anchor
        if k >= 3 && rng.gen::<bool>() {
            for rows in [&mut fa, &mut fb] {
                let src = rng.gen_range(0..k);
                let dst = rng.gen_range(0..k);
                let copied: Vec<f64> = rows[src * dim..(src + 1) * dim].to_vec();
                rows[dst * dim..(dst + 1) * dim].copy_from_slice(&copied);
            }
        }
        let dm = distance_matrix(k, dim, &fa, &fb)?;
        let pos = crate::loss::positive_distances(k, dim, &fa, &fb);
        let mined = mine_hardest_in_batch(&dm, &pos)?;
        for (i, t) in mined.triplets.iter().enumerate() {
            // oracle: scan row and column independently
            let mut row_best = (f64::INFINITY, usize::MAX);
            let mut col_best = (f64::INFINITY, usize::MAX);
            for j in 0..k {
                if j != i {
                    let dr = dm.at(i, j);
                    if dr < row_best.0 {
                        row_best = (dr, j);
                    }
                    let dc = dm.at(j, i);
                    if dc < col_best.0 {
                        col_best = (dc, j);
                    }
                }
            }
            let (want_side, want_neg, want_d) = if row_best.0 <= col_best.0 {
                (AnchorSide::A, row_best.1, row_best.0)
            } else {
                (AnchorSide::B, col_best.1, col_best.0)
            };
            if t.anchor != want_side || t.negative != want_neg || t.negative_distance != want_d {
                disagreements += 1;
            }
        }
    }
    Ok(disagreements)
}

fn cmd_selfcheck(cfg: &RunConfig) -> Result<()> {
    let mut failures = 0usize;
    let mut report = |name: &str, result: Result<String>| match result {
        Ok(detail) => println!("PASS {name}: {detail}"),
        Err(e) => {
            failures += 1;
            println!("FAIL {name}: {e}");
        }
    };

    report(
        "row-shift exactness",
        check_row_shift(100, cfg.seed).map(|()| "100 keypoints bitwise".into()),
    );
    report(
        "radial stretch identity",
        check_radial_stretch(100, cfg.seed).map(|()| "100 keypoints exact".into()),
    );
    report(
        "rotation equivariance",
        rotation_equivariance_mad(5, cfg.seed).and_then(|mad| {
            if mad < 0.02 {
                Ok(format!("worst MAD {mad:.4}"))
            } else {
                Err(Error::InvalidArgument(format!(
                    "worst MAD {mad:.4} >= 0.02"
                )))
            }
        }),
    );
    report(
        "mining oracle",
        check_mining_against_oracle(50, cfg.seed).and_then(|d| {
            if d == 0 {
                Ok("50 batches agree".into())
            } else {
                Err(Error::InvalidArgument(format!("{d} disagreements")))
            }
        }),
    );
    report(
        "fpr95 oracle",
        (|| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            for _ in 0..50 {
                let np = rng.gen_range(1..100);
                let nn = rng.gen_range(1..100);
                let pos: Vec<f64> = (0..np).map(|_| rng.gen()).collect();
                let neg: Vec<f64> = (0..nn).map(|_| rng.gen()).collect();
                let got = fpr95(&pos, &neg)?;
                // sweep oracle
                let need = (0.95 * np as f64).ceil() as usize;
                let mut t = f64::INFINITY;
                for &p in &pos {
                    if pos.iter().filter(|&&q| q <= p).count() >= need && p < t {
                        t = p;
                    }
                }
                let want = neg.iter().filter(|&&d| d <= t).count() as f64 / nn as f64;
                if got != want {
                    return Err(Error::InvalidArgument(format!(
                        "fpr95 {got} != sweep {want}"
                    )));
                }
            }
            Ok("50 score sets agree with the threshold sweep".into())
        })(),
    );
    report(
        "gradient check",
        (|| {
            let mut worst = 0.0f64;
            for kind in LAYER_KINDS {
                worst = worst.max(layer_gradcheck(kind, cfg.seed, None)?);
            }
            if worst < 1e-4 {
                Ok(format!("worst layer error {worst:.3e}"))
            } else {
                Err(Error::InvalidArgument(format!(
                    "worst layer error {worst:.3e} >= 1e-4"
                )))
            }
        })(),
    );

    if failures == 0 {
        println!("selfcheck: all checks passed");
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "{failures} selfcheck failure(s)"
        )))
    }
}
