//! Desk-scale comparison of log-polar versus cartesian sampling.
//!
//! Trains four small descriptor models (both grid kinds at support
//! factors 16 and 96) on one shared synthetic dataset with planted scale
//! mismatch up to 4x, then measures FPR95 globally and per
//! scale-mismatch bin on a held-out synthetic test set.
//!
//! A full run is expensive (tens of minutes on a multi-core desktop,
//! hours on a single core), so per-model outcomes are cached on disk
//! under a protocol version tag. The protocol is fully seeded and
//! single-run deterministic, so a cached outcome is bit-identical to a
//! recomputed one.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::datagen::{assemble_batch, extract_support_patch, BatchSource, CorrespondenceSet, ViewPair};
use crate::error::{Error, Result};
use crate::eval::{binned_fpr95, fpr95, MatchScores, ScoredPositive, DEFAULT_SCALE_EDGES};
use crate::geometry::{GridKind, GridSpec};
use crate::net::{build_network_with, save_checkpoint, LossConfig, Network};
use crate::nn::OptimConfig;

/// Bump when any detail of the protocol changes; stale cache entries are
/// then ignored instead of silently reused.
pub const TREND_PROTOCOL: &str = "v1";

pub const TREND_SEED: u64 = 7;
pub const TREND_TRAIN_PAIRS: usize = 200;
pub const TREND_TEST_PAIRS: usize = 60;

/// The four trained configurations: grid kind x support factor.
pub const TREND_MODELS: [(GridKind, f64); 4] = [
    (GridKind::LogPolar, 16.0),
    (GridKind::LogPolar, 96.0),
    (GridKind::Cartesian, 16.0),
    (GridKind::Cartesian, 96.0),
];

/// FPR95 over positives whose scale ratio falls in `[lo, hi)` (the last
/// bin is closed above), against the global negative pool.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaleBin {
    pub lo: f64,
    pub hi: f64,
    pub fpr95: Option<f64>,
    pub positives: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrendOutcome {
    pub grid_kind: GridKind,
    pub lambda: f64,
    pub global_fpr95: f64,
    pub positives: usize,
    pub negatives: usize,
    pub scale_bins: Vec<ScaleBin>,
}

impl TrendOutcome {
    /// The bin whose edges are `[lo, hi]`, if present.
    pub fn scale_bin(&self, lo: f64, hi: f64) -> Option<&ScaleBin> {
        self.scale_bins
            .iter()
            .find(|b| (b.lo - lo).abs() < 1e-9 && (b.hi - hi).abs() < 1e-9)
    }
}

/// Shared run parameters; only grid kind and lambda vary across models.
pub fn trend_config(grid_kind: GridKind, lambda: f64) -> RunConfig {
    RunConfig {
        grid_kind,
        lambda,
        epochs: 20,
        batch_size: 128,
        seed: TREND_SEED,
        synth_pairs: TREND_TRAIN_PAIRS,
        synth_keypoints: 64,
        synth_max_scale: 4.0,
        ..RunConfig::default()
    }
}

/// `target/trend-cache` next to the workspace `Cargo.toml`.
pub fn default_cache_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../target/trend-cache")
}

fn cache_file(cache: &Path, grid_kind: GridKind, lambda: f64) -> PathBuf {
    cache.join(format!(
        "{TREND_PROTOCOL}_{}_lam{}.txt",
        grid_kind.name(),
        lambda
    ))
}

type Dataset = Vec<(ViewPair, CorrespondenceSet)>;

/// The datasets are sampling-grid independent (patches are extracted per
/// grid at train/eval time), so one train set and one test set serve all
/// four models.
fn make_dataset(pairs: usize, seed: u64) -> Result<Dataset> {
    let cfg = trend_config(GridKind::LogPolar, 96.0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(pairs);
    for _ in 0..pairs {
        out.push(crate::run::synth_one_pair(&cfg, &mut rng)?);
    }
    Ok(out)
}

fn train_model(
    dataset: &Dataset,
    cfg: &RunConfig,
    mut progress: impl FnMut(&str),
) -> Result<Network<f32>> {
    let sources: Vec<BatchSource> = dataset
        .iter()
        .map(|(pair, set)| BatchSource { pair, set })
        .collect();
    let total: usize = dataset.iter().map(|(_, s)| s.records.len()).sum();
    let spec = GridSpec::new(cfg.patch_size, cfg.lambda, cfg.grid_kind)?;
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
    for epoch in 0..cfg.epochs {
        // same per-epoch stream split as the `train` command
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
        let stats =
            crate::net::train_epoch(&mut net, batches, &optim, &loss_cfg, epoch, &mut train_rng)?;
        progress(&format!(
            "epoch {epoch:2}: mean loss {:.4} over {} batches ({} active triplets)",
            stats.mean_loss, stats.batches, stats.active_triplets
        ));
    }
    Ok(net)
}

/// Matched-keypoint distances as positives (annotated with their scale
/// ratio), all cross-pairings within each view pair as negatives.
fn score_model(net: &mut Network<f32>, test: &Dataset, cfg: &RunConfig) -> Result<MatchScores> {
    let spec = GridSpec::new(cfg.patch_size, cfg.lambda, cfg.grid_kind)?;
    let mut scores = MatchScores::default();
    for (pair, set) in test {
        let mut patches = Vec::with_capacity(set.records.len() * 2);
        for c in &set.records {
            patches.push(extract_support_patch(&pair.image_a, &pair.kps_a[c.idx_a], &spec)?);
            patches.push(extract_support_patch(&pair.image_b, &pair.kps_b[c.idx_b], &spec)?);
        }
        let descs = net.describe(&patches)?;
        let m = set.records.len();
        for (i, c) in set.records.iter().enumerate() {
            scores.positives.push(ScoredPositive {
                distance: crate::eval::descriptor_distance(
                    &descs[2 * i].values,
                    &descs[2 * i + 1].values,
                )?,
                scale_ratio: c.scale_ratio,
                orientation_residual: c.orientation_residual,
            });
            for j in 0..m {
                if j != i {
                    scores.negatives.push(crate::eval::descriptor_distance(
                        &descs[2 * i].values,
                        &descs[2 * j + 1].values,
                    )?);
                }
            }
        }
    }
    Ok(scores)
}

fn outcome_from_scores(
    grid_kind: GridKind,
    lambda: f64,
    scores: &MatchScores,
) -> Result<TrendOutcome> {
    let flat: Vec<f64> = scores.positives.iter().map(|p| p.distance).collect();
    let global = fpr95(&flat, &scores.negatives)?;
    // a single orientation bin wide enough for every correspondence gives
    // the scale-mismatch marginals
    let bins = binned_fpr95(scores, &DEFAULT_SCALE_EDGES, &[0.0, 180.0])?;
    let scale_bins = bins
        .iter()
        .map(|b| ScaleBin {
            lo: b.scale_lo,
            hi: b.scale_hi,
            fpr95: b.fpr95,
            positives: b.positives,
        })
        .collect();
    Ok(TrendOutcome {
        grid_kind,
        lambda,
        global_fpr95: global,
        positives: scores.positives.len(),
        negatives: scores.negatives.len(),
        scale_bins,
    })
}

fn format_outcome(o: &TrendOutcome) -> String {
    let mut s = String::new();
    s.push_str(&format!("protocol={TREND_PROTOCOL}\n"));
    s.push_str(&format!("grid_kind={}\n", o.grid_kind.name()));
    s.push_str(&format!("lambda={}\n", o.lambda));
    s.push_str(&format!("global_fpr95={}\n", o.global_fpr95));
    s.push_str(&format!("positives={}\n", o.positives));
    s.push_str(&format!("negatives={}\n", o.negatives));
    for b in &o.scale_bins {
        let rate = match b.fpr95 {
            Some(r) => r.to_string(),
            None => "none".into(),
        };
        s.push_str(&format!("bin {} {} {} {}\n", b.lo, b.hi, rate, b.positives));
    }
    s
}

fn parse_outcome(text: &str) -> Result<TrendOutcome> {
    let bad = |msg: &str| Error::InvalidArgument(format!("trend cache entry: {msg}"));
    let mut grid_kind = None;
    let mut lambda = None;
    let mut global = None;
    let mut positives = None;
    let mut negatives = None;
    let mut bins = Vec::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix("bin ") {
            let f: Vec<&str> = rest.split_whitespace().collect();
            if f.len() != 4 {
                return Err(bad("bin line needs 4 fields"));
            }
            let rate = if f[2] == "none" {
                None
            } else {
                Some(f[2].parse().map_err(|_| bad("bad bin rate"))?)
            };
            bins.push(ScaleBin {
                lo: f[0].parse().map_err(|_| bad("bad bin edge"))?,
                hi: f[1].parse().map_err(|_| bad("bad bin edge"))?,
                fpr95: rate,
                positives: f[3].parse().map_err(|_| bad("bad bin count"))?,
            });
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| bad("expected key=value"))?;
        match key {
            "protocol" => {
                if value != TREND_PROTOCOL {
                    return Err(bad(&format!("protocol {value} != {TREND_PROTOCOL}")));
                }
            }
            "grid_kind" => grid_kind = Some(GridKind::parse(value)?),
            "lambda" => lambda = Some(value.parse().map_err(|_| bad("bad lambda"))?),
            "global_fpr95" => global = Some(value.parse().map_err(|_| bad("bad rate"))?),
            "positives" => positives = Some(value.parse().map_err(|_| bad("bad count"))?),
            "negatives" => negatives = Some(value.parse().map_err(|_| bad("bad count"))?),
            other => return Err(bad(&format!("unknown key {other}"))),
        }
    }
    Ok(TrendOutcome {
        grid_kind: grid_kind.ok_or_else(|| bad("missing grid_kind"))?,
        lambda: lambda.ok_or_else(|| bad("missing lambda"))?,
        global_fpr95: global.ok_or_else(|| bad("missing global_fpr95"))?,
        positives: positives.ok_or_else(|| bad("missing positives"))?,
        negatives: negatives.ok_or_else(|| bad("missing negatives"))?,
        scale_bins: bins,
    })
}

/// Run (or load from cache) all four models and return their outcomes in
/// [`TREND_MODELS`] order. `progress` receives human-readable status
/// lines.
pub fn run_trend(cache: &Path, mut progress: impl FnMut(&str)) -> Result<Vec<TrendOutcome>> {
    std::fs::create_dir_all(cache)?;
    let mut outcomes = Vec::with_capacity(TREND_MODELS.len());
    let mut train_set: Option<Dataset> = None;
    let mut test_set: Option<Dataset> = None;
    for &(grid_kind, lambda) in &TREND_MODELS {
        let path = cache_file(cache, grid_kind, lambda);
        if let Ok(text) = std::fs::read_to_string(&path) {
            match parse_outcome(&text) {
                Ok(o) if o.grid_kind == grid_kind && o.lambda == lambda => {
                    progress(&format!(
                        "{} lambda {lambda}: cached ({})",
                        grid_kind.name(),
                        path.display()
                    ));
                    outcomes.push(o);
                    continue;
                }
                _ => progress(&format!(
                    "{} lambda {lambda}: stale cache entry, recomputing",
                    grid_kind.name()
                )),
            }
        }
        if train_set.is_none() {
            progress(&format!(
                "generating {TREND_TRAIN_PAIRS} training and {TREND_TEST_PAIRS} test view pairs"
            ));
            train_set = Some(make_dataset(TREND_TRAIN_PAIRS, TREND_SEED)?);
            test_set = Some(make_dataset(TREND_TEST_PAIRS, TREND_SEED ^ 0x7E57_7E57)?);
        }
        let cfg = trend_config(grid_kind, lambda);
        progress(&format!(
            "training {} lambda {lambda} ({} epochs, batch {})",
            grid_kind.name(),
            cfg.epochs,
            cfg.batch_size
        ));
        let tag = format!("{} lambda {lambda}", grid_kind.name());
        let mut net = train_model(train_set.as_ref().unwrap(), &cfg, |msg| {
            progress(&format!("  [{tag}] {msg}"))
        })?;
        std::fs::write(path.with_extension("lpnet"), save_checkpoint(&net))?;
        progress(&format!("scoring {tag} on the test set"));
        let scores = score_model(&mut net, test_set.as_ref().unwrap(), &cfg)?;
        let outcome = outcome_from_scores(grid_kind, lambda, &scores)?;
        std::fs::write(&path, format_outcome(&outcome))?;
        progress(&format!(
            "{tag}: global FPR95 {:.4} -> {}",
            outcome.global_fpr95,
            path.display()
        ));
        outcomes.push(outcome);
    }
    Ok(outcomes)
}

/// The two headline comparisons, extracted from a [`run_trend`] result.
#[derive(Debug, Clone)]
pub struct TrendFindings {
    /// FPR95 in the scale-ratio bin [2, 4]: log-polar (at its default
    /// support factor 96) vs cartesian (at its default 16), and the
    /// relative reduction (positive = log-polar is better).
    pub logpolar_bin24: f64,
    pub cartesian_bin24: f64,
    pub bin24_relative_reduction: f64,
    /// Global FPR95 as the support factor grows from 16 to 96, per grid
    /// kind, with the relative change (positive = worse at 96).
    pub logpolar_16: f64,
    pub logpolar_96: f64,
    pub logpolar_relative_change: f64,
    pub cartesian_16: f64,
    pub cartesian_96: f64,
    pub cartesian_relative_change: f64,
}

fn find_outcome(outcomes: &[TrendOutcome], kind: GridKind, lambda: f64) -> Result<&TrendOutcome> {
    outcomes
        .iter()
        .find(|o| o.grid_kind == kind && o.lambda == lambda)
        .ok_or_else(|| {
            Error::InvalidArgument(format!(
                "missing trend outcome for {} lambda {lambda}",
                kind.name()
            ))
        })
}

fn bin24_rate(o: &TrendOutcome) -> Result<f64> {
    let bin = o
        .scale_bin(2.0, 4.0)
        .ok_or_else(|| Error::InvalidArgument("no [2,4] scale bin in trend outcome".into()))?;
    bin.fpr95.ok_or_else(|| {
        Error::InvalidArgument(format!(
            "[2,4] scale bin has no positives for {} lambda {}",
            o.grid_kind.name(),
            o.lambda
        ))
    })
}

pub fn trend_findings(outcomes: &[TrendOutcome]) -> Result<TrendFindings> {
    let lp16 = find_outcome(outcomes, GridKind::LogPolar, 16.0)?;
    let lp96 = find_outcome(outcomes, GridKind::LogPolar, 96.0)?;
    let ct16 = find_outcome(outcomes, GridKind::Cartesian, 16.0)?;
    let ct96 = find_outcome(outcomes, GridKind::Cartesian, 96.0)?;
    let logpolar_bin24 = bin24_rate(lp96)?;
    let cartesian_bin24 = bin24_rate(ct16)?;
    let rel = |from: f64, to: f64| {
        if from > 0.0 {
            (to - from) / from
        } else if to > 0.0 {
            f64::INFINITY
        } else {
            0.0
        }
    };
    Ok(TrendFindings {
        logpolar_bin24,
        cartesian_bin24,
        bin24_relative_reduction: rel(cartesian_bin24, logpolar_bin24) * -1.0,
        logpolar_16: lp16.global_fpr95,
        logpolar_96: lp96.global_fpr95,
        logpolar_relative_change: rel(lp16.global_fpr95, lp96.global_fpr95),
        cartesian_16: ct16.global_fpr95,
        cartesian_96: ct96.global_fpr95,
        cartesian_relative_change: rel(ct16.global_fpr95, ct96.global_fpr95),
    })
}
