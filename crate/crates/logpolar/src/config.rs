//! Flat key=value run configuration shared by every command, with a
//! strict schema (unknown keys are rejected by name) and a resolved
//! snapshot format for reproducible re-runs.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::GridKind;
use crate::loss::DistancePower;

/// Resolved run configuration with every value filled in.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub grid_kind: GridKind,
    pub patch_size: usize,
    /// Support factor: support radius = lambda * sigma / 2.
    pub lambda: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub dropout: f64,
    pub jitter_std_deg: f64,
    pub margin: f64,
    pub distance_power: DistancePower,
    pub seed: u64,
    // synthetic data generation
    pub synth_pairs: usize,
    pub synth_image_size: usize,
    pub synth_keypoints: usize,
    pub synth_max_scale: f64,
    pub synth_max_rotation_deg: f64,
    pub synth_noise: f64,
    // correspondence filters
    pub projection_tol: f64,
    pub orientation_tol_deg: f64,
    pub min_separation: f64,
    // retrieval protocol
    pub matches_per_pair: usize,
    pub distractors_per_pair: usize,
    pub distractor_exclusion: f64,
}

pub const DEFAULT_LAMBDA_LOGPOLAR: f64 = 96.0;
pub const DEFAULT_LAMBDA_CARTESIAN: f64 = 16.0;

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            grid_kind: GridKind::LogPolar,
            patch_size: 32,
            lambda: DEFAULT_LAMBDA_LOGPOLAR,
            batch_size: 128,
            epochs: 20,
            learning_rate: 0.1,
            momentum: 0.9,
            weight_decay: 1e-4,
            dropout: 0.1,
            jitter_std_deg: 5.0,
            margin: 1.0,
            distance_power: DistancePower::Two,
            seed: 0,
            synth_pairs: 8,
            synth_image_size: 200,
            synth_keypoints: 64,
            synth_max_scale: 4.0,
            synth_max_rotation_deg: 25.0,
            synth_noise: 0.0,
            projection_tol: 1.5,
            orientation_tol_deg: 25.0,
            min_separation: 7.0,
            matches_per_pair: 500,
            distractors_per_pair: 3000,
            distractor_exclusion: 3.0,
        }
    }
}

impl RunConfig {
    /// Parse a flat key=value file ('#' comments, blank lines allowed).
    /// Unspecified keys take their defaults; `lambda` defaults by grid
    /// kind when absent.
    pub fn parse(text: &str) -> Result<RunConfig> {
        let mut kv: BTreeMap<String, (usize, String)> = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!(
                    "line {}: expected key=value, got {line:?}",
                    lineno + 1
                ))
            })?;
            let key = key.trim().to_string();
            if kv.insert(key.clone(), (lineno + 1, value.trim().to_string()))
                .is_some()
            {
                return Err(Error::Config(format!(
                    "line {}: duplicate key {key}",
                    lineno + 1
                )));
            }
        }

        let mut cfg = RunConfig::default();
        let mut lambda_set = false;
        let mut grid = cfg.grid_kind;
        // resolve grid_kind first so the lambda default can depend on it
        if let Some((lineno, v)) = kv.get("grid_kind") {
            grid = GridKind::parse(v)
                .map_err(|e| Error::Config(format!("line {lineno}: grid_kind: {e}")))?;
        }
        for (key, (lineno, value)) in &kv {
            let ctx = |e: String| Error::Config(format!("line {lineno}: {key}: {e}"));
            let as_f64 = || -> Result<f64> {
                value
                    .parse::<f64>()
                    .map_err(|e| ctx(e.to_string()))
                    .and_then(|v| {
                        if v.is_finite() {
                            Ok(v)
                        } else {
                            Err(ctx(format!("must be finite, got {v}")))
                        }
                    })
            };
            let as_usize = || -> Result<usize> { value.parse().map_err(|e: std::num::ParseIntError| ctx(e.to_string())) };
            match key.as_str() {
                "grid_kind" => cfg.grid_kind = grid,
                "patch_size" => cfg.patch_size = as_usize()?,
                "lambda" => {
                    cfg.lambda = as_f64()?;
                    lambda_set = true;
                }
                "batch_size" => cfg.batch_size = as_usize()?,
                "epochs" => cfg.epochs = as_usize()?,
                "learning_rate" => cfg.learning_rate = as_f64()?,
                "momentum" => cfg.momentum = as_f64()?,
                "weight_decay" => cfg.weight_decay = as_f64()?,
                "dropout" => cfg.dropout = as_f64()?,
                "jitter_std_deg" => cfg.jitter_std_deg = as_f64()?,
                "margin" => cfg.margin = as_f64()?,
                "distance_power" => {
                    let p: u32 = value.parse().map_err(|e: std::num::ParseIntError| ctx(e.to_string()))?;
                    cfg.distance_power = DistancePower::parse(p)
                        .map_err(|e| ctx(e.to_string()))?;
                }
                "seed" => cfg.seed = value.parse().map_err(|e: std::num::ParseIntError| ctx(e.to_string()))?,
                "synth_pairs" => cfg.synth_pairs = as_usize()?,
                "synth_image_size" => cfg.synth_image_size = as_usize()?,
                "synth_keypoints" => cfg.synth_keypoints = as_usize()?,
                "synth_max_scale" => cfg.synth_max_scale = as_f64()?,
                "synth_max_rotation_deg" => cfg.synth_max_rotation_deg = as_f64()?,
                "synth_noise" => cfg.synth_noise = as_f64()?,
                "projection_tol" => cfg.projection_tol = as_f64()?,
                "orientation_tol_deg" => cfg.orientation_tol_deg = as_f64()?,
                "min_separation" => cfg.min_separation = as_f64()?,
                "matches_per_pair" => cfg.matches_per_pair = as_usize()?,
                "distractors_per_pair" => cfg.distractors_per_pair = as_usize()?,
                "distractor_exclusion" => cfg.distractor_exclusion = as_f64()?,
                unknown => {
                    return Err(Error::Config(format!(
                        "line {lineno}: unknown config key {unknown}"
                    )))
                }
            }
        }
        if !lambda_set {
            cfg.lambda = match cfg.grid_kind {
                GridKind::LogPolar => DEFAULT_LAMBDA_LOGPOLAR,
                GridKind::Cartesian => DEFAULT_LAMBDA_CARTESIAN,
            };
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)?;
        RunConfig::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size < 2 {
            return Err(Error::Config(format!(
                "patch_size must be at least 2, got {}",
                self.patch_size
            )));
        }
        for (name, v) in [
            ("lambda", self.lambda),
            ("learning_rate", self.learning_rate),
            ("margin", self.margin),
            ("synth_max_scale", self.synth_max_scale),
            ("projection_tol", self.projection_tol),
            ("orientation_tol_deg", self.orientation_tol_deg),
            ("min_separation", self.min_separation),
            ("distractor_exclusion", self.distractor_exclusion),
        ] {
            if !(v > 0.0) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        for (name, v) in [
            ("momentum", self.momentum),
            ("weight_decay", self.weight_decay),
            ("jitter_std_deg", self.jitter_std_deg),
            ("synth_noise", self.synth_noise),
            ("synth_max_rotation_deg", self.synth_max_rotation_deg),
        ] {
            if !(v >= 0.0) {
                return Err(Error::Config(format!(
                    "{name} must be non-negative, got {v}"
                )));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout must lie in [0, 1), got {}",
                self.dropout
            )));
        }
        if self.batch_size < 2 {
            return Err(Error::Config(format!(
                "batch_size must be at least 2, got {}",
                self.batch_size
            )));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.synth_max_scale < 1.0 {
            return Err(Error::Config(format!(
                "synth_max_scale must be at least 1, got {}",
                self.synth_max_scale
            )));
        }
        if self.matches_per_pair == 0 {
            return Err(Error::Config(
                "matches_per_pair must be at least 1".into(),
            ));
        }
        Ok(())
    }

    /// Serialize every resolved value; parsing the snapshot reproduces
    /// this configuration exactly.
    pub fn snapshot(&self) -> String {
        let mut s = String::from("# resolved run configuration\n");
        let mut push = |k: &str, v: String| s.push_str(&format!("{k}={v}\n"));
        push("grid_kind", self.grid_kind.name().to_string());
        push("patch_size", self.patch_size.to_string());
        push("lambda", self.lambda.to_string());
        push("batch_size", self.batch_size.to_string());
        push("epochs", self.epochs.to_string());
        push("learning_rate", self.learning_rate.to_string());
        push("momentum", self.momentum.to_string());
        push("weight_decay", self.weight_decay.to_string());
        push("dropout", self.dropout.to_string());
        push("jitter_std_deg", self.jitter_std_deg.to_string());
        push("margin", self.margin.to_string());
        push("distance_power", self.distance_power.as_u32().to_string());
        push("seed", self.seed.to_string());
        push("synth_pairs", self.synth_pairs.to_string());
        push("synth_image_size", self.synth_image_size.to_string());
        push("synth_keypoints", self.synth_keypoints.to_string());
        push("synth_max_scale", self.synth_max_scale.to_string());
        push(
            "synth_max_rotation_deg",
            self.synth_max_rotation_deg.to_string(),
        );
        push("synth_noise", self.synth_noise.to_string());
        push("projection_tol", self.projection_tol.to_string());
        push("orientation_tol_deg", self.orientation_tol_deg.to_string());
        push("min_separation", self.min_separation.to_string());
        push("matches_per_pair", self.matches_per_pair.to_string());
        push(
            "distractors_per_pair",
            self.distractors_per_pair.to_string(),
        );
        push(
            "distractor_exclusion",
            self.distractor_exclusion.to_string(),
        );
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_snapshot() {
        let cfg = RunConfig::default();
        let back = RunConfig::parse(&cfg.snapshot()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn empty_text_gives_defaults() {
        assert_eq!(RunConfig::parse("").unwrap(), RunConfig::default());
        assert_eq!(
            RunConfig::parse("# only a comment\n\n").unwrap(),
            RunConfig::default()
        );
    }

    #[test]
    fn lambda_default_tracks_grid_kind() {
        let lp = RunConfig::parse("grid_kind=logpolar\n").unwrap();
        assert_eq!(lp.lambda, DEFAULT_LAMBDA_LOGPOLAR);
        let cart = RunConfig::parse("grid_kind=cartesian\n").unwrap();
        assert_eq!(cart.lambda, DEFAULT_LAMBDA_CARTESIAN);
        let explicit = RunConfig::parse("grid_kind=cartesian\nlambda=20\n").unwrap();
        assert_eq!(explicit.lambda, 20.0);
    }

    #[test]
    fn unknown_key_rejected_by_name() {
        let err = RunConfig::parse("lambada=96\n").unwrap_err();
        assert!(err.to_string().contains("lambada"), "{err}");
    }

    #[test]
    fn bad_values_rejected_with_key_name() {
        for bad in [
            "lambda=-3",
            "lambda=abc",
            "dropout=1.0",
            "batch_size=1",
            "epochs=0",
            "distance_power=3",
            "grid_kind=polar",
            "momentum=-0.1",
            "synth_max_scale=0.5",
        ] {
            let err = RunConfig::parse(bad).unwrap_err();
            let key = bad.split('=').next().unwrap();
            assert!(err.to_string().contains(key), "{bad}: {err}");
        }
    }

    #[test]
    fn duplicate_key_rejected() {
        assert!(RunConfig::parse("seed=1\nseed=2\n").is_err());
    }

    #[test]
    fn inline_comments_and_whitespace() {
        let cfg = RunConfig::parse("  seed = 42  # the answer\nmargin=2.0\n").unwrap();
        assert_eq!(cfg.seed, 42);
        assert_eq!(cfg.margin, 2.0);
    }
}
