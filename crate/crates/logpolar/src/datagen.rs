//! Ground-truth correspondence construction from depth+pose or homography
//! inputs, synthetic planar view-pair generation, orientation augmentation
//! and training-batch assembly.

use std::path::{Path, PathBuf};

use rand::RngCore;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::geometry::{
    cartesian_grid, logpolar_grid, orientation_residual, scale_ratio, wrap_angle, Correspondence,
    GridKind, GridSpec, Keypoint,
};
use crate::image::{
    bilinear_sample, decode_image, encode_rawf32, extract_patch, mirror_pad, Image, ImageFormat,
};
use crate::net::{patches_to_tensor, PatchPairBatch};

/// Relative depth disagreement beyond which a projected point is treated
/// as occluded.
pub const DEPTH_OCCLUSION_TOL: f64 = 0.05;

/// Depth-map values below zero mark pixels with no valid depth.
pub const DEPTH_INVALID: f32 = -1.0;

// --- ground-truth mappings ------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

/// Rigid transform taking camera-a coordinates to camera-b coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RelativePose {
    /// Row-major 3x3 rotation.
    pub rotation: [f64; 9],
    pub translation: [f64; 3],
}

impl RelativePose {
    pub fn identity() -> Self {
        RelativePose {
            rotation: [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
            translation: [0.0; 3],
        }
    }

    pub fn inverse(&self) -> RelativePose {
        let r = &self.rotation;
        let rt = [r[0], r[3], r[6], r[1], r[4], r[7], r[2], r[5], r[8]];
        let t = &self.translation;
        let nt = [
            -(rt[0] * t[0] + rt[1] * t[1] + rt[2] * t[2]),
            -(rt[3] * t[0] + rt[4] * t[1] + rt[5] * t[2]),
            -(rt[6] * t[0] + rt[7] * t[1] + rt[8] * t[2]),
        ];
        RelativePose {
            rotation: rt,
            translation: nt,
        }
    }

    fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            r[0] * p[0] + r[1] * p[1] + r[2] * p[2] + t[0],
            r[3] * p[0] + r[4] * p[1] + r[5] * p[2] + t[1],
            r[6] * p[0] + r[7] * p[1] + r[8] * p[2] + t[2],
        ]
    }
}

#[derive(Debug, Clone)]
pub struct DepthPoseTruth {
    pub depth_a: Image,
    pub depth_b: Image,
    pub intrinsics_a: Intrinsics,
    pub intrinsics_b: Intrinsics,
    /// Camera a to camera b.
    pub pose_ab: RelativePose,
}

#[derive(Debug, Clone)]
pub enum GroundTruth {
    /// Plane homography a->b (row-major 3x3) with its precomputed inverse.
    Homography { h_ab: [f64; 9], h_ba: [f64; 9] },
    DepthPose(Box<DepthPoseTruth>),
}

impl GroundTruth {
    pub fn homography(h_ab: [f64; 9]) -> Result<Self> {
        let h_ba = invert_3x3(&h_ab)?;
        Ok(GroundTruth::Homography { h_ab, h_ba })
    }
}

fn invert_3x3(m: &[f64; 9]) -> Result<[f64; 9]> {
    let det = m[0] * (m[4] * m[8] - m[5] * m[7]) - m[1] * (m[3] * m[8] - m[5] * m[6])
        + m[2] * (m[3] * m[7] - m[4] * m[6]);
    if det.abs() < 1e-12 {
        return Err(Error::InvalidArgument(format!(
            "homography is singular (det {det})"
        )));
    }
    let inv_det = 1.0 / det;
    Ok([
        (m[4] * m[8] - m[5] * m[7]) * inv_det,
        (m[2] * m[7] - m[1] * m[8]) * inv_det,
        (m[1] * m[5] - m[2] * m[4]) * inv_det,
        (m[5] * m[6] - m[3] * m[8]) * inv_det,
        (m[0] * m[8] - m[2] * m[6]) * inv_det,
        (m[2] * m[3] - m[0] * m[5]) * inv_det,
        (m[3] * m[7] - m[4] * m[6]) * inv_det,
        (m[1] * m[6] - m[0] * m[7]) * inv_det,
        (m[0] * m[4] - m[1] * m[3]) * inv_det,
    ])
}

fn apply_h(h: &[f64; 9], x: f64, y: f64) -> Option<(f64, f64)> {
    let w = h[6] * x + h[7] * y + h[8];
    if w.abs() < 1e-12 {
        return None;
    }
    Some((
        (h[0] * x + h[1] * y + h[2]) / w,
        (h[3] * x + h[4] * y + h[5]) / w,
    ))
}

/// 2x2 Jacobian [dX/dx, dX/dy, dY/dx, dY/dy] of a homography at (x, y).
fn h_jacobian(h: &[f64; 9], x: f64, y: f64) -> Option<[f64; 4]> {
    let w = h[6] * x + h[7] * y + h[8];
    if w.abs() < 1e-12 {
        return None;
    }
    let xn = h[0] * x + h[1] * y + h[2];
    let yn = h[3] * x + h[4] * y + h[5];
    let iw2 = 1.0 / (w * w);
    Some([
        (h[0] * w - xn * h[6]) * iw2,
        (h[1] * w - xn * h[7]) * iw2,
        (h[3] * w - yn * h[6]) * iw2,
        (h[4] * w - yn * h[7]) * iw2,
    ])
}

// --- view pairs ------------------------------------------------------------

/// Two views of one scene with keypoints and a ground-truth mapping.
/// Optional occlusion masks mark pixels that are hidden in that view
/// (`true` = occluded); depth maps additionally mark missing depth with
/// a negative sentinel.
#[derive(Debug, Clone)]
pub struct ViewPair {
    pub image_a: Image,
    pub image_b: Image,
    pub kps_a: Vec<Keypoint>,
    pub kps_b: Vec<Keypoint>,
    pub truth: GroundTruth,
    pub mask_a: Option<Vec<bool>>,
    pub mask_b: Option<Vec<bool>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    AToB,
    BToA,
}

/// A keypoint carried through the ground-truth mapping: new location,
/// warped scale and warped orientation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WarpedKeypoint {
    pub x: f64,
    pub y: f64,
    pub scale: f64,
    pub theta: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Projection {
    /// Mapping undefined there or lands outside the destination image.
    Outside,
    Occluded,
    Visible(WarpedKeypoint),
}

fn in_bounds(img: &Image, x: f64, y: f64) -> bool {
    x >= 0.0 && y >= 0.0 && x <= (img.width() - 1) as f64 && y <= (img.height() - 1) as f64
}

fn mask_hit(mask: &Option<Vec<bool>>, img: &Image, x: f64, y: f64) -> bool {
    match mask {
        None => false,
        Some(m) => {
            let col = x.round().clamp(0.0, (img.width() - 1) as f64) as usize;
            let row = y.round().clamp(0.0, (img.height() - 1) as f64) as usize;
            m[row * img.width() + col]
        }
    }
}

/// Nearest-pixel depth lookup; `None` when out of bounds or marked
/// invalid.
fn depth_at(depth: &Image, x: f64, y: f64) -> Option<f64> {
    if !in_bounds(depth, x, y) {
        return None;
    }
    let v = depth.get(y.round() as usize, x.round() as usize);
    if v <= 0.0 {
        None
    } else {
        Some(v as f64)
    }
}

fn pinhole_project(intr: &Intrinsics, p: [f64; 3]) -> Option<(f64, f64)> {
    if p[2] <= 1e-9 {
        return None;
    }
    Some((
        intr.fx * p[0] / p[2] + intr.cx,
        intr.fy * p[1] / p[2] + intr.cy,
    ))
}

fn backproject(intr: &Intrinsics, x: f64, y: f64, z: f64) -> [f64; 3] {
    [(x - intr.cx) / intr.fx * z, (y - intr.cy) / intr.fy * z, z]
}

/// Project a keypoint through the pair's ground truth.
///
/// Homography mode warps the scale by the square root of the absolute
/// Jacobian determinant and the orientation by the Jacobian's action on
/// the orientation direction. Depth mode back-projects with the source
/// depth, transforms by the relative pose and reprojects; the warped
/// scale uses the depth ratio and focal ratio, and occlusion is declared
/// when the destination depth map disagrees with the transformed point by
/// more than [`DEPTH_OCCLUSION_TOL`] relative.
pub fn project_keypoint(kp: &Keypoint, pair: &ViewPair, direction: Direction) -> Result<Projection> {
    let (src_img, dst_img, src_mask, dst_mask) = match direction {
        Direction::AToB => (&pair.image_a, &pair.image_b, &pair.mask_a, &pair.mask_b),
        Direction::BToA => (&pair.image_b, &pair.image_a, &pair.mask_b, &pair.mask_a),
    };
    if !in_bounds(src_img, kp.x, kp.y) {
        return Err(Error::InvalidArgument(format!(
            "keypoint ({}, {}) outside the {}x{} source image",
            kp.x,
            kp.y,
            src_img.width(),
            src_img.height()
        )));
    }
    if mask_hit(src_mask, src_img, kp.x, kp.y) {
        return Ok(Projection::Occluded);
    }
    match &pair.truth {
        GroundTruth::Homography { h_ab, h_ba } => {
            let h = match direction {
                Direction::AToB => h_ab,
                Direction::BToA => h_ba,
            };
            let Some((x, y)) = apply_h(h, kp.x, kp.y) else {
                return Ok(Projection::Outside);
            };
            if !in_bounds(dst_img, x, y) {
                return Ok(Projection::Outside);
            }
            if mask_hit(dst_mask, dst_img, x, y) {
                return Ok(Projection::Occluded);
            }
            let Some(j) = h_jacobian(h, kp.x, kp.y) else {
                return Ok(Projection::Outside);
            };
            let det = j[0] * j[3] - j[1] * j[2];
            if det.abs() < 1e-12 {
                return Ok(Projection::Outside);
            }
            let scale = kp.sigma * det.abs().sqrt();
            let (dx, dy) = (kp.theta.cos(), kp.theta.sin());
            let theta = wrap_angle((j[2] * dx + j[3] * dy).atan2(j[0] * dx + j[1] * dy));
            Ok(Projection::Visible(WarpedKeypoint { x, y, scale, theta }))
        }
        GroundTruth::DepthPose(dp) => {
            let (src_depth, dst_depth, src_intr, dst_intr, pose) = match direction {
                Direction::AToB => (
                    &dp.depth_a,
                    &dp.depth_b,
                    &dp.intrinsics_a,
                    &dp.intrinsics_b,
                    dp.pose_ab,
                ),
                Direction::BToA => (
                    &dp.depth_b,
                    &dp.depth_a,
                    &dp.intrinsics_b,
                    &dp.intrinsics_a,
                    dp.pose_ab.inverse(),
                ),
            };
            let Some(z) = depth_at(src_depth, kp.x, kp.y) else {
                return Ok(Projection::Outside);
            };
            let map = |x: f64, y: f64| -> Option<(f64, f64)> {
                pinhole_project(dst_intr, pose.apply(backproject(src_intr, x, y, z)))
            };
            let transformed = pose.apply(backproject(src_intr, kp.x, kp.y, z));
            let Some((x, y)) = pinhole_project(dst_intr, transformed) else {
                return Ok(Projection::Outside);
            };
            if !in_bounds(dst_img, x, y) {
                return Ok(Projection::Outside);
            }
            let Some(z_dst) = depth_at(dst_depth, x, y) else {
                return Ok(Projection::Occluded);
            };
            if ((z_dst - transformed[2]) / transformed[2]).abs() > DEPTH_OCCLUSION_TOL {
                return Ok(Projection::Occluded);
            }
            if mask_hit(dst_mask, dst_img, x, y) {
                return Ok(Projection::Occluded);
            }
            let scale = kp.sigma * (dst_intr.fx / src_intr.fx) * (z / transformed[2]);
            // local fronto-parallel Jacobian: central differences of the
            // fixed-depth projection
            let h = 0.5;
            let (xp, yp) = map(kp.x + h, kp.y).ok_or(())
                .map_err(|_| Error::InvalidArgument("projection degenerate near keypoint".into()))?;
            let (xm, ym) = map(kp.x - h, kp.y)
                .ok_or_else(|| Error::InvalidArgument("projection degenerate near keypoint".into()))?;
            let (xp2, yp2) = map(kp.x, kp.y + h)
                .ok_or_else(|| Error::InvalidArgument("projection degenerate near keypoint".into()))?;
            let (xm2, ym2) = map(kp.x, kp.y - h)
                .ok_or_else(|| Error::InvalidArgument("projection degenerate near keypoint".into()))?;
            let j = [
                (xp - xm) / (2.0 * h),
                (xp2 - xm2) / (2.0 * h),
                (yp - ym) / (2.0 * h),
                (yp2 - ym2) / (2.0 * h),
            ];
            let (dx, dy) = (kp.theta.cos(), kp.theta.sin());
            let theta = wrap_angle((j[2] * dx + j[3] * dy).atan2(j[0] * dx + j[1] * dy));
            Ok(Projection::Visible(WarpedKeypoint { x, y, scale, theta }))
        }
    }
}

// --- correspondence construction -------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FilterConfig {
    /// Projection and cycle-check tolerance, pixels.
    pub projection_tol: f64,
    /// Orientation-residual cutoff, degrees.
    pub orientation_tol_deg: f64,
    /// Minimum separation between retained endpoints on one image, pixels.
    pub min_separation: f64,
    /// Distractors must lie farther than this from any match endpoint.
    pub distractor_exclusion: f64,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig {
            projection_tol: 1.5,
            orientation_tol_deg: 25.0,
            min_separation: 7.0,
            distractor_exclusion: 3.0,
        }
    }
}

impl FilterConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("projection_tol", self.projection_tol),
            ("orientation_tol_deg", self.orientation_tol_deg),
            ("min_separation", self.min_separation),
            ("distractor_exclusion", self.distractor_exclusion),
        ] {
            if !(v > 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "{name} must be positive, got {v}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Synthetic,
    DepthProjected,
}

#[derive(Debug, Clone)]
pub struct CorrespondenceSet {
    pub records: Vec<Correspondence>,
    pub provenance: Provenance,
}

fn dist2(ax: f64, ay: f64, bx: f64, by: f64) -> f64 {
    (ax - bx) * (ax - bx) + (ay - by) * (ay - by)
}

/// Build verified one-to-one correspondences between the two views.
///
/// Pipeline: project every a-keypoint, match to the nearest b-keypoint
/// within the projection tolerance; resolve bijectivity conflicts by
/// smallest residual; require the b->a cycle to land back within
/// tolerance; drop occlusions; drop orientation residuals over the
/// cutoff; then suppress pairs whose endpoints crowd a retained pair.
pub fn build_correspondences(pair: &ViewPair, cfg: &FilterConfig) -> Result<CorrespondenceSet> {
    cfg.validate()?;
    struct Candidate {
        idx_a: usize,
        idx_b: usize,
        residual: f64,
        warped: WarpedKeypoint,
    }
    let tol2 = cfg.projection_tol * cfg.projection_tol;

    // (1) projection + nearest-neighbor match
    let mut candidates: Vec<Candidate> = Vec::new();
    for (i, kp) in pair.kps_a.iter().enumerate() {
        let Projection::Visible(w) = project_keypoint(kp, pair, Direction::AToB)? else {
            continue;
        };
        let mut best: Option<(usize, f64)> = None;
        for (j, kb) in pair.kps_b.iter().enumerate() {
            let d2 = dist2(w.x, w.y, kb.x, kb.y);
            if d2 <= tol2 && best.map_or(true, |(_, bd)| d2 < bd) {
                best = Some((j, d2));
            }
        }
        if let Some((j, d2)) = best {
            candidates.push(Candidate {
                idx_a: i,
                idx_b: j,
                residual: d2.sqrt(),
                warped: w,
            });
        }
    }

    // (2) bijective check: one winner per b-keypoint, smallest residual
    candidates.sort_by(|p, q| {
        p.residual
            .partial_cmp(&q.residual)
            .unwrap()
            .then(p.idx_a.cmp(&q.idx_a))
    });
    let mut taken_b = vec![false; pair.kps_b.len()];
    let mut survivors: Vec<Candidate> = Vec::new();
    for c in candidates {
        if !taken_b[c.idx_b] {
            taken_b[c.idx_b] = true;
            survivors.push(c);
        }
    }

    // (3) cycle check + (4) occlusion on the way back
    let mut cycled: Vec<Candidate> = Vec::new();
    for c in survivors {
        let kb = &pair.kps_b[c.idx_b];
        let Projection::Visible(back) = project_keypoint(kb, pair, Direction::BToA)? else {
            continue;
        };
        let ka = &pair.kps_a[c.idx_a];
        if dist2(back.x, back.y, ka.x, ka.y) <= tol2 {
            cycled.push(c);
        }
    }

    // (5) orientation residual
    let mut oriented: Vec<(Candidate, f64)> = Vec::new();
    for c in cycled {
        let deg = orientation_residual(c.warped.theta, pair.kps_b[c.idx_b].theta, 0.0);
        if deg <= cfg.orientation_tol_deg {
            oriented.push((c, deg));
        }
    }

    // (6) 7 px suppression, best-residual pairs keep their spot
    oriented.sort_by(|(p, _), (q, _)| {
        p.residual
            .partial_cmp(&q.residual)
            .unwrap()
            .then(p.idx_a.cmp(&q.idx_a))
    });
    let sep2 = cfg.min_separation * cfg.min_separation;
    let mut kept: Vec<(Candidate, f64)> = Vec::new();
    for (c, deg) in oriented {
        let ka = &pair.kps_a[c.idx_a];
        let kb = &pair.kps_b[c.idx_b];
        let crowded = kept.iter().any(|(k, _)| {
            let pa = &pair.kps_a[k.idx_a];
            let pb = &pair.kps_b[k.idx_b];
            dist2(ka.x, ka.y, pa.x, pa.y) < sep2 || dist2(kb.x, kb.y, pb.x, pb.y) < sep2
        });
        if !crowded {
            kept.push((c, deg));
        }
    }

    let mut records: Vec<Correspondence> = kept
        .into_iter()
        .map(|(c, deg)| {
            Ok(Correspondence {
                idx_a: c.idx_a,
                idx_b: c.idx_b,
                scale_ratio: scale_ratio(c.warped.scale, pair.kps_b[c.idx_b].sigma)?,
                orientation_residual: deg,
            })
        })
        .collect::<Result<_>>()?;
    records.sort_by_key(|r| r.idx_a);

    let provenance = match &pair.truth {
        GroundTruth::Homography { .. } => Provenance::Synthetic,
        GroundTruth::DepthPose(_) => Provenance::DepthProjected,
    };
    let set = CorrespondenceSet {
        records,
        provenance,
    };
    audit_correspondences(&set, pair, cfg)?;
    Ok(set)
}

/// Independent re-verification of a correspondence set: bijectivity,
/// ratio/residual ranges, and the round-trip cycle bound.
pub fn audit_correspondences(
    set: &CorrespondenceSet,
    pair: &ViewPair,
    cfg: &FilterConfig,
) -> Result<()> {
    let mut seen_a = std::collections::HashSet::new();
    let mut seen_b = std::collections::HashSet::new();
    for (n, c) in set.records.iter().enumerate() {
        if !seen_a.insert(c.idx_a) || !seen_b.insert(c.idx_b) {
            return Err(Error::InvalidArgument(format!(
                "correspondence {n} violates bijectivity (a {}, b {})",
                c.idx_a, c.idx_b
            )));
        }
        if c.scale_ratio < 1.0 {
            return Err(Error::InvalidArgument(format!(
                "correspondence {n} has scale ratio {} < 1",
                c.scale_ratio
            )));
        }
        if c.orientation_residual > cfg.orientation_tol_deg {
            return Err(Error::InvalidArgument(format!(
                "correspondence {n} has orientation residual {}° over the {}° cutoff",
                c.orientation_residual, cfg.orientation_tol_deg
            )));
        }
        let ka = &pair.kps_a[c.idx_a];
        let kb = &pair.kps_b[c.idx_b];
        let Projection::Visible(fwd) = project_keypoint(ka, pair, Direction::AToB)? else {
            return Err(Error::InvalidArgument(format!(
                "correspondence {n}: a-keypoint no longer projects"
            )));
        };
        if dist2(fwd.x, fwd.y, kb.x, kb.y).sqrt() > cfg.projection_tol {
            return Err(Error::InvalidArgument(format!(
                "correspondence {n}: projection residual over {} px",
                cfg.projection_tol
            )));
        }
        let Projection::Visible(back) = project_keypoint(kb, pair, Direction::BToA)? else {
            return Err(Error::InvalidArgument(format!(
                "correspondence {n}: b-keypoint no longer projects back"
            )));
        };
        if dist2(back.x, back.y, ka.x, ka.y).sqrt() > cfg.projection_tol {
            return Err(Error::InvalidArgument(format!(
                "correspondence {n}: cycle residual over {} px",
                cfg.projection_tol
            )));
        }
    }
    Ok(())
}

// --- synthetic pairs --------------------------------------------------------

/// Similarity transform parameters for a synthetic second view, applied
/// about the image center.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimilarityTransform {
    pub scale: f64,
    /// Radians.
    pub rotation: f64,
    pub tx: f64,
    pub ty: f64,
}

/// Simulated detector imperfections for the second view's keypoints.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectorNoise {
    /// Std of the location perturbation per axis, pixels.
    pub loc_std: f64,
    /// Std of a multiplicative log-scale perturbation.
    pub scale_log_std: f64,
    /// Std of the orientation perturbation, degrees.
    pub orient_std_deg: f64,
    /// When false the b-keypoints keep the a-side scale, planting a scale
    /// mismatch equal to the transform's scale factor.
    pub update_scale: bool,
}

impl DetectorNoise {
    /// No noise, scales kept un-updated (the mismatched-scale regime).
    pub fn none() -> Self {
        DetectorNoise {
            loc_std: 0.0,
            scale_log_std: 0.0,
            orient_std_deg: 0.0,
            update_scale: false,
        }
    }
}

fn gaussian(rng: &mut dyn RngCore, std: f64) -> f64 {
    if std == 0.0 {
        return 0.0;
    }
    Normal::new(0.0, std).expect("std checked finite").sample(rng)
}

/// Render a second view of `base` under a similarity transform (plus
/// additive Gaussian pixel noise) and derive its keypoints from the
/// transformed a-keypoints with simulated detector noise. The analytic
/// homography is stored as ground truth.
pub fn synth_pair(
    base: &Image,
    kps_a: &[Keypoint],
    transform: &SimilarityTransform,
    noise_level: f64,
    detector: &DetectorNoise,
    rng: &mut dyn RngCore,
) -> Result<ViewPair> {
    if !(transform.scale > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "transform scale must be positive, got {}",
            transform.scale
        )));
    }
    let (h_img, w_img) = (base.height(), base.width());
    let cx = (w_img - 1) as f64 / 2.0;
    let cy = (h_img - 1) as f64 / 2.0;
    let (s, c, sn) = (transform.scale, transform.rotation.cos(), transform.rotation.sin());
    let h_ab = [
        s * c,
        -s * sn,
        cx + transform.tx - s * (c * cx - sn * cy),
        s * sn,
        s * c,
        cy + transform.ty - s * (sn * cx + c * cy),
        0.0,
        0.0,
        1.0,
    ];
    let truth = GroundTruth::homography(h_ab)?;

    // refuse transforms that push the whole frame out of view
    let corners = [
        (0.0, 0.0),
        ((w_img - 1) as f64, 0.0),
        (0.0, (h_img - 1) as f64),
        ((w_img - 1) as f64, (h_img - 1) as f64),
    ];
    let mut min_x = f64::INFINITY;
    let mut max_x = f64::NEG_INFINITY;
    let mut min_y = f64::INFINITY;
    let mut max_y = f64::NEG_INFINITY;
    for (x, y) in corners {
        let (px, py) = apply_h(&h_ab, x, y).expect("affine map is defined everywhere");
        min_x = min_x.min(px);
        max_x = max_x.max(px);
        min_y = min_y.min(py);
        max_y = max_y.max(py);
    }
    if max_x < 0.0 || min_x > (w_img - 1) as f64 || max_y < 0.0 || min_y > (h_img - 1) as f64 {
        return Err(Error::InvalidArgument(
            "transform moves the image content fully out of frame".into(),
        ));
    }

    // render view b by pulling through the inverse map
    let GroundTruth::Homography { h_ba, .. } = &truth else {
        unreachable!()
    };
    let mut data = Vec::with_capacity(h_img * w_img);
    for y in 0..h_img {
        for x in 0..w_img {
            let (sx, sy) =
                apply_h(h_ba, x as f64, y as f64).expect("affine map is defined everywhere");
            let mut v = bilinear_sample(base, sx, sy)? as f64;
            if noise_level > 0.0 {
                v += gaussian(rng, noise_level);
            }
            data.push(v.clamp(0.0, 1.0) as f32);
        }
    }
    let image_b = Image::new(h_img, w_img, data)?;

    // keypoints in b: transformed a-keypoints plus detector noise
    let mut kps_b = Vec::new();
    for kp in kps_a {
        let Some((mut x, mut y)) = apply_h(&h_ab, kp.x, kp.y) else {
            continue;
        };
        x += gaussian(rng, detector.loc_std);
        y += gaussian(rng, detector.loc_std);
        let mut sigma = if detector.update_scale {
            kp.sigma * transform.scale
        } else {
            kp.sigma
        };
        sigma *= gaussian(rng, detector.scale_log_std).exp();
        let theta = wrap_angle(
            kp.theta + transform.rotation + gaussian(rng, detector.orient_std_deg).to_radians(),
        );
        if x < 0.0 || y < 0.0 || x > (w_img - 1) as f64 || y > (h_img - 1) as f64 {
            continue;
        }
        kps_b.push(Keypoint::new(x, y, sigma, theta)?);
    }

    Ok(ViewPair {
        image_a: base.clone(),
        image_b,
        kps_a: kps_a.to_vec(),
        kps_b,
        truth,
        mask_a: None,
        mask_b: None,
    })
}

/// A smooth synthetic test image: a sum of random Gaussian blobs over a
/// mid-gray background, values in [0, 1].
pub fn gaussian_blob_image(
    height: usize,
    width: usize,
    blobs: usize,
    rng: &mut dyn RngCore,
) -> Image {
    use rand::Rng;
    struct Blob {
        x: f64,
        y: f64,
        inv_2s2: f64,
        amp: f64,
    }
    let blobs: Vec<Blob> = (0..blobs)
        .map(|_| {
            let s: f64 = 4.0 + 20.0 * rng.gen::<f64>();
            Blob {
                x: rng.gen::<f64>() * width as f64,
                y: rng.gen::<f64>() * height as f64,
                inv_2s2: 1.0 / (2.0 * s * s),
                amp: (rng.gen::<f64>() - 0.5) * 0.9,
            }
        })
        .collect();
    let mut data = Vec::with_capacity(height * width);
    for y in 0..height {
        for x in 0..width {
            let mut v = 0.5;
            for b in &blobs {
                let d2 = dist2(x as f64, y as f64, b.x, b.y);
                v += b.amp * (-d2 * b.inv_2s2).exp();
            }
            data.push(v.clamp(0.0, 1.0) as f32);
        }
    }
    Image::new(height, width, data).expect("clamped values are finite")
}

/// Perturb a keypoint's orientation by a Gaussian draw (training-time
/// anchor augmentation).
pub fn jitter_orientation(kp: &Keypoint, rng: &mut dyn RngCore, std_degrees: f64) -> Keypoint {
    let eps = gaussian(rng, std_degrees).to_radians();
    Keypoint::new(kp.x, kp.y, kp.sigma, wrap_angle(kp.theta + eps))
        .expect("jitter preserves keypoint validity")
}

// --- batch assembly ----------------------------------------------------------

/// Per-pair correspondence cap when filling batches.
pub const CORRESPONDENCE_CAP: usize = 1000;

pub struct BatchSource<'a> {
    pub pair: &'a ViewPair,
    pub set: &'a CorrespondenceSet,
}

pub struct AssembledBatch {
    pub batch: PatchPairBatch,
    /// `(source index, correspondence)` per batch row.
    pub items: Vec<(usize, Correspondence)>,
    pub warnings: Vec<String>,
}

/// Extract a descriptor patch for one keypoint, mirror-padding the image
/// by the support radius so the sampling ring never leans on
/// clamp-to-edge.
pub fn extract_support_patch(
    img: &Image,
    kp: &Keypoint,
    spec: &GridSpec,
) -> Result<crate::image::Patch> {
    let pad = (kp.support_radius(spec.lambda).ceil() as usize)
        .min(img.height().min(img.width()).saturating_sub(1));
    let padded = mirror_pad(img, pad)?;
    let shifted = Keypoint::new(kp.x + pad as f64, kp.y + pad as f64, kp.sigma, kp.theta)?;
    let grid = match spec.kind {
        GridKind::LogPolar => logpolar_grid(&shifted, spec)?,
        GridKind::Cartesian => cartesian_grid(&shifted, spec)?,
    };
    Ok(extract_patch(&padded, &grid))
}

/// Fill a K-pair batch in equal shares from the given sources (remainder
/// round-robin, shortfalls redistributed), extract patches in-line with
/// the given grid, and jitter each anchor orientation.
pub fn assemble_batch(
    sources: &[BatchSource<'_>],
    spec: &GridSpec,
    k: usize,
    jitter_std_deg: f64,
    rng: &mut dyn RngCore,
) -> Result<AssembledBatch> {
    if k < 2 {
        return Err(Error::InvalidArgument(format!(
            "batch size must be at least 2, got {k}"
        )));
    }
    let mut warnings = Vec::new();
    let mut usable: Vec<(usize, &BatchSource)> = Vec::new();
    for (i, s) in sources.iter().enumerate() {
        if s.set.records.is_empty() {
            warnings.push(format!("source {i} has no correspondences; skipped"));
        } else {
            usable.push((i, s));
        }
    }
    if usable.is_empty() {
        return Err(Error::InvalidArgument(
            "no source has any correspondences".into(),
        ));
    }
    let avail: Vec<usize> = usable
        .iter()
        .map(|(_, s)| s.set.records.len().min(CORRESPONDENCE_CAP))
        .collect();
    if avail.iter().sum::<usize>() < k {
        return Err(Error::InvalidArgument(format!(
            "only {} correspondences available for a batch of {k}",
            avail.iter().sum::<usize>()
        )));
    }
    // equal shares with round-robin remainder, then redistribute what a
    // short source cannot supply
    let n = usable.len();
    let mut shares: Vec<usize> = (0..n).map(|i| k / n + usize::from(i < k % n)).collect();
    loop {
        let mut deficit = 0usize;
        for i in 0..n {
            if shares[i] > avail[i] {
                deficit += shares[i] - avail[i];
                shares[i] = avail[i];
            }
        }
        if deficit == 0 {
            break;
        }
        let mut placed = false;
        for i in 0..n {
            if deficit == 0 {
                break;
            }
            if shares[i] < avail[i] {
                shares[i] += 1;
                deficit -= 1;
                placed = true;
            }
        }
        if !placed {
            break;
        }
    }

    let mut items: Vec<(usize, Correspondence)> = Vec::with_capacity(k);
    for ((src_idx, source), (&share, &cap)) in usable.iter().zip(shares.iter().zip(&avail)) {
        let picks = rand::seq::index::sample(rng, cap, share);
        for p in picks.iter() {
            items.push((*src_idx, source.set.records[p]));
        }
    }

    // uniqueness audit: no keypoint may appear twice in one batch
    let mut seen = std::collections::HashSet::new();
    for (src, c) in &items {
        if !seen.insert((*src, 0usize, c.idx_a)) || !seen.insert((*src, 1usize, c.idx_b)) {
            return Err(Error::InvalidArgument(format!(
                "batch repeats a keypoint from source {src} (a {}, b {})",
                c.idx_a, c.idx_b
            )));
        }
    }

    let mut patches_a = Vec::with_capacity(items.len());
    let mut patches_b = Vec::with_capacity(items.len());
    for (src, c) in &items {
        let pair = sources[*src].pair;
        let anchor = jitter_orientation(&pair.kps_a[c.idx_a], rng, jitter_std_deg);
        patches_a.push(extract_support_patch(&pair.image_a, &anchor, spec)?);
        patches_b.push(extract_support_patch(&pair.image_b, &pair.kps_b[c.idx_b], spec)?);
    }
    Ok(AssembledBatch {
        batch: PatchPairBatch {
            a: patches_to_tensor(&patches_a)?,
            b: patches_to_tensor(&patches_b)?,
        },
        items,
        warnings,
    })
}

// --- text/manifest formats ---------------------------------------------------

/// One correspondence per line: `idx_a idx_b r orientation_residual_deg`.
pub fn format_correspondences(set: &CorrespondenceSet) -> String {
    let mut s = String::from("# idx_a idx_b scale_ratio orientation_residual_deg\n");
    s.push_str(&format!(
        "# provenance={}\n",
        match set.provenance {
            Provenance::Synthetic => "synthetic",
            Provenance::DepthProjected => "depth-projected",
        }
    ));
    for c in &set.records {
        s.push_str(&format!(
            "{} {} {} {}\n",
            c.idx_a, c.idx_b, c.scale_ratio, c.orientation_residual
        ));
    }
    s
}

pub fn parse_correspondences(text: &str) -> Result<CorrespondenceSet> {
    let mut provenance = Provenance::Synthetic;
    let mut records = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix('#') {
            if let Some(p) = rest.trim().strip_prefix("provenance=") {
                provenance = match p.trim() {
                    "synthetic" => Provenance::Synthetic,
                    "depth-projected" => Provenance::DepthProjected,
                    other => {
                        return Err(Error::Config(format!(
                            "line {}: unknown provenance {other:?}",
                            lineno + 1
                        )))
                    }
                };
            }
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 4 {
            return Err(Error::Config(format!(
                "line {}: expected 4 fields, got {}",
                lineno + 1,
                fields.len()
            )));
        }
        let parse_f = |s: &str| -> Result<f64> {
            s.parse()
                .map_err(|e| Error::Config(format!("line {}: {e}", lineno + 1)))
        };
        let parse_u = |s: &str| -> Result<usize> {
            s.parse()
                .map_err(|e| Error::Config(format!("line {}: {e}", lineno + 1)))
        };
        records.push(Correspondence {
            idx_a: parse_u(fields[0])?,
            idx_b: parse_u(fields[1])?,
            scale_ratio: parse_f(fields[2])?,
            orientation_residual: parse_f(fields[3])?,
        });
    }
    Ok(CorrespondenceSet {
        records,
        provenance,
    })
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(Error::from)
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(Error::from)
}

/// Write a view pair (images, keypoints, and a key=value manifest) into
/// `dir` under the given stem; returns the manifest path. Images go out
/// in the float raw format so the round trip is exact.
pub fn save_view_pair(dir: &Path, stem: &str, pair: &ViewPair) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let name = |suffix: &str| format!("{stem}_{suffix}");
    write_file(&dir.join(name("a.rawf32")), &encode_rawf32(&pair.image_a))?;
    write_file(&dir.join(name("b.rawf32")), &encode_rawf32(&pair.image_b))?;
    write_file(
        &dir.join(name("a.kp")),
        crate::geometry::format_keypoints(&pair.kps_a).as_bytes(),
    )?;
    write_file(
        &dir.join(name("b.kp")),
        crate::geometry::format_keypoints(&pair.kps_b).as_bytes(),
    )?;
    let mut manifest = String::new();
    manifest.push_str(&format!("image_a={}\n", name("a.rawf32")));
    manifest.push_str(&format!("image_b={}\n", name("b.rawf32")));
    manifest.push_str(&format!("keypoints_a={}\n", name("a.kp")));
    manifest.push_str(&format!("keypoints_b={}\n", name("b.kp")));
    match &pair.truth {
        GroundTruth::Homography { h_ab, .. } => {
            let coeffs: Vec<String> = h_ab.iter().map(|v| v.to_string()).collect();
            manifest.push_str(&format!("homography={}\n", coeffs.join(" ")));
        }
        GroundTruth::DepthPose(dp) => {
            write_file(
                &dir.join(name("a.depth.rawf32")),
                &encode_rawf32(&dp.depth_a),
            )?;
            write_file(
                &dir.join(name("b.depth.rawf32")),
                &encode_rawf32(&dp.depth_b),
            )?;
            manifest.push_str(&format!("depth_a={}\n", name("a.depth.rawf32")));
            manifest.push_str(&format!("depth_b={}\n", name("b.depth.rawf32")));
            let ia = dp.intrinsics_a;
            let ib = dp.intrinsics_b;
            manifest.push_str(&format!(
                "intrinsics_a={} {} {} {}\n",
                ia.fx, ia.fy, ia.cx, ia.cy
            ));
            manifest.push_str(&format!(
                "intrinsics_b={} {} {} {}\n",
                ib.fx, ib.fy, ib.cx, ib.cy
            ));
            let r = &dp.pose_ab.rotation;
            let t = &dp.pose_ab.translation;
            let pose: Vec<String> = r.iter().chain(t.iter()).map(|v| v.to_string()).collect();
            manifest.push_str(&format!("pose={}\n", pose.join(" ")));
        }
    }
    let manifest_path = dir.join(format!("{stem}.manifest"));
    write_file(&manifest_path, manifest.as_bytes())?;
    Ok(manifest_path)
}

/// Load a view pair from a manifest written by [`save_view_pair`]; file
/// paths are resolved relative to the manifest's directory.
pub fn load_view_pair(manifest: &Path) -> Result<ViewPair> {
    let dir = manifest.parent().unwrap_or_else(|| Path::new("."));
    let text = String::from_utf8(read_file(manifest)?)
        .map_err(|e| Error::Config(format!("manifest is not UTF-8: {e}")))?;
    let mut kv = std::collections::HashMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::Config(format!("manifest line {}: expected key=value", lineno + 1))
        })?;
        kv.insert(key.trim().to_string(), value.trim().to_string());
    }
    let get = |key: &str| -> Result<&String> {
        kv.get(key)
            .ok_or_else(|| Error::Config(format!("manifest lacks key {key}")))
    };
    let load_img = |key: &str| -> Result<Image> {
        decode_image(&read_file(&dir.join(get(key)?))?, ImageFormat::RawF32)
    };
    let load_kps = |key: &str| -> Result<Vec<Keypoint>> {
        let bytes = read_file(&dir.join(get(key)?))?;
        crate::geometry::parse_keypoints(
            &String::from_utf8(bytes)
                .map_err(|e| Error::Config(format!("keypoint file is not UTF-8: {e}")))?,
        )
    };
    let parse_floats = |key: &str, n: usize| -> Result<Vec<f64>> {
        let vals: Vec<f64> = get(key)?
            .split_whitespace()
            .map(|s| {
                s.parse()
                    .map_err(|e| Error::Config(format!("manifest key {key}: {e}")))
            })
            .collect::<Result<_>>()?;
        if vals.len() != n {
            return Err(Error::Config(format!(
                "manifest key {key}: expected {n} numbers, got {}",
                vals.len()
            )));
        }
        Ok(vals)
    };

    let truth = if kv.contains_key("homography") {
        let v = parse_floats("homography", 9)?;
        GroundTruth::homography(v.try_into().unwrap())?
    } else {
        let ia = parse_floats("intrinsics_a", 4)?;
        let ib = parse_floats("intrinsics_b", 4)?;
        let pose = parse_floats("pose", 12)?;
        GroundTruth::DepthPose(Box::new(DepthPoseTruth {
            depth_a: load_img("depth_a")?,
            depth_b: load_img("depth_b")?,
            intrinsics_a: Intrinsics {
                fx: ia[0],
                fy: ia[1],
                cx: ia[2],
                cy: ia[3],
            },
            intrinsics_b: Intrinsics {
                fx: ib[0],
                fy: ib[1],
                cx: ib[2],
                cy: ib[3],
            },
            pose_ab: RelativePose {
                rotation: pose[0..9].try_into().unwrap(),
                translation: pose[9..12].try_into().unwrap(),
            },
        }))
    };

    Ok(ViewPair {
        image_a: load_img("image_a")?,
        image_b: load_img("image_b")?,
        kps_a: load_kps("keypoints_a")?,
        kps_b: load_kps("keypoints_b")?,
        truth,
        mask_a: None,
        mask_b: None,
    })
}
