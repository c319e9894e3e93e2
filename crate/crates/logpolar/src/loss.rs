//! Pairwise descriptor distances, hardest-in-batch negative mining, and
//! the margin triplet loss with gradients w.r.t. the descriptors.
//!
//! A batch holds `K` positive pairs `(f_a[k], f_b[k])`. The `K x K`
//! distance matrix carries Euclidean distances off the diagonal and a
//! large sentinel on it, so a plain argmin over a row or column yields
//! the hardest negative on the opposite side.

use crate::error::{Error, Result};
use crate::nn::Scalar;

/// Diagonal sentinel. Unit vectors are never more than 2 apart, so 10 is
/// safely "arbitrarily large" while staying finite.
pub const SENTINEL: f64 = 10.0;

/// Exponent applied to distances inside the hinge.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DistancePower {
    One,
    Two,
}

impl DistancePower {
    pub fn parse(v: u32) -> Result<Self> {
        match v {
            1 => Ok(DistancePower::One),
            2 => Ok(DistancePower::Two),
            other => Err(Error::Config(format!(
                "distance_power must be 1 or 2, got {other}"
            ))),
        }
    }

    pub fn as_u32(self) -> u32 {
        match self {
            DistancePower::One => 1,
            DistancePower::Two => 2,
        }
    }
}

/// `K x K` distances between two descriptor sets, diagonal replaced by
/// [`SENTINEL`].
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix<T> {
    pub k: usize,
    /// Row-major `K*K`; row i is anchor `a_i` against every `b_j`.
    pub data: Vec<T>,
}

impl<T: Scalar> DistanceMatrix<T> {
    pub fn at(&self, i: usize, j: usize) -> T {
        self.data[i * self.k + j]
    }
}

fn euclidean<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut sq = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        let d = x - y;
        sq += d * d;
    }
    // clamp before the root; rounding can push tiny values negative
    if sq < T::zero() {
        sq = T::zero();
    }
    sq.sqrt()
}

/// Build the pairwise distance matrix between equally sized descriptor
/// sets laid out as `k` rows of `dim` values.
pub fn distance_matrix<T: Scalar>(
    k: usize,
    dim: usize,
    fa: &[T],
    fb: &[T],
) -> Result<DistanceMatrix<T>> {
    if fa.len() != k * dim || fb.len() != k * dim {
        return Err(Error::Shape {
            expected: format!("two sets of {k}x{dim} descriptors"),
            actual: format!("{} and {} values", fa.len(), fb.len()),
        });
    }
    let sentinel = T::from_f64(SENTINEL);
    let mut data = vec![T::zero(); k * k];
    for i in 0..k {
        let a = &fa[i * dim..(i + 1) * dim];
        for j in 0..k {
            data[i * k + j] = if i == j {
                sentinel
            } else {
                euclidean(a, &fb[j * dim..(j + 1) * dim])
            };
        }
    }
    Ok(DistanceMatrix { k, data })
}

/// Distances of the positive pairs, `pos[k] = ||f_a[k] - f_b[k]||`.
pub fn positive_distances<T: Scalar>(k: usize, dim: usize, fa: &[T], fb: &[T]) -> Vec<T> {
    (0..k)
        .map(|i| euclidean(&fa[i * dim..(i + 1) * dim], &fb[i * dim..(i + 1) * dim]))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnchorSide {
    A,
    B,
}

/// One mined triplet: the anchor side, the pair index (anchor and positive
/// share it), and the hardest negative on the opposite side.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Triplet {
    pub anchor: AnchorSide,
    pub index: usize,
    pub negative: usize,
    pub negative_distance: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TripletSelection {
    pub triplets: Vec<Triplet>,
}

fn argmin<T: Scalar>(values: impl Iterator<Item = T>) -> (usize, T) {
    let mut best = (0usize, T::infinity());
    for (i, v) in values.enumerate() {
        if v < best.1 {
            best = (i, v);
        }
    }
    best
}

/// Hardest-in-batch mining: for each pair `k`, find the closest negative
/// for anchor `a_k` (row argmin) and for anchor `b_k` (column argmin) and
/// keep the harder side. Ties go to anchor `a`, and argmin ties to the
/// lowest index.
pub fn mine_hardest_in_batch<T: Scalar>(
    d: &DistanceMatrix<T>,
    pos_dists: &[T],
) -> Result<TripletSelection> {
    let k = d.k;
    if k < 2 {
        return Err(Error::InvalidArgument(
            "hardest-in-batch mining needs at least 2 pairs".into(),
        ));
    }
    if pos_dists.len() != k {
        return Err(Error::Shape {
            expected: format!("{k} positive distances"),
            actual: format!("{}", pos_dists.len()),
        });
    }
    let mut triplets = Vec::with_capacity(k);
    for i in 0..k {
        let (b_min, row_min) = argmin((0..k).map(|j| d.at(i, j)));
        let (a_min, col_min) = argmin((0..k).map(|j| d.at(j, i)));
        let triplet = if row_min <= col_min {
            Triplet {
                anchor: AnchorSide::A,
                index: i,
                negative: b_min,
                negative_distance: row_min.to_f64(),
            }
        } else {
            Triplet {
                anchor: AnchorSide::B,
                index: i,
                negative: a_min,
                negative_distance: col_min.to_f64(),
            }
        };
        triplets.push(triplet);
    }
    Ok(TripletSelection { triplets })
}

#[derive(Debug, Clone)]
pub struct LossOutput<T> {
    pub loss: f64,
    /// Gradient w.r.t. the side-a descriptors, `k*dim`.
    pub grad_a: Vec<T>,
    /// Gradient w.r.t. the side-b descriptors, `k*dim`.
    pub grad_b: Vec<T>,
    /// Number of triplets with a positive hinge.
    pub active: usize,
}

/// Margin triplet loss `sum_k max(0, margin + d_pos^p - d_neg^p)` over the
/// mined selection, with gradients flowing through anchors, positives and
/// mined negatives of active terms only.
#[allow(clippy::too_many_arguments)]
pub fn triplet_margin_loss<T: Scalar>(
    k: usize,
    dim: usize,
    fa: &[T],
    fb: &[T],
    selection: &TripletSelection,
    margin: f64,
    power: DistancePower,
) -> Result<LossOutput<T>> {
    if fa.len() != k * dim || fb.len() != k * dim {
        return Err(Error::Shape {
            expected: format!("two sets of {k}x{dim} descriptors"),
            actual: format!("{} and {} values", fa.len(), fb.len()),
        });
    }
    if selection.triplets.len() != k {
        return Err(Error::Shape {
            expected: format!("{k} triplets"),
            actual: format!("{}", selection.triplets.len()),
        });
    }
    let mut grad_a = vec![T::zero(); k * dim];
    let mut grad_b = vec![T::zero(); k * dim];
    let mut loss = 0.0f64;
    let mut active = 0usize;
    let row = |f: &[T], i: usize| -> std::ops::Range<usize> {
        let _ = f;
        i * dim..(i + 1) * dim
    };

    for t in &selection.triplets {
        let i = t.index;
        // anchor/positive/negative slices by side
        let (anchor, positive, negative, neg_row_in_a) = match t.anchor {
            AnchorSide::A => (row(fa, i), row(fb, i), row(fb, t.negative), false),
            AnchorSide::B => (row(fb, i), row(fa, i), row(fa, t.negative), true),
        };
        let d_pos = euclidean(&fa[row(fa, i)], &fb[row(fb, i)]).to_f64();
        let d_neg = {
            let a = match t.anchor {
                AnchorSide::A => &fa[anchor.clone()],
                AnchorSide::B => &fb[anchor.clone()],
            };
            let n = match t.anchor {
                AnchorSide::A => &fb[negative.clone()],
                AnchorSide::B => &fa[negative.clone()],
            };
            euclidean(a, n).to_f64()
        };
        let term = match power {
            DistancePower::Two => margin + d_pos * d_pos - d_neg * d_neg,
            DistancePower::One => margin + d_pos - d_neg,
        };
        if term <= 0.0 {
            continue;
        }
        loss += term;
        active += 1;

        // d term / d distance, then chain to descriptors
        let (w_pos, w_neg) = match power {
            DistancePower::Two => (2.0, 2.0),
            DistancePower::One => (1.0 / d_pos.max(1e-12), 1.0 / d_neg.max(1e-12)),
        };
        // positive pair gradient: w_pos * (anchor - positive) on the
        // anchor, opposite on the positive (for p=2 the factor includes
        // the distance; for p=1 it is the unit direction)
        let scale_pos = T::from_f64(match power {
            DistancePower::Two => w_pos,
            DistancePower::One => w_pos,
        });
        let scale_neg = T::from_f64(w_neg);
        for d in 0..dim {
            let diff_pos = fa[i * dim + d] - fb[i * dim + d];
            // anchor-positive term: d(d_pos^p)/d fa = scale * diff
            grad_a[i * dim + d] += scale_pos * diff_pos;
            grad_b[i * dim + d] -= scale_pos * diff_pos;
        }
        for d in 0..dim {
            let (av, nv) = match t.anchor {
                AnchorSide::A => (fa[i * dim + d], fb[t.negative * dim + d]),
                AnchorSide::B => (fb[i * dim + d], fa[t.negative * dim + d]),
            };
            let diff_neg = av - nv;
            match t.anchor {
                AnchorSide::A => {
                    grad_a[i * dim + d] -= scale_neg * diff_neg;
                    grad_b[t.negative * dim + d] += scale_neg * diff_neg;
                }
                AnchorSide::B => {
                    grad_b[i * dim + d] -= scale_neg * diff_neg;
                    grad_a[t.negative * dim + d] += scale_neg * diff_neg;
                }
            }
        }
        let _ = (positive, neg_row_in_a);
    }
    Ok(LossOutput {
        loss,
        grad_a,
        grad_b,
        active,
    })
}
