//! Matching-quality metrics: false positive rate at 95% recall, the same
//! metric binned by scale mismatch and orientation residual, and
//! retrieval ranks against a distractor pool.

use crate::error::{Error, Result};

/// Default scale-mismatch bin edges (ratio of larger to smaller support).
pub const DEFAULT_SCALE_EDGES: [f64; 5] = [1.0, 1.33, 1.66, 2.0, 4.0];
/// Default orientation-residual bin edges, degrees.
pub const DEFAULT_ORIENT_EDGES: [f64; 6] = [0.0, 5.0, 10.0, 15.0, 20.0, 25.0];

/// Fewer positives than this in a bin flags its estimate as low
/// confidence.
pub const MIN_BIN_POSITIVES: usize = 20;

/// Squared Euclidean distance between two descriptor vectors.
pub fn descriptor_distance(a: &[f32], b: &[f32]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::InvalidArgument(format!(
            "descriptor lengths differ: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let mut acc = 0.0f64;
    for (x, y) in a.iter().zip(b) {
        let d = (*x - *y) as f64;
        acc += d * d;
    }
    Ok(acc.sqrt())
}

/// False positive rate at the distance threshold that recalls 95% of the
/// positives. The threshold is the ceil(0.95 * P)-th smallest positive
/// distance; negatives at or below it count as false positives.
pub fn fpr95(positives: &[f64], negatives: &[f64]) -> Result<f64> {
    if positives.is_empty() {
        return Err(Error::InvalidArgument(
            "fpr95 needs at least one positive distance".into(),
        ));
    }
    if negatives.is_empty() {
        return Err(Error::InvalidArgument(
            "fpr95 needs at least one negative distance".into(),
        ));
    }
    for v in positives.iter().chain(negatives) {
        if !v.is_finite() || *v < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "distances must be finite and non-negative, got {v}"
            )));
        }
    }
    let mut sorted: Vec<f64> = positives.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let k = (0.95 * positives.len() as f64).ceil() as usize;
    let threshold = sorted[k - 1];
    let fp = negatives.iter().filter(|&&d| d <= threshold).count();
    Ok(fp as f64 / negatives.len() as f64)
}

/// A positive match distance annotated with its geometric nuisance
/// parameters, for binned evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredPositive {
    pub distance: f64,
    /// Support-size mismatch, larger over smaller, >= 1.
    pub scale_ratio: f64,
    /// Degrees in [0, 180].
    pub orientation_residual: f64,
}

/// Positive and negative match distances for one evaluation run.
#[derive(Debug, Clone, Default)]
pub struct MatchScores {
    pub positives: Vec<ScoredPositive>,
    pub negatives: Vec<f64>,
}

/// One cell of a binned evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BinResult {
    pub scale_lo: f64,
    pub scale_hi: f64,
    pub orient_lo: f64,
    pub orient_hi: f64,
    /// `None` when the cell holds no positives.
    pub fpr95: Option<f64>,
    pub positives: usize,
    pub low_confidence: bool,
}

/// FPR95 per (scale ratio, orientation residual) cell. Every cell shares
/// the full negative pool; the last bin on each axis is closed above.
pub fn binned_fpr95(
    scores: &MatchScores,
    scale_edges: &[f64],
    orient_edges: &[f64],
) -> Result<Vec<BinResult>> {
    for (name, edges) in [("scale", scale_edges), ("orientation", orient_edges)] {
        if edges.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "{name} edges need at least two values"
            )));
        }
        if edges.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidArgument(format!(
                "{name} edges must be strictly increasing"
            )));
        }
    }
    if scores.negatives.is_empty() {
        return Err(Error::InvalidArgument(
            "binned evaluation needs a negative pool".into(),
        ));
    }
    let locate = |edges: &[f64], v: f64| -> Option<usize> {
        if v < edges[0] || v > *edges.last().unwrap() {
            return None;
        }
        for i in 0..edges.len() - 1 {
            // last bin is closed on both sides
            if v < edges[i + 1] || (i == edges.len() - 2 && v <= edges[i + 1]) {
                return Some(i);
            }
        }
        None
    };
    let ns = scale_edges.len() - 1;
    let no = orient_edges.len() - 1;
    let mut cells: Vec<Vec<f64>> = vec![Vec::new(); ns * no];
    for p in &scores.positives {
        let (Some(si), Some(oi)) = (
            locate(scale_edges, p.scale_ratio),
            locate(orient_edges, p.orientation_residual),
        ) else {
            continue;
        };
        cells[si * no + oi].push(p.distance);
    }
    let mut out = Vec::with_capacity(ns * no);
    for si in 0..ns {
        for oi in 0..no {
            let pos = &cells[si * no + oi];
            let value = if pos.is_empty() {
                None
            } else {
                Some(fpr95(pos, &scores.negatives)?)
            };
            out.push(BinResult {
                scale_lo: scale_edges[si],
                scale_hi: scale_edges[si + 1],
                orient_lo: orient_edges[oi],
                orient_hi: orient_edges[oi + 1],
                fpr95: value,
                positives: pos.len(),
                low_confidence: pos.len() < MIN_BIN_POSITIVES,
            });
        }
    }
    Ok(out)
}

/// One retrieval query: the true counterpart's distance and the
/// distances of every other candidate in the pool.
#[derive(Debug, Clone)]
pub struct RetrievalQuery {
    pub true_distance: f64,
    pub other_distances: Vec<f64>,
}

/// Rank of each query's true counterpart within its pool: 1 plus the
/// number of other candidates at least as close.
pub fn retrieval_ranks(queries: &[RetrievalQuery]) -> Result<Vec<usize>> {
    if queries.is_empty() {
        return Err(Error::InvalidArgument("no retrieval queries".into()));
    }
    let mut ranks = Vec::with_capacity(queries.len());
    for q in queries {
        if !q.true_distance.is_finite() {
            return Err(Error::InvalidArgument(
                "retrieval distances must be finite".into(),
            ));
        }
        let ahead = q
            .other_distances
            .iter()
            .filter(|&&d| d <= q.true_distance)
            .count();
        ranks.push(1 + ahead);
    }
    Ok(ranks)
}

/// Summary of a rank distribution.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetrievalSummary {
    pub mean_rank: f64,
    pub median_rank: f64,
    pub recall_at_1: f64,
    pub queries: usize,
}

pub fn summarize_ranks(ranks: &[usize]) -> Result<RetrievalSummary> {
    if ranks.is_empty() {
        return Err(Error::InvalidArgument("no ranks to summarize".into()));
    }
    let n = ranks.len();
    let mean = ranks.iter().sum::<usize>() as f64 / n as f64;
    let mut sorted = ranks.to_vec();
    sorted.sort_unstable();
    let median = if n % 2 == 1 {
        sorted[n / 2] as f64
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) as f64 / 2.0
    };
    let at1 = ranks.iter().filter(|&&r| r == 1).count() as f64 / n as f64;
    Ok(RetrievalSummary {
        mean_rank: mean,
        median_rank: median,
        recall_at_1: at1,
        queries: n,
    })
}

// --- CSV emitters ------------------------------------------------------------

/// One labelled global result row.
#[derive(Debug, Clone)]
pub struct GlobalRow {
    pub method: String,
    pub grid_kind: String,
    pub lambda: f64,
    pub fpr95: f64,
    pub positives: usize,
    pub negatives: usize,
}

pub fn global_csv(rows: &[GlobalRow]) -> String {
    let mut s = String::from("method,grid_kind,lambda,fpr95,positives,negatives\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.method, r.grid_kind, r.lambda, r.fpr95, r.positives, r.negatives
        ));
    }
    s
}

/// Long-form CSV, one row per bin cell.
pub fn bins_csv(bins: &[BinResult]) -> String {
    let mut s = String::from(
        "scale_lo,scale_hi,orient_lo,orient_hi,fpr95,positives,low_confidence\n",
    );
    for b in bins {
        let value = b.fpr95.map(|v| v.to_string()).unwrap_or_default();
        s.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            b.scale_lo, b.scale_hi, b.orient_lo, b.orient_hi, value, b.positives, b.low_confidence
        ));
    }
    s
}

pub fn ranks_csv(ranks: &[usize]) -> String {
    let mut s = String::from("query,rank\n");
    for (i, r) in ranks.iter().enumerate() {
        s.push_str(&format!("{i},{r}\n"));
    }
    s
}

/// Parse a labelled score file: one `p <dist>` or `n <dist>` per line,
/// `#` comments allowed. Scale/orientation annotations default to the
/// first bin.
pub fn parse_score_file(text: &str) -> Result<MatchScores> {
    let mut scores = MatchScores::default();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        let err = |msg: String| Error::Config(format!("line {}: {msg}", lineno + 1));
        if fields.len() < 2 || fields.len() == 3 || fields.len() > 4 {
            return Err(err(format!(
                "expected 'p dist [scale_ratio orient_deg]' or 'n dist', got {} fields",
                fields.len()
            )));
        }
        let dist: f64 = fields[1]
            .parse()
            .map_err(|e| err(format!("bad distance: {e}")))?;
        match fields[0] {
            "p" => {
                let (ratio, orient) = if fields.len() == 4 {
                    (
                        fields[2]
                            .parse()
                            .map_err(|e| err(format!("bad scale ratio: {e}")))?,
                        fields[3]
                            .parse()
                            .map_err(|e| err(format!("bad orientation: {e}")))?,
                    )
                } else {
                    (1.0, 0.0)
                };
                scores.positives.push(ScoredPositive {
                    distance: dist,
                    scale_ratio: ratio,
                    orientation_residual: orient,
                });
            }
            "n" => scores.negatives.push(dist),
            other => return Err(err(format!("label must be 'p' or 'n', got {other:?}"))),
        }
    }
    Ok(scores)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Reference implementation: sweep every positive distance as the
    /// candidate threshold and take the smallest one recalling 95%.
    fn fpr95_sweep(positives: &[f64], negatives: &[f64]) -> f64 {
        let need = (0.95 * positives.len() as f64).ceil() as usize;
        let mut best = f64::INFINITY;
        for &t in positives {
            let recalled = positives.iter().filter(|&&p| p <= t).count();
            if recalled >= need && t < best {
                best = t;
            }
        }
        negatives.iter().filter(|&&d| d <= best).count() as f64 / negatives.len() as f64
    }

    #[test]
    fn fpr95_matches_threshold_sweep_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for trial in 0..200 {
            let np = rng.gen_range(1..200);
            let nn = rng.gen_range(1..200);
            let positives: Vec<f64> = (0..np).map(|_| rng.gen::<f64>()).collect();
            let negatives: Vec<f64> = (0..nn).map(|_| rng.gen::<f64>() * 1.5).collect();
            let got = fpr95(&positives, &negatives).unwrap();
            let want = fpr95_sweep(&positives, &negatives);
            assert_eq!(got, want, "trial {trial}");
        }
    }

    #[test]
    fn fpr95_identical_distributions_is_near_095() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let positives: Vec<f64> = (0..10_000).map(|_| rng.gen::<f64>()).collect();
        let negatives: Vec<f64> = (0..10_000).map(|_| rng.gen::<f64>()).collect();
        let v = fpr95(&positives, &negatives).unwrap();
        assert!((v - 0.95).abs() < 0.02, "fpr95 {v}");
    }

    #[test]
    fn fpr95_separated_distributions_is_zero() {
        let positives: Vec<f64> = (0..100).map(|i| 0.1 + 0.001 * i as f64).collect();
        let negatives: Vec<f64> = (0..100).map(|i| 5.0 + 0.001 * i as f64).collect();
        assert_eq!(fpr95(&positives, &negatives).unwrap(), 0.0);
    }

    #[test]
    fn fpr95_small_fixture() {
        // threshold = ceil(0.95*4)=4th positive = 4.0; negatives <= 4.0: 3,4 -> 2/4
        let positives = [1.0, 2.0, 3.0, 4.0];
        let negatives = [3.0, 4.0, 5.0, 6.0];
        assert_eq!(fpr95(&positives, &negatives).unwrap(), 0.5);
    }

    #[test]
    fn fpr95_rejects_empty_and_bad_values() {
        assert!(fpr95(&[], &[1.0]).is_err());
        assert!(fpr95(&[1.0], &[]).is_err());
        assert!(fpr95(&[f64::NAN], &[1.0]).is_err());
        assert!(fpr95(&[1.0], &[-0.5]).is_err());
    }

    fn scored(d: f64, r: f64, o: f64) -> ScoredPositive {
        ScoredPositive {
            distance: d,
            scale_ratio: r,
            orientation_residual: o,
        }
    }

    #[test]
    fn single_bin_equals_global() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let positives: Vec<ScoredPositive> = (0..300)
            .map(|_| scored(rng.gen::<f64>(), 1.2, 3.0))
            .collect();
        let negatives: Vec<f64> = (0..300).map(|_| rng.gen::<f64>()).collect();
        let flat: Vec<f64> = positives.iter().map(|p| p.distance).collect();
        let global = fpr95(&flat, &negatives).unwrap();
        let scores = MatchScores {
            positives,
            negatives,
        };
        let bins = binned_fpr95(&scores, &[1.0, 4.0], &[0.0, 25.0]).unwrap();
        assert_eq!(bins.len(), 1);
        assert_eq!(bins[0].fpr95, Some(global));
        assert!(!bins[0].low_confidence);
    }

    #[test]
    fn bin_layout_and_edge_cases() {
        let scores = MatchScores {
            positives: vec![
                scored(0.1, 1.0, 0.0),  // lowest edges land in the first cell
                scored(0.2, 4.0, 25.0), // top edges land in the last cell
                scored(0.3, 5.0, 0.0),  // beyond the last scale edge: dropped
            ],
            negatives: vec![0.05, 0.15, 0.25],
        };
        let bins = binned_fpr95(&scores, &DEFAULT_SCALE_EDGES, &DEFAULT_ORIENT_EDGES).unwrap();
        assert_eq!(bins.len(), 4 * 5);
        let first = bins
            .iter()
            .find(|b| b.scale_lo == 1.0 && b.orient_lo == 0.0)
            .unwrap();
        assert_eq!(first.positives, 1);
        assert!(first.low_confidence);
        let last = bins
            .iter()
            .find(|b| b.scale_hi == 4.0 && b.orient_hi == 25.0)
            .unwrap();
        assert_eq!(last.positives, 1);
        let total: usize = bins.iter().map(|b| b.positives).sum();
        assert_eq!(total, 2);
        let empty = bins
            .iter()
            .find(|b| b.scale_lo == 2.0 && b.orient_lo == 10.0)
            .unwrap();
        assert_eq!(empty.fpr95, None);
        assert_eq!(empty.positives, 0);
    }

    #[test]
    fn bin_edges_validation() {
        let scores = MatchScores {
            positives: vec![scored(0.1, 1.0, 0.0)],
            negatives: vec![0.2],
        };
        assert!(binned_fpr95(&scores, &[1.0], &[0.0, 25.0]).is_err());
        assert!(binned_fpr95(&scores, &[1.0, 1.0], &[0.0, 25.0]).is_err());
        assert!(binned_fpr95(&scores, &[2.0, 1.0], &[0.0, 25.0]).is_err());
    }

    #[test]
    fn retrieval_rank_counting() {
        let queries = vec![
            RetrievalQuery {
                true_distance: 0.1,
                other_distances: vec![0.5, 0.9, 0.2],
            },
            RetrievalQuery {
                true_distance: 0.5,
                other_distances: vec![0.1, 0.2, 0.9],
            },
            RetrievalQuery {
                true_distance: 0.5,
                other_distances: vec![0.5, 0.6], // tie counts against us
            },
        ];
        assert_eq!(retrieval_ranks(&queries).unwrap(), vec![1, 3, 2]);
    }

    #[test]
    fn random_descriptors_give_uniform_ranks() {
        // with i.i.d. candidate distances the true match's rank is uniform
        // over 1..=pool size, so the mean is (pool+1)/2
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let pool = 99;
        let queries: Vec<RetrievalQuery> = (0..4000)
            .map(|_| RetrievalQuery {
                true_distance: rng.gen::<f64>(),
                other_distances: (0..pool).map(|_| rng.gen::<f64>()).collect(),
            })
            .collect();
        let ranks = retrieval_ranks(&queries).unwrap();
        let summary = summarize_ranks(&ranks).unwrap();
        let expected = (pool + 1 + 1) as f64 / 2.0;
        assert!(
            (summary.mean_rank - expected).abs() / expected < 0.1,
            "mean rank {} vs {expected}",
            summary.mean_rank
        );
    }

    #[test]
    fn summary_basics() {
        let s = summarize_ranks(&[1, 1, 2, 10]).unwrap();
        assert_eq!(s.mean_rank, 3.5);
        assert_eq!(s.median_rank, 1.5);
        assert_eq!(s.recall_at_1, 0.5);
        assert!(summarize_ranks(&[]).is_err());
    }

    #[test]
    fn score_file_round_trip_and_errors() {
        let text = "# comment\np 0.5\nn 0.7\np 0.4 2.0 10.0\n\n";
        let s = parse_score_file(text).unwrap();
        assert_eq!(s.positives.len(), 2);
        assert_eq!(s.negatives, vec![0.7]);
        assert_eq!(s.positives[1].scale_ratio, 2.0);
        assert!(parse_score_file("x 0.5\n").is_err());
        assert!(parse_score_file("p\n").is_err());
        assert!(parse_score_file("p 0.5 2.0\n").is_err());
    }

    #[test]
    fn csv_shapes() {
        let g = global_csv(&[GlobalRow {
            method: "net".into(),
            grid_kind: "logpolar".into(),
            lambda: 96.0,
            fpr95: 0.25,
            positives: 10,
            negatives: 20,
        }]);
        assert!(g.starts_with("method,grid_kind,lambda"));
        assert!(g.contains("net,logpolar,96,0.25,10,20"));
        let scores = MatchScores {
            positives: vec![scored(0.1, 1.0, 0.0)],
            negatives: vec![0.2],
        };
        let bins = binned_fpr95(&scores, &[1.0, 2.0], &[0.0, 25.0]).unwrap();
        let csv = bins_csv(&bins);
        assert_eq!(csv.lines().count(), 2);
        assert!(ranks_csv(&[3, 1]).contains("0,3"));
    }

    #[test]
    fn descriptor_distance_basics() {
        assert_eq!(descriptor_distance(&[0.0, 3.0], &[4.0, 0.0]).unwrap(), 5.0);
        assert!(descriptor_distance(&[1.0], &[1.0, 2.0]).is_err());
    }
}
