//! Rank-based retrieval protocol: each query descriptor searches for its
//! true match inside a candidate pool full of distractors. Demonstrates
//! the two calibration extremes — ideal descriptors retrieve at rank 1,
//! random descriptors land mid-pool on average.
//!
//!     cargo run --example retrieval_ranks

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use logpolar::eval::{descriptor_distance, retrieval_ranks, summarize_ranks, RetrievalQuery};

fn main() -> logpolar::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(17);

    // ideal: the true match is at distance zero, distractors are not
    let ideal: Vec<RetrievalQuery> = (0..500)
        .map(|_| RetrievalQuery {
            true_distance: 0.0,
            other_distances: (0..99).map(|_| 0.1 + rng.gen::<f64>()).collect(),
        })
        .collect();
    let summary = summarize_ranks(&retrieval_ranks(&ideal)?)?;
    println!(
        "ideal descriptors:  mean rank {:.2}, median {:.1}, rank-1 rate {:.3}",
        summary.mean_rank, summary.median_rank, summary.recall_at_1
    );

    // random: the true match is just another random candidate, so its
    // rank is uniform over the pool
    let dim = 16;
    let mut random = Vec::new();
    for _ in 0..2000 {
        let q: Vec<f32> = (0..dim).map(|_| rng.gen::<f32>() - 0.5).collect();
        let cand: Vec<Vec<f32>> = (0..100)
            .map(|_| (0..dim).map(|_| rng.gen::<f32>() - 0.5).collect())
            .collect();
        random.push(RetrievalQuery {
            true_distance: descriptor_distance(&q, &cand[0])?,
            other_distances: cand[1..]
                .iter()
                .map(|c| descriptor_distance(&q, c))
                .collect::<logpolar::Result<_>>()?,
        });
    }
    let summary = summarize_ranks(&retrieval_ranks(&random)?)?;
    println!(
        "random descriptors: mean rank {:.2}, median {:.1}, rank-1 rate {:.3}",
        summary.mean_rank, summary.median_rank, summary.recall_at_1
    );
    println!("(pool of 100 candidates: a random true match averages rank ~50.5)");
    Ok(())
}
