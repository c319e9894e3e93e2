//! Trains log-polar and cartesian descriptor models at support factors
//! 16 and 96 on a shared synthetic dataset and compares their FPR95,
//! globally and in the [2, 4] scale-mismatch bin. Outcomes are cached
//! under `target/trend-cache`, so re-running is instant once the four
//! models have been trained.
//!
//!     cargo run --release --example trend_experiment

use logpolar::trend::{default_cache_dir, run_trend, trend_findings};

fn main() {
    let cache = std::env::args()
        .nth(1)
        .map(Into::into)
        .unwrap_or_else(default_cache_dir);
    let outcomes = match run_trend(&cache, |msg| println!("{msg}")) {
        Ok(o) => o,
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(2);
        }
    };

    println!("\nmodel                      global FPR95   FPR95 in scale bin [2,4]");
    for o in &outcomes {
        let bin = o
            .scale_bin(2.0, 4.0)
            .and_then(|b| b.fpr95)
            .map(|r| format!("{r:.4}"))
            .unwrap_or_else(|| "n/a".into());
        println!(
            "{:10} lambda {:>3}     {:.4}         {}",
            o.grid_kind.name(),
            o.lambda,
            o.global_fpr95,
            bin
        );
    }

    match trend_findings(&outcomes) {
        Ok(f) => {
            println!(
                "\nscale bin [2,4]: log-polar {:.4} vs cartesian {:.4} ({:+.1}% relative)",
                f.logpolar_bin24,
                f.cartesian_bin24,
                -100.0 * f.bin24_relative_reduction
            );
            println!(
                "support sweep 16 -> 96: log-polar {:.4} -> {:.4} ({:+.1}%), cartesian {:.4} -> {:.4} ({:+.1}%)",
                f.logpolar_16,
                f.logpolar_96,
                100.0 * f.logpolar_relative_change,
                f.cartesian_16,
                f.cartesian_96,
                100.0 * f.cartesian_relative_change
            );
        }
        Err(e) => eprintln!("could not summarize: {e}"),
    }
}
