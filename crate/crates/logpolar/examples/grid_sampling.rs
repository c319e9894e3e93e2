//! Constructs the two sampling grids around a keypoint and demonstrates
//! the structural properties that make the log-polar one attractive:
//! rotating the keypoint cyclically shifts grid rows (bitwise), and
//! squaring the support radius doubles the radial column index.
//!
//!     cargo run --example grid_sampling

use logpolar::geometry::{cartesian_grid, logpolar_grid, GridKind, GridSpec, Keypoint, TAU};

fn main() -> logpolar::Result<()> {
    let l = 32;
    let kp = Keypoint::new(120.3, 84.7, 1.6, 0.35)?;

    let lp_spec = GridSpec::new(l, 96.0, GridKind::LogPolar)?;
    let ct_spec = GridSpec::new(l, 16.0, GridKind::Cartesian)?;
    let lp = logpolar_grid(&kp, &lp_spec)?;
    let ct = cartesian_grid(&kp, &ct_spec)?;

    println!("keypoint at ({}, {}), sigma {}, theta {}", kp.x, kp.y, kp.sigma, kp.theta);
    println!("log-polar support radius: {:.1} px", kp.support_radius(lp_spec.lambda));
    println!("first log-polar ring samples (row 0, cols 0..4):");
    for col in 0..4 {
        let (x, y) = lp.src(0, col);
        println!("  col {col}: ({x:.3}, {y:.3})");
    }
    println!("cartesian corner samples:");
    for (r, c) in [(0, 0), (0, l - 1), (l - 1, 0)] {
        let (x, y) = ct.src(r, c);
        println!("  ({r:2}, {c:2}): ({x:.3}, {y:.3})");
    }

    // rotating the keypoint by k grid steps rotates the rows, bitwise
    let k = 5;
    let rotated = Keypoint::new(kp.x, kp.y, kp.sigma, kp.theta + TAU * k as f64 / l as f64)?;
    let lp_rot = logpolar_grid(&rotated, &lp_spec)?;
    let mut exact = true;
    for row in 0..l {
        for col in 0..l {
            let a = lp_rot.src(row, col);
            let b = lp.src((row + k) % l, col);
            exact &= a.0.to_bits() == b.0.to_bits() && a.1.to_bits() == b.1.to_bits();
        }
    }
    println!("rotation by {k} steps == cyclic row shift by {k}: {exact}");

    // radial stretch: a grid with squared support radius reads the same
    // coordinates at half the column index (power-of-two radii are exact)
    let kp2 = Keypoint::new(kp.x, kp.y, 2.0, kp.theta)?;
    let g_r = logpolar_grid(&kp2, &GridSpec::new(l, 8.0, GridKind::LogPolar)?)?;
    let g_r2 = logpolar_grid(&kp2, &GridSpec::new(l, 64.0, GridKind::LogPolar)?)?;
    let mut stretch_exact = true;
    for row in 0..l {
        for x in 0..l / 2 {
            let a = g_r2.src(row, x);
            let b = g_r.src(row, 2 * x);
            stretch_exact &= a.0.to_bits() == b.0.to_bits() && a.1.to_bits() == b.1.to_bits();
        }
    }
    println!("squared support radius == doubled radial index: {stretch_exact}");
    Ok(())
}
