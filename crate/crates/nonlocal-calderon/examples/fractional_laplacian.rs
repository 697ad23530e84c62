//! Kernel constant and the pointwise fractional Laplacian of the torsion profile.
//!
//! `(-Δ)^s (1 - x²)^s_+` is constant on (-1, 1); the value printed as
//! `exact` comes from the gamma-function formula.

use nonlocal_calderon::domain::FracOrder;
use nonlocal_calderon::kernel::{frac_laplacian_closure, kernel_constant, torsion, PointwiseOptions};

fn main() -> nonlocal_calderon::Result<()> {
    for s in [0.25, 0.5, 0.75] {
        let fo = FracOrder::new(1, s)?;
        let f = move |x: f64| (1.0 - x * x).max(0.0).powf(s);
        let pts: Vec<f64> = (-9..=9).map(|j| j as f64 * 0.1).collect();
        let vals = frac_laplacian_closure(&f, &[-1.0, 1.0], &pts, 2.0, fo, PointwiseOptions::default())?;
        // torsion(0) is the reciprocal of the constant
        let exact = 1.0 / torsion(fo, 0.0);
        let err = vals.iter().map(|v| (v / exact - 1.0).abs()).fold(0.0, f64::max);
        println!("s = {s:.2}  C = {:.12}  exact = {exact:.12}  max rel err = {err:.2e}", kernel_constant(fo));
    }
    Ok(())
}
