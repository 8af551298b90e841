//! Max-variance direction of a few correlated columns.

use sparc::fusion::{covariance, max_variance_weights, projected_variance};

fn main() -> sparc::error::Result<()> {
    let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
    let b = [1.2, 1.9, 3.3, 3.8, 5.1, 6.2];
    let c = [0.5, -0.2, 0.1, 0.3, -0.4, 0.0];
    let cols: [&[f64]; 3] = [&a, &b, &c];
    let w = max_variance_weights(&cols, false)?;
    println!("covariance {:?}", covariance(&cols));
    println!("weights {w:?}");
    println!("projected variance {:.6}", projected_variance(&cols, &w));
    let even = [1.0 / 3f64.sqrt(); 3];
    println!("equal weights give {:.6}", projected_variance(&cols, &even));
    Ok(())
}
