//! Finite-difference check of every differentiable primitive in float64.

use sdistill::gradcheck::{finite_difference_check, CHECKED_PRIMITIVES};

fn main() -> anyhow::Result<()> {
    let mut worst = 0.0f64;
    for &kind in CHECKED_PRIMITIVES {
        let err = (0..5)
            .map(|seed| finite_difference_check(kind, seed, 1e-6))
            .collect::<Result<Vec<_>, _>>()?
            .into_iter()
            .fold(0.0, f64::max);
        worst = worst.max(err);
        println!("{kind:?}: max relative error {err:.2e}");
    }
    println!("worst {worst:.2e}");
    Ok(())
}
