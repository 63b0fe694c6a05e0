//! Compares analytic gradients of the contrastive loss with central
//! differences.
//!
//! `cargo run --example gradient_check -p pivot-align`

use pivot_align::objectives::info_nce;
use pivot_align::tensor::{finite_diff_check, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> pivot_align::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut random =
        |r: usize, c: usize| Tensor::new(vec![r, c], (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect());
    let inputs = [random(4, 6)?, random(4, 6)?];
    for tau in [1.0, 0.5, 0.1] {
        let err = finite_diff_check(|g, v| info_nce(g, v[0], v[1], tau), &inputs, 1e-5)?;
        println!("info_nce tau = {tau:<5} max relative error {err:.2e}");
    }
    Ok(())
}
