//! Finite-difference checks: a few primitive ops, then the whole tiny model.
//!
//!     cargo run --release --example gradcheck [eps]

use dynamixer::mixer::model_grad_check;
use dynamixer::tensor::grad_check;
use dynamixer::{ModelConfig, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> dynamixer::Result<()> {
    let eps = std::env::args().nth(1).map_or(1e-4, |s| s.parse().expect("eps"));
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let a = Tensor::randn(&[3, 4], 1.0, &mut rng);
    let b = Tensor::randn(&[4, 5], 1.0, &mut rng);
    let gain = Tensor::randn(&[5], 1.0, &mut rng);

    let r = grad_check(
        |g, v| {
            let y = g.matmul(&v[0], &v[1])?;
            let zero = g.constant(Tensor::zeros(&[5]));
            let y = g.layer_norm(&y, &v[2], &zero, 1e-6)?;
            let y = g.gelu(&y)?;
            g.cross_entropy(&y, &[0, 1, 4], 0.1)
        },
        &[a, b, gain],
        eps,
        200,
        &mut rng,
    )?;
    println!("matmul, layer_norm, gelu, cross_entropy: {:.2e}", r.max_rel_err);

    let cfg = ModelConfig::preset("tiny").unwrap();
    let r = model_grad_check(&cfg, 0, eps, 500, 2)?;
    println!(
        "tiny model, {} coordinates: max relative error {:.2e} (worst parameter #{:?})",
        r.coords_checked, r.max_rel_err, r.worst
    );
    Ok(())
}
