//! Generate mixing matrices for a handful of tokens with each generator
//! variant and print them.

use dynamixer::mixer::{generate_mixing_matrices, DynaMixerOpWeights};
use dynamixer::{Graph, MixGenKind, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn show(label: &str, p: &Tensor) {
    let n = p.shape()[2];
    println!("{label} ({} matrices of {n}x{n})", p.shape()[0]);
    for row in p.data().chunks(n).take(n) {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:>7.4}")).collect();
        let sum: f64 = row.iter().map(|&v| v as f64).sum();
        println!("  [{}]  sum {sum:.6}", cells.join(" "));
    }
}

fn main() -> dynamixer::Result<()> {
    let (n, d, segments, reduced) = (5, 8, 2, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = Tensor::randn(&[n, d], 1.0, &mut rng);
    for kind in [MixGenKind::Dynamic, MixGenKind::DensePerToken, MixGenKind::StaticRandom] {
        let w = DynaMixerOpWeights::random(kind, n, d, segments, reduced, 0.5, &mut rng);
        let mut g = Graph::no_grad();
        let wv = w.bind(&mut g);
        let xv = g.constant(x.clone());
        let p = generate_mixing_matrices(&mut g, &xv, &wv, segments)?;
        show(&format!("{kind:?}, segment 0"), &p.to_tensor());
    }
    Ok(())
}
