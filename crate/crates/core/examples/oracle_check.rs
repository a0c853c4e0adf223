//! Compare the vectorized operation and block against the loop-level
//! oracle on random instances.

use dynamixer::mixer::{build_model, dynamixer_block, dynamixer_op, DynaMixerOpWeights};
use dynamixer::oracle::{
    grid_from_tensor, naive_block, naive_dynamixer_op, Mat, OracleBlock, OracleInstance, OracleOpWeights,
};
use dynamixer::{Graph, MixGenKind, ModelConfig, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> dynamixer::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut worst_op = 0.0f64;
    for _ in 0..100 {
        let n = rng.gen_range(1..=8);
        let segments = rng.gen_range(1..=3);
        let d = segments * rng.gen_range(1..=4);
        let reduced = rng.gen_range(1..=3);
        let kind = [MixGenKind::Dynamic, MixGenKind::DensePerToken, MixGenKind::StaticRandom][rng.gen_range(0..3)];
        let w = DynaMixerOpWeights::random(kind, n, d, segments, reduced, 0.5, &mut rng);
        let x = Tensor::randn(&[n, d], 1.0, &mut rng);

        let mut g = Graph::no_grad();
        let wv = w.bind(&mut g);
        let xv = g.constant(x.clone());
        let fast = dynamixer_op(&mut g, &xv, &wv, segments)?.to_tensor();
        let slow = naive_dynamixer_op(&OracleInstance {
            segments,
            x: Mat::from_tensor(&x),
            weights: OracleOpWeights::from_weights(&w),
        })?;
        for (a, b) in fast.data().iter().zip(&slow.data) {
            worst_op = worst_op.max((*a as f64 - b).abs());
        }
    }
    println!("op:    max |vectorized - oracle| over 100 instances = {worst_op:.2e}");

    let cfg = ModelConfig::preset("tiny").unwrap();
    let weights = build_model(&cfg, 1)?;
    let block = &weights.stages[0].layers[0].block;
    let x = Tensor::randn(&[1, 4, 4, 8], 1.0, &mut rng);
    let mut g = Graph::no_grad();
    let bv = weights.bind_frozen(&g).stages[0].layers[0].block.clone();
    let xv = g.constant(x.clone());
    let fast = dynamixer_block(&mut g, &xv, &bv, 2, false)?.to_tensor();
    let grid = grid_from_tensor(&x.reshape(&[4, 4, 8])?)?;
    let slow = naive_block(&grid, &OracleBlock::from_weights(block, false), 2)?;
    let worst_block = slow
        .iter()
        .flatten()
        .flatten()
        .zip(fast.data())
        .map(|(b, a)| (*a as f64 - b).abs())
        .fold(0.0, f64::max);
    println!("block: max |vectorized - oracle| = {worst_block:.2e}");
    Ok(())
}
