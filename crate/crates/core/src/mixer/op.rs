//! The DynaMixer operation on batches of token sequences.
//!
//! Inputs are `[L, N, D]`: `L` independent sequences (grid rows or columns,
//! across the batch) of `N` tokens with `D` channels. A plain `[N, D]` input
//! is treated as `L = 1`.

use super::weights::{DynaMixerOpWeights, MixGenerator};
use crate::error::{Error, Result};
use crate::tensor::{Graph, Var};

fn as_batched(g: &mut Graph, x: &Var) -> Result<(Var, bool)> {
    match x.shape().len() {
        3 => Ok((x.clone(), false)),
        2 => {
            let s = x.shape().to_vec();
            Ok((g.reshape(x, &[1, s[0], s[1]])?, true))
        }
        _ => Err(Error::shape("dynamixer_op", x.shape(), &[0, 0, 0])),
    }
}

/// Mixing matrices for every sequence and segment, shaped `[L·S, N, N]`
/// with the segment index fastest.
///
/// For the static variant `S` is the `segments` argument and every matrix is
/// the same learnable one.
pub fn generate_mixing_matrices(g: &mut Graph, x: &Var, w: &DynaMixerOpWeights<Var>, segments: usize) -> Result<Var> {
    let (x, _) = as_batched(g, x)?;
    let (l, n, d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    if segments == 0 || d % segments != 0 {
        return Err(Error::config(format!(
            "feature width {d} not divisible into {segments} segments"
        )));
    }
    match &w.generator {
        MixGenerator::Dynamic { reduce, gen } => {
            if reduce.len() != segments {
                return Err(Error::shape("generate_mixing_matrices", &[reduce.len()], &[segments]));
            }
            let reduced = reduce[0].0.shape()[1];
            let maps: Vec<Var> = reduce.iter().map(|r| r.0.clone()).collect();
            let stacked = g.concat_last(&maps)?;
            // every segment's reduction sees all D channels
            let xr = g.matmul(&x, &stacked)?;
            let xr = g.reshape(&xr, &[l, n, segments, reduced])?;
            let xr = g.permute(&xr, &[0, 2, 1, 3])?;
            // token-major flattening: token slow, reduced feature fast
            let flat = g.reshape(&xr, &[l * segments, n * reduced])?;
            let logits = g.matmul(&flat, &gen.0)?;
            let logits = g.reshape(&logits, &[l * segments, n, n])?;
            g.softmax_last(&logits)
        }
        MixGenerator::DensePerToken { dense } => {
            if dense.len() != segments {
                return Err(Error::shape("generate_mixing_matrices", &[dense.len()], &[segments]));
            }
            let maps: Vec<Var> = dense.iter().map(|m| m.0.clone()).collect();
            let stacked = g.concat_last(&maps)?;
            let logits = g.matmul(&x, &stacked)?;
            let logits = g.reshape(&logits, &[l, n, segments, n])?;
            let logits = g.permute(&logits, &[0, 2, 1, 3])?;
            let logits = g.reshape(&logits, &[l * segments, n, n])?;
            g.softmax_last(&logits)
        }
        MixGenerator::StaticRandom { mix } => {
            if mix.0.shape() != [n, n] {
                return Err(Error::shape("generate_mixing_matrices", mix.0.shape(), &[n, n]));
            }
            let m = g.reshape(&mix.0, &[1, n, n])?;
            g.expand(&m, &[l * segments, n, n])
        }
    }
}

/// `Y = [P⁽⁰⁾X⁽⁰⁾, …, P⁽ˢ⁻¹⁾X⁽ˢ⁻¹⁾]·W_o` with `X⁽ˢ⁾` the `s`-th contiguous
/// channel slice. Output has the input's shape.
pub fn dynamixer_op(g: &mut Graph, x: &Var, w: &DynaMixerOpWeights<Var>, segments: usize) -> Result<Var> {
    let (xb, unbatched) = as_batched(g, x)?;
    let (l, n, d) = (xb.shape()[0], xb.shape()[1], xb.shape()[2]);
    let p = generate_mixing_matrices(g, &xb, w, segments)?;
    let width = d / segments;
    let xs = g.reshape(&xb, &[l, n, segments, width])?;
    let xs = g.permute(&xs, &[0, 2, 1, 3])?;
    let xs = g.reshape(&xs, &[l * segments, n, width])?;
    let mixed = g.bmm(&p, &xs)?;
    let mixed = g.reshape(&mixed, &[l, segments, n, width])?;
    let mixed = g.permute(&mixed, &[0, 2, 1, 3])?;
    let mixed = g.reshape(&mixed, &[l, n, d])?;
    let y = g.matmul(&mixed, &w.out_fuse.0)?;
    if unbatched {
        g.reshape(&y, &[n, d])
    } else {
        Ok(y)
    }
}
