//! Row, column and channel mixing over an `[B, H, W, D]` token grid.

use super::op::dynamixer_op;
use super::weights::{BlockWeights, DynaMixerOpWeights, Linear, ReweightWeights};
use crate::error::{Error, Result};
use crate::tensor::{Graph, Var};

pub(crate) fn linear(g: &mut Graph, x: &Var, w: &Linear<Var>) -> Result<Var> {
    let y = g.matmul(x, &w.weight.0)?;
    g.add(&y, &w.bias.0)
}

fn grid_dims(x: &Var) -> Result<[usize; 4]> {
    match *x.shape() {
        [b, h, w, d] => Ok([b, h, w, d]),
        ref s => Err(Error::shape("dynamixer_block", s, &[0, 0, 0, 0])),
    }
}

/// Apply `op` independently to every grid row (`W` tokens each).
pub fn mix_rows(g: &mut Graph, x: &Var, op: &DynaMixerOpWeights<Var>, segments: usize) -> Result<Var> {
    let [b, h, w, d] = grid_dims(x)?;
    let rows = g.reshape(x, &[b * h, w, d])?;
    let y = dynamixer_op(g, &rows, op, segments)?;
    g.reshape(&y, &[b, h, w, d])
}

/// Apply `op` independently to every grid column (`H` tokens each).
pub fn mix_cols(g: &mut Graph, x: &Var, op: &DynaMixerOpWeights<Var>, segments: usize) -> Result<Var> {
    let [b, h, w, d] = grid_dims(x)?;
    let t = g.permute(x, &[0, 2, 1, 3])?;
    let cols = g.reshape(&t, &[b * w, h, d])?;
    let y = dynamixer_op(g, &cols, op, segments)?;
    let y = g.reshape(&y, &[b, w, h, d])?;
    g.permute(&y, &[0, 2, 1, 3])
}

/// Per-channel softmax fusion of the row, column and channel branches.
///
/// Branch weights come from the token-mean of the summed branches through a
/// `D → D/4 → 3D` bottleneck with GELU, then a softmax across the three
/// branches for each channel. Absent branches still take part in the
/// softmax but contribute nothing to the output.
pub fn reweight(g: &mut Graph, branches: [Option<&Var>; 3], w: &ReweightWeights<Var>) -> Result<Var> {
    let present: Vec<&Var> = branches.iter().flatten().copied().collect();
    let first = *present
        .first()
        .ok_or_else(|| Error::config("reweighting needs at least one branch"))?;
    let [b, _, _, d] = grid_dims(first)?;
    let mut sum = first.clone();
    for y in &present[1..] {
        sum = g.add(&sum, y)?;
    }
    let pooled = g.mean_axes(&sum, &[1, 2])?;
    let hidden = g.matmul(&pooled, &w.w1.0)?;
    let hidden = g.gelu(&hidden)?;
    let logits = g.matmul(&hidden, &w.w2.0)?;
    let logits = g.reshape(&logits, &[b, 3, d])?;
    let logits = g.permute(&logits, &[0, 2, 1])?;
    let alpha = g.softmax_last(&logits)?;
    let alpha = g.permute(&alpha, &[0, 2, 1])?;

    let mut out: Option<Var> = None;
    for (k, branch) in branches.iter().enumerate() {
        let Some(y) = branch else { continue };
        let a = g.narrow(&alpha, 1, k, 1)?;
        let a = g.reshape(&a, &[b, 1, 1, d])?;
        let term = g.mul(y, &a)?;
        out = Some(match out {
            Some(acc) => g.add(&acc, &term)?,
            None => term,
        });
    }
    Ok(out.expect("at least one branch is present"))
}

/// Row mixing, column mixing and channel projection, fused by
/// [`reweight`] (or summed when reweighting is disabled), then projected
/// by `proj_o`.
///
/// With `share_ops` set, column mixing reuses the row operation.
pub fn dynamixer_block(g: &mut Graph, x: &Var, w: &BlockWeights<Var>, segments: usize, share_ops: bool) -> Result<Var> {
    grid_dims(x)?;
    let y_h = w.row_op.as_ref().map(|op| mix_rows(g, x, op, segments)).transpose()?;
    let col_op = if share_ops {
        w.row_op.as_ref()
    } else {
        w.col_op.as_ref()
    };
    let y_w = col_op.map(|op| mix_cols(g, x, op, segments)).transpose()?;
    let y_c = w.proj_c.as_ref().map(|p| linear(g, x, p)).transpose()?;

    let branches = [y_h.as_ref(), y_w.as_ref(), y_c.as_ref()];
    if branches.iter().all(Option::is_none) {
        return Err(Error::config("all three mixing branches are disabled"));
    }
    let fused = match &w.reweight {
        Some(rw) => reweight(g, branches, rw)?,
        None => {
            let mut present = branches.into_iter().flatten();
            let mut acc = present.next().unwrap().clone();
            for y in present {
                acc = g.add(&acc, y)?;
            }
            acc
        }
    };
    linear(g, &fused, &w.proj_o)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mixer::weights::Leaf;
    use crate::tensor::Tensor;

    #[test]
    fn zero_reweight_logits_average_the_branches() {
        let mut g = Graph::no_grad();
        let a = g.constant(Tensor::full(&[1, 2, 2, 4], 3.0));
        let b = g.constant(Tensor::full(&[1, 2, 2, 4], 6.0));
        let w = ReweightWeights {
            w1: Leaf(g.constant(Tensor::zeros(&[4, 1]))),
            w2: Leaf(g.constant(Tensor::zeros(&[1, 12]))),
        };
        let y = reweight(&mut g, [Some(&a), None, Some(&b)], &w).unwrap();
        assert!(y.value().data().iter().all(|&v| (v - 3.0).abs() < 1e-12));
        assert!(reweight(&mut g, [None, None, None], &w).is_err());
    }
}
