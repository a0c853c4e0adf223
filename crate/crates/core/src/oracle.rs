//! Loop-level reference implementations used as ground truth.
//!
//! Everything here runs in `f64` with explicit index loops and shares no
//! compute path with [`crate::mixer`]. Inputs are small by contract; each
//! entry point refuses instances above its size guard.

use crate::config::{MixGenKind, ModelConfig};
use crate::error::{Error, Result};
use crate::mixer::weights::{
    BlockWeights, DynaMixerOpWeights, LayerNorm, Linear, MixGenerator, ModelWeights, ReweightWeights,
};
use crate::mixer::LAYER_NORM_EPS;
use crate::tensor::Tensor;

/// Largest `N·D` accepted by [`naive_dynamixer_op`].
pub const OP_GUARD: usize = 256;
/// Largest `H·W·D` accepted by the block and model oracles.
pub const GRID_GUARD: usize = 4096;

/// Dense row-major `f64` matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Mat::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// View a 2-D tensor (or a 1-D tensor as a single row).
    pub fn from_tensor(t: &Tensor) -> Self {
        let (rows, cols) = match *t.shape() {
            [n] => (1, n),
            [r, c] => (r, c),
            ref s => (s[..s.len() - 1].iter().product(), s[s.len() - 1]),
        };
        Mat {
            rows,
            cols,
            data: t.data().iter().map(|&v| v as f64).collect(),
        }
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }
}

fn softmax(row: &[f64]) -> Vec<f64> {
    let mut max = f64::NEG_INFINITY;
    for &v in row {
        if v > max {
            max = v;
        }
    }
    let mut out = vec![0.0; row.len()];
    let mut sum = 0.0;
    for j in 0..row.len() {
        out[j] = (row[j] - max).exp();
        sum += out[j];
    }
    for v in &mut out {
        *v /= sum;
    }
    out
}

fn gelu(x: f64) -> f64 {
    x * 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

/// Generator weights in oracle form.
#[derive(Clone, Debug, PartialEq)]
pub enum OracleGenerator {
    Dynamic { reduce: Vec<Mat>, gen: Mat },
    DensePerToken { dense: Vec<Mat> },
    StaticRandom { mix: Mat },
}

#[derive(Clone, Debug, PartialEq)]
pub struct OracleOpWeights {
    pub generator: OracleGenerator,
    pub out_fuse: Mat,
}

impl OracleOpWeights {
    pub fn from_weights(w: &DynaMixerOpWeights<Tensor>) -> Self {
        let generator = match &w.generator {
            MixGenerator::Dynamic { reduce, gen } => OracleGenerator::Dynamic {
                reduce: reduce.iter().map(|r| Mat::from_tensor(&r.0)).collect(),
                gen: Mat::from_tensor(&gen.0),
            },
            MixGenerator::DensePerToken { dense } => OracleGenerator::DensePerToken {
                dense: dense.iter().map(|m| Mat::from_tensor(&m.0)).collect(),
            },
            MixGenerator::StaticRandom { mix } => OracleGenerator::StaticRandom {
                mix: Mat::from_tensor(&mix.0),
            },
        };
        OracleOpWeights {
            generator,
            out_fuse: Mat::from_tensor(&w.out_fuse.0),
        }
    }

    pub fn kind(&self) -> MixGenKind {
        match self.generator {
            OracleGenerator::Dynamic { .. } => MixGenKind::Dynamic,
            OracleGenerator::DensePerToken { .. } => MixGenKind::DensePerToken,
            OracleGenerator::StaticRandom { .. } => MixGenKind::StaticRandom,
        }
    }
}

/// One DynaMixer operation applied to `N` tokens of width `D`.
#[derive(Clone, Debug, PartialEq)]
pub struct OracleInstance {
    pub segments: usize,
    pub x: Mat,
    pub weights: OracleOpWeights,
}

impl OracleInstance {
    pub fn tokens(&self) -> usize {
        self.x.rows
    }

    pub fn width(&self) -> usize {
        self.x.cols
    }

    fn check(&self) -> Result<()> {
        let (n, d, s) = (self.tokens(), self.width(), self.segments);
        if n * d > OP_GUARD {
            return Err(Error::Contract(format!(
                "oracle instance too large: N·D = {} > {OP_GUARD}",
                n * d
            )));
        }
        if s == 0 || d % s != 0 {
            return Err(Error::config(format!("D = {d} not divisible by S = {s}")));
        }
        Ok(())
    }
}

/// The `S` mixing matrices `P⁽ˢ⁾`, each `N×N`.
pub fn naive_mixing_matrices(inst: &OracleInstance) -> Result<Vec<Mat>> {
    inst.check()?;
    let (n, dm, s_count) = (inst.tokens(), inst.width(), inst.segments);
    let x = &inst.x;
    let mut out = Vec::with_capacity(s_count);
    for s in 0..s_count {
        let mut p = Mat::zeros(n, n);
        match &inst.weights.generator {
            OracleGenerator::Dynamic { reduce, gen } => {
                let wd = &reduce[s];
                let d = wd.cols;
                // X̂ = X · W_d, over all D input channels
                let mut xhat = Mat::zeros(n, d);
                for t in 0..n {
                    for r in 0..d {
                        let mut acc = 0.0;
                        for c in 0..dm {
                            acc += x.at(t, c) * wd.at(c, r);
                        }
                        xhat.set(t, r, acc);
                    }
                }
                // row i: flat(X̂) · W⁽ⁱ⁾, W⁽ⁱ⁾ = gen[:, i·N .. (i+1)·N]
                for i in 0..n {
                    let mut logits = vec![0.0; n];
                    for (j, logit) in logits.iter_mut().enumerate() {
                        let mut acc = 0.0;
                        for t in 0..n {
                            for r in 0..d {
                                acc += xhat.at(t, r) * gen.at(t * d + r, i * n + j);
                            }
                        }
                        *logit = acc;
                    }
                    for (j, v) in softmax(&logits).into_iter().enumerate() {
                        p.set(i, j, v);
                    }
                }
            }
            OracleGenerator::DensePerToken { dense } => {
                let m = &dense[s];
                for i in 0..n {
                    let mut logits = vec![0.0; n];
                    for (j, logit) in logits.iter_mut().enumerate() {
                        let mut acc = 0.0;
                        for c in 0..dm {
                            acc += x.at(i, c) * m.at(c, j);
                        }
                        *logit = acc;
                    }
                    for (j, v) in softmax(&logits).into_iter().enumerate() {
                        p.set(i, j, v);
                    }
                }
            }
            OracleGenerator::StaticRandom { mix } => p = mix.clone(),
        }
        out.push(p);
    }
    Ok(out)
}

/// `Y = [P⁽⁰⁾X⁽⁰⁾, …, P⁽ˢ⁻¹⁾X⁽ˢ⁻¹⁾] · W_o`.
pub fn naive_dynamixer_op(inst: &OracleInstance) -> Result<Mat> {
    let ps = naive_mixing_matrices(inst)?;
    let (n, dm) = (inst.tokens(), inst.width());
    let width = dm / inst.segments;
    let mut concat = Mat::zeros(n, dm);
    for (s, p) in ps.iter().enumerate() {
        for i in 0..n {
            for c in 0..width {
                let mut acc = 0.0;
                for j in 0..n {
                    acc += p.at(i, j) * inst.x.at(j, s * width + c);
                }
                concat.set(i, s * width + c, acc);
            }
        }
    }
    let wo = &inst.weights.out_fuse;
    let mut y = Mat::zeros(n, dm);
    for i in 0..n {
        for c in 0..dm {
            let mut acc = 0.0;
            for k in 0..dm {
                acc += concat.at(i, k) * wo.at(k, c);
            }
            y.set(i, c, acc);
        }
    }
    Ok(y)
}

/// Un-reduced generator: `P_i = softmax(flat(X)ᵀ W⁽ⁱ⁾)` with each
/// `W⁽ⁱ⁾` of shape `(N·D)×N` and `flat` token-major.
pub fn naive_full_matrix_op(x: &Mat, w_full: &[Mat]) -> Result<Mat> {
    let (n, d) = (x.rows, x.cols);
    if n * d > OP_GUARD {
        return Err(Error::Contract(format!(
            "oracle instance too large: N·D = {} > {OP_GUARD}",
            n * d
        )));
    }
    if w_full.len() != n || w_full.iter().any(|w| w.rows != n * d || w.cols != n) {
        return Err(Error::Contract(format!(
            "expected {n} generator maps of shape {}x{n}",
            n * d
        )));
    }
    let mut p = Mat::zeros(n, n);
    for (i, w) in w_full.iter().enumerate() {
        let mut logits = vec![0.0; n];
        for (j, logit) in logits.iter_mut().enumerate() {
            let mut acc = 0.0;
            for t in 0..n {
                for c in 0..d {
                    acc += x.at(t, c) * w.at(t * d + c, j);
                }
            }
            *logit = acc;
        }
        for (j, v) in softmax(&logits).into_iter().enumerate() {
            p.set(i, j, v);
        }
    }
    Ok(p)
}

/// Parameters of one DynaMixer operation: `S·D·d + N³·d + D²`.
pub fn param_formula(tokens: u64, width: u64, reduced: u64, segments: u64) -> Result<u64> {
    if tokens == 0 || width == 0 || reduced == 0 || segments == 0 {
        return Err(Error::config("param_formula arguments must be >= 1"));
    }
    if !width.is_multiple_of(segments) {
        return Err(Error::config(format!("D = {width} not divisible by S = {segments}")));
    }
    Ok(segments * width * reduced + tokens.pow(3) * reduced + width * width)
}

/// `[H][W][D]` grid of f64 values.
pub type Grid = Vec<Vec<Vec<f64>>>;

pub fn grid_from_tensor(t: &Tensor) -> Result<Grid> {
    let [h, w, d] = match *t.shape() {
        [h, w, d] => [h, w, d],
        [1, h, w, d] => [h, w, d],
        ref s => return Err(Error::shape("grid_from_tensor", s, &[0, 0, 0])),
    };
    let v = t.data();
    Ok((0..h)
        .map(|i| {
            (0..w)
                .map(|j| (0..d).map(|c| v[(i * w + j) * d + c] as f64).collect())
                .collect()
        })
        .collect())
}

fn apply_op(tokens: &[Vec<f64>], w: &OracleOpWeights, segments: usize) -> Result<Vec<Vec<f64>>> {
    let n = tokens.len();
    let d = tokens[0].len();
    let x = Mat {
        rows: n,
        cols: d,
        data: tokens.iter().flatten().copied().collect(),
    };
    let y = naive_dynamixer_op(&OracleInstance {
        segments,
        x,
        weights: w.clone(),
    })?;
    Ok((0..n).map(|i| y.data[i * d..(i + 1) * d].to_vec()).collect())
}

fn apply_linear(v: &[f64], weight: &Mat, bias: Option<&Mat>) -> Vec<f64> {
    let mut out = vec![0.0; weight.cols];
    for (j, o) in out.iter_mut().enumerate() {
        let mut acc = bias.map_or(0.0, |b| b.data[j]);
        for (k, &x) in v.iter().enumerate() {
            acc += x * weight.at(k, j);
        }
        *o = acc;
    }
    out
}

/// Oracle form of a block's weights.
#[derive(Clone, Debug)]
pub struct OracleBlock {
    pub row_op: Option<OracleOpWeights>,
    pub col_op: Option<OracleOpWeights>,
    pub proj_c: Option<(Mat, Mat)>,
    pub reweight: Option<(Mat, Mat)>,
    pub proj_o: (Mat, Mat),
}

fn linear_pair(l: &Linear<Tensor>) -> (Mat, Mat) {
    (Mat::from_tensor(&l.weight.0), Mat::from_tensor(&l.bias.0))
}

impl OracleBlock {
    /// With `share_ops`, the row operation is also used for columns.
    pub fn from_weights(w: &BlockWeights<Tensor>, share_ops: bool) -> Self {
        let row_op = w.row_op.as_ref().map(OracleOpWeights::from_weights);
        let col_op = if share_ops {
            row_op.clone()
        } else {
            w.col_op.as_ref().map(OracleOpWeights::from_weights)
        };
        OracleBlock {
            row_op,
            col_op,
            proj_c: w.proj_c.as_ref().map(linear_pair),
            reweight: w
                .reweight
                .as_ref()
                .map(|r: &ReweightWeights<Tensor>| (Mat::from_tensor(&r.w1.0), Mat::from_tensor(&r.w2.0))),
            proj_o: linear_pair(&w.proj_o),
        }
    }
}

/// Explicit per-channel weighted sum of the present branches.
pub fn naive_reweight(branches: [Option<&Grid>; 3], w1: &Mat, w2: &Mat) -> Grid {
    let first = branches.iter().flatten().next().expect("a branch is present");
    let (h, w, d) = (first.len(), first[0].len(), first[0][0].len());
    let mut pooled = vec![0.0; d];
    for i in 0..h {
        for j in 0..w {
            for c in 0..d {
                for b in branches.iter().flatten() {
                    pooled[c] += b[i][j][c];
                }
            }
        }
    }
    for v in &mut pooled {
        *v /= (h * w) as f64;
    }
    let hidden: Vec<f64> = apply_linear(&pooled, w1, None).into_iter().map(gelu).collect();
    let logits = apply_linear(&hidden, w2, None);
    // alpha[k][c] = softmax over k of logits[k·D + c]
    let mut alpha = vec![vec![0.0; d]; 3];
    for c in 0..d {
        let a = softmax(&[logits[c], logits[d + c], logits[2 * d + c]]);
        for k in 0..3 {
            alpha[k][c] = a[k];
        }
    }
    let mut out = vec![vec![vec![0.0; d]; w]; h];
    for (k, branch) in branches.iter().enumerate() {
        let Some(b) = branch else { continue };
        for i in 0..h {
            for j in 0..w {
                for c in 0..d {
                    out[i][j][c] += alpha[k][c] * b[i][j][c];
                }
            }
        }
    }
    out
}

/// Literal transcription of the block: loop over rows, loop over columns,
/// channel projection, fuse, output projection.
pub fn naive_block(x: &Grid, w: &OracleBlock, segments: usize) -> Result<Grid> {
    let (h, wd, d) = (x.len(), x[0].len(), x[0][0].len());
    if h * wd * d > GRID_GUARD {
        return Err(Error::Contract(format!(
            "oracle grid too large: {} > {GRID_GUARD}",
            h * wd * d
        )));
    }
    let y_h = match &w.row_op {
        Some(op) => {
            let mut y = vec![vec![vec![0.0; d]; wd]; h];
            for r in 0..h {
                y[r] = apply_op(&x[r], op, segments)?;
            }
            Some(y)
        }
        None => None,
    };
    let y_w = match &w.col_op {
        Some(op) => {
            let mut y = vec![vec![vec![0.0; d]; wd]; h];
            for c in 0..wd {
                let column: Vec<Vec<f64>> = (0..h).map(|r| x[r][c].clone()).collect();
                let mixed = apply_op(&column, op, segments)?;
                for r in 0..h {
                    y[r][c] = mixed[r].clone();
                }
            }
            Some(y)
        }
        None => None,
    };
    let y_c = w.proj_c.as_ref().map(|(wt, b)| {
        x.iter()
            .map(|row| row.iter().map(|t| apply_linear(t, wt, Some(b))).collect())
            .collect::<Grid>()
    });
    let branches = [y_h.as_ref(), y_w.as_ref(), y_c.as_ref()];
    if branches.iter().all(Option::is_none) {
        return Err(Error::config("all three mixing branches are disabled"));
    }
    let fused = match &w.reweight {
        Some((w1, w2)) => naive_reweight(branches, w1, w2),
        None => {
            let mut acc = vec![vec![vec![0.0; d]; wd]; h];
            for b in branches.iter().flatten() {
                for i in 0..h {
                    for j in 0..wd {
                        for c in 0..d {
                            acc[i][j][c] += b[i][j][c];
                        }
                    }
                }
            }
            acc
        }
    };
    let (wo, bo) = &w.proj_o;
    Ok(fused
        .iter()
        .map(|row| row.iter().map(|t| apply_linear(t, wo, Some(bo))).collect())
        .collect())
}

fn naive_layer_norm(v: &[f64], w: &LayerNorm<Tensor>) -> Vec<f64> {
    let d = v.len() as f64;
    let mean = v.iter().sum::<f64>() / d;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / d;
    let denom = (var + LAYER_NORM_EPS as f64).sqrt();
    let (g, b) = (w.gain.0.data(), w.bias.0.data());
    v.iter()
        .enumerate()
        .map(|(j, x)| (x - mean) / denom * g[j] as f64 + b[j] as f64)
        .collect()
}

fn map_tokens(x: &Grid, f: impl Fn(&[f64]) -> Vec<f64>) -> Grid {
    x.iter().map(|row| row.iter().map(|t| f(t)).collect()).collect()
}

/// Eval-mode logits of one image `[C, H, W]` (or `[1, C, H, W]`).
#[allow(clippy::needless_range_loop)]
pub fn naive_model_forward(image: &Tensor, weights: &ModelWeights<Tensor>, config: &ModelConfig) -> Result<Vec<f64>> {
    let (c, side) = (config.in_channels, config.image_size);
    if image.len() != c * side * side {
        return Err(Error::config("image does not match the configured size"));
    }
    let px = |ch: usize, y: usize, x: usize| image.data()[(ch * side + y) * side + x] as f64;

    // stage-0 patch embedding: patch vector index (dy·p + dx)·C + ch
    let p0 = config.stages[0].patch_size;
    let g0 = side / p0;
    let (ew, eb) = linear_pair(&weights.stages[0].embed);
    let mut grid: Grid = vec![vec![Vec::new(); g0]; g0];
    for gy in 0..g0 {
        for gx in 0..g0 {
            let mut v = Vec::with_capacity(p0 * p0 * c);
            for dy in 0..p0 {
                for dx in 0..p0 {
                    for ch in 0..c {
                        v.push(px(ch, gy * p0 + dy, gx * p0 + dx));
                    }
                }
            }
            grid[gy][gx] = apply_linear(&v, &ew, Some(&eb));
        }
    }

    let share = config.ablation.share_row_col_op;
    for (si, stage) in config.stages.iter().enumerate() {
        if si > 0 {
            // merge p×p token neighborhoods, vector index (dy·p + dx)·D + ch
            let p = stage.patch_size;
            let side = grid.len() / p;
            let (ew, eb) = linear_pair(&weights.stages[si].embed);
            let mut merged: Grid = vec![vec![Vec::new(); side]; side];
            for gy in 0..side {
                for gx in 0..side {
                    let mut v = Vec::new();
                    for dy in 0..p {
                        for dx in 0..p {
                            v.extend_from_slice(&grid[gy * p + dy][gx * p + dx]);
                        }
                    }
                    merged[gy][gx] = apply_linear(&v, &ew, Some(&eb));
                }
            }
            grid = merged;
        }
        for lw in &weights.stages[si].layers {
            let block = OracleBlock::from_weights(&lw.block, share);
            let normed = map_tokens(&grid, |t| naive_layer_norm(t, &lw.norm1));
            let mixed = naive_block(&normed, &block, stage.segments)?;
            for (i, row) in grid.iter_mut().enumerate() {
                for (j, t) in row.iter_mut().enumerate() {
                    for (ch, v) in t.iter_mut().enumerate() {
                        *v += mixed[i][j][ch];
                    }
                }
            }
            let (w1, b1) = linear_pair(&lw.mlp.fc1);
            let (w2, b2) = linear_pair(&lw.mlp.fc2);
            let mlp = map_tokens(&grid, |t| {
                let h: Vec<f64> = apply_linear(&naive_layer_norm(t, &lw.norm2), &w1, Some(&b1))
                    .into_iter()
                    .map(gelu)
                    .collect();
                apply_linear(&h, &w2, Some(&b2))
            });
            for (i, row) in grid.iter_mut().enumerate() {
                for (j, t) in row.iter_mut().enumerate() {
                    for (ch, v) in t.iter_mut().enumerate() {
                        *v += mlp[i][j][ch];
                    }
                }
            }
        }
    }

    let normed = map_tokens(&grid, |t| naive_layer_norm(t, &weights.final_norm));
    let d = normed[0][0].len();
    let count = (normed.len() * normed[0].len()) as f64;
    let mut pooled = vec![0.0; d];
    for row in &normed {
        for t in row {
            for (ch, v) in t.iter().enumerate() {
                pooled[ch] += v;
            }
        }
    }
    pooled.iter_mut().for_each(|v| *v /= count);
    let (hw, hb) = linear_pair(&weights.head);
    Ok(apply_linear(&pooled, &hw, Some(&hb)))
}
