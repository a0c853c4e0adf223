use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::block::{dynamixer_block, linear};
use super::op::generate_mixing_matrices;
use super::weights::{build_model, model_layout, LayerNorm, LayerWeights, ModelWeights, Params};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::tensor::{grad_check_coords, CoordCheck, GradCheckReport, Graph, Real, Tensor, Var};

pub const LAYER_NORM_EPS: Real = 1e-6;

/// Images per independent graph in [`Model::predict_parallel`].
pub const PREDICT_CHUNK: usize = 8;

/// Forward-pass mode. Drop-path only fires in training mode.
pub enum Mode<'r> {
    Eval,
    Train { rng: &'r mut dyn RngCore },
}

impl Mode<'_> {
    pub fn is_train(&self) -> bool {
        matches!(self, Mode::Train { .. })
    }
}

pub(crate) fn layer_norm(g: &mut Graph, x: &Var, w: &LayerNorm<Var>) -> Result<Var> {
    g.layer_norm(x, &w.gain.0, &w.bias.0, LAYER_NORM_EPS)
}

/// Zero the whole residual branch per sample with probability `rate`,
/// rescaling survivors by `1/(1-rate)`. Identity in eval mode.
pub fn drop_path(g: &mut Graph, branch: &Var, rate: f64, mode: &mut Mode<'_>) -> Result<Var> {
    let Mode::Train { rng } = mode else {
        return Ok(branch.clone());
    };
    if rate <= 0.0 {
        return Ok(branch.clone());
    }
    let batch = branch.shape()[0];
    let keep = 1.0 - rate;
    let mask: Vec<Real> = (0..batch)
        .map(|_| {
            if keep > 0.0 && rng.gen::<f64>() < keep {
                (1.0 / keep) as Real
            } else {
                0.0
            }
        })
        .collect();
    let mut mask_shape = vec![1; branch.shape().len()];
    mask_shape[0] = batch;
    let mask = g.constant(Tensor::new(&mask_shape, mask)?);
    g.mul(branch, &mask)
}

/// Pre-norm residual mixer layer: token mixing block, then channel MLP.
pub fn mixer_layer(
    g: &mut Graph,
    x: &Var,
    w: &LayerWeights<Var>,
    segments: usize,
    share_ops: bool,
    drop_rate: f64,
    mode: &mut Mode<'_>,
) -> Result<Var> {
    let h = layer_norm(g, x, &w.norm1)?;
    let h = dynamixer_block(g, &h, &w.block, segments, share_ops)?;
    let h = drop_path(g, &h, drop_rate, mode)?;
    let x = g.add(x, &h)?;

    let h = layer_norm(g, &x, &w.norm2)?;
    let h = linear(g, &h, &w.mlp.fc1)?;
    let h = g.gelu(&h)?;
    let h = linear(g, &h, &w.mlp.fc2)?;
    let h = drop_path(g, &h, drop_rate, mode)?;
    g.add(&x, &h)
}

/// `[B, H, W, C] -> [B, H/p, W/p, p·p·C]`, patch vectors ordered
/// `(dy, dx, c)` with `c` fastest.
pub fn patchify(g: &mut Graph, x: &Var, patch: usize) -> Result<Var> {
    let [b, h, w, c] = match *x.shape() {
        [b, h, w, c] => [b, h, w, c],
        ref s => return Err(Error::shape("patchify", s, &[0, 0, 0, 0])),
    };
    if h % patch != 0 || w % patch != 0 {
        return Err(Error::config(format!("grid {h}x{w} not divisible by patch {patch}")));
    }
    let (gh, gw) = (h / patch, w / patch);
    let t = g.reshape(x, &[b, gh, patch, gw, patch, c])?;
    let t = g.permute(&t, &[0, 1, 3, 2, 4, 5])?;
    g.reshape(&t, &[b, gh, gw, patch * patch * c])
}

/// Token grid entering stage `stage` (after its patch embedding).
pub fn embed_stage(
    g: &mut Graph,
    x: &Var,
    weights: &ModelWeights<Var>,
    config: &ModelConfig,
    stage: usize,
) -> Result<Var> {
    let patches = patchify(g, x, config.stages[stage].patch_size)?;
    linear(g, &patches, &weights.stages[stage].embed)
}

fn check_images(images: &Var, config: &ModelConfig) -> Result<usize> {
    let s = images.shape();
    let expected = [config.in_channels, config.image_size, config.image_size];
    if s.len() != 4 || s[1..] != expected {
        return Err(Error::config(format!(
            "input of shape {s:?} does not match the configured [B, {}, {}, {}]",
            expected[0], expected[1], expected[2]
        )));
    }
    Ok(s[0])
}

/// Run the mixer layers of every stage, calling `visit(global_layer, x)`
/// with the input of each layer.
pub(crate) fn forward_features(
    g: &mut Graph,
    images: &Var,
    weights: &ModelWeights<Var>,
    config: &ModelConfig,
    mode: &mut Mode<'_>,
    mut visit: impl FnMut(&mut Graph, usize, &Var) -> Result<bool>,
) -> Result<Option<Var>> {
    check_images(images, config)?;
    let share = config.ablation.share_row_col_op;
    let mut x = g.permute(images, &[0, 2, 3, 1])?;
    let mut layer = 0;
    for (si, stage) in config.stages.iter().enumerate() {
        x = embed_stage(g, &x, weights, config, si)?;
        for lw in &weights.stages[si].layers {
            if !visit(g, layer, &x)? {
                return Ok(None);
            }
            x = mixer_layer(g, &x, lw, stage.segments, share, config.drop_path_rate(layer), mode)?;
            layer += 1;
        }
    }
    Ok(Some(x))
}

/// Which token sequences a mixing operation runs along.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    /// Each grid row, `W` tokens.
    Row,
    /// Each grid column, `H` tokens.
    Col,
}

/// The mixing matrix `P⁽ˢ⁾` used by layer `layer` (counted across stages)
/// for grid line `line` of the first image in `images`, shape `[N, N]`.
pub fn mixing_matrix(
    model: &Model,
    images: &Tensor,
    layer: usize,
    direction: Direction,
    segment: usize,
    line: usize,
) -> Result<Tensor> {
    let config = &model.config;
    let depth = config.total_depth();
    if layer >= depth {
        return Err(Error::config(format!("layer {layer} out of range (model has {depth})")));
    }
    let (stage, local) = {
        let mut rest = layer;
        let mut si = 0;
        while rest >= config.stages[si].depth {
            rest -= config.stages[si].depth;
            si += 1;
        }
        (si, rest)
    };
    let segments = config.stages[stage].segments;
    if segment >= segments {
        return Err(Error::config(format!(
            "segment {segment} out of range (layer {layer} has {segments})"
        )));
    }
    let side = config.grid(stage);
    if line >= side {
        return Err(Error::config(format!("line {line} out of range (grid side {side})")));
    }
    let block = &model.weights.stages[stage].layers[local].block;
    let op = match direction {
        Direction::Row => block.row_op.as_ref(),
        Direction::Col if config.ablation.share_row_col_op => block.row_op.as_ref(),
        Direction::Col => block.col_op.as_ref(),
    }
    .ok_or_else(|| Error::config(format!("layer {layer} has no {direction:?} mixing branch")))?;

    let mut g = Graph::no_grad();
    let w = model.weights.bind_frozen(&g);
    let op = op.map_params("", &mut |_, t: &Tensor| g.constant(t.clone()));
    let x = g.constant(images.clone());
    let mut found = None;
    forward_features(&mut g, &x, &w, config, &mut Mode::Eval, |g, l, x| {
        if l != layer {
            return Ok(true);
        }
        let lw = &w.stages[stage].layers[local];
        let h = layer_norm(g, x, &lw.norm1)?;
        let d = h.shape()[3];
        let h = match direction {
            Direction::Row => h,
            Direction::Col => g.permute(&h, &[0, 2, 1, 3])?,
        };
        let lines = g.reshape(&h, &[h.shape()[0] * side, side, d])?;
        let p = generate_mixing_matrices(g, &lines, &op, segments)?;
        let m = g.narrow(&p, 0, line * segments + segment, 1)?;
        found = Some(g.reshape(&m, &[side, side])?.to_tensor());
        Ok(false)
    })?;
    Ok(found.expect("target layer is visited"))
}

/// Images `[B, C, H, W]` to logits `[B, num_classes]`.
pub fn model_forward(
    g: &mut Graph,
    images: &Var,
    weights: &ModelWeights<Var>,
    config: &ModelConfig,
    mode: &mut Mode<'_>,
) -> Result<Var> {
    let x = forward_features(g, images, weights, config, mode, |_, _, _| Ok(true))?.expect("visitor never stops early");
    let x = layer_norm(g, &x, &weights.final_norm)?;
    let pooled = g.mean_axes(&x, &[1, 2])?;
    linear(g, &pooled, &weights.head)
}

/// A configuration together with concrete weights.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub weights: ModelWeights<Tensor>,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let weights = build_model(&config, seed)?;
        Ok(Model { config, weights })
    }

    pub fn num_params(&self) -> usize {
        self.weights.num_params()
    }

    /// Eval-mode logits without recording a tape.
    pub fn predict(&self, images: &Tensor) -> Result<Tensor> {
        let mut g = Graph::no_grad();
        let w = self.weights.bind_frozen(&g);
        let x = g.constant(images.clone());
        Ok(model_forward(&mut g, &x, &w, &self.config, &mut Mode::Eval)?.to_tensor())
    }

    /// Eval-mode logits computed over fixed-size chunks of the batch on the
    /// rayon pool. Chunking does not depend on the thread count, so results
    /// are identical for any pool size.
    pub fn predict_parallel(&self, images: &Tensor) -> Result<Tensor> {
        let batch = *images.shape().first().unwrap_or(&0);
        let per_image: usize = images.shape()[1..].iter().product();
        let chunks: Vec<Result<Tensor>> = images
            .data()
            .par_chunks(PREDICT_CHUNK * per_image)
            .map(|chunk| {
                let mut shape = images.shape().to_vec();
                shape[0] = chunk.len() / per_image;
                self.predict(&Tensor::new(&shape, chunk.to_vec())?)
            })
            .collect();
        let mut data = Vec::with_capacity(batch * self.config.num_classes);
        for c in chunks {
            data.extend_from_slice(c?.data());
        }
        Tensor::new(&[batch, self.config.num_classes], data)
    }

    /// Mean cross-entropy on a batch and its gradient for every parameter.
    pub fn loss_and_grads(
        &self,
        images: &Tensor,
        labels: &[usize],
        smoothing: Real,
        mode: &mut Mode<'_>,
    ) -> Result<(Real, ModelWeights<Tensor>)> {
        let mut g = Graph::new();
        let w = self.weights.bind(&mut g);
        let x = g.constant(images.clone());
        let logits = model_forward(&mut g, &x, &w, &self.config, mode)?;
        let loss = g.cross_entropy(&logits, labels, smoothing)?;
        let grads = g.backward(&loss)?;
        let loss = loss.value().item()?;
        Ok((loss, w.map(|_, v| grads.get_or_zeros(v))))
    }
}

/// End-to-end gradient check of the cross-entropy loss with respect to every
/// parameter, on `batch` random images with labels `i mod classes`.
///
/// Weights, inputs and the sampled coordinates all derive from `seed`.
pub fn model_grad_check(
    config: &ModelConfig,
    seed: u64,
    eps: Real,
    samples: usize,
    batch: usize,
) -> Result<GradCheckReport> {
    GradCheckReport::from_coords(&model_grad_check_coords(config, seed, eps, samples, batch)?)
}

/// The per-coordinate comparisons behind [`model_grad_check`].
pub fn model_grad_check_coords(
    config: &ModelConfig,
    seed: u64,
    eps: Real,
    samples: usize,
    batch: usize,
) -> Result<Vec<CoordCheck>> {
    let model = Model::new(config.clone(), seed)?;
    let layout = model_layout(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let images = Tensor::randn(
        &[batch, config.in_channels, config.image_size, config.image_size],
        1.0,
        &mut rng,
    );
    let labels: Vec<usize> = (0..batch).map(|i| i % config.num_classes).collect();
    let params: Vec<Tensor> = model.weights.leaves().into_iter().cloned().collect();
    let f = |g: &mut Graph, vars: &[Var]| {
        let mut it = vars.iter();
        let w = layout.map(|_, _| it.next().expect("one var per parameter").clone());
        let x = g.constant(images.clone());
        let logits = model_forward(g, &x, &w, config, &mut Mode::Eval)?;
        g.cross_entropy(&logits, &labels, 0.0)
    };
    grad_check_coords(f, &params, eps, samples, &mut rng)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn patchify_orders_patch_vectors() {
        let mut g = Graph::no_grad();
        let data: Vec<Real> = (0..16).map(|v| v as Real).collect();
        let x = g.constant(Tensor::new(&[1, 4, 4, 1], data).unwrap());
        let p = patchify(&mut g, &x, 2).unwrap();
        assert_eq!(p.shape(), &[1, 2, 2, 4]);
        assert_eq!(&p.value().data()[..4], &[0.0, 1.0, 4.0, 5.0]);
        assert!(patchify(&mut g, &x, 3).is_err());
    }

    #[test]
    fn tiny_logits_have_expected_shape() {
        let model = Model::new(ModelConfig::preset("tiny").unwrap(), 0).unwrap();
        let images = Tensor::zeros(&[2, 3, 32, 32]);
        assert_eq!(model.predict(&images).unwrap().shape(), &[2, 10]);
        assert!(model.predict(&Tensor::zeros(&[2, 3, 16, 16])).is_err());
    }

    #[test]
    fn parallel_prediction_matches_serial() {
        let model = Model::new(ModelConfig::preset("tiny").unwrap(), 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let images = Tensor::randn(&[PREDICT_CHUNK + 3, 3, 32, 32], 1.0, &mut rng);
        let parallel = model.predict_parallel(&images).unwrap();
        let per = 3 * 32 * 32;
        for b in [0, PREDICT_CHUNK + 2] {
            let one = Tensor::new(&[1, 3, 32, 32], images.data()[b * per..(b + 1) * per].to_vec()).unwrap();
            let serial = model.predict(&one).unwrap();
            let row = &parallel.data()[b * 10..(b + 1) * 10];
            let diff = row
                .iter()
                .zip(serial.data())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, Real::max);
            assert!(diff < 1e-12);
        }
    }

    #[test]
    fn mixing_matrix_bounds_are_checked() {
        let model = Model::new(ModelConfig::preset("tiny").unwrap(), 0).unwrap();
        let images = Tensor::zeros(&[1, 3, 32, 32]);
        let p = mixing_matrix(&model, &images, 1, Direction::Col, 1, 1).unwrap();
        assert_eq!(p.shape(), &[2, 2]);
        for (layer, segment, line) in [(2, 0, 0), (0, 2, 0), (0, 0, 4)] {
            assert!(matches!(
                mixing_matrix(&model, &images, layer, Direction::Row, segment, line),
                Err(Error::Config(_))
            ));
        }
    }
}
