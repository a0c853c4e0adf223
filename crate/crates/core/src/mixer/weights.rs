//! Parameter containers for the whole model family.
//!
//! Every container is generic over its leaf type so the same tree can hold
//! initializer specs, concrete tensors, graph handles, gradients, or
//! optimizer moments. Parameter names are dotted paths such as
//! `stages.1.layers.0.block.row_op.gen`; traversal order is declaration
//! order and is stable across builds.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::config::{MixGenKind, ModelConfig};
use crate::error::Result;
use crate::tensor::{Graph, Real, Tensor, Var};

/// Standard deviation of the truncated-normal initializer.
pub const INIT_STD: f64 = 0.02;

pub trait Params<P>: Sized {
    type Mapped<Q>;

    fn map_params<'a, Q>(&'a self, path: &str, f: &mut impl FnMut(&str, &'a P) -> Q) -> Self::Mapped<Q>;

    fn for_each_param_mut(&mut self, path: &str, f: &mut impl FnMut(&str, &mut P));

    fn for_each_param<'a>(&'a self, path: &str, f: &mut impl FnMut(&str, &'a P)) {
        self.map_params(path, &mut |name, p| f(name, p));
    }
}

fn join(path: &str, name: &str) -> String {
    if path.is_empty() {
        name.to_string()
    } else {
        format!("{path}.{name}")
    }
}

impl<P, T: Params<P>> Params<P> for Vec<T> {
    type Mapped<Q> = Vec<T::Mapped<Q>>;

    fn map_params<'a, Q>(&'a self, path: &str, f: &mut impl FnMut(&str, &'a P) -> Q) -> Self::Mapped<Q> {
        self.iter()
            .enumerate()
            .map(|(i, t)| t.map_params(&join(path, &i.to_string()), f))
            .collect()
    }

    fn for_each_param_mut(&mut self, path: &str, f: &mut impl FnMut(&str, &mut P)) {
        for (i, t) in self.iter_mut().enumerate() {
            t.for_each_param_mut(&join(path, &i.to_string()), f);
        }
    }
}

impl<P, T: Params<P>> Params<P> for Option<T> {
    type Mapped<Q> = Option<T::Mapped<Q>>;

    fn map_params<'a, Q>(&'a self, path: &str, f: &mut impl FnMut(&str, &'a P) -> Q) -> Self::Mapped<Q> {
        self.as_ref().map(|t| t.map_params(path, f))
    }

    fn for_each_param_mut(&mut self, path: &str, f: &mut impl FnMut(&str, &mut P)) {
        if let Some(t) = self {
            t.for_each_param_mut(path, f);
        }
    }
}

/// A single named leaf.
#[derive(Clone, Debug, PartialEq)]
pub struct Leaf<P>(pub P);

impl<P> Params<P> for Leaf<P> {
    type Mapped<Q> = Leaf<Q>;

    fn map_params<'a, Q>(&'a self, path: &str, f: &mut impl FnMut(&str, &'a P) -> Q) -> Leaf<Q> {
        Leaf(f(path, &self.0))
    }

    fn for_each_param_mut(&mut self, path: &str, f: &mut impl FnMut(&str, &mut P)) {
        f(path, &mut self.0)
    }
}

/// Implements [`Params`] for a struct whose fields are all `Params` trees.
macro_rules! param_struct {
    ($ty:ident { $($field:ident),* $(,)? }) => {
        impl<P> Params<P> for $ty<P> {
            type Mapped<Q> = $ty<Q>;

            fn map_params<'a, Q>(&'a self, path: &str, f: &mut impl FnMut(&str, &'a P) -> Q) -> $ty<Q> {
                $ty {
                    $($field: self.$field.map_params(&join(path, stringify!($field)), f),)*
                }
            }

            fn for_each_param_mut(&mut self, path: &str, f: &mut impl FnMut(&str, &mut P)) {
                $(self.$field.for_each_param_mut(&join(path, stringify!($field)), f);)*
            }
        }
    };
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear<P> {
    pub weight: Leaf<P>,
    pub bias: Leaf<P>,
}
param_struct!(Linear { weight, bias });

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm<P> {
    pub gain: Leaf<P>,
    pub bias: Leaf<P>,
}
param_struct!(LayerNorm { gain, bias });

/// Weights of the mixing-matrix generator, one variant per [`MixGenKind`].
#[derive(Clone, Debug, PartialEq)]
pub enum MixGenerator<P> {
    /// `reduce[s]` is `D×d`; `gen` is `(N·d)×(N·N)` and shared by all segments.
    Dynamic { reduce: Vec<Leaf<P>>, gen: Leaf<P> },
    /// `dense[s]` is `D×N`.
    DensePerToken { dense: Vec<Leaf<P>> },
    /// `mix` is `N×N`, shared by all segments.
    StaticRandom { mix: Leaf<P> },
}

impl<P> Params<P> for MixGenerator<P> {
    type Mapped<Q> = MixGenerator<Q>;

    fn map_params<'a, Q>(&'a self, path: &str, f: &mut impl FnMut(&str, &'a P) -> Q) -> MixGenerator<Q> {
        match self {
            MixGenerator::Dynamic { reduce, gen } => MixGenerator::Dynamic {
                reduce: reduce.map_params(&join(path, "reduce"), f),
                gen: gen.map_params(&join(path, "gen"), f),
            },
            MixGenerator::DensePerToken { dense } => MixGenerator::DensePerToken {
                dense: dense.map_params(&join(path, "dense"), f),
            },
            MixGenerator::StaticRandom { mix } => MixGenerator::StaticRandom {
                mix: mix.map_params(&join(path, "mix"), f),
            },
        }
    }

    fn for_each_param_mut(&mut self, path: &str, f: &mut impl FnMut(&str, &mut P)) {
        match self {
            MixGenerator::Dynamic { reduce, gen } => {
                reduce.for_each_param_mut(&join(path, "reduce"), f);
                gen.for_each_param_mut(&join(path, "gen"), f);
            }
            MixGenerator::DensePerToken { dense } => dense.for_each_param_mut(&join(path, "dense"), f),
            MixGenerator::StaticRandom { mix } => mix.for_each_param_mut(&join(path, "mix"), f),
        }
    }
}

impl<P> MixGenerator<P> {
    pub fn kind(&self) -> MixGenKind {
        match self {
            MixGenerator::Dynamic { .. } => MixGenKind::Dynamic,
            MixGenerator::DensePerToken { .. } => MixGenKind::DensePerToken,
            MixGenerator::StaticRandom { .. } => MixGenKind::StaticRandom,
        }
    }
}

/// One DynaMixer operation: matrix generator plus the `D×D` output fusion.
/// No biases anywhere.
#[derive(Clone, Debug, PartialEq)]
pub struct DynaMixerOpWeights<P> {
    pub generator: MixGenerator<P>,
    pub out_fuse: Leaf<P>,
}

// The generator variant is not part of parameter names: `row_op.gen`,
// `row_op.reduce.0`, `row_op.out_fuse`.
impl<P> Params<P> for DynaMixerOpWeights<P> {
    type Mapped<Q> = DynaMixerOpWeights<Q>;

    fn map_params<'a, Q>(&'a self, path: &str, f: &mut impl FnMut(&str, &'a P) -> Q) -> DynaMixerOpWeights<Q> {
        DynaMixerOpWeights {
            generator: self.generator.map_params(path, f),
            out_fuse: self.out_fuse.map_params(&join(path, "out_fuse"), f),
        }
    }

    fn for_each_param_mut(&mut self, path: &str, f: &mut impl FnMut(&str, &mut P)) {
        self.generator.for_each_param_mut(path, f);
        self.out_fuse.for_each_param_mut(&join(path, "out_fuse"), f);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReweightWeights<P> {
    /// `D × D/4`
    pub w1: Leaf<P>,
    /// `D/4 × 3D`
    pub w2: Leaf<P>,
}
param_struct!(ReweightWeights { w1, w2 });

/// Disabled branches are `None`. With op sharing enabled `col_op` is `None`
/// and column mixing reuses `row_op`.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockWeights<P> {
    pub row_op: Option<DynaMixerOpWeights<P>>,
    pub col_op: Option<DynaMixerOpWeights<P>>,
    pub proj_c: Option<Linear<P>>,
    pub reweight: Option<ReweightWeights<P>>,
    pub proj_o: Linear<P>,
}
param_struct!(BlockWeights {
    row_op,
    col_op,
    proj_c,
    reweight,
    proj_o
});

#[derive(Clone, Debug, PartialEq)]
pub struct ChannelMlp<P> {
    pub fc1: Linear<P>,
    pub fc2: Linear<P>,
}
param_struct!(ChannelMlp { fc1, fc2 });

#[derive(Clone, Debug, PartialEq)]
pub struct LayerWeights<P> {
    pub norm1: LayerNorm<P>,
    pub block: BlockWeights<P>,
    pub norm2: LayerNorm<P>,
    pub mlp: ChannelMlp<P>,
}
param_struct!(LayerWeights {
    norm1,
    block,
    norm2,
    mlp
});

#[derive(Clone, Debug, PartialEq)]
pub struct StageWeights<P> {
    /// `patch²·C_in × D` patch embedding.
    pub embed: Linear<P>,
    pub layers: Vec<LayerWeights<P>>,
}
param_struct!(StageWeights { embed, layers });

#[derive(Clone, Debug, PartialEq)]
pub struct ModelWeights<P> {
    pub stages: Vec<StageWeights<P>>,
    pub final_norm: LayerNorm<P>,
    pub head: Linear<P>,
}
param_struct!(ModelWeights {
    stages,
    final_norm,
    head
});

impl<P> ModelWeights<P> {
    pub fn map<'a, Q>(&'a self, mut f: impl FnMut(&str, &'a P) -> Q) -> ModelWeights<Q> {
        self.map_params("", &mut f)
    }

    pub fn for_each<'a>(&'a self, mut f: impl FnMut(&str, &'a P)) {
        self.for_each_param("", &mut f)
    }

    pub fn for_each_mut(&mut self, mut f: impl FnMut(&str, &mut P)) {
        self.for_each_param_mut("", &mut f)
    }

    pub fn names(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.for_each(|n, _| names.push(n.to_string()));
        names
    }

    /// Pair each leaf with the matching leaf of a tree of the same layout.
    pub fn zip_map<Q, R>(&self, other: &ModelWeights<Q>, mut f: impl FnMut(&str, &P, &Q) -> R) -> ModelWeights<R> {
        let mut it = other.leaves().into_iter();
        self.map(|name, p| {
            let q = it.next().expect("parameter trees differ in layout");
            f(name, p, q)
        })
    }

    pub fn leaves(&self) -> Vec<&P> {
        let mut out = Vec::new();
        self.for_each(|_, p| out.push(p));
        out
    }
}

/// How a parameter is initialized.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    /// Truncated normal, `std = 0.02`, clipped at two standard deviations.
    TruncNormal,
    Zeros,
    Ones,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    fn matrix(rows: usize, cols: usize) -> Leaf<ParamSpec> {
        Leaf(ParamSpec {
            shape: vec![rows, cols],
            init: Init::TruncNormal,
        })
    }

    fn vector(len: usize, init: Init) -> Leaf<ParamSpec> {
        Leaf(ParamSpec { shape: vec![len], init })
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    /// Only weight matrices receive weight decay; biases and norm gains do not.
    pub fn decays(&self) -> bool {
        self.init == Init::TruncNormal
    }
}

fn linear_spec(fan_in: usize, fan_out: usize) -> Linear<ParamSpec> {
    Linear {
        weight: ParamSpec::matrix(fan_in, fan_out),
        bias: ParamSpec::vector(fan_out, Init::Zeros),
    }
}

fn norm_spec(dim: usize) -> LayerNorm<ParamSpec> {
    LayerNorm {
        gain: ParamSpec::vector(dim, Init::Ones),
        bias: ParamSpec::vector(dim, Init::Zeros),
    }
}

/// Layout of one DynaMixer operation mixing `tokens` tokens of width `dim`.
pub fn op_spec(
    kind: MixGenKind,
    tokens: usize,
    dim: usize,
    segments: usize,
    reduced: usize,
) -> DynaMixerOpWeights<ParamSpec> {
    let generator = match kind {
        MixGenKind::Dynamic => MixGenerator::Dynamic {
            reduce: (0..segments).map(|_| ParamSpec::matrix(dim, reduced)).collect(),
            gen: ParamSpec::matrix(tokens * reduced, tokens * tokens),
        },
        MixGenKind::DensePerToken => MixGenerator::DensePerToken {
            dense: (0..segments).map(|_| ParamSpec::matrix(dim, tokens)).collect(),
        },
        MixGenKind::StaticRandom => MixGenerator::StaticRandom {
            mix: ParamSpec::matrix(tokens, tokens),
        },
    };
    DynaMixerOpWeights {
        generator,
        out_fuse: ParamSpec::matrix(dim, dim),
    }
}

/// Shapes and initializers of every parameter of `config`.
pub fn model_layout(config: &ModelConfig) -> Result<ModelWeights<ParamSpec>> {
    config.validate()?;
    let ab = &config.ablation;
    let stages = config
        .stages
        .iter()
        .enumerate()
        .map(|(si, stage)| {
            let d = stage.hidden;
            let side = config.grid(si);
            let op = || op_spec(ab.gen_kind, side, d, stage.segments, config.reduced_dim);
            let layers = (0..stage.depth)
                .map(|_| LayerWeights {
                    norm1: norm_spec(d),
                    block: BlockWeights {
                        row_op: (!ab.disable_row).then(op),
                        col_op: (!ab.disable_col && !ab.share_row_col_op).then(op),
                        proj_c: (!ab.disable_channel).then(|| linear_spec(d, d)),
                        reweight: (!ab.disable_reweight).then(|| {
                            let r = config.reweight_hidden(si);
                            ReweightWeights {
                                w1: ParamSpec::matrix(d, r),
                                w2: ParamSpec::matrix(r, 3 * d),
                            }
                        }),
                        proj_o: linear_spec(d, d),
                    },
                    norm2: norm_spec(d),
                    mlp: ChannelMlp {
                        fc1: linear_spec(d, config.mlp_ratio * d),
                        fc2: linear_spec(config.mlp_ratio * d, d),
                    },
                })
                .collect();
            StageWeights {
                embed: linear_spec(config.embed_in_dim(si), d),
                layers,
            }
        })
        .collect();
    Ok(ModelWeights {
        stages,
        final_norm: norm_spec(config.head_in_dim()),
        head: linear_spec(config.head_in_dim(), config.num_classes),
    })
}

/// Draw from `N(0, std²)` truncated to `[-2·std, 2·std]` by rejection.
pub fn trunc_normal(rng: &mut impl rand::Rng, std: f64) -> f64 {
    loop {
        let z: f64 = StandardNormal.sample(rng);
        if z.abs() <= 2.0 {
            return z * std;
        }
    }
}

pub(crate) fn init_tensor(spec: &ParamSpec, rng: &mut impl rand::Rng) -> Tensor {
    match spec.init {
        Init::Zeros => Tensor::zeros(&spec.shape),
        Init::Ones => Tensor::ones(&spec.shape),
        Init::TruncNormal => {
            let data = (0..spec.numel()).map(|_| trunc_normal(rng, INIT_STD) as Real).collect();
            Tensor::new(&spec.shape, data).expect("spec shapes are non-empty")
        }
    }
}

/// Initialize every parameter of `config`, deterministically from `seed`.
pub fn build_model(config: &ModelConfig, seed: u64) -> Result<ModelWeights<Tensor>> {
    let layout = model_layout(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(layout.map(|_, spec| init_tensor(spec, &mut rng)))
}

impl ModelWeights<Tensor> {
    pub fn num_params(&self) -> usize {
        let mut n = 0;
        self.for_each(|_, t| n += t.len());
        n
    }

    /// Register every tensor as a trainable leaf of `g`.
    pub fn bind(&self, g: &mut Graph) -> ModelWeights<Var> {
        self.map(|_, t| g.param(t.clone()))
    }

    /// Register every tensor as a constant of `g`.
    pub fn bind_frozen(&self, g: &Graph) -> ModelWeights<Var> {
        self.map(|_, t| g.constant(t.clone()))
    }
}

impl<P> DynaMixerOpWeights<P> {
    pub fn segments(&self) -> usize {
        match &self.generator {
            MixGenerator::Dynamic { reduce, .. } => reduce.len(),
            MixGenerator::DensePerToken { dense } => dense.len(),
            MixGenerator::StaticRandom { .. } => 0,
        }
    }
}

impl DynaMixerOpWeights<Tensor> {
    /// Random operation weights for a standalone `N`-token mixer.
    pub fn random(
        kind: MixGenKind,
        tokens: usize,
        dim: usize,
        segments: usize,
        reduced: usize,
        std: Real,
        rng: &mut impl rand::Rng,
    ) -> Self {
        op_spec(kind, tokens, dim, segments, reduced)
            .map_params("", &mut |_, s: &ParamSpec| Tensor::randn(&s.shape, std, rng))
    }

    pub fn num_params(&self) -> usize {
        let mut n = 0;
        self.for_each_param("", &mut |_, t: &Tensor| n += t.len());
        n
    }

    pub fn bind(&self, g: &mut Graph) -> DynaMixerOpWeights<Var> {
        self.map_params("", &mut |_, t: &Tensor| g.param(t.clone()))
    }
}
