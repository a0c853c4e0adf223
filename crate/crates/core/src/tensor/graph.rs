use std::sync::Arc;

use super::kernels;
use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a value produced on a [`Graph`].
///
/// Cloning is cheap. Untracked vars (constants, or anything computed on a
/// no-grad graph) carry no node id and never receive gradients.
#[derive(Clone, Debug)]
pub struct Var {
    id: Option<usize>,
    value: Arc<Tensor>,
}

impl Var {
    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.id.is_some()
    }

    pub fn to_tensor(&self) -> Tensor {
        (*self.value).clone()
    }
}

enum Op {
    Leaf,
    MatMul {
        a: Arc<Tensor>,
        b: Arc<Tensor>,
    },
    BatchMatMul {
        a: Arc<Tensor>,
        b: Arc<Tensor>,
    },
    Add {
        a_shape: Vec<usize>,
        b_shape: Vec<usize>,
    },
    Sub {
        a_shape: Vec<usize>,
        b_shape: Vec<usize>,
    },
    Mul {
        a: Arc<Tensor>,
        b: Arc<Tensor>,
    },
    Scale(Real),
    Reshape,
    Permute {
        axes: Vec<usize>,
    },
    Concat {
        widths: Vec<usize>,
    },
    Narrow {
        axis: usize,
        start: usize,
        in_shape: Vec<usize>,
    },
    Expand {
        in_shape: Vec<usize>,
    },
    SumTo {
        in_shape: Vec<usize>,
    },
    SumAll {
        len: usize,
    },
    Softmax {
        out: Arc<Tensor>,
    },
    LayerNorm {
        xhat: Vec<Real>,
        inv_std: Vec<Real>,
        gain: Arc<Tensor>,
    },
    Gelu {
        x: Arc<Tensor>,
    },
    CrossEntropy {
        probs: Vec<Real>,
        targets: Vec<usize>,
        smoothing: Real,
    },
}

struct Node {
    op: Op,
    inputs: Vec<Option<usize>>,
    shape: Vec<usize>,
}

/// Append-only tape of executed operations.
///
/// Nodes are stored in execution order, so reverse order is a valid
/// topological order for the backward sweep.
pub struct Graph {
    nodes: Vec<Node>,
    grad_enabled: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Graph::new()
    }
}

/// Gradients produced by [`Graph::backward`], indexed by node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: &Var) -> Option<&Tensor> {
        var.id.and_then(|id| self.grads[id].as_ref())
    }

    /// Gradient of `var`, or zeros of its shape when nothing flowed into it.
    pub fn get_or_zeros(&self, var: &Var) -> Tensor {
        self.get(var).cloned().unwrap_or_else(|| Tensor::zeros(var.shape()))
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grad_enabled: true,
        }
    }

    /// A graph that records nothing; every var it produces is untracked.
    pub fn no_grad() -> Self {
        Graph {
            nodes: Vec::new(),
            grad_enabled: false,
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        if !self.grad_enabled {
            return self.constant(t);
        }
        let id = self.nodes.len();
        self.nodes.push(Node {
            op: Op::Leaf,
            inputs: Vec::new(),
            shape: t.shape().to_vec(),
        });
        Var {
            id: Some(id),
            value: Arc::new(t),
        }
    }

    pub fn constant(&self, t: Tensor) -> Var {
        Var {
            id: None,
            value: Arc::new(t),
        }
    }

    fn record(&mut self, inputs: &[&Var], value: Tensor, op: impl FnOnce() -> Op) -> Result<Var> {
        if cfg!(debug_assertions) && !value.is_finite() && inputs.iter().all(|v| v.value.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite output of shape {:?} from finite inputs",
                value.shape()
            )));
        }
        let tracked = self.grad_enabled && inputs.iter().any(|v| v.id.is_some());
        if !tracked {
            return Ok(Var {
                id: None,
                value: Arc::new(value),
            });
        }
        let id = self.nodes.len();
        self.nodes.push(Node {
            op: op(),
            inputs: inputs.iter().map(|v| v.id).collect(),
            shape: value.shape().to_vec(),
        });
        Ok(Var {
            id: Some(id),
            value: Arc::new(value),
        })
    }

    /// `a[..., k] · b[k, n] -> [..., n]`; leading axes of `a` are flattened
    /// into the row dimension.
    pub fn matmul(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let (sa, sb) = (a.shape(), b.shape());
        let k = *sa.last().unwrap();
        if sb.len() != 2 || sb[0] != k {
            return Err(Error::shape("matmul", sa, sb));
        }
        let n = sb[1];
        let m = a.value.len() / k;
        let mut out = vec![0.0; m * n];
        kernels::matmul_into(m, k, n, a.value.data(), false, b.value.data(), false, 0.0, &mut out);
        let mut shape = sa.to_vec();
        *shape.last_mut().unwrap() = n;
        let value = Tensor::from_parts(shape, out);
        self.record(&[a, b], value, || Op::MatMul {
            a: a.value.clone(),
            b: b.value.clone(),
        })
    }

    /// `a[B, m, k] · b[B, k, n] -> [B, m, n]`.
    pub fn bmm(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let (sa, sb) = (a.shape(), b.shape());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(Error::shape("bmm", sa, sb));
        }
        let (batch, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![0.0; batch * m * n];
        let (ad, bd) = (a.value.data(), b.value.data());
        for i in 0..batch {
            kernels::matmul_into(
                m,
                k,
                n,
                &ad[i * m * k..(i + 1) * m * k],
                false,
                &bd[i * k * n..(i + 1) * k * n],
                false,
                0.0,
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        let value = Tensor::from_parts(vec![batch, m, n], out);
        self.record(&[a, b], value, || Op::BatchMatMul {
            a: a.value.clone(),
            b: b.value.clone(),
        })
    }

    fn broadcast_op(&mut self, name: &'static str, a: &Var, b: &Var, f: impl Fn(Real, Real) -> Real) -> Result<Tensor> {
        let out_shape =
            kernels::broadcast_shape(a.shape(), b.shape()).ok_or_else(|| Error::shape(name, a.shape(), b.shape()))?;
        let data = kernels::broadcast_binary(a.shape(), a.value.data(), b.shape(), b.value.data(), &out_shape, f);
        Ok(Tensor::from_parts(out_shape, data))
    }

    /// Elementwise sum with numpy-style broadcasting.
    pub fn add(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let value = self.broadcast_op("add", a, b, |x, y| x + y)?;
        self.record(&[a, b], value, || Op::Add {
            a_shape: a.shape().to_vec(),
            b_shape: b.shape().to_vec(),
        })
    }

    pub fn sub(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let value = self.broadcast_op("sub", a, b, |x, y| x - y)?;
        self.record(&[a, b], value, || Op::Sub {
            a_shape: a.shape().to_vec(),
            b_shape: b.shape().to_vec(),
        })
    }

    /// Elementwise product with numpy-style broadcasting.
    pub fn mul(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let value = self.broadcast_op("mul", a, b, |x, y| x * y)?;
        self.record(&[a, b], value, || Op::Mul {
            a: a.value.clone(),
            b: b.value.clone(),
        })
    }

    pub fn scale(&mut self, x: &Var, c: Real) -> Result<Var> {
        let value = x.value.map(|v| v * c);
        self.record(&[x], value, || Op::Scale(c))
    }

    pub fn reshape(&mut self, x: &Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != x.value.len() {
            return Err(Error::shape("reshape", x.shape(), shape));
        }
        let value = Tensor::new(shape, x.value.data().to_vec())?;
        self.record(&[x], value, || Op::Reshape)
    }

    /// Reorder axes; output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, x: &Var, axes: &[usize]) -> Result<Var> {
        let rank = x.shape().len();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::shape("permute", x.shape(), axes));
        }
        let (shape, data) = kernels::permute(x.shape(), x.value.data(), axes);
        let value = Tensor::from_parts(shape, data);
        self.record(&[x], value, || Op::Permute { axes: axes.to_vec() })
    }

    /// Concatenate along the last axis; all other extents must agree.
    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        let lead = &first.shape()[..first.shape().len() - 1];
        for p in parts {
            let s = p.shape();
            if s.len() != first.shape().len() || &s[..s.len() - 1] != lead {
                return Err(Error::shape("concat_last", first.shape(), s));
            }
        }
        let widths: Vec<usize> = parts.iter().map(|p| *p.shape().last().unwrap()).collect();
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&p.value.data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        let value = Tensor::from_parts(shape, out);
        let refs: Vec<&Var> = parts.iter().collect();
        self.record(&refs, value, || Op::Concat { widths })
    }

    /// Slice `len` entries starting at `start` along `axis`.
    pub fn narrow(&mut self, x: &Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = x.shape();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::shape("narrow", shape, &[axis, start, len]));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * len * inner);
        let src = x.value.data();
        for o in 0..outer {
            let base = (o * shape[axis] + start) * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape.to_vec();
        out_shape[axis] = len;
        let value = Tensor::from_parts(out_shape, out);
        self.record(&[x], value, || Op::Narrow {
            axis,
            start,
            in_shape: shape.to_vec(),
        })
    }

    /// Split the last axis into consecutive pieces of the given widths.
    pub fn split_last(&mut self, x: &Var, widths: &[usize]) -> Result<Vec<Var>> {
        let axis = x.shape().len() - 1;
        if widths.iter().sum::<usize>() != x.shape()[axis] {
            return Err(Error::shape("split_last", x.shape(), widths));
        }
        let mut start = 0;
        widths
            .iter()
            .map(|&w| {
                let part = self.narrow(x, axis, start, w);
                start += w;
                part
            })
            .collect()
    }

    /// Broadcast `x` to `shape`.
    pub fn expand(&mut self, x: &Var, shape: &[usize]) -> Result<Var> {
        match kernels::broadcast_shape(x.shape(), shape) {
            Some(s) if s == shape => {}
            _ => return Err(Error::shape("expand", x.shape(), shape)),
        }
        let data = kernels::expand(x.shape(), x.value.data(), shape);
        let value = Tensor::from_parts(shape.to_vec(), data);
        self.record(&[x], value, || Op::Expand {
            in_shape: x.shape().to_vec(),
        })
    }

    /// Sum over broadcast axes so the result has `shape`.
    pub fn sum_to(&mut self, x: &Var, shape: &[usize]) -> Result<Var> {
        match kernels::broadcast_shape(shape, x.shape()) {
            Some(s) if s == x.shape() => {}
            _ => return Err(Error::shape("sum_to", x.shape(), shape)),
        }
        let data = kernels::sum_to(x.shape(), x.value.data(), shape);
        let value = Tensor::from_parts(shape.to_vec(), data);
        self.record(&[x], value, || Op::SumTo {
            in_shape: x.shape().to_vec(),
        })
    }

    /// Sum of every element, as a one-element tensor.
    pub fn sum(&mut self, x: &Var) -> Result<Var> {
        let s: Real = x.value.data().iter().sum();
        self.record(&[x], Tensor::scalar(s), || Op::SumAll { len: x.value.len() })
    }

    /// Mean over the listed axes, which are removed from the output shape.
    /// Reducing every axis leaves a one-element tensor.
    pub fn mean_axes(&mut self, x: &Var, axes: &[usize]) -> Result<Var> {
        let shape = x.shape();
        if axes.iter().any(|&a| a >= shape.len()) {
            return Err(Error::shape("mean_axes", shape, axes));
        }
        let mut keep = shape.to_vec();
        let mut count = 1;
        for &a in axes {
            count *= std::mem::replace(&mut keep[a], 1);
        }
        let summed = self.sum_to(x, &keep)?;
        let mean = self.scale(&summed, 1.0 / count as Real)?;
        let mut out: Vec<usize> = keep
            .iter()
            .enumerate()
            .filter(|(i, _)| !axes.contains(i))
            .map(|(_, &e)| e)
            .collect();
        if out.is_empty() {
            out.push(1);
        }
        self.reshape(&mean, &out)
    }

    /// Softmax over the last axis, with max subtraction.
    pub fn softmax_last(&mut self, x: &Var) -> Result<Var> {
        if !x.value.is_finite() {
            return Err(Error::Numeric("softmax of non-finite input".into()));
        }
        let n = *x.shape().last().unwrap();
        let out = Tensor::from_parts(x.shape().to_vec(), kernels::softmax_rows(x.value.data(), n));
        let saved = Arc::new(out.clone());
        self.record(&[x], out, || Op::Softmax { out: saved })
    }

    /// Standardize over the last axis, then apply `gain` and `bias`.
    pub fn layer_norm(&mut self, x: &Var, gain: &Var, bias: &Var, eps: Real) -> Result<Var> {
        let d = *x.shape().last().unwrap();
        if gain.shape() != [d] || bias.shape() != [d] {
            return Err(Error::shape("layer_norm", x.shape(), gain.shape()));
        }
        if eps <= 0.0 {
            return Err(Error::Contract(format!("layer_norm eps must be > 0, got {eps}")));
        }
        let rows = x.value.len() / d;
        let mut xhat = vec![0.0; x.value.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; x.value.len()];
        let (g, b) = (gain.value.data(), bias.value.data());
        for r in 0..rows {
            let row = &x.value.data()[r * d..(r + 1) * d];
            let mean = row.iter().sum::<Real>() / d as Real;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<Real>() / d as Real;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let value = Tensor::from_parts(x.shape().to_vec(), out);
        self.record(&[x, gain, bias], value, || Op::LayerNorm {
            xhat,
            inv_std,
            gain: gain.value.clone(),
        })
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(&mut self, x: &Var) -> Result<Var> {
        let value = x.value.map(kernels::gelu);
        self.record(&[x], value, || Op::Gelu { x: x.value.clone() })
    }

    /// Mean cross-entropy of `logits[B, C]` against integer targets, with
    /// optional label smoothing.
    pub fn cross_entropy(&mut self, logits: &Var, targets: &[usize], smoothing: Real) -> Result<Var> {
        let shape = logits.shape();
        if shape.len() != 2 || shape[0] != targets.len() {
            return Err(Error::shape("cross_entropy", shape, &[targets.len()]));
        }
        let classes = shape[1];
        if let Some(&t) = targets.iter().find(|&&t| t >= classes) {
            return Err(Error::Contract(format!(
                "target {t} out of range for {classes} classes"
            )));
        }
        if !logits.value.is_finite() {
            return Err(Error::Numeric("cross_entropy of non-finite logits".into()));
        }
        let probs = kernels::softmax_rows(logits.value.data(), classes);
        let mut total = 0.0;
        for (b, &t) in targets.iter().enumerate() {
            let row = &logits.value.data()[b * classes..(b + 1) * classes];
            let max = row.iter().copied().fold(Real::NEG_INFINITY, Real::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<Real>().ln();
            let nll = lse - row[t];
            let uniform = lse - row.iter().sum::<Real>() / classes as Real;
            total += (1.0 - smoothing) * nll + smoothing * uniform;
        }
        let value = Tensor::scalar(total / targets.len() as Real);
        self.record(&[logits], value, || Op::CrossEntropy {
            probs,
            targets: targets.to_vec(),
            smoothing,
        })
    }

    /// Reverse sweep from a one-element `loss`.
    pub fn backward(&self, loss: &Var) -> Result<Gradients> {
        if loss.value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<Real>>> = vec![None; self.nodes.len()];
        let Some(root) = loss.id else {
            return Ok(Gradients {
                grads: vec![None; self.nodes.len()],
            });
        };
        grads[root] = Some(vec![1.0]);
        for id in (0..=root).rev() {
            let Some(dy) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if matches!(node.op, Op::Leaf) {
                grads[id] = Some(dy);
                continue;
            }
            let needs: Vec<bool> = node.inputs.iter().map(Option::is_some).collect();
            let input_grads = backward_node(node, &dy, &needs);
            for (input, g) in node.inputs.iter().zip(input_grads) {
                if let (Some(i), Some(g)) = (input, g) {
                    match &mut grads[*i] {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, v)| *a += v),
                        slot => *slot = Some(g),
                    }
                }
            }
            // Interior gradients are kept so callers can inspect activations.
            grads[id] = Some(dy);
        }
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| g.map(|g| Tensor::from_parts(n.shape.clone(), g)))
            .collect();
        Ok(Gradients { grads })
    }
}

fn backward_node(node: &Node, dy: &[Real], needs: &[bool]) -> Vec<Option<Vec<Real>>> {
    let shape = &node.shape;
    match &node.op {
        Op::Leaf => vec![],
        Op::MatMul { a, b } => {
            let k = b.shape()[0];
            let n = b.shape()[1];
            let m = a.len() / k;
            let da = needs[0].then(|| {
                let mut da = vec![0.0; m * k];
                kernels::matmul_into(m, n, k, dy, false, b.data(), true, 0.0, &mut da);
                da
            });
            let db = needs[1].then(|| {
                let mut db = vec![0.0; k * n];
                kernels::matmul_into(k, m, n, a.data(), true, dy, false, 0.0, &mut db);
                db
            });
            vec![da, db]
        }
        Op::BatchMatMul { a, b } => {
            let (batch, m, k) = (a.shape()[0], a.shape()[1], a.shape()[2]);
            let n = b.shape()[2];
            let da = needs[0].then(|| {
                let mut da = vec![0.0; batch * m * k];
                for i in 0..batch {
                    kernels::matmul_into(
                        m,
                        n,
                        k,
                        &dy[i * m * n..(i + 1) * m * n],
                        false,
                        &b.data()[i * k * n..(i + 1) * k * n],
                        true,
                        0.0,
                        &mut da[i * m * k..(i + 1) * m * k],
                    );
                }
                da
            });
            let db = needs[1].then(|| {
                let mut db = vec![0.0; batch * k * n];
                for i in 0..batch {
                    kernels::matmul_into(
                        k,
                        m,
                        n,
                        &a.data()[i * m * k..(i + 1) * m * k],
                        true,
                        &dy[i * m * n..(i + 1) * m * n],
                        false,
                        0.0,
                        &mut db[i * k * n..(i + 1) * k * n],
                    );
                }
                db
            });
            vec![da, db]
        }
        Op::Add { a_shape, b_shape } => vec![
            needs[0].then(|| kernels::sum_to(shape, dy, a_shape)),
            needs[1].then(|| kernels::sum_to(shape, dy, b_shape)),
        ],
        Op::Sub { a_shape, b_shape } => vec![
            needs[0].then(|| kernels::sum_to(shape, dy, a_shape)),
            needs[1].then(|| {
                let mut g = kernels::sum_to(shape, dy, b_shape);
                g.iter_mut().for_each(|v| *v = -*v);
                g
            }),
        ],
        Op::Mul { a, b } => {
            let side = |this: &Tensor, other: &Tensor| {
                let prod = kernels::broadcast_binary(shape, dy, other.shape(), other.data(), shape, |g, o| g * o);
                kernels::sum_to(shape, &prod, this.shape())
            };
            vec![needs[0].then(|| side(a, b)), needs[1].then(|| side(b, a))]
        }
        Op::Scale(c) => vec![Some(dy.iter().map(|g| g * c).collect())],
        Op::Reshape => vec![Some(dy.to_vec())],
        Op::Permute { axes } => {
            let (_, g) = kernels::permute(shape, dy, &kernels::inverse_axes(axes));
            vec![Some(g)]
        }
        Op::Concat { widths } => {
            let total: usize = widths.iter().sum();
            let rows = dy.len() / total;
            let mut parts: Vec<Vec<Real>> = widths.iter().map(|w| Vec::with_capacity(rows * w)).collect();
            for r in 0..rows {
                let mut off = r * total;
                for (p, &w) in parts.iter_mut().zip(widths) {
                    p.extend_from_slice(&dy[off..off + w]);
                    off += w;
                }
            }
            parts
                .into_iter()
                .zip(needs)
                .map(|(p, &need)| need.then_some(p))
                .collect()
        }
        Op::Narrow { axis, start, in_shape } => {
            let outer: usize = in_shape[..*axis].iter().product();
            let inner: usize = in_shape[axis + 1..].iter().product();
            let len = shape[*axis];
            let mut g = vec![0.0; in_shape.iter().product()];
            for o in 0..outer {
                let dst = (o * in_shape[*axis] + start) * inner;
                let src = o * len * inner;
                g[dst..dst + len * inner].copy_from_slice(&dy[src..src + len * inner]);
            }
            vec![Some(g)]
        }
        Op::Expand { in_shape } => vec![Some(kernels::sum_to(shape, dy, in_shape))],
        Op::SumTo { in_shape } => vec![Some(kernels::expand(shape, dy, in_shape))],
        Op::SumAll { len } => vec![Some(vec![dy[0]; *len])],
        Op::Softmax { out } => {
            let n = *shape.last().unwrap();
            let mut g = vec![0.0; dy.len()];
            for ((y, d), gx) in out
                .data()
                .chunks_exact(n)
                .zip(dy.chunks_exact(n))
                .zip(g.chunks_exact_mut(n))
            {
                let dot: Real = y.iter().zip(d).map(|(a, b)| a * b).sum();
                for j in 0..n {
                    gx[j] = y[j] * (d[j] - dot);
                }
            }
            vec![Some(g)]
        }
        Op::LayerNorm { xhat, inv_std, gain } => {
            let d = *shape.last().unwrap();
            let rows = inv_std.len();
            let gd = gain.data();
            let mut dx = vec![0.0; dy.len()];
            let mut dgain = vec![0.0; d];
            let mut dbias = vec![0.0; d];
            for r in 0..rows {
                let dyr = &dy[r * d..(r + 1) * d];
                let hr = &xhat[r * d..(r + 1) * d];
                let mut sum_dh = 0.0;
                let mut sum_dh_h = 0.0;
                for j in 0..d {
                    let dh = dyr[j] * gd[j];
                    sum_dh += dh;
                    sum_dh_h += dh * hr[j];
                    dgain[j] += dyr[j] * hr[j];
                    dbias[j] += dyr[j];
                }
                let scale = inv_std[r] / d as Real;
                for j in 0..d {
                    let dh = dyr[j] * gd[j];
                    dx[r * d + j] = scale * (d as Real * dh - sum_dh - hr[j] * sum_dh_h);
                }
            }
            vec![
                needs[0].then_some(dx),
                needs[1].then_some(dgain),
                needs[2].then_some(dbias),
            ]
        }
        Op::Gelu { x } => vec![Some(
            x.data()
                .iter()
                .zip(dy)
                .map(|(&v, g)| g * kernels::gelu_grad(v))
                .collect(),
        )],
        Op::CrossEntropy {
            probs,
            targets,
            smoothing,
        } => {
            let batch = targets.len();
            let classes = probs.len() / batch;
            let scale = dy[0] / batch as Real;
            let off = smoothing / classes as Real;
            let mut g = vec![0.0; probs.len()];
            for (b, &t) in targets.iter().enumerate() {
                for c in 0..classes {
                    let q = if c == t { 1.0 - smoothing + off } else { off };
                    g[b * classes + c] = (probs[b * classes + c] - q) * scale;
                }
            }
            vec![Some(g)]
        }
    }
}
