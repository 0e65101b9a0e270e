//! Shared building blocks for the encoder/decoder stack and the term
//! classification head: parameter structs, deterministic initialization,
//! and the glue that binds parameters into a [`Graph`] as leaves so one
//! backward pass yields gradients keyed by parameter name.

use indexmap::IndexMap;
use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::graph::{Gradients, Graph, NodeId};
use crate::scalar::Scalar;

/// Maps parameter names to their leaf nodes in one graph. Binding the same
/// name twice returns the existing leaf, so shared parameters accumulate
/// gradients correctly across records in a batch.
pub(crate) struct ParamReg {
    nodes: IndexMap<String, NodeId>,
}

impl ParamReg {
    pub fn new() -> Self {
        ParamReg { nodes: IndexMap::new() }
    }

    pub fn leaf<F: Scalar>(&mut self, g: &mut Graph<F>, name: String, value: &Array2<F>) -> NodeId {
        if let Some(&id) = self.nodes.get(&name) {
            return id;
        }
        let id = g.leaf(value.clone());
        self.nodes.insert(name, id);
        id
    }

    /// Pull the gradient of every bound parameter that the backward pass
    /// reached, keyed by name.
    pub fn extract<F: Scalar>(&self, grads: &mut Gradients<F>) -> IndexMap<String, Array2<F>> {
        self.nodes
            .iter()
            .filter_map(|(name, &id)| grads.take(id).map(|g| (name.clone(), g)))
            .collect()
    }

    #[cfg(test)]
    pub fn names(&self) -> Vec<String> {
        self.nodes.keys().cloned().collect()
    }
}

/// Xavier-uniform init for a (rows x cols) weight matrix.
pub(crate) fn xavier_uniform<F: Scalar>(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<F> {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| F::cast(rng.random_range(-limit..limit)))
}

/// Small uniform init for embedding tables.
pub(crate) fn embedding_init<F: Scalar>(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<F> {
    Array2::from_shape_fn((rows, cols), |_| F::cast(rng.random_range(-0.05..0.05)))
}

/// Dense layer, stored as `w: (in x out)`, `b: (1 x out)`; applied to
/// row-major sequences as `x.dot(w) + b`.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct LinearParams<F: Scalar> {
    pub w: Array2<F>,
    pub b: Array2<F>,
}

pub(crate) struct LinearNodes {
    pub w: NodeId,
    pub b: NodeId,
}

impl<F: Scalar> LinearParams<F> {
    pub fn init(rng: &mut ChaCha8Rng, in_dim: usize, out_dim: usize) -> Self {
        LinearParams {
            w: xavier_uniform(rng, in_dim, out_dim),
            b: Array2::zeros((1, out_dim)),
        }
    }

    pub fn bind(&self, g: &mut Graph<F>, reg: &mut ParamReg, name: &str) -> LinearNodes {
        LinearNodes {
            w: reg.leaf(g, format!("{name}.w"), &self.w),
            b: reg.leaf(g, format!("{name}.b"), &self.b),
        }
    }

    pub fn visit(&self, name: &str, f: &mut dyn FnMut(String, &Array2<F>)) {
        f(format!("{name}.w"), &self.w);
        f(format!("{name}.b"), &self.b);
    }

    pub fn visit_mut(&mut self, name: &str, f: &mut dyn FnMut(String, &mut Array2<F>)) {
        f(format!("{name}.w"), &mut self.w);
        f(format!("{name}.b"), &mut self.b);
    }
}

pub(crate) fn build_linear<F: Scalar>(g: &mut Graph<F>, lin: &LinearNodes, x: NodeId) -> NodeId {
    let y = g.matmul(x, lin.w);
    g.add_row(y, lin.b)
}

/// Learnable per-feature gain and bias for row-wise layer norm.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct LayerNormParams<F: Scalar> {
    pub gain: Array2<F>,
    pub bias: Array2<F>,
}

pub(crate) struct LayerNormNodes {
    pub gain: NodeId,
    pub bias: NodeId,
}

impl<F: Scalar> LayerNormParams<F> {
    pub fn init(dim: usize) -> Self {
        LayerNormParams {
            gain: Array2::ones((1, dim)),
            bias: Array2::zeros((1, dim)),
        }
    }

    pub fn bind(&self, g: &mut Graph<F>, reg: &mut ParamReg, name: &str) -> LayerNormNodes {
        LayerNormNodes {
            gain: reg.leaf(g, format!("{name}.gain"), &self.gain),
            bias: reg.leaf(g, format!("{name}.bias"), &self.bias),
        }
    }

    pub fn visit(&self, name: &str, f: &mut dyn FnMut(String, &Array2<F>)) {
        f(format!("{name}.gain"), &self.gain);
        f(format!("{name}.bias"), &self.bias);
    }

    pub fn visit_mut(&mut self, name: &str, f: &mut dyn FnMut(String, &mut Array2<F>)) {
        f(format!("{name}.gain"), &mut self.gain);
        f(format!("{name}.bias"), &mut self.bias);
    }
}

pub(crate) fn build_layer_norm<F: Scalar>(
    g: &mut Graph<F>,
    ln: &LayerNormNodes,
    x: NodeId,
) -> NodeId {
    g.layer_norm_rows(x, ln.gain, ln.bias)
}

/// Multi-head attention projections; all four maps are d -> d.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct AttentionParams<F: Scalar> {
    pub wq: LinearParams<F>,
    pub wk: LinearParams<F>,
    pub wv: LinearParams<F>,
    pub wo: LinearParams<F>,
}

pub(crate) struct AttentionNodes {
    pub wq: LinearNodes,
    pub wk: LinearNodes,
    pub wv: LinearNodes,
    pub wo: LinearNodes,
}

impl<F: Scalar> AttentionParams<F> {
    pub fn init(rng: &mut ChaCha8Rng, dim: usize) -> Self {
        AttentionParams {
            wq: LinearParams::init(rng, dim, dim),
            wk: LinearParams::init(rng, dim, dim),
            wv: LinearParams::init(rng, dim, dim),
            wo: LinearParams::init(rng, dim, dim),
        }
    }

    pub fn bind(&self, g: &mut Graph<F>, reg: &mut ParamReg, name: &str) -> AttentionNodes {
        AttentionNodes {
            wq: self.wq.bind(g, reg, &format!("{name}.wq")),
            wk: self.wk.bind(g, reg, &format!("{name}.wk")),
            wv: self.wv.bind(g, reg, &format!("{name}.wv")),
            wo: self.wo.bind(g, reg, &format!("{name}.wo")),
        }
    }

    pub fn visit(&self, name: &str, f: &mut dyn FnMut(String, &Array2<F>)) {
        self.wq.visit(&format!("{name}.wq"), f);
        self.wk.visit(&format!("{name}.wk"), f);
        self.wv.visit(&format!("{name}.wv"), f);
        self.wo.visit(&format!("{name}.wo"), f);
    }

    pub fn visit_mut(&mut self, name: &str, f: &mut dyn FnMut(String, &mut Array2<F>)) {
        self.wq.visit_mut(&format!("{name}.wq"), f);
        self.wk.visit_mut(&format!("{name}.wk"), f);
        self.wv.visit_mut(&format!("{name}.wv"), f);
        self.wo.visit_mut(&format!("{name}.wo"), f);
    }
}

/// Scaled dot-product attention with `heads` heads over row-major inputs.
/// `mask[i][j] = true` lets query row i attend to key row j.
pub(crate) fn build_attention<F: Scalar>(
    g: &mut Graph<F>,
    attn: &AttentionNodes,
    q_in: NodeId,
    kv_in: NodeId,
    heads: usize,
    mask: Option<&Array2<bool>>,
) -> NodeId {
    let dim = g.value(q_in).ncols();
    assert_eq!(dim % heads, 0, "hidden width must divide into heads");
    let head_dim = dim / heads;
    let scale = F::cast(1.0 / (head_dim as f64).sqrt());

    let q = build_linear(g, &attn.wq, q_in);
    let k = build_linear(g, &attn.wk, kv_in);
    let v = build_linear(g, &attn.wv, kv_in);

    let mut merged: Option<NodeId> = None;
    for h in 0..heads {
        let lo = h * head_dim;
        let hi = lo + head_dim;
        let qh = g.slice_cols(q, lo, hi);
        let kh = g.slice_cols(k, lo, hi);
        let vh = g.slice_cols(v, lo, hi);
        let kt = g.transpose(kh);
        let scores = g.matmul(qh, kt);
        let scaled = g.scale(scores, scale);
        let probs = g.softmax_rows(scaled, mask.cloned());
        let ctx = g.matmul(probs, vh);
        merged = Some(match merged {
            None => ctx,
            Some(acc) => g.concat_cols(acc, ctx),
        });
    }
    build_linear(g, &attn.wo, merged.expect("at least one head"))
}

/// Two-layer feed-forward block with GELU, hidden width `FFN_RATIO * d`.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct FeedForwardParams<F: Scalar> {
    pub lin1: LinearParams<F>,
    pub lin2: LinearParams<F>,
}

pub(crate) struct FeedForwardNodes {
    pub lin1: LinearNodes,
    pub lin2: LinearNodes,
}

pub(crate) const FFN_RATIO: usize = 4;

impl<F: Scalar> FeedForwardParams<F> {
    pub fn init(rng: &mut ChaCha8Rng, dim: usize) -> Self {
        FeedForwardParams {
            lin1: LinearParams::init(rng, dim, FFN_RATIO * dim),
            lin2: LinearParams::init(rng, FFN_RATIO * dim, dim),
        }
    }

    pub fn bind(&self, g: &mut Graph<F>, reg: &mut ParamReg, name: &str) -> FeedForwardNodes {
        FeedForwardNodes {
            lin1: self.lin1.bind(g, reg, &format!("{name}.lin1")),
            lin2: self.lin2.bind(g, reg, &format!("{name}.lin2")),
        }
    }

    pub fn visit(&self, name: &str, f: &mut dyn FnMut(String, &Array2<F>)) {
        self.lin1.visit(&format!("{name}.lin1"), f);
        self.lin2.visit(&format!("{name}.lin2"), f);
    }

    pub fn visit_mut(&mut self, name: &str, f: &mut dyn FnMut(String, &mut Array2<F>)) {
        self.lin1.visit_mut(&format!("{name}.lin1"), f);
        self.lin2.visit_mut(&format!("{name}.lin2"), f);
    }
}

pub(crate) fn build_feed_forward<F: Scalar>(
    g: &mut Graph<F>,
    ffn: &FeedForwardNodes,
    x: NodeId,
) -> NodeId {
    let h = build_linear(g, &ffn.lin1, x);
    let a = g.gelu(h);
    build_linear(g, &ffn.lin2, a)
}
