//! Building-block layers expressed over [`Graph`] operations.

use crate::graph::{ConvGeom, Graph, Var};
use crate::params::{ParamBuilder, ParamId, ParamStore};

pub const LN_EPS: f64 = 1e-5;

/// `y = x·W + b` with `W: [in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(pb: &mut ParamBuilder<'_>, name: &str, in_dim: usize, out_dim: usize) -> Self {
        Self {
            weight: pb.xavier(&format!("{name}.weight"), &[in_dim, out_dim], in_dim, out_dim),
            bias: pb.zeros(&format!("{name}.bias"), &[out_dim]),
            in_dim,
            out_dim,
        }
    }

    pub fn zeroed(pb: &mut ParamBuilder<'_>, name: &str, in_dim: usize, out_dim: usize) -> Self {
        Self {
            weight: pb.zeros(&format!("{name}.weight"), &[in_dim, out_dim]),
            bias: pb.zeros(&format!("{name}.bias"), &[out_dim]),
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        let y = g.matmul(x, w);
        g.add_row_bias(y, b)
    }
}

/// Stack of linear layers with ReLU between them (none after the last).
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn new(pb: &mut ParamBuilder<'_>, name: &str, dims: &[usize]) -> Self {
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(pb, &format!("{name}.{i}"), w[0], w[1]))
            .collect();
        Self { layers }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(g, store, h);
            if i + 1 < self.layers.len() {
                h = g.relu(h);
            }
        }
        h
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(pb: &mut ParamBuilder<'_>, name: &str, dim: usize) -> Self {
        Self {
            gamma: pb.ones(&format!("{name}.gamma"), &[dim]),
            beta: pb.zeros(&format!("{name}.beta"), &[dim]),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        g.layer_norm(x, gamma, beta, LN_EPS)
    }
}

/// Multi-head scaled dot-product attention. Query inputs may have a different
/// width than key/value inputs; both are projected to `dim`.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub q_proj: Linear,
    pub k_proj: Linear,
    pub v_proj: Linear,
    pub out_proj: Linear,
    pub heads: usize,
    pub dim: usize,
}

/// Concatenated per-head outputs (before the output projection) and the
/// per-head attention weight matrices `[m, keys]`.
pub struct Attended {
    pub heads_out: Var,
    pub weights: Vec<Var>,
}

impl MultiHeadAttention {
    pub fn new(pb: &mut ParamBuilder<'_>, name: &str, q_dim: usize, kv_dim: usize, dim: usize, heads: usize) -> Self {
        assert!(heads > 0 && dim % heads == 0, "dim {dim} not divisible by {heads} heads");
        Self {
            q_proj: Linear::new(pb, &format!("{name}.q"), q_dim, dim),
            k_proj: Linear::new(pb, &format!("{name}.k"), kv_dim, dim),
            v_proj: Linear::new(pb, &format!("{name}.v"), kv_dim, dim),
            out_proj: Linear::new(pb, &format!("{name}.o"), dim, dim),
            heads,
            dim,
        }
    }

    pub fn attend(&self, g: &mut Graph, store: &ParamStore, queries: Var, keys_values: Var) -> Attended {
        let q = self.q_proj.forward(g, store, queries);
        let k = self.k_proj.forward(g, store, keys_values);
        let v = self.v_proj.forward(g, store, keys_values);
        let dh = self.dim / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (
                    g.slice_cols(q, h * dh, dh),
                    g.slice_cols(k, h * dh, dh),
                    g.slice_cols(v, h * dh, dh),
                )
            };
            let scores = g.matmul_t(qh, false, kh, true);
            let scores = g.scale(scores, scale);
            let attn = g.softmax_rows(scores);
            outs.push(g.matmul(attn, vh));
            weights.push(attn);
        }
        let heads_out = if outs.len() == 1 { outs[0] } else { g.concat_cols(&outs) };
        Attended { heads_out, weights }
    }

    /// Standard attention: per-query output projected by `out_proj`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, queries: Var, keys_values: Var) -> Var {
        let a = self.attend(g, store, queries, keys_values);
        self.out_proj.forward(g, store, a.heads_out)
    }
}

/// 2-D convolution over a single `[C, H, W]` image.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new(pb: &mut ParamBuilder<'_>, name: &str, in_ch: usize, out_ch: usize, kernel: usize, stride: usize) -> Self {
        let fan_in = in_ch * kernel * kernel;
        // He-uniform for ReLU stacks
        let bound = (6.0 / fan_in as f64).sqrt();
        Self {
            weight: pb.uniform(&format!("{name}.weight"), &[out_ch, fan_in], bound),
            bias: pb.zeros(&format!("{name}.bias"), &[out_ch]),
            in_ch,
            out_ch,
            kernel,
            stride,
            pad: kernel / 2,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let shape = g.value(x).shape().to_vec();
        let geom = ConvGeom {
            in_ch: self.in_ch,
            out_ch: self.out_ch,
            height: shape[1],
            width: shape[2],
            kernel: self.kernel,
            stride: self.stride,
            pad: self.pad,
        };
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        g.conv2d(x, w, b, geom)
    }
}
