//! Single-frame query detector: convolutional backbone, query decoder and
//! class/box heads. Its output is the stage-0 prediction of the refinement loop.

use crate::graph::{Graph, Var};
use crate::nn::{Conv2d, LayerNorm, Linear, Mlp, MultiHeadAttention};
use crate::params::{ParamBuilder, ParamStore};
use crate::tensor::Tensor;

/// Total downsampling of the backbone.
pub const BACKBONE_STRIDE: usize = 8;

/// Four 3×3 conv + ReLU blocks, three of them with stride 2.
#[derive(Clone, Debug)]
pub struct Backbone {
    pub blocks: Vec<Conv2d>,
}

impl Backbone {
    pub fn new(pb: &mut ParamBuilder<'_>, feature_dim: usize) -> Self {
        let widths = [3, feature_dim / 4, feature_dim / 2, feature_dim, feature_dim];
        let strides = [2, 2, 2, 1];
        let blocks = (0..4)
            .map(|i| Conv2d::new(pb, &format!("backbone.{i}"), widths[i].max(1), widths[i + 1].max(1), 3, strides[i]))
            .collect();
        Self { blocks }
    }

    /// `[3, H, W] -> [d_f, H/8, W/8]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, frame: Var) -> Var {
        let mut x = frame;
        for block in &self.blocks {
            x = block.forward(g, store, x);
            x = g.relu(x);
        }
        x
    }
}

/// One decoder layer: query self-attention, cross-attention over feature
/// cells, feed-forward; each followed by residual add and layer norm.
#[derive(Clone, Debug)]
pub struct DecoderLayer {
    pub self_attn: MultiHeadAttention,
    pub norm1: LayerNorm,
    pub cross_attn: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub ffn: Mlp,
    pub norm3: LayerNorm,
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub input_proj: Linear,
    pub layers: Vec<DecoderLayer>,
    pub dim: usize,
}

impl Decoder {
    pub fn new(pb: &mut ParamBuilder<'_>, feature_dim: usize, dim: usize, heads: usize, num_layers: usize) -> Self {
        let input_proj = Linear::new(pb, "decoder.input_proj", feature_dim, dim);
        let layers = (0..num_layers)
            .map(|i| {
                let p = format!("decoder.{i}");
                DecoderLayer {
                    self_attn: MultiHeadAttention::new(pb, &format!("{p}.self_attn"), dim, dim, dim, heads),
                    norm1: LayerNorm::new(pb, &format!("{p}.norm1"), dim),
                    cross_attn: MultiHeadAttention::new(pb, &format!("{p}.cross_attn"), dim, dim, dim, heads),
                    norm2: LayerNorm::new(pb, &format!("{p}.norm2"), dim),
                    ffn: Mlp::new(pb, &format!("{p}.ffn"), &[dim, 2 * dim, dim]),
                    norm3: LayerNorm::new(pb, &format!("{p}.norm3"), dim),
                }
            })
            .collect();
        Self { input_proj, layers, dim }
    }

    /// Flattens `[d_f, H, W]` into `[H·W, d]` memory tokens with positional encoding.
    pub fn memory(&self, g: &mut Graph, store: &ParamStore, features: Var) -> Var {
        let shape = g.value(features).shape().to_vec();
        let (c, h, w) = (shape[0], shape[1], shape[2]);
        let flat = g.reshape(features, &[c, h * w]);
        let cells = g.transpose(flat);
        let projected = self.input_proj.forward(g, store, cells);
        let pos = g.input(positional_encoding(h, w, self.dim));
        g.add(projected, pos)
    }

    /// Per-query embeddings `[n, d]` from learned queries attending to the feature cells.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, features: Var, queries: Var) -> Var {
        let memory = self.memory(g, store, features);
        let mut q = queries;
        for layer in &self.layers {
            let s = layer.self_attn.forward(g, store, q, q);
            let s = g.add(q, s);
            q = layer.norm1.forward(g, store, s);
            let c = layer.cross_attn.forward(g, store, q, memory);
            let c = g.add(q, c);
            q = layer.norm2.forward(g, store, c);
            let f = layer.ffn.forward(g, store, q);
            let f = g.add(q, f);
            q = layer.norm3.forward(g, store, f);
        }
        q
    }
}

/// 2-D sinusoidal encoding `[h·w, dim]`: the first half of the channels encode
/// the row, the second half the column.
pub fn positional_encoding(h: usize, w: usize, dim: usize) -> Tensor {
    let half = dim / 2;
    let mut data = vec![0.0; h * w * dim];
    for y in 0..h {
        for x in 0..w {
            let row = &mut data[(y * w + x) * dim..(y * w + x + 1) * dim];
            for (offset, coord, span) in [(0, y, half), (half, x, dim - half)] {
                let pos = (coord as f64 + 0.5) / (if offset == 0 { h } else { w }) as f64 * std::f64::consts::TAU;
                for i in 0..span {
                    let freq = 1.0 + (i / 2) as f64;
                    row[offset + i] = if i % 2 == 0 { (pos * freq).sin() } else { (pos * freq).cos() };
                }
            }
        }
    }
    Tensor::new(vec![h * w, dim], data).expect("pos shape")
}

/// Classification head `N_cls` and box head `N_box` for one stage.
#[derive(Clone, Debug)]
pub struct DetectionHeads {
    pub class_head: Linear,
    pub box_head: Mlp,
}

impl DetectionHeads {
    pub fn new(pb: &mut ParamBuilder<'_>, name: &str, dim: usize, num_classes: usize, zero_box_output: bool) -> Self {
        let class_head = Linear::new(pb, &format!("{name}.class"), dim, num_classes + 1);
        let mut box_head = Mlp::new(pb, &format!("{name}.box"), &[dim, dim]);
        let out = if zero_box_output {
            Linear::zeroed(pb, &format!("{name}.box.1"), dim, 4)
        } else {
            Linear::new(pb, &format!("{name}.box.1"), dim, 4)
        };
        box_head.layers.push(out);
        Self { class_head, box_head }
    }

    pub fn logits(&self, g: &mut Graph, store: &ParamStore, emb: Var) -> Var {
        self.class_head.forward(g, store, emb)
    }

    /// Unbounded box parameters `[n, 4]` before the logistic squash.
    pub fn box_delta(&self, g: &mut Graph, store: &ParamStore, emb: Var) -> Var {
        self.box_head.forward(g, store, emb)
    }
}
