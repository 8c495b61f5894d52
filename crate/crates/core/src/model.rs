//! The full SSGA model: base detector plus one aggregation block and one set of
//! heads per refinement stage (parameters are not shared between stages).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::aggregation::AggregationBlock;
use crate::config::SsgaConfig;
use crate::detector::{Backbone, Decoder, DetectionHeads, BACKBONE_STRIDE};
use crate::error::{Result, SsgaError};
use crate::graph::{Graph, Var};
use crate::params::{ParamBuilder, ParamId, ParamStore};
use crate::tensor::Tensor;
use crate::types::{Detection, FeatureMap, FrameTensor, RefinedEmbedding};

/// Pre-activation clamp for the box squash; keeps boxes strictly in `(0, 1)`.
pub const SQUASH_LIMIT: f64 = 30.0;

/// Clamp applied before the inverse squash, equal to `squash(-SQUASH_LIMIT)`.
pub fn unsquash_eps() -> f64 {
    crate::graph::sigmoid(-SQUASH_LIMIT)
}

/// Minimum frame side accepted by the backbone.
pub const MIN_FRAME_SIDE: usize = 16;

/// Graph handles for one stage's outputs.
#[derive(Clone, Copy, Debug)]
pub struct StageVars {
    pub embedding: Var,
    pub logits: Var,
    pub boxes: Var,
}

#[derive(Clone, Debug)]
pub struct SsgaModel {
    pub config: SsgaConfig,
    pub params: ParamStore,
    pub backbone: Backbone,
    pub decoder: Decoder,
    pub queries: ParamId,
    /// `heads[0]` is the base detector's; `heads[i]` belongs to stage `i`.
    pub heads: Vec<DetectionHeads>,
    /// `blocks[i - 1]` belongs to stage `i`.
    pub blocks: Vec<AggregationBlock>,
}

impl SsgaModel {
    /// Builds a freshly initialized model. Parameters are created in a fixed
    /// declaration order, so the same seed gives the same weights.
    pub fn new(config: SsgaConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut pb = ParamBuilder::new(&mut params, ChaCha8Rng::seed_from_u64(seed));
        let c = &config;
        let backbone = Backbone::new(&mut pb, c.feature_dim);
        let decoder = Decoder::new(&mut pb, c.feature_dim, c.embed_dim, c.num_heads, c.decoder_layers);
        let queries = pb.uniform("queries", &[c.num_queries, c.embed_dim], 1.0);
        let mut heads = vec![DetectionHeads::new(&mut pb, "heads.0", c.embed_dim, c.num_classes, false)];
        let mut blocks = Vec::with_capacity(c.num_stages);
        for i in 1..=c.num_stages {
            blocks.push(AggregationBlock::new(
                &mut pb,
                &format!("stage.{i}"),
                c.feature_dim,
                c.embed_dim,
                c.num_heads,
                c.pool_size,
            ));
            heads.push(DetectionHeads::new(&mut pb, &format!("heads.{i}"), c.embed_dim, c.num_classes, true));
        }
        Ok(Self {
            config,
            params,
            backbone,
            decoder,
            queries,
            heads,
            blocks,
        })
    }

    pub fn num_stages(&self) -> usize {
        self.blocks.len()
    }

    pub fn checksum(&self) -> String {
        self.params.checksum()
    }

    pub fn check_frame(&self, frame: &FrameTensor) -> Result<()> {
        let (h, w) = (frame.height(), frame.width());
        if h < MIN_FRAME_SIDE || w < MIN_FRAME_SIDE || h % BACKBONE_STRIDE != 0 || w % BACKBONE_STRIDE != 0 {
            return Err(SsgaError::FrameDimensions {
                height: h,
                width: w,
                stride: BACKBONE_STRIDE,
            });
        }
        Ok(())
    }

    pub fn features_var(&self, g: &mut Graph, pixels: Var) -> Var {
        self.backbone.forward(g, &self.params, pixels)
    }

    pub fn backbone_forward(&self, frame: &FrameTensor) -> Result<FeatureMap> {
        self.check_frame(frame)?;
        let mut g = Graph::inference();
        let x = g.input(frame.pixels.clone());
        let f = self.features_var(&mut g, x);
        Ok(FeatureMap {
            values: g.value(f).clone(),
            stride: BACKBONE_STRIDE,
        })
    }

    pub fn learned_queries(&self) -> RefinedEmbedding {
        RefinedEmbedding(self.params.get(self.queries).clone())
    }

    pub fn decode_queries(&self, features: &FeatureMap, queries: &RefinedEmbedding) -> Result<RefinedEmbedding> {
        if queries.0.shape().len() != 2 || queries.0.cols() != self.config.embed_dim {
            return Err(SsgaError::Shape(format!(
                "queries {:?} do not match decoder width {}",
                queries.0.shape(),
                self.config.embed_dim
            )));
        }
        if features.values.shape().len() != 3 || features.channels() != self.config.feature_dim {
            return Err(SsgaError::Shape(format!("feature map {:?}", features.values.shape())));
        }
        let mut g = Graph::inference();
        let f = g.input(features.values.clone());
        let q = g.input(queries.0.clone());
        let e = self.decoder.forward(&mut g, &self.params, f, q);
        Ok(RefinedEmbedding(g.value(e).clone()))
    }

    /// Stage-`stage` heads applied without a box residual: `squash(N_box(E))`.
    pub fn predict_heads(&self, stage: usize, emb: &RefinedEmbedding) -> Result<Detection> {
        let heads = self.heads.get(stage).ok_or(SsgaError::StageOverflow {
            stage,
            num_stages: self.num_stages(),
        })?;
        if emb.0.cols() != self.config.embed_dim {
            return Err(SsgaError::Shape(format!("embedding {:?}", emb.0.shape())));
        }
        let mut g = Graph::inference();
        let e = g.input(emb.0.clone());
        let logits = heads.logits(&mut g, &self.params, e);
        let delta = heads.box_delta(&mut g, &self.params, e);
        let boxes = g.squash(delta, SQUASH_LIMIT);
        Ok(Detection {
            class_logits: g.value(logits).clone(),
            boxes: g.value(boxes).clone(),
        })
    }

    /// Stage 0 from current-frame features.
    pub fn stage0_var(&self, g: &mut Graph, features: Var) -> StageVars {
        let q = g.param(&self.params, self.queries);
        let embedding = self.decoder.forward(g, &self.params, features, q);
        let heads = &self.heads[0];
        let logits = heads.logits(g, &self.params, embedding);
        let delta = heads.box_delta(g, &self.params, embedding);
        let boxes = g.squash(delta, SQUASH_LIMIT);
        StageVars {
            embedding,
            logits,
            boxes,
        }
    }

    /// Refinement stage `stage ≥ 1` using one neighbour feature map. `alpha`
    /// and the stage's `beta` are read from `cfg`, which may differ from the
    /// training config in its inference-time fields.
    pub fn refine_var(&self, g: &mut Graph, cfg: &SsgaConfig, stage: usize, prev: StageVars, neighbor: Var) -> Result<StageVars> {
        let limit = self.num_stages().min(cfg.num_stages);
        if stage == 0 || stage > limit {
            return Err(SsgaError::StageOverflow {
                stage,
                num_stages: limit,
            });
        }
        let beta = cfg.beta_schedule[stage - 1];
        let block = &self.blocks[stage - 1];
        let embedding = block.aggregate_var(g, &self.params, prev.embedding, neighbor, prev.boxes, beta);
        let heads = &self.heads[stage];
        let logits = heads.logits(g, &self.params, embedding);
        let delta = heads.box_delta(g, &self.params, embedding);
        let prev_logit = g.logit(prev.boxes, unsquash_eps());
        let residual = g.scale(prev_logit, cfg.alpha);
        let pre = g.add(delta, residual);
        let boxes = g.squash(pre, SQUASH_LIMIT);
        Ok(StageVars {
            embedding,
            logits,
            boxes,
        })
    }

    /// Parameter tensors in declaration order with their names.
    pub fn named_parameters(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny_config() -> SsgaConfig {
        SsgaConfig {
            num_queries: 6,
            embed_dim: 8,
            feature_dim: 8,
            num_heads: 2,
            decoder_layers: 1,
            pool_size: 2,
            ..SsgaConfig::default()
        }
    }

    fn frame(seed: u64, side: usize) -> FrameTensor {
        let n = 3 * side * side;
        let data = (0..n).map(|i| ((i as u64 * 2654435761 + seed * 97) % 1000) as f64 / 999.0).collect();
        FrameTensor::new(Tensor::new(vec![3, side, side], data).unwrap(), 0).unwrap()
    }

    #[test]
    fn backbone_shapes_and_determinism() {
        let m = SsgaModel::new(tiny_config(), 1).unwrap();
        let f = frame(1, 64);
        let a = m.backbone_forward(&f).unwrap();
        assert_eq!(a.values.shape(), &[8, 8, 8]);
        assert_eq!(a, m.backbone_forward(&f).unwrap());
        let bad = FrameTensor::new(Tensor::zeros(&[3, 20, 24]), 0).unwrap();
        assert!(matches!(m.backbone_forward(&bad), Err(SsgaError::FrameDimensions { .. })));
    }

    #[test]
    fn zero_frame_with_zero_biases_gives_zero_features() {
        // conv biases start at zero, so a black frame stays black through ReLU
        let m = SsgaModel::new(tiny_config(), 2).unwrap();
        let f = FrameTensor::new(Tensor::zeros(&[3, 32, 32]), 0).unwrap();
        assert!(m.backbone_forward(&f).unwrap().values.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn decoder_single_cell_single_query() {
        let cfg = SsgaConfig {
            num_queries: 1,
            ..tiny_config()
        };
        let m = SsgaModel::new(cfg, 3).unwrap();
        let fm = FeatureMap {
            values: Tensor::full(&[8, 1, 1], 0.3),
            stride: 8,
        };
        let mut g = Graph::inference();
        let f = g.input(fm.values.clone());
        let mem = m.decoder.memory(&mut g, &m.params, f);
        let q = g.input(m.learned_queries().0);
        let a = m.decoder.layers[0].cross_attn.attend(&mut g, &m.params, q, mem);
        assert!(a.weights.iter().all(|w| g.value(*w).data() == [1.0]));
        let out = m.decode_queries(&fm, &m.learned_queries()).unwrap();
        assert_eq!(out.0.shape(), &[1, 8]);
    }

    #[test]
    fn decoder_is_permutation_equivariant() {
        let m = SsgaModel::new(tiny_config(), 4).unwrap();
        let fm = m.backbone_forward(&frame(4, 32)).unwrap();
        let q = m.learned_queries();
        let perm = [5, 3, 0, 1, 4, 2];
        let a = m.decode_queries(&fm, &q).unwrap();
        let b = m.decode_queries(&fm, &RefinedEmbedding(q.0.permute_rows(&perm))).unwrap();
        assert!(b.0.max_abs_diff(&a.0.permute_rows(&perm)) < 1e-12);
        assert!(m.decode_queries(&fm, &RefinedEmbedding(Tensor::zeros(&[6, 5]))).is_err());
    }

    #[test]
    fn zero_box_head_gives_half_boxes() {
        let mut m = SsgaModel::new(tiny_config(), 5).unwrap();
        let last = m.heads[0].box_head.layers.last().unwrap().clone();
        m.params.get_mut(last.weight).data_mut().fill(0.0);
        m.params.get_mut(last.bias).data_mut().fill(0.0);
        let emb = RefinedEmbedding(Tensor::full(&[6, 8], 0.7));
        let d = m.predict_heads(0, &emb).unwrap();
        assert!(d.boxes.data().iter().all(|&b| b == 0.5));
        assert_eq!(d.class_logits.shape(), &[6, 5]);
    }

    #[test]
    fn boxes_stay_strictly_inside_unit_interval() {
        let m = SsgaModel::new(tiny_config(), 6).unwrap();
        for scale in [1.0, 1e3, 1e8, -1e8] {
            let emb = RefinedEmbedding(Tensor::new(vec![6, 8], (0..48).map(|i| scale * ((i % 7) as f64 - 3.0)).collect()).unwrap());
            let d = m.predict_heads(0, &emb).unwrap();
            assert!(d.boxes.data().iter().all(|&b| b > 0.0 && b < 1.0), "{scale}");
        }
    }

    #[test]
    fn parameter_order_is_reproducible() {
        let a = SsgaModel::new(tiny_config(), 7).unwrap();
        let b = SsgaModel::new(tiny_config(), 7).unwrap();
        assert_eq!(a.checksum(), b.checksum());
        assert_ne!(a.checksum(), SsgaModel::new(tiny_config(), 8).unwrap().checksum());
        assert_eq!(a.heads.len(), 5);
        assert_eq!(a.blocks.len(), 4);
    }
}
