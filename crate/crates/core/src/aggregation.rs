//! Spatial global-local aggregation.
//!
//! One block refines the previous stage's query embeddings with a single
//! neighbouring frame:
//!
//! 1. `global_map` projects the previous embeddings (an MLP) into keys/values.
//! 2. `roi_extract` samples a `p × p` ROI-Align grid from the neighbour's
//!    feature map around each query's previous box, enlarged by `beta`.
//! 3. `cross_attend` lets every local token attend over all global rows; the
//!    token outputs of a query are mean-pooled and output-projected.
//! 4. `fuse_and_project` adds the result to the previous embeddings, layer
//!    normalizes, and applies a residual feed-forward block.

use crate::error::{Result, SsgaError};
use crate::graph::{Graph, Var};
use crate::nn::{LayerNorm, Mlp, MultiHeadAttention};
use crate::params::{ParamBuilder, ParamStore};
use crate::tensor::Tensor;
use crate::types::{FeatureMap, RefinedEmbedding};

/// Attention block used for the local→global cross attention.
pub type AttentionBlock = MultiHeadAttention;

/// Globally mapped previous-stage embeddings `[n, d_g]`.
#[derive(Clone, Debug, PartialEq)]
pub struct GlobalFeature(pub Tensor);

/// Pooled neighbour features: `[n, p·p, d_f]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalFeature {
    pub values: Tensor,
    pub pool: usize,
}

impl LocalFeature {
    pub fn num_queries(&self) -> usize {
        self.values.shape()[0]
    }

    /// Token matrix `[n·p·p, d_f]`.
    pub fn tokens(&self) -> Tensor {
        let s = self.values.shape();
        self.values.clone().reshaped(&[s[0] * s[1], s[2]]).expect("token reshape")
    }
}

#[derive(Clone, Debug)]
pub struct AggregationBlock {
    pub global_map: Mlp,
    pub attention: AttentionBlock,
    pub norm: LayerNorm,
    pub ffn: Mlp,
    pub pool: usize,
}

impl AggregationBlock {
    pub fn new(pb: &mut ParamBuilder<'_>, name: &str, feature_dim: usize, dim: usize, heads: usize, pool: usize) -> Self {
        Self {
            global_map: Mlp::new(pb, &format!("{name}.global_map"), &[dim, 2 * dim, dim]),
            attention: MultiHeadAttention::new(pb, &format!("{name}.cross_attn"), feature_dim, dim, dim, heads),
            norm: LayerNorm::new(pb, &format!("{name}.norm"), dim),
            ffn: Mlp::new(pb, &format!("{name}.ffn"), &[dim, 2 * dim, dim]),
            pool,
        }
    }

    pub fn global_map_var(&self, g: &mut Graph, store: &ParamStore, prev: Var) -> Var {
        self.global_map.forward(g, store, prev)
    }

    /// Local tokens `[n·p·p, d_f]`.
    pub fn roi_extract_var(&self, g: &mut Graph, boxes: Var, fmap: Var, beta: f64) -> Var {
        g.roi_align(fmap, boxes, beta, self.pool)
    }

    /// Returns the pooled, output-projected attention result `[n, d]` and the
    /// per-head attention weights `[n·p·p, n]`.
    pub fn cross_attend_var(&self, g: &mut Graph, store: &ParamStore, local: Var, global: Var) -> (Var, Vec<Var>) {
        let a = self.attention.attend(g, store, local, global);
        let pooled = g.mean_row_groups(a.heads_out, self.pool * self.pool);
        let out = self.attention.out_proj.forward(g, store, pooled);
        (out, a.weights)
    }

    pub fn fuse_and_project_var(&self, g: &mut Graph, store: &ParamStore, attended: Var, prev: Var) -> Var {
        let sum = g.add(attended, prev);
        let normed = self.norm.forward(g, store, sum);
        let ff = self.ffn.forward(g, store, normed);
        g.add(normed, ff)
    }

    /// The whole block: `fuse(cross_attend(roi(B, F, beta), global_map(E)), E)`.
    pub fn aggregate_var(&self, g: &mut Graph, store: &ParamStore, prev: Var, fmap: Var, prev_boxes: Var, beta: f64) -> Var {
        let local = self.roi_extract_var(g, prev_boxes, fmap, beta);
        let global = self.global_map_var(g, store, prev);
        let (attended, _) = self.cross_attend_var(g, store, local, global);
        self.fuse_and_project_var(g, store, attended, prev)
    }

    pub fn global_map(&self, store: &ParamStore, prev: &RefinedEmbedding) -> GlobalFeature {
        let mut g = Graph::inference();
        let x = g.input(prev.0.clone());
        let y = self.global_map_var(&mut g, store, x);
        GlobalFeature(g.value(y).clone())
    }

    pub fn cross_attend(&self, store: &ParamStore, local: &LocalFeature, global: &GlobalFeature) -> Result<(RefinedEmbedding, Vec<Tensor>)> {
        if local.pool != self.pool {
            return Err(SsgaError::Shape(format!("local pool {} vs block pool {}", local.pool, self.pool)));
        }
        if local.values.shape()[2] != self.attention.q_proj.in_dim || global.0.cols() != self.attention.k_proj.in_dim {
            return Err(SsgaError::Shape("local/global widths do not match the attention block".into()));
        }
        let mut g = Graph::inference();
        let l = g.input(local.tokens());
        let gl = g.input(global.0.clone());
        let (out, weights) = self.cross_attend_var(&mut g, store, l, gl);
        Ok((
            RefinedEmbedding(g.value(out).clone()),
            weights.into_iter().map(|w| g.value(w).clone()).collect(),
        ))
    }

    pub fn fuse_and_project(&self, store: &ParamStore, attended: &RefinedEmbedding, prev: &RefinedEmbedding) -> Result<RefinedEmbedding> {
        if attended.0.shape() != prev.0.shape() {
            return Err(SsgaError::Shape(format!(
                "attended {:?} vs previous {:?}",
                attended.0.shape(),
                prev.0.shape()
            )));
        }
        let mut g = Graph::inference();
        let a = g.input(attended.0.clone());
        let p = g.input(prev.0.clone());
        let y = self.fuse_and_project_var(&mut g, store, a, p);
        Ok(RefinedEmbedding(g.value(y).clone()))
    }

    pub fn aggregate_stage(
        &self,
        store: &ParamStore,
        prev: &RefinedEmbedding,
        neighbor: &FeatureMap,
        prev_boxes: &Tensor,
        beta: f64,
    ) -> Result<RefinedEmbedding> {
        if prev.0.rows() != prev_boxes.rows() {
            return Err(SsgaError::Shape("embedding and box row counts differ".into()));
        }
        let mut g = Graph::inference();
        let e = g.input(prev.0.clone());
        let f = g.input(neighbor.values.clone());
        let b = g.input(prev_boxes.clone());
        let y = self.aggregate_var(&mut g, store, e, f, b, beta);
        Ok(RefinedEmbedding(g.value(y).clone()))
    }
}

/// ROI-Align extraction of `boxes [n, 4]` from a feature map.
pub fn roi_extract(boxes: &Tensor, fmap: &FeatureMap, beta: f64, pool: usize) -> Result<LocalFeature> {
    if boxes.shape().len() != 2 || boxes.cols() != 4 {
        return Err(SsgaError::Shape(format!("boxes must be [n, 4], got {:?}", boxes.shape())));
    }
    if !(beta > 0.0) || pool == 0 {
        return Err(SsgaError::Config("beta must be positive and pool at least 1".into()));
    }
    let mut g = Graph::inference();
    let f = g.input(fmap.values.clone());
    let b = g.input(boxes.clone());
    let y = g.roi_align(f, b, beta, pool);
    let n = boxes.rows();
    let values = g.value(y).clone().reshaped(&[n, pool * pool, fmap.channels()])?;
    Ok(LocalFeature { values, pool })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn block(seed: u64, fdim: usize, dim: usize, heads: usize, pool: usize) -> (ParamStore, AggregationBlock) {
        let mut store = ParamStore::new();
        let mut pb = ParamBuilder::new(&mut store, ChaCha8Rng::seed_from_u64(seed));
        let b = AggregationBlock::new(&mut pb, "agg", fdim, dim, heads, pool);
        (store, b)
    }

    fn fmap(values: Tensor) -> FeatureMap {
        FeatureMap { values, stride: 8 }
    }

    #[test]
    fn global_map_shapes_and_zero_weights() {
        let (mut store, b) = block(1, 6, 8, 2, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let e = RefinedEmbedding(rand_tensor(&mut rng, &[5, 8]));
        assert_eq!(b.global_map(&store, &e).0.shape(), &[5, 8]);
        for l in &b.global_map.layers {
            store.get_mut(l.weight).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        assert!(b.global_map(&store, &e).0.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_identity_layer_passes_input_through() {
        let mut store = ParamStore::new();
        let mut pb = ParamBuilder::new(&mut store, ChaCha8Rng::seed_from_u64(3));
        let mlp = Mlp::new(&mut pb, "p", &[4, 4]);
        let w = store.get_mut(mlp.layers[0].weight).data_mut();
        w.iter_mut().enumerate().for_each(|(i, v)| *v = if i % 5 == 0 { 1.0 } else { 0.0 });
        let x = Tensor::from_rows(&[vec![0.0, 1.0, 2.5, 0.25], vec![3.0, 0.0, 0.5, 7.0]]).unwrap();
        let mut g = Graph::inference();
        let xv = g.input(x.clone());
        let y = mlp.forward(&mut g, &store, xv);
        assert_eq!(g.value(y), &x);
    }

    #[test]
    fn roi_of_constant_map_is_constant() {
        let f = fmap(Tensor::full(&[3, 8, 8], 5.0));
        let boxes = Tensor::from_rows(&[vec![0.3, 0.4, 0.2, 0.5], vec![0.9, 0.1, 0.3, 0.3]]).unwrap();
        let local = roi_extract(&boxes, &f, 1.0, 2).unwrap();
        assert_eq!(local.values.shape(), &[2, 4, 3]);
        assert!(local.values.data().iter().all(|&v| (v - 5.0).abs() < 1e-12));
    }

    #[test]
    fn cross_attend_single_global_row() {
        let (store, b) = block(4, 3, 4, 2, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let local = LocalFeature {
            values: rand_tensor(&mut rng, &[1, 4, 3]),
            pool: 2,
        };
        let global = GlobalFeature(rand_tensor(&mut rng, &[1, 4]));
        let (out, weights) = b.cross_attend(&store, &local, &global).unwrap();
        assert!(weights.iter().all(|w| w.data().iter().all(|&v| v == 1.0)));
        // every token attends fully to the one value row, so the pooled output is
        // out_proj(v_proj(global))
        let mut g = Graph::inference();
        let gv = g.input(global.0.clone());
        let v = b.attention.v_proj.forward(&mut g, &store, gv);
        let o = b.attention.out_proj.forward(&mut g, &store, v);
        assert!(out.0.max_abs_diff(g.value(o)) < 1e-12);
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let (store, b) = block(6, 5, 8, 4, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let local = LocalFeature {
            values: rand_tensor(&mut rng, &[4, 9, 5]).map(|v| v * 10.0),
            pool: 3,
        };
        let global = GlobalFeature(rand_tensor(&mut rng, &[4, 8]).map(|v| v * 10.0));
        let (_, weights) = b.cross_attend(&store, &local, &global).unwrap();
        assert_eq!(weights.len(), 4);
        for w in weights {
            assert_eq!(w.shape(), &[36, 4]);
            for r in 0..w.rows() {
                assert!((w.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn fuse_collapses_to_layer_norm_of_previous() {
        let (mut store, b) = block(8, 4, 6, 2, 2);
        for l in &b.ffn.layers {
            store.get_mut(l.weight).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let prev = RefinedEmbedding(rand_tensor(&mut rng, &[3, 6]));
        let zero = RefinedEmbedding(Tensor::zeros(&[3, 6]));
        let out = b.fuse_and_project(&store, &zero, &prev).unwrap();
        for r in 0..3 {
            let row = prev.0.row(r);
            let mean = row.iter().sum::<f64>() / 6.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 6.0;
            for c in 0..6 {
                let expect = (row[c] - mean) / (var + crate::nn::LN_EPS).sqrt();
                assert!((out.0.get2(r, c) - expect).abs() < 1e-12);
            }
        }
        assert!(b.fuse_and_project(&store, &zero, &RefinedEmbedding(Tensor::zeros(&[2, 6]))).is_err());
    }

    #[test]
    fn aggregate_is_the_chained_composition() {
        let (store, b) = block(10, 5, 8, 2, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let prev = RefinedEmbedding(rand_tensor(&mut rng, &[3, 8]));
        let f = fmap(rand_tensor(&mut rng, &[5, 4, 4]));
        let boxes = Tensor::from_rows(&[
            vec![0.3, 0.4, 0.2, 0.3],
            vec![0.6, 0.5, 0.4, 0.2],
            vec![0.1, 0.9, 0.15, 0.1],
        ])
        .unwrap();
        let out = b.aggregate_stage(&store, &prev, &f, &boxes, 1.5).unwrap();
        let local = roi_extract(&boxes, &f, 1.5, 2).unwrap();
        let global = b.global_map(&store, &prev);
        let (att, _) = b.cross_attend(&store, &local, &global).unwrap();
        let chained = b.fuse_and_project(&store, &att, &prev).unwrap();
        assert_eq!(out, chained);
        assert_eq!(out.0.shape(), &[3, 8]);
    }

    #[test]
    fn aggregate_permutes_with_queries() {
        let (store, b) = block(12, 4, 8, 2, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let prev = RefinedEmbedding(rand_tensor(&mut rng, &[4, 8]));
        let f = fmap(rand_tensor(&mut rng, &[4, 6, 6]));
        let boxes = Tensor::new(vec![4, 4], (0..16).map(|_| rng.gen_range(0.2..0.7)).collect()).unwrap();
        let perm = [2, 0, 3, 1];
        let out = b.aggregate_stage(&store, &prev, &f, &boxes, 1.5).unwrap();
        let pout = b
            .aggregate_stage(&store, &RefinedEmbedding(prev.0.permute_rows(&perm)), &f, &boxes.permute_rows(&perm), 1.5)
            .unwrap();
        assert!(pout.0.max_abs_diff(&out.0.permute_rows(&perm)) < 1e-12);
    }

    fn linear_ref(store: &ParamStore, l: &crate::nn::Linear, x: &[f64]) -> Vec<f64> {
        let w = store.get(l.weight);
        let b = store.get(l.bias);
        (0..l.out_dim)
            .map(|o| b.data()[o] + (0..l.in_dim).map(|i| x[i] * w.get2(i, o)).sum::<f64>())
            .collect()
    }

    fn mlp_ref(store: &ParamStore, mlp: &Mlp, x: &[f64]) -> Vec<f64> {
        let mut h = x.to_vec();
        for (i, l) in mlp.layers.iter().enumerate() {
            h = linear_ref(store, l, &h);
            if i + 1 < mlp.layers.len() {
                h.iter_mut().for_each(|v| *v = v.max(0.0));
            }
        }
        h
    }

    #[test]
    fn cross_attend_matches_naive_loops() {
        let (store, b) = block(14, 5, 8, 2, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let (n, t) = (3, 4);
        let local = LocalFeature {
            values: rand_tensor(&mut rng, &[n, t, 5]),
            pool: 2,
        };
        let global = GlobalFeature(rand_tensor(&mut rng, &[n, 8]));
        let (out, _) = b.cross_attend(&store, &local, &global).unwrap();
        let att = &b.attention;
        let dh = att.dim / att.heads;
        let keys: Vec<Vec<f64>> = (0..n).map(|j| linear_ref(&store, &att.k_proj, global.0.row(j))).collect();
        let vals: Vec<Vec<f64>> = (0..n).map(|j| linear_ref(&store, &att.v_proj, global.0.row(j))).collect();
        for qi in 0..n {
            let mut pooled = vec![0.0; att.dim];
            for ti in 0..t {
                let token: Vec<f64> = (0..5).map(|c| local.values.data()[(qi * t + ti) * 5 + c]).collect();
                let q = linear_ref(&store, &att.q_proj, &token);
                for h in 0..att.heads {
                    let cols = h * dh..(h + 1) * dh;
                    let scores: Vec<f64> = keys
                        .iter()
                        .map(|k| cols.clone().map(|c| q[c] * k[c]).sum::<f64>() / (dh as f64).sqrt())
                        .collect();
                    let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let z: f64 = scores.iter().map(|s| (s - m).exp()).sum();
                    for (j, s) in scores.iter().enumerate() {
                        let w = (s - m).exp() / z;
                        for c in cols.clone() {
                            pooled[c] += w * vals[j][c] / t as f64;
                        }
                    }
                }
            }
            let expect = linear_ref(&store, &att.out_proj, &pooled);
            for c in 0..att.dim {
                assert!((out.0.get2(qi, c) - expect[c]).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn fuse_matches_step_by_step_composition() {
        let (store, b) = block(16, 4, 6, 2, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let att = RefinedEmbedding(rand_tensor(&mut rng, &[3, 6]));
        let prev = RefinedEmbedding(rand_tensor(&mut rng, &[3, 6]));
        let out = b.fuse_and_project(&store, &att, &prev).unwrap();
        let (gamma, beta) = (store.get(b.norm.gamma), store.get(b.norm.beta));
        for r in 0..3 {
            let sum: Vec<f64> = (0..6).map(|c| att.0.get2(r, c) + prev.0.get2(r, c)).collect();
            let mean = sum.iter().sum::<f64>() / 6.0;
            let var = sum.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 6.0;
            let normed: Vec<f64> = (0..6)
                .map(|c| (sum[c] - mean) / (var + crate::nn::LN_EPS).sqrt() * gamma.data()[c] + beta.data()[c])
                .collect();
            let ff = mlp_ref(&store, &b.ffn, &normed);
            for c in 0..6 {
                assert!((out.0.get2(r, c) - (normed[c] + ff[c])).abs() < 1e-12);
            }
        }
    }

    /// Bilinear sampling as a sum of tent weights over every cell.
    fn dense_sample(map: &Tensor, x: f64, y: f64) -> Vec<f64> {
        let (c, h, w) = (map.shape()[0], map.shape()[1], map.shape()[2]);
        let u = (x * w as f64 - 0.5).clamp(0.0, (w - 1) as f64);
        let v = (y * h as f64 - 0.5).clamp(0.0, (h - 1) as f64);
        (0..c)
            .map(|ch| {
                let mut s = 0.0;
                for j in 0..h {
                    for i in 0..w {
                        let k = (1.0 - (u - i as f64).abs()).max(0.0) * (1.0 - (v - j as f64).abs()).max(0.0);
                        s += k * map.data()[(ch * h + j) * w + i];
                    }
                }
                s
            })
            .collect()
    }

    #[test]
    fn ramp_map_matches_dense_bilinear_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let map = Tensor::new(
            vec![2, 5, 7],
            (0..70).map(|i| if i < 35 { (i % 7) as f64 * 0.5 } else { ((i - 35) / 7) as f64 - 2.0 }).collect(),
        )
        .unwrap();
        for _ in 0..50 {
            let b = [
                rng.gen_range(0.05..0.95),
                rng.gen_range(0.05..0.95),
                rng.gen_range(0.05..0.6),
                rng.gen_range(0.05..0.6),
            ];
            let local = roi_extract(&Tensor::new(vec![1, 4], b.to_vec()).unwrap(), &fmap(map.clone()), 1.5, 3).unwrap();
            for (t, (x, y)) in crate::roi::sample_points(b, 1.5, 3).into_iter().enumerate() {
                let expect = dense_sample(&map, x, y);
                for ch in 0..2 {
                    assert!((local.values.data()[t * 2 + ch] - expect[ch]).abs() <= 1e-6);
                }
            }
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn arb_box() -> impl Strategy<Value = [f64; 4]> {
            (0.0..1.0f64, 0.0..1.0f64, 0.01..0.9f64, 0.01..0.9f64).prop_map(|(x, y, w, h)| [x, y, w, h])
        }

        proptest! {
            #[test]
            fn roi_is_linear_in_the_map(
                seed in any::<u64>(),
                b in arb_box(),
                beta in 0.25..3.0f64,
                a in -3.0..3.0f64,
                c in -3.0..3.0f64,
                pool in 1usize..4,
            ) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let f1 = rand_tensor(&mut rng, &[2, 6, 5]);
                let f2 = rand_tensor(&mut rng, &[2, 6, 5]);
                let mix = Tensor::new(vec![2, 6, 5], f1.data().iter().zip(f2.data()).map(|(x, y)| a * x + c * y).collect()).unwrap();
                let boxes = Tensor::new(vec![1, 4], b.to_vec()).unwrap();
                let r = |m: &Tensor| roi_extract(&boxes, &fmap(m.clone()), beta, pool).unwrap().values;
                let (r1, r2, rm) = (r(&f1), r(&f2), r(&mix));
                for i in 0..rm.numel() {
                    prop_assert!((rm.data()[i] - (a * r1.data()[i] + c * r2.data()[i])).abs() <= 1e-6);
                }
            }

            #[test]
            fn constant_map_gives_constant_tokens(value in -10.0..10.0f64, b in arb_box(), beta in 0.25..3.0f64) {
                let boxes = Tensor::new(vec![1, 4], b.to_vec()).unwrap();
                let local = roi_extract(&boxes, &fmap(Tensor::full(&[3, 4, 4], value)), beta, 2).unwrap();
                prop_assert!(local.values.data().iter().all(|v| (v - value).abs() < 1e-12));
            }
        }
    }
}
