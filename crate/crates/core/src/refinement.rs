//! The stage loop: base detection, per-stage refinement with one neighbour
//! frame each, neighbour ordering and the early stop.

use crate::config::{SsgaConfig, StopThreshold};
use crate::error::{Result, SsgaError};
use crate::graph::{Graph, Var};
use crate::loss::{detection_loss, detection_loss_var, LossWeights};
use crate::model::{SsgaModel, StageVars};
use crate::strategy::{neighbor_ordering, stop_criterion, CosineStop, NeighborOrdering, StopCriterion};
use crate::types::{Detection, FeatureMap, FrameId, FrameTensor, GroundTruth, RefinedEmbedding};

#[derive(Clone, Debug, PartialEq)]
pub struct StageState {
    pub stage_index: usize,
    pub embedding: RefinedEmbedding,
    pub detection: Detection,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Neighbor {
    pub frame_id: FrameId,
    pub features: FeatureMap,
}

/// Previous frames in the order the stages consume them.
#[derive(Clone, Debug, PartialEq)]
pub struct NeighborSequence {
    current_id: FrameId,
    items: Vec<Neighbor>,
}

impl NeighborSequence {
    /// Validates causality and uniqueness but keeps the given order.
    pub fn new(current_id: FrameId, items: Vec<Neighbor>) -> Result<Self> {
        let mut seen = std::collections::BTreeSet::new();
        for n in &items {
            if n.frame_id >= current_id {
                return Err(SsgaError::FutureFrame {
                    frame_id: n.frame_id,
                    current_id,
                });
            }
            if !seen.insert(n.frame_id) {
                return Err(SsgaError::Shape(format!("neighbour frame {} listed twice", n.frame_id)));
            }
        }
        Ok(Self { current_id, items })
    }

    pub fn empty(current_id: FrameId) -> Self {
        Self {
            current_id,
            items: Vec::new(),
        }
    }

    pub fn current_id(&self) -> FrameId {
        self.current_id
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Neighbor> {
        self.items.iter()
    }

    pub fn frame_ids(&self) -> Vec<FrameId> {
        self.items.iter().map(|n| n.frame_id).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopReason {
    /// Ran every stage allowed by the config and the available neighbours.
    Exhausted,
    /// The stop criterion fired.
    EarlyStop,
    /// Capped by the forced stage count.
    Forced,
}

impl StopReason {
    pub fn as_str(self) -> &'static str {
        match self {
            StopReason::Exhausted => "exhausted",
            StopReason::EarlyStop => "earlyStop",
            StopReason::Forced => "forced",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RefinementTrace {
    pub states: Vec<StageState>,
    pub stop_reason: StopReason,
}

impl RefinementTrace {
    pub fn stages_executed(&self) -> usize {
        self.states.len() - 1
    }

    pub fn final_state(&self) -> &StageState {
        self.states.last().expect("trace always holds stage 0")
    }

    pub fn detection(&self) -> &Detection {
        &self.final_state().detection
    }
}

fn state_from(g: &Graph, stage_index: usize, v: StageVars) -> StageState {
    StageState {
        stage_index,
        embedding: RefinedEmbedding(g.value(v.embedding).clone()),
        detection: Detection {
            class_logits: g.value(v.logits).clone(),
            boxes: g.value(v.boxes).clone(),
        },
    }
}

/// Stage 0 from precomputed features of the current frame.
pub fn init_stage_from_features(model: &SsgaModel, features: &FeatureMap) -> StageState {
    let mut g = Graph::inference();
    let f = g.input(features.values.clone());
    let v = model.stage0_var(&mut g, f);
    state_from(&g, 0, v)
}

pub fn init_stage(model: &SsgaModel, frame: &FrameTensor) -> Result<StageState> {
    let features = model.backbone_forward(frame)?;
    Ok(init_stage_from_features(model, &features))
}

pub fn refine_stage(model: &SsgaModel, prev: &StageState, neighbor: &FeatureMap, config: &SsgaConfig) -> Result<StageState> {
    let stage = prev.stage_index + 1;
    if neighbor.channels() != model.config.feature_dim {
        return Err(SsgaError::Shape(format!("neighbour feature map {:?}", neighbor.values.shape())));
    }
    let mut g = Graph::inference();
    let prev_vars = StageVars {
        embedding: g.input(prev.embedding.0.clone()),
        logits: g.input(prev.detection.class_logits.clone()),
        boxes: g.input(prev.detection.boxes.clone()),
    };
    let f = g.input(neighbor.values.clone());
    let v = model.refine_var(&mut g, config, stage, prev_vars, f)?;
    Ok(state_from(&g, stage, v))
}

/// Orders previous frames with the given strategy. Any frame at or after
/// `current_id` is rejected.
pub fn order_neighbors(available: Vec<Neighbor>, current_id: FrameId, ordering: &dyn NeighborOrdering) -> Result<NeighborSequence> {
    if let Some(n) = available.iter().find(|n| n.frame_id >= current_id) {
        return Err(SsgaError::FutureFrame {
            frame_id: n.frame_id,
            current_id,
        });
    }
    let ids: Vec<FrameId> = available.iter().map(|n| n.frame_id).collect();
    let order = ordering.order(&ids, current_id);
    let mut slots: Vec<Option<Neighbor>> = available.into_iter().map(Some).collect();
    let items = order.into_iter().map(|i| slots[i].take().expect("order is a permutation")).collect();
    NeighborSequence::new(current_id, items)
}

pub fn should_stop(curr: &RefinedEmbedding, prev: &RefinedEmbedding, delta: StopThreshold) -> bool {
    match delta {
        StopThreshold::Cosine(delta) => CosineStop { delta }.should_stop(&curr.0, &prev.0),
        StopThreshold::Never => false,
    }
}

/// Runs stage 0 and then up to `min(l, neighbours, force_stages)` refinement
/// stages, checking the stop rule after every refinement stage.
pub fn run_refinement(
    model: &SsgaModel,
    frame: &FrameTensor,
    neighbors: &NeighborSequence,
    config: &SsgaConfig,
    force_stages: Option<usize>,
) -> Result<RefinementTrace> {
    if neighbors.current_id() != frame.frame_id {
        return Err(SsgaError::Shape(format!(
            "neighbours were ordered for frame {}, not {}",
            neighbors.current_id(),
            frame.frame_id
        )));
    }
    let features = model.backbone_forward(frame)?;
    let stop = stop_criterion(&config.stop_criterion, config.delta)?;
    run_refinement_with(model, &features, neighbors, config, force_stages, stop.as_ref())
}

/// [`run_refinement`] with the current frame's features already computed.
pub fn run_refinement_with(
    model: &SsgaModel,
    features: &FeatureMap,
    neighbors: &NeighborSequence,
    config: &SsgaConfig,
    force_stages: Option<usize>,
    stop: &dyn StopCriterion,
) -> Result<RefinementTrace> {
    let cap = config.num_stages.min(model.num_stages());
    if neighbors.len() > cap {
        return Err(SsgaError::Config(format!(
            "{} neighbours supplied for {} stages",
            neighbors.len(),
            cap
        )));
    }
    let natural = cap.min(neighbors.len());
    let budget = force_stages.map_or(natural, |k| k.min(natural));
    let mut states = vec![init_stage_from_features(model, features)];
    for n in neighbors.iter().take(budget) {
        let next = refine_stage(model, states.last().expect("non-empty"), &n.features, config)?;
        let halt = stop.should_stop(&next.embedding.0, &states.last().expect("non-empty").embedding.0);
        states.push(next);
        if halt {
            return Ok(RefinementTrace {
                states,
                stop_reason: StopReason::EarlyStop,
            });
        }
    }
    let stop_reason = if budget < natural { StopReason::Forced } else { StopReason::Exhausted };
    Ok(RefinementTrace { states, stop_reason })
}

/// Orders `available` with the configured strategy and runs the loop.
pub fn refine_frame(model: &SsgaModel, frame: &FrameTensor, available: Vec<Neighbor>, config: &SsgaConfig, force_stages: Option<usize>) -> Result<RefinementTrace> {
    let ordering = neighbor_ordering(config)?;
    let seq = order_neighbors(available, frame.frame_id, ordering.as_ref())?;
    run_refinement(model, frame, &seq, config, force_stages)
}

/// Sum of the per-stage set losses, each with its own matching.
pub fn training_loss_all_stages(trace: &RefinementTrace, gt: &GroundTruth, weights: &LossWeights) -> Result<f64> {
    trace.states.iter().map(|s| detection_loss(&s.detection, gt, weights)).sum()
}

/// Graph-level forward of all stages for training. `neighbors` are feature
/// map handles in consumption order; every one of them is used.
pub fn stages_var(model: &SsgaModel, g: &mut Graph, config: &SsgaConfig, pixels: Var, neighbors: &[Var]) -> Result<Vec<StageVars>> {
    let features = model.features_var(g, pixels);
    let mut out = vec![model.stage0_var(g, features)];
    for (i, &n) in neighbors.iter().enumerate() {
        let prev = *out.last().expect("non-empty");
        out.push(model.refine_var(g, config, i + 1, prev, n)?);
    }
    Ok(out)
}

/// Per-stage loss handles and their sum.
pub fn training_loss_var(g: &mut Graph, stages: &[StageVars], gt: &GroundTruth, weights: &LossWeights) -> Result<(Var, Vec<Var>)> {
    let mut terms = Vec::with_capacity(stages.len());
    for s in stages {
        terms.push(detection_loss_var(g, s.logits, s.boxes, gt, weights)?);
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = g.add(total, t);
    }
    Ok((total, terms))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::strategy::{Ascending, Descending};
    use crate::tensor::Tensor;
    use crate::types::GtObject;

    fn config() -> SsgaConfig {
        SsgaConfig {
            num_queries: 5,
            embed_dim: 8,
            feature_dim: 8,
            num_heads: 2,
            decoder_layers: 1,
            pool_size: 2,
            ..SsgaConfig::default()
        }
    }

    fn frame(id: FrameId) -> FrameTensor {
        let side = 32;
        let data = (0..3 * side * side)
            .map(|i| (((i as u64) * 7919 + id * 104729) % 997) as f64 / 996.0)
            .collect();
        FrameTensor::new(Tensor::new(vec![3, side, side], data).unwrap(), id).unwrap()
    }

    /// Model with non-trivial refinement heads so stages actually move boxes.
    fn model() -> SsgaModel {
        let mut m = SsgaModel::new(config(), 11).unwrap();
        for h in &m.heads[1..] {
            let last = h.box_head.layers.last().unwrap();
            let w = m.params.get_mut(last.weight);
            w.data_mut().iter_mut().enumerate().for_each(|(i, v)| *v = ((i % 5) as f64 - 2.0) * 0.05);
        }
        m
    }

    fn neighbors(m: &SsgaModel, current: FrameId, ids: &[FrameId]) -> NeighborSequence {
        let avail = ids
            .iter()
            .map(|&id| Neighbor {
                frame_id: id,
                features: m.backbone_forward(&frame(id)).unwrap(),
            })
            .collect();
        order_neighbors(avail, current, &Descending).unwrap()
    }

    #[test]
    fn stage_zero_is_the_base_detector() {
        let m = model();
        let f = frame(3);
        let s = init_stage(&m, &f).unwrap();
        assert_eq!(s.stage_index, 0);
        let fm = m.backbone_forward(&f).unwrap();
        let emb = m.decode_queries(&fm, &m.learned_queries()).unwrap();
        assert_eq!(s.embedding, emb);
        assert_eq!(s.detection, m.predict_heads(0, &emb).unwrap());
        assert_eq!(s, init_stage(&m, &f).unwrap());
    }

    #[test]
    fn zero_box_head_with_unit_alpha_keeps_boxes() {
        let m = SsgaModel::new(config(), 12).unwrap();
        let s0 = init_stage(&m, &frame(2)).unwrap();
        let fm = m.backbone_forward(&frame(1)).unwrap();
        let s1 = refine_stage(&m, &s0, &fm, &config()).unwrap();
        assert!(s1.detection.boxes.max_abs_diff(&s0.detection.boxes) < 1e-15);
    }

    #[test]
    fn zero_alpha_ignores_previous_boxes() {
        let m = model();
        let cfg = SsgaConfig { alpha: 0.0, ..config() };
        let s0 = init_stage(&m, &frame(2)).unwrap();
        let fm = m.backbone_forward(&frame(1)).unwrap();
        let s1 = refine_stage(&m, &s0, &fm, &cfg).unwrap();
        let direct = m.predict_heads(1, &s1.embedding).unwrap();
        assert_eq!(s1.detection.boxes, direct.boxes);
    }

    #[test]
    fn refine_is_the_chained_composition() {
        let m = model();
        let cfg = config();
        let s0 = init_stage(&m, &frame(4)).unwrap();
        let fm = m.backbone_forward(&frame(3)).unwrap();
        let s1 = refine_stage(&m, &s0, &fm, &cfg).unwrap();
        let emb = m.blocks[0]
            .aggregate_stage(&m.params, &s0.embedding, &fm, &s0.detection.boxes, cfg.beta_schedule[0])
            .unwrap();
        assert_eq!(emb, s1.embedding);
        let heads = m.predict_heads(1, &emb).unwrap();
        assert_eq!(heads.class_logits, s1.detection.class_logits);
        let eps = crate::model::unsquash_eps();
        let expected = Tensor::new(
            vec![5, 4],
            (0..20)
                .map(|i| {
                    let b = s0.detection.boxes.data()[i];
                    let raw = crate::graph::logit(heads.boxes.data()[i]) + cfg.alpha * crate::graph::logit(b.clamp(eps, 1.0 - eps));
                    crate::graph::sigmoid(raw)
                })
                .collect(),
        )
        .unwrap();
        assert!(s1.detection.boxes.max_abs_diff(&expected) < 1e-12);
    }

    #[test]
    fn stage_overflow_is_an_error() {
        let m = model();
        let cfg = SsgaConfig {
            num_stages: 1,
            beta_schedule: vec![1.5],
            ..config()
        };
        let s0 = init_stage(&m, &frame(3)).unwrap();
        let fm = m.backbone_forward(&frame(2)).unwrap();
        let s1 = refine_stage(&m, &s0, &fm, &cfg).unwrap();
        assert!(matches!(refine_stage(&m, &s1, &fm, &cfg), Err(SsgaError::StageOverflow { .. })));
    }

    #[test]
    fn ordering_examples_and_future_frames() {
        let m = model();
        let seq = neighbors(&m, 5, &[3, 1, 4, 2]);
        assert_eq!(seq.frame_ids(), vec![1, 2, 3, 4]);
        let avail: Vec<Neighbor> = [2, 4, 1, 3]
            .iter()
            .map(|&id| Neighbor {
                frame_id: id,
                features: FeatureMap {
                    values: Tensor::zeros(&[8, 4, 4]),
                    stride: 8,
                },
            })
            .collect();
        let asc = order_neighbors(avail.clone(), 5, &Ascending).unwrap();
        assert_eq!(asc.frame_ids(), vec![4, 3, 2, 1]);
        assert!(matches!(
            order_neighbors(avail, 4, &Descending),
            Err(SsgaError::FutureFrame { frame_id: 4, current_id: 4 })
        ));
    }

    #[test]
    fn unreachable_and_always_crossed_thresholds() {
        let m = model();
        let seq = neighbors(&m, 5, &[1, 2, 3, 4]);
        let f = frame(5);
        let never = SsgaConfig {
            delta: StopThreshold::Cosine(1.1),
            ..config()
        };
        let t = run_refinement(&m, &f, &seq, &never, None).unwrap();
        assert_eq!(t.stages_executed(), 4);
        assert_eq!(t.stop_reason, StopReason::Exhausted);
        let always = SsgaConfig {
            delta: StopThreshold::Cosine(-1.1),
            ..config()
        };
        let t = run_refinement(&m, &f, &seq, &always, None).unwrap();
        assert_eq!(t.stages_executed(), 1);
        assert_eq!(t.stop_reason, StopReason::EarlyStop);
    }

    #[test]
    fn forced_run_is_a_prefix() {
        let m = model();
        let seq = neighbors(&m, 5, &[1, 2, 3, 4]);
        let f = frame(5);
        let cfg = SsgaConfig {
            delta: StopThreshold::Never,
            ..config()
        };
        let full = run_refinement(&m, &f, &seq, &cfg, None).unwrap();
        let forced = run_refinement(&m, &f, &seq, &cfg, Some(2)).unwrap();
        assert_eq!(forced.stop_reason, StopReason::Forced);
        assert_eq!(forced.states[..], full.states[..3]);
        let empty = run_refinement(&m, &f, &NeighborSequence::empty(5), &cfg, None).unwrap();
        assert_eq!(empty.stages_executed(), 0);
        assert_eq!(empty.states[0], full.states[0]);
    }

    #[test]
    fn too_many_neighbours_is_rejected() {
        let m = model();
        let seq = neighbors(&m, 9, &[1, 2, 3, 4, 5]);
        assert!(run_refinement(&m, &frame(9), &seq, &config(), None).is_err());
    }

    #[test]
    fn zeroed_refinement_stops_at_stage_one() {
        let mut m = SsgaModel::new(config(), 13).unwrap();
        let zero = |m: &mut SsgaModel, ids: Vec<crate::params::ParamId>| {
            for id in ids {
                m.params.get_mut(id).data_mut().fill(0.0);
            }
        };
        let mut ids = Vec::new();
        for b in &m.blocks {
            for l in b.global_map.layers.iter().chain(&b.ffn.layers) {
                ids.extend([l.weight, l.bias]);
            }
            for l in [&b.attention.q_proj, &b.attention.k_proj, &b.attention.v_proj, &b.attention.out_proj] {
                ids.extend([l.weight, l.bias]);
            }
        }
        for h in &m.heads {
            ids.extend([h.class_head.weight, h.class_head.bias]);
        }
        for h in &m.heads[1..] {
            for l in &h.box_head.layers {
                ids.extend([l.weight, l.bias]);
            }
        }
        zero(&mut m, ids);
        let seq = neighbors(&m, 5, &[1, 2, 3, 4]);
        let cfg = SsgaConfig {
            delta: StopThreshold::Never,
            ..config()
        };
        let t = run_refinement(&m, &frame(5), &seq, &cfg, None).unwrap();
        for s in &t.states[1..] {
            assert_eq!(s.detection.class_logits, t.states[0].detection.class_logits);
            assert!(s.detection.boxes.max_abs_diff(&t.states[0].detection.boxes) < 1e-15);
        }
        for delta in [0.5, 0.9, 0.999_999] {
            let cfg = SsgaConfig {
                delta: StopThreshold::Cosine(delta),
                ..config()
            };
            let t = run_refinement(&m, &frame(5), &seq, &cfg, None).unwrap();
            assert_eq!(t.stages_executed(), 1, "delta {delta}");
        }
    }

    #[test]
    fn all_stage_loss_sums_terms() {
        let m = model();
        let gt = GroundTruth::new(vec![GtObject {
            class_id: 1,
            bbox: [0.4, 0.5, 0.2, 0.3],
        }]);
        let w = LossWeights::default();
        let seq = neighbors(&m, 5, &[1, 2, 3, 4]);
        let cfg = SsgaConfig {
            delta: StopThreshold::Never,
            ..config()
        };
        let t = run_refinement(&m, &frame(5), &seq, &cfg, None).unwrap();
        let single = RefinementTrace {
            states: t.states[..1].to_vec(),
            stop_reason: StopReason::Exhausted,
        };
        let base = detection_loss(&t.states[0].detection, &gt, &w).unwrap();
        assert_eq!(training_loss_all_stages(&single, &gt, &w).unwrap(), base);
        let repeated = RefinementTrace {
            states: vec![t.states[0].clone(); 5],
            stop_reason: StopReason::Exhausted,
        };
        assert!((training_loss_all_stages(&repeated, &gt, &w).unwrap() - 5.0 * base).abs() < 1e-12);

        // the graph version agrees with the value version
        let mut g = Graph::inference();
        let px = g.input(frame(5).pixels);
        let nb: Vec<Var> = seq.iter().map(|n| g.input(n.features.values.clone())).collect();
        let stages = stages_var(&m, &mut g, &cfg, px, &nb).unwrap();
        let (total, _) = training_loss_var(&mut g, &stages, &gt, &w).unwrap();
        let expect = training_loss_all_stages(&t, &gt, &w).unwrap();
        assert!((g.value(total).data()[0] - expect).abs() < 1e-12);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn delta() -> impl Strategy<Value = StopThreshold> {
            prop_oneof![Just(StopThreshold::Never), (-1.2..1.2f64).prop_map(StopThreshold::Cosine)]
        }

        fn rank(d: StopThreshold) -> f64 {
            match d {
                StopThreshold::Cosine(v) => v,
                StopThreshold::Never => f64::INFINITY,
            }
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(24))]

            #[test]
            fn forcing_k_stages_gives_the_prefix(current in 10u64..1000, n in 0usize..=4, k in 0usize..=4) {
                let m = model();
                let ids: Vec<FrameId> = (1..=n as u64).map(|d| current - d).collect();
                let seq = neighbors(&m, current, &ids);
                let f = frame(current);
                let cfg = SsgaConfig { delta: StopThreshold::Never, ..config() };
                let full = run_refinement(&m, &f, &seq, &cfg, None).unwrap();
                let forced = run_refinement(&m, &f, &seq, &cfg, Some(k)).unwrap();
                let kk = k.min(n);
                prop_assert_eq!(forced.stages_executed(), kk);
                prop_assert_eq!(&forced.states[..], &full.states[..=kk]);
            }

            #[test]
            fn stage_count_is_monotone_in_delta(current in 10u64..1000, a in delta(), b in delta()) {
                let (lo, hi) = if rank(a) <= rank(b) { (a, b) } else { (b, a) };
                let m = model();
                let seq = neighbors(&m, current, &[current - 1, current - 2, current - 3, current - 4]);
                let f = frame(current);
                let run = |d| run_refinement(&m, &f, &seq, &SsgaConfig { delta: d, ..config() }, None).unwrap().stages_executed();
                prop_assert!(run(lo) <= run(hi));
            }
        }
    }
}
