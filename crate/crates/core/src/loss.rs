//! Set-prediction loss: Hungarian matching followed by classification, L1 and
//! GIoU terms on the matched pairs.

use crate::boxes::giou_with_grad;
use crate::config::TrainConfig;
use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::matching::{hungarian_match, Assignment};
use crate::tensor::Tensor;
use crate::types::{Detection, GroundTruth};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub class: f64,
    pub l1: f64,
    pub giou: f64,
    /// Relative weight of the "no object" target in the classification term.
    pub no_object: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            class: 2.0,
            l1: 5.0,
            giou: 2.0,
            no_object: 0.1,
        }
    }
}

impl From<&TrainConfig> for LossWeights {
    fn from(t: &TrainConfig) -> Self {
        Self {
            class: t.class_weight,
            l1: t.l1_weight,
            giou: t.giou_weight,
            no_object: t.no_object_weight,
        }
    }
}

/// `n_pred × n_gt` matching cost: `-class·p(cls) + l1·L1 - giou·GIoU`.
pub fn matching_cost(det: &Detection, gt: &GroundTruth, w: &LossWeights) -> Tensor {
    let probs = det.probabilities();
    let n = det.num_queries();
    let mut cost = Tensor::zeros(&[n, gt.len()]);
    let cols = gt.len();
    for q in 0..n {
        let b = det.bbox(q).to_array();
        for (g, obj) in gt.objects.iter().enumerate() {
            let l1: f64 = (0..4).map(|k| (b[k] - obj.bbox[k]).abs()).sum();
            let giou = giou_with_grad(&b, &obj.bbox).0;
            cost.data_mut()[q * cols + g] = -w.class * probs.get2(q, obj.class_id) + w.l1 * l1 - w.giou * giou;
        }
    }
    cost
}

pub fn match_detection(det: &Detection, gt: &GroundTruth, w: &LossWeights) -> Result<Assignment> {
    hungarian_match(&matching_cost(det, gt, w))
}

/// Builds the loss on the graph for stage outputs `logits [n, c+1]` and `boxes [n, 4]`.
pub fn detection_loss_var(g: &mut Graph, logits: Var, boxes: Var, gt: &GroundTruth, w: &LossWeights) -> Result<Var> {
    let det = Detection {
        class_logits: g.value(logits).clone(),
        boxes: g.value(boxes).clone(),
    };
    let assignment = match_detection(&det, gt, w)?;
    let n = det.num_queries();
    let no_object = det.num_classes();
    let mut targets = vec![no_object; n];
    let mut weights = vec![w.no_object; n];
    let mut pairs = Vec::with_capacity(gt.len());
    for (gi, &q) in assignment.gt_to_pred.iter().enumerate() {
        targets[q] = gt.objects[gi].class_id;
        weights[q] = 1.0;
        pairs.push((q, gt.objects[gi].bbox));
    }
    let ce = g.cross_entropy(logits, &targets, &weights);
    let mut loss = g.scale(ce, w.class);
    if !pairs.is_empty() {
        let norm = pairs.len() as f64;
        let l1 = g.matched_l1(boxes, &pairs, norm);
        let l1 = g.scale(l1, w.l1);
        let giou = g.matched_giou(boxes, &pairs, norm);
        let giou = g.scale(giou, w.giou);
        loss = g.add(loss, l1);
        loss = g.add(loss, giou);
    }
    Ok(loss)
}

/// Scalar set loss of one detection against its ground truth.
pub fn detection_loss(pred: &Detection, gt: &GroundTruth, w: &LossWeights) -> Result<f64> {
    let mut g = Graph::inference();
    let logits = g.input(pred.class_logits.clone());
    let boxes = g.input(pred.boxes.clone());
    let loss = detection_loss_var(&mut g, logits, boxes, gt, w)?;
    Ok(g.value(loss).data()[0])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::GtObject;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn det(logits: Vec<Vec<f64>>, boxes: Vec<Vec<f64>>) -> Detection {
        Detection {
            class_logits: Tensor::from_rows(&logits).unwrap(),
            boxes: Tensor::from_rows(&boxes).unwrap(),
        }
    }

    #[test]
    fn exact_match_limit_goes_to_zero() {
        let gt = GroundTruth::new(vec![GtObject {
            class_id: 1,
            bbox: [0.4, 0.5, 0.2, 0.3],
        }]);
        let d = det(vec![vec![-40.0, 40.0, -40.0]], vec![vec![0.4, 0.5, 0.2, 0.3]]);
        let loss = detection_loss(&d, &gt, &LossWeights::default()).unwrap();
        assert!(loss < 1e-30, "{loss}");
    }

    #[test]
    fn empty_gt_is_pure_no_object_classification() {
        let d = det(
            vec![vec![0.3, -0.2, 0.1], vec![1.0, 0.0, -1.0]],
            vec![vec![0.5; 4], vec![0.3, 0.3, 0.2, 0.2]],
        );
        let w = LossWeights::default();
        let loss = detection_loss(&d, &GroundTruth::default(), &w).unwrap();
        // weighted mean of -log p(no-object), weights all equal
        let lse = |r: &[f64]| r.iter().map(|v| v.exp()).sum::<f64>().ln();
        let ce0 = lse(&[0.3, -0.2, 0.1]) - 0.1;
        let ce1 = lse(&[1.0, 0.0, -1.0]) + 1.0;
        assert!((loss - w.class * (ce0 + ce1) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn single_query_hand_computed() {
        // one query, one gt of class 0; class term is -log softmax, L1 is summed
        // absolute error, GIoU from the corner arithmetic below
        let d = det(vec![vec![1.0, 0.0]], vec![vec![0.5, 0.5, 0.2, 0.2]]);
        let gt = GroundTruth::new(vec![GtObject {
            class_id: 0,
            bbox: [0.55, 0.5, 0.2, 0.2],
        }]);
        let w = LossWeights {
            class: 1.0,
            l1: 1.0,
            giou: 0.0,
            no_object: 0.1,
        };
        let ce = (1.0f64.exp() + 1.0).ln() - 1.0;
        let l1 = 0.05;
        let loss = detection_loss(&d, &gt, &w).unwrap();
        assert!((loss - (ce + l1)).abs() < 1e-12);

        // pred [0.4,0.6]², gt [0.45,0.65]x[0.4,0.6]: inter .15*.2=.03, union .05, enclosure .25*.2=.05
        let giou_only = LossWeights {
            class: 0.0,
            l1: 0.0,
            giou: 1.0,
            no_object: 0.1,
        };
        let expect = 1.0 - (0.03 / 0.05 - (0.05 - 0.05) / 0.05);
        assert!((detection_loss(&d, &gt, &giou_only).unwrap() - expect).abs() < 1e-12);
    }

    fn random_case(rng: &mut ChaCha8Rng, n: usize, ngt: usize) -> (Detection, GroundTruth) {
        let logits = (0..n).map(|_| (0..4).map(|_| rng.gen_range(-2.0..2.0)).collect()).collect();
        let boxes = (0..n)
            .map(|_| vec![rng.gen_range(0.2..0.8), rng.gen_range(0.2..0.8), rng.gen_range(0.1..0.4), rng.gen_range(0.1..0.4)])
            .collect();
        let gt = GroundTruth::new(
            (0..ngt)
                .map(|_| GtObject {
                    class_id: rng.gen_range(0..3),
                    bbox: [rng.gen_range(0.2..0.8), rng.gen_range(0.2..0.8), rng.gen_range(0.1..0.4), rng.gen_range(0.1..0.4)],
                })
                .collect(),
        );
        (det(logits, boxes), gt)
    }

    #[test]
    fn permutation_invariant_in_queries_and_gt() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let w = LossWeights::default();
        for _ in 0..20 {
            let (d, gt) = random_case(&mut rng, 6, 3);
            let base = detection_loss(&d, &gt, &w).unwrap();
            let perm = [3, 0, 5, 1, 4, 2];
            let pd = Detection {
                class_logits: d.class_logits.permute_rows(&perm),
                boxes: d.boxes.permute_rows(&perm),
            };
            let mut pg = gt.clone();
            pg.objects.reverse();
            let permuted = detection_loss(&pd, &pg, &w).unwrap();
            assert!((base - permuted).abs() < 1e-12, "{base} vs {permuted}");
        }
    }

    #[test]
    fn box_gradient_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let w = LossWeights::default();
        let (d, gt) = random_case(&mut rng, 2, 2);
        // parameterize boxes through a logistic so the check runs in the same
        // bounded space the heads use
        let raw = d.boxes.map(|b| crate::graph::logit(b));
        let loss_of = |raw: &Tensor, g: &mut Graph, record: bool| {
            let r = if record { g.variable(raw.clone()) } else { g.input(raw.clone()) };
            let b = g.sigmoid(r);
            let l = g.input(d.class_logits.clone());
            (r, detection_loss_var(g, l, b, &gt, &w).unwrap())
        };
        let mut g = Graph::training();
        let (r, loss) = loss_of(&raw, &mut g, true);
        let grads = g.backward(loss);
        let analytic = grads.wrt(r).unwrap().clone();
        let eps = 1e-5;
        for j in 0..raw.numel() {
            let eval = |delta: f64| {
                let mut x = raw.clone();
                x.data_mut()[j] += delta;
                let mut g = Graph::inference();
                let (_, l) = loss_of(&x, &mut g, false);
                g.value(l).data()[0]
            };
            let fd = (eval(eps) - eval(-eps)) / (2.0 * eps);
            let a = analytic.data()[j];
            let rel = (fd - a).abs() / fd.abs().max(a.abs()).max(1e-8);
            assert!(rel <= 1e-4, "elem {j}: {a} vs {fd}");
        }
    }
}
