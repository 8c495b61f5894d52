//! COCO-style average precision and stage-count statistics.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::boxes::{iou_unchecked, BBox};
use crate::error::{Result, SsgaError};
use crate::types::{GroundTruth, ScoredBox};

/// `(video id, frame id)`.
pub type FrameKey = (u64, u64);

/// Reference image side used to turn normalized areas into pixel areas.
pub const REFERENCE_SIDE: f64 = 640.0;
pub const SMALL_AREA: f64 = 32.0 * 32.0;
pub const MEDIUM_AREA: f64 = 96.0 * 96.0;

/// IoU thresholds 0.50, 0.55, …, 0.95.
pub fn coco_thresholds() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct EvalResult {
    #[serde(rename = "mAP")]
    pub map: f64,
    pub ap50: f64,
    pub ap75: f64,
    /// `None` when no ground truth falls in the size range.
    pub ap_small: Option<f64>,
    pub ap_medium: Option<f64>,
    pub ap_large: Option<f64>,
    pub mean_stages: f64,
    /// Frames per second of refinement wall time; machine dependent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub frames_per_second: Option<f64>,
    pub num_frames: usize,
}

/// Pixel area of a normalized box at the reference scale.
pub fn reference_area(b: &BBox) -> f64 {
    b.w * b.h * REFERENCE_SIDE * REFERENCE_SIDE
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum AreaRange {
    All,
    Small,
    Medium,
    Large,
}

impl AreaRange {
    fn contains(self, area: f64) -> bool {
        match self {
            AreaRange::All => true,
            AreaRange::Small => area < SMALL_AREA,
            AreaRange::Medium => (SMALL_AREA..MEDIUM_AREA).contains(&area),
            AreaRange::Large => area >= MEDIUM_AREA,
        }
    }
}

struct Candidate<'a> {
    key: FrameKey,
    det: &'a ScoredBox,
}

/// Precision averaged over 101 recall points, from detections already sorted
/// by descending score. `tp[i]` / `ignored[i]` flag each detection.
fn interpolated_ap(tp: &[bool], ignored: &[bool], num_gt: usize) -> f64 {
    let mut precision = Vec::new();
    let mut recall = Vec::new();
    let (mut ntp, mut nfp) = (0usize, 0usize);
    for (&t, &ig) in tp.iter().zip(ignored) {
        if ig {
            continue;
        }
        if t {
            ntp += 1;
        } else {
            nfp += 1;
        }
        precision.push(ntp as f64 / (ntp + nfp) as f64);
        recall.push(ntp as f64 / num_gt as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut sum = 0.0;
    for k in 0..=100 {
        let r = k as f64 / 100.0;
        let idx = recall.partition_point(|&x| x < r);
        if idx < precision.len() {
            sum += precision[idx];
        }
    }
    sum / 101.0
}

/// AP for one class, threshold and area range, or `None` when the class has no
/// ground truth in range.
fn class_ap(
    class_id: usize,
    cands: &[Candidate<'_>],
    gts: &BTreeMap<FrameKey, GroundTruth>,
    threshold: f64,
    range: AreaRange,
) -> Option<f64> {
    // per frame: (box, ignored) for GTs of this class
    let mut frame_gts: BTreeMap<FrameKey, Vec<(BBox, bool)>> = BTreeMap::new();
    let mut num_gt = 0;
    for (key, gt) in gts {
        let v: Vec<(BBox, bool)> = gt
            .objects
            .iter()
            .filter(|o| o.class_id == class_id)
            .map(|o| {
                let b = o.bbox();
                let ignore = !range.contains(reference_area(&b));
                if !ignore {
                    num_gt += 1;
                }
                (b, ignore)
            })
            .collect();
        // non-ignored first so matching prefers them, as in the COCO evaluator
        let mut v = v;
        v.sort_by_key(|&(_, ig)| ig);
        frame_gts.insert(*key, v);
    }
    if num_gt == 0 {
        return None;
    }
    let mut used: BTreeMap<FrameKey, Vec<bool>> = frame_gts.iter().map(|(k, v)| (*k, vec![false; v.len()])).collect();
    let mut tp = Vec::with_capacity(cands.len());
    let mut ignored = Vec::with_capacity(cands.len());
    for c in cands.iter().filter(|c| c.det.class_id == class_id) {
        let list = &frame_gts[&c.key];
        let flags = used.get_mut(&c.key).expect("same keys");
        let mut best: Option<usize> = None;
        let mut best_iou = threshold.min(1.0 - 1e-10);
        for (g, &(gb, ig)) in list.iter().enumerate() {
            if flags[g] {
                continue;
            }
            // once a real match exists, stop at the ignored tail
            if let Some(b) = best {
                if !list[b].1 && ig {
                    break;
                }
            }
            let iou = iou_unchecked(&c.det.bbox, &gb);
            if iou >= best_iou {
                best_iou = iou;
                best = Some(g);
            }
        }
        match best {
            Some(g) => {
                flags[g] = true;
                tp.push(!list[g].1);
                ignored.push(list[g].1);
            }
            None => {
                tp.push(false);
                ignored.push(!range.contains(reference_area(&c.det.bbox)));
            }
        }
    }
    Some(interpolated_ap(&tp, &ignored, num_gt))
}

/// AP per threshold, averaged over classes that have ground truth in range.
fn ap_per_threshold(
    preds: &BTreeMap<FrameKey, Vec<ScoredBox>>,
    gts: &BTreeMap<FrameKey, GroundTruth>,
    thresholds: &[f64],
    range: AreaRange,
) -> Option<Vec<f64>> {
    let mut cands: Vec<Candidate<'_>> = preds
        .iter()
        .flat_map(|(key, dets)| dets.iter().map(move |det| Candidate { key: *key, det }))
        .collect();
    // score descending; ties by frame and query so the order is canonical
    cands.sort_by(|a, b| {
        b.det
            .score
            .total_cmp(&a.det.score)
            .then(a.key.cmp(&b.key))
            .then(a.det.query.cmp(&b.det.query))
    });
    let mut classes: Vec<usize> = gts.values().flat_map(|g| g.objects.iter().map(|o| o.class_id)).collect();
    classes.sort_unstable();
    classes.dedup();
    let per_t: Vec<Option<f64>> = thresholds
        .iter()
        .map(|&t| {
            let aps: Vec<f64> = classes.iter().filter_map(|&c| class_ap(c, &cands, gts, t, range)).collect();
            if aps.is_empty() {
                None
            } else {
                Some(aps.iter().sum::<f64>() / aps.len() as f64)
            }
        })
        .collect();
    per_t.into_iter().collect()
}

/// AP metrics over all frames. Both maps must cover the same frames.
pub fn compute_ap(preds: &BTreeMap<FrameKey, Vec<ScoredBox>>, gts: &BTreeMap<FrameKey, GroundTruth>) -> Result<EvalResult> {
    if preds.len() != gts.len() || preds.keys().zip(gts.keys()).any(|(a, b)| a != b) {
        let missing = gts.keys().find(|k| !preds.contains_key(k)).or_else(|| preds.keys().find(|k| !gts.contains_key(k)));
        return Err(SsgaError::Eval(format!("prediction and ground-truth frame sets differ (first mismatch: {missing:?})")));
    }
    let thresholds = coco_thresholds();
    let all = ap_per_threshold(preds, gts, &thresholds, AreaRange::All).unwrap_or_else(|| vec![0.0; thresholds.len()]);
    let mean_over = |r: AreaRange| ap_per_threshold(preds, gts, &thresholds, r).map(|v| v.iter().sum::<f64>() / v.len() as f64);
    Ok(EvalResult {
        map: all.iter().sum::<f64>() / all.len() as f64,
        ap50: all[0],
        ap75: all[5],
        ap_small: mean_over(AreaRange::Small),
        ap_medium: mean_over(AreaRange::Medium),
        ap_large: mean_over(AreaRange::Large),
        mean_stages: 0.0,
        frames_per_second: None,
        num_frames: gts.len(),
    })
}

/// AP at one IoU threshold over all classes and sizes.
pub fn ap_at(preds: &BTreeMap<FrameKey, Vec<ScoredBox>>, gts: &BTreeMap<FrameKey, GroundTruth>, threshold: f64) -> f64 {
    ap_per_threshold(preds, gts, &[threshold], AreaRange::All).map_or(0.0, |v| v[0])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageStats {
    pub mean: f64,
    pub histogram: BTreeMap<usize, usize>,
}

pub fn stage_statistics(counts: &[usize]) -> Result<StageStats> {
    if counts.is_empty() {
        return Err(SsgaError::Eval("no stage counts to summarize".into()));
    }
    let mut histogram = BTreeMap::new();
    for &c in counts {
        *histogram.entry(c).or_insert(0) += 1;
    }
    Ok(StageStats {
        mean: counts.iter().sum::<usize>() as f64 / counts.len() as f64,
        histogram,
    })
}
