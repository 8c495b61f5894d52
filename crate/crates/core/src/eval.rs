//! Dataset-level evaluation: stream every video, score the final detections and
//! summarize stage counts. Also the δ / stage-count sweep.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::time::Duration;

use serde::Serialize;

use crate::config::{SsgaConfig, StopThreshold};
use crate::dataset::Dataset;
use crate::error::{io_err, Result, SsgaError};
use crate::metrics::{compute_ap, stage_statistics, EvalResult, FrameKey};
use crate::model::SsgaModel;
use crate::refinement::StopReason;
use crate::runtime::StreamRuntime;
use crate::synth::Motion;
use crate::types::{GroundTruth, ScoredBox};

#[derive(Clone, Debug, PartialEq)]
pub struct FrameRow {
    pub video_id: u64,
    pub frame_id: u64,
    pub motion: Motion,
    pub stages_executed: usize,
    pub stop_reason: StopReason,
    pub num_detections: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct EvalSummary {
    pub delta: String,
    pub force_stages: Option<usize>,
    pub overall: EvalResult,
    /// Keyed by motion split name.
    pub splits: BTreeMap<String, EvalResult>,
    pub stage_histogram: BTreeMap<usize, usize>,
}

#[derive(Clone, Debug)]
pub struct Evaluation {
    pub summary: EvalSummary,
    pub rows: Vec<FrameRow>,
    pub refinement_time: Duration,
}

impl Evaluation {
    pub fn split(&self, motion: Motion) -> Option<&EvalResult> {
        self.summary.splits.get(motion.as_str())
    }
}

struct Collected {
    preds: BTreeMap<FrameKey, Vec<ScoredBox>>,
    gts: BTreeMap<FrameKey, GroundTruth>,
    stages: Vec<usize>,
    time: Duration,
}

impl Collected {
    fn new() -> Self {
        Self {
            preds: BTreeMap::new(),
            gts: BTreeMap::new(),
            stages: Vec::new(),
            time: Duration::ZERO,
        }
    }

    fn result(&self) -> Result<EvalResult> {
        let mut r = compute_ap(&self.preds, &self.gts)?;
        r.mean_stages = stage_statistics(&self.stages)?.mean;
        let secs = self.time.as_secs_f64();
        r.frames_per_second = (secs > 0.0).then(|| self.stages.len() as f64 / secs);
        Ok(r)
    }
}

/// Streams each video through a fresh memory bank. Videos are visited in
/// manifest order, so the result is a deterministic fold.
pub fn evaluate(model: &SsgaModel, dataset: &Dataset, config: &SsgaConfig, force_stages: Option<usize>) -> Result<Evaluation> {
    if dataset.num_frames() == 0 {
        return Err(SsgaError::Eval("dataset has no frames".into()));
    }
    let mut runtime = StreamRuntime::new(model, config.clone())?;
    runtime.reconfigure(config.delta, force_stages)?;
    let mut all = Collected::new();
    let mut splits: BTreeMap<&'static str, Collected> = BTreeMap::new();
    let mut rows = Vec::with_capacity(dataset.num_frames());
    for video in &dataset.videos {
        runtime.reset();
        let motion = video.entry.motion;
        let split = splits.entry(motion.as_str()).or_insert_with(Collected::new);
        for (frame, gt) in video.clip.frames.iter().zip(&video.clip.annotations) {
            let (r, _) = runtime.step(frame)?;
            let key = (video.entry.video_id, frame.frame_id);
            let boxes = r.detection.scored_boxes();
            for c in [&mut all, &mut *split] {
                c.preds.insert(key, boxes.clone());
                c.gts.insert(key, gt.clone());
                c.stages.push(r.stages_executed);
                c.time += r.wall_time;
            }
            rows.push(FrameRow {
                video_id: video.entry.video_id,
                frame_id: frame.frame_id,
                motion,
                stages_executed: r.stages_executed,
                stop_reason: r.stop_reason,
                num_detections: r.num_detections(),
            });
        }
    }
    let summary = EvalSummary {
        delta: config.delta.to_string(),
        force_stages,
        overall: all.result()?,
        splits: splits
            .iter()
            .map(|(k, c)| Ok((k.to_string(), c.result()?)))
            .collect::<Result<_>>()?,
        stage_histogram: stage_statistics(&all.stages)?.histogram,
    };
    Ok(Evaluation {
        summary,
        rows,
        refinement_time: all.time,
    })
}

pub const FRAME_REPORT_HEADER: &str = "videoId,frameId,motion,stagesExecuted,stopReason,numDetections";

pub fn frame_report(rows: &[FrameRow]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{FRAME_REPORT_HEADER}");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            r.video_id,
            r.frame_id,
            r.motion.as_str(),
            r.stages_executed,
            r.stop_reason.as_str(),
            r.num_detections
        );
    }
    s
}

/// Summary as pretty JSON. Timing fields are dropped unless `with_timing`,
/// which keeps the document reproducible byte for byte.
pub fn summary_json(summary: &EvalSummary, with_timing: bool) -> Result<String> {
    let mut s = summary.clone();
    if !with_timing {
        s.overall.frames_per_second = None;
        for r in s.splits.values_mut() {
            r.frames_per_second = None;
        }
    }
    Ok(serde_json::to_string_pretty(&s)? + "\n")
}

/// Writes `<path>` (per-frame CSV) and `<path>.json` next to it (summary).
pub fn write_eval_report(path: &Path, eval: &Evaluation, with_timing: bool) -> Result<()> {
    std::fs::write(path, frame_report(&eval.rows)).map_err(io_err(path))?;
    let json = json_path(path);
    std::fs::write(&json, summary_json(&eval.summary, with_timing)?).map_err(io_err(&json))
}

pub fn json_path(report: &Path) -> std::path::PathBuf {
    let mut name = report.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".json");
    report.with_file_name(name)
}

#[derive(Clone, Debug, PartialEq)]
pub enum SweepSpec {
    Deltas(Vec<StopThreshold>),
    StageCounts(Vec<usize>),
}

impl SweepSpec {
    pub fn len(&self) -> usize {
        match self {
            SweepSpec::Deltas(d) => d.len(),
            SweepSpec::StageCounts(k) => k.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub setting: String,
    pub result: std::result::Result<EvalResult, String>,
}

/// One evaluation per setting on the same weights. A bad setting yields an
/// error row and the sweep moves on.
pub fn sweep(model: &SsgaModel, dataset: &Dataset, config: &SsgaConfig, spec: &SweepSpec) -> Result<Vec<SweepRow>> {
    if spec.is_empty() {
        return Err(SsgaError::Eval("sweep spec is empty".into()));
    }
    let settings: Vec<(String, Result<(SsgaConfig, Option<usize>)>)> = match spec {
        SweepSpec::Deltas(ds) => ds
            .iter()
            .map(|&d| {
                let cfg = d.validate().map(|delta| (SsgaConfig { delta, ..config.clone() }, None));
                (format!("delta={d}"), cfg)
            })
            .collect(),
        SweepSpec::StageCounts(ks) => ks
            .iter()
            .map(|&k| {
                let cfg = if k > model.num_stages() {
                    Err(SsgaError::Config(format!("{k} stages requested, model has {}", model.num_stages())))
                } else {
                    Ok((
                        SsgaConfig {
                            delta: StopThreshold::Never,
                            ..config.clone()
                        },
                        Some(k),
                    ))
                };
                (format!("stages={k}"), cfg)
            })
            .collect(),
    };
    Ok(settings
        .into_iter()
        .map(|(setting, cfg)| {
            let result = cfg
                .and_then(|(c, force)| evaluate(model, dataset, &c, force))
                .map(|e| e.summary.overall)
                .map_err(|e| e.to_string());
            SweepRow { setting, result }
        })
        .collect())
}

pub const SWEEP_REPORT_HEADER: &str = "setting,mAP,ap50,ap75,apSmall,apMedium,apLarge,meanStages,error";

pub fn sweep_report(rows: &[SweepRow]) -> String {
    let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
    let mut s = String::new();
    let _ = writeln!(s, "{SWEEP_REPORT_HEADER}");
    for row in rows {
        match &row.result {
            Ok(r) => {
                let _ = writeln!(
                    s,
                    "{},{:.6},{:.6},{:.6},{},{},{},{:.6},",
                    row.setting,
                    r.map,
                    r.ap50,
                    r.ap75,
                    opt(r.ap_small),
                    opt(r.ap_medium),
                    opt(r.ap_large),
                    r.mean_stages
                );
            }
            Err(e) => {
                let _ = writeln!(s, "{},,,,,,,,\"{}\"", row.setting, e.replace('"', "'"));
            }
        }
    }
    s
}
