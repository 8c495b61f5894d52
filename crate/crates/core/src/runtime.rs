//! Online inference: a FIFO memory bank of previous frames, the per-frame
//! stream step and runtime reconfiguration of the stop rule.

use std::collections::VecDeque;
use std::fmt::Write as _;
use std::path::Path;
use std::time::{Duration, Instant};

use crate::config::{SsgaConfig, StopThreshold};
use crate::error::{io_err, Result, SsgaError};
use crate::model::SsgaModel;
use crate::refinement::{order_neighbors, run_refinement_with, Neighbor, RefinementTrace, StopReason};
use crate::strategy::{neighbor_ordering, stop_criterion, NeighborOrdering, StopCriterion};
use crate::types::{Detection, FeatureMap, FrameId, FrameTensor, RefinedEmbedding};

/// Score above which a query counts as a detection in reports.
pub const DETECTION_THRESHOLD: f64 = 0.5;

#[derive(Clone, Debug, PartialEq)]
pub struct MemoryEntry {
    pub frame_id: FrameId,
    pub feature_map: FeatureMap,
    pub detection: Detection,
    pub embedding: RefinedEmbedding,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MemoryBank {
    entries: VecDeque<MemoryEntry>,
    capacity: usize,
    last_frame_id: Option<FrameId>,
}

impl MemoryBank {
    pub fn new(capacity: usize) -> Self {
        Self {
            entries: VecDeque::with_capacity(capacity + 1),
            capacity,
            last_frame_id: None,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn last_frame_id(&self) -> Option<FrameId> {
        self.last_frame_id
    }

    pub fn frame_ids(&self) -> Vec<FrameId> {
        self.entries.iter().map(|e| e.frame_id).collect()
    }

    pub fn entries(&self) -> impl Iterator<Item = &MemoryEntry> {
        self.entries.iter()
    }

    /// Appends an entry, evicting the oldest when over capacity.
    pub fn push(&mut self, entry: MemoryEntry) -> Result<()> {
        if let Some(last_id) = self.last_frame_id {
            if entry.frame_id <= last_id {
                return Err(SsgaError::NonMonotonicFrame {
                    frame_id: entry.frame_id,
                    last_id,
                });
            }
        }
        self.last_frame_id = Some(entry.frame_id);
        self.entries.push_back(entry);
        while self.entries.len() > self.capacity {
            self.entries.pop_front();
        }
        Ok(())
    }

    /// Drops all state; used at video boundaries.
    pub fn clear(&mut self) {
        self.entries.clear();
        self.last_frame_id = None;
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StreamResult {
    pub frame_id: FrameId,
    pub detection: Detection,
    pub stages_executed: usize,
    pub stop_reason: StopReason,
    /// Time spent in the refinement loop only.
    pub wall_time: Duration,
    pub bank_size: usize,
}

impl StreamResult {
    pub fn num_detections(&self) -> usize {
        self.detection.confident(DETECTION_THRESHOLD).len()
    }
}

/// Returns `config` with a new stop threshold. Weights are not involved.
pub fn reconfigure(config: &SsgaConfig, new_delta: StopThreshold) -> Result<SsgaConfig> {
    let delta = new_delta.validate()?;
    Ok(SsgaConfig {
        delta,
        ..config.clone()
    })
}

/// One video stream: the bank plus the active inference settings.
pub struct StreamRuntime<'m> {
    model: &'m SsgaModel,
    config: SsgaConfig,
    force_stages: Option<usize>,
    ordering: Box<dyn NeighborOrdering>,
    stop: Box<dyn StopCriterion>,
    bank: MemoryBank,
}

impl<'m> StreamRuntime<'m> {
    pub fn new(model: &'m SsgaModel, config: SsgaConfig) -> Result<Self> {
        config.validate()?;
        let ordering = neighbor_ordering(&config)?;
        let stop = stop_criterion(&config.stop_criterion, config.delta)?;
        let capacity = config.num_stages.min(model.num_stages());
        Ok(Self {
            model,
            config,
            force_stages: None,
            ordering,
            stop,
            bank: MemoryBank::new(capacity),
        })
    }

    pub fn config(&self) -> &SsgaConfig {
        &self.config
    }

    pub fn bank(&self) -> &MemoryBank {
        &self.bank
    }

    /// Swaps the stop threshold and forced stage count between frames.
    pub fn reconfigure(&mut self, delta: StopThreshold, force_stages: Option<usize>) -> Result<()> {
        let config = reconfigure(&self.config, delta)?;
        self.stop = stop_criterion(&config.stop_criterion, config.delta)?;
        self.config = config;
        self.force_stages = force_stages;
        Ok(())
    }

    pub fn reset(&mut self) {
        self.bank.clear();
    }

    pub fn step(&mut self, frame: &FrameTensor) -> Result<(StreamResult, RefinementTrace)> {
        if let Some(last_id) = self.bank.last_frame_id() {
            if frame.frame_id <= last_id {
                return Err(SsgaError::NonMonotonicFrame {
                    frame_id: frame.frame_id,
                    last_id,
                });
            }
        }
        let features = self.model.backbone_forward(frame)?;
        let available = self
            .bank
            .entries()
            .map(|e| Neighbor {
                frame_id: e.frame_id,
                features: e.feature_map.clone(),
            })
            .collect();
        let neighbors = order_neighbors(available, frame.frame_id, self.ordering.as_ref())?;
        let start = Instant::now();
        let trace = run_refinement_with(self.model, &features, &neighbors, &self.config, self.force_stages, self.stop.as_ref())?;
        let wall_time = start.elapsed();
        let bank_size = self.bank.len();
        let last = trace.final_state();
        self.bank.push(MemoryEntry {
            frame_id: frame.frame_id,
            feature_map: features,
            detection: last.detection.clone(),
            embedding: last.embedding.clone(),
        })?;
        let result = StreamResult {
            frame_id: frame.frame_id,
            detection: last.detection.clone(),
            stages_executed: trace.stages_executed(),
            stop_reason: trace.stop_reason,
            wall_time,
            bank_size,
        };
        Ok((result, trace))
    }
}

pub const STREAM_REPORT_HEADER: &str = "frameId,stagesExecuted,stopReason,wallTimeMs,numDetections";

pub fn stream_report(results: &[StreamResult]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{STREAM_REPORT_HEADER}");
    for r in results {
        let _ = writeln!(
            s,
            "{},{},{},{:.3},{}",
            r.frame_id,
            r.stages_executed,
            r.stop_reason.as_str(),
            r.wall_time.as_secs_f64() * 1e3,
            r.num_detections()
        );
    }
    s
}

pub fn write_stream_report(path: &Path, results: &[StreamResult]) -> Result<()> {
    std::fs::write(path, stream_report(results)).map_err(io_err(path))
}
