//! Domain values passed between the detector, the refinement loop and the runtime.

use serde::{Deserialize, Serialize};

use crate::boxes::BBox;
use crate::error::{Result, SsgaError};
use crate::graph::softmax_in_place;
use crate::tensor::Tensor;

pub type FrameId = u64;

/// One RGB frame, `[3, H, W]` with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameTensor {
    pub pixels: Tensor,
    pub frame_id: FrameId,
}

impl FrameTensor {
    pub fn new(pixels: Tensor, frame_id: FrameId) -> Result<Self> {
        let s = pixels.shape();
        if s.len() != 3 || s[0] != 3 {
            return Err(SsgaError::Shape(format!("frame must be [3, H, W], got {s:?}")));
        }
        if pixels.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(SsgaError::Shape("pixel values must lie in [0, 1]".into()));
        }
        Ok(Self { pixels, frame_id })
    }

    pub fn height(&self) -> usize {
        self.pixels.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.pixels.shape()[2]
    }
}

/// Backbone output `[d_f, H/stride, W/stride]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub values: Tensor,
    pub stride: usize,
}

impl FeatureMap {
    pub fn channels(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.values.shape()[2]
    }
}

/// Per-query embeddings `[n_queries, d]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RefinedEmbedding(pub Tensor);

impl RefinedEmbedding {
    pub fn values(&self) -> &Tensor {
        &self.0
    }
}

/// Class logits `[n, c + 1]` (last column is "no object") and boxes `[n, 4]` in
/// normalized `(cx, cy, w, h)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Detection {
    pub class_logits: Tensor,
    pub boxes: Tensor,
}

/// A scored box extracted from a [`Detection`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScoredBox {
    pub query: usize,
    pub class_id: usize,
    pub score: f64,
    pub bbox: BBox,
}

impl Detection {
    pub fn num_queries(&self) -> usize {
        self.boxes.rows()
    }

    pub fn num_classes(&self) -> usize {
        self.class_logits.cols() - 1
    }

    pub fn bbox(&self, q: usize) -> BBox {
        let r = self.boxes.row(q);
        BBox::new(r[0], r[1], r[2], r[3])
    }

    /// Softmax class probabilities per query (including the no-object column).
    pub fn probabilities(&self) -> Tensor {
        let mut p = self.class_logits.clone();
        let k = p.cols();
        for row in p.data_mut().chunks_mut(k) {
            softmax_in_place(row);
        }
        p
    }

    /// One box per query labelled with its most likely object class; the score
    /// is that class's probability (no-object excluded from the argmax).
    pub fn scored_boxes(&self) -> Vec<ScoredBox> {
        let probs = self.probabilities();
        let c = self.num_classes();
        (0..self.num_queries())
            .map(|q| {
                let row = &probs.row(q)[..c];
                let (class_id, &score) = row
                    .iter()
                    .enumerate()
                    .fold((0, &row[0]), |best, cur| if cur.1 > best.1 { cur } else { best });
                ScoredBox {
                    query: q,
                    class_id,
                    score,
                    bbox: self.bbox(q),
                }
            })
            .collect()
    }

    /// Scored boxes above a confidence threshold.
    pub fn confident(&self, threshold: f64) -> Vec<ScoredBox> {
        self.scored_boxes().into_iter().filter(|s| s.score >= threshold).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GtObject {
    #[serde(rename = "classId")]
    pub class_id: usize,
    pub bbox: [f64; 4],
}

impl GtObject {
    pub fn bbox(&self) -> BBox {
        BBox::from_array(self.bbox)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GroundTruth {
    pub objects: Vec<GtObject>,
}

impl GroundTruth {
    pub fn new(objects: Vec<GtObject>) -> Self {
        Self { objects }
    }

    pub fn len(&self) -> usize {
        self.objects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.objects.is_empty()
    }
}
