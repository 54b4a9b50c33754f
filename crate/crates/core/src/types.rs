//! Domain types shared by every stage: detections, tracklets, segment plans
//! and trajectories. All of them are immutable after construction and safe to
//! share across threads.

use nalgebra::DVector;

use crate::error::{Error, Result};

/// Axis-aligned bounding box in pixel coordinates, `(left, top)` corner plus
/// extent. Width and height are required to be positive.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    pub left: f64,
    pub top: f64,
    pub width: f64,
    pub height: f64,
}

impl BBox {
    pub fn new(left: f64, top: f64, width: f64, height: f64) -> Self {
        BBox {
            left,
            top,
            width,
            height,
        }
    }

    pub fn center(&self) -> (f64, f64) {
        (self.left + self.width / 2.0, self.top + self.height / 2.0)
    }

    pub fn diagonal(&self) -> f64 {
        (self.width * self.width + self.height * self.height).sqrt()
    }

    pub fn area(&self) -> f64 {
        self.width * self.height
    }

    /// Intersection-over-union with another box; 0 when disjoint.
    pub fn iou(&self, other: &BBox) -> f64 {
        let x1 = self.left.max(other.left);
        let y1 = self.top.max(other.top);
        let x2 = (self.left + self.width).min(other.left + other.width);
        let y2 = (self.top + self.height).min(other.top + other.height);
        let iw = (x2 - x1).max(0.0);
        let ih = (y2 - y1).max(0.0);
        let inter = iw * ih;
        let union = self.area() + other.area() - inter;
        if union > 0.0 {
            inter / union
        } else {
            0.0
        }
    }

    pub fn is_finite(&self) -> bool {
        self.left.is_finite()
            && self.top.is_finite()
            && self.width.is_finite()
            && self.height.is_finite()
    }
}

/// One detector response: frame index (1-based), box, detector confidence and
/// the raw feature vector supplied with the detection.
///
/// The optional ground-truth identity is deliberately not public: it exists
/// for scene synthesis and evaluation tooling only, and none of the tracking
/// stages can reach it through the public accessors they use.
#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub frame: u32,
    pub bbox: BBox,
    pub confidence: f64,
    pub feature: DVector<f64>,
    id_hint: Option<u32>,
}

impl Detection {
    pub fn new(frame: u32, bbox: BBox, confidence: f64, feature: DVector<f64>) -> Self {
        Detection {
            frame,
            bbox,
            confidence,
            feature,
            id_hint: None,
        }
    }

    /// Attach a ground-truth identity for synthesis/evaluation bookkeeping.
    pub fn with_id_hint(mut self, id: u32) -> Self {
        self.id_hint = Some(id);
        self
    }

    /// Ground-truth identity, if present. Evaluation-side only: tracker code
    /// paths must not call this.
    pub fn eval_id_hint(&self) -> Option<u32> {
        self.id_hint
    }

    /// Strip the ground-truth identity (used to audit that the tracker output
    /// does not depend on it).
    pub fn without_id_hint(mut self) -> Self {
        self.id_hint = None;
        self
    }
}

/// A reliable track fragment: a temporally contiguous run of detections
/// believed to belong to one object.
#[derive(Debug, Clone, PartialEq)]
pub struct Tracklet {
    pub tid: u32,
    detections: Vec<Detection>,
    /// Index of the temporal segment containing the head frame (0-based).
    pub segment: usize,
}

impl Tracklet {
    /// Build a tracklet, checking that detections are nonempty and frames are
    /// strictly consecutive (step exactly 1).
    pub fn new(tid: u32, detections: Vec<Detection>, segment: usize) -> Result<Self> {
        if detections.is_empty() {
            return Err(Error::Internal(format!("tracklet {tid} has no detections")));
        }
        for pair in detections.windows(2) {
            if pair[1].frame != pair[0].frame + 1 {
                return Err(Error::Internal(format!(
                    "tracklet {tid} not contiguous: frame {} follows {}",
                    pair[1].frame, pair[0].frame
                )));
            }
        }
        Ok(Tracklet {
            tid,
            detections,
            segment,
        })
    }

    pub fn detections(&self) -> &[Detection] {
        &self.detections
    }

    pub fn len(&self) -> usize {
        self.detections.len()
    }

    pub fn is_empty(&self) -> bool {
        false // construction requires at least one detection
    }

    pub fn head(&self) -> &Detection {
        &self.detections[0]
    }

    pub fn tail(&self) -> &Detection {
        self.detections.last().expect("nonempty by construction")
    }

    pub fn frame_range(&self) -> (u32, u32) {
        (self.head().frame, self.tail().frame)
    }

    /// Spatio-temporal conflict test: two tracklets sharing any frame cannot
    /// be the same object.
    pub fn overlaps_temporally(&self, other: &Tracklet) -> bool {
        self.head().frame <= other.tail().frame && other.head().frame <= self.tail().frame
    }

    /// Indices of the `kappa` highest-confidence responses, ties broken by
    /// earlier frame then lower index.
    pub fn strongest_responses(&self, kappa: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.detections.len()).collect();
        order.sort_by(|&a, &b| {
            let da = &self.detections[a];
            let db = &self.detections[b];
            db.confidence
                .partial_cmp(&da.confidence)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(da.frame.cmp(&db.frame))
                .then(a.cmp(&b))
        });
        order.truncate(kappa);
        order
    }
}

/// Partition of the frame range `[1, last_frame]` into fixed-length,
/// non-overlapping segments. The final segment may be shorter.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentPlan {
    pub segment_length: u32,
    /// Inclusive `(start_frame, end_frame)` per segment.
    pub boundaries: Vec<(u32, u32)>,
}

/// Lay out contiguous non-overlapping segments over `[1, last_frame]`.
pub fn plan_segments(last_frame: u32, segment_length: u32) -> SegmentPlan {
    assert!(last_frame >= 1, "last_frame must be >= 1");
    assert!(segment_length >= 1, "segment_length must be >= 1");
    let mut boundaries = Vec::new();
    let mut start = 1u32;
    while start <= last_frame {
        let end = (start + segment_length - 1).min(last_frame);
        boundaries.push((start, end));
        start = end + 1;
    }
    SegmentPlan {
        segment_length,
        boundaries,
    }
}

impl SegmentPlan {
    pub fn n_segments(&self) -> usize {
        self.boundaries.len()
    }

    pub fn last_frame(&self) -> u32 {
        self.boundaries.last().map(|b| b.1).unwrap_or(0)
    }

    /// Segment index (0-based) containing `frame`. Pure function of the frame
    /// index.
    pub fn segment_of(&self, frame: u32) -> usize {
        assert!(
            frame >= 1 && frame <= self.last_frame(),
            "frame {frame} outside plan"
        );
        ((frame - 1) / self.segment_length) as usize
    }

    /// Re-label tracklet segments by head frame.
    pub fn assign_segments(&self, tracklets: &mut [Tracklet]) {
        for t in tracklets {
            t.segment = self.segment_of(t.head().frame);
        }
    }
}

/// A finished track: per-frame boxes (contiguous after gap interpolation) and
/// the tracklets that were merged to form it.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub track_id: u32,
    /// `(frame, box)`, frames strictly increasing.
    pub entries: Vec<(u32, BBox)>,
    pub source_tracklets: Vec<u32>,
}

impl Trajectory {
    pub fn frame_range(&self) -> (u32, u32) {
        (
            self.entries.first().map(|e| e.0).unwrap_or(0),
            self.entries.last().map(|e| e.0).unwrap_or(0),
        )
    }

    pub fn box_at(&self, frame: u32) -> Option<&BBox> {
        self.entries
            .binary_search_by_key(&frame, |e| e.0)
            .ok()
            .map(|i| &self.entries[i].1)
    }

    pub fn is_contiguous(&self) -> bool {
        self.entries
            .windows(2)
            .all(|w| w[1].0 == w[0].0 + 1)
    }
}
