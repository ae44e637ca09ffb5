//! Drives a tracker over a synthetic scenario.

use crate::embed::{Embedder, FrameFeatures};
use crate::error::Result;
use crate::geometry::Detection;
use crate::moteval::MotRecord;
use crate::synth::{corrupt_detections, render_level, render_pyramid, GroundTruth, ScenarioConfig};
use crate::tracker::{FrameInput, FrameResult, Tracker};

/// Which appearance input the tracker receives per frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureSource {
    /// The finest rendered level, used directly as the ID-aware map.
    OracleMap,
    /// The full rendered pyramid, for a learned embedder.
    Pyramid,
}

#[derive(Debug, Clone)]
pub struct TrackRun {
    pub online: Vec<FrameResult>,
    /// Finalized trajectories with merges applied.
    pub records: Vec<MotRecord>,
}

impl TrackRun {
    /// Per-frame output as emitted, before merges are rewritten.
    pub fn online_records(&self) -> Vec<MotRecord> {
        self.online.iter().flat_map(FrameResult::to_mot).collect()
    }
}

/// Detections of frames `1..=frames`.
pub fn scenario_detections(gt: &GroundTruth, cfg: &ScenarioConfig) -> Vec<Vec<Detection>> {
    (1..=gt.frames).map(|f| corrupt_detections(gt, f, cfg)).collect()
}

pub fn frame_features(gt: &GroundTruth, cfg: &ScenarioConfig, frame: usize, source: FeatureSource) -> FrameFeatures {
    match source {
        FeatureSource::OracleMap => FrameFeatures::Map {
            map: render_level(gt, frame, 0, cfg),
            stride: cfg.strides[0],
        },
        FeatureSource::Pyramid => FrameFeatures::Pyramid(render_pyramid(gt, frame, cfg)),
    }
}

/// Runs `tracker` over every frame with the given detections.
pub fn run_tracker<E: Embedder>(
    tracker: &mut Tracker<E>,
    gt: &GroundTruth,
    cfg: &ScenarioConfig,
    detections: &[Vec<Detection>],
    source: FeatureSource,
) -> Result<TrackRun> {
    let mut online = Vec::with_capacity(detections.len());
    for (i, dets) in detections.iter().enumerate() {
        let frame = i + 1;
        online.push(tracker.step(FrameInput {
            frame,
            detections: dets.clone(),
            features: frame_features(gt, cfg, frame, source),
        })?);
    }
    Ok(TrackRun {
        online,
        records: tracker.finalize(),
    })
}
