//! Online two-step tracker: short-term detection association, then
//! long-term tracklet association between the lost and candidate banks.

use std::collections::{BTreeMap, VecDeque};

use autograd::Tensor;
use serde::{Deserialize, Serialize};

use crate::assoc::{cosine_similarity, fuse_similarity, match_with_threshold};
use crate::embed::{Embedder, FrameFeatures};
use crate::error::{Error, Result};
use crate::geometry::{iou_matrix, roi_align_tensor, BBox, Detection};
use crate::matrix::Matrix;
use crate::moteval::MotRecord;
use crate::msfl::{collect_crop_stack, long_term_similarity, BankConfig, BankEvent, CropStack, StackKind, TrackletBanks};
use crate::motion::MotionState;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrackerConfig {
    pub high_score: f64,
    pub low_score: f64,
    /// Minimum score for an unmatched detection to start a track.
    pub init_score: f64,
    /// Weight of appearance against IoU in the first association stage.
    pub lambda_app: f64,
    pub theta_short: f64,
    pub theta_long: f64,
    /// IoU threshold of the low-score stage.
    pub low_iou_threshold: f64,
    /// Let recently lost tracks join the first stage (appearance only).
    pub lost_in_step1: bool,
    /// How many frames after its last observation a lost track stays in that pool.
    pub lost_step1_frames: usize,
    pub enable_long_term: bool,
    pub min_track_length: usize,
    /// Crops kept per track; raised to at least `tau`.
    pub crop_cache: usize,
    pub banks: BankConfig,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self {
            high_score: 0.6,
            low_score: 0.1,
            init_score: 0.7,
            lambda_app: 0.5,
            theta_short: 0.3,
            theta_long: 0.7,
            low_iou_threshold: 0.5,
            lost_in_step1: false,
            lost_step1_frames: 3,
            enable_long_term: true,
            min_track_length: 2,
            crop_cache: 8,
            banks: BankConfig::default(),
        }
    }
}

impl TrackerConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = [
            ("high_score", self.high_score),
            ("low_score", self.low_score),
            ("init_score", self.init_score),
            ("lambda_app", self.lambda_app),
            ("theta_short", self.theta_short),
            ("theta_long", self.theta_long),
            ("low_iou_threshold", self.low_iou_threshold),
        ];
        for (name, v) in unit {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        if self.low_score > self.high_score {
            return Err(Error::Config("low_score exceeds high_score".into()));
        }
        if self.banks.tau == 0 {
            return Err(Error::Config("tau must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrackState {
    Active,
    Lost,
    Removed,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub frame: usize,
    pub bbox: BBox,
    pub score: f64,
}

#[derive(Debug, Clone)]
pub struct Track {
    pub id: u64,
    pub boxes: Vec<Observation>,
    pub state: TrackState,
    pub init_frame: usize,
    /// Last observed frame while Lost.
    pub lost_frame: Option<usize>,
    pub score: f64,
    pub motion: MotionState,
    pub predicted: BBox,
    pub crop_cache: VecDeque<(usize, Tensor)>,
    pub short_feat: Vec<f64>,
    /// Set when a long-term merge folded this track into another one.
    pub absorbed_into: Option<u64>,
}

impl Track {
    pub fn last_frame(&self) -> usize {
        self.boxes.last().map_or(self.init_frame, |o| o.frame)
    }

    pub fn last_box(&self) -> Option<BBox> {
        self.boxes.last().map(|o| o.bbox)
    }

    fn cached(&self) -> Vec<(usize, Tensor)> {
        self.crop_cache.iter().cloned().collect()
    }
}

/// Inputs of one frame.
#[derive(Debug, Clone)]
pub struct FrameInput {
    pub frame: usize,
    pub detections: Vec<Detection>,
    pub features: FrameFeatures,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrackSnapshot {
    pub id: u64,
    pub bbox: BBox,
    pub score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MergeEvent {
    pub lost: u64,
    pub candidate: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub high_detections: usize,
    pub low_detections: usize,
    pub step1_matches: usize,
    pub low_matches: usize,
    pub reactivated: usize,
    pub new_tracks: usize,
    pub newly_lost: usize,
    pub merges: usize,
    pub removed: usize,
    pub lost_bank: usize,
    pub candidate_bank: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameResult {
    pub frame: usize,
    /// Tracks observed at this frame, by id.
    pub tracks: Vec<TrackSnapshot>,
    pub merges: Vec<MergeEvent>,
    pub diagnostics: Diagnostics,
}

impl FrameResult {
    pub fn to_mot(&self) -> Vec<MotRecord> {
        self.tracks
            .iter()
            .map(|s| MotRecord::new(self.frame as u32, s.id as i64, &s.bbox, s.score))
            .collect()
    }
}

pub struct Tracker<E: Embedder> {
    cfg: TrackerConfig,
    embedder: E,
    tracks: BTreeMap<u64, Track>,
    banks: TrackletBanks,
    next_id: u64,
    last_frame: Option<usize>,
}

impl<E: Embedder> Tracker<E> {
    pub fn new(cfg: TrackerConfig, embedder: E) -> Result<Self> {
        cfg.validate()?;
        let banks = TrackletBanks::new(cfg.banks.clone());
        Ok(Self {
            cfg,
            embedder,
            tracks: BTreeMap::new(),
            banks,
            next_id: 1,
            last_frame: None,
        })
    }

    pub fn config(&self) -> &TrackerConfig {
        &self.cfg
    }

    pub fn tracks(&self) -> impl Iterator<Item = &Track> {
        self.tracks.values()
    }

    pub fn track(&self, id: u64) -> Option<&Track> {
        self.tracks.get(&id)
    }

    pub fn banks(&self) -> &TrackletBanks {
        &self.banks
    }

    fn cache_len(&self) -> usize {
        self.cfg.crop_cache.max(self.cfg.banks.tau)
    }

    fn observe(&mut self, id: u64, frame: usize, det: &Detection, crop: Tensor, feat: Vec<f64>) {
        let cap = self.cache_len();
        let t = self.tracks.get_mut(&id).expect("known track");
        t.motion.update(&det.bbox);
        t.boxes.push(Observation {
            frame,
            bbox: det.bbox,
            score: det.score,
        });
        t.score = det.score;
        t.crop_cache.push_back((frame, crop));
        while t.crop_cache.len() > cap {
            t.crop_cache.pop_front();
        }
        t.short_feat = feat;
    }

    /// Processes one frame.
    pub fn step(&mut self, input: FrameInput) -> Result<FrameResult> {
        let t = input.frame;
        if let Some(last) = self.last_frame {
            if t <= last {
                return Err(Error::OutOfOrder { last, got: t });
            }
        }
        for (i, d) in input.detections.iter().enumerate() {
            if !d.bbox.is_valid() || !d.score.is_finite() || !(0.0..=1.0).contains(&d.score) {
                return Err(Error::Detection(format!(
                    "frame {t}: detection {i} is malformed ({:?}, score {})",
                    d.bbox, d.score
                )));
            }
        }
        let mut dets = input.detections;
        dets.sort_by(|a, b| b.score.total_cmp(&a.score));
        let mut diag = Diagnostics::default();

        // (a) ID-aware map and per-detection crops and features.
        let (map, stride) = self.embedder.id_aware_map(&input.features)?;
        let crops = dets
            .iter()
            .map(|d| roi_align_tensor(&map, &d.bbox, stride))
            .collect::<Result<Vec<_>>>()?;
        let feats = self.embedder.short_features(&crops)?;
        let high: Vec<usize> = (0..dets.len()).filter(|&i| dets[i].score >= self.cfg.high_score).collect();
        let low: Vec<usize> = (0..dets.len())
            .filter(|&i| dets[i].score < self.cfg.high_score && dets[i].score >= self.cfg.low_score)
            .collect();
        diag.high_detections = high.len();
        diag.low_detections = low.len();

        for tr in self.tracks.values_mut() {
            if tr.state != TrackState::Removed {
                tr.predicted = tr.motion.predict();
            }
        }

        // (b) first stage: fused appearance and IoU against high-score detections.
        let mut pool: Vec<u64> = self
            .tracks
            .values()
            .filter(|tr| tr.state == TrackState::Active)
            .map(|tr| tr.id)
            .collect();
        let recent_lost: Vec<u64> = if self.cfg.lost_in_step1 {
            self.tracks
                .values()
                .filter(|tr| {
                    tr.state == TrackState::Lost
                        && tr.lost_frame.is_some_and(|f| t - f <= self.cfg.lost_step1_frames)
                })
                .map(|tr| tr.id)
                .collect()
        } else {
            Vec::new()
        };
        pool.extend(&recent_lost);

        let mut det_used = vec![false; dets.len()];
        let mut matched_tracks = Vec::new();
        let mut events = Vec::new();
        if !pool.is_empty() && !high.is_empty() {
            let track_feats: Vec<Vec<f64>> = pool.iter().map(|id| self.tracks[id].short_feat.clone()).collect();
            let det_feats: Vec<Vec<f64>> = high.iter().map(|&i| feats[i].clone()).collect();
            let app = cosine_similarity(&track_feats, &det_feats);
            let preds: Vec<BBox> = pool.iter().map(|id| self.tracks[id].predicted).collect();
            let boxes: Vec<BBox> = high.iter().map(|&i| dets[i].bbox).collect();
            let iou = iou_matrix(&preds, &boxes);
            let mut fused = fuse_similarity(&app, &iou, self.cfg.lambda_app)?;
            let n_active = pool.len() - recent_lost.len();
            for r in n_active..pool.len() {
                for c in 0..high.len() {
                    fused.set(r, c, app.get(r, c));
                }
            }
            let m = match_with_threshold(&fused, self.cfg.theta_short);
            for &(r, c) in &m.pairs {
                let id = pool[r];
                let di = high[c];
                if self.tracks[&id].state == TrackState::Lost {
                    let tr = self.tracks.get_mut(&id).expect("pool track");
                    tr.state = TrackState::Active;
                    tr.lost_frame = None;
                    events.push(BankEvent::Reactivated { track: id });
                    diag.reactivated += 1;
                }
                self.observe(id, t, &dets[di], crops[di].clone(), feats[di].clone());
                det_used[di] = true;
                matched_tracks.push(id);
            }
            diag.step1_matches = m.pairs.len();
        }

        // second stage: IoU only, remaining active tracks against low-score detections.
        let remaining: Vec<u64> = pool[..pool.len() - recent_lost.len()]
            .iter()
            .copied()
            .filter(|id| !matched_tracks.contains(id))
            .collect();
        if !remaining.is_empty() && !low.is_empty() {
            let preds: Vec<BBox> = remaining.iter().map(|id| self.tracks[id].predicted).collect();
            let boxes: Vec<BBox> = low.iter().map(|&i| dets[i].bbox).collect();
            let m = match_with_threshold(&iou_matrix(&preds, &boxes), self.cfg.low_iou_threshold);
            for &(r, c) in &m.pairs {
                let di = low[c];
                self.observe(remaining[r], t, &dets[di], crops[di].clone(), feats[di].clone());
                det_used[di] = true;
                matched_tracks.push(remaining[r]);
            }
            diag.low_matches = m.pairs.len();
        }

        // (c) unmatched active tracks are lost; unmatched confident detections start tracks.
        let tau = self.cfg.banks.tau;
        for id in remaining.iter().filter(|id| !matched_tracks.contains(id)) {
            let tr = self.tracks.get_mut(id).expect("pool track");
            let last_seen = tr.last_frame();
            tr.state = TrackState::Lost;
            tr.lost_frame = Some(last_seen);
            let window = (last_seen.saturating_sub(tau - 1).max(1), last_seen);
            let stack = collect_crop_stack(&tr.cached(), window, StackKind::Lost).ok();
            events.push(BankEvent::Lost {
                track: *id,
                last_seen,
                stack,
            });
            diag.newly_lost += 1;
        }
        for &di in &high {
            if det_used[di] || dets[di].score < self.cfg.init_score {
                continue;
            }
            let id = self.next_id;
            self.next_id += 1;
            let d = &dets[di];
            self.tracks.insert(
                id,
                Track {
                    id,
                    boxes: Vec::new(),
                    state: TrackState::Active,
                    init_frame: t,
                    lost_frame: None,
                    score: d.score,
                    motion: MotionState::initiate(&d.bbox),
                    predicted: d.bbox,
                    crop_cache: VecDeque::new(),
                    short_feat: Vec::new(),
                    absorbed_into: None,
                },
            );
            let cap = self.cache_len();
            let tr = self.tracks.get_mut(&id).expect("just inserted");
            tr.boxes.push(Observation {
                frame: t,
                bbox: d.bbox,
                score: d.score,
            });
            tr.crop_cache.push_back((t, crops[di].clone()));
            tr.crop_cache.truncate(cap);
            tr.short_feat = feats[di].clone();
            events.push(BankEvent::Initialized { track: id, frame: t });
            diag.new_tracks += 1;
        }
        let evicted = self.banks.update(events, t)?;
        for id in &evicted.lost {
            if let Some(tr) = self.tracks.get_mut(id) {
                tr.state = TrackState::Removed;
                diag.removed += 1;
            }
        }

        // (d) long-term association between mature candidates and lost tracklets.
        let merges = if self.cfg.enable_long_term {
            self.long_term_step(t)?
        } else {
            Vec::new()
        };
        diag.merges = merges.len();
        diag.lost_bank = self.banks.lost.len();
        diag.candidate_bank = self.banks.candidates.len();
        self.last_frame = Some(t);

        let tracks = self
            .tracks
            .values()
            .filter(|tr| tr.state == TrackState::Active && tr.last_frame() == t)
            .map(|tr| TrackSnapshot {
                id: tr.id,
                bbox: tr.last_box().expect("observed at t"),
                score: tr.score,
            })
            .collect();
        Ok(FrameResult {
            frame: t,
            tracks,
            merges,
            diagnostics: diag,
        })
    }

    fn long_term_step(&mut self, t: usize) -> Result<Vec<MergeEvent>> {
        let tau = self.cfg.banks.tau;
        for (id, entry) in self.banks.candidates.iter_mut() {
            if entry.stack.is_some() || t + 1 < entry.init_frame + tau {
                continue;
            }
            let window = (entry.init_frame, entry.init_frame + tau - 1);
            entry.stack = Some(collect_crop_stack(&self.tracks[id].cached(), window, StackKind::Candidate)?);
        }
        let lost: Vec<(u64, usize, &CropStack)> = self
            .banks
            .lost
            .iter()
            .filter_map(|(id, e)| e.stack.as_ref().map(|s| (*id, e.lost_frame, s)))
            .collect();
        let cands: Vec<(u64, usize, &CropStack)> = self
            .banks
            .candidates
            .iter()
            .filter_map(|(id, e)| e.stack.as_ref().map(|s| (*id, e.init_frame, s)))
            .collect();
        if lost.is_empty() || cands.is_empty() {
            return Ok(Vec::new());
        }
        let lost_stacks: Vec<&CropStack> = lost.iter().map(|x| x.2).collect();
        let cand_stacks: Vec<&CropStack> = cands.iter().map(|x| x.2).collect();
        let lf = self.embedder.tracklet_features(&lost_stacks, StackKind::Lost)?;
        let cf = self.embedder.tracklet_features(&cand_stacks, StackKind::Candidate)?;
        let raw = long_term_similarity(&lf, &cf);
        // A candidate can only continue a track that was lost before it started.
        let s = Matrix::from_fn(lost.len(), cands.len(), |r, c| {
            if cands[c].1 > lost[r].1 {
                raw.get(r, c)
            } else {
                0.0
            }
        });
        let m = match_with_threshold(&s, self.cfg.theta_long);
        let pairs: Vec<(u64, u64)> = m.pairs.iter().map(|&(r, c)| (lost[r].0, cands[c].0)).collect();
        let mut events = Vec::new();
        let mut merges = Vec::new();
        for (lost_id, cand_id) in pairs {
            self.merge(lost_id, cand_id);
            events.push(BankEvent::Associated {
                lost: lost_id,
                candidate: cand_id,
            });
            merges.push(MergeEvent {
                lost: lost_id,
                candidate: cand_id,
            });
        }
        self.banks.update(events, t)?;
        Ok(merges)
    }

    /// The lost track takes over the candidate's history and state; the
    /// candidate disappears.
    fn merge(&mut self, lost_id: u64, cand_id: u64) {
        let mut cand = self.tracks.remove(&cand_id).expect("candidate track");
        let cap = self.cache_len();
        let lost = self.tracks.get_mut(&lost_id).expect("lost track");
        lost.boxes.append(&mut cand.boxes);
        lost.crop_cache.extend(cand.crop_cache.drain(..));
        while lost.crop_cache.len() > cap {
            lost.crop_cache.pop_front();
        }
        lost.motion = cand.motion.clone();
        lost.predicted = cand.predicted;
        lost.short_feat = std::mem::take(&mut cand.short_feat);
        lost.score = cand.score;
        lost.state = TrackState::Active;
        lost.lost_frame = None;
        cand.state = TrackState::Removed;
        cand.absorbed_into = Some(lost_id);
        self.tracks.insert(cand_id, cand);
    }

    /// Trajectories with at least `min_track_length` boxes, merges applied.
    pub fn finalize(&self) -> Vec<MotRecord> {
        let mut out: Vec<MotRecord> = self
            .tracks
            .values()
            .filter(|tr| tr.absorbed_into.is_none() && tr.boxes.len() >= self.cfg.min_track_length)
            .flat_map(|tr| {
                tr.boxes
                    .iter()
                    .map(|o| MotRecord::new(o.frame as u32, tr.id as i64, &o.bbox, o.score))
            })
            .collect();
        out.sort_by_key(|r| (r.frame, r.id));
        out
    }
}
