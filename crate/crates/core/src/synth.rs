//! Synthetic scenarios: trajectories with scripted occlusions, noisy
//! detections and rendered feature pyramids carrying per-identity signatures.

use autograd::Tensor;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{BBox, Detection};
use crate::moteval::MotRecord;
use crate::ssfl::FeaturePyramid;

/// A span of frames (1-based, inclusive) during which a target is invisible.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Occlusion {
    /// 0-based target index.
    pub target: usize,
    pub start: usize,
    pub end: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub width: usize,
    pub height: usize,
    pub targets: usize,
    pub frames: usize,
    /// Box width range in pixels; height is `aspect · width`.
    pub box_width: [f64; 2],
    pub aspect: f64,
    /// Speed range in pixels per frame.
    pub speed: [f64; 2],
    /// Upper bound on the sideways sinusoidal offset, pixels.
    pub wobble: f64,
    /// Period range of the sideways offset, frames.
    pub wobble_period: [f64; 2],
    /// Number of random occlusion events, each on a distinct target.
    pub occlusions: usize,
    pub occlusion_len: [usize; 2],
    /// Occlusions keep at least this many visible frames at both sequence ends.
    pub occlusion_margin: usize,
    /// Extra occlusion events placed exactly as given.
    pub scripted_occlusions: Vec<Occlusion>,
    /// Per-coordinate detection jitter, pixels.
    pub det_sigma: f64,
    /// Drop probability for targets overlapping another target.
    pub miss_prob: f64,
    /// IoU above which two visible targets count as overlapping.
    pub overlap_iou: f64,
    /// Per-frame probability of one false-positive detection.
    pub fp_rate: f64,
    /// Signature dimension, equal to the pyramid channel count.
    pub channels: usize,
    pub sigma_bg: f64,
    pub sigma_sig: f64,
    pub strides: [f64; 3],
    /// Signatures are redrawn until every pairwise cosine is below this.
    pub max_signature_cosine: f64,
    pub seed: u64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            width: 512,
            height: 512,
            targets: 20,
            frames: 200,
            box_width: [24.0, 40.0],
            aspect: 2.0,
            speed: [0.5, 2.0],
            wobble: 2.0,
            wobble_period: [40.0, 120.0],
            occlusions: 10,
            occlusion_len: [10, 30],
            occlusion_margin: 10,
            scripted_occlusions: Vec::new(),
            det_sigma: 1.0,
            miss_prob: 0.3,
            overlap_iou: 0.3,
            fp_rate: 0.1,
            channels: 128,
            sigma_bg: 0.1,
            sigma_sig: 0.05,
            strides: [8.0, 16.0, 32.0],
            max_signature_cosine: 0.5,
            seed: 0,
        }
    }
}

impl ScenarioConfig {
    /// Map size of pyramid level `k` (0-based).
    pub fn level_size(&self, k: usize) -> (usize, usize) {
        let s = self.strides[k];
        (
            (self.height as f64 / s).ceil() as usize,
            (self.width as f64 / s).ceil() as usize,
        )
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        for (name, p) in [
            ("miss_prob", self.miss_prob),
            ("fp_rate", self.fp_rate),
            ("overlap_iou", self.overlap_iou),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} = {p} is outside [0, 1]"));
            }
        }
        if self.width == 0 || self.height == 0 || self.frames == 0 || self.channels == 0 {
            return bad("image size, frame count and channel count must be positive".into());
        }
        let [w0, w1] = self.box_width;
        if !(w0 > 0.0 && w0 <= w1) || !(self.aspect > 0.0) {
            return bad(format!("invalid box size range {:?} / aspect {}", self.box_width, self.aspect));
        }
        if w1 >= self.width as f64 || w1 * self.aspect >= self.height as f64 {
            return bad(format!(
                "boxes up to {}x{} do not fit in a {}x{} image",
                w1,
                w1 * self.aspect,
                self.width,
                self.height
            ));
        }
        if !(self.speed[0] >= 0.0 && self.speed[0] <= self.speed[1]) {
            return bad(format!("invalid speed range {:?}", self.speed));
        }
        if !(self.wobble >= 0.0 && self.wobble_period[0] > 0.0 && self.wobble_period[0] <= self.wobble_period[1]) {
            return bad("invalid wobble settings".into());
        }
        let [l0, l1] = self.occlusion_len;
        if self.occlusions > 0 {
            if l0 == 0 || l0 > l1 {
                return bad(format!("invalid occlusion length range {:?}", self.occlusion_len));
            }
            if self.occlusions > self.targets {
                return bad(format!(
                    "{} occlusions need distinct targets but there are only {}",
                    self.occlusions, self.targets
                ));
            }
            if 2 * self.occlusion_margin + l1 > self.frames {
                return bad(format!(
                    "occlusions of up to {l1} frames with margin {} do not fit in {} frames",
                    self.occlusion_margin, self.frames
                ));
            }
        }
        for o in &self.scripted_occlusions {
            if o.target >= self.targets || o.start == 0 || o.start > o.end || o.end > self.frames {
                return bad(format!("scripted occlusion {o:?} is out of range"));
            }
        }
        if !(self.det_sigma >= 0.0 && self.sigma_bg >= 0.0 && self.sigma_sig >= 0.0) {
            return bad("noise levels must be nonnegative".into());
        }
        if !self.strides.iter().all(|&s| s > 0.0) {
            return bad("strides must be positive".into());
        }
        Ok(())
    }

    fn rng(&self, stream: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream);
        rng
    }
}

const STREAM_SCENE: u64 = 1;
const STREAM_DETECTIONS: u64 = 2 << 40;
const STREAM_RENDER: u64 = 3 << 40;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetTruth {
    /// 1-based identity.
    pub id: i64,
    /// Unit vector of length `channels`.
    pub signature: Vec<f64>,
    /// Box per frame (index `frame − 1`), kept while invisible.
    pub boxes: Vec<BBox>,
    pub visible: Vec<bool>,
}

impl TargetTruth {
    pub fn box_at(&self, frame: usize) -> BBox {
        self.boxes[frame - 1]
    }

    pub fn visible_at(&self, frame: usize) -> bool {
        self.visible[frame - 1]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub width: usize,
    pub height: usize,
    pub frames: usize,
    pub targets: Vec<TargetTruth>,
    pub occlusions: Vec<Occlusion>,
}

impl GroundTruth {
    /// `(target index, box)` for every visible target at `frame`.
    pub fn visible(&self, frame: usize) -> Vec<(usize, BBox)> {
        self.targets
            .iter()
            .enumerate()
            .filter(|(_, t)| t.visible_at(frame))
            .map(|(i, t)| (i, t.box_at(frame)))
            .collect()
    }

    /// Visible boxes only, confidence 1.
    pub fn to_mot(&self) -> Vec<MotRecord> {
        let mut out = Vec::new();
        for frame in 1..=self.frames {
            for (i, b) in self.visible(frame) {
                out.push(MotRecord::new(frame as u32, self.targets[i].id, &b, 1.0));
            }
        }
        out
    }

    pub fn signatures_json(&self) -> serde_json::Value {
        let entries: Vec<serde_json::Value> = self
            .targets
            .iter()
            .map(|t| serde_json::json!({ "id": t.id, "signature": t.signature }))
            .collect();
        serde_json::Value::Array(entries)
    }
}

fn unit_gaussian<R: Rng>(dim: usize, rng: &mut R) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-12 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn uniform<R: Rng>(rng: &mut R, [lo, hi]: [f64; 2]) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

/// Draws trajectories, signatures and occlusion spans.
pub fn generate_scenario(cfg: &ScenarioConfig) -> Result<GroundTruth> {
    cfg.validate()?;
    let mut rng = cfg.rng(STREAM_SCENE);

    let mut signatures: Vec<Vec<f64>> = Vec::with_capacity(cfg.targets);
    for _ in 0..cfg.targets {
        let mut attempts = 0;
        loop {
            let s = unit_gaussian(cfg.channels, &mut rng);
            if signatures.iter().all(|o| dot(o, &s) < cfg.max_signature_cosine) {
                signatures.push(s);
                break;
            }
            attempts += 1;
            if attempts > 10_000 {
                return Err(Error::Config(format!(
                    "cannot draw {} signatures of dimension {} with pairwise cosine below {}",
                    cfg.targets, cfg.channels, cfg.max_signature_cosine
                )));
            }
        }
    }

    let (iw, ih) = (cfg.width as f64, cfg.height as f64);
    let mut targets = Vec::with_capacity(cfg.targets);
    for (i, signature) in signatures.into_iter().enumerate() {
        let w = uniform(&mut rng, cfg.box_width);
        let h = w * cfg.aspect;
        let mut cx = rng.random_range(w / 2.0..=iw - w / 2.0);
        let mut cy = rng.random_range(h / 2.0..=ih - h / 2.0);
        let speed = uniform(&mut rng, cfg.speed);
        let heading = rng.random_range(0.0..std::f64::consts::TAU);
        let (mut vx, mut vy) = (speed * heading.cos(), speed * heading.sin());
        let amp = rng.random_range(0.0..=cfg.wobble);
        let period = uniform(&mut rng, cfg.wobble_period);
        let phase = rng.random_range(0.0..std::f64::consts::TAU);
        let (nx, ny) = (-heading.sin(), heading.cos());

        let mut boxes = Vec::with_capacity(cfg.frames);
        for f in 0..cfg.frames {
            if f > 0 {
                cx += vx;
                cy += vy;
                if cx < w / 2.0 || cx > iw - w / 2.0 {
                    vx = -vx;
                    cx = cx.clamp(w / 2.0, iw - w / 2.0);
                }
                if cy < h / 2.0 || cy > ih - h / 2.0 {
                    vy = -vy;
                    cy = cy.clamp(h / 2.0, ih - h / 2.0);
                }
            }
            let off = amp * (std::f64::consts::TAU * f as f64 / period + phase).sin();
            let px = (cx + off * nx).clamp(w / 2.0, iw - w / 2.0);
            let py = (cy + off * ny).clamp(h / 2.0, ih - h / 2.0);
            boxes.push(BBox::from_center(px, py, w, h));
        }
        targets.push(TargetTruth {
            id: i as i64 + 1,
            signature,
            boxes,
            visible: vec![true; cfg.frames],
        });
    }

    let mut occlusions = Vec::new();
    if cfg.occlusions > 0 {
        let mut order: Vec<usize> = (0..cfg.targets).collect();
        order.shuffle(&mut rng);
        for &target in order.iter().take(cfg.occlusions) {
            let len = rng.random_range(cfg.occlusion_len[0]..=cfg.occlusion_len[1]);
            let first = 1 + cfg.occlusion_margin;
            let last = cfg.frames - cfg.occlusion_margin - len + 1;
            let start = rng.random_range(first..=last);
            occlusions.push(Occlusion {
                target,
                start,
                end: start + len - 1,
            });
        }
    }
    occlusions.extend(cfg.scripted_occlusions.iter().copied());
    for o in &occlusions {
        for f in o.start..=o.end {
            targets[o.target].visible[f - 1] = false;
        }
    }

    Ok(GroundTruth {
        width: cfg.width,
        height: cfg.height,
        frames: cfg.frames,
        targets,
        occlusions,
    })
}

/// Inclusive map-index range covered by `[a, b]` in image pixels at `stride`,
/// wide enough that every bilinear tap of an RoIAlign over the box lands
/// inside it.
fn footprint(a: f64, b: f64, stride: f64, n: usize) -> Option<(usize, usize)> {
    let lo = (a / stride - 0.5).clamp(-0.5, n as f64 - 0.5);
    let hi = (b / stride - 0.5).clamp(-0.5, n as f64 - 0.5);
    if hi <= lo {
        return None;
    }
    let first = lo.floor().max(0.0) as usize;
    let last = (hi.ceil().max(0.0) as usize).min(n - 1);
    Some((first, last))
}

/// One pyramid level (0-based `level`) at `frame`: background noise plus
/// every visible target's signature over its footprint.
pub fn render_level(gt: &GroundTruth, frame: usize, level: usize, cfg: &ScenarioConfig) -> Tensor {
    let (h, w) = cfg.level_size(level);
    let stride = cfg.strides[level];
    let c = cfg.channels;
    let mut rng = cfg.rng(STREAM_RENDER | ((frame as u64) << 4) | level as u64);
    let bg = Normal::new(0.0, cfg.sigma_bg).expect("validated sigma");
    let sig = Normal::new(0.0, cfg.sigma_sig).expect("validated sigma");
    let mut data: Vec<f64> = (0..c * h * w).map(|_| bg.sample(&mut rng)).collect();
    for t in &gt.targets {
        if !t.visible_at(frame) {
            continue;
        }
        let b = t.box_at(frame);
        let (Some((x0, x1)), Some((y0, y1))) = (
            footprint(b.x, b.right(), stride, w),
            footprint(b.y, b.bottom(), stride, h),
        ) else {
            continue;
        };
        for ch in 0..c {
            let plane = &mut data[ch * h * w..(ch + 1) * h * w];
            for y in y0..=y1 {
                for x in x0..=x1 {
                    plane[y * w + x] += t.signature[ch] + sig.sample(&mut rng);
                }
            }
        }
    }
    Tensor::new(&[c, h, w], data).expect("shape matches data")
}

pub fn render_pyramid(gt: &GroundTruth, frame: usize, cfg: &ScenarioConfig) -> FeaturePyramid {
    FeaturePyramid {
        levels: (0..3).map(|k| render_level(gt, frame, k, cfg)).collect(),
        strides: cfg.strides,
        frame,
    }
}

/// Noisy detector output for `frame`, sorted by descending score.
pub fn corrupt_detections(gt: &GroundTruth, frame: usize, cfg: &ScenarioConfig) -> Vec<Detection> {
    let mut rng = cfg.rng(STREAM_DETECTIONS | frame as u64);
    let jitter = Normal::new(0.0, cfg.det_sigma).expect("validated sigma");
    let visible = gt.visible(frame);
    let mut dets = Vec::new();
    for (k, &(_, b)) in visible.iter().enumerate() {
        let overlapped = visible
            .iter()
            .enumerate()
            .any(|(m, (_, o))| m != k && b.iou(o) > cfg.overlap_iou);
        // Both draws happen unconditionally so the stream does not depend on branches.
        let drop_roll: f64 = rng.random();
        let score_roll: f64 = rng.random();
        let noise: [f64; 4] = std::array::from_fn(|_| jitter.sample(&mut rng));
        let score = if overlapped {
            if drop_roll < cfg.miss_prob {
                continue;
            }
            0.2 + 0.4 * score_roll
        } else {
            0.7 + 0.3 * score_roll
        };
        let bbox = BBox {
            x: b.x + noise[0],
            y: b.y + noise[1],
            w: (b.w + noise[2]).max(1.0),
            h: (b.h + noise[3]).max(1.0),
        };
        dets.push(Detection::new(bbox, score));
    }
    let fp_roll: f64 = rng.random();
    if fp_roll < cfg.fp_rate {
        let w = uniform(&mut rng, cfg.box_width);
        let h = w * cfg.aspect;
        let x = rng.random_range(0.0..=(cfg.width as f64 - w));
        let y = rng.random_range(0.0..=(cfg.height as f64 - h));
        let score = 0.1 + 0.4 * rng.random::<f64>();
        dets.push(Detection::new(BBox { x, y, w, h }, score));
    }
    sort_by_score(&mut dets);
    dets
}

/// Stable descending sort by score.
pub fn sort_by_score(dets: &mut [Detection]) {
    dets.sort_by(|a, b| b.score.total_cmp(&a.score));
}

/// Detections as MOT records with id `-1`.
pub fn detections_to_mot(frame: usize, dets: &[Detection]) -> Vec<MotRecord> {
    dets.iter()
        .map(|d| MotRecord::new(frame as u32, -1, &d.bbox, d.score))
        .collect()
}
