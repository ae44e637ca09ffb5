//! Boxes, IoU and RoIAlign.

use autograd::{Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Output bins per side of an RoIAlign crop.
pub const ROI_SIZE: usize = 4;
/// Bilinear samples per bin and axis.
pub const ROI_SAMPLES: usize = 2;

/// Axis-aligned box, top-left corner plus size, in image pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Result<Self> {
        let b = Self { x, y, w, h };
        if b.is_valid() {
            Ok(b)
        } else {
            Err(Error::InvalidRegion(format!("{b:?}")))
        }
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self {
            x: cx - w / 2.0,
            y: cy - h / 2.0,
            w,
            h,
        }
    }

    pub fn is_valid(&self) -> bool {
        [self.x, self.y, self.w, self.h].iter().all(|v| v.is_finite()) && self.w > 0.0 && self.h > 0.0
    }

    pub fn right(&self) -> f64 {
        self.x + self.w
    }

    pub fn bottom(&self) -> f64 {
        self.y + self.h
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x + self.w / 2.0, self.y + self.h / 2.0)
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn translate(&self, dx: f64, dy: f64) -> Self {
        Self {
            x: self.x + dx,
            y: self.y + dy,
            ..*self
        }
    }

    pub fn intersection(&self, other: &BBox) -> f64 {
        let iw = self.right().min(other.right()) - self.x.max(other.x);
        let ih = self.bottom().min(other.bottom()) - self.y.max(other.y);
        if iw <= 0.0 || ih <= 0.0 {
            0.0
        } else {
            iw * ih
        }
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        let inter = self.intersection(other);
        if inter == 0.0 {
            return 0.0;
        }
        let union = self.area() + other.area() - inter;
        (inter / union).clamp(0.0, 1.0)
    }
}

/// A detector output for one frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    pub score: f64,
}

impl Detection {
    pub fn new(bbox: BBox, score: f64) -> Self {
        Self { bbox, score }
    }
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    a.iou(b)
}

/// `M×N` table of IoU between every track box and every detection box.
pub fn iou_matrix(tracks: &[BBox], dets: &[BBox]) -> Matrix {
    Matrix::from_fn(tracks.len(), dets.len(), |j, i| tracks[j].iou(&dets[i]))
}

/// Precomputed bilinear sampling weights for one box on one map geometry.
///
/// Map index `u` covers image pixels `[u·s, (u+1)·s)`, so image coordinate
/// `x` sits at continuous index `x/s − 0.5`.
#[derive(Debug, Clone)]
struct RoiPlan {
    /// Per output bin, the `(flat map index, weight)` taps.
    taps: Vec<Vec<(usize, f64)>>,
}

impl RoiPlan {
    fn new(h: usize, w: usize, bbox: &BBox, stride: f64) -> Result<Self> {
        if h == 0 || w == 0 || !(stride > 0.0) || !bbox.is_valid() {
            return Err(Error::InvalidRegion(format!(
                "box {bbox:?} on a {h}x{w} map with stride {stride}"
            )));
        }
        let to_index = |v: f64| v / stride - 0.5;
        let clip = |v: f64, n: usize| v.clamp(-0.5, n as f64 - 0.5);
        let x0 = clip(to_index(bbox.x), w);
        let x1 = clip(to_index(bbox.right()), w);
        let y0 = clip(to_index(bbox.y), h);
        let y1 = clip(to_index(bbox.bottom()), h);
        if !(x1 - x0 > 1e-9 && y1 - y0 > 1e-9) {
            return Err(Error::InvalidRegion(format!(
                "box {bbox:?} has no area inside the {h}x{w} map (stride {stride})"
            )));
        }
        let bin_w = (x1 - x0) / ROI_SIZE as f64;
        let bin_h = (y1 - y0) / ROI_SIZE as f64;
        let per_sample = 1.0 / (ROI_SAMPLES * ROI_SAMPLES) as f64;
        let mut taps = Vec::with_capacity(ROI_SIZE * ROI_SIZE);
        for by in 0..ROI_SIZE {
            for bx in 0..ROI_SIZE {
                let mut bin = Vec::with_capacity(16);
                for sy in 0..ROI_SAMPLES {
                    let py = y0 + (by as f64 + (sy as f64 + 0.5) / ROI_SAMPLES as f64) * bin_h;
                    for sx in 0..ROI_SAMPLES {
                        let px = x0 + (bx as f64 + (sx as f64 + 0.5) / ROI_SAMPLES as f64) * bin_w;
                        for (idx, wgt) in bilinear_taps(py, px, h, w) {
                            bin.push((idx, wgt * per_sample));
                        }
                    }
                }
                taps.push(bin);
            }
        }
        Ok(Self { taps })
    }

    fn apply(&self, data: &[f64], channels: usize, plane: usize) -> Vec<f64> {
        let bins = self.taps.len();
        let mut out = vec![0.0; channels * bins];
        for c in 0..channels {
            let src = &data[c * plane..(c + 1) * plane];
            for (b, taps) in self.taps.iter().enumerate() {
                out[c * bins + b] = taps.iter().map(|&(i, w)| w * src[i]).sum();
            }
        }
        out
    }
}

/// Four-corner taps at a continuous index, clamped to the map (replicate padding).
fn bilinear_taps(y: f64, x: f64, h: usize, w: usize) -> [(usize, f64); 4] {
    let y = y.clamp(0.0, (h - 1) as f64);
    let x = x.clamp(0.0, (w - 1) as f64);
    let y0 = y.floor() as usize;
    let x0 = x.floor() as usize;
    let y1 = (y0 + 1).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let fy = y - y0 as f64;
    let fx = x - x0 as f64;
    [
        (y0 * w + x0, (1.0 - fy) * (1.0 - fx)),
        (y0 * w + x1, (1.0 - fy) * fx),
        (y1 * w + x0, fy * (1.0 - fx)),
        (y1 * w + x1, fy * fx),
    ]
}

fn map_dims(shape: &[usize]) -> Result<(usize, usize, usize)> {
    match shape {
        [c, h, w] => Ok((*c, *h, *w)),
        _ => Err(Error::Shape {
            op: "roi_align",
            left: shape.to_vec(),
            right: vec![0, 0, 0],
        }),
    }
}

/// RoIAlign of `box` on a `[C, H, W]` map, producing `[C, 4, 4]`.
/// Differentiable with respect to the map.
pub fn roi_align<'g>(map: Var<'g>, bbox: &BBox, stride: f64) -> Result<Var<'g>> {
    let (c, h, w) = map_dims(&map.shape())?;
    let plan = RoiPlan::new(h, w, bbox, stride)?;
    let out = plan.apply(map.value().data(), c, h * w);
    let value = Tensor::new(&[c, ROI_SIZE, ROI_SIZE], out)?;
    let src = map.node();
    let plane = h * w;
    let bins = ROI_SIZE * ROI_SIZE;
    Ok(map.graph().record(value, &[map], move |grad, sink| {
        let slot = sink.slot(src);
        let g = grad.data();
        for ch in 0..c {
            let dst = &mut slot[ch * plane..(ch + 1) * plane];
            for (b, taps) in plan.taps.iter().enumerate() {
                let go = g[ch * bins + b];
                for &(i, wgt) in taps {
                    dst[i] += wgt * go;
                }
            }
        }
    }))
}

/// Non-differentiable RoIAlign on a plain tensor.
pub fn roi_align_tensor(map: &Tensor, bbox: &BBox, stride: f64) -> Result<Tensor> {
    let (c, h, w) = map_dims(map.shape())?;
    let plan = RoiPlan::new(h, w, bbox, stride)?;
    Ok(Tensor::new(
        &[c, ROI_SIZE, ROI_SIZE],
        plan.apply(map.data(), c, h * w),
    )?)
}

/// Stacks RoIAlign crops of several boxes into `[N, C·16]` rows.
pub fn roi_align_rows<'g>(map: Var<'g>, boxes: &[BBox], stride: f64) -> Result<Var<'g>> {
    let (c, _, _) = map_dims(&map.shape())?;
    let dim = c * ROI_SIZE * ROI_SIZE;
    if boxes.is_empty() {
        return Ok(map.graph().input(Tensor::zeros(&[0, dim])));
    }
    let crops = boxes
        .iter()
        .map(|b| roi_align(map, b, stride)?.reshape(&[1, dim]).map_err(Error::from))
        .collect::<Result<Vec<_>>>()?;
    Ok(autograd::concat(&crops, 0)?)
}
