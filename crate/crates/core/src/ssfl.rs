//! Single-shot feature learning: adjacent-frame pyramids are tokenized,
//! enhanced by a transformer encoder per level, fused into an ID-aware map,
//! and RoI-pooled into per-box short-term features.

use autograd::nn::{sinusoidal_2d, BatchNorm1d, Conv1x1, EncoderLayer, Mode};
use autograd::{bilinear_upsample, concat, cosine_matrix, Graph, ParamId, ParamStore, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::assoc::cosine_similarity;
use crate::error::{Error, Result};
use crate::geometry::{roi_align_rows, BBox, ROI_SIZE};
use crate::matrix::Matrix;

/// Three feature maps of one frame at increasing strides.
#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePyramid {
    /// `[D_k, H_k, W_k]` per level.
    pub levels: Vec<Tensor>,
    pub strides: [f64; 3],
    pub frame: usize,
}

impl FeaturePyramid {
    pub fn validate(&self) -> Result<()> {
        if self.levels.len() != 3 {
            return Err(Error::Config(format!(
                "a pyramid has 3 levels, got {}",
                self.levels.len()
            )));
        }
        for k in 0..3 {
            let s = self.levels[k].shape();
            if s.len() != 3 {
                return Err(Error::Shape {
                    op: "pyramid",
                    left: s.to_vec(),
                    right: vec![0, 0, 0],
                });
            }
            if k > 0 {
                let p = self.levels[k - 1].shape();
                if s[1] != p[1].div_ceil(2) || s[2] != p[2].div_ceil(2) {
                    return Err(Error::Shape {
                        op: "pyramid",
                        left: p.to_vec(),
                        right: s.to_vec(),
                    });
                }
            }
        }
        Ok(())
    }

    pub fn size(&self, level: usize) -> (usize, usize) {
        let s = self.levels[level].shape();
        (s[1], s[2])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SsflConfig {
    /// Channel count `D_k` of each input level.
    pub in_channels: [usize; 3],
    pub model_dim: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub layers: usize,
    /// One encoder stack for all levels instead of one per level.
    pub shared_encoder: bool,
    /// Adds the fixed 2-D sinusoidal spatial encoding to the tokens.
    pub positional_encoding: bool,
    /// Channels of the per-level fusion heads and of the ID-aware map.
    pub map_channels: usize,
}

impl Default for SsflConfig {
    fn default() -> Self {
        Self {
            in_channels: [128; 3],
            model_dim: 256,
            heads: 4,
            ffn_dim: 512,
            layers: 1,
            shared_encoder: false,
            positional_encoding: true,
            map_channels: 128,
        }
    }
}

impl SsflConfig {
    pub fn feature_dim(&self) -> usize {
        self.map_channels * ROI_SIZE * ROI_SIZE
    }
}

/// Joint token set of two frames for one level.
#[derive(Debug, Clone, Copy)]
pub struct TokenSequence<'g> {
    /// `[2·H·W, model_dim]`; frame `t−1` first.
    pub tokens: Var<'g>,
    pub level: usize,
    pub split: usize,
    pub height: usize,
    pub width: usize,
}

#[derive(Debug, Clone)]
pub struct Ssfl {
    pub cfg: SsflConfig,
    pub psi_in: Vec<Conv1x1>,
    /// `[2, model_dim]` per level: row 0 marks frame `t−1`, row 1 frame `t`.
    pub frame_embed: Vec<ParamId>,
    pub encoders: Vec<Vec<EncoderLayer>>,
    pub delta: Vec<[Conv1x1; 2]>,
    pub psi: Conv1x1,
    pub phi: BatchNorm1d,
}

impl Ssfl {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, cfg: SsflConfig, rng: &mut R) -> Result<Self> {
        let d = cfg.model_dim;
        let c = cfg.map_channels;
        let mut psi_in = Vec::new();
        let mut frame_embed = Vec::new();
        let mut delta = Vec::new();
        for k in 0..3 {
            psi_in.push(Conv1x1::new(store, &format!("ssfl.psi_in.{k}"), cfg.in_channels[k], d, rng)?);
            frame_embed.push(store.add(
                format!("ssfl.frame_embed.{k}"),
                Tensor::randn(&[2, d], 0.02, rng),
            )?);
        }
        let stacks = if cfg.shared_encoder { 1 } else { 3 };
        let mut encoders = Vec::new();
        for k in 0..stacks {
            let layers = (0..cfg.layers)
                .map(|l| {
                    EncoderLayer::new(store, &format!("ssfl.encoder.{k}.{l}"), d, cfg.heads, cfg.ffn_dim, rng)
                })
                .collect::<autograd::Result<Vec<_>>>()?;
            encoders.push(layers);
        }
        for k in 0..3 {
            delta.push([
                Conv1x1::new(store, &format!("ssfl.delta.{k}.0"), d, c, rng)?,
                Conv1x1::new(store, &format!("ssfl.delta.{k}.1"), c, c, rng)?,
            ]);
        }
        let psi = Conv1x1::new(store, "ssfl.psi", 3 * c, c, rng)?;
        let phi = BatchNorm1d::new(store, "ssfl.phi", cfg.feature_dim())?;
        Ok(Self {
            cfg,
            psi_in,
            frame_embed,
            encoders,
            delta,
            psi,
            phi,
        })
    }

    fn encoder(&self, level: usize) -> &[EncoderLayer] {
        if self.cfg.shared_encoder {
            &self.encoders[0]
        } else {
            &self.encoders[level]
        }
    }

    /// Tokens of both frames for one level: projected, flattened, concatenated
    /// and tagged with spatial and frame encodings.
    pub fn build_tokens<'g>(
        &self,
        g: &'g Graph<'g>,
        prev: Var<'g>,
        cur: Var<'g>,
        level: usize,
    ) -> Result<TokenSequence<'g>> {
        let (sp, sc) = (prev.shape(), cur.shape());
        if sp != sc || sp.len() != 3 {
            return Err(Error::Shape {
                op: "build_tokens",
                left: sp,
                right: sc,
            });
        }
        let (h, w) = (sc[1], sc[2]);
        let d = self.cfg.model_dim;
        let flatten = |m: Var<'g>| -> Result<Var<'g>> {
            Ok(self.psi_in[level].forward(g, m)?.reshape(&[d, h * w])?.transpose()?)
        };
        let mut tokens = concat(&[flatten(prev)?, flatten(cur)?], 0)?;
        if self.cfg.positional_encoding {
            let pe = g.input(sinusoidal_2d(h, w, d));
            tokens = tokens.add(concat(&[pe, pe], 0)?)?;
        }
        let rows: Vec<usize> = (0..2 * h * w).map(|i| usize::from(i >= h * w)).collect();
        tokens = tokens.add(g.param(self.frame_embed[level]).index_select(&rows)?)?;
        Ok(TokenSequence {
            tokens,
            level,
            split: h * w,
            height: h,
            width: w,
        })
    }

    /// Per level: encoder over the joint tokens, keep the frame-`t` half and
    /// fold it back into a `[model_dim, H_k, W_k]` map.
    pub fn interaction_enhance<'g>(
        &self,
        g: &'g Graph<'g>,
        prev: &[Var<'g>],
        cur: &[Var<'g>],
    ) -> Result<Vec<Var<'g>>> {
        let d = self.cfg.model_dim;
        (0..3)
            .map(|k| {
                let seq = self.build_tokens(g, prev[k], cur[k], k)?;
                let len = 2 * seq.split;
                let mut x = seq.tokens.reshape(&[1, len, d])?;
                for layer in self.encoder(k) {
                    x = layer.forward(g, x)?;
                }
                Ok(x
                    .reshape(&[len, d])?
                    .narrow(0, seq.split, seq.split)?
                    .transpose()?
                    .reshape(&[d, seq.height, seq.width])?)
            })
            .collect()
    }

    /// Upsample every level to the finest resolution, two conv-ReLU layers
    /// each, concatenate and project to the ID-aware map.
    pub fn fuse_levels<'g>(&self, g: &'g Graph<'g>, enhanced: &[Var<'g>]) -> Result<Var<'g>> {
        let s0 = enhanced[0].shape();
        let (h, w) = (s0[1], s0[2]);
        let heads = enhanced
            .iter()
            .zip(&self.delta)
            .map(|(&m, [c1, c2])| {
                let up = bilinear_upsample(m, h, w)?;
                let x = c1.forward(g, up)?.relu();
                Ok(c2.forward(g, x)?.relu())
            })
            .collect::<Result<Vec<_>>>()?;
        for m in &heads {
            if m.shape()[1..] != [h, w] {
                return Err(Error::Shape {
                    op: "fuse_levels",
                    left: m.shape(),
                    right: vec![self.cfg.map_channels, h, w],
                });
            }
        }
        Ok(self.psi.forward(g, concat(&heads, 0)?)?)
    }

    /// The ID-aware map of frame `cur`, `[map_channels, H_1, W_1]`.
    pub fn id_aware_map<'g>(
        &self,
        g: &'g Graph<'g>,
        prev: &FeaturePyramid,
        cur: &FeaturePyramid,
    ) -> Result<Var<'g>> {
        prev.validate()?;
        cur.validate()?;
        let pv: Vec<Var<'g>> = prev.levels.iter().map(|t| g.input(t.clone())).collect();
        let cv: Vec<Var<'g>> = cur.levels.iter().map(|t| g.input(t.clone())).collect();
        let enhanced = self.interaction_enhance(g, &pv, &cv)?;
        self.fuse_levels(g, &enhanced)
    }

    /// RoIAlign crops of `boxes`, flattened to `[N, feature_dim]`.
    pub fn crops<'g>(&self, map: Var<'g>, boxes: &[BBox], stride: f64) -> Result<Var<'g>> {
        roi_align_rows(map, boxes, stride)
    }

    /// Batch normalization φ over flattened crops.
    pub fn embed<'g>(&self, g: &'g Graph<'g>, rows: Var<'g>, mode: Mode) -> Result<Var<'g>> {
        if rows.shape().first() == Some(&0) {
            return Ok(rows);
        }
        Ok(self.phi.forward(g, rows, mode)?)
    }

    /// Short-term features of `boxes` on an ID-aware map.
    pub fn extract_short_term<'g>(
        &self,
        g: &'g Graph<'g>,
        map: Var<'g>,
        boxes: &[BBox],
        stride: f64,
        mode: Mode,
    ) -> Result<Var<'g>> {
        let rows = self.crops(map, boxes, stride)?;
        self.embed(g, rows, mode)
    }
}

/// Differentiable clamped cosine table between two `[M, D]`, `[N, D]` feature sets.
pub fn short_term_similarity_var<'g>(tracks: Var<'g>, dets: Var<'g>) -> Result<Var<'g>> {
    Ok(cosine_matrix(tracks, dets)?)
}

/// `S^short`: cosine between track and detection features, negatives clamped to 0.
pub fn short_term_similarity(tracks: &[Vec<f64>], dets: &[Vec<f64>]) -> Matrix {
    cosine_similarity(tracks, dets)
}
