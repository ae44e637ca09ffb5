//! Multi-shot feature learning: tracklet banks, τ-frame crop stacks and the
//! attention model that turns a stack into one tracklet-level feature.

use std::collections::BTreeMap;

use autograd::nn::AttentionBlock;
use autograd::{Graph, ParamId, ParamStore, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::assoc::cosine_similarity;
use crate::error::{Error, Result};
use crate::geometry::ROI_SIZE;
use crate::matrix::Matrix;

const TOKENS_PER_CROP: usize = ROI_SIZE * ROI_SIZE;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StackKind {
    Lost,
    Candidate,
}

/// `τ` RoI crops of one tracklet, oldest first.
#[derive(Debug, Clone, PartialEq)]
pub struct CropStack {
    /// `[τ, C, 4, 4]`
    pub crops: Tensor,
    pub frames: Vec<usize>,
    pub kind: StackKind,
}

impl CropStack {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Crop of the `i`-th frame, `[C, 4, 4]`.
    pub fn crop(&self, i: usize) -> Tensor {
        let s = self.crops.shape();
        let n: usize = s[1..].iter().product();
        Tensor::new(&s[1..], self.crops.data()[i * n..(i + 1) * n].to_vec()).expect("consistent shape")
    }
}

/// Builds a stack over frames `window.0..=window.1` from observed
/// `(frame, crop)` pairs. A frame without an observation reuses the nearest
/// observed frame inside the window, the earlier one on ties.
pub fn collect_crop_stack(
    observed: &[(usize, Tensor)],
    window: (usize, usize),
    kind: StackKind,
) -> Result<CropStack> {
    let (a, b) = window;
    let inside: Vec<&(usize, Tensor)> = observed.iter().filter(|(f, _)| (a..=b).contains(f)).collect();
    if inside.is_empty() || a > b {
        return Err(Error::Empty(format!(
            "no observation in frames {a}..={b} to build a crop stack"
        )));
    }
    let shape = inside[0].1.shape().to_vec();
    let mut data = Vec::with_capacity((b - a + 1) * inside[0].1.numel());
    let mut frames = Vec::with_capacity(b - a + 1);
    for f in a..=b {
        let nearest = inside
            .iter()
            .min_by_key(|(of, _)| (of.abs_diff(f), *of))
            .expect("nonempty");
        if nearest.1.shape() != shape.as_slice() {
            return Err(Error::Shape {
                op: "collect_crop_stack",
                left: shape,
                right: nearest.1.shape().to_vec(),
            });
        }
        data.extend_from_slice(nearest.1.data());
        frames.push(f);
    }
    let mut full = vec![frames.len()];
    full.extend(&shape);
    Ok(CropStack {
        crops: Tensor::new(&full, data)?,
        frames,
        kind,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MsflConfig {
    /// Frames per tracklet stack.
    pub tau: usize,
    /// Channel count of a crop, which is also the token dimension.
    pub dim: usize,
    pub heads: usize,
    pub mlp_dim: usize,
    pub blocks: usize,
    /// Attend over all `τ·16` tokens of a tracklet jointly; otherwise each
    /// frame's 16 tokens attend only among themselves.
    pub joint_tokens: bool,
}

impl Default for MsflConfig {
    fn default() -> Self {
        Self {
            tau: 4,
            dim: 128,
            heads: 4,
            mlp_dim: 256,
            blocks: 3,
            joint_tokens: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Msfl {
    pub cfg: MsflConfig,
    /// `[τ, dim]`
    pub frame_embed: ParamId,
    /// `[16, dim]`
    pub pos_embed: ParamId,
    pub blocks: Vec<AttentionBlock>,
    /// `[τ]` temporal weights for lost and candidate stacks.
    pub w_lost: ParamId,
    pub w_cadi: ParamId,
}

impl Msfl {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, cfg: MsflConfig, rng: &mut R) -> Result<Self> {
        if cfg.tau == 0 {
            return Err(Error::Config("tau must be positive".into()));
        }
        let frame_embed = store.add("msfl.frame_embed", Tensor::randn(&[cfg.tau, cfg.dim], 0.02, rng))?;
        let pos_embed = store.add("msfl.pos_embed", Tensor::randn(&[TOKENS_PER_CROP, cfg.dim], 0.02, rng))?;
        let blocks = (0..cfg.blocks)
            .map(|i| AttentionBlock::new(store, &format!("msfl.block.{i}"), cfg.dim, cfg.heads, cfg.mlp_dim, rng))
            .collect::<autograd::Result<Vec<_>>>()?;
        let uniform = Tensor::full(&[cfg.tau], 1.0 / cfg.tau as f64);
        let w_lost = store.add("msfl.w_lost", uniform.clone())?;
        let w_cadi = store.add("msfl.w_cadi", uniform)?;
        Ok(Self {
            cfg,
            frame_embed,
            pos_embed,
            blocks,
            w_lost,
            w_cadi,
        })
    }

    /// Tracklet features for a batch of stacks of one kind: `[B, τ, C, 4, 4]`
    /// in, `[B, C]` out.
    pub fn forward<'g>(&self, g: &'g Graph<'g>, stacks: Var<'g>, kind: StackKind) -> Result<Var<'g>> {
        let s = stacks.shape();
        let (tau, d) = (self.cfg.tau, self.cfg.dim);
        if s.len() != 5 || s[1] != tau || s[2] != d || s[3] * s[4] != TOKENS_PER_CROP {
            return Err(Error::Shape {
                op: "tracklet_feature",
                left: s,
                right: vec![0, tau, d, ROI_SIZE, ROI_SIZE],
            });
        }
        let b = s[0];
        let n = tau * TOKENS_PER_CROP;
        // [B, τ, C, 16] -> [B, τ, 16, C] -> [B, τ·16, C]
        let tokens = stacks
            .reshape(&[b, tau, d, TOKENS_PER_CROP])?
            .permute(&[0, 1, 3, 2])?
            .reshape(&[b, n, d])?;
        let frame_rows: Vec<usize> = (0..n).map(|i| i / TOKENS_PER_CROP).collect();
        let pos_rows: Vec<usize> = (0..n).map(|i| i % TOKENS_PER_CROP).collect();
        let enc = g
            .param(self.frame_embed)
            .index_select(&frame_rows)?
            .add(g.param(self.pos_embed).index_select(&pos_rows)?)?;
        let mut x = tokens.add(enc)?;
        if !self.cfg.joint_tokens {
            x = x.reshape(&[b * tau, TOKENS_PER_CROP, d])?;
        }
        for block in &self.blocks {
            x = block.forward(g, x)?;
        }
        let per_frame = x.reshape(&[b, tau, TOKENS_PER_CROP, d])?.mean_axis(2)?;
        let w = g.param(match kind {
            StackKind::Lost => self.w_lost,
            StackKind::Candidate => self.w_cadi,
        });
        // Σ_j W_j · M_j as [B, C, τ] × [τ, 1].
        Ok(per_frame
            .permute(&[0, 2, 1])?
            .matmul(w.reshape(&[tau, 1])?)?
            .reshape(&[b, d])?)
    }

    /// Inference on plain stacks of one kind.
    pub fn features(&self, store: &ParamStore, stacks: &[&CropStack], kind: StackKind) -> Result<Vec<Vec<f64>>> {
        if stacks.is_empty() {
            return Ok(Vec::new());
        }
        let batch = stack_batch(stacks)?;
        let g = Graph::with_params(store);
        let out = self.forward(&g, g.input(batch), kind)?.value();
        Ok(out.data().chunks(self.cfg.dim).map(<[f64]>::to_vec).collect())
    }
}

/// Concatenates stacks into a `[B, τ, C, 4, 4]` tensor.
pub fn stack_batch(stacks: &[&CropStack]) -> Result<Tensor> {
    let shape = stacks[0].crops.shape().to_vec();
    let mut data = Vec::with_capacity(stacks.len() * stacks[0].crops.numel());
    for s in stacks {
        if s.crops.shape() != shape.as_slice() {
            return Err(Error::Shape {
                op: "stack_batch",
                left: shape,
                right: s.crops.shape().to_vec(),
            });
        }
        data.extend_from_slice(s.crops.data());
    }
    let mut full = vec![stacks.len()];
    full.extend(shape);
    Ok(Tensor::new(&full, data)?)
}

/// Tracklet feature without a learned model: the uniformly weighted mean of
/// the per-frame spatially pooled crops.
pub fn pooled_tracklet_feature(stack: &CropStack) -> Vec<f64> {
    let s = stack.crops.shape();
    let (tau, c) = (s[0], s[1]);
    let bins: usize = s[2..].iter().product();
    let mut out = vec![0.0; c];
    for (i, chunk) in stack.crops.data().chunks(bins).enumerate() {
        out[i % c] += chunk.iter().sum::<f64>();
    }
    let norm = (tau * bins) as f64;
    out.iter_mut().for_each(|v| *v /= norm);
    out
}

/// `S^long`: clamped cosine between lost and candidate tracklet features.
pub fn long_term_similarity(lost: &[Vec<f64>], candidates: &[Vec<f64>]) -> Matrix {
    cosine_similarity(lost, candidates)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BankConfig {
    pub tau: usize,
    /// Lost tracklets older than this many frames are dropped.
    pub max_lost_age: usize,
    /// Candidates older than this many frames leave the candidate bank.
    pub candidate_max_age: usize,
}

impl Default for BankConfig {
    fn default() -> Self {
        Self {
            tau: 4,
            max_lost_age: 100,
            candidate_max_age: 20,
        }
    }
}

impl BankConfig {
    /// Lost-bank lifetime used for the dance-style benchmark.
    pub const DANCE_MAX_LOST_AGE: usize = 30;
}

#[derive(Debug, Clone, PartialEq)]
pub struct LostEntry {
    /// Last frame the track was observed (`t_ε`).
    pub lost_frame: usize,
    pub stack: Option<CropStack>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CandidateEntry {
    pub init_frame: usize,
    pub stack: Option<CropStack>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum BankEvent {
    /// The track stopped being observed after `last_seen`.
    Lost {
        track: u64,
        last_seen: usize,
        stack: Option<CropStack>,
    },
    Initialized {
        track: u64,
        frame: usize,
    },
    /// A long-term match; both entries leave their banks.
    Associated {
        lost: u64,
        candidate: u64,
    },
    /// A lost track was re-associated by short-term matching.
    Reactivated {
        track: u64,
    },
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Evictions {
    pub lost: Vec<u64>,
    pub candidates: Vec<u64>,
}

/// The lost bank and candidate bank with timed admission and eviction.
#[derive(Debug, Clone, Default)]
pub struct TrackletBanks {
    pub cfg: BankConfig,
    pub lost: BTreeMap<u64, LostEntry>,
    pub candidates: BTreeMap<u64, CandidateEntry>,
}

impl TrackletBanks {
    pub fn new(cfg: BankConfig) -> Self {
        Self {
            cfg,
            lost: BTreeMap::new(),
            candidates: BTreeMap::new(),
        }
    }

    pub fn is_disjoint(&self) -> bool {
        self.lost.keys().all(|k| !self.candidates.contains_key(k))
    }

    /// Applies lifecycle events observed at `frame`, then evicts entries
    /// whose age exceeds the configured limits.
    pub fn update(&mut self, events: Vec<BankEvent>, frame: usize) -> Result<Evictions> {
        for ev in events {
            match ev {
                BankEvent::Lost { track, last_seen, stack } => {
                    if self.lost.contains_key(&track) {
                        return Err(Error::DuplicateAdmission(track));
                    }
                    // A candidate that drops out moves to the lost bank.
                    self.candidates.remove(&track);
                    self.lost.insert(
                        track,
                        LostEntry {
                            lost_frame: last_seen,
                            stack,
                        },
                    );
                }
                BankEvent::Initialized { track, frame } => {
                    if self.lost.contains_key(&track) || self.candidates.contains_key(&track) {
                        return Err(Error::DuplicateAdmission(track));
                    }
                    self.candidates.insert(
                        track,
                        CandidateEntry {
                            init_frame: frame,
                            stack: None,
                        },
                    );
                }
                BankEvent::Associated { lost, candidate } => {
                    self.lost.remove(&lost);
                    self.candidates.remove(&candidate);
                }
                BankEvent::Reactivated { track } => {
                    self.lost.remove(&track);
                }
            }
        }
        let mut ev = Evictions::default();
        let max_lost = self.cfg.max_lost_age;
        let max_cand = self.cfg.candidate_max_age;
        self.lost.retain(|&id, e| {
            let keep = frame.saturating_sub(e.lost_frame) <= max_lost;
            if !keep {
                ev.lost.push(id);
            }
            keep
        });
        self.candidates.retain(|&id, e| {
            let keep = frame.saturating_sub(e.init_frame) <= max_cand;
            if !keep {
                ev.candidates.push(id);
            }
            keep
        });
        Ok(ev)
    }
}
