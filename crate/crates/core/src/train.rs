//! Training loops for SSFL and MSFL on synthetic scenarios.

use std::collections::BTreeMap;

use autograd::nn::Mode;
use autograd::{concat, cosine_matrix, Adam, Graph, ParamStore, Tensor, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::{Config, TrainConfig};
use crate::error::{Error, Result};
use crate::geometry::{roi_align_rows, roi_align_tensor, BBox};
use crate::losses::{
    asso_loss, inner_frame_triplet_loss, inter_frame_loss, label_matrix, memory_loss, paired_cosine, total_loss,
    MemoryBank,
};
use crate::assoc::cosine_similarity;
use crate::msfl::{collect_crop_stack, pooled_tracklet_feature, stack_batch, CropStack, Msfl, StackKind};
use crate::ssfl::{FeaturePyramid, Ssfl};
use crate::synth::{generate_scenario, render_level, render_pyramid, GroundTruth, ScenarioConfig};

const STREAM_SSFL: u64 = 7 << 40;
const STREAM_MSFL: u64 = 8 << 40;

fn train_rng(cfg: &TrainConfig, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(stream);
    rng
}

fn check_finite(value: f64, iteration: usize, what: &str) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::Diverged {
            iteration,
            what: what.to_string(),
        })
    }
}

/// Gradient step from one graph: accumulate, apply buffer writes, update.
fn apply_step(store: &mut ParamStore, adam: &mut Adam, grads: &autograd::Gradients, buffers: Vec<(autograd::ParamId, Tensor)>) -> Result<()> {
    store.zero_grad();
    store.accumulate(grads);
    store.apply_buffer_updates(buffers);
    adam.step(store)?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SsflLossRow {
    pub iteration: usize,
    pub frame: usize,
    pub total: f64,
    pub inter: f64,
    pub memo: f64,
    pub inner: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MsflLossRow {
    pub iteration: usize,
    pub asso: f64,
    pub batch_accuracy: f64,
}

pub fn ssfl_csv(rows: &[SsflLossRow]) -> String {
    let mut s = String::from("iteration,frame,total,inter,memo,inner\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.iteration, r.frame, r.total, r.inter, r.memo, r.inner
        ));
    }
    s
}

pub fn msfl_csv(rows: &[MsflLossRow]) -> String {
    let mut s = String::from("iteration,asso,batch_accuracy\n");
    for r in rows {
        s.push_str(&format!("{},{},{}\n", r.iteration, r.asso, r.batch_accuracy));
    }
    s
}

/// Visible ground-truth boxes and identities of one frame.
fn labelled_boxes(gt: &GroundTruth, frame: usize) -> (Vec<BBox>, Vec<i64>) {
    gt.visible(frame)
        .into_iter()
        .map(|(i, b)| (b, gt.targets[i].id))
        .unzip()
}

/// Rendered pyramids of every frame, index 0 is frame 1.
pub fn render_all(gt: &GroundTruth, cfg: &Config) -> Vec<FeaturePyramid> {
    (1..=gt.frames).map(|f| render_pyramid(gt, f, &cfg.scenario)).collect()
}

#[derive(Debug)]
pub struct SsflTraining {
    pub model: Ssfl,
    pub store: ParamStore,
    pub log: Vec<SsflLossRow>,
    /// First frame `t` of the held-out pairs `(t−1, t)`.
    pub heldout_from: usize,
}

impl SsflTraining {
    fn mean_inter(rows: &[SsflLossRow]) -> f64 {
        rows.iter().map(|r| r.inter).sum::<f64>() / rows.len().max(1) as f64
    }

    /// Mean inter-frame loss over the first `k` iterations.
    pub fn initial_inter(&self, k: usize) -> f64 {
        Self::mean_inter(&self.log[..k.min(self.log.len())])
    }

    /// Mean inter-frame loss over the last `k` iterations.
    pub fn final_inter(&self, k: usize) -> f64 {
        Self::mean_inter(&self.log[self.log.len().saturating_sub(k)..])
    }
}

/// The SSFL model and parameters `train_ssfl` starts from.
pub fn initial_ssfl(cfg: &Config) -> Result<(Ssfl, ParamStore)> {
    let mut store = ParamStore::new();
    let model = Ssfl::new(&mut store, cfg.ssfl.clone(), &mut train_rng(&cfg.train, STREAM_SSFL))?;
    Ok((model, store))
}

/// The MSFL model and parameters `train_msfl` starts from.
pub fn initial_msfl(cfg: &Config) -> Result<(Msfl, ParamStore)> {
    let mut store = ParamStore::new();
    let model = Msfl::new(&mut store, cfg.msfl.clone(), &mut train_rng(&cfg.train, STREAM_MSFL))?;
    Ok((model, store))
}

/// Trains SSFL on frame pairs of `gt`. Training pairs use `t` in
/// `3..heldout_from`; the rest are held out.
pub fn train_ssfl(cfg: &Config, gt: &GroundTruth, pyramids: &[FeaturePyramid]) -> Result<SsflTraining> {
    let tc = &cfg.train;
    let mut rng = train_rng(tc, STREAM_SSFL);
    let mut store = ParamStore::new();
    let model = Ssfl::new(&mut store, cfg.ssfl.clone(), &mut rng)?;
    let frames = gt.frames;
    if frames < 5 {
        return Err(Error::Config(format!("SSFL training needs at least 5 frames, got {frames}")));
    }
    let heldout_from = ((frames as f64 * tc.ssfl_train_fraction).round() as usize).clamp(4, frames);
    let train_frames: Vec<usize> = (3..heldout_from).collect();
    let stride = cfg.scenario.strides[0];
    let mut adam = Adam::new(tc.ssfl_lr);
    let mut memory = MemoryBank::new();
    let mut log = Vec::with_capacity(tc.ssfl_iterations);
    for it in 0..tc.ssfl_iterations {
        let t = train_frames[rng.random_range(0..train_frames.len())];
        let (boxes_prev, ids_prev) = labelled_boxes(gt, t - 1);
        let (boxes_t, ids_t) = labelled_boxes(gt, t);
        if boxes_prev.is_empty() || boxes_t.is_empty() {
            continue;
        }
        let (row, grads, buffers, feats_t) = {
            let g = Graph::with_params(&store);
            let map_prev = model.id_aware_map(&g, &pyramids[t - 3], &pyramids[t - 2])?;
            let map_t = model.id_aware_map(&g, &pyramids[t - 2], &pyramids[t - 1])?;
            let rows_prev = roi_align_rows(map_prev, &boxes_prev, stride)?;
            let rows_t = roi_align_rows(map_t, &boxes_t, stride)?;
            let joint = model.embed(&g, concat(&[rows_prev, rows_t], 0)?, Mode::Train)?;
            let f_prev = joint.narrow(0, 0, boxes_prev.len())?;
            let f_t = joint.narrow(0, boxes_prev.len(), boxes_t.len())?;
            let s = cosine_matrix(f_prev, f_t)?;
            let y = label_matrix(&ids_t, &ids_prev);
            let inter = inter_frame_loss(s, &y, cfg.loss.logit_scale, cfg.loss.logit_center)?;
            let detached = f_t.value();
            let dim = detached.shape()[1];
            for (i, &id) in ids_t.iter().enumerate() {
                if !memory.contains(id) {
                    memory.update(&detached.data()[i * dim..(i + 1) * dim], id);
                }
            }
            let memo = memory_loss(&memory, f_t, &ids_t, cfg.loss.memory_temperature)?;
            let inner = inner_frame_triplet_loss(f_t, f_prev, &ids_t, &ids_prev, cfg.loss.triplet_margin)?;
            let total = total_loss(inter, memo, inner, &cfg.loss)?;
            let row = SsflLossRow {
                iteration: it,
                frame: t,
                total: total.value().item(),
                inter: inter.value().item(),
                memo: memo.value().item(),
                inner: inner.value().item(),
            };
            check_finite(row.total, it, "SSFL total loss")?;
            let grads = g.backward(total)?;
            (row, grads, g.take_buffer_updates(), (*detached).clone())
        };
        apply_step(&mut store, &mut adam, &grads, buffers)?;
        let dim = feats_t.shape()[1];
        for (i, &id) in ids_t.iter().enumerate() {
            memory.update(&feats_t.data()[i * dim..(i + 1) * dim], id);
        }
        log.push(row);
    }
    Ok(SsflTraining {
        model,
        store,
        log,
        heldout_from,
    })
}

/// Row-argmax identity accuracy of `S^short` over frame pairs `(t−1, t)`
/// with `t` in `frames`, inference-mode features. Rows whose identity is
/// absent from frame `t` are skipped.
pub fn ssfl_pair_accuracy(
    model: &Ssfl,
    store: &ParamStore,
    cfg: &Config,
    gt: &GroundTruth,
    pyramids: &[FeaturePyramid],
    frames: std::ops::RangeInclusive<usize>,
) -> Result<f64> {
    let stride = cfg.scenario.strides[0];
    let (mut correct, mut total) = (0usize, 0usize);
    let mut maps: BTreeMap<usize, Tensor> = BTreeMap::new();
    let mut map_of = |t: usize| -> Result<Tensor> {
        if let Some(m) = maps.get(&t) {
            return Ok(m.clone());
        }
        let prev = &pyramids[t.saturating_sub(2).max(1) - 1];
        let g = Graph::with_params(store);
        let m = (*model.id_aware_map(&g, prev, &pyramids[t - 1])?.value()).clone();
        maps.insert(t, m.clone());
        Ok(m)
    };
    for t in frames {
        if t < 2 || t > gt.frames {
            continue;
        }
        let (boxes_prev, ids_prev) = labelled_boxes(gt, t - 1);
        let (boxes_t, ids_t) = labelled_boxes(gt, t);
        if boxes_prev.is_empty() || boxes_t.is_empty() {
            continue;
        }
        let crops = |map: &Tensor, boxes: &[BBox]| -> Result<Vec<Tensor>> {
            boxes.iter().map(|b| roi_align_tensor(map, b, stride)).collect()
        };
        let feats = |cs: Vec<Tensor>| -> Result<Vec<Vec<f64>>> {
            let dim = cs[0].numel();
            let data = cs.iter().flat_map(|c| c.data().iter().copied()).collect();
            let g = Graph::with_params(store);
            let out = model.embed(&g, g.input(Tensor::new(&[cs.len(), dim], data)?), Mode::Infer)?.value();
            Ok(out.data().chunks(dim).map(<[f64]>::to_vec).collect())
        };
        let f_prev = feats(crops(&map_of(t - 1)?, &boxes_prev)?)?;
        let f_t = feats(crops(&map_of(t)?, &boxes_t)?)?;
        let s = cosine_similarity(&f_prev, &f_t);
        for (j, id) in ids_prev.iter().enumerate() {
            if !ids_t.contains(id) {
                continue;
            }
            let best = (0..ids_t.len())
                .max_by(|&a, &b| s.get(j, a).total_cmp(&s.get(j, b)).then(b.cmp(&a)))
                .expect("nonempty");
            total += 1;
            correct += usize::from(ids_t[best] == *id);
        }
    }
    if total == 0 {
        return Err(Error::Empty("no held-out rows to score".into()));
    }
    Ok(correct as f64 / total as f64)
}

/// Per-target RoI crops of a scenario's finest rendered level. Frames are
/// rendered on first use.
#[derive(Debug, Clone)]
pub struct CropTable {
    gt: GroundTruth,
    scenario: ScenarioConfig,
    tau: usize,
    rendered: BTreeMap<usize, Vec<Option<Tensor>>>,
}

impl CropTable {
    pub fn new(gt: GroundTruth, scenario: ScenarioConfig, tau: usize) -> Self {
        Self {
            gt,
            scenario,
            tau,
            rendered: BTreeMap::new(),
        }
    }

    /// Table of `scenario` with its seed replaced by `seed`.
    pub fn for_seed(scenario: &ScenarioConfig, seed: u64, tau: usize) -> Result<Self> {
        let sc = ScenarioConfig {
            seed,
            ..scenario.clone()
        };
        Ok(Self::new(generate_scenario(&sc)?, sc, tau))
    }

    pub fn targets(&self) -> usize {
        self.gt.targets.len()
    }

    fn crop(&mut self, target: usize, frame: usize) -> Result<Option<Tensor>> {
        if !self.rendered.contains_key(&frame) {
            let map = render_level(&self.gt, frame, 0, &self.scenario);
            let crops = self
                .gt
                .targets
                .iter()
                .map(|t| {
                    t.visible_at(frame)
                        .then(|| roi_align_tensor(&map, &t.box_at(frame), self.scenario.strides[0]))
                        .transpose()
                })
                .collect::<Result<Vec<_>>>()?;
            self.rendered.insert(frame, crops);
        }
        Ok(self.rendered[&frame][target].clone())
    }

    /// Whether `target` is visible on every frame of `start..start+τ`.
    fn visible_window(&self, target: usize, start: usize) -> bool {
        start >= 1
            && start + self.tau - 1 <= self.gt.frames
            && (start..start + self.tau).all(|f| self.gt.targets[target].visible_at(f))
    }

    fn stack(&mut self, target: usize, start: usize, kind: StackKind) -> Result<CropStack> {
        let observed = (start..start + self.tau)
            .map(|f| Ok((f, self.crop(target, f)?.expect("window checked visible"))))
            .collect::<Result<Vec<_>>>()?;
        collect_crop_stack(&observed, (start, start + self.tau - 1), kind)
    }

    /// Front stack ending at `cut` and rear stack starting `gap + 1` frames
    /// later, if the target is visible across both windows.
    pub fn split(&mut self, target: usize, cut: usize, gap: usize) -> Result<Option<(CropStack, CropStack)>> {
        let Some(front) = (cut + 1).checked_sub(self.tau) else {
            return Ok(None);
        };
        let rear = cut + gap + 1;
        if !self.visible_window(target, front) || !self.visible_window(target, rear) {
            return Ok(None);
        }
        Ok(Some((
            self.stack(target, front, StackKind::Lost)?,
            self.stack(target, rear, StackKind::Candidate)?,
        )))
    }

    /// Splits around every scripted occlusion: the `τ` frames before it and
    /// the `τ` frames after it.
    pub fn occlusion_splits(&mut self) -> Result<Vec<(usize, CropStack, CropStack)>> {
        let mut out = Vec::new();
        for o in self.gt.occlusions.clone() {
            let Some(cut) = o.start.checked_sub(1) else { continue };
            if let Some((f, r)) = self.split(o.target, cut, o.end - cut)? {
                out.push((o.target, f, r));
            }
        }
        Ok(out)
    }

    /// Targets with a valid split at `(cut, gap)`.
    fn splittable(&self, cut: usize, gap: usize) -> Vec<usize> {
        (0..self.targets())
            .filter(|&i| {
                cut + 1 >= self.tau && self.visible_window(i, cut + 1 - self.tau) && self.visible_window(i, cut + gap + 1)
            })
            .collect()
    }
}

/// Positive pairs from distinct tracklets, each with `neg_per_pos`
/// negatives that reuse rear stacks of the other positives.
#[derive(Debug, Clone)]
pub struct PairBatch {
    pub fronts: Vec<CropStack>,
    pub rears: Vec<CropStack>,
    /// `(front index, rear index, label)`
    pub pairs: Vec<(usize, usize, f64)>,
}

impl PairBatch {
    fn from_splits<R: Rng>(splits: Vec<(CropStack, CropStack)>, neg_per_pos: usize, rng: &mut R) -> Self {
        let n = splits.len();
        let mut pairs = Vec::with_capacity(n * (1 + neg_per_pos));
        for i in 0..n {
            pairs.push((i, i, 1.0));
            if n > 1 {
                let mut others: Vec<usize> = (0..n).filter(|&j| j != i).collect();
                others.shuffle(rng);
                pairs.extend(others.iter().cycle().take(neg_per_pos).map(|&j| (i, j, 0.0)));
            }
        }
        let (fronts, rears) = splits.into_iter().unzip();
        Self { fronts, rears, pairs }
    }

    /// Adds the stacks and pairs of `other`, reindexed.
    pub fn append(&mut self, other: PairBatch) {
        let (nf, nr) = (self.fronts.len(), self.rears.len());
        self.pairs.extend(other.pairs.into_iter().map(|(i, j, l)| (i + nf, j + nr, l)));
        self.fronts.extend(other.fronts);
        self.rears.extend(other.rears);
    }

    pub fn labels(&self) -> Vec<f64> {
        self.pairs.iter().map(|p| p.2).collect()
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Differentiable clamped cosine of every pair.
    pub fn similarities<'g>(&self, model: &Msfl, g: &'g Graph<'g>) -> Result<Var<'g>> {
        let fronts: Vec<&CropStack> = self.fronts.iter().collect();
        let rears: Vec<&CropStack> = self.rears.iter().collect();
        let a = model.forward(g, g.input(stack_batch(&fronts)?), StackKind::Lost)?;
        let b = model.forward(g, g.input(stack_batch(&rears)?), StackKind::Candidate)?;
        let fi: Vec<usize> = self.pairs.iter().map(|p| p.0).collect();
        let ri: Vec<usize> = self.pairs.iter().map(|p| p.1).collect();
        paired_cosine(a.index_select(&fi)?, b.index_select(&ri)?)
    }

    /// Same, evaluated with plain inference.
    pub fn similarity_values(&self, model: &Msfl, store: &ParamStore) -> Result<Vec<f64>> {
        if self.is_empty() {
            return Ok(Vec::new());
        }
        let g = Graph::with_params(store);
        Ok(self.similarities(model, &g)?.value().data().to_vec())
    }

    /// Clamped cosine of uniformly pooled crops, the untrained reference.
    pub fn pooled_similarities(&self) -> Vec<f64> {
        let f: Vec<Vec<f64>> = self.fronts.iter().map(pooled_tracklet_feature).collect();
        let r: Vec<Vec<f64>> = self.rears.iter().map(pooled_tracklet_feature).collect();
        let s = cosine_similarity(&f, &r);
        self.pairs.iter().map(|&(i, j, _)| s.get(i, j)).collect()
    }

    /// Share of pairs on the labelled side of `threshold`.
    pub fn accuracy(&self, sims: &[f64], threshold: f64) -> f64 {
        let correct = sims
            .iter()
            .zip(&self.pairs)
            .filter(|(s, p)| (**s >= threshold) == (p.2 > 0.5))
            .count();
        correct as f64 / self.pairs.len().max(1) as f64
    }
}

/// One random training batch: a shared cut and gap, and up to
/// `msfl_positives` targets that are visible across both windows.
fn sample_batch<R: Rng>(table: &mut CropTable, tc: &TrainConfig, rng: &mut R) -> Result<PairBatch> {
    let tau = table.tau;
    for _ in 0..20 {
        let gap = rng.random_range(tc.msfl_gap[0]..=tc.msfl_gap[1]);
        let Some(hi) = table.gt.frames.checked_sub(gap + tau) else { break };
        if hi < tau {
            break;
        }
        let cut = rng.random_range(tau..=hi);
        let mut targets = table.splittable(cut, gap);
        if targets.len() < 2 {
            continue;
        }
        targets.shuffle(rng);
        targets.truncate(tc.msfl_positives);
        let mut splits = Vec::with_capacity(targets.len());
        for i in targets {
            splits.extend(table.split(i, cut, gap)?);
        }
        return Ok(PairBatch::from_splits(splits, tc.neg_per_pos, rng));
    }
    Err(Error::Empty("no frame window with two splittable targets".into()))
}

/// Fixed evaluation pairs from one table: every occlusion split plus the
/// splits at `cuts` evenly spaced cut frames. Each positive gets up to
/// `neg_per_pos` negatives drawn from other targets.
pub fn heldout_batch(table: &mut CropTable, cuts: usize, neg_per_pos: usize, gap: usize, seed: u64) -> Result<PairBatch> {
    let mut owned: Vec<(usize, (CropStack, CropStack))> =
        table.occlusion_splits()?.into_iter().map(|(t, f, r)| (t, (f, r))).collect();
    let span = table.gt.frames.saturating_sub(gap + 2 * table.tau);
    for k in 0..cuts {
        let cut = table.tau + (k + 1) * span / (cuts + 1);
        for target in 0..table.targets() {
            if let Some(s) = table.split(target, cut, gap)? {
                owned.push((target, s));
            }
        }
    }
    let (owner, splits): (Vec<usize>, Vec<_>) = owned.into_iter().unzip();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = splits.len();
    let mut pairs = Vec::new();
    for i in 0..n {
        pairs.push((i, i, 1.0));
        let mut others: Vec<usize> = (0..n).filter(|&j| owner[j] != owner[i]).collect();
        others.shuffle(&mut rng);
        pairs.extend(others.into_iter().take(neg_per_pos).map(|j| (i, j, 0.0)));
    }
    let (fronts, rears) = splits.into_iter().unzip();
    Ok(PairBatch { fronts, rears, pairs })
}

#[derive(Debug)]
pub struct MsflTraining {
    pub model: Msfl,
    pub store: ParamStore,
    pub log: Vec<MsflLossRow>,
}

/// Held-out scenario seeds start here; training seeds stay below it.
const HELDOUT_SEED_OFFSET: u64 = 1 << 32;

/// Scenario of MSFL training iteration `iteration`. Every iteration sees a
/// freshly seeded scene so no identity is ever revisited.
pub fn msfl_training_table(cfg: &Config, iteration: usize) -> Result<CropTable> {
    CropTable::for_seed(&cfg.scenario, cfg.scenario.seed.wrapping_add(1 + iteration as u64), cfg.msfl.tau)
}

/// Evaluation pairs pooled over `msfl_heldout_scenarios` scenes whose seeds
/// no training iteration uses.
pub fn msfl_heldout_batch(cfg: &Config) -> Result<PairBatch> {
    let tc = &cfg.train;
    let gap = (tc.msfl_gap[0] + tc.msfl_gap[1]) / 2;
    let mut out = PairBatch {
        fronts: Vec::new(),
        rears: Vec::new(),
        pairs: Vec::new(),
    };
    for k in 0..tc.msfl_heldout_scenarios as u64 {
        let seed = cfg.scenario.seed.wrapping_add(HELDOUT_SEED_OFFSET + k);
        let mut table = CropTable::for_seed(&cfg.scenario, seed, cfg.msfl.tau)?;
        out.append(heldout_batch(&mut table, 3, tc.neg_per_pos, gap, seed)?);
    }
    Ok(out)
}

/// Trains MSFL with the association loss on tracklet pairs.
pub fn train_msfl(cfg: &Config) -> Result<MsflTraining> {
    let tc = &cfg.train;
    let mut rng = train_rng(tc, STREAM_MSFL);
    let mut store = ParamStore::new();
    let model = Msfl::new(&mut store, cfg.msfl.clone(), &mut rng)?;
    let mut adam = Adam::new(tc.msfl_lr);
    let mut log = Vec::with_capacity(tc.msfl_iterations);
    for it in 0..tc.msfl_iterations {
        let batch = sample_batch(&mut msfl_training_table(cfg, it)?, tc, &mut rng)?;
        let labels = batch.labels();
        let (row, grads) = {
            let g = Graph::with_params(&store);
            let sims = batch.similarities(&model, &g)?;
            let loss = asso_loss(sims, &labels)?;
            let row = MsflLossRow {
                iteration: it,
                asso: loss.value().item(),
                batch_accuracy: batch.accuracy(sims.value().data(), 0.5),
            };
            check_finite(row.asso, it, "association loss")?;
            (row, g.backward(loss)?)
        };
        apply_step(&mut store, &mut adam, &grads, Vec::new())?;
        log.push(row);
    }
    Ok(MsflTraining { model, store, log })
}
