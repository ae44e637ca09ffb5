//! Built-in verification suite: finite-difference gradient checks, the
//! assignment oracle, hand-worked metric cases and bank lifecycle scripts.

use std::time::Instant;

use autograd::gradcheck::{check_inputs, check_params, GradReport};
use autograd::nn::{AttentionBlock, BatchNorm1d, Conv1x1, EncoderLayer, LayerNorm, Linear, Mode, MultiHeadAttention};
use autograd::{bilinear_upsample, concat, cosine_matrix, Graph, ParamStore, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::assoc::{brute_force_min_cost, hungarian};
use crate::error::Result;
use crate::geometry::{roi_align, roi_align_rows, BBox};
use crate::losses::{
    asso_loss, inner_frame_triplet_loss, inter_frame_loss, label_matrix, memory_loss, paired_cosine, total_loss,
    LossConfig, MemoryBank,
};
use crate::matrix::Matrix;
use crate::moteval::{clearmot, idf1, MotRecord};
use crate::msfl::{BankConfig, BankEvent, Msfl, MsflConfig, StackKind, TrackletBanks};
use crate::ssfl::{FeaturePyramid, Ssfl, SsflConfig};

/// Relative-error tolerance of every gradient check.
pub const GRAD_TOL: f64 = 1e-4;

#[derive(Debug, Clone, Serialize)]
pub struct CheckResult {
    pub group: &'static str,
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl CheckResult {
    fn new(group: &'static str, name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        Self {
            group,
            name: name.into(),
            passed,
            detail: detail.into(),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct VerifyReport {
    pub checks: Vec<CheckResult>,
    pub seconds: f64,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CheckResult> {
        self.checks.iter().filter(|c| !c.passed)
    }

    pub fn summary(&self) -> String {
        let mut s = String::new();
        for c in &self.checks {
            let mark = if c.passed { "ok  " } else { "FAIL" };
            s.push_str(&format!("{mark} {:<10} {:<34} {}\n", c.group, c.name, c.detail));
        }
        let failed = self.checks.iter().filter(|c| !c.passed).count();
        s.push_str(&format!(
            "{} checks, {} failed, {:.1} s\n",
            self.checks.len(),
            failed,
            self.seconds
        ));
        s
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn rand_t(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor {
    Tensor::uniform(shape, 1.0, r)
}

fn grad_result(name: &str, report: autograd::Result<GradReport>) -> CheckResult {
    match report {
        Ok(rep) => CheckResult::new(
            "gradient",
            name,
            rep.passes(GRAD_TOL) && rep.checked > 0,
            format!("max rel err {:.2e} over {} entries (worst {})", rep.max_rel_err, rep.checked, rep.worst),
        ),
        Err(e) => CheckResult::new("gradient", name, false, format!("error: {e}")),
    }
}

type InputCase = for<'g> fn(&'g Graph<'g>, &[Var<'g>]) -> autograd::Result<Var<'g>>;

/// Weighted readout so that every output entry gets a distinct gradient.
fn readout<'g>(x: Var<'g>) -> autograd::Result<Var<'g>> {
    let n = x.numel();
    let w = Tensor::new(&x.shape(), (0..n).map(|i| 0.3 + 0.17 * ((i * 7) % 11) as f64).collect())?;
    Ok(x.mul(x.graph().input(w))?.sum())
}

fn input_cases() -> Vec<(&'static str, Vec<Vec<usize>>, InputCase)> {
    vec![
        ("matmul", vec![vec![4, 3], vec![3, 2]], |_, v| readout(v[0].matmul(v[1])?)),
        ("matmul batched", vec![vec![2, 3, 4], vec![4, 2]], |_, v| readout(v[0].matmul(v[1])?)),
        ("matmul_t", vec![vec![2, 3, 4], vec![2, 5, 4]], |_, v| readout(v[0].matmul_t(v[1])?)),
        ("add broadcast", vec![vec![3, 4], vec![4]], |_, v| readout(v[0].add(v[1])?)),
        ("sub", vec![vec![3, 4], vec![3, 1]], |_, v| readout(v[0].sub(v[1])?)),
        ("mul", vec![vec![2, 3], vec![2, 3]], |_, v| readout(v[0].mul(v[1])?)),
        ("div", vec![vec![2, 3], vec![2, 3]], |_, v| readout(v[0].div(v[1].exp())?)),
        ("relu", vec![vec![3, 4]], |_, v| readout(v[0].relu())),
        ("exp", vec![vec![3, 4]], |_, v| readout(v[0].exp())),
        ("ln", vec![vec![3, 4]], |_, v| readout(v[0].mul(v[0])?.add_scalar(0.5).ln())),
        ("clamp", vec![vec![3, 4]], |_, v| readout(v[0].scale(2.0).clamp(-0.7, 0.7))),
        ("sum_axis", vec![vec![2, 3, 4]], |_, v| readout(v[0].sum_axis(1)?)),
        ("mean_axis", vec![vec![2, 3, 4]], |_, v| readout(v[0].mean_axis(2)?)),
        ("permute", vec![vec![2, 3, 4]], |_, v| readout(v[0].permute(&[2, 0, 1])?)),
        ("softmax", vec![vec![3, 5]], |_, v| readout(v[0].scale(3.0).softmax(1)?)),
        ("log_softmax", vec![vec![3, 5]], |_, v| readout(v[0].scale(3.0).log_softmax(0)?)),
        ("layer_norm", vec![vec![3, 6], vec![6], vec![6]], |_, v| {
            readout(v[0].layer_norm(v[1], v[2], 1e-5)?)
        }),
        ("batch_norm", vec![vec![5, 4], vec![4], vec![4]], |_, v| {
            readout(v[0].batch_norm_train(v[1], v[2], 1e-5)?.0)
        }),
        ("l2_normalize", vec![vec![3, 5]], |_, v| readout(v[0].l2_normalize())),
        ("narrow+index_select", vec![vec![5, 3]], |_, v| {
            readout(v[0].narrow(0, 1, 3)?.index_select(&[2, 0, 0, 1])?)
        }),
        ("concat", vec![vec![2, 3], vec![4, 3]], |_, v| readout(concat(&[v[0], v[1]], 0)?)),
        ("bilinear_upsample", vec![vec![2, 3, 2]], |_, v| readout(bilinear_upsample(v[0], 5, 4)?)),
        ("cosine_matrix", vec![vec![3, 6], vec![4, 6]], |_, v| {
            readout(cosine_matrix(v[0].add_scalar(0.6), v[1].add_scalar(0.6))?)
        }),
        ("roi_align", vec![vec![2, 6, 7]], |_, v| {
            let b = BBox {
                x: 6.3,
                y: 3.1,
                w: 31.7,
                h: 22.4,
            };
            readout(roi_align(v[0], &b, 8.0).map_err(|e| autograd::Error::Config(e.to_string()))?)
        }),
    ]
}

fn tiny_ssfl_config() -> SsflConfig {
    SsflConfig {
        in_channels: [3, 3, 3],
        model_dim: 8,
        heads: 2,
        ffn_dim: 8,
        layers: 1,
        shared_encoder: false,
        positional_encoding: true,
        map_channels: 2,
    }
}

fn tiny_pyramid(frame: usize, r: &mut ChaCha8Rng) -> FeaturePyramid {
    FeaturePyramid {
        levels: vec![rand_t(&[3, 4, 4], r), rand_t(&[3, 2, 2], r), rand_t(&[3, 1, 1], r)],
        strides: [8.0, 16.0, 32.0],
        frame,
    }
}

fn to_autograd(e: crate::error::Error) -> autograd::Error {
    match e {
        crate::error::Error::Tensor(t) => t,
        other => autograd::Error::Config(other.to_string()),
    }
}

fn module_checks(out: &mut Vec<CheckResult>) {
    let mut r = rng(11);
    {
        let mut store = ParamStore::new();
        let lin = Linear::new(&mut store, "lin", 4, 3, &mut r).expect("valid");
        let x = rand_t(&[2, 4], &mut r);
        out.push(grad_result(
            "linear params",
            check_params(&store, |g| readout(lin.forward(g, g.input(x.clone()))?), None, 1),
        ));
    }
    {
        let mut store = ParamStore::new();
        let conv = Conv1x1::new(&mut store, "conv", 3, 2, &mut r).expect("valid");
        let x = rand_t(&[3, 2, 3], &mut r);
        out.push(grad_result(
            "conv1x1 params",
            check_params(&store, |g| readout(conv.forward(g, g.input(x.clone()))?), None, 2),
        ));
    }
    {
        let mut store = ParamStore::new();
        let ln = LayerNorm::new(&mut store, "ln", 5).expect("valid");
        let bn = BatchNorm1d::new(&mut store, "bn", 5).expect("valid");
        let x = rand_t(&[4, 5], &mut r);
        out.push(grad_result(
            "layer_norm+batch_norm params",
            check_params(
                &store,
                |g| {
                    let y = ln.forward(g, g.input(x.clone()))?;
                    readout(bn.forward(g, y, Mode::Train)?)
                },
                None,
                3,
            ),
        ));
    }
    {
        let mut store = ParamStore::new();
        let mha = MultiHeadAttention::new(&mut store, "mha", 4, 2, &mut r).expect("valid");
        let q = rand_t(&[1, 3, 4], &mut r);
        let kv = rand_t(&[1, 3, 4], &mut r);
        out.push(grad_result(
            "multi-head attention params",
            check_params(
                &store,
                |g| {
                    let k = g.input(kv.clone());
                    readout(mha.forward(g, g.input(q.clone()), k, k)?)
                },
                None,
                4,
            ),
        ));
    }
    {
        let mut store = ParamStore::new();
        let enc = EncoderLayer::new(&mut store, "enc", 8, 2, 8, &mut r).expect("valid");
        let x = rand_t(&[1, 4, 8], &mut r);
        out.push(grad_result(
            "encoder layer params",
            check_params(&store, |g| readout(enc.forward(g, g.input(x.clone()))?), Some(6), 5),
        ));
    }
    {
        let mut store = ParamStore::new();
        let blk = AttentionBlock::new(&mut store, "blk", 4, 2, 6, &mut r).expect("valid");
        let x = rand_t(&[2, 3, 4], &mut r);
        out.push(grad_result(
            "attention block params",
            check_params(&store, |g| readout(blk.forward(g, g.input(x.clone()))?), Some(6), 6),
        ));
    }
}

struct SsflLossFixture<'a> {
    model: &'a Ssfl,
    pyramids: &'a [FeaturePyramid],
    boxes_prev: &'a [BBox],
    boxes_t: &'a [BBox],
    ids_prev: &'a [i64],
    ids_t: &'a [i64],
    y: &'a Matrix,
    memory: &'a MemoryBank,
    cfg: LossConfig,
}

impl SsflLossFixture<'_> {
    /// Inter-frame, memory and triplet losses on one frame pair, combined.
    fn loss<'g>(&self, g: &'g Graph<'g>) -> Result<Var<'g>> {
        let (m, cfg) = (self.model, &self.cfg);
        let map_prev = m.id_aware_map(g, &self.pyramids[0], &self.pyramids[1])?;
        let map_t = m.id_aware_map(g, &self.pyramids[1], &self.pyramids[2])?;
        let rows = concat(
            &[
                roi_align_rows(map_prev, self.boxes_prev, 8.0)?,
                roi_align_rows(map_t, self.boxes_t, 8.0)?,
            ],
            0,
        )?;
        let f = m.embed(g, rows, Mode::Train)?;
        let np = self.boxes_prev.len();
        let (fp, ft) = (f.narrow(0, 0, np)?, f.narrow(0, np, self.boxes_t.len())?);
        let inter = inter_frame_loss(cosine_matrix(fp, ft)?, self.y, cfg.logit_scale, cfg.logit_center)?;
        let memo = memory_loss(self.memory, ft, self.ids_t, cfg.memory_temperature)?;
        let inner = inner_frame_triplet_loss(ft, fp, self.ids_t, self.ids_prev, cfg.triplet_margin)?;
        total_loss(inter, memo, inner, cfg)
    }
}

fn ssfl_checks(out: &mut Vec<CheckResult>) {
    let mut r = rng(21);
    let mut store = ParamStore::new();
    let model = Ssfl::new(&mut store, tiny_ssfl_config(), &mut r).expect("valid config");
    // Zero-initialized biases put ReLUs exactly on their kink; move off it.
    for p in store.iter_mut().filter(|p| p.trainable) {
        for v in p.value.data_mut() {
            *v += r.random_range(-0.1..0.1);
        }
    }
    let pyramids: Vec<FeaturePyramid> = (0..3).map(|f| tiny_pyramid(f + 1, &mut r)).collect();
    let boxes_prev = [
        BBox::new(1.0, 2.0, 14.0, 20.0).expect("valid"),
        BBox::new(15.0, 6.0, 12.0, 18.0).expect("valid"),
    ];
    let boxes_t = [
        BBox::new(16.5, 7.0, 12.0, 18.0).expect("valid"),
        BBox::new(2.0, 2.5, 14.0, 20.0).expect("valid"),
    ];
    let ids_prev = [1, 2];
    let ids_t = [2, 1];
    let y = label_matrix(&ids_t, &ids_prev);

    out.push(grad_result(
        "ssfl fuse_levels params",
        check_params(
            &store,
            |g| {
                let m = model.id_aware_map(g, &pyramids[0], &pyramids[1]).map_err(to_autograd)?;
                readout(m)
            },
            Some(3),
            7,
        ),
    ));

    let mut memory = MemoryBank::new();
    let mut mr = rng(22);
    for id in [1, 2, 3] {
        let v: Vec<f64> = (0..32).map(|_| mr.random_range(-1.0..1.0)).collect();
        memory.update(&v, id);
    }
    let fixture = SsflLossFixture {
        model: &model,
        pyramids: &pyramids,
        boxes_prev: &boxes_prev,
        boxes_t: &boxes_t,
        ids_prev: &ids_prev,
        ids_t: &ids_t,
        y: &y,
        memory: &memory,
        cfg: LossConfig::default(),
    };
    out.push(grad_result(
        "ssfl total loss params",
        check_params(&store, |g| fixture.loss(g).map_err(to_autograd), Some(3), 8),
    ));
}

fn loss_checks(out: &mut Vec<CheckResult>) {
    let mut r = rng(31);
    let y = Matrix::from_rows(&[&[0.0, 1.0, 0.0], &[0.0, 0.0, 0.0], &[1.0, 0.0, 1.0]]);
    let s = Tensor::uniform(&[3, 3], 0.5, &mut r).map(|v| v + 0.5);
    out.push(grad_result(
        "inter-frame loss",
        check_inputs(&[s], |_, v| inter_frame_loss(v[0], &y, 20.0, 0.5).map_err(to_autograd)),
    ));

    let mut memory = MemoryBank::new();
    for id in [4, 9, 2] {
        let v: Vec<f64> = (0..5).map(|_| r.random_range(-1.0..1.0)).collect();
        memory.update(&v, id);
    }
    let feats = rand_t(&[2, 5], &mut r);
    out.push(grad_result(
        "memory loss",
        check_inputs(&[feats], |_, v| memory_loss(&memory, v[0], &[9, 4], 0.1).map_err(to_autograd)),
    ));

    let ft = rand_t(&[3, 4], &mut r);
    let fp = rand_t(&[3, 4], &mut r);
    out.push(grad_result(
        "inner-frame triplet loss",
        check_inputs(&[ft, fp], |_, v| {
            inner_frame_triplet_loss(v[0], v[1], &[1, 2, 3], &[3, 1, 2], 1.5).map_err(to_autograd)
        }),
    ));

    let a = rand_t(&[3, 4], &mut r).map(|v| v + 1.0);
    let b = rand_t(&[3, 4], &mut r).map(|v| v + 1.0);
    out.push(grad_result(
        "association loss (features)",
        check_inputs(&[a, b], |_, v| {
            let s = paired_cosine(v[0], v[1]).map_err(to_autograd)?;
            asso_loss(s, &[1.0, 0.0, 0.0]).map_err(to_autograd)
        }),
    ));
}

fn msfl_checks(out: &mut Vec<CheckResult>) {
    let mut r = rng(41);
    let cfg = MsflConfig {
        tau: 2,
        dim: 4,
        heads: 2,
        mlp_dim: 6,
        blocks: 2,
        joint_tokens: true,
    };
    let mut store = ParamStore::new();
    let model = Msfl::new(&mut store, cfg.clone(), &mut r).expect("valid config");
    let lost = Tensor::uniform(&[3, 2, 4, 4, 4], 1.0, &mut r).map(|v| v + 0.8);
    let cand = Tensor::uniform(&[3, 2, 4, 4, 4], 1.0, &mut r).map(|v| v + 0.8);
    out.push(grad_result(
        "msfl association loss params",
        check_params(
            &store,
            |g| {
                let build = || -> Result<Var<'_>> {
                    let a = model.forward(g, g.input(lost.clone()), StackKind::Lost)?;
                    let b = model.forward(g, g.input(cand.clone()), StackKind::Candidate)?;
                    asso_loss(paired_cosine(a, b)?, &[1.0, 0.0, 0.0])
                };
                build().map_err(to_autograd)
            },
            Some(4),
            9,
        ),
    ));
    let per_frame = MsflConfig {
        joint_tokens: false,
        ..cfg
    };
    let mut store = ParamStore::new();
    let model = Msfl::new(&mut store, per_frame, &mut r).expect("valid config");
    let stacks = Tensor::uniform(&[2, 2, 4, 4, 4], 1.0, &mut r);
    out.push(grad_result(
        "msfl tracklet feature inputs",
        check_params(
            &store,
            |g| readout(model.forward(g, g.input(stacks.clone()), StackKind::Lost).map_err(to_autograd)?),
            Some(4),
            10,
        ),
    ));
}

/// All finite-difference checks.
pub fn gradient_checks() -> Vec<CheckResult> {
    let mut out = Vec::new();
    let mut r = rng(1);
    for (name, shapes, f) in input_cases() {
        let inputs: Vec<Tensor> = shapes.iter().map(|s| rand_t(s, &mut r)).collect();
        out.push(grad_result(name, check_inputs(&inputs, f)));
    }
    module_checks(&mut out);
    loss_checks(&mut out);
    ssfl_checks(&mut out);
    msfl_checks(&mut out);
    out
}

/// Hungarian against exhaustive search on `count` seeded matrices up to 5×5.
/// Half use small integer costs to force ties.
pub fn hungarian_check(count: usize, seed: u64) -> CheckResult {
    let mut r = rng(seed);
    let mut mismatches = Vec::new();
    for k in 0..count {
        let (m, n) = (r.random_range(1..=5), r.random_range(1..=5));
        let integer = k % 2 == 0;
        let data: Vec<f64> = (0..m * n)
            .map(|_| {
                if integer {
                    f64::from(r.random_range(0..6u8))
                } else {
                    r.random_range(0.0..1.0)
                }
            })
            .collect();
        let cost = Matrix::from_vec(m, n, data).expect("consistent");
        let got = hungarian(&cost).total_score;
        let want = brute_force_min_cost(&cost);
        if got != want {
            mismatches.push(format!("#{k} {m}x{n}: {got} vs {want}"));
        }
    }
    CheckResult::new(
        "assignment",
        format!("hungarian vs brute force ({count})"),
        mismatches.is_empty(),
        if mismatches.is_empty() {
            format!("{count}/{count} exact")
        } else {
            format!("{} mismatches, first {}", mismatches.len(), mismatches[0])
        },
    )
}

fn rec(frame: u32, id: i64, x: f64) -> MotRecord {
    MotRecord {
        frame,
        id,
        x,
        y: 0.0,
        w: 50.0,
        h: 50.0,
        conf: 1.0,
    }
}

/// Three ground-truth tracks over ten frames. The first two result
/// identities swap targets from frame 5, the third misses frame 3, and a
/// false positive appears at frame 8.
pub fn metric_scenario_swap() -> (Vec<MotRecord>, Vec<MotRecord>) {
    let xs = [0.0, 100.0, 200.0];
    let mut gt = Vec::new();
    let mut res = Vec::new();
    for f in 1..=10u32 {
        for (k, &x) in xs.iter().enumerate() {
            gt.push(rec(f, k as i64 + 1, x));
        }
        let (a, b) = if f < 5 { (101, 102) } else { (102, 101) };
        res.push(rec(f, a, xs[0]));
        res.push(rec(f, b, xs[1]));
        if f != 3 {
            res.push(rec(f, 103, xs[2]));
        }
        if f == 8 {
            res.push(rec(f, 104, 400.0));
        }
    }
    (gt, res)
}

/// One target over two frames. At frame 2 the previous hypothesis still
/// overlaps with IoU 0.6 while a new one overlaps perfectly.
pub fn metric_scenario_persistence() -> (Vec<MotRecord>, Vec<MotRecord>) {
    let gt = vec![rec(1, 1, 0.0), rec(2, 1, 0.0)];
    let mut shifted = rec(2, 7, 0.0);
    shifted.x = 25.0 * 50.0 / 100.0;
    shifted.w = 50.0;
    let res = vec![rec(1, 7, 0.0), shifted, rec(2, 8, 0.0)];
    (gt, res)
}

/// One ten-frame target covered by two result identities of five frames each.
pub fn metric_scenario_split() -> (Vec<MotRecord>, Vec<MotRecord>) {
    let gt: Vec<MotRecord> = (1..=10).map(|f| rec(f, 1, 0.0)).collect();
    let res = (1..=10).map(|f| rec(f, if f <= 5 { 5 } else { 6 }, 0.0)).collect();
    (gt, res)
}

fn round4(x: f64) -> f64 {
    (x * 1e4).round() / 1e4
}

pub fn metric_checks() -> Vec<CheckResult> {
    let mut out = Vec::new();
    let (gt, res) = metric_scenario_swap();
    let rep = clearmot(&gt, &res, 0.5);
    let got = (rep.idsw, rep.fn_, rep.fp, round4(rep.mota), rep.frag, round4(rep.idf1), rep.mt, rep.ml);
    let want = (2, 1, 1, 0.8667, 1, 0.7, 3, 0);
    out.push(CheckResult::new(
        "metric",
        "swap scenario",
        got == want,
        format!("(idsw, fn, fp, mota, frag, idf1, mt, ml) = {got:?}"),
    ));

    let (gt, res) = metric_scenario_persistence();
    let rep = clearmot(&gt, &res, 0.5);
    let got = (rep.fp, rep.fn_, rep.idsw, round4(rep.mota));
    out.push(CheckResult::new(
        "metric",
        "persistence scenario",
        got == (1, 0, 0, 0.5),
        format!("(fp, fn, idsw, mota) = {got:?}"),
    ));

    let (gt, res) = metric_scenario_split();
    let v = round4(idf1(&gt, &res, 0.5));
    out.push(CheckResult::new("metric", "5+5 split idf1", v == 0.5, format!("idf1 = {v}")));

    let (gt, _) = metric_scenario_swap();
    let rep = clearmot(&gt, &gt, 0.5);
    let ok = rep.mota == 1.0 && rep.idf1 == 1.0 && rep.fp + rep.fn_ + rep.idsw == 0;
    out.push(CheckResult::new(
        "metric",
        "identity result",
        ok,
        format!("mota {} idf1 {}", rep.mota, rep.idf1),
    ));
    let rep = clearmot(&gt, &[], 0.5);
    out.push(CheckResult::new(
        "metric",
        "empty result",
        rep.mota == 0.0 && rep.fn_ == gt.len(),
        format!("mota {} fn {}", rep.mota, rep.fn_),
    ));
    out
}

fn bank_script(name: &str, f: impl FnOnce() -> Result<String>) -> CheckResult {
    match f() {
        Ok(detail) => CheckResult::new("bank", name, true, detail),
        Err(e) => CheckResult::new("bank", name, false, e.to_string()),
    }
}

fn expect(cond: bool, msg: impl Into<String>) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(crate::error::Error::Config(msg.into()))
    }
}

/// Scripted lifecycle sequences for the tracklet banks.
pub fn bank_checks() -> Vec<CheckResult> {
    let mut out = Vec::new();
    out.push(bank_script("candidate eviction after 20 frames", || {
        let mut banks = TrackletBanks::new(BankConfig::default());
        banks.update(vec![BankEvent::Initialized { track: 1, frame: 100 }], 100)?;
        for f in 101..=120 {
            let ev = banks.update(Vec::new(), f)?;
            expect(ev.candidates.is_empty(), format!("evicted early at frame {f}"))?;
            expect(banks.is_disjoint(), "banks overlap")?;
        }
        let ev = banks.update(Vec::new(), 121)?;
        expect(ev.candidates == vec![1], "not evicted at frame 121")?;
        Ok("kept through frame 120, evicted at 121".into())
    }));
    for (horizon, label) in [(100, "lost eviction (100 frames)"), (BankConfig::DANCE_MAX_LOST_AGE, "lost eviction (30 frames)")] {
        out.push(bank_script(label, || {
            let mut banks = TrackletBanks::new(BankConfig {
                max_lost_age: horizon,
                ..BankConfig::default()
            });
            banks.update(vec![BankEvent::Initialized { track: 3, frame: 1 }], 1)?;
            banks.update(
                vec![BankEvent::Lost {
                    track: 3,
                    last_seen: 10,
                    stack: None,
                }],
                11,
            )?;
            expect(banks.is_disjoint(), "banks overlap after loss")?;
            for f in 12..=10 + horizon {
                let ev = banks.update(Vec::new(), f)?;
                expect(ev.lost.is_empty(), format!("evicted early at frame {f}"))?;
            }
            let ev = banks.update(Vec::new(), 11 + horizon)?;
            expect(ev.lost == vec![3], "not evicted after the horizon")?;
            Ok(format!("evicted {} frames after last sighting", horizon + 1))
        }));
    }
    out.push(bank_script("association and disjointness", || {
        let mut banks = TrackletBanks::new(BankConfig::default());
        let mut r = rng(51);
        let mut next = 1u64;
        let mut live: Vec<u64> = Vec::new();
        for f in 1..=300usize {
            let mut events = Vec::new();
            if r.random_bool(0.3) {
                events.push(BankEvent::Initialized { track: next, frame: f });
                live.push(next);
                next += 1;
            }
            if let Some(&c) = banks.candidates.keys().next() {
                if r.random_bool(0.2) && !events.iter().any(|e| matches!(e, BankEvent::Initialized { track, .. } if *track == c)) {
                    events.push(BankEvent::Lost {
                        track: c,
                        last_seen: f - 1,
                        stack: None,
                    });
                }
            }
            let lost = banks.lost.keys().next().copied();
            let cand = banks.candidates.keys().last().copied();
            if let (Some(l), Some(c)) = (lost, cand) {
                if r.random_bool(0.1) && !events.iter().any(|e| matches!(e, BankEvent::Lost { track, .. } if *track == c)) {
                    events.push(BankEvent::Associated { lost: l, candidate: c });
                }
            }
            banks.update(events, f)?;
            expect(banks.is_disjoint(), format!("banks overlap at frame {f}"))?;
            expect(
                banks.lost.values().all(|e| f - e.lost_frame <= banks.cfg.max_lost_age)
                    && banks.candidates.values().all(|e| f - e.init_frame <= banks.cfg.candidate_max_age),
                format!("age limit exceeded at frame {f}"),
            )?;
        }
        let dup = banks.update(vec![BankEvent::Initialized { track: 1_000_000, frame: 301 }, BankEvent::Initialized { track: 1_000_000, frame: 301 }], 301);
        expect(dup.is_err(), "duplicate admission accepted")?;
        Ok(format!("{} tracks over 300 frames", next - 1))
    }));
    out
}

/// Runs the whole suite.
pub fn run_all() -> VerifyReport {
    let start = Instant::now();
    let mut checks = gradient_checks();
    checks.push(hungarian_check(500, 2024));
    checks.extend(metric_checks());
    checks.extend(bank_checks());
    VerifyReport {
        checks,
        seconds: start.elapsed().as_secs_f64(),
    }
}
