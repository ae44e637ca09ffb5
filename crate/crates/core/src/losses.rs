//! Training objectives and the identity memory bank.

use autograd::{concat, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Probability clip for the association loss.
pub const ASSO_EPS: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// Weight of the memory loss.
    pub lambda1: f64,
    /// Weight of the inner-frame triplet loss.
    pub lambda2: f64,
    pub triplet_margin: f64,
    /// Temperature of the memory-similarity softmax.
    pub memory_temperature: f64,
    /// Inter-frame logits are `scale · (S − center)`; the no-match logit is 0,
    /// i.e. it sits at similarity `center`.
    pub logit_scale: f64,
    pub logit_center: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda1: 0.2,
            lambda2: 1.0,
            triplet_margin: 0.3,
            memory_temperature: 0.1,
            logit_scale: 20.0,
            logit_center: 0.5,
        }
    }
}

/// `y[j][i] = 1` iff previous-frame target `j` and current target `i` share an identity.
pub fn label_matrix(ids_t: &[i64], ids_prev: &[i64]) -> Matrix {
    Matrix::from_fn(ids_prev.len(), ids_t.len(), |j, i| {
        f64::from(u8::from(ids_prev[j] == ids_t[i]))
    })
}

/// Row-wise cross-entropy of similarity rows against the label matrix.
///
/// Rows without a positive get an extra zero logit as the "no match" class
/// and are scored against it; other rows ignore that column.
pub fn inter_frame_loss<'g>(s: Var<'g>, y: &Matrix, scale: f64, center: f64) -> Result<Var<'g>> {
    let shape = s.shape();
    if shape != [y.rows(), y.cols()] {
        return Err(Error::Shape {
            op: "inter_frame_loss",
            left: shape,
            right: vec![y.rows(), y.cols()],
        });
    }
    let (m, n) = (y.rows(), y.cols());
    let g = s.graph();
    if m == 0 {
        return Ok(g.input(Tensor::scalar(0.0)));
    }
    let logits = s.add_scalar(-center).scale(scale);
    let extra = g.input(Tensor::zeros(&[m, 1]));
    let mut mask = vec![0.0; m * (n + 1)];
    let mut target = vec![0.0; m * (n + 1)];
    for j in 0..m {
        let positives: f64 = y.row(j).iter().sum();
        if positives > 0.0 {
            mask[j * (n + 1) + n] = -1e30;
            for i in 0..n {
                target[j * (n + 1) + i] = y.get(j, i) / positives;
            }
        } else {
            target[j * (n + 1) + n] = 1.0;
        }
    }
    // A masked column contributes exp(-huge) = 0 and zero target weight.
    let aug = concat(&[logits, extra], 1)?.add(g.input(Tensor::new(&[m, n + 1], mask)?))?;
    let logp = aug.log_softmax(1)?;
    let target = g.input(Tensor::new(&[m, n + 1], target)?);
    Ok(logp.mul(target)?.sum().scale(-1.0 / m as f64))
}

/// Identity → memory feature store, kept in insertion order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MemoryBank {
    ids: Vec<i64>,
    feats: Vec<Vec<f64>>,
}

fn normalized(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 1e-12 {
        v.iter().map(|x| x / n).collect()
    } else {
        vec![0.0; v.len()]
    }
}

impl MemoryBank {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn contains(&self, id: i64) -> bool {
        self.ids.contains(&id)
    }

    pub fn index_of(&self, id: i64) -> Option<usize> {
        self.ids.iter().position(|&v| v == id)
    }

    pub fn get(&self, id: i64) -> Option<&[f64]> {
        self.index_of(id).map(|i| self.feats[i].as_slice())
    }

    pub fn ids(&self) -> &[i64] {
        &self.ids
    }

    /// Ratio `α` for updating `id` with `feat`: softmax over the normalized
    /// dot products with every memory entry, read at `id`'s entry.
    pub fn ratio(&self, feat: &[f64], id: i64) -> Option<f64> {
        let idx = self.index_of(id)?;
        let q = normalized(feat);
        let dots: Vec<f64> = self
            .feats
            .iter()
            .map(|m| q.iter().zip(normalized(m)).map(|(a, b)| a * b).sum())
            .collect();
        let max = dots.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = dots.iter().map(|d| (d - max).exp()).sum();
        Some((dots[idx] - max).exp() / denom)
    }

    /// `memo ← α·feat + (1−α)·memo`; an unknown identity is inserted as is.
    /// Returns the `α` used.
    pub fn update(&mut self, feat: &[f64], id: i64) -> f64 {
        match self.ratio(feat, id) {
            Some(alpha) => {
                let idx = self.index_of(id).expect("ratio found the id");
                for (m, f) in self.feats[idx].iter_mut().zip(feat) {
                    *m = alpha * f + (1.0 - alpha) * *m;
                }
                alpha
            }
            None => {
                self.ids.push(id);
                self.feats.push(feat.to_vec());
                1.0
            }
        }
    }

    /// `[K, D]` normalized memory features.
    fn normalized_table(&self) -> Tensor {
        let d = self.feats.first().map_or(0, Vec::len);
        let data = self.feats.iter().flat_map(|f| normalized(f)).collect();
        Tensor::new(&[self.feats.len(), d], data).expect("consistent feature lengths")
    }
}

/// Cross-entropy of each feature's memory-similarity softmax against its own
/// identity's entry, summed over the features.
pub fn memory_loss<'g>(bank: &MemoryBank, feats: Var<'g>, ids: &[i64], temperature: f64) -> Result<Var<'g>> {
    let g = feats.graph();
    if ids.is_empty() {
        return Ok(g.input(Tensor::scalar(0.0)));
    }
    let targets = ids
        .iter()
        .map(|&id| bank.index_of(id).ok_or(Error::MissingIdentity(id)))
        .collect::<Result<Vec<_>>>()?;
    let k = bank.len();
    let memo = g.input(bank.normalized_table());
    let logits = feats.l2_normalize().matmul_t(memo)?.scale(1.0 / temperature);
    let logp = logits.log_softmax(1)?;
    let mut onehot = vec![0.0; ids.len() * k];
    for (r, &t) in targets.iter().enumerate() {
        onehot[r * k + t] = 1.0;
    }
    Ok(logp.mul(g.input(Tensor::new(&[ids.len(), k], onehot)?))?.sum().neg())
}

/// Hard-negative triplet loss on cosine distance.
///
/// Each current-frame anchor takes its same-identity feature from the
/// previous frame as positive and the most similar other-identity feature of
/// the current frame as negative. Anchors without a positive are skipped;
/// fewer than two identities in the current frame give 0.
pub fn inner_frame_triplet_loss<'g>(
    feats_t: Var<'g>,
    feats_prev: Var<'g>,
    ids_t: &[i64],
    ids_prev: &[i64],
    margin: f64,
) -> Result<Var<'g>> {
    let g = feats_t.graph();
    let n = ids_t.len();
    let m = ids_prev.len();
    let distinct: std::collections::BTreeSet<i64> = ids_t.iter().copied().collect();
    if distinct.len() < 2 || m == 0 {
        return Ok(g.input(Tensor::scalar(0.0)));
    }
    let nt = feats_t.l2_normalize();
    let np = feats_prev.l2_normalize();
    let cos_tt = nt.matmul_t(nt)?;
    let cos_tp = nt.matmul_t(np)?;
    let tt = cos_tt.value();
    let mut pos_mask = vec![0.0; n * m];
    let mut neg_mask = vec![0.0; n * n];
    let mut valid = vec![0.0; n];
    for i in 0..n {
        let Some(p) = ids_prev.iter().position(|&v| v == ids_t[i]) else {
            continue;
        };
        let neg = (0..n)
            .filter(|&k| ids_t[k] != ids_t[i])
            .max_by(|&a, &b| tt.get(&[i, a]).total_cmp(&tt.get(&[i, b])).then(b.cmp(&a)));
        let Some(k) = neg else { continue };
        pos_mask[i * m + p] = 1.0;
        neg_mask[i * n + k] = 1.0;
        valid[i] = 1.0;
    }
    let count: f64 = valid.iter().sum();
    if count == 0.0 {
        return Ok(g.input(Tensor::scalar(0.0)));
    }
    let pos = cos_tp.mul(g.input(Tensor::new(&[n, m], pos_mask)?))?.sum_axis(1)?;
    let neg = cos_tt.mul(g.input(Tensor::new(&[n, n], neg_mask)?))?.sum_axis(1)?;
    // d_pos − d_neg + margin = cos_neg − cos_pos + margin
    let hinge = neg.sub(pos)?.add_scalar(margin).relu();
    Ok(hinge.mul(g.input(Tensor::vector(valid)))?.sum().scale(1.0 / count))
}

/// `L = L^inter + λ₁·L^memo + λ₂·L^inner`.
pub fn total_loss<'g>(inter: Var<'g>, memo: Var<'g>, inner: Var<'g>, cfg: &LossConfig) -> Result<Var<'g>> {
    Ok(inter.add(memo.scale(cfg.lambda1))?.add(inner.scale(cfg.lambda2))?)
}

pub fn total_loss_value(inter: f64, memo: f64, inner: f64, cfg: &LossConfig) -> f64 {
    inter + cfg.lambda1 * memo + cfg.lambda2 * inner
}

/// Mean binary cross-entropy of similarities against pair labels, with the
/// similarities clipped to `[ε, 1−ε]`.
pub fn asso_loss<'g>(sims: Var<'g>, labels: &[f64]) -> Result<Var<'g>> {
    let n = labels.len();
    if n == 0 {
        return Err(Error::Empty("association loss over zero pairs".into()));
    }
    if sims.shape() != [n] {
        return Err(Error::Shape {
            op: "asso_loss",
            left: sims.shape(),
            right: vec![n],
        });
    }
    let g = sims.graph();
    let p = sims.clamp(ASSO_EPS, 1.0 - ASSO_EPS);
    let y = g.input(Tensor::vector(labels.to_vec()));
    let not_y = g.input(Tensor::vector(labels.iter().map(|l| 1.0 - l).collect()));
    let pos = y.mul(p.ln())?;
    let neg = not_y.mul(p.neg().add_scalar(1.0).ln())?;
    Ok(pos.add(neg)?.sum().scale(-1.0 / n as f64))
}

/// Row-wise clamped cosine between two feature batches, as used by [`asso_loss`].
pub fn paired_cosine<'g>(a: Var<'g>, b: Var<'g>) -> Result<Var<'g>> {
    Ok(a.l2_normalize().mul(b.l2_normalize())?.sum_axis(1)?.clamp(0.0, 1.0))
}
