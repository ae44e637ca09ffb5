//! Appearance back ends for the tracker: the rendered signature map
//! ("oracle") or learned SSFL/MSFL models.

use autograd::nn::Mode;
use autograd::{Graph, ParamStore, Tensor};

use crate::error::{Error, Result};
use crate::msfl::{pooled_tracklet_feature, CropStack, Msfl, StackKind};
use crate::ssfl::{FeaturePyramid, Ssfl};

/// Per-frame appearance input.
#[derive(Debug, Clone)]
pub enum FrameFeatures {
    /// A ready ID-aware map `[C, H, W]` and its stride.
    Map { map: Tensor, stride: f64 },
    Pyramid(FeaturePyramid),
}

pub trait Embedder {
    /// ID-aware map of the current frame and its stride.
    fn id_aware_map(&mut self, features: &FrameFeatures) -> Result<(Tensor, f64)>;
    /// Short-term features from `[C, 4, 4]` crops.
    fn short_features(&self, crops: &[Tensor]) -> Result<Vec<Vec<f64>>>;
    /// Tracklet-level features of stacks that all have kind `kind`.
    fn tracklet_features(&self, stacks: &[&CropStack], kind: StackKind) -> Result<Vec<Vec<f64>>>;
}

fn msfl_or_pooled(
    msfl: &Option<(Msfl, ParamStore)>,
    stacks: &[&CropStack],
    kind: StackKind,
) -> Result<Vec<Vec<f64>>> {
    match msfl {
        Some((model, store)) => model.features(store, stacks, kind),
        None => Ok(stacks.iter().map(|s| pooled_tracklet_feature(s)).collect()),
    }
}

/// Uses the rendered signature map directly. Short-term features are the
/// flattened crops; tracklet features come from an MSFL model when one is
/// given, otherwise from the pooled crops.
#[derive(Debug, Default)]
pub struct OracleEmbedder {
    pub msfl: Option<(Msfl, ParamStore)>,
}

impl Embedder for OracleEmbedder {
    fn id_aware_map(&mut self, features: &FrameFeatures) -> Result<(Tensor, f64)> {
        match features {
            FrameFeatures::Map { map, stride } => Ok((map.clone(), *stride)),
            FrameFeatures::Pyramid(p) => Ok((p.levels[0].clone(), p.strides[0])),
        }
    }

    fn short_features(&self, crops: &[Tensor]) -> Result<Vec<Vec<f64>>> {
        Ok(crops.iter().map(|c| c.data().to_vec()).collect())
    }

    fn tracklet_features(&self, stacks: &[&CropStack], kind: StackKind) -> Result<Vec<Vec<f64>>> {
        msfl_or_pooled(&self.msfl, stacks, kind)
    }
}

/// Runs a trained SSFL model over consecutive pyramids. The first frame is
/// paired with itself.
#[derive(Debug)]
pub struct LearnedEmbedder {
    pub ssfl: Ssfl,
    pub store: ParamStore,
    pub msfl: Option<(Msfl, ParamStore)>,
    prev: Option<FeaturePyramid>,
}

impl LearnedEmbedder {
    pub fn new(ssfl: Ssfl, store: ParamStore, msfl: Option<(Msfl, ParamStore)>) -> Self {
        Self {
            ssfl,
            store,
            msfl,
            prev: None,
        }
    }
}

impl Embedder for LearnedEmbedder {
    fn id_aware_map(&mut self, features: &FrameFeatures) -> Result<(Tensor, f64)> {
        let FrameFeatures::Pyramid(cur) = features else {
            return Err(Error::Config(
                "a learned embedder needs feature pyramids, not ready-made maps".into(),
            ));
        };
        let prev = self.prev.take().unwrap_or_else(|| cur.clone());
        let map = {
            let g = Graph::with_params(&self.store);
            (*self.ssfl.id_aware_map(&g, &prev, cur)?.value()).clone()
        };
        self.prev = Some(cur.clone());
        Ok((map, cur.strides[0]))
    }

    fn short_features(&self, crops: &[Tensor]) -> Result<Vec<Vec<f64>>> {
        if crops.is_empty() {
            return Ok(Vec::new());
        }
        let dim = crops[0].numel();
        let data: Vec<f64> = crops.iter().flat_map(|c| c.data().iter().copied()).collect();
        let g = Graph::with_params(&self.store);
        let rows = g.input(Tensor::new(&[crops.len(), dim], data)?);
        let out = self.ssfl.embed(&g, rows, Mode::Infer)?.value();
        Ok(out.data().chunks(dim).map(<[f64]>::to_vec).collect())
    }

    fn tracklet_features(&self, stacks: &[&CropStack], kind: StackKind) -> Result<Vec<Vec<f64>>> {
        msfl_or_pooled(&self.msfl, stacks, kind)
    }
}
